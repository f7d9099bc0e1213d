#include <gtest/gtest.h>

#include <fstream>

#include "support.hpp"
#include "wssod/config.hpp"

using namespace wssod;

TEST(Config, DefaultsValidate) {
  const RunConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.loss, (LossWeights{5.0, 2.0, 1.0, 1.0}));
  EXPECT_EQ(c.eval.iou_thresholds, std::vector<double>{0.5});
  EXPECT_EQ(c.variant, Variant::kPbc);
}

TEST(Config, JsonRoundTrip) {
  RunConfig c = desk_preset();
  c.variant = Variant::kPointDetr;
  c.loss.lambda_c = 0.25;
  c.symmetric.mask_on_flipped = true;
  c.step2_mix = Step2Mix::kWeakOnly;
  c.bench.fractions = {0.2};
  const RunConfig back = run_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(back.teacher, c.teacher);
  EXPECT_EQ(back.student, c.student);
}

TEST(Config, OverridesApplyInOrder) {
  const RunConfig c = load_run_config({}, {"loss.lambda_m=0.5", "step1.epochs=7", "variant=box_only", "step1.epochs=9",
                                           "eval.iou_thresholds=[0.5,0.75]", "teacher.box_param=reference_logit"});
  EXPECT_EQ(c.loss.lambda_m, 0.5);
  EXPECT_EQ(c.step1.epochs, 9);
  EXPECT_EQ(c.variant, Variant::kBoxOnly);
  EXPECT_EQ(c.eval.iou_thresholds, (std::vector<double>{0.5, 0.75}));
  EXPECT_EQ(c.teacher.box_param, BoxParam::kReferenceLogit);
}

TEST(Config, Errors) {
  EXPECT_THROW(load_run_config({}, {"loss.lambda_q=1"}), ConfigError);
  EXPECT_THROW(load_run_config({}, {"nothing"}), ConfigError);
  EXPECT_THROW(load_run_config({}, {"step1.epochs=\"many\""}), ConfigError);
  EXPECT_THROW(load_run_config({}, {"step1=3"}), ConfigError);
  EXPECT_THROW(load_run_config({}, {"variant=fancy"}), ConfigError);
  EXPECT_THROW(load_run_config({}, {"bench.fractions=[0.0]"}), ConfigError);
  EXPECT_THROW(load_run_config({}, {"teacher.num_classes=4"}), ConfigError);
  EXPECT_THROW(load_run_config({}, {"loss.lambda_c=-1"}), std::exception);
  EXPECT_THROW(load_run_config("/nonexistent/config.json", {}), ConfigError);
}

TEST(Config, FileThenOverrides) {
  wssod::testing::TempDir dir("cfg");
  std::ofstream(dir / "c.json") << R"({"seed": 5, "loss": {"lambda_c": 0.5}, "step3": {"epochs": 2}})";
  const RunConfig c = load_run_config(dir / "c.json", {"seed=6"});
  EXPECT_EQ(c.seed, 6u);
  EXPECT_EQ(c.loss.lambda_c, 0.5);
  EXPECT_EQ(c.step3.epochs, 2);
  EXPECT_EQ(c.step3.batch_size, RunConfig{}.step3.batch_size);
  std::ofstream(dir / "bad.json") << R"({"seed": 5,)";
  EXPECT_THROW(load_run_config(dir / "bad.json", {}), ConfigError);
  std::ofstream(dir / "unknown.json") << R"({"teacher": {"depth": 3}})";
  EXPECT_THROW(load_run_config(dir / "unknown.json", {}), ConfigError);
}

TEST(Config, VariantLossWeights) {
  RunConfig c;
  c.loss = {5.0, 2.0, 0.7, 0.3};
  c.variant = Variant::kPbc;
  EXPECT_EQ(c.effective_loss(), c.loss);
  c.variant = Variant::kPointDetr;
  EXPECT_EQ(c.effective_loss(), (LossWeights{5.0, 2.0, 0.0, 0.0}));
  for (Variant v : {Variant::kBoxOnly, Variant::kPointDetr, Variant::kPbc}) EXPECT_EQ(parse_variant(variant_name(v)), v);
}

TEST(Config, DeskPreset) {
  const RunConfig c = desk_preset();
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.synthetic.height, 64);
  EXPECT_EQ(c.synthetic.num_images, 750);
  EXPECT_EQ(c.teacher.box_param, BoxParam::kPointDistances);
  EXPECT_EQ(RunConfig{}.teacher.box_param, BoxParam::kAbsolute);
  EXPECT_EQ(c.synthetic.height % c.teacher.stride(), 0);
  EXPECT_EQ(c.synthetic.height % c.student.stride(), 0);
  const RunConfig o = load_run_config({}, {"step1.epochs=2"}, desk_preset());
  EXPECT_EQ(o.step1.epochs, 2);
  EXPECT_EQ(o.teacher, c.teacher);
}
