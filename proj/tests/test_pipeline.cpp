#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "support.hpp"
#include "wssod/log.hpp"
#include "wssod/pipeline.hpp"

using namespace wssod;
using wssod::testing::TempDir;
using wssod::testing::tiny_run;

namespace {

/// Returns the true box of the object each point was drawn from.
class OracleTeacher : public BoxPredictor {
 public:
  explicit OracleTeacher(const Dataset& data) : data_(data) {}
  ad::Var predict(const ImageSample& img, std::span<const PointAnnotation> points) const override {
    const ManifestEntry& e = data_.entry(img.id);
    std::vector<double> v;
    for (const auto& p : points) {
      const BoxCCWH b = e.objects.at(static_cast<std::size_t>(*p.source_object)).box;
      v.insert(v.end(), {b.cx, b.cy, b.w, b.h});
    }
    return ad::Var::constant({static_cast<int>(points.size()), 4}, v);
  }

 private:
  const Dataset& data_;
};

// One small dataset shared by the suite; generating it per test would dominate the runtime.
class PipelineTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("pipeline");
    data_ = new Dataset(wssod::testing::synthetic_dataset(tiny_run().synthetic, 11, dir_->path()));
  }
  static void TearDownTestSuite() {
    delete data_;
    delete dir_;
  }
  static const Dataset& data() { return *data_; }

 private:
  static inline TempDir* dir_ = nullptr;
  static inline Dataset* data_ = nullptr;
};

}  // namespace

TEST_F(PipelineTest, CellIsDeterministic) {
  const RunConfig cfg = tiny_run();
  const CellResult a = run_cell(cfg, data(), Variant::kPbc, 0.5, 3);
  const CellResult b = run_cell(cfg, data(), Variant::kPbc, 0.5, 3);
  ASSERT_TRUE(a.teacher_map.has_value());
  EXPECT_EQ(a.teacher_map, b.teacher_map);
  EXPECT_EQ(a.student_map, b.student_map);
}

TEST_F(PipelineTest, StageCheckpointsAreDeterministic) {
  const RunConfig cfg = tiny_run();
  const SplitPlan split = make_split(data().manifest(), 0.5, 2);
  const StageResult a = train_teacher_step1(cfg, data(), split);
  const StageResult b = train_teacher_step1(cfg, data(), split);
  EXPECT_EQ(a.checkpoint, b.checkpoint);
  EXPECT_EQ(a.epoch_losses, b.epoch_losses);
  EXPECT_EQ(a.epoch_losses.size(), static_cast<std::size_t>(cfg.step1.epochs));
}

TEST_F(PipelineTest, ResumeMatchesUninterruptedStep1) {
  const RunConfig cfg = tiny_run();
  const SplitPlan split = make_split(data().manifest(), 0.5, 4);
  const StageResult full = train_teacher_step1(cfg, data(), split);
  const StageResult part = train_teacher_step1(cfg, data(), split, {.stop_after_epochs = 1});
  ASSERT_EQ(part.epoch_losses.size(), 1u);
  // round-trip through bytes, as a resumed process would
  const Checkpoint reloaded = checkpoint_from_bytes(checkpoint_bytes(part.checkpoint));
  const StageResult rest = train_teacher_step1(cfg, data(), split, {.resume = &reloaded});
  EXPECT_EQ(rest.checkpoint, full.checkpoint);
  EXPECT_EQ(rest.epoch_losses, full.epoch_losses);
}

TEST_F(PipelineTest, ResumeMatchesUninterruptedStep2AndStep3) {
  const RunConfig cfg = tiny_run();
  const SplitPlan split = make_split(data().manifest(), 0.5, 5);
  const StageResult s1 = train_teacher_step1(cfg, data(), split);

  const StageResult full2 = refine_teacher_step2(cfg, data(), split, s1.checkpoint);
  const StageResult part2 = refine_teacher_step2(cfg, data(), split, s1.checkpoint, {.stop_after_epochs = 1});
  const StageResult rest2 = refine_teacher_step2(cfg, data(), split, s1.checkpoint, {.resume = &part2.checkpoint});
  EXPECT_EQ(rest2.checkpoint, full2.checkpoint);

  const Manifest pseudo = generate_pseudo_labels(teacher_from_checkpoint(full2.checkpoint), data(), split.weak_ids);
  const StageResult full3 = train_student_step3(cfg, data(), split, &pseudo);
  const StageResult part3 = train_student_step3(cfg, data(), split, &pseudo, {.stop_after_epochs = 2});
  const StageResult rest3 = train_student_step3(cfg, data(), split, &pseudo, {.resume = &part3.checkpoint});
  EXPECT_EQ(rest3.checkpoint, full3.checkpoint);
  EXPECT_EQ(rest3.epoch_losses, full3.epoch_losses);

  // a checkpoint from another stage is refused
  EXPECT_THROW(train_student_step3(cfg, data(), split, &pseudo, {.resume = &s1.checkpoint}), CheckpointError);
}

TEST_F(PipelineTest, OracleTeacherReproducesGroundTruth) {
  const SplitPlan split = make_split(data().manifest(), 0.25, 6);
  const OracleTeacher oracle(data());
  const Manifest pseudo = generate_pseudo_labels(oracle, data(), split.weak_ids);
  std::size_t points = 0;
  for (const auto& id : split.weak_ids) points += data().entry(id).points.size();
  std::size_t boxes = 0;
  for (const auto& e : pseudo.entries) {
    const ManifestEntry& truth = data().entry(e.image);
    ASSERT_EQ(e.objects.size(), truth.objects.size());
    for (std::size_t k = 0; k < e.objects.size(); ++k) {
      EXPECT_EQ(e.objects[k].box, truth.objects[k].box);
      EXPECT_EQ(e.objects[k].class_id, truth.objects[k].class_id);
      EXPECT_EQ(e.objects[k].provenance, Provenance::kPseudo);
      EXPECT_TRUE(e.objects[k].box.valid());
    }
    boxes += e.objects.size();
  }
  EXPECT_EQ(boxes, points);
  EXPECT_EQ(pseudo.entries.size(), split.weak_ids.size());
}

TEST_F(PipelineTest, PseudoLabelsFromTrainedTeacherAreValid) {
  const RunConfig cfg = tiny_run();
  const SplitPlan split = make_split(data().manifest(), 0.5, 7);
  const TeacherModel t = teacher_from_checkpoint(train_teacher_step1(cfg, data(), split).checkpoint);
  const Manifest pseudo = generate_pseudo_labels(t, data(), split.weak_ids);
  for (const auto& e : pseudo.entries) {
    ASSERT_EQ(e.objects.size(), data().entry(e.image).points.size());
    for (std::size_t k = 0; k < e.objects.size(); ++k) {
      const BoxXYXY c = to_corners(e.objects[k].box);
      EXPECT_GE(c.x1, -1e-12);
      EXPECT_LE(c.x2, 1 + 1e-12);
      EXPECT_GE(c.y1, -1e-12);
      EXPECT_LE(c.y2, 1 + 1e-12);
      EXPECT_EQ(e.objects[k].class_id, e.points[k].class_id);
    }
  }
}

TEST_F(PipelineTest, WeakImagesWithoutPointsAreSkipped) {
  Manifest m = data().manifest();
  const SplitPlan split = make_split(m, 0.5, 8);
  std::set<std::string> emptied = {split.weak_ids[0], split.weak_ids[1]};
  for (auto& e : m.entries) {
    if (emptied.count(e.image)) e.points.clear();
  }
  const Dataset d(m);
  const Manifest pseudo = generate_pseudo_labels(OracleTeacher(d), d, split.weak_ids);
  EXPECT_EQ(pseudo.entries.size(), split.weak_ids.size() - 2);
  for (const auto& e : pseudo.entries) EXPECT_FALSE(emptied.count(e.image));
}

TEST_F(PipelineTest, PointDetrEqualsPbcWithZeroWeights) {
  RunConfig zero = tiny_run();
  zero.loss.lambda_m = 0.0;
  zero.loss.lambda_c = 0.0;
  const CellResult a = run_cell(zero, data(), Variant::kPbc, 0.5, 9);
  const CellResult b = run_cell(tiny_run(), data(), Variant::kPointDetr, 0.5, 9);
  EXPECT_EQ(a.teacher_map, b.teacher_map);
  EXPECT_EQ(a.student_map, b.student_map);
  const SplitPlan split = make_split(data().manifest(), 0.5, 9);
  RunConfig pd = tiny_run();
  pd.variant = Variant::kPointDetr;
  zero.variant = Variant::kPbc;
  EXPECT_EQ(train_teacher_step1(pd, data(), split).checkpoint, train_teacher_step1(zero, data(), split).checkpoint);
}

TEST_F(PipelineTest, FullFractionVariantsCoincide) {
  const RunConfig cfg = tiny_run();
  const SplitPlan split = make_split(data().manifest(), 1.0, 10);
  ASSERT_TRUE(split.weak_ids.empty());
  const StageResult s1 = train_teacher_step1(cfg, data(), split);
  const StageResult s2 = refine_teacher_step2(cfg, data(), split, s1.checkpoint);
  EXPECT_EQ(s2.checkpoint, s1.checkpoint);
  EXPECT_TRUE(s2.epoch_losses.empty());
  const CellResult box = run_cell(cfg, data(), Variant::kBoxOnly, 1.0, 10);
  const CellResult pd = run_cell(cfg, data(), Variant::kPointDetr, 1.0, 10);
  const CellResult pbc = run_cell(cfg, data(), Variant::kPbc, 1.0, 10);
  EXPECT_FALSE(box.teacher_map.has_value());
  EXPECT_EQ(box.student_map, pd.student_map);
  EXPECT_EQ(box.student_map, pbc.student_map);
}

TEST_F(PipelineTest, EmptySetsAreErrors) {
  const RunConfig cfg = tiny_run();
  SplitPlan split = make_split(data().manifest(), 0.5, 1);
  SplitPlan none = split;
  none.fully_labeled_ids.clear();
  EXPECT_THROW(train_teacher_step1(cfg, data(), none), std::invalid_argument);
  EXPECT_THROW(train_student_step3(cfg, data(), none, nullptr), std::invalid_argument);
  const Manifest empty_pseudo;
  EXPECT_THROW(train_student_step3(cfg, data(), none, &empty_pseudo), std::invalid_argument);
}

TEST(PipelineStep1, LossDecreasesOnDeskData) {
  // the desk synthetic set at fraction 0.1; first five epochs, at most one uptick per seed
  TempDir dir("desk_step1");
  RunConfig cfg = desk_preset();
  const Dataset data = wssod::testing::synthetic_dataset(cfg.synthetic, cfg.data_seed, dir.path());
  cfg.teacher.num_classes = data.manifest().num_classes();
  cfg.student.num_classes = data.manifest().num_classes();
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    cfg.seed = seed;
    const SplitPlan split = make_split(data.manifest(), 0.1, seed);
    const StageResult r = train_teacher_step1(cfg, data, split, {.stop_after_epochs = 5});
    ASSERT_EQ(r.epoch_losses.size(), 5u);
    int violations = 0;
    for (std::size_t e = 1; e < r.epoch_losses.size(); ++e) violations += r.epoch_losses[e] >= r.epoch_losses[e - 1];
    EXPECT_LE(violations, 1) << "seed " << seed;
    EXPECT_LT(r.epoch_losses.back(), r.epoch_losses.front()) << "seed " << seed;
  }
}

TEST_F(PipelineTest, BenchmarkResumesAndRecordsFailures) {
  TempDir dir("bench");
  RunConfig cfg = tiny_run();
  cfg.step1.epochs = 1;
  cfg.step2.epochs = 1;
  cfg.step3.epochs = 1;
  // 0.01 of 19 training images rounds to no labeled image: those cells must fail, not abort
  cfg.bench.fractions = {0.01, 0.5};
  cfg.bench.seeds = {1, 2};
  cfg.bench.variants = {Variant::kBoxOnly, Variant::kPbc};
  cfg.bench.jobs = 2;
  const auto store = dir / "results.jsonl";
  const BenchmarkResult first = run_benchmark(cfg, data(), store);
  ASSERT_EQ(first.cells.size(), 8u);
  int failed = 0;
  for (const auto& c : first.cells) {
    if (!c.ok) {
      ++failed;
      EXPECT_EQ(c.fraction, 0.01);
      EXPECT_FALSE(c.error.empty());
    }
  }
  EXPECT_EQ(failed, 4);
  EXPECT_EQ(load_results(store).size(), 8u);

  // second run only retries the failed cells; ok cells come back untouched
  const BenchmarkResult second = run_benchmark(cfg, data(), store);
  ASSERT_EQ(second.cells.size(), 8u);
  EXPECT_EQ(load_results(store).size(), 12u);
  for (const auto& c : second.cells) {
    for (const auto& f : first.cells) {
      if (c.same_cell(f) && f.ok) EXPECT_EQ(c.student_map, f.student_map);
    }
  }

  emit_report(second, dir.path());
  std::ifstream csv(dir / "results.csv");
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header,
            "variant,fraction,seeds,failed,student_map_mean,student_map_sd,student_map,teacher_map_mean,teacher_map_sd,"
            "teacher_map");
  EXPECT_TRUE(std::filesystem::exists(dir / "map_vs_fraction.svg"));
}

TEST(Results, JsonlRoundTripAndBadLines) {
  CellResult r;
  r.variant = Variant::kPointDetr;
  r.fraction = 0.2;
  r.seed = 7;
  r.teacher_map = 0.125;
  r.student_map = 0.5;
  r.wall_seconds = 3.25;
  const CellResult back = cell_from_jsonl(cell_to_jsonl(r));
  EXPECT_TRUE(back.same_cell(r));
  EXPECT_EQ(back.teacher_map, r.teacher_map);
  EXPECT_EQ(back.student_map, r.student_map);
  EXPECT_TRUE(back.ok);
  CellResult f = r;
  f.ok = false;
  f.teacher_map.reset();
  f.error = "boom";
  const CellResult fb = cell_from_jsonl(cell_to_jsonl(f));
  EXPECT_FALSE(fb.ok);
  EXPECT_EQ(fb.error, "boom");
  EXPECT_FALSE(fb.teacher_map.has_value());

  TempDir dir("jsonl");
  std::ofstream(dir / "r.jsonl") << cell_to_jsonl(r) << "\n{broken\n\n" << cell_to_jsonl(f) << "\n";
  EXPECT_EQ(load_results(dir / "r.jsonl").size(), 2u);
  EXPECT_TRUE(load_results(dir / "none.jsonl").empty());
}
