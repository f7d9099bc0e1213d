#include <gtest/gtest.h>

#include "support.hpp"
#include "wssod/optim.hpp"
#include "wssod/student.hpp"
#include "wssod/teacher.hpp"

using namespace wssod;
using wssod::testing::random_box;
using wssod::testing::tiny_student;

namespace {

ImageSample noise_image(int side, std::uint64_t seed) {
  Rng rng(seed);
  ImageSample img("n", side, side);
  for (double& v : img.pixels) v = rng.uniform();
  return img;
}

/// Hand-built prediction maps on a grid, all classes at `cls_logit`, distances `dist`, centerness logit `ctr`.
StudentPrediction stub_prediction(int gh, int gw, int classes, double cls_logit, double dist, double ctr) {
  const int n = gh * gw;
  StudentPrediction p;
  p.grid_h = gh;
  p.grid_w = gw;
  p.cls = ad::Var::constant({n, classes}, std::vector<double>(static_cast<std::size_t>(n) * classes, cls_logit));
  p.dist = ad::Var::constant({n, 4}, std::vector<double>(static_cast<std::size_t>(n) * 4, dist));
  p.ctr = ad::Var::constant({n, 1}, std::vector<double>(n, ctr));
  return p;
}

double logit(double p) { return std::log(p / (1.0 - p)); }

// Greedy NMS characterised without running it: the kept set is the unique subset where every
// kept box has no higher-scored kept box above the threshold and every dropped one has one.
std::vector<Detection> nms_oracle(const std::vector<Detection>& dets, double t) {
  const int n = static_cast<int>(dets.size());
  std::vector<std::vector<Detection>> found;
  for (int mask = 0; mask < (1 << n); ++mask) {
    bool ok = true;
    for (int i = 0; i < n && ok; ++i) {
      bool covered = false;
      for (int j = 0; j < n; ++j) {
        if (j != i && (mask >> j & 1) && dets[j].score > dets[i].score && iou(dets[i].box, dets[j].box) > t) covered = true;
      }
      ok = (mask >> i & 1) ? !covered : covered;
    }
    if (!ok) continue;
    std::vector<Detection> kept;
    for (int i = 0; i < n; ++i) {
      if (mask >> i & 1) kept.push_back(dets[i]);
    }
    std::sort(kept.begin(), kept.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
    found.push_back(kept);
  }
  EXPECT_EQ(found.size(), 1u);
  return found.empty() ? std::vector<Detection>{} : found.front();
}

}  // namespace

TEST(Student, GridShapeAndPositiveDistances) {
  StudentConfig cfg;
  cfg.num_classes = 3;
  ASSERT_EQ(cfg.stride(), 8);
  const StudentModel m(cfg, 1);
  ad::NoGradGuard guard;
  const ImageSample img = noise_image(128, 1);
  const StudentPrediction p = m.forward(img);
  EXPECT_EQ(p.grid_h, 16);
  EXPECT_EQ(p.grid_w, 16);
  EXPECT_EQ(p.cls.shape(), (ad::Shape{256, 3}));
  for (double v : p.dist.value()) EXPECT_GE(v, 0.0);
  for (double v : p.cls.value()) EXPECT_TRUE(std::isfinite(v));
  EXPECT_EQ(m.forward(img).dist.value(), p.dist.value());
  EXPECT_EQ(detect(m, img), detect(m, img));
}

TEST(Student, RejectsIndivisibleImage) {
  const StudentModel m(tiny_student(), 1);
  EXPECT_THROW(m.forward(noise_image(30, 1)), ShapeError);
}

TEST(Assign, EmptyTargetsAllNegative) {
  const Assignment a = assign_targets({}, 4, 4);
  EXPECT_EQ(a.num_positive, 0);
  for (int l : a.labels) EXPECT_EQ(l, -1);
}

TEST(Assign, CenterLocationHasUnitCenterness) {
  // location 5 of a 4x4 grid sits at (0.375, 0.375)
  const TrainTarget t = {{1, {0.375, 0.375, 0.5, 0.3}, Provenance::kGroundTruth}};
  const Assignment a = assign_targets(t, 4, 4);
  EXPECT_EQ(a.labels[5], 1);
  EXPECT_DOUBLE_EQ(a.centerness[5], 1.0);
  EXPECT_DOUBLE_EQ(a.ltrb[5 * 4 + 0], 0.25);
  EXPECT_DOUBLE_EQ(a.ltrb[5 * 4 + 1], 0.15);
}

TEST(Assign, PositiveIffInsideSmallestWins) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    TrainTarget t;
    for (int k = 0; k < 3; ++k) t.push_back({k, random_box(rng, 0.1, 0.7), Provenance::kGroundTruth});
    const Assignment a = assign_targets(t, 8, 8);
    int positives = 0;
    for (int i = 0; i < 64; ++i) {
      const Point2 p = location_of(i, 8, 8);
      int best = -1;
      for (int k = 0; k < 3; ++k) {
        const BoxXYXY c = to_corners(t[k].box);
        if (c.x1 < p.x && p.x < c.x2 && c.y1 < p.y && p.y < c.y2 &&
            (best < 0 || c.area() < to_corners(t[best].box).area()))
          best = k;
      }
      EXPECT_EQ(a.box_index[i], best);
      if (best >= 0) {
        ++positives;
        const BoxXYXY c = to_corners(t[best].box);
        EXPECT_NEAR(a.ltrb[i * 4 + 2], c.x2 - p.x, 1e-15);
        EXPECT_GT(a.centerness[i], 0.0);
        EXPECT_LE(a.centerness[i], 1.0);
      }
    }
    EXPECT_EQ(a.num_positive, positives);
  }
}

TEST(Assign, NestedBoxesGoToInner) {
  const TrainTarget t = {{0, {0.5, 0.5, 0.9, 0.9}, Provenance::kGroundTruth},
                         {2, {0.5, 0.5, 0.3, 0.3}, Provenance::kGroundTruth}};
  const Assignment a = assign_targets(t, 8, 8);
  for (int i = 0; i < 64; ++i) {
    const Point2 p = location_of(i, 8, 8);
    if (std::abs(p.x - 0.5) < 0.15 && std::abs(p.y - 0.5) < 0.15) EXPECT_EQ(a.labels[i], 2);
  }
}

TEST(Assign, PseudoWeightOnlyOnPseudoBoxes) {
  const TrainTarget t = {{0, {0.25, 0.5, 0.3, 0.3}, Provenance::kPseudo},
                         {1, {0.75, 0.5, 0.3, 0.3}, Provenance::kGroundTruth}};
  const Assignment a = assign_targets(t, 4, 4, 0.25);
  for (int i = 0; i < 16; ++i) {
    const double expected = a.box_index[i] == 0 ? 0.25 : 1.0;
    EXPECT_EQ(a.weight[i], expected);
  }
}

TEST(Centerness, Formula) {
  EXPECT_DOUBLE_EQ(centerness_target(0.1, 0.2, 0.1, 0.2), 1.0);
  EXPECT_NEAR(centerness_target(0.1, 0.1, 0.3, 0.2), std::sqrt(1.0 / 3.0 * 0.5), 1e-15);
  EXPECT_EQ(centerness_target(0.2, 0.3, 0.4, 0.1), centerness_target(0.4, 0.1, 0.2, 0.3));
}

TEST(StudentLoss, PerfectPredictionNearZero) {
  const TrainTarget t = {{1, {0.4, 0.45, 0.5, 0.4}, Provenance::kGroundTruth}};
  const int g = 8, classes = 3, n = g * g;
  const Assignment a = assign_targets(t, g, g);
  std::vector<double> cls(static_cast<std::size_t>(n) * classes, -30.0), ctr(n, 0.0), dist(static_cast<std::size_t>(n) * 4, 0.05);
  for (int i = 0; i < n; ++i) {
    if (a.labels[i] < 0) continue;
    cls[i * classes + a.labels[i]] = 30.0;
    for (int j = 0; j < 4; ++j) dist[i * 4 + j] = a.ltrb[i * 4 + j];
    ctr[i] = a.centerness[i] >= 1.0 ? 40.0 : logit(a.centerness[i]);
  }
  StudentPrediction p{ad::Var::constant({n, classes}, cls), ad::Var::constant({n, 4}, dist), ad::Var::constant({n, 1}, ctr), g, g};
  const StudentLossTerms terms = loss_student_terms(p, t, tiny_student());
  ASSERT_GT(a.num_positive, 0);
  EXPECT_LT(terms.total.item(), 1e-3);
  EXPECT_GE(terms.total.item(), 0.0);
  EXPECT_NEAR(terms.regression.item(), 0.0, 1e-12);
  EXPECT_NEAR(terms.centerness.item(), 0.0, 1e-9);
}

TEST(StudentLoss, NoPositivesLeavesOnlyClassification) {
  const StudentModel m(tiny_student(), 2);
  const StudentPrediction p = m.forward(noise_image(32, 2));
  const StudentLossTerms terms = loss_student_terms(p, {}, m.config());
  EXPECT_EQ(terms.regression.item(), 0.0);
  EXPECT_EQ(terms.centerness.item(), 0.0);
  EXPECT_GT(terms.classification.item(), 0.0);
  EXPECT_EQ(terms.total.item(), terms.classification.item());
}

TEST(StudentLoss, NonNegativeOnRandomModels) {
  Rng rng(4);
  for (int k = 0; k < 10; ++k) {
    const StudentModel m(tiny_student(), 100 + k);
    TrainTarget t = {{rng.uniform_int(0, 2), random_box(rng, 0.2, 0.6), Provenance::kGroundTruth}};
    EXPECT_GE(loss_student(m.forward(noise_image(32, k)), t, m.config()).item(), 0.0);
  }
}

TEST(StudentLoss, GradientMatchesFiniteDifferences) {
  StudentModel m(tiny_student(), 3);
  const ImageSample img = noise_image(16, 3);
  const TrainTarget t = {{0, {0.4, 0.5, 0.5, 0.6}, Provenance::kGroundTruth},
                         {2, {0.7, 0.3, 0.3, 0.3}, Provenance::kPseudo}};
  const auto checks = wssod::testing::check_gradients(
      m.parameters(), [&] { return loss_student(m.forward(img), t, m.config()); }, 8, 5);
  ASSERT_GE(checks.size(), 3u);
  for (const auto& c : checks) EXPECT_LE(c.rel, 1e-3) << c.name;
}

TEST(StudentLoss, ProvenanceSwapIsIdentity) {
  StudentModel m(tiny_student(), 4);
  const ImageSample img = noise_image(32, 4);
  TrainTarget gt = {{0, {0.3, 0.4, 0.4, 0.3}, Provenance::kGroundTruth},
                    {1, {0.7, 0.6, 0.3, 0.5}, Provenance::kGroundTruth}};
  TrainTarget pseudo = gt;
  for (auto& o : pseudo) o.provenance = Provenance::kPseudo;

  auto grads = [&](const TrainTarget& t, double& value) {
    m.parameters().zero_grad();
    const ad::Var loss = loss_student(m.forward(img), t, m.config());
    value = loss.item();
    ad::backward(loss);
    std::vector<double> g;
    for (const auto& [name, v] : m.parameters().entries()) g.insert(g.end(), v.grad().begin(), v.grad().end());
    return g;
  };
  double a = 0.0, b = 0.0;
  const auto ga = grads(gt, a);
  const auto gb = grads(pseudo, b);
  EXPECT_EQ(a, b);
  EXPECT_EQ(ga, gb);
}

TEST(Nms, Examples) {
  EXPECT_TRUE(nms({}, 0.5).empty());
  const std::vector<Detection> disjoint = {{{0.2, 0.2, 0.1, 0.1}, 0, 0.3}, {{0.8, 0.8, 0.1, 0.1}, 0, 0.9}};
  const auto kept = nms(disjoint, 0.5);
  ASSERT_EQ(kept.size(), 2u);
  EXPECT_EQ(kept[0].score, 0.9);
  const std::vector<Detection> twins = {{{0.5, 0.5, 0.2, 0.2}, 0, 0.8}, {{0.5, 0.5, 0.2, 0.2}, 0, 0.9}};
  const auto one = nms(twins, 0.5);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].score, 0.9);
}

TEST(Nms, ChainOfThree) {
  // a overlaps b, b overlaps c, a and c apart: greedy keeps a and c
  const std::vector<Detection> chain = {{{0.30, 0.5, 0.2, 0.2}, 0, 0.9},
                                        {{0.35, 0.5, 0.2, 0.2}, 0, 0.8},
                                        {{0.40, 0.5, 0.2, 0.2}, 0, 0.7}};
  ASSERT_GT(iou(chain[0].box, chain[1].box), 0.5);
  ASSERT_LT(iou(chain[0].box, chain[2].box), 0.5);
  const auto kept = nms(chain, 0.5);
  EXPECT_EQ(kept, nms_oracle(chain, 0.5));
  ASSERT_EQ(kept.size(), 2u);
  EXPECT_EQ(kept[1].score, 0.7);
}

TEST(Nms, MatchesSubsetOracle) {
  Rng rng(7);
  for (int trial = 0; trial < 300; ++trial) {
    const int n = rng.uniform_int(0, 10);
    std::vector<Detection> dets;
    const BoxCCWH anchor = random_box(rng, 0.2, 0.4);
    for (int i = 0; i < n; ++i) {
      BoxCCWH b = anchor;
      b.cx += rng.uniform(-0.15, 0.15);
      b.cy += rng.uniform(-0.15, 0.15);
      b.w *= rng.uniform(0.7, 1.3);
      dets.push_back({clamp_to_image(b), 0, rng.uniform()});
    }
    const double t = rng.uniform(0.2, 0.7);
    EXPECT_EQ(nms(dets, t), nms_oracle(dets, t));
  }
}

TEST(Decode, SilentMapsGiveNothing) {
  const StudentPrediction p = stub_prediction(4, 4, 3, -1e9, 0.1, 0.0);
  EXPECT_TRUE(decode(p, tiny_student()).empty());
}

TEST(Decode, SingleStrongLocation) {
  StudentPrediction p = stub_prediction(4, 4, 3, -20.0, 0.1, 5.0);
  p.cls.mutable_value()[6 * 3 + 2] = 8.0;
  const auto dets = decode(p, tiny_student());
  ASSERT_EQ(dets.size(), 1u);
  EXPECT_EQ(dets[0].class_id, 2);
  const Point2 c = location_of(6, 4, 4);
  EXPECT_NEAR(dets[0].box.cx, c.x, 1e-12);
  EXPECT_NEAR(dets[0].box.w, 0.2, 1e-12);
  EXPECT_NEAR(dets[0].score, 1.0 / (1 + std::exp(-8.0)) / (1 + std::exp(-5.0)), 1e-12);
}

TEST(Decode, BoxesValidInsideAndSorted) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    StudentConfig cfg = tiny_student();
    cfg.score_threshold = 0.0;
    const StudentModel m(cfg, seed);
    const auto dets = detect(m, noise_image(32, seed));
    ASSERT_FALSE(dets.empty());
    EXPECT_LE(dets.size(), static_cast<std::size_t>(cfg.top_k));
    for (std::size_t i = 0; i < dets.size(); ++i) {
      const BoxXYXY c = to_corners(dets[i].box);
      EXPECT_TRUE(dets[i].box.valid());
      EXPECT_GE(c.x1, -1e-12);
      EXPECT_GE(c.y1, -1e-12);
      EXPECT_LE(c.x2, 1 + 1e-12);
      EXPECT_LE(c.y2, 1 + 1e-12);
      EXPECT_GE(dets[i].score, 0.0);
      EXPECT_LE(dets[i].score, 1.0);
      if (i > 0) EXPECT_GE(dets[i - 1].score, dets[i].score);
    }
  }
}

TEST(Student, TrainingReducesLoss) {
  StudentModel m(tiny_student(), 5);
  const ImageSample img = noise_image(32, 5);
  const TrainTarget t = {{1, {0.5, 0.5, 0.4, 0.4}, Provenance::kGroundTruth}};
  optim::Adam opt(m.parameters(), {.lr = 1e-2});
  const double first = loss_student(m.forward(img), t, m.config()).item();
  for (int s = 0; s < 40; ++s) {
    m.parameters().zero_grad();
    ad::backward(loss_student(m.forward(img), t, m.config()));
    opt.step();
  }
  EXPECT_LT(loss_student(m.forward(img), t, m.config()).item(), 0.5 * first);
}
