#include <gtest/gtest.h>

#include <functional>

#include "support.hpp"
#include "wssod/autodiff.hpp"
#include "wssod/nn.hpp"
#include "wssod/optim.hpp"

using namespace wssod;
using ad::Var;

namespace {

struct OpCase {
  std::string name;
  std::vector<ad::Shape> inputs;
  std::function<Var(const std::vector<Var>&)> fn;
  double lo = -1.0;
  double hi = 1.0;
};

// Reduces an op output to a scalar with fixed random weights so every output entry matters.
double max_rel_error(const OpCase& c, std::uint64_t seed) {
  Rng rng(seed);
  nn::ParameterSet ps;
  std::vector<Var> in;
  for (std::size_t i = 0; i < c.inputs.size(); ++i) {
    std::vector<double> v(ad::numel(c.inputs[i]));
    for (double& x : v) x = rng.uniform(c.lo, c.hi);
    in.push_back(ps.add("x" + std::to_string(i), c.inputs[i], v));
  }
  const Var probe = c.fn(in);
  std::vector<double> w(probe.size());
  for (double& x : w) x = rng.uniform(-1.0, 1.0);
  auto loss = [&] { return ad::sum(ad::mul_const(c.fn(in), w)); };
  double worst = 0.0;
  for (const auto& g : wssod::testing::check_gradients(ps, loss, 8, seed + 1)) worst = std::max(worst, g.rel);
  return worst;
}

}  // namespace

TEST(Autodiff, OpsMatchFiniteDifferences) {
  const std::vector<OpCase> cases = {
      {"add", {{3, 4}, {3, 4}}, [](auto& v) { return v[0] + v[1]; }},
      {"sub", {{3, 4}, {3, 4}}, [](auto& v) { return v[0] - v[1]; }},
      {"mul", {{3, 4}, {3, 4}}, [](auto& v) { return v[0] * v[1]; }},
      {"div", {{3, 4}, {3, 4}}, [](auto& v) { return ad::div(v[0], v[1]); }, 0.5, 2.0},
      {"minimum", {{3, 4}, {3, 4}}, [](auto& v) { return ad::minimum(v[0], v[1]); }},
      {"maximum", {{3, 4}, {3, 4}}, [](auto& v) { return ad::maximum(v[0], v[1]); }},
      {"sigmoid", {{5, 3}}, [](auto& v) { return ad::sigmoid(v[0]); }, -3, 3},
      {"softplus", {{5, 3}}, [](auto& v) { return ad::softplus(v[0]); }, -3, 3},
      {"exp", {{5, 3}}, [](auto& v) { return ad::exp(v[0]); }},
      {"log", {{5, 3}}, [](auto& v) { return ad::log(v[0]); }, 0.2, 3},
      {"sqrt", {{5, 3}}, [](auto& v) { return ad::sqrt(v[0]); }, 0.2, 3},
      {"square", {{5, 3}}, [](auto& v) { return ad::square(v[0]); }},
      {"abs", {{5, 3}}, [](auto& v) { return ad::abs(v[0]); }},
      {"relu", {{5, 3}}, [](auto& v) { return ad::relu(v[0]); }},
      {"row_norm", {{5, 4}}, [](auto& v) { return ad::row_norm(v[0]); }},
      {"row_sum", {{5, 4}}, [](auto& v) { return ad::row_sum(v[0]); }},
      {"mean", {{5, 4}}, [](auto& v) { return ad::mean(v[0]); }},
      {"matmul", {{3, 4}, {4, 5}}, [](auto& v) { return ad::matmul(v[0], v[1]); }},
      {"matmul_nt", {{3, 4}, {5, 4}}, [](auto& v) { return ad::matmul_nt(v[0], v[1]); }},
      {"transpose", {{3, 4}}, [](auto& v) { return ad::transpose(v[0]); }},
      {"add_row", {{3, 4}, {4}}, [](auto& v) { return ad::add_row(v[0], v[1]); }},
      {"softmax_rows", {{3, 6}}, [](auto& v) { return ad::softmax_rows(v[0]); }, -2, 2},
      {"layer_norm", {{3, 6}, {6}, {6}}, [](auto& v) { return ad::layer_norm_rows(v[0], v[1], v[2]); }},
      {"slice_concat",
       {{4, 6}},
       [](auto& v) { return ad::concat_cols({ad::slice_cols(v[0], 4, 2), ad::slice_cols(v[0], 0, 3)}); }},
      {"rows", {{5, 3}}, [](auto& v) { return ad::concat_rows({ad::slice_rows(v[0], 3, 2), ad::slice_rows(v[0], 0, 1)}); }},
      {"gather_rows",
       {{5, 3}},
       [](auto& v) {
         const std::vector<int> idx = {4, 0, 4, 2};
         return ad::gather_rows(v[0], idx);
       }},
      {"affine_cols",
       {{4, 3}},
       [](auto& v) {
         const std::vector<double> s = {-1.0, 2.0, 0.5}, t = {1.0, 0.0, -0.2};
         return ad::affine_cols(v[0], s, t);
       }},
      {"conv2d_s1", {{2, 5, 6}, {3, 2, 3, 3}, {3}}, [](auto& v) { return ad::conv2d(v[0], v[1], v[2], 1, 1); }},
      {"conv2d_s2", {{2, 7, 6}, {3, 2, 3, 3}, {3}}, [](auto& v) { return ad::conv2d(v[0], v[1], v[2], 2, 1); }},
      {"focal",
       {{4, 3}},
       [](auto& v) {
         const std::vector<double> t = {0, 1, 0, 0, 0, 1, 1, 0, 0, 0, 0, 0};
         return ad::sigmoid_focal(v[0], t, 0.25, 2.0);
       },
       -3, 3},
      {"bce",
       {{4, 1}},
       [](auto& v) {
         const std::vector<double> t = {0.2, 0.9, 0.0, 1.0};
         return ad::bce_with_logits(v[0], t);
       },
       -3, 3},
  };
  for (const auto& c : cases) EXPECT_LE(max_rel_error(c, 17), 1e-5) << c.name;
}

TEST(Autodiff, GradientsAccumulateUntilZeroed) {
  Var x = Var::parameter({1}, {2.0});
  ad::backward(ad::square(x));
  ad::backward(ad::square(x));
  EXPECT_DOUBLE_EQ(x.grad()[0], 8.0);
  x.zero_grad();
  ad::backward(ad::square(x), 0.5);
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
}

TEST(Autodiff, StopGradientBlocks) {
  Var x = Var::parameter({1}, {3.0});
  ad::backward(x * ad::stop_gradient(x));
  EXPECT_DOUBLE_EQ(x.grad()[0], 3.0);
}

TEST(Autodiff, NoGradGuardSkipsGraph) {
  Var x = Var::parameter({1}, {3.0});
  {
    ad::NoGradGuard guard;
    EXPECT_FALSE(ad::grad_enabled());
    const Var y = ad::square(x);
    EXPECT_FALSE(y.requires_grad());
    EXPECT_DOUBLE_EQ(y.item(), 9.0);
  }
  EXPECT_TRUE(ad::grad_enabled());
}

TEST(Autodiff, ConvMatchesDirectSum) {
  Rng rng(1);
  std::vector<double> xv(2 * 5 * 5), wv(3 * 2 * 3 * 3), bv(3);
  for (double& v : xv) v = rng.uniform(-1, 1);
  for (double& v : wv) v = rng.uniform(-1, 1);
  for (double& v : bv) v = rng.uniform(-1, 1);
  const Var y = ad::conv2d(Var::constant({2, 5, 5}, xv), Var::constant({3, 2, 3, 3}, wv), Var::constant({3}, bv), 2, 1);
  ASSERT_EQ(y.shape(), (ad::Shape{3, 3, 3}));
  for (int o = 0; o < 3; ++o) {
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) {
        double s = bv[o];
        for (int i = 0; i < 2; ++i) {
          for (int kr = 0; kr < 3; ++kr) {
            for (int kc = 0; kc < 3; ++kc) {
              const int rr = 2 * r - 1 + kr, cc = 2 * c - 1 + kc;
              if (rr < 0 || rr >= 5 || cc < 0 || cc >= 5) continue;
              s += wv[((o * 2 + i) * 3 + kr) * 3 + kc] * xv[(i * 5 + rr) * 5 + cc];
            }
          }
        }
        EXPECT_NEAR(y.value()[(o * 3 + r) * 3 + c], s, 1e-12);
      }
    }
  }
}

TEST(Autodiff, RowNormZeroRowHasZeroGradient) {
  Var x = Var::parameter({2, 2}, {0.0, 0.0, 3.0, 4.0});
  ad::backward(ad::sum(ad::row_norm(x)));
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_EQ(x.grad()[1], 0.0);
  EXPECT_DOUBLE_EQ(x.grad()[2], 0.6);
  EXPECT_DOUBLE_EQ(x.grad()[3], 0.8);
}

TEST(Autodiff, ShapeMismatchThrows) {
  EXPECT_ANY_THROW(ad::add(Var::zeros({2, 2}), Var::zeros({2, 3})));
  EXPECT_ANY_THROW(ad::matmul(Var::zeros({2, 2}), Var::zeros({3, 2})));
}

TEST(Optim, AdamFirstStepMovesByLr) {
  nn::ParameterSet ps;
  Var x = ps.add("x", {2}, {1.0, -1.0});
  optim::Adam opt(ps, {.lr = 0.1});
  ad::backward(ad::sum(ad::square(x)));
  opt.step();
  // the bias-corrected first step is lr * sign(grad)
  EXPECT_NEAR(x.value()[0], 0.9, 1e-7);
  EXPECT_NEAR(x.value()[1], -0.9, 1e-7);
}

TEST(Optim, SgdMomentum) {
  nn::ParameterSet ps;
  Var x = ps.add("x", {1}, {1.0});
  optim::Sgd opt(ps, {.lr = 0.1, .momentum = 0.9, .weight_decay = 0.0});
  for (int i = 0; i < 2; ++i) {
    ps.zero_grad();
    ad::backward(x * 1.0);
    opt.step();
  }
  // v1 = 1, v2 = 1.9
  EXPECT_NEAR(x.value()[0], 1.0 - 0.1 - 0.19, 1e-12);
}

TEST(Optim, StateRoundTripGivesSameTrajectory) {
  auto run = [](bool reload) {
    nn::ParameterSet ps;
    Var x = ps.add("x", {3}, {0.5, -0.2, 0.1});
    optim::Adam opt(ps, {.lr = 0.05});
    for (int i = 0; i < 6; ++i) {
      if (reload && i == 3) {
        const auto st = opt.state();
        const auto steps = opt.steps();
        optim::Adam fresh(ps, {.lr = 0.05});
        fresh.load_state(st, steps);
        opt = fresh;
      }
      ps.zero_grad();
      ad::backward(ad::sum(ad::square(ad::add_scalar(x, -0.3))));
      opt.step();
    }
    return x.value();
  };
  EXPECT_EQ(run(false), run(true));
}

TEST(Optim, ClipGradNorm) {
  nn::ParameterSet ps;
  Var x = ps.add("x", {2}, {3.0, 4.0});
  ad::backward(ad::sum(ad::square(x)) * 0.5);
  const double pre = optim::clip_grad_norm(ps, 1.0);
  EXPECT_DOUBLE_EQ(pre, 5.0);
  EXPECT_NEAR(x.grad()[0], 0.6, 1e-12);
  EXPECT_NEAR(x.grad()[1], 0.8, 1e-12);
}
