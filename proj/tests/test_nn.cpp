// Copyright (c) 2026 dermaudit contributors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include "dermaudit/nn/adam.hpp"
#include "dermaudit/nn/layers.hpp"
#include "testutil.hpp"

using namespace dermaudit;
using namespace dermaudit::nn;

namespace {

// Naive convolution oracle: direct quadruple loop.
Tensor<double> conv_reference(const Tensor<double>& x, const Tensor<double>& w,
                              const Tensor<double>& b, std::int64_t stride, std::int64_t pad) {
  const std::int64_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), ww = x.dim(3);
  const std::int64_t cout = w.dim(0), k = w.dim(2);
  const std::int64_t oh = (h + 2 * pad - k) / stride + 1;
  const std::int64_t ow = (ww + 2 * pad - k) / stride + 1;
  Tensor<double> y({n, cout, oh, ow});
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t co = 0; co < cout; ++co) {
      for (std::int64_t oy = 0; oy < oh; ++oy) {
        for (std::int64_t ox = 0; ox < ow; ++ox) {
          double acc = b[co];
          for (std::int64_t ci = 0; ci < cin; ++ci) {
            for (std::int64_t ky = 0; ky < k; ++ky) {
              for (std::int64_t kx = 0; kx < k; ++kx) {
                const std::int64_t iy = oy * stride - pad + ky;
                const std::int64_t ix = ox * stride - pad + kx;
                if (iy < 0 || iy >= h || ix < 0 || ix >= ww) continue;
                acc += x.at(i, ci, iy, ix) * w.at(co, ci, ky, kx);
              }
            }
          }
          y.at(i, co, oy, ox) = acc;
        }
      }
    }
  }
  return y;
}

// Scalar probe loss: weighted sum of the layer output, with fixed weights so
// finite differences see a generic gradient.
double probe_loss(const Tensor<double>& y) {
  double s = 0;
  for (std::int64_t i = 0; i < y.numel(); ++i) {
    s += y[i] * std::sin(0.1 * static_cast<double>(i + 1));
  }
  return s;
}

Tensor<double> probe_grad(const Tensor<double>& y) {
  Tensor<double> g(y.shape());
  for (std::int64_t i = 0; i < g.numel(); ++i) {
    g[i] = std::sin(0.1 * static_cast<double>(i + 1));
  }
  return g;
}

double rel_err(double a, double n) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-8});
}

}  // namespace

TEST_CASE("conv2d forward matches the naive oracle") {
  for (const std::int64_t stride : {1LL, 2LL}) {
    Conv2d<double> conv(3, 5, 3, stride, 1);
    Rng rng(2);
    conv.init(rng);
    auto x = testutil::random_image_batch<double>(2, 8, 3);
    const auto y = conv.forward(x);
    const auto ref = conv_reference(x, conv.weight(), conv.bias(), stride, 1);
    REQUIRE(y.shape() == ref.shape());
    for (std::int64_t i = 0; i < y.numel(); ++i) {
      REQUIRE(y[i] == Catch::Approx(ref[i]).margin(1e-12));
    }
  }
}

TEST_CASE("conv2d backward matches finite differences") {
  Conv2d<double> conv(2, 3, 3, 2, 1);
  Rng rng(4);
  conv.init(rng);
  Tensor<double> x({1, 2, 6, 6});
  for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = 0.1 * std::cos(0.3 * (double)i);

  ParamRegistry<double> reg;
  conv.register_params(reg, "conv");
  reg.zero_grad();
  auto y = conv.forward(x);
  const auto gin = conv.backward(probe_grad(y));

  const double h = 1e-6;
  // weights and bias
  for (auto& e : reg.entries()) {
    for (const std::int64_t idx : {std::int64_t(0), e.value->numel() / 2, e.value->numel() - 1}) {
      const double orig = (*e.value)[idx];
      (*e.value)[idx] = orig + h;
      const double lp = probe_loss(conv.forward(x));
      (*e.value)[idx] = orig - h;
      const double lm = probe_loss(conv.forward(x));
      (*e.value)[idx] = orig;
      CHECK(rel_err((*e.grad)[idx], (lp - lm) / (2 * h)) < 1e-5);
    }
  }
  // input gradient
  for (const std::int64_t idx : {std::int64_t(0), x.numel() / 3, x.numel() - 1}) {
    const double orig = x[idx];
    x[idx] = orig + h;
    const double lp = probe_loss(conv.forward(x));
    x[idx] = orig - h;
    const double lm = probe_loss(conv.forward(x));
    x[idx] = orig;
    CHECK(rel_err(gin[idx], (lp - lm) / (2 * h)) < 1e-5);
  }
}

TEST_CASE("batchnorm backward matches finite differences in training mode") {
  BatchNorm2d<double> bn(3);
  Tensor<double> x({2, 3, 4, 4});
  Rng rng(8);
  for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = rng.normal();
  // non-trivial affine parameters
  ParamRegistry<double> reg;
  bn.register_params(reg, "bn");
  for (auto& e : reg.entries()) {
    for (std::int64_t i = 0; i < e.value->numel(); ++i) {
      (*e.value)[i] += 0.3 * rng.normal();
    }
  }

  reg.zero_grad();
  BatchNorm2d<double> fresh = bn;  // forward mutates running stats; keep a pristine copy
  auto y = fresh.forward(x, true);
  const auto gin = fresh.backward(probe_grad(y));

  const double h = 1e-6;
  const auto loss_with = [&](BatchNorm2d<double> copy, const Tensor<double>& xin) {
    return probe_loss(copy.forward(xin, true));
  };
  // gamma/beta
  auto fresh_reg_entries = [&](BatchNorm2d<double>& layer) {
    ParamRegistry<double> r;
    layer.register_params(r, "bn");
    return r;
  };
  for (std::size_t pi = 0; pi < reg.entries().size(); ++pi) {
    for (const std::int64_t idx : {std::int64_t(0), std::int64_t(2)}) {
      BatchNorm2d<double> plus = bn, minus = bn;
      auto rp = fresh_reg_entries(plus);
      auto rm = fresh_reg_entries(minus);
      (*rp.entries()[pi].value)[idx] += h;
      (*rm.entries()[pi].value)[idx] -= h;
      const double numeric = (loss_with(plus, x) - loss_with(minus, x)) / (2 * h);
      auto ra = fresh_reg_entries(fresh);
      CHECK(rel_err((*ra.entries()[pi].grad)[idx], numeric) < 1e-5);
    }
  }
  // input
  for (const std::int64_t idx : {std::int64_t(0), x.numel() / 2, x.numel() - 1}) {
    Tensor<double> xp = x, xm = x;
    xp[idx] += h;
    xm[idx] -= h;
    const double numeric = (loss_with(bn, xp) - loss_with(bn, xm)) / (2 * h);
    CHECK(rel_err(gin[idx], numeric) < 1e-5);
  }
}

TEST_CASE("batchnorm eval uses running statistics") {
  BatchNorm2d<double> bn(1);
  Tensor<double> x({4, 1, 2, 2});
  Rng rng(3);
  for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = 2.0 + rng.normal();
  for (int step = 0; step < 200; ++step) bn.forward(x, true);
  // Running stats converge toward the batch statistics; eval output should be
  // close to the normalized input.
  const auto y = bn.forward(x, false);
  double mean = 0;
  for (std::int64_t i = 0; i < y.numel(); ++i) mean += y[i];
  mean /= static_cast<double>(y.numel());
  CHECK(std::abs(mean) < 0.05);
}

TEST_CASE("activation backward passes match finite differences") {
  Rng rng(6);
  Tensor<double> x({1, 2, 3, 3});
  for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = rng.normal();

  const double h = 1e-7;
  const auto check_layer = [&](auto make_layer) {
    auto layer = make_layer();
    auto y = layer.forward(x);
    const auto gin = layer.backward(probe_grad(y));
    for (std::int64_t idx = 0; idx < x.numel(); ++idx) {
      Tensor<double> xp = x, xm = x;
      xp[idx] += h;
      xm[idx] -= h;
      auto lp_layer = make_layer();
      auto lm_layer = make_layer();
      const double numeric =
          (probe_loss(lp_layer.forward(xp)) - probe_loss(lm_layer.forward(xm))) / (2 * h);
      CHECK(rel_err(gin[idx], numeric) < 1e-5);
    }
  };
  check_layer([] { return Elu<double>(); });
  check_layer([] { return Relu<double>(); });
  check_layer([] { return Sigmoid<double>(); });
}

TEST_CASE("maxpool picks maxima and routes gradients to them") {
  MaxPool2<double> pool;
  Tensor<double> x({1, 1, 4, 4});
  const double vals[16] = {1, 2, 5, 4, 3, 0, 1, 1, 9, 9, 0, 0, 2, 1, 0, 7};
  for (int i = 0; i < 16; ++i) x[i] = vals[i];
  const auto y = pool.forward(x);
  REQUIRE(y.shape() == std::vector<std::int64_t>{1, 1, 2, 2});
  CHECK(y[0] == 3);  // max of {1,2,3,0}
  CHECK(y[1] == 5);
  CHECK(y[2] == 9);  // tie: first in scan order wins
  CHECK(y[3] == 7);

  Tensor<double> g({1, 1, 2, 2});
  g[0] = 1;
  g[1] = 2;
  g[2] = 3;
  g[3] = 4;
  const auto gin = pool.backward(g);
  CHECK(gin[4] == 1);   // position of 3
  CHECK(gin[2] == 2);   // position of 5
  CHECK(gin[8] == 3);   // first 9 in scan order
  CHECK(gin[15] == 4);  // position of 7
  double total = 0;
  for (std::int64_t i = 0; i < gin.numel(); ++i) total += gin[i];
  CHECK(total == 10);
}

TEST_CASE("nearest upsample doubles and backward sums the quad") {
  UpsampleNearest2<double> up;
  Tensor<double> x({1, 1, 2, 2});
  x[0] = 1;
  x[1] = 2;
  x[2] = 3;
  x[3] = 4;
  const auto y = up.forward(x);
  REQUIRE(y.shape() == std::vector<std::int64_t>{1, 1, 4, 4});
  CHECK(y.at(0, 0, 0, 0) == 1);
  CHECK(y.at(0, 0, 0, 1) == 1);
  CHECK(y.at(0, 0, 1, 1) == 1);
  CHECK(y.at(0, 0, 3, 3) == 4);

  Tensor<double> g(y.shape());
  g.fill(1.0);
  const auto gin = up.backward(g);
  for (std::int64_t i = 0; i < 4; ++i) CHECK(gin[i] == 4.0);
}

TEST_CASE("adam first step moves by ~lr in the gradient direction") {
  ParamRegistry<double> reg;
  Tensor<double> w({2}), g({2});
  w[0] = 1.0;
  w[1] = -2.0;
  reg.add("w", &w, &g);
  Adam<double> adam(reg, 0.01);
  g[0] = 10.0;   // magnitude cancels in mhat/sqrt(vhat) on the first step
  g[1] = -0.001;
  adam.step();
  CHECK(w[0] == Catch::Approx(1.0 - 0.01).epsilon(1e-4));
  CHECK(w[1] == Catch::Approx(-2.0 + 0.01).epsilon(1e-4));
  CHECK(adam.steps_taken() == 1);
}

TEST_CASE("parameter registry accounting") {
  VaeModelT<double> model(testutil::tiny_vae_config());
  model.init(5);
  auto reg = model.build_params();
  CHECK(reg.total_params() > 0);
  CHECK(reg.all_finite());
  reg.zero_grad();
  for (auto& e : reg.entries()) {
    CHECK(e.grad->max_abs() == 0.0);
    CHECK(e.value->same_shape(*e.grad));
  }
}
