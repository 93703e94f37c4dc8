#include <catch2/catch_amalgamated.hpp>

#include "rearrange/optim.hpp"

using namespace rearrange;

static const ScheduleCfg kPreset{1e-8, 6e-5, 200, 750};

TEST_CASE("schedule endpoints") {
  CHECK(lr_at(0, kPreset) == Catch::Approx(1e-8).margin(0));
  CHECK(lr_at(200, kPreset) == Catch::Approx(6e-5).epsilon(1e-12));
  CHECK(lr_at(750, kPreset) == Catch::Approx(0.0).margin(1e-20));
  CHECK(lr_at(475, kPreset) == Catch::Approx(3e-5).epsilon(1e-12));
}

TEST_CASE("schedule is continuous at the warmup boundary") {
  const double left = lr_at(200, kPreset);
  const double right = lr_at(201, kPreset);
  CHECK(left == Catch::Approx(6e-5).epsilon(1e-12));
  CHECK(std::fabs(right - left) < 1e-8);  // one-epoch cosine step is tiny
}

TEST_CASE("schedule rejects out-of-range epochs") {
  CHECK_THROWS(lr_at(-1, kPreset));
  CHECK_THROWS(lr_at(751, kPreset));
}

TEST_CASE("adamw with lr 0 and no weight decay leaves parameters unchanged") {
  Tensor p = Tensor::from({3}, {1.0f, -2.0f, 0.5f}, true);
  p.ensure_grad();
  p.grad() = {0.3f, -0.1f, 0.2f};
  std::vector<Tensor> params = {p};
  OptimState st;
  st.weight_decay = 0.0;
  st.init(params);
  adamw_step(params, st, 0.0);
  CHECK(p.at(0) == 1.0f);
  CHECK(p.at(1) == -2.0f);
  CHECK(p.at(2) == 0.5f);
  CHECK(st.step_count == 1);
}

TEST_CASE("adamw with zero gradients and no weight decay is a no-op") {
  Tensor p = Tensor::from({2}, {1.0f, 2.0f}, true);
  p.zero_grad();
  std::vector<Tensor> params = {p};
  OptimState st;
  st.weight_decay = 0.0;
  st.init(params);
  adamw_step(params, st, 1e-3);
  CHECK(p.at(0) == 1.0f);
  CHECK(p.at(1) == 2.0f);
  CHECK(st.m[0][0] == 0.0f);
  CHECK(st.v[0][1] == 0.0f);
}

TEST_CASE("single adamw step matches an independent calculation") {
  const double p0 = 0.8, g = 0.25, lr = 1e-2;
  const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, wd = 0.01;
  // Independent evaluation: after one step the bias-corrected moments reduce
  // to mhat = g, vhat = g^2.
  const double m = (1.0 - beta1) * g;
  const double v = (1.0 - beta2) * g * g;
  const double mhat = m / (1.0 - beta1);
  const double vhat = v / (1.0 - beta2);
  const double expect = p0 - lr * (mhat / (std::sqrt(vhat) + eps) + wd * p0);

  Tensor p = Tensor::from({1}, {float(p0)}, true);
  p.ensure_grad();
  p.grad() = {float(g)};
  std::vector<Tensor> params = {p};
  OptimState st;
  st.init(params);
  adamw_step(params, st, lr);
  CHECK(double(p.at(0)) == Catch::Approx(expect).epsilon(1e-6));
}

TEST_CASE("non-finite gradients abort with the parameter name") {
  Tensor p = Tensor::from({1}, {1.0f}, true);
  p.ensure_grad();
  p.grad() = {std::numeric_limits<float>::quiet_NaN()};
  std::vector<Tensor> params = {p};
  std::vector<std::string> names = {"encoder.w"};
  OptimState st;
  st.init(params);
  CHECK_THROWS_WITH(adamw_step(params, st, 1e-3, &names),
                    Catch::Matchers::ContainsSubstring("encoder.w"));
}

TEST_CASE("gradient clipping rescales to the target global norm") {
  Tensor a = Tensor::from({2}, {0.0f, 0.0f}, true);
  Tensor b = Tensor::from({1}, {0.0f}, true);
  a.ensure_grad();
  b.ensure_grad();
  a.grad() = {3.0f, 0.0f};
  b.grad() = {4.0f};
  std::vector<Tensor> params = {a, b};
  const double before = clip_global_norm(params, 1.0);
  CHECK(before == Catch::Approx(5.0));
  double after = std::sqrt(double(a.grad()[0]) * a.grad()[0] + double(b.grad()[0]) * b.grad()[0]);
  CHECK(after == Catch::Approx(1.0).epsilon(1e-6));
}
