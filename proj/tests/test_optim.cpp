#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "msf/msf.hpp"

using namespace msf;

namespace {

// Reference Adam written as plain scalar arithmetic, independent of adam_step.
struct RefAdam {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  long step = 0;
  std::vector<double> m, v;

  explicit RefAdam(std::size_t n) : m(n, 0.0), v(n, 0.0) {}

  void update(std::vector<double>& theta, const std::vector<double>& g, double lr, double wd) {
    ++step;
    const double bc1 = 1.0 - std::pow(beta1, double(step));
    const double bc2 = 1.0 - std::pow(beta2, double(step));
    for (std::size_t i = 0; i < theta.size(); ++i) {
      theta[i] -= lr * wd * theta[i];
      m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
      theta[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
    }
  }
};

std::vector<double> values(const Tensor<double>& t) {
  return {t.data().begin(), t.data().end()};
}

}  // namespace

TEST_CASE("cosine schedule hits both endpoints exactly") {
  REQUIRE(cosine_lr(0, 1000, 1e-4, 1e-6) == 1e-4);
  REQUIRE(cosine_lr(1000, 1000, 1e-4, 1e-6) == 1e-6);
  REQUIRE(cosine_lr(0, 1, 0.5, 0.125) == 0.5);
  REQUIRE(cosine_lr(1, 1, 0.5, 0.125) == 0.125);
}

TEST_CASE("cosine schedule midpoint is the arithmetic mean") {
  REQUIRE_THAT(cosine_lr(500, 1000, 1e-4, 1e-6), Catch::Matchers::WithinAbs(5.05e-5, 1e-12));
  REQUIRE_THAT(cosine_lr(1, 2, 1e-4, 1e-6), Catch::Matchers::WithinAbs(5.05e-5, 1e-12));
}

TEST_CASE("cosine schedule matches the closed form elsewhere") {
  const double pi = std::acos(-1.0);
  for (std::int64_t s = 0; s <= 137; ++s) {
    const double want = 1e-6 + 0.5 * (1e-4 - 1e-6) * (1.0 + std::cos(pi * double(s) / 137.0));
    REQUIRE_THAT(cosine_lr(s, 137, 1e-4, 1e-6), Catch::Matchers::WithinAbs(want, 1e-18));
  }
}

TEST_CASE("cosine schedule is monotonically non-increasing") {
  double prev = cosine_lr(0, 400, 1e-4, 1e-6);
  for (std::int64_t s = 1; s <= 400; ++s) {
    const double cur = cosine_lr(s, 400, 1e-4, 1e-6);
    REQUIRE(cur <= prev);
    prev = cur;
  }
}

TEST_CASE("cosine schedule rejects out-of-range steps") {
  REQUIRE_THROWS_AS(cosine_lr(-1, 10, 1e-4, 1e-6), value_error);
  REQUIRE_THROWS_AS(cosine_lr(11, 10, 1e-4, 1e-6), value_error);
  REQUIRE_THROWS_AS(cosine_lr(0, 0, 1e-4, 1e-6), value_error);
  REQUIRE_THROWS_WITH(cosine_lr(12, 10, 1e-4, 1e-6), "cosine_lr: step 12 outside [0, 10]");
}

TEST_CASE("adam with zero gradients and no weight decay leaves parameters alone") {
  Rng rng(11);
  std::vector<Tensor<double>> params = {randn<double>({3, 2}, rng), randn<double>({5}, rng)};
  for (auto& p : params) p.zero_grad();
  std::vector<std::vector<double>> before;
  for (auto& p : params) before.push_back(values(p));

  AdamState<double> state = AdamState<double>::init(params);
  for (int k = 0; k < 4; ++k) adam_step(params, state, 0.1, 0.0);

  for (std::size_t i = 0; i < params.size(); ++i) REQUIRE(values(params[i]) == before[i]);
  REQUIRE(state.step == 4);
}

TEST_CASE("single scalar step matches the hand computation") {
  std::vector<Tensor<double>> params = {Tensor<double>::scalar(1.0)};
  params[0].grad()[0] = 1.0;
  AdamState<double> state = AdamState<double>::init(params);
  adam_step(params, state, 0.1, 0.0);

  // m = 0.1, mhat = 1; v = 1e-3, vhat = 1; theta = 1 - 0.1 / (1 + 1e-8)
  const double want = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
  REQUIRE_THAT(params[0].data()[0], Catch::Matchers::WithinAbs(want, 1e-15));
  REQUIRE_THAT(params[0].data()[0], Catch::Matchers::WithinAbs(0.9, 1e-8));
}

TEST_CASE("several steps track the reference implementation") {
  Rng rng(21);
  std::vector<Tensor<double>> params = {randn<double>({4, 3}, rng), randn<double>({7}, rng)};
  AdamState<double> state = AdamState<double>::init(params);

  std::vector<std::vector<double>> ref_theta;
  std::vector<RefAdam> ref;
  for (auto& p : params) {
    ref_theta.push_back(values(p));
    ref.emplace_back(static_cast<std::size_t>(p.numel()));
  }

  for (int step = 0; step < 6; ++step) {
    const double lr = cosine_lr(step, 6, 1e-2, 1e-4);
    std::vector<std::vector<double>> grads;
    for (auto& p : params) {
      Tensor<double> g = randn<double>(p.shape(), rng);
      grads.push_back(values(g));
      auto span = p.grad();
      for (std::int64_t i = 0; i < p.numel(); ++i) span[i] = grads.back()[size_t(i)];
    }
    adam_step(params, state, lr, 3e-4);
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
      ref[pi].update(ref_theta[pi], grads[pi], lr, 3e-4);
    }
  }

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto got = values(params[pi]);
    for (std::size_t i = 0; i < got.size(); ++i) {
      REQUIRE_THAT(got[i], Catch::Matchers::WithinAbs(ref_theta[pi][i], 1e-15));
    }
  }
}

TEST_CASE("weight decay alone shrinks parameters multiplicatively") {
  std::vector<Tensor<double>> params = {Tensor<double>::from_data({2}, {4.0, -2.0})};
  params[0].zero_grad();
  AdamState<double> state = AdamState<double>::init(params);
  adam_step(params, state, 0.5, 0.1);
  REQUIRE(params[0].data()[0] == 4.0 * (1.0 - 0.05));
  REQUIRE(params[0].data()[1] == -2.0 * (1.0 - 0.05));
}

TEST_CASE("non-finite gradient aborts before touching anything") {
  Rng rng(31);
  std::vector<Tensor<double>> params = {randn<double>({3}, rng), randn<double>({2}, rng)};
  params[0].zero_grad();
  params[1].grad()[1] = std::numeric_limits<double>::quiet_NaN();
  auto before0 = values(params[0]);
  auto before1 = values(params[1]);

  AdamState<double> state = AdamState<double>::init(params);
  REQUIRE_THROWS_WITH(adam_step(params, state, 0.1, 0.0),
                      "adam_step: non-finite gradient in parameter 1; step aborted");
  REQUIRE(values(params[0]) == before0);
  REQUIRE(values(params[1]) == before1);
  REQUIRE(state.step == 0);
  for (double m : state.m[0]) REQUIRE(m == 0.0);

  params[1].grad()[1] = std::numeric_limits<double>::infinity();
  REQUIRE_THROWS_AS(adam_step(params, state, 0.1, 0.0), value_error);
  REQUIRE(state.step == 0);
}

TEST_CASE("state and parameter lists must stay in sync") {
  Rng rng(41);
  std::vector<Tensor<double>> params = {randn<double>({3}, rng)};
  AdamState<double> state = AdamState<double>::init(params);
  params.push_back(randn<double>({2}, rng));
  REQUIRE_THROWS_WITH(adam_step(params, state, 0.1, 0.0),
                      "adam_step: state tracks 1 parameters, got 2");

  params.pop_back();
  params[0] = randn<double>({5}, rng);
  params[0].zero_grad();
  REQUIRE_THROWS_WITH(adam_step(params, state, 0.1, 0.0),
                      "adam_step: parameter 0 shape changed");
}

TEST_CASE("optimizer defaults carry the published constants") {
  AdamState<double> state;
  REQUIRE(state.beta1 == 0.9);
  REQUIRE(state.beta2 == 0.999);
  REQUIRE(state.eps_adam == 1e-8);
  TrainConfig tc;
  REQUIRE(tc.weight_decay == 2.5e-5);
  REQUIRE(tc.lr_max == 1e-4);
  REQUIRE(tc.lr_min == 1e-6);
}
