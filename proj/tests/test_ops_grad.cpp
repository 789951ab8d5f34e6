#include <catch2/catch_amalgamated.hpp>

#include <functional>
#include <vector>

#include "msf/msf.hpp"

using namespace msf;

namespace {

// Reduces a 1xCxHxW activation to a scalar with a fixed random linear
// functional so every element influences the loss.
template <typename T>
Tensor<T> scalarize(const Tensor<T>& x, const Tensor<T>& w, Tape<T>* tape) {
  ConvSpec spec;
  spec.in_channels = x.shape()[1];
  spec.out_channels = 1;
  spec.kernel_h = x.shape()[2];
  spec.kernel_w = x.shape()[3];
  return conv2d<T>(x, w, std::nullopt, spec, tape);
}

template <typename T>
Tensor<T> make_scalarizer(const Shape& activation, Rng& rng) {
  return randn<T>({1, activation[1], activation[2], activation[3]}, rng);
}

double run_check(std::vector<Tensor<double>> params,
                 const std::function<Tensor<double>(Tape<double>&)>& build) {
  std::function<double()> loss_fn = [&]() {
    Tape<double> tape;
    return build(tape).item();
  };
  std::function<void()> backward_fn = [&]() {
    Tape<double> tape;
    Tensor<double> loss = build(tape);
    tape.backward(loss);
  };
  return grad_check<double>(loss_fn, backward_fn, std::move(params)).max_rel_err;
}

ConvSpec make_spec(std::int64_t in_c, std::int64_t out_c, std::int64_t k, std::int64_t stride,
                   std::int64_t padding, std::int64_t dilation = 1, std::int64_t groups = 1) {
  ConvSpec s;
  s.in_channels = in_c;
  s.out_channels = out_c;
  s.kernel_h = s.kernel_w = k;
  s.stride = stride;
  s.padding = padding;
  s.dilation = dilation;
  s.groups = groups;
  return s;
}

}  // namespace

TEST_CASE("grad: conv2d") {
  for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
    Rng rng(seed);
    Tensor<double> x = randn<double>({1, 2, 5, 5}, rng);
    x.set_requires_grad(true);
    Tensor<double> w = randn<double>({3, 2, 3, 3}, rng);
    w.set_requires_grad(true);
    Tensor<double> b = randn<double>({3}, rng);
    b.set_requires_grad(true);
    ConvSpec spec = make_spec(2, 3, 3, 2, 1);
    spec.has_bias = true;
    Tensor<double> red = make_scalarizer<double>({1, 3, 3, 3}, rng);
    auto build = [&](Tape<double>& tape) {
      return scalarize<double>(conv2d<double>(x, w, b, spec, &tape), red, &tape);
    };
    REQUIRE(run_check({x, w, b}, build) < 1e-4);
  }
}

TEST_CASE("grad: conv2d grouped and dilated") {
  for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
    Rng rng(seed * 31);
    Tensor<double> x = randn<double>({1, 4, 7, 7}, rng);
    x.set_requires_grad(true);
    Tensor<double> w = randn<double>({4, 1, 3, 3}, rng);
    w.set_requires_grad(true);
    ConvSpec spec = make_spec(4, 4, 3, 1, 2, 2, 4);
    Tensor<double> red = make_scalarizer<double>({1, 4, 7, 7}, rng);
    auto build = [&](Tape<double>& tape) {
      return scalarize<double>(conv2d<double>(x, w, std::nullopt, spec, &tape), red, &tape);
    };
    REQUIRE(run_check({x, w}, build) < 1e-4);
  }
}

TEST_CASE("grad: depthwise separable conv") {
  for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
    Rng rng(seed * 7 + 1);
    Tensor<double> x = randn<double>({1, 3, 6, 6}, rng);
    x.set_requires_grad(true);
    Tensor<double> dw = randn<double>({3, 1, 3, 3}, rng);
    dw.set_requires_grad(true);
    Tensor<double> pw = randn<double>({5, 3, 1, 1}, rng);
    pw.set_requires_grad(true);
    Tensor<double> red = make_scalarizer<double>({1, 5, 6, 6}, rng);
    auto build = [&](Tape<double>& tape) {
      Tensor<double> y =
          depthwise_separable_conv<double>(x, dw, pw, std::nullopt, 3, 1, 1, &tape);
      return scalarize<double>(y, red, &tape);
    };
    REQUIRE(run_check({x, dw, pw}, build) < 1e-4);
  }
}

TEST_CASE("grad: avg_pool2d") {
  for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
    Rng rng(seed * 13);
    Tensor<double> x = randn<double>({1, 2, 6, 6}, rng);
    x.set_requires_grad(true);
    Tensor<double> red = make_scalarizer<double>({1, 2, 3, 3}, rng);
    auto build = [&](Tape<double>& tape) {
      return scalarize<double>(avg_pool2d<double>(x, 3, 2, 1, &tape), red, &tape);
    };
    REQUIRE(run_check({x}, build) < 1e-4);
  }
}

TEST_CASE("grad: max_pool2d") {
  for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
    Rng rng(seed * 17);
    Tensor<double> x = randn<double>({1, 2, 6, 6}, rng);
    x.set_requires_grad(true);
    Tensor<double> red = make_scalarizer<double>({1, 2, 3, 3}, rng);
    auto build = [&](Tape<double>& tape) {
      return scalarize<double>(max_pool2d<double>(x, 2, 2, 0, &tape), red, &tape);
    };
    REQUIRE(run_check({x}, build) < 1e-4);
  }
}

TEST_CASE("grad: bilinear_resize 3x3 to 5x5") {
  for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
    Rng rng(seed * 19);
    Tensor<double> x = randn<double>({1, 2, 3, 3}, rng);
    x.set_requires_grad(true);
    Tensor<double> red = make_scalarizer<double>({1, 2, 5, 5}, rng);
    auto build = [&](Tape<double>& tape) {
      return scalarize<double>(bilinear_resize<double>(x, 5, 5, &tape), red, &tape);
    };
    REQUIRE(run_check({x}, build) < 1e-4);
  }
}

TEST_CASE("grad: bilinear_resize downscale") {
  for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
    Rng rng(seed * 23);
    Tensor<double> x = randn<double>({1, 1, 6, 6}, rng);
    x.set_requires_grad(true);
    Tensor<double> red = make_scalarizer<double>({1, 1, 3, 3}, rng);
    auto build = [&](Tape<double>& tape) {
      return scalarize<double>(bilinear_resize<double>(x, 3, 3, &tape), red, &tape);
    };
    REQUIRE(run_check({x}, build) < 1e-4);
  }
}

TEST_CASE("grad: batch_norm training mode") {
  for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
    Rng rng(seed * 29);
    Tensor<double> x = randn<double>({2, 3, 4, 4}, rng);
    x.set_requires_grad(true);
    Tensor<double> gamma = rand_uniform<double>({3}, rng, 0.5, 1.5);
    gamma.set_requires_grad(true);
    Tensor<double> beta = randn<double>({3}, rng);
    beta.set_requires_grad(true);
    auto state = BatchNormState<double>::init(3);
    std::vector<LabelMap> targets;
    LabelMap t0(4, 4, 0);
    t0.at(1, 2) = 1;
    t0.at(3, 3) = 2;
    LabelMap t1(4, 4, 2);
    t1.at(0, 0) = 1;
    targets.push_back(t0);
    targets.push_back(t1);
    auto build = [&](Tape<double>& tape) {
      Tensor<double> y = batch_norm<double>(x, gamma, beta, state, true, 0.1, 1e-5, &tape);
      return softmax_cross_entropy<double>(y, targets, kIgnoreIndex, &tape);
    };
    REQUIRE(run_check({x, gamma, beta}, build) < 1e-4);
  }
}

TEST_CASE("grad: batch_norm eval mode") {
  for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
    Rng rng(seed * 37);
    Tensor<double> x = randn<double>({1, 3, 4, 4}, rng);
    x.set_requires_grad(true);
    Tensor<double> gamma = rand_uniform<double>({3}, rng, 0.5, 1.5);
    gamma.set_requires_grad(true);
    Tensor<double> beta = randn<double>({3}, rng);
    beta.set_requires_grad(true);
    BatchNormState<double> state;
    state.running_mean = randn<double>({3}, rng);
    state.running_var = rand_uniform<double>({3}, rng, 0.25, 2.0);
    Tensor<double> red = make_scalarizer<double>({1, 3, 4, 4}, rng);
    auto build = [&](Tape<double>& tape) {
      Tensor<double> y = batch_norm<double>(x, gamma, beta, state, false, 0.1, 1e-5, &tape);
      return scalarize<double>(y, red, &tape);
    };
    REQUIRE(run_check({x, gamma, beta}, build) < 1e-4);
  }
}

TEST_CASE("grad: relu") {
  for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
    Rng rng(seed * 41);
    Tensor<double> x = randn<double>({1, 2, 4, 4}, rng);
    x.set_requires_grad(true);
    Tensor<double> red = make_scalarizer<double>({1, 2, 4, 4}, rng);
    auto build = [&](Tape<double>& tape) {
      return scalarize<double>(relu<double>(x, &tape), red, &tape);
    };
    REQUIRE(run_check({x}, build) < 1e-4);
  }
}

TEST_CASE("grad: add is exact") {
  for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
    Rng rng(seed * 43);
    Tensor<double> a = randn<double>({1, 2, 3, 3}, rng);
    a.set_requires_grad(true);
    Tensor<double> b = randn<double>({1, 2, 3, 3}, rng);
    b.set_requires_grad(true);
    Tensor<double> red = make_scalarizer<double>({1, 2, 3, 3}, rng);
    auto build = [&](Tape<double>& tape) {
      return scalarize<double>(add<double>(a, b, &tape), red, &tape);
    };
    REQUIRE(run_check({a, b}, build) < 1e-10);
  }
}

TEST_CASE("grad: scale") {
  for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
    Rng rng(seed * 47);
    Tensor<double> x = randn<double>({1, 2, 3, 3}, rng);
    x.set_requires_grad(true);
    Tensor<double> red = make_scalarizer<double>({1, 2, 3, 3}, rng);
    auto build = [&](Tape<double>& tape) {
      return scalarize<double>(scale<double>(x, -1.75, &tape), red, &tape);
    };
    REQUIRE(run_check({x}, build) < 1e-10);
  }
}

TEST_CASE("grad: concat_channels") {
  for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
    Rng rng(seed * 53);
    Tensor<double> a = randn<double>({1, 2, 3, 3}, rng);
    a.set_requires_grad(true);
    Tensor<double> b = randn<double>({1, 3, 3, 3}, rng);
    b.set_requires_grad(true);
    Tensor<double> red = make_scalarizer<double>({1, 5, 3, 3}, rng);
    auto build = [&](Tape<double>& tape) {
      return scalarize<double>(concat_channels<double>({a, b}, &tape), red, &tape);
    };
    REQUIRE(run_check({a, b}, build) < 1e-4);
  }
}

TEST_CASE("grad: concat backward slices upstream gradients exactly") {
  Rng rng(99);
  Tensor<double> a = randn<double>({1, 2, 3, 3}, rng);
  a.set_requires_grad(true);
  Tensor<double> b = randn<double>({1, 3, 3, 3}, rng);
  b.set_requires_grad(true);
  Tensor<double> w = randn<double>({1, 5, 3, 3}, rng);

  Tape<double> tape;
  ConvSpec spec;
  spec.in_channels = 5;
  spec.out_channels = 1;
  spec.kernel_h = spec.kernel_w = 3;
  Tensor<double> cat = concat_channels<double>({a, b}, &tape);
  Tensor<double> loss = conv2d<double>(cat, w, std::nullopt, spec, &tape);
  tape.backward(loss);

  // the same functional applied separately to the slices of w
  Tensor<double> a2 = a.clone();
  a2.set_requires_grad(true);
  a2.zero_grad();
  Tensor<double> b2 = b.clone();
  b2.set_requires_grad(true);
  b2.zero_grad();
  std::vector<double> wa(w.data().begin(), w.data().begin() + 2 * 9);
  std::vector<double> wb(w.data().begin() + 2 * 9, w.data().end());
  Tensor<double> w_a = Tensor<double>::from_data({1, 2, 3, 3}, wa);
  Tensor<double> w_b = Tensor<double>::from_data({1, 3, 3, 3}, wb);
  Tape<double> tape2;
  ConvSpec spec_a = spec, spec_b = spec;
  spec_a.in_channels = 2;
  spec_b.in_channels = 3;
  Tensor<double> la = conv2d<double>(a2, w_a, std::nullopt, spec_a, &tape2);
  Tensor<double> lb = conv2d<double>(b2, w_b, std::nullopt, spec_b, &tape2);
  Tensor<double> total = add<double>(la, lb, &tape2);
  tape2.backward(total);

  for (std::int64_t i = 0; i < a.numel(); ++i) REQUIRE(a.grad()[i] == a2.grad()[i]);
  for (std::int64_t i = 0; i < b.numel(); ++i) REQUIRE(b.grad()[i] == b2.grad()[i]);
}

TEST_CASE("grad: softmax cross entropy") {
  for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
    Rng rng(seed * 59);
    Tensor<double> logits = randn<double>({2, 4, 3, 3}, rng);
    logits.set_requires_grad(true);
    std::vector<LabelMap> targets;
    std::uniform_int_distribution<int> cls(0, 3);
    for (int n = 0; n < 2; ++n) {
      LabelMap t(3, 3, 0);
      for (auto& id : t.ids) id = static_cast<std::uint8_t>(cls(rng));
      t.at(n, n) = kIgnoreIndex;
      targets.push_back(t);
    }
    auto build = [&](Tape<double>& tape) {
      return softmax_cross_entropy<double>(logits, targets, kIgnoreIndex, &tape);
    };
    REQUIRE(run_check({logits}, build) < 1e-4);
  }
}

TEST_CASE("grad: composed op chain") {
  for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
    Rng rng(seed * 61);
    Tensor<double> x = randn<double>({1, 2, 8, 8}, rng);
    x.set_requires_grad(true);
    Tensor<double> w = randn<double>({4, 2, 3, 3}, rng, 0.5);
    w.set_requires_grad(true);
    Tensor<double> gamma = rand_uniform<double>({4}, rng, 0.5, 1.5);
    gamma.set_requires_grad(true);
    Tensor<double> beta = randn<double>({4}, rng, 0.25);
    beta.set_requires_grad(true);
    auto state = BatchNormState<double>::init(4);
    LabelMap t(4, 4, 1);
    t.at(0, 0) = 0;
    t.at(2, 3) = 3;
    auto build = [&](Tape<double>& tape) {
      Tensor<double> y = conv2d<double>(x, w, std::nullopt, make_spec(2, 4, 3, 2, 1), &tape);
      y = batch_norm<double>(y, gamma, beta, state, true, 0.1, 1e-5, &tape);
      y = relu<double>(y, &tape);
      y = bilinear_resize<double>(y, 4, 4, &tape);
      return softmax_cross_entropy<double>(y, {t}, kIgnoreIndex, &tape);
    };
    REQUIRE(run_check({x, w, gamma, beta}, build) < 1e-4);
  }
}
