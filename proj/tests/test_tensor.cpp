#include <cmath>
#include <vector>

#include "doctest.h"
#include "graftkit/grad_check.hpp"
#include "graftkit/ops.hpp"
#include "graftkit/rng.hpp"

using namespace graftkit;

namespace {

constexpr DType f64 = DType::kF64;

Tensor randn(Rng& rng, const Shape& s, double std = 1.0) { return rng.normal_tensor(s, std, f64); }

// Weighted sum so that no primitive is checked through a degenerate loss.
Tensor probe_loss(const Tensor& y, std::uint64_t seed) {
  Rng rng(seed);
  Tensor w = rng.normal_tensor(y.shape(), 1.0, y.dtype());
  return ops::sum(ops::mul(y, w));
}

void expect_grad_ok(const std::function<Tensor(const Tensor&)>& f, const Tensor& x) {
  const auto r = grad_check([&](const Tensor& v) { return probe_loss(f(v), 99); }, x, 1e-5, 1e-4);
  INFO("max relative error " << r.max_error << " at " << r.worst_index);
  CHECK(r.pass);
}

}  // namespace

TEST_CASE("row_softmax of equal logits is uniform") {
  const Tensor y = ops::row_softmax(Tensor::from_values({0, 0}, {1, 2}));
  CHECK(y.to_vector() == std::vector<double>{0.5, 0.5});
}

TEST_CASE("delta filter makes the causal conv the identity") {
  const Tensor x = Tensor::from_values({1, 2, 3}, {1, 3, 1});
  const Tensor f = Tensor::from_values({1, 0, 0, 0}, {1, 4});
  CHECK(ops::depthwise_causal_conv1d(x, f).to_vector() == std::vector<double>{1, 2, 3});
}

TEST_CASE("matmul by identity") {
  const Tensor a = Tensor::from_values({1, 2, 3, 4}, {2, 2});
  const Tensor i = Tensor::from_values({1, 0, 0, 1}, {2, 2});
  CHECK(ops::matmul(a, i).to_vector() == std::vector<double>{1, 2, 3, 4});
}

TEST_CASE("shape mismatch names the primitive and both shapes") {
  const Tensor a = Tensor::zeros({2, 3});
  const Tensor b = Tensor::zeros({2, 3});
  try {
    ops::matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2,3]") != std::string::npos);
  }
  CHECK_THROWS_AS(ops::add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), ShapeError);
}

TEST_CASE("non-finite outputs are rejected") {
  const Tensor big = Tensor::from_values({1e200}, {1}, f64);
  CHECK_THROWS_AS(ops::mul(big, big), NumericError);
}

TEST_CASE("backward of sum of squares is 2x") {
  Tensor x = Tensor::from_values({1, -2, 3}, {3}, f64);
  x.set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  const Tensor loss = ops::sum(ops::mul(x, x));
  tape.backward(loss);
  CHECK(x.grad().to_vector() == std::vector<double>{2, -4, 6});

  SUBCASE("repeated backward accumulates") {
    tape.backward(loss);
    CHECK(x.grad().to_vector() == std::vector<double>{4, -8, 12});
  }
}

TEST_CASE("sum of softmax has zero gradient") {
  Rng rng(1);
  Tensor x = randn(rng, {3, 5});
  x.set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  tape.backward(ops::sum(ops::row_softmax(x)));
  for (double g : x.grad().to_vector()) CHECK(std::abs(g) < 1e-12);
}

TEST_CASE("matmul gradients match central differences") {
  Rng rng(2);
  const Tensor a = randn(rng, {3, 3});
  const Tensor b = randn(rng, {3, 3});
  const auto wrt_a = grad_check([&](const Tensor& v) { return ops::sum(ops::matmul(v, b)); }, a);
  const auto wrt_b = grad_check([&](const Tensor& v) { return ops::sum(ops::matmul(a, v)); }, b);
  CHECK(wrt_a.pass);
  CHECK(wrt_b.pass);
  CHECK(wrt_a.max_error < 1e-4);
}

TEST_CASE("backward rejects non-scalar and untracked losses") {
  Tensor x = Tensor::from_values({1, 2}, {2}, f64);
  x.set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  const Tensor y = ops::mul(x, x);
  CHECK_THROWS_AS(tape.backward(y), AutogradError);
  CHECK_THROWS_AS(tape.backward(ops::sum(y).detach()), AutogradError);
  Tape other;
  CHECK_THROWS_AS(other.backward(ops::sum(y)), AutogradError);
}

TEST_CASE("tape is topologically ordered") {
  Tensor x = Tensor::from_values({1, 2}, {2}, f64);
  x.set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  const Tensor y = ops::sum(ops::gelu(ops::scale(x, 2.0)));
  REQUIRE(tape.size() == 3);
  CHECK(tape.node(0).op == "scale");
  CHECK(tape.node(1).op == "gelu");
  CHECK(tape.node(2).op == "sum");
  for (std::size_t i = 0; i < tape.size(); ++i) {
    for (const auto& in : tape.node(i).inputs) {
      if (in->tape == &tape) CHECK(in->node < static_cast<std::int64_t>(i));
    }
  }
}

TEST_CASE("grad_check examples") {
  Rng rng(3);
  SUBCASE("sum of squares passes") {
    const auto r = grad_check([](const Tensor& v) { return ops::sum(ops::mul(v, v)); },
                              randn(rng, {8}));
    CHECK(r.pass);
  }
  SUBCASE("layernorm passes") {
    const Tensor x = randn(rng, {2, 4});
    const Tensor w = randn(rng, {2, 4});
    const auto r = grad_check([&](const Tensor& v) { return ops::mean(ops::mul(ops::layernorm(v), w)); }, x);
    CHECK(r.pass);
    // mean(layernorm(x)) itself is identically zero, so its gradient must vanish.
    Tensor leaf = x.clone().set_requires_grad(true);
    Tape tape;
    TapeScope scope(tape);
    tape.backward(ops::mean(ops::layernorm(leaf)));
    for (double g : leaf.grad().to_vector()) CHECK(std::abs(g) < 1e-10);
  }
  SUBCASE("a sign-flipped backward fails") {
    auto bad_square = [](const Tensor& v) {
      std::vector<double> y;
      for (double e : v.to_vector()) y.push_back(e * e);
      Tensor out = Tensor::from_values(y, v.shape(), f64);
      return detail::record("bad_square", {v}, out, [v](const Storage& gs, std::span<Storage* const> gin) {
        const auto& g = std::get<std::vector<double>>(gs);
        auto& gx = std::get<std::vector<double>>(*gin[0]);
        const auto xv = v.data<double>();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] -= 2.0 * xv[i] * g[i];
      });
    };
    const auto r = grad_check([&](const Tensor& v) { return ops::sum(bad_square(v)); }, randn(rng, {6}));
    CHECK_FALSE(r.pass);
  }
  SUBCASE("non-64-bit input rejected") {
    CHECK_THROWS(grad_check([](const Tensor& v) { return ops::sum(v); }, Tensor::zeros({2})));
  }
}

TEST_CASE("every primitive passes grad_check on random shapes") {
  Rng rng(4);
  const std::vector<Shape> shapes{{2, 3, 4}, {4, 16, 32}, {1, 5, 7}};
  for (const auto& s : shapes) {
    CAPTURE(to_string(s));
    const Tensor x = randn(rng, s);
    const Tensor other = randn(rng, s);
    const Tensor row = randn(rng, {s.back()});
    const Tensor mid = randn(rng, {s[0], 1, s[2]});
    expect_grad_ok([](const Tensor& v) { return ops::gelu(v); }, x);
    expect_grad_ok([](const Tensor& v) { return ops::silu(v); }, x);
    expect_grad_ok([](const Tensor& v) { return ops::layernorm(v); }, x);
    expect_grad_ok([](const Tensor& v) { return ops::row_softmax(v); }, x);
    expect_grad_ok([](const Tensor& v) { return ops::row_softmax(v, 1); }, x);
    expect_grad_ok([](const Tensor& v) { return ops::scale(v, -1.7); }, x);
    expect_grad_ok([](const Tensor& v) { return ops::huber(v, 0.8); }, x);
    expect_grad_ok([&](const Tensor& v) { return ops::add(v, row); }, x);
    expect_grad_ok([&](const Tensor& v) { return ops::add(row, v); }, x);
    expect_grad_ok([&](const Tensor& v) { return ops::mul(v, mid); }, x);
    expect_grad_ok([&](const Tensor& v) { return ops::mul(other, v); }, x);
    expect_grad_ok([&](const Tensor& v) { return ops::sub(other, v); }, x);
    expect_grad_ok([&](const Tensor& v) { return ops::mul(x, v); }, mid);
    expect_grad_ok([](const Tensor& v) { return ops::mean(ops::mul(v, v)); }, x);
    expect_grad_ok([&](const Tensor& v) { return ops::reshape(v, {s[0] * s[1], s[2]}); }, x);
    expect_grad_ok([](const Tensor& v) { return ops::transpose(v, 0, 2); }, x);
    expect_grad_ok([](const Tensor& v) { return ops::transpose(v, 1, 2); }, x);
    expect_grad_ok([&](const Tensor& v) { return ops::concat_last({v, other, v}); }, x);
    expect_grad_ok([&](const Tensor& v) { return ops::slice_last(v, 1, s[2] - 2); }, x);
    expect_grad_ok([&](const Tensor& v) { return ops::slice_first(v, 0, 1); }, x);

    const Tensor w = randn(rng, {s[2], 6});
    expect_grad_ok([&](const Tensor& v) { return ops::matmul(v, w); }, x);
    expect_grad_ok([&](const Tensor& v) { return ops::matmul(x, v); }, w);

    const Tensor wb = randn(rng, {6});
    expect_grad_ok([&](const Tensor& v) { return ops::linear(v, w, wb); }, x);
    expect_grad_ok([&](const Tensor& v) { return ops::linear(x, v, wb); }, w);
    expect_grad_ok([&](const Tensor& v) { return ops::linear(x, w, v); }, wb);

    const Tensor shift = randn(rng, {s[0], s[2]});
    const Tensor scl = randn(rng, {s[0], s[2]});
    expect_grad_ok([&](const Tensor& v) { return ops::modulate(v, shift, scl); }, x);
    expect_grad_ok([&](const Tensor& v) { return ops::modulate(x, v, scl); }, shift);
    expect_grad_ok([&](const Tensor& v) { return ops::modulate(x, shift, v); }, scl);

    const std::int64_t hd = s[2] % 2 == 0 ? 2 : 3;
    const std::int64_t nh = (s[2] - 1) / hd;
    expect_grad_ok([&](const Tensor& v) { return ops::split_heads(v, 1, nh, hd); }, x);
    const Tensor heads = randn(rng, {s[0], 2, s[1], 3});
    expect_grad_ok([](const Tensor& v) { return ops::merge_heads(v); }, heads);

    const Tensor bt = randn(rng, {s[0], s[1], s[2]});
    for (bool ta : {false, true}) {
      for (bool tb : {false, true}) {
        CAPTURE(ta);
        CAPTURE(tb);
        const Tensor a = ta ? ops::transpose(x, 1, 2).detach() : x;
        const Tensor b = tb ? bt : ops::transpose(bt, 1, 2).detach();
        expect_grad_ok([&](const Tensor& v) { return ops::batched_matmul(v, b, ta, tb); }, a);
        expect_grad_ok([&](const Tensor& v) { return ops::batched_matmul(a, v, ta, tb); }, b);
      }
    }

    const Tensor filt = randn(rng, {s[2], 4});
    const Tensor bias = randn(rng, {s[2]});
    expect_grad_ok([&](const Tensor& v) { return ops::depthwise_causal_conv1d(v, filt, bias); }, x);
    expect_grad_ok([&](const Tensor& v) { return ops::depthwise_causal_conv1d(x, v, bias); }, filt);
    expect_grad_ok([&](const Tensor& v) { return ops::depthwise_causal_conv1d(x, filt, v); }, bias);

    const std::vector<std::int64_t> idx{2, 0, 2, 1};
    const Tensor table = randn(rng, {3, s[2]});
    expect_grad_ok([&](const Tensor& v) { return ops::embedding(v, idx); }, table);
  }
  // abs away from its kink
  Tensor away = Tensor::from_values({0.5, -1.25, 2.0, -0.3}, {4}, f64);
  expect_grad_ok([](const Tensor& v) { return ops::abs(v); }, away);
}

TEST_CASE("fused primitives equal their composed forms") {
  Rng rng(12);
  const Tensor x = randn(rng, {3, 5, 8});
  const Tensor w = randn(rng, {8, 6});
  const Tensor b = randn(rng, {6});
  CHECK(max_abs_diff(ops::linear(x, w, b), ops::add(ops::matmul(x, w), b)) < 1e-12);
  CHECK(max_abs_diff(ops::linear(x, w, Tensor{}), ops::matmul(x, w)) == 0.0);

  const Tensor shift = randn(rng, {3, 8});
  const Tensor scale = randn(rng, {3, 8});
  const Tensor one = Tensor::scalar(1.0, f64);
  const Tensor composed = ops::add(ops::mul(x, ops::reshape(ops::add(scale, one), {3, 1, 8})),
                                   ops::reshape(shift, {3, 1, 8}));
  CHECK(max_abs_diff(ops::modulate(x, shift, scale), composed) < 1e-12);

  // split_heads is slice + reshape + transpose; merge_heads undoes it exactly.
  const Tensor split = ops::split_heads(x, 2, 3, 2);
  const Tensor ref = ops::transpose(ops::reshape(ops::slice_last(x, 2, 6), {3, 5, 3, 2}), 1, 2);
  CHECK(max_abs_diff(split, ref) == 0.0);
  CHECK(max_abs_diff(ops::merge_heads(split), ops::slice_last(x, 2, 6)) == 0.0);

  CHECK_THROWS_AS(ops::split_heads(x, 4, 3, 2), ShapeError);
  CHECK_THROWS_AS(ops::linear(x, w, randn(rng, {5})), ShapeError);
  CHECK_THROWS_AS(ops::modulate(x, shift, randn(rng, {3, 1, 8})), ShapeError);
}

TEST_CASE("row_softmax rows are stochastic") {
  Rng rng(5);
  for (std::int64_t band : {-1, 0, 2}) {
    const Tensor y = ops::row_softmax(rng.normal_tensor({3, 9, 9}, 3.0), band);
    const auto v = y.to_vector();
    for (std::size_t r = 0; r < 27; ++r) {
      double total = 0;
      for (std::size_t j = 0; j < 9; ++j) {
        CHECK(v[r * 9 + j] >= 0.0);
        if (band >= 0 && std::abs(static_cast<long>(r % 9) - static_cast<long>(j)) > band) {
          CHECK(v[r * 9 + j] == 0.0);
        }
        total += v[r * 9 + j];
      }
      CHECK(std::abs(total - 1.0) <= 1e-6);
    }
  }
}

TEST_CASE("causal conv ignores the future exactly") {
  Rng rng(6);
  const Tensor x = rng.normal_tensor({2, 12, 5});
  const Tensor f = rng.normal_tensor({5, 4});
  const Tensor y = ops::depthwise_causal_conv1d(x, f);
  for (std::int64_t s = 0; s < 12; ++s) {
    Tensor x2 = x.clone();
    auto d = x2.mutable_data<float>();
    for (std::int64_t t = s + 1; t < 12; ++t)
      for (std::int64_t c = 0; c < 5; ++c) d[static_cast<std::size_t>((1 * 12 + t) * 5 + c)] += 3.0f;
    const Tensor y2 = ops::depthwise_causal_conv1d(x2, f);
    const auto a = y.to_vector();
    const auto b = y2.to_vector();
    for (std::int64_t t = 0; t <= s; ++t)
      for (std::int64_t c = 0; c < 5; ++c) {
        const auto i = static_cast<std::size_t>((1 * 12 + t) * 5 + c);
        CHECK(a[i] == b[i]);
      }
  }
}

TEST_CASE("reshape and transpose round trips are bit-identical") {
  Rng rng(7);
  const Tensor x = rng.normal_tensor({3, 4, 5, 2});
  CHECK(bit_identical(ops::reshape(ops::reshape(x, {12, 10}), x.shape()), x));
  CHECK(bit_identical(ops::transpose(ops::transpose(x, 1, 3), 1, 3), x));
  CHECK(bit_identical(ops::transpose(ops::transpose(x, 0, 2), 2, 0), x));
}
