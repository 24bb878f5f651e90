#include <doctest.h>

#include <cmath>
#include <random>

#include "dana/tensor/gradcheck.hpp"
#include "dana/tensor/ops.hpp"

using namespace dana;

namespace {

Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.mutable_data()) v = d(rng);
  return t;
}

}  // namespace

TEST_SUITE("tensor") {
  TEST_CASE("matmul by identity returns the input") {
    Tensor a(Shape{2, 2}, {1, 2, 3, 4});
    Tensor eye(Shape{2, 2}, {1, 0, 0, 1});
    const auto c = matmul(a, eye);
    CHECK(c.shape() == Shape{2, 2});
    for (std::size_t i = 0; i < 4; ++i) CHECK(c[i] == a[i]);
  }

  TEST_CASE("softmax of [1, 0] matches e/(e+1), 1/(e+1)") {
    const auto s = softmax_axis(Tensor(Shape{2}, {1.0, 0.0}), 0);
    const double e = std::exp(1.0);
    CHECK(s[0] == doctest::Approx(e / (e + 1)).epsilon(1e-15));
    CHECK(s[1] == doctest::Approx(1 / (e + 1)).epsilon(1e-15));
    CHECK(s[0] == doctest::Approx(0.7311).epsilon(1e-4));
  }

  TEST_CASE("leaky_relu definition") {
    const auto y = leaky_relu(Tensor(Shape{2}, {2.0, -2.0}), 0.01);
    CHECK(y[0] == 2.0);
    CHECK(y[1] == doctest::Approx(-0.02).epsilon(1e-15));
  }

  TEST_CASE("shape mismatch is rejected with the dims") {
    Tensor a(Shape{2, 3}), b(Shape{2, 3});
    try {
      matmul(a, b);
      FAIL("matmul accepted 2x3 by 2x3");
    } catch (const ShapeError& e) {
      CHECK(std::string(e.what()).find("[2x3]") != std::string::npos);
    }
    CHECK_THROWS_AS(Tensor(Shape{0, 2}), ShapeError);
    CHECK_THROWS_AS(softmax_axis(Tensor(Shape{2}), 1), ShapeError);
  }

  TEST_CASE("backward of sum is all ones") {
    Tape tape;
    auto x = tape.leaf(Tensor(Shape{2, 3, 4}, 0.5));
    const auto g = tape.backward(sum(x)).of(x);
    CHECK(g.shape() == x.shape());
    for (double v : g.data()) CHECK(v == 1.0);
  }

  TEST_CASE("backward of sum(softmax) is zero") {
    std::mt19937_64 rng(3);
    Tape tape;
    auto x = tape.leaf(random_tensor(rng, {3, 5}));
    const auto g = tape.backward(sum(softmax_axis(x, 1))).of(x);
    for (double v : g.data()) CHECK(std::abs(v) < 1e-15);
  }

  TEST_CASE("backward rejects non-scalar losses and reused tapes") {
    Tape tape;
    auto x = tape.leaf(Tensor(Shape{2}, 1.0));
    CHECK_THROWS(tape.backward(scale(x, 2.0)));
    auto loss = sum(x);
    tape.backward(loss);
    CHECK(tape.consumed());
    CHECK_THROWS(tape.backward(loss));
  }

  TEST_CASE("fan-out accumulates additively") {
    std::mt19937_64 rng(5);
    const auto xv = random_tensor(rng, {4});
    const auto wv = random_tensor(rng, {4});
    Tensor both, first, second;
    {
      Tape t;
      auto x = t.leaf(xv);
      both = t.backward(add(sum(mul(x, wv)), sum(sigmoid(x)))).of(x);
    }
    {
      Tape t;
      auto x = t.leaf(xv);
      first = t.backward(sum(mul(x, wv))).of(x);
    }
    {
      Tape t;
      auto x = t.leaf(xv);
      second = t.backward(sum(sigmoid(x))).of(x);
    }
    for (std::size_t i = 0; i < 4; ++i) CHECK(both[i] == doctest::Approx(first[i] + second[i]).epsilon(1e-15));
  }

  TEST_CASE("softmax rows are stochastic for large inputs") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 20; ++trial) {
      const auto s = softmax_axis(random_tensor(rng, {4, 6}, -300, 300), 1);
      for (std::size_t r = 0; r < 4; ++r) {
        double acc = 0;
        for (std::size_t c = 0; c < 6; ++c) {
          CHECK(s[r * 6 + c] >= 0.0);
          acc += s[r * 6 + c];
        }
        CHECK(std::abs(acc - 1.0) <= 1e-12);
      }
    }
  }

  TEST_CASE("reshape, transpose and concat/slice roundtrips are exact") {
    std::mt19937_64 rng(9);
    const auto a = random_tensor(rng, {3, 4});
    const auto back = reshape(reshape(a, {2, 6}), {3, 4});
    const auto tt = transpose2d(transpose2d(a));
    for (std::size_t i = 0; i < a.numel(); ++i) {
      CHECK(back[i] == a[i]);
      CHECK(tt[i] == a[i]);
    }
    const auto p = random_tensor(rng, {2, 3, 3});
    const auto q = random_tensor(rng, {3, 3, 3});
    const auto cat = concat_channels({p, q});
    CHECK(cat.shape() == Shape{5, 3, 3});
    const auto p2 = slice_channels(cat, 0, 2);
    const auto q2 = slice_channels(cat, 2, 5);
    for (std::size_t i = 0; i < p.numel(); ++i) CHECK(p2[i] == p[i]);
    for (std::size_t i = 0; i < q.numel(); ++i) CHECK(q2[i] == q[i]);
  }

  TEST_CASE("conv2d matches a direct loop") {
    std::mt19937_64 rng(11);
    const auto x = random_tensor(rng, {2, 5, 6});
    const auto w = random_tensor(rng, {3, 2, 3, 3});
    const auto b = random_tensor(rng, {3});
    const auto y = conv2d(x, w, b, 2, 1);
    CHECK(y.shape() == Shape{3, 3, 3});
    for (std::size_t co = 0; co < 3; ++co)
      for (std::size_t oy = 0; oy < 3; ++oy)
        for (std::size_t ox = 0; ox < 3; ++ox) {
          double acc = b[co];
          for (std::size_t ci = 0; ci < 2; ++ci)
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx) {
                const int iy = static_cast<int>(oy) * 2 + ky - 1, ix = static_cast<int>(ox) * 2 + kx - 1;
                if (iy < 0 || iy >= 5 || ix < 0 || ix >= 6) continue;
                acc += w[((co * 2 + ci) * 3 + ky) * 3 + kx] * x[(ci * 5 + iy) * 6 + ix];
              }
          CHECK(y[(co * 3 + oy) * 3 + ox] == doctest::Approx(acc).epsilon(1e-13));
        }
  }

  TEST_CASE("bce_with_logits and smooth_l1 limits") {
    const auto bce = bce_with_logits(Tensor(Shape{2}, {40.0, -40.0}), Tensor(Shape{2}, {1.0, 0.0}));
    CHECK(bce[0] < 1e-15);
    CHECK(bce[1] < 1e-15);
    const auto l = smooth_l1(Tensor(Shape{3}, {0.5, 2.0, -1.0}), Tensor(Shape{3}, {0.0, 0.0, -1.0}));
    CHECK(l[0] == doctest::Approx(0.125));
    CHECK(l[1] == doctest::Approx(1.5));
    CHECK(l[2] == 0.0);
  }

  TEST_CASE("grad_check is exact for a linear function") {
    std::mt19937_64 rng(13);
    const auto w = random_tensor(rng, {6});
    const auto rep = grad_check([&](const Tensor& x) { return sum(mul(w, x)); }, random_tensor(rng, {6}), 1e-3,
                                1e-4, 1e-7);
    CHECK(rep.pass);
    CHECK(rep.entries.at(0).max_abs_err < 1e-10);
  }

  TEST_CASE("grad_check passes sum(softmax(Wx)) components") {
    std::mt19937_64 rng(17);
    const auto w = random_tensor(rng, {4, 3});
    const auto c = random_tensor(rng, {4, 1});
    const auto rep = grad_check(
        [&](const Tensor& x) { return sum(mul(softmax_axis(matmul(w, x), 0), c)); }, random_tensor(rng, {3, 1}),
        1e-3, 1e-4, 1e-7);
    CHECK(rep.pass);
  }

  TEST_CASE("grad_check catches a wrong matmul rule") {
    std::mt19937_64 rng(19);
    const auto w = random_tensor(rng, {3, 3});
    auto bad_matmul = [&](const Tensor& x) {
      Tensor out = matmul(w, x.detach());
      if (!x.tracked()) return out;
      const auto sw = w.storage();
      // Deliberately uses W instead of W^T.
      return x.tape()->record(out, {x}, [sw](std::span<const double> g, GradSpans& gi) {
        for (std::size_t i = 0; i < 3; ++i)
          for (std::size_t j = 0; j < 3; ++j) gi[0][i] += (*sw)[i * 3 + j] * g[j];
      });
    };
    const auto rep = grad_check([&](const Tensor& x) { return sum(sigmoid(bad_matmul(x))); },
                                random_tensor(rng, {3, 1}), 1e-3, 1e-4, 1e-7);
    CHECK_FALSE(rep.pass);
    CHECK_FALSE(rep.failure.empty());
  }

  TEST_CASE("grad_check reports non-finite evaluations") {
    const auto rep = grad_check([](const Tensor& x) { return sum(scale(x, std::nan(""))); },
                                Tensor(Shape{2}, 1.0), 1e-3, 1e-4, 1e-7);
    CHECK_FALSE(rep.pass);
  }

  TEST_CASE("every op kind is reachable through apply") {
    std::mt19937_64 rng(23);
    for (auto kind : kAllOpKinds) {
      CAPTURE(op_name(kind));
      OpAttrs at;
      std::vector<Tensor> in;
      switch (kind) {
        case OpKind::kMatmul: in = {random_tensor(rng, {2, 3}), random_tensor(rng, {3, 2})}; break;
        case OpKind::kConcatChannels: in = {random_tensor(rng, {1, 2, 2}), random_tensor(rng, {2, 2, 2})}; break;
        case OpKind::kConv2d:
          in = {random_tensor(rng, {1, 4, 4}), random_tensor(rng, {2, 1, 3, 3}), random_tensor(rng, {2})};
          at.padding = 1;
          break;
        case OpKind::kAdd:
        case OpKind::kSub:
        case OpKind::kMul:
        case OpKind::kSmoothL1:
          in = {random_tensor(rng, {2, 2}), random_tensor(rng, {2, 2})};
          break;
        case OpKind::kBceWithLogits: in = {random_tensor(rng, {2, 2}), random_tensor(rng, {2, 2}, 0, 1)}; break;
        case OpKind::kReshape:
          in = {random_tensor(rng, {2, 2})};
          at.shape = {4};
          break;
        case OpKind::kBilinearResize:
          in = {random_tensor(rng, {1, 2, 2})};
          at.shape = {3, 3};
          break;
        case OpKind::kRoiAlign:
          in = {random_tensor(rng, {1, 4, 4})};
          at.shape = {2, 2};
          at.box = {0.5, 0.5, 3.0, 3.5};
          break;
        case OpKind::kSliceChannels:
          in = {random_tensor(rng, {3, 2, 2})};
          at.begin = 1;
          at.end = 3;
          break;
        default: in = {random_tensor(rng, {2, 3})}; break;
      }
      CHECK(apply(kind, in, at).numel() > 0);
    }
  }
}
