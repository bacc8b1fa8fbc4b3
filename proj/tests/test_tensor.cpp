#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "lightattn/gradcheck.hpp"
#include "lightattn/rng.hpp"
#include "lightattn/tensor.hpp"

using namespace lightattn;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, bool requires_grad = false,
                     double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape), requires_grad);
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Independent quintuple-loop convolution (same padding, per-axis stride).
Tensor conv2d_naive(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                    int sf, int st) {
  int ci = input.shape()[0], F = input.shape()[1], L = input.shape()[2];
  int co = kernel.shape()[0], kf = kernel.shape()[2], kt = kernel.shape()[3];
  int Fo = (F + sf - 1) / sf, Lo = (L + st - 1) / st;
  int pf = std::max(0, (Fo - 1) * sf + kf - F) / 2;
  int pt = std::max(0, (Lo - 1) * st + kt - L) / 2;
  Tensor out = Tensor::zeros({co, Fo, Lo});
  for (int o = 0; o < co; ++o)
    for (int fo = 0; fo < Fo; ++fo)
      for (int lo = 0; lo < Lo; ++lo) {
        double acc = bias.defined() ? bias.at(o) : 0.0;
        for (int c = 0; c < ci; ++c)
          for (int a = 0; a < kf; ++a)
            for (int b = 0; b < kt; ++b) {
              int fi = fo * sf + a - pf, li = lo * st + b - pt;
              if (fi < 0 || fi >= F || li < 0 || li >= L) continue;
              acc += input.data()[(static_cast<std::size_t>(c) * F + fi) * L + li] *
                     kernel.data()[((static_cast<std::size_t>(o) * ci + c) * kf + a) * kt + b];
            }
        out.data()[(static_cast<std::size_t>(o) * Fo + fo) * Lo + lo] = acc;
      }
  return out;
}

}  // namespace

TEST_CASE("tensor_from validates shape, length and finiteness") {
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  CHECK(eye.at(0, 0) == 1.0);
  CHECK(eye.at(0, 1) == 0.0);
  CHECK(eye.at(1, 1) == 1.0);

  Tensor zero = Tensor::from({3}, {0, 0, 0});
  CHECK(sum(zero).item() == 0.0);

  CHECK_THROWS_AS(Tensor::from({2, 3}, {1, 2, 3, 4, 5}), DimensionError);
  CHECK_THROWS_AS(Tensor::from({2}, {1.0, std::nan("")}), DomainError);
  CHECK_THROWS_AS(Tensor::from({0, 2}, {}), DimensionError);
}

TEST_CASE("matmul forward") {
  Rng rng(7);
  Tensor m = random_tensor({2, 2}, rng);
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor im = matmul(eye, m);
  for (int i = 0; i < 4; ++i) CHECK(im.data()[i] == m.data()[i]);

  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from({2, 1}, {1, 1});
  Tensor c = matmul(a, b);
  CHECK(c.at(0, 0) == 3.0);
  CHECK(c.at(1, 0) == 7.0);

  CHECK_THROWS_AS(matmul(a, Tensor::from({3, 1}, {1, 1, 1})), DimensionError);
}

TEST_CASE("matmul gradient matches central differences") {
  Rng rng(11);
  Tensor a = random_tensor({3, 4}, rng, true);
  Tensor b = random_tensor({4, 2}, rng, true);
  double err = grad_check([&] { return sum(matmul(a, b)); }, {a, b}, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("softmax_masked basics") {
  Mask all = Mask::all(1, 3);
  Tensor uniform = softmax_masked(Tensor::from({1, 3}, {0, 0, 0}), all);
  for (int j = 0; j < 3; ++j) CHECK(uniform.at(0, j) == Catch::Approx(1.0 / 3).margin(1e-15));

  Mask hide = Mask::all(1, 2);
  hide.set(0, 1, false);
  Tensor m = softmax_masked(Tensor::from({1, 2}, {10, 0}), hide);
  CHECK(m.at(0, 0) == 1.0);
  CHECK(m.at(0, 1) == 0.0);

  Mask none = Mask::all(1, 2);
  none.set(0, 0, false);
  none.set(0, 1, false);
  CHECK_THROWS_AS(softmax_masked(Tensor::from({1, 2}, {1, 2}), none), DegenerateRowError);
}

TEST_CASE("softmax_masked matches extended-precision exp-normalize") {
  Tensor y = softmax_masked(Tensor::from({1, 3}, {1, 2, 3}), Mask::all(1, 3));
  long double xs[3] = {1.0L, 2.0L, 3.0L};
  long double mx = 3.0L;
  long double denom = 0.0L;
  for (auto x : xs) denom += expl(x - mx);
  for (int j = 0; j < 3; ++j) {
    long double want = expl(xs[j] - mx) / denom;
    CHECK(std::fabs(y.at(0, j) - static_cast<double>(want)) < 1e-15);
  }
}

TEST_CASE("softmax_masked rows sum to one over unmasked entries") {
  Rng rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    int R = 1 + static_cast<int>(rng.below(5));
    int C = 2 + static_cast<int>(rng.below(7));
    Tensor logits = random_tensor({R, C}, rng, false, -30.0, 30.0);
    Mask mask = Mask::all(R, C);
    for (int i = 0; i < R; ++i) {
      for (int j = 0; j < C; ++j)
        if (rng.bernoulli(0.3)) mask.set(i, j, false);
      mask.set(i, static_cast<int>(rng.below(C)), true);  // keep rows solvable
    }
    Tensor y = softmax_masked(logits, mask);
    for (int i = 0; i < R; ++i) {
      double s = 0.0;
      for (int j = 0; j < C; ++j) {
        if (!mask(i, j)) CHECK(y.at(i, j) == 0.0);
        s += y.at(i, j);
      }
      CHECK(std::fabs(s - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("softmax_masked gradient") {
  Rng rng(31);
  Tensor logits = random_tensor({3, 5}, rng, true);
  Mask mask = Mask::all(3, 5);
  mask.set(0, 4, false);
  mask.set(2, 0, false);
  Tensor weight = random_tensor({3, 5}, rng);
  double err = grad_check([&] { return sum(mul(softmax_masked(logits, mask), weight)); },
                          {logits}, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("layer_norm normalizes columns") {
  Tensor gamma = Tensor::full({3}, 1.0);
  Tensor beta = Tensor::zeros({3});
  Tensor constant = layer_norm(Tensor::from({3, 1}, {5, 5, 5}), gamma, beta, 1e-6);
  for (int r = 0; r < 3; ++r) CHECK(constant.at(r, 0) == 0.0);

  Tensor g2 = Tensor::full({2}, 1.0);
  Tensor b2 = Tensor::zeros({2});
  Tensor pm = layer_norm(Tensor::from({2, 1}, {1, -1}), g2, b2, 1e-10);
  CHECK(pm.at(0, 0) == Catch::Approx(1.0).margin(1e-9));
  CHECK(pm.at(1, 0) == Catch::Approx(-1.0).margin(1e-9));

  Rng rng(5);
  Tensor x = random_tensor({8, 6}, rng, false, -2.0, 2.0);
  Tensor g8 = Tensor::full({8}, 1.0);
  Tensor b8 = Tensor::zeros({8});
  Tensor y = layer_norm(x, g8, b8, 1e-8);
  for (int l = 0; l < 6; ++l) {
    double mean = 0.0, var = 0.0;
    for (int r = 0; r < 8; ++r) mean += y.at(r, l);
    mean /= 8;
    for (int r = 0; r < 8; ++r) var += (y.at(r, l) - mean) * (y.at(r, l) - mean);
    var /= 8;
    CHECK(std::fabs(mean) < 1e-10);
    CHECK(std::fabs(var - 1.0) < 1e-6);
  }
}

TEST_CASE("layer_norm gradient") {
  Rng rng(13);
  Tensor x = random_tensor({4, 3}, rng, true);
  Tensor gamma = random_tensor({4}, rng, true, 0.5, 1.5);
  Tensor beta = random_tensor({4}, rng, true);
  Tensor weight = random_tensor({4, 3}, rng);
  double err = grad_check(
      [&] { return sum(mul(layer_norm(x, gamma, beta, 1e-6), weight)); },
      {x, gamma, beta}, 1e-5);
  CHECK(err < 1e-5);
}

TEST_CASE("conv2d delta kernel is identity") {
  Rng rng(17);
  Tensor input = random_tensor({1, 4, 9}, rng);
  Tensor kernel = Tensor::zeros({1, 1, 5, 5});
  kernel.data()[2 * 5 + 2] = 1.0;  // center tap
  Tensor out = conv2d(input, kernel, Tensor(), 1, 1);
  REQUIRE(out.shape() == std::vector<int>{1, 4, 9});
  for (std::size_t i = 0; i < input.data().size(); ++i)
    CHECK(out.data()[i] == input.data()[i]);
}

TEST_CASE("conv2d chained stride-2 halvings reach ceil(L/4)") {
  Rng rng(19);
  Tensor input = random_tensor({1, 8, 100}, rng);
  Tensor k1 = random_tensor({2, 1, 5, 5}, rng);
  Tensor k2 = random_tensor({3, 2, 5, 5}, rng);
  Tensor c1 = conv2d(input, k1, Tensor(), 2, 2);
  REQUIRE(c1.shape()[2] == 50);
  Tensor c2 = conv2d(c1, k2, Tensor(), 2, 2);
  CHECK(c2.shape()[2] == 25);

  CHECK_THROWS_AS(conv2d(input, k1, Tensor(), 0, 1), ParameterError);
}

TEST_CASE("conv2d equals the naive quintuple-loop reference") {
  Rng rng(29);
  for (auto [sf, st] : {std::pair{1, 1}, std::pair{2, 2}, std::pair{1, 2}}) {
    Tensor input = random_tensor({1, 8, 12}, rng);
    Tensor kernel = random_tensor({3, 1, 5, 5}, rng);
    Tensor bias = random_tensor({3}, rng);
    Tensor fast = conv2d(input, kernel, bias, sf, st);
    Tensor slow = conv2d_naive(input, kernel, bias, sf, st);
    REQUIRE(fast.shape() == slow.shape());
    for (std::size_t i = 0; i < fast.data().size(); ++i) {
      CHECK(std::fabs(fast.data()[i] - slow.data()[i]) < 1e-12);
    }
  }
  // multi-channel input
  Tensor input = random_tensor({3, 6, 10}, rng);
  Tensor kernel = random_tensor({2, 3, 3, 3}, rng);
  Tensor fast = conv2d(input, kernel, Tensor(), 2, 1);
  Tensor slow = conv2d_naive(input, kernel, Tensor(), 2, 1);
  for (std::size_t i = 0; i < fast.data().size(); ++i) {
    CHECK(std::fabs(fast.data()[i] - slow.data()[i]) < 1e-12);
  }
}

TEST_CASE("conv2d gradient") {
  Rng rng(37);
  Tensor input = random_tensor({2, 4, 6}, rng, true);
  Tensor kernel = random_tensor({2, 2, 3, 3}, rng, true);
  Tensor bias = random_tensor({2}, rng, true);
  Tensor weight = random_tensor({2, 2, 3}, rng);
  double err = grad_check(
      [&] { return sum(mul(conv2d(input, kernel, bias, 2, 2), weight)); },
      {input, kernel, bias}, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("backward on linear and quadratic forms") {
  Tensor x = Tensor::from({3}, {1, 2, 3}, true);
  backward(sum(x));
  for (int i = 0; i < 3; ++i) CHECK(x.grad()[i] == 1.0);

  Tensor y = Tensor::from({2}, {1, 2}, true);
  backward(sum(mul(y, y)));
  CHECK(y.grad()[0] == 2.0);
  CHECK(y.grad()[1] == 4.0);

  CHECK_THROWS_AS(backward(Tensor::from({2}, {1, 2}, true)), ContractError);
}

TEST_CASE("backward leaves gradient zero on unreachable parameters") {
  Tensor used = Tensor::from({2}, {1, 2}, true);
  Tensor unused = Tensor::from({2}, {3, 4}, true);
  backward(sum(used));
  CHECK(unused.grad()[0] == 0.0);
  CHECK(unused.grad()[1] == 0.0);
}

TEST_CASE("backward is linear over losses") {
  Rng rng(41);
  Tensor x = random_tensor({4}, rng, true);
  Tensor w1 = random_tensor({4}, rng);
  Tensor w2 = random_tensor({4}, rng);

  backward(add(sum(mul(x, w1)), sum(mul(mul(x, x), w2))));
  std::vector<double> combined = x.grad();

  x.zero_grad();
  backward(sum(mul(x, w1)));
  backward(sum(mul(mul(x, x), w2)));
  for (int i = 0; i < 4; ++i) {
    CHECK(x.grad()[i] == Catch::Approx(combined[i]).margin(1e-14));
  }
}

TEST_CASE("tape keeps topological order and visits nodes once") {
  Rng rng(43);
  Tensor x = random_tensor({3, 3}, rng, true);
  Tensor shared = matmul(x, x);                 // used twice below
  Tensor loss = sum(add(shared, shared));
  Tape tape = Tape::record_from(loss);

  std::unordered_set<const detail::Node*> seen;
  for (const auto* node : tape.nodes()) {
    for (const auto& parent : node->parents) {
      if (parent->requires_grad) CHECK(seen.count(parent.get()) == 1);
    }
    CHECK(seen.insert(node).second);  // no duplicates
  }
}

TEST_CASE("dropout contract") {
  Rng rng(47);
  Tensor x = random_tensor({10}, rng);
  Rng drng(1);
  Tensor same = dropout(x, 0.0, true, drng);
  for (int i = 0; i < 10; ++i) CHECK(same.at(i) == x.at(i));
  Tensor eval = dropout(x, 0.1, false, drng);
  for (int i = 0; i < 10; ++i) CHECK(eval.at(i) == x.at(i));
  CHECK_THROWS_AS(dropout(x, 1.0, true, drng), ParameterError);
  CHECK_THROWS_AS(dropout(x, -0.1, true, drng), ParameterError);
}

TEST_CASE("dropout empirical zero fraction near the rate") {
  const int n = 100000;
  Tensor x = Tensor::full({n}, 1.0);
  Rng drng(123);
  Tensor y = dropout(x, 0.1, true, drng);
  int zeros = 0;
  for (int i = 0; i < n; ++i) {
    if (y.at(i) == 0.0) {
      ++zeros;
    } else {
      CHECK(y.at(i) == Catch::Approx(1.0 / 0.9).margin(1e-12));
    }
  }
  double frac = static_cast<double>(zeros) / n;
  CHECK(frac > 0.09);
  CHECK(frac < 0.11);
}

TEST_CASE("grad_check on exact quadratic") {
  Rng rng(53);
  Tensor x = random_tensor({5}, rng, true);
  double err = grad_check([&] { return sum(mul(x, x)); }, {x}, 1e-5);
  CHECK(err < 1e-9);
}

TEST_CASE("grad_check flags a corrupted backward rule") {
  Tensor x = Tensor::from({3}, {0.3, -0.7, 1.1}, true);
  auto corrupted_scale = [](const Tensor& t) {
    Tensor out = make_op(t.shape(), "bad_scale", {t}, [](detail::Node& n) {
      auto& g = n.parents[0]->grad_buffer();
      // wrong rule: claims d(2x)/dx == 3
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += 3.0 * n.grad[i];
    });
    for (std::size_t i = 0; i < out.data().size(); ++i) out.data()[i] = 2.0 * t.data()[i];
    return out;
  };
  double err = grad_check([&] { return sum(corrupted_scale(x)); }, {x}, 1e-5);
  CHECK(err >= 1e-4);
}

TEST_CASE("grad_check rejects non-deterministic functions") {
  Rng drng(7);
  Tensor x = Tensor::from({64}, std::vector<double>(64, 1.0), true);
  CHECK_THROWS_AS(
      grad_check([&] { return sum(dropout(x, 0.5, true, drng)); }, {x}, 1e-5),
      ContractError);
}

TEST_CASE("elementwise, reshape and pooling gradients") {
  Rng rng(59);
  Tensor a = random_tensor({3, 4}, rng, true);
  Tensor b = random_tensor({3, 4}, rng, true);
  Tensor w = random_tensor({2, 6}, rng);
  double err = grad_check(
      [&] {
        Tensor mixed = sub(relu(a), scale(mul(a, b), 0.5));
        return sum(mul(reshape(mixed, {2, 6}), w));
      },
      {a, b}, 1e-5);
  CHECK(err < 1e-5);

  Tensor c = random_tensor({4, 5}, rng, true);
  Tensor wc = random_tensor({4}, rng);
  err = grad_check([&] { return sum(mul(mean_cols(c), wc)); }, {c}, 1e-5);
  CHECK(err < 1e-6);

  Tensor d = random_tensor({2, 5}, rng, true);
  Tensor wcat = random_tensor({6, 5}, rng);
  err = grad_check([&] { return sum(mul(concat_rows(c, d), wcat)); }, {c, d}, 1e-5);
  CHECK(err < 1e-6);

  Tensor wt = random_tensor({5, 4}, rng);
  err = grad_check([&] { return sum(mul(transpose(c), wt)); }, {c}, 1e-5);
  CHECK(err < 1e-6);

  Tensor wm = random_tensor({3, 4}, rng, true);
  Tensor bias = random_tensor({3}, rng, true);
  Tensor ww = random_tensor({3, 5}, rng);
  err = grad_check([&] { return sum(mul(affine_cols(wm, c, bias), ww)); },
                   {wm, c, bias}, 1e-5);
  CHECK(err < 1e-5);
}

TEST_CASE("banded primitives match full computations") {
  Rng rng(61);
  const int d = 3, L = 7, radius = 2;
  Tensor q = random_tensor({d, L}, rng, true);
  Tensor k = random_tensor({d, L}, rng, true);
  Tensor band = banded_scores(q, k, radius);
  Tensor full = matmul(transpose(q), k);
  for (int i = 0; i < L; ++i) {
    for (int c = 0; c < 2 * radius + 1; ++c) {
      int j = i + c - radius;
      if (j < 0 || j >= L) continue;
      CHECK(band.at(i, c) == Catch::Approx(full.at(i, j)).margin(1e-14));
    }
  }

  Tensor v = random_tensor({d, L}, rng, true);
  Mask bm = banded_mask(L, radius);
  Tensor weights = softmax_masked(band, bm);
  Tensor mixed = banded_attend(v, weights, radius);
  REQUIRE(mixed.shape() == std::vector<int>{d, L});

  Tensor wout = random_tensor({d, L}, rng);
  double err = grad_check(
      [&] {
        Tensor s = banded_scores(q, k, radius);
        Tensor w = softmax_masked(s, bm);
        return sum(mul(banded_attend(v, w, radius), wout));
      },
      {q, k, v}, 1e-5);
  CHECK(err < 1e-5);
}

TEST_CASE("diagonal and row-broadcast bias gradients") {
  Rng rng(67);
  const int L = 5;
  Tensor scores = random_tensor({L, L}, rng, true);
  Tensor bias = random_tensor({2 * L - 1}, rng, true);
  Tensor w = random_tensor({L, L}, rng);
  double err = grad_check([&] { return sum(mul(add_diag_bias(scores, bias), w)); },
                          {scores, bias}, 1e-5);
  CHECK(err < 1e-6);

  Tensor band = random_tensor({L, 3}, rng, true);
  Tensor bias3 = random_tensor({3}, rng, true);
  Tensor w3 = random_tensor({L, 3}, rng);
  err = grad_check([&] { return sum(mul(add_row_broadcast(band, bias3), w3)); },
                   {band, bias3}, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("cross_entropy values and gradient") {
  Tensor uniform = Tensor::from({4}, {0, 0, 0, 0}, false);
  CHECK(cross_entropy(uniform, 1).item() == Catch::Approx(std::log(4.0)).margin(1e-14));

  Tensor dominant = Tensor::from({3}, {50.0, 0.0, 0.0});
  CHECK(cross_entropy(dominant, 0).item() < 1e-12);

  CHECK_THROWS_AS(cross_entropy(uniform, 4), DataError);
  CHECK_THROWS_AS(cross_entropy(uniform, -1), DataError);

  Rng rng(71);
  Tensor logits = random_tensor({6}, rng, true);
  double err = grad_check([&] { return cross_entropy(logits, 2); }, {logits}, 1e-5);
  CHECK(err < 1e-6);
}
