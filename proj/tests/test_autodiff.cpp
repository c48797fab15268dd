#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "doctest.h"
#include "pcas/grad_check.hpp"
#include "pcas/graph.hpp"
#include "pcas/logging.hpp"
#include "pcas/rng.hpp"

using namespace pcas;

namespace {

Tensor rand_tensor(Shape s, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(s));
  for (double& v : t.data) v = rng.normal(0.0, scale);
  return t;
}

// Random values bounded away from zero, for kinked ops (relu) and log/div.
Tensor rand_tensor_away_from_zero(Shape s, Rng& rng, double min_abs = 0.15) {
  Tensor t(std::move(s));
  for (double& v : t.data) {
    double x = rng.normal(0.0, 1.0);
    if (std::abs(x) < min_abs) x = x < 0 ? x - min_abs : x + min_abs;
    v = x;
  }
  return t;
}

Tensor rand_positive(Shape s, Rng& rng) {
  Tensor t(std::move(s));
  for (double& v : t.data) v = 0.2 + rng.uniform() * 2.0;
  return t;
}

}  // namespace

TEST_CASE("matmul shape rule and value") {
  Graph g;
  Var a = g.constant(Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}));
  Var b = g.constant(Tensor::from({3, 4}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0}));
  Var c = g.matmul(a, b);
  CHECK(g.value(c).shape == Shape{2, 4});
  CHECK(g.value(c).at(0, 0) == 1.0);
  CHECK(g.value(c).at(1, 2) == 6.0);
  CHECK(g.value(c).at(1, 3) == 0.0);
}

TEST_CASE("matmul inner-dim mismatch throws") {
  Graph g;
  Var a = g.constant(Tensor({2, 3}, 1.0));
  Var b = g.constant(Tensor({4, 2}, 1.0));
  CHECK_THROWS_AS(g.matmul(a, b), Error);
}

TEST_CASE("softmax of [0,0] is [0.5,0.5] and rows sum to 1") {
  Graph g;
  Var x = g.constant(Tensor::from({1, 2}, {0, 0}));
  Var y = g.softmax_rows(x);
  CHECK(g.value(y).at(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(g.value(y).at(0, 1) == doctest::Approx(0.5).epsilon(1e-15));

  Rng rng(17);
  Var z = g.softmax_rows(g.constant(rand_tensor({5, 7}, rng, 3.0)));
  for (int r = 0; r < 5; ++r) {
    double s = 0;
    for (int c = 0; c < 7; ++c) s += g.value(z).at(r, c);
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("l2 normalize [3,4] -> [0.6,0.8]; rows have unit norm") {
  Graph g;
  Var x = g.constant(Tensor::from({2}, {3, 4}));
  Var y = g.l2_normalize_rows(x);
  CHECK(g.value(y).data[0] == doctest::Approx(0.6).epsilon(1e-14));
  CHECK(g.value(y).data[1] == doctest::Approx(0.8).epsilon(1e-14));

  Rng rng(3);
  Var z = g.l2_normalize_rows(g.constant(rand_tensor({6, 9}, rng)));
  for (int r = 0; r < 6; ++r) {
    double s = 0;
    for (int c = 0; c < 9; ++c) s += g.value(z).at(r, c) * g.value(z).at(r, c);
    CHECK(std::abs(std::sqrt(s) - 1.0) < 1e-12);
  }
}

TEST_CASE("cosine similarity basic values") {
  Graph g;
  Var e1 = g.constant(Tensor::from({2}, {1, 0}));
  Var e2 = g.constant(Tensor::from({2}, {0, 1}));
  Var d = g.constant(Tensor::from({2}, {1, 1}));
  CHECK(g.value(g.cosine_similarity(e1, e1)).data[0] == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(g.value(g.cosine_similarity(e1, e2)).data[0] == doctest::Approx(0.0).epsilon(1e-14));
  CHECK(g.value(g.cosine_similarity(d, e1)).data[0] ==
        doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-14));
}

TEST_CASE("cosine similarity zero-norm policy") {
  Graph g;
  Var z = g.constant(Tensor::from({2}, {0, 0}));
  Var e = g.constant(Tensor::from({2}, {1, 0}));
  CHECK_THROWS_AS(g.cosine_similarity(z, e), Error);
  Var c = g.cosine_similarity(z, e, ZeroNormPolicy::kClamp);
  CHECK(g.value(c).data[0] == 0.0);
}

TEST_CASE("soft cross entropy worked values") {
  // Identity S, identity T: per row -log(e/(e+1)) = log(1+exp(-1)).
  const double expected = std::log(1.0 + std::exp(-1.0));
  {
    Graph g;
    Var s = g.constant(Tensor::from({2, 2}, {1, 0, 0, 1}));
    Var t = g.constant(Tensor::from({2, 2}, {1, 0, 0, 1}));
    Var l = g.soft_cross_entropy_rows(s, t);
    CHECK(g.value(l).data[0] == doctest::Approx(expected).epsilon(1e-12));
    CHECK(std::abs(g.value(l).data[0] - 0.31326) < 1e-5);
  }
  // Constant rows with uniform targets: log(N).
  {
    Graph g;
    Var s = g.constant(Tensor::from({2, 3}, {4, 4, 4, -1, -1, -1}));
    Var t = g.constant(Tensor({2, 3}, 1.0 / 3.0));
    Var l = g.soft_cross_entropy_rows(s, t);
    CHECK(g.value(l).data[0] == doctest::Approx(std::log(3.0)).epsilon(1e-12));
  }
  // Strong diagonal: -log sigma with sigma = e^10/(e^10+1).
  {
    Graph g;
    Var s = g.constant(Tensor::from({2, 2}, {10, 0, 0, 10}));
    Var t = g.constant(Tensor::from({2, 2}, {1, 0, 0, 1}));
    Var l = g.soft_cross_entropy_rows(s, t);
    CHECK(g.value(l).data[0] == doctest::Approx(std::log(1.0 + std::exp(-10.0))).epsilon(1e-9));
    CHECK(std::abs(g.value(l).data[0] - 4.54e-5) < 1e-7);
  }
}

TEST_CASE("soft cross entropy skips all-zero rows and validates sums") {
  counters::reset();
  Graph g;
  Var s = g.constant(Tensor::from({2, 2}, {1, 0, 0, 1}));
  Var t = g.constant(Tensor::from({2, 2}, {1, 0, 0, 0}));
  Var l = g.soft_cross_entropy_rows(s, t);
  CHECK(g.value(l).data[0] == doctest::Approx(std::log(1.0 + std::exp(-1.0))).epsilon(1e-12));
  CHECK(counters::value("soft_ce.skipped_rows") == 1);

  Var bad = g.constant(Tensor::from({2, 2}, {0.5, 0.6, 1, 0}));
  CHECK_THROWS_AS(g.soft_cross_entropy_rows(s, bad), Error);
}

TEST_CASE("simple gradient: loss = sum(x^2)") {
  Tensor x = Tensor::from({2}, {1, 2});
  x.requires_grad = true;
  Graph g;
  Var xv = g.leaf(&x);
  Var loss = g.sum_all(g.mul(xv, xv));
  g.backward(loss);
  CHECK(x.grad[0] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(x.grad[1] == doctest::Approx(4.0).epsilon(1e-12));

  auto fn = [](Graph& gg, const std::vector<Tensor*>& ps) {
    Var v = gg.leaf(ps[0]);
    return gg.sum_all(gg.mul(v, v));
  };
  Tensor y = Tensor::from({2}, {1, 2});
  auto rep = grad_check(fn, {&y}, 1e-5);
  CHECK(rep.max_rel_error < 1e-6);
}

TEST_CASE("backward-of-sum linearity") {
  Rng rng(99);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor x = rand_tensor({3, 4}, rng);
    auto grad_for = [&](int mode) {
      Tensor p = x;
      p.requires_grad = true;
      Graph g;
      Var v = g.leaf(&p);
      Var f = g.sum_all(g.exp(v));
      Var h = g.sum_all(g.mul(v, v));
      Var loss = mode == 0 ? f : (mode == 1 ? h : g.add(f, h));
      g.backward(loss);
      return p.grad;
    };
    auto gf = grad_for(0), gh = grad_for(1), gsum = grad_for(2);
    for (size_t i = 0; i < gf.size(); ++i)
      CHECK(gsum[i] == doctest::Approx(gf[i] + gh[i]).epsilon(1e-12));
  }
}

TEST_CASE("every kernel passes grad_check at 1e-4 over 20 seeds") {
  struct KernelCase {
    const char* name;
    int n_params;
    bool positive_inputs;
    bool away_from_zero;
    LossFn fn;
  };
  // Each loss wraps the kernel output into a scalar via sum of squares (or
  // directly when already scalar) so curvature reaches every element.
  auto wrap = [](Graph& g, Var v) { return g.sum_all(g.mul(v, v)); };
  std::vector<KernelCase> cases;
  cases.push_back({"add", 2, false, false, [&](Graph& g, const std::vector<Tensor*>& p) {
                     return wrap(g, g.add(g.leaf(p[0]), g.leaf(p[1])));
                   }});
  cases.push_back({"sub", 2, false, false, [&](Graph& g, const std::vector<Tensor*>& p) {
                     return wrap(g, g.sub(g.leaf(p[0]), g.leaf(p[1])));
                   }});
  cases.push_back({"mul", 2, false, false, [&](Graph& g, const std::vector<Tensor*>& p) {
                     return wrap(g, g.mul(g.leaf(p[0]), g.leaf(p[1])));
                   }});
  cases.push_back({"div", 2, false, true, [&](Graph& g, const std::vector<Tensor*>& p) {
                     return wrap(g, g.div(g.leaf(p[0]), g.leaf(p[1])));
                   }});
  cases.push_back({"add_scalar", 1, false, false, [&](Graph& g, const std::vector<Tensor*>& p) {
                     return wrap(g, g.add_scalar(g.leaf(p[0]), 0.7));
                   }});
  cases.push_back({"mul_scalar", 1, false, false, [&](Graph& g, const std::vector<Tensor*>& p) {
                     return wrap(g, g.mul_scalar(g.leaf(p[0]), -1.3));
                   }});
  cases.push_back({"exp", 1, false, false, [&](Graph& g, const std::vector<Tensor*>& p) {
                     return wrap(g, g.exp(g.leaf(p[0])));
                   }});
  cases.push_back({"log", 1, true, false, [&](Graph& g, const std::vector<Tensor*>& p) {
                     return wrap(g, g.log(g.leaf(p[0])));
                   }});
  cases.push_back({"relu", 1, false, true, [&](Graph& g, const std::vector<Tensor*>& p) {
                     return wrap(g, g.relu(g.leaf(p[0])));
                   }});
  cases.push_back({"gelu", 1, false, false, [&](Graph& g, const std::vector<Tensor*>& p) {
                     return wrap(g, g.gelu(g.leaf(p[0])));
                   }});
  cases.push_back({"matmul", 2, false, false, [&](Graph& g, const std::vector<Tensor*>& p) {
                     Var a = g.leaf(p[0]);
                     // Reuse the same 3x4 tensor transposed so shapes agree.
                     return wrap(g, g.matmul(a, g.transpose(g.leaf(p[1]))));
                   }});
  cases.push_back({"transpose", 1, false, false, [&](Graph& g, const std::vector<Tensor*>& p) {
                     return wrap(g, g.transpose(g.leaf(p[0])));
                   }});
  cases.push_back({"reshape", 1, false, false, [&](Graph& g, const std::vector<Tensor*>& p) {
                     return wrap(g, g.reshape(g.leaf(p[0]), {2, 6}));
                   }});
  cases.push_back({"concat_rows", 2, false, false, [&](Graph& g, const std::vector<Tensor*>& p) {
                     return wrap(g, g.concat({g.leaf(p[0]), g.leaf(p[1])}, 0));
                   }});
  cases.push_back({"concat_cols", 2, false, false, [&](Graph& g, const std::vector<Tensor*>& p) {
                     return wrap(g, g.concat({g.leaf(p[0]), g.leaf(p[1])}, 1));
                   }});
  cases.push_back({"slice_rows", 1, false, false, [&](Graph& g, const std::vector<Tensor*>& p) {
                     return wrap(g, g.slice_rows(g.leaf(p[0]), 1, 3));
                   }});
  cases.push_back({"sum_axis0", 1, false, false, [&](Graph& g, const std::vector<Tensor*>& p) {
                     return wrap(g, g.sum_axis(g.leaf(p[0]), 0));
                   }});
  cases.push_back({"sum_axis1", 1, false, false, [&](Graph& g, const std::vector<Tensor*>& p) {
                     return wrap(g, g.sum_axis(g.leaf(p[0]), 1));
                   }});
  cases.push_back({"mean_axis0", 1, false, false, [&](Graph& g, const std::vector<Tensor*>& p) {
                     return wrap(g, g.mean_axis(g.leaf(p[0]), 0));
                   }});
  cases.push_back({"mean_axis1", 1, false, false, [&](Graph& g, const std::vector<Tensor*>& p) {
                     return wrap(g, g.mean_axis(g.leaf(p[0]), 1));
                   }});
  cases.push_back({"sum_all", 1, false, false, [&](Graph& g, const std::vector<Tensor*>& p) {
                     Var s = g.sum_all(g.leaf(p[0]));
                     return g.mul(s, s);
                   }});
  cases.push_back({"mean_all", 1, false, false, [&](Graph& g, const std::vector<Tensor*>& p) {
                     Var s = g.mean_all(g.leaf(p[0]));
                     return g.mul(s, s);
                   }});
  cases.push_back({"add_rowvec", 2, false, false, [&](Graph& g, const std::vector<Tensor*>& p) {
                     Var vrow = g.mean_axis(g.leaf(p[1]), 0);  // length 4
                     return wrap(g, g.add_rowvec(g.leaf(p[0]), vrow));
                   }});
  cases.push_back({"softmax_rows", 1, false, false, [&](Graph& g, const std::vector<Tensor*>& p) {
                     return wrap(g, g.softmax_rows(g.leaf(p[0])));
                   }});
  // sum(y*y) of a normalized row is constant, so weight by a fixed matrix
  // to keep the loss sensitive to direction.
  cases.push_back({"l2_normalize_rows", 1, false, true,
                   [&](Graph& g, const std::vector<Tensor*>& p) {
                     Tensor w({3, 4});
                     for (int i = 0; i < w.numel(); ++i) w.data[i] = 0.3 + 0.1 * i;
                     Var y = g.l2_normalize_rows(g.leaf(p[0]));
                     return g.sum_all(g.mul(y, g.constant(w)));
                   }});
  cases.push_back({"layer_norm_rows", 2, false, false,
                   [&](Graph& g, const std::vector<Tensor*>& p) {
                     Var gamma = g.mean_axis(g.leaf(p[1]), 0);
                     Var beta = g.sum_axis(g.leaf(p[1]), 0);
                     return wrap(g, g.layer_norm_rows(g.leaf(p[0]), gamma, beta));
                   }});
  cases.push_back({"cosine_similarity", 2, false, false,
                   [&](Graph& g, const std::vector<Tensor*>& p) {
                     Var a = g.reshape(g.leaf(p[0]), {12});
                     Var b = g.reshape(g.leaf(p[1]), {12});
                     Var c = g.cosine_similarity(a, b);
                     return g.mul(c, c);
                   }});
  cases.push_back({"soft_cross_entropy_rows", 1, false, false,
                   [&](Graph& g, const std::vector<Tensor*>& p) {
                     Tensor t({3, 4});
                     t.at(0, 1) = 1.0;
                     t.at(1, 0) = 0.5;
                     t.at(1, 3) = 0.5;
                     t.at(2, 2) = 1.0;
                     return g.soft_cross_entropy_rows(g.leaf(p[0]), g.constant(t));
                   }});
  cases.push_back({"bce_with_logits", 1, false, false,
                   [&](Graph& g, const std::vector<Tensor*>& p) {
                     Tensor t({3, 4});
                     for (int i = 0; i < t.numel(); ++i) t.data[i] = (i % 3 == 0) ? 1.0 : 0.0;
                     return g.bce_with_logits(g.leaf(p[0]), g.constant(t));
                   }});

  for (const auto& kc : cases) {
    double worst = 0.0;
    for (uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(seed_stream(1234, kc.name, seed));
      std::vector<Tensor> storage;
      storage.reserve(static_cast<size_t>(kc.n_params));
      for (int i = 0; i < kc.n_params; ++i) {
        if (kc.positive_inputs)
          storage.push_back(rand_positive({3, 4}, rng));
        else if (kc.away_from_zero)
          storage.push_back(rand_tensor_away_from_zero({3, 4}, rng));
        else
          storage.push_back(rand_tensor({3, 4}, rng));
      }
      std::vector<Tensor*> params;
      for (auto& t : storage) params.push_back(&t);
      auto rep = grad_check(kc.fn, params, 1e-5);
      worst = std::max(worst, rep.max_rel_error);
    }
    INFO(kc.name);
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("conv kernels pass grad_check") {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed_stream(77, "conv", seed));
    Tensor x = rand_tensor({2, 5, 5}, rng);
    Tensor w = rand_tensor({3, 2, 3, 3}, rng, 0.5);
    Tensor b = rand_tensor({3}, rng, 0.1);
    auto fn = [](Graph& g, const std::vector<Tensor*>& p) {
      Var y = g.conv2d(g.leaf(p[0]), g.leaf(p[1]), g.leaf(p[2]), 1, 1);
      return g.sum_all(g.mul(y, y));
    };
    CHECK(grad_check(fn, {&x, &w, &b}, 1e-5).max_rel_error < 1e-4);

    Tensor wt = rand_tensor({2, 3, 2, 2}, rng, 0.5);
    auto fnt = [](Graph& g, const std::vector<Tensor*>& p) {
      Var y = g.conv_transpose2d(g.leaf(p[0]), g.leaf(p[1]), g.leaf(p[2]), 2);
      return g.sum_all(g.mul(y, y));
    };
    CHECK(grad_check(fnt, {&x, &wt, &b}, 1e-5).max_rel_error < 1e-4);

    auto fnu = [](Graph& g, const std::vector<Tensor*>& p) {
      Var y = g.upsample_bilinear2d(g.leaf(p[0]), 10, 10);
      return g.sum_all(g.mul(y, y));
    };
    CHECK(grad_check(fnu, {&x}, 1e-5).max_rel_error < 1e-4);
  }
}

TEST_CASE("determinism: identical seeds give bit-identical forward and backward") {
  auto run = [](uint64_t seed) {
    Rng rng(seed);
    Tensor x = rand_tensor({4, 4}, rng);
    x.requires_grad = true;
    Graph g;
    Var v = g.leaf(&x);
    Var y = g.softmax_rows(g.matmul(v, g.transpose(v)));
    Var loss = g.mean_all(g.gelu(y));
    g.backward(loss);
    return std::make_pair(g.value(loss).data[0], x.grad);
  };
  auto [l1, g1] = run(42);
  auto [l2, g2] = run(42);
  CHECK(l1 == l2);
  CHECK(g1 == g2);
}

TEST_CASE("non-finite outputs are rejected") {
  Graph g;
  Var x = g.constant(Tensor::from({2}, {0.0, 1.0}));
  CHECK_THROWS_AS(g.log(x), Error);  // log(0) = -inf
  Var big = g.constant(Tensor::from({1}, {1e308}));
  CHECK_THROWS_AS(g.mul(big, big), Error);
}

TEST_CASE("error paths: grad before backward, double backward, frozen graph") {
  Tensor x = Tensor::from({2}, {1, 2});
  x.requires_grad = true;
  Graph g;
  Var v = g.leaf(&x);
  Var loss = g.sum_all(v);
  CHECK_THROWS_AS(g.grad_of(v), Error);
  g.backward(loss);
  CHECK_THROWS_AS(g.backward(loss), Error);
  CHECK_THROWS_AS(g.sum_all(v), Error);

  Graph g2;
  CHECK_THROWS_AS(g2.backward(loss), Error);  // var from another graph
}

TEST_CASE("grad accumulates additively across leaf reuse") {
  Tensor x = Tensor::from({2}, {1.0, 2.0});
  x.requires_grad = true;
  {
    Graph g;
    Var v = g.leaf(&x);
    g.backward(g.sum_all(v));
  }
  {
    Graph g;
    Var v = g.leaf(&x);
    g.backward(g.sum_all(g.mul(v, v)));
  }
  CHECK(x.grad[0] == doctest::Approx(1.0 + 2.0).epsilon(1e-12));
  CHECK(x.grad[1] == doctest::Approx(1.0 + 4.0).epsilon(1e-12));
}

TEST_CASE("grad_check rejects non-deterministic losses") {
  int calls = 0;
  auto fn = [&calls](Graph& g, const std::vector<Tensor*>& p) {
    Var v = g.leaf(p[0]);
    return g.sum_all(g.mul_scalar(v, 1.0 + 0.001 * (calls++)));
  };
  Tensor x = Tensor::from({2}, {1, 2});
  CHECK_THROWS_AS(grad_check(fn, {&x}, 1e-5), Error);
}
