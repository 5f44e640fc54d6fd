#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "orsd/numkit/gradcheck.hpp"
#include "orsd/numkit/layers.hpp"

using namespace orsd;
using namespace orsd::numkit;
using orsd::testing::max_abs_diff;
using orsd::testing::naive_matmul;

namespace {

Tensor2D random_tensor(std::size_t r, std::size_t c, std::mt19937_64& rng, double scale = 1.0) {
  return normal_tensor(r, c, scale, rng);
}

Tensor2D softmax_oracle(const Tensor2D& x) {
  Tensor2D out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double z = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) z += std::exp(x(i, j));
    for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) = std::exp(x(i, j)) / z;
  }
  return out;
}

double silu_oracle(double x) { return x / (1.0 + std::exp(-x)); }

Tensor2D linear_oracle(const Tensor2D& x, const Linear& l) {
  Tensor2D y = naive_matmul(x, l.weight.value);
  for (std::size_t i = 0; i < y.rows(); ++i)
    for (std::size_t j = 0; j < y.cols(); ++j) y(i, j) += l.bias.value(0, j);
  return y;
}

// Explicit per-head, per-query attention loops.
Tensor2D mhca_oracle(const Tensor2D& q_in, const Tensor2D& kv_in, const AttentionParams& p, std::size_t heads) {
  const Tensor2D q = linear_oracle(q_in, p.q);
  const Tensor2D k = linear_oracle(kv_in, p.k);
  const Tensor2D v = linear_oracle(kv_in, p.v);
  const std::size_t d = q.cols() / heads;
  Tensor2D concat(q.rows(), q.cols());
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < q.rows(); ++i) {
      std::vector<double> w(k.rows());
      double mx = -1e300;
      for (std::size_t j = 0; j < k.rows(); ++j) {
        double s = 0.0;
        for (std::size_t t = 0; t < d; ++t) s += q(i, h * d + t) * k(j, h * d + t);
        w[j] = s / std::sqrt(static_cast<double>(d));
        mx = std::max(mx, w[j]);
      }
      double z = 0.0;
      for (double& x : w) z += (x = std::exp(x - mx));
      for (std::size_t t = 0; t < d; ++t) {
        double acc = 0.0;
        for (std::size_t j = 0; j < k.rows(); ++j) acc += w[j] / z * v(j, h * d + t);
        concat(i, h * d + t) = acc;
      }
    }
  }
  return linear_oracle(concat, p.o);
}

}  // namespace

TEST(Matmul, Examples) {
  std::mt19937_64 rng(1);
  Tape t;
  const Tensor2D a = random_tensor(3, 3, rng);
  EXPECT_EQ(matmul(t.constant(Tensor2D::identity(3)), t.constant(a)).value(), a);
  const Tensor2D m{{1, 2}, {3, 4}};
  const Tensor2D v{{0}, {1}};
  EXPECT_EQ(matmul(t.constant(m), t.constant(v)).value(), (Tensor2D{{2}, {4}}));
  const Tensor2D x = random_tensor(7, 5, rng);
  const Tensor2D y = random_tensor(5, 3, rng);
  EXPECT_LE(max_abs_diff(matmul(t.constant(x), t.constant(y)).value(), naive_matmul(x, y)), 1e-12);
  EXPECT_THROW(matmul(t.constant(x), t.constant(x)), NumericError);
}

TEST(LayerNorm, Examples) {
  Tape t;
  Var g = t.constant(Tensor2D(1, 4, 1.0));
  Var b = t.constant(Tensor2D(1, 4, 0.0));
  const Tensor2D flat{{3, 3, 3, 3}};
  EXPECT_EQ(layer_norm(t.constant(flat), g, b).value(), Tensor2D(1, 4, 0.0));

  const Tensor2D unit{{1, -1, 1, -1}};  // mean 0, variance 1
  const Tensor2D out = layer_norm(t.constant(unit), g, b, 1e-5).value();
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(out[j], unit[j] / std::sqrt(1 + 1e-5), 1e-15);
  EXPECT_NEAR(out[0], 1.0, 1e-5);

  std::mt19937_64 rng(2);
  const Tensor2D x = random_tensor(5, 9, rng, 3.0);
  const Tensor2D gamma = random_tensor(1, 9, rng);
  const Tensor2D beta = random_tensor(1, 9, rng);
  const Tensor2D y = layer_norm(t.constant(x), t.constant(gamma), t.constant(beta), 1e-5).value();
  for (std::size_t i = 0; i < 5; ++i) {
    double mean = 0, var = 0;
    for (std::size_t j = 0; j < 9; ++j) mean += x(i, j) / 9;
    for (std::size_t j = 0; j < 9; ++j) var += (x(i, j) - mean) * (x(i, j) - mean) / 9;
    for (std::size_t j = 0; j < 9; ++j) {
      EXPECT_NEAR(y(i, j), gamma[j] * (x(i, j) - mean) / std::sqrt(var + 1e-5) + beta[j], 1e-12);
    }
  }
  EXPECT_THROW(layer_norm(t.constant(x), g, b), NumericError);
}

TEST(LayerNorm, PreAffineMomentsProperty) {
  std::mt19937_64 rng(3);
  Tape t;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t c = 2 + trial % 30;
    const double eps = 1e-5;
    const Tensor2D x = random_tensor(4, c, rng, 0.1 + trial);
    const Tensor2D y = layer_norm(t.constant(x), t.constant(Tensor2D(1, c, 1.0)), t.constant(Tensor2D(1, c, 0.0)), eps).value();
    for (std::size_t i = 0; i < 4; ++i) {
      double mean = 0, var = 0, xm = 0, xv = 0;
      for (std::size_t j = 0; j < c; ++j) {
        mean += y(i, j) / c;
        xm += x(i, j) / c;
      }
      for (std::size_t j = 0; j < c; ++j) {
        var += (y(i, j) - mean) * (y(i, j) - mean) / c;
        xv += (x(i, j) - xm) * (x(i, j) - xm) / c;
      }
      EXPECT_LE(std::abs(mean), 1e-10);
      // Variance is exactly var/(var + eps) before rounding.
      EXPECT_NEAR(var, xv / (xv + eps), 1e-10);
    }
  }
}

TEST(SoftmaxRows, Examples) {
  Tape t;
  const Tensor2D eq = softmax_rows(t.constant(Tensor2D{{2, 2, 2, 2}})).value();
  for (double v : eq.values()) EXPECT_DOUBLE_EQ(v, 0.25);
  const Tensor2D two = softmax_rows(t.constant(Tensor2D{{0, std::log(3.0)}})).value();
  EXPECT_NEAR(two[0], 0.25, 1e-15);
  EXPECT_NEAR(two[1], 0.75, 1e-15);

  std::mt19937_64 rng(4);
  const Tensor2D x = random_tensor(6, 7, rng, 2.0);
  EXPECT_LE(max_abs_diff(softmax_rows(t.constant(x)).value(), softmax_oracle(x)), 1e-12);
}

TEST(SoftmaxRows, RowsSumToOneAndShiftInvariant) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> shift(0, 50);
  Tape t;
  for (int trial = 0; trial < 100; ++trial) {
    Tensor2D x = random_tensor(3, 1 + trial % 12, rng, 5.0);
    const Tensor2D s = softmax_rows(t.constant(x)).value();
    for (std::size_t i = 0; i < s.rows(); ++i) {
      double sum = 0;
      for (double v : s.row(i)) sum += v;
      EXPECT_NEAR(sum, 1.0, 1e-12);
      const double c = shift(rng);
      for (double& v : x.row(i)) v += c;
    }
    EXPECT_LE(max_abs_diff(softmax_rows(t.constant(x)).value(), s), 1e-12);
  }
}

TEST(Mhca, SingleKeyGivesProjectedValue) {
  std::mt19937_64 rng(6);
  AttentionParams p("a", 8, rng);
  Tape t;
  const Tensor2D kv = random_tensor(1, 8, rng);
  const Tensor2D out = mhca(t.constant(random_tensor(4, 8, rng)), t.constant(kv), p, 2).value();
  const Tensor2D want = linear_oracle(linear_oracle(kv, p.v), p.o);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(out(i, j), want(0, j), 1e-12);
}

TEST(Mhca, DuplicateKeysCollapse) {
  std::mt19937_64 rng(7);
  AttentionParams p("a", 8, rng);
  Tape t;
  const Tensor2D q = random_tensor(3, 8, rng);
  const Tensor2D kv = random_tensor(1, 8, rng);
  Tensor2D kv2(2, 8);
  for (std::size_t j = 0; j < 8; ++j) kv2(0, j) = kv2(1, j) = kv(0, j);
  EXPECT_LE(max_abs_diff(mhca(t.constant(q), t.constant(kv), p, 4).value(),
                         mhca(t.constant(q), t.constant(kv2), p, 4).value()),
            1e-12);
}

TEST(Mhca, MatchesLoopOracle) {
  std::mt19937_64 rng(8);
  Tape t;
  {
    AttentionParams p("a", 6, rng);
    const Tensor2D q = random_tensor(4, 6, rng), kv = random_tensor(3, 6, rng);
    EXPECT_LE(max_abs_diff(mhca(t.constant(q), t.constant(kv), p, 1).value(), mhca_oracle(q, kv, p, 1)), 1e-10);
  }
  {
    AttentionParams p("b", 256, rng);
    const Tensor2D q = random_tensor(5, 256, rng), kv = random_tensor(9, 256, rng);
    EXPECT_LE(max_abs_diff(mhca(t.constant(q), t.constant(kv), p, 8).value(), mhca_oracle(q, kv, p, 8)), 1e-10);
  }
  AttentionParams bad("c", 6, rng);
  EXPECT_THROW(mhca(t.constant(random_tensor(2, 6, rng)), t.constant(random_tensor(2, 6, rng)), bad, 4), NumericError);
}

TEST(Mhca, InvariantToKeyValuePermutation) {
  std::mt19937_64 rng(9);
  AttentionParams p("a", 16, rng);
  Tape t;
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor2D q = random_tensor(4, 16, rng);
    const Tensor2D kv = random_tensor(6, 16, rng);
    std::vector<std::size_t> perm{0, 1, 2, 3, 4, 5};
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor2D shuffled(6, 16);
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 16; ++j) shuffled(i, j) = kv(perm[i], j);
    EXPECT_LE(max_abs_diff(mhca(t.constant(q), t.constant(kv), p, 4).value(),
                           mhca(t.constant(q), t.constant(shuffled), p, 4).value()),
              1e-12);
  }
}

TEST(Mlp2, Examples) {
  std::mt19937_64 rng(10);
  Mlp2 m("m", 4, 8, 4, rng);
  m.fc1.weight.value.fill(0);
  m.fc2.weight.value.fill(0);
  Tape t;
  const Tensor2D out = mlp2(t.constant(random_tensor(3, 4, rng)), m).value();
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(out(i, j), m.fc2.bias.value(0, j));

  Mlp2 id("id", 4, 4, 4, rng);
  id.fc1.weight.value = Tensor2D::identity(4);
  id.fc2.weight.value = Tensor2D::identity(4);
  id.fc1.bias.value.fill(0);
  id.fc2.bias.value.fill(0);
  const Tensor2D y = mlp2(t.constant(Tensor2D(2, 4, 10.0)), id).value();
  for (double v : y.values()) EXPECT_NEAR(v, 10.0, 1e-3);

  Mlp2 r("r", 5, 10, 3, rng);
  const Tensor2D x = random_tensor(4, 5, rng);
  Tensor2D h = linear_oracle(x, r.fc1);
  for (double& v : h.values()) v = silu_oracle(v);
  EXPECT_LE(max_abs_diff(mlp2(t.constant(x), r).value(), linear_oracle(h, r.fc2)), 1e-12);
  EXPECT_THROW(mlp2(t.constant(random_tensor(4, 6, rng)), r), NumericError);
}

TEST(GradCheck, SquareAtThree) {
  Parameter x("x", Tensor2D::scalar(3.0));
  const auto res = grad_check([&](Tape& t) { Var v = t.param(x); return matmul(v, v); }, {&x}, {.h = 1e-5});
  EXPECT_NEAR(res.analytic, 6.0, 1e-12);
  EXPECT_LT(res.max_rel_error, 1e-9);
}

TEST(GradCheck, LayerNormSum) {
  std::mt19937_64 rng(12);
  Parameter x("x", random_tensor(3, 7, rng));
  Parameter g("gamma", random_tensor(1, 7, rng));
  Parameter b("beta", random_tensor(1, 7, rng));
  const auto res = grad_check(
      [&](Tape& t) { return sum(layer_norm(t.param(x), t.param(g), t.param(b))); }, {&x, &g, &b});
  EXPECT_LT(res.max_rel_error, 1e-6) << res.worst_param;
}

// Every differentiable op on randomized shapes, with a random linear readout
// so that no gradient vanishes by symmetry.
TEST(GradCheck, EveryOpOnRandomShapes) {
  std::mt19937_64 rng(13);
  std::uniform_int_distribution<std::size_t> dim(1, 6);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = dim(rng), m = dim(rng), k = dim(rng);
    const std::size_t heads = 1 + trial % 2;
    const std::size_t d = 2 * heads * dim(rng);
    Parameter a("a", random_tensor(n, k, rng));
    Parameter b("b", random_tensor(k, m, rng));
    Parameter bias("bias", random_tensor(1, m, rng));
    Parameter g("g", random_tensor(1, m, rng));
    Parameter be("be", random_tensor(1, m, rng));
    Parameter q("q", random_tensor(n, d, rng));
    Parameter kv("kv", random_tensor(m + 1, d, rng));
    AttentionParams attn("attn", d, rng);
    Mlp2 mlp("mlp", d, 2 * d, d, rng);
    const Tensor2D r1 = random_tensor(n, m, rng);
    const Tensor2D r2 = random_tensor(n, d, rng);

    std::vector<Parameter*> params{&a, &b, &bias, &g, &be, &q, &kv};
    attn.visit([&](Parameter& p) { params.push_back(&p); });
    mlp.visit([&](Parameter& p) { params.push_back(&p); });

    const auto f = [&](Tape& t) {
      Var ab = add_row(matmul(t.param(a), t.param(b)), t.param(bias));
      Var ln = layer_norm(silu(ab), t.param(g), t.param(be));
      Var sm = softmax_rows(scale(ln, 1.7));
      Var att = mhca(t.param(q), t.param(kv), attn, heads);
      Var ml = mlp2(att, mlp);
      Var cat = concat_cols({slice_cols(ml, 0, d / 2), slice_cols(ml, d / 2, d - d / 2)});
      Var gathered = gather_rows(transpose(transpose(cat)), [&] {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < n; ++i) idx.push_back(n - 1 - i);
        return idx;
      }());
      Var r1v = t.constant(r1);
      Var r2v = t.constant(r2);
      Var s1 = sum(matmul(transpose(sm), r1v));
      Var s2 = sum(matmul(transpose(add(gathered, cat)), r2v));
      return add_n({s1, s2, sum(ab)});
    };
    const auto res = grad_check(f, params, {.h = 1e-5});
    EXPECT_LE(res.max_rel_error, 1e-4) << "trial " << trial << " param " << res.worst_param << " analytic "
                                       << res.analytic << " numeric " << res.numeric;
  }
}
