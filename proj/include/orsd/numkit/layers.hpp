#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "orsd/numkit/ops.hpp"

namespace orsd::numkit {

// Weight init: uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) for weights and biases.
inline Parameter init_uniform(std::string name, std::size_t fan_in, std::size_t rows,
                              std::size_t cols, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return Parameter(std::move(name), uniform_tensor(rows, cols, -bound, bound, rng));
}

struct Linear {
  Parameter weight;  // in x out
  Parameter bias;    // 1 x out

  Linear() = default;
  Linear(const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng)
      : weight(init_uniform(name + ".weight", in, in, out, rng)),
        bias(init_uniform(name + ".bias", in, 1, out, rng)) {}

  std::size_t in_features() const { return weight.value.rows(); }
  std::size_t out_features() const { return weight.value.cols(); }

  Var operator()(Var x) {
    if (x.cols() != in_features()) {
      throw NumericError(weight.name + ": input width " + std::to_string(x.cols()) +
                         " != " + std::to_string(in_features()));
    }
    Tape& t = *x.tape;
    return add_row(matmul(x, t.param(weight)), t.param(bias));
  }

  template <class F>
  void visit(F&& f) {
    f(weight);
    f(bias);
  }
};

// linear -> SiLU -> linear
struct Mlp2 {
  Linear fc1;
  Linear fc2;

  Mlp2() = default;
  Mlp2(const std::string& name, std::size_t in, std::size_t hidden, std::size_t out,
       std::mt19937_64& rng)
      : fc1(name + ".fc1", in, hidden, rng), fc2(name + ".fc2", hidden, out, rng) {}

  template <class F>
  void visit(F&& f) {
    fc1.visit(f);
    fc2.visit(f);
  }
};

inline Var mlp2(Var x, Mlp2& p) { return p.fc2(silu(p.fc1(x))); }

struct LayerNormParams {
  Parameter gamma;
  Parameter beta;
  double eps = 1e-5;

  LayerNormParams() = default;
  LayerNormParams(const std::string& name, std::size_t width, double eps_ = 1e-5)
      : gamma(name + ".gamma", Tensor2D(1, width, 1.0)),
        beta(name + ".beta", Tensor2D(1, width, 0.0)),
        eps(eps_) {}

  Var operator()(Var x) {
    Tape& t = *x.tape;
    return layer_norm(x, t.param(gamma), t.param(beta), eps);
  }

  template <class F>
  void visit(F&& f) {
    f(gamma);
    f(beta);
  }
};

struct AttentionParams {
  Linear q;
  Linear k;
  Linear v;
  Linear o;

  AttentionParams() = default;
  AttentionParams(const std::string& name, std::size_t dim, std::mt19937_64& rng)
      : q(name + ".q", dim, dim, rng),
        k(name + ".k", dim, dim, rng),
        v(name + ".v", dim, dim, rng),
        o(name + ".o", dim, dim, rng) {}

  std::size_t dim() const { return q.in_features(); }

  template <class F>
  void visit(F&& f) {
    q.visit(f);
    k.visit(f);
    v.visit(f);
    o.visit(f);
  }
};

// Multi-head cross-attention: queries from `query`, keys and values from `kv`.
// Each head attends with softmax(Q_h K_h^T / sqrt(d_h)) V_h; heads are
// concatenated and passed through the output projection.
inline Var mhca(Var query, Var kv, AttentionParams& p, std::size_t n_heads) {
  const std::size_t dim = p.dim();
  if (n_heads == 0 || dim % n_heads != 0) {
    throw NumericError("mhca: model dim " + std::to_string(dim) + " not divisible by " +
                       std::to_string(n_heads) + " heads");
  }
  if (query.cols() != dim || kv.cols() != dim) throw NumericError("mhca: input width mismatch");
  if (kv.rows() == 0) throw NumericError("mhca: empty key/value set");
  const std::size_t head_dim = dim / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));

  Var q = p.q(query);
  Var k = p.k(kv);
  Var v = p.v(kv);
  if (n_heads == 1) {
    Var attn = softmax_rows(scale(matmul(q, transpose(k)), inv_sqrt));
    return p.o(matmul(attn, v));
  }
  std::vector<Var> heads;
  heads.reserve(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    Var qh = slice_cols(q, h * head_dim, head_dim);
    Var kh = slice_cols(k, h * head_dim, head_dim);
    Var vh = slice_cols(v, h * head_dim, head_dim);
    Var attn = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt));
    heads.push_back(matmul(attn, vh));
  }
  return p.o(concat_cols(heads));
}

}  // namespace orsd::numkit
