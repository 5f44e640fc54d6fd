#pragma once

// Differentiable primitives recorded on a Tape. Each op computes its forward
// value eagerly and registers a closure that pushes out_grad() into its inputs.

#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "orsd/numkit/tape.hpp"

namespace orsd::numkit {

namespace detail {
inline void require_same_tape(Var a, Var b) {
  if (a.tape != b.tape || a.tape == nullptr) throw NumericError("vars from different tapes");
}
inline double silu_value(double x) { return x / (1.0 + std::exp(-x)); }
inline double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
}  // namespace detail

using detail::sigmoid_value;

inline Var matmul(Var a, Var b) {
  detail::require_same_tape(a, b);
  Tape& t = *a.tape;
  Tensor2D out = matmul_values(a.value(), b.value());
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp) {
    const Tensor2D& g = tp.out_grad();
    if (Tensor2D* ga = tp.grad(a)) {
      as_eigen(*ga).noalias() += as_eigen(g) * as_eigen(tp.value(b)).transpose();
    }
    if (Tensor2D* gb = tp.grad(b)) {
      as_eigen(*gb).noalias() += as_eigen(tp.value(a)).transpose() * as_eigen(g);
    }
  });
}

inline Var transpose(Var a) {
  Tape& t = *a.tape;
  return t.record(transpose(a.value()), {a}, [a](Tape& tp) {
    if (Tensor2D* ga = tp.grad(a)) *ga += transpose(tp.out_grad());
  });
}

inline Var add(Var a, Var b) {
  detail::require_same_tape(a, b);
  if (!a.value().same_shape(b.value())) throw NumericError("add shape mismatch");
  Tensor2D out = a.value();
  out += b.value();
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& tp) {
    if (Tensor2D* ga = tp.grad(a)) *ga += tp.out_grad();
    if (Tensor2D* gb = tp.grad(b)) *gb += tp.out_grad();
  });
}

// Sum of any number of same-shape vars.
inline Var add_n(const std::vector<Var>& xs) {
  if (xs.empty()) throw NumericError("add_n of nothing");
  Tensor2D out = xs.front().value();
  for (std::size_t i = 1; i < xs.size(); ++i) {
    detail::require_same_tape(xs[0], xs[i]);
    out += xs[i].value();
  }
  return xs.front().tape->record(std::move(out), xs, [xs](Tape& tp) {
    for (const Var& x : xs) {
      if (Tensor2D* gx = tp.grad(x)) *gx += tp.out_grad();
    }
  });
}

// x (N x C) + row vector b (1 x C) broadcast over rows.
inline Var add_row(Var x, Var b) {
  detail::require_same_tape(x, b);
  const Tensor2D& xv = x.value();
  const Tensor2D& bv = b.value();
  if (bv.rows() != 1 || bv.cols() != xv.cols()) throw NumericError("add_row: bias shape mismatch");
  Tensor2D out = xv;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += bv(0, j);
  return x.tape->record(std::move(out), {x, b}, [x, b](Tape& tp) {
    const Tensor2D& g = tp.out_grad();
    if (Tensor2D* gx = tp.grad(x)) *gx += g;
    if (Tensor2D* gb = tp.grad(b)) {
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) (*gb)(0, j) += g(i, j);
    }
  });
}

inline Var scale(Var x, double s) {
  Tensor2D out = x.value();
  for (double& v : out.values()) v *= s;
  return x.tape->record(std::move(out), {x}, [x, s](Tape& tp) {
    if (Tensor2D* gx = tp.grad(x)) {
      const Tensor2D& g = tp.out_grad();
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += s * g[i];
    }
  });
}

inline Var silu(Var x) {
  Tensor2D out = x.value();
  for (double& v : out.values()) v = detail::silu_value(v);
  return x.tape->record(std::move(out), {x}, [x](Tape& tp) {
    if (Tensor2D* gx = tp.grad(x)) {
      const Tensor2D& g = tp.out_grad();
      const Tensor2D& xv = tp.value(x);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double s = detail::sigmoid_value(xv[i]);
        (*gx)[i] += g[i] * (s * (1.0 + xv[i] * (1.0 - s)));
      }
    }
  });
}

// Sum of all entries as a 1x1 var.
inline Var sum(Var x) {
  const auto vals = x.value().values();
  const double s = std::accumulate(vals.begin(), vals.end(), 0.0);
  return x.tape->record(Tensor2D::scalar(s), {x}, [x](Tape& tp) {
    if (Tensor2D* gx = tp.grad(x)) {
      const double g = tp.out_grad()[0];
      for (double& v : gx->values()) v += g;
    }
  });
}

// Row-wise softmax with max subtraction.
inline Tensor2D softmax_rows_values(const Tensor2D& x) {
  Tensor2D out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto r = x.row(i);
    if (r.empty()) continue;
    double m = r[0];
    for (double v : r) m = std::max(m, v);
    double z = 0.0;
    auto o = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) {
      o[j] = std::exp(r[j] - m);
      z += o[j];
    }
    for (double& v : o) v /= z;
  }
  return out;
}

inline Var softmax_rows(Var x) {
  Tensor2D out = softmax_rows_values(x.value());
  Tensor2D saved = out;
  return x.tape->record(std::move(out), {x}, [x, s = std::move(saved)](Tape& tp) {
    Tensor2D* gx = tp.grad(x);
    if (gx == nullptr) return;
    const Tensor2D& g = tp.out_grad();
    for (std::size_t i = 0; i < s.rows(); ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < s.cols(); ++j) dot += g(i, j) * s(i, j);
      for (std::size_t j = 0; j < s.cols(); ++j) (*gx)(i, j) += s(i, j) * (g(i, j) - dot);
    }
  });
}

// Per-row normalization to zero mean / unit variance, then gamma * xhat + beta.
// gamma and beta are 1 x C.
inline Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5) {
  detail::require_same_tape(x, gamma);
  detail::require_same_tape(x, beta);
  const Tensor2D& xv = x.value();
  const std::size_t n = xv.rows();
  const std::size_t c = xv.cols();
  if (gamma.value().rows() != 1 || gamma.value().cols() != c || beta.value().rows() != 1 ||
      beta.value().cols() != c) {
    throw NumericError("layer_norm: gamma/beta length must equal x.cols");
  }
  Tensor2D xhat(n, c);
  std::vector<double> inv_std(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = xv.row(i);
    double mean = 0.0;
    for (double v : r) mean += v;
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (double v : r) var += (v - mean) * (v - mean);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) xhat(i, j) = (r[j] - mean) * inv_std[i];
  }
  Tensor2D out(n, c);
  const Tensor2D& gv = gamma.value();
  const Tensor2D& bv = beta.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) out(i, j) = gv(0, j) * xhat(i, j) + bv(0, j);

  return x.tape->record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& tp) {
        const Tensor2D& g = tp.out_grad();
        const Tensor2D& gv = tp.value(gamma);
        const std::size_t n = g.rows();
        const std::size_t c = g.cols();
        if (Tensor2D* gg = tp.grad(gamma)) {
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) (*gg)(0, j) += g(i, j) * xhat(i, j);
        }
        if (Tensor2D* gb = tp.grad(beta)) {
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) (*gb)(0, j) += g(i, j);
        }
        if (Tensor2D* gx = tp.grad(x)) {
          const double inv_c = 1.0 / static_cast<double>(c);
          for (std::size_t i = 0; i < n; ++i) {
            double mean_d = 0.0;
            double mean_dx = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              const double d = g(i, j) * gv(0, j);
              mean_d += d;
              mean_dx += d * xhat(i, j);
            }
            mean_d *= inv_c;
            mean_dx *= inv_c;
            for (std::size_t j = 0; j < c; ++j) {
              const double d = g(i, j) * gv(0, j);
              (*gx)(i, j) += inv_std[i] * (d - mean_d - xhat(i, j) * mean_dx);
            }
          }
        }
      });
}

inline Var slice_cols(Var x, std::size_t begin, std::size_t count) {
  const Tensor2D& xv = x.value();
  if (begin + count > xv.cols()) throw NumericError("slice_cols out of range");
  Tensor2D out(xv.rows(), count);
  for (std::size_t i = 0; i < xv.rows(); ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = xv(i, begin + j);
  return x.tape->record(std::move(out), {x}, [x, begin, count](Tape& tp) {
    if (Tensor2D* gx = tp.grad(x)) {
      const Tensor2D& g = tp.out_grad();
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < count; ++j) (*gx)(i, begin + j) += g(i, j);
    }
  });
}

inline Var concat_cols(const std::vector<Var>& xs) {
  if (xs.empty()) throw NumericError("concat_cols of nothing");
  const std::size_t n = xs[0].rows();
  std::size_t total = 0;
  for (const Var& x : xs) {
    if (x.rows() != n) throw NumericError("concat_cols row mismatch");
    total += x.cols();
  }
  Tensor2D out(n, total);
  std::size_t off = 0;
  for (const Var& x : xs) {
    const Tensor2D& v = x.value();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < v.cols(); ++j) out(i, off + j) = v(i, j);
    off += v.cols();
  }
  return xs[0].tape->record(std::move(out), xs, [xs](Tape& tp) {
    const Tensor2D& g = tp.out_grad();
    std::size_t off = 0;
    for (const Var& x : xs) {
      const std::size_t c = tp.value(x).cols();
      if (Tensor2D* gx = tp.grad(x)) {
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (std::size_t j = 0; j < c; ++j) (*gx)(i, j) += g(i, off + j);
      }
      off += c;
    }
  });
}

// out.row(k) = x.row(index[k]); backward scatter-adds.
inline Var gather_rows(Var x, std::vector<std::size_t> index) {
  const Tensor2D& xv = x.value();
  Tensor2D out(index.size(), xv.cols());
  for (std::size_t k = 0; k < index.size(); ++k) {
    if (index[k] >= xv.rows()) throw NumericError("gather_rows index out of range");
    for (std::size_t j = 0; j < xv.cols(); ++j) out(k, j) = xv(index[k], j);
  }
  return x.tape->record(std::move(out), {x}, [x, index = std::move(index)](Tape& tp) {
    if (Tensor2D* gx = tp.grad(x)) {
      const Tensor2D& g = tp.out_grad();
      for (std::size_t k = 0; k < index.size(); ++k)
        for (std::size_t j = 0; j < g.cols(); ++j) (*gx)(index[k], j) += g(k, j);
    }
  });
}

}  // namespace orsd::numkit
