#pragma once

// Prompt-conditioned classification logits and the detection losses. Every
// function here is a single recorded primitive with a hand-written backward.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "orsd/geom.hpp"
#include "orsd/heads/types.hpp"
#include "orsd/numkit/ops.hpp"

namespace orsd::heads {

using numkit::Tape;
using numkit::Var;

namespace detail {

inline double norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline constexpr double kTinyNorm = 1e-12;

// log(1 + exp(x)) without overflow.
inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline void check_width(Var z, Var p) {
  if (z.cols() != p.cols()) {
    throw NumericError("embedding width mismatch: " + std::to_string(z.cols()) + " vs " +
                       std::to_string(p.cols()));
  }
}

}  // namespace detail

// s[i][c] = max over prompts j labelled c of  alpha * (z_i . p_j) / |p_j| + beta.
// Columns follow `classes`. With `normalize_z` the rows of Z are also unit
// normalized before the product.
inline Var class_logits(Var z, Var p, std::span<const CategoryId> labels,
                        std::span<const CategoryId> classes, Var alpha, Var beta,
                        bool normalize_z = false) {
  detail::check_width(z, p);
  const Tensor2D& zv = z.value();
  const Tensor2D& pv = p.value();
  if (labels.size() != pv.rows()) throw NumericError("class_logits: one label per prompt row");
  const std::size_t n = zv.rows();
  const std::size_t m = pv.rows();
  const std::size_t c_count = classes.size();
  const double a = alpha.value().item();
  const double b = beta.value().item();
  // With alpha > 0 the max of the affine map sits at the max of the product.
  if (!(a > 0.0)) throw NumericError("class_logits: alpha must be positive");

  std::vector<std::vector<std::size_t>> members(c_count);
  for (std::size_t c = 0; c < c_count; ++c) {
    for (std::size_t j = 0; j < m; ++j) {
      if (labels[j] == classes[c]) members[c].push_back(j);
    }
    if (members[c].empty()) {
      throw DataError("class_logits: no prompt for class " + std::to_string(classes[c]));
    }
  }
  std::vector<double> pnorm(m);
  for (std::size_t j = 0; j < m; ++j) pnorm[j] = std::max(detail::norm(pv.row(j)), detail::kTinyNorm);
  std::vector<double> znorm(n, 1.0);
  if (normalize_z) {
    for (std::size_t i = 0; i < n; ++i) znorm[i] = std::max(detail::norm(zv.row(i)), detail::kTinyNorm);
  }

  Tensor2D out(n, c_count);
  Tensor2D product(n, c_count);  // normalized product at the winning prompt
  std::vector<std::size_t> winner(n * c_count);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < c_count; ++c) {
      double best = -std::numeric_limits<double>::infinity();
      std::size_t arg = members[c].front();
      for (std::size_t j : members[c]) {
        const double v = detail::dot(zv.row(i), pv.row(j)) / (pnorm[j] * znorm[i]);
        if (v > best) {
          best = v;
          arg = j;
        }
      }
      product(i, c) = best;
      winner[i * c_count + c] = arg;
      out(i, c) = a * best + b;
    }
  }

  return z.tape->record(
      std::move(out), {z, p, alpha, beta},
      [z, p, alpha, beta, product = std::move(product), winner = std::move(winner),
       pnorm = std::move(pnorm), znorm = std::move(znorm), c_count, normalize_z](Tape& tp) {
        const Tensor2D& g = tp.out_grad();
        const Tensor2D& zv = tp.value(z);
        const Tensor2D& pv = tp.value(p);
        const double a = tp.value(alpha).item();
        Tensor2D* gz = tp.grad(z);
        Tensor2D* gp = tp.grad(p);
        double ga = 0.0;
        double gb = 0.0;
        const std::size_t d = zv.cols();
        for (std::size_t i = 0; i < g.rows(); ++i) {
          for (std::size_t c = 0; c < c_count; ++c) {
            const double gi = g(i, c);
            if (gi == 0.0) continue;
            const std::size_t j = winner[i * c_count + c];
            const double s = product(i, c);
            ga += gi * s;
            gb += gi;
            const double k = gi * a;
            const double pn = pnorm[j];
            const double zn = znorm[i];
            if (gz != nullptr) {
              for (std::size_t t = 0; t < d; ++t) {
                double dz = pv(j, t) / (pn * zn);
                if (normalize_z) dz -= s * zv(i, t) / (zn * zn);
                (*gz)(i, t) += k * dz;
              }
            }
            if (gp != nullptr) {
              for (std::size_t t = 0; t < d; ++t) {
                const double dp = zv(i, t) / (pn * zn) - s * pv(j, t) / (pn * pn);
                (*gp)(j, t) += k * dp;
              }
            }
          }
        }
        if (Tensor2D* g_alpha = tp.grad(alpha)) (*g_alpha)[0] += ga;
        if (Tensor2D* g_beta = tp.grad(beta)) (*g_beta)[0] += gb;
      });
}

// Row index of Z with the highest cosine similarity to each prompt row.
inline std::vector<std::size_t> contrastive_anchors(const Tensor2D& z, const Tensor2D& p) {
  std::vector<double> zn(z.rows());
  for (std::size_t i = 0; i < z.rows(); ++i) zn[i] = std::max(detail::norm(z.row(i)), detail::kTinyNorm);
  std::vector<std::size_t> out(p.rows(), 0);
  for (std::size_t j = 0; j < p.rows(); ++j) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < z.rows(); ++i) {
      const double s = detail::dot(z.row(i), p.row(j)) / zn[i];
      if (s > best) {
        best = s;
        out[j] = i;
      }
    }
  }
  return out;
}

// Supervised contrastive loss over the prompt batch. For each prompt j the
// anchor is the row of Z most cosine-similar to p_j; A(j) is every other
// prompt and P(j) those sharing j's label:
//   l_j = -1/|P(j)| sum_{q in P(j)} log( exp(s_jq/tau) / sum_{k in A(j)} exp(s_jk/tau) )
// with s the cosine similarity. The result is the mean of l_j over anchors
// with non-empty P(j); 0 when there are none.
inline Var supcon_loss(Var z, Var p, std::span<const CategoryId> labels, double tau) {
  if (!(tau > 0.0)) throw NumericError("supcon_loss: temperature must be positive");
  detail::check_width(z, p);
  const Tensor2D& zv = z.value();
  const Tensor2D& pv = p.value();
  const std::size_t m = pv.rows();
  if (labels.size() != m) throw NumericError("supcon_loss: one label per prompt row");
  if (zv.rows() == 0) throw NumericError("supcon_loss: no prediction embeddings");

  const std::vector<std::size_t> anchor = contrastive_anchors(zv, pv);
  std::vector<double> pn(m);
  for (std::size_t j = 0; j < m; ++j) pn[j] = std::max(detail::norm(pv.row(j)), detail::kTinyNorm);

  // dL/ds_jk per anchor, filled during the forward pass.
  Tensor2D weight(m, m);
  Tensor2D sim(m, m);
  std::size_t active = 0;
  double total = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    std::size_t n_pos = 0;
    for (std::size_t k = 0; k < m; ++k) n_pos += (k != j && labels[k] == labels[j]) ? 1 : 0;
    if (n_pos == 0 || m < 2) continue;
    ++active;
    const auto zr = zv.row(anchor[j]);
    const double zn = std::max(detail::norm(zr), detail::kTinyNorm);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < m; ++k) {
      if (k == j) continue;
      sim(j, k) = detail::dot(zr, pv.row(k)) / (zn * pn[k]);
      mx = std::max(mx, sim(j, k) / tau);
    }
    double z_sum = 0.0;
    for (std::size_t k = 0; k < m; ++k) {
      if (k != j) z_sum += std::exp(sim(j, k) / tau - mx);
    }
    const double log_den = mx + std::log(z_sum);
    double lj = 0.0;
    for (std::size_t k = 0; k < m; ++k) {
      if (k == j) continue;
      const double soft = std::exp(sim(j, k) / tau - log_den);
      const bool pos = labels[k] == labels[j];
      if (pos) lj -= (sim(j, k) / tau - log_den);
      weight(j, k) = (soft - (pos ? 1.0 / static_cast<double>(n_pos) : 0.0)) / tau;
    }
    total += lj / static_cast<double>(n_pos);
  }
  const double inv_active = active == 0 ? 0.0 : 1.0 / static_cast<double>(active);
  for (double& w : weight.values()) w *= inv_active;

  return z.tape->record(
      Tensor2D::scalar(total * inv_active), {z, p},
      [z, p, anchor, pn = std::move(pn), weight = std::move(weight), sim = std::move(sim)](Tape& tp) {
        const double g = tp.out_grad()[0];
        const Tensor2D& zv = tp.value(z);
        const Tensor2D& pv = tp.value(p);
        Tensor2D* gz = tp.grad(z);
        Tensor2D* gp = tp.grad(p);
        const std::size_t d = zv.cols();
        for (std::size_t j = 0; j < weight.rows(); ++j) {
          const auto zr = zv.row(anchor[j]);
          const double zn = std::max(detail::norm(zr), detail::kTinyNorm);
          for (std::size_t k = 0; k < weight.cols(); ++k) {
            const double w = g * weight(j, k);
            if (w == 0.0) continue;
            const double s = sim(j, k);
            // d cos(a, b) / da = (b_hat - s a_hat) / |a|
            for (std::size_t t = 0; t < d; ++t) {
              const double zh = zr[t] / zn;
              const double ph = pv(k, t) / pn[k];
              if (gz != nullptr) (*gz)(anchor[j], t) += w * (ph - s * zh) / zn;
              if (gp != nullptr) (*gp)(k, t) += w * (zh - s * ph) / pn[k];
            }
          }
        }
      });
}

struct FocalOptions {
  double gamma = 2.0;
  double alpha = 0.25;
};

// Sigmoid focal loss summed over all (cell, class) pairs and divided by
// max(1, number of positive cells). `targets` is 0/1 with the logits' shape.
inline Var focal_loss(Var logits, const Tensor2D& targets, std::size_t num_positive,
                      const FocalOptions& opt = {}) {
  const Tensor2D& x = logits.value();
  if (!x.same_shape(targets)) throw NumericError("focal_loss: target shape mismatch");
  const double norm = 1.0 / static_cast<double>(std::max<std::size_t>(1, num_positive));
  Tensor2D dx(x.rows(), x.cols());
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double p = numkit::sigmoid_value(x[i]);
    const double log_p = -detail::softplus(-x[i]);
    const double log_1mp = -detail::softplus(x[i]);
    if (targets[i] > 0.5) {
      const double w = std::pow(1.0 - p, opt.gamma);
      total += -opt.alpha * w * log_p;
      dx[i] = opt.alpha * w * (opt.gamma * p * log_p - (1.0 - p));
    } else {
      const double w = std::pow(p, opt.gamma);
      total += -(1.0 - opt.alpha) * w * log_1mp;
      dx[i] = (1.0 - opt.alpha) * w * (p - opt.gamma * (1.0 - p) * log_1mp);
    }
    dx[i] *= norm;
  }
  return logits.tape->record(Tensor2D::scalar(total * norm), {logits},
                             [logits, dx = std::move(dx)](Tape& tp) {
                               if (Tensor2D* g = tp.grad(logits)) {
                                 const double s = tp.out_grad()[0];
                                 for (std::size_t i = 0; i < dx.size(); ++i) (*g)[i] += s * dx[i];
                               }
                             });
}

// 0/1 target matrix for focal_loss: assigned cells get a 1 in their GT's column.
inline Tensor2D classification_targets(const Assignment& asg, std::span<const geom::Detection> gt,
                                       std::span<const CategoryId> classes) {
  Tensor2D t(asg.cell_to_gt.size(), classes.size());
  for (std::size_t i = 0; i < asg.cell_to_gt.size(); ++i) {
    const auto g = asg.cell_to_gt[i];
    if (g == kBackground) continue;
    const auto it = std::find(classes.begin(), classes.end(), gt[static_cast<std::size_t>(g)].category);
    if (it == classes.end()) {
      throw DataError("assigned GT category " +
                      std::to_string(gt[static_cast<std::size_t>(g)].category) + " missing from prompt classes");
    }
    t(i, static_cast<std::size_t>(it - classes.begin())) = 1.0;
  }
  return t;
}

inline Var cls_loss(Var logits, const Assignment& asg, std::span<const geom::Detection> gt,
                    std::span<const CategoryId> classes, const FocalOptions& opt = {}) {
  if (logits.rows() != asg.cell_to_gt.size()) throw NumericError("cls_loss: assignment size mismatch");
  return focal_loss(logits, classification_targets(asg, gt, classes), asg.num_positive(), opt);
}

inline constexpr double kSmoothL1Beta = 1.0;

inline double smooth_l1(double x, double beta = kSmoothL1Beta) {
  const double a = std::abs(x);
  return a < beta ? 0.5 * x * x / beta : a - 0.5 * beta;
}

inline double smooth_l1_grad(double x, double beta = kSmoothL1Beta) {
  const double a = std::abs(x);
  return a < beta ? x / beta : (x > 0 ? 1.0 : -1.0);
}

// Smooth-L1 regression over positive cells, averaged over positives:
// HBB term on (dx, dy, log w, log h); OBB term on the same four plus
// (sin 2theta, cos 2theta) of the predicted angle against the target's.
inline Var box_loss(Var hbb_pred, Var obb_pred, const Assignment& asg,
                    std::span<const geom::Detection> gt, const GridLayout& layout) {
  const std::size_t n = asg.cell_to_gt.size();
  if (hbb_pred.rows() != n || obb_pred.rows() != n || hbb_pred.cols() != 4 || obb_pred.cols() != 5) {
    throw NumericError("box_loss: prediction shape mismatch");
  }
  const Tensor2D& hv = hbb_pred.value();
  const Tensor2D& ov = obb_pred.value();
  const std::size_t num_pos = asg.num_positive();
  Tensor2D dh(n, 4);
  Tensor2D dobb(n, 5);
  double total = 0.0;
  if (num_pos > 0) {
    const double inv = 1.0 / static_cast<double>(num_pos);
    for (std::size_t i = 0; i < n; ++i) {
      const auto g = asg.cell_to_gt[i];
      if (g == kBackground) continue;
      const BoxTargets t = encode_box(gt[static_cast<std::size_t>(g)].box, layout.center(i), layout.stride);
      for (std::size_t k = 0; k < 4; ++k) {
        const double eh = hv(i, k) - t.hbb[k];
        total += smooth_l1(eh);
        dh(i, k) = smooth_l1_grad(eh) * inv;
        const double eo = ov(i, k) - t.obb[k];
        total += smooth_l1(eo);
        dobb(i, k) = smooth_l1_grad(eo) * inv;
      }
      const double th = ov(i, 4);
      const double es = std::sin(2 * th) - std::sin(2 * t.obb[4]);
      const double ec = std::cos(2 * th) - std::cos(2 * t.obb[4]);
      total += smooth_l1(es) + smooth_l1(ec);
      dobb(i, 4) = (smooth_l1_grad(es) * 2 * std::cos(2 * th) - smooth_l1_grad(ec) * 2 * std::sin(2 * th)) * inv;
    }
    total *= inv;
  }
  return hbb_pred.tape->record(Tensor2D::scalar(total), {hbb_pred, obb_pred},
                               [hbb_pred, obb_pred, dh = std::move(dh), dobb = std::move(dobb)](Tape& tp) {
                                 const double s = tp.out_grad()[0];
                                 if (Tensor2D* g = tp.grad(hbb_pred)) {
                                   for (std::size_t i = 0; i < dh.size(); ++i) (*g)[i] += s * dh[i];
                                 }
                                 if (Tensor2D* g = tp.grad(obb_pred)) {
                                   for (std::size_t i = 0; i < dobb.size(); ++i) (*g)[i] += s * dobb[i];
                                 }
                               });
}

}  // namespace orsd::heads
