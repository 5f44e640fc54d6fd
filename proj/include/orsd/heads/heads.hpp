#pragma once

// Alignment and fusion detection heads, their loss composition, the
// center-sampling label assigner and dense-output decoding.

#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "orsd/geom.hpp"
#include "orsd/heads/fusion.hpp"
#include "orsd/heads/losses.hpp"
#include "orsd/heads/types.hpp"
#include "orsd/numkit/layers.hpp"

namespace orsd::heads {

struct HeadConfig {
  std::size_t model_dim = 256;
  std::size_t n_heads = 8;
  std::size_t fusion_layers = 3;
  std::size_t class_slots = 80;
  bool normalize_z = false;
  double tau = 0.1;
  double ln_eps = 1e-5;
  FocalOptions focal;
};

inline constexpr double kMinAlpha = 1e-3;

// Decoupled dense head: a classification branch whose embeddings go through a
// shared MLP (also applied to the prompts) and a box regression branch.
struct DenseHead {
  numkit::Linear cls_branch;
  numkit::Mlp2 shared;
  numkit::Mlp2 reg;
  numkit::Parameter alpha;
  numkit::Parameter beta;

  DenseHead() = default;
  DenseHead(const std::string& name, std::size_t dim, std::mt19937_64& rng)
      : cls_branch(name + ".cls_branch", dim, dim, rng),
        shared(name + ".shared_mlp", dim, dim, dim, rng),
        reg(name + ".reg", dim, dim, 9, rng),
        alpha(name + ".alpha", Tensor2D::scalar(1.0)),
        beta(name + ".beta", Tensor2D::scalar(0.0)) {}

  template <class F>
  void visit(F&& f) {
    cls_branch.visit(f);
    shared.visit(f);
    reg.visit(f);
    f(alpha);
    f(beta);
  }

  // Keeps alpha >= kMinAlpha after an optimizer step.
  void clamp() { alpha.value[0] = std::max(alpha.value[0], kMinAlpha); }
};

struct HeadVars {
  Var z;        // N x dim, after the shared MLP
  Var prompts;  // M x dim, after the shared MLP
  Var hbb;      // N x 4
  Var obb;      // N x 5
  Var logits;   // N x C
  Var alpha;
  Var beta;
};

inline HeadVars run_dense_head(DenseHead& head, Var features, Var prompts,
                               std::span<const CategoryId> labels, std::span<const CategoryId> classes,
                               bool normalize_z) {
  Tape& t = *features.tape;
  HeadVars out;
  out.z = numkit::mlp2(head.cls_branch(features), head.shared);
  out.prompts = numkit::mlp2(prompts, head.shared);
  Var reg = numkit::mlp2(features, head.reg);
  out.hbb = numkit::slice_cols(reg, 0, 4);
  out.obb = numkit::slice_cols(reg, 4, 5);
  out.alpha = t.param(head.alpha);
  out.beta = t.param(head.beta);
  out.logits = class_logits(out.z, out.prompts, labels, classes, out.alpha, out.beta, normalize_z);
  return out;
}

inline HeadOutput to_output(const HeadVars& v) {
  return {v.z.value(), v.hbb.value(), v.obb.value(), v.alpha.value().item(), v.beta.value().item()};
}

struct LossTerms {
  Var contrastive;
  Var cls;
  Var box;
  Var total;
};

// L_ct + L_cls + L_box, unweighted.
inline Var alignment_loss(Var contrastive, Var cls, Var box) {
  return numkit::add_n({contrastive, cls, box});
}

// L_fus + L_aln.
inline Var total_loss(Var fusion, Var alignment) { return numkit::add(fusion, alignment); }

inline LossTerms head_losses(const HeadVars& v, std::span<const CategoryId> labels,
                             std::span<const CategoryId> classes, const Assignment& asg,
                             std::span<const geom::Detection> gt, const GridLayout& layout,
                             const HeadConfig& cfg) {
  LossTerms l;
  l.contrastive = supcon_loss(v.z, v.prompts, labels, cfg.tau);
  l.cls = cls_loss(v.logits, asg, gt, classes, cfg.focal);
  l.box = box_loss(v.hbb, v.obb, asg, gt, layout);
  l.total = alignment_loss(l.contrastive, l.cls, l.box);
  return l;
}

struct AlignmentHead {
  DenseHead dense;

  AlignmentHead() = default;
  AlignmentHead(std::size_t dim, std::mt19937_64& rng) : dense("alignment", dim, rng) {}

  template <class F>
  void visit(F&& f) {
    dense.visit(f);
  }

  HeadVars forward(Var features, Var prompts, std::span<const CategoryId> labels,
                   std::span<const CategoryId> classes, bool normalize_z) {
    return run_dense_head(dense, features, prompts, labels, classes, normalize_z);
  }
};

struct FusionHead {
  ClassEmbeddingTable class_table;
  FusionParams fusion;
  DenseHead dense;

  FusionHead() = default;
  FusionHead(const HeadConfig& cfg, std::mt19937_64& rng)
      : class_table(cfg.class_slots, cfg.model_dim, rng),
        fusion("fusion", cfg.model_dim, cfg.fusion_layers, cfg.n_heads, rng, cfg.ln_eps),
        dense("fusion_head", cfg.model_dim, rng) {}

  template <class F>
  void visit(F&& f) {
    class_table.visit(f);
    fusion.visit(f);
    dense.visit(f);
  }

  HeadVars forward(Var features, Var prompts, std::span<const CategoryId> labels,
                   std::span<const CategoryId> classes, const std::map<CategoryId, std::size_t>& slots,
                   bool normalize_z) {
    Var with_class = add_class_embeddings(prompts, labels, slots, class_table);
    auto [p_fused, x_fused] = fusion_block(with_class, features, fusion);
    return run_dense_head(dense, x_fused, p_fused, labels, classes, normalize_z);
  }
};

struct DetectionHeads {
  HeadConfig config;
  AlignmentHead alignment;
  FusionHead fusion;

  DetectionHeads() = default;
  DetectionHeads(const HeadConfig& cfg, std::mt19937_64& rng)
      : config(cfg), alignment(cfg.model_dim, rng), fusion(cfg, rng) {}

  template <class F>
  void visit(F&& f) {
    alignment.visit(f);
    fusion.visit(f);
  }

  void clamp() {
    alignment.dense.clamp();
    fusion.dense.clamp();
  }

  struct Forward {
    HeadVars alignment;
    HeadVars fusion;
  };

  // The alignment head sees the plain projected prompts; only the fusion head
  // adds class embeddings.
  Forward forward(Var features, Var prompts, std::span<const CategoryId> labels,
                  std::span<const CategoryId> classes, const std::map<CategoryId, std::size_t>& slots) {
    Forward f;
    f.alignment = alignment.forward(features, prompts, labels, classes, config.normalize_z);
    f.fusion = fusion.forward(features, prompts, labels, classes, slots, config.normalize_z);
    return f;
  }

  struct Losses {
    LossTerms alignment;
    LossTerms fusion;
    Var total;
  };

  Losses losses(const Forward& f, std::span<const CategoryId> labels, std::span<const CategoryId> classes,
                const Assignment& asg, std::span<const geom::Detection> gt, const GridLayout& layout) const {
    Losses l;
    l.alignment = head_losses(f.alignment, labels, classes, asg, gt, layout, config);
    l.fusion = head_losses(f.fusion, labels, classes, asg, gt, layout, config);
    l.total = total_loss(l.fusion.total, l.alignment.total);
    return l;
  }
};

// Center sampling: a cell is a candidate for every GT whose oriented box
// contains the cell center, and takes the smallest-area candidate (ties by GT
// index).
inline Assignment assign(std::span<const geom::Detection> gt, const GridLayout& layout) {
  Assignment a;
  a.cell_to_gt.assign(layout.cells(), kBackground);
  a.gt_cells.assign(gt.size(), {});
  for (std::size_t i = 0; i < layout.cells(); ++i) {
    const geom::Point c = layout.center(i);
    double best_area = 0.0;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      if (!geom::contains(gt[g].box, c)) continue;
      const double area = gt[g].box.area();
      if (a.cell_to_gt[i] == kBackground || area < best_area) {
        a.cell_to_gt[i] = static_cast<std::ptrdiff_t>(g);
        best_area = area;
      }
    }
    if (a.cell_to_gt[i] != kBackground) a.gt_cells[static_cast<std::size_t>(a.cell_to_gt[i])].push_back(i);
  }
  return a;
}

struct DecodeOptions {
  double score_thresh = 0.05;
  double nms_thresh = 0.5;
  geom::IouMode nms_mode = geom::IouMode::Obb;
};

// Sigmoid scores, per-cell best class, threshold, delta decoding and
// class-agnostic NMS.
inline std::vector<geom::Detection> decode_detections(const HeadOutput& out, const Tensor2D& logits,
                                                      std::span<const CategoryId> classes,
                                                      const GridLayout& layout, const DecodeOptions& opt = {}) {
  if (logits.rows() != layout.cells() || out.obb_deltas.rows() != layout.cells() ||
      logits.cols() != classes.size()) {
    throw NumericError("decode_detections: shape mismatch");
  }
  std::vector<geom::Detection> dets;
  for (std::size_t i = 0; i < layout.cells(); ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < classes.size(); ++c) {
      if (logits(i, c) > logits(i, best)) best = c;
    }
    if (classes.empty()) break;
    const double score = numkit::sigmoid_value(logits(i, best));
    if (score < opt.score_thresh) continue;
    const geom::OrientedBox box = decode_obb(out.obb_deltas.row(i), layout.center(i), layout.stride);
    dets.push_back(geom::make_detection(box, classes[best], score, geom::Source::ModelPrediction));
  }
  return geom::class_agnostic_nms(dets, opt.nms_thresh, opt.nms_mode);
}

}  // namespace orsd::heads
