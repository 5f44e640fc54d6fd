#pragma once

#include <algorithm>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "orsd/numkit/layers.hpp"
#include "orsd/promptdict.hpp"

namespace orsd::heads {

using numkit::Tape;
using numkit::Var;

struct FusionLayerParams {
  numkit::AttentionParams prompt_attn;  // prompts attend to image features
  numkit::LayerNormParams prompt_ln1;
  numkit::Mlp2 prompt_mlp;
  numkit::LayerNormParams prompt_ln2;
  numkit::AttentionParams image_attn;  // image features attend to updated prompts
  numkit::LayerNormParams image_ln1;
  numkit::Mlp2 image_mlp;
  numkit::LayerNormParams image_ln2;

  FusionLayerParams() = default;
  FusionLayerParams(const std::string& name, std::size_t dim, std::mt19937_64& rng, double ln_eps = 1e-5)
      : prompt_attn(name + ".prompt_attn", dim, rng),
        prompt_ln1(name + ".prompt_ln1", dim, ln_eps),
        prompt_mlp(name + ".prompt_mlp", dim, 2 * dim, dim, rng),
        prompt_ln2(name + ".prompt_ln2", dim, ln_eps),
        image_attn(name + ".image_attn", dim, rng),
        image_ln1(name + ".image_ln1", dim, ln_eps),
        image_mlp(name + ".image_mlp", dim, 2 * dim, dim, rng),
        image_ln2(name + ".image_ln2", dim, ln_eps) {}

  template <class F>
  void visit(F&& f) {
    prompt_attn.visit(f);
    prompt_ln1.visit(f);
    prompt_mlp.visit(f);
    prompt_ln2.visit(f);
    image_attn.visit(f);
    image_ln1.visit(f);
    image_mlp.visit(f);
    image_ln2.visit(f);
  }
};

struct FusionParams {
  std::vector<FusionLayerParams> layers;
  std::size_t n_heads = 8;

  FusionParams() = default;
  FusionParams(const std::string& name, std::size_t dim, std::size_t n_layers, std::size_t heads,
               std::mt19937_64& rng, double ln_eps = 1e-5)
      : n_heads(heads) {
    for (std::size_t l = 0; l < n_layers; ++l) {
      layers.emplace_back(name + ".layer" + std::to_string(l), dim, rng, ln_eps);
    }
  }

  template <class F>
  void visit(F&& f) {
    for (auto& l : layers) l.visit(f);
  }
};

// One fusion layer:
//   P' = LN(MHCA(P, X) + P);   P+ = LN(MLP(P') + P')
//   X' = LN(MHCA(X, P+) + X);  X+ = LN(MLP(X') + X')
inline std::pair<Var, Var> fusion_layer(Var p, Var x, FusionLayerParams& l, std::size_t n_heads) {
  Var p1 = l.prompt_ln1(numkit::add(numkit::mhca(p, x, l.prompt_attn, n_heads), p));
  Var p2 = l.prompt_ln2(numkit::add(numkit::mlp2(p1, l.prompt_mlp), p1));
  Var x1 = l.image_ln1(numkit::add(numkit::mhca(x, p2, l.image_attn, n_heads), x));
  Var x2 = l.image_ln2(numkit::add(numkit::mlp2(x1, l.image_mlp), x1));
  return {p2, x2};
}

// Stacked fusion layers; returns (fused prompts, fused image features).
inline std::pair<Var, Var> fusion_block(Var p, Var x, FusionParams& params) {
  if (p.cols() != x.cols()) {
    throw NumericError("fusion_block: prompt width " + std::to_string(p.cols()) +
                       " != feature width " + std::to_string(x.cols()));
  }
  for (auto& layer : params.layers) std::tie(p, x) = fusion_layer(p, x, layer, params.n_heads);
  return {p, x};
}

struct ClassEmbeddingTable {
  numkit::Parameter table;  // K x model_dim

  ClassEmbeddingTable() = default;
  ClassEmbeddingTable(std::size_t slots, std::size_t dim, std::mt19937_64& rng)
      : table(numkit::init_uniform("fusion.class_embedding", dim, slots, dim, rng)) {}

  std::size_t slots() const { return table.value.rows(); }

  template <class F>
  void visit(F&& f) {
    f(table);
  }
};

// Injective random map from each of `classes` to a slot in 0..slots-1.
inline std::map<CategoryId, std::size_t> draw_class_slots(std::span<const CategoryId> classes,
                                                          std::size_t slots, std::mt19937_64& rng) {
  if (classes.size() > slots) {
    throw DataError("too many categories (" + std::to_string(classes.size()) +
                    ") for class embedding table of " + std::to_string(slots));
  }
  std::vector<std::size_t> ids(slots);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  for (std::size_t i = 0; i < classes.size(); ++i) {
    std::uniform_int_distribution<std::size_t> d(i, slots - 1);
    std::swap(ids[i], ids[d(rng)]);
  }
  std::map<CategoryId, std::size_t> out;
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (!out.emplace(classes[i], ids[i]).second) throw DataError("duplicate class in batch");
  }
  return out;
}

// Recorded form: P + table[slot(label_j)] for every prompt row j.
inline Var add_class_embeddings(Var p, std::span<const CategoryId> labels,
                                const std::map<CategoryId, std::size_t>& slots,
                                ClassEmbeddingTable& table) {
  std::vector<std::size_t> rows;
  rows.reserve(labels.size());
  for (CategoryId c : labels) rows.push_back(slots.at(c));
  Var emb = numkit::gather_rows(p.tape->param(table.table), std::move(rows));
  return numkit::add(p, emb);
}

// Value form on an already projected batch: every prompt of a class gets the
// same randomly chosen table row added to its projected vector.
inline prompt::PromptBatch attach_class_embeddings(const prompt::PromptBatch& batch,
                                                   const ClassEmbeddingTable& table,
                                                   std::mt19937_64& rng) {
  const auto slots = draw_class_slots(batch.classes(), table.slots(), rng);
  prompt::PromptBatch out = batch;
  for (std::size_t j = 0; j < out.prompts.size(); ++j) {
    auto& pr = out.prompts[j];
    if (!pr.projected) throw DataError("attach_class_embeddings needs projected prompts");
    if (pr.projected->size() != table.table.value.cols()) {
      throw DataError("projected width does not match class embedding width");
    }
    const auto row = table.table.value.row(slots.at(out.labels[j]));
    for (std::size_t t = 0; t < row.size(); ++t) (*pr.projected)[t] += row[t];
  }
  return out;
}

}  // namespace orsd::heads
