#pragma once

// Self-training label mining: score filter, GT/category-tree partition,
// cross-prompt-set merge, similarity gate and per-image record assembly.

#include <algorithm>
#include <cstdint>
#include <exception>
#include <iterator>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <tuple>
#include <utility>
#include <vector>

#include "orsd/error.hpp"
#include "orsd/geom.hpp"

namespace orsd::pseudo {

using geom::Detection;

// Forest of categories. Every node knows its parent; roots have none.
class CategoryTree {
 public:
  void add(CategoryId c, std::optional<CategoryId> parent = std::nullopt) {
    if (parent && !contains(*parent)) {
      throw DataError("category tree: parent " + std::to_string(*parent) + " added after child");
    }
    if (!parent_.emplace(c, parent).second) {
      throw DataError("category tree: duplicate node " + std::to_string(c));
    }
  }

  bool contains(CategoryId c) const { return parent_.count(c) != 0; }

  std::optional<CategoryId> parent(CategoryId c) const { return node(c); }

  // Ancestor directly under the virtual root (the node itself for a root).
  CategoryId top_level(CategoryId c) const {
    CategoryId cur = c;
    for (std::size_t steps = 0; steps <= parent_.size(); ++steps) {
      const auto p = node(cur);
      if (!p) return cur;
      cur = *p;
    }
    throw DataError("category tree contains a cycle");
  }

  std::size_t size() const { return parent_.size(); }

 private:
  const std::optional<CategoryId>& node(CategoryId c) const {
    auto it = parent_.find(c);
    if (it == parent_.end()) throw DataError("category " + std::to_string(c) + " missing from category tree");
    return it->second;
  }

  std::map<CategoryId, std::optional<CategoryId>> parent_;
};

struct Options {
  double score_thresh = 0.3;
  double sim_thresh = 0.24;
  double min_side = 16.0;
  double overlap_iou = 0.5;
  double nms_iou = 0.5;
};

// One model detection on one image. `det_index` identifies the detection in
// the input (and in the similarity table); `prompt_set` is the prompt set
// that produced it.
struct Candidate {
  Detection det;
  std::size_t det_index = 0;
  std::size_t prompt_set = 0;
};

inline std::vector<Detection> filter_by_score(std::span<const Detection> dets, double threshold) {
  std::vector<Detection> out;
  for (const auto& d : dets) {
    if (d.score >= threshold) out.push_back(d);
  }
  return out;
}

// Index lists into the input detections.
struct Partition {
  std::vector<std::size_t> novel;
  std::vector<std::size_t> hard_negative;
  std::vector<std::size_t> discarded;
};

// A detection that overlaps some GT at IoU >= overlap_iou is compared with
// the best-overlapping GT (first on ties): same top-level category means the
// GT already covers it, otherwise its category is a confusable negative.
inline Partition partition_vs_gt(std::span<const Detection> dets, std::span<const Detection> gt,
                                 const CategoryTree& tree, double overlap_iou = 0.5) {
  Partition p;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    const CategoryId det_top = tree.top_level(dets[i].category);
    double best = -1.0;
    std::size_t best_gt = 0;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      const double iou = geom::rotated_iou(dets[i].box, gt[g].box);
      if (iou > best) {
        best = iou;
        best_gt = g;
      }
    }
    if (gt.empty() || best < overlap_iou) {
      p.novel.push_back(i);
    } else if (tree.top_level(gt[best_gt].category) == det_top) {
      p.discarded.push_back(i);
    } else {
      p.hard_negative.push_back(i);
    }
  }
  return p;
}

namespace detail {

inline auto canonical_key(const Detection& d) {
  return std::make_tuple(-d.score, d.category, d.box.cx(), d.box.cy(), d.box.w(), d.box.h(), d.box.theta());
}

// Surviving indices into `pool` after class-agnostic OBB NMS. The pool is put
// in a canonical order first, so the result does not depend on how the
// sources were concatenated.
inline std::vector<std::size_t> merge_indices(std::span<const Detection> pool, double nms_iou) {
  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return canonical_key(pool[a]) < canonical_key(pool[b]);
  });
  std::vector<Detection> sorted;
  sorted.reserve(pool.size());
  for (std::size_t i : order) sorted.push_back(pool[i]);
  std::vector<std::size_t> keep;
  for (std::size_t k : geom::nms_keep_indices(sorted, nms_iou, geom::IouMode::Obb)) keep.push_back(order[k]);
  return keep;
}

}  // namespace detail

inline std::vector<Detection> merge_predictions(const std::vector<std::vector<Detection>>& sources,
                                                double nms_iou = 0.5) {
  std::vector<Detection> pool;
  for (const auto& s : sources) pool.insert(pool.end(), s.begin(), s.end());
  std::vector<Detection> out;
  for (std::size_t i : detail::merge_indices(pool, nms_iou)) out.push_back(pool[i]);
  return out;
}

// (det_index, category) -> cosine similarity in [-1, 1].
class SimilarityTable {
 public:
  void set(std::size_t det_index, CategoryId category, double cosine) {
    if (!(cosine >= -1.0 && cosine <= 1.0)) {
      throw DataError("similarity " + std::to_string(cosine) + " outside [-1, 1]");
    }
    if (!values_.emplace(std::make_pair(det_index, category), cosine).second) {
      throw DataError("duplicate similarity for detection " + std::to_string(det_index));
    }
  }

  std::optional<double> get(std::size_t det_index, CategoryId category) const {
    auto it = values_.find({det_index, category});
    if (it == values_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t size() const { return values_.size(); }

 private:
  std::map<std::pair<std::size_t, CategoryId>, double> values_;
};

enum class FilterPath { Novel, TreeChecked };

inline const char* to_string(FilterPath p) { return p == FilterPath::Novel ? "novel" : "tree-checked"; }

struct Provenance {
  CategoryId category = 0;
  double score = 0.0;
  std::optional<double> clip_similarity;
  bool size_bypass = false;  // small box, similarity gate skipped
  FilterPath filter_path = FilterPath::Novel;
  std::optional<std::size_t> det_index;
  std::size_t prompt_set = 0;

  friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct Filtered {
  std::vector<Candidate> kept;
  std::vector<Provenance> provenance;  // parallel to kept
};

// Boxes whose enclosing horizontal box has a side <= min_side bypass the
// gate; the rest are kept iff their similarity is >= sim_threshold.
inline Filtered similarity_filter(std::span<const Candidate> dets, const SimilarityTable& sims,
                                  double sim_threshold = 0.24, double min_side = 16.0) {
  Filtered out;
  for (const auto& c : dets) {
    Provenance pv{c.det.category, c.det.score, std::nullopt, false, FilterPath::Novel, c.det_index, c.prompt_set};
    const double side = std::min(c.det.hbox.width(), c.det.hbox.height());
    if (side <= min_side) {
      pv.size_bypass = true;
    } else {
      const auto s = sims.get(c.det_index, c.det.category);
      if (!s) {
        throw DataError("no similarity for detection " + std::to_string(c.det_index) + " (category " +
                        std::to_string(c.det.category) + ")");
      }
      if (*s < sim_threshold) continue;
      pv.clip_similarity = *s;
    }
    out.kept.push_back(c);
    out.provenance.push_back(pv);
  }
  return out;
}

struct PseudoLabelRecord {
  std::string image_id;
  std::vector<Detection> detections;        // source = pseudo-label
  std::vector<CategoryId> category_list;    // sorted, unique
  std::vector<CategoryId> hard_negatives;   // sorted, unique, subset of category_list
  std::vector<Provenance> provenance;       // kept detections first (parallel), then tree-checked entries
};

// category_list = GT categories + kept pseudo categories + hard negatives.
// A category that is a GT or kept category in this image is not a negative.
inline PseudoLabelRecord build_record(std::string image_id, const Filtered& kept,
                                      std::span<const Candidate> hard_negatives,
                                      std::span<const Detection> gt) {
  PseudoLabelRecord r;
  r.image_id = std::move(image_id);
  std::vector<CategoryId> positive;
  for (const auto& g : gt) positive.push_back(g.category);
  for (const auto& c : kept.kept) {
    Detection d = c.det;
    d.source = geom::Source::PseudoLabel;
    r.detections.push_back(d);
    positive.push_back(d.category);
  }
  r.provenance = kept.provenance;
  std::sort(positive.begin(), positive.end());
  positive.erase(std::unique(positive.begin(), positive.end()), positive.end());
  for (const auto& c : hard_negatives) {
    r.provenance.push_back(
        {c.det.category, c.det.score, std::nullopt, false, FilterPath::TreeChecked, c.det_index, c.prompt_set});
    if (!std::binary_search(positive.begin(), positive.end(), c.det.category)) {
      r.hard_negatives.push_back(c.det.category);
    }
  }
  std::sort(r.hard_negatives.begin(), r.hard_negatives.end());
  r.hard_negatives.erase(std::unique(r.hard_negatives.begin(), r.hard_negatives.end()), r.hard_negatives.end());
  std::merge(positive.begin(), positive.end(), r.hard_negatives.begin(), r.hard_negatives.end(),
             std::back_inserter(r.category_list));
  return r;
}

struct ImageInput {
  std::string image_id;
  std::vector<Detection> gt;
  std::vector<Candidate> predictions;
  SimilarityTable similarities;
};

// Whole per-image pipeline. Each prompt set is score-filtered and partitioned
// against GT on its own; novel detections of all sets are merged with NMS and
// then pass the similarity gate.
inline PseudoLabelRecord pseudo_label_image(const ImageInput& img, const CategoryTree& tree,
                                            const Options& opt = {}) {
  std::map<std::size_t, std::vector<Candidate>> by_set;
  for (const auto& c : img.predictions) {
    if (c.det.score >= opt.score_thresh) by_set[c.prompt_set].push_back(c);
  }
  for (const auto& g : img.gt) tree.top_level(g.category);
  std::vector<Candidate> novel, hard;
  for (const auto& [set, cands] : by_set) {
    std::vector<Detection> dets;
    for (const auto& c : cands) dets.push_back(c.det);
    const Partition p = partition_vs_gt(dets, img.gt, tree, opt.overlap_iou);
    for (std::size_t i : p.novel) novel.push_back(cands[i]);
    for (std::size_t i : p.hard_negative) hard.push_back(cands[i]);
  }
  std::vector<Detection> pool;
  for (const auto& c : novel) pool.push_back(c.det);
  std::vector<Candidate> merged;
  for (std::size_t i : detail::merge_indices(pool, opt.nms_iou)) merged.push_back(novel[i]);
  return build_record(img.image_id, similarity_filter(merged, img.similarities, opt.sim_thresh, opt.min_side), hard,
                      img.gt);
}

// Runs images on `threads` workers (0 = hardware concurrency); the output is
// sorted by image_id whatever the schedule.
inline std::vector<PseudoLabelRecord> pseudo_label(std::span<const ImageInput> images, const CategoryTree& tree,
                                                   const Options& opt = {}, std::size_t threads = 1) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, std::max<std::size_t>(1, images.size()));
  std::vector<std::optional<PseudoLabelRecord>> out(images.size());
  std::vector<std::exception_ptr> errors(threads);
  const auto work = [&](std::size_t w) {
    try {
      for (std::size_t i = w; i < images.size(); i += threads) out[i] = pseudo_label_image(images[i], tree, opt);
    } catch (...) {
      errors[w] = std::current_exception();
    }
  };
  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w) pool.emplace_back(work, w);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  std::vector<PseudoLabelRecord> records;
  for (auto& r : out) records.push_back(std::move(*r));
  std::stable_sort(records.begin(), records.end(),
                   [](const auto& a, const auto& b) { return a.image_id < b.image_id; });
  return records;
}

enum class MixSource { Labeled, Pseudo };

// Draws training samples so that pseudo-labeled images come at `pseudo_rate`
// times the labeled rate (0.5 gives the 2:1 mix).
class MixSampler {
 public:
  MixSampler(std::size_t labeled_size, std::size_t pseudo_size, std::uint64_t seed, double pseudo_rate = 0.5)
      : labeled_(labeled_size), pseudo_(pseudo_size), rng_(seed) {
    if (labeled_size == 0 && pseudo_size == 0) throw DataError("mix sampler: both datasets are empty");
    if (!(pseudo_rate >= 0.0)) throw UsageError("mix sampler: pseudo rate must be non-negative");
    if (pseudo_size == 0) {
      p_pseudo_ = 0.0;
    } else if (labeled_size == 0) {
      p_pseudo_ = 1.0;
    } else {
      p_pseudo_ = pseudo_rate / (1.0 + pseudo_rate);
    }
  }

  std::pair<MixSource, std::size_t> next() {
    const bool pseudo = std::uniform_real_distribution<double>(0.0, 1.0)(rng_) < p_pseudo_;
    const std::size_t n = pseudo ? pseudo_ : labeled_;
    return {pseudo ? MixSource::Pseudo : MixSource::Labeled, std::uniform_int_distribution<std::size_t>(0, n - 1)(rng_)};
  }

  double pseudo_probability() const { return p_pseudo_; }

 private:
  std::size_t labeled_;
  std::size_t pseudo_;
  double p_pseudo_ = 0.0;
  std::mt19937_64 rng_;
};

}  // namespace orsd::pseudo
