#pragma once

// Prompt construction: the offline embedding store, per-modality projection
// into the model space, training / inference prompt sampling, image-prompt
// selection and k-means prompt synthesis from unlabeled embeddings.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <tuple>
#include <utility>
#include <vector>

#include "orsd/error.hpp"
#include "orsd/geom.hpp"
#include "orsd/numkit/layers.hpp"

namespace orsd::prompt {

enum class Modality { Text, Image };

inline std::string_view to_string(Modality m) { return m == Modality::Text ? "text" : "image"; }

inline Modality parse_modality(std::string_view s) {
  if (s == "text") return Modality::Text;
  if (s == "image") return Modality::Image;
  throw DataError("unknown modality '" + std::string(s) + "'");
}

inline constexpr std::size_t kMaxTextPrompts = 15;
inline constexpr std::size_t kMaxImagePrompts = 100;
// Categories synthesized by clustering get ids from here upwards.
inline constexpr CategoryId kPseudoCategoryBase = 1'000'000;

struct PromptEmbedding {
  CategoryId category = 0;
  Modality modality = Modality::Text;
  int prompt_id = 0;
  std::vector<double> raw;
  std::optional<std::vector<double>> projected;

  friend bool operator==(const PromptEmbedding&, const PromptEmbedding&) = default;
};

class PromptDictionary {
 public:
  PromptDictionary() = default;
  PromptDictionary(std::size_t text_dim, std::size_t image_dim)
      : text_dim_(text_dim), image_dim_(image_dim) {}

  std::size_t text_dim() const { return text_dim_; }
  std::size_t image_dim() const { return image_dim_; }
  std::size_t dim(Modality m) const { return m == Modality::Text ? text_dim_ : image_dim_; }

  void add(PromptEmbedding e) {
    if (e.raw.size() != dim(e.modality)) {
      throw DataError("prompt raw dim " + std::to_string(e.raw.size()) + " != declared " +
                      std::to_string(dim(e.modality)));
    }
    bool nonzero = false;
    for (double v : e.raw) {
      if (!std::isfinite(v)) throw DataError("prompt embedding has non-finite values");
      nonzero = nonzero || v != 0.0;
    }
    if (!nonzero) throw DataError("prompt embedding is all zeros");
    const auto key = std::make_tuple(e.category, e.modality, e.prompt_id);
    if (!keys_.insert(key).second) {
      throw DataError("duplicate prompt (category " + std::to_string(e.category) + ", " +
                      std::string(to_string(e.modality)) + ", id " + std::to_string(e.prompt_id) + ")");
    }
    auto& slot = index_[{e.category, e.modality}];
    const std::size_t cap = e.modality == Modality::Text ? kMaxTextPrompts : kMaxImagePrompts;
    if (slot.size() >= cap) {
      throw DataError("category " + std::to_string(e.category) + " exceeds " + std::to_string(cap) +
                      " " + std::string(to_string(e.modality)) + " prompts");
    }
    slot.push_back(entries_.size());
    entries_.push_back(std::move(e));
  }

  const std::vector<PromptEmbedding>& entries() const { return entries_; }

  bool has(CategoryId c, Modality m) const { return index_.count({c, m}) != 0; }
  bool has(CategoryId c) const { return has(c, Modality::Text) || has(c, Modality::Image); }

  // Entries for one (category, modality), in insertion order.
  std::vector<const PromptEmbedding*> prompts(CategoryId c, Modality m) const {
    std::vector<const PromptEmbedding*> out;
    if (auto it = index_.find({c, m}); it != index_.end()) {
      for (std::size_t i : it->second) out.push_back(&entries_[i]);
    }
    return out;
  }

  // Sorted categories holding at least one prompt of modality `m`.
  std::vector<CategoryId> categories(Modality m) const {
    std::vector<CategoryId> out;
    for (const auto& [key, idx] : index_) {
      if (key.second == m) out.push_back(key.first);
    }
    return out;
  }

  std::vector<CategoryId> categories() const {
    std::set<CategoryId> s;
    for (const auto& [key, idx] : index_) s.insert(key.first);
    return {s.begin(), s.end()};
  }

  std::size_t count(Modality m) const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.modality == m ? 1 : 0;
    return n;
  }

 private:
  std::size_t text_dim_ = 0;
  std::size_t image_dim_ = 0;
  std::vector<PromptEmbedding> entries_;
  std::map<std::pair<CategoryId, Modality>, std::vector<std::size_t>> index_;
  std::set<std::tuple<CategoryId, Modality, int>> keys_;
};

struct PromptBatch {
  std::vector<PromptEmbedding> prompts;
  std::vector<CategoryId> labels;     // parallel to prompts
  std::vector<CategoryId> positives;  // sorted
  std::vector<CategoryId> negatives;  // sorted
  Modality modality = Modality::Text;

  // Sorted union of positives and negatives: the column order of class logits.
  std::vector<CategoryId> classes() const {
    std::vector<CategoryId> out = positives;
    out.insert(out.end(), negatives.begin(), negatives.end());
    std::sort(out.begin(), out.end());
    return out;
  }

  std::size_t count_for(CategoryId c) const {
    return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), c));
  }

  friend bool operator==(const PromptBatch&, const PromptBatch&) = default;
};

// Per-modality 2-layer MLP lifting raw provider embeddings into model space.
struct Projector {
  Modality modality = Modality::Text;
  numkit::Mlp2 mlp;

  Projector() = default;
  Projector(Modality m, std::size_t raw_dim, std::size_t hidden, std::size_t model_dim,
            std::mt19937_64& rng)
      : modality(m),
        mlp(std::string("projector.") + std::string(to_string(m)), raw_dim, hidden, model_dim, rng) {}

  std::size_t raw_dim() const { return mlp.fc1.in_features(); }
  std::size_t model_dim() const { return mlp.fc2.out_features(); }

  template <class F>
  void visit(F&& f) {
    mlp.visit(f);
  }
};

// Stacks the raw vectors of `prompts` into an M x raw_dim matrix.
inline numkit::Tensor2D raw_matrix(std::span<const PromptEmbedding> prompts) {
  if (prompts.empty()) return {};
  const std::size_t d = prompts.front().raw.size();
  numkit::Tensor2D out(prompts.size(), d);
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    if (prompts[i].raw.size() != d) throw DataError("mixed raw dims in prompt batch");
    std::copy(prompts[i].raw.begin(), prompts[i].raw.end(), out.row(i).begin());
  }
  return out;
}

// Recorded projection of a whole batch; the training path.
inline numkit::Var project_batch(numkit::Tape& tape, std::span<const PromptEmbedding> prompts,
                                 Projector& projector) {
  for (const auto& p : prompts) {
    if (p.modality != projector.modality) throw DataError("projector modality mismatch");
  }
  numkit::Tensor2D raw = raw_matrix(prompts);
  if (raw.cols() != projector.raw_dim()) {
    throw DataError("prompt raw dim " + std::to_string(raw.cols()) + " != projector input " +
                    std::to_string(projector.raw_dim()));
  }
  return numkit::mlp2(tape.constant(std::move(raw)), projector.mlp);
}

inline PromptEmbedding project(const PromptEmbedding& e, Projector& projector) {
  numkit::Tape tape;
  numkit::Var y = project_batch(tape, std::span<const PromptEmbedding>(&e, 1), projector);
  PromptEmbedding out = e;
  const auto row = y.value().row(0);
  out.projected = std::vector<double>(row.begin(), row.end());
  return out;
}

struct SamplingOptions {
  int min_prompts = 3;
  int max_prompts = 7;
  std::size_t n_negatives = 20;
};

namespace detail {

// k prompts of one category: without replacement when enough exist.
inline void draw_prompts(const PromptDictionary& dict, CategoryId c, Modality m, std::size_t k,
                         std::mt19937_64& rng, PromptBatch& batch) {
  const auto pool = dict.prompts(c, m);
  if (pool.empty()) {
    throw DataError("category " + std::to_string(c) + " has no " + std::string(to_string(m)) +
                    " prompts");
  }
  std::vector<std::size_t> picks;
  if (pool.size() >= k) {
    std::vector<std::size_t> idx(pool.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (std::size_t i = 0; i < k; ++i) {
      std::uniform_int_distribution<std::size_t> d(i, idx.size() - 1);
      std::swap(idx[i], idx[d(rng)]);
    }
    picks.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
  } else {
    std::uniform_int_distribution<std::size_t> d(0, pool.size() - 1);
    for (std::size_t i = 0; i < k; ++i) picks.push_back(d(rng));
  }
  for (std::size_t i : picks) {
    batch.prompts.push_back(*pool[i]);
    batch.labels.push_back(c);
  }
}

inline std::vector<CategoryId> sorted_unique(std::span<const CategoryId> xs) {
  std::vector<CategoryId> v(xs.begin(), xs.end());
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

}  // namespace detail

// One training batch: a modality chosen uniformly among those covering every
// annotated category, the annotated categories as positives, `n_negatives`
// other categories drawn without replacement, and k ~ U{min..max} prompts per
// category. `required_negatives` (e.g. mined hard negatives) are always
// included as negatives when the modality has them.
inline PromptBatch sample_training_prompts(std::span<const CategoryId> annotated,
                                           const PromptDictionary& dict,
                                           const SamplingOptions& opt, std::mt19937_64& rng,
                                           std::span<const CategoryId> required_negatives = {}) {
  if (opt.min_prompts < 1 || opt.max_prompts < opt.min_prompts) {
    throw UsageError("invalid prompt count range");
  }
  PromptBatch batch;
  batch.positives = detail::sorted_unique(annotated);
  if (batch.positives.empty()) throw DataError("training prompts need at least one positive category");
  for (CategoryId c : batch.positives) {
    if (!dict.has(c)) throw DataError("unknown category " + std::to_string(c) + " in annotations");
  }

  std::vector<Modality> usable;
  for (Modality m : {Modality::Text, Modality::Image}) {
    const bool covers = std::all_of(batch.positives.begin(), batch.positives.end(),
                                    [&](CategoryId c) { return dict.has(c, m); });
    if (covers) usable.push_back(m);
  }
  if (usable.empty()) throw DataError("no single modality covers all annotated categories");
  {
    // Always consume one draw so the stream does not depend on dictionary coverage.
    std::uniform_int_distribution<int> coin(0, 1);
    const int flip = coin(rng);
    batch.modality = usable.size() == 1 ? usable[0] : usable[static_cast<std::size_t>(flip)];
  }

  std::vector<CategoryId> forced;
  for (CategoryId c : detail::sorted_unique(required_negatives)) {
    if (dict.has(c, batch.modality) &&
        !std::binary_search(batch.positives.begin(), batch.positives.end(), c)) {
      forced.push_back(c);
    }
  }
  std::vector<CategoryId> pool;
  for (CategoryId c : dict.categories(batch.modality)) {
    if (!std::binary_search(batch.positives.begin(), batch.positives.end(), c) &&
        !std::binary_search(forced.begin(), forced.end(), c)) {
      pool.push_back(c);
    }
  }
  const std::size_t want = opt.n_negatives > forced.size() ? opt.n_negatives - forced.size() : 0;
  const std::size_t take = std::min(want, pool.size());
  for (std::size_t i = 0; i < take; ++i) {
    std::uniform_int_distribution<std::size_t> d(i, pool.size() - 1);
    std::swap(pool[i], pool[d(rng)]);
  }
  batch.negatives = forced;
  batch.negatives.insert(batch.negatives.end(), pool.begin(),
                         pool.begin() + static_cast<std::ptrdiff_t>(take));
  std::sort(batch.negatives.begin(), batch.negatives.end());

  std::uniform_int_distribution<int> kdist(opt.min_prompts, opt.max_prompts);
  for (CategoryId c : batch.classes()) {
    const auto k = static_cast<std::size_t>(kdist(rng));
    detail::draw_prompts(dict, c, batch.modality, k, rng, batch);
  }
  return batch;
}

// Inference prompts: `k` prompts (1..100) for each requested category. There
// is no positive/negative split at inference; every category is listed as a
// positive.
inline PromptBatch sample_inference_prompts(std::span<const CategoryId> categories,
                                            const PromptDictionary& dict, Modality modality,
                                            std::size_t k, std::mt19937_64& rng) {
  if (k < 1 || k > kMaxImagePrompts) throw UsageError("inference prompt count must be in 1..100");
  PromptBatch batch;
  batch.modality = modality;
  batch.positives = detail::sorted_unique(categories);
  for (CategoryId c : batch.positives) {
    if (!dict.has(c, modality)) {
      throw DataError("category " + std::to_string(c) + " has no " +
                      std::string(to_string(modality)) + " prompts");
    }
    detail::draw_prompts(dict, c, modality, k, rng, batch);
  }
  return batch;
}

struct ScoredPrompt {
  PromptEmbedding embedding;
  double score = 0.0;
};

// Keeps the `cap` highest-scoring candidates; equal scores keep input order.
inline std::vector<PromptEmbedding> select_image_prompts(std::span<const ScoredPrompt> candidates,
                                                         std::size_t cap) {
  std::vector<std::size_t> order(candidates.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (!std::isfinite(candidates[i].score)) throw DataError("non-finite classifier score");
    order[i] = i;
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return candidates[a].score > candidates[b].score;
  });
  if (order.size() > cap) order.resize(cap);
  std::vector<PromptEmbedding> out;
  out.reserve(order.size());
  for (std::size_t i : order) out.push_back(candidates[i].embedding);
  return out;
}

struct KMeansResult {
  std::vector<std::vector<double>> centroids;
  std::vector<std::size_t> assignment;
  std::vector<double> sse_history;  // SSE after each assignment step
  double sse = 0.0;
  int iterations = 0;
};

namespace detail {
inline double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}
}  // namespace detail

// Lloyd's algorithm with k-means++ seeding; stops after `max_iter` updates or
// once no centroid moves more than `tol`.
inline KMeansResult kmeans(std::span<const std::vector<double>> points, std::size_t k,
                           std::mt19937_64& rng, int max_iter = 100, double tol = 1e-6) {
  if (points.empty()) throw DataError("k-means on empty input");
  if (k < 1 || k > points.size()) throw DataError("k-means needs 1 <= k <= number of points");
  const std::size_t dim = points.front().size();
  for (const auto& p : points) {
    if (p.size() != dim) throw DataError("k-means points have mixed dimensions");
  }

  KMeansResult res;
  {
    std::uniform_int_distribution<std::size_t> first(0, points.size() - 1);
    res.centroids.push_back(points[first(rng)]);
    std::vector<double> d2(points.size(), std::numeric_limits<double>::infinity());
    while (res.centroids.size() < k) {
      double total = 0.0;
      for (std::size_t i = 0; i < points.size(); ++i) {
        d2[i] = std::min(d2[i], detail::sq_dist(points[i], res.centroids.back()));
        total += d2[i];
      }
      std::size_t pick = 0;
      if (total > 0.0) {
        std::uniform_real_distribution<double> u(0.0, total);
        double r = u(rng);
        for (pick = 0; pick + 1 < points.size(); ++pick) {
          r -= d2[pick];
          if (r < 0.0 && d2[pick] > 0.0) break;
        }
      } else {
        // Fewer distinct points than k; duplicate centroids are unavoidable.
        pick = res.centroids.size() % points.size();
      }
      res.centroids.push_back(points[pick]);
    }
  }

  res.assignment.assign(points.size(), 0);
  const auto assign_step = [&]() {
    double sse = 0.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double d = detail::sq_dist(points[i], res.centroids[c]);
        if (d < best) {
          best = d;
          res.assignment[i] = c;
        }
      }
      sse += best;
    }
    return sse;
  };

  res.sse = assign_step();
  res.sse_history.push_back(res.sse);
  for (int it = 0; it < max_iter; ++it) {
    std::vector<std::vector<double>> next(k, std::vector<double>(dim, 0.0));
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < points.size(); ++i) {
      auto& acc = next[res.assignment[i]];
      for (std::size_t d = 0; d < dim; ++d) acc[d] += points[i][d];
      ++counts[res.assignment[i]];
    }
    double max_shift = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) {
        next[c] = res.centroids[c];
        continue;
      }
      for (double& v : next[c]) v /= static_cast<double>(counts[c]);
      max_shift = std::max(max_shift, std::sqrt(detail::sq_dist(next[c], res.centroids[c])));
    }
    res.centroids = std::move(next);
    res.iterations = it + 1;
    res.sse = assign_step();
    res.sse_history.push_back(res.sse);
    if (max_shift < tol) break;
  }
  return res;
}

// Synthesizes image-style prompts from unlabeled object embeddings: each
// k-means centroid becomes one prompt of a reserved pseudo category.
inline std::vector<PromptEmbedding> cluster_prompts(std::span<const std::vector<double>> unlabeled,
                                                    std::size_t k, std::mt19937_64& rng) {
  const KMeansResult km = kmeans(unlabeled, k, rng);
  std::vector<PromptEmbedding> out;
  out.reserve(k);
  for (std::size_t c = 0; c < k; ++c) {
    out.push_back(PromptEmbedding{kPseudoCategoryBase + static_cast<CategoryId>(c), Modality::Image,
                                  0, km.centroids[c], std::nullopt});
  }
  return out;
}

}  // namespace orsd::prompt
