#pragma once

// Self-training on synthetic scenes: a trained model labels scenes, the
// pseudo-label filter cleans its detections, and the records become extra
// training images.

#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <thread>
#include <vector>

#include "orsd/harness/train.hpp"
#include "orsd/pseudolabel.hpp"

namespace orsd::harness {

// Cosine between the mean texture inside the detection's enclosing box and
// the signature of its predicted class. Stands in for the image/text
// similarity a vision-language model would give the crop.
inline double crop_similarity(const SyntheticScene& s, const geom::Detection& d, const Palette& palette) {
  const auto window = geom::prompt_crop_window(d.hbox, 1.0, s.width(), s.height());
  const auto tex = crop_texture(s, window);
  const auto& sig = palette.class_signature.at(static_cast<std::size_t>(d.category));
  double dot = 0.0, nt = 0.0, ns = 0.0;
  for (std::size_t t = 0; t < kTextureDim; ++t) {
    dot += tex[t] * sig[t];
    nt += tex[t] * tex[t];
    ns += sig[t] * sig[t];
  }
  if (nt == 0.0 || ns == 0.0) return 0.0;
  return std::clamp(dot / std::sqrt(nt * ns), -1.0, 1.0);
}

// Flat tree: every class is its own top-level category.
inline pseudo::CategoryTree flat_tree(std::span<const CategoryId> classes) {
  pseudo::CategoryTree t;
  for (CategoryId c : classes) t.add(c);
  return t;
}

struct PseudoLabelOptions {
  pseudo::Options filter;
  std::size_t prompt_sets = 2;  // independent prompt draws whose detections are merged
  std::size_t prompts_per_class = 5;
  std::uint64_t seed = 0;
  heads::DecodeOptions decode;
};

// Pipeline inputs for `scenes`: `known[i]` is the annotation scene i keeps as
// GT; detections come from `prompt_sets` prompt draws per scene.
inline std::vector<pseudo::ImageInput> pseudo_label_inputs(ToyModel& model, std::span<const SyntheticScene> scenes,
                                                           std::span<const std::vector<geom::Detection>> known,
                                                           const prompt::PromptDictionary& dict,
                                                           std::span<const CategoryId> classes, const Palette& palette,
                                                           prompt::Modality modality, const PseudoLabelOptions& opt,
                                                           std::size_t threads = 1) {
  if (scenes.size() != known.size()) throw DataError("pseudo_label_inputs: scene/annotation count mismatch");
  std::vector<pseudo::ImageInput> inputs(scenes.size());
  threads = std::max<std::size_t>(1, std::min(threads, scenes.size()));
  const auto work = [&](std::size_t w) {
    for (std::size_t i = w; i < scenes.size(); i += threads) {
      auto& in = inputs[i];
      in.image_id = scenes[i].image_id;
      in.gt = known[i];
      for (std::size_t set = 0; set < opt.prompt_sets; ++set) {
        std::seed_seq seq{static_cast<std::uint32_t>(opt.seed), static_cast<std::uint32_t>(i),
                          static_cast<std::uint32_t>(set)};
        std::mt19937_64 rng(seq);
        const auto batch = prompt::sample_inference_prompts(classes, dict, modality, opt.prompts_per_class, rng);
        for (const auto& d : model.predict(scenes[i], batch, rng, opt.decode)) {
          const std::size_t idx = in.predictions.size();
          in.predictions.push_back({d, idx, set});
          in.similarities.set(idx, d.category, crop_similarity(scenes[i], d, palette));
        }
      }
    }
  };
  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w) pool.emplace_back(work, w);
    for (auto& t : pool) t.join();
  }
  return inputs;
}

// Pseudo-labeled training images, parallel to `scenes`.
inline std::vector<TrainImage> pseudo_train_images(std::span<const SyntheticScene> scenes,
                                                   std::span<const std::vector<geom::Detection>> known,
                                                   const std::vector<pseudo::PseudoLabelRecord>& records) {
  std::map<std::string, const pseudo::PseudoLabelRecord*> by_id;
  for (const auto& r : records) by_id[r.image_id] = &r;
  std::vector<TrainImage> out;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    auto it = by_id.find(scenes[i].image_id);
    if (it == by_id.end()) throw DataError("no pseudo-label record for '" + scenes[i].image_id + "'");
    out.push_back(pseudo_image(scenes[i], known[i], *it->second));
  }
  return out;
}

struct PseudoQuality {
  std::size_t boxes = 0;
  std::size_t correct = 0;    // matches a GT of the same class at IoU >= 0.5
  std::size_t missing = 0;    // GT objects not in `known` and not recovered
  std::size_t recoverable = 0;
};

inline PseudoQuality pseudo_quality(std::span<const SyntheticScene> scenes,
                                    std::span<const std::vector<geom::Detection>> known,
                                    const std::vector<pseudo::PseudoLabelRecord>& records) {
  std::map<std::string, const pseudo::PseudoLabelRecord*> by_id;
  for (const auto& r : records) by_id[r.image_id] = &r;
  PseudoQuality q;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const auto& dets = by_id.at(scenes[i].image_id)->detections;
    q.boxes += dets.size();
    for (const auto& d : dets) {
      bool hit = false;
      for (const auto& g : scenes[i].gt)
        hit = hit || (g.category == d.category && geom::rotated_iou(g.box, d.box) >= 0.5);
      q.correct += hit;
    }
    for (const auto& g : scenes[i].gt) {
      bool annotated = false;
      for (const auto& k : known[i]) annotated = annotated || k.box == g.box;
      if (annotated) continue;
      ++q.recoverable;
      bool found = false;
      for (const auto& d : dets) found = found || (g.category == d.category && geom::rotated_iou(g.box, d.box) >= 0.5);
      q.missing += !found;
    }
  }
  return q;
}

}  // namespace orsd::harness
