#pragma once

// Momentum-SGD training of the toy detector on L_det, with an optional
// frozen-backbone phase and a labeled/pseudo-labeled 2:1 mix.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "orsd/harness/eval.hpp"
#include "orsd/harness/model.hpp"
#include "orsd/pseudolabel.hpp"

namespace orsd::harness {

// One training image: the scene supplies the field and layout; boxes and
// category lists may differ from the scene's own GT (under-labeled or
// pseudo-labeled copies).
struct TrainImage {
  const SyntheticScene* scene = nullptr;
  std::vector<geom::Detection> boxes;
  std::vector<CategoryId> hard_negatives;

  std::vector<CategoryId> positives() const {
    std::vector<CategoryId> out;
    for (const auto& b : boxes) out.push_back(b.category);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }
};

inline TrainImage labeled_image(const SyntheticScene& s) { return {&s, s.gt, {}}; }

// Scene GT plus the record's pseudo boxes; the record's hard negatives are
// forced into every prompt batch drawn for this image.
inline TrainImage pseudo_image(const SyntheticScene& s, const std::vector<geom::Detection>& gt,
                               const pseudo::PseudoLabelRecord& r) {
  TrainImage t{&s, gt, r.hard_negatives};
  t.boxes.insert(t.boxes.end(), r.detections.begin(), r.detections.end());
  return t;
}

struct TrainConfig {
  std::uint64_t seed = 0;
  std::size_t iterations = 1000;
  std::size_t frozen_iterations = 0;  // leading iterations with the backbone frozen
  double lr = 1e-2;
  double momentum = 0.9;
  double grad_clip = 1.0;  // global gradient-norm clip; <= 0 disables
  double lr_decay_at = 0.75;  // fraction of the run after which lr is multiplied by lr_decay
  double lr_decay = 0.1;
  prompt::SamplingOptions sampling;
  double pseudo_rate = 0.5;
};

struct IterationLog {
  std::size_t iteration = 0;
  double total = 0.0;
  double alignment = 0.0;
  double fusion = 0.0;
  double contrastive = 0.0;  // both heads
  double cls = 0.0;
  double box = 0.0;
  double grad_norm = 0.0;
};

using IterationCallback = std::function<void(const IterationLog&, ToyModel&)>;

inline double global_grad_norm(const std::vector<numkit::Parameter*>& params) {
  double s = 0.0;
  for (const auto* p : params) {
    if (!p->trainable) continue;
    for (double g : p->grad.values()) s += g * g;
  }
  return std::sqrt(s);
}

// v <- momentum * v + g;  w <- w - lr * v
inline void sgd_step(const std::vector<numkit::Parameter*>& params, double lr, double momentum, double scale) {
  for (auto* p : params) {
    if (!p->trainable) continue;
    auto v = p->velocity.values();
    auto w = p->value.values();
    const auto g = p->grad.values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = momentum * v[i] + scale * g[i];
      w[i] -= lr * v[i];
    }
    p->zero_grad();
  }
}

inline void set_backbone_trainable(ToyModel& m, bool on) {
  m.backbone.visit([&](numkit::Parameter& p) { p.trainable = on; });
}

// Trains `model` in place. Images come from `labeled` and, when `pseudo` is
// non-empty, from the 2:1 mix. Throws NumericError when the loss or the
// gradient stops being finite.
inline std::vector<IterationLog> train_toy(ToyModel& model, std::span<const TrainImage> labeled,
                                           std::span<const TrainImage> pseudo, const prompt::PromptDictionary& dict,
                                           const TrainConfig& cfg, const IterationCallback& on_iteration = {}) {
  if (labeled.empty() && pseudo.empty()) throw DataError("train_toy: no training images");
  std::mt19937_64 rng(cfg.seed);
  pseudo::MixSampler mix(labeled.size(), pseudo.size(), cfg.seed ^ 0x9e3779b97f4a7c15ULL, cfg.pseudo_rate);
  const auto params = model.parameters();
  std::vector<IterationLog> log;
  log.reserve(cfg.iterations);
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    set_backbone_trainable(model, it >= cfg.frozen_iterations);
    const TrainImage* img = nullptr;
    for (int tries = 0; tries < 1000 && img == nullptr; ++tries) {
      const auto [src, idx] = mix.next();
      const TrainImage& cand = src == pseudo::MixSource::Pseudo ? pseudo[idx] : labeled[idx];
      if (!cand.boxes.empty()) img = &cand;
    }
    if (img == nullptr) throw DataError("train_toy: no training image has annotated objects");

    const auto batch = prompt::sample_training_prompts(img->positives(), dict, cfg.sampling, rng, img->hard_negatives);
    const SyntheticScene& scene = *img->scene;
    numkit::Tape tape;
    const heads::Assignment asg = heads::assign(img->boxes, scene.layout);
    const auto pass = model.run(tape, scene, batch, rng);
    const auto losses = model.heads.losses(pass.forward, batch.labels, pass.classes, asg, img->boxes, scene.layout);
    const double total = losses.total.value().item();
    if (!std::isfinite(total)) {
      throw NumericError("loss is not finite at iteration " + std::to_string(it));
    }
    tape.backward(losses.total);
    const double gn = global_grad_norm(params);
    if (!std::isfinite(gn)) throw NumericError("gradient is not finite at iteration " + std::to_string(it));
    const double scale = (cfg.grad_clip > 0.0 && gn > cfg.grad_clip) ? cfg.grad_clip / gn : 1.0;
    const bool decayed = static_cast<double>(it) >= cfg.lr_decay_at * static_cast<double>(cfg.iterations);
    sgd_step(params, decayed ? cfg.lr * cfg.lr_decay : cfg.lr, cfg.momentum, scale);
    model.clamp();

    IterationLog l;
    l.iteration = it;
    l.total = total;
    l.alignment = losses.alignment.total.value().item();
    l.fusion = losses.fusion.total.value().item();
    l.contrastive = losses.alignment.contrastive.value().item() + losses.fusion.contrastive.value().item();
    l.cls = losses.alignment.cls.value().item() + losses.fusion.cls.value().item();
    l.box = losses.alignment.box.value().item() + losses.fusion.box.value().item();
    l.grad_norm = gn;
    log.push_back(l);
    if (on_iteration) on_iteration(l, model);
  }
  set_backbone_trainable(model, true);
  return log;
}

struct EvalOptions {
  std::size_t prompts_per_class = 5;
  prompt::Modality modality = prompt::Modality::Text;
  heads::DecodeOptions decode;
  std::uint64_t seed = 0;
  geom::IouMode mode = geom::IouMode::Obb;
};

// Detections for every scene, prompted with `prompts_per_class` prompts of
// each class in `classes`. Scene i draws its prompts from its own seed.
inline std::vector<std::vector<geom::Detection>> predict_all(ToyModel& model, std::span<const SyntheticScene> scenes,
                                                             const prompt::PromptDictionary& dict,
                                                             std::span<const CategoryId> classes,
                                                             const EvalOptions& opt, std::size_t threads = 1) {
  std::vector<std::vector<geom::Detection>> out(scenes.size());
  threads = std::max<std::size_t>(1, std::min(threads, scenes.size()));
  const auto work = [&](std::size_t w) {
    for (std::size_t i = w; i < scenes.size(); i += threads) {
      std::seed_seq seq{static_cast<std::uint32_t>(opt.seed), static_cast<std::uint32_t>(i), 77u};
      std::mt19937_64 rng(seq);
      const auto batch = prompt::sample_inference_prompts(classes, dict, opt.modality, opt.prompts_per_class, rng);
      out[i] = model.predict(scenes[i], batch, rng, opt.decode);
    }
  };
  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w) pool.emplace_back(work, w);
    for (auto& t : pool) t.join();
  }
  return out;
}

inline ApResult evaluate(ToyModel& model, std::span<const SyntheticScene> scenes, const prompt::PromptDictionary& dict,
                         std::span<const CategoryId> classes, const EvalOptions& opt, std::size_t threads = 1) {
  const auto preds = predict_all(model, scenes, dict, classes, opt, threads);
  std::vector<std::vector<geom::Detection>> gts;
  for (const auto& s : scenes) gts.push_back(s.gt);
  return ap50(preds, gts, opt.mode);
}

}  // namespace orsd::harness
