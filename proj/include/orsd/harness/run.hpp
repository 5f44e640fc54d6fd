#pragma once

// A complete toy run from a RunConfig: synthetic data, model, training,
// metrics log and final evaluation.

#include <chrono>
#include <cstdint>
#include <ostream>
#include <random>
#include <vector>

#include <json.hpp>

#include "orsd/harness/config.hpp"
#include "orsd/harness/train.hpp"

namespace orsd::harness {

inline constexpr double kSignatureNorm = 2.0;
inline constexpr std::size_t kTextPromptsPerClass = 15;
inline constexpr double kTextPromptNoise = 0.1;

// Independent generator streams derived from one run seed.
inline std::mt19937_64 stream(std::uint64_t seed, std::uint32_t tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), tag};
  return std::mt19937_64(seq);
}

inline std::uint64_t stream_seed(std::uint64_t seed, std::uint32_t tag) { return stream(seed, tag)(); }

struct ToyData {
  Palette palette;
  std::vector<SyntheticScene> train;
  std::vector<SyntheticScene> eval;
  prompt::PromptDictionary dictionary;
  std::vector<CategoryId> classes;
};

inline ToyData make_toy_data(const RunConfig& cfg, std::size_t threads = 1) {
  ToyData d;
  auto prng = stream(cfg.seed, 1);
  d.palette = make_palette(cfg.n_classes, kSignatureNorm, prng);
  const SceneSpec spec;
  d.train = generate_scenes(cfg.train_scenes, spec, d.palette, stream_seed(cfg.seed, 2), "train", threads);
  d.eval = generate_scenes(cfg.eval_scenes, spec, d.palette, stream_seed(cfg.seed, 3), "eval", threads);
  auto drng = stream(cfg.seed, 4);
  if (cfg.modality == prompt::Modality::Text) {
    d.dictionary = make_text_dictionary(cfg.n_classes, kTextPromptsPerClass, 32, 48, kTextPromptNoise, drng);
  } else {
    d.dictionary = make_image_dictionary(d.train, d.palette, make_crop_encoder(48, drng), 32);
  }
  for (std::size_t c = 0; c < cfg.n_classes; ++c) d.classes.push_back(static_cast<CategoryId>(c));
  return d;
}

inline ModelConfig model_config(const RunConfig& cfg) {
  ModelConfig m;
  m.heads.model_dim = cfg.model_dim;
  m.heads.fusion_layers = cfg.fusion_layers;
  m.heads.tau = cfg.tau;
  m.projector_hidden = cfg.model_dim;
  return m;
}

inline ToyModel make_model(const RunConfig& cfg) {
  auto rng = stream(cfg.seed, 5);
  return ToyModel(model_config(cfg), rng);
}

inline TrainConfig train_config(const RunConfig& cfg) {
  TrainConfig t;
  t.seed = stream_seed(cfg.seed, 6);
  t.iterations = cfg.iterations;
  t.frozen_iterations = cfg.frozen_iterations;
  t.lr = cfg.lr;
  t.momentum = cfg.momentum;
  t.grad_clip = cfg.grad_clip;
  t.lr_decay_at = cfg.lr_decay_at;
  t.lr_decay = cfg.lr_decay;
  t.sampling.min_prompts = static_cast<int>(cfg.prompt_min);
  t.sampling.max_prompts = static_cast<int>(cfg.prompt_max);
  t.sampling.n_negatives = cfg.n_negatives;
  return t;
}

inline EvalOptions eval_options(const RunConfig& cfg, geom::IouMode mode = geom::IouMode::Obb) {
  EvalOptions e;
  e.prompts_per_class = cfg.eval_prompts;
  e.modality = cfg.modality;
  e.seed = stream_seed(cfg.seed, 7);
  e.mode = mode;
  return e;
}

inline nlohmann::ordered_json iteration_json(const IterationLog& l) {
  nlohmann::ordered_json j;
  j["iteration"] = l.iteration + 1;
  j["loss"] = l.total;
  j["alignment"] = l.alignment;
  j["fusion"] = l.fusion;
  j["contrastive"] = l.contrastive;
  j["cls"] = l.cls;
  j["box"] = l.box;
  j["grad_norm"] = l.grad_norm;
  return j;
}

struct RunResult {
  ToyModel model;
  ApResult obb;
  ApResult hbb;
  double seconds = 0.0;
};

// Trains on the labeled training scenes, writing one JSON line per iteration
// (plus AP50 every `eval_every` iterations) to `metrics` when given.
inline RunResult run_toy(const RunConfig& cfg, const ToyData& data, std::ostream* metrics, std::size_t threads = 1) {
  const auto t0 = std::chrono::steady_clock::now();
  RunResult r{make_model(cfg), {}, {}, 0.0};
  std::vector<TrainImage> labeled;
  for (const auto& s : data.train) labeled.push_back(labeled_image(s));
  const auto eo = eval_options(cfg);
  train_toy(r.model, labeled, {}, data.dictionary, train_config(cfg), [&](const IterationLog& l, ToyModel& m) {
    if (metrics == nullptr) return;
    auto j = iteration_json(l);
    if (cfg.eval_every > 0 && (l.iteration + 1) % cfg.eval_every == 0 && l.iteration + 1 < cfg.iterations) {
      j["ap50_obb"] = evaluate(m, data.eval, data.dictionary, data.classes, eo, threads).mean;
    }
    *metrics << j.dump() << '\n';
  });
  r.obb = evaluate(r.model, data.eval, data.dictionary, data.classes, eo, threads);
  r.hbb = evaluate(r.model, data.eval, data.dictionary, data.classes, eval_options(cfg, geom::IouMode::Hbb), threads);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (metrics != nullptr) {
    nlohmann::ordered_json j;
    j["final"] = true;
    j["iterations"] = cfg.iterations;
    j["ap50_obb"] = r.obb.mean;
    j["ap50_hbb"] = r.hbb.mean;
    j["seconds"] = r.seconds;
    *metrics << j.dump() << '\n';
  }
  return r;
}

}  // namespace orsd::harness
