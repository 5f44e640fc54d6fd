#pragma once

// Run configuration: every numeric constant of a toy run in one JSON object.

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <istream>
#include <string>

#include <json.hpp>

#include "orsd/error.hpp"
#include "orsd/promptdict.hpp"
#include "orsd/pseudolabel.hpp"

namespace orsd::harness {

struct RunConfig {
  std::uint64_t seed = 0;
  pseudo::Options pseudo;  // score 0.3, similarity 0.24, min side 16, overlap 0.5, nms 0.5
  std::size_t prompt_min = 3;
  std::size_t prompt_max = 7;
  std::size_t n_negatives = 20;
  double tau = 0.1;
  double lr = 1e-2;
  double momentum = 0.9;
  double grad_clip = 1.0;
  double lr_decay_at = 0.75;
  double lr_decay = 0.1;
  std::size_t iterations = 4000;
  std::size_t frozen_iterations = 0;
  std::size_t model_dim = 256;
  std::size_t fusion_layers = 3;
  std::size_t n_classes = 3;
  std::size_t train_scenes = 256;
  std::size_t eval_scenes = 64;
  prompt::Modality modality = prompt::Modality::Text;
  std::size_t eval_every = 0;  // 0: evaluate only at the end
  std::size_t eval_prompts = 5;
  std::string checkpoint = "checkpoint.bin";
  std::string metrics = "metrics.jsonl";

  void validate() const;
};

namespace detail {

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw DataError("config: " + msg);
}

inline bool in_unit(double v) { return v >= 0.0 && v <= 1.0; }

}  // namespace detail

inline void RunConfig::validate() const {
  using detail::in_unit;
  using detail::require;
  require(in_unit(pseudo.score_thresh), "score_thresh must be in [0, 1]");
  require(pseudo.sim_thresh >= -1.0 && pseudo.sim_thresh <= 1.0, "sim_thresh must be in [-1, 1]");
  require(pseudo.min_side >= 0.0 && std::isfinite(pseudo.min_side), "min_side must be a finite non-negative number");
  require(in_unit(pseudo.overlap_iou), "overlap_iou must be in [0, 1]");
  require(in_unit(pseudo.nms_iou), "nms_iou must be in [0, 1]");
  require(prompt_min >= 1 && prompt_min <= prompt_max, "prompt count range must satisfy 1 <= min <= max");
  require(prompt_max <= prompt::kMaxImagePrompts, "prompt_max must be at most 100");
  require(tau > 0.0 && std::isfinite(tau), "tau must be positive");
  require(lr > 0.0 && std::isfinite(lr), "lr must be positive");
  require(momentum >= 0.0 && momentum < 1.0, "momentum must be in [0, 1)");
  require(in_unit(lr_decay_at), "lr_decay_at must be in [0, 1]");
  require(lr_decay > 0.0 && lr_decay <= 1.0, "lr_decay must be in (0, 1]");
  require(grad_clip >= 0.0 && std::isfinite(grad_clip), "grad_clip must be non-negative");
  require(frozen_iterations <= iterations, "frozen_iterations must not exceed iterations");
  require(model_dim >= 8 && model_dim % 8 == 0, "model_dim must be a positive multiple of 8");
  require(fusion_layers >= 1, "fusion_layers must be at least 1");
  require(n_classes >= 1 && n_classes <= 80, "n_classes must be in 1..80");
  require(train_scenes >= 1 && eval_scenes >= 1, "scene counts must be positive");
  require(eval_prompts >= 1 && eval_prompts <= prompt::kMaxImagePrompts, "eval_prompts must be in 1..100");
}

namespace detail {

template <class T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw DataError(std::string("config: field '") + key + "' has the wrong type");
  }
}

}  // namespace detail

inline std::uint64_t parse_seed(const std::string& text, const std::string& where) {
  std::size_t used = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(text, &used, 10);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size() || text.front() == '-') throw DataError(where + ": bad seed '" + text + "'");
  return v;
}

// Unknown keys are rejected so typos do not silently fall back to defaults.
// ORSD_SEED, when set, replaces the seed.
inline RunConfig parse_run_config(const nlohmann::json& j) {
  if (!j.is_object()) throw DataError("config: expected a JSON object");
  static const char* known[] = {"seed",          "score_thresh", "sim_thresh",        "min_side",   "overlap_iou",
                                "nms_iou",       "prompt_min",   "prompt_max",        "n_negatives", "tau",
                                "lr",            "momentum",     "grad_clip",  "lr_decay_at", "lr_decay",         "iterations", "frozen_iterations",
                                "model_dim",     "fusion_layers", "n_classes",        "train_scenes", "eval_scenes",
                                "modality",      "eval_every",   "eval_prompts",      "checkpoint", "metrics"};
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* n : known) ok = ok || k == n;
    if (!ok) throw DataError("config: unknown field '" + k + "'");
  }
  RunConfig c;
  using detail::read_opt;
  read_opt(j, "seed", c.seed);
  read_opt(j, "score_thresh", c.pseudo.score_thresh);
  read_opt(j, "sim_thresh", c.pseudo.sim_thresh);
  read_opt(j, "min_side", c.pseudo.min_side);
  read_opt(j, "overlap_iou", c.pseudo.overlap_iou);
  read_opt(j, "nms_iou", c.pseudo.nms_iou);
  read_opt(j, "prompt_min", c.prompt_min);
  read_opt(j, "prompt_max", c.prompt_max);
  read_opt(j, "n_negatives", c.n_negatives);
  read_opt(j, "tau", c.tau);
  read_opt(j, "lr", c.lr);
  read_opt(j, "momentum", c.momentum);
  read_opt(j, "grad_clip", c.grad_clip);
  read_opt(j, "lr_decay_at", c.lr_decay_at);
  read_opt(j, "lr_decay", c.lr_decay);
  read_opt(j, "iterations", c.iterations);
  read_opt(j, "frozen_iterations", c.frozen_iterations);
  read_opt(j, "model_dim", c.model_dim);
  read_opt(j, "fusion_layers", c.fusion_layers);
  read_opt(j, "n_classes", c.n_classes);
  read_opt(j, "train_scenes", c.train_scenes);
  read_opt(j, "eval_scenes", c.eval_scenes);
  read_opt(j, "eval_every", c.eval_every);
  read_opt(j, "eval_prompts", c.eval_prompts);
  read_opt(j, "checkpoint", c.checkpoint);
  read_opt(j, "metrics", c.metrics);
  if (j.contains("modality")) {
    std::string m;
    read_opt(j, "modality", m);
    c.modality = prompt::parse_modality(m);
  }
  if (const char* env = std::getenv("ORSD_SEED"); env != nullptr && *env != '\0') {
    c.seed = parse_seed(env, "ORSD_SEED");
  }
  c.validate();
  return c;
}

inline RunConfig read_run_config(std::istream& in) {
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("config: invalid JSON (") + e.what() + ")");
  }
  return parse_run_config(j);
}

}  // namespace orsd::harness
