#pragma once

// Toy detector: per-cell backbone, per-modality prompt projectors and the two
// detection heads. Also builds synthetic prompt dictionaries.

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "orsd/harness/scene.hpp"
#include "orsd/heads/heads.hpp"
#include "orsd/numkit/layers.hpp"
#include "orsd/promptdict.hpp"

namespace orsd::harness {

using numkit::Parameter;
using numkit::Tape;
using numkit::Var;

// Two linear + SiLU layers, kFieldDim -> dim -> dim, applied to every cell.
struct ToyBackbone {
  numkit::Linear fc1;
  numkit::Linear fc2;

  ToyBackbone() = default;
  ToyBackbone(std::size_t dim, std::mt19937_64& rng)
      : fc1("backbone.fc1", kFieldDim, dim, rng), fc2("backbone.fc2", dim, dim, rng) {}

  Var operator()(Var field) { return numkit::silu(fc2(numkit::silu(fc1(field)))); }

  template <class F>
  void visit(F&& f) {
    fc1.visit(f);
    fc2.visit(f);
  }
};

struct ModelConfig {
  heads::HeadConfig heads;
  std::size_t text_dim = 32;
  std::size_t image_dim = 48;
  std::size_t projector_hidden = 256;
  bool predict_with_fusion = true;  // decode from the fusion head, else the alignment head
};

struct ToyModel {
  ModelConfig config;
  ToyBackbone backbone;
  prompt::Projector text_projector;
  prompt::Projector image_projector;
  heads::DetectionHeads heads;

  ToyModel() = default;
  ToyModel(const ModelConfig& cfg, std::mt19937_64& rng)
      : config(cfg),
        backbone(cfg.heads.model_dim, rng),
        text_projector(prompt::Modality::Text, cfg.text_dim, cfg.projector_hidden, cfg.heads.model_dim, rng),
        image_projector(prompt::Modality::Image, cfg.image_dim, cfg.projector_hidden, cfg.heads.model_dim, rng),
        heads(cfg.heads, rng) {}

  template <class F>
  void visit(F&& f) {
    backbone.visit(f);
    text_projector.visit(f);
    image_projector.visit(f);
    heads.visit(f);
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    visit([&](Parameter& p) { out.push_back(&p); });
    return out;
  }

  prompt::Projector& projector(prompt::Modality m) {
    return m == prompt::Modality::Text ? text_projector : image_projector;
  }

  struct Pass {
    heads::DetectionHeads::Forward forward;
    std::vector<CategoryId> classes;
  };

  Pass run(Tape& t, const SyntheticScene& scene, const prompt::PromptBatch& batch, std::mt19937_64& rng) {
    Pass out;
    out.classes = batch.classes();
    Var features = backbone(t.constant(scene.field));
    Var prompts = prompt::project_batch(t, batch.prompts, projector(batch.modality));
    const auto slots = heads::draw_class_slots(out.classes, heads.config.class_slots, rng);
    out.forward = heads.forward(features, prompts, batch.labels, out.classes, slots);
    return out;
  }

  // L_det on one scene for one sampled prompt batch.
  heads::DetectionHeads::Losses loss(Tape& t, const SyntheticScene& scene, const prompt::PromptBatch& batch,
                                     std::mt19937_64& rng) {
    const Pass p = run(t, scene, batch, rng);
    const auto asg = heads::assign(scene.gt, scene.layout);
    return heads.losses(p.forward, batch.labels, p.classes, asg, scene.gt, scene.layout);
  }

  std::vector<geom::Detection> predict(const SyntheticScene& scene, const prompt::PromptBatch& batch,
                                       std::mt19937_64& rng, const heads::DecodeOptions& opt = {}) {
    Tape t;
    const Pass p = run(t, scene, batch, rng);
    const heads::HeadVars& v = config.predict_with_fusion ? p.forward.fusion : p.forward.alignment;
    return heads::decode_detections(heads::to_output(v), v.logits.value(), p.classes, scene.layout, opt);
  }

  void clamp() { heads.clamp(); }
};

// Text-style dictionary: each class has a random centre vector and every
// prompt is the centre plus isotropic noise.
inline prompt::PromptDictionary make_text_dictionary(std::size_t n_classes, std::size_t per_class, std::size_t text_dim,
                                                     std::size_t image_dim, double noise, std::mt19937_64& rng) {
  prompt::PromptDictionary dict(text_dim, image_dim);
  std::normal_distribution<double> n(0.0, 1.0);
  for (std::size_t c = 0; c < n_classes; ++c) {
    std::vector<double> centre(text_dim);
    for (double& x : centre) x = n(rng);
    for (std::size_t j = 0; j < per_class; ++j) {
      std::vector<double> v = centre;
      for (double& x : v) x += noise * n(rng);
      dict.add({static_cast<CategoryId>(c), prompt::Modality::Text, static_cast<int>(j), std::move(v), std::nullopt});
    }
  }
  return dict;
}

// Fixed random linear "image encoder" from a mean texture vector to image_dim.
inline Tensor2D make_crop_encoder(std::size_t image_dim, std::mt19937_64& rng) {
  return numkit::normal_tensor(kTextureDim, image_dim, 1.0, rng);
}

// Mean texture of the cells whose centres fall in the window.
inline std::vector<double> crop_texture(const SyntheticScene& s, const geom::HorizontalBox& window) {
  std::vector<double> mean(kTextureDim, 0.0);
  std::size_t n = 0;
  for (std::size_t i = 0; i < s.layout.cells(); ++i) {
    const geom::Point p = s.layout.center(i);
    if (p.x < window.xmin || p.x > window.xmax || p.y < window.ymin || p.y > window.ymax) continue;
    const auto row = s.field.row(i);
    for (std::size_t t = 0; t < kTextureDim; ++t) mean[t] += row[t];
    ++n;
  }
  if (n > 0) {
    for (double& x : mean) x /= static_cast<double>(n);
  }
  return mean;
}

// Image-style dictionary: every GT box of `scenes` is enlarged by
// `crop_factor`, its mean texture encoded, and scored by cosine similarity to
// the class signature (standing in for a crop classifier); the top `cap`
// crops per class become that class's image prompts.
inline prompt::PromptDictionary make_image_dictionary(const std::vector<SyntheticScene>& scenes, const Palette& palette,
                                                      const Tensor2D& encoder, std::size_t text_dim,
                                                      std::size_t cap = prompt::kMaxImagePrompts,
                                                      double crop_factor = 1.25) {
  const std::size_t image_dim = encoder.cols();
  std::map<CategoryId, std::vector<prompt::ScoredPrompt>> candidates;
  for (const auto& s : scenes) {
    for (const auto& g : s.gt) {
      const auto window = geom::prompt_crop_window(g.hbox, crop_factor, s.width(), s.height());
      const auto tex = crop_texture(s, window);
      const auto& sig = palette.class_signature.at(static_cast<std::size_t>(g.category));
      double dot = 0.0, nt = 0.0, ns = 0.0;
      for (std::size_t t = 0; t < kTextureDim; ++t) {
        dot += tex[t] * sig[t];
        nt += tex[t] * tex[t];
        ns += sig[t] * sig[t];
      }
      std::vector<double> emb(image_dim, 0.0);
      for (std::size_t t = 0; t < kTextureDim; ++t)
        for (std::size_t d = 0; d < image_dim; ++d) emb[d] += tex[t] * encoder(t, d);
      auto& list = candidates[g.category];
      list.push_back({{g.category, prompt::Modality::Image, static_cast<int>(list.size()), std::move(emb), std::nullopt},
                      dot / std::max(std::sqrt(nt * ns), 1e-12)});
    }
  }
  prompt::PromptDictionary dict(text_dim, image_dim);
  for (const auto& [c, list] : candidates) {
    int id = 0;
    for (auto e : prompt::select_image_prompts(list, cap)) {
      e.prompt_id = id++;
      dict.add(std::move(e));
    }
  }
  return dict;
}

}  // namespace orsd::harness
