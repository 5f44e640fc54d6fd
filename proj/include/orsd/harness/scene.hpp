#pragma once

// Procedural stand-in for imagery: every stride-8 cell holds a 16-d feature
// vector instead of pixels.
//
//   0..7   texture: class signature (background signature outside objects) + noise
//   8..9   offset of the covering object's centre from the cell centre, in strides
//   10..11 log(w / stride), log(h / stride) of the covering object
//   12..13 sin 2theta, cos 2theta of the covering object
//   14     objectness (1 inside an object)
//   15     noise
//
// The covering object of a cell is the smallest object containing its centre.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "orsd/error.hpp"
#include "orsd/geom.hpp"
#include "orsd/heads/types.hpp"
#include "orsd/numkit/tensor.hpp"

namespace orsd::harness {

using numkit::Tensor2D;

inline constexpr std::size_t kFieldDim = 16;
inline constexpr std::size_t kTextureDim = 8;

struct SceneSpec {
  std::size_t grid_w = 8;
  std::size_t grid_h = 8;
  double stride = 8.0;
  std::size_t min_objects = 1;
  std::size_t max_objects = 3;
  double min_short_side = 16.0;
  double max_short_side = 22.0;
  double max_long_side = 36.0;
  double texture_noise = 0.5;
  double geometry_noise = 0.02;
  double scene_shift = 0.0;  // per-scene offset added to every texture vector
  double max_pair_iou = 0.05;
};

// Texture signatures of the classes and of the background.
struct Palette {
  std::vector<std::vector<double>> class_signature;
  std::vector<double> background;

  std::size_t classes() const { return class_signature.size(); }
};

inline Palette make_palette(std::size_t n_classes, double signature_norm, std::mt19937_64& rng) {
  Palette p;
  std::normal_distribution<double> n(0.0, 1.0);
  for (std::size_t c = 0; c < n_classes; ++c) {
    std::vector<double> v(kTextureDim);
    double s = 0.0;
    for (double& x : v) {
      x = n(rng);
      s += x * x;
    }
    for (double& x : v) x *= signature_norm / std::sqrt(s);
    p.class_signature.push_back(std::move(v));
  }
  p.background.assign(kTextureDim, 0.0);
  return p;
}

struct SyntheticScene {
  std::string image_id;
  heads::GridLayout layout;
  Tensor2D field;  // cells x kFieldDim
  std::vector<geom::Detection> gt;

  int width() const { return static_cast<int>(layout.image_w()); }
  int height() const { return static_cast<int>(layout.image_h()); }
};

namespace detail {

inline bool inside_image(const geom::OrientedBox& b, double w, double h) {
  const geom::HorizontalBox hb = geom::obb_to_hbb(b);
  return hb.xmin >= 0.0 && hb.ymin >= 0.0 && hb.xmax <= w && hb.ymax <= h;
}

}  // namespace detail

// Places between min_objects and max_objects oriented rectangles (long side
// along theta) at random poses, retrying placements that leave the image or
// overlap an earlier object. Classes are drawn uniformly from the palette.
inline SyntheticScene generate_scene(const SceneSpec& spec, const Palette& palette, std::mt19937_64& rng,
                                     std::string image_id = {}) {
  if (palette.classes() == 0) throw DataError("palette has no classes");
  if (spec.min_objects > spec.max_objects) throw DataError("scene spec: min_objects > max_objects");
  SyntheticScene s;
  s.image_id = std::move(image_id);
  s.layout = {spec.grid_w, spec.grid_h, spec.stride};
  const double W = s.layout.image_w();
  const double H = s.layout.image_h();

  std::uniform_int_distribution<std::size_t> count(spec.min_objects, spec.max_objects);
  std::uniform_int_distribution<std::size_t> cls(0, palette.classes() - 1);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const std::size_t want = count(rng);
  for (std::size_t k = 0; k < want; ++k) {
    const auto c = static_cast<CategoryId>(cls(rng));
    for (int attempt = 0; attempt < 200; ++attempt) {
      const double h = spec.min_short_side + (spec.max_short_side - spec.min_short_side) * u01(rng);
      const double w = h + (spec.max_long_side - h) * u01(rng);
      const double th = (u01(rng) - 0.5) * std::numbers::pi;
      const geom::OrientedBox b(W * u01(rng), H * u01(rng), w, h, th);
      if (!detail::inside_image(b, W, H)) continue;
      bool clash = false;
      for (const auto& g : s.gt) clash = clash || geom::rotated_iou(g.box, b) > spec.max_pair_iou;
      if (clash) continue;
      s.gt.push_back(geom::make_detection(b, c, 1.0, geom::Source::GroundTruth));
      break;
    }
  }

  std::normal_distribution<double> tex(0.0, spec.texture_noise);
  std::normal_distribution<double> geo(0.0, spec.geometry_noise);
  std::normal_distribution<double> unit(0.0, 1.0);
  std::vector<double> shift(kTextureDim, 0.0);
  if (spec.scene_shift > 0.0) {
    for (double& x : shift) x = spec.scene_shift * unit(rng);
  }
  s.field = Tensor2D(s.layout.cells(), kFieldDim);
  for (std::size_t i = 0; i < s.layout.cells(); ++i) {
    const geom::Point p = s.layout.center(i);
    const geom::Detection* cover = nullptr;
    for (const auto& g : s.gt) {
      if (geom::contains(g.box, p) && (cover == nullptr || g.box.area() < cover->box.area())) cover = &g;
    }
    auto row = s.field.row(i);
    const auto& sig = cover ? palette.class_signature[static_cast<std::size_t>(cover->category)] : palette.background;
    for (std::size_t t = 0; t < kTextureDim; ++t) row[t] = sig[t] + shift[t] + tex(rng);
    if (cover != nullptr) {
      const auto& b = cover->box;
      row[8] = (b.cx() - p.x) / spec.stride + geo(rng);
      row[9] = (b.cy() - p.y) / spec.stride + geo(rng);
      row[10] = std::log(b.w() / spec.stride) + geo(rng);
      row[11] = std::log(b.h() / spec.stride) + geo(rng);
      row[12] = std::sin(2.0 * b.theta()) + geo(rng);
      row[13] = std::cos(2.0 * b.theta()) + geo(rng);
      row[14] = 1.0;
    } else {
      for (std::size_t t = 8; t < 14; ++t) row[t] = geo(rng);
    }
    row[15] = unit(rng);
  }
  return s;
}

// Scene i is generated from its own seed (base seed, i), so the set does not
// depend on the number of workers.
inline std::vector<SyntheticScene> generate_scenes(std::size_t count, const SceneSpec& spec, const Palette& palette,
                                                   std::uint64_t seed, const std::string& prefix = "scene",
                                                   std::size_t threads = 1) {
  std::vector<SyntheticScene> out(count);
  threads = std::max<std::size_t>(1, std::min(threads, count));
  const auto work = [&](std::size_t w) {
    for (std::size_t i = w; i < count; i += threads) {
      std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                        static_cast<std::uint32_t>(i)};
      std::mt19937_64 rng(seq);
      char id[32];
      std::snprintf(id, sizeof id, "%05zu", i);
      out[i] = generate_scene(spec, palette, rng, prefix + "-" + id);
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

}  // namespace orsd::harness
