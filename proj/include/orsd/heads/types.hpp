#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "orsd/geom.hpp"
#include "orsd/numkit/tensor.hpp"

namespace orsd::heads {

using numkit::Tensor2D;

// Geometry of the single-scale dense grid: cell (r, c) is centred at
// ((c + 0.5) * stride, (r + 0.5) * stride).
struct GridLayout {
  std::size_t grid_w = 0;
  std::size_t grid_h = 0;
  double stride = 8.0;

  std::size_t cells() const { return grid_w * grid_h; }
  geom::Point center(std::size_t i) const {
    return {(static_cast<double>(i % grid_w) + 0.5) * stride,
            (static_cast<double>(i / grid_w) + 0.5) * stride};
  }
  double image_w() const { return static_cast<double>(grid_w) * stride; }
  double image_h() const { return static_cast<double>(grid_h) * stride; }
};

struct FeatureGrid {
  Tensor2D cells;  // N x model_dim, row i belongs to layout.center(i)
  GridLayout layout;
};

struct HeadOutput {
  Tensor2D embeddings;  // Z, N x model_dim
  Tensor2D hbb_deltas;  // N x 4
  Tensor2D obb_deltas;  // N x 5
  double alpha = 1.0;
  double beta = 0.0;
};

inline constexpr std::ptrdiff_t kBackground = -1;

struct Assignment {
  std::vector<std::ptrdiff_t> cell_to_gt;         // kBackground or a GT index
  std::vector<std::vector<std::size_t>> gt_cells;  // cells matched to each GT

  std::size_t num_positive() const {
    std::size_t n = 0;
    for (auto g : cell_to_gt) n += g != kBackground ? 1 : 0;
    return n;
  }
};

// Regression targets relative to one cell, in stride units:
//   hbb = (dx, dy, log w, log h) of the enclosing horizontal box
//   obb = (dx, dy, log w, log h, theta) of the oriented box
// The angle enters the loss through (sin 2theta, cos 2theta).
struct BoxTargets {
  std::array<double, 4> hbb{};
  std::array<double, 5> obb{};
};

inline BoxTargets encode_box(const geom::OrientedBox& box, geom::Point cell, double stride) {
  const geom::HorizontalBox hb = geom::obb_to_hbb(box);
  const geom::Point hc = hb.center();
  BoxTargets t;
  t.hbb = {(hc.x - cell.x) / stride, (hc.y - cell.y) / stride, std::log(hb.width() / stride),
           std::log(hb.height() / stride)};
  t.obb = {(box.cx() - cell.x) / stride, (box.cy() - cell.y) / stride, std::log(box.w() / stride),
           std::log(box.h() / stride), box.theta()};
  return t;
}

inline constexpr double kMaxLogSize = 8.0;

inline geom::OrientedBox decode_obb(std::span<const double> d, geom::Point cell, double stride) {
  const double lw = std::min(d[2], kMaxLogSize);
  const double lh = std::min(d[3], kMaxLogSize);
  return geom::OrientedBox(cell.x + d[0] * stride, cell.y + d[1] * stride,
                           std::exp(lw) * stride, std::exp(lh) * stride, d[4]);
}

inline geom::HorizontalBox decode_hbb(std::span<const double> d, geom::Point cell, double stride) {
  const double cx = cell.x + d[0] * stride;
  const double cy = cell.y + d[1] * stride;
  const double w = std::exp(std::min(d[2], kMaxLogSize)) * stride;
  const double h = std::exp(std::min(d[3], kMaxLogSize)) * stride;
  return {cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0};
}

}  // namespace orsd::heads
