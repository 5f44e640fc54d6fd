#pragma once

// Rotated-box geometry: corners, enclosing horizontal boxes, exact rotated IoU
// by convex clipping, and greedy class-agnostic NMS.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "orsd/error.hpp"

namespace orsd {

using CategoryId = std::int32_t;

namespace geom {

inline constexpr double kMinSide = 1e-9;

struct Point {
  double x = 0.0;
  double y = 0.0;
};

// Reduces an angle modulo pi into [-pi/2, pi/2). A rectangle rotated by pi is
// the same rectangle, so this is the canonical stored form.
inline double normalize_angle(double theta) {
  constexpr double pi = std::numbers::pi;
  double t = std::fmod(theta + pi / 2.0, pi);
  if (t < 0.0) t += pi;
  t -= pi / 2.0;
  if (t >= pi / 2.0) t -= pi;
  return t;
}

class OrientedBox {
 public:
  OrientedBox() = default;

  // Throws DataError on non-finite values or a side <= 1e-9.
  OrientedBox(double cx, double cy, double w, double h, double theta)
      : cx_(cx), cy_(cy), w_(w), h_(h), theta_(normalize_angle(theta)) {
    if (!std::isfinite(cx) || !std::isfinite(cy) || !std::isfinite(w) ||
        !std::isfinite(h) || !std::isfinite(theta)) {
      throw DataError("oriented box has non-finite parameters");
    }
    if (w <= kMinSide || h <= kMinSide) {
      throw DataError("degenerate oriented box: w=" + std::to_string(w) +
                      " h=" + std::to_string(h));
    }
  }

  double cx() const { return cx_; }
  double cy() const { return cy_; }
  double w() const { return w_; }
  double h() const { return h_; }
  double theta() const { return theta_; }
  double area() const { return w_ * h_; }

  friend bool operator==(const OrientedBox&, const OrientedBox&) = default;

 private:
  double cx_ = 0.0;
  double cy_ = 0.0;
  double w_ = 1.0;
  double h_ = 1.0;
  double theta_ = 0.0;
};

struct HorizontalBox {
  double xmin = 0.0;
  double ymin = 0.0;
  double xmax = 0.0;
  double ymax = 0.0;

  HorizontalBox() = default;
  HorizontalBox(double x0, double y0, double x1, double y1)
      : xmin(x0), ymin(y0), xmax(x1), ymax(y1) {
    if (!(x0 <= x1) || !(y0 <= y1)) {
      throw DataError("horizontal box has min > max");
    }
  }

  double width() const { return xmax - xmin; }
  double height() const { return ymax - ymin; }
  double area() const { return width() * height(); }
  Point center() const { return {(xmin + xmax) / 2.0, (ymin + ymax) / 2.0}; }

  friend bool operator==(const HorizontalBox&, const HorizontalBox&) = default;
};

enum class Source { ModelPrediction, GroundTruth, PseudoLabel };

inline std::string_view to_string(Source s) {
  switch (s) {
    case Source::ModelPrediction: return "model-prediction";
    case Source::GroundTruth: return "ground-truth";
    case Source::PseudoLabel: return "pseudo-label";
  }
  return "unknown";
}

// Corners in counter-clockwise order (y axis up), starting at the local (+w/2, +h/2)
// corner rotated by theta.
inline std::array<Point, 4> obb_corners(const OrientedBox& b) {
  const double c = std::cos(b.theta());
  const double s = std::sin(b.theta());
  const double hw = b.w() / 2.0;
  const double hh = b.h() / 2.0;
  constexpr std::array<std::array<double, 2>, 4> local{{{1, 1}, {-1, 1}, {-1, -1}, {1, -1}}};
  std::array<Point, 4> out{};
  for (std::size_t k = 0; k < 4; ++k) {
    const double lx = local[k][0] * hw;
    const double ly = local[k][1] * hh;
    out[k] = {b.cx() + c * lx - s * ly, b.cy() + s * lx + c * ly};
  }
  return out;
}

inline HorizontalBox obb_to_hbb(const OrientedBox& b) {
  const auto pts = obb_corners(b);
  double x0 = pts[0].x, x1 = pts[0].x, y0 = pts[0].y, y1 = pts[0].y;
  for (const auto& p : pts) {
    x0 = std::min(x0, p.x);
    x1 = std::max(x1, p.x);
    y0 = std::min(y0, p.y);
    y1 = std::max(y1, p.y);
  }
  return {x0, y0, x1, y1};
}

// Point-in-rectangle test in the box's local frame; boundary counts as inside.
inline bool contains(const OrientedBox& b, Point p) {
  const double c = std::cos(b.theta());
  const double s = std::sin(b.theta());
  const double dx = p.x - b.cx();
  const double dy = p.y - b.cy();
  const double lx = c * dx + s * dy;
  const double ly = -s * dx + c * dy;
  return std::abs(lx) <= b.w() / 2.0 && std::abs(ly) <= b.h() / 2.0;
}

struct Detection {
  OrientedBox box;
  HorizontalBox hbox;
  CategoryId category = 0;
  double score = 1.0;
  Source source = Source::ModelPrediction;

  friend bool operator==(const Detection&, const Detection&) = default;
};

inline Detection make_detection(const OrientedBox& box, CategoryId category, double score,
                                Source source) {
  if (!(score >= 0.0 && score <= 1.0)) {
    throw DataError("detection score outside [0,1]: " + std::to_string(score));
  }
  return Detection{box, obb_to_hbb(box), category, score, source};
}

// Shoelace formula; positive for counter-clockwise polygons.
inline double polygon_signed_area(std::span<const Point> poly) {
  if (poly.size() < 3) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Point& a = poly[i];
    const Point& b = poly[(i + 1) % poly.size()];
    acc += a.x * b.y - b.x * a.y;
  }
  return acc / 2.0;
}

// Sutherland-Hodgman: clips `subject` against every edge of the convex CCW
// polygon `clip`.
inline std::vector<Point> clip_convex(std::span<const Point> subject, std::span<const Point> clip) {
  std::vector<Point> output(subject.begin(), subject.end());
  std::vector<Point> input;
  const auto side = [](Point a, Point b, Point p) {
    return (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
  };
  for (std::size_t e = 0; e < clip.size() && !output.empty(); ++e) {
    const Point a = clip[e];
    const Point b = clip[(e + 1) % clip.size()];
    input.swap(output);
    output.clear();
    for (std::size_t i = 0; i < input.size(); ++i) {
      const Point cur = input[i];
      const Point prev = input[(i + input.size() - 1) % input.size()];
      const double s_cur = side(a, b, cur);
      const double s_prev = side(a, b, prev);
      const bool in_cur = s_cur >= 0.0;
      const bool in_prev = s_prev >= 0.0;
      if (in_cur != in_prev) {
        const double t = s_prev / (s_prev - s_cur);
        output.push_back({prev.x + t * (cur.x - prev.x), prev.y + t * (cur.y - prev.y)});
      }
      if (in_cur) output.push_back(cur);
    }
  }
  return output;
}

inline double rotated_iou(const OrientedBox& a, const OrientedBox& b) {
  const double area_a = a.area();
  const double area_b = b.area();
  if (!(area_a > 0.0) || !(area_b > 0.0)) {
    throw DataError("rotated_iou on zero-area box");
  }
  const HorizontalBox ha = obb_to_hbb(a);
  const HorizontalBox hb = obb_to_hbb(b);
  if (ha.xmax <= hb.xmin || hb.xmax <= ha.xmin || ha.ymax <= hb.ymin || hb.ymax <= ha.ymin) {
    return 0.0;
  }
  // Clip in a fixed argument order so the result is bitwise symmetric.
  const auto key = [](const OrientedBox& o) {
    return std::array<double, 5>{o.cx(), o.cy(), o.w(), o.h(), o.theta()};
  };
  const bool swap = key(b) < key(a);
  const auto ca = obb_corners(swap ? b : a);
  const auto cb = obb_corners(swap ? a : b);
  const auto poly = clip_convex(ca, cb);
  const double inter = std::clamp(std::abs(polygon_signed_area(poly)), 0.0, std::min(area_a, area_b));
  const double uni = area_a + area_b - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

inline double hbb_iou(const HorizontalBox& a, const HorizontalBox& b) {
  if (!(a.area() > 0.0) || !(b.area() > 0.0)) {
    throw DataError("hbb_iou on zero-area box");
  }
  const double iw = std::min(a.xmax, b.xmax) - std::max(a.xmin, b.xmin);
  const double ih = std::min(a.ymax, b.ymax) - std::max(a.ymin, b.ymin);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

enum class IouMode { Obb, Hbb };

inline double detection_iou(const Detection& a, const Detection& b, IouMode mode) {
  return mode == IouMode::Obb ? rotated_iou(a.box, b.box) : hbb_iou(a.hbox, b.hbox);
}

// Total order used for suppression: score desc, category asc, input index asc.
inline std::vector<std::size_t> nms_order(std::span<const Detection> dets) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
    if (dets[i].score != dets[j].score) return dets[i].score > dets[j].score;
    if (dets[i].category != dets[j].category) return dets[i].category < dets[j].category;
    return i < j;
  });
  return order;
}

// Indices of kept detections, in descending-score (total) order. A candidate is
// suppressed when its IoU with an already kept box exceeds `iou_threshold`.
inline std::vector<std::size_t> nms_keep_indices(std::span<const Detection> dets,
                                                 double iou_threshold, IouMode mode) {
  const auto order = nms_order(dets);
  std::vector<std::size_t> keep;
  std::vector<HorizontalBox> kept_hbb;
  for (std::size_t idx : order) {
    const Detection& cand = dets[idx];
    const HorizontalBox hc = mode == IouMode::Obb ? obb_to_hbb(cand.box) : cand.hbox;
    bool suppressed = false;
    for (std::size_t k = 0; k < keep.size(); ++k) {
      const HorizontalBox& hk = kept_hbb[k];
      if (hk.xmax <= hc.xmin || hc.xmax <= hk.xmin || hk.ymax <= hc.ymin || hc.ymax <= hk.ymin) {
        continue;
      }
      if (detection_iou(dets[keep[k]], cand, mode) > iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) {
      keep.push_back(idx);
      kept_hbb.push_back(hc);
    }
  }
  return keep;
}

inline std::vector<Detection> class_agnostic_nms(std::span<const Detection> dets,
                                                 double iou_threshold,
                                                 IouMode mode = IouMode::Obb) {
  for (const auto& d : dets) {
    if (!(d.score >= 0.0 && d.score <= 1.0)) throw DataError("NMS input score outside [0,1]");
  }
  std::vector<Detection> out;
  for (std::size_t idx : nms_keep_indices(dets, iou_threshold, mode)) out.push_back(dets[idx]);
  return out;
}

// Scales `b` about its center by `factor` and clamps to the image. Used to cut
// image-prompt crops with surrounding context.
inline HorizontalBox prompt_crop_window(const HorizontalBox& b, double factor, int img_w,
                                        int img_h) {
  if (!(factor > 0.0)) throw DataError("crop factor must be positive");
  const Point c = b.center();
  const double hw = b.width() * factor / 2.0;
  const double hh = b.height() * factor / 2.0;
  return {std::clamp(c.x - hw, 0.0, static_cast<double>(img_w)),
          std::clamp(c.y - hh, 0.0, static_cast<double>(img_h)),
          std::clamp(c.x + hw, 0.0, static_cast<double>(img_w)),
          std::clamp(c.y + hh, 0.0, static_cast<double>(img_h))};
}

}  // namespace geom
}  // namespace orsd
