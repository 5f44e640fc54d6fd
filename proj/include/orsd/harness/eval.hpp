#pragma once

#include <algorithm>
#include <map>
#include <span>
#include <vector>

#include "orsd/error.hpp"
#include "orsd/geom.hpp"

namespace orsd::harness {

struct ApResult {
  std::map<CategoryId, double> per_class;  // classes with at least one GT
  double mean = 0.0;
};

// Area under the precision envelope: sum over recall steps of the maximum
// precision at or beyond that recall.
inline double all_point_ap(const std::vector<double>& recall, const std::vector<double>& precision) {
  std::vector<double> mrec{0.0};
  std::vector<double> mpre{0.0};
  mrec.insert(mrec.end(), recall.begin(), recall.end());
  mpre.insert(mpre.end(), precision.begin(), precision.end());
  mrec.push_back(1.0);
  mpre.push_back(0.0);
  for (std::size_t i = mpre.size() - 1; i-- > 0;) mpre[i] = std::max(mpre[i], mpre[i + 1]);
  double ap = 0.0;
  for (std::size_t i = 1; i < mrec.size(); ++i) ap += (mrec[i] - mrec[i - 1]) * mpre[i];
  return ap;
}

// Per-class AP at IoU `iou_thr`. Predictions of a class are ranked by score
// (ties keep image order, then input order); each is a true positive iff its
// best IoU against the still unmatched GTs of its class in its image reaches
// the threshold, and that GT becomes matched. The mean is over classes with
// GT; predictions of classes without GT are ignored.
inline ApResult ap50(std::span<const std::vector<geom::Detection>> predictions,
                     std::span<const std::vector<geom::Detection>> ground_truth,
                     geom::IouMode mode = geom::IouMode::Obb, double iou_thr = 0.5) {
  if (predictions.size() != ground_truth.size()) throw DataError("ap50: prediction/GT image count mismatch");
  std::map<CategoryId, std::size_t> n_gt;
  for (const auto& img : ground_truth)
    for (const auto& g : img) ++n_gt[g.category];

  ApResult res;
  for (const auto& [cls, total] : n_gt) {
    struct Ranked {
      double score;
      std::size_t image;
      std::size_t index;
    };
    std::vector<Ranked> ranked;
    for (std::size_t im = 0; im < predictions.size(); ++im)
      for (std::size_t k = 0; k < predictions[im].size(); ++k)
        if (predictions[im][k].category == cls) ranked.push_back({predictions[im][k].score, im, k});
    std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) { return a.score > b.score; });

    std::vector<std::vector<bool>> matched(ground_truth.size());
    for (std::size_t im = 0; im < ground_truth.size(); ++im) matched[im].assign(ground_truth[im].size(), false);
    std::vector<double> recall, precision;
    std::size_t tp = 0;
    for (std::size_t r = 0; r < ranked.size(); ++r) {
      const auto& d = predictions[ranked[r].image][ranked[r].index];
      const auto& gts = ground_truth[ranked[r].image];
      double best = -1.0;
      std::size_t best_g = 0;
      for (std::size_t g = 0; g < gts.size(); ++g) {
        if (gts[g].category != cls || matched[ranked[r].image][g]) continue;
        const double iou = geom::detection_iou(d, gts[g], mode);
        if (iou > best) {
          best = iou;
          best_g = g;
        }
      }
      if (best >= iou_thr) {
        matched[ranked[r].image][best_g] = true;
        ++tp;
      }
      recall.push_back(static_cast<double>(tp) / static_cast<double>(total));
      precision.push_back(static_cast<double>(tp) / static_cast<double>(r + 1));
    }
    res.per_class[cls] = ranked.empty() ? 0.0 : all_point_ap(recall, precision);
  }
  if (!res.per_class.empty()) {
    double s = 0.0;
    for (const auto& [c, ap] : res.per_class) s += ap;
    res.mean = s / static_cast<double>(res.per_class.size());
  }
  return res;
}

}  // namespace orsd::harness
