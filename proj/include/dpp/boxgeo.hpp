// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <vector>

#include "dpp/autodiff.hpp"
#include "dpp/errors.hpp"

namespace dpp {

/// Axis-aligned box in normalized image coordinates.
struct Box {
  double x_min = 0.0;
  double y_min = 0.0;
  double x_max = 0.0;
  double y_max = 0.0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }

  bool valid() const {
    return std::isfinite(x_min) && std::isfinite(y_min) && std::isfinite(x_max) && std::isfinite(y_max) &&
           x_min <= x_max && y_min <= y_max;
  }
  bool inside_unit() const { return x_min >= 0.0 && y_min >= 0.0 && x_max <= 1.0 && y_max <= 1.0; }

  static Box from_cxcywh(double cx, double cy, double w, double h) {
    return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
  }
  /// Same box clipped to the unit square.
  Box clipped() const {
    auto c = [](double v) { return std::clamp(v, 0.0, 1.0); };
    return {c(x_min), c(y_min), c(x_max), c(y_max)};
  }

  friend bool operator==(const Box&, const Box&) = default;
};

struct GroundTruth {
  Box box;
  int label = 0;
};

struct Detection {
  Box box;
  int label = 0;
  double score = 0.0;
};

inline double intersection_area(const Box& a, const Box& b) {
  const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  return (iw > 0.0 && ih > 0.0) ? iw * ih : 0.0;
}

/// Intersection over union; 0 when the union is empty.
inline double iou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

/// Generalized IoU: IoU − (hull − union) / hull.
inline double giou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  const Box hull{std::min(a.x_min, b.x_min), std::min(a.y_min, b.y_min), std::max(a.x_max, b.x_max),
                 std::max(a.y_max, b.y_max)};
  const double h = hull.area();
  if (h <= 0.0) return uni > 0.0 ? inter / uni : 1.0;  // both degenerate at one point
  const double i = uni > 0.0 ? inter / uni : 0.0;
  return i - (h - uni) / h;
}

// ---------------------------------------------------------------------------
// Bipartite matching

struct MatchResult {
  std::vector<std::pair<int, int>> pairs;  // (row, column), sorted by row
  std::vector<int> unmatched_rows;
  std::vector<int> unmatched_cols;
  double total_cost = 0.0;
};

/// Minimum-cost assignment of min(rows, cols) pairs for a rows×cols cost
/// matrix (Kuhn-Munkres with potentials, O(n²m)).
inline MatchResult hungarian(const Tensor& cost) {
  MatchResult result;
  if (cost.numel() == 0) return result;
  if (cost.rank() != 2) throw DimensionError("hungarian: cost must be a matrix");
  for (double v : cost.data)
    if (!std::isfinite(v)) throw DomainError("hungarian: non-finite cost");
  const std::size_t rows = cost.shape[0], cols = cost.shape[1];
  const bool flip = rows > cols;
  const std::size_t n = flip ? cols : rows;  // n <= m
  const std::size_t m = flip ? rows : cols;
  auto c = [&](std::size_t i, std::size_t j) { return flip ? cost.at(j, i) : cost.at(i, j); };

  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = c(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  std::vector<char> row_used(rows, 0), col_used(cols, 0);
  for (std::size_t j = 1; j <= m; ++j) {
    if (p[j] == 0) continue;
    const int r = static_cast<int>(flip ? j - 1 : p[j] - 1);
    const int col = static_cast<int>(flip ? p[j] - 1 : j - 1);
    result.pairs.emplace_back(r, col);
    row_used[r] = col_used[col] = 1;
    result.total_cost += cost.at(r, col);
  }
  std::sort(result.pairs.begin(), result.pairs.end());
  for (std::size_t i = 0; i < rows; ++i)
    if (!row_used[i]) result.unmatched_rows.push_back(static_cast<int>(i));
  for (std::size_t j = 0; j < cols; ++j)
    if (!col_used[j]) result.unmatched_cols.push_back(static_cast<int>(j));
  return result;
}

// ---------------------------------------------------------------------------
// Average precision (COCO-style: per-class greedy matching, 101-point
// interpolated precision, mean over classes that have ground truth).

inline std::vector<double> coco_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

struct ApResult {
  std::vector<double> thresholds;
  std::vector<double> ap;  // per threshold, averaged over classes
  double mean = 0.0;

  double at(double threshold) const {
    for (std::size_t i = 0; i < thresholds.size(); ++i)
      if (std::fabs(thresholds[i] - threshold) < 1e-9) return ap[i];
    throw DimensionError("ApResult: threshold not evaluated");
  }
};

/// Area under the 101-point interpolated precision-recall curve for one
/// ranked list of true/false positives against `num_truths` ground truths.
inline double interpolated_ap(std::span<const char> is_tp, std::size_t num_truths) {
  if (num_truths == 0) return 0.0;
  std::vector<double> precision, recall;
  double tp = 0.0, fp = 0.0;
  for (char hit : is_tp) {
    (hit ? tp : fp) += 1.0;
    precision.push_back(tp / (tp + fp));
    recall.push_back(tp / static_cast<double>(num_truths));
  }
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double total = 0.0;
  std::size_t k = 0;
  for (int r = 0; r <= 100; ++r) {
    const double level = r / 100.0;
    while (k < recall.size() && recall[k] < level - 1e-12) ++k;
    if (k < recall.size()) total += precision[k];
  }
  return total / 101.0;
}

/// Accumulates detections over many images, then scores them.
class ApAccumulator {
 public:
  void add_image(std::span<const Detection> detections, std::span<const GroundTruth> truths) {
    images_.push_back({std::vector<Detection>(detections.begin(), detections.end()),
                       std::vector<GroundTruth>(truths.begin(), truths.end())});
  }

  std::size_t image_count() const { return images_.size(); }

  ApResult compute(std::span<const double> thresholds) const {
    ApResult out;
    out.thresholds.assign(thresholds.begin(), thresholds.end());
    std::map<int, std::size_t> truth_count;
    for (const auto& img : images_)
      for (const auto& t : img.truths) ++truth_count[t.label];

    for (double thr : thresholds) {
      double class_sum = 0.0;
      for (const auto& [label, count] : truth_count) class_sum += class_ap(label, count, thr);
      out.ap.push_back(truth_count.empty() ? 0.0 : class_sum / static_cast<double>(truth_count.size()));
    }
    out.mean = out.ap.empty() ? 0.0 : std::accumulate(out.ap.begin(), out.ap.end(), 0.0) / out.ap.size();
    return out;
  }

  ApResult compute() const {
    const auto t = coco_iou_thresholds();
    return compute(t);
  }

 private:
  struct Image {
    std::vector<Detection> detections;
    std::vector<GroundTruth> truths;
  };

  struct Ranked {
    double score;
    std::size_t image;
    std::size_t index;
    char tp;
  };

  double class_ap(int label, std::size_t num_truths, double thr) const {
    std::vector<Ranked> ranked;
    for (std::size_t im = 0; im < images_.size(); ++im) {
      const Image& img = images_[im];
      std::vector<std::size_t> order;
      for (std::size_t i = 0; i < img.detections.size(); ++i)
        if (img.detections[i].label == label) order.push_back(i);
      // Matching order only depends on scores, never on list position.
      std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return detection_before(img.detections[a], img.detections[b]);
      });
      std::vector<char> taken(img.truths.size(), 0);
      for (std::size_t i : order) {
        const Detection& d = img.detections[i];
        double best = thr;
        int match = -1;
        for (std::size_t g = 0; g < img.truths.size(); ++g) {
          if (taken[g] || img.truths[g].label != label) continue;
          const double o = iou(d.box, img.truths[g].box);
          if (o >= best) {
            best = o;
            match = static_cast<int>(g);
          }
        }
        if (match >= 0) taken[match] = 1;
        ranked.push_back({d.score, im, i, static_cast<char>(match >= 0)});
      }
    }
    std::stable_sort(ranked.begin(), ranked.end(), [&](const Ranked& a, const Ranked& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.image != b.image) return a.image < b.image;
      return detection_before(images_[a.image].detections[a.index], images_[b.image].detections[b.index]);
    });
    std::vector<char> hits;
    hits.reserve(ranked.size());
    for (const auto& r : ranked) hits.push_back(r.tp);
    return interpolated_ap(hits, num_truths);
  }

  // Total order on detections that ignores their position in the input list.
  static bool detection_before(const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.box.x_min != b.box.x_min) return a.box.x_min < b.box.x_min;
    if (a.box.y_min != b.box.y_min) return a.box.y_min < b.box.y_min;
    if (a.box.x_max != b.box.x_max) return a.box.x_max < b.box.x_max;
    return a.box.y_max < b.box.y_max;
  }

  std::vector<Image> images_;
};

/// Single-image AP over the given IoU thresholds (COCO thresholds by default).
inline ApResult average_precision(std::span<const Detection> predictions, std::span<const GroundTruth> truths,
                                  std::span<const double> thresholds) {
  for (const auto& p : predictions)
    if (p.score < 0.0 || p.score > 1.0) throw DomainError("average_precision: score outside [0,1]");
  ApAccumulator acc;
  acc.add_image(predictions, truths);
  return acc.compute(thresholds);
}

inline ApResult average_precision(std::span<const Detection> predictions, std::span<const GroundTruth> truths) {
  const auto t = coco_iou_thresholds();
  return average_precision(predictions, truths, t);
}

}  // namespace dpp
