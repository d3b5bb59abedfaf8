// Detection targets and metrics: normalized boxes, minimum-cost bipartite
// matching between predictions and ground truth, the Hungarian-matched
// classification + L1 box loss, and average precision at a fixed IoU.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "mgvit/common.hpp"
#include "mgvit/tensor.hpp"

namespace mgvit::det {

// Normalized (cx, cy, w, h), all in [0, 1].
struct Box {
  double cx = 0.0, cy = 0.0, w = 0.0, h = 0.0;
};

inline double box_l1(const Box& a, const Box& b) {
  return std::fabs(a.cx - b.cx) + std::fabs(a.cy - b.cy) + std::fabs(a.w - b.w) +
         std::fabs(a.h - b.h);
}

inline double iou(const Box& a, const Box& b) {
  const double ax0 = a.cx - a.w / 2, ax1 = a.cx + a.w / 2;
  const double ay0 = a.cy - a.h / 2, ay1 = a.cy + a.h / 2;
  const double bx0 = b.cx - b.w / 2, bx1 = b.cx + b.w / 2;
  const double by0 = b.cy - b.h / 2, by1 = b.cy + b.h / 2;
  const double ix = std::max(0.0, std::min(ax1, bx1) - std::max(ax0, bx0));
  const double iy = std::max(0.0, std::min(ay1, by1) - std::max(ay0, by0));
  const double inter = ix * iy;
  const double uni = a.w * a.h + b.w * b.h - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

struct DetectionLossConfig {
  double class_weight = 1.0;
  double box_l1_weight = 5.0;
  double no_object_weight = 0.1;

  void validate() const {
    if (class_weight < 0.0 || box_l1_weight < 0.0 || no_object_weight < 0.0 ||
        (class_weight == 0.0 && box_l1_weight == 0.0 && no_object_weight == 0.0)) {
      throw InputError("detection loss weights must be >= 0 and not all zero");
    }
  }
};

// Minimum-cost assignment of rows to distinct columns (rows <= cols),
// shortest-augmenting-path Hungarian with potentials. Returns, per column,
// the assigned row or -1.
inline std::vector<int> min_cost_assignment(const std::vector<std::vector<double>>& cost) {
  const std::size_t n = cost.size();
  if (n == 0) return {};
  const std::size_t m = cost[0].size();
  if (m < n) throw InputError("assignment needs at least as many columns as rows");

  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> match(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    match[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, kInf);
    std::vector<bool> used(m + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = match[j0];
      std::size_t j1 = 0;
      double delta = kInf;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
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
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> out(m, -1);
  for (std::size_t j = 1; j <= m; ++j) {
    if (match[j] != 0) out[j - 1] = static_cast<int>(match[j] - 1);
  }
  return out;
}

// Pairs each ground truth with a distinct prediction by minimum total cost
// (negative class probability plus weighted box L1); leftover predictions map
// to no-object (-1). pred_probs is num_pred x (num_classes + 1), row-major.
inline std::vector<int> hungarian_match(const std::vector<Box>& pred_boxes,
                                        const std::vector<double>& pred_probs,
                                        std::size_t num_classes_with_null,
                                        const std::vector<Box>& gt_boxes,
                                        const std::vector<int>& gt_labels,
                                        const DetectionLossConfig& cfg) {
  cfg.validate();
  const std::size_t np = pred_boxes.size(), ng = gt_boxes.size();
  if (gt_labels.size() != ng) throw InputError("gt label/box count mismatch");
  if (ng > np) {
    throw InputError("more ground truths (" + std::to_string(ng) + ") than predictions (" +
                     std::to_string(np) + ")");
  }
  if (pred_probs.size() != np * num_classes_with_null) throw ShapeError("pred_probs size mismatch");
  if (ng == 0) return std::vector<int>(np, -1);
  std::vector<std::vector<double>> cost(ng, std::vector<double>(np));
  for (std::size_t i = 0; i < ng; ++i) {
    const auto label = static_cast<std::size_t>(gt_labels[i]);
    if (gt_labels[i] < 0 || label + 1 >= num_classes_with_null) {
      throw InputError("gt label " + std::to_string(gt_labels[i]) + " out of range");
    }
    for (std::size_t j = 0; j < np; ++j) {
      cost[i][j] = -pred_probs[j * num_classes_with_null + label] +
                   cfg.box_l1_weight * box_l1(pred_boxes[j], gt_boxes[i]);
    }
  }
  return min_cost_assignment(cost);
}

struct GroundTruth {
  std::vector<Box> boxes;
  std::vector<int> labels;
};

// Hungarian-matched loss on the tape: cross-entropy over matched classes with
// down-weighted no-object terms, plus L1 on matched boxes. The matching itself
// is computed from values and carries no gradient.
inline Tensor detection_loss(const Tensor& class_logits, const Tensor& boxes,
                             const GroundTruth& gt, const DetectionLossConfig& cfg,
                             std::vector<int>* assignment_out = nullptr) {
  const std::size_t np = class_logits.rows();
  const std::size_t nc1 = class_logits.cols();  // classes + no-object
  if (boxes.rows() != np || boxes.cols() != 4) throw ShapeError("boxes must be num_pred x 4");

  std::vector<double> probs(np * nc1);
  {
    NoGrad eval;
    const Tensor p = softmax(class_logits, 1);
    probs = p.data();
  }
  std::vector<Box> pred_boxes(np);
  for (std::size_t j = 0; j < np; ++j) {
    pred_boxes[j] = Box{boxes(j, 0), boxes(j, 1), boxes(j, 2), boxes(j, 3)};
  }
  const std::vector<int> assign =
      hungarian_match(pred_boxes, probs, nc1, gt.boxes, gt.labels, cfg);
  if (assignment_out) *assignment_out = assign;

  const int no_object = static_cast<int>(nc1) - 1;
  Tensor class_term = Tensor::scalar(0.0);
  Tensor box_term = Tensor::scalar(0.0);
  for (std::size_t j = 0; j < np; ++j) {
    const Tensor row = slice_rows(class_logits, j, j + 1);
    if (assign[j] >= 0) {
      const auto gi = static_cast<std::size_t>(assign[j]);
      class_term = add(class_term, cross_entropy(row, {gt.labels[gi]}));
      const Tensor pb = slice_rows(boxes, j, j + 1);
      const Tensor tb = Tensor::row(
          {gt.boxes[gi].cx, gt.boxes[gi].cy, gt.boxes[gi].w, gt.boxes[gi].h});
      box_term = add(box_term, sum(abs_elem(sub(pb, tb))));
    } else {
      class_term = add(class_term, scale(cross_entropy(row, {no_object}), cfg.no_object_weight));
    }
  }
  const double inv_np = 1.0 / static_cast<double>(np);
  const double inv_ng = 1.0 / static_cast<double>(std::max<std::size_t>(1, gt.boxes.size()));
  return add(scale(class_term, cfg.class_weight * inv_np),
             scale(box_term, cfg.box_l1_weight * inv_ng));
}

// ---------------------------------------------------------------------------
// Average precision at one IoU threshold, all-points interpolation.
// Predictions are ranked by confidence; each ground-truth box is credited at
// most once, greedily to the highest-IoU prediction examined first.
// ---------------------------------------------------------------------------

struct ScoredDetection {
  std::size_t image = 0;
  double score = 0.0;
  Box box;
};

inline double average_precision(std::vector<ScoredDetection> dets,
                                const std::vector<std::vector<Box>>& gts_per_image,
                                double iou_threshold = 0.5) {
  std::size_t total_gt = 0;
  for (const auto& g : gts_per_image) total_gt += g.size();
  if (total_gt == 0) return 0.0;
  std::stable_sort(dets.begin(), dets.end(), [](const ScoredDetection& a, const ScoredDetection& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.image < b.image;
  });
  std::vector<std::vector<bool>> taken(gts_per_image.size());
  for (std::size_t i = 0; i < gts_per_image.size(); ++i) taken[i].assign(gts_per_image[i].size(), false);

  std::vector<double> precision, recall;
  std::size_t tp = 0, fp = 0;
  for (const ScoredDetection& d : dets) {
    if (d.image >= gts_per_image.size()) throw InputError("detection image index out of range");
    const auto& gts = gts_per_image[d.image];
    double best_iou = 0.0;
    std::size_t best = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[d.image][g]) continue;
      const double v = iou(d.box, gts[g]);
      if (v > best_iou) {
        best_iou = v;
        best = g;
      }
    }
    if (best != gts.size() && best_iou >= iou_threshold) {
      taken[d.image][best] = true;
      ++tp;
    } else {
      ++fp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(total_gt));
  }

  double ap = 0.0, prev_recall = 0.0, env = 0.0;
  std::vector<double> envelope(precision.size());
  for (std::size_t i = precision.size(); i-- > 0;) {
    env = std::max(env, precision[i]);
    envelope[i] = env;
  }
  for (std::size_t i = 0; i < precision.size(); ++i) {
    ap += (recall[i] - prev_recall) * envelope[i];
    prev_recall = recall[i];
  }
  return ap;
}

}  // namespace mgvit::det
