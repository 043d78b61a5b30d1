// SPDX-License-Identifier: Apache-2.0
#pragma once

// K-stage detection head with dynamic operator routing, plus the training
// losses: IoU-matching loss, complexity loss, their weighted sum, and the
// set-prediction detection loss with deep supervision.

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dpp/autodiff.hpp"
#include "dpp/boxgeo.hpp"
#include "dpp/errors.hpp"
#include "dpp/operators.hpp"
#include "dpp/rng.hpp"
#include "dpp/selector.hpp"

namespace dpp {

/// Which ground truth defines a proposal's routing IoU target.
enum class IouTarget {
  MaxOverTruths,  // max IoU over all ground-truth boxes
  Matched,        // IoU with the Hungarian-matched ground truth (0 if unmatched)
};

struct HeadConfig {
  ModelDims dims;
  int num_stages = 6;
  std::vector<int> selector_stages{2, 4, 6};  // 1-based
  int num_proposals = 24;
  double lambda = 10.0;
  double alpha = 2.0;
  double tmin_last = 1.0;
  double tau = 1.0;
  bool use_iou_loss = true;
  bool use_complexity_loss = true;
  IouTarget iou_target = IouTarget::MaxOverTruths;

  void validate() const {
    dims.validate();
    if (num_stages < 1) throw ConfigError("num_stages must be >= 1");
    if (num_proposals < 1) throw ConfigError("num_proposals must be >= 1");
    for (std::size_t i = 0; i < selector_stages.size(); ++i) {
      const int s = selector_stages[i];
      if (s < 1 || s > num_stages) throw ConfigError("selector stage " + std::to_string(s) + " outside 1..K");
      if (i > 0 && s <= selector_stages[i - 1]) throw ConfigError("selector stages must be strictly increasing");
    }
    if (!(tau > 0.0)) throw ConfigError("tau must be positive");
    if (!(alpha > 0.0)) throw ConfigError("alpha must be positive");
    if (!(tmin_last > 0.0) || tmin_last > num_proposals) throw ConfigError("tmin_last must lie in (0, N]");
    if (lambda < 0.0) throw ConfigError("lambda must be non-negative");
  }

  /// Index into selector_stages for a 1-based stage, or -1.
  int selector_index(int stage) const {
    for (std::size_t i = 0; i < selector_stages.size(); ++i)
      if (selector_stages[i] == stage) return static_cast<int>(i);
    return -1;
  }
};

/// Operator choice at each selector stage: ops[selector][proposal].
struct Assignment {
  std::vector<std::vector<OperatorKind>> ops;

  std::size_t selectors() const { return ops.size(); }
  std::size_t proposals() const { return ops.empty() ? 0 : ops[0].size(); }
};

/// Expands an assignment to every stage: stages before the first selector
/// run G0, other non-selector stages inherit their predecessor's operator.
inline std::vector<std::vector<OperatorKind>> stage_operators(const Assignment& a, const HeadConfig& cfg,
                                                              std::size_t n) {
  if (a.selectors() != cfg.selector_stages.size()) throw DimensionError("assignment selector count mismatch");
  for (const auto& row : a.ops)
    if (row.size() != n) throw DimensionError("assignment proposal count mismatch");
  std::vector<std::vector<OperatorKind>> out;
  std::vector<OperatorKind> current(n, OperatorKind::G0);
  for (int stage = 1; stage <= cfg.num_stages; ++stage) {
    const int s = cfg.selector_index(stage);
    if (s >= 0) current = a.ops[s];
    out.push_back(current);
  }
  return out;
}

struct ProposalBatch {
  std::vector<Box> boxes;  // initial proposal boxes, inside the unit square
  Tensor embeddings;       // [N×d]

  std::size_t size() const { return boxes.size(); }
};

/// Inverse-sigmoid (cx, cy, w, h) of a box, clamped away from 0 and 1.
inline std::array<double, 4> box_to_logits(const Box& b) {
  auto lg = [](double v) {
    v = std::clamp(v, 1e-4, 1.0 - 1e-4);
    return std::log(v / (1.0 - v));
  };
  return {lg(0.5 * (b.x_min + b.x_max)), lg(0.5 * (b.y_min + b.y_max)), lg(b.width()), lg(b.height())};
}

inline Box box_from_row(const Tensor& cxcywh, std::size_t row) {
  return Box::from_cxcywh(cxcywh.at(row, 0), cxcywh.at(row, 1), cxcywh.at(row, 2), cxcywh.at(row, 3));
}

struct HeadParams {
  std::vector<OperatorParams> stages;
  std::vector<SelectorParams> selectors;

  HeadParams() = default;
  HeadParams(const HeadConfig& cfg, Rng& rng) {
    cfg.validate();
    for (int k = 0; k < cfg.num_stages; ++k) stages.emplace_back(cfg.dims, rng);
  }

  /// Adds one freshly initialized selector per selector stage.
  void add_selectors(const HeadConfig& cfg, Rng& rng) {
    selectors.clear();
    for (std::size_t i = 0; i < cfg.selector_stages.size(); ++i) selectors.emplace_back(cfg.dims, rng);
  }

  template <class F>
  void for_each(F&& f) {
    for (std::size_t k = 0; k < stages.size(); ++k) stages[k].for_each("stage" + std::to_string(k + 1) + ".", f);
    for (std::size_t s = 0; s < selectors.size(); ++s)
      selectors[s].for_each("selector" + std::to_string(s + 1) + ".", f);
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for_each([&](const std::string&, Parameter& p) { out.push_back(&p); });
    return out;
  }

  std::vector<Parameter*> selector_parameters() {
    std::vector<Parameter*> out;
    for (std::size_t s = 0; s < selectors.size(); ++s)
      selectors[s].for_each("", [&](const std::string&, Parameter& p) { out.push_back(&p); });
    return out;
  }
};

struct ForwardOptions {
  SelectMode mode = SelectMode::Inference;
  Rng* rng = nullptr;                    // required by training modes
  double noise_scale = 1.0;              // multiplies the Gumbel noise in training modes
  std::span<const GroundTruth> truths;   // when set, routing IoU targets are recorded
  const Assignment* forced = nullptr;    // overrides selector decisions (selectors still run)
};

struct StagePrediction {
  Var class_logits;  // [N×(C+1)]
  Var box_logits;    // [N×4]
  Var boxes;         // [N×4] cx, cy, w, h in (0, 1)
  std::vector<OperatorKind> ops;

  Box box(std::size_t i) const { return box_from_row(boxes.value(), i).clipped(); }
};

struct SelectorTrace {
  int stage = 0;
  Var eps;  // [N×3]
  std::vector<OperatorKind> chosen;
  std::vector<Box> input_boxes;
  std::vector<double> iou_targets;  // u_i at the stage input; empty without truths
};

struct HeadTrace {
  std::vector<StagePrediction> stages;
  std::vector<SelectorTrace> selectors;
  std::uint64_t flops = 0;  // FLOPs counted while running the head

  std::size_t proposals() const { return stages.empty() ? 0 : stages[0].ops.size(); }
};

struct DetectionLossWeights {
  double ce = 2.0;
  double l1 = 5.0;
  double giou = 2.0;
  double no_object = 0.1;  // CE weight of unmatched predictions
};

/// Matching cost between predictions (class probabilities, cx/cy/w/h boxes)
/// and ground truth: w_ce·(1 − p[label]) + w_l1·L1 + w_giou·(1 − GIoU).
inline Tensor matching_cost(const Tensor& probs, const Tensor& boxes, std::span<const GroundTruth> truths,
                            const DetectionLossWeights& w = {}) {
  const std::size_t n = boxes.rows(), m = truths.size();
  Tensor cost({n, std::max<std::size_t>(m, 1)}, 0.0);
  if (m == 0) return cost;
  for (std::size_t i = 0; i < n; ++i) {
    const Box pb = box_from_row(boxes, i);
    for (std::size_t j = 0; j < m; ++j) {
      const Box& g = truths[j].box;
      const double l1 = std::fabs(boxes.at(i, 0) - 0.5 * (g.x_min + g.x_max)) +
                        std::fabs(boxes.at(i, 1) - 0.5 * (g.y_min + g.y_max)) +
                        std::fabs(boxes.at(i, 2) - g.width()) + std::fabs(boxes.at(i, 3) - g.height());
      cost.at(i, j) = w.ce * (1.0 - probs.at(i, truths[j].label)) + w.l1 * l1 + w.giou * (1.0 - giou(pb, g));
    }
  }
  return cost;
}

inline Tensor softmax_rows(const Tensor& logits) {
  Tape t(false);
  return softmax(t.constant(logits), 1.0).value();
}

/// Hungarian assignment of predictions to ground truth; returns, for each
/// prediction row, the matched truth index or -1.
inline std::vector<int> match_predictions(const Tensor& class_logits, const Tensor& boxes,
                                          std::span<const GroundTruth> truths, const DetectionLossWeights& w = {}) {
  std::vector<int> match(boxes.rows(), -1);
  if (truths.empty()) return match;
  const MatchResult r = hungarian(matching_cost(softmax_rows(class_logits), boxes, truths, w));
  for (auto [row, col] : r.pairs) match[row] = col;
  return match;
}

namespace detail {

inline std::vector<double> iou_targets(const std::vector<Box>& boxes, const Tensor& prev_logits,
                                       const Tensor& prev_boxes, std::span<const GroundTruth> truths,
                                       IouTarget mode) {
  std::vector<double> u(boxes.size(), 0.0);
  if (mode == IouTarget::MaxOverTruths) {
    for (std::size_t i = 0; i < boxes.size(); ++i)
      for (const auto& g : truths) u[i] = std::max(u[i], iou(boxes[i], g.box));
  } else {
    const auto match = match_predictions(prev_logits, prev_boxes, truths);
    for (std::size_t i = 0; i < boxes.size(); ++i)
      if (match[i] >= 0) u[i] = iou(boxes[i], truths[match[i]].box);
  }
  return u;
}

}  // namespace detail

/// Runs every stage: self-attention across proposals, selection at selector
/// stages (stage 1 forces G0 unless it has a selector), the chosen operator,
/// and prediction heads for G0/G1. G2 rows carry their predictions forward
/// unchanged.
inline HeadTrace forward(Tape& t, const ProposalBatch& batch, const HeadParams& params, const HeadConfig& cfg,
                         const ForwardOptions& opt = {}) {
  const std::size_t n = batch.size();
  const ModelDims& dims = cfg.dims;
  if (n == 0) throw DimensionError("forward: empty proposal batch");
  if (batch.embeddings.rows() != n || batch.embeddings.cols() != dims.d)
    throw DimensionError("forward: embeddings " + shape_str(batch.embeddings.shape) + " do not match batch");
  if (params.stages.size() != static_cast<std::size_t>(cfg.num_stages))
    throw DimensionError("forward: parameter stage count != K");
  if (params.selectors.size() < cfg.selector_stages.size())
    throw DimensionError("forward: missing selector parameters");
  if (opt.forced && opt.forced->selectors() != cfg.selector_stages.size())
    throw DimensionError("forward: forced assignment selector count mismatch");

  const std::uint64_t flops_before = t.flops();
  HeadTrace trace;

  Tensor logit_init({n, 4});
  Tensor box_init({n, 4});
  for (std::size_t i = 0; i < n; ++i) {
    const auto l = box_to_logits(batch.boxes[i]);
    for (int c = 0; c < 4; ++c) {
      logit_init.at(i, c) = l[c];
      box_init.at(i, c) = 1.0 / (1.0 + std::exp(-l[c]));
    }
  }
  if (!batch.embeddings.all_finite()) throw DivergenceError("training diverged at stage 1: non-finite embedding", 1);
  Var z = t.constant(batch.embeddings);
  Var cls = t.constant(Tensor({n, dims.logits()}, 0.0));
  Var box_logits = t.constant(std::move(logit_init));
  Var boxes = t.constant(std::move(box_init));
  std::vector<OperatorKind> ops(n, OperatorKind::G0);

  for (int stage = 1; stage <= cfg.num_stages; ++stage) {
    const OperatorParams& sp = params.stages[stage - 1];
    try {
      Var att = pairwise_attend(t, z, sp.attention).out;

      const int sel = cfg.selector_index(stage);
      if (sel >= 0) {
        RouteResult route = route_batch(t, att, params.selectors[sel], opt.mode, cfg.tau, opt.rng, opt.noise_scale);
        ops = opt.forced ? opt.forced->ops[sel] : route.chosen;
        if (ops.size() != n) throw DimensionError("forward: forced assignment proposal count mismatch");
        SelectorTrace st;
        st.stage = stage;
        st.eps = route.eps;
        st.chosen = ops;
        for (std::size_t i = 0; i < n; ++i) st.input_boxes.push_back(box_from_row(boxes.value(), i).clipped());
        if (!opt.truths.empty() || opt.mode != SelectMode::Inference)
          st.iou_targets = detail::iou_targets(st.input_boxes, cls.value(), boxes.value(), opt.truths, cfg.iou_target);
        trace.selectors.push_back(std::move(st));
      } else if (stage == 1) {
        std::fill(ops.begin(), ops.end(), OperatorKind::G0);
      }

      std::array<std::vector<int>, 3> groups;
      for (std::size_t i = 0; i < n; ++i) groups[index_of(ops[i])].push_back(static_cast<int>(i));

      std::vector<Var> z_parts, cls_parts, bl_parts, box_parts;
      std::vector<std::vector<int>> index;
      for (OperatorKind k : kOperators) {
        const auto& idx = groups[index_of(k)];
        if (idx.empty()) continue;
        const bool whole = idx.size() == n;
        auto rows = [&](Var v) { return whole ? v : gather_rows(v, idx); };
        Var zin = rows(att);
        Var zout = apply_operator(t, k, zin, sp, dims);
        z_parts.push_back(zout);
        if (k == OperatorKind::G2) {
          cls_parts.push_back(rows(cls));
          bl_parts.push_back(rows(box_logits));
          box_parts.push_back(rows(boxes));
        } else {
          Refinement r = predict(t, zout, rows(box_logits), sp.heads);
          cls_parts.push_back(r.class_logits);
          bl_parts.push_back(r.box_logits);
          box_parts.push_back(r.boxes);
        }
        index.push_back(idx);
      }
      if (index.size() == 1) {
        z = z_parts[0];
        cls = cls_parts[0];
        box_logits = bl_parts[0];
        boxes = box_parts[0];
      } else {
        z = assemble_rows(z_parts, index, n);
        cls = assemble_rows(cls_parts, index, n);
        box_logits = assemble_rows(bl_parts, index, n);
        boxes = assemble_rows(box_parts, index, n);
      }
    } catch (const DomainError& e) {
      throw DivergenceError("training diverged at stage " + std::to_string(stage) + ": " + e.what(), stage);
    }
    trace.stages.push_back({cls, box_logits, boxes, ops});
  }
  trace.flops = t.flops() - flops_before;
  return trace;
}

/// One detection per proposal: the most likely object class, its
/// probability as score, and the box clipped to the unit square.
inline std::vector<Detection> detections_of(const StagePrediction& sp, std::size_t num_classes) {
  const Tensor probs = softmax_rows(sp.class_logits.value());
  std::vector<Detection> out;
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < num_classes; ++c)
      if (probs.at(i, c) > probs.at(i, best)) best = c;
    out.push_back({sp.box(i), static_cast<int>(best), probs.at(i, best)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Selection losses

/// (1/N)·Σ_k Σ_i Σ_{j∈{0,1}} [(1 − u)·ε_j + u·(1 − ε_j)].
inline Var iou_loss(Tape& t, std::span<const Var> eps, std::span<const std::vector<double>> ious) {
  if (eps.empty() || eps.size() != ious.size()) throw DimensionError("iou_loss: selection/IoU stage count mismatch");
  const std::size_t n = eps[0].rows();
  Var one = t.constant(Tensor::scalar(1.0));
  std::optional<Var> total;
  for (std::size_t k = 0; k < eps.size(); ++k) {
    if (eps[k].rows() != n || eps[k].cols() != 3 || ious[k].size() != n)
      throw DimensionError("iou_loss: selection vectors and IoUs disagree in shape");
    Tensor u({n, 2});
    for (std::size_t i = 0; i < n; ++i) u.at(i, 0) = u.at(i, 1) = ious[k][i];
    Var uv = t.constant(std::move(u));
    Var e = slice_cols(eps[k], 0, 2);
    Var term = sum(add(mul(sub(one, uv), e), mul(uv, sub(one, e))));
    total = total ? add(*total, term) : term;
  }
  return scale(*total, 1.0 / static_cast<double>(n));
}

/// (1/N)·Σ_k |Σ_i ε_{i,0} − T_k|.
inline Var complexity_loss(Tape& t, std::span<const Var> eps, std::span<const double> targets) {
  if (eps.empty() || eps.size() != targets.size())
    throw DimensionError("complexity_loss: selection/target stage count mismatch");
  const std::size_t n = eps[0].rows();
  std::optional<Var> total;
  for (std::size_t k = 0; k < eps.size(); ++k) {
    if (eps[k].rows() != n) throw DimensionError("complexity_loss: proposal count differs across stages");
    Var dev = abs(sub(sum(slice_cols(eps[k], 0, 1)), t.constant(Tensor::scalar(targets[k]))));
    total = total ? add(*total, dev) : dev;
  }
  return scale(*total, 1.0 / static_cast<double>(n));
}

/// L_s = L_iou + λ·L_c.
inline Var selection_loss(Var iou_term, Var complexity_term, double lambda) {
  return add(iou_term, scale(complexity_term, lambda));
}

/// clip(α·M, T_min, N).
inline double target_T(double alpha, double m, double t_min, double n) {
  if (!(alpha > 0.0) || m < 0.0 || !(t_min > 0.0) || t_min > n) throw ConfigError("target_T: invalid arguments");
  return std::clamp(alpha * m, t_min, n);
}

struct ComplexityTarget {
  double alpha = 2.0;
  double m = 0.0;
  double t_min = 1.0;
  double n = 1.0;

  double T() const { return target_T(alpha, m, t_min, n); }
};

/// Lower bounds per selector decaying geometrically from N to T_min_last:
/// T_min(m) = N·(T_min_last/N)^(m/S), m = 1..S.
inline std::vector<double> tmin_schedule(double n, double tmin_last, std::size_t selector_count) {
  if (selector_count < 1) throw ConfigError("tmin_schedule: need at least one selector");
  if (!(tmin_last > 0.0) || tmin_last > n) throw ConfigError("tmin_schedule: T_min_last must lie in (0, N]");
  std::vector<double> out;
  for (std::size_t m = 1; m <= selector_count; ++m)
    out.push_back(m == selector_count ? tmin_last
                                      : n * std::pow(tmin_last / n, static_cast<double>(m) / selector_count));
  return out;
}

/// Per-selector complexity targets for one image with M instances.
inline std::vector<double> complexity_targets(const HeadConfig& cfg, std::size_t n, double m) {
  std::vector<double> out;
  if (cfg.selector_stages.empty()) return out;
  const double nn = static_cast<double>(n);
  for (double tmin : tmin_schedule(nn, std::min(cfg.tmin_last, nn), cfg.selector_stages.size()))
    out.push_back(target_T(cfg.alpha, m, tmin, nn));
  return out;
}

// ---------------------------------------------------------------------------
// Detection loss

/// GIoU per row between predicted cx/cy/w/h boxes [m×4] and fixed target
/// boxes; returns [m×1].
inline Var giou_rows(Tape& t, Var pred, std::span<const Box> targets) {
  const std::size_t m = pred.rows();
  if (targets.size() != m) throw DimensionError("giou_rows: target count mismatch");
  Tensor tx1({m, 1}), ty1({m, 1}), tx2({m, 1}), ty2({m, 1}), tarea({m, 1});
  for (std::size_t i = 0; i < m; ++i) {
    tx1.data[i] = targets[i].x_min;
    ty1.data[i] = targets[i].y_min;
    tx2.data[i] = targets[i].x_max;
    ty2.data[i] = targets[i].y_max;
    tarea.data[i] = targets[i].area();
  }
  Var cx = slice_cols(pred, 0, 1), cy = slice_cols(pred, 1, 2);
  Var w = slice_cols(pred, 2, 3), h = slice_cols(pred, 3, 4);
  Var hw = scale(w, 0.5), hh = scale(h, 0.5);
  Var px1 = sub(cx, hw), px2 = add(cx, hw), py1 = sub(cy, hh), py2 = add(cy, hh);
  Var gx1 = t.constant(std::move(tx1)), gx2 = t.constant(std::move(tx2));
  Var gy1 = t.constant(std::move(ty1)), gy2 = t.constant(std::move(ty2));
  Var iw = relu(sub(minimum(px2, gx2), maximum(px1, gx1)));
  Var ih = relu(sub(minimum(py2, gy2), maximum(py1, gy1)));
  Var inter = mul(iw, ih);
  Var uni = sub(add(mul(w, h), t.constant(std::move(tarea))), inter);
  Var hull = mul(sub(maximum(px2, gx2), minimum(px1, gx1)), sub(maximum(py2, gy2), minimum(py1, gy1)));
  return sub(div(inter, uni), div(sub(hull, uni), hull));
}

/// Deep-supervised set loss summed over stages: per stage, Hungarian
/// matching, weighted CE (unmatched → no-object), and L1 + (1 − GIoU) on
/// matched boxes normalized by the number of truths.
inline Var detection_loss(Tape& t, const HeadTrace& trace, std::span<const GroundTruth> truths,
                          std::size_t num_classes, const DetectionLossWeights& w = {}) {
  if (trace.stages.empty()) throw DimensionError("detection_loss: empty trace");
  std::optional<Var> total;
  const double norm = static_cast<double>(std::max<std::size_t>(truths.size(), 1));
  for (const StagePrediction& sp : trace.stages) {
    const std::size_t n = sp.boxes.rows();
    const auto match = match_predictions(sp.class_logits.value(), sp.boxes.value(), truths, w);
    std::vector<int> labels(n, static_cast<int>(num_classes));
    std::vector<double> weights(n, w.no_object);
    std::vector<int> rows;
    std::vector<Box> targets;
    Tensor target_cxcywh;
    for (std::size_t i = 0; i < n; ++i) {
      if (match[i] < 0) continue;
      labels[i] = truths[match[i]].label;
      weights[i] = 1.0;
      rows.push_back(static_cast<int>(i));
      targets.push_back(truths[match[i]].box);
    }
    double wsum = 0.0;
    for (double v : weights) wsum += v;
    Var stage_loss = scale(cross_entropy(sp.class_logits, labels, weights), w.ce / wsum);
    if (!rows.empty()) {
      Tensor tgt({rows.size(), 4});
      for (std::size_t r = 0; r < rows.size(); ++r) {
        const Box& g = targets[r];
        tgt.at(r, 0) = 0.5 * (g.x_min + g.x_max);
        tgt.at(r, 1) = 0.5 * (g.y_min + g.y_max);
        tgt.at(r, 2) = g.width();
        tgt.at(r, 3) = g.height();
      }
      Var pb = gather_rows(sp.boxes, rows);
      Var l1 = sum(abs(sub(pb, t.constant(std::move(tgt)))));
      Var gl = sum(sub(t.constant(Tensor::scalar(1.0)), giou_rows(t, pb, targets)));
      stage_loss = add(stage_loss, scale(add(scale(l1, w.l1), scale(gl, w.giou)), 1.0 / norm));
    }
    total = total ? add(*total, stage_loss) : stage_loss;
  }
  return *total;
}

}  // namespace dpp
