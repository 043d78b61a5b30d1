// SPDX-License-Identifier: Apache-2.0
#pragma once

// Synthetic detection benchmark: scenes of random boxes, a proposal encoder
// whose embeddings carry a noisy quality signal, two-phase training, and
// evaluation with routing reports.

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "dpp/autodiff.hpp"
#include "dpp/boxgeo.hpp"
#include "dpp/complexity.hpp"
#include "dpp/errors.hpp"
#include "dpp/head.hpp"
#include "dpp/rng.hpp"

namespace dpp {

struct SceneConfig {
  std::size_t max_instances = 6;
  std::size_t num_classes = 8;
  double min_size = 0.1;
  double max_size = 0.4;
  double max_pair_iou = 0.7;

  void validate() const {
    if (max_instances < 1) throw ConfigError("max_instances must be >= 1");
    if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
    if (!(min_size > 0.0) || !(max_size >= min_size) || max_size > 1.0)
      throw ConfigError("box size range must satisfy 0 < min_size <= max_size <= 1");
    if (!(max_pair_iou > 0.0) || max_pair_iou > 1.0) throw ConfigError("max_pair_iou must lie in (0, 1]");
  }
};

struct Scene {
  std::uint64_t seed = 0;
  std::vector<GroundTruth> truths;

  std::size_t M() const { return truths.size(); }
};

inline constexpr int kSceneRejectionLimit = 10000;

/// M ~ U{1..max_instances} boxes, each redrawn until its IoU with every
/// earlier box is at most max_pair_iou; uniform class labels.
inline Scene generate_scene(std::uint64_t seed, const SceneConfig& cfg) {
  cfg.validate();
  Rng rng(seed);
  Scene s;
  s.seed = seed;
  const std::size_t m = 1 + rng.below(cfg.max_instances);
  for (std::size_t i = 0; i < m; ++i) {
    for (int attempt = 0;; ++attempt) {
      if (attempt == kSceneRejectionLimit) throw ConfigError("generate_scene: cannot place boxes under the IoU limit");
      const double w = rng.uniform(cfg.min_size, cfg.max_size);
      const double h = rng.uniform(cfg.min_size, cfg.max_size);
      const double x = rng.uniform(0.0, 1.0 - w);
      const double y = rng.uniform(0.0, 1.0 - h);
      const Box b{x, y, x + w, y + h};
      bool ok = true;
      for (const auto& g : s.truths) ok = ok && iou(b, g.box) <= cfg.max_pair_iou;
      if (!ok) continue;
      s.truths.push_back({b, static_cast<int>(rng.below(cfg.num_classes))});
      break;
    }
  }
  return s;
}

enum class Split : std::uint64_t { Train = 1, Val = 2 };

inline std::vector<Scene> generate_scenes(std::uint64_t global_seed, Split split, std::size_t count,
                                          const SceneConfig& cfg) {
  std::vector<Scene> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i)
    out.push_back(generate_scene(derive_seed(global_seed, static_cast<std::uint64_t>(split), i), cfg));
  return out;
}

struct EncoderConfig {
  std::size_t num_proposals = 24;
  double jitter = 0.15;           // σ on centre (in box widths) and relative size
  double fraction_random = 0.5;   // share of uniformly random proposals
  std::size_t max_jittered_per_truth = 2;  // 0 = no cap; surplus slots become random
  double feature_noise = 0.1;     // σ of the noise on every feature channel
  double min_size = 0.05;
  double max_size = 0.5;
  std::uint64_t encoder_seed = 7;

  void validate() const {
    if (num_proposals < 1) throw ConfigError("num_proposals must be >= 1");
    if (jitter < 0.0) throw ConfigError("jitter must be non-negative");
    if (fraction_random < 0.0 || fraction_random > 1.0) throw ConfigError("fraction_random must lie in [0, 1]");
    if (feature_noise < 0.0) throw ConfigError("feature_noise must be non-negative");
    if (!(min_size > 0.0) || !(max_size >= min_size) || max_size > 1.0)
      throw ConfigError("proposal size range must satisfy 0 < min_size <= max_size <= 1");
  }
};

/// Fixed random linear map from proposal features to embeddings. Features:
/// box cx/cy/w/h (4), offset to the best-matching truth scaled by its IoU
/// (4), class one-hot scaled by IoU (C), IoU (1), pure noise (1).
struct ProposalEncoder {
  std::size_t dim = 32;
  std::size_t num_classes = 8;
  Tensor map;  // [F×d]

  ProposalEncoder() = default;
  ProposalEncoder(std::size_t d, std::size_t classes, std::uint64_t seed) : dim(d), num_classes(classes) {
    Rng rng(seed);
    const std::size_t f = features();
    map = Tensor({f, d});
    const double sd = 1.0 / std::sqrt(static_cast<double>(f));
    for (double& v : map.data) v = rng.normal(0.0, sd);
  }

  std::size_t features() const { return 10 + num_classes; }
};

inline Box clip_to_unit(double cx, double cy, double w, double h) {
  return Box::from_cxcywh(cx, cy, w, h).clipped();
}

/// Deterministic per-scene encoding drawn from `rng`.
inline ProposalBatch encode_proposals(const Scene& scene, Rng& rng, const EncoderConfig& cfg,
                                      const ProposalEncoder& enc) {
  cfg.validate();
  const std::size_t n = cfg.num_proposals;
  std::size_t n_jittered = n - static_cast<std::size_t>(std::llround(cfg.fraction_random * static_cast<double>(n)));
  if (cfg.max_jittered_per_truth > 0) n_jittered = std::min(n_jittered, cfg.max_jittered_per_truth * scene.M());
  std::vector<Box> boxes;
  for (std::size_t i = 0; i < n; ++i) {
    if (i < n_jittered && scene.M() > 0) {
      const Box& g = scene.truths[i % scene.M()].box;
      const double w = std::max(0.02, g.width() * (1.0 + cfg.jitter * rng.normal()));
      const double h = std::max(0.02, g.height() * (1.0 + cfg.jitter * rng.normal()));
      const double cx = 0.5 * (g.x_min + g.x_max) + cfg.jitter * g.width() * rng.normal();
      const double cy = 0.5 * (g.y_min + g.y_max) + cfg.jitter * g.height() * rng.normal();
      Box b = clip_to_unit(cx, cy, w, h);
      if (b.width() <= 0.0 || b.height() <= 0.0) b = g;
      boxes.push_back(b);
    } else {
      const double w = rng.uniform(cfg.min_size, cfg.max_size);
      const double h = rng.uniform(cfg.min_size, cfg.max_size);
      const double x = rng.uniform(0.0, 1.0 - w);
      const double y = rng.uniform(0.0, 1.0 - h);
      boxes.push_back({x, y, x + w, y + h});
    }
  }
  for (std::size_t i = n; i-- > 1;) std::swap(boxes[i], boxes[rng.below(i + 1)]);

  const std::size_t f = enc.features();
  Tensor feats({n, f});
  for (std::size_t i = 0; i < n; ++i) {
    const Box& b = boxes[i];
    double v = 0.0;
    int best = -1;
    for (std::size_t j = 0; j < scene.M(); ++j) {
      const double o = iou(b, scene.truths[j].box);
      if (o > v) {
        v = o;
        best = static_cast<int>(j);
      }
    }
    const double bc[4] = {0.5 * (b.x_min + b.x_max), 0.5 * (b.y_min + b.y_max), b.width(), b.height()};
    double* row = &feats.data[i * f];
    for (int c = 0; c < 4; ++c) row[c] = bc[c];
    if (best >= 0) {
      const Box& g = scene.truths[best].box;
      const double gc[4] = {0.5 * (g.x_min + g.x_max), 0.5 * (g.y_min + g.y_max), g.width(), g.height()};
      for (int c = 0; c < 4; ++c) row[4 + c] = v * (gc[c] - bc[c]) / 0.1;
      row[8 + scene.truths[best].label] = v;
    }
    row[8 + enc.num_classes] = v;
    for (std::size_t c = 4; c < f; ++c) row[c] += cfg.feature_noise * rng.normal();
  }
  ProposalBatch out;
  out.boxes = std::move(boxes);
  out.embeddings = Tensor({n, enc.dim});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < f; ++c) {
      const double x = feats.at(i, c);
      for (std::size_t k = 0; k < enc.dim; ++k) out.embeddings.at(i, k) += x * enc.map.at(c, k);
    }
  return out;
}

inline constexpr std::uint64_t kEncodeStream = 0x656e636f6465ULL;

inline ProposalBatch encode_proposals(const Scene& scene, const EncoderConfig& cfg, const ProposalEncoder& enc) {
  Rng rng(derive_seed(scene.seed, kEncodeStream));
  return encode_proposals(scene, rng, cfg, enc);
}

// ---------------------------------------------------------------------------
// Optimization

/// Adam with decoupled weight decay over parameter groups with their own
/// learning rates.
class AdamW {
 public:
  explicit AdamW(double weight_decay = 1e-4, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}

  void add_group(std::vector<Parameter*> params, double lr) {
    Group g{std::move(params), lr, {}, {}};
    for (Parameter* p : g.params) {
      g.m.emplace_back(p->value.shape, 0.0);
      g.v.emplace_back(p->value.shape, 0.0);
    }
    groups_.push_back(std::move(g));
  }

  std::size_t groups() const { return groups_.size(); }
  const std::vector<Parameter*>& params(std::size_t g) const { return groups_[g].params; }

  /// grads[g][i] matches params(g)[i]. lr_scale multiplies every group's rate.
  void step(const std::vector<std::vector<Tensor>>& grads, double lr_scale) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
      Group& g = groups_[gi];
      const double lr = g.lr * lr_scale;
      for (std::size_t i = 0; i < g.params.size(); ++i) {
        Tensor& w = g.params[i]->value;
        const Tensor& gr = grads[gi][i];
        for (std::size_t j = 0; j < w.numel(); ++j) {
          double& m = g.m[i].data[j];
          double& v = g.v[i].data[j];
          m = b1_ * m + (1.0 - b1_) * gr.data[j];
          v = b2_ * v + (1.0 - b2_) * gr.data[j] * gr.data[j];
          w.data[j] -= lr * (wd_ * w.data[j] + (m / c1) / (std::sqrt(v / c2) + eps_));
        }
      }
    }
  }

 private:
  struct Group {
    std::vector<Parameter*> params;
    double lr;
    std::vector<Tensor> m, v;
  };
  double wd_, b1_, b2_, eps_;
  std::uint64_t t_ = 0;
  std::vector<Group> groups_;
};

/// Step decay: ×0.1 from milestone1 and ×0.01 from milestone2 (fractions of
/// the phase's steps).
inline double step_decay(std::size_t step, std::size_t total, double milestone1, double milestone2) {
  const double f = static_cast<double>(step) / static_cast<double>(std::max<std::size_t>(total, 1));
  if (f >= milestone2) return 0.01;
  if (f >= milestone1) return 0.1;
  return 1.0;
}

/// Linear decay from 1 at step 0 to 0 at `anneal`·total; 1 throughout when
/// anneal is 0.
inline double gumbel_noise_scale(std::size_t step, std::size_t total, double anneal) {
  if (anneal <= 0.0) return 1.0;
  const double f = static_cast<double>(step) / (anneal * static_cast<double>(std::max<std::size_t>(total, 1)));
  return std::max(0.0, 1.0 - f);
}

struct TrainConfig {
  std::size_t phase1_steps = 1500;
  std::size_t phase2_steps = 2000;
  std::size_t batch = 4;
  double lr_phase1 = 1e-3;
  double lr_selector = 2e-3;
  double lr_body = 2e-4;
  double weight_decay = 1e-4;
  double grad_clip = 1.0;
  double milestone1 = 0.75;
  double milestone2 = 0.92;
  SelectMode select_mode = SelectMode::TrainHard;
  double gumbel_anneal = 0.75;  // phase-2 fraction over which Gumbel noise decays linearly to 0; 0 keeps it
  std::size_t log_every = 25;

  void validate() const {
    if (batch < 1) throw ConfigError("batch must be >= 1");
    if (!(lr_phase1 > 0.0) || !(lr_selector > 0.0) || !(lr_body >= 0.0)) throw ConfigError("learning rates must be positive");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
    if (!(grad_clip > 0.0)) throw ConfigError("grad_clip must be positive");
    if (!(milestone1 > 0.0 && milestone1 <= milestone2 && milestone2 <= 1.0))
      throw ConfigError("milestones must satisfy 0 < m1 <= m2 <= 1");
    if (select_mode == SelectMode::Inference) throw ConfigError("training select mode must be hard or soft");
    if (log_every < 1) throw ConfigError("log_every must be >= 1");
    if (gumbel_anneal < 0.0 || gumbel_anneal > 1.0) throw ConfigError("gumbel_anneal must lie in [0, 1]");
  }
};

/// Everything a run needs; serialized by config.hpp.
struct BenchConfig {
  std::uint64_t seed = 1;
  HeadConfig head;
  SceneConfig scene;
  EncoderConfig encoder;
  TrainConfig train;
  std::size_t train_scenes = 2000;
  std::size_t val_scenes = 500;

  void validate() const {
    head.validate();
    scene.validate();
    encoder.validate();
    train.validate();
    if (head.dims.num_classes != scene.num_classes) throw ConfigError("num_classes disagrees between head and scenes");
    if (static_cast<std::size_t>(head.num_proposals) != encoder.num_proposals)
      throw ConfigError("num_proposals disagrees between head and encoder");
  }

  ProposalEncoder make_encoder() const { return {head.dims.d, head.dims.num_classes, encoder.encoder_seed}; }
};

struct LogRow {
  int phase = 1;
  std::size_t step = 0;
  double lr_scale = 1.0;
  double detection_loss = 0.0;
  double iou_loss = 0.0;
  double complexity_loss = 0.0;
  double mean_g0_last = 0.0;  // G0 picks per image at the last selector
  double grad_norm = 0.0;
};

struct TrainResult {
  HeadParams params;
  std::vector<LogRow> log;
  bool diverged = false;
  std::string message;  // divergence diagnostic
};

struct EncodedScene {
  const Scene* scene;
  ProposalBatch batch;
};

inline std::vector<EncodedScene> encode_all(const std::vector<Scene>& scenes, const BenchConfig& cfg) {
  const ProposalEncoder enc = cfg.make_encoder();
  std::vector<EncodedScene> out;
  out.reserve(scenes.size());
  for (const auto& s : scenes) out.push_back({&s, encode_proposals(s, cfg.encoder, enc)});
  return out;
}

namespace detail {

struct StepLoss {
  double detection = 0.0, iou = 0.0, complexity = 0.0, g0_last = 0.0;
};

inline double global_norm(const std::vector<std::vector<Tensor>>& grads) {
  double s = 0.0;
  for (const auto& g : grads)
    for (const auto& t : g)
      for (double v : t.data) s += v * v;
  return std::sqrt(s);
}

/// One phase of training over `params` with the given optimizer groups.
/// Returns false on divergence; params then hold the last good values.
inline bool run_phase(int phase, std::size_t steps, const BenchConfig& cfg, const HeadConfig& head,
                      const std::vector<EncodedScene>& data, HeadParams& params, AdamW& opt, Rng& rng,
                      TrainResult& result) {
  if (data.empty()) throw ConfigError("training requires at least one scene");
  const TrainConfig& tc = cfg.train;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  const std::size_t n = static_cast<std::size_t>(head.num_proposals);

  for (std::size_t step = 0; step < steps; ++step) {
    std::vector<std::vector<Tensor>> grads(opt.groups());
    for (std::size_t g = 0; g < opt.groups(); ++g)
      for (Parameter* p : opt.params(g)) grads[g].emplace_back(p->value.shape, 0.0);
    StepLoss acc;
    try {
      for (std::size_t b = 0; b < tc.batch; ++b) {
        if (cursor == order.size()) {
          for (std::size_t i = order.size(); i-- > 1;) std::swap(order[i], order[rng.below(i + 1)]);
          cursor = 0;
        }
        const EncodedScene& ex = data[order[cursor++]];
        const auto& truths = ex.scene->truths;
        Tape t(true);
        ForwardOptions fo;
        fo.truths = truths;
        if (phase == 2) {
          fo.mode = tc.select_mode;
          fo.rng = &rng;
          fo.noise_scale = gumbel_noise_scale(step, steps, tc.gumbel_anneal);
        }
        const HeadTrace trace = forward(t, ex.batch, params, head, fo);
        Var loss = detection_loss(t, trace, truths, head.dims.num_classes);
        acc.detection += loss.item();
        if (phase == 2 && !trace.selectors.empty()) {
          std::vector<Var> eps;
          std::vector<std::vector<double>> ious;
          for (const auto& s : trace.selectors) {
            eps.push_back(s.eps);
            ious.push_back(s.iou_targets);
          }
          const auto targets = complexity_targets(head, n, static_cast<double>(truths.size()));
          Var li = iou_loss(t, eps, ious);
          Var lc = complexity_loss(t, eps, targets);
          acc.iou += li.item();
          acc.complexity += lc.item();
          Var zero = scale(li, 0.0);
          loss = add(loss, selection_loss(head.use_iou_loss ? li : zero, head.use_complexity_loss ? lc : zero,
                                          head.lambda));
          for (OperatorKind k : trace.selectors.back().chosen) acc.g0_last += k == OperatorKind::G0 ? 1.0 : 0.0;
        }
        if (!std::isfinite(loss.item())) throw DivergenceError("loss became non-finite", 0);
        t.backward(loss);
        for (std::size_t g = 0; g < opt.groups(); ++g)
          for (std::size_t i = 0; i < opt.params(g).size(); ++i)
            if (const Tensor* gr = t.grad_of(*opt.params(g)[i]))
              for (std::size_t j = 0; j < gr->numel(); ++j)
                grads[g][i].data[j] += gr->data[j] / static_cast<double>(tc.batch);
      }
    } catch (const DivergenceError& e) {
      result.diverged = true;
      result.message = "phase " + std::to_string(phase) + " step " + std::to_string(step) + ": " + e.what();
      return false;
    } catch (const DomainError& e) {
      result.diverged = true;
      result.message = "phase " + std::to_string(phase) + " step " + std::to_string(step) + ": " + e.what();
      return false;
    }
    const double norm = global_norm(grads);
    if (!std::isfinite(norm)) {
      result.diverged = true;
      result.message = "phase " + std::to_string(phase) + " step " + std::to_string(step) + ": non-finite gradient";
      return false;
    }
    if (norm > tc.grad_clip)
      for (auto& g : grads)
        for (auto& t : g)
          for (double& v : t.data) v *= tc.grad_clip / norm;
    const double lr_scale = step_decay(step, steps, tc.milestone1, tc.milestone2);
    opt.step(grads, lr_scale);

    if (step % tc.log_every == 0 || step + 1 == steps) {
      const double nb = static_cast<double>(tc.batch);
      result.log.push_back({phase, step, lr_scale, acc.detection / nb, acc.iou / nb, acc.complexity / nb,
                            acc.g0_last / nb, norm});
    }
  }
  return true;
}

}  // namespace detail

inline HeadConfig without_selectors(HeadConfig cfg) {
  cfg.selector_stages.clear();
  return cfg;
}

inline constexpr std::uint64_t kInitStream = 0x696e6974ULL;
inline constexpr std::uint64_t kSelectorInitStream = 0x73656cULL;
inline constexpr std::uint64_t kPhase1Stream = 0x7031ULL;
inline constexpr std::uint64_t kPhase2Stream = 0x7032ULL;

/// Phase 1: the all-G0 head on detection loss alone.
inline TrainResult train_phase1(const BenchConfig& cfg, const std::vector<Scene>& scenes) {
  cfg.validate();
  const HeadConfig head = without_selectors(cfg.head);
  Rng init(derive_seed(cfg.seed, kInitStream));
  TrainResult r;
  r.params = HeadParams(head, init);
  AdamW opt(cfg.train.weight_decay);
  opt.add_group(r.params.parameters(), cfg.train.lr_phase1);
  Rng rng(derive_seed(cfg.seed, kPhase1Stream));
  const auto data = encode_all(scenes, cfg);
  detail::run_phase(1, cfg.train.phase1_steps, cfg, head, data, r.params, opt, rng, r);
  return r;
}

/// Phase 2: fresh selectors on top of a phase-1 head; selectors and body
/// train at their own rates on detection loss plus the selection loss.
inline TrainResult train_phase2(const BenchConfig& cfg, const std::vector<Scene>& scenes, const HeadParams& phase1) {
  cfg.validate();
  TrainResult r;
  r.params = phase1;
  Rng init(derive_seed(cfg.seed, kSelectorInitStream));
  r.params.add_selectors(cfg.head, init);
  if (cfg.head.selector_stages.empty()) return r;
  AdamW opt(cfg.train.weight_decay);
  std::vector<Parameter*> body;
  for (auto& st : r.params.stages) st.for_each("", [&](const std::string&, Parameter& p) { body.push_back(&p); });
  opt.add_group(r.params.selector_parameters(), cfg.train.lr_selector);
  opt.add_group(body, cfg.train.lr_body);
  Rng rng(derive_seed(cfg.seed, kPhase2Stream));
  const auto data = encode_all(scenes, cfg);
  detail::run_phase(2, cfg.train.phase2_steps, cfg, cfg.head, data, r.params, opt, rng, r);
  return r;
}

/// Both phases back to back.
inline TrainResult train(const BenchConfig& cfg, const std::vector<Scene>& scenes) {
  TrainResult p1 = train_phase1(cfg, scenes);
  if (p1.diverged) return p1;
  TrainResult p2 = train_phase2(cfg, scenes, p1.params);
  p2.log.insert(p2.log.begin(), p1.log.begin(), p1.log.end());
  return p2;
}

// ---------------------------------------------------------------------------
// Evaluation

struct GroupRow {
  std::string name;  // e.g. "g0", "g0+g1"
  double ap = 0.0;
  double ap50 = 0.0;
  double mean_count = 0.0;  // proposals per image in the group
};

struct HistogramRow {
  int stage = 0;
  OperatorKind op = OperatorKind::G0;
  std::array<std::size_t, 10> bins{};
  std::size_t count = 0;
  double mean_iou = 0.0;
};

struct EvalReport {
  std::size_t scenes = 0;
  double map = 0.0;
  double ap50 = 0.0;
  double ap75 = 0.0;
  std::vector<double> stage_ap;
  double mean_flops = 0.0;          // analytic, per image
  double mean_runtime_flops = 0.0;  // counted while running, per image
  double static_flops = 0.0;        // all-G0 head without selectors
  double nbar = 0.0;
  std::vector<double> mean_g0;  // per selector, per image
  double mean_target_last = 0.0;  // mean over images of clip(αM, T_min_last, N)
  std::vector<GroupRow> groups;
  std::vector<HistogramRow> histograms;

  /// Mean IoU at the stage input of proposals routed to `op` at selector `s`.
  double routed_mean_iou(std::size_t s, OperatorKind op) const {
    if (s * 3 + 2 >= histograms.size()) throw DimensionError("routed_mean_iou: no such selector");
    return histograms[s * 3 + index_of(op)].mean_iou;
  }
  const GroupRow& group(const std::string& name) const {
    for (const auto& g : groups)
      if (g.name == name) return g;
    throw DimensionError("group: unknown name " + name);
  }
};

/// Inference-mode evaluation with per-stage AP, FLOPs, N̄, last-stage
/// operator-group AP, and routed IoU histograms per selector stage.
inline EvalReport evaluate(const HeadParams& params, const BenchConfig& cfg, const std::vector<Scene>& scenes) {
  const HeadConfig& head = cfg.head;
  const std::size_t n = static_cast<std::size_t>(head.num_proposals);
  const std::size_t sel = head.selector_stages.size();
  const CostModel cm = derive_cost_model(head.dims);
  const ProposalEncoder enc = cfg.make_encoder();

  EvalReport r;
  r.scenes = scenes.size();
  r.static_flops = equal_cost(n, head.num_stages, cm);
  r.mean_g0.assign(sel, 0.0);
  std::vector<ApAccumulator> stage_acc(head.num_stages);
  static const std::vector<std::pair<std::string, std::array<bool, 3>>> kGroups = {
      {"g0", {true, false, false}},  {"g1", {false, true, false}},    {"g2", {false, false, true}},
      {"g0+g1", {true, true, false}}, {"g0+g1+g2", {true, true, true}}};
  std::vector<ApAccumulator> group_acc(kGroups.size());
  std::array<double, 3> group_counts{};
  for (std::size_t s = 0; s < sel; ++s)
    for (OperatorKind k : kOperators) r.histograms.push_back({head.selector_stages[s], k, {}, 0, 0.0});

  for (const Scene& scene : scenes) {
    const ProposalBatch batch = encode_proposals(scene, cfg.encoder, enc);
    Tape t(false);
    ForwardOptions fo;
    fo.truths = scene.truths;
    const HeadTrace trace = forward(t, batch, params, head, fo);
    for (int k = 0; k < head.num_stages; ++k) {
      const auto dets = detections_of(trace.stages[k], head.dims.num_classes);
      stage_acc[k].add_image(dets, scene.truths);
    }
    Assignment a;
    for (const auto& s : trace.selectors) a.ops.push_back(s.chosen);
    r.mean_flops += sel ? unequal_cost(a, cm, head, n) : equal_cost(n, head.num_stages, cm);
    r.mean_runtime_flops += static_cast<double>(trace.flops);
    r.mean_target_last += target_T(head.alpha, static_cast<double>(scene.M()),
                                   std::min(head.tmin_last, static_cast<double>(n)), static_cast<double>(n));

    const auto final_dets = detections_of(trace.stages.back(), head.dims.num_classes);
    const std::vector<OperatorKind> last =
        sel ? trace.selectors.back().chosen : std::vector<OperatorKind>(n, OperatorKind::G0);
    for (std::size_t g = 0; g < kGroups.size(); ++g) {
      std::vector<Detection> subset;
      for (std::size_t i = 0; i < n; ++i)
        if (kGroups[g].second[index_of(last[i])]) subset.push_back(final_dets[i]);
      group_acc[g].add_image(subset, scene.truths);
    }
    for (OperatorKind k : last) group_counts[index_of(k)] += 1.0;

    for (std::size_t s = 0; s < sel; ++s) {
      const SelectorTrace& st = trace.selectors[s];
      for (std::size_t i = 0; i < n; ++i) {
        double u = 0.0;
        for (const auto& g : scene.truths) u = std::max(u, iou(st.input_boxes[i], g.box));
        HistogramRow& h = r.histograms[s * 3 + index_of(st.chosen[i])];
        h.bins[std::min<std::size_t>(9, static_cast<std::size_t>(u * 10.0))] += 1;
        h.count += 1;
        h.mean_iou += u;
        if (st.chosen[i] == OperatorKind::G0) r.mean_g0[s] += 1.0;
      }
    }
  }

  const double ns = static_cast<double>(std::max<std::size_t>(scenes.size(), 1));
  for (auto& acc : stage_acc) r.stage_ap.push_back(acc.compute().mean);
  const ApResult overall = stage_acc.back().compute();
  r.map = overall.mean;
  r.ap50 = overall.ap.empty() ? 0.0 : overall.ap[0];
  r.ap75 = overall.ap.size() > 5 ? overall.ap[5] : 0.0;
  r.mean_flops /= ns;
  r.mean_runtime_flops /= ns;
  r.mean_target_last /= ns;
  for (double& g : r.mean_g0) g /= ns;
  r.nbar = equivalent_proposal_number(r.mean_flops, cm, head.num_stages, n);
  for (std::size_t g = 0; g < kGroups.size(); ++g) {
    const ApResult res = group_acc[g].compute();
    double count = 0.0;
    for (int j = 0; j < 3; ++j)
      if (kGroups[g].second[j]) count += group_counts[j];
    r.groups.push_back({kGroups[g].first, res.mean, res.ap.empty() ? 0.0 : res.ap[0], count / ns});
  }
  for (auto& h : r.histograms)
    if (h.count) h.mean_iou /= static_cast<double>(h.count);
  return r;
}

/// AP per last-stage operator group (the rows of EvalReport::groups).
inline std::vector<GroupRow> report_operator_groups(const HeadParams& params, const BenchConfig& cfg,
                                                    const std::vector<Scene>& scenes) {
  return evaluate(params, cfg, scenes).groups;
}

/// Routed IoU histograms per selector stage and operator.
inline std::vector<HistogramRow> report_iou_histograms(const HeadParams& params, const BenchConfig& cfg,
                                                       const std::vector<Scene>& scenes) {
  return evaluate(params, cfg, scenes).histograms;
}

}  // namespace dpp
