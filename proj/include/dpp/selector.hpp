// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "dpp/autodiff.hpp"
#include "dpp/errors.hpp"
#include "dpp/operators.hpp"
#include "dpp/rng.hpp"

namespace dpp {

enum class SelectMode {
  TrainHard,  // Gumbel-perturbed, one-hot forward, soft (straight-through) backward
  TrainSoft,  // Gumbel-perturbed soft vector forward and backward
  Inference,  // plain softmax, argmax decides
};

inline const char* to_string(SelectMode m) {
  switch (m) {
    case SelectMode::TrainHard: return "hard";
    case SelectMode::TrainSoft: return "soft";
    case SelectMode::Inference: return "inference";
  }
  return "?";
}

struct SelectionVector {
  std::array<double, 3> values{};
  SelectMode mode = SelectMode::Inference;
  OperatorKind chosen = OperatorKind::G0;
};

/// Three-layer MLP d → d_s → d_s → 3 with ReLU between layers.
struct SelectorParams {
  Linear l1, l2, l3;

  SelectorParams() = default;
  SelectorParams(const ModelDims& dims, Rng& rng)
      : l1(dims.d, dims.d_s, rng), l2(dims.d_s, dims.d_s, rng), l3(dims.d_s, 3, rng, 0.5) {}

  Var logits(Tape& t, Var z) const { return l3(t, relu(l2(t, relu(l1(t, z))))); }

  template <class F>
  void for_each(const std::string& prefix, F&& f) {
    f(prefix + "l1.w", l1.w);
    f(prefix + "l1.b", l1.b);
    f(prefix + "l2.w", l2.w);
    f(prefix + "l2.b", l2.b);
    f(prefix + "l3.w", l3.w);
    f(prefix + "l3.b", l3.b);
  }
};

/// Argmax with ties broken toward the cheaper (higher-index) operator.
inline OperatorKind argmax_operator(const double* v) {
  int best = 2;
  for (int j = 1; j >= 0; --j)
    if (v[j] > v[best]) best = j;
  return static_cast<OperatorKind>(best);
}

struct RouteResult {
  Var eps;  // [N×3] selection vectors as seen by the losses
  std::vector<OperatorKind> chosen;
};

/// Independent selection for each row of z [N×d]. Training modes draw one
/// Gumbel sample per (proposal, operator) from `rng`, scaled by noise_scale.
inline RouteResult route_batch(Tape& t, Var z, const SelectorParams& p, SelectMode mode, double tau,
                               Rng* rng = nullptr, double noise_scale = 1.0) {
  if (!(tau > 0.0)) throw ConfigError("selector temperature must be positive");
  if (!(noise_scale >= 0.0)) throw ConfigError("Gumbel noise scale must be non-negative");
  RouteResult r;
  const std::size_t n = z.rows();
  Var logits = p.logits(t, z);
  if (mode == SelectMode::Inference) {
    r.eps = softmax(logits, tau);
    for (std::size_t i = 0; i < n; ++i) r.chosen.push_back(argmax_operator(&logits.value().data[i * 3]));
    return r;
  }
  if (rng == nullptr) throw ConfigError("training-mode selection requires an explicit random stream");
  Tensor noise({n, 3});
  for (double& g : noise.data) g = noise_scale * rng->gumbel();
  Var perturbed = add(logits, t.constant(noise));
  Var soft = softmax(perturbed, tau);
  Tensor hard({n, 3}, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const OperatorKind k = argmax_operator(&perturbed.value().data[i * 3]);
    r.chosen.push_back(k);
    hard.at(i, index_of(k)) = 1.0;
  }
  r.eps = mode == SelectMode::TrainHard ? straight_through(std::move(hard), soft) : soft;
  return r;
}

/// Selection for a single embedding [d] or [1×d].
inline SelectionVector select(const Tensor& embedding, const SelectorParams& p, SelectMode mode, double tau,
                              Rng* rng = nullptr) {
  Tape t(false);
  Var z = t.constant(Tensor({1, embedding.numel()}, embedding.data));
  RouteResult r = route_batch(t, z, p, mode, tau, rng);
  SelectionVector s;
  s.mode = mode;
  s.chosen = r.chosen[0];
  for (int j = 0; j < 3; ++j) s.values[j] = r.eps.value().data[j];
  return s;
}

/// Inference routing of a list of embeddings; an empty list yields nothing.
inline std::vector<SelectionVector> route_embeddings(std::span<const Tensor> embeddings, const SelectorParams& p,
                                                     double tau) {
  std::vector<SelectionVector> out;
  for (const Tensor& e : embeddings) out.push_back(select(e, p, SelectMode::Inference, tau));
  return out;
}

}  // namespace dpp
