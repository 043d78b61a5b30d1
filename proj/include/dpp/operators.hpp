// SPDX-License-Identifier: Apache-2.0
#pragma once

// The per-proposal operator set {G0, G1, G2}, the pairwise self-attention
// component, the shared prediction heads, and the analytic FLOP model.

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dpp/autodiff.hpp"
#include "dpp/errors.hpp"
#include "dpp/rng.hpp"

namespace dpp {

enum class OperatorKind : std::uint8_t { G0 = 0, G1 = 1, G2 = 2 };

inline constexpr std::array<OperatorKind, 3> kOperators{OperatorKind::G0, OperatorKind::G1, OperatorKind::G2};

inline const char* to_string(OperatorKind k) {
  switch (k) {
    case OperatorKind::G0: return "g0";
    case OperatorKind::G1: return "g1";
    case OperatorKind::G2: return "g2";
  }
  return "?";
}

inline int index_of(OperatorKind k) { return static_cast<int>(k); }

struct ModelDims {
  std::size_t d = 32;            // proposal embedding width
  std::size_t d_h = 16;          // rank of the generated dynamic matrices
  std::size_t d_ff = 64;         // FFN hidden width
  std::size_t num_classes = 8;   // object classes, excluding no-object
  std::size_t d_s = 8;           // selector hidden width

  std::size_t logits() const { return num_classes + 1; }
  std::size_t no_object() const { return num_classes; }

  void validate() const {
    if (d < 2 || d_h < 1 || d_ff < 1 || num_classes < 1 || d_s < 1)
      throw ConfigError("model dims must be positive (d >= 2)");
  }
};

// ---------------------------------------------------------------------------
// Parameters

/// y = x·W + b with W [in×out], b [1×out].
struct Linear {
  Parameter w;
  Parameter b;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, double init_scale = 1.0) {
    w.value = Tensor({in, out});
    const double sd = init_scale / std::sqrt(static_cast<double>(in));
    for (double& v : w.value.data) v = rng.normal(0.0, sd);
    b.value = Tensor({1, out}, 0.0);
  }

  Var operator()(Tape& t, Var x) const { return add_row(matmul(x, t.param(w)), t.param(b)); }
};

struct LayerNormParams {
  Parameter gain;
  Parameter bias;

  LayerNormParams() = default;
  explicit LayerNormParams(std::size_t d) {
    gain.value = Tensor({1, d}, 1.0);
    bias.value = Tensor({1, d}, 0.0);
  }

  Var operator()(Tape& t, Var x) const { return layer_norm(x, t.param(gain), t.param(bias)); }
};

struct Ffn {
  Linear up;
  Linear down;

  Ffn() = default;
  Ffn(std::size_t d, std::size_t d_ff, Rng& rng) : up(d, d_ff, rng), down(d_ff, d, rng, 0.5) {}

  Var operator()(Tape& t, Var x) const { return down(t, relu(up(t, x))); }
};

struct AttentionParams {
  Linear q, k, v, o;
};

/// G0: dynamic-parameter block. A generator maps each embedding to two
/// matrices (d×d_h, d_h×d) that are applied back to that same embedding.
struct DyConvParams {
  Linear generator;
  LayerNormParams norm;
  Ffn ffn;
  LayerNormParams ffn_norm;
};

/// G1: static FFN block.
struct StaticFfnParams {
  Ffn ffn;
  LayerNormParams norm;
};

/// Classification (num_classes + no-object) and box-delta heads.
struct PredictionHeads {
  Linear cls;
  Linear box;
};

/// Parameters of one head stage. G2 (identity) has none.
struct OperatorParams {
  AttentionParams attention;
  DyConvParams g0;
  StaticFfnParams g1;
  PredictionHeads heads;

  OperatorParams() = default;
  OperatorParams(const ModelDims& dims, Rng& rng) {
    dims.validate();
    const std::size_t d = dims.d;
    attention = {Linear(d, d, rng), Linear(d, d, rng), Linear(d, d, rng), Linear(d, d, rng, 0.5)};
    g0.generator = Linear(d, 2 * d * dims.d_h, rng, 0.5);
    g0.norm = LayerNormParams(d);
    g0.ffn = Ffn(d, dims.d_ff, rng);
    g0.ffn_norm = LayerNormParams(d);
    g1.ffn = Ffn(d, dims.d_ff, rng);
    g1.norm = LayerNormParams(d);
    heads.cls = Linear(d, dims.logits(), rng, 0.1);
    heads.box = Linear(d, 4, rng, 0.1);
  }

  template <class F>
  void for_each(const std::string& prefix, F&& f) {
    auto lin = [&](const std::string& n, Linear& l) {
      f(prefix + n + ".w", l.w);
      f(prefix + n + ".b", l.b);
    };
    auto ln = [&](const std::string& n, LayerNormParams& l) {
      f(prefix + n + ".gain", l.gain);
      f(prefix + n + ".bias", l.bias);
    };
    lin("attn.q", attention.q);
    lin("attn.k", attention.k);
    lin("attn.v", attention.v);
    lin("attn.o", attention.o);
    lin("g0.gen", g0.generator);
    ln("g0.norm", g0.norm);
    lin("g0.ffn.up", g0.ffn.up);
    lin("g0.ffn.down", g0.ffn.down);
    ln("g0.ffn_norm", g0.ffn_norm);
    lin("g1.ffn.up", g1.ffn.up);
    lin("g1.ffn.down", g1.ffn.down);
    ln("g1.norm", g1.norm);
    lin("head.cls", heads.cls);
    lin("head.box", heads.box);
  }
};

// ---------------------------------------------------------------------------
// Forward computation

/// Applies one operator to a block of embeddings [n×d]; rows are
/// independent, so n = 1 is the per-proposal case. G2 returns its input node.
inline Var apply_operator(Tape& t, OperatorKind kind, Var z, const OperatorParams& p, const ModelDims& dims) {
  if (z.cols() != dims.d)
    throw DimensionError("apply_operator: embedding width " + std::to_string(z.cols()) + " != d=" +
                         std::to_string(dims.d));
  switch (kind) {
    case OperatorKind::G2:
      return z;
    case OperatorKind::G1: {
      Var f = p.g1.ffn(t, z);
      return p.g1.norm(t, add(z, f));
    }
    case OperatorKind::G0: {
      const std::size_t dd = dims.d * dims.d_h;
      Var gen = p.g0.generator(t, z);
      Var w1 = slice_cols(gen, 0, dd);
      Var w2 = slice_cols(gen, dd, 2 * dd);
      Var h = relu(rowwise_matvec(z, w1, dims.d_h));
      Var u = rowwise_matvec(h, w2, dims.d);
      Var y = p.g0.norm(t, add(z, u));
      Var f = p.g0.ffn(t, y);
      return p.g0.ffn_norm(t, add(y, f));
    }
  }
  throw ConfigError("apply_operator: unknown operator");
}

/// Tensor overload for a single embedding [d] or [1×d].
inline Tensor apply_operator(OperatorKind kind, const Tensor& embedding, const OperatorParams& p,
                             const ModelDims& dims) {
  Tape t(false);
  Tensor row({1, embedding.numel()}, embedding.data);
  Var out = apply_operator(t, kind, t.constant(std::move(row)), p, dims);
  return Tensor(embedding.shape, out.value().data);
}

struct AttentionOutput {
  Var out;      // [N×d]
  Var weights;  // [N×N], rows sum to 1
};

/// Single-head scaled dot-product self-attention across proposals with a
/// residual connection.
inline AttentionOutput pairwise_attend(Tape& t, Var x, const AttentionParams& p) {
  if (x.rows() < 1) throw DimensionError("pairwise_attend: need at least one proposal");
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(x.cols()));
  Var q = p.q(t, x);
  Var k = p.k(t, x);
  Var v = p.v(t, x);
  Var scores = scale(matmul(q, transpose(k)), inv_sqrt_d);
  Var weights = softmax(scores, 1.0);
  Var mixed = p.o(t, matmul(weights, v));
  return {add(x, mixed), weights};
}

struct Refinement {
  Var class_logits;  // [n×(C+1)]
  Var box_logits;    // [n×4], inverse-sigmoid cx, cy, w, h
  Var boxes;         // [n×4], sigmoid of box_logits
};

/// Prediction heads after G0/G1: new class logits and a box refined in
/// inverse-sigmoid space, which keeps centre and size inside (0, 1).
inline Refinement predict(Tape& t, Var z, Var prev_box_logits, const PredictionHeads& h) {
  Var cls = h.cls(t, z);
  Var delta = h.box(t, z);
  Var bl = add(prev_box_logits, delta);
  return {cls, bl, sigmoid(bl)};
}

// ---------------------------------------------------------------------------
// Analytic FLOP model

enum class LayerKind { Matmul, BiasAdd, Elementwise, LayerNorm, Softmax, RowwiseMatvec };

/// Shape of one executed layer. Matmul: m×k·k×n. RowwiseMatvec: m rows, each
/// [1×k]·[k×n]. BiasAdd/LayerNorm/Softmax: m rows of width n. Elementwise: n.
struct LayerShape {
  LayerKind kind;
  std::size_t m = 1;
  std::size_t k = 1;
  std::size_t n = 1;
};

inline double flops_of(const LayerShape& s) {
  switch (s.kind) {
    case LayerKind::Matmul: return static_cast<double>(flops::matmul(s.m, s.k, s.n));
    case LayerKind::BiasAdd: return static_cast<double>(flops::bias_add(s.m, s.n));
    case LayerKind::Elementwise: return static_cast<double>(flops::elementwise(s.n));
    case LayerKind::LayerNorm: return static_cast<double>(flops::layer_norm(s.m, s.n));
    case LayerKind::Softmax: return static_cast<double>(flops::softmax(s.m, s.n));
    case LayerKind::RowwiseMatvec: return static_cast<double>(flops::rowwise_matvec(s.m, s.k, s.n));
  }
  return 0.0;
}

inline double flops_of(const std::vector<LayerShape>& layers) {
  double total = 0.0;
  for (const auto& l : layers) total += flops_of(l);
  return total;
}

namespace layers {

inline void linear(std::vector<LayerShape>& out, std::size_t in, std::size_t width) {
  out.push_back({LayerKind::Matmul, 1, in, width});
  out.push_back({LayerKind::BiasAdd, 1, 1, width});
}

inline void ffn(std::vector<LayerShape>& out, std::size_t d, std::size_t d_ff) {
  linear(out, d, d_ff);
  out.push_back({LayerKind::Elementwise, 1, 1, d_ff});  // relu
  linear(out, d_ff, d);
}

inline void heads(std::vector<LayerShape>& out, const ModelDims& dims) {
  linear(out, dims.d, dims.logits());
  linear(out, dims.d, 4);
  out.push_back({LayerKind::Elementwise, 1, 1, 4});  // box logit update
  out.push_back({LayerKind::Elementwise, 1, 1, 4});  // sigmoid
}

}  // namespace layers

/// Layers executed for one proposal by an operator, including the
/// prediction heads that follow G0/G1.
inline std::vector<LayerShape> operator_layers(OperatorKind kind, const ModelDims& dims) {
  std::vector<LayerShape> out;
  const std::size_t d = dims.d;
  switch (kind) {
    case OperatorKind::G2:
      return out;
    case OperatorKind::G0:
      layers::linear(out, d, 2 * d * dims.d_h);
      out.push_back({LayerKind::RowwiseMatvec, 1, d, dims.d_h});
      out.push_back({LayerKind::Elementwise, 1, 1, dims.d_h});  // relu
      out.push_back({LayerKind::RowwiseMatvec, 1, dims.d_h, d});
      out.push_back({LayerKind::Elementwise, 1, 1, d});  // residual
      out.push_back({LayerKind::LayerNorm, 1, 1, d});
      layers::ffn(out, d, dims.d_ff);
      out.push_back({LayerKind::Elementwise, 1, 1, d});
      out.push_back({LayerKind::LayerNorm, 1, 1, d});
      break;
    case OperatorKind::G1:
      layers::ffn(out, d, dims.d_ff);
      out.push_back({LayerKind::Elementwise, 1, 1, d});
      out.push_back({LayerKind::LayerNorm, 1, 1, d});
      break;
  }
  layers::heads(out, dims);
  return out;
}

inline std::vector<LayerShape> selector_layers(const ModelDims& dims) {
  std::vector<LayerShape> out;
  layers::linear(out, dims.d, dims.d_s);
  out.push_back({LayerKind::Elementwise, 1, 1, dims.d_s});
  layers::linear(out, dims.d_s, dims.d_s);
  out.push_back({LayerKind::Elementwise, 1, 1, dims.d_s});
  layers::linear(out, dims.d_s, 3);
  out.push_back({LayerKind::Softmax, 1, 1, 3});
  return out;
}

/// Per-proposal share of self-attention: projections, the residual, and the
/// proposal's attention to itself (the diagonal of the score matrix).
inline std::vector<LayerShape> attention_proposal_layers(const ModelDims& dims) {
  std::vector<LayerShape> out;
  const std::size_t d = dims.d;
  for (int i = 0; i < 3; ++i) layers::linear(out, d, d);  // q, k, v
  out.push_back({LayerKind::Matmul, 1, d, 1});            // self score
  out.push_back({LayerKind::Elementwise, 1, 1, 1});       // 1/sqrt(d)
  out.push_back({LayerKind::Softmax, 1, 1, 1});
  out.push_back({LayerKind::Matmul, 1, 1, d});            // weighted value
  layers::linear(out, d, d);                              // o
  out.push_back({LayerKind::Elementwise, 1, 1, d});       // residual
  return out;
}

/// Attention work for one unordered proposal pair (both directions).
inline std::vector<LayerShape> attention_pair_layers(const ModelDims& dims) {
  std::vector<LayerShape> out;
  for (int dir = 0; dir < 2; ++dir) {
    out.push_back({LayerKind::Matmul, 1, dims.d, 1});
    out.push_back({LayerKind::Elementwise, 1, 1, 1});
    out.push_back({LayerKind::Softmax, 1, 1, 1});
    out.push_back({LayerKind::Matmul, 1, 1, dims.d});
  }
  return out;
}

/// Per-stage FLOP constants. c_attn is the per-proposal share of the
/// pairwise component, charged whatever operator a proposal receives.
struct CostModel {
  double c_g0 = 0.0;
  double c_g1 = 0.0;
  double c_g2 = 0.0;
  double c_selector = 0.0;
  double c_pair = 0.0;
  double c_attn = 0.0;

  double of(OperatorKind k) const {
    switch (k) {
      case OperatorKind::G0: return c_g0;
      case OperatorKind::G1: return c_g1;
      case OperatorKind::G2: return c_g2;
    }
    return 0.0;
  }
};

inline CostModel derive_cost_model(const ModelDims& dims) {
  dims.validate();
  CostModel c;
  c.c_g0 = flops_of(operator_layers(OperatorKind::G0, dims));
  c.c_g1 = flops_of(operator_layers(OperatorKind::G1, dims));
  c.c_g2 = flops_of(operator_layers(OperatorKind::G2, dims));
  c.c_selector = flops_of(selector_layers(dims));
  c.c_pair = flops_of(attention_pair_layers(dims));
  c.c_attn = flops_of(attention_proposal_layers(dims));
  return c;
}

}  // namespace dpp
