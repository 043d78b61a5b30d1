// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "dpp/boxgeo.hpp"
#include "dpp/errors.hpp"
#include "dpp/head.hpp"
#include "dpp/operators.hpp"

namespace dpp {

/// Head FLOPs when every proposal runs G0 at every one of `stages` stages.
inline double equal_cost(std::size_t n, int stages, const CostModel& cm) {
  if (n < 1) throw DimensionError("equal_cost: need at least one proposal");
  if (stages < 1) throw DimensionError("equal_cost: need at least one stage");
  const double nn = static_cast<double>(n);
  return stages * (nn * (cm.c_g0 + cm.c_attn) + nn * (nn - 1.0) / 2.0 * cm.c_pair);
}

/// Head FLOPs for a routed head; selectors are charged once per proposal at
/// selector stages, operators follow inheritance.
inline double unequal_cost(const Assignment& a, const CostModel& cm, const HeadConfig& cfg, std::size_t n) {
  if (n < 1) throw DimensionError("unequal_cost: need at least one proposal");
  const auto per_stage = stage_operators(a, cfg, n);
  const double nn = static_cast<double>(n);
  double total = 0.0;
  for (int k = 0; k < cfg.num_stages; ++k) {
    double stage = nn * cm.c_attn + nn * (nn - 1.0) / 2.0 * cm.c_pair;
    if (cfg.selector_index(k + 1) >= 0) stage += nn * cm.c_selector;
    for (OperatorKind op : per_stage[k]) stage += cm.of(op);
    total += stage;
  }
  return total;
}

inline double unequal_cost(const Assignment& a, const CostModel& cm, const HeadConfig& cfg) {
  return unequal_cost(a, cm, cfg, a.proposals() > 0 ? a.proposals() : static_cast<std::size_t>(cfg.num_proposals));
}

/// Head FLOPs divided by what one proposal costs in the static all-G0 head.
inline double equivalent_proposal_number(double head_cost, const CostModel& cm, int stages, std::size_t n) {
  const double per_proposal = equal_cost(n, stages, cm) / static_cast<double>(n);
  if (!(per_proposal > 0.0)) throw DomainError("equivalent_proposal_number: per-proposal cost must be positive");
  return head_cost / per_proposal;
}

inline Assignment uniform_assignment(std::size_t selectors, std::size_t n, OperatorKind k) {
  return {std::vector<std::vector<OperatorKind>>(selectors, std::vector<OperatorKind>(n, k))};
}

/// FNV-1a 64 over (selectors, N, operator indices in row-major order),
/// rendered as 16 lowercase hex digits.
inline std::string assignment_digest(const Assignment& a) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto byte = [&](std::uint8_t b) {
    h ^= b;
    h *= 0x100000001b3ULL;
  };
  auto word = [&](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) byte(static_cast<std::uint8_t>(v >> (8 * i)));
  };
  word(a.selectors());
  word(a.proposals());
  for (const auto& row : a.ops)
    for (OperatorKind k : row) byte(static_cast<std::uint8_t>(index_of(k)));
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Exhaustive assignment oracle

struct FrontierPoint {
  double budget = 0.0;
  bool feasible = false;
  double best_precision = 0.0;
  double best_cost = 0.0;
  Assignment best_assignment;
};

struct ScoredAssignment {
  Assignment assignment;
  double cost = 0.0;
  double precision = 0.0;
};

using PrecisionFn = std::function<double(const Assignment&)>;
using CostFn = std::function<double(const Assignment&)>;

struct OracleLimits {
  std::uint64_t max_assignments = 59049;  // 3^10
};

/// Number of assignments for N proposals and S selector stages, or nullopt on
/// overflow past 2^63.
inline std::optional<std::uint64_t> assignment_count(std::size_t n, std::size_t selectors) {
  std::uint64_t c = 1;
  for (std::size_t i = 0; i < n * selectors; ++i) {
    if (c > (std::uint64_t{1} << 62) / 3) return std::nullopt;
    c *= 3;
  }
  return c;
}

/// Scores every assignment, enumerated in base-3 order with the first
/// selector's first proposal as the most significant digit.
inline std::vector<ScoredAssignment> enumerate_assignments(std::size_t n, std::size_t selectors,
                                                           const PrecisionFn& precision, const CostFn& cost,
                                                           const OracleLimits& limits = {}) {
  if (n < 1 || selectors < 1) throw DimensionError("oracle: need at least one proposal and one selector");
  const auto count = assignment_count(n, selectors);
  if (!count || *count > limits.max_assignments)
    throw ConfigError("oracle: 3^(" + std::to_string(n * selectors) + ") assignments exceed the enumeration cap of " +
                      std::to_string(limits.max_assignments) + "; raise the cap to at least " +
                      (count ? std::to_string(*count) : std::string("2^63")));
  std::vector<ScoredAssignment> out;
  out.reserve(*count);
  const std::size_t digits = n * selectors;
  for (std::uint64_t code = 0; code < *count; ++code) {
    Assignment a{std::vector<std::vector<OperatorKind>>(selectors, std::vector<OperatorKind>(n))};
    std::uint64_t c = code;
    for (std::size_t pos = digits; pos-- > 0;) {
      a.ops[pos / n][pos % n] = static_cast<OperatorKind>(c % 3);
      c /= 3;
    }
    out.push_back({a, cost(a), precision(a)});
  }
  return out;
}

/// Best precision under each budget; ties go to the lower cost, then to the
/// earlier assignment in enumeration order.
inline std::vector<FrontierPoint> frontier_from(const std::vector<ScoredAssignment>& scored,
                                                const std::vector<double>& budgets) {
  std::vector<FrontierPoint> out;
  for (double budget : budgets) {
    FrontierPoint p;
    p.budget = budget;
    const ScoredAssignment* best = nullptr;
    for (const auto& s : scored) {
      if (s.cost > budget) continue;
      if (!best || s.precision > best->precision || (s.precision == best->precision && s.cost < best->cost))
        best = &s;
    }
    if (best) {
      p.feasible = true;
      p.best_precision = best->precision;
      p.best_cost = best->cost;
      p.best_assignment = best->assignment;
    }
    out.push_back(std::move(p));
  }
  return out;
}

/// Per-image AP of the head run with a fixed assignment.
inline double assignment_precision(const ProposalBatch& batch, std::span<const GroundTruth> truths,
                                   const HeadParams& params, const HeadConfig& cfg, const Assignment& a) {
  Tape t(false);
  ForwardOptions opt;
  opt.forced = &a;
  const HeadTrace trace = forward(t, batch, params, cfg, opt);
  const auto dets = detections_of(trace.stages.back(), cfg.dims.num_classes);
  return average_precision(dets, truths).mean;
}

struct OracleInstance {
  const ProposalBatch* batch = nullptr;
  std::span<const GroundTruth> truths;
  const HeadParams* params = nullptr;
  const HeadConfig* cfg = nullptr;
};

inline std::vector<ScoredAssignment> score_instance(const OracleInstance& in, const OracleLimits& limits = {}) {
  const CostModel cm = derive_cost_model(in.cfg->dims);
  const std::size_t n = in.batch->size();
  return enumerate_assignments(
      n, in.cfg->selector_stages.size(),
      [&](const Assignment& a) { return assignment_precision(*in.batch, in.truths, *in.params, *in.cfg, a); },
      [&](const Assignment& a) { return unequal_cost(a, cm, *in.cfg, n); }, limits);
}

inline std::vector<FrontierPoint> oracle_frontier(const OracleInstance& in, const std::vector<double>& budgets,
                                                  const OracleLimits& limits = {}) {
  return frontier_from(score_instance(in, limits), budgets);
}

/// Budgets at every distinct achievable cost, ascending.
inline std::vector<double> distinct_costs(const std::vector<ScoredAssignment>& scored) {
  std::vector<double> c;
  for (const auto& s : scored) c.push_back(s.cost);
  std::sort(c.begin(), c.end());
  c.erase(std::unique(c.begin(), c.end()), c.end());
  return c;
}

struct PolicyReport {
  double policy_cost = 0.0;
  double policy_precision = 0.0;
  double oracle_precision = 0.0;  // oracle optimum at policy_cost
  Assignment policy_assignment;
};

/// Learned routing (inference mode) against the exhaustive optimum at the
/// same budget.
inline PolicyReport policy_vs_oracle(const OracleInstance& in, const OracleLimits& limits = {}) {
  Tape t(false);
  const HeadTrace trace = forward(t, *in.batch, *in.params, *in.cfg);
  PolicyReport r;
  for (const auto& s : trace.selectors) r.policy_assignment.ops.push_back(s.chosen);
  const CostModel cm = derive_cost_model(in.cfg->dims);
  r.policy_cost = unequal_cost(r.policy_assignment, cm, *in.cfg, in.batch->size());
  r.policy_precision =
      average_precision(detections_of(trace.stages.back(), in.cfg->dims.num_classes), in.truths).mean;
  const auto frontier = oracle_frontier(in, {r.policy_cost}, limits);
  r.oracle_precision = frontier[0].best_precision;
  return r;
}

}  // namespace dpp
