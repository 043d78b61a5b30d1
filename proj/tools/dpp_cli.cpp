// SPDX-License-Identifier: Apache-2.0
// dpp: data generation, training, evaluation, sweeps, and oracle runs.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dpp/complexity.hpp"
#include "dpp/config.hpp"
#include "dpp/io.hpp"
#include "dpp/synthbench.hpp"

namespace fs = std::filesystem;
using namespace dpp;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string dataset;
  std::string eval_dataset;
  std::string checkpoint;
  std::string axis;
  std::string values;
  std::string split = "train";
  std::optional<std::size_t> count;
  std::size_t proposals = 3;
  std::size_t images = 20;
  std::size_t cap = 59049;
};

RunConfig resolve_config(const Options& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : load_config(o.config);
  if (o.seed) c.bench.seed = *o.seed;
  if (!o.out.empty()) c.out_dir = o.out;
  c.validate();
  return c;
}

std::string path_in(const RunConfig& c, const std::string& name) { return (fs::path(c.out_dir) / name).string(); }

std::vector<Scene> scenes_or_generate(const std::string& path, const RunConfig& c, Split split) {
  if (!path.empty()) return load_dataset(path);
  const std::size_t n = split == Split::Train ? c.bench.train_scenes : c.bench.val_scenes;
  return generate_scenes(c.bench.seed, split, n, c.bench.scene);
}

void finish(const RunConfig& c) {
  write_file(path_in(c, "config.txt"), to_text(c));
  write_manifest(c.out_dir);
}

void write_eval(const RunConfig& c, const EvalReport& r, const std::string& prefix) {
  metrics_table(r, c.bench.head).save(path_in(c, prefix + "metrics.csv"));
  groups_table(r).save(path_in(c, prefix + "groups.csv"));
  histogram_table(r).save(path_in(c, prefix + "iou_hist.csv"));
}

int cmd_gen_data(const Options& o) {
  const RunConfig c = resolve_config(o);
  Split split;
  if (o.split == "train") split = Split::Train;
  else if (o.split == "val") split = Split::Val;
  else throw ConfigError("--split must be train or val");
  const std::size_t n = o.count ? *o.count : (split == Split::Train ? c.bench.train_scenes : c.bench.val_scenes);
  const auto scenes = generate_scenes(c.bench.seed, split, n, c.bench.scene);
  const std::string path = path_in(c, o.split + ".dpps");
  save_dataset(path, scenes);
  finish(c);
  std::cout << "scenes=" << scenes.size() << " checksum=" << file_checksum(path) << " path=" << path << "\n";
  return 0;
}

Checkpoint phase1_checkpoint(const RunConfig& c, const std::vector<Scene>& train) {
  TrainResult p1 = train_phase1(c.bench, train);
  train_log_table(p1.log).save(path_in(c, "phase1_log.csv"));
  if (p1.diverged) {
    save_checkpoint(path_in(c, "phase1.dppc"), {c, p1.params});
    finish(c);
    throw DivergenceError("training diverged (" + p1.message + "); last good checkpoint saved", 0);
  }
  Checkpoint ck{c, p1.params};
  save_checkpoint(path_in(c, "phase1.dppc"), ck);
  return ck;
}

/// Phase-1 checkpoint from --checkpoint, or trained now.
Checkpoint shared_phase1(const Options& o, const RunConfig& c, const std::vector<Scene>& train) {
  if (o.checkpoint.empty()) return phase1_checkpoint(c, train);
  Checkpoint ck = load_checkpoint(o.checkpoint);
  const HeadConfig& a = ck.config.bench.head;
  const HeadConfig& b = c.bench.head;
  if (a.num_stages != b.num_stages || a.dims.d != b.dims.d || a.dims.d_h != b.dims.d_h ||
      a.dims.d_ff != b.dims.d_ff || a.dims.num_classes != b.dims.num_classes || a.dims.d_s != b.dims.d_s)
    throw ConfigError("checkpoint '" + o.checkpoint + "' has a different model shape than the config");
  ck.params.selectors.clear();
  return ck;
}

TrainResult run_phase2(const RunConfig& c, const std::vector<Scene>& train, const HeadParams& phase1,
                       const std::string& log_name, const std::string& ck_name) {
  TrainResult p2 = train_phase2(c.bench, train, phase1);
  train_log_table(p2.log).save(path_in(c, log_name));
  save_checkpoint(path_in(c, ck_name), {c, p2.params});
  if (p2.diverged) {
    finish(c);
    throw DivergenceError("training diverged (" + p2.message + "); last good checkpoint saved to " +
                              path_in(c, ck_name),
                          0);
  }
  return p2;
}

int cmd_train(const Options& o) {
  const RunConfig c = resolve_config(o);
  const auto train = scenes_or_generate(o.dataset, c, Split::Train);
  const Checkpoint p1 = shared_phase1(o, c, train);
  run_phase2(c, train, p1.params, "phase2_log.csv", "checkpoint.dppc");
  finish(c);
  std::cout << "checkpoint=" << path_in(c, "checkpoint.dppc") << "\n";
  return 0;
}

int cmd_eval(const Options& o) {
  if (o.checkpoint.empty()) throw ConfigError("eval requires --checkpoint");
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  RunConfig c = ck.config;
  if (!o.out.empty()) c.out_dir = o.out;
  BenchConfig bench = c.bench;
  if (!ck.has_selectors()) bench.head.selector_stages.clear();
  const auto scenes = scenes_or_generate(o.dataset, c, Split::Val);
  const EvalReport r = evaluate(ck.params, bench, scenes);
  write_eval(c, r, "");
  finish(c);
  std::cout << "map=" << csv_num(r.map) << " head_flops=" << csv_num(r.mean_flops) << " nbar=" << csv_num(r.nbar)
            << "\n";
  return 0;
}

std::vector<std::string> split_values(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  if (out.empty()) throw ConfigError("--values must list at least one value");
  return out;
}

RunConfig sweep_point(RunConfig c, const std::string& axis, const std::string& value) {
  if (axis == "lambda") set_config_value(c, "head.lambda", value);
  else if (axis == "alpha") set_config_value(c, "head.alpha", value);
  else if (axis == "tmin") set_config_value(c, "head.tmin_last", value);
  else if (axis == "N") set_config_value(c, "head.num_proposals", value);
  else if (axis == "loss_ablation") {
    if (value == "both") {
      c.bench.head.use_iou_loss = c.bench.head.use_complexity_loss = true;
    } else if (value == "iou") {
      c.bench.head.use_iou_loss = true;
      c.bench.head.use_complexity_loss = false;
    } else if (value == "complexity") {
      c.bench.head.use_iou_loss = false;
      c.bench.head.use_complexity_loss = true;
    } else {
      throw ConfigError("loss_ablation values are both, iou, complexity; got '" + value + "'");
    }
  } else {
    throw ConfigError("--axis must be one of lambda, alpha, tmin, N, loss_ablation; got '" + axis + "'");
  }
  c.validate();
  return c;
}

int cmd_sweep(const Options& o) {
  const RunConfig c = resolve_config(o);
  const auto values = split_values(o.values);
  std::vector<RunConfig> points;
  for (const auto& v : values) points.push_back(sweep_point(c, o.axis, v));  // validate all before training
  const auto train = scenes_or_generate(o.dataset, c, Split::Train);
  const auto val = scenes_or_generate(o.eval_dataset, c, Split::Val);
  const Checkpoint p1 = shared_phase1(o, c, train);
  CsvTable table({"axis", "value", "head_flops", "map", "mean_g0_last"});
  for (std::size_t i = 0; i < values.size(); ++i) {
    RunConfig pc = points[i];
    pc.out_dir = c.out_dir;
    const std::string tag = o.axis + "_" + values[i] + "_";
    const TrainResult p2 = run_phase2(pc, train, p1.params, tag + "log.csv", tag + "checkpoint.dppc");
    const EvalReport r = evaluate(p2.params, pc.bench, val);
    write_eval(pc, r, tag);
    table.add({o.axis, values[i], csv_num(r.mean_flops), csv_num(r.map),
               csv_num(r.mean_g0.empty() ? 0.0 : r.mean_g0.back())});
  }
  table.save(path_in(c, "sweep.csv"));
  finish(c);
  std::cout << table.str();
  return 0;
}

int cmd_oracle(const Options& o) {
  if (o.checkpoint.empty()) throw ConfigError("oracle requires --checkpoint");
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  if (!ck.has_selectors()) throw ConfigError("oracle requires a checkpoint with trained selectors");
  RunConfig c = ck.config;
  if (!o.out.empty()) c.out_dir = o.out;
  if (o.seed) c.bench.seed = *o.seed;
  set_config_value(c, "head.num_proposals", std::to_string(o.proposals));
  c.bench.head.tmin_last = std::min(c.bench.head.tmin_last, static_cast<double>(o.proposals));
  c.validate();
  const auto scenes = o.dataset.empty() ? generate_scenes(c.bench.seed, Split::Val, o.images, c.bench.scene)
                                        : load_dataset(o.dataset);
  const ProposalEncoder enc = c.bench.make_encoder();
  OracleLimits limits{o.cap};
  CsvTable frontier({"image", "budget_flops", "best_precision", "assignment_digest"});
  CsvTable policy({"image", "policy_cost", "policy_precision", "oracle_precision", "policy_digest"});
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const ProposalBatch batch = encode_proposals(scenes[i], c.bench.encoder, enc);
    OracleInstance in{&batch, scenes[i].truths, &ck.params, &c.bench.head};
    const auto scored = score_instance(in, limits);
    const auto points = frontier_from(scored, distinct_costs(scored));
    for (const auto& p : points)
      frontier.add({std::to_string(i), csv_num(p.budget), p.feasible ? csv_num(p.best_precision) : "",
                    p.feasible ? assignment_digest(p.best_assignment) : "infeasible"});
    const PolicyReport pr = policy_vs_oracle(in, limits);
    policy.add({std::to_string(i), csv_num(pr.policy_cost), csv_num(pr.policy_precision), csv_num(pr.oracle_precision),
                assignment_digest(pr.policy_assignment)});
  }
  frontier.save(path_in(c, "frontier.csv"));
  policy.save(path_in(c, "policy_vs_oracle.csv"));
  finish(c);
  std::cout << "images=" << scenes.size() << " frontier=" << path_in(c, "frontier.csv") << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic proposal processing on a synthetic detection benchmark"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "key=value config file");
    sub->add_option("--seed", o.seed, "global seed (overrides the config)");
    sub->add_option("--out", o.out, "output directory (overrides the config)");
  };

  auto* gen = app.add_subcommand("gen-data", "write a scene dataset");
  common(gen);
  gen->add_option("--count", o.count, "number of scenes (default: split size from the config)");
  gen->add_option("--split", o.split, "train or val")->check(CLI::IsMember({"train", "val"}));

  auto* train = app.add_subcommand("train", "two-phase training");
  common(train);
  train->add_option("--dataset", o.dataset, "training scenes (default: generated from the config)");
  train->add_option("--checkpoint", o.checkpoint, "start phase 2 from this phase-1 checkpoint");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", o.checkpoint, "checkpoint to evaluate")->required();
  eval->add_option("--dataset", o.dataset, "evaluation scenes (default: validation split from the config)");
  eval->add_option("--out", o.out, "output directory (default: the checkpoint's)");

  auto* sweep = app.add_subcommand("sweep", "phase-2 sweep from a shared phase-1 checkpoint");
  common(sweep);
  sweep->add_option("--axis", o.axis, "lambda, alpha, tmin, N, or loss_ablation")->required();
  sweep->add_option("--values", o.values, "comma-separated values")->required();
  sweep->add_option("--dataset", o.dataset, "training scenes");
  sweep->add_option("--eval-dataset", o.eval_dataset, "evaluation scenes");
  sweep->add_option("--checkpoint", o.checkpoint, "phase-1 checkpoint (default: train one)");

  auto* oracle = app.add_subcommand("oracle", "exhaustive assignment frontier on tiny instances");
  oracle->add_option("--checkpoint", o.checkpoint, "trained checkpoint")->required();
  oracle->add_option("--dataset", o.dataset, "scenes (default: generated)");
  oracle->add_option("--out", o.out, "output directory");
  oracle->add_option("--seed", o.seed, "scene seed");
  oracle->add_option("--proposals", o.proposals, "proposals per image");
  oracle->add_option("--images", o.images, "generated images");
  oracle->add_option("--cap", o.cap, "maximum number of enumerated assignments");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gen) return cmd_gen_data(o);
    if (*train) return cmd_train(o);
    if (*eval) return cmd_eval(o);
    if (*sweep) return cmd_sweep(o);
    if (*oracle) return cmd_oracle(o);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
