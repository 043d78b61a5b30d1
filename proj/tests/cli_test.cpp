// SPDX-License-Identifier: Apache-2.0
// Runs the dpp executable end to end on tiny configs.

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <map>
#include <sstream>

#include "dpp/complexity.hpp"
#include "dpp/io.hpp"

namespace fs = std::filesystem;
using namespace dpp;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "dpp_cli_test";

struct CliRun {
  int code;
  std::string out, err;
};

CliRun dpp_cli(const std::string& args) {
  fs::create_directories(kRoot);
  const std::string out = (kRoot / "stdout.txt").string(), err = (kRoot / "stderr.txt").string();
  const std::string cmd = std::string(DPP_CLI_PATH) + " " + args + " >" + out + " 2>" + err;
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, read_file(out), read_file(err)};
}

std::string tiny_config(const std::string& name, const std::string& extra = "") {
  const fs::path p = kRoot / name;
  fs::create_directories(kRoot);
  write_file(p.string(),
             "# tiny run\n"
             "train.phase1_steps = 8\n"
             "train.phase2_steps = 8\n"
             "train.batch = 2\n"
             "train.log_every = 2\n"
             "data.train_scenes = 6\n"
             "data.val_scenes = 6\n" +
                 extra);
  return p.string();
}

std::string dir(const std::string& name) {
  const fs::path p = kRoot / name;
  fs::remove_all(p);
  return p.string();
}

// Checkpoints embed the output directory, so compare weights only.
std::vector<double> weights(const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  std::vector<double> out;
  ck.params.for_each([&](const std::string&, Parameter& p) { out.insert(out.end(), p.value.data.begin(), p.value.data.end()); });
  return out;
}

std::string first_line(const std::string& s) { return s.substr(0, s.find('\n')); }

std::size_t lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

std::map<std::string, std::string> metrics(const std::string& path) {
  std::map<std::string, std::string> m;
  std::istringstream in(read_file(path));
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    const auto comma = line.find(',');
    m[line.substr(0, comma)] = line.substr(comma + 1);
  }
  return m;
}

void expect_one_line_error(const CliRun& r) {
  EXPECT_NE(r.code, 0);
  EXPECT_EQ(lines(r.err), 1u) << r.err;
  EXPECT_EQ(r.err.rfind("error: ", 0), 0u) << r.err;
}

// Shared trained run: train then eval, built once.
const std::string& trained_dir() {
  static const std::string d = [] {
    const std::string out = dir("trained");
    const CliRun t = dpp_cli("train --config " + tiny_config("trained.cfg") + " --out " + out);
    EXPECT_EQ(t.code, 0) << t.err;
    const CliRun e = dpp_cli("eval --checkpoint " + out + "/checkpoint.dppc");
    EXPECT_EQ(e.code, 0) << e.err;
    return out;
  }();
  return d;
}

}  // namespace

TEST(Cli, GenDataIsDeterministicAndReportsChecksum) {
  const std::string a = dir("gen_a"), b = dir("gen_b");
  const CliRun ra = dpp_cli("gen-data --seed 5 --count 40 --out " + a);
  const CliRun rb = dpp_cli("gen-data --seed 5 --count 40 --out " + b);
  ASSERT_EQ(ra.code, 0) << ra.err;
  ASSERT_EQ(rb.code, 0) << rb.err;
  EXPECT_EQ(read_file(a + "/train.dpps"), read_file(b + "/train.dpps"));
  EXPECT_NE(ra.out.find("scenes=40 checksum=" + file_checksum(a + "/train.dpps")), std::string::npos);
  EXPECT_EQ(load_dataset(a + "/train.dpps").size(), 40u);
}

TEST(Cli, GenDataZeroCountWritesHeaderOnlyFile) {
  const std::string d = dir("gen_zero");
  const CliRun r = dpp_cli("gen-data --count 0 --split val --out " + d);
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string bytes = read_file(d + "/val.dpps");
  EXPECT_EQ(bytes.size(), 20u);
  EXPECT_TRUE(load_dataset(d + "/val.dpps").empty());
}

TEST(Cli, InvalidInputsExitNonzeroWithOneLineDiagnostic) {
  expect_one_line_error(dpp_cli("train --config " + tiny_config("bad.cfg", "head.alhpa = 3\n") + " --out " + dir("bad")));
  expect_one_line_error(dpp_cli("train --config " + (kRoot / "missing.cfg").string()));
  expect_one_line_error(dpp_cli("eval --checkpoint " + (kRoot / "missing.dppc").string()));
  expect_one_line_error(dpp_cli("train --config " + tiny_config("t.cfg") + " --dataset " + (kRoot / "nope.dpps").string() +
                                " --out " + dir("nodata")));
  expect_one_line_error(dpp_cli("sweep --config " + tiny_config("s.cfg") + " --axis beta --values 1 --out " + dir("sw")));

  std::string ck = read_file(trained_dir() + "/checkpoint.dppc");
  ck.replace(ck.find("version=1"), 9, "version=7");
  write_file((kRoot / "v7.dppc").string(), ck);
  const CliRun r = dpp_cli("eval --checkpoint " + (kRoot / "v7.dppc").string() + " --out " + dir("v7"));
  expect_one_line_error(r);
  EXPECT_NE(r.err.find("version"), std::string::npos);

  EXPECT_NE(dpp_cli("").code, 0);
  EXPECT_NE(dpp_cli("frobnicate").code, 0);
}

TEST(Cli, EvalSchemasMatchDocumentation) {
  const std::string& d = trained_dir();
  EXPECT_EQ(first_line(read_file(d + "/metrics.csv")), "metric,value");
  EXPECT_EQ(first_line(read_file(d + "/groups.csv")), "group,ap,ap50,mean_count");
  EXPECT_EQ(first_line(read_file(d + "/iou_hist.csv")),
            "stage,operator,count,mean_iou,bin0,bin1,bin2,bin3,bin4,bin5,bin6,bin7,bin8,bin9");
  EXPECT_EQ(first_line(read_file(d + "/phase2_log.csv")),
            "phase,step,lr_scale,detection_loss,iou_loss,complexity_loss,mean_g0_last,grad_norm");
  const auto m = metrics(d + "/metrics.csv");
  for (const char* key : {"scenes", "map", "ap50", "ap75", "stage1_ap", "stage6_ap", "head_flops", "runtime_flops",
                          "static_flops", "flops_fraction", "nbar", "mean_g0_stage2", "mean_g0_stage4",
                          "mean_g0_stage6", "mean_target_last"})
    EXPECT_TRUE(m.count(key)) << key;
  EXPECT_EQ(lines(read_file(d + "/groups.csv")), 6u);
  EXPECT_EQ(lines(read_file(d + "/iou_hist.csv")), 10u);
}

TEST(Cli, NbarColumnMatchesFlopsColumn) {
  const auto m = metrics(trained_dir() + "/metrics.csv");
  const CostModel cm = derive_cost_model(ModelDims{});
  const double nbar = equivalent_proposal_number(std::stod(m.at("head_flops")), cm, 6, 24);
  EXPECT_NEAR(std::stod(m.at("nbar")), nbar, 1e-9 * nbar);
}

TEST(Cli, EvalRerunIsByteIdentical) {
  const std::string& d = trained_dir();
  const std::string other = dir("eval_again");
  const CliRun r = dpp_cli("eval --checkpoint " + d + "/checkpoint.dppc --out " + other);
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"metrics.csv", "groups.csv", "iou_hist.csv"})
    EXPECT_EQ(read_file(other + "/" + f), read_file(d + "/" + f)) << f;
}

TEST(Cli, TrainRerunIsByteIdentical) {
  const std::string a = dir("train_again");
  const CliRun r = dpp_cli("train --config " + tiny_config("trained.cfg") + " --out " + a);
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"phase1_log.csv", "phase2_log.csv"})
    EXPECT_EQ(read_file(a + "/" + f), read_file(trained_dir() + "/" + f)) << f;
  for (const char* f : {"checkpoint.dppc", "phase1.dppc"})
    EXPECT_EQ(weights(a + "/" + f), weights(trained_dir() + "/" + f)) << f;
}

TEST(Cli, SingleValueSweepReducesToTrainAndEval) {
  const std::string d = dir("sweep_one");
  const CliRun r = dpp_cli("sweep --config " + tiny_config("trained.cfg") + " --axis alpha --values 2 --out " + d);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_file(d + "/alpha_2_metrics.csv"), read_file(trained_dir() + "/metrics.csv"));
  EXPECT_EQ(weights(d + "/alpha_2_checkpoint.dppc"), weights(trained_dir() + "/checkpoint.dppc"));
  const std::string sweep = read_file(d + "/sweep.csv");
  EXPECT_EQ(first_line(sweep), "axis,value,head_flops,map,mean_g0_last");
  const auto m = metrics(trained_dir() + "/metrics.csv");
  EXPECT_NE(sweep.find("alpha,2," + m.at("head_flops") + "," + m.at("map") + "," + m.at("mean_g0_stage6")),
            std::string::npos)
      << sweep;
}

TEST(Cli, LossAblationSweepRunsThreeConfigurations) {
  const std::string d = dir("sweep_loss");
  const CliRun r = dpp_cli("sweep --config " + tiny_config("trained.cfg") + " --axis loss_ablation --values iou,complexity,both " +
                        "--checkpoint " + trained_dir() + "/phase1.dppc --out " + d);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(lines(read_file(d + "/sweep.csv")), 4u);
  EXPECT_EQ(weights(d + "/loss_ablation_both_checkpoint.dppc"), weights(trained_dir() + "/checkpoint.dppc"));
}

TEST(Cli, OracleWritesFrontierAndPolicyReport) {
  const std::string d = dir("oracle");
  const CliRun r = dpp_cli("oracle --checkpoint " + trained_dir() + "/checkpoint.dppc --proposals 2 --images 3 --out " + d);
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string frontier = read_file(d + "/frontier.csv");
  EXPECT_EQ(first_line(frontier), "image,budget_flops,best_precision,assignment_digest");
  EXPECT_GT(lines(frontier), 3u);
  const std::string policy = read_file(d + "/policy_vs_oracle.csv");
  EXPECT_EQ(lines(policy), 4u);
  std::istringstream in(policy);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string x;
    while (std::getline(ss, x, ',')) f.push_back(x);
    ASSERT_EQ(f.size(), 5u);
    EXPECT_LE(std::stod(f[2]), std::stod(f[3]) + 1e-12);
  }
  const CliRun again = dpp_cli("oracle --checkpoint " + trained_dir() + "/checkpoint.dppc --proposals 2 --images 3 --out " +
                            dir("oracle_again"));
  ASSERT_EQ(again.code, 0);
  EXPECT_EQ(read_file(kRoot.string() + "/oracle_again/frontier.csv"), frontier);

  const CliRun capped = dpp_cli("oracle --checkpoint " + trained_dir() + "/checkpoint.dppc --proposals 12 --cap 100 --out " +
                             dir("oracle_cap"));
  expect_one_line_error(capped);
}

TEST(Cli, ManifestListsEveryOutput) {
  const std::string& d = trained_dir();
  const std::string manifest = read_file(d + "/MANIFEST");
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(d))
    if (e.is_regular_file() && e.path().filename() != "MANIFEST") {
      ++files;
      const std::string name = e.path().filename().string();
      EXPECT_NE(manifest.find(file_checksum(e.path().string()) + "  " +
                              std::to_string(fs::file_size(e.path())) + "  " + name + "\n"),
                std::string::npos)
          << name;
    }
  EXPECT_EQ(lines(manifest), files);
}
