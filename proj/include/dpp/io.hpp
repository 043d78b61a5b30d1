// SPDX-License-Identifier: Apache-2.0
#pragma once

// File formats: checkpoints, scene datasets, CSV tables, and the output
// manifest. Layouts are documented in docs/formats.md.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dpp/config.hpp"
#include "dpp/errors.hpp"
#include "dpp/head.hpp"
#include "dpp/synthbench.hpp"

namespace dpp {

inline constexpr char kCheckpointMagic[] = "DPPCKPT1";
inline constexpr int kCheckpointVersion = 1;
inline constexpr char kDatasetMagic[8] = {'D', 'P', 'P', 'S', 'C', 'N', '0', '1'};
inline constexpr std::uint32_t kDatasetVersion = 1;

// ---------------------------------------------------------------------------
// Bytes

inline std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot write '" + path + "'");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw FormatError("write failed for '" + path + "'");
}

inline std::string file_checksum(const std::string& path) { return hex64(fnv1a64(read_file(path))); }

namespace io_detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f64(std::string& out, double d) {
  std::uint64_t v;
  std::memcpy(&v, &d, 8);
  put_u64(out, v);
}

class Reader {
 public:
  Reader(const std::string& bytes, std::string what) : b_(bytes), what_(std::move(what)) {}
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw FormatError(what_ + ": truncated");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  double f64() {
    const std::uint64_t v = u64();
    double d;
    std::memcpy(&d, &v, 8);
    return d;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }
  std::size_t pos() const { return pos_; }
  void seek(std::size_t p) { pos_ = p; }

 private:
  const std::string& b_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace io_detail

// ---------------------------------------------------------------------------
// Scene datasets

inline std::string encode_dataset(const std::vector<Scene>& scenes) {
  std::string out(kDatasetMagic, 8);
  io_detail::put_u32(out, kDatasetVersion);
  io_detail::put_u64(out, scenes.size());
  for (const Scene& s : scenes) {
    io_detail::put_u64(out, s.seed);
    io_detail::put_u32(out, static_cast<std::uint32_t>(s.M()));
    for (const auto& g : s.truths) {
      io_detail::put_f64(out, g.box.x_min);
      io_detail::put_f64(out, g.box.y_min);
      io_detail::put_f64(out, g.box.x_max);
      io_detail::put_f64(out, g.box.y_max);
      io_detail::put_u32(out, static_cast<std::uint32_t>(g.label));
    }
  }
  return out;
}

inline std::vector<Scene> decode_dataset(const std::string& bytes, const std::string& what = "dataset") {
  io_detail::Reader r(bytes, what);
  if (r.bytes(8) != std::string(kDatasetMagic, 8)) throw FormatError(what + ": not a scene dataset (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kDatasetVersion)
    throw FormatError(what + ": unsupported dataset version " + std::to_string(version));
  const std::uint64_t count = r.u64();
  std::vector<Scene> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    Scene s;
    s.seed = r.u64();
    const std::uint32_t m = r.u32();
    for (std::uint32_t j = 0; j < m; ++j) {
      GroundTruth g;
      g.box.x_min = r.f64();
      g.box.y_min = r.f64();
      g.box.x_max = r.f64();
      g.box.y_max = r.f64();
      g.label = static_cast<int>(r.u32());
      if (!g.box.valid() || !g.box.inside_unit()) throw FormatError(what + ": invalid box in scene " + std::to_string(i));
      s.truths.push_back(g);
    }
    out.push_back(std::move(s));
  }
  if (!r.done()) throw FormatError(what + ": trailing bytes after " + std::to_string(count) + " scenes");
  return out;
}

inline void save_dataset(const std::string& path, const std::vector<Scene>& scenes) {
  write_file(path, encode_dataset(scenes));
}

inline std::vector<Scene> load_dataset(const std::string& path) { return decode_dataset(read_file(path), path); }

// ---------------------------------------------------------------------------
// Checkpoints

struct Checkpoint {
  RunConfig config;
  HeadParams params;  // selectors present iff trained through phase 2

  bool has_selectors() const { return !params.selectors.empty(); }
};

inline std::string encode_checkpoint(const Checkpoint& ck) {
  std::string head = std::string(kCheckpointMagic) + "\nversion=" + std::to_string(kCheckpointVersion) + "\n";
  head += "[config]\n" + to_text(ck.config);
  head += "[tensors]\n";
  std::string data;
  std::size_t offset = 0;
  HeadParams& p = const_cast<HeadParams&>(ck.params);
  p.for_each([&](const std::string& name, Parameter& param) {
    const Tensor& t = param.value;
    std::string dims;
    for (std::size_t i = 0; i < t.shape.size(); ++i) dims += (i ? "x" : "") + std::to_string(t.shape[i]);
    head += name + " " + dims + " " + std::to_string(offset) + " " + std::to_string(t.numel()) + "\n";
    for (double v : t.data) io_detail::put_f64(data, v);
    offset += t.numel();
  });
  head += "[data]\n";
  return head + data;
}

inline Checkpoint decode_checkpoint(const std::string& bytes, const std::string& what = "checkpoint") {
  const auto data_tag = bytes.find("\n[data]\n");
  if (bytes.rfind(kCheckpointMagic, 0) != 0 || data_tag == std::string::npos)
    throw FormatError(what + ": not a checkpoint (bad magic)");
  std::istringstream in(bytes.substr(0, data_tag + 1));
  std::string line;
  std::getline(in, line);
  std::getline(in, line);
  if (line.rfind("version=", 0) != 0) throw FormatError(what + ": missing version line");
  if (line != "version=" + std::to_string(kCheckpointVersion))
    throw FormatError(what + ": unsupported checkpoint " + line + " (expected version=" +
                      std::to_string(kCheckpointVersion) + ")");
  std::getline(in, line);
  if (line != "[config]") throw FormatError(what + ": missing [config] section");
  std::string config_text;
  while (std::getline(in, line) && line != "[tensors]") config_text += line + "\n";
  if (line != "[tensors]") throw FormatError(what + ": missing [tensors] section");

  struct Entry {
    Shape shape;
    std::size_t offset, count;
  };
  std::map<std::string, Entry> entries;
  bool any_selector = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string name, dims;
    Entry e{};
    if (!(ls >> name >> dims >> e.offset >> e.count)) throw FormatError(what + ": bad tensor line '" + line + "'");
    std::stringstream ds(dims);
    std::string d;
    while (std::getline(ds, d, 'x')) e.shape.push_back(std::stoul(d));
    entries[name] = e;
    any_selector = any_selector || name.rfind("selector", 0) == 0;
  }

  Checkpoint ck;
  ck.config = parse_config(config_text);
  ck.config.validate();
  Rng dummy(0);
  ck.params = HeadParams(ck.config.bench.head, dummy);
  if (any_selector) ck.params.add_selectors(ck.config.bench.head, dummy);
  const std::size_t base = data_tag + 8;
  io_detail::Reader r(bytes, what);
  std::size_t used = 0;
  ck.params.for_each([&](const std::string& name, Parameter& p) {
    auto it = entries.find(name);
    if (it == entries.end()) throw FormatError(what + ": missing tensor '" + name + "'");
    if (it->second.shape != p.value.shape)
      throw FormatError(what + ": tensor '" + name + "' has shape " + shape_str(it->second.shape) + ", expected " +
                        shape_str(p.value.shape));
    r.seek(base + 8 * it->second.offset);
    for (double& v : p.value.data) v = r.f64();
    used += it->second.count;
  });
  std::size_t expected = 0;
  ck.params.for_each([&](const std::string&, Parameter&) { ++expected; });
  if (entries.size() != expected) throw FormatError(what + ": unexpected extra tensors");
  if (bytes.size() != base + 8 * used) throw FormatError(what + ": data section size mismatch");
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) { write_file(path, encode_checkpoint(ck)); }

inline Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path), path); }

// ---------------------------------------------------------------------------
// CSV

/// Fixed-precision number formatting shared by every CSV writer.
inline std::string csv_num(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

  void add(std::vector<std::string> row) {
    if (row.size() != header_.size()) throw DimensionError("csv row has the wrong number of fields");
    rows_.push_back(std::move(row));
  }

  const std::vector<std::string>& header() const { return header_; }
  std::size_t rows() const { return rows_.size(); }

  std::string str() const {
    std::string out = join(header_);
    for (const auto& r : rows_) out += join(r);
    return out;
  }

  void save(const std::string& path) const { write_file(path, str()); }

 private:
  static std::string join(const std::vector<std::string>& fields) {
    std::string s;
    for (std::size_t i = 0; i < fields.size(); ++i) s += (i ? "," : "") + fields[i];
    return s + "\n";
  }
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

inline CsvTable train_log_table(const std::vector<LogRow>& log) {
  CsvTable t({"phase", "step", "lr_scale", "detection_loss", "iou_loss", "complexity_loss", "mean_g0_last",
              "grad_norm"});
  for (const auto& r : log)
    t.add({std::to_string(r.phase), std::to_string(r.step), csv_num(r.lr_scale), csv_num(r.detection_loss),
           csv_num(r.iou_loss), csv_num(r.complexity_loss), csv_num(r.mean_g0_last), csv_num(r.grad_norm)});
  return t;
}

/// Long format: one metric per row.
inline CsvTable metrics_table(const EvalReport& r, const HeadConfig& head) {
  CsvTable t({"metric", "value"});
  t.add({"scenes", std::to_string(r.scenes)});
  t.add({"map", csv_num(r.map)});
  t.add({"ap50", csv_num(r.ap50)});
  t.add({"ap75", csv_num(r.ap75)});
  for (std::size_t k = 0; k < r.stage_ap.size(); ++k) t.add({"stage" + std::to_string(k + 1) + "_ap", csv_num(r.stage_ap[k])});
  t.add({"head_flops", csv_num(r.mean_flops)});
  t.add({"runtime_flops", csv_num(r.mean_runtime_flops)});
  t.add({"static_flops", csv_num(r.static_flops)});
  t.add({"flops_fraction", csv_num(r.mean_flops / r.static_flops)});
  t.add({"nbar", csv_num(r.nbar)});
  for (std::size_t s = 0; s < r.mean_g0.size(); ++s)
    t.add({"mean_g0_stage" + std::to_string(head.selector_stages[s]), csv_num(r.mean_g0[s])});
  t.add({"mean_target_last", csv_num(r.mean_target_last)});
  return t;
}

inline CsvTable groups_table(const EvalReport& r) {
  CsvTable t({"group", "ap", "ap50", "mean_count"});
  for (const auto& g : r.groups) t.add({g.name, csv_num(g.ap), csv_num(g.ap50), csv_num(g.mean_count)});
  return t;
}

inline CsvTable histogram_table(const EvalReport& r) {
  std::vector<std::string> header{"stage", "operator", "count", "mean_iou"};
  for (int b = 0; b < 10; ++b) header.push_back("bin" + std::to_string(b));
  CsvTable t(header);
  for (const auto& h : r.histograms) {
    std::vector<std::string> row{std::to_string(h.stage), to_string(h.op), std::to_string(h.count), csv_num(h.mean_iou)};
    for (auto c : h.bins) row.push_back(std::to_string(c));
    t.add(row);
  }
  return t;
}

inline CsvTable frontier_table(const std::vector<FrontierPoint>& points) {
  CsvTable t({"budget_flops", "best_precision", "assignment_digest"});
  for (const auto& p : points)
    t.add({csv_num(p.budget), p.feasible ? csv_num(p.best_precision) : "",
           p.feasible ? assignment_digest(p.best_assignment) : "infeasible"});
  return t;
}

// ---------------------------------------------------------------------------
// Manifest

/// Writes MANIFEST listing every regular file under `dir` (except MANIFEST
/// itself) as "<fnv1a64 hex>  <bytes>  <relative path>", sorted by path.
inline void write_manifest(const std::string& dir) {
  std::vector<std::string> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
    if (e.is_regular_file()) {
      const std::string rel = std::filesystem::relative(e.path(), dir).generic_string();
      if (rel != "MANIFEST") files.push_back(rel);
    }
  std::sort(files.begin(), files.end());
  std::string out;
  for (const auto& f : files) {
    const std::string bytes = read_file((std::filesystem::path(dir) / f).string());
    out += hex64(fnv1a64(bytes)) + "  " + std::to_string(bytes.size()) + "  " + f + "\n";
  }
  write_file((std::filesystem::path(dir) / "MANIFEST").string(), out);
}

}  // namespace dpp
