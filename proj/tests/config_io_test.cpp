// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>

#include "dpp/io.hpp"

using namespace dpp;

namespace {

std::string temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "dpp_config_io_test";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

Checkpoint small_checkpoint(bool selectors) {
  Checkpoint ck;
  auto& head = ck.config.bench.head;
  head.dims.d = 8;
  head.dims.d_h = 4;
  head.dims.d_ff = 6;
  head.dims.d_s = 3;
  head.num_stages = 2;
  head.selector_stages = {1, 2};
  Rng rng(3);
  ck.params = HeadParams(head, rng);
  if (selectors) ck.params.add_selectors(head, rng);
  return ck;
}

std::vector<double> flatten(HeadParams& p) {
  std::vector<double> out;
  p.for_each([&](const std::string&, Parameter& q) { out.insert(out.end(), q.value.data.begin(), q.value.data.end()); });
  return out;
}

}  // namespace

TEST(Config, TextRoundTrip) {
  RunConfig c;
  c.bench.seed = 99;
  c.bench.head.alpha = 3.5;
  c.bench.head.lambda = 0.125;
  c.bench.head.selector_stages = {1, 3};
  c.bench.head.use_iou_loss = false;
  c.bench.head.iou_target = IouTarget::Matched;
  c.bench.train.lr_body = 1.0 / 3.0;
  c.bench.train.select_mode = SelectMode::TrainSoft;
  c.out_dir = "results/x";
  const RunConfig back = parse_config(to_text(c));
  EXPECT_EQ(to_text(back), to_text(c));
  EXPECT_EQ(back.bench.train.lr_body, 1.0 / 3.0);
  EXPECT_EQ(back.bench.head.selector_stages, (std::vector<int>{1, 3}));
  const std::string text = to_text(c);
  EXPECT_EQ(config_keys().size(), static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')));
}

TEST(Config, CommentsAndBlankLinesIgnored) {
  const RunConfig c = parse_config("# header\n\n  head.alpha = 4   # trailing\nseed=7\n");
  EXPECT_EQ(c.bench.head.alpha, 4.0);
  EXPECT_EQ(c.bench.seed, 7u);
}

TEST(Config, UnknownKeyAndBadValuesRejected) {
  EXPECT_THROW(parse_config("head.alhpa = 2\n"), ConfigError);
  EXPECT_THROW(parse_config("head.alpha = two\n"), ConfigError);
  EXPECT_THROW(parse_config("seed = -1\n"), ConfigError);
  EXPECT_THROW(parse_config("head.use_iou_loss = maybe\n"), ConfigError);
  EXPECT_THROW(parse_config("no equals sign\n"), ConfigError);
  try {
    parse_config("seed = 1\nbogus = 3\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("bogus"), std::string::npos);
  }
}

TEST(Config, ValidationCatchesInconsistentSettings) {
  RunConfig c = parse_config("head.selector_stages = 4,2\n");
  EXPECT_THROW(c.validate(), ConfigError);
  c = parse_config("head.selector_stages = 7\n");
  EXPECT_THROW(c.validate(), ConfigError);
  c = parse_config("head.tau = 0\n");
  EXPECT_THROW(c.validate(), ConfigError);
  c = parse_config("train.milestone1 = 0.9\ntrain.milestone2 = 0.5\n");
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_NO_THROW(RunConfig{}.validate());
}

TEST(Dataset, RoundTripIsExact) {
  const auto scenes = generate_scenes(4, Split::Val, 25, SceneConfig{});
  const std::string path = temp_path("scenes.bin");
  save_dataset(path, scenes);
  const auto back = load_dataset(path);
  ASSERT_EQ(back.size(), scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    EXPECT_EQ(back[i].seed, scenes[i].seed);
    ASSERT_EQ(back[i].M(), scenes[i].M());
    for (std::size_t j = 0; j < scenes[i].M(); ++j) {
      EXPECT_EQ(back[i].truths[j].box, scenes[i].truths[j].box);
      EXPECT_EQ(back[i].truths[j].label, scenes[i].truths[j].label);
    }
  }
  EXPECT_EQ(encode_dataset(back), encode_dataset(scenes));
  EXPECT_TRUE(decode_dataset(encode_dataset({})).empty());
}

TEST(Dataset, CorruptInputsAreFormatErrors) {
  const std::string good = encode_dataset(generate_scenes(4, Split::Val, 3, SceneConfig{}));
  std::string bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_dataset(bad_magic), FormatError);
  std::string bad_version = good;
  bad_version[8] = 9;
  EXPECT_THROW(decode_dataset(bad_version), FormatError);
  EXPECT_THROW(decode_dataset(good.substr(0, good.size() - 3)), FormatError);
  EXPECT_THROW(decode_dataset(good + "x"), FormatError);
}

TEST(Checkpoint, RoundTripWithAndWithoutSelectors) {
  for (bool selectors : {false, true}) {
    Checkpoint ck = small_checkpoint(selectors);
    const std::string path = temp_path(selectors ? "with.ckpt" : "without.ckpt");
    save_checkpoint(path, ck);
    Checkpoint back = load_checkpoint(path);
    EXPECT_EQ(back.has_selectors(), selectors);
    EXPECT_EQ(flatten(back.params), flatten(ck.params));
    EXPECT_EQ(to_text(back.config), to_text(ck.config));
    EXPECT_EQ(encode_checkpoint(back), encode_checkpoint(ck));
  }
}

TEST(Checkpoint, VersionMismatchIsFormatError) {
  std::string bytes = encode_checkpoint(small_checkpoint(false));
  const auto pos = bytes.find("version=1");
  ASSERT_NE(pos, std::string::npos);
  bytes.replace(pos, 9, "version=2");
  try {
    decode_checkpoint(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("version=2"), std::string::npos);
  }
}

TEST(Checkpoint, StructuralCorruptionIsFormatError) {
  const std::string bytes = encode_checkpoint(small_checkpoint(true));
  EXPECT_THROW(decode_checkpoint("garbage"), FormatError);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 8)), FormatError);
  std::string renamed = bytes;
  const auto pos = renamed.find("stage1.");
  ASSERT_NE(pos, std::string::npos);
  renamed.replace(pos, 7, "stageX.");
  EXPECT_THROW(decode_checkpoint(renamed), FormatError);
  EXPECT_THROW(load_checkpoint(temp_path("does-not-exist.ckpt")), std::exception);
}

TEST(Csv, NumbersAndRowWidth) {
  EXPECT_EQ(csv_num(0.5), "0.5");
  EXPECT_EQ(csv_num(1.0 / 3.0), "0.333333333333");
  EXPECT_EQ(csv_num(std::nan("")), "nan");
  CsvTable t({"a", "b"});
  t.add({"1", "2"});
  EXPECT_THROW(t.add({"1"}), DimensionError);
  EXPECT_EQ(t.str(), "a,b\n1,2\n");
}

TEST(Manifest, ListsFilesSortedWithChecksums) {
  const auto dir = std::filesystem::temp_directory_path() / "dpp_manifest_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir / "sub");
  write_file((dir / "b.txt").string(), "bee");
  write_file((dir / "sub" / "a.txt").string(), "a");
  write_manifest(dir.string());
  const std::string m = read_file((dir / "MANIFEST").string());
  EXPECT_EQ(m, hex64(fnv1a64("bee")) + "  3  b.txt\n" + hex64(fnv1a64("a")) + "  1  sub/a.txt\n");
  EXPECT_EQ(hex64(fnv1a64("")), "cbf29ce484222325");
}
