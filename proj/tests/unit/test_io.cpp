// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "slategen/config.hpp"
#include "slategen/dataset.hpp"
#include "slategen/io.hpp"

using namespace slategen;

namespace {

class TempDir {
 public:
  TempDir() {
    path_ = std::filesystem::temp_directory_path() /
            ("slategen_io_" + std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

struct Knobs {
  bool flag = false;
  int offset = -3;
  std::size_t width = 8;
  double rate = 0.1;
  std::string mode = "fast";
  std::vector<double> weights{1.0, 0.1};
  std::vector<std::size_t> sizes{2, 4};

  ConfigSchema schema() {
    ConfigSchema s;
    s.bind("a.flag", flag);
    s.bind("a.offset", offset);
    s.bind("a.width", width);
    s.bind("b.rate", rate);
    s.bind("b.mode", mode);
    s.bind("b.weights", weights);
    s.bind("b.sizes", sizes);
    return s;
  }
};

}  // namespace

TEST(Config, ParsesSectionsListsAndComments) {
  Knobs k;
  auto s = k.schema();
  s.load_text("# comment\n[a]\nflag = true\noffset = 5\n\n[b]\nrate = 2.5e-3\nmode = slow\nweights = 1, 0.5, 0.25\n",
              "inline");
  EXPECT_TRUE(k.flag);
  EXPECT_EQ(k.offset, 5);
  EXPECT_DOUBLE_EQ(k.rate, 2.5e-3);
  EXPECT_EQ(k.mode, "slow");
  EXPECT_EQ(k.weights, (std::vector<double>{1.0, 0.5, 0.25}));
  EXPECT_EQ(k.width, 8u);
}

TEST(Config, UnknownKeyAndBadValueAreRejected) {
  Knobs k;
  auto s = k.schema();
  EXPECT_THROW(s.load_text("[a]\nwidht = 3\n", "inline"), ConfigError);
  EXPECT_THROW(s.load_text("[a]\nwidth = -1\n", "inline"), ConfigError);
  EXPECT_THROW(s.load_text("[b]\nrate = fast\n", "inline"), ConfigError);
  EXPECT_THROW(s.load_text("[a]\nflag = maybe\n", "inline"), ConfigError);
  EXPECT_THROW(s.set("nope.key", "1"), ConfigError);
  EXPECT_THROW(s.load_file("/nonexistent/slategen.cfg"), ConfigError);
}

TEST(Config, ResolvedTextRoundTrips) {
  Knobs a;
  auto sa = a.schema();
  sa.load_text("[b]\nrate = 0.30000000000000004\nweights = 3, 1e-300\n", "inline");
  Knobs b;
  b.rate = 0.0;
  b.weights.clear();
  auto sb = b.schema();
  sb.load_text(sa.resolved(), "resolved");
  EXPECT_EQ(b.rate, a.rate);
  EXPECT_EQ(b.weights, a.weights);
  EXPECT_EQ(sb.resolved(), sa.resolved());
}

TEST(Checkpoint, RoundTripsParameters) {
  TempDir dir;
  nn::ParamList params{{"w", Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6.5})}, {"b", Tensor::from({3}, {-1, 0, 1})}};
  save_checkpoint(dir.file("m.ckpt"), make_checkpoint("toy", "[a]\nx = 1\n", params));
  const Checkpoint c = load_checkpoint(dir.file("m.ckpt"));
  EXPECT_EQ(c.kind, "toy");
  EXPECT_EQ(c.config, "[a]\nx = 1\n");
  nn::ParamList fresh{{"w", Tensor::zeros({2, 3})}, {"b", Tensor::zeros({3})}};
  restore_params(c, fresh);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < fresh[i].tensor.size(); ++j) EXPECT_EQ(fresh[i].tensor.at(j), params[i].tensor.at(j));
}

TEST(Checkpoint, CorruptOrMismatchedFilesAreDataErrors) {
  TempDir dir;
  nn::ParamList params{{"w", Tensor::from({2}, {1, 2})}};
  save_checkpoint(dir.file("m.ckpt"), make_checkpoint("toy", "", params));
  const std::string bytes = read_file(dir.file("m.ckpt"));

  EXPECT_THROW(load_checkpoint(dir.file("missing.ckpt")), DataError);
  write_file_atomic(dir.file("trunc.ckpt"), bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(load_checkpoint(dir.file("trunc.ckpt")), DataError);
  write_file_atomic(dir.file("magic.ckpt"), "XXXXXXXX" + bytes.substr(8));
  EXPECT_THROW(load_checkpoint(dir.file("magic.ckpt")), DataError);
  write_file_atomic(dir.file("tail.ckpt"), bytes + "!");
  EXPECT_THROW(load_checkpoint(dir.file("tail.ckpt")), DataError);

  const Checkpoint c = load_checkpoint(dir.file("m.ckpt"));
  nn::ParamList wrong_shape{{"w", Tensor::zeros({3})}};
  EXPECT_THROW(restore_params(c, wrong_shape), DataError);
  nn::ParamList wrong_name{{"v", Tensor::zeros({2})}};
  EXPECT_THROW(restore_params(c, wrong_name), DataError);
}

TEST(Files, AtomicWriteCreatesParentsAndReplaces) {
  TempDir dir;
  const auto path = dir.file("nested/deeper/out.txt");
  write_file_atomic(path, "one");
  write_file_atomic(path, "two\nthree\n\n");
  EXPECT_EQ(read_file(path), "two\nthree\n\n");
  EXPECT_EQ(read_lines(path), (std::vector<std::string>{"two", "three"}));
  EXPECT_FALSE(file_exists(path + ".tmp"));
}

TEST(Dataset, SampleRoundTripIncludingOptionalFields) {
  TempDir dir;
  SlateSample s;
  s.user_id = 4;
  s.user_features = {0.25, 0.75};
  s.history = {{1, 2, 3}};
  s.slate = {{0, 0, 1}, {2, 1, 0}};
  s.item_ids = {10, 11};
  s.feedback = {1.5, 0.0};
  s.effective = {1, 0};
  s.disliked = {{3, 3, 3}};
  s.test = true;
  write_file_atomic(dir.file("s.jsonl"), sample_line(s) + "\n");
  const auto back = read_samples(dir.file("s.jsonl"));
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0].user_id, 4u);
  EXPECT_EQ(back[0].slate, s.slate);
  EXPECT_EQ(back[0].history, s.history);
  EXPECT_EQ(back[0].item_ids, s.item_ids);
  EXPECT_EQ(back[0].feedback, s.feedback);
  EXPECT_EQ(back[0].effective, s.effective);
  EXPECT_EQ(back[0].disliked, s.disliked);
  EXPECT_TRUE(back[0].test);
}

TEST(Dataset, MinimalSampleParses) {
  TempDir dir;
  write_file_atomic(dir.file("s.jsonl"),
                    R"({"user_features":[1],"history":[],"slate":[[1,2]],"feedback":[0.5],"effective_view":[true]})"
                    "\n");
  const auto back = read_samples(dir.file("s.jsonl"));
  ASSERT_EQ(back.size(), 1u);
  EXPECT_FALSE(back[0].test);
  EXPECT_TRUE(back[0].item_ids.empty());
}

TEST(Dataset, MalformedLinesReportFileAndLine) {
  TempDir dir;
  write_file_atomic(dir.file("c.jsonl"), "{\"item_id\":0,\"embedding\":[1,2]}\n{\"item_id\":1,\"embedding\":[1]}\n");
  try {
    read_corpus(dir.file("c.jsonl"));
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("expected 2"), std::string::npos);
  }
  write_file_atomic(dir.file("bad.jsonl"), "{\"item_id\":0,\"codes\":[1]}\n{\"item_id\":\n");
  try {
    read_sid_map(dir.file("bad.jsonl"));
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("bad.jsonl:2"), std::string::npos);
  }
  write_file_atomic(dir.file("len.jsonl"),
                    R"({"user_features":[1],"history":[],"slate":[[1]],"feedback":[0.5,1],"effective_view":[true]})"
                    "\n");
  EXPECT_THROW(read_samples(dir.file("len.jsonl")), DataError);
}

TEST(Dataset, PairRecordsRoundTrip) {
  TempDir dir;
  PairRecord p{3, {{1, 2}, {3, 4}}, {{3, 4}, {1, 2}}, "permute"};
  write_file_atomic(dir.file("p.jsonl"), pair_line(p) + "\n" + pair_line(p) + "\n");
  const auto back = read_pairs(dir.file("p.jsonl"));
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].context_ref, 3u);
  EXPECT_EQ(back[1].y_plus, p.y_plus);
  EXPECT_EQ(back[1].y_minus, p.y_minus);
  EXPECT_EQ(back[1].strategy, "permute");
}
