#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "chsnet/checkpoint.hpp"
#include "chsnet/data.hpp"
#include "chsnet/train.hpp"

using namespace chs;

namespace {

class TempDir {
 public:
  TempDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    path_ = fs::temp_directory_path() / (std::string("chsnet_") + info->test_suite_name() + "_" + info->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::vector<SegmentationSample> synth(std::size_t n, std::size_t size, std::uint64_t seed) {
  SynthOptions o;
  o.n = n;
  o.size = size;
  o.seed = seed;
  return synth_dataset(o);
}

void expect_binary(const Tensor<double>& t) {
  for (auto v : t.data()) EXPECT_TRUE(v == 0.0 || v == 1.0) << v;
}

}  // namespace

// --- image files --------------------------------------------------------------

TEST(Pgm, RoundTripPreservesPixels) {
  TempDir dir;
  GrayImage img{5, 3, {}};
  for (std::size_t i = 0; i < 15; ++i) img.pixels.push_back(static_cast<std::uint8_t>(i * 17));
  write_pgm(dir.path() / "a.pgm", img);
  const auto back = read_pgm(dir.path() / "a.pgm");
  EXPECT_EQ(back.w, 5u);
  EXPECT_EQ(back.h, 3u);
  EXPECT_EQ(back.pixels, img.pixels);
}

TEST(Pgm, HeaderCommentsAndMaxvalRescale) {
  TempDir dir;
  {
    std::ofstream out(dir.path() / "c.pgm", std::ios::binary);
    out << "P5\n# made by hand\n2 1\n# depth\n15\n";
    out.put(static_cast<char>(15)).put(static_cast<char>(0));
  }
  const auto img = read_pgm(dir.path() / "c.pgm");
  EXPECT_EQ(img.pixels, (std::vector<std::uint8_t>{255, 0}));
}

TEST(Pgm, BadFilesNameThePath) {
  TempDir dir;
  const auto p = dir.path() / "bad.pgm";
  {
    std::ofstream out(p);
    out << "P2\n1 1\n255\n0\n";
  }
  try {
    read_pgm(p);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find(p.string()), std::string::npos);
  }
  {
    std::ofstream out(p, std::ios::binary);
    out << "P5\n4 4\n255\n";
    out.write("abc", 3);
  }
  EXPECT_THROW(read_pgm(p), DataError);
  EXPECT_THROW(read_pgm(dir.path() / "absent.pgm"), DataError);
}

TEST(Pgm, MaskThresholdAt127) {
  GrayImage img{4, 1, {200, 100, 127, 128}};
  const auto m = mask_from_gray(img);
  EXPECT_EQ(m[0], 1.0);
  EXPECT_EQ(m[1], 0.0);
  EXPECT_EQ(m[2], 0.0);
  EXPECT_EQ(m[3], 1.0);
}

TEST(Pgm, MaskRoundTripThroughGrayImage) {
  const auto s = synth(1, 32, 4)[0];
  EXPECT_EQ(mask_from_gray(to_gray(s.infection_mask)).storage(), s.infection_mask.storage());
  EXPECT_EQ(mask_from_gray(to_gray(s.lung_mask)).storage(), s.lung_mask.storage());
}

TEST(TensorFile, RoundTripAtFloatPrecision) {
  TempDir dir;
  Tensor<double> t({2, 3, 1});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = 0.1 * static_cast<double>(i) - 0.25;
  write_tensor_file(dir.path() / "t.tnsr", t);
  const auto back = read_tensor_file(dir.path() / "t.tnsr");
  ASSERT_EQ(back.shape(), t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(back[i], static_cast<double>(static_cast<float>(t[i])));
  std::ifstream raw(dir.path() / "t.tnsr", std::ios::binary);
  char magic[4];
  raw.read(magic, 4);
  EXPECT_EQ(std::string(magic, 4), "TNSR");
  EXPECT_EQ(fs::file_size(dir.path() / "t.tnsr"), 4u + 4u + 3 * 4u + 6 * 4u);
}

TEST(Resize, NearestKeepsMasksBinaryAndBilinearKeepsRange) {
  const auto s = synth(1, 32, 5)[0];
  expect_binary(resize_nearest(s.lung_mask, 80, 48));
  const auto img = resize_bilinear(s.image, 80, 48);
  EXPECT_EQ(img.shape(), (Shape{80, 48, 1}));
  for (auto v : img.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_EQ(resize_bilinear(s.image, 32, 32).storage(), s.image.storage());
}

// --- dataset directory --------------------------------------------------------

TEST(Dataset, ToyDirectoryLoadsAtConfiguredSize) {
  TempDir dir;
  auto samples = synth(10, 32, 1);
  write_dataset(dir.path(), samples);
  fs::remove(dir.path() / "infection_masks" / "synth_3.pgm");
  // An eleventh image without a lung mask is rejected, not fatal.
  write_pgm(dir.path() / "images" / "zz_orphan.pgm", to_gray(samples[0].image));

  const auto ds = load_dataset(dir.path());
  ASSERT_EQ(ds.samples.size(), 10u);
  ASSERT_EQ(ds.rejected.size(), 1u);
  EXPECT_EQ(ds.rejected[0].rfind("zz_orphan: missing lung mask", 0), 0u);
  EXPECT_TRUE(std::is_sorted(ds.manifest.ids.begin(), ds.manifest.ids.end()));
  for (const auto& s : ds.samples) {
    EXPECT_EQ(s.image.shape(), (Shape{256, 256, 1}));
    EXPECT_EQ(s.lung_mask.shape(), (Shape{256, 256, 1}));
    EXPECT_EQ(s.infection_mask.shape(), (Shape{256, 256, 1}));
    expect_binary(s.lung_mask);
    expect_binary(s.infection_mask);
    for (auto v : s.image.data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
  const auto it = std::find(ds.manifest.ids.begin(), ds.manifest.ids.end(), "synth_3");
  ASSERT_NE(it, ds.manifest.ids.end());
  for (auto v : ds.samples[static_cast<std::size_t>(it - ds.manifest.ids.begin())].infection_mask.data())
    EXPECT_EQ(v, 0.0);
}

TEST(Dataset, SameSizeLoadReproducesMasksExactly) {
  TempDir dir;
  const auto samples = synth(3, 32, 8);
  write_dataset(dir.path(), samples);
  LoadOptions opt;
  opt.size_w = opt.size_h = 32;
  const auto ds = load_dataset(dir.path(), opt);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(ds.samples[i].lung_mask.storage(), samples[i].lung_mask.storage());
    EXPECT_EQ(ds.samples[i].infection_mask.storage(), samples[i].infection_mask.storage());
  }
}

TEST(Dataset, MissingLayoutIsAnError) {
  TempDir dir;
  EXPECT_THROW(load_dataset(dir.path()), DataError);
  fs::create_directories(dir.path() / "images");
  EXPECT_THROW(load_dataset(dir.path()), DataError);
}

TEST(Dataset, SourcesFileTagsSamples) {
  TempDir dir;
  write_dataset(dir.path(), synth(4, 16, 2));
  std::ofstream(dir.path() / "sources.txt") << "synth_0 a\nsynth_1 b\n";
  const auto ds = load_dataset(dir.path());
  EXPECT_EQ(ds.samples[0].source, "a");
  EXPECT_EQ(ds.samples[1].source, "b");
  EXPECT_EQ(ds.samples[2].source, dir.path().filename().string());
}

// --- splits -------------------------------------------------------------------

TEST(Splits, DefaultSeventyThirtyIsDeterministic) {
  std::vector<std::string> src(100, "x");
  SplitOptions opt;
  opt.seed = 3;
  const auto a = assign_splits(src, opt);
  EXPECT_EQ(a, assign_splits(src, opt));
  EXPECT_EQ(std::count(a.begin(), a.end(), Split::test), 30);
  EXPECT_EQ(std::count(a.begin(), a.end(), Split::val), 11);
  EXPECT_EQ(std::count(a.begin(), a.end(), Split::train), 59);
  opt.seed = 4;
  EXPECT_NE(a, assign_splits(src, opt));
}

TEST(Splits, BalancedSplitKeepsSourceMixInEverySplit) {
  std::vector<std::string> src;
  for (int i = 0; i < 60; ++i) src.push_back(i % 2 ? "a" : "b");
  SplitOptions opt;
  opt.balance = true;
  const auto s = assign_splits(src, opt);
  for (auto which : {Split::train, Split::val, Split::test}) {
    int a = 0, b = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
      if (s[i] == which) (src[i] == "a" ? a : b)++;
    EXPECT_EQ(a, b) << split_name(which);
  }
}

TEST(Splits, FractionsOutOfRangeRejected) {
  SplitOptions opt;
  opt.test_fraction = 1.0;
  EXPECT_THROW(assign_splits({"x"}, opt), ConfigError);
}

// --- synthetic data -------------------------------------------------------------

TEST(Synth, ContainmentAndBinaryMasks) {
  const auto data = synth(100, 64, 7);
  ASSERT_EQ(data.size(), 100u);
  for (const auto& s : data) {
    EXPECT_EQ(containment_ratio(s), 1.0);
    EXPECT_EQ(s.image.shape(), (Shape{64, 64, 1}));
    expect_binary(s.lung_mask);
    expect_binary(s.infection_mask);
  }
}

TEST(Synth, SameSeedIsBitIdentical) {
  const auto a = synth(20, 32, 9), b = synth(20, 32, 9), c = synth(20, 32, 10);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].image.storage(), b[i].image.storage());
    EXPECT_EQ(a[i].infection_mask.storage(), b[i].infection_mask.storage());
  }
  EXPECT_NE(a[0].image.storage(), c[0].image.storage());
}

TEST(Synth, BlobCountsFollowConfiguredProbabilities) {
  SynthOptions o;
  o.n = 1000;
  o.size = 8;
  o.seed = 12;
  const auto data = synth_dataset(o);
  std::array<double, 4> counts{};
  for (const auto& s : data) counts.at(s.blob_count) += 1;
  for (std::size_t k = 0; k < 4; ++k) {
    const double p = o.blob_probs[k], mean = 1000 * p, sd = std::sqrt(1000 * p * (1 - p));
    EXPECT_LE(std::abs(counts[k] - mean), 3 * sd) << "k=" << k;
  }
}

TEST(Synth, InvalidOptionsRejected) {
  EXPECT_THROW(synth(0, 32, 1), ConfigError);
  EXPECT_THROW(synth(1, 4, 1), ConfigError);
}

// --- configuration --------------------------------------------------------------

TEST(Config, ParsesCommentsAndRejectsMalformedLines) {
  const auto kv = KeyValues::parse("# header\nnet.stages = 3  # trailing\n\n  train.epochs=5\n");
  EXPECT_EQ(kv.values().at("net.stages"), "3");
  EXPECT_EQ(kv.values().at("train.epochs"), "5");
  EXPECT_THROW(KeyValues::parse("just words\n"), ConfigError);
  EXPECT_THROW(KeyValues::parse("= 3\n"), ConfigError);
  EXPECT_THROW(KeyValues::parse("a = 1\na = 2\n"), ConfigError);
}

TEST(Config, TypedValidationNamesTheKey) {
  NetworkConfig cfg;
  ModelKind kind = ModelKind::chs;
  try {
    read_network(KeyValues::parse("net.stages = three\n"), cfg, kind);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("net.stages"), std::string::npos);
  }
  EXPECT_THROW(read_network(KeyValues::parse("net.use_rib = maybe\n"), cfg, kind), ConfigError);
  EXPECT_THROW(read_network(KeyValues::parse("net.model = unet\n"), cfg, kind), ConfigError);
  EXPECT_THROW(read_network(KeyValues::parse("net.coupling = sideways\n"), cfg, kind), ConfigError);
  EXPECT_THROW(read_network(KeyValues::parse("net.input_w = 100\n"), cfg, kind), ConfigError);
  TrainConfig tc;
  EXPECT_THROW(read_train(KeyValues::parse("train.dropout_rate = 1.5\n"), tc), ConfigError);
  EXPECT_THROW(read_train(KeyValues::parse("train.learning_rate = 1e-3x\n"), tc), ConfigError);
}

TEST(Config, UnknownKeysAreReported) {
  const auto kv = KeyValues::parse("net.stages = 3\nnet.stagez = 4\n");
  NetworkConfig cfg;
  ModelKind kind = ModelKind::chs;
  read_network(kv, cfg, kind);
  try {
    kv.check_all_used();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("net.stagez"), std::string::npos);
  }
}

TEST(Config, EchoRoundTrips) {
  NetworkConfig cfg;
  cfg.stages = 3;
  cfg.base_filters = 16;
  cfg.input_w = cfg.input_h = 64;
  cfg.use_ssd = false;
  cfg.coupling = Coupling::stacked;
  cfg.dropout_rate = 0.3;
  TrainConfig tc;
  tc.learning_rate = 3e-4;
  tc.kfold = 5;
  tc.loss_reduction = Reduction::sum;
  KeyValues kv;
  write_network(kv, cfg, ModelKind::raiu);
  write_train(kv, tc);
  const auto back = KeyValues::parse(kv.str());
  NetworkConfig cfg2;
  ModelKind kind = ModelKind::chs;
  TrainConfig tc2;
  read_network(back, cfg2, kind);
  read_train(back, tc2);
  back.check_all_used();
  EXPECT_EQ(kind, ModelKind::raiu);
  KeyValues again;
  write_network(again, cfg2, kind);
  write_train(again, tc2);
  EXPECT_EQ(again.str(), kv.str());
  EXPECT_EQ(tc2.kfold, std::optional<std::size_t>(5));
  EXPECT_EQ(tc2.learning_rate, 3e-4);
}

// --- checkpoints ------------------------------------------------------------------

TEST(Checkpoint, RoundTripRestoresEveryTensorAndOutput) {
  NetworkConfig cfg;
  cfg.stages = 2;
  cfg.base_filters = 4;
  cfg.input_w = cfg.input_h = 16;
  cfg.coupling = Coupling::stacked;
  auto model = build_chs_net<double>(cfg);
  // Running statistics are part of the state.
  (*model->store().entries().back().tensor)[0] = 0.125;
  std::stringstream buf;
  save_checkpoint(buf, *model);
  auto back = load_checkpoint<double>(buf);
  EXPECT_EQ(back->kind(), ModelKind::chs);
  EXPECT_EQ(back->config().coupling, Coupling::stacked);
  ASSERT_EQ(back->store().entries().size(), model->store().entries().size());
  for (std::size_t i = 0; i < model->store().entries().size(); ++i)
    EXPECT_EQ(back->store().entries()[i].tensor->storage(), model->store().entries()[i].tensor->storage());
  std::mt19937_64 r(1);
  auto x = random_tensor<double>({1, 16, 16, 1}, r, 0.0, 1.0);
  Context<double> ctx;
  EXPECT_EQ(model->forward(ctx, x).infection->storage(), back->forward(ctx, x).infection->storage());
  std::stringstream again;
  save_checkpoint(again, *back);
  EXPECT_EQ(again.str(), buf.str());
}

TEST(Checkpoint, CorruptStreamsAreRejected) {
  std::stringstream junk("not a checkpoint");
  EXPECT_THROW(load_checkpoint<double>(junk), DataError);
  NetworkConfig cfg;
  cfg.stages = 2;
  cfg.base_filters = 4;
  cfg.input_w = cfg.input_h = 16;
  std::stringstream buf;
  save_checkpoint(buf, *build_raiu_net<double>(cfg));
  const std::string full = buf.str();
  std::stringstream cut(full.substr(0, full.size() / 2));
  EXPECT_THROW(load_checkpoint<double>(cut), DataError);
  EXPECT_THROW(load_checkpoint<double>(fs::path("/nonexistent/ckpt")), DataError);
}
