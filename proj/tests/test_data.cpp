#include <gtest/gtest.h>

#include <fstream>

#include "test_util.hpp"

namespace swaat {
namespace {

void write_bytes(const std::filesystem::path& p, const std::vector<std::uint8_t>& b) {
  std::ofstream f(p, std::ios::binary);
  f.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

std::vector<std::uint8_t> header(std::uint32_t magic, std::vector<std::uint32_t> dims) {
  std::vector<std::uint8_t> b;
  auto be = [&](std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
  };
  be(magic);
  for (auto d : dims) be(d);
  return b;
}

TEST(Idx, PixelBytesScaleByOneOver255) {
  const auto dir = testing::scratch_dir("idx_pixels");
  auto img = header(0x803, {1, 2, 2});
  for (std::uint8_t v : {0, 255, 128, 64}) img.push_back(v);
  auto lab = header(0x801, {1});
  lab.push_back(3);
  write_bytes(dir / "i.idx", img);
  write_bytes(dir / "l.idx", lab);
  const auto d = load_idx<double>((dir / "i.idx").string(), (dir / "l.idx").string());
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d.image_shape(), (Shape{1, 2, 2}));
  EXPECT_EQ(d.images[0], 0.0);
  EXPECT_EQ(d.images[1], 1.0);
  EXPECT_EQ(d.images[2], 128.0 / 255.0);
  EXPECT_EQ(d.images[3], 64.0 / 255.0);
  EXPECT_EQ(d.labels[0], 3);
  EXPECT_EQ(d.classes, 4u);
}

TEST(Idx, LabelFileWithImageMagicFails) {
  const auto dir = testing::scratch_dir("idx_magic");
  auto img = header(0x803, {1, 1, 1});
  img.push_back(7);
  auto lab = header(0x803, {1, 1, 1});
  lab.push_back(0);
  write_bytes(dir / "i.idx", img);
  write_bytes(dir / "l.idx", lab);
  EXPECT_THROW(load_idx<double>((dir / "i.idx").string(), (dir / "l.idx").string()), FormatError);
}

TEST(Idx, TruncatedTrailingAndMismatchedFilesFail) {
  const auto dir = testing::scratch_dir("idx_bad");
  auto img = header(0x803, {2, 2, 2});
  img.resize(img.size() + 7);  // one byte short
  auto lab = header(0x801, {2});
  lab.push_back(0);
  lab.push_back(1);
  write_bytes(dir / "short.idx", img);
  write_bytes(dir / "l.idx", lab);
  EXPECT_THROW(load_idx<double>((dir / "short.idx").string(), (dir / "l.idx").string()), FormatError);

  img.resize(img.size() + 2);  // one byte too many
  write_bytes(dir / "long.idx", img);
  EXPECT_THROW(load_idx<double>((dir / "long.idx").string(), (dir / "l.idx").string()), FormatError);

  auto three = header(0x801, {3});
  three.insert(three.end(), {0, 1, 2});
  img.resize(img.size() - 1);
  write_bytes(dir / "ok.idx", img);
  write_bytes(dir / "l3.idx", three);
  EXPECT_NO_THROW(load_idx<double>((dir / "ok.idx").string(), (dir / "l.idx").string()));
  EXPECT_THROW(load_idx<double>((dir / "ok.idx").string(), (dir / "l3.idx").string()), FormatError);
  EXPECT_THROW(load_idx<double>((dir / "missing.idx").string(), (dir / "l.idx").string()), UserError);
}

TEST(Idx, LabelOutOfRangeForDeclaredClassesFails) {
  const auto dir = testing::scratch_dir("idx_range");
  auto img = header(0x803, {1, 1, 1});
  img.push_back(0);
  auto lab = header(0x801, {1});
  lab.push_back(5);
  write_bytes(dir / "i.idx", img);
  write_bytes(dir / "l.idx", lab);
  EXPECT_THROW(load_idx<double>((dir / "i.idx").string(), (dir / "l.idx").string(), 3), FormatError);
}

TEST(Idx, WriteThenReadIsExactForQuantizedData) {
  const auto dir = testing::scratch_dir("idx_roundtrip");
  const auto d = testing::small_synth<double>(1, 40, 4, 1.0);
  write_idx(d, (dir / "i.idx").string(), (dir / "l.idx").string());
  const auto r = load_idx<double>((dir / "i.idx").string(), (dir / "l.idx").string(), 4);
  EXPECT_EQ(r.images, d.images);
  EXPECT_EQ(r.labels, d.labels);
}

TEST(Synth, DeterministicBalancedAndInRange) {
  const auto a = synth_dataset<double>(5, 200, 10, 1.5);
  const auto b = synth_dataset<double>(5, 200, 10, 1.5);
  const auto c = synth_dataset<double>(6, 200, 10, 1.5);
  EXPECT_EQ(a.images, b.images);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NE(a.images, c.images);
  EXPECT_NO_THROW(a.validate());
  std::vector<int> count(10, 0);
  for (int y : a.labels) ++count[static_cast<std::size_t>(y)];
  for (int k : count) EXPECT_EQ(k, 20);
}

TEST(Synth, DifficultyZeroIsSeparableByNearestCentroid) {
  const auto d = synth_dataset<double>(3, 300, 10, 0.0);
  const std::size_t D = d.images.example_size();
  std::vector<std::vector<double>> centroid(10, std::vector<double>(D, 0.0));
  std::vector<double> cnt(10, 0.0);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto c = static_cast<std::size_t>(d.labels[i]);
    cnt[c] += 1;
    for (std::size_t k = 0; k < D; ++k) centroid[c][k] += d.images[i * D + k];
  }
  for (std::size_t c = 0; c < 10; ++c)
    for (auto& v : centroid[c]) v /= cnt[c];
  for (std::size_t i = 0; i < d.size(); ++i) {
    std::size_t best = 0;
    double bd = 1e300;
    for (std::size_t c = 0; c < 10; ++c) {
      double s = 0;
      for (std::size_t k = 0; k < D; ++k) s += (d.images[i * D + k] - centroid[c][k]) * (d.images[i * D + k] - centroid[c][k]);
      if (s < bd) {
        bd = s;
        best = c;
      }
    }
    EXPECT_EQ(static_cast<int>(best), d.labels[i]);
  }
}

TEST(Synth, RejectsBadArguments) {
  EXPECT_THROW(synth_dataset<double>(0, 10, 1, 0.5), UserError);
  EXPECT_THROW(synth_dataset<double>(0, 3, 10, 0.5), UserError);
  EXPECT_THROW(synth_dataset<double>(0, 10, 2, -1.0), UserError);
}

TEST(Sampling, ShuffleIsAPermutation) {
  Rng r(1);
  auto p = shuffled_indices(1000, r);
  std::sort(p.begin(), p.end());
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_EQ(p[i], i);
}

TEST(Sampling, WeightsThreeOneOneOne) {
  Rng r(2);
  const std::vector<double> w = {3, 1, 1, 1};
  std::vector<double> hits(4, 0);
  const int rounds = 50000;
  for (int i = 0; i < rounds; ++i)
    for (auto k : sample_with_replacement(4, w, r)) hits[k] += 1;
  const double n = 4.0 * rounds;
  const double expect[] = {0.5, 1.0 / 6, 1.0 / 6, 1.0 / 6};
  for (std::size_t k = 0; k < 4; ++k) {
    const double sd = std::sqrt(expect[k] * (1 - expect[k]) / n);
    EXPECT_NEAR(hits[k] / n, expect[k], 4 * sd) << k;
  }
}

TEST(Sampling, ZeroWeightIsNeverDrawn) {
  Rng r(3);
  const std::vector<double> w = {1, 0};
  for (int i = 0; i < 10000; ++i)
    for (auto k : sample_with_replacement(2, w, r)) ASSERT_EQ(k, 0u);
  const std::vector<double> w2 = {0, 1};
  for (int i = 0; i < 10000; ++i)
    for (auto k : sample_with_replacement(2, w2, r)) ASSERT_EQ(k, 1u);
}

TEST(Sampling, RejectsDegenerateWeights) {
  Rng r(4);
  const std::vector<double> zero = {0, 0}, neg = {1, -1};
  EXPECT_THROW(sample_with_replacement(2, zero, r), Error);
  EXPECT_THROW(sample_with_replacement(2, neg, r), Error);
}

TEST(BatchPlan, CoversOrderingWithShortLastBatch) {
  BatchPlan p;
  p.ordering.resize(10);
  std::iota(p.ordering.begin(), p.ordering.end(), std::size_t{0});
  p.batch_size = 4;
  EXPECT_EQ(p.batches(), 3u);
  EXPECT_EQ(p.batch(2).size(), 2u);
  EXPECT_EQ(p.batch(2)[1], 9u);
}

}  // namespace
}  // namespace swaat
