#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "featmine/mask.hpp"

using namespace featmine;

namespace {

// Bounding rectangle of the set cells, and whether the set cells fill it.
bool is_solid_rectangle(const BinaryMask& m) {
  std::int64_t r0 = m.height, r1 = -1, c0 = m.width, c1 = -1;
  for (std::int64_t i = 0; i < m.height; ++i)
    for (std::int64_t j = 0; j < m.width; ++j)
      if (m(i, j)) {
        r0 = std::min(r0, i);
        r1 = std::max(r1, i);
        c0 = std::min(c0, j);
        c1 = std::max(c1, j);
      }
  if (r1 < 0) return m.count_ones() == 0;
  return m.count_ones() == (r1 - r0 + 1) * (c1 - c0 + 1);
}

// Cell-by-cell membership test for the clipped, rounded box.
bool oracle_cell(const BoxCoords& b, std::int64_t i, std::int64_t j) {
  const double top = std::floor(b.r_y - b.r_h / 2 + 0.5);
  const double bottom = std::floor(b.r_y + b.r_h / 2 + 0.5);
  const double left = std::floor(b.r_x - b.r_w / 2 + 0.5);
  const double right = std::floor(b.r_x + b.r_w / 2 + 0.5);
  return double(i) >= top && double(i) < bottom && double(j) >= left && double(j) < right;
}

}  // namespace

TEST(SampleBox, ExtentsFollowLambda) {
  const auto b = box_for_lambda(32, 32, 0.75, 10.0, 10.0);
  EXPECT_EQ(b.r_w, 16.0);
  EXPECT_EQ(b.r_h, 16.0);
  const auto empty = box_for_lambda(32, 32, 1.0, 3.0, 3.0);
  EXPECT_EQ(empty.r_w, 0.0);
  EXPECT_EQ(rasterize_box(empty, 32, 32).count_ones(), 0);
}

TEST(SampleBox, DrawsAreExactAndInRange) {
  RngStream stream("mask", 11);
  for (int t = 0; t < 2000; ++t) {
    const std::int64_t w = 1 + t % 31, h = 1 + (t * 7) % 29;
    const auto b = sample_box(w, h, stream);
    ASSERT_GT(b.lambda, 0.0);
    ASSERT_LT(b.lambda, 1.0);
    ASSERT_GE(b.r_x, 0.0);
    ASSERT_LT(b.r_x, double(w));
    ASSERT_GE(b.r_y, 0.0);
    ASSERT_LT(b.r_y, double(h));
    ASSERT_DOUBLE_EQ(b.r_w / double(w), std::sqrt(1.0 - b.lambda));
    ASSERT_DOUBLE_EQ(b.r_h / double(h), std::sqrt(1.0 - b.lambda));
    ASSERT_NEAR(b.area_ratio(w, h), 1.0 - b.lambda, 1e-12);
  }
}

TEST(SampleBox, MeanAreaRatioIsOneHalf) {
  RngStream stream("mask", 12);
  double sum = 0.0;
  const int draws = 100000;
  for (int t = 0; t < draws; ++t) sum += sample_box(16, 16, stream).area_ratio(16, 16);
  EXPECT_NEAR(sum / draws, 0.5, 0.01);
}

TEST(RasterizeBox, HandExample) {
  const auto m = rasterize_box({2.0, 2.0, 2.0, 2.0, 0.75}, 4, 4);
  EXPECT_EQ(m.count_ones(), 4);
  for (std::int64_t i = 0; i < 4; ++i)
    for (std::int64_t j = 0; j < 4; ++j)
      EXPECT_EQ(m(i, j), (i >= 1 && i <= 2 && j >= 1 && j <= 2) ? 1 : 0) << i << "," << j;
}

TEST(RasterizeBox, FullBoxIsAllOnes) {
  const auto m = rasterize_box(box_for_lambda(7, 5, 0.0, 3.5, 2.5), 7, 5);
  EXPECT_EQ(m.count_ones(), 35);
}

TEST(RasterizeBox, MatchesCellOracleAndIsRectangular) {
  RngStream stream("mask", 13);
  for (int t = 0; t < 1000; ++t) {
    const std::int64_t w = 1 + t % 17, h = 1 + (t * 3) % 13;
    const auto b = sample_box(w, h, stream);
    const auto m = rasterize_box(b, w, h);
    for (std::int64_t i = 0; i < h; ++i)
      for (std::int64_t j = 0; j < w; ++j) ASSERT_EQ(m(i, j) == 1, oracle_cell(b, i, j));
    ASSERT_TRUE(is_solid_rectangle(m));
  }
}

TEST(Complement, Properties) {
  auto zeros = BinaryMask::spatial(MaskKind::box, 3, 5);
  EXPECT_EQ(complement(zeros).count_ones(), 15);
  RngStream stream("mask", 14);
  for (int t = 0; t < 1000; ++t) {
    const auto m = sample_box_mask(9, 6, stream);
    const auto c = complement(m);
    ASSERT_TRUE(complement(c).same_bits(m));
    for (std::size_t k = 0; k < m.bits.size(); ++k) {
      ASSERT_LE(m.bits[k], 1);
      ASSERT_EQ(m.bits[k] + c.bits[k], 1);
    }
  }
}

TEST(PointMask, KeepProbability) {
  CounterRng rng(5);
  EXPECT_EQ(sample_point_mask(10, 10, 1.0, rng).count_ones(), 100);
  EXPECT_EQ(sample_point_mask(10, 10, 0.0, rng).count_ones(), 0);
  const auto m = sample_point_mask(100, 100, 0.3, rng);
  EXPECT_NEAR(double(m.count_ones()) / 10000.0, 0.3, 0.02);
  EXPECT_THROW(sample_point_mask(4, 4, 1.5, rng), ConfigError);
}

TEST(ChannelMask, Counts) {
  CounterRng rng(6);
  EXPECT_EQ(channel_mask_for_lambda(4, 0.5, rng).count_ones(), 2);
  EXPECT_EQ(channel_mask_for_lambda(8, 0.0, rng).count_ones(), 8);
  EXPECT_THROW(channel_mask_for_lambda(1, 0.5, rng), ConfigError);

  RngStream stream("mask", 15);
  double sum = 0.0;
  const int draws = 50000;
  for (int t = 0; t < draws; ++t) sum += double(sample_channel_mask(64, stream).count_ones()) / 64;
  EXPECT_NEAR(sum / draws, 0.5, 0.01);

  const auto t = channel_mask_for_lambda(4, 0.5, rng).to_tensor<float>();
  EXPECT_EQ(t.shape(), (Shape{1, 4, 1, 1}));
}

TEST(SamplePair, ComplementaryCoversGrid) {
  RngStream stream("mask", 16);
  for (int t = 0; t < 200; ++t) {
    auto [a, b] = sample_pair(8, 8, Pairing::complementary, stream);
    for (std::size_t k = 0; k < a.bits.size(); ++k) ASSERT_EQ(a.bits[k] + b.bits[k], 1);
  }
}

TEST(SamplePair, NonComplementaryReplaysFromCounters) {
  RngStream stream("mask", 17);
  bool saw_overlap = false, saw_gap = false;
  for (int t = 0; t < 200; ++t) {
    auto [a, b] = sample_pair(8, 8, Pairing::non_complementary, stream);
    ASSERT_TRUE(a.seed_draw && b.seed_draw);
    ASSERT_EQ(b.seed_draw->counter, a.seed_draw->counter + 1);
    auto ra = RngStream::replay(*a.seed_draw);
    auto rb = RngStream::replay(*b.seed_draw);
    ASSERT_TRUE(rasterize_box(sample_box(8, 8, ra), 8, 8).same_bits(a));
    ASSERT_TRUE(rasterize_box(sample_box(8, 8, rb), 8, 8).same_bits(b));
    for (std::size_t k = 0; k < a.bits.size(); ++k) {
      saw_overlap |= a.bits[k] && b.bits[k];
      saw_gap |= !a.bits[k] && !b.bits[k];
    }
  }
  EXPECT_TRUE(saw_overlap);
  EXPECT_TRUE(saw_gap);
}

TEST(SampleMask, SameSeedSameBits) {
  for (auto kind : {MaskKind::box, MaskKind::point, MaskKind::channel}) {
    RngStream s1("mask", 99), s2("mask", 99), other("mask", 100);
    bool differs = false;
    for (int t = 0; t < 50; ++t) {
      const auto a = sample_mask(kind, 16, 8, 8, s1);
      ASSERT_TRUE(a.same_bits(sample_mask(kind, 16, 8, 8, s2)));
      differs |= !a.same_bits(sample_mask(kind, 16, 8, 8, other));
    }
    EXPECT_TRUE(differs) << to_string(kind);
  }
}

TEST(MaskKindNames, ParseRoundTrip) {
  for (auto kind : {MaskKind::box, MaskKind::point, MaskKind::channel})
    EXPECT_EQ(parse_mask_kind(to_string(kind)), kind);
  EXPECT_EQ(parse_pairing("non-complementary"), Pairing::non_complementary);
  EXPECT_THROW(parse_mask_kind("ring"), ConfigError);
}

TEST(WritePgm, HeaderAndPixels) {
  auto m = BinaryMask::spatial(MaskKind::box, 2, 3);
  m(1, 2) = 1;
  const auto path = std::filesystem::temp_directory_path() / "featmine_mask_test.pgm";
  write_pgm(m, path.string());
  std::ifstream in(path, std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string header = "P5\n3 2\n255\n";
  ASSERT_EQ(bytes.size(), header.size() + 6);
  EXPECT_EQ(bytes.substr(0, header.size()), header);
  EXPECT_EQ(static_cast<unsigned char>(bytes.back()), 255);
  EXPECT_EQ(bytes[header.size()], 0);
  std::filesystem::remove(path);
}
