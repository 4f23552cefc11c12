#include <gtest/gtest.h>

#include <set>

#include "test_util.hpp"

using namespace layerlock;

TEST(Masking, ReferenceGridCounts) {
  // 8 x 14 x 14 = 1568 tokens: 5% kept rounds to 78, 5% subselected rounds up to 79.
  EXPECT_EQ(kept_count(1568, 0.95), 78u);
  EXPECT_EQ(subsample_count(1568, 0.05), 79u);
  EXPECT_EQ(kept_count(10, 0.999), 1u);
  EXPECT_EQ(subsample_count(20, 0.05), 1u);
}

TEST(Masking, RandomMaskIsSortedDistinctAndSized) {
  Rng rng(1);
  for (int i = 0; i < 50; ++i) {
    const auto keep = random_mask(1568, 0.95, rng);
    ASSERT_EQ(keep.size(), 78u);
    EXPECT_TRUE(std::is_sorted(keep.begin(), keep.end()));
    EXPECT_EQ(std::set<std::size_t>(keep.begin(), keep.end()).size(), keep.size());
    EXPECT_LT(keep.back(), 1568u);
  }
}

TEST(Masking, RandomMaskIsUniformOverPositions) {
  // Chi-square over 64 positions, 8 kept per draw; df = 63, the 0.999 quantile is ~103.4.
  Rng rng(2);
  std::vector<double> hits(64, 0.0);
  const int draws = 20000;
  for (int i = 0; i < draws; ++i)
    for (auto k : random_mask(64, 0.875, rng)) hits[k] += 1.0;
  const double expect = draws * 8.0 / 64.0;
  double chi2 = 0;
  for (double h : hits) chi2 += (h - expect) * (h - expect) / expect;
  EXPECT_LT(chi2, 103.4);
}

TEST(Masking, SameSeedSameMask) {
  Rng a(derive_seed(5, Stream::mask, {3, 1})), b(derive_seed(5, Stream::mask, {3, 1}));
  EXPECT_EQ(random_mask(100, 0.9, a), random_mask(100, 0.9, b));
}

TEST(Masking, SubsampleFullFractionIsIdentity) {
  Rng rng(3);
  const auto all = subsample_latent_patches(10, 1.0, rng);
  ASSERT_EQ(all.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(all[i], i);
  EXPECT_THROW(subsample_latent_patches(10, 0.0, rng), ContractError);
  EXPECT_EQ(subsample_latent_patches(1568, 0.05, rng).size(), 79u);
}

TEST(Masking, InvalidRatioRejected) {
  Rng rng(4);
  EXPECT_THROW(random_mask(10, 1.0, rng), ContractError);
  EXPECT_THROW(random_mask(0, 0.5, rng), ContractError);
  MaskSpec s;
  s.mask_ratio = -0.1;
  EXPECT_THROW(s.validate(), ContractError);
}

TEST(Multiblock, BlocksStayOnGridAndMaskAllFrames) {
  const GridShape g{8, 14, 14};
  const MultiblockParams p{8, {0.15, 0.3}, {0.75, 1.5}};
  Rng rng(5);
  for (int i = 0; i < 50; ++i) {
    const auto m = multiblock_mask(g, p, rng);
    ASSERT_EQ(m.blocks.size(), 8u);
    const auto masked = m.masked_indices();
    const auto ctx = m.context_indices();
    EXPECT_EQ(masked.size() + ctx.size(), g.count());
    EXPECT_EQ(masked.size(), m.masked_count());
    // Spatial masks repeat over time: a masked (h, w) is masked in every frame.
    std::set<std::size_t> ms(masked.begin(), masked.end());
    for (auto idx : masked) {
      const auto pos = g.position(idx);
      for (std::size_t t = 0; t < g.t; ++t) EXPECT_TRUE(ms.count(g.index({t, pos.h, pos.w})));
    }
  }
}

TEST(Multiblock, BlockAreaTracksScale) {
  const GridShape g{1, 20, 20};
  const MultiblockParams p{1, {0.25, 0.25}, {1.0, 1.0}};
  Rng rng(6);
  const auto m = multiblock_mask(g, p, rng);
  // A square block of area 0.25 * 400 = 100 is 10 x 10.
  EXPECT_EQ(m.masked_count(), 100u);
}
