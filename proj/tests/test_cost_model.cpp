// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "scalenas/cost_model.hpp"
#include "scalenas/search_space.hpp"

using namespace scalenas;

namespace {

const HeadSpec kPose{HeadKind::kKeypoint, 17};
const HeadSpec kSeg{HeadKind::kSegmentation, 19};

double rel(double got, double want) { return std::abs(got - want) / want; }

}  // namespace

TEST(Calibration, KeypointBaseline) {
  const SearchSpaceConfig c;
  const auto r = cost(hrnet_baseline(c), c, 256, 192, kPose);
  EXPECT_LT(rel(static_cast<double>(r.params), 63.6e6), 0.05) << r.params;
  EXPECT_LT(rel(static_cast<double>(r.flops), 14.6e9), 0.10) << r.flops;
  EXPECT_EQ(r.blocks, 108);
  EXPECT_EQ(r.fusions, 62);
}

TEST(Calibration, SegmentationBaseline) {
  const SearchSpaceConfig c;
  const auto r = cost(hrnet_baseline(c), c, 1024, 2048, kSeg);
  EXPECT_LT(rel(static_cast<double>(r.params), 65.8e6), 0.05) << r.params;
  EXPECT_LT(rel(static_cast<double>(r.flops), 696.2e9), 0.10) << r.flops;
}

TEST(Calibration, OtherConventionMissesTheKeypointTarget) {
  const SearchSpaceConfig c;
  const auto two = cost(hrnet_baseline(c), c, 256, 192, kPose, FlopConvention::kMacIsTwo);
  const auto one = cost(hrnet_baseline(c), c, 256, 192, kPose, FlopConvention::kMacIsOne);
  EXPECT_EQ(two.flops, 2 * one.flops);
  EXPECT_EQ(two.params, one.params);
  EXPECT_GT(rel(static_cast<double>(two.flops), 14.6e9), 0.10);
}

TEST(Cost, HandComputedToy) {
  // One stride-2 stem conv, no stage-1 blocks, two branches of width 2 and 4,
  // depth 1 each and one upsample gate. Input 4x4 -> branch resolutions 2x2, 1x1.
  SearchSpaceConfig c;
  c.base_width = 2;
  c.stem_width = 3;
  c.input_channels = 1;
  c.depth_choices = {1};
  c.stage_modules = {1, 1};
  c.stem_reduction = 2;
  c.stage1_blocks = 0;
  Genome g = min_genome(c);
  g.gates.insert({2, 0, 1, 1, 0});
  const auto r = cost(g, c, 4, 4, HeadSpec{});
  std::uint64_t params = 0, flops = 0;
  auto conv = [&](std::uint64_t ci, std::uint64_t co, std::uint64_t k, std::uint64_t hw) {
    params += ci * co * k * k + 2 * co;
    flops += ci * co * k * k * hw;
  };
  conv(1, 3, 3, 4);      // stem
  conv(3, 2, 3, 4);      // transition to branch 0
  conv(3, 4, 3, 1);      // transition to branch 1
  conv(2, 2, 3, 4);      // branch 0 block
  conv(2, 2, 3, 4);
  conv(4, 4, 3, 1);      // branch 1 block
  conv(4, 4, 3, 1);
  conv(4, 2, 1, 1);      // upsample gate, 1x1 at source resolution
  EXPECT_EQ(r.params, params);
  EXPECT_EQ(r.flops, flops);
}

TEST(Cost, DownsampleChainKeepsSourceWidthUntilLastStep) {
  SearchSpaceConfig c;
  c.base_width = 2;
  c.stem_width = 2;
  c.depth_choices = {1};
  c.stage_modules = {1, 1, 1};
  c.stage1_blocks = 0;
  Genome g = min_genome(c);
  const auto base = cost(g, c, 64, 64, HeadSpec{});
  g.gates.insert({3, 0, 0, 1, 2});
  const auto with = cost(g, c, 64, 64, HeadSpec{});
  // 2 -> 2 at 8x8, then 2 -> 8 at 4x4, each with a norm.
  EXPECT_EQ(with.params - base.params, (2u * 2 * 9 + 4) + (2u * 8 * 9 + 16));
  EXPECT_EQ(with.flops - base.flops, 2u * 2 * 9 * 64 + 2u * 8 * 9 * 16);
}

TEST(Cost, FlopsScaleWithAreaParamsDoNot) {
  const SearchSpaceConfig c;
  Rng rng(7);
  for (int i = 0; i < 10; ++i) {
    const auto g = sample_uniform(c, rng);
    const auto a = cost(g, c, 256, 192, kPose), b = cost(g, c, 512, 384, kPose);
    EXPECT_EQ(b.flops, 4 * a.flops);
    EXPECT_EQ(b.params, a.params);
  }
}

TEST(Cost, StrictlyMonotone) {
  const SearchSpaceConfig c;
  Rng rng(11);
  for (int i = 0; i < 20; ++i) {
    const auto g = sample_uniform(c, rng);
    const auto base = cost(g, c, 256, 192, kPose);
    if (!g.gates.empty()) {
      Genome h = g;
      h.gates.erase(std::next(h.gates.begin(), static_cast<long>(rng.below(h.gates.size()))));
      const auto r = cost(h, c, 256, 192, kPose);
      EXPECT_LT(r.flops, base.flops);
      EXPECT_LT(r.params, base.params);
    }
    for (const auto& [slot, d] : g.depths) {
      if (d == c.min_depth()) continue;
      Genome h = g;
      h.depths[slot] = c.depth_choices[std::find(c.depth_choices.begin(), c.depth_choices.end(), d) -
                                       c.depth_choices.begin() - 1];
      std::erase_if(h.gates, [&](const GateKey& k) {
        return k.stage == slot.stage && k.module == slot.module && k.pos > h.depths[slot] &&
               (k.src == slot.branch || k.dst == slot.branch);
      });
      const auto r = cost(h, c, 256, 192, kPose);
      EXPECT_LT(r.flops, base.flops);
      EXPECT_LT(r.params, base.params);
      break;
    }
  }
}

TEST(Cost, BreakdownSumsToTotals) {
  const SearchSpaceConfig c;
  const auto r = cost(full_genome(c), c, 1024, 2048, kSeg);
  ASSERT_EQ(r.per_stage.size(), 5u);
  std::uint64_t p = 0, f = 0;
  long long b = 0, u = 0;
  for (const auto& s : r.per_stage) {
    p += s.params;
    f += s.flops;
    b += s.blocks;
    u += s.fusions;
  }
  EXPECT_EQ(p, r.params);
  EXPECT_EQ(f, r.flops);
  EXPECT_EQ(b, r.blocks);
  EXPECT_EQ(u, r.fusions);
  EXPECT_EQ(r.per_stage.back().name, "head");
  const auto n = count_structure(full_genome(c), c);
  EXPECT_EQ(r.blocks, n.blocks);
  EXPECT_EQ(r.fusions, n.fusions);
}

TEST(Cost, Errors) {
  const SearchSpaceConfig c;
  EXPECT_THROW(cost(full_genome(c), c, 0, 192, kPose), ConfigError);
  Genome bad = full_genome(c);
  bad.depths.erase(bad.depths.begin());
  EXPECT_THROW(cost(bad, c, 256, 192, kPose), ValidationError);
  EXPECT_THROW(cost(full_genome(c), c, 256, 192, HeadSpec{HeadKind::kKeypoint, 0}), ConfigError);
}

TEST(ParetoCostAxis, BatchMatchesSingle) {
  const SearchSpaceConfig c;
  EXPECT_TRUE(pareto_cost_axis({}, c, 256, 192, kPose).empty());
  Rng rng(3);
  std::vector<Genome> gs;
  for (int i = 0; i < 100; ++i) gs.push_back(sample_uniform(c, rng));
  const auto batch = pareto_cost_axis(gs, c, 256, 192, kPose);
  ASSERT_EQ(batch.size(), gs.size());
  for (std::size_t i = 0; i < gs.size(); ++i) {
    const auto one = cost(gs[i], c, 256, 192, kPose);
    EXPECT_EQ(batch[i].flops, one.flops);
    EXPECT_EQ(batch[i].params, one.params);
  }
  gs[37].depths.clear();
  try {
    pareto_cost_axis(gs, c, 256, 192, kPose);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("genome 37"), std::string::npos);
  }
}
