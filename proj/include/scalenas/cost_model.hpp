// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "scalenas/error.hpp"
#include "scalenas/genome.hpp"

namespace scalenas {

enum class HeadKind { kNone, kSegmentation, kKeypoint };

/// Prediction head appended to the backbone.
///   segmentation: every branch bilinearly upsampled to branch 0, concatenated,
///                 then a biased 1x1 conv to `out_channels` classes;
///   keypoint:     a biased 1x1 conv on branch 0 to `out_channels` heatmaps.
struct HeadSpec {
  HeadKind kind = HeadKind::kNone;
  int out_channels = 0;
  bool operator==(const HeadSpec&) const = default;
};

inline void require_valid(const HeadSpec& h) {
  if (h.kind != HeadKind::kNone && h.out_channels < 1)
    throw ConfigError("head needs at least one output channel");
}

/// One multiply-accumulate counts as one or two floating point operations.
/// Calibration against published HRNet-W48 numbers selects kMacIsOne.
enum class FlopConvention { kMacIsOne, kMacIsTwo };

inline constexpr FlopConvention kDefaultFlopConvention = FlopConvention::kMacIsOne;

struct CostBreakdown {
  std::string name;
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
  long long blocks = 0;
  long long fusions = 0;
};

struct CostReport {
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
  long long blocks = 0;
  long long fusions = 0;
  std::vector<CostBreakdown> per_stage;  // stage1..stageS, then head
};

/// Spatial size after a 3x3 stride-2 conv with padding 1.
constexpr int halve(int n) { return (n - 1) / 2 + 1; }

namespace detail {

struct CostAccumulator {
  FlopConvention convention;
  CostBreakdown* part;

  void conv(std::uint64_t cin, std::uint64_t cout, std::uint64_t k, std::uint64_t h,
            std::uint64_t w, bool bias, bool norm) {
    const std::uint64_t weights = cin * cout * k * k;
    part->params += weights + (bias ? cout : 0) + (norm ? 2 * cout : 0);
    const std::uint64_t macs = weights * h * w;
    part->flops += convention == FlopConvention::kMacIsOne ? macs : 2 * macs;
  }
};

}  // namespace detail

/// Parameter and FLOP count of `genome` for one forward pass of a single
/// `height` x `width` image. Only convolutions contribute FLOPs;
/// normalization, activation, and resampling are excluded.
inline CostReport cost(const Genome& genome, const SearchSpaceConfig& config, int height,
                       int width, const HeadSpec& head,
                       FlopConvention convention = kDefaultFlopConvention) {
  require_valid(genome, config);
  require_valid(head);
  if (height <= 0 || width <= 0) throw ConfigError("input resolution must be positive");

  const int stages = config.num_stages();
  CostReport report;
  report.per_stage.resize(stages + 1);
  for (int s = 1; s <= stages; ++s) report.per_stage[s - 1].name = "stage" + std::to_string(s);
  report.per_stage[stages].name = "head";

  auto counts = count_structure_by_stage(genome, config);
  for (int s = 1; s <= stages; ++s) {
    report.per_stage[s - 1].blocks = counts[s - 1].blocks;
    report.per_stage[s - 1].fusions = counts[s - 1].fusions;
  }

  // Stem: a chain of stride-2 3x3 convs; branch resolutions follow by halving.
  int h = height;
  int w = width;
  detail::CostAccumulator acc{convention, &report.per_stage[0]};
  int cin = config.input_channels;
  for (int i = 0; i < config.stem_convs(); ++i) {
    h = halve(h);
    w = halve(w);
    acc.conv(cin, config.stem_width, 3, h, w, false, true);
    cin = config.stem_width;
  }
  std::vector<int> rh(stages), rw(stages);
  rh[0] = h;
  rw[0] = w;
  for (int r = 1; r < stages; ++r) {
    rh[r] = halve(rh[r - 1]);
    rw[r] = halve(rw[r - 1]);
  }
  if (rh[stages - 1] < 1 || rw[stages - 1] < 1) throw ConfigError("input resolution too small");

  for (int i = 0; i < config.stage1_blocks; ++i)
    for (int c = 0; c < 2; ++c) acc.conv(config.stem_width, config.stem_width, 3, rh[0], rw[0], false, true);

  for (int s = 2; s <= stages; ++s) {
    acc.part = &report.per_stage[s - 1];
    if (s == 2) {
      acc.conv(config.stem_width, config.width(0), 3, rh[0], rw[0], false, true);
      acc.conv(config.stem_width, config.width(1), 3, rh[1], rw[1], false, true);
    } else {
      acc.conv(config.width(s - 2), config.width(s - 1), 3, rh[s - 1], rw[s - 1], false, true);
    }
    for (const auto& [slot, depth] : genome.depths) {
      if (slot.stage != s) continue;
      const int c = config.width(slot.branch);
      for (int blk = 0; blk < depth; ++blk)
        for (int k = 0; k < 2; ++k) acc.conv(c, c, 3, rh[slot.branch], rw[slot.branch], false, true);
    }
    for (const auto& gate : genome.gates) {
      if (gate.stage != s) continue;
      if (gate.dst > gate.src) {
        // Chained stride-2 convs; intermediate steps keep the source width.
        for (int step = gate.src + 1; step <= gate.dst; ++step) {
          const int out = step == gate.dst ? config.width(gate.dst) : config.width(gate.src);
          acc.conv(config.width(gate.src), out, 3, rh[step], rw[step], false, true);
        }
      } else {
        // 1x1 conv at source resolution; the bilinear resize is linear per
        // channel, so it commutes with the channel mix and costs no MACs.
        acc.conv(config.width(gate.src), config.width(gate.dst), 1, rh[gate.src], rw[gate.src], false,
                 true);
      }
    }
  }

  acc.part = &report.per_stage[stages];
  if (head.kind == HeadKind::kKeypoint) {
    acc.conv(config.width(0), head.out_channels, 1, rh[0], rw[0], true, false);
  } else if (head.kind == HeadKind::kSegmentation) {
    int concat = 0;
    for (int r = 0; r < stages; ++r) concat += config.width(r);
    acc.conv(concat, head.out_channels, 1, rh[0], rw[0], true, false);
  }

  for (const auto& p : report.per_stage) {
    report.params += p.params;
    report.flops += p.flops;
    report.blocks += p.blocks;
    report.fusions += p.fusions;
  }
  return report;
}

/// Batch form of cost(); output order follows input order. A failure names
/// the offending index.
inline std::vector<CostReport> pareto_cost_axis(const std::vector<Genome>& genomes,
                                                const SearchSpaceConfig& config, int height,
                                                int width, const HeadSpec& head,
                                                FlopConvention convention = kDefaultFlopConvention) {
  std::vector<CostReport> out;
  out.reserve(genomes.size());
  for (std::size_t i = 0; i < genomes.size(); ++i) {
    try {
      out.push_back(cost(genomes[i], config, height, width, head, convention));
    } catch (const std::exception& e) {
      throw ValidationError("genome " + std::to_string(i) + ": " + e.what());
    }
  }
  return out;
}

inline nlohmann::json to_json(const CostReport& r, const std::string& hash) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& p : r.per_stage)
    stages.push_back({{"name", p.name},
                      {"params", p.params},
                      {"flops", p.flops},
                      {"blocks", p.blocks},
                      {"fusions", p.fusions}});
  return nlohmann::json{{"version", 1},       {"config_hash", hash}, {"params", r.params},
                        {"flops", r.flops},   {"blocks", r.blocks},  {"fusions", r.fusions},
                        {"per_stage", stages}};
}

}  // namespace scalenas
