// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "scalenas/error.hpp"
#include "scalenas/genome.hpp"
#include "scalenas/rng.hpp"

namespace scalenas {

/// One grouped-sampling partition: depths drawn from an inclusive range of
/// consecutive choices, gates included with probability `fusion_p`.
struct SamplingGroup {
  int depth_lo = 0;
  int depth_hi = 0;
  double fusion_p = 0.0;
  bool operator==(const SamplingGroup&) const = default;
};

/// Consecutive depth-choice pairs crossed with the fusion percentages,
/// depth-range major.
inline std::vector<SamplingGroup> groups(const SearchSpaceConfig& c) {
  require_valid(c);
  if (c.depth_choices.size() < 2)
    throw ConfigError("grouped sampling needs at least two depth choices");
  std::vector<SamplingGroup> out;
  for (std::size_t i = 0; i + 1 < c.depth_choices.size(); ++i)
    for (double f : c.fusion_percentages)
      out.push_back({c.depth_choices[i], c.depth_choices[i + 1], f});
  return out;
}

/// Index of `g` within groups(c), or -1.
inline int group_index(const SearchSpaceConfig& c, const SamplingGroup& g) {
  auto all = groups(c);
  auto it = std::find(all.begin(), all.end(), g);
  return it == all.end() ? -1 : static_cast<int>(it - all.begin());
}

/// Round-robin group schedule used during supernet training.
inline int scheduled_group(const SearchSpaceConfig& c, std::uint64_t iteration) {
  return static_cast<int>(iteration % groups(c).size());
}

namespace detail {

template <class DepthFn>
Genome sample_with(const SearchSpaceConfig& c, Rng& rng, DepthFn draw_depth, double gate_p) {
  Genome g;
  for (auto mk : searched_modules(c))
    for (int b = 0; b < mk.stage; ++b) g.depths[{mk.stage, mk.module, b}] = draw_depth(rng);
  for (const auto& site : gate_sites(g, c))
    if (rng.bernoulli(gate_p)) g.gates.insert(site);
  return g;
}

}  // namespace detail

inline Genome sample_uniform(const SearchSpaceConfig& c, Rng& rng, double gate_p = 0.5) {
  require_valid(c);
  return detail::sample_with(
      c, rng, [&](Rng& r) { return c.depth_choices[r.below(c.depth_choices.size())]; }, gate_p);
}

/// Uniform depths over the whole choice set; each realized gate site kept
/// with probability `gate_p`.
inline Genome sample_uniform(const SearchSpaceConfig& c, std::uint64_t seed, double gate_p = 0.5) {
  Rng rng(seed);
  return sample_uniform(c, rng, gate_p);
}

inline Genome sample_grouped(const SearchSpaceConfig& c, const SamplingGroup& group, Rng& rng) {
  if (group_index(c, group) < 0) throw ConfigError("sampling group is not part of this search space");
  const int lo = group.depth_lo;
  const int hi = group.depth_hi;
  return detail::sample_with(
      c, rng, [&](Rng& r) { return r.bernoulli(0.5) ? hi : lo; }, group.fusion_p);
}

inline Genome sample_grouped(const SearchSpaceConfig& c, const SamplingGroup& group,
                             std::uint64_t seed) {
  Rng rng(seed);
  return sample_grouped(c, group, rng);
}

/// Sandwich-rule batch for one training step: smallest, largest, and two
/// uniform samples drawn from a stream keyed by (seed, step).
inline std::vector<Genome> sandwich_schedule(const SearchSpaceConfig& c, std::uint64_t seed,
                                             std::uint64_t step) {
  Rng rng(derive_seed(seed, "sandwich", step));
  std::vector<Genome> out;
  out.push_back(min_genome(c));
  out.push_back(full_genome(c));
  out.push_back(sample_uniform(c, rng));
  out.push_back(sample_uniform(c, rng));
  return out;
}

}  // namespace scalenas
