// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <compare>
#include <cstdint>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "scalenas/error.hpp"
#include "scalenas/rng.hpp"

namespace scalenas {

/// Topology and choice sets of the multi-branch search space.
///
/// Stages are numbered from 1. Stage s runs s parallel branches; branch r
/// operates at input / (stem_reduction * 2^r) resolution with
/// base_width * 2^r channels. Stage 1 is the fixed single-branch stem stage;
/// stages 2..S are searched.
struct SearchSpaceConfig {
  int base_width = 48;
  int stem_width = 64;
  int input_channels = 3;
  std::vector<int> depth_choices{2, 3, 4, 5};
  std::vector<double> fusion_percentages{0.2, 0.5, 0.8};
  std::vector<int> stage_modules{1, 1, 4, 3};
  int stem_reduction = 4;
  int stage1_blocks = 4;

  int num_stages() const { return static_cast<int>(stage_modules.size()); }
  int modules(int stage) const { return stage_modules.at(stage - 1); }
  static int branches(int stage) { return stage; }
  int width(int branch) const { return base_width << branch; }
  int min_depth() const { return depth_choices.front(); }
  int max_depth() const { return depth_choices.back(); }
  int stem_convs() const {
    int n = 0;
    for (int r = stem_reduction; r > 1; r >>= 1) ++n;
    return n;
  }
  bool has_depth(int d) const {
    return std::binary_search(depth_choices.begin(), depth_choices.end(), d);
  }

  bool operator==(const SearchSpaceConfig&) const = default;
};

/// Problems with a configuration; empty means usable.
inline std::vector<std::string> config_problems(const SearchSpaceConfig& c) {
  std::vector<std::string> out;
  if (c.base_width < 1) out.push_back("base_width must be >= 1");
  if (c.stem_width < 1) out.push_back("stem_width must be >= 1");
  if (c.input_channels < 1) out.push_back("input_channels must be >= 1");
  if (c.depth_choices.empty()) out.push_back("depth_choices must be non-empty");
  for (std::size_t i = 0; i < c.depth_choices.size(); ++i) {
    if (c.depth_choices[i] < 1) out.push_back("depth choices must be >= 1");
    if (i > 0 && c.depth_choices[i] <= c.depth_choices[i - 1])
      out.push_back("depth_choices must be strictly increasing");
  }
  for (double f : c.fusion_percentages)
    if (!(f >= 0.0 && f <= 1.0)) out.push_back("fusion percentages must lie in [0,1]");
  if (c.stage_modules.size() < 2) out.push_back("at least two stages are required");
  if (!c.stage_modules.empty() && c.stage_modules.front() != 1)
    out.push_back("stage 1 has exactly one module");
  for (int m : c.stage_modules)
    if (m < 1) out.push_back("every stage needs at least one module");
  if (c.stem_reduction < 2 || (c.stem_reduction & (c.stem_reduction - 1)) != 0)
    out.push_back("stem_reduction must be a power of two >= 2");
  if (c.stage1_blocks < 0) out.push_back("stage1_blocks must be >= 0");
  return out;
}

inline void require_valid(const SearchSpaceConfig& c) {
  auto problems = config_problems(c);
  if (!problems.empty()) throw ConfigError("invalid search space: " + problems.front());
}

inline nlohmann::json to_json(const SearchSpaceConfig& c) {
  return nlohmann::json{{"base_width", c.base_width},
                        {"stem_width", c.stem_width},
                        {"input_channels", c.input_channels},
                        {"depth_choices", c.depth_choices},
                        {"fusion_percentages", c.fusion_percentages},
                        {"stage_modules", c.stage_modules},
                        {"stem_reduction", c.stem_reduction},
                        {"stage1_blocks", c.stage1_blocks}};
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Stable identifier of a search space, embedded in every artifact.
inline std::string config_hash(const SearchSpaceConfig& c) {
  return hex64(fnv1a64(to_json(c).dump()));
}

struct ModuleKey {
  int stage = 0;
  int module = 0;
  auto operator<=>(const ModuleKey&) const = default;
};

struct SlotKey {
  int stage = 0;
  int module = 0;
  int branch = 0;
  auto operator<=>(const SlotKey&) const = default;
  ModuleKey module_key() const { return {stage, module}; }
};

/// A fusion edge from the output of block `pos` on branch `src` to branch `dst`.
struct GateKey {
  int stage = 0;
  int module = 0;
  int src = 0;
  int pos = 0;
  int dst = 0;
  auto operator<=>(const GateKey&) const = default;
  ModuleKey module_key() const { return {stage, module}; }
};

inline std::string to_string(const SlotKey& k) {
  std::ostringstream os;
  os << "(" << k.stage << "," << k.module << "," << k.branch << ")";
  return os.str();
}

inline std::string to_string(const GateKey& k) {
  std::ostringstream os;
  os << "(" << k.stage << "," << k.module << "," << k.src << "," << k.pos << "," << k.dst << ")";
  return os.str();
}

/// Complete architecture description: a depth for every searched
/// (stage, module, branch) slot plus the set of active fusion gates.
struct Genome {
  std::map<SlotKey, int> depths;
  std::set<GateKey> gates;

  int depth(int stage, int module, int branch) const {
    auto it = depths.find({stage, module, branch});
    return it == depths.end() ? 0 : it->second;
  }
  bool operator==(const Genome&) const = default;
};

/// Every searched module of a config, in canonical order.
inline std::vector<ModuleKey> searched_modules(const SearchSpaceConfig& c) {
  std::vector<ModuleKey> out;
  for (int s = 2; s <= c.num_stages(); ++s)
    for (int m = 0; m < c.modules(s); ++m) out.push_back({s, m});
  return out;
}

/// Gate sites of one module that are valid for the module's current depths.
inline std::vector<GateKey> module_gate_sites(const Genome& g, ModuleKey mk) {
  std::vector<GateKey> out;
  const int n = SearchSpaceConfig::branches(mk.stage);
  for (int src = 0; src < n; ++src) {
    const int ds = g.depth(mk.stage, mk.module, src);
    for (int pos = 1; pos <= ds; ++pos)
      for (int dst = 0; dst < n; ++dst) {
        if (dst == src) continue;
        if (pos <= g.depth(mk.stage, mk.module, dst))
          out.push_back({mk.stage, mk.module, src, pos, dst});
      }
  }
  return out;
}

/// All gate sites valid under the genome's depths, in canonical order.
inline std::vector<GateKey> gate_sites(const Genome& g, const SearchSpaceConfig& c) {
  std::vector<GateKey> out;
  for (auto mk : searched_modules(c)) {
    auto sites = module_gate_sites(g, mk);
    out.insert(out.end(), sites.begin(), sites.end());
  }
  return out;
}

enum class Rule {
  kInvalidConfig,
  kMissingDepth,
  kUnknownSlot,
  kDepthNotInChoices,
  kUnknownModule,
  kBranchMissing,
  kSelfLoop,
  kBadPosition,
  kPositionExceedsDepth,
};

struct Violation {
  Rule rule;
  std::string key;
  std::string message;
};

struct Verdict {
  std::vector<Violation> violations;
  bool ok() const { return violations.empty(); }
  explicit operator bool() const { return ok(); }
};

/// Checks every genome invariant against `config`. Never throws; the
/// violation list is ordered with the first violated rule first.
inline Verdict validate(const Genome& g, const SearchSpaceConfig& config) {
  Verdict v;
  auto add = [&](Rule r, std::string key, std::string msg) {
    v.violations.push_back({r, std::move(key), std::move(msg)});
  };
  for (const auto& p : config_problems(config)) add(Rule::kInvalidConfig, "config", p);
  if (!v.ok()) return v;

  for (auto mk : searched_modules(config))
    for (int b = 0; b < SearchSpaceConfig::branches(mk.stage); ++b) {
      SlotKey key{mk.stage, mk.module, b};
      if (!g.depths.contains(key)) add(Rule::kMissingDepth, to_string(key), "missing depth for slot");
    }
  for (const auto& [key, d] : g.depths) {
    const bool known = key.stage >= 2 && key.stage <= config.num_stages() && key.module >= 0 &&
                       key.module < config.modules(key.stage) && key.branch >= 0 &&
                       key.branch < key.stage;
    if (!known) {
      add(Rule::kUnknownSlot, to_string(key), "slot does not exist in the search space");
      continue;
    }
    if (!config.has_depth(d)) add(Rule::kDepthNotInChoices, to_string(key), "depth not in choice set");
  }
  for (const auto& gate : g.gates) {
    const auto key = to_string(gate);
    if (gate.stage < 2 || gate.stage > config.num_stages() || gate.module < 0 ||
        gate.module >= config.modules(gate.stage)) {
      add(Rule::kUnknownModule, key, "gate module does not exist");
      continue;
    }
    if (gate.src < 0 || gate.src >= gate.stage || gate.dst < 0 || gate.dst >= gate.stage) {
      add(Rule::kBranchMissing, key, "gate endpoint branch does not exist in stage");
      continue;
    }
    if (gate.src == gate.dst) {
      add(Rule::kSelfLoop, key, "gate source equals destination");
      continue;
    }
    if (gate.pos < 1) {
      add(Rule::kBadPosition, key, "gate position must be >= 1");
      continue;
    }
    if (gate.pos > g.depth(gate.stage, gate.module, gate.src) ||
        gate.pos > g.depth(gate.stage, gate.module, gate.dst))
      add(Rule::kPositionExceedsDepth, key, "gate position exceeds branch depth");
  }
  return v;
}

inline void require_valid(const Genome& g, const SearchSpaceConfig& c) {
  auto v = validate(g, c);
  if (!v.ok())
    throw ValidationError("invalid genome: " + v.violations.front().message + " at " +
                          v.violations.front().key);
}

/// Largest genome: maximum depth everywhere with every gate site active.
inline Genome full_genome(const SearchSpaceConfig& c) {
  Genome g;
  for (auto mk : searched_modules(c))
    for (int b = 0; b < mk.stage; ++b) g.depths[{mk.stage, mk.module, b}] = c.max_depth();
  for (const auto& site : gate_sites(g, c)) g.gates.insert(site);
  return g;
}

/// Smallest genome: minimum depth everywhere, no gates.
inline Genome min_genome(const SearchSpaceConfig& c) {
  Genome g;
  for (auto mk : searched_modules(c))
    for (int b = 0; b < mk.stage; ++b) g.depths[{mk.stage, mk.module, b}] = c.min_depth();
  return g;
}

/// The hand-designed four-stage reference network: four blocks on every
/// branch and a fully connected exchange at the end of each module.
inline Genome hrnet_baseline(const SearchSpaceConfig& c) {
  if (c.stage_modules != std::vector<int>{1, 1, 4, 3} || !c.has_depth(4))
    throw ConfigError("baseline requires the default stage topology and depth 4 in the choice set");
  Genome g;
  for (auto mk : searched_modules(c)) {
    for (int b = 0; b < mk.stage; ++b) g.depths[{mk.stage, mk.module, b}] = 4;
    for (int src = 0; src < mk.stage; ++src)
      for (int dst = 0; dst < mk.stage; ++dst)
        if (src != dst) g.gates.insert({mk.stage, mk.module, src, 4, dst});
  }
  return g;
}

struct StructureCount {
  long long blocks = 0;
  long long fusions = 0;
  bool operator==(const StructureCount&) const = default;
};

/// Block and fusion counts per stage; index 0 is stage 1 (fixed blocks only).
inline std::vector<StructureCount> count_structure_by_stage(const Genome& g,
                                                            const SearchSpaceConfig& c) {
  require_valid(g, c);
  std::vector<StructureCount> out(c.num_stages());
  out[0].blocks = c.stage1_blocks;
  for (const auto& [key, d] : g.depths) out[key.stage - 1].blocks += d;
  for (const auto& gate : g.gates) out[gate.stage - 1].fusions += 1;
  return out;
}

inline StructureCount count_structure(const Genome& g, const SearchSpaceConfig& c) {
  StructureCount total;
  for (const auto& s : count_structure_by_stage(g, c)) {
    total.blocks += s.blocks;
    total.fusions += s.fusions;
  }
  return total;
}

inline constexpr int kGenomeFormatVersion = 1;

inline nlohmann::json genome_to_json(const Genome& g, const std::string& hash) {
  nlohmann::json depths = nlohmann::json::array();
  for (const auto& [k, d] : g.depths) depths.push_back({k.stage, k.module, k.branch, d});
  nlohmann::json gates = nlohmann::json::array();
  for (const auto& k : g.gates) gates.push_back({k.stage, k.module, k.src, k.pos, k.dst});
  return nlohmann::json{{"version", kGenomeFormatVersion},
                        {"config_hash", hash},
                        {"depths", std::move(depths)},
                        {"gates", std::move(gates)}};
}

/// Canonical single-line text form. Equal genomes serialize to equal bytes.
inline std::string serialize(const Genome& g, const std::string& hash) {
  return genome_to_json(g, hash).dump() + "\n";
}

inline std::string serialize(const Genome& g, const SearchSpaceConfig& c) {
  return serialize(g, config_hash(c));
}

/// Hash-free canonical key, used for deduplication.
inline std::string canonical_key(const Genome& g) { return genome_to_json(g, "").dump(); }

struct ParsedGenome {
  Genome genome;
  std::string config_hash;
};

inline ParsedGenome genome_from_json(const nlohmann::json& j) {
  try {
    if (j.at("version").get<int>() != kGenomeFormatVersion)
      throw ValidationError("unsupported genome format version");
    ParsedGenome out;
    out.config_hash = j.at("config_hash").get<std::string>();
    for (const auto& row : j.at("depths")) {
      if (row.size() != 4) throw ValidationError("depth entry must have 4 integers");
      SlotKey k{row[0].get<int>(), row[1].get<int>(), row[2].get<int>()};
      if (!out.genome.depths.emplace(k, row[3].get<int>()).second)
        throw ValidationError("duplicate depth slot " + to_string(k));
    }
    for (const auto& row : j.at("gates")) {
      if (row.size() != 5) throw ValidationError("gate entry must have 5 integers");
      GateKey k{row[0].get<int>(), row[1].get<int>(), row[2].get<int>(), row[3].get<int>(),
                row[4].get<int>()};
      if (!out.genome.gates.insert(k).second) throw ValidationError("duplicate gate " + to_string(k));
    }
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed genome document: ") + e.what());
  }
}

inline ParsedGenome parse_genome(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(std::string("malformed genome document: ") + e.what());
  }
  return genome_from_json(j);
}

}  // namespace scalenas
