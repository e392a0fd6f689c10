// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <exception>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <unordered_set>
#include <vector>

#include "json.hpp"
#include "scalenas/error.hpp"
#include "scalenas/genome.hpp"
#include "scalenas/pareto.hpp"
#include "scalenas/rng.hpp"
#include "scalenas/search_space.hpp"

namespace scalenas {

struct EvalRecord {
  Genome genome;
  double accuracy = 0.0;
  std::uint64_t flops = 0;
  int generation = 0;  // 0 = initial population
  bool operator==(const EvalRecord&) const = default;
};

inline Point point_of(const EvalRecord& r) { return {static_cast<double>(r.flops), r.accuracy}; }

struct EvoConfig {
  int n0 = 1000;
  int k = 100;
  double p_c = 0.25;
  double p_m = 0.5;
  int N = 2000;
  std::uint64_t seed = 0;
  int workers = 1;
  int max_retries = 8;
};

inline void require_valid(const EvoConfig& e) {
  if (e.n0 < 1) throw ConfigError("n0 must be >= 1");
  if (e.k < 1) throw ConfigError("k must be >= 1");
  if (!(e.p_c >= 0.0 && e.p_c <= 1.0)) throw ConfigError("p_c must lie in [0,1]");
  if (!(e.p_m >= 0.0 && e.p_m <= 1.0)) throw ConfigError("p_m must lie in [0,1]");
  if (e.n0 > e.N) throw ConfigError("n0 must not exceed N");
  if (e.workers < 1) throw ConfigError("workers must be >= 1");
  if (e.max_retries < 0) throw ConfigError("max_retries must be >= 0");
}

using Evaluator = std::function<double(const Genome&)>;
using CostFn = std::function<std::uint64_t(const Genome&)>;

/// Set D plus its first front. The front holds one record per distinct genome.
struct ParetoArchive {
  std::vector<EvalRecord> records;
  std::vector<int> front;  // indices into records, flops ascending

  int generations() const { return records.empty() ? 0 : records.back().generation; }
};

namespace detail {

/// Index of the first occurrence of every distinct genome.
inline std::vector<int> unique_indices(const std::vector<EvalRecord>& recs) {
  std::unordered_set<std::string> seen;
  std::vector<int> out;
  for (std::size_t i = 0; i < recs.size(); ++i)
    if (seen.insert(canonical_key(recs[i].genome)).second) out.push_back(static_cast<int>(i));
  return out;
}

inline bool tie_order(const EvalRecord& a, const EvalRecord& b) {
  if (a.accuracy != b.accuracy) return a.accuracy > b.accuracy;
  if (a.flops != b.flops) return a.flops < b.flops;
  return canonical_key(a.genome) < canonical_key(b.genome);
}

}  // namespace detail

inline std::vector<int> compute_front(const std::vector<EvalRecord>& recs) {
  const auto uniq = detail::unique_indices(recs);
  std::vector<Point> pts;
  for (int i : uniq) pts.push_back(point_of(recs[i]));
  std::vector<int> out;
  for (int j : front_indices(pts)) out.push_back(uniq[j]);
  std::sort(out.begin(), out.end(), [&](int a, int b) {
    if (recs[a].flops != recs[b].flops) return recs[a].flops < recs[b].flops;
    return detail::tie_order(recs[a], recs[b]);
  });
  return out;
}

inline ParetoArchive make_archive(std::vector<EvalRecord> recs) {
  ParetoArchive a{std::move(recs), {}};
  a.front = compute_front(a.records);
  return a;
}

/// Up to k distinct genomes by non-dominated rank. Whole ranks are taken in
/// order; the rank that overflows is thinned to evenly spaced members of its
/// flops-sorted list. Output order: rank, then accuracy desc, flops asc, key.
inline std::vector<int> select_parents(const std::vector<EvalRecord>& recs, int k) {
  if (recs.empty()) throw ValidationError("select_parents on an empty archive");
  const auto uniq = detail::unique_indices(recs);
  std::vector<Point> pts;
  for (int i : uniq) pts.push_back(point_of(recs[i]));
  const auto rank = nondominated_ranks(pts);
  const int max_rank = *std::max_element(rank.begin(), rank.end());
  std::vector<int> chosen;
  for (int r = 0; r <= max_rank && static_cast<int>(chosen.size()) < k; ++r) {
    std::vector<int> members;
    for (std::size_t j = 0; j < uniq.size(); ++j)
      if (rank[j] == r) members.push_back(uniq[j]);
    const int need = k - static_cast<int>(chosen.size());
    if (static_cast<int>(members.size()) > need) {
      std::sort(members.begin(), members.end(), [&](int a, int b) {
        if (recs[a].flops != recs[b].flops) return recs[a].flops < recs[b].flops;
        return detail::tie_order(recs[a], recs[b]);
      });
      std::vector<int> thinned;
      const int m = static_cast<int>(members.size());
      if (need == 1) {
        thinned.push_back(*std::min_element(members.begin(), members.end(), [&](int a, int b) {
          return detail::tie_order(recs[a], recs[b]);
        }));
      } else {
        for (int i = 0; i < need; ++i) {
          const long long num = static_cast<long long>(i) * (m - 1);
          thinned.push_back(members[(2 * num + (need - 1)) / (2 * (need - 1))]);
        }
      }
      members = std::move(thinned);
    }
    std::sort(members.begin(), members.end(),
              [&](int a, int b) { return detail::tie_order(recs[a], recs[b]); });
    chosen.insert(chosen.end(), members.begin(), members.end());
  }
  return chosen;
}

struct CrossoverResult {
  Genome genome;
  int modules_replaced = 0;
};

/// Each searched module is, with probability p_c, replaced (depths and
/// gates) by the same module of a pool member drawn uniformly.
inline CrossoverResult crossover(const Genome& parent, const std::vector<const Genome*>& pool,
                                 const SearchSpaceConfig& c, double p_c, Rng& rng) {
  CrossoverResult out{parent, 0};
  if (pool.empty()) return out;
  for (const auto& mk : searched_modules(c)) {
    if (!rng.bernoulli(p_c)) continue;
    const Genome& other = *pool[rng.below(pool.size())];
    ++out.modules_replaced;
    for (int b = 0; b < mk.stage; ++b)
      out.genome.depths[{mk.stage, mk.module, b}] = other.depth(mk.stage, mk.module, b);
    std::erase_if(out.genome.gates,
                  [&](const GateKey& g) { return g.stage == mk.stage && g.module == mk.module; });
    for (const auto& g : other.gates)
      if (g.stage == mk.stage && g.module == mk.module) out.genome.gates.insert(g);
  }
  return out;
}

/// Flips every gate site valid under the genome's depths with probability p_m.
inline Genome mutate(const Genome& g, const SearchSpaceConfig& c, double p_m, Rng& rng) {
  Genome out = g;
  for (const auto& site : gate_sites(g, c)) {
    if (!rng.bernoulli(p_m)) continue;
    if (!out.gates.erase(site)) out.gates.insert(site);
  }
  return out;
}

namespace detail {

/// Evaluates genomes[i] into out[i] on `workers` threads; the first failure
/// (lowest index) is rethrown after all threads join.
inline void evaluate_all(const std::vector<Genome>& genomes, const Evaluator& eval, const CostFn& cost,
                         int workers, int generation, std::vector<EvalRecord>& out) {
  out.assign(genomes.size(), {});
  std::vector<std::exception_ptr> errors(genomes.size());
  auto work = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t i = begin; i < genomes.size(); i += stride) {
      try {
        const double acc = eval(genomes[i]);
        if (!(acc >= 0.0 && acc <= 1.0)) throw RuntimeFailure("accuracy outside [0,1]");
        out[i] = {genomes[i], acc, cost(genomes[i]), generation};
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n = static_cast<std::size_t>(std::max(1, workers));
  if (n == 1 || genomes.size() < 2) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(work, t, n);
    for (auto& th : pool) th.join();
  }
  for (std::size_t i = 0; i < errors.size(); ++i)
    if (errors[i]) {
      try {
        std::rethrow_exception(errors[i]);
      } catch (const std::exception& e) {
        throw RuntimeFailure("evaluation of genome " + std::to_string(i) + " in generation " +
                             std::to_string(generation) + " failed: " + e.what());
      }
    }
}

/// n uniform genomes; a draw that repeats an earlier one is redrawn up to
/// `retries` times, then kept.
inline std::vector<Genome> initial_population(const SearchSpaceConfig& c, std::uint64_t seed, int n,
                                              int retries) {
  std::vector<Genome> out;
  std::unordered_set<std::string> seen;
  for (int i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, "initial", static_cast<std::uint64_t>(i)));
    Genome g = sample_uniform(c, rng);
    for (int a = 0; a < retries && seen.contains(canonical_key(g)); ++a) g = sample_uniform(c, rng);
    seen.insert(canonical_key(g));
    out.push_back(std::move(g));
  }
  return out;
}

}  // namespace detail

/// Called after every completed generation with that generation's records.
using GenerationHook = std::function<void(const std::vector<EvalRecord>&)>;

/// Multi-scale topology evolution. `resume` holds the records of completed
/// generations from an earlier run with the same config; the run continues
/// where it stopped and reproduces the uninterrupted result.
inline ParetoArchive evolve(const Evaluator& eval, const CostFn& cost, const SearchSpaceConfig& c,
                            const EvoConfig& e, const GenerationHook& hook = {},
                            std::vector<EvalRecord> resume = {}) {
  require_valid(c);
  require_valid(e);
  std::vector<EvalRecord> D = std::move(resume);
  if (D.empty()) {
    std::vector<EvalRecord> initial;
    detail::evaluate_all(detail::initial_population(c, e.seed, e.n0, e.max_retries), eval, cost, e.workers, 0,
                         initial);
    D = initial;
    if (hook) hook(initial);
  }
  std::unordered_set<std::string> seen;
  for (const auto& r : D) seen.insert(canonical_key(r.genome));

  for (int gen = D.back().generation + 1; static_cast<int>(D.size()) < e.N; ++gen) {
    const auto parents = select_parents(D, e.k);
    Rng rng(derive_seed(e.seed, "generation", static_cast<std::uint64_t>(gen)));
    std::vector<Genome> offspring;
    std::unordered_set<std::string> batch_seen;
    for (int j = 0; j < e.k; ++j) {
      const int pi = parents[j % parents.size()];
      std::vector<const Genome*> pool;
      for (int q : parents)
        if (q != pi) pool.push_back(&D[q].genome);
      const Genome crossed = crossover(D[pi].genome, pool, c, e.p_c, rng).genome;
      Genome child = mutate(crossed, c, e.p_m, rng);
      for (int a = 0; a < e.max_retries; ++a) {
        const auto key = canonical_key(child);
        if (!seen.contains(key) && !batch_seen.contains(key)) break;
        child = mutate(crossed, c, e.p_m, rng);
      }
      batch_seen.insert(canonical_key(child));
      offspring.push_back(std::move(child));
    }
    std::vector<EvalRecord> M;
    detail::evaluate_all(offspring, eval, cost, e.workers, gen, M);
    for (const auto& r : M) seen.insert(canonical_key(r.genome));
    D.insert(D.end(), M.begin(), M.end());
    if (hook) hook(M);
  }
  return make_archive(std::move(D));
}

/// Records evolve() produces: n0 plus whole generations of k until >= N.
inline int evolve_budget(const EvoConfig& e) {
  return e.n0 + e.k * ((std::max(0, e.N - e.n0) + e.k - 1) / e.k);
}

/// Equal-budget baseline: `budget` uniform genomes from the same initial stream.
inline ParetoArchive random_search(const Evaluator& eval, const CostFn& cost, const SearchSpaceConfig& c,
                                   int budget, std::uint64_t seed, int workers = 1, int retries = 8) {
  std::vector<EvalRecord> recs;
  detail::evaluate_all(detail::initial_population(c, seed, budget, retries), eval, cost, workers, 0, recs);
  return make_archive(std::move(recs));
}

inline double front_hypervolume(const ParetoArchive& a, double ref_flops, double ref_accuracy = 0.0) {
  std::vector<Point> pts;
  for (int i : a.front) pts.push_back(point_of(a.records[i]));
  return hypervolume(pts, ref_flops, ref_accuracy);
}

// ------------------------------------------------------------ archive log

inline nlohmann::json record_to_json(const EvalRecord& r, const std::string& hash) {
  auto g = genome_to_json(r.genome, hash);
  return nlohmann::json{{"config_hash", hash},
                        {"generation", r.generation},
                        {"accuracy", r.accuracy},
                        {"flops", r.flops},
                        {"depths", g["depths"]},
                        {"gates", g["gates"]}};
}

inline std::string record_line(const EvalRecord& r, const std::string& hash) {
  return record_to_json(r, hash).dump() + "\n";
}

/// Parses an archive log. Lines must carry `hash`. With n0 >= 0, a trailing
/// generation shorter than expected (interrupted write) is dropped.
inline std::vector<EvalRecord> parse_archive_log(const std::string& text, const std::string& hash,
                                                 int n0, int k) {
  std::vector<EvalRecord> recs;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      if (in.peek() == EOF) break;
      throw IoError("archive line " + std::to_string(lineno) + " is not valid JSON");
    }
    try {
      if (j.at("config_hash").get<std::string>() != hash)
        throw ConfigError("archive line " + std::to_string(lineno) + " has a different config hash");
      nlohmann::json gj{{"version", kGenomeFormatVersion}, {"config_hash", hash},
                        {"depths", j.at("depths")},     {"gates", j.at("gates")}};
      recs.push_back({genome_from_json(gj).genome, j.at("accuracy").get<double>(),
                      j.at("flops").get<std::uint64_t>(), j.at("generation").get<int>()});
    } catch (const nlohmann::json::exception& e) {
      throw IoError("archive line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  std::map<int, int> per_gen;
  for (const auto& r : recs) ++per_gen[r.generation];
  if (n0 >= 0 && !per_gen.empty()) {
    const auto [last, count] = *per_gen.rbegin();
    if (count != (last == 0 ? n0 : k))
      std::erase_if(recs, [last = last](const EvalRecord& r) { return r.generation == last; });
  }
  return recs;
}

// ------------------------------------------------------------ analysis

struct PatternRow {
  std::uint64_t flops = 0;
  double accuracy = 0.0;
  long long blocks = 0;
  long long fusions = 0;
  double ratio = 0.0;
};

/// Front members by ascending flops with structure counts.
inline std::vector<PatternRow> pattern_analysis(const ParetoArchive& a, const SearchSpaceConfig& c) {
  if (a.front.empty()) throw ValidationError("archive front is empty");
  std::vector<PatternRow> rows;
  for (int i : a.front) {
    const auto& r = a.records[i];
    const auto n = count_structure(r.genome, c);
    rows.push_back({r.flops, r.accuracy, n.blocks, n.fusions,
                    static_cast<double>(n.fusions) / static_cast<double>(n.blocks)});
  }
  return rows;
}

inline std::string pattern_csv(const std::vector<PatternRow>& rows, const std::string& hash) {
  std::ostringstream os;
  os.precision(17);
  os << "# config_hash=" << hash << "\n";
  os << "flops,accuracy,blocks,fusions,ratio\n";
  for (const auto& r : rows)
    os << r.flops << ',' << r.accuracy << ',' << r.blocks << ',' << r.fusions << ',' << r.ratio << '\n';
  return os.str();
}

}  // namespace scalenas
