// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <unordered_set>

#include "oracles.hpp"
#include "scalenas/cost_model.hpp"
#include "scalenas/evolution.hpp"
#include "scalenas/search_space.hpp"
#include "scalenas/tasks.hpp"

using namespace scalenas;

namespace {

SearchSpaceConfig toy() {
  SearchSpaceConfig c;
  c.base_width = 4;
  c.stem_width = 8;
  c.depth_choices = {1, 2};
  c.stage_modules = {1, 2};
  c.stem_reduction = 2;
  c.stage1_blocks = 1;
  return c;
}

CostFn cost_fn(const SearchSpaceConfig& c) {
  return [c](const Genome& g) { return cost(g, c, 32, 64, HeadSpec{HeadKind::kSegmentation, 4}).flops; };
}

EvoConfig small_evo(std::uint64_t seed) {
  EvoConfig e;
  e.n0 = 20;
  e.k = 10;
  e.N = 60;
  e.seed = seed;
  return e;
}

std::vector<EvalRecord> random_records(int n, std::uint64_t seed) {
  const SearchSpaceConfig c;
  Rng rng(seed);
  std::vector<EvalRecord> out;
  for (int i = 0; i < n; ++i)
    out.push_back({sample_uniform(c, rng), static_cast<double>(rng.below(40)) / 40.0, 100 + rng.below(60), 0});
  return out;
}

}  // namespace

// ------------------------------------------------------------ pareto

TEST(Pareto, RanksMatchOracle) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);
    std::vector<Point> pts;
    for (int i = 0; i < 150; ++i)
      pts.push_back({static_cast<double>(rng.below(30)), static_cast<double>(rng.below(30))});
    EXPECT_EQ(nondominated_ranks(pts), oracle::ranks(pts));
  }
}

TEST(Pareto, StrictDomination) {
  const std::vector<Point> pts{{10, 0.5}, {9, 0.6}};
  EXPECT_EQ(front_indices(pts), (std::vector<int>{1}));
  const std::vector<Point> ties{{1, 0.5}, {1, 0.5}};
  EXPECT_EQ(front_indices(ties).size(), 2u);
}

TEST(Pareto, HypervolumeMatchesGridOracle) {
  EXPECT_DOUBLE_EQ(hypervolume({{1, 0.5}}, 3, 0), 1.0);
  EXPECT_DOUBLE_EQ(hypervolume({{1, 0.5}, {2, 0.8}}, 3, 0), 0.5 + 0.8);
  EXPECT_DOUBLE_EQ(hypervolume({{4, 0.9}}, 3, 0), 0.0);
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);
    std::vector<Point> pts;
    for (int i = 0; i < 60; ++i) pts.push_back({rng.uniform() * 10, rng.uniform()});
    EXPECT_NEAR(hypervolume(pts, 8.0, 0.2), oracle::hypervolume(pts, 8.0, 0.2), 1e-9);
  }
}

TEST(Pareto, Spearman) {
  EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {10, 20, 30, 40}), 1.0);
  EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {4, 3, 2, 1}), -1.0);
  EXPECT_DOUBLE_EQ(spearman({1, 1, 1}, {1, 2, 3}), 0.0);
  EXPECT_EQ(average_ranks({5, 1, 5}), (std::vector<double>{2.5, 1, 2.5}));
}

// ------------------------------------------------------------ selection

TEST(SelectParents, ThreeNonDominatedAllKept) {
  const SearchSpaceConfig c;
  std::vector<EvalRecord> recs{{sample_uniform(c, std::uint64_t{1}), 0.5, 10, 0},
                               {sample_uniform(c, std::uint64_t{2}), 0.6, 20, 0},
                               {sample_uniform(c, std::uint64_t{3}), 0.7, 30, 0}};
  auto sel = select_parents(recs, 3);
  std::sort(sel.begin(), sel.end());
  EXPECT_EQ(sel, (std::vector<int>{0, 1, 2}));
  // Output order: accuracy descending.
  EXPECT_EQ(select_parents(recs, 3), (std::vector<int>{2, 1, 0}));
  EXPECT_THROW(select_parents({}, 1), ValidationError);
}

TEST(SelectParents, MatchesRankOracle) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto recs = random_records(200, seed);
    const auto sel = select_parents(recs, 50);
    ASSERT_EQ(sel.size(), 50u);
    std::vector<Point> pts;
    for (const auto& r : recs) pts.push_back(point_of(r));
    const auto rank = oracle::ranks(pts);
    // Whole ranks before the cut-off rank are all taken, nothing beyond it.
    int cut = 0;
    for (int i : sel) cut = std::max(cut, rank[i]);
    std::unordered_set<int> chosen(sel.begin(), sel.end());
    std::unordered_set<std::string> keys;
    for (int i : sel) EXPECT_TRUE(keys.insert(canonical_key(recs[i].genome)).second);
    for (std::size_t i = 0; i < recs.size(); ++i)
      if (rank[i] < cut) EXPECT_TRUE(chosen.contains(static_cast<int>(i))) << i;
    // Ranks are non-decreasing along the output.
    for (std::size_t j = 1; j < sel.size(); ++j) EXPECT_LE(rank[sel[j - 1]], rank[sel[j]]);
  }
}

TEST(SelectParents, ThinningSpansTheFront) {
  const SearchSpaceConfig c;
  std::vector<EvalRecord> recs;
  for (int i = 0; i < 21; ++i)
    recs.push_back({sample_uniform(c, static_cast<std::uint64_t>(i)), 0.1 + 0.04 * i, static_cast<std::uint64_t>(10 + i), 0});
  auto sel = select_parents(recs, 5);
  std::vector<std::uint64_t> flops;
  for (int i : sel) flops.push_back(recs[i].flops);
  std::sort(flops.begin(), flops.end());
  EXPECT_EQ(flops, (std::vector<std::uint64_t>{10, 15, 20, 25, 30}));
  const auto one = select_parents(recs, 1);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(recs[one[0]].flops, 30u);
}

// ------------------------------------------------------------ operators

TEST(Crossover, Degenerate) {
  const SearchSpaceConfig c;
  const auto a = sample_uniform(c, std::uint64_t{1}), b = sample_uniform(c, std::uint64_t{2});
  Rng rng(1);
  EXPECT_EQ(crossover(a, {&b}, c, 0.0, rng).genome, a);
  const auto all = crossover(a, {&b}, c, 1.0, rng);
  EXPECT_EQ(all.genome, b);
  EXPECT_EQ(all.modules_replaced, 8);
  EXPECT_EQ(crossover(a, {}, c, 1.0, rng).genome, a);
}

TEST(Crossover, ExpectedTwoModulesAndValid) {
  const SearchSpaceConfig c;
  const auto a = sample_uniform(c, std::uint64_t{1}), b = sample_uniform(c, std::uint64_t{2});
  const auto d = sample_uniform(c, std::uint64_t{3});
  Rng rng(99);
  double total = 0;
  for (int i = 0; i < 10000; ++i) {
    const auto r = crossover(a, {&b, &d}, c, 0.25, rng);
    total += r.modules_replaced;
    if (i < 200) EXPECT_TRUE(validate(r.genome, c).ok());
  }
  EXPECT_NEAR(total / 10000, 2.0, 0.1);
}

TEST(Crossover, NeverMixesAcrossModules) {
  const SearchSpaceConfig c;
  const auto a = min_genome(c), b = full_genome(c);
  Rng rng(5);
  for (int i = 0; i < 100; ++i) {
    const auto g = crossover(a, {&b}, c, 0.5, rng).genome;
    for (auto mk : searched_modules(c)) {
      const bool from_b = g.depth(mk.stage, mk.module, 0) == c.max_depth();
      for (int br = 0; br < mk.stage; ++br)
        EXPECT_EQ(g.depth(mk.stage, mk.module, br), from_b ? c.max_depth() : c.min_depth());
      const auto sites = module_gate_sites(g, mk);
      for (const auto& s : sites) EXPECT_EQ(g.gates.contains(s), from_b);
    }
  }
}

TEST(Mutate, IdentityInvolutionAndRate) {
  const SearchSpaceConfig c;
  const auto g = sample_uniform(c, std::uint64_t{8});
  Rng rng(3);
  EXPECT_EQ(mutate(g, c, 0.0, rng), g);
  EXPECT_EQ(mutate(mutate(g, c, 1.0, rng), c, 1.0, rng), g);
  const auto sites = gate_sites(g, c);
  double flips = 0;
  for (int i = 0; i < 10000; ++i) {
    const auto m = mutate(g, c, 0.5, rng);
    if (i < 100) {
      EXPECT_TRUE(validate(m, c).ok());
      EXPECT_EQ(m.depths, g.depths);
    }
    for (const auto& s : sites) flips += m.gates.contains(s) != g.gates.contains(s);
  }
  EXPECT_NEAR(flips / (10000.0 * sites.size()), 0.5, 0.02);
}

// ------------------------------------------------------------ evolve

TEST(Evolve, DeterministicAndGrowsByK) {
  const auto c = toy();
  SurrogateEvaluator s{c, {}, {}, 3.0, 0.02, 1};
  std::vector<std::size_t> sizes;
  const auto hook = [&](const std::vector<EvalRecord>& recs) { sizes.push_back(recs.size()); };
  const auto a = evolve(s, cost_fn(c), c, small_evo(4), hook);
  const auto b = evolve(s, cost_fn(c), c, small_evo(4));
  EXPECT_EQ(a.records, b.records);
  EXPECT_EQ(a.front, b.front);
  EXPECT_EQ(sizes, (std::vector<std::size_t>{20, 10, 10, 10, 10}));
  EXPECT_EQ(a.records.size(), 60u);
  EXPECT_EQ(static_cast<int>(a.records.size()), evolve_budget(small_evo(4)));
  EXPECT_EQ(a.generations(), 4);
  for (const auto& r : a.records) {
    EXPECT_TRUE(validate(r.genome, c).ok());
    EXPECT_EQ(r.flops, cost_fn(c)(r.genome));
    EXPECT_EQ(r.accuracy, s(r.genome));
  }
}

TEST(Evolve, BudgetRoundsUpToWholeGenerations) {
  EvoConfig e;
  e.n0 = 10;
  e.k = 4;
  e.N = 19;
  EXPECT_EQ(evolve_budget(e), 22);
  e.N = 10;
  EXPECT_EQ(evolve_budget(e), 10);
}

TEST(Evolve, FrontIsPairwiseNonDominatedAndComplete) {
  const auto c = toy();
  SurrogateEvaluator s{c, {}, {}, 3.0, 0.05, 2};
  std::vector<EvalRecord> seen;
  const auto hook = [&](const std::vector<EvalRecord>& recs) {
    seen.insert(seen.end(), recs.begin(), recs.end());
    const auto a = make_archive(seen);
    std::vector<Point> pts;
    for (int i : a.front) pts.push_back(point_of(a.records[i]));
    for (const auto& p : pts)
      for (const auto& q : pts) EXPECT_FALSE(dominates(p, q));
    std::vector<Point> all;
    for (const auto& r : a.records) all.push_back(point_of(r));
    const auto rank = oracle::ranks(all);
    std::set<std::string> want, got;
    for (std::size_t i = 0; i < all.size(); ++i)
      if (rank[i] == 0) want.insert(canonical_key(a.records[i].genome));
    for (int i : a.front) EXPECT_TRUE(got.insert(canonical_key(a.records[i].genome)).second);
    EXPECT_EQ(got, want);
  };
  evolve(s, cost_fn(c), c, small_evo(9), hook);
}

TEST(Evolve, NoVariationIsRandomSearchOnInitialStream) {
  const auto c = toy();
  SurrogateEvaluator s{c, {}, {}, 3.0, 0.02, 3};
  auto e = small_evo(5);
  e.p_c = 0.0;
  e.p_m = 0.0;
  const auto evo = evolve(s, cost_fn(c), c, e);
  const auto rnd = random_search(s, cost_fn(c), c, e.n0, e.seed);
  std::set<std::string> a, b;
  for (int i : evo.front) a.insert(canonical_key(evo.records[i].genome));
  for (int i : rnd.front) b.insert(canonical_key(rnd.records[i].genome));
  EXPECT_EQ(a, b);
  // Offspring are re-evaluated parents.
  std::unordered_set<std::string> initial;
  for (int i = 0; i < e.n0; ++i) initial.insert(canonical_key(evo.records[i].genome));
  for (std::size_t i = e.n0; i < evo.records.size(); ++i)
    EXPECT_TRUE(initial.contains(canonical_key(evo.records[i].genome)));
}

TEST(Evolve, WorkersDoNotChangeResults) {
  const auto c = toy();
  SurrogateEvaluator s{c, {}, {}, 3.0, 0.02, 1};
  auto e = small_evo(6);
  const auto one = evolve(s, cost_fn(c), c, e);
  e.workers = 4;
  const auto four = evolve(s, cost_fn(c), c, e);
  EXPECT_EQ(one.records, four.records);
}

TEST(Evolve, ResumeReproducesUninterruptedRun) {
  const auto c = toy();
  SurrogateEvaluator s{c, {}, {}, 3.0, 0.02, 1};
  const auto e = small_evo(7);
  const auto full = evolve(s, cost_fn(c), c, e);

  std::string log;
  int gens = 0;
  struct Stop {};
  try {
    evolve(s, cost_fn(c), c, e, [&](const std::vector<EvalRecord>& recs) {
      for (const auto& r : recs) log += record_line(r, "h");
      if (++gens == 2) throw Stop{};
    });
  } catch (const Stop&) {
  }
  // A torn trailing line and a short trailing generation are both dropped.
  const auto extra = record_line(full.records[35], "h");
  const auto text = log + extra + extra.substr(0, 20);
  const auto resume = parse_archive_log(text, "h", e.n0, e.k);
  EXPECT_EQ(resume.size(), 30u);
  const auto resumed = evolve(s, cost_fn(c), c, e, {}, resume);
  EXPECT_EQ(resumed.records, full.records);
}

TEST(Evolve, EvaluatorFailureKeepsCompletedGenerations) {
  const auto c = toy();
  SurrogateEvaluator s{c};
  int calls = 0;
  std::vector<EvalRecord> saved;
  const Evaluator flaky = [&](const Genome& g) {
    if (++calls > 35) throw std::runtime_error("boom");
    return s(g);
  };
  EXPECT_THROW(evolve(flaky, cost_fn(c), c, small_evo(1),
                      [&](const std::vector<EvalRecord>& recs) { saved.insert(saved.end(), recs.begin(), recs.end()); }),
               RuntimeFailure);
  EXPECT_EQ(saved.size(), 30u);
  const Evaluator out_of_range = [](const Genome&) { return 1.5; };
  EXPECT_THROW(evolve(out_of_range, cost_fn(c), c, small_evo(1)), RuntimeFailure);
}

TEST(Evolve, RejectsBadConfig) {
  const auto c = toy();
  SurrogateEvaluator s{c};
  auto e = small_evo(1);
  e.n0 = 100;
  EXPECT_THROW(evolve(s, cost_fn(c), c, e), ConfigError);
  e = small_evo(1);
  e.p_m = 1.5;
  EXPECT_THROW(evolve(s, cost_fn(c), c, e), ConfigError);
}

TEST(Evolve, NearExhaustiveFrontOnToySpace) {
  const auto c = toy();
  SurrogateEvaluator s{c, {}, {}, 3.0, 0.02, 1};
  const auto costf = cost_fn(c);
  std::vector<EvalRecord> all;
  for (const auto& g : oracle::enumerate_genomes(c)) all.push_back({g, s(g), costf(g), 0});
  const auto truth = make_archive(all);
  const double ref = static_cast<double>(costf(full_genome(c)));
  double min_acc = 1.0;
  for (const auto& r : all) min_acc = std::min(min_acc, r.accuracy);
  EvoConfig e;
  e.n0 = 50;
  e.k = 20;
  e.N = 250;
  e.seed = 1;
  const auto evo = evolve(s, costf, c, e);
  EXPECT_GE(front_hypervolume(evo, ref, min_acc), 0.95 * front_hypervolume(truth, ref, min_acc));
}

// ------------------------------------------------------------ archive log

TEST(ArchiveLog, RoundTripAndHashCheck) {
  const auto recs = random_records(12, 3);
  std::string text;
  for (const auto& r : recs) text += record_line(r, "abc");
  EXPECT_EQ(parse_archive_log(text, "abc", -1, 1), recs);
  EXPECT_THROW(parse_archive_log(text, "xyz", -1, 1), ConfigError);
  EXPECT_THROW(parse_archive_log("garbage\n" + text, "abc", -1, 1), IoError);
  EXPECT_TRUE(parse_archive_log("", "abc", 5, 2).empty());
}

TEST(Analysis, PatternRowsAndCsv) {
  const auto c = toy();
  const auto g = full_genome(c);
  const auto a = make_archive({{g, 0.9, 1000, 0}});
  const auto rows = pattern_analysis(a, c);
  ASSERT_EQ(rows.size(), 1u);
  const auto n = count_structure(g, c);
  EXPECT_EQ(rows[0].blocks, n.blocks);
  EXPECT_EQ(rows[0].fusions, n.fusions);
  EXPECT_DOUBLE_EQ(rows[0].ratio, static_cast<double>(n.fusions) / n.blocks);
  const auto csv = pattern_csv(rows, "h");
  EXPECT_EQ(csv.substr(0, csv.find('\n', csv.find('\n') + 1) + 1), "# config_hash=h\nflops,accuracy,blocks,fusions,ratio\n");
  EXPECT_THROW(pattern_analysis(ParetoArchive{}, c), ValidationError);
}
