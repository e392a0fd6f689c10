// SPDX-License-Identifier: Apache-2.0
// Command-line driver: sample, cost, train, evolve, analyze.

#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "scalenas/checkpoint.hpp"
#include "scalenas/cost_model.hpp"
#include "scalenas/error.hpp"
#include "scalenas/evolution.hpp"
#include "scalenas/genome.hpp"
#include "scalenas/run_config.hpp"
#include "scalenas/search_space.hpp"
#include "scalenas/supernet.hpp"
#include "scalenas/tasks.hpp"
#include "scalenas/training.hpp"

namespace fs = std::filesystem;
using namespace scalenas;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "Run config (JSON)")->required();
  cmd->add_option("--seed", c.seed, "Override the root seed");
  cmd->add_option("--out", c.out, "Output directory (default: output_dir from the config)");
}

RunConfig load(const Common& c) {
  RunConfig rc = load_run_config(c.config);
  if (c.seed) set_seed(rc, *c.seed);
  if (!c.out.empty()) rc.output_dir = c.out;
  return rc;
}

fs::path out_dir(const RunConfig& rc) {
  fs::path p(rc.output_dir);
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw IoError("cannot create " + p.string() + ": " + ec.message());
  return p;
}

void write_text(const fs::path& p, const std::string& text) { write_file(p.string(), text); }

void append_text(const fs::path& p, const std::string& text) {
  std::FILE* f = std::fopen(p.string().c_str(), "ab");
  if (!f) throw IoError("cannot append to " + p.string());
  const bool ok = std::fwrite(text.data(), 1, text.size(), f) == text.size();
  if (std::fclose(f) != 0 || !ok) throw IoError("write failed for " + p.string());
}

Genome load_genome(const std::string& path, const RunConfig& rc) {
  ParsedGenome pg;
  try {
    pg = parse_genome(read_file(path));
  } catch (const ValidationError& e) {
    throw ValidationError(path + ": " + e.what());
  }
  if (pg.config_hash != rc.hash())
    throw ConfigError(path + ": genome config hash " + pg.config_hash + " does not match " + rc.hash());
  require_valid(pg.genome, rc.space);
  return pg.genome;
}

void check_manifest(const nlohmann::json& m, const RunConfig& rc, const std::string& kind, const std::string& path) {
  if (m.value("config_hash", std::string()) != rc.hash())
    throw ConfigError(path + ": checkpoint config hash does not match the run config");
  if (m.value("kind", std::string()) != kind)
    throw ConfigError(path + ": expected a " + kind + " checkpoint");
}

// ------------------------------------------------------------------ sample

int run_sample(const Common& common, std::optional<int> count, std::string mode) {
  RunConfig rc = load(common);
  if (mode.empty()) mode = rc.sample_mode;
  const int n = count.value_or(rc.sample_count);
  if (n < 0) throw ConfigError("sample count must be >= 0");
  const auto dir = out_dir(rc);
  const std::uint64_t seed = rc.stream("sample");
  std::ostringstream csv;
  csv << "# config_hash=" << rc.hash() << "\n";
  csv << "index,file,group,blocks,fusions\n";
  for (int i = 0; i < n; ++i) {
    Genome g;
    int group = -1;
    if (mode == "uniform") {
      g = sample_uniform(rc.space, derive_seed(seed, "uniform", static_cast<std::uint64_t>(i)));
    } else if (mode == "grouped") {
      group = scheduled_group(rc.space, static_cast<std::uint64_t>(i));
      g = sample_grouped(rc.space, groups(rc.space)[group],
                         derive_seed(seed, "grouped", static_cast<std::uint64_t>(i)));
    } else if (mode == "sandwich") {
      g = sandwich_schedule(rc.space, seed, static_cast<std::uint64_t>(i / 4))[i % 4];
    } else {
      throw ConfigError("unknown sample mode '" + mode + "'");
    }
    std::ostringstream name;
    name << "genome_" << std::setw(4) << std::setfill('0') << i << ".json";
    write_text(dir / name.str(), serialize(g, rc.space));
    const auto c = count_structure(g, rc.space);
    csv << i << ',' << name.str() << ',' << group << ',' << c.blocks << ',' << c.fusions << '\n';
  }
  write_text(dir / "samples.csv", csv.str());
  std::cout << "wrote " << n << " genomes to " << dir.string() << "\n";
  return 0;
}

// -------------------------------------------------------------------- cost

int run_cost(const Common& common, const std::vector<std::string>& files, bool baseline) {
  RunConfig rc = load(common);
  std::vector<std::pair<std::string, Genome>> items;
  if (baseline) items.emplace_back("hrnet-baseline", hrnet_baseline(rc.space));
  for (const auto& f : files) items.emplace_back(f, load_genome(f, rc));
  if (items.empty()) throw ConfigError("no genomes given (pass files or --baseline)");
  const auto dir = out_dir(rc);
  std::ostringstream csv;
  csv << "# config_hash=" << rc.hash() << "\n";
  csv << "genome,params,flops,blocks,fusions\n";
  std::cout << std::left << std::setw(32) << "genome" << std::right << std::setw(14) << "params" << std::setw(18)
            << "flops" << std::setw(8) << "blocks" << std::setw(9) << "fusions" << "\n";
  for (const auto& [name, g] : items) {
    const auto r = cost(g, rc.space, rc.input_height(), rc.input_width(), rc.head);
    csv << name << ',' << r.params << ',' << r.flops << ',' << r.blocks << ',' << r.fusions << '\n';
    std::cout << std::left << std::setw(32) << name << std::right << std::setw(14) << r.params << std::setw(18)
              << r.flops << std::setw(8) << r.blocks << std::setw(9) << r.fusions << "\n";
  }
  write_text(dir / "cost.csv", csv.str());
  return 0;
}

// ------------------------------------------------------------------- train

nlohmann::json train_manifest(const RunConfig& rc, const std::string& kind, const TrainConfig& t) {
  return {{"kind", kind},
          {"config_hash", rc.hash()},
          {"root_seed", rc.seed},
          {"stream_seed", t.seed},
          {"total_iterations", t.iterations},
          {"sampler", to_string(t.sampler)},
          {"kd_alpha", t.kd_alpha}};
}

int run_train(const Common& common, const std::string& mode, const std::string& resume, std::string teacher_path,
              std::optional<double> kd_alpha, std::string sampler, std::optional<int> stop_after) {
  RunConfig rc = load(common);
  if (kd_alpha) rc.supernet.kd_alpha = *kd_alpha;
  if (!sampler.empty()) rc.supernet.sampler = parse_sampler(sampler);
  require_valid(rc);
  if (mode != "teacher" && mode != "supernet") throw ConfigError("--mode must be teacher or supernet");
  if (rc.head.kind != HeadKind::kSegmentation || rc.head.out_channels != rc.task.classes)
    throw ConfigError("training needs a segmentation head with one channel per task class");
  const auto dir = out_dir(rc);
  const auto splits = generate(rc.task);
  save_checkpoint((dir / "task_train.ckpt").string(), dataset_to_checkpoint(splits.train));
  save_checkpoint((dir / "task_val.ckpt").string(), dataset_to_checkpoint(splits.val));

  const bool supernet = mode == "supernet";
  const TrainConfig& t = supernet ? rc.supernet : rc.teacher;
  std::optional<ParamStore<float>> teacher;
  if (supernet) {
    if (teacher_path.empty()) teacher_path = (dir / "teacher.ckpt").string();
    const auto ck = load_checkpoint<float>(teacher_path);
    check_manifest(ck.manifest, rc, "teacher", teacher_path);
    teacher = store_from_checkpoint(ck);
    teacher->set_trainable(false);
  }

  TrainState<float> state;
  if (!resume.empty()) {
    const auto ck = load_checkpoint<float>(resume);
    check_manifest(ck.manifest, rc, mode, resume);
    state = state_from_checkpoint(ck, t.optimizer);
  } else if (supernet) {
    state = {teacher->clone(), Optimizer<float>(t.optimizer), 0, {}};
    state.store.set_trainable(true);
  } else {
    state = {build_supernet<float>(rc.space, rc.head, rc.stream("init")), Optimizer<float>(t.optimizer), 0, {}};
  }

  const std::string ckpt = (dir / (mode + ".ckpt")).string();
  const int stop = stop_after ? std::min(*stop_after, t.iterations) : t.iterations;
  try {
    train_until<float>(state, supernet ? &*teacher : nullptr, rc.space, rc.head, t, splits.train, stop);
  } catch (const DivergenceError& e) {
    const std::string saved = (dir / (mode + ".diverged.ckpt")).string();
    save_checkpoint(saved, to_checkpoint(state, train_manifest(rc, mode, t)));
    write_text(dir / (mode + "_metrics.csv"), metrics_csv(state.log, rc.hash()));
    throw DivergenceError(std::string(e.what()) + "; state saved to " + saved);
  }
  save_checkpoint(ckpt, to_checkpoint(state, train_manifest(rc, mode, t)));
  write_text(dir / (mode + "_metrics.csv"), metrics_csv(state.log, rc.hash()));

  const auto m = evaluate(state.store, rc.space, rc.head, full_genome(rc.space), splits.val);
  std::ostringstream summary;
  summary.precision(17);
  summary << "# config_hash=" << rc.hash() << "\n";
  summary << "iteration,pixel_accuracy,mean_iou\n" << state.iteration << ',' << m.pixel_accuracy << ',' << m.mean_iou << "\n";
  write_text(dir / (mode + "_eval.csv"), summary.str());
  std::cout << mode << ": iteration " << state.iteration << "/" << t.iterations << ", full-genome val pixel accuracy "
            << m.pixel_accuracy << ", mIoU " << m.mean_iou << "\n";
  return 0;
}

// ------------------------------------------------------------------ evolve

class StopRequested : public std::exception {};

std::string front_csv(const ParetoArchive& a, const SearchSpaceConfig& c, const std::string& hash) {
  std::ostringstream os;
  os.precision(17);
  os << "# config_hash=" << hash << "\n";
  os << "index,generation,flops,accuracy,blocks,fusions\n";
  for (int i : a.front) {
    const auto& r = a.records[i];
    const auto n = count_structure(r.genome, c);
    os << i << ',' << r.generation << ',' << r.flops << ',' << r.accuracy << ',' << n.blocks << ',' << n.fusions << '\n';
  }
  return os.str();
}

int run_evolve(const Common& common, bool surrogate, bool random_search_mode, std::optional<int> workers,
               const std::string& resume, std::string checkpoint, std::optional<int> stop_after) {
  RunConfig rc = load(common);
  if (workers) rc.evolution.workers = *workers;
  require_valid(rc);
  if (random_search_mode && !resume.empty()) throw ConfigError("--resume applies to evolution runs only");
  const auto dir = out_dir(rc);
  const std::string hash = rc.hash();

  Evaluator eval;
  std::optional<ParamStore<float>> store;
  std::optional<SegDataset> val;
  std::optional<SurrogateEvaluator> sur;
  if (surrogate) {
    sur = SurrogateEvaluator{rc.space, {}, {}, rc.surrogate.curvature, rc.surrogate.noise, rc.stream("surrogate")};
    eval = [&](const Genome& g) { return (*sur)(g); };
  } else {
    if (checkpoint.empty()) checkpoint = (dir / "supernet.ckpt").string();
    const auto ck = load_checkpoint<float>(checkpoint);
    if (ck.manifest.value("config_hash", std::string()) != hash)
      throw ConfigError(checkpoint + ": checkpoint config hash does not match the run config");
    store = store_from_checkpoint(ck);
    auto splits = generate(rc.task);
    val = std::move(splits.val);
    if (rc.eval_samples > 0 && rc.eval_samples < val->count) {
      std::vector<int> idx(rc.eval_samples);
      std::iota(idx.begin(), idx.end(), 0);
      auto [x, y] = val->batch<float>(idx);
      val->count = rc.eval_samples;
      val->images = std::move(x);
      val->labels = std::move(y);
    }
    eval = [&](const Genome& g) { return evaluate(*store, rc.space, rc.head, g, *val).mean_iou; };
  }
  CostFn cost_fn = [&](const Genome& g) {
    return cost(g, rc.space, rc.input_height(), rc.input_width(), rc.head).flops;
  };

  const fs::path archive_path = dir / "archive.jsonl";
  ParetoArchive archive;
  if (random_search_mode) {
    archive = random_search(eval, cost_fn, rc.space, evolve_budget(rc.evolution), rc.evolution.seed,
                            rc.evolution.workers, rc.evolution.max_retries);
    std::string text;
    for (const auto& r : archive.records) text += record_line(r, hash);
    write_text(archive_path, text);
  } else {
    std::vector<EvalRecord> prior;
    if (!resume.empty())
      prior = parse_archive_log(read_file(resume), hash, rc.evolution.n0, rc.evolution.k);
    std::string text;
    for (const auto& r : prior) text += record_line(r, hash);
    write_text(archive_path, text);
    int completed = prior.empty() ? -1 : prior.back().generation;
    auto hook = [&](const std::vector<EvalRecord>& gen) {
      std::string lines;
      for (const auto& r : gen) lines += record_line(r, hash);
      append_text(archive_path, lines);
      completed = gen.front().generation;
      if (stop_after && completed >= *stop_after) throw StopRequested();
    };
    try {
      archive = evolve(eval, cost_fn, rc.space, rc.evolution, hook, std::move(prior));
    } catch (const StopRequested&) {
      std::cout << "stopped after generation " << completed << "; resume with --resume " << archive_path.string()
                << "\n";
      return 0;
    } catch (const RuntimeFailure& e) {
      throw RuntimeFailure(std::string(e.what()) + "; completed generations kept in " + archive_path.string());
    }
  }
  write_text(dir / "front.csv", front_csv(archive, rc.space, hash));
  std::cout << (random_search_mode ? "random search" : "evolution") << ": " << archive.records.size()
            << " records, " << archive.generations() << " generations, front size " << archive.front.size() << "\n";
  return 0;
}

// ----------------------------------------------------------------- analyze

int run_analyze(const Common& common, std::string archive_path) {
  RunConfig rc = load(common);
  const auto dir = out_dir(rc);
  if (archive_path.empty()) archive_path = (dir / "archive.jsonl").string();
  auto recs = parse_archive_log(read_file(archive_path), rc.hash(), -1, 0);
  if (recs.empty()) throw RuntimeFailure(archive_path + ": archive is empty");
  for (const auto& r : recs) require_valid(r.genome, rc.space);
  const auto archive = make_archive(std::move(recs));
  const auto rows = pattern_analysis(archive, rc.space);
  write_text(dir / "pattern.csv", pattern_csv(rows, rc.hash()));

  std::vector<PatternRow> all;
  for (const auto& r : archive.records) {
    const auto n = count_structure(r.genome, rc.space);
    all.push_back({r.flops, r.accuracy, n.blocks, n.fusions,
                   static_cast<double>(n.fusions) / static_cast<double>(n.blocks)});
  }
  write_text(dir / "records.csv", pattern_csv(all, rc.hash()));

  std::vector<double> flops, fusions, blocks;
  for (const auto& r : rows) {
    flops.push_back(static_cast<double>(r.flops));
    fusions.push_back(static_cast<double>(r.fusions));
    blocks.push_back(static_cast<double>(r.blocks));
  }
  std::cout << "front size " << rows.size() << " of " << archive.records.size() << " records\n";
  std::cout << "spearman(flops, fusions) = " << spearman(flops, fusions) << "\n";
  std::cout << "spearman(flops, blocks) = " << spearman(flops, blocks) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-scale architecture search over a weight-sharing supernet"};
  app.require_subcommand(1);

  Common c_sample, c_cost, c_train, c_evolve, c_analyze;

  auto* sample = app.add_subcommand("sample", "Write sampled genomes and a summary CSV");
  add_common(sample, c_sample);
  std::optional<int> sample_n;
  std::string sample_mode;
  sample->add_option("-n,--count", sample_n, "Number of genomes");
  sample->add_option("--mode", sample_mode, "uniform | grouped | sandwich");

  auto* cost_cmd = app.add_subcommand("cost", "Parameter and FLOP report for genome files");
  add_common(cost_cmd, c_cost);
  std::vector<std::string> cost_files;
  bool cost_baseline = false;
  cost_cmd->add_option("genomes", cost_files, "Genome files");
  cost_cmd->add_flag("--baseline", cost_baseline, "Include the HRNet baseline genome");

  auto* train = app.add_subcommand("train", "Train the teacher or the supernet");
  add_common(train, c_train);
  std::string train_mode = "teacher", train_resume, train_teacher, train_sampler;
  std::optional<double> train_alpha;
  std::optional<int> train_stop;
  train->add_option("--mode", train_mode, "teacher | supernet");
  train->add_option("--resume", train_resume, "Training checkpoint to continue from");
  train->add_option("--teacher", train_teacher, "Teacher checkpoint (default: <out>/teacher.ckpt)");
  train->add_option("--kd-alpha", train_alpha, "Override the distillation weight");
  train->add_option("--sampler", train_sampler, "Override the supernet sampler: grouped | uniform | sandwich | full");
  train->add_option("--stop-after", train_stop, "Stop after this many iterations and checkpoint");

  auto* evolve_cmd = app.add_subcommand("evolve", "Evolutionary search (or random search) over the space");
  add_common(evolve_cmd, c_evolve);
  bool use_surrogate = false, use_random = false;
  std::optional<int> workers, evolve_stop;
  std::string evolve_resume, evolve_ckpt;
  evolve_cmd->add_flag("--surrogate", use_surrogate, "Score genomes with the surrogate evaluator");
  evolve_cmd->add_flag("--random-search", use_random, "Equal-budget random search baseline");
  evolve_cmd->add_option("--workers", workers, "Parallel evaluation threads");
  evolve_cmd->add_option("--resume", evolve_resume, "Archive log to continue from");
  evolve_cmd->add_option("--checkpoint", evolve_ckpt, "Supernet checkpoint (default: <out>/supernet.ckpt)");
  evolve_cmd->add_option("--stop-after", evolve_stop, "Stop after this generation");

  auto* analyze = app.add_subcommand("analyze", "Front pattern analysis as CSV");
  add_common(analyze, c_analyze);
  std::string analyze_archive;
  analyze->add_option("--archive", analyze_archive, "Archive log (default: <out>/archive.jsonl)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*sample) return run_sample(c_sample, sample_n, sample_mode);
    if (*cost_cmd) return run_cost(c_cost, cost_files, cost_baseline);
    if (*train)
      return run_train(c_train, train_mode, train_resume, train_teacher, train_alpha, train_sampler, train_stop);
    if (*evolve_cmd)
      return run_evolve(c_evolve, use_surrogate, use_random, workers, evolve_resume, evolve_ckpt, evolve_stop);
    if (*analyze) return run_analyze(c_analyze, analyze_archive);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ValidationError& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return 2;
  } catch (const DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << "\n";
    return 3;
  } catch (const RuntimeFailure& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
