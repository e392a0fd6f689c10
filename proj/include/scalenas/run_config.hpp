// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "scalenas/cost_model.hpp"
#include "scalenas/error.hpp"
#include "scalenas/evolution.hpp"
#include "scalenas/genome.hpp"
#include "scalenas/rng.hpp"
#include "scalenas/tasks.hpp"
#include "scalenas/training.hpp"

namespace scalenas {

struct SurrogateConfig {
  double noise = 0.02;
  double curvature = 3.0;
};

/// Everything one pipeline run needs. Each section is optional in the file.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "out";
  SearchSpaceConfig space;
  HeadSpec head{HeadKind::kSegmentation, 4};
  int cost_height = 0;  // 0 = task image size
  int cost_width = 0;
  SyntheticSegConfig task;
  TrainConfig teacher;
  TrainConfig supernet;
  EvoConfig evolution;
  int eval_samples = 0;  // validation images per supernet evaluation, 0 = all
  SurrogateConfig surrogate;
  int sample_count = 16;
  std::string sample_mode = "uniform";

  int input_height() const { return cost_height ? cost_height : task.height; }
  int input_width() const { return cost_width ? cost_width : task.width; }
  std::string hash() const { return config_hash(space); }

  std::uint64_t stream(std::string_view name) const { return derive_seed(seed, name); }
};

/// Sets the root seed and every stream derived from it.
inline void set_seed(RunConfig& rc, std::uint64_t seed) {
  rc.seed = seed;
  rc.task.seed = rc.stream("task");
  rc.teacher.seed = rc.stream("teacher");
  rc.supernet.seed = rc.stream("supernet");
  rc.evolution.seed = rc.stream("evolve");
}

namespace detail {

class ConfigReader {
 public:
  ConfigReader(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + " must be an object");
  }

  /// Rejects keys nobody asked for.
  void done() const {
    for (const auto& el : j_.items())
      if (!used_.contains(el.key())) throw ConfigError("unknown key '" + where_ + "." + el.key() + "'");
  }

  bool has(const std::string& key) {
    used_.insert(key);
    return j_.contains(key);
  }

  template <class V>
  void get(const std::string& key, V& out) {
    if (!has(key)) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("'" + where_ + "." + key + "' has the wrong type");
    }
  }

  const nlohmann::json& sub(const std::string& key) {
    used_.insert(key);
    return j_.at(key);
  }

  std::string path(const std::string& key) const { return where_ + "." + key; }

 private:
  const nlohmann::json& j_;
  std::string where_;
  std::set<std::string> used_;
};

inline HeadKind parse_head_kind(const std::string& s) {
  if (s == "none") return HeadKind::kNone;
  if (s == "segmentation") return HeadKind::kSegmentation;
  if (s == "keypoint") return HeadKind::kKeypoint;
  throw ConfigError("unknown head kind '" + s + "'");
}

inline void read_train(const nlohmann::json& j, const std::string& where, TrainConfig& t, int train_size) {
  ConfigReader r(j, where);
  int epochs = -1;
  r.get("epochs", epochs);
  r.get("iterations", t.iterations);
  r.get("batch_size", t.batch_size);
  if (epochs >= 0) {
    if (r.has("iterations")) throw ConfigError(where + ": give epochs or iterations, not both");
    t.iterations = iterations_for_epochs(epochs, train_size, std::max(1, t.batch_size));
  }
  std::string opt = "adam", schedule = "cosine", sampler = to_string(t.sampler);
  r.get("optimizer", opt);
  if (opt == "adam") t.optimizer.kind = OptimizerKind::kAdam;
  else if (opt == "sgd") t.optimizer.kind = OptimizerKind::kSgd;
  else throw ConfigError("unknown optimizer '" + opt + "'");
  r.get("momentum", t.optimizer.momentum);
  r.get("weight_decay", t.optimizer.weight_decay);
  r.get("lr", t.lr);
  r.get("schedule", schedule);
  if (schedule == "cosine") t.schedule = LrSchedule::kCosine;
  else if (schedule == "constant") t.schedule = LrSchedule::kConstant;
  else throw ConfigError("unknown schedule '" + schedule + "'");
  r.get("supernet_lr_ratio", t.supernet_lr_ratio);
  r.get("kd_alpha", t.kd_alpha);
  r.get("sampler", sampler);
  t.sampler = parse_sampler(sampler);
  r.done();
}

}  // namespace detail

/// Parses and validates a run config. Unknown keys and wrong types are
/// configuration errors.
inline RunConfig parse_run_config(const nlohmann::json& j) {
  RunConfig rc;
  detail::ConfigReader r(j, "config");
  r.get("seed", rc.seed);
  r.get("output_dir", rc.output_dir);

  if (r.has("search_space")) {
    detail::ConfigReader s(r.sub("search_space"), r.path("search_space"));
    auto& c = rc.space;
    s.get("base_width", c.base_width);
    s.get("stem_width", c.stem_width);
    s.get("input_channels", c.input_channels);
    s.get("depth_choices", c.depth_choices);
    s.get("fusion_percentages", c.fusion_percentages);
    s.get("stage_modules", c.stage_modules);
    s.get("stem_reduction", c.stem_reduction);
    s.get("stage1_blocks", c.stage1_blocks);
    s.done();
  }
  if (r.has("head")) {
    detail::ConfigReader h(r.sub("head"), r.path("head"));
    std::string kind = "segmentation";
    h.get("kind", kind);
    rc.head.kind = detail::parse_head_kind(kind);
    h.get("out_channels", rc.head.out_channels);
    h.done();
  }
  if (r.has("cost_input")) {
    detail::ConfigReader c(r.sub("cost_input"), r.path("cost_input"));
    c.get("height", rc.cost_height);
    c.get("width", rc.cost_width);
    c.done();
  }
  if (r.has("task")) {
    detail::ConfigReader t(r.sub("task"), r.path("task"));
    auto& k = rc.task;
    t.get("height", k.height);
    t.get("width", k.width);
    t.get("classes", k.classes);
    t.get("tint", k.tint);
    t.get("noise", k.noise);
    t.get("train_size", k.train_size);
    t.get("val_size", k.val_size);
    if (t.has("scales")) {
      std::vector<std::vector<double>> raw;
      t.get("scales", raw);
      k.scales.clear();
      for (const auto& s : raw) {
        if (s.size() != 4) throw ConfigError("task.scales entries are [min_radius, max_radius, min_count, max_count]");
        k.scales.push_back({s[0], s[1], static_cast<int>(s[2]), static_cast<int>(s[3])});
      }
    }
    t.done();
  }
  rc.supernet.sampler = SamplerMode::kGrouped;
  rc.teacher.sampler = SamplerMode::kFull;
  if (r.has("teacher")) detail::read_train(r.sub("teacher"), r.path("teacher"), rc.teacher, rc.task.train_size);
  if (r.has("supernet")) detail::read_train(r.sub("supernet"), r.path("supernet"), rc.supernet, rc.task.train_size);
  if (r.has("evolution")) {
    detail::ConfigReader e(r.sub("evolution"), r.path("evolution"));
    auto& ev = rc.evolution;
    e.get("n0", ev.n0);
    e.get("k", ev.k);
    e.get("p_c", ev.p_c);
    e.get("p_m", ev.p_m);
    e.get("N", ev.N);
    e.get("max_retries", ev.max_retries);
    e.get("workers", ev.workers);
    e.get("eval_samples", rc.eval_samples);
    e.done();
  }
  if (r.has("surrogate")) {
    detail::ConfigReader s(r.sub("surrogate"), r.path("surrogate"));
    s.get("noise", rc.surrogate.noise);
    s.get("curvature", rc.surrogate.curvature);
    s.done();
  }
  if (r.has("sample")) {
    detail::ConfigReader s(r.sub("sample"), r.path("sample"));
    s.get("count", rc.sample_count);
    s.get("mode", rc.sample_mode);
    s.done();
  }
  r.done();
  set_seed(rc, rc.seed);
  return rc;
}

/// Semantic checks that do not depend on which subcommand runs.
inline void require_valid(const RunConfig& rc) {
  require_valid(rc.space);
  require_valid(rc.head);
  require_valid(rc.teacher);
  require_valid(rc.supernet);
  require_valid(rc.evolution);
  if (rc.cost_height < 0 || rc.cost_width < 0) throw ConfigError("cost_input sizes must be >= 0");
  if (rc.eval_samples < 0) throw ConfigError("evolution.eval_samples must be >= 0");
  if (rc.sample_count < 0) throw ConfigError("sample.count must be >= 0");
  if (rc.sample_mode != "uniform" && rc.sample_mode != "grouped" && rc.sample_mode != "sandwich")
    throw ConfigError("sample.mode must be uniform, grouped or sandwich");
  if (!(rc.surrogate.noise >= 0.0) || !(rc.surrogate.curvature > 0.0))
    throw ConfigError("surrogate noise must be >= 0 and curvature > 0");
  if (rc.task.classes < 1 || static_cast<int>(rc.task.scales.size()) < rc.task.classes - 1)
    throw ConfigError("task needs one blob scale per foreground class");
}

inline RunConfig load_run_config(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  auto rc = parse_run_config(j);
  require_valid(rc);
  return rc;
}

}  // namespace scalenas
