// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "scalenas/autodiff.hpp"
#include "scalenas/checkpoint.hpp"
#include "scalenas/error.hpp"
#include "scalenas/params.hpp"
#include "scalenas/rng.hpp"
#include "scalenas/search_space.hpp"
#include "scalenas/supernet.hpp"
#include "scalenas/tasks.hpp"

namespace scalenas {

enum class SamplerMode { kFull, kUniform, kGrouped, kSandwich };
enum class LrSchedule { kConstant, kCosine };

inline std::string to_string(SamplerMode m) {
  switch (m) {
    case SamplerMode::kFull: return "full";
    case SamplerMode::kUniform: return "uniform";
    case SamplerMode::kGrouped: return "grouped";
    case SamplerMode::kSandwich: return "sandwich";
  }
  return "?";
}

inline SamplerMode parse_sampler(const std::string& s) {
  if (s == "full") return SamplerMode::kFull;
  if (s == "uniform") return SamplerMode::kUniform;
  if (s == "grouped") return SamplerMode::kGrouped;
  if (s == "sandwich") return SamplerMode::kSandwich;
  throw ConfigError("unknown sampler mode '" + s + "'");
}

/// Sub-network passes one iteration of `m` costs.
inline int passes_per_iteration(SamplerMode m) { return m == SamplerMode::kSandwich ? 4 : 1; }

struct TrainConfig {
  int iterations = 200;
  int batch_size = 8;
  OptimizerConfig optimizer;
  double lr = 5e-3;
  LrSchedule schedule = LrSchedule::kCosine;
  double supernet_lr_ratio = 0.1;
  double kd_alpha = 1.0;
  SamplerMode sampler = SamplerMode::kGrouped;
  std::uint64_t seed = 0;
};

inline void require_valid(const TrainConfig& t) {
  if (t.iterations < 0) throw ConfigError("iterations must be >= 0");
  if (t.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(t.lr >= 0.0) || !std::isfinite(t.lr)) throw ConfigError("lr must be finite and >= 0");
  if (!(t.supernet_lr_ratio >= 0.0)) throw ConfigError("supernet_lr_ratio must be >= 0");
  if (!(t.kd_alpha >= 0.0)) throw ConfigError("kd_alpha must be >= 0");
}

/// Iterations covering `epochs` passes over `samples` with the last batch
/// of each epoch possibly short.
inline int iterations_for_epochs(int epochs, int samples, int batch) {
  return epochs * ((samples + batch - 1) / batch);
}

inline double learning_rate(const TrainConfig& t, double base, int iteration) {
  if (t.schedule == LrSchedule::kConstant || t.iterations == 0) return base;
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * iteration / t.iterations));
}

struct MetricRow {
  int iteration = 0;
  int group = -1;  // -1 when the sampler has no groups
  double task_loss = 0.0;
  double kd_loss = 0.0;
  double lr = 0.0;
  bool operator==(const MetricRow&) const = default;
};

inline std::string metrics_csv(const std::vector<MetricRow>& rows, const std::string& hash) {
  std::ostringstream os;
  os.precision(17);
  os << "# config_hash=" << hash << "\n";
  os << "iteration,group,task_loss,kd_loss,lr\n";
  for (const auto& r : rows)
    os << r.iteration << ',' << r.group << ',' << r.task_loss << ',' << r.kd_loss << ',' << r.lr << '\n';
  return os.str();
}

/// Sample indices of batch `iteration`: epoch e walks a permutation drawn
/// from (seed, e), so any iteration can be reproduced in isolation.
inline std::vector<int> batch_indices(std::uint64_t seed, int samples, int batch, int iteration) {
  if (samples < 1) throw ConfigError("training set is empty");
  const int per_epoch = (samples + batch - 1) / batch;
  const int epoch = iteration / per_epoch;
  const int slot = iteration % per_epoch;
  std::vector<int> perm(samples);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(derive_seed(seed, "epoch", static_cast<std::uint64_t>(epoch)));
  rng.shuffle(perm.begin(), perm.end());
  const int lo = slot * batch;
  const int hi = std::min(samples, lo + batch);
  return {perm.begin() + lo, perm.begin() + hi};
}

struct SampledNet {
  int group = -1;
  Genome genome;
};

/// Sub-networks trained at `iteration` under the configured sampler.
inline std::vector<SampledNet> sample_for_iteration(const SearchSpaceConfig& c, const TrainConfig& t,
                                                    int iteration) {
  const auto it = static_cast<std::uint64_t>(iteration);
  switch (t.sampler) {
    case SamplerMode::kFull:
      return {{-1, full_genome(c)}};
    case SamplerMode::kUniform:
      return {{-1, sample_uniform(c, derive_seed(t.seed, "uniform", it))}};
    case SamplerMode::kGrouped: {
      const int g = scheduled_group(c, it);
      return {{g, sample_grouped(c, groups(c)[g], derive_seed(t.seed, "grouped", it))}};
    }
    case SamplerMode::kSandwich: {
      std::vector<SampledNet> out;
      for (auto& g : sandwich_schedule(c, t.seed, it)) out.push_back({-1, std::move(g)});
      return out;
    }
  }
  return {};
}

/// Frozen teacher predictions for every training sample.
template <class T>
Tensor<T> teacher_logits(const ParamStore<T>& teacher, const SearchSpaceConfig& c, const HeadSpec& head,
                         const SegDataset& data, int batch = 16) {
  NoGradGuard no_grad;
  const Genome full = full_genome(c);
  Tensor<T> out;
  for (int lo = 0; lo < data.count; lo += batch) {
    std::vector<int> idx;
    for (int i = lo; i < std::min(data.count, lo + batch); ++i) idx.push_back(i);
    auto [x, y] = data.batch<T>(idx);
    auto logits = forward(teacher, c, head, full, constant(std::move(x))).logits->value;
    if (out.empty()) {
      out.shape = logits.shape;
      out.shape[0] = data.count;
      out.data.reserve(shape_size(out.shape));
    }
    out.data.insert(out.data.end(), logits.data.begin(), logits.data.end());
  }
  return out;
}

/// Mutable training state; everything needed to resume bit-exactly.
template <class T>
struct TrainState {
  ParamStore<T> store;
  Optimizer<T> optimizer;
  int iteration = 0;
  std::vector<MetricRow> log;
};

/// Runs iterations [state.iteration, stop) of teacher training (no teacher
/// given: full genome, base rate, task loss only) or supernet training
/// (teacher given: sampled sub-networks, reduced rate, task + alpha * KD).
template <class T>
void train_until(TrainState<T>& state, const ParamStore<T>* teacher, const SearchSpaceConfig& c,
                 const HeadSpec& head, const TrainConfig& t, const SegDataset& data, int stop) {
  require_valid(c);
  require_valid(t);
  if (head.kind != HeadKind::kSegmentation) throw ConfigError("training needs a segmentation head");
  if (head.out_channels != data.classes) throw ConfigError("head classes do not match the task");
  const bool supernet = teacher != nullptr;
  const double base = supernet ? t.lr * t.supernet_lr_ratio : t.lr;
  const bool use_kd = supernet && t.kd_alpha != 0.0;
  std::optional<Tensor<T>> soft;
  if (use_kd) soft = teacher_logits(*teacher, c, head, data);
  const std::size_t per_sample = soft ? soft->size() / data.count : 0;

  stop = std::min(stop, t.iterations);
  for (; state.iteration < stop; ++state.iteration) {
    const int it = state.iteration;
    const auto idx = batch_indices(t.seed, data.count, t.batch_size, it);
    auto [xv, labels] = data.batch<T>(idx);
    const auto input = constant(std::move(xv));
    Var<T> target;
    if (soft) {
      Tensor<T> tv;
      tv.shape = soft->shape;
      tv.shape[0] = static_cast<int>(idx.size());
      tv.data.reserve(idx.size() * per_sample);
      for (int i : idx)
        tv.data.insert(tv.data.end(), soft->data.begin() + i * per_sample,
                       soft->data.begin() + (i + 1) * per_sample);
      target = constant(std::move(tv));
    }

    const auto nets = supernet ? sample_for_iteration(c, t, it) : std::vector<SampledNet>{{-1, full_genome(c)}};
    const T share = T(1) / static_cast<T>(nets.size());
    MetricRow row;
    row.iteration = it;
    row.group = nets.size() == 1 ? nets.front().group : -1;
    row.lr = learning_rate(t, base, it);
    state.store.zero_grad();
    for (const auto& net : nets) {
      auto logits = forward(state.store, c, head, net.genome, input).logits;
      auto task = cross_entropy(logits, labels);
      Var<T> loss = task;
      double kd_value = 0.0;
      if (use_kd) {
        auto kd = mse(logits, target);
        kd_value = static_cast<double>(kd->value[0]);
        loss = add(task, scale(kd, static_cast<T>(t.kd_alpha)));
      }
      if (!std::isfinite(static_cast<double>(loss->value[0])))
        throw DivergenceError("non-finite loss at iteration " + std::to_string(it) + " for genome " +
                              canonical_key(net.genome));
      if (nets.size() > 1) loss = scale(loss, share);
      backward(loss);
      row.task_loss += static_cast<double>(task->value[0]) / nets.size();
      row.kd_loss += kd_value / nets.size();
    }
    state.optimizer.step(state.store, row.lr);
    state.log.push_back(row);
  }
}

template <class T>
TrainState<T> train_teacher(ParamStore<T> store, const SearchSpaceConfig& c, const HeadSpec& head,
                            const TrainConfig& t, const SegDataset& data) {
  TrainState<T> state{std::move(store), Optimizer<T>(t.optimizer), 0, {}};
  train_until<T>(state, nullptr, c, head, t, data, t.iterations);
  return state;
}

/// Fine-tunes a supernet initialized from `teacher`, which stays frozen.
template <class T>
TrainState<T> train_supernet(const ParamStore<T>& teacher, const SearchSpaceConfig& c, const HeadSpec& head,
                             const TrainConfig& t, const SegDataset& data) {
  TrainState<T> state{teacher.clone(), Optimizer<T>(t.optimizer), 0, {}};
  state.store.set_trainable(true);
  train_until<T>(state, &teacher, c, head, t, data, t.iterations);
  return state;
}

/// Per-pixel argmax over the class axis; ties go to the lower class.
template <class T>
std::vector<int> argmax_labels(const Tensor<T>& logits) {
  const int N = logits.dim(0), K = logits.dim(1);
  const std::size_t P = static_cast<std::size_t>(logits.dim(2)) * logits.dim(3);
  std::vector<int> out(N * P);
  for (int n = 0; n < N; ++n)
    for (std::size_t p = 0; p < P; ++p) {
      int best = 0;
      for (int k = 1; k < K; ++k)
        if (logits[(static_cast<std::size_t>(n) * K + k) * P + p] > logits[(static_cast<std::size_t>(n) * K + best) * P + p])
          best = k;
      out[n * P + p] = best;
    }
  return out;
}

template <class T>
SegMetrics evaluate(const ParamStore<T>& store, const SearchSpaceConfig& c, const HeadSpec& head,
                    const Genome& genome, const SegDataset& data, int batch = 16) {
  NoGradGuard no_grad;
  std::vector<int> pred;
  pred.reserve(data.labels.size());
  for (int lo = 0; lo < data.count; lo += batch) {
    std::vector<int> idx;
    for (int i = lo; i < std::min(data.count, lo + batch); ++i) idx.push_back(i);
    auto [x, y] = data.batch<T>(idx);
    auto p = argmax_labels(forward(store, c, head, genome, constant(std::move(x))).logits->value);
    pred.insert(pred.end(), p.begin(), p.end());
  }
  return segmentation_metrics(pred, data.labels, data.classes);
}

// ------------------------------------------------------------ persistence

/// Parameters under "param/", optimizer moments under "opt.m/" and "opt.v/";
/// step counts, iteration and caller metadata in the manifest.
template <class T>
Checkpoint<T> to_checkpoint(const TrainState<T>& s, const nlohmann::json& meta) {
  Checkpoint<T> ck;
  ck.manifest = meta;
  ck.manifest["iteration"] = s.iteration;
  nlohmann::json steps = nlohmann::json::object();
  for (const auto& [k, p] : s.store.entries()) ck.tensors["param/" + k] = p.var->value;
  for (const auto& [k, slot] : s.optimizer.state()) {
    const auto& shape = s.store.get(k)->value.shape;
    steps[k] = slot.steps;
    if (!slot.m.empty()) ck.tensors["opt.m/" + k] = Tensor<T>(shape, slot.m);
    if (!slot.v.empty()) ck.tensors["opt.v/" + k] = Tensor<T>(shape, slot.v);
  }
  ck.manifest["optimizer_steps"] = steps;
  nlohmann::json log = nlohmann::json::array();
  for (const auto& r : s.log) log.push_back({r.iteration, r.group, r.task_loss, r.kd_loss, r.lr});
  ck.manifest["log"] = log;
  return ck;
}

template <class T>
ParamStore<T> store_from_checkpoint(const Checkpoint<T>& ck) {
  ParamStore<T> store;
  for (const auto& [k, v] : ck.tensors)
    if (k.rfind("param/", 0) == 0) store.add(k.substr(6), v);
  return store;
}

template <class T>
TrainState<T> state_from_checkpoint(const Checkpoint<T>& ck, const OptimizerConfig& opt) {
  TrainState<T> s{store_from_checkpoint(ck), Optimizer<T>(opt), 0, {}};
  const nlohmann::json& manifest = ck.manifest;
  try {
    s.iteration = manifest.at("iteration").get<int>();
    for (const auto& el : manifest.at("optimizer_steps").items()) {
      const std::string& k = el.key();
      auto& slot = s.optimizer.mutable_state()[k];
      slot.steps = el.value().get<std::uint64_t>();
      if (auto it = ck.tensors.find("opt.m/" + k); it != ck.tensors.end()) slot.m = it->second.data;
      if (auto it = ck.tensors.find("opt.v/" + k); it != ck.tensors.end()) slot.v = it->second.data;
    }
    for (const auto& r : manifest.at("log"))
      s.log.push_back({r.at(0).get<int>(), r.at(1).get<int>(), r.at(2).get<double>(), r.at(3).get<double>(),
                       r.at(4).get<double>()});
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("training checkpoint manifest: ") + e.what());
  }
  return s;
}

}  // namespace scalenas
