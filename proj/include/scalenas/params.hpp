// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "scalenas/autodiff.hpp"
#include "scalenas/error.hpp"

namespace scalenas {

template <class T>
struct Parameter {
  std::string key;
  Var<T> var;
  bool trainable = true;
};

/// Keyed parameter container. Keys are stable across builds, so two stores
/// over the same search space line up entry by entry.
template <class T>
class ParamStore {
 public:
  using Map = std::map<std::string, Parameter<T>>;

  void add(const std::string& key, Tensor<T> value, bool trainable = true) {
    if (params_.contains(key)) throw ValidationError("duplicate parameter key " + key);
    params_.emplace(key, Parameter<T>{key, leaf(std::move(value), trainable), trainable});
  }

  bool contains(const std::string& key) const { return params_.contains(key); }

  /// Looks up a parameter; records the access when an audit set is attached.
  const Var<T>& get(const std::string& key) const {
    auto it = params_.find(key);
    if (it == params_.end()) throw ValidationError("parameter not in store: " + key);
    if (audit_) audit_->insert(key);
    return it->second.var;
  }

  const Map& entries() const { return params_; }
  std::size_t size() const { return params_.size(); }

  std::uint64_t scalar_count() const {
    std::uint64_t n = 0;
    for (const auto& [k, p] : params_) n += p.var->value.size();
    return n;
  }

  void set_audit(std::set<std::string>* audit) const { audit_ = audit; }

  void set_trainable(bool trainable) {
    for (auto& [k, p] : params_) {
      p.trainable = trainable;
      p.var->requires_grad = trainable;
    }
  }

  void zero_grad() {
    for (auto& [k, p] : params_) p.var->grad = Tensor<T>();
  }

  /// Deep copy with fresh graph leaves.
  ParamStore clone() const {
    ParamStore out;
    for (const auto& [k, p] : params_) out.add(k, p.var->value, p.trainable);
    return out;
  }

  /// Deep copy restricted to `keys`.
  ParamStore subset(const std::set<std::string>& keys) const {
    ParamStore out;
    for (const auto& k : keys) {
      auto it = params_.find(k);
      if (it == params_.end()) throw ValidationError("parameter not in store: " + k);
      out.add(k, it->second.var->value, it->second.trainable);
    }
    return out;
  }

  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [k, p] : params_) out.add(k, p.var->value.template cast<U>(), p.trainable);
    return out;
  }

  /// Replaces values (shapes must agree) without touching graph identity.
  void assign_from(const ParamStore& other) {
    for (auto& [k, p] : params_) {
      const auto& v = other.get(k)->value;
      if (v.shape != p.var->value.shape) throw ValidationError("shape mismatch for " + k);
      p.var->value = v;
    }
  }

  bool values_equal(const ParamStore& other) const {
    if (params_.size() != other.params_.size()) return false;
    for (const auto& [k, p] : params_) {
      auto it = other.params_.find(k);
      if (it == other.params_.end() || !(it->second.var->value == p.var->value)) return false;
    }
    return true;
  }

  Map& mutable_entries() { return params_; }

 private:
  Map params_;
  mutable std::set<std::string>* audit_ = nullptr;
};

enum class OptimizerKind { kSgd, kAdam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// SGD with heavy-ball momentum, or Adam. Parameters that
/// received no gradient in a step are left untouched, moments included.
template <class T>
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg = {}) : cfg_(cfg) {}

  void step(ParamStore<T>& store, double lr) {
    for (auto& [key, p] : store.mutable_entries()) {
      auto& node = *p.var;
      if (!p.trainable || !node.has_grad()) continue;
      auto& st = state_[key];
      const std::size_t n = node.value.size();
      if (st.m.size() != n) {
        st.m.assign(n, T(0));
        if (cfg_.kind == OptimizerKind::kAdam) st.v.assign(n, T(0));
      }
      st.steps += 1;
      const T wd = static_cast<T>(cfg_.weight_decay);
      if (cfg_.kind == OptimizerKind::kSgd) {
        const T mom = static_cast<T>(cfg_.momentum);
        for (std::size_t i = 0; i < n; ++i) {
          const T g = node.grad[i] + wd * node.value[i];
          st.m[i] = mom * st.m[i] + g;
          node.value[i] -= static_cast<T>(lr) * st.m[i];
        }
      } else {
        const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
        const T c1 = T(1) - static_cast<T>(std::pow(cfg_.beta1, static_cast<double>(st.steps)));
        const T c2 = T(1) - static_cast<T>(std::pow(cfg_.beta2, static_cast<double>(st.steps)));
        const T eps = static_cast<T>(cfg_.eps);
        for (std::size_t i = 0; i < n; ++i) {
          const T g = node.grad[i] + wd * node.value[i];
          st.m[i] = b1 * st.m[i] + (T(1) - b1) * g;
          st.v[i] = b2 * st.v[i] + (T(1) - b2) * g * g;
          const T mhat = st.m[i] / c1;
          const T vhat = st.v[i] / c2;
          node.value[i] -= static_cast<T>(lr) * mhat / (std::sqrt(vhat) + eps);
        }
      }
    }
  }

  struct Slot {
    std::vector<T> m, v;
    std::uint64_t steps = 0;
  };

  const std::map<std::string, Slot>& state() const { return state_; }
  std::map<std::string, Slot>& mutable_state() { return state_; }
  const OptimizerConfig& config() const { return cfg_; }

 private:
  OptimizerConfig cfg_;
  std::map<std::string, Slot> state_;
};

}  // namespace scalenas
