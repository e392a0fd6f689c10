// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "scalenas/autodiff.hpp"
#include "scalenas/cost_model.hpp"
#include "scalenas/error.hpp"
#include "scalenas/genome.hpp"
#include "scalenas/params.hpp"
#include "scalenas/rng.hpp"

namespace scalenas {

// Parameter key scheme. Every conv is followed by a channel norm, except the
// head conv, which carries a bias instead.
//   stem.<i>                              stem convs
//   s1.k<i>.c<j>                          stage-1 blocks (k from 1), convs j in {1,2}
//   t<s>.b<r>                             transition creating branch r of stage s
//   s<s>.m<m>.b<r>.k<p>.c<j>              searched residual blocks
//   s<s>.m<m>.f<src>.<pos>.<dst>.c<j>     fusion edge convs, j from 0
//   head                                  prediction head
namespace keys {

inline std::string stem(int i) { return "stem." + std::to_string(i); }
inline std::string stage1_conv(int block, int conv) {
  return "s1.k" + std::to_string(block) + ".c" + std::to_string(conv);
}
inline std::string transition(int stage, int branch) {
  return "t" + std::to_string(stage) + ".b" + std::to_string(branch);
}
inline std::string block_conv(int stage, int module, int branch, int block, int conv) {
  return "s" + std::to_string(stage) + ".m" + std::to_string(module) + ".b" + std::to_string(branch) +
         ".k" + std::to_string(block) + ".c" + std::to_string(conv);
}
inline std::string fusion_conv(const GateKey& g, int step) {
  return "s" + std::to_string(g.stage) + ".m" + std::to_string(g.module) + ".f" + std::to_string(g.src) +
         "." + std::to_string(g.pos) + "." + std::to_string(g.dst) + ".c" + std::to_string(step);
}
inline constexpr const char* kHead = "head";

inline std::string weight(const std::string& conv) { return conv + ".w"; }
inline std::string gamma(const std::string& conv) { return conv + ".g"; }
inline std::string beta(const std::string& conv) { return conv + ".b"; }
inline std::string bias(const std::string& conv) { return conv + ".bias"; }

}  // namespace keys

namespace detail {

inline int fusion_steps(const GateKey& g) { return g.dst > g.src ? g.dst - g.src : 1; }

inline void insert_conv_norm(std::set<std::string>& out, const std::string& conv) {
  out.insert(keys::weight(conv));
  out.insert(keys::gamma(conv));
  out.insert(keys::beta(conv));
}

}  // namespace detail

/// Parameter keys a genome activates. The full genome activates the whole store.
inline std::set<std::string> active_keys(const SearchSpaceConfig& c, const HeadSpec& head,
                                         const Genome& g) {
  require_valid(g, c);
  std::set<std::string> out;
  for (int i = 0; i < c.stem_convs(); ++i) detail::insert_conv_norm(out, keys::stem(i));
  for (int k = 1; k <= c.stage1_blocks; ++k)
    for (int j = 1; j <= 2; ++j) detail::insert_conv_norm(out, keys::stage1_conv(k, j));
  for (int s = 2; s <= c.num_stages(); ++s) {
    if (s == 2) {
      detail::insert_conv_norm(out, keys::transition(2, 0));
      detail::insert_conv_norm(out, keys::transition(2, 1));
    } else {
      detail::insert_conv_norm(out, keys::transition(s, s - 1));
    }
  }
  for (const auto& [slot, d] : g.depths)
    for (int k = 1; k <= d; ++k)
      for (int j = 1; j <= 2; ++j)
        detail::insert_conv_norm(out, keys::block_conv(slot.stage, slot.module, slot.branch, k, j));
  for (const auto& gate : g.gates)
    for (int j = 0; j < detail::fusion_steps(gate); ++j)
      detail::insert_conv_norm(out, keys::fusion_conv(gate, j));
  if (head.kind != HeadKind::kNone) {
    out.insert(keys::weight(keys::kHead));
    out.insert(keys::bias(keys::kHead));
  }
  return out;
}

/// Allocates every parameter of the weight-sharing supernet: He-normal conv
/// weights (fan-in), unit norm scale, zero norm shift and head bias.
template <class T>
ParamStore<T> build_supernet(const SearchSpaceConfig& c, const HeadSpec& head, std::uint64_t seed) {
  require_valid(c);
  require_valid(head);
  ParamStore<T> store;
  Rng rng(derive_seed(seed, "supernet-init"));
  auto conv_weight = [&](const std::string& key, int cin, int cout, int k) {
    Tensor<T> w({cout, cin, k, k});
    const double sd = std::sqrt(2.0 / (static_cast<double>(cin) * k * k));
    for (auto& v : w.data) v = static_cast<T>(rng.normal() * sd);
    store.add(keys::weight(key), std::move(w));
  };
  auto conv_norm = [&](const std::string& key, int cin, int cout, int k) {
    conv_weight(key, cin, cout, k);
    store.add(keys::gamma(key), Tensor<T>({cout}, T(1)));
    store.add(keys::beta(key), Tensor<T>({cout}, T(0)));
  };

  int cin = c.input_channels;
  for (int i = 0; i < c.stem_convs(); ++i) {
    conv_norm(keys::stem(i), cin, c.stem_width, 3);
    cin = c.stem_width;
  }
  for (int k = 1; k <= c.stage1_blocks; ++k)
    for (int j = 1; j <= 2; ++j) conv_norm(keys::stage1_conv(k, j), c.stem_width, c.stem_width, 3);

  const Genome full = full_genome(c);
  for (int s = 2; s <= c.num_stages(); ++s) {
    if (s == 2) {
      conv_norm(keys::transition(2, 0), c.stem_width, c.width(0), 3);
      conv_norm(keys::transition(2, 1), c.stem_width, c.width(1), 3);
    } else {
      conv_norm(keys::transition(s, s - 1), c.width(s - 2), c.width(s - 1), 3);
    }
    for (int m = 0; m < c.modules(s); ++m) {
      for (int b = 0; b < s; ++b)
        for (int k = 1; k <= c.max_depth(); ++k)
          for (int j = 1; j <= 2; ++j) conv_norm(keys::block_conv(s, m, b, k, j), c.width(b), c.width(b), 3);
      for (const auto& gate : module_gate_sites(full, {s, m})) {
        if (gate.dst > gate.src) {
          for (int j = 0; j < detail::fusion_steps(gate); ++j) {
            const bool last = j == detail::fusion_steps(gate) - 1;
            conv_norm(keys::fusion_conv(gate, j), c.width(gate.src), last ? c.width(gate.dst) : c.width(gate.src), 3);
          }
        } else {
          conv_norm(keys::fusion_conv(gate, 0), c.width(gate.src), c.width(gate.dst), 1);
        }
      }
    }
  }

  if (head.kind != HeadKind::kNone) {
    int head_in = c.width(0);
    if (head.kind == HeadKind::kSegmentation) {
      head_in = 0;
      for (int r = 0; r < c.num_stages(); ++r) head_in += c.width(r);
    }
    Tensor<T> w({head.out_channels, head_in, 1, 1});
    const double sd = std::sqrt(1.0 / head_in);
    for (auto& v : w.data) v = static_cast<T>(rng.normal() * sd);
    store.add(keys::weight(keys::kHead), std::move(w));
    store.add(keys::bias(keys::kHead), Tensor<T>({head.out_channels}, T(0)));
  }
  return store;
}

template <class T>
struct ForwardResult {
  Var<T> logits;                // segmentation: input resolution; keypoint: branch-0 resolution
  std::vector<Var<T>> features;  // last-stage branch outputs, branch 0 first
};

/// Sub-network execution of the supernet under one genome.
template <class T>
class SubnetRunner {
 public:
  SubnetRunner(const ParamStore<T>& store, const SearchSpaceConfig& config, const HeadSpec& head)
      : store_(store), config_(config), head_(head) {}

  ForwardResult<T> forward(const Genome& genome, const Var<T>& input) const {
    require_valid(genome, config_);
    const auto& s = input->value.shape;
    if (s.size() != 4 || s[1] != config_.input_channels)
      throw ValidationError("input must be [N," + std::to_string(config_.input_channels) + ",H,W]");
    const int div = config_.stem_reduction << (config_.num_stages() - 1);
    if (s[2] % div != 0 || s[3] % div != 0)
      throw ValidationError("input height and width must be divisible by " + std::to_string(div));

    Var<T> x = input;
    for (int i = 0; i < config_.stem_convs(); ++i) x = conv_norm(x, keys::stem(i), 2, true);
    for (int k = 1; k <= config_.stage1_blocks; ++k)
      x = residual(x, keys::stage1_conv(k, 1), keys::stage1_conv(k, 2));

    std::vector<Var<T>> branches;
    for (int stage = 2; stage <= config_.num_stages(); ++stage) {
      if (stage == 2) {
        branches = {conv_norm(x, keys::transition(2, 0), 1, true), conv_norm(x, keys::transition(2, 1), 2, true)};
      } else {
        branches.push_back(conv_norm(branches.back(), keys::transition(stage, stage - 1), 2, true));
      }
      for (int m = 0; m < config_.modules(stage); ++m) branches = run_module(genome, {stage, m}, branches);
    }
    return {apply_head(branches, s[2]), branches};
  }

  /// Executes one searched module. Blocks advance in lockstep by position;
  /// after position p, each active gate (src, p, dst) resamples src's block-p
  /// output and adds it to dst's running feature, which is the input of
  /// dst's block p+1 or, when p == depth(dst), the module output.
  std::vector<Var<T>> run_module(const Genome& genome, ModuleKey mk, std::vector<Var<T>> cur) const {
    const int n = mk.stage;
    std::vector<int> depth(n);
    int max_d = 0;
    for (int b = 0; b < n; ++b) {
      depth[b] = genome.depth(mk.stage, mk.module, b);
      max_d = std::max(max_d, depth[b]);
    }
    std::vector<std::vector<GateKey>> by_pos(max_d + 1);
    for (auto it = genome.gates.lower_bound({mk.stage, mk.module, 0, 0, 0});
         it != genome.gates.end() && it->stage == mk.stage && it->module == mk.module; ++it)
      by_pos[it->pos].push_back(*it);

    for (int p = 1; p <= max_d; ++p) {
      for (int b = 0; b < n; ++b)
        if (depth[b] >= p)
          cur[b] = residual(cur[b], keys::block_conv(mk.stage, mk.module, b, p, 1),
                            keys::block_conv(mk.stage, mk.module, b, p, 2));
      std::vector<std::vector<Var<T>>> incoming(n);
      for (const auto& gate : by_pos[p]) incoming[gate.dst].push_back(fuse(cur[gate.src], gate));
      for (int b = 0; b < n; ++b)
        for (const auto& v : incoming[b]) cur[b] = add(cur[b], v);
    }
    return cur;
  }

 private:
  Var<T> conv_norm(const Var<T>& x, const std::string& key, int stride, bool activate) const {
    const auto& w = store_.get(keys::weight(key));
    const int k = w->value.dim(2);
    auto y = channel_norm(conv2d(x, w, stride, k / 2), store_.get(keys::gamma(key)), store_.get(keys::beta(key)));
    return activate ? relu(y) : y;
  }

  Var<T> residual(const Var<T>& x, const std::string& c1, const std::string& c2) const {
    auto y = conv_norm(x, c1, 1, true);
    y = conv_norm(y, c2, 1, false);
    return relu(add(y, x));
  }

  Var<T> fuse(const Var<T>& x, const GateKey& g) const {
    if (g.dst > g.src) {
      Var<T> y = x;
      const int steps = detail::fusion_steps(g);
      for (int j = 0; j < steps; ++j) y = conv_norm(y, keys::fusion_conv(g, j), 2, j + 1 < steps);
      return y;
    }
    return bilinear_upsample(conv_norm(x, keys::fusion_conv(g, 0), 1, false), 1 << (g.src - g.dst));
  }

  Var<T> apply_head(const std::vector<Var<T>>& feats, int height) const {
    switch (head_.kind) {
      case HeadKind::kNone:
        return feats.front();
      case HeadKind::kKeypoint:
        return add_bias(conv2d(feats.front(), store_.get(keys::weight(keys::kHead)), 1, 0),
                        store_.get(keys::bias(keys::kHead)));
      case HeadKind::kSegmentation: {
        std::vector<Var<T>> parts{feats.front()};
        for (std::size_t r = 1; r < feats.size(); ++r)
          parts.push_back(bilinear_upsample(feats[r], 1 << r));
        auto logits = add_bias(conv2d(concat_channels(parts), store_.get(keys::weight(keys::kHead)), 1, 0),
                               store_.get(keys::bias(keys::kHead)));
        if (logits->value.dim(2) != height) logits = bilinear_upsample(logits, height / logits->value.dim(2));
        return logits;
      }
    }
    return feats.front();
  }

  const ParamStore<T>& store_;
  const SearchSpaceConfig& config_;
  const HeadSpec& head_;
};

template <class T>
ForwardResult<T> forward(const ParamStore<T>& store, const SearchSpaceConfig& config, const HeadSpec& head,
                         const Genome& genome, const Var<T>& input) {
  return SubnetRunner<T>(store, config, head).forward(genome, input);
}

/// Standalone copy of exactly the parameters `genome` activates.
template <class T>
ParamStore<T> extract_subnet(const ParamStore<T>& store, const SearchSpaceConfig& config,
                             const HeadSpec& head, const Genome& genome) {
  return store.subset(active_keys(config, head, genome));
}

}  // namespace scalenas
