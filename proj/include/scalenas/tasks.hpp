// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "scalenas/checkpoint.hpp"
#include "scalenas/error.hpp"
#include "scalenas/genome.hpp"
#include "scalenas/rng.hpp"
#include "scalenas/tensor.hpp"

namespace scalenas {

/// Radius range (pixels) and per-image count range for one foreground class.
struct BlobScale {
  double min_radius = 1.0;
  double max_radius = 2.0;
  int min_count = 1;
  int max_count = 2;
};

/// Images of disks at three very different scales on a noisy background.
/// Class 0 is background; class c >= 1 uses scales[c - 1]. All foreground
/// classes share a base color with a weak per-class tint, so telling them
/// apart leans on object size as much as on color.
struct SyntheticSegConfig {
  int height = 32;
  int width = 64;
  int classes = 4;
  std::vector<BlobScale> scales{{1.5, 2.5, 3, 6}, {3.5, 5.0, 1, 3}, {7.0, 10.0, 1, 2}};
  double tint = 0.35;
  double noise = 0.25;
  int train_size = 256;
  int val_size = 64;
  std::uint64_t seed = 0;
};

struct SegDataset {
  int count = 0;
  int height = 0;
  int width = 0;
  int classes = 0;
  Tensor<float> images;     // [N,3,H,W]
  std::vector<int> labels;  // N*H*W

  /// Images and labels for the given sample indices.
  template <class T>
  std::pair<Tensor<T>, std::vector<int>> batch(const std::vector<int>& idx) const {
    const std::size_t plane = static_cast<std::size_t>(height) * width;
    Tensor<T> x({static_cast<int>(idx.size()), 3, height, width});
    std::vector<int> y(idx.size() * plane);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::copy_n(images.data.begin() + static_cast<std::size_t>(idx[i]) * 3 * plane, 3 * plane,
                  x.data.begin() + i * 3 * plane);
      std::copy_n(labels.begin() + static_cast<std::size_t>(idx[i]) * plane, plane, y.begin() + i * plane);
    }
    return {std::move(x), std::move(y)};
  }

  bool operator==(const SegDataset&) const = default;
};

struct SegSplits {
  SegDataset train;
  SegDataset val;
};

namespace detail {

inline SegDataset generate_split(const SyntheticSegConfig& cfg, int count, std::uint64_t seed) {
  SegDataset d;
  d.count = count;
  d.height = cfg.height;
  d.width = cfg.width;
  d.classes = cfg.classes;
  d.images = Tensor<float>({count, 3, cfg.height, cfg.width});
  const std::size_t plane = static_cast<std::size_t>(cfg.height) * cfg.width;
  d.labels.assign(static_cast<std::size_t>(count) * plane, 0);
  static constexpr double kBackground[3] = {0.2, 0.25, 0.3};
  static constexpr double kForeground[3] = {0.75, 0.7, 0.65};
  for (int n = 0; n < count; ++n) {
    Rng rng(derive_seed(seed, "image", static_cast<std::uint64_t>(n)));
    int* lab = d.labels.data() + n * plane;
    // Largest objects first so small ones stay visible on top.
    for (int c = cfg.classes - 1; c >= 1; --c) {
      const auto& sc = cfg.scales[c - 1];
      const int blobs = sc.min_count + static_cast<int>(rng.below(sc.max_count - sc.min_count + 1));
      for (int b = 0; b < blobs; ++b) {
        const double r = sc.min_radius + rng.uniform() * (sc.max_radius - sc.min_radius);
        const double cy = rng.uniform() * cfg.height;
        const double cx = rng.uniform() * cfg.width;
        for (int y = 0; y < cfg.height; ++y)
          for (int x = 0; x < cfg.width; ++x) {
            const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
            if (dy * dy + dx * dx <= r * r) lab[y * cfg.width + x] = c;
          }
      }
    }
    for (int ch = 0; ch < 3; ++ch) {
      float* img = d.images.data.data() + (static_cast<std::size_t>(n) * 3 + ch) * plane;
      for (std::size_t p = 0; p < plane; ++p) {
        const int c = lab[p];
        double v = c == 0 ? kBackground[ch] : kForeground[ch];
        if (c > 0 && (c - 1) % 3 == ch) v += cfg.tint;
        img[p] = static_cast<float>(v + cfg.noise * rng.normal());
      }
    }
  }
  return d;
}

}  // namespace detail

/// Train/validation splits; a pure function of the config (seed included).
inline SegSplits generate(const SyntheticSegConfig& cfg) {
  if (cfg.classes < 1 || static_cast<int>(cfg.scales.size()) < cfg.classes - 1)
    throw ConfigError("synthetic task needs one blob scale per foreground class");
  if (cfg.height < 1 || cfg.width < 1 || cfg.train_size < 0 || cfg.val_size < 0)
    throw ConfigError("synthetic task sizes must be positive");
  for (const auto& sc : cfg.scales)
    if (sc.min_count < 0 || sc.max_count < sc.min_count || sc.max_radius < sc.min_radius)
      throw ConfigError("blob scale ranges must be non-empty");
  return {detail::generate_split(cfg, cfg.train_size, derive_seed(cfg.seed, "train")),
          detail::generate_split(cfg, cfg.val_size, derive_seed(cfg.seed, "val"))};
}

/// Fraction of labelled pixels per class.
inline std::vector<double> class_histogram(const SegDataset& d) {
  std::vector<double> h(d.classes, 0.0);
  for (int y : d.labels) h[y] += 1.0;
  for (auto& v : h) v /= static_cast<double>(d.labels.size());
  return h;
}

inline Checkpoint<float> dataset_to_checkpoint(const SegDataset& d) {
  Checkpoint<float> ck;
  ck.manifest = {{"kind", "segmentation-dataset"}, {"classes", d.classes}};
  ck.tensors["images"] = d.images;
  Tensor<float> lab({d.count, d.height, d.width});
  for (std::size_t i = 0; i < d.labels.size(); ++i) lab[i] = static_cast<float>(d.labels[i]);
  ck.tensors["labels"] = std::move(lab);
  return ck;
}

inline SegDataset dataset_from_checkpoint(const Checkpoint<float>& ck) {
  SegDataset d;
  try {
    d.images = ck.tensors.at("images");
    const auto& lab = ck.tensors.at("labels");
    d.classes = ck.manifest.at("classes").get<int>();
    d.count = lab.dim(0);
    d.height = lab.dim(1);
    d.width = lab.dim(2);
    d.labels.resize(lab.size());
    for (std::size_t i = 0; i < lab.size(); ++i) d.labels[i] = static_cast<int>(lab[i]);
  } catch (const std::exception& e) {
    throw IoError(std::string("not a dataset container: ") + e.what());
  }
  return d;
}

struct SegMetrics {
  double pixel_accuracy = 0.0;
  double mean_iou = 0.0;
};

/// Pixel accuracy and mean IoU over classes that occur in prediction or truth.
inline SegMetrics segmentation_metrics(const std::vector<int>& pred, const std::vector<int>& truth, int classes) {
  if (pred.size() != truth.size()) throw ValidationError("prediction/label size mismatch");
  if (truth.empty()) return {};
  std::vector<double> inter(classes, 0.0), uni(classes, 0.0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] == truth[i]) {
      ++correct;
      inter[truth[i]] += 1.0;
      uni[truth[i]] += 1.0;
    } else {
      uni[truth[i]] += 1.0;
      uni[pred[i]] += 1.0;
    }
  }
  double iou = 0.0;
  int present = 0;
  for (int c = 0; c < classes; ++c)
    if (uni[c] > 0) {
      iou += inter[c] / uni[c];
      ++present;
    }
  return {static_cast<double>(correct) / static_cast<double>(pred.size()), present ? iou / present : 0.0};
}

/// Deterministic stand-in for supernet accuracy: a saturating function of
/// stage-weighted block and fusion counts plus genome-keyed noise.
struct SurrogateEvaluator {
  SearchSpaceConfig config;
  std::vector<double> block_weights;   // per stage, index 0 = stage 1; empty = all 1
  std::vector<double> fusion_weights;  // per stage; empty = 0.25 * (stage - 1)
  double curvature = 3.0;
  double noise = 0.0;
  std::uint64_t seed = 0;

  double block_weight(int stage) const {
    return block_weights.empty() ? 1.0 : block_weights.at(stage - 1);
  }
  double fusion_weight(int stage) const {
    return fusion_weights.empty() ? 0.25 * (stage - 1) : fusion_weights.at(stage - 1);
  }

  double raw_score(const Genome& g) const {
    auto counts = count_structure_by_stage(g, config);
    double z = 0.0;
    for (int s = 1; s <= config.num_stages(); ++s)
      z += block_weight(s) * counts[s - 1].blocks + fusion_weight(s) * counts[s - 1].fusions;
    return z;
  }

  /// Noise-free accuracy in (0, 1]; equals 1 at the full genome.
  double base(const Genome& g) const {
    const double z = raw_score(g) / raw_score(full_genome(config));
    return (1.0 - std::exp(-curvature * z)) / (1.0 - std::exp(-curvature));
  }

  double operator()(const Genome& g) const {
    double v = base(g);
    if (noise > 0.0) {
      const auto h = splitmix64(fnv1a64(canonical_key(g)) ^ splitmix64(seed));
      const double u = static_cast<double>(h >> 11) * 0x1.0p-53;
      v += noise * (2.0 * u - 1.0);
    }
    return std::clamp(v, 0.0, 1.0);
  }
};

}  // namespace scalenas
