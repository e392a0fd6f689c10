// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "scalenas/error.hpp"

namespace scalenas {

/// A point in the (lower flops, higher accuracy) trade-off.
struct Point {
  double flops = 0.0;
  double accuracy = 0.0;
};

inline bool dominates(const Point& a, const Point& b) {
  return a.flops <= b.flops && a.accuracy >= b.accuracy && (a.flops < b.flops || a.accuracy > b.accuracy);
}

/// Non-dominated rank per point (0 = first front), by repeated peeling of a
/// flops-sorted sweep.
inline std::vector<int> nondominated_ranks(const std::vector<Point>& pts) {
  std::vector<int> order(pts.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (pts[a].flops != pts[b].flops) return pts[a].flops < pts[b].flops;
    return pts[a].accuracy > pts[b].accuracy;
  });
  std::vector<int> rank(pts.size(), -1);
  std::vector<int> left = order;
  for (int r = 0; !left.empty(); ++r) {
    std::vector<int> rest;
    bool any = false;
    double best = 0.0, best_flops = 0.0;
    for (int i : left) {
      const auto& p = pts[i];
      const bool dominated = any && (best > p.accuracy || (best == p.accuracy && best_flops < p.flops));
      if (dominated) {
        rest.push_back(i);
        continue;
      }
      rank[i] = r;
      if (!any || p.accuracy > best) {
        best = p.accuracy;
        best_flops = p.flops;
        any = true;
      }
    }
    left = std::move(rest);
  }
  return rank;
}

inline std::vector<int> front_indices(const std::vector<Point>& pts) {
  const auto rank = nondominated_ranks(pts);
  std::vector<int> out;
  for (std::size_t i = 0; i < pts.size(); ++i)
    if (rank[i] == 0) out.push_back(static_cast<int>(i));
  return out;
}

/// Area dominated by `pts` inside the box [.., ref_flops] x [ref_accuracy, ..].
/// Points outside the box contribute nothing.
inline double hypervolume(std::vector<Point> pts, double ref_flops, double ref_accuracy) {
  std::erase_if(pts, [&](const Point& p) { return p.flops > ref_flops || p.accuracy < ref_accuracy; });
  std::sort(pts.begin(), pts.end(), [](const Point& a, const Point& b) {
    return a.flops != b.flops ? a.flops < b.flops : a.accuracy > b.accuracy;
  });
  double area = 0.0;
  double best = ref_accuracy;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    best = std::max(best, pts[i].accuracy);
    const double next = i + 1 < pts.size() ? pts[i + 1].flops : ref_flops;
    area += (next - pts[i].flops) * (best - ref_accuracy);
  }
  return area;
}

/// Ranks with ties averaged, starting at 1.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<int> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return v[a] < v[b]; });
  std::vector<double> rank(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t t = i; t <= j; ++t) rank[order[t]] = r;
    i = j + 1;
  }
  return rank;
}

/// Spearman rank correlation; 0 when either side is constant.
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw ValidationError("spearman: length mismatch");
  const std::size_t n = x.size();
  if (n < 2) return 0.0;
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace scalenas
