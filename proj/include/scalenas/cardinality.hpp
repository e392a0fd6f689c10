// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <boost/multiprecision/cpp_int.hpp>
#include <cmath>
#include <string>
#include <vector>

#include "scalenas/genome.hpp"

namespace scalenas {

using BigInt = boost::multiprecision::cpp_int;

/// Which fusion-gate sites count as independent binary choices.
enum class CountingConvention {
  /// Sites exist only where both endpoints realize the position
  /// (pos <= min(depth(src), depth(dst))). Counts distinct valid genomes.
  kRealizedSites,
  /// Every ordered branch pair hosts a site at every position up to the
  /// maximum depth, independent of the chosen depths.
  kMaxDepthSites,
  /// One site per ordered branch pair per module (module-end exchange only).
  kModuleEndSites,
};

inline std::string to_string(CountingConvention c) {
  switch (c) {
    case CountingConvention::kRealizedSites: return "realized-sites";
    case CountingConvention::kMaxDepthSites: return "max-depth-sites";
    case CountingConvention::kModuleEndSites: return "module-end-sites";
  }
  return "unknown";
}

namespace detail {

// Sum over all depth assignments of one module with n branches of
// 2^(number of realized gate sites).
inline BigInt realized_module_count(const std::vector<int>& choices, int n) {
  BigInt total = 0;
  std::vector<std::size_t> idx(n, 0);
  while (true) {
    long long sites = 0;
    for (int s = 0; s < n; ++s)
      for (int t = 0; t < n; ++t)
        if (s != t) sites += std::min(choices[idx[s]], choices[idx[t]]);
    total += BigInt(1) << sites;
    int i = 0;
    while (i < n && ++idx[i] == choices.size()) idx[i++] = 0;
    if (i == n) break;
  }
  return total;
}

}  // namespace detail

/// Number of distinct architectures in the space under `convention`.
inline BigInt space_cardinality(const SearchSpaceConfig& c, CountingConvention convention) {
  require_valid(c);
  BigInt total = 1;
  const auto nd = static_cast<long long>(c.depth_choices.size());
  for (int s = 2; s <= c.num_stages(); ++s) {
    const int n = SearchSpaceConfig::branches(s);
    BigInt per_module;
    switch (convention) {
      case CountingConvention::kRealizedSites:
        per_module = detail::realized_module_count(c.depth_choices, n);
        break;
      case CountingConvention::kMaxDepthSites:
        per_module = boost::multiprecision::pow(BigInt(nd), n) *
                     (BigInt(1) << (static_cast<long long>(n) * (n - 1) * c.max_depth()));
        break;
      case CountingConvention::kModuleEndSites:
        per_module = boost::multiprecision::pow(BigInt(nd), n) * (BigInt(1) << (n * (n - 1)));
        break;
    }
    total *= boost::multiprecision::pow(per_module, c.modules(s));
  }
  return total;
}

inline double log10_of(const BigInt& v) {
  // Exact digit count plus the leading digits keeps this accurate for huge values.
  const std::string digits = v.str();
  const std::size_t lead = std::min<std::size_t>(digits.size(), 17);
  const double mantissa = std::stod(digits.substr(0, lead));
  return std::log10(mantissa) + static_cast<double>(digits.size() - lead);
}

}  // namespace scalenas
