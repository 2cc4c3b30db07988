#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <tuple>
#include <vector>

#include <zlib.h>

#include "latentflow/core/error.hpp"
#include "latentflow/core/random.hpp"
#include "latentflow/data/dataset.hpp"

namespace latentflow {

/// Per-class sample counts for a stratified subset of ⌈f·N⌉ items: each
/// class gets ⌊f·N_c⌋ and the remainder goes to the largest fractional
/// parts (ties to the lower class), so every count is within 1 of f·N_c.
inline std::vector<std::size_t> stratified_counts(const std::vector<std::size_t>& class_sizes, double fraction) {
  if (!(fraction > 0 && fraction <= 1)) throw ConfigError("subset: fraction must lie in (0, 1]");
  const std::size_t n = std::accumulate(class_sizes.begin(), class_sizes.end(), std::size_t{0});
  const auto target = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9));
  std::vector<std::size_t> counts(class_sizes.size());
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < class_sizes.size(); ++c) {
    const double exact = fraction * static_cast<double>(class_sizes[c]);
    counts[c] = std::min(class_sizes[c], static_cast<std::size_t>(std::floor(exact + 1e-9)));
    assigned += counts[c];
    rem.emplace_back(exact - static_cast<double>(counts[c]), c);
  }
  std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < target && i < rem.size(); ++i) {
    if (counts[rem[i].second] < class_sizes[rem[i].second]) {
      ++counts[rem[i].second];
      ++assigned;
    }
  }
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (class_sizes[c] > 0 && counts[c] == 0) {
      throw ConfigError("subset: fraction " + std::to_string(fraction) + " leaves class " + std::to_string(c) +
                        " (" + std::to_string(class_sizes[c]) + " samples) without any sample");
    }
  }
  return counts;
}

/// Indices of a class-stratified subset, in ascending order. Within a class,
/// candidates are ordered by a checksum of their content before the seeded
/// shuffle, so the chosen samples do not depend on the source order.
template <class T>
std::vector<std::size_t> subset_indices(const Dataset<T>& data, double fraction, std::uint64_t seed) {
  data.validate();
  std::vector<std::vector<std::size_t>> by_class(data.classes);
  for (std::size_t i = 0; i < data.size(); ++i) by_class[data.labels[i]].push_back(i);
  std::vector<std::size_t> sizes;
  for (const auto& v : by_class) sizes.push_back(v.size());
  const auto counts = stratified_counts(sizes, fraction);

  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < data.classes; ++c) {
    auto& idx = by_class[c];
    if (counts[c] == idx.size()) {
      out.insert(out.end(), idx.begin(), idx.end());
      continue;
    }
    std::vector<std::tuple<uLong, std::vector<T>, std::size_t>> keyed;
    keyed.reserve(idx.size());
    for (auto i : idx) {
      auto row = data.x.row(i);
      const uLong h = crc32(0L, reinterpret_cast<const Bytef*>(row.data()), static_cast<uInt>(row.size_bytes()));
      keyed.emplace_back(h, std::vector<T>(row.begin(), row.end()), i);
    }
    std::sort(keyed.begin(), keyed.end());
    Rng rng = Rng::derive(seed, c);
    rng.shuffle(keyed.begin(), keyed.end());
    for (std::size_t k = 0; k < counts[c]; ++k) out.push_back(std::get<2>(keyed[k]));
  }
  std::sort(out.begin(), out.end());
  return out;
}

template <class T>
Dataset<T> subset(const Dataset<T>& data, double fraction, std::uint64_t seed) {
  const auto idx = subset_indices(data, fraction, seed);
  Dataset<T> out = data.select(idx);
  out.provenance += " subset(" + std::to_string(fraction) + ", seed=" + std::to_string(seed) + ")";
  return out;
}

}  // namespace latentflow
