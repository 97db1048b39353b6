#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "dnpg/autodiff.hpp"
#include "dnpg/openweights.hpp"

namespace dnpg {

struct CollapseReport {
  Matrix cosine;                 // pairwise cosine among task NPs
  double min_distance = 0.0;     // over distinct pairs; 0 when N_g = 1
  double mean_distance = 0.0;
  int effective_count = 0;
};

// Effective count: NPs kept by a greedy pass in index order, where an NP is
// kept if its cosine with every previously kept NP is below `threshold`.
// Identical NPs count once; mutually orthogonal NPs all count.
inline CollapseReport collapse_report(const Matrix& nps, double threshold = 0.99) {
  if (nps.rows() < 1) throw ParameterError("collapse_report: need at least one NP");
  CollapseReport r;
  r.cosine = row_cosine_matrix(nps);
  r.cosine.diagonal().setOnes();
  double total = 0.0;
  int pairs = 0;
  r.min_distance = nps.rows() > 1 ? std::numeric_limits<double>::infinity() : 0.0;
  for (Eigen::Index i = 0; i < nps.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < nps.rows(); ++j) {
      const double d = (nps.row(i) - nps.row(j)).norm();
      r.min_distance = std::min(r.min_distance, d);
      total += d;
      ++pairs;
    }
  }
  r.mean_distance = pairs > 0 ? total / pairs : 0.0;
  std::vector<Eigen::Index> kept;
  for (Eigen::Index i = 0; i < nps.rows(); ++i) {
    bool distinct = true;
    for (Eigen::Index k : kept) distinct = distinct && r.cosine(i, k) < threshold;
    if (distinct) kept.push_back(i);
  }
  r.effective_count = static_cast<int>(kept.size());
  return r;
}

struct SimilaritySummary {
  std::size_t count = 0;
  double mean = 0.0;
  std::vector<double> quantile_levels{0.1, 0.25, 0.5, 0.75, 0.9};
  std::vector<double> quantiles;
  double bin_low = -1.0;
  double bin_high = 1.0;
  std::vector<long long> bins;  // equal-width bins over [bin_low, bin_high]
};

// Linear-interpolation quantile of sorted data.
inline double sorted_quantile(std::span<const double> sorted, double level) {
  if (sorted.empty()) return 0.0;
  const double pos = level * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

// Distribution of max_k cos(q, p_k) over unknown queries.
inline SimilaritySummary unknown_similarity_distribution(std::span<const double> max_cosines, int num_bins = 20) {
  if (num_bins < 1) throw ParameterError("unknown_similarity_distribution: need at least one bin");
  SimilaritySummary s;
  s.count = max_cosines.size();
  s.bins.assign(static_cast<std::size_t>(num_bins), 0);
  if (max_cosines.empty()) return s;
  std::vector<double> sorted(max_cosines.begin(), max_cosines.end());
  std::sort(sorted.begin(), sorted.end());
  double total = 0.0;
  for (double v : max_cosines) total += v;
  s.mean = total / static_cast<double>(s.count);
  for (double l : s.quantile_levels) s.quantiles.push_back(sorted_quantile(sorted, l));
  const double width = (s.bin_high - s.bin_low) / num_bins;
  for (double v : max_cosines) {
    auto b = static_cast<long long>(std::floor((v - s.bin_low) / width));
    b = std::clamp<long long>(b, 0, num_bins - 1);
    ++s.bins[static_cast<std::size_t>(b)];
  }
  return s;
}

}  // namespace dnpg
