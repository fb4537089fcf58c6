#pragma once

// Wall-clock timing of a projector forward pass.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <vector>

#include "tokfuse/fusion.hpp"

namespace tokfuse {

struct BenchReport {
  std::vector<double> seconds;  // one sample per timed repetition
  std::size_t tokens = 0;
  double median = 0;
  double p90 = 0;
  double mean = 0;
  double stddev = 0;

  double tokens_per_second() const {
    return median > 0 ? static_cast<double>(tokens) / median : 0.0;
  }
};

// Nearest-rank percentile of an ascending sample, q in [0, 1].
inline double percentile(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) return 0;
  const auto rank = static_cast<std::size_t>(
      std::ceil(q * static_cast<double>(sorted.size())));
  return sorted[std::clamp<std::size_t>(rank, 1, sorted.size()) - 1];
}

inline double median(std::vector<double> v) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline BenchReport bench_projector(const FeatureStack& stack,
                                   const ModuleParams& params,
                                   const FusionConfig& config,
                                   ProjectorKind kind, std::size_t repetitions,
                                   std::size_t warmup = 1) {
  if (repetitions == 0) throw ConfigError("repetitions must be positive");
  using clock = std::chrono::steady_clock;
  BenchReport r;
  for (std::size_t i = 0; i < warmup; ++i) {
    r.tokens = projector_forward(stack, params, config, kind).length();
  }
  for (std::size_t i = 0; i < repetitions; ++i) {
    const auto t0 = clock::now();
    const auto seq = projector_forward(stack, params, config, kind);
    const auto t1 = clock::now();
    r.tokens = seq.length();
    r.seconds.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  std::vector<double> sorted = r.seconds;
  std::sort(sorted.begin(), sorted.end());
  r.median = median(sorted);
  r.p90 = percentile(sorted, 0.9);
  for (double s : sorted) r.mean += s;
  r.mean /= static_cast<double>(sorted.size());
  for (double s : sorted) r.stddev += (s - r.mean) * (s - r.mean);
  r.stddev = std::sqrt(r.stddev / static_cast<double>(sorted.size()));
  return r;
}

}  // namespace tokfuse
