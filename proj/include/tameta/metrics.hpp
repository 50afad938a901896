#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "tameta/common.hpp"

namespace tameta {

// Theil inequality term: sum_i (L_i / Lbar) * ln(L_i / Lbar).
// Zero iff all losses are equal; invariant to positive rescaling.
inline double theil_term(std::span<const double> losses) {
  if (losses.empty()) throw error("theil_term: empty input");
  double mean = 0.0;
  for (double l : losses) {
    if (!(l > 0.0)) throw error("theil_term: losses must be positive");
    mean += l;
  }
  mean /= static_cast<double>(losses.size());
  double acc = 0.0;
  for (double l : losses) {
    double r = l / mean;
    acc += r * std::log(r);
  }
  return acc;
}

// Sample Pearson correlation coefficient.
inline double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw error("pearson: length mismatch");
  if (x.size() < 2) throw error("pearson: need at least two samples");
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw error("pearson: zero variance");
  double r = sxy / std::sqrt(sxx * syy);
  return std::clamp(r, -1.0, 1.0);
}

// Mean and 95% normal-approximation halfwidth (1.96 * s / sqrt(n)).
// A single sample reports halfwidth 0.
inline std::pair<double, double> ci95(std::span<const double> samples) {
  if (samples.empty()) throw error("ci95: empty input");
  const double n = static_cast<double>(samples.size());
  double mean = 0.0;
  for (double s : samples) mean += s;
  mean /= n;
  if (samples.size() == 1) return {mean, 0.0};
  double ss = 0.0;
  for (double s : samples) ss += (s - mean) * (s - mean);
  double sd = std::sqrt(ss / (n - 1.0));
  return {mean, 1.96 * sd / std::sqrt(n)};
}

struct TrajectoryStats {
  double path_length = 0.0;        // sum of Euclidean step lengths
  double oscillation = 0.0;        // mean turning angle between steps, radians
  double endpoint_distance = 0.0;  // straight-line start -> end distance
};

// Statistics of a parameter-space path. Zero-length displacements are
// skipped when measuring turning angles.
inline TrajectoryStats trajectory_stats(std::span<const std::vector<double>> path) {
  if (path.size() < 2) throw error("trajectory_stats: need at least two points");
  const std::size_t dim = path[0].size();
  for (const auto& p : path)
    if (p.size() != dim) throw error("trajectory_stats: inconsistent dimensions");

  TrajectoryStats st;
  std::vector<std::vector<double>> steps;
  for (std::size_t i = 1; i < path.size(); ++i) {
    std::vector<double> d(dim);
    double len2 = 0.0;
    for (std::size_t j = 0; j < dim; ++j) {
      d[j] = path[i][j] - path[i - 1][j];
      len2 += d[j] * d[j];
    }
    st.path_length += std::sqrt(len2);
    if (len2 > 0.0) steps.push_back(std::move(d));
  }
  double end2 = 0.0;
  for (std::size_t j = 0; j < dim; ++j) {
    double d = path.back()[j] - path.front()[j];
    end2 += d * d;
  }
  st.endpoint_distance = std::sqrt(end2);

  double angle_sum = 0.0;
  std::size_t angle_count = 0;
  for (std::size_t i = 1; i < steps.size(); ++i) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t j = 0; j < dim; ++j) {
      dot += steps[i - 1][j] * steps[i][j];
      na += steps[i - 1][j] * steps[i - 1][j];
      nb += steps[i][j] * steps[i][j];
    }
    double c = std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
    angle_sum += std::acos(c);
    ++angle_count;
  }
  st.oscillation = angle_count > 0 ? angle_sum / static_cast<double>(angle_count) : 0.0;
  return st;
}

// 1-based rank (1 = highest weight) of the task with the largest loss.
// Ties in weight are broken by task index: an equal-weight task with a
// smaller index outranks the max-loss task.
inline int rank_of_max_loss(std::span<const double> weights, std::span<const double> losses) {
  if (weights.size() != losses.size()) throw error("rank_of_max_loss: length mismatch");
  if (weights.empty()) throw error("rank_of_max_loss: empty input");
  std::size_t max_i = 0;
  for (std::size_t i = 1; i < losses.size(); ++i)
    if (losses[i] > losses[max_i]) max_i = i;
  int rank = 1;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (i == max_i) continue;
    if (weights[i] > weights[max_i] || (weights[i] == weights[max_i] && i < max_i)) ++rank;
  }
  return rank;
}

struct AttentionTrendRow {
  double w_min = 0.0;
  double w_max = 0.0;
  double w_mean = 0.0;
};

// Per-iteration min/max/mean of the attention vectors.
inline std::vector<AttentionTrendRow> attention_trend(
    std::span<const std::vector<double>> w_per_iteration) {
  std::vector<AttentionTrendRow> rows;
  rows.reserve(w_per_iteration.size());
  for (const auto& w : w_per_iteration) {
    if (w.empty()) throw error("attention_trend: empty attention vector");
    AttentionTrendRow r;
    r.w_min = *std::min_element(w.begin(), w.end());
    r.w_max = *std::max_element(w.begin(), w.end());
    double s = 0.0;
    for (double v : w) s += v;
    r.w_mean = s / static_cast<double>(w.size());
    rows.push_back(r);
  }
  return rows;
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw error("median: empty input");
  std::sort(v.begin(), v.end());
  std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace tameta
