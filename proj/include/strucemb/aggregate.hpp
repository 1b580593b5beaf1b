#ifndef STRUCEMB_AGGREGATE_HPP
#define STRUCEMB_AGGREGATE_HPP

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "strucemb/error.hpp"
#include "strucemb/model.hpp"
#include "strucemb/tensor.hpp"

namespace strucemb {

namespace detail {

inline void check_same_dim(std::span<const std::vector<float>> vs, std::size_t d) {
  for (const auto& v : vs)
    if (v.size() != d) fail(ErrorCode::shape_mismatch, "embeddings differ in dimension");
}

inline bool is_unit(std::span<const float> v) { return std::abs(l2_norm(v) - 1.0) <= 1e-6; }

// Vectors already within the unit-norm tolerance are kept bit-for-bit.
inline std::vector<float> to_unit(std::span<const float> v, std::string_view what) {
  if (is_unit(v)) return {v.begin(), v.end()};
  return normalized(v, what);
}

}  // namespace detail

/// Elementwise mean, accumulated in double over the inputs in lexicographic
/// order so the result is bit-identical under any input permutation.
inline std::vector<float> mean_raw(std::span<const std::vector<float>> embeddings) {
  if (embeddings.empty()) fail(ErrorCode::invalid_argument, "mean_pool needs at least one embedding");
  const std::size_t d = embeddings.front().size();
  detail::check_same_dim(embeddings, d);
  std::vector<const std::vector<float>*> order;
  for (const auto& e : embeddings) order.push_back(&e);
  std::sort(order.begin(), order.end(), [](const auto* a, const auto* b) { return *a < *b; });
  std::vector<double> acc(d, 0.0);
  for (const auto* e : order)
    for (std::size_t i = 0; i < d; ++i) acc[i] += (*e)[i];
  std::vector<float> out(d);
  const double n = static_cast<double>(embeddings.size());
  for (std::size_t i = 0; i < d; ++i) out[i] = static_cast<float>(acc[i] / n);
  return out;
}

inline Embedding mean_pool(std::span<const std::vector<float>> embeddings) {
  const auto raw = mean_raw(embeddings);
  return Embedding{detail::to_unit(raw, "degenerate mean"), "mean", {}};
}

/// softmax_j cos(target, h_j), no temperature.
inline std::vector<double> softmax_cosine_weights(std::span<const float> target,
                                                  std::span<const std::vector<float>> neighbors) {
  if (neighbors.empty()) fail(ErrorCode::invalid_argument, "weighted_pool needs at least one neighbor");
  detail::check_same_dim(neighbors, target.size());
  std::vector<double> w(neighbors.size());
  double max_c = -INFINITY;
  for (std::size_t j = 0; j < neighbors.size(); ++j) {
    w[j] = cosine(target, neighbors[j]);
    max_c = std::max(max_c, w[j]);
  }
  double z = 0.0;
  for (auto& x : w) {
    x = std::exp(x - max_c);
    z += x;
  }
  for (auto& x : w) x /= z;
  return w;
}

inline Embedding weighted_pool(std::span<const float> target, std::span<const std::vector<float>> neighbors) {
  const auto weights = softmax_cosine_weights(target, neighbors);
  if (neighbors.size() == 1) return Embedding{detail::to_unit(neighbors[0], "degenerate weighted mean"), "weighted", {}};
  std::vector<double> acc(target.size(), 0.0);
  for (std::size_t j = 0; j < neighbors.size(); ++j)
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += weights[j] * neighbors[j][i];
  std::vector<float> out(acc.begin(), acc.end());
  return Embedding{detail::to_unit(out, "degenerate weighted mean"), "weighted", {}};
}

struct BalanceSpec {
  double alpha = 0.5;
  bool normalize_inputs = true;
  bool renormalize_output = true;
};

/// (1 - alpha) * individual + alpha * structural. Inputs already of unit
/// length are used as-is, so the endpoints reproduce their input exactly.
inline Embedding balance(std::span<const float> individual, std::span<const float> structural,
                         const BalanceSpec& spec) {
  if (!(spec.alpha >= 0.0 && spec.alpha <= 1.0))
    fail(ErrorCode::invalid_argument, "alpha must lie in [0, 1]");
  if (individual.size() != structural.size())
    fail(ErrorCode::shape_mismatch, "balance inputs differ in dimension");
  auto prepare = [&spec](std::span<const float> v) {
    if (spec.normalize_inputs) return detail::to_unit(v, "balance input");
    return std::vector<float>(v.begin(), v.end());
  };
  const auto a = prepare(individual);
  const auto b = prepare(structural);
  Embedding out{{}, "balanced", spec.alpha};
  if (spec.alpha == 0.0) {
    out.values = a;
    return out;
  }
  if (spec.alpha == 1.0) {
    out.values = b;
    return out;
  }
  std::vector<float> mix(a.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    mix[i] = static_cast<float>((1.0 - spec.alpha) * a[i] + spec.alpha * b[i]);
  out.values = spec.renormalize_output ? normalized(mix, "degenerate mean") : std::move(mix);
  return out;
}

struct AlphaSearchResult {
  double best_alpha = 0.0;
  double best_score = 0.0;
  std::vector<std::pair<double, double>> grid;  // (alpha, score) for every point
};

/// Evaluates score_fn on {0, step, ..., 1} and returns the best point; ties go
/// to the smaller alpha.
inline AlphaSearchResult grid_search_alpha(const std::function<double(double)>& score_fn, double step = 0.02) {
  if (!(step > 0.0 && step <= 1.0)) fail(ErrorCode::invalid_argument, "alpha step must lie in (0, 1]");
  const double steps_real = 1.0 / step;
  const auto n_steps = static_cast<std::size_t>(std::llround(steps_real));
  if (std::abs(steps_real - static_cast<double>(n_steps)) > 1e-9)
    fail(ErrorCode::invalid_argument, "alpha step must divide 1 evenly");
  AlphaSearchResult result;
  for (std::size_t i = 0; i <= n_steps; ++i) {
    const double alpha = static_cast<double>(i) / static_cast<double>(n_steps);
    const double score = score_fn(alpha);
    if (!std::isfinite(score)) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "score is not finite at alpha=%.4f", alpha);
      fail(ErrorCode::non_finite, buf);
    }
    result.grid.emplace_back(alpha, score);
    if (i == 0 || score > result.best_score) {
      result.best_alpha = alpha;
      result.best_score = score;
    }
  }
  return result;
}

}  // namespace strucemb

#endif  // STRUCEMB_AGGREGATE_HPP
