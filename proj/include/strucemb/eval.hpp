#ifndef STRUCEMB_EVAL_HPP
#define STRUCEMB_EVAL_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "strucemb/aggregate.hpp"
#include "strucemb/error.hpp"
#include "strucemb/rng.hpp"
#include "strucemb/tensor.hpp"

namespace strucemb {

/// Pairwise (cascade) summation; the result depends only on the order of
/// `values`, and error grows as O(log n).
inline double pairwise_sum(std::span<const double> values) {
  if (values.size() <= 8) {
    double s = 0.0;
    for (double v : values) s += v;
    return s;
  }
  const std::size_t half = values.size() / 2;
  return pairwise_sum(values.first(half)) + pairwise_sum(values.subspan(half));
}

inline double mean_of(std::span<const double> values) {
  return values.empty() ? 0.0 : pairwise_sum(values) / static_cast<double>(values.size());
}

struct Candidate {
  std::string id;
  std::vector<float> embedding;
};

/// Candidate ids by descending cosine to the query, ties by ascending id.
inline std::vector<std::string> rank_candidates(std::span<const float> query, std::span<const Candidate> candidates) {
  std::vector<std::pair<double, const std::string*>> scored;
  scored.reserve(candidates.size());
  for (const auto& c : candidates) scored.emplace_back(cosine(query, c.embedding), &c.id);
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return *a.second < *b.second;
  });
  std::vector<std::string> out;
  out.reserve(scored.size());
  for (const auto& [score, id] : scored) out.push_back(*id);
  return out;
}

using RelevantSet = std::set<std::string>;

/// Binary-relevance nDCG@k; 0 when nothing is relevant.
inline double ndcg_at_k(std::span<const std::string> ranking, const RelevantSet& relevant, std::size_t k) {
  if (relevant.empty() || k == 0) return 0.0;
  double dcg = 0.0;
  for (std::size_t i = 0; i < std::min(k, ranking.size()); ++i)
    if (relevant.contains(ranking[i])) dcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
  double idcg = 0.0;
  for (std::size_t i = 0; i < std::min(k, relevant.size()); ++i) idcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
  return dcg / idcg;
}

inline std::size_t hits_in_top_k(std::span<const std::string> ranking, const RelevantSet& relevant, std::size_t k) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < std::min(k, ranking.size()); ++i)
    if (relevant.contains(ranking[i])) ++hits;
  return hits;
}

inline double recall_at_k(std::span<const std::string> ranking, const RelevantSet& relevant, std::size_t k) {
  if (relevant.empty()) return 0.0;
  return static_cast<double>(hits_in_top_k(ranking, relevant, k)) / static_cast<double>(relevant.size());
}

inline double hit_at_k(std::span<const std::string> ranking, const RelevantSet& relevant, std::size_t k) {
  return hits_in_top_k(ranking, relevant, k) > 0 ? 1.0 : 0.0;
}

/// Reciprocal rank of the first relevant item over the full ranking.
inline double mrr(std::span<const std::string> ranking, const RelevantSet& relevant) {
  for (std::size_t i = 0; i < ranking.size(); ++i)
    if (relevant.contains(ranking[i])) return 1.0 / static_cast<double>(i + 1);
  return 0.0;
}

// --- classification by class centroid ---

using Centroids = std::map<std::string, std::vector<float>>;

/// Renormalized mean embedding per class.
inline Centroids class_centroids(std::span<const std::pair<std::string, std::vector<float>>> labeled) {
  std::map<std::string, std::vector<std::vector<float>>> by_class;
  for (const auto& [label, emb] : labeled) by_class[label].push_back(emb);
  Centroids out;
  for (const auto& [label, members] : by_class) {
    if (members.empty()) fail(ErrorCode::invalid_argument, "class '" + label + "' has no examples");
    out.emplace(label, mean_pool(members).values);
  }
  return out;
}

/// Nearest centroid by cosine; ties go to the smaller class name.
inline std::string classify(std::span<const float> embedding, const Centroids& centroids) {
  if (centroids.empty()) fail(ErrorCode::invalid_argument, "no class centroids");
  const std::string* best = nullptr;
  double best_score = -std::numeric_limits<double>::infinity();
  for (const auto& [label, c] : centroids) {
    const double s = cosine(embedding, c);
    if (best == nullptr || s > best_score) {
      best = &label;
      best_score = s;
    }
  }
  return *best;
}

inline double accuracy(std::span<const std::string> truth, std::span<const std::string> predicted) {
  if (truth.size() != predicted.size()) fail(ErrorCode::invalid_argument, "label count mismatch");
  if (truth.empty()) return 0.0;
  std::size_t ok = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) ok += truth[i] == predicted[i];
  return static_cast<double>(ok) / static_cast<double>(truth.size());
}

/// Unweighted mean of per-class F1 over every class seen in truth or predictions.
inline double macro_f1(std::span<const std::string> truth, std::span<const std::string> predicted) {
  if (truth.size() != predicted.size()) fail(ErrorCode::invalid_argument, "label count mismatch");
  std::set<std::string> classes(truth.begin(), truth.end());
  classes.insert(predicted.begin(), predicted.end());
  std::vector<double> f1s;
  for (const auto& c : classes) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
      const bool t = truth[i] == c;
      const bool p = predicted[i] == c;
      tp += t && p;
      fp += !t && p;
      fn += t && !p;
    }
    const std::size_t denom = 2 * tp + fp + fn;
    f1s.push_back(denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom));
  }
  return mean_of(f1s);
}

// --- clustering ---

struct KMeansResult {
  std::vector<std::size_t> assignments;
  std::vector<std::vector<double>> centroids;
  double inertia = 0.0;
  std::size_t iterations = 0;
};

namespace detail {

inline double squared_distance(std::span<const float> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    s += d * d;
  }
  return s;
}

}  // namespace detail

/// k-means++ seeding followed by Lloyd iterations; stops when no centroid
/// moves by `tol` or more. An empty cluster keeps its previous centroid.
inline KMeansResult kmeans(std::span<const std::vector<float>> points, std::size_t k, std::uint64_t seed,
                           std::size_t max_iter = 100, double tol = 1e-6) {
  const std::size_t n = points.size();
  if (k == 0 || k > n) fail(ErrorCode::invalid_argument, "kmeans needs 1 <= k <= number of points");
  const std::size_t d = points.front().size();
  for (const auto& p : points)
    if (p.size() != d) fail(ErrorCode::shape_mismatch, "kmeans points differ in dimension");

  Rng rng(seed);
  KMeansResult r;
  auto as_double = [](std::span<const float> p) { return std::vector<double>(p.begin(), p.end()); };
  r.centroids.push_back(as_double(points[rng.below(n)]));
  std::vector<double> dist(n, std::numeric_limits<double>::infinity());
  while (r.centroids.size() < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      dist[i] = std::min(dist[i], detail::squared_distance(points[i], r.centroids.back()));
      total += dist[i];
    }
    std::size_t pick = n;
    if (total > 0.0) {
      const double target = rng.uniform() * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        acc += dist[i];
        if (dist[i] > 0.0 && acc > target) {
          pick = i;
          break;
        }
      }
      if (pick == n)
        for (std::size_t i = n; i-- > 0;)
          if (dist[i] > 0.0) {
            pick = i;
            break;
          }
    }
    if (pick == n) pick = r.centroids.size() % n;  // all remaining points coincide
    r.centroids.push_back(as_double(points[pick]));
  }

  r.assignments.assign(n, 0);
  for (r.iterations = 1; r.iterations <= max_iter; ++r.iterations) {
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double dd = detail::squared_distance(points[i], r.centroids[c]);
        if (dd < best) {
          best = dd;
          r.assignments[i] = c;
        }
      }
    }
    std::vector<std::vector<double>> sums(k, std::vector<double>(d, 0.0));
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[r.assignments[i]];
      for (std::size_t j = 0; j < d; ++j) sums[r.assignments[i]][j] += points[i][j];
    }
    double shift = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      double moved = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double v = sums[c][j] / static_cast<double>(counts[c]);
        moved += (v - r.centroids[c][j]) * (v - r.centroids[c][j]);
        r.centroids[c][j] = v;
      }
      shift = std::max(shift, std::sqrt(moved));
    }
    if (shift < tol) break;
  }
  r.iterations = std::min(r.iterations, max_iter);
  r.inertia = 0.0;
  for (std::size_t i = 0; i < n; ++i) r.inertia += detail::squared_distance(points[i], r.centroids[r.assignments[i]]);
  return r;
}

struct VMeasure {
  double homogeneity = 0.0;
  double completeness = 0.0;
  double v = 0.0;
};

namespace detail {

// Terms are summed in sorted order so relabeling either side is exact.
inline double sorted_sum(std::vector<double> terms) {
  std::sort(terms.begin(), terms.end());
  double s = 0.0;
  for (double t : terms) s += t;
  return s;
}

}  // namespace detail

/// Homogeneity, completeness and their weighted harmonic mean, from natural-log
/// entropies of the class/cluster contingency table.
template <typename Label, typename Cluster>
VMeasure v_measure(std::span<const Label> labels, std::span<const Cluster> clusters, double beta = 1.0) {
  if (labels.size() != clusters.size() || labels.empty())
    fail(ErrorCode::invalid_argument, "v_measure needs equal, non-empty label and cluster lists");
  const double n = static_cast<double>(labels.size());
  std::map<Label, std::size_t> class_count;
  std::map<Cluster, std::size_t> cluster_count;
  std::map<std::pair<Label, Cluster>, std::size_t> joint;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    ++class_count[labels[i]];
    ++cluster_count[clusters[i]];
    ++joint[{labels[i], clusters[i]}];
  }
  auto entropy = [n](const auto& counts) {
    std::vector<double> terms;
    for (const auto& [key, c] : counts) {
      const double p = static_cast<double>(c) / n;
      terms.push_back(-p * std::log(p));
    }
    return detail::sorted_sum(std::move(terms));
  };
  const double h_c = entropy(class_count);
  const double h_k = entropy(cluster_count);
  std::vector<double> c_given_k;
  std::vector<double> k_given_c;
  for (const auto& [key, c] : joint) {
    const double nc = static_cast<double>(c);
    c_given_k.push_back(-(nc / n) * std::log(nc / static_cast<double>(cluster_count[key.second])));
    k_given_c.push_back(-(nc / n) * std::log(nc / static_cast<double>(class_count[key.first])));
  }
  VMeasure out;
  out.homogeneity = h_c == 0.0 ? 1.0 : 1.0 - detail::sorted_sum(std::move(c_given_k)) / h_c;
  out.completeness = h_k == 0.0 ? 1.0 : 1.0 - detail::sorted_sum(std::move(k_given_c)) / h_k;
  const double denom = beta * out.homogeneity + out.completeness;
  out.v = denom == 0.0 ? 0.0 : (1.0 + beta) * out.homogeneity * out.completeness / denom;
  return out;
}

}  // namespace strucemb

#endif  // STRUCEMB_EVAL_HPP
