#ifndef STRUCEMB_BENCH_HPP
#define STRUCEMB_BENCH_HPP

// Seq vs Par studies: wall time against context count and length, sensitivity
// to the order of related segments, and retrieval quality as segments grow.

#include <algorithm>
#include <chrono>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "strucemb/encoder.hpp"
#include "strucemb/eval.hpp"
#include "strucemb/synthetic.hpp"

namespace strucemb::bench {

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 == 1 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

template <typename Fn>
double median_seconds(std::size_t repeats, Fn&& fn) {
  std::vector<double> times;
  for (std::size_t r = 0; r < repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    times.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  return median(std::move(times));
}

struct TimingRow {
  std::string strategy;
  std::size_t n_contexts = 0;
  std::size_t segment_tokens = 0;
  double median_seconds = 0.0;
};

/// Median wall time per strategy for every (n, L) pair. Context and target
/// segments are L tokens each. Par timings cover the target encode only; the
/// context caches are built beforehand.
inline std::vector<TimingRow> time_strategies(const Encoder& enc, std::span<const std::size_t> ns,
                                              std::span<const std::size_t> lengths, std::size_t repeats,
                                              std::uint64_t seed, std::string_view instruction) {
  std::vector<TimingRow> rows;
  Rng rng(seed);
  for (std::size_t length : lengths) {
    const std::size_t bytes = length > 1 ? length - 1 : 0;
    for (std::size_t n : ns) {
      const std::string target = synthetic::random_text(rng, bytes);
      std::vector<std::string> contexts;
      for (std::size_t j = 0; j < n; ++j) contexts.push_back(synthetic::random_text(rng, bytes));
      std::vector<KVCacheEntry> caches;
      for (std::size_t j = 0; j < n; ++j)
        caches.push_back(enc.build_context_cache("ctx" + std::to_string(j), contexts[j], length));
      std::vector<const KVCacheEntry*> refs;
      for (const auto& c : caches) refs.push_back(&c);

      rows.push_back({"individual", n, length, median_seconds(repeats, [&] { (void)enc.individual(target); })});
      rows.push_back({"seq", n, length, median_seconds(repeats, [&] { (void)enc.seq(contexts, target); })});
      rows.push_back({"par", n, length, median_seconds(repeats, [&] { (void)enc.par(refs, target, length); })});
      if (tokenize(instruction).size() + 2 * length <= enc.config().max_pos)
        rows.push_back({"par-distill", n, length, median_seconds(repeats, [&] {
                          (void)enc.par_distill(refs, instruction, target, length);
                        })});
    }
  }
  return rows;
}

struct OrderStudy {
  std::vector<std::vector<std::size_t>> permutations;
  struct Row {
    std::string strategy;
    std::size_t perm_a = 0;
    std::size_t perm_b = 0;
    double cosine_distance = 0.0;
  };
  std::vector<Row> rows;
  std::map<std::string, double> max_distance;
};

/// Encodes one target with `n_contexts` related segments under several
/// orderings (the first is the identity) and reports every pairwise cosine
/// distance per strategy.
inline OrderStudy order_sensitivity(const Encoder& enc, std::size_t n_contexts, std::size_t n_permutations,
                                    std::uint64_t seed, std::size_t l_ctx, std::string_view instruction,
                                    std::size_t context_bytes = 48) {
  Rng rng(seed);
  const std::string target = synthetic::random_text(rng, context_bytes);
  std::vector<std::string> contexts;
  for (std::size_t j = 0; j < n_contexts; ++j) contexts.push_back(synthetic::random_text(rng, context_bytes));
  std::vector<KVCacheEntry> caches;
  for (std::size_t j = 0; j < n_contexts; ++j)
    caches.push_back(enc.build_context_cache("ctx" + std::to_string(j), contexts[j], l_ctx));

  OrderStudy study;
  std::vector<std::size_t> perm(n_contexts);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t p = 0; p < n_permutations; ++p) {
    study.permutations.push_back(perm);
    rng.shuffle(perm.begin(), perm.end());
  }

  std::map<std::string, std::vector<std::vector<float>>> embs;
  for (const auto& order : study.permutations) {
    std::vector<std::string> ordered;
    std::vector<const KVCacheEntry*> refs;
    for (auto j : order) {
      ordered.push_back(contexts[j]);
      refs.push_back(&caches[j]);
    }
    embs["seq"].push_back(enc.seq(ordered, target).values);
    embs["par"].push_back(enc.par(refs, target, l_ctx).values);
    embs["par-distill"].push_back(enc.par_distill(refs, instruction, target, l_ctx).values);
  }
  for (const auto& [strategy, list] : embs) {
    double worst = 0.0;
    for (std::size_t a = 0; a < list.size(); ++a)
      for (std::size_t b = a + 1; b < list.size(); ++b) {
        const double dist = cosine_distance(list[a], list[b]);
        study.rows.push_back({strategy, a, b, dist});
        worst = std::max(worst, dist);
      }
    study.max_distance[strategy] = worst;
  }
  return study;
}

struct LengthRow {
  std::size_t segment_tokens = 0;
  std::string strategy;
  double ndcg_at_10 = 0.0;
  double mrr = 0.0;
};

/// Planted-context retrieval at each segment length, for individual, seq
/// (drop-head truncation at `seq_max_pos`) and par (L_ctx = segment length).
inline std::vector<LengthRow> length_scaling(const Encoder& enc, std::span<const std::size_t> lengths,
                                             std::size_t n_queries, std::size_t n_contexts, std::uint64_t seed,
                                             std::size_t seq_max_pos = 0, std::size_t workers = 1) {
  std::vector<LengthRow> rows;
  for (std::size_t length : lengths) {
    const auto fx = synthetic::planted_retrieval(n_queries, n_contexts, length, seed);
    const std::size_t n = fx.items.size();
    std::vector<std::vector<float>> queries(n);
    std::map<std::string, std::vector<Candidate>> pools;
    for (const char* s : {"individual", "seq", "par"}) pools[s].resize(n);
    parallel_for(n, workers, [&](std::size_t i) {
      const auto& item = fx.items[i];
      const std::string id = "t" + std::to_string(i);
      queries[i] = enc.individual(item.query_text).values;
      pools.at("individual")[i] = {id, enc.individual(item.target_text).values};
      pools.at("seq")[i] = {id, enc.seq(item.contexts, item.target_text,
                                     SeqOptions{seq_max_pos, Truncation::drop_head, true}).values};
      std::vector<KVCacheEntry> caches;
      for (std::size_t j = 0; j < item.contexts.size(); ++j)
        caches.push_back(enc.build_context_cache("c" + std::to_string(j), item.contexts[j], length));
      std::vector<const KVCacheEntry*> refs;
      for (const auto& c : caches) refs.push_back(&c);
      pools.at("par")[i] = {id, enc.par(refs, item.target_text, length).values};
    });
    for (const char* s : {"individual", "seq", "par"}) {
      std::vector<double> nd, rr;
      for (std::size_t i = 0; i < n; ++i) {
        const auto ranking = rank_candidates(queries[i], pools.at(s));
        const RelevantSet rel{"t" + std::to_string(i)};
        nd.push_back(ndcg_at_k(ranking, rel, 10));
        rr.push_back(mrr(ranking, rel));
      }
      rows.push_back({length, s, mean_of(nd), mean_of(rr)});
    }
  }
  return rows;
}

}  // namespace strucemb::bench

#endif  // STRUCEMB_BENCH_HPP
