// Acceptance runner: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "strucemb/aggregate.hpp"
#include "strucemb/bench.hpp"
#include "strucemb/dense_oracle.hpp"
#include "strucemb/encoder.hpp"
#include "strucemb/eval.hpp"
#include "strucemb/instructions.hpp"
#include "strucemb/rng.hpp"
#include "strucemb/synthetic.hpp"
#include "strucemb/task.hpp"

using namespace strucemb;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

ModelConfig toy(std::uint64_t seed, std::size_t max_pos = 512) {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 4;
  c.d_model = 64;
  c.max_pos = max_pos;
  c.seed = seed;
  return c;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

std::string random_segment(Rng& rng, std::size_t max_tokens) {
  const std::size_t tokens = 1 + rng.below(max_tokens);
  return synthetic::random_text(rng, tokens - 1);
}

// 1. Parallel encoding against the joint block-masked computation.
Outcome dense_equivalence() {
  double worst = 0.0;
  Rng rng(1001);
  for (int c = 0; c < 50; ++c) {
    const Weights w = init_weights(toy(static_cast<std::uint64_t>(c)));
    const Encoder enc(w);
    const std::size_t n = std::vector<std::size_t>{1, 2, 4}[static_cast<std::size_t>(c) % 3];
    const std::size_t l_ctx = 32;
    std::vector<std::string> ctx;
    for (std::size_t i = 0; i < n; ++i) ctx.push_back(random_segment(rng, 32));
    const std::string target = random_segment(rng, 32);
    std::vector<KVCacheEntry> caches;
    std::vector<TokenBlock> blocks;
    for (std::size_t i = 0; i < n; ++i) {
      caches.push_back(enc.build_context_cache("c" + std::to_string(i), ctx[i], l_ctx));
      const auto t = tokenize(ctx[i]);
      blocks.push_back({t, position_range(0, t.size())});
    }
    std::vector<const KVCacheEntry*> refs;
    for (const auto& e : caches) refs.push_back(&e);
    const auto trace = enc.par_trace(refs, target, l_ctx);
    const auto tt = tokenize(target);
    blocks.push_back({tt, position_range(l_ctx, tt.size())});
    const Matrix dense = dense_oracle(w, blocks, parallel_context_mask(n));
    const std::size_t offset = dense.data.size() - trace.target_hidden.data.size();
    for (std::size_t i = 0; i < trace.target_hidden.data.size(); ++i)
      worst = std::max(worst, static_cast<double>(std::abs(trace.target_hidden.data[i] - dense.data[offset + i])));
  }
  return {worst <= 1e-5, "max |par - dense| = " + fmt(worst) + " over 50 cases"};
}

// 2. One cache collapses to the sequential stream with the same gapped positions.
Outcome single_context_collapse() {
  double worst = 0.0;
  Rng rng(2002);
  for (int c = 0; c < 20; ++c) {
    const Weights w = init_weights(toy(100 + static_cast<std::uint64_t>(c)));
    const Encoder enc(w);
    const std::size_t l_ctx = 32;
    const std::string ctx = random_segment(rng, 32);
    const std::string target = random_segment(rng, 32);
    const auto cache = enc.build_context_cache("c", ctx, l_ctx);
    std::vector<const KVCacheEntry*> refs{&cache};
    const auto par = enc.par(refs, target, l_ctx);
    const auto ct = tokenize(ctx);
    const auto tt = tokenize(target);
    std::vector<TokenBlock> blocks{{ct, position_range(0, ct.size())}, {tt, position_range(l_ctx, tt.size())}};
    const auto seq = enc.blocks_trace(blocks).embedding;
    worst = std::max(worst, cosine_distance(par.values, seq.values));
  }
  return {worst <= 1e-5, "max cosine distance = " + fmt(worst) + " over 20 cases"};
}

// 3. Reordering contexts: parallel strategies unmoved, sequential moved.
Outcome order_study() {
  const Weights w = init_weights(toy(3, 1024));
  const Encoder enc(w);
  const auto study = bench::order_sensitivity(enc, 4, 10, 77, 64, instruction_preset("musique").value());
  const double par = study.max_distance.at("par");
  const double distill = study.max_distance.at("par-distill");
  const double seq = study.max_distance.at("seq");
  return {par <= 1e-5 && distill <= 1e-5 && seq >= 1e-4,
          "max distance par " + fmt(par) + ", par-distill " + fmt(distill) + ", seq " + fmt(seq)};
}

// 4. No related segments: every strategy reduces to the individual encoding.
Outcome empty_context() {
  const Weights w = init_weights(toy(4));
  const Encoder enc(w);
  Rng rng(4004);
  double worst = 0.0;
  for (int i = 0; i < 10; ++i) {
    const std::string text = random_segment(rng, 48);
    auto text_of = [&](const std::string&) -> const std::string& { return text; };
    const auto ind = enc.individual(text).values;
    for (auto s : {Strategy::individual, Strategy::seq, Strategy::par, Strategy::par_distill}) {
      EncodePlan plan;
      plan.strategy = s;
      plan.target_id = "t";
      plan.l_ctx = 64;
      plan.instruction = std::string(instruction_preset("musique").value());
      worst = std::max(worst, cosine_distance(encode(enc, plan, text_of).values, ind));
    }
  }
  return {worst <= 1e-5, "max cosine distance = " + fmt(worst) + " over 10 segments x 4 strategies"};
}

// 5. Position ids stay within L_ctx + t_target regardless of the cache count.
Outcome position_budget() {
  const Weights w = init_weights(toy(5));
  const Encoder enc(w);
  const std::size_t l_ctx = 48;
  Rng rng(5005);
  std::vector<KVCacheEntry> caches;
  for (int i = 0; i < 16; ++i) caches.push_back(enc.build_context_cache("c" + std::to_string(i), random_segment(rng, 48), l_ctx));
  const std::string target = "the target segment";
  const std::size_t expected = l_ctx + tokenize(target).size() - 1;
  std::string seen;
  bool ok = true;
  for (std::size_t n : {1u, 4u, 16u}) {
    std::vector<const KVCacheEntry*> refs;
    for (std::size_t i = 0; i < n; ++i) refs.push_back(&caches[i]);
    const auto trace = enc.par_trace(refs, target, l_ctx);
    ok = ok && trace.max_position == expected;
    seen += (seen.empty() ? "" : ", ") + std::to_string(trace.max_position);
  }
  return {ok, "max position ids " + seen + " (expected " + std::to_string(expected) + ")"};
}

// 6. Wall-time growth with the number of contexts.
Outcome complexity_shape() {
  const Weights w = init_weights(toy(6, 2048));
  const Encoder enc(w);
  const std::vector<std::size_t> ns{1, 16};
  const std::vector<std::size_t> lengths{32};
  const auto rows = bench::time_strategies(enc, ns, lengths, 5, 606, instruction_preset("musique").value());
  std::map<std::pair<std::string, std::size_t>, double> t;
  for (const auto& r : rows) t[{r.strategy, r.n_contexts}] = r.median_seconds;
  auto ratio = [&](const std::string& s) {
    return t.at(std::make_pair(s, std::size_t{16})) / t.at(std::make_pair(s, std::size_t{1}));
  };
  const double par_ratio = ratio("par");
  const double seq_ratio = ratio("seq");
  return {par_ratio <= 2.5 && seq_ratio >= 4.0,
          "par n=16/n=1 = " + fmt(par_ratio) + ", seq n=16/n=1 = " + fmt(seq_ratio)};
}

// The planted alpha fixture: MRR over four queries is maximal only at 0.26.
double planted_mrr(double alpha) {
  constexpr std::size_t d = 12;
  auto e = [](std::size_t i) {
    std::vector<float> v(d, 0.0f);
    v[i] = 1.0f;
    return v;
  };
  auto mix = [&](std::size_t i, double ci, std::size_t j) {
    std::vector<float> v(d, 0.0f);
    v[i] = static_cast<float>(ci);
    v[j] = static_cast<float>(std::sqrt(1.0 - ci * ci));
    return v;
  };
  // Query 1 prefers structure: its relevant item's cosine rises with alpha and
  // overtakes the distractor just above alpha = 0.25.
  const double c1 = 0.25 / std::sqrt(0.75 * 0.75 + 0.25 * 0.25) + 1e-4;
  // Query 2 prefers content: its relevant item's cosine falls with alpha and
  // drops below the distractor at alpha = 0.27.
  const double c2 = 0.73 / std::sqrt(0.73 * 0.73 + 0.27 * 0.27) + 1e-4;
  std::map<std::string, std::pair<std::vector<float>, std::vector<float>>> parts{
      {"r1", {e(1), e(0)}}, {"d1", {mix(0, c1, 2), mix(0, c1, 2)}}, {"r2", {e(3), e(4)}},
      {"d2", {mix(3, c2, 5), mix(3, c2, 5)}}, {"r3", {e(6), e(6)}}, {"r4", {e(9), e(9)}}};
  std::map<std::string, std::vector<float>> vecs{{"q1", e(0)}, {"q2", e(3)}, {"q3", e(6)}, {"q4", e(9)}};
  for (const auto& [id, p] : parts) vecs[id] = balance(p.first, p.second, {alpha, true, true}).values;

  EvalTask task;
  task.kind = TaskKind::retrieval_global;
  task.metrics = {"mrr"};
  for (const char* q : {"q1", "q2", "q3", "q4"}) task.queries.push_back({q, {}, std::string(q)});
  task.candidates = {"r1", "d1", "r2", "d2", "r3", "r4"};
  task.qrels = {{"q1", {"r1"}}, {"q2", {"r2"}}, {"q3", {"r3"}}, {"q4", {"r4"}}};
  EmbeddingSource src;
  src.by_id = [&](std::string_view id) -> const std::vector<float>* { return &vecs.at(std::string(id)); };
  return run_task(task, src).metrics.at("mrr");
}

// 7. Pooling, balancing and the alpha search.
Outcome aggregation() {
  std::vector<std::string> failures;
  Rng rng(7007);
  std::vector<float> t(16), h(16);
  for (auto& x : t) x = static_cast<float>(rng.normal());
  for (auto& x : h) x = static_cast<float>(rng.normal());
  const auto hn = normalized(h, "h");
  const std::vector<std::vector<float>> one{hn};
  if (weighted_pool(t, one).values != hn) failures.push_back("singleton");

  const std::vector<float> target{1, 0};
  const std::vector<std::vector<float>> pair{{1, 0}, {0, 1}};
  const auto sw = softmax_cosine_weights(target, pair);
  if (std::abs(sw[0] - 0.7311) > 1e-4 || std::abs(sw[1] - 0.2689) > 1e-4) failures.push_back("softmax weights");

  const auto a = normalized(t, "a");
  if (balance(a, hn, {0.0, true, true}).values != a || balance(a, hn, {1.0, true, true}).values != hn)
    failures.push_back("balance endpoints");

  const auto search = grid_search_alpha(planted_mrr, 0.02);
  if (search.best_alpha != 0.26) failures.push_back("alpha* = " + fmt(search.best_alpha));
  std::string detail = "weights {" + fmt(sw[0]) + ", " + fmt(sw[1]) + "}, alpha* = " + fmt(search.best_alpha);
  for (const auto& f : failures) detail += "; failed: " + f;
  return {failures.empty(), detail};
}

// 8. Metric oracles.
Outcome metric_oracles() {
  std::vector<std::string> failures;
  const std::vector<std::string> r3{"x", "y", "a"};
  if (ndcg_at_k(r3, {"a"}, 10) != 0.5) failures.push_back("ndcg");
  const std::vector<std::string> bac{"b", "a", "c"};
  if (mrr(bac, {"a"}) != 0.5) failures.push_back("mrr");
  const std::vector<std::string> labels{"a", "a", "b", "b"};
  const std::vector<int> perfect{0, 0, 1, 1}, collapsed{0, 0, 0, 0}, mixed{0, 0, 1, 0};
  if (v_measure<std::string, int>(labels, perfect).v != 1.0) failures.push_back("v perfect");
  if (v_measure<std::string, int>(labels, collapsed).v != 0.0) failures.push_back("v collapsed");
  const auto vm = v_measure<std::string, int>(labels, mixed);
  const double diff = std::max({std::abs(vm.homogeneity - 0.31127812445913283),
                                std::abs(vm.completeness - 0.3836885465963443), std::abs(vm.v - 0.34371101848545077)});
  if (diff > 1e-9) failures.push_back("contingency entropies off by " + fmt(diff));
  std::string detail = "v_measure reference diff " + fmt(diff);
  for (const auto& f : failures) detail += "; failed: " + f;
  return {failures.empty(), detail};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// 9. Committed fixtures through the command-line tool.
Outcome fixtures() {
  const fs::path root = STRUCEMB_FIXTURE_DIR;
  const fs::path scratch = fs::temp_directory_path() / ("strucemb_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(scratch);
  std::vector<std::string> failures;
  std::size_t runs = 0;
  for (const char* name : {"tiny-wiki", "tiny-shop", "tiny-posts"}) {
    const fs::path fx = root / name;
    const std::string expected = slurp(fx / "expected_report.json");
    for (int rep = 0; rep < 2; ++rep)
      for (int workers : {1, 4}) {
        const auto emb = scratch / (std::string(name) + ".jsonl");
        const auto out = scratch / (std::string(name) + ".report.json");
        const std::string common = "--config " + (fx / "config.json").string() + " --corpus " +
                                   (fx / "corpus.jsonl").string() + " --task " + (fx / "task.jsonl").string();
        const std::string cmd = std::string(STRUCEMB_CLI) + " embed " + common + " --workers " +
                                std::to_string(workers) + " -o " + emb.string() + " && " + STRUCEMB_CLI + " eval " +
                                common + " --embeddings " + emb.string() + " -o " + out.string();
        ++runs;
        if (std::system(cmd.c_str()) != 0) {
          failures.push_back(std::string(name) + " command failed");
          continue;
        }
        const auto report = nlohmann::json::parse(slurp(out)).at("report").dump(2) + "\n";
        if (report != expected)
          failures.push_back(std::string(name) + " run " + std::to_string(rep) + " workers " + std::to_string(workers));
      }
  }
  fs::remove_all(scratch);
  std::string detail = std::to_string(runs - failures.size()) + "/" + std::to_string(runs) + " runs byte-identical";
  for (const auto& f : failures) detail += "; mismatch: " + f;
  return {failures.empty(), detail};
}

// 10. Planted-context length study: the Seq - Par gap must not grow.
Outcome length_study() {
  const Weights w = init_weights(toy(0, 1024));
  const Encoder enc(w);
  const std::vector<std::size_t> lengths{64, 128, 256, 512};
  const auto rows = bench::length_scaling(enc, lengths, 16, 4, 7, 0, 4);
  std::map<std::size_t, std::map<std::string, double>> ndcg;
  for (const auto& r : rows) ndcg[r.segment_tokens][r.strategy] = r.ndcg_at_10;
  std::vector<double> gaps;
  for (auto L : lengths) gaps.push_back(ndcg[L]["seq"] - ndcg[L]["par"]);
  bool ok = true;
  std::string detail = "seq - par nDCG@10 gap:";
  for (std::size_t i = 0; i < gaps.size(); ++i) {
    detail += " L=" + std::to_string(lengths[i]) + ":" + fmt(gaps[i]);
    if (i > 0 && gaps[i] > gaps[i - 1]) ok = false;
  }
  return {ok, detail};
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    double budget_seconds;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {1, "dense-oracle equivalence", 30, dense_equivalence},
      {2, "single-context collapse", 10, single_context_collapse},
      {3, "order invariance vs sensitivity", 20, order_study},
      {4, "empty-context reduction", 5, empty_context},
      {5, "position budget", 5, position_budget},
      {6, "complexity shape", 120, complexity_shape},
      {7, "aggregation and balancing", 5, aggregation},
      {8, "metric oracles", 5, metric_oracles},
      {9, "end-to-end fixtures", 60, fixtures},
      {10, "length-study direction", 300, length_study},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = secs < c.budget_seconds;
    const bool pass = o.pass && in_time;
    if (!pass) ++failed;
    std::printf("criterion %2d %-34s %s  %s  [%.2fs / %.0fs%s]\n", c.id, c.name, pass ? "PASS" : "FAIL",
                o.detail.c_str(), secs, c.budget_seconds, in_time ? "" : ", over budget");
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
