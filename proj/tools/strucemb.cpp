#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "strucemb/bench.hpp"
#include "strucemb/corpus.hpp"
#include "strucemb/encoder.hpp"
#include "strucemb/error.hpp"
#include "strucemb/model.hpp"
#include "strucemb/pipeline.hpp"
#include "strucemb/task.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace strucemb;

namespace {

// Command-line values that override fields read from --config.
struct Overrides {
  std::string config;
  std::optional<std::size_t> n_layers, n_heads, d_model, max_pos, l_ctx, seq_max_pos, k, workers;
  std::optional<std::uint64_t> seed;
  std::optional<double> rope_base, alpha, alpha_step, pagerank_damping;
  std::optional<std::string> weights, strategy, truncation, selection, degree_mode, instruction, cache_dir, corpus,
      task, embeddings, out;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--config", config, "Flat JSON config file; flags override its fields");
    cmd->add_option("--n-layers", n_layers);
    cmd->add_option("--n-heads", n_heads);
    cmd->add_option("--d-model", d_model);
    cmd->add_option("--max-pos", max_pos);
    cmd->add_option("--rope-base", rope_base);
    cmd->add_option("--seed", seed, "Weight initialization seed");
    cmd->add_option("--weights", weights, "Weight file (omit to initialize from the model fields)");
    cmd->add_option("--strategy", strategy, "individual|seq|par|par-distill|mean|weighted");
    cmd->add_option("--l-ctx", l_ctx, "Position span reserved per context cache");
    cmd->add_option("--seq-max-pos", seq_max_pos, "Token budget for seq (0 = model max_pos)");
    cmd->add_option("--truncation", truncation, "drop-head|faithful-tail");
    cmd->add_option("--selection", selection, "as-given|degree|pagerank|semantic");
    cmd->add_option("-k,--k", k, "Neighbors kept per target");
    cmd->add_option("--degree-mode", degree_mode, "total|in|out");
    cmd->add_option("--pagerank-damping", pagerank_damping);
    cmd->add_option("--alpha", alpha, "Weight on the structural vector when balancing");
    cmd->add_option("--alpha-step", alpha_step);
    cmd->add_option("--instruction", instruction, "Preset name or literal instruction text");
    cmd->add_option("--workers", workers);
    cmd->add_option("--cache-dir", cache_dir);
    cmd->add_option("--corpus", corpus);
    cmd->add_option("--task", task);
    cmd->add_option("--embeddings", embeddings);
    cmd->add_option("-o,--out", out);
  }

  RunConfig resolve() const {
    RunConfig cfg = config.empty() ? RunConfig{} : load_run_config(config);
    auto set = [](auto& dst, const auto& src) {
      if (src) dst = *src;
    };
    set(cfg.model.n_layers, n_layers);
    set(cfg.model.n_heads, n_heads);
    set(cfg.model.d_model, d_model);
    set(cfg.model.max_pos, max_pos);
    set(cfg.model.rope_base, rope_base);
    set(cfg.model.seed, seed);
    set(cfg.weights, weights);
    set(cfg.strategy, strategy);
    set(cfg.l_ctx, l_ctx);
    set(cfg.seq_max_pos, seq_max_pos);
    set(cfg.truncation, truncation);
    set(cfg.selection, selection);
    set(cfg.k, k);
    set(cfg.degree_mode, degree_mode);
    set(cfg.pagerank_damping, pagerank_damping);
    set(cfg.alpha, alpha);
    set(cfg.alpha_step, alpha_step);
    set(cfg.instruction, instruction);
    set(cfg.workers, workers);
    set(cfg.cache_dir, cache_dir);
    set(cfg.corpus, corpus);
    set(cfg.task, task);
    set(cfg.embeddings, embeddings);
    set(cfg.out, out);
    cfg.validate();
    return cfg;
  }
};

const std::string& need(const std::string& value, const char* flag) {
  if (value.empty()) fail(ErrorCode::invalid_argument, std::string("missing required ") + flag);
  return value;
}

// Writes to the configured output path, or stdout when none is set.
void emit(const RunConfig& cfg, const std::string& text) {
  if (cfg.out.empty()) {
    std::cout << text;
    std::cout.flush();
    return;
  }
  std::ofstream f(cfg.out, std::ios::binary);
  if (!f) fail(ErrorCode::io, "cannot write " + cfg.out);
  f << text;
  if (!f) fail(ErrorCode::io, "write failed for " + cfg.out);
}

std::string csv_header(const RunConfig& cfg) { return "# config=" + cfg.to_json().dump() + "\n"; }

std::string fmt(double v, const char* spec = "%.10g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

int cmd_ingest(const RunConfig& cfg) {
  const auto data = load_corpus(need(cfg.corpus, "--corpus"));
  for (const auto& w : data.warnings) std::cerr << "warning: " << w << "\n";
  std::map<std::size_t, std::size_t> out_hist, in_hist;
  std::size_t labeled = 0;
  for (const auto& s : data.corpus.segments()) {
    ++out_hist[data.graph.out_degree(s.id)];
    ++in_hist[data.graph.in_degree(s.id)];
    if (s.label) ++labeled;
  }
  auto to_json_hist = [](const std::map<std::size_t, std::size_t>& h) {
    json j = json::object();
    for (const auto& [deg, count] : h) j[std::to_string(deg)] = count;
    return j;
  };
  json summary{{"segments", data.corpus.size()},
               {"edges", data.graph.edge_count()},
               {"labeled", labeled},
               {"dropped_edges", data.warnings.size()},
               {"out_degree_histogram", to_json_hist(out_hist)},
               {"in_degree_histogram", to_json_hist(in_hist)}};
  emit(cfg, summary.dump(2) + "\n");
  return 0;
}

int cmd_init_weights(const RunConfig& cfg) {
  const auto w = init_weights(cfg.model);
  save_weights(w, need(cfg.out, "--out"));
  std::cout << json{{"fingerprint", fingerprint(w)}, {"config", cfg.model}}.dump() << "\n";
  return 0;
}

int cmd_build_cache(const RunConfig& cfg) {
  const auto data = load_corpus(need(cfg.corpus, "--corpus"));
  const auto dir = need(cfg.cache_dir, "--cache-dir");
  const auto weights = load_or_init_weights(cfg);
  const Encoder enc(weights);
  std::vector<std::string> targets;
  for (const auto& s : data.corpus.segments()) targets.push_back(s.id);
  const auto hoods = select_neighborhoods(enc, data, targets, cfg);
  const auto store = build_store_for(enc, data.corpus, neighbor_ids(hoods), cfg.l_ctx, cfg.workers);
  save_cache_store(store, dir);
  std::cout << json{{"entries", store.entries().size()}, {"fingerprint", store.fingerprint()}, {"l_ctx", cfg.l_ctx}}
                   .dump()
            << "\n";
  return 0;
}

std::optional<CacheStore> maybe_load_store(const RunConfig& cfg) {
  if (cfg.cache_dir.empty() || !fs::exists(fs::path(cfg.cache_dir) / "manifest.json")) return std::nullopt;
  return load_cache_store(cfg.cache_dir, cfg.model.n_layers);
}

int cmd_embed(const RunConfig& cfg) {
  const auto data = load_corpus(need(cfg.corpus, "--corpus"));
  need(cfg.out, "--out");
  const auto weights = load_or_init_weights(cfg);
  const Encoder enc(weights);
  std::vector<std::string> targets;
  if (!cfg.task.empty()) targets = task_ids(load_task(cfg.task), data.corpus);
  const auto store = maybe_load_store(cfg);
  const auto records = embed_corpus(enc, data, cfg, targets, store ? &*store : nullptr);
  std::ostringstream os;
  write_embeddings(os, records, cfg.to_json());
  emit(cfg, os.str());
  return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& rows_path) {
  const auto task = load_task(need(cfg.task, "--task"));
  const auto file = read_embeddings(need(cfg.embeddings, "--embeddings"));
  const auto table = file.table();
  std::optional<Weights> weights;
  std::optional<Encoder> enc;
  for (const auto& q : task.queries)
    if (q.text) {
      weights = load_or_init_weights(cfg);
      enc.emplace(*weights);
      break;
    }
  const auto report = run_task(task, make_source(table, enc ? &*enc : nullptr));
  json out{{"config", cfg.to_json()}, {"embedding_config", file.config}, {"report", report_to_json(report)}};
  emit(cfg, out.dump(2) + "\n");
  if (!rows_path.empty()) {
    std::ofstream f(rows_path, std::ios::binary);
    if (!f) fail(ErrorCode::io, "cannot write " + rows_path);
    f << report_rows_csv(report);
  }
  return 0;
}

int cmd_alpha_search(const RunConfig& cfg) {
  const auto data = load_corpus(need(cfg.corpus, "--corpus"));
  const auto task = load_task(need(cfg.task, "--task"));
  if (!cfg.is_structural()) fail(ErrorCode::invalid_argument, "alpha search needs a structural strategy");
  const auto weights = load_or_init_weights(cfg);
  const Encoder enc(weights);
  const auto store = maybe_load_store(cfg);
  const auto result = alpha_search(enc, data, cfg, task, store ? &*store : nullptr);
  std::string csv = csv_header(cfg) + "alpha," + result.metric + "\n";
  for (const auto& [alpha, score] : result.search.grid)
    csv += fmt(alpha, "%.4f") + "," + fmt(report_round(score), "%.10f") + "\n";
  emit(cfg, csv);
  std::cout << json{{"best_alpha", result.search.best_alpha},
                    {"metric", result.metric},
                    {"best_score", report_round(result.search.best_score)}}
                   .dump()
            << "\n";
  return 0;
}

struct BenchArgs {
  std::vector<std::size_t> ns{1, 4, 16};
  std::vector<std::size_t> time_lengths{32};
  std::vector<std::size_t> study_lengths{64, 128, 256, 512};
  std::size_t repeats = 5;
  std::size_t perms = 10;
  std::size_t contexts = 4;
  std::size_t queries = 16;
  std::uint64_t bench_seed = 7;
};

int cmd_bench_time(const RunConfig& cfg, const BenchArgs& b) {
  const auto weights = load_or_init_weights(cfg);
  const Encoder enc(weights);
  const auto rows =
      bench::time_strategies(enc, b.ns, b.time_lengths, b.repeats, b.bench_seed, resolve_instruction(cfg.instruction));
  std::string csv = csv_header(cfg) + "strategy,n_contexts,segment_tokens,median_seconds\n";
  for (const auto& r : rows)
    csv += r.strategy + "," + std::to_string(r.n_contexts) + "," + std::to_string(r.segment_tokens) + "," +
           fmt(r.median_seconds, "%.6e") + "\n";
  emit(cfg, csv);
  return 0;
}

int cmd_bench_order(const RunConfig& cfg, const BenchArgs& b) {
  const auto weights = load_or_init_weights(cfg);
  const Encoder enc(weights);
  const auto study =
      bench::order_sensitivity(enc, b.contexts, b.perms, b.bench_seed, cfg.l_ctx, resolve_instruction(cfg.instruction));
  std::string csv = csv_header(cfg) + "strategy,perm_a,perm_b,cosine_distance\n";
  for (const auto& r : study.rows)
    csv += r.strategy + "," + std::to_string(r.perm_a) + "," + std::to_string(r.perm_b) + "," +
           fmt(r.cosine_distance, "%.6e") + "\n";
  emit(cfg, csv);
  json summary = json::object();
  for (const auto& [s, d] : study.max_distance) summary[s] = d;
  std::cout << json{{"max_cosine_distance", summary}}.dump() << "\n";
  return 0;
}

int cmd_bench_length(const RunConfig& cfg, const BenchArgs& b) {
  const auto weights = load_or_init_weights(cfg);
  const Encoder enc(weights);
  const auto rows = bench::length_scaling(enc, b.study_lengths, b.queries, b.contexts, b.bench_seed, cfg.seq_max_pos, cfg.workers);
  std::string csv = csv_header(cfg) + "segment_tokens,strategy,ndcg_at_10,mrr\n";
  for (const auto& r : rows)
    csv += std::to_string(r.segment_tokens) + "," + r.strategy + "," + fmt(r.ndcg_at_10, "%.10f") + "," +
           fmt(r.mrr, "%.10f") + "\n";
  emit(cfg, csv);
  return 0;
}

const char* kind_name(ErrorKind k) {
  switch (k) {
    case ErrorKind::usage: return "usage";
    case ErrorKind::data: return "data";
    case ErrorKind::numeric: return "numeric";
  }
  return "data";
}

int report_error(const char* code, ErrorKind kind, const std::string& message) {
  std::cerr << json{{"error", code}, {"kind", kind_name(kind)}, {"message", message}}.dump() << "\n";
  return static_cast<int>(kind);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"strucemb: structure-aware segment embeddings with a small causal encoder"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  Overrides ov;
  BenchArgs bench;
  std::string rows_path;

  auto* ingest = app.add_subcommand("ingest", "Validate a corpus and print counts and degree histograms");
  auto* init = app.add_subcommand("init-weights", "Write seeded toy-model weights");
  auto* cache = app.add_subcommand("build-cache", "Build the context cache store for all selected neighbors");
  auto* embed = app.add_subcommand("embed", "Embed corpus segments under the configured strategy");
  auto* eval = app.add_subcommand("eval", "Score an embedding file against a task");
  auto* alpha = app.add_subcommand("alpha-search", "Grid-search the balance weight alpha on a task");
  auto* btime = app.add_subcommand("bench-time", "Wall-time per strategy as context count grows");
  auto* border = app.add_subcommand("bench-order", "Cosine drift under context reordering");
  auto* blength = app.add_subcommand("bench-length", "Planted-context retrieval as segments grow");

  for (auto* cmd : {ingest, init, cache, embed, eval, alpha, btime, border, blength}) ov.add_to(cmd);
  eval->add_option("--rows", rows_path, "Also write per-query metric rows as CSV");
  btime->add_option("--ns", bench.ns, "Context counts")->delimiter(',');
  btime->add_option("--lengths", bench.time_lengths, "Segment lengths in tokens")->delimiter(',');
  btime->add_option("--repeats", bench.repeats);
  border->add_option("--perms", bench.perms, "Number of orderings");
  blength->add_option("--lengths", bench.study_lengths, "Segment lengths in tokens")->delimiter(',');
  blength->add_option("--queries", bench.queries);
  for (auto* cmd : {btime, border, blength}) cmd->add_option("--bench-seed", bench.bench_seed);
  for (auto* cmd : {border, blength}) cmd->add_option("--contexts", bench.contexts);

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error("invalid_argument", ErrorKind::usage, e.what());
  }

  try {
    const RunConfig cfg = ov.resolve();
    if (*ingest) return cmd_ingest(cfg);
    if (*init) return cmd_init_weights(cfg);
    if (*cache) return cmd_build_cache(cfg);
    if (*embed) return cmd_embed(cfg);
    if (*eval) return cmd_eval(cfg, rows_path);
    if (*alpha) return cmd_alpha_search(cfg);
    if (*btime) return cmd_bench_time(cfg, bench);
    if (*border) return cmd_bench_order(cfg, bench);
    if (*blength) return cmd_bench_length(cfg, bench);
  } catch (const Error& e) {
    return report_error(to_string(e.code()), e.kind(), e.what());
  } catch (const nlohmann::json::exception& e) {
    return report_error("malformed_record", ErrorKind::data, e.what());
  } catch (const std::exception& e) {
    return report_error("io", ErrorKind::data, e.what());
  }
  return 0;
}
