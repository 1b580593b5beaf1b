#ifndef STRUCEMB_PIPELINE_HPP
#define STRUCEMB_PIPELINE_HPP

// Corpus-level embedding runs shared by the command-line tool and the
// end-to-end tests: neighbor selection, cache building, per-target encoding,
// semantic balancing, and the embedding file format.

#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"
#include "strucemb/aggregate.hpp"
#include "strucemb/corpus.hpp"
#include "strucemb/encoder.hpp"
#include "strucemb/error.hpp"
#include "strucemb/instructions.hpp"
#include "strucemb/model.hpp"
#include "strucemb/parallel.hpp"
#include "strucemb/task.hpp"

namespace strucemb {

struct RunConfig {
  ModelConfig model;
  std::string weights;  // weight file; empty = initialize from model fields
  std::string strategy = "individual";  // individual|seq|par|par-distill|mean|weighted
  std::size_t l_ctx = 256;
  std::size_t seq_max_pos = 0;  // 0 = model max_pos
  std::string truncation = "drop-head";
  std::string selection = "as-given";
  std::size_t k = 5;
  std::string degree_mode = "total";
  double pagerank_damping = 0.85;
  double alpha = 1.0;
  double alpha_step = 0.02;
  std::string instruction = "musique";
  std::size_t workers = 1;
  std::string cache_dir;
  std::string corpus;
  std::string task;
  std::string embeddings;
  std::string out;

  bool is_structural() const { return strategy != "individual"; }

  void validate() const {
    model.validate();
    static const std::set<std::string> strategies{"individual", "seq", "par", "par-distill", "mean", "weighted"};
    if (!strategies.contains(strategy)) fail(ErrorCode::invalid_argument, "unknown strategy '" + strategy + "'");
    parse_truncation(truncation);
    parse_selection(selection);
    if (degree_mode != "total" && degree_mode != "in" && degree_mode != "out")
      fail(ErrorCode::invalid_argument, "degree_mode must be total, in or out");
    if (!(alpha >= 0.0 && alpha <= 1.0)) fail(ErrorCode::invalid_argument, "alpha must lie in [0, 1]");
    if (workers == 0) fail(ErrorCode::invalid_argument, "workers must be positive");
    if ((strategy == "par" || strategy == "par-distill") && (l_ctx == 0 || 2 * l_ctx > model.max_pos))
      fail(ErrorCode::invalid_argument, "l_ctx must satisfy 0 < l_ctx <= max_pos / 2");
  }

  /// Echo of every resolved field, embedded in outputs for provenance.
  /// Worker count and output path are left out: neither changes results.
  nlohmann::json to_json() const {
    return {{"model", model},
            {"weights", weights},
            {"strategy", strategy},
            {"l_ctx", l_ctx},
            {"seq_max_pos", seq_max_pos},
            {"truncation", truncation},
            {"selection", selection},
            {"k", k},
            {"degree_mode", degree_mode},
            {"pagerank_damping", pagerank_damping},
            {"alpha", alpha},
            {"alpha_step", alpha_step},
            {"instruction", instruction},
            {"cache_dir", cache_dir},
            {"corpus", corpus},
            {"task", task},
            {"embeddings", embeddings}};
  }
};

/// Applies a flat JSON object of config fields. Unknown keys and values of
/// the wrong type are usage errors.
inline void apply_config_json(RunConfig& cfg, const nlohmann::json& j) {
  if (!j.is_object()) fail(ErrorCode::invalid_argument, "config must be a JSON object");
  const std::map<std::string, std::function<void(const nlohmann::json&)>> setters{
      {"n_layers", [&](const nlohmann::json& v) { v.get_to(cfg.model.n_layers); }},
      {"n_heads", [&](const nlohmann::json& v) { v.get_to(cfg.model.n_heads); }},
      {"d_model", [&](const nlohmann::json& v) { v.get_to(cfg.model.d_model); }},
      {"vocab", [&](const nlohmann::json& v) { v.get_to(cfg.model.vocab); }},
      {"rope_base", [&](const nlohmann::json& v) { v.get_to(cfg.model.rope_base); }},
      {"max_pos", [&](const nlohmann::json& v) { v.get_to(cfg.model.max_pos); }},
      {"seed", [&](const nlohmann::json& v) { v.get_to(cfg.model.seed); }},
      {"weights", [&](const nlohmann::json& v) { v.get_to(cfg.weights); }},
      {"strategy", [&](const nlohmann::json& v) { v.get_to(cfg.strategy); }},
      {"l_ctx", [&](const nlohmann::json& v) { v.get_to(cfg.l_ctx); }},
      {"seq_max_pos", [&](const nlohmann::json& v) { v.get_to(cfg.seq_max_pos); }},
      {"truncation", [&](const nlohmann::json& v) { v.get_to(cfg.truncation); }},
      {"selection", [&](const nlohmann::json& v) { v.get_to(cfg.selection); }},
      {"k", [&](const nlohmann::json& v) { v.get_to(cfg.k); }},
      {"degree_mode", [&](const nlohmann::json& v) { v.get_to(cfg.degree_mode); }},
      {"pagerank_damping", [&](const nlohmann::json& v) { v.get_to(cfg.pagerank_damping); }},
      {"alpha", [&](const nlohmann::json& v) { v.get_to(cfg.alpha); }},
      {"alpha_step", [&](const nlohmann::json& v) { v.get_to(cfg.alpha_step); }},
      {"instruction", [&](const nlohmann::json& v) { v.get_to(cfg.instruction); }},
      {"workers", [&](const nlohmann::json& v) { v.get_to(cfg.workers); }},
      {"cache_dir", [&](const nlohmann::json& v) { v.get_to(cfg.cache_dir); }},
      {"corpus", [&](const nlohmann::json& v) { v.get_to(cfg.corpus); }},
      {"task", [&](const nlohmann::json& v) { v.get_to(cfg.task); }},
      {"embeddings", [&](const nlohmann::json& v) { v.get_to(cfg.embeddings); }},
      {"out", [&](const nlohmann::json& v) { v.get_to(cfg.out); }},
  };
  for (const auto& [key, value] : j.items()) {
    auto it = setters.find(key);
    if (it == setters.end()) fail(ErrorCode::invalid_argument, "unknown config field '" + key + "'");
    try {
      it->second(value);
    } catch (const nlohmann::json::exception&) {
      fail(ErrorCode::invalid_argument, "config field '" + key + "' has the wrong type");
    }
  }
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::io, "cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::invalid_argument, "config " + path.string() + " is not valid JSON: " + e.what());
  }
  RunConfig cfg;
  apply_config_json(cfg, j);
  return cfg;
}

/// Weights from the configured file, or freshly initialized from the model
/// fields. A weight file must agree with the model fields it is run under.
inline Weights load_or_init_weights(const RunConfig& cfg) {
  if (cfg.weights.empty()) return init_weights(cfg.model);
  Weights w = load_weights(cfg.weights);
  if (!(w.config == cfg.model))
    fail(ErrorCode::shape_mismatch, "weight file " + cfg.weights + " was made for model " +
                                        nlohmann::json(w.config).dump() + ", config says " +
                                        nlohmann::json(cfg.model).dump());
  return w;
}

using VectorTable = std::unordered_map<std::string, std::vector<float>>;

namespace detail {

inline DegreeMode parse_degree_mode(const std::string& s) {
  if (s == "in") return DegreeMode::in;
  if (s == "out") return DegreeMode::out;
  return DegreeMode::total;
}

/// Individual embeddings for `ids`, computed on the worker pool.
inline VectorTable individual_table(const Encoder& enc, const Corpus& corpus, const std::vector<std::string>& ids,
                                    std::size_t workers) {
  std::vector<std::vector<float>> out(ids.size());
  parallel_for(ids.size(), workers, [&](std::size_t i) { out[i] = enc.individual(corpus.at(ids[i]).text).values; });
  VectorTable table;
  for (std::size_t i = 0; i < ids.size(); ++i) table.emplace(ids[i], std::move(out[i]));
  return table;
}

}  // namespace detail

/// Neighborhood of every target under the configured selection.
inline std::map<std::string, Neighborhood> select_neighborhoods(const Encoder& enc, const LoadedCorpus& data,
                                                                const std::vector<std::string>& targets,
                                                                const RunConfig& cfg) {
  const Selection criterion = parse_selection(cfg.selection);
  SelectionInputs inputs;
  inputs.degree_mode = detail::parse_degree_mode(cfg.degree_mode);
  std::map<std::string, double> pr;
  VectorTable embs;
  if (criterion == Selection::pagerank) {
    pr = pagerank(data.graph, cfg.pagerank_damping);
    inputs.pagerank_scores = &pr;
  } else if (criterion == Selection::semantic) {
    std::set<std::string> need(targets.begin(), targets.end());
    for (const auto& t : targets)
      for (const auto& n : data.graph.out_neighbors(t)) need.insert(n);
    embs = detail::individual_table(enc, data.corpus, {need.begin(), need.end()}, cfg.workers);
    inputs.embeddings = &embs;
  }
  std::map<std::string, Neighborhood> out;
  for (const auto& t : targets) out.emplace(t, select_top_k(data.graph, inputs, t, cfg.k, criterion));
  return out;
}

/// Every segment that appears as a selected neighbor, sorted.
inline std::vector<std::string> neighbor_ids(const std::map<std::string, Neighborhood>& hoods) {
  std::set<std::string> ids;
  for (const auto& [t, h] : hoods) ids.insert(h.related.begin(), h.related.end());
  return {ids.begin(), ids.end()};
}

inline CacheStore build_store_for(const Encoder& enc, const Corpus& corpus, const std::vector<std::string>& ids,
                                  std::size_t l_ctx, std::size_t workers) {
  std::vector<std::pair<std::string, std::string>> segs;
  for (const auto& id : ids) segs.emplace_back(id, corpus.at(id).text);
  return enc.build_cache_store(segs, l_ctx, workers);
}

/// Individual and structure-aware vectors per target, before balancing.
struct EmbeddingParts {
  std::vector<std::string> ids;
  VectorTable individual;
  VectorTable structural;  // empty for the individual strategy
};

inline EmbeddingParts embed_parts(const Encoder& enc, const LoadedCorpus& data, const RunConfig& cfg,
                                  std::vector<std::string> targets = {}, const CacheStore* store = nullptr) {
  cfg.validate();
  if (targets.empty())
    for (const auto& s : data.corpus.segments()) targets.push_back(s.id);
  EmbeddingParts parts;
  parts.ids = targets;

  if (!cfg.is_structural()) {
    parts.individual = detail::individual_table(enc, data.corpus, targets, cfg.workers);
    return parts;
  }

  const auto hoods = select_neighborhoods(enc, data, targets, cfg);
  std::set<std::string> ind_ids(targets.begin(), targets.end());
  if (cfg.strategy == "mean" || cfg.strategy == "weighted")
    for (const auto& id : neighbor_ids(hoods)) ind_ids.insert(id);
  parts.individual = detail::individual_table(enc, data.corpus, {ind_ids.begin(), ind_ids.end()}, cfg.workers);

  std::optional<CacheStore> local_store;
  const bool parallel_strategy = cfg.strategy == "par" || cfg.strategy == "par-distill";
  if (parallel_strategy && store == nullptr) {
    local_store = build_store_for(enc, data.corpus, neighbor_ids(hoods), cfg.l_ctx, cfg.workers);
    store = &*local_store;
  }
  if (parallel_strategy && (store->fingerprint() != enc.fingerprint() || store->l_ctx() != cfg.l_ctx))
    fail(ErrorCode::cache_mismatch, "cache store was built with different weights or l_ctx");

  const std::string instruction(resolve_instruction(cfg.instruction));
  std::vector<std::vector<float>> out(targets.size());
  auto text_of = [&data](const std::string& id) -> const std::string& { return data.corpus.at(id).text; };
  parallel_for(targets.size(), cfg.workers, [&](std::size_t i) {
    const auto& hood = hoods.at(targets[i]);
    if (cfg.strategy == "mean" || cfg.strategy == "weighted") {
      if (hood.related.empty()) {
        out[i] = parts.individual.at(targets[i]);
        return;
      }
      std::vector<std::vector<float>> neigh;
      for (const auto& id : hood.related) neigh.push_back(parts.individual.at(id));
      out[i] = cfg.strategy == "mean" ? mean_pool(neigh).values
                                      : weighted_pool(parts.individual.at(targets[i]), neigh).values;
      return;
    }
    EncodePlan plan;
    plan.strategy = parse_strategy(cfg.strategy);
    plan.target_id = targets[i];
    plan.related = hood.related;
    plan.max_pos = cfg.seq_max_pos;
    plan.l_ctx = cfg.l_ctx;
    plan.truncation = parse_truncation(cfg.truncation);
    plan.instruction = instruction;
    out[i] = encode(enc, plan, text_of, store).values;
  });
  for (std::size_t i = 0; i < targets.size(); ++i) parts.structural.emplace(targets[i], std::move(out[i]));
  return parts;
}

struct EmbeddingRecord {
  std::string id;
  Embedding embedding;
};

/// Final embeddings: individual vectors as-is; structural ones balanced with
/// the individual vector at `alpha` (alpha = 1 keeps the structural vector).
inline std::vector<EmbeddingRecord> compose(const EmbeddingParts& parts, const std::string& strategy, double alpha) {
  std::vector<EmbeddingRecord> out;
  for (const auto& id : parts.ids) {
    EmbeddingRecord rec{id, {}};
    if (parts.structural.empty()) {
      rec.embedding = Embedding{parts.individual.at(id), "individual", {}};
    } else {
      rec.embedding = balance(parts.individual.at(id), parts.structural.at(id), BalanceSpec{alpha, true, true});
      rec.embedding.strategy = strategy;
      rec.embedding.alpha = alpha;
    }
    out.push_back(std::move(rec));
  }
  return out;
}

inline std::vector<EmbeddingRecord> embed_corpus(const Encoder& enc, const LoadedCorpus& data, const RunConfig& cfg,
                                                 std::vector<std::string> targets = {},
                                                 const CacheStore* store = nullptr) {
  return compose(embed_parts(enc, data, cfg, std::move(targets), store), cfg.strategy, cfg.alpha);
}

// Embedding file: JSON lines. The first line is a header carrying the
// resolved config; each further line holds one vector as little-endian
// float32 bytes in lowercase hex.

inline std::string vector_to_hex(std::span<const float> v) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(v.size() * 8);
  for (float f : v) {
    const auto bits = std::bit_cast<std::uint32_t>(f);
    for (int b = 0; b < 4; ++b) {
      const auto byte = (bits >> (8 * b)) & 0xffu;
      out.push_back(kHex[byte >> 4]);
      out.push_back(kHex[byte & 0xf]);
    }
  }
  return out;
}

inline std::vector<float> vector_from_hex(std::string_view hex) {
  if (hex.size() % 8 != 0) fail(ErrorCode::malformed_record, "hex vector length is not a multiple of 8");
  auto nibble = [](char c) -> std::uint32_t {
    if (c >= '0' && c <= '9') return static_cast<std::uint32_t>(c - '0');
    if (c >= 'a' && c <= 'f') return static_cast<std::uint32_t>(c - 'a' + 10);
    if (c >= 'A' && c <= 'F') return static_cast<std::uint32_t>(c - 'A' + 10);
    fail(ErrorCode::malformed_record, "invalid hex digit in vector");
  };
  std::vector<float> out(hex.size() / 8);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) {
      const std::uint32_t byte = (nibble(hex[8 * i + 2 * b]) << 4) | nibble(hex[8 * i + 2 * b + 1]);
      bits |= byte << (8 * b);
    }
    out[i] = std::bit_cast<float>(bits);
  }
  return out;
}

inline void write_embeddings(std::ostream& out, const std::vector<EmbeddingRecord>& records,
                             const nlohmann::json& config) {
  const std::size_t dim = records.empty() ? 0 : records.front().embedding.dim();
  out << nlohmann::json{{"type", "header"}, {"config", config}, {"dim", dim}, {"count", records.size()}}.dump() << "\n";
  for (const auto& r : records) {
    nlohmann::json line{{"type", "embedding"},
                        {"id", r.id},
                        {"strategy", r.embedding.strategy},
                        {"alpha", r.embedding.alpha ? nlohmann::json(*r.embedding.alpha) : nlohmann::json(nullptr)},
                        {"vector", vector_to_hex(r.embedding.values)}};
    out << line.dump() << "\n";
  }
}

struct EmbeddingFile {
  nlohmann::json config;
  std::vector<EmbeddingRecord> records;

  VectorTable table() const {
    VectorTable t;
    for (const auto& r : records) t.emplace(r.id, r.embedding.values);
    return t;
  }
};

inline EmbeddingFile read_embeddings(std::istream& in) {
  EmbeddingFile file;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto rec = nlohmann::json::parse(line);
      const auto type = rec.at("type").get<std::string>();
      if (type == "header") {
        file.config = rec.at("config");
      } else if (type == "embedding") {
        EmbeddingRecord r;
        r.id = rec.at("id").get<std::string>();
        r.embedding.strategy = rec.at("strategy").get<std::string>();
        if (!rec.at("alpha").is_null()) r.embedding.alpha = rec.at("alpha").get<double>();
        r.embedding.values = vector_from_hex(rec.at("vector").get<std::string>());
        file.records.push_back(std::move(r));
      } else {
        fail(ErrorCode::malformed_record, "embedding line " + std::to_string(line_no) + ": unknown type");
      }
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::malformed_record, "embedding line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return file;
}

inline EmbeddingFile read_embeddings(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::io, "cannot open embedding file " + path.string());
  return read_embeddings(in);
}

/// Source backed by a vector table, with text queries encoded individually.
inline EmbeddingSource make_source(const VectorTable& table, const Encoder* enc) {
  EmbeddingSource src;
  src.by_id = [&table](std::string_view id) -> const std::vector<float>* {
    auto it = table.find(std::string(id));
    return it == table.end() ? nullptr : &it->second;
  };
  if (enc != nullptr)
    src.by_text = [enc](std::string_view text) { return enc->individual(text).values; };
  return src;
}

/// Ids of corpus segments a task needs vectors for.
inline std::vector<std::string> task_ids(const EvalTask& task, const Corpus& corpus) {
  std::set<std::string> ids(task.candidates.begin(), task.candidates.end());
  for (const auto& [q, list] : task.per_query) ids.insert(list.begin(), list.end());
  for (const auto& [id, label] : task.labels) ids.insert(id);
  for (const auto& q : task.queries)
    if (!q.text && q.ref) ids.insert(*q.ref);
  std::vector<std::string> out;
  for (const auto& id : ids) {
    if (!corpus.contains(id)) fail(ErrorCode::unknown_id, "task references '" + id + "' which is not in the corpus");
    out.push_back(id);
  }
  return out;
}

struct AlphaSearchReport {
  AlphaSearchResult search;
  std::string metric;
  std::vector<MetricReport> per_point;
};

/// Grid search over alpha, scoring each point by the task's first metric.
inline AlphaSearchReport alpha_search(const Encoder& enc, const LoadedCorpus& data, const RunConfig& cfg,
                                      const EvalTask& task, const CacheStore* store = nullptr) {
  const auto parts = embed_parts(enc, data, cfg, task_ids(task, data.corpus), store);
  AlphaSearchReport report;
  report.metric = task.metrics.front();
  // Text queries do not depend on alpha; encode them once.
  VectorTable query_cache;
  for (const auto& q : task.queries)
    if (q.text) query_cache.emplace(*q.text, enc.individual(*q.text).values);
  report.search = grid_search_alpha(
      [&](double alpha) {
        const auto records = compose(parts, cfg.strategy, alpha);
        VectorTable table;
        for (const auto& r : records) table.emplace(r.id, r.embedding.values);
        EmbeddingSource src = make_source(table, nullptr);
        src.by_text = [&query_cache](std::string_view text) { return query_cache.at(std::string(text)); };
        report.per_point.push_back(run_task(task, src));
        return report.per_point.back().metrics.at(report.metric);
      },
      cfg.alpha_step);
  return report;
}

}  // namespace strucemb

#endif  // STRUCEMB_PIPELINE_HPP
