#ifndef STRUCEMB_ENCODER_HPP
#define STRUCEMB_ENCODER_HPP

#include <algorithm>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "strucemb/container.hpp"
#include "strucemb/error.hpp"
#include "strucemb/model.hpp"
#include "strucemb/parallel.hpp"

namespace strucemb {

enum class Strategy { individual, seq, par, par_distill };

inline const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::individual: return "individual";
    case Strategy::seq: return "seq";
    case Strategy::par: return "par";
    case Strategy::par_distill: return "par-distill";
  }
  return "?";
}

inline Strategy parse_strategy(std::string_view s) {
  if (s == "individual") return Strategy::individual;
  if (s == "seq") return Strategy::seq;
  if (s == "par") return Strategy::par;
  if (s == "par-distill") return Strategy::par_distill;
  fail(ErrorCode::invalid_argument, "unknown strategy '" + std::string(s) + "'");
}

/// How an over-long concatenation is cut down to the position budget.
///   drop_head:     drop the earliest context tokens, the target stays whole.
///   faithful_tail: keep the first max_pos tokens even if the target is cut.
enum class Truncation { drop_head, faithful_tail };

inline Truncation parse_truncation(std::string_view s) {
  if (s == "drop-head") return Truncation::drop_head;
  if (s == "faithful-tail") return Truncation::faithful_tail;
  fail(ErrorCode::invalid_argument, "unknown truncation policy '" + std::string(s) + "'");
}

inline const char* to_string(Truncation t) {
  return t == Truncation::drop_head ? "drop-head" : "faithful-tail";
}

inline constexpr TokenId kSeparatorToken = '\n';

/// Keys/values of one context segment encoded on its own at positions 0..t-1.
struct KVCacheEntry {
  std::string segment_id;
  LayerKV kv;
  std::size_t token_count = 0;
  std::size_t pe_span = 0;
  std::string fingerprint;

  bool operator==(const KVCacheEntry&) const = default;
};

/// Context caches that share one weights fingerprint and one PE span. Filled
/// once, then only read.
class CacheStore {
 public:
  CacheStore() = default;
  CacheStore(std::string fingerprint, std::size_t l_ctx)
      : fingerprint_(std::move(fingerprint)), l_ctx_(l_ctx) {}

  void insert(KVCacheEntry entry) {
    if (entry.fingerprint != fingerprint_ || entry.pe_span != l_ctx_)
      fail(ErrorCode::cache_mismatch, "cache entry '" + entry.segment_id +
                                          "' was built with different weights or PE span");
    const std::string id = entry.segment_id;
    entries_.insert_or_assign(id, std::move(entry));
  }

  bool contains(std::string_view id) const { return entries_.contains(std::string(id)); }
  const KVCacheEntry& at(std::string_view id) const {
    auto it = entries_.find(std::string(id));
    if (it == entries_.end()) fail(ErrorCode::unknown_id, "no cache entry for '" + std::string(id) + "'");
    return it->second;
  }

  std::vector<const KVCacheEntry*> lookup(std::span<const std::string> ids) const {
    std::vector<const KVCacheEntry*> out;
    out.reserve(ids.size());
    for (const auto& id : ids) out.push_back(&at(id));
    return out;
  }

  const std::map<std::string, KVCacheEntry>& entries() const { return entries_; }
  const std::string& fingerprint() const { return fingerprint_; }
  std::size_t l_ctx() const { return l_ctx_; }
  std::size_t size() const { return entries_.size(); }

  bool operator==(const CacheStore&) const = default;

 private:
  std::string fingerprint_;
  std::size_t l_ctx_ = 0;
  std::map<std::string, KVCacheEntry> entries_;
};

/// A contiguous run of tokens with explicit position ids.
struct TokenBlock {
  std::vector<TokenId> tokens;
  std::vector<std::size_t> positions;
};

/// Result of an encode with the internals tests and benchmarks look at.
struct EncodeTrace {
  Embedding embedding;
  Matrix target_hidden;          // hidden states of the final forward call
  std::size_t max_position = 0;  // largest position id used anywhere
  std::size_t total_tokens = 0;  // tokens visible to the last target token
};

struct SeqOptions {
  std::size_t max_pos = 0;  // 0 = the model's max_pos
  Truncation truncation = Truncation::drop_head;
  bool separator = true;
};

/// Keeps at most `limit` tokens; when cut, the last kept token is EOS.
inline std::vector<TokenId> truncate_tail(std::vector<TokenId> tokens, std::size_t limit) {
  if (limit == 0) fail(ErrorCode::invalid_argument, "token limit must be positive");
  if (tokens.size() > limit) {
    tokens.resize(limit);
    tokens.back() = kEosToken;
  }
  return tokens;
}

/// The four encoding strategies over one set of weights.
class Encoder {
 public:
  explicit Encoder(const Weights& weights) : weights_(weights), fingerprint_(strucemb::fingerprint(weights)) {}

  const Weights& weights() const { return weights_; }
  const std::string& fingerprint() const { return fingerprint_; }
  const ModelConfig& config() const { return weights_.config; }

  Embedding individual(std::string_view text) const {
    const auto tokens = tokenize(text);
    const auto pos = position_range(0, tokens.size());
    Embedding e = pool_last(forward(weights_, tokens, pos).hidden);
    e.strategy = to_string(Strategy::individual);
    return e;
  }

  /// One forward pass over the concatenated blocks, pooled at the last token.
  EncodeTrace blocks_trace(std::span<const TokenBlock> blocks) const {
    std::vector<TokenId> tokens;
    std::vector<std::size_t> positions;
    for (const auto& b : blocks) {
      if (b.tokens.size() != b.positions.size())
        fail(ErrorCode::invalid_argument, "block token and position counts differ");
      tokens.insert(tokens.end(), b.tokens.begin(), b.tokens.end());
      positions.insert(positions.end(), b.positions.begin(), b.positions.end());
    }
    EncodeTrace trace;
    trace.target_hidden = forward(weights_, tokens, positions).hidden;
    trace.embedding = pool_last(trace.target_hidden);
    trace.max_position = positions.empty() ? 0 : *std::max_element(positions.begin(), positions.end());
    trace.total_tokens = tokens.size();
    return trace;
  }

  /// Token stream tok(v_1) sep ... tok(v_n) sep tok(target) at positions 0..T-1.
  EncodeTrace seq_trace(std::span<const std::string> related, std::string_view target,
                        const SeqOptions& options = {}) const {
    const std::size_t max_pos = options.max_pos == 0 ? config().max_pos : options.max_pos;
    if (max_pos > config().max_pos)
      fail(ErrorCode::position_overflow, "seq budget exceeds the model's max_pos");
    std::vector<TokenId> context;
    for (const auto& r : related) {
      const auto t = tokenize(r);
      context.insert(context.end(), t.begin(), t.end());
      if (options.separator) context.push_back(kSeparatorToken);
    }
    std::vector<TokenId> target_tokens = tokenize(target);

    std::vector<TokenId> stream;
    if (context.size() + target_tokens.size() <= max_pos) {
      stream = std::move(context);
      stream.insert(stream.end(), target_tokens.begin(), target_tokens.end());
    } else if (options.truncation == Truncation::drop_head) {
      if (target_tokens.size() > max_pos)
        fail(ErrorCode::position_overflow, "target alone (" + std::to_string(target_tokens.size()) +
                                               " tokens) exceeds max_pos " + std::to_string(max_pos));
      const std::size_t keep = max_pos - target_tokens.size();
      stream.assign(context.end() - static_cast<std::ptrdiff_t>(keep), context.end());
      stream.insert(stream.end(), target_tokens.begin(), target_tokens.end());
    } else {
      stream = std::move(context);
      stream.insert(stream.end(), target_tokens.begin(), target_tokens.end());
      stream.resize(max_pos);
    }
    TokenBlock block{std::move(stream), {}};
    block.positions = position_range(0, block.tokens.size());
    EncodeTrace trace = blocks_trace(std::span(&block, 1));
    trace.embedding.strategy = to_string(Strategy::seq);
    return trace;
  }

  Embedding seq(std::span<const std::string> related, std::string_view target,
                const SeqOptions& options = {}) const {
    return seq_trace(related, target, options).embedding;
  }

  KVCacheEntry build_context_cache(std::string segment_id, std::string_view text, std::size_t l_ctx) const {
    check_span(l_ctx);
    const auto tokens = truncate_tail(tokenize(text), l_ctx);
    const auto pos = position_range(0, tokens.size());
    KVCacheEntry entry;
    entry.segment_id = std::move(segment_id);
    entry.kv = forward(weights_, tokens, pos).kv;
    entry.token_count = tokens.size();
    entry.pe_span = l_ctx;
    entry.fingerprint = fingerprint_;
    return entry;
  }

  /// Builds caches for (id, text) pairs on `workers` threads; the store does
  /// not depend on the worker count.
  CacheStore build_cache_store(std::span<const std::pair<std::string, std::string>> segments,
                               std::size_t l_ctx, std::size_t workers = 1) const {
    check_span(l_ctx);
    std::vector<KVCacheEntry> built(segments.size());
    parallel_for(segments.size(), workers, [&](std::size_t i) {
      built[i] = build_context_cache(segments[i].first, segments[i].second, l_ctx);
    });
    CacheStore store(fingerprint_, l_ctx);
    for (auto& e : built) store.insert(std::move(e));
    return store;
  }

  /// Target at positions [l_ctx, l_ctx + t) attending to every cache and to
  /// itself; caches never see each other.
  EncodeTrace par_trace(std::span<const KVCacheEntry* const> caches, std::string_view target,
                        std::size_t l_ctx) const {
    check_span(l_ctx);
    const PastBag bag = make_bag(caches, l_ctx);
    const auto tokens = truncate_tail(tokenize(target), l_ctx);
    const auto pos = position_range(l_ctx, tokens.size());
    EncodeTrace trace;
    trace.target_hidden = forward(weights_, tokens, pos, bag).hidden;
    trace.embedding = pool_last(trace.target_hidden);
    trace.embedding.strategy = to_string(Strategy::par);
    trace.max_position = pos.back();
    trace.total_tokens = tokens.size() + visible_tokens(bag);
    return trace;
  }

  Embedding par(std::span<const KVCacheEntry* const> caches, std::string_view target, std::size_t l_ctx) const {
    return par_trace(caches, target, l_ctx).embedding;
  }

  /// Instruction tokens at [l_ctx, l_ctx + t_ins) attend to the caches; their
  /// keys/values become the distilled cache. The target follows at
  /// l_ctx + t_ins and attends to caches, distilled cache and itself.
  EncodeTrace par_distill_trace(std::span<const KVCacheEntry* const> caches, std::string_view instruction,
                                std::string_view target, std::size_t l_ctx) const {
    check_span(l_ctx);
    if (instruction.empty()) fail(ErrorCode::invalid_argument, "distillation instruction must be non-empty");
    PastBag bag = make_bag(caches, l_ctx);
    const auto ins_tokens = tokenize(instruction);
    if (ins_tokens.size() > config().max_pos - 2 * l_ctx)
      fail(ErrorCode::position_overflow, "instruction (" + std::to_string(ins_tokens.size()) +
                                             " tokens) exceeds max_pos - 2*l_ctx");
    const auto ins_pos = position_range(l_ctx, ins_tokens.size());
    const LayerKV distilled = forward(weights_, ins_tokens, ins_pos, bag).kv;
    bag.push_back(&distilled);

    const auto tokens = truncate_tail(tokenize(target), l_ctx);
    const auto pos = position_range(l_ctx + ins_tokens.size(), tokens.size());
    EncodeTrace trace;
    trace.target_hidden = forward(weights_, tokens, pos, bag).hidden;
    trace.embedding = pool_last(trace.target_hidden);
    trace.embedding.strategy = to_string(Strategy::par_distill);
    trace.max_position = pos.back();
    trace.total_tokens = tokens.size() + visible_tokens(bag);
    return trace;
  }

  Embedding par_distill(std::span<const KVCacheEntry* const> caches, std::string_view instruction,
                        std::string_view target, std::size_t l_ctx) const {
    return par_distill_trace(caches, instruction, target, l_ctx).embedding;
  }

 private:
  void check_span(std::size_t l_ctx) const {
    if (l_ctx == 0 || 2 * l_ctx > config().max_pos)
      fail(ErrorCode::invalid_argument, "l_ctx must satisfy 0 < l_ctx <= max_pos / 2");
  }

  // Bag order is ascending segment id so results are bit-reproducible for any
  // caller-supplied order.
  PastBag make_bag(std::span<const KVCacheEntry* const> caches, std::size_t l_ctx) const {
    std::vector<const KVCacheEntry*> sorted(caches.begin(), caches.end());
    std::stable_sort(sorted.begin(), sorted.end(),
                     [](const KVCacheEntry* a, const KVCacheEntry* b) { return a->segment_id < b->segment_id; });
    PastBag bag;
    for (const KVCacheEntry* c : sorted) {
      if (c->fingerprint != fingerprint_)
        fail(ErrorCode::cache_mismatch, "cache '" + c->segment_id + "' was built with different weights");
      if (c->pe_span != l_ctx)
        fail(ErrorCode::cache_mismatch, "cache '" + c->segment_id + "' has PE span " +
                                            std::to_string(c->pe_span) + ", expected " + std::to_string(l_ctx));
      bag.push_back(&c->kv);
    }
    return bag;
  }

  static std::size_t visible_tokens(const PastBag& bag) {
    std::size_t n = 0;
    for (const LayerKV* kv : bag) n += kv->token_count();
    return n;
  }

  const Weights& weights_;
  std::string fingerprint_;
};

/// What to encode for one target.
struct EncodePlan {
  Strategy strategy = Strategy::individual;
  std::string target_id;
  std::vector<std::string> related;  // order matters for seq only
  std::size_t max_pos = 0;           // seq budget, 0 = model max_pos
  std::size_t l_ctx = 0;             // par PE span
  Truncation truncation = Truncation::drop_head;
  std::string instruction;           // par-distill only
};

/// Dispatches a plan. With no related segments every strategy reduces to the
/// individual encoding (par still runs, at shifted positions).
template <typename TextLookup>
Embedding encode(const Encoder& enc, const EncodePlan& plan, TextLookup&& text_of,
                 const CacheStore* store = nullptr) {
  const std::string target{text_of(plan.target_id)};
  switch (plan.strategy) {
    case Strategy::individual:
      return enc.individual(target);
    case Strategy::seq: {
      std::vector<std::string> texts;
      for (const auto& id : plan.related) texts.emplace_back(text_of(id));
      return enc.seq(texts, target, SeqOptions{plan.max_pos, plan.truncation, true});
    }
    case Strategy::par:
    case Strategy::par_distill: {
      if (plan.strategy == Strategy::par_distill && plan.related.empty()) {
        Embedding e = enc.individual(target);
        e.strategy = to_string(Strategy::par_distill);
        return e;
      }
      std::vector<KVCacheEntry> local;
      std::vector<const KVCacheEntry*> caches;
      if (store != nullptr) {
        caches = store->lookup(plan.related);
      } else {
        local.reserve(plan.related.size());
        for (const auto& id : plan.related)
          local.push_back(enc.build_context_cache(id, text_of(id), plan.l_ctx));
        for (const auto& c : local) caches.push_back(&c);
      }
      if (plan.strategy == Strategy::par) return enc.par(caches, target, plan.l_ctx);
      return enc.par_distill(caches, plan.instruction, target, plan.l_ctx);
    }
  }
  fail(ErrorCode::invalid_argument, "unhandled strategy");
}

// Persisted stores: a directory holding manifest.json plus one SEMB1
// container per entry.

inline TensorFile cache_entry_to_container(const KVCacheEntry& e) {
  TensorFile file;
  file.meta = {{"kind", "kv_cache"},
               {"segment_id", e.segment_id},
               {"token_count", e.token_count},
               {"pe_span", e.pe_span},
               {"fingerprint", e.fingerprint},
               {"positions", e.kv.positions}};
  for (std::size_t l = 0; l < e.kv.keys.size(); ++l) {
    const auto& k = e.kv.keys[l];
    const auto& v = e.kv.values[l];
    file.tensors.push_back({"layers." + std::to_string(l) + ".keys", {k.rows, k.cols}, k.data});
    file.tensors.push_back({"layers." + std::to_string(l) + ".values", {v.rows, v.cols}, v.data});
  }
  return file;
}

inline KVCacheEntry cache_entry_from_container(const TensorFile& file, std::size_t n_layers) {
  KVCacheEntry e;
  try {
    if (file.meta.at("kind") != "kv_cache") fail(ErrorCode::shape_mismatch, "container is not a KV cache");
    e.segment_id = file.meta.at("segment_id").get<std::string>();
    e.token_count = file.meta.at("token_count").get<std::size_t>();
    e.pe_span = file.meta.at("pe_span").get<std::size_t>();
    e.fingerprint = file.meta.at("fingerprint").get<std::string>();
    e.kv.positions = file.meta.at("positions").get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& ex) {
    fail(ErrorCode::malformed_record, std::string("cache header: ") + ex.what());
  }
  if (e.kv.positions.size() != e.token_count)
    fail(ErrorCode::shape_mismatch, "cache position count disagrees with token count");
  for (std::size_t l = 0; l < n_layers; ++l) {
    for (const char* part : {"keys", "values"}) {
      const std::string name = "layers." + std::to_string(l) + "." + part;
      const NamedTensor* t = file.find(name);
      if (t == nullptr) fail(ErrorCode::layer_mismatch, "cache missing tensor '" + name + "'");
      if (t->shape.size() != 2 || t->shape[0] != e.token_count)
        fail(ErrorCode::shape_mismatch, "cache tensor '" + name + "' has wrong shape");
      Matrix m(t->shape[0], t->shape[1]);
      m.data = t->data;
      (std::string_view(part) == "keys" ? e.kv.keys : e.kv.values).push_back(std::move(m));
    }
  }
  return e;
}

inline void save_cache_store(const CacheStore& store, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest = {{"fingerprint", store.fingerprint()},
                             {"l_ctx", store.l_ctx()},
                             {"entries", nlohmann::json::array()}};
  std::size_t i = 0;
  for (const auto& [id, entry] : store.entries()) {
    char name[32];
    std::snprintf(name, sizeof name, "entry_%06zu.semb", i++);
    write_container(dir / name, cache_entry_to_container(entry));
    manifest["entries"].push_back({{"id", id}, {"file", name}, {"tokens", entry.token_count}});
  }
  write_file_bytes(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline CacheStore load_cache_store(const std::filesystem::path& dir, std::size_t n_layers) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file_bytes(dir / "manifest.json"));
    CacheStore store(manifest.at("fingerprint").get<std::string>(), manifest.at("l_ctx").get<std::size_t>());
    for (const auto& item : manifest.at("entries")) {
      KVCacheEntry e = cache_entry_from_container(read_container(dir / item.at("file").get<std::string>()), n_layers);
      if (e.segment_id != item.at("id").get<std::string>())
        fail(ErrorCode::cache_mismatch, "manifest id disagrees with cache file " + item.at("file").get<std::string>());
      store.insert(std::move(e));
    }
    return store;
  } catch (const nlohmann::json::exception& ex) {
    fail(ErrorCode::malformed_record, std::string("cache manifest: ") + ex.what());
  }
}

}  // namespace strucemb

#endif  // STRUCEMB_ENCODER_HPP
