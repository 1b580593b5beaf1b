#ifndef STRUCEMB_CORPUS_HPP
#define STRUCEMB_CORPUS_HPP

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"
#include "strucemb/error.hpp"
#include "strucemb/tensor.hpp"

namespace strucemb {

struct Segment {
  std::string id;
  std::string text;
  std::optional<std::string> label;
};

class Corpus {
 public:
  /// Throws `duplicate_id` naming the id if it is already present.
  void add(Segment segment) {
    if (segment.id.empty()) fail(ErrorCode::malformed_record, "segment id must be non-empty");
    if (index_.contains(segment.id))
      fail(ErrorCode::duplicate_id, "duplicate segment id '" + segment.id + "'");
    index_.emplace(segment.id, segments_.size());
    segments_.push_back(std::move(segment));
  }

  std::size_t size() const { return segments_.size(); }
  bool empty() const { return segments_.empty(); }
  bool contains(std::string_view id) const { return index_.contains(std::string(id)); }

  const Segment& at(std::string_view id) const {
    auto it = index_.find(std::string(id));
    if (it == index_.end()) fail(ErrorCode::unknown_id, "unknown segment id '" + std::string(id) + "'");
    return segments_[it->second];
  }

  const std::vector<Segment>& segments() const { return segments_; }

 private:
  std::vector<Segment> segments_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Directed relations between segments, stored with insertion-ordered
/// out-adjacency. Self-loops and repeated edges are never stored.
class RelationGraph {
 public:
  RelationGraph() = default;
  explicit RelationGraph(std::vector<std::string> node_ids) {
    for (auto& id : node_ids) add_node(std::move(id));
  }

  void add_node(std::string id) {
    if (index_.contains(id)) return;
    index_.emplace(id, ids_.size());
    ids_.push_back(std::move(id));
    out_.emplace_back();
    in_.emplace_back();
  }

  /// Returns false when the edge was a self-loop or already present.
  bool add_edge(std::string_view source, std::string_view destination) {
    const std::size_t s = index_of(source);
    const std::size_t d = index_of(destination);
    if (s == d) return false;
    if (!edges_.emplace(s, d).second) return false;
    out_[s].push_back(d);
    in_[d].push_back(s);
    return true;
  }

  std::size_t node_count() const { return ids_.size(); }
  std::size_t edge_count() const { return edges_.size(); }
  bool contains(std::string_view id) const { return index_.contains(std::string(id)); }
  const std::vector<std::string>& nodes() const { return ids_; }

  std::size_t index_of(std::string_view id) const {
    auto it = index_.find(std::string(id));
    if (it == index_.end()) fail(ErrorCode::unknown_id, "unknown segment id '" + std::string(id) + "'");
    return it->second;
  }

  const std::string& id_at(std::size_t i) const { return ids_[i]; }
  std::span<const std::size_t> out_indices(std::size_t i) const { return out_[i]; }
  std::span<const std::size_t> in_indices(std::size_t i) const { return in_[i]; }

  std::vector<std::string> out_neighbors(std::string_view id) const {
    std::vector<std::string> out;
    for (auto j : out_[index_of(id)]) out.push_back(ids_[j]);
    return out;
  }

  std::size_t out_degree(std::string_view id) const { return out_[index_of(id)].size(); }
  std::size_t in_degree(std::string_view id) const { return in_[index_of(id)].size(); }
  std::size_t total_degree(std::string_view id) const {
    const auto i = index_of(id);
    return out_[i].size() + in_[i].size();
  }

  /// Edges as (source, destination) ids, sorted.
  std::vector<std::pair<std::string, std::string>> edges() const {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& [s, d] : edges_) out.emplace_back(ids_[s], ids_[d]);
    std::sort(out.begin(), out.end());
    return out;
  }

 private:
  std::vector<std::string> ids_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<std::vector<std::size_t>> out_;
  std::vector<std::vector<std::size_t>> in_;
  std::set<std::pair<std::size_t, std::size_t>> edges_;
};

struct LoadedCorpus {
  Corpus corpus;
  RelationGraph graph;
  std::vector<std::string> warnings;
};

/// Reads one JSON object per line: {"id": str, "text": str, "related": [str],
/// "label": str (optional)}. Blank lines are skipped.
inline LoadedCorpus load_corpus(std::istream& in) {
  LoadedCorpus out;
  std::vector<std::pair<std::string, std::vector<std::string>>> pending;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "line " + std::to_string(line_no);
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      fail(ErrorCode::malformed_record, where + ": not valid JSON");
    }
    if (!rec.is_object()) fail(ErrorCode::malformed_record, where + ": record must be an object");
    Segment seg;
    std::vector<std::string> related;
    try {
      seg.id = rec.at("id").get<std::string>();
      seg.text = rec.at("text").get<std::string>();
      if (rec.contains("related")) related = rec.at("related").get<std::vector<std::string>>();
      if (rec.contains("label") && !rec.at("label").is_null())
        seg.label = rec.at("label").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::malformed_record, where + ": " + e.what());
    }
    if (seg.id.empty()) fail(ErrorCode::malformed_record, where + ": empty id");
    if (out.corpus.contains(seg.id))
      fail(ErrorCode::duplicate_id, where + ": duplicate segment id '" + seg.id + "'");
    pending.emplace_back(seg.id, std::move(related));
    out.corpus.add(std::move(seg));
  }

  for (const auto& s : out.corpus.segments()) out.graph.add_node(s.id);
  for (const auto& [source, related] : pending) {
    for (const auto& dest : related) {
      if (!out.corpus.contains(dest)) {
        out.warnings.push_back("segment '" + source + "' references missing id '" + dest +
                               "'; edge dropped");
        continue;
      }
      if (dest == source) {
        out.warnings.push_back("segment '" + source + "' relates to itself; edge dropped");
        continue;
      }
      out.graph.add_edge(source, dest);
    }
  }
  return out;
}

inline LoadedCorpus load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::io, "cannot open corpus " + path.string());
  return load_corpus(in);
}

enum class Selection { as_given, degree, pagerank, semantic };

inline const char* to_string(Selection s) {
  switch (s) {
    case Selection::as_given: return "as-given";
    case Selection::degree: return "degree";
    case Selection::pagerank: return "pagerank";
    case Selection::semantic: return "semantic";
  }
  return "?";
}

inline Selection parse_selection(std::string_view s) {
  if (s == "as-given") return Selection::as_given;
  if (s == "degree") return Selection::degree;
  if (s == "pagerank") return Selection::pagerank;
  if (s == "semantic") return Selection::semantic;
  fail(ErrorCode::invalid_argument, "unknown neighbor selection '" + std::string(s) + "'");
}

struct Neighborhood {
  std::string target;
  std::vector<std::string> related;
  Selection selection = Selection::as_given;
};

inline Neighborhood neighbors(const RelationGraph& graph, std::string_view id) {
  return {std::string(id), graph.out_neighbors(id), Selection::as_given};
}

/// Power iteration; the mass of nodes without out-edges is spread uniformly.
/// Stops once the L1 change between iterates drops below `tol`.
inline std::map<std::string, double> pagerank(const RelationGraph& graph, double damping = 0.85,
                                              double tol = 1e-10, std::size_t max_iter = 1000) {
  std::map<std::string, double> result;
  const std::size_t n = graph.node_count();
  if (n == 0) return result;
  if (!(damping > 0.0 && damping < 1.0))
    fail(ErrorCode::invalid_argument, "damping must lie in (0, 1)");
  const double inv_n = 1.0 / static_cast<double>(n);
  std::vector<double> rank(n, inv_n);
  std::vector<double> next(n);
  for (std::size_t iter = 0; iter < max_iter; ++iter) {
    double dangling = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      if (graph.out_indices(i).empty()) dangling += rank[i];
    const double base = (1.0 - damping) * inv_n + damping * dangling * inv_n;
    for (std::size_t i = 0; i < n; ++i) {
      double sum = 0.0;
      for (auto j : graph.in_indices(i))
        sum += rank[j] / static_cast<double>(graph.out_indices(j).size());
      next[i] = base + damping * sum;
    }
    double change = 0.0;
    for (std::size_t i = 0; i < n; ++i) change += std::abs(next[i] - rank[i]);
    rank.swap(next);
    if (change < tol) break;
  }
  for (std::size_t i = 0; i < n; ++i) result.emplace(graph.id_at(i), rank[i]);
  return result;
}

enum class DegreeMode { total, in, out };

/// Per-criterion inputs for `select_top_k`. Only the member matching the
/// criterion is consulted.
struct SelectionInputs {
  DegreeMode degree_mode = DegreeMode::total;
  const std::map<std::string, double>* pagerank_scores = nullptr;
  const std::unordered_map<std::string, std::vector<float>>* embeddings = nullptr;
};

/// The k out-neighbors of `id` ranked by the criterion, descending, ties by
/// ascending id.
inline Neighborhood select_top_k(const RelationGraph& graph, const SelectionInputs& inputs,
                                 std::string_view id, std::size_t k, Selection criterion) {
  Neighborhood hood{std::string(id), {}, criterion};
  const auto candidates = graph.out_neighbors(id);
  if (k == 0) return hood;
  if (criterion == Selection::as_given) {
    hood.related.assign(candidates.begin(),
                        candidates.begin() + static_cast<std::ptrdiff_t>(std::min(k, candidates.size())));
    return hood;
  }

  std::span<const float> target_emb;
  if (criterion == Selection::semantic) {
    if (inputs.embeddings == nullptr)
      fail(ErrorCode::invalid_argument, "semantic selection needs embeddings");
    auto it = inputs.embeddings->find(std::string(id));
    if (it == inputs.embeddings->end())
      fail(ErrorCode::unknown_id, "no embedding for target '" + std::string(id) + "'");
    target_emb = it->second;
  }
  if (criterion == Selection::pagerank && inputs.pagerank_scores == nullptr)
    fail(ErrorCode::invalid_argument, "pagerank selection needs scores");

  std::vector<std::pair<double, std::string>> scored;
  for (const auto& c : candidates) {
    double score = 0.0;
    switch (criterion) {
      case Selection::degree:
        score = static_cast<double>(inputs.degree_mode == DegreeMode::in    ? graph.in_degree(c)
                                    : inputs.degree_mode == DegreeMode::out ? graph.out_degree(c)
                                                                            : graph.total_degree(c));
        break;
      case Selection::pagerank: {
        auto it = inputs.pagerank_scores->find(c);
        if (it == inputs.pagerank_scores->end())
          fail(ErrorCode::unknown_id, "no pagerank score for '" + c + "'");
        score = it->second;
        break;
      }
      case Selection::semantic: {
        auto it = inputs.embeddings->find(c);
        if (it == inputs.embeddings->end())
          fail(ErrorCode::unknown_id, "no embedding for neighbor '" + c + "'");
        score = cosine(target_emb, it->second);
        break;
      }
      case Selection::as_given:
        break;
    }
    scored.emplace_back(score, c);
  }
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  for (std::size_t i = 0; i < std::min(k, scored.size()); ++i) hood.related.push_back(scored[i].second);
  return hood;
}

}  // namespace strucemb

#endif  // STRUCEMB_CORPUS_HPP
