#ifndef STRUCEMB_TASK_HPP
#define STRUCEMB_TASK_HPP

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "strucemb/error.hpp"
#include "strucemb/eval.hpp"

namespace strucemb {

enum class TaskKind { retrieval_global, ranking_per_query, classification, clustering };

inline const char* to_string(TaskKind k) {
  switch (k) {
    case TaskKind::retrieval_global: return "retrieval-global";
    case TaskKind::ranking_per_query: return "ranking-per-query";
    case TaskKind::classification: return "classification";
    case TaskKind::clustering: return "clustering";
  }
  return "?";
}

inline TaskKind parse_task_kind(std::string_view s) {
  if (s == "retrieval-global") return TaskKind::retrieval_global;
  if (s == "ranking-per-query") return TaskKind::ranking_per_query;
  if (s == "classification") return TaskKind::classification;
  if (s == "clustering") return TaskKind::clustering;
  fail(ErrorCode::invalid_argument, "unknown task kind '" + std::string(s) + "'");
}

/// A metric name such as "ndcg@10", "mrr" or "v_measure".
struct MetricSpec {
  std::string name;
  std::string base;
  std::size_t k = 0;
};

inline MetricSpec parse_metric(std::string_view name) {
  MetricSpec m{std::string(name), std::string(name), 0};
  const auto at = name.find('@');
  if (at != std::string_view::npos) {
    m.base = std::string(name.substr(0, at));
    const std::string digits(name.substr(at + 1));
    if (digits.empty() || digits.find_first_not_of("0123456789") != std::string::npos || std::stoul(digits) == 0)
      fail(ErrorCode::invalid_argument, "metric '" + std::string(name) + "' needs a positive cutoff");
    m.k = std::stoul(digits);
  }
  static const std::set<std::string> with_k{"ndcg", "recall", "hit"};
  static const std::set<std::string> without_k{"mrr", "accuracy", "macro_f1", "v_measure"};
  const bool valid = with_k.contains(m.base) ? m.k > 0 : (without_k.contains(m.base) && at == std::string_view::npos);
  if (!valid)
    fail(ErrorCode::invalid_argument, "unknown metric '" + std::string(name) + "'");
  return m;
}

struct TaskQuery {
  std::string id;
  std::optional<std::string> text;  // encoded individually when present
  std::optional<std::string> ref;   // otherwise an id in the embedding source
};

struct EvalTask {
  TaskKind kind = TaskKind::retrieval_global;
  std::vector<std::string> metrics;
  std::vector<TaskQuery> queries;
  std::vector<std::string> candidates;
  std::map<std::string, std::set<std::string>> qrels;
  std::map<std::string, std::vector<std::string>> per_query;  // ranking-per-query lists
  std::vector<std::pair<std::string, std::string>> labels;    // (id, class), file order
  std::set<std::string> prototypes;                           // ids used to build centroids
  std::uint64_t seed = 0;

  void validate() const {
    if (metrics.empty()) fail(ErrorCode::invalid_argument, "task lists no metrics");
    for (const auto& m : metrics) parse_metric(m);
    switch (kind) {
      case TaskKind::retrieval_global:
      case TaskKind::ranking_per_query: {
        std::set<std::string> pool(candidates.begin(), candidates.end());
        for (const auto& [list_q, list] : per_query) pool.insert(list.begin(), list.end());
        for (const auto& [q, rel] : qrels)
          for (const auto& c : rel)
            if (!pool.contains(c))
              fail(ErrorCode::unknown_id, "qrel for '" + q + "' names unknown candidate '" + c + "'");
        if (kind == TaskKind::ranking_per_query)
          for (const auto& q : queries)
            if (!per_query.contains(q.id))
              fail(ErrorCode::malformed_record, "query '" + q.id + "' has no candidate list");
        break;
      }
      case TaskKind::classification: {
        std::set<std::string> classes;
        for (const auto& [id, c] : labels) classes.insert(c);
        if (classes.size() < 2) fail(ErrorCode::malformed_record, "classification needs at least two classes");
        break;
      }
      case TaskKind::clustering:
        if (labels.empty()) fail(ErrorCode::malformed_record, "clustering task has no labeled items");
        break;
    }
  }
};

/// Line-delimited task records, one JSON object per line:
///   {"type":"task","kind":K,"metrics":[...],"seed":N}
///   {"type":"query","id":Q,"text":T} or {"type":"query","id":Q,"ref":ID}
///   {"type":"candidate","id":ID}
///   {"type":"qrel","query":Q,"candidate":ID}
///   {"type":"list","query":Q,"candidates":[ID,...]}
///   {"type":"label","id":ID,"label":C,"prototype":bool}
inline EvalTask load_task(std::istream& in) {
  EvalTask task;
  bool have_header = false;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "task line " + std::to_string(line_no);
    try {
      const auto rec = nlohmann::json::parse(line);
      const auto type = rec.at("type").get<std::string>();
      if (type == "task") {
        task.kind = parse_task_kind(rec.at("kind").get<std::string>());
        task.metrics = rec.at("metrics").get<std::vector<std::string>>();
        task.seed = rec.value("seed", std::uint64_t{0});
        have_header = true;
      } else if (type == "query") {
        TaskQuery q{rec.at("id").get<std::string>(), {}, {}};
        if (rec.contains("text")) q.text = rec.at("text").get<std::string>();
        if (rec.contains("ref")) q.ref = rec.at("ref").get<std::string>();
        if (!q.text && !q.ref) q.ref = q.id;
        task.queries.push_back(std::move(q));
      } else if (type == "candidate") {
        task.candidates.push_back(rec.at("id").get<std::string>());
      } else if (type == "qrel") {
        task.qrels[rec.at("query").get<std::string>()].insert(rec.at("candidate").get<std::string>());
      } else if (type == "list") {
        task.per_query[rec.at("query").get<std::string>()] = rec.at("candidates").get<std::vector<std::string>>();
      } else if (type == "label") {
        const auto id = rec.at("id").get<std::string>();
        task.labels.emplace_back(id, rec.at("label").get<std::string>());
        if (rec.value("prototype", false)) task.prototypes.insert(id);
      } else {
        fail(ErrorCode::malformed_record, where + ": unknown record type '" + type + "'");
      }
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::malformed_record, where + ": " + e.what());
    }
  }
  if (!have_header) fail(ErrorCode::malformed_record, "task file has no {\"type\":\"task\"} record");
  task.validate();
  return task;
}

inline EvalTask load_task(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::io, "cannot open task file " + path.string());
  return load_task(in);
}

/// Where run_task gets vectors from.
struct EmbeddingSource {
  std::function<const std::vector<float>*(std::string_view id)> by_id;
  std::function<std::vector<float>(std::string_view text)> by_text;

  const std::vector<float>& require(std::string_view id) const {
    const std::vector<float>* v = by_id ? by_id(id) : nullptr;
    if (v == nullptr) fail(ErrorCode::unknown_id, "missing embedding for '" + std::string(id) + "'");
    return *v;
  }
};

struct MetricRow {
  std::string id;
  std::map<std::string, double> values;
  std::string detail;  // predicted class or cluster, when applicable
};

struct MetricReport {
  std::string kind;
  std::map<std::string, double> metrics;
  std::size_t evaluated = 0;
  std::size_t excluded = 0;  // queries without relevance judgments
  std::vector<MetricRow> rows;
};

/// Rounds to 1e-10 so independent implementations serialize identically.
inline double report_round(double v) { return std::round(v * 1e10) / 1e10; }

inline nlohmann::json report_to_json(const MetricReport& r) {
  nlohmann::json metrics = nlohmann::json::object();
  for (const auto& [name, v] : r.metrics) metrics[name] = report_round(v);
  return {{"kind", r.kind}, {"metrics", metrics}, {"evaluated", r.evaluated}, {"excluded", r.excluded}};
}

/// Per-query rows as CSV: id,<metric...>,detail.
inline std::string report_rows_csv(const MetricReport& r) {
  std::string out = "id";
  std::vector<std::string> names;
  for (const auto& [name, v] : r.metrics) names.push_back(name);
  for (const auto& n : names) out += "," + n;
  out += ",detail\n";
  char buf[64];
  for (const auto& row : r.rows) {
    out += row.id;
    for (const auto& n : names) {
      auto it = row.values.find(n);
      if (it == row.values.end()) {
        out += ",";
      } else {
        std::snprintf(buf, sizeof buf, ",%.10f", it->second);
        out += buf;
      }
    }
    out += "," + row.detail + "\n";
  }
  return out;
}

namespace detail {

inline std::vector<float> query_embedding(const TaskQuery& q, const EmbeddingSource& source) {
  if (q.text) {
    if (!source.by_text) fail(ErrorCode::invalid_argument, "task has text queries but no text encoder");
    return source.by_text(*q.text);
  }
  return source.require(*q.ref);
}

inline MetricReport run_ranking(const EvalTask& task, const EmbeddingSource& source) {
  MetricReport report;
  report.kind = to_string(task.kind);
  std::vector<MetricSpec> specs;
  for (const auto& m : task.metrics) specs.push_back(parse_metric(m));
  for (const auto& s : specs)
    if (s.base != "ndcg" && s.base != "recall" && s.base != "hit" && s.base != "mrr")
      fail(ErrorCode::invalid_argument, "metric '" + s.name + "' does not apply to ranking tasks");

  std::vector<Candidate> pool;
  if (task.kind == TaskKind::retrieval_global)
    for (const auto& id : task.candidates) pool.push_back({id, source.require(id)});

  std::map<std::string, std::vector<double>> per_metric;
  for (const auto& q : task.queries) {
    auto rel_it = task.qrels.find(q.id);
    if (rel_it == task.qrels.end() || rel_it->second.empty()) {
      ++report.excluded;
      continue;
    }
    const auto& relevant = rel_it->second;
    const auto qv = query_embedding(q, source);
    std::vector<std::string> ranking;
    if (task.kind == TaskKind::retrieval_global) {
      ranking = rank_candidates(qv, pool);
    } else {
      std::vector<Candidate> local;
      for (const auto& id : task.per_query.at(q.id)) local.push_back({id, source.require(id)});
      ranking = rank_candidates(qv, local);
    }
    MetricRow row{q.id, {}, ranking.empty() ? "" : ranking.front()};
    for (const auto& s : specs) {
      double v = 0.0;
      if (s.base == "ndcg") v = ndcg_at_k(ranking, relevant, s.k);
      else if (s.base == "recall") v = recall_at_k(ranking, relevant, s.k);
      else if (s.base == "hit") v = hit_at_k(ranking, relevant, s.k);
      else v = mrr(ranking, relevant);
      row.values[s.name] = v;
      per_metric[s.name].push_back(v);
    }
    report.rows.push_back(std::move(row));
    ++report.evaluated;
  }
  for (const auto& s : specs) report.metrics[s.name] = mean_of(per_metric[s.name]);
  return report;
}

inline MetricReport run_classification(const EvalTask& task, const EmbeddingSource& source) {
  MetricReport report;
  report.kind = to_string(task.kind);
  std::vector<std::pair<std::string, std::vector<float>>> protos;
  for (const auto& [id, label] : task.labels)
    if (task.prototypes.empty() || task.prototypes.contains(id)) protos.emplace_back(label, source.require(id));
  const Centroids centroids = class_centroids(protos);

  std::vector<std::string> truth, predicted;
  for (const auto& [id, label] : task.labels) {
    if (!task.prototypes.empty() && task.prototypes.contains(id)) continue;
    const std::string pred = classify(source.require(id), centroids);
    truth.push_back(label);
    predicted.push_back(pred);
    report.rows.push_back({id, {{"correct", pred == label ? 1.0 : 0.0}}, pred});
  }
  report.evaluated = truth.size();
  for (const auto& m : task.metrics) {
    const auto s = parse_metric(m);
    if (s.base == "accuracy") report.metrics[s.name] = accuracy(truth, predicted);
    else if (s.base == "macro_f1") report.metrics[s.name] = macro_f1(truth, predicted);
    else fail(ErrorCode::invalid_argument, "metric '" + s.name + "' does not apply to classification");
  }
  return report;
}

inline MetricReport run_clustering(const EvalTask& task, const EmbeddingSource& source) {
  MetricReport report;
  report.kind = to_string(task.kind);
  std::vector<std::vector<float>> points;
  std::vector<std::string> truth;
  std::set<std::string> classes;
  for (const auto& [id, label] : task.labels) {
    points.push_back(source.require(id));
    truth.push_back(label);
    classes.insert(label);
  }
  const auto km = kmeans(points, classes.size(), task.seed);
  const auto vm = v_measure<std::string, std::size_t>(truth, km.assignments);
  for (std::size_t i = 0; i < task.labels.size(); ++i)
    report.rows.push_back({task.labels[i].first, {}, std::to_string(km.assignments[i])});
  report.evaluated = points.size();
  for (const auto& m : task.metrics) {
    const auto s = parse_metric(m);
    if (s.base != "v_measure") fail(ErrorCode::invalid_argument, "metric '" + s.name + "' does not apply to clustering");
    report.metrics[s.name] = vm.v;
  }
  return report;
}

}  // namespace detail

/// Evaluates a task. Per-query metrics are macro-averaged; queries without
/// relevant candidates are skipped and counted in `excluded`.
inline MetricReport run_task(const EvalTask& task, const EmbeddingSource& source) {
  switch (task.kind) {
    case TaskKind::retrieval_global:
    case TaskKind::ranking_per_query:
      return detail::run_ranking(task, source);
    case TaskKind::classification:
      return detail::run_classification(task, source);
    case TaskKind::clustering:
      return detail::run_clustering(task, source);
  }
  fail(ErrorCode::invalid_argument, "unhandled task kind");
}

}  // namespace strucemb

#endif  // STRUCEMB_TASK_HPP
