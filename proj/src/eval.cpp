#include "lenskit/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <unordered_map>

#include "lenskit/error.hpp"

namespace lenskit::eval {

namespace {

double ratio(double num, double den) { return den > 0.0 ? num / den : 0.0; }

json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> read_optional(const json& j, const char* key) {
  if (!j.contains(key) || j[key].is_null()) return std::nullopt;
  return j[key].get<double>();
}

}  // namespace

GoldAnnotations GoldAnnotations::from_json(const json& j) {
  GoldAnnotations g;
  try {
    g.label_space = j.at("label_space").get<std::vector<std::string>>();
    const std::set<std::string> space(g.label_space.begin(), g.label_space.end());
    if (space.size() != g.label_space.size()) throw DataError("duplicate label in label_space");
    for (const auto& [item, labels] : j.at("items").items()) {
      auto& set = g.items[item];
      for (const auto& l : labels) {
        const auto name = l.get<std::string>();
        if (!space.count(name)) {
          throw DataError("item '" + item + "' has label '" + name + "' outside label_space");
        }
        set.insert(name);
      }
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed gold annotations: ") + e.what());
  }
  return g;
}

GoldAnnotations GoldAnnotations::load(const std::filesystem::path& path) {
  return from_json(read_json(path));
}

json GoldAnnotations::to_json() const {
  json items_json = json::object();
  for (const auto& [item, labels] : items) items_json[item] = labels;
  return {{"label_space", label_space}, {"items", items_json}};
}

F1Result f1_against_gold(const PredictedLabels& predicted, const GoldAnnotations& gold) {
  F1Result r;
  const std::set<std::string> space(gold.label_space.begin(), gold.label_space.end());
  std::set<std::string> unmatched;
  for (const auto& name : predicted.label_names) {
    if (space.count(name)) {
      r.per_label[name];
    } else {
      unmatched.insert(name);
    }
  }
  r.unmatched_labels.assign(unmatched.begin(), unmatched.end());
  for (const auto& label : gold.label_space) {
    if (!r.per_label.count(label)) r.unscored_labels.push_back(label);
  }
  for (const auto& [item, bits] : predicted.items) {
    auto g = gold.items.find(item);
    if (g == gold.items.end()) continue;
    if (bits.size() != predicted.label_names.size()) {
      throw DataError("item '" + item + "' prediction has the wrong number of slots");
    }
    ++r.items_scored;
    std::set<std::string> on;
    for (std::size_t s = 0; s < bits.size(); ++s) {
      if (bits[s]) on.insert(predicted.label_names[s]);
    }
    for (auto& [label, score] : r.per_label) {
      const bool p = on.count(label) > 0;
      const bool t = g->second.count(label) > 0;
      if (p && t) ++score.tp;
      if (p && !t) ++score.fp;
      if (!p && t) ++score.fn;
    }
  }
  if (r.items_scored == 0) throw DataError("no items overlap between predictions and gold");

  std::size_t tp = 0, fp = 0, fn = 0;
  double macro = 0.0;
  for (auto& [label, s] : r.per_label) {
    s.precision = ratio(s.tp, s.tp + s.fp);
    s.recall = ratio(s.tp, s.tp + s.fn);
    s.f1 = ratio(2.0 * s.tp, 2.0 * s.tp + s.fp + s.fn);
    tp += s.tp;
    fp += s.fp;
    fn += s.fn;
    macro += s.f1;
  }
  r.micro_f1 = ratio(2.0 * tp, 2.0 * tp + fp + fn);
  r.macro_f1 = r.per_label.empty() ? 0.0 : macro / static_cast<double>(r.per_label.size());
  return r;
}

AucResult roc_auc(const std::map<std::string, std::map<std::string, double>>& scores,
                  const GoldAnnotations& gold) {
  AucResult r;
  for (const auto& [label, by_item] : scores) {
    // (score, is_positive), ranked ascending with mid-ranks for ties.
    std::vector<std::pair<double, bool>> ranked;
    for (const auto& [item, score] : by_item) {
      auto g = gold.items.find(item);
      if (g == gold.items.end()) continue;
      ranked.emplace_back(score, g->second.count(label) > 0);
    }
    std::size_t pos = 0;
    for (const auto& [s, p] : ranked) pos += p ? 1 : 0;
    const std::size_t neg = ranked.size() - pos;
    if (pos == 0 || neg == 0) {
      r.skipped.push_back(label);
      continue;
    }
    std::sort(ranked.begin(), ranked.end(),
              [](const auto& x, const auto& y) { return x.first < y.first; });
    double rank_sum = 0.0;
    for (std::size_t i = 0; i < ranked.size();) {
      std::size_t j = i;
      while (j < ranked.size() && ranked[j].first == ranked[i].first) ++j;
      const double mid = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
      for (std::size_t t = i; t < j; ++t) {
        if (ranked[t].second) rank_sum += mid;
      }
      i = j;
    }
    const double p = static_cast<double>(pos), n = static_cast<double>(neg);
    r.auc[label] = (rank_sum - p * (p + 1.0) / 2.0) / (p * n);
  }
  return r;
}

std::vector<std::optional<double>> ppc_topic_discrepancy(const lda::TopicModelState& state) {
  std::vector<std::optional<double>> out(state.k);
  for (std::size_t t = 0; t < state.k; ++t) {
    std::unordered_map<std::uint64_t, double> joint;
    std::unordered_map<std::size_t, double> by_doc, by_word;
    double n = 0.0;
    for (std::size_t d = 0; d < state.num_docs(); ++d) {
      for (std::size_t i = 0; i < state.words[d].size(); ++i) {
        if (state.z[d][i] != t) continue;
        const auto w = state.words[d][i];
        joint[(static_cast<std::uint64_t>(d) << 32) | w] += 1.0;
        by_doc[d] += 1.0;
        by_word[w] += 1.0;
        n += 1.0;
      }
    }
    if (n < 2.0) continue;
    // Sum in key order so the result does not depend on hash iteration.
    std::vector<std::pair<std::uint64_t, double>> cells(joint.begin(), joint.end());
    std::sort(cells.begin(), cells.end());
    double mi = 0.0;
    for (const auto& [key, c] : cells) {
      const std::size_t d = key >> 32;
      const std::size_t w = key & 0xffffffffu;
      mi += (c / n) * std::log(c * n / (by_doc[d] * by_word[w]));
    }
    out[t] = std::max(mi, 0.0);
  }
  return out;
}

json EvalReport::to_json() const {
  json ppc = json::object();
  for (const auto& [dim, v] : ppc_scores) ppc[std::to_string(dim)] = optional_number(v);
  json f1 = json::object();
  for (const auto& [label, s] : per_label_f1) {
    f1[label] = {{"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1},
                 {"tp", s.tp},               {"fp", s.fp},         {"fn", s.fn}};
  }
  return {{"metadata",
           {{"model_id", model_id},
            {"iteration", iteration},
            {"timestamp", timestamp},
            {"f1_zero_division", 0},
            {"ppc_discrepancy", "topic word/document mutual information (nats)"}}},
          {"heldout_ll", optional_number(heldout_ll)},
          {"ppc_scores", ppc},
          {"per_label_f1", f1},
          {"micro_f1", optional_number(micro_f1)},
          {"macro_f1", optional_number(macro_f1)},
          {"roc_auc", roc_auc},
          {"notices", notices}};
}

EvalReport EvalReport::from_json(const json& j) {
  EvalReport r;
  try {
    const auto& meta = j.at("metadata");
    r.model_id = meta.value("model_id", "");
    r.iteration = meta.value("iteration", std::size_t{0});
    r.timestamp = meta.value("timestamp", "");
    r.heldout_ll = read_optional(j, "heldout_ll");
    const json ppc = j.value("ppc_scores", json::object());
    for (const auto& [dim, v] : ppc.items()) {
      r.ppc_scores[static_cast<std::uint32_t>(std::stoul(dim))] =
          v.is_null() ? std::nullopt : std::optional<double>(v.get<double>());
    }
    const json f1 = j.value("per_label_f1", json::object());
    for (const auto& [label, s] : f1.items()) {
      LabelScore ls;
      ls.precision = s.at("precision").get<double>();
      ls.recall = s.at("recall").get<double>();
      ls.f1 = s.at("f1").get<double>();
      ls.tp = s.value("tp", std::size_t{0});
      ls.fp = s.value("fp", std::size_t{0});
      ls.fn = s.value("fn", std::size_t{0});
      r.per_label_f1[label] = ls;
    }
    r.micro_f1 = read_optional(j, "micro_f1");
    r.macro_f1 = read_optional(j, "macro_f1");
    r.roc_auc = j.value("roc_auc", std::map<std::string, double>{});
    r.notices = j.value("notices", std::vector<std::string>{});
  } catch (const std::exception& e) {
    throw DataError(std::string("malformed evaluation report: ") + e.what());
  }
  return r;
}

json ComparisonTable::to_json() const {
  json rows_json = json::array();
  for (const auto& r : rows) {
    rows_json.push_back({{"metric", r.metric}, {"a", r.a}, {"b", r.b}, {"delta", r.delta}});
  }
  return {{"model_a", model_a}, {"model_b", model_b}, {"rows", rows_json}};
}

std::string ComparisonTable::to_text() const {
  std::size_t width = 6;
  for (const auto& r : rows) width = std::max(width, r.metric.size());
  std::ostringstream out;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-*s  %14s  %14s  %14s\n", static_cast<int>(width), "metric",
                model_a.substr(0, 14).c_str(), model_b.substr(0, 14).c_str(), "delta");
  out << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-*s  %14.6f  %14.6f  %+14.6f\n", static_cast<int>(width),
                  r.metric.c_str(), r.a, r.b, r.delta);
    out << buf;
  }
  return out.str();
}

ComparisonTable compare_models(const EvalReport& a, const EvalReport& b) {
  bool shared_label = false;
  for (const auto& [label, s] : a.per_label_f1) shared_label |= b.per_label_f1.count(label) > 0;
  if (!a.per_label_f1.empty() && !b.per_label_f1.empty() && !shared_label) {
    throw DataError("reports have disjoint label spaces");
  }
  ComparisonTable t;
  t.model_a = a.model_id;
  t.model_b = b.model_id;
  auto add = [&](std::string metric, double x, double y) {
    t.rows.push_back({std::move(metric), x, y, y - x});
  };
  if (a.heldout_ll && b.heldout_ll) add("heldout_ll", *a.heldout_ll, *b.heldout_ll);
  if (a.micro_f1 && b.micro_f1) add("micro_f1", *a.micro_f1, *b.micro_f1);
  if (a.macro_f1 && b.macro_f1) add("macro_f1", *a.macro_f1, *b.macro_f1);
  for (const auto& [label, s] : a.per_label_f1) {
    auto it = b.per_label_f1.find(label);
    if (it != b.per_label_f1.end()) add("f1[" + label + "]", s.f1, it->second.f1);
  }
  for (const auto& [label, v] : a.roc_auc) {
    auto it = b.roc_auc.find(label);
    if (it != b.roc_auc.end()) add("auc[" + label + "]", v, it->second);
  }
  for (const auto& [dim, v] : a.ppc_scores) {
    auto it = b.ppc_scores.find(dim);
    if (v && it != b.ppc_scores.end() && it->second) {
      add("ppc_mi[" + std::to_string(dim) + "]", *v, *it->second);
    }
  }
  return t;
}

}  // namespace lenskit::eval
