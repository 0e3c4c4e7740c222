#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "lenskit/json_io.hpp"
#include "lenskit/lda.hpp"

namespace lenskit::eval {

// Prior manual annotation of items (documents or users) with labels.
struct GoldAnnotations {
  std::vector<std::string> label_space;
  std::map<std::string, std::set<std::string>> items;

  static GoldAnnotations from_json(const json& j);
  static GoldAnnotations load(const std::filesystem::path& path);
  json to_json() const;
};

// Binary label vectors per item; slot i corresponds to label_names[i].
// Several slots may carry the same name (two dims given one label); the
// item is predicted positive for a name if any of its slots is on.
struct PredictedLabels {
  std::vector<std::string> label_names;
  std::map<std::string, std::vector<std::uint8_t>> items;
};

struct LabelScore {
  std::size_t tp = 0, fp = 0, fn = 0;
  double precision = 0.0, recall = 0.0, f1 = 0.0;
};

struct F1Result {
  std::map<std::string, LabelScore> per_label;  // gold labels carried by some predicted slot
  double micro_f1 = 0.0;
  double macro_f1 = 0.0;
  std::vector<std::string> unmatched_labels;  // predicted names outside the gold space
  std::vector<std::string> unscored_labels;   // gold labels no predicted slot carries
  std::size_t items_scored = 0;
};

// Scores the items present in both sets. 0/0 ratios are taken as 0.
F1Result f1_against_gold(const PredictedLabels& predicted, const GoldAnnotations& gold);

struct AucResult {
  std::map<std::string, double> auc;
  std::vector<std::string> skipped;  // labels lacking a positive or a negative item
};

// scores: label -> item -> real score. AUC is the Mann-Whitney statistic with
// ties counted one half. Items absent from the gold set are ignored.
AucResult roc_auc(const std::map<std::string, std::map<std::string, double>>& scores,
                  const GoldAnnotations& gold);

// Per topic: mutual information (nats) between word identity and document
// identity over the tokens currently assigned to the topic. Topics with
// fewer than two tokens map to nullopt.
std::vector<std::optional<double>> ppc_topic_discrepancy(const lda::TopicModelState& state);

struct EvalReport {
  std::string model_id;
  std::size_t iteration = 0;
  std::string timestamp;
  std::optional<double> heldout_ll;
  std::map<std::uint32_t, std::optional<double>> ppc_scores;
  std::map<std::string, LabelScore> per_label_f1;
  std::optional<double> micro_f1, macro_f1;
  std::map<std::string, double> roc_auc;
  std::vector<std::string> notices;

  json to_json() const;
  static EvalReport from_json(const json& j);
};

struct ComparisonRow {
  std::string metric;
  double a = 0.0, b = 0.0, delta = 0.0;  // delta = b - a
};

struct ComparisonTable {
  std::string model_a, model_b;
  std::vector<ComparisonRow> rows;

  json to_json() const;
  std::string to_text() const;
};

// Metric-by-metric deltas (b - a) over the metrics both reports carry.
// Throws DataError when both reports score labels but share none.
ComparisonTable compare_models(const EvalReport& a, const EvalReport& b);

}  // namespace lenskit::eval
