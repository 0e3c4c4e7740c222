#include "lenskit/lens.hpp"

#include <cmath>

#include "lenskit/error.hpp"

namespace lenskit {

std::string to_string(ModelKind kind) {
  return kind == ModelKind::lda ? "lda" : "hpmf";
}

ModelKind model_kind_from_string(const std::string& s) {
  if (s == "lda") return ModelKind::lda;
  if (s == "hpmf") return ModelKind::hpmf;
  throw UsageError("unknown model kind '" + s + "' (expected lda or hpmf)");
}

DimensionJudgment DimensionJudgment::labeled(std::string label,
                                             std::vector<std::string> sentences) {
  DimensionJudgment j;
  j.status = JudgmentStatus::labeled;
  j.label = std::move(label);
  j.sentences = std::move(sentences);
  return j;
}

DimensionJudgment DimensionJudgment::discarded(std::optional<std::string> rationale) {
  DimensionJudgment j;
  j.status = JudgmentStatus::discarded;
  j.rationale = std::move(rationale);
  return j;
}

void DimensionJudgment::validate() const {
  if (status == JudgmentStatus::labeled && label.empty()) {
    throw UsageError("labeled judgment requires a nonempty label");
  }
  if (status == JudgmentStatus::discarded && !sentences.empty()) {
    throw UsageError("discarded judgment cannot carry sentences");
  }
}

json judgment_to_json(std::uint32_t dim, const DimensionJudgment& judgment) {
  json j = {{"dim", dim},
            {"status", judgment.status == JudgmentStatus::labeled ? "labeled" : "discarded"},
            {"label", judgment.label},
            {"sentences", judgment.sentences}};
  if (judgment.rationale) j["rationale"] = *judgment.rationale;
  return j;
}

DimensionJudgment judgment_from_json(const json& j) {
  if (!j.is_object()) throw UsageError("judgment must be a JSON object");
  DimensionJudgment out;
  const std::string status = j.value("status", "");
  if (status == "labeled") {
    out.status = JudgmentStatus::labeled;
  } else if (status == "discarded") {
    out.status = JudgmentStatus::discarded;
  } else {
    throw UsageError("judgment status must be 'labeled' or 'discarded', got '" + status + "'");
  }
  try {
    if (j.contains("label") && !j["label"].is_null()) out.label = j["label"].get<std::string>();
    if (j.contains("sentences")) out.sentences = j["sentences"].get<std::vector<std::string>>();
    if (j.contains("rationale") && !j["rationale"].is_null()) {
      out.rationale = j["rationale"].get<std::string>();
    }
  } catch (const json::exception& e) {
    throw UsageError(std::string("malformed judgment: ") + e.what());
  }
  out.validate();
  return out;
}

Lens::Lens(ModelKind kind, std::size_t k_original, double threshold)
    : kind_(kind), k_original_(k_original), threshold_(threshold) {
  if (k_original == 0) throw UsageError("lens needs at least one latent dimension");
  if (!(threshold >= 0.0 && threshold <= 1.0)) {
    throw UsageError("threshold must lie in [0, 1]");
  }
}

void Lens::check_dim(std::uint32_t dim) const {
  if (dim >= k_original_) {
    throw UsageError("latent dimension " + std::to_string(dim) + " out of range (k = " +
                     std::to_string(k_original_) + ")");
  }
}

DimStatus Lens::status(std::uint32_t dim) const {
  check_dim(dim);
  auto it = assignments_.find(dim);
  if (it == assignments_.end()) return DimStatus::unreviewed;
  return it->second.status == JudgmentStatus::labeled ? DimStatus::labeled
                                                      : DimStatus::discarded;
}

std::optional<std::string> Lens::label_of(std::uint32_t dim) const {
  auto it = assignments_.find(dim);
  if (it == assignments_.end() || it->second.status != JudgmentStatus::labeled) {
    return std::nullopt;
  }
  return it->second.label;
}

std::vector<std::uint32_t> Lens::labeled_dims() const {
  std::vector<std::uint32_t> out;
  for (const auto& [dim, j] : assignments_) {
    if (j.status == JudgmentStatus::labeled) out.push_back(dim);
  }
  return out;
}

std::vector<std::uint32_t> Lens::discarded_dims() const {
  std::vector<std::uint32_t> out;
  for (const auto& [dim, j] : assignments_) {
    if (j.status == JudgmentStatus::discarded) out.push_back(dim);
  }
  return out;
}

std::vector<std::uint32_t> Lens::non_discarded_dims() const {
  std::vector<std::uint32_t> out;
  for (std::uint32_t d = 0; d < k_original_; ++d) {
    if (!is_discarded(d)) out.push_back(d);
  }
  return out;
}

std::size_t Lens::sentence_count() const {
  std::size_t n = 0;
  for (const auto& [dim, j] : assignments_) n += j.sentences.size();
  return n;
}

Lens Lens::record_judgment(std::uint32_t dim, DimensionJudgment judgment) const {
  check_dim(dim);
  judgment.validate();
  auto it = assignments_.find(dim);
  if (it != assignments_.end() && it->second == judgment) return *this;
  Lens out = *this;
  out.assignments_[dim] = std::move(judgment);
  out.item_labels_.clear();
  out.item_labels_built_ = false;
  return out;
}

Lens Lens::with_threshold(double threshold) const {
  Lens out(kind_, k_original_, threshold);
  out.assignments_ = assignments_;
  return out;
}

std::vector<std::uint8_t> Lens::binarize(std::span<const double> proportions) const {
  if (proportions.size() != k_original_) {
    throw DataError("proportion vector has length " + std::to_string(proportions.size()) +
                    ", expected " + std::to_string(k_original_));
  }
  double total = 0.0;
  for (double p : proportions) {
    if (!std::isfinite(p) || p < 0.0) throw DataError("proportions must be finite and >= 0");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-6) {
    throw DataError("proportions sum to " + std::to_string(total) + ", expected 1");
  }
  std::vector<std::uint8_t> out;
  for (std::uint32_t dim : labeled_dims()) {
    out.push_back(proportions[dim] >= threshold_ ? 1 : 0);
  }
  return out;
}

Lens Lens::build_item_labels(const std::map<std::string, std::vector<double>>& per_item) const {
  Lens out = *this;
  out.item_labels_.clear();
  for (const auto& [item, proportions] : per_item) {
    try {
      out.item_labels_[item] = binarize(proportions);
    } catch (const DataError& e) {
      throw DataError("item '" + item + "': " + e.what());
    }
  }
  out.item_labels_built_ = true;
  return out;
}

std::vector<std::uint32_t> Lens::allowed_dims(const std::string& item) const {
  if (!item_labels_built_) throw StateError("item labels have not been built for this lens");
  auto it = item_labels_.find(item);
  if (it == item_labels_.end()) throw NotFoundError("unknown item '" + item + "'");
  const auto labeled = labeled_dims();
  std::vector<std::uint32_t> out;
  for (std::size_t s = 0; s < labeled.size(); ++s) {
    if (it->second[s]) out.push_back(labeled[s]);
  }
  if (out.empty()) return non_discarded_dims();
  return out;
}

json Lens::to_json() const {
  json assignments = json::array();
  for (const auto& [dim, j] : assignments_) assignments.push_back(judgment_to_json(dim, j));
  json j = {{"model_kind", to_string(kind_)},
            {"k_original", k_original_},
            {"threshold", threshold_},
            {"assignments", assignments}};
  if (item_labels_built_) {
    json labels = json::object();
    for (const auto& [item, v] : item_labels_) {
      json arr = json::array();
      for (auto b : v) arr.push_back(static_cast<int>(b));
      labels[item] = arr;
    }
    j["item_labels"] = labels;
  } else {
    j["item_labels"] = nullptr;
  }
  return j;
}

Lens Lens::from_json(const json& j) {
  if (!j.is_object()) throw DataError("lens must be a JSON object");
  try {
    Lens lens(model_kind_from_string(j.at("model_kind").get<std::string>()),
              j.at("k_original").get<std::size_t>(),
              j.value("threshold", kDefaultThreshold));
    for (const auto& a : j.value("assignments", json::array())) {
      const auto dim = a.at("dim").get<std::uint32_t>();
      lens.check_dim(dim);
      if (lens.assignments_.count(dim)) {
        throw DataError("dimension " + std::to_string(dim) + " judged twice");
      }
      lens.assignments_[dim] = judgment_from_json(a);
    }
    if (j.contains("item_labels") && !j["item_labels"].is_null()) {
      const std::size_t slots = lens.k_star();
      for (const auto& [item, v] : j["item_labels"].items()) {
        std::vector<std::uint8_t> bits;
        for (const auto& b : v) {
          const int x = b.get<int>();
          if (x != 0 && x != 1) throw DataError("item label entries must be 0 or 1");
          bits.push_back(static_cast<std::uint8_t>(x));
        }
        if (bits.size() != slots) {
          throw DataError("item '" + item + "' label vector has " + std::to_string(bits.size()) +
                          " slots, expected " + std::to_string(slots));
        }
        lens.item_labels_[item] = std::move(bits);
      }
      lens.item_labels_built_ = true;
    }
    return lens;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed lens JSON: ") + e.what());
  }
}

}  // namespace lenskit
