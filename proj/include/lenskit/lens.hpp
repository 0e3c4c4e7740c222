#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lenskit/json_io.hpp"

namespace lenskit {

enum class ModelKind { lda, hpmf };

std::string to_string(ModelKind kind);
ModelKind model_kind_from_string(const std::string& s);

inline constexpr double kDefaultThreshold = 0.30;

enum class JudgmentStatus { labeled, discarded };
enum class DimStatus { labeled, discarded, unreviewed };

// An informant's verdict on one latent dimension.
struct DimensionJudgment {
  JudgmentStatus status = JudgmentStatus::discarded;
  std::string label;
  std::vector<std::string> sentences;
  std::optional<std::string> rationale;

  static DimensionJudgment labeled(std::string label, std::vector<std::string> sentences = {});
  static DimensionJudgment discarded(std::optional<std::string> rationale = std::nullopt);

  // Throws UsageError: labeled needs a label, discarded carries no sentences.
  void validate() const;
  bool operator==(const DimensionJudgment&) const = default;
};

json judgment_to_json(std::uint32_t dim, const DimensionJudgment& judgment);
DimensionJudgment judgment_from_json(const json& j);

/// The informant's lens over a model with `k_original` latent dimensions.
///
/// Each dimension is labeled, discarded, or (not yet) reviewed. Item label
/// vectors (one 0/1 slot per labeled dimension, ascending dimension order)
/// are derived from per-item proportions by thresholding at `threshold`.
/// Values are immutable: every mutator returns a new Lens.
class Lens {
 public:
  Lens(ModelKind kind, std::size_t k_original, double threshold = kDefaultThreshold);

  ModelKind model_kind() const { return kind_; }
  std::size_t k_original() const { return k_original_; }
  double threshold() const { return threshold_; }
  const std::map<std::uint32_t, DimensionJudgment>& assignments() const { return assignments_; }

  DimStatus status(std::uint32_t dim) const;
  std::optional<std::string> label_of(std::uint32_t dim) const;
  std::vector<std::uint32_t> labeled_dims() const;
  std::vector<std::uint32_t> discarded_dims() const;
  std::vector<std::uint32_t> non_discarded_dims() const;
  bool is_discarded(std::uint32_t dim) const { return status(dim) == DimStatus::discarded; }
  std::size_t k_star() const { return labeled_dims().size(); }
  std::size_t sentence_count() const;

  // Replaces the judgment for `dim`. Item labels are dropped unless the
  // judgment is identical to the one already recorded.
  Lens record_judgment(std::uint32_t dim, DimensionJudgment judgment) const;
  Lens with_threshold(double threshold) const;

  // One slot per labeled dim: 1 iff proportions[dim] >= threshold.
  std::vector<std::uint8_t> binarize(std::span<const double> proportions) const;

  Lens build_item_labels(const std::map<std::string, std::vector<double>>& per_item) const;
  bool item_labels_built() const { return item_labels_built_; }
  const std::map<std::string, std::vector<std::uint8_t>>& item_labels() const { return item_labels_; }

  // Labeled dims switched on for the item; all non-discarded dims when the
  // item's label vector is all zero.
  std::vector<std::uint32_t> allowed_dims(const std::string& item) const;

  json to_json() const;
  static Lens from_json(const json& j);

  bool operator==(const Lens&) const = default;

 private:
  void check_dim(std::uint32_t dim) const;

  ModelKind kind_;
  std::size_t k_original_;
  double threshold_;
  std::map<std::uint32_t, DimensionJudgment> assignments_;
  std::map<std::string, std::vector<std::uint8_t>> item_labels_;
  bool item_labels_built_ = false;
};

}  // namespace lenskit
