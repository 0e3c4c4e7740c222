#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lenskit/corpus.hpp"
#include "lenskit/eval.hpp"
#include "lenskit/hpmf.hpp"
#include "lenskit/json_io.hpp"
#include "lenskit/lda.hpp"
#include "lenskit/lens.hpp"

namespace lenskit::session {

enum class Status { training, awaiting_review, augmenting, done };

std::string to_string(Status status);
Status status_from_string(const std::string& s);

// Everything a session needs to rerun its pipeline. Serialized flat: one
// key per setting, shared with the CLI flags and key=value config files.
struct SessionConfig {
  lda::LdaConfig lda;
  hpmf::HpmfConfig hpmf;
  TokenizerConfig tokenizer;
  double threshold = kDefaultThreshold;
  std::size_t top_n = 20;
  std::size_t fold_in_sweeps = 50;
  std::size_t fold_in_burn_in = 10;
  std::string heldout_ref;  // relative to the session directory once stored
  std::string gold_ref;

  std::size_t k(ModelKind kind) const { return kind == ModelKind::lda ? lda.k : hpmf.k; }
  void validate(ModelKind kind) const;

  json to_json(ModelKind kind) const;
  // Keys not listed in config_keys() for `kind` are rejected.
  static SessionConfig from_json(ModelKind kind, const json& j);
};

enum class KeyType { integer, real, boolean, text, list };

struct ConfigKey {
  const char* name;  // JSON key; CLI flag is the same with '-' for '_'
  KeyType type;
  bool lda;
  bool hpmf;
  const char* help;
};

std::span<const ConfigKey> config_keys();

struct IterationRecord {
  std::size_t index = 0;
  std::string data_ref;   // corpus.json (LDA) or the matrix TSV (HPMF)
  std::string model_ref;  // empty until training succeeded
  std::string cards_ref;
  std::string lens_ref;
  std::string eval_ref;
  std::optional<std::string> error;

  bool operator==(const IterationRecord&) const = default;
};

struct LensingSession {
  std::string id;
  ModelKind kind = ModelKind::lda;
  SessionConfig config;
  std::vector<IterationRecord> iterations;
  Status status = Status::training;
  std::string created_at;
  std::string report_ref;

  const IterationRecord& current() const { return iterations.back(); }

  json to_json() const;
  static LensingSession from_json(const json& j);
};

struct Progress {
  std::size_t iteration = 0;
  std::string phase;  // "queued", "training", "idle"
  std::size_t completed = 0;
  std::size_t total = 0;
};

// Persisted sessions under a root directory, one subdirectory per session.
// Mutating operations take an exclusive advisory lock on the session and
// fail with BusyError if another writer holds it; session.json is replaced
// last, so a completed operation is never half-visible.
class SessionStore {
 public:
  explicit SessionStore(std::filesystem::path root);

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path session_dir(const std::string& id) const;

  // Validates the config and data, then persists iteration 0 in status
  // training. Nothing is written when validation fails.
  LensingSession create(ModelKind kind, const std::filesystem::path& data,
                        const SessionConfig& config);

  LensingSession load(const std::string& id) const;
  std::vector<std::string> list() const;

  // Trains the current iteration and advances to awaiting_review. On
  // failure the error is recorded, the status stays training, and the
  // exception is rethrown.
  LensingSession train(const std::string& id);
  // Materializes the review cards for a trained iteration. Idempotent.
  LensingSession advance_after_training(const std::string& id);

  // Stores a draft judgment for the current review.
  LensingSession record_judgment(const std::string& id, std::uint32_t dim,
                                 const DimensionJudgment& judgment);
  std::map<std::uint32_t, DimensionJudgment> draft_judgments(const std::string& id) const;

  LensingSession submit_review(const std::string& id,
                               const std::map<std::uint32_t, DimensionJudgment>& judgments,
                               std::optional<double> threshold = std::nullopt);
  // Submits the stored drafts.
  LensingSession complete_review(const std::string& id, std::optional<double> threshold);

  LensingSession next_iteration(const std::string& id);

  // Writes eval.json for one trained iteration.
  eval::EvalReport evaluate(const std::string& id, std::size_t iteration);
  LensingSession finalize(const std::string& id);

  json cards(const std::string& id) const;
  json report(const std::string& id) const;
  Progress progress(const std::string& id) const;
  void set_progress(const std::string& id, const Progress& progress) const;

  // The lens applied when training iteration `i` (the one stored at i-1).
  std::optional<Lens> applied_lens(const LensingSession& s, std::size_t i) const;
  std::optional<Lens> stored_lens(const LensingSession& s, std::size_t i) const;

  Corpus load_corpus(const LensingSession& s, std::size_t i) const;
  BehaviorMatrix load_matrix(const LensingSession& s, std::size_t i) const;
  lda::TopicModelState load_lda(const LensingSession& s, std::size_t i) const;
  hpmf::HpmfState load_hpmf(const LensingSession& s, std::size_t i) const;

 private:
  void save(const LensingSession& s) const;
  LensingSession advance_locked(LensingSession s);
  LensingSession submit_locked(LensingSession s,
                               const std::map<std::uint32_t, DimensionJudgment>& judgments,
                               std::optional<double> threshold);
  std::vector<std::uint32_t> card_dims(const LensingSession& s) const;
  eval::EvalReport evaluate_locked(const LensingSession& s, std::size_t iteration);

  std::filesystem::path root_;
};

// Session summary returned by the HTTP API and printed by the CLI.
json session_summary(const SessionStore& store, const LensingSession& s);

}  // namespace lenskit::session
