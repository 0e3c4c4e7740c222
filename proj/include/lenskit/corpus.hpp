#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "lenskit/json_io.hpp"

namespace lenskit {

class Lens;

using TokenId = std::uint32_t;

struct TokenizerConfig {
  bool lowercase = true;
  std::size_t min_length = 1;  // in code points
  std::set<std::string> stopwords;  // matched after lowercasing
};

// Splits on Unicode whitespace, strips leading/trailing punctuation, then
// lowercases (ASCII) and filters by length and stopwords.
std::vector<std::string> tokenize(std::string_view text, const TokenizerConfig& cfg);

// Append-only token <-> index map. Indices are contiguous from 0.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> tokens);

  TokenId add(const std::string& token);
  std::optional<TokenId> find(const std::string& token) const;
  const std::string& token(TokenId id) const { return tokens_.at(id); }
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

enum class DocSource { original, informant_sentence };

struct Document {
  std::string id;
  std::map<TokenId, std::uint32_t> counts;
  DocSource source = DocSource::original;
  std::optional<std::uint32_t> origin_topic;  // informant sentences only

  std::size_t length() const;
  bool operator==(const Document&) const = default;
};

struct Corpus {
  std::vector<Document> docs;
  Vocabulary vocab;
  int iteration_tag = 0;

  std::size_t num_docs() const { return docs.size(); }
  std::size_t vocab_size() const { return vocab.size(); }
  std::optional<std::size_t> find_doc(const std::string& id) const;
  // Throws InvariantError if any Corpus/Document invariant is broken.
  void validate() const;

  bool operator==(const Corpus&) const = default;
};

struct IngestStats {
  std::size_t records = 0;
  std::vector<std::string> empty_after_filtering;  // dropped documents
};

// JSON-lines transcripts, one {"id": ..., "text": ...} object per line.
Corpus ingest_transcripts(const std::filesystem::path& path, const TokenizerConfig& cfg,
                          IngestStats* stats = nullptr);
Corpus corpus_from_texts(const std::vector<std::pair<std::string, std::string>>& records,
                         const TokenizerConfig& cfg, IngestStats* stats = nullptr);

// Returns a new corpus with one document per informant sentence appended.
Corpus augment_with_sentences(const Corpus& corpus, const Lens& lens,
                              const TokenizerConfig& cfg);

json corpus_to_json(const Corpus& corpus);
Corpus corpus_from_json(const json& j);

// Sparse binary user x factor matrix; entry presence encodes y = 1.
class BehaviorMatrix {
 public:
  BehaviorMatrix() = default;
  // Sorts and de-duplicates `pairs`; duplicates are counted, not rejected.
  BehaviorMatrix(std::vector<std::string> user_ids, std::vector<std::string> factor_names,
                 std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs);

  std::size_t n_users() const { return user_ids_.size(); }
  std::size_t n_factors() const { return factor_names_.size(); }
  std::size_t nnz() const { return entries_.size(); }
  std::size_t duplicate_count() const { return duplicate_count_; }

  const std::vector<std::string>& user_ids() const { return user_ids_; }
  const std::vector<std::string>& factor_names() const { return factor_names_; }
  // Sorted by (user, factor).
  const std::vector<std::pair<std::uint32_t, std::uint32_t>>& entries() const { return entries_; }

  // Entry indices [user_begin(m), user_begin(m+1)) belong to user m.
  std::size_t user_begin(std::size_t m) const { return user_offsets_[m]; }
  // Entry indices of factor n, ascending by user.
  std::pair<const std::uint32_t*, const std::uint32_t*> factor_entries(std::size_t n) const {
    return {factor_index_.data() + factor_offsets_[n], factor_index_.data() + factor_offsets_[n + 1]};
  }

  bool contains(std::size_t m, std::size_t n) const;
  std::optional<std::size_t> find_user(const std::string& id) const;

  bool operator==(const BehaviorMatrix& o) const {
    return user_ids_ == o.user_ids_ && factor_names_ == o.factor_names_ && entries_ == o.entries_;
  }

 private:
  std::vector<std::string> user_ids_;
  std::vector<std::string> factor_names_;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> entries_;
  std::vector<std::size_t> user_offsets_;
  std::vector<std::size_t> factor_offsets_;
  std::vector<std::uint32_t> factor_index_;
  std::size_t duplicate_count_ = 0;
};

// Sparse triplet TSV; grammar documented in README.md.
BehaviorMatrix ingest_behavior_matrix(const std::filesystem::path& path);
BehaviorMatrix parse_behavior_matrix(std::string_view text);
std::string behavior_matrix_to_tsv(const BehaviorMatrix& matrix);

}  // namespace lenskit
