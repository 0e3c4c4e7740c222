#include "lenskit/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

#include "lenskit/error.hpp"
#include "lenskit/lens.hpp"

namespace lenskit {

namespace {

// Decodes one UTF-8 code point starting at s[i]; advances i. Invalid bytes
// decode as themselves so that arbitrary input never throws.
char32_t next_code_point(std::string_view s, std::size_t& i) {
  const auto b0 = static_cast<unsigned char>(s[i]);
  int len = 1;
  char32_t cp = b0;
  if (b0 >= 0xF0 && b0 < 0xF8) {
    len = 4;
    cp = b0 & 0x07;
  } else if (b0 >= 0xE0) {
    len = 3;
    cp = b0 & 0x0F;
  } else if (b0 >= 0xC0) {
    len = 2;
    cp = b0 & 0x1F;
  }
  if (len > 1 && i + len <= s.size()) {
    for (int k = 1; k < len; ++k) {
      const auto b = static_cast<unsigned char>(s[i + k]);
      if ((b & 0xC0) != 0x80) {
        i += 1;
        return b0;
      }
      cp = (cp << 6) | (b & 0x3F);
    }
    i += len;
    return cp;
  }
  i += 1;
  return b0;
}

bool is_unicode_space(char32_t cp) {
  switch (cp) {
    case U' ': case U'\t': case U'\n': case U'\v': case U'\f': case U'\r':
    case 0x85: case 0xA0: case 0x1680: case 0x2028: case 0x2029:
    case 0x202F: case 0x205F: case 0x3000:
      return true;
    default:
      return cp >= 0x2000 && cp <= 0x200A;
  }
}

bool is_punct(char32_t cp) {
  if (cp < 0x80) {
    return (cp >= 0x21 && cp <= 0x2F) || (cp >= 0x3A && cp <= 0x40) ||
           (cp >= 0x5B && cp <= 0x60) || (cp >= 0x7B && cp <= 0x7E);
  }
  // Latin-1 punctuation, general punctuation block, CJK punctuation.
  return cp == 0xA1 || cp == 0xAB || cp == 0xBB || cp == 0xBF ||
         (cp >= 0x2010 && cp <= 0x2027) || (cp >= 0x2030 && cp <= 0x205E) ||
         (cp >= 0x3001 && cp <= 0x3003);
}

struct CodePoint {
  std::size_t begin, end;
  char32_t cp;
};

void emit_token(std::string_view text, const std::vector<CodePoint>& word,
                const TokenizerConfig& cfg, std::vector<std::string>& out) {
  std::size_t lo = 0, hi = word.size();
  while (lo < hi && is_punct(word[lo].cp)) ++lo;
  while (hi > lo && is_punct(word[hi - 1].cp)) --hi;
  if (lo == hi || hi - lo < cfg.min_length) return;
  std::string token(text.substr(word[lo].begin, word[hi - 1].end - word[lo].begin));
  if (cfg.lowercase) {
    for (char& c : token) {
      if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    }
  }
  if (cfg.stopwords.count(token)) return;
  out.push_back(std::move(token));
}

std::string doc_source_name(DocSource s) {
  return s == DocSource::original ? "original" : "informant_sentence";
}

}  // namespace

std::vector<std::string> tokenize(std::string_view text, const TokenizerConfig& cfg) {
  std::vector<std::string> out;
  std::vector<CodePoint> word;
  std::size_t i = 0;
  while (i < text.size()) {
    const std::size_t begin = i;
    const char32_t cp = next_code_point(text, i);
    if (is_unicode_space(cp)) {
      emit_token(text, word, cfg, out);
      word.clear();
    } else {
      word.push_back({begin, i, cp});
    }
  }
  emit_token(text, word, cfg, out);
  return out;
}

Vocabulary::Vocabulary(std::vector<std::string> tokens) {
  for (auto& t : tokens) {
    if (index_.count(t)) throw DataError("duplicate vocabulary token '" + t + "'");
    add(t);
  }
}

TokenId Vocabulary::add(const std::string& token) {
  auto [it, inserted] = index_.emplace(token, static_cast<TokenId>(tokens_.size()));
  if (inserted) tokens_.push_back(token);
  return it->second;
}

std::optional<TokenId> Vocabulary::find(const std::string& token) const {
  auto it = index_.find(token);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::size_t Document::length() const {
  std::size_t n = 0;
  for (const auto& [w, c] : counts) n += c;
  return n;
}

std::optional<std::size_t> Corpus::find_doc(const std::string& id) const {
  for (std::size_t d = 0; d < docs.size(); ++d) {
    if (docs[d].id == id) return d;
  }
  return std::nullopt;
}

void Corpus::validate() const {
  std::set<std::string> ids;
  for (const auto& doc : docs) {
    if (!ids.insert(doc.id).second) throw InvariantError("duplicate document id " + doc.id);
    if (doc.counts.empty()) throw InvariantError("empty document " + doc.id);
    for (const auto& [w, c] : doc.counts) {
      if (w >= vocab.size()) throw InvariantError("token id out of range in " + doc.id);
      if (c == 0) throw InvariantError("zero count in " + doc.id);
    }
    if ((doc.source == DocSource::informant_sentence) != doc.origin_topic.has_value()) {
      throw InvariantError("origin_topic must be set exactly for informant sentences: " + doc.id);
    }
  }
}

Corpus corpus_from_texts(const std::vector<std::pair<std::string, std::string>>& records,
                         const TokenizerConfig& cfg, IngestStats* stats) {
  Corpus corpus;
  std::set<std::string> seen;
  IngestStats local;
  for (const auto& [id, text] : records) {
    if (!seen.insert(id).second) throw DataError("duplicate document id '" + id + "'");
    ++local.records;
    Document doc;
    doc.id = id;
    for (const auto& tok : tokenize(text, cfg)) ++doc.counts[corpus.vocab.add(tok)];
    if (doc.counts.empty()) {
      local.empty_after_filtering.push_back(id);
      continue;
    }
    corpus.docs.push_back(std::move(doc));
  }
  if (corpus.docs.empty()) throw DataError("empty corpus");
  if (stats) *stats = std::move(local);
  return corpus;
}

Corpus ingest_transcripts(const std::filesystem::path& path, const TokenizerConfig& cfg,
                          IngestStats* stats) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read transcripts file " + path.string());
  std::vector<std::pair<std::string, std::string>> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error&) {
      throw DataError("line " + std::to_string(line_no) + ": malformed JSON");
    }
    if (!j.is_object() || !j.contains("id") || !j["id"].is_string() || !j.contains("text") ||
        !j["text"].is_string()) {
      throw DataError("line " + std::to_string(line_no) +
                      ": expected an object with string fields \"id\" and \"text\"");
    }
    records.emplace_back(j["id"].get<std::string>(), j["text"].get<std::string>());
  }
  return corpus_from_texts(records, cfg, stats);
}

Corpus augment_with_sentences(const Corpus& corpus, const Lens& lens, const TokenizerConfig& cfg) {
  if (lens.model_kind() != ModelKind::lda) {
    throw UsageError("sentence augmentation needs an LDA lens");
  }
  Corpus out = corpus;
  out.iteration_tag = corpus.iteration_tag + 1;
  std::set<std::string> ids;
  for (const auto& d : corpus.docs) ids.insert(d.id);
  for (const auto& [dim, judgment] : lens.assignments()) {
    if (judgment.sentences.empty()) continue;
    if (judgment.status == JudgmentStatus::discarded) {
      throw DataError("sentence references discarded dimension " + std::to_string(dim));
    }
    for (std::size_t s = 0; s < judgment.sentences.size(); ++s) {
      Document doc;
      doc.source = DocSource::informant_sentence;
      doc.origin_topic = dim;
      std::string id = "sentence-" + std::to_string(out.iteration_tag) + "-" +
                       std::to_string(dim) + "-" + std::to_string(s);
      for (int suffix = 1; ids.count(id); ++suffix) id += "~" + std::to_string(suffix);
      ids.insert(id);
      doc.id = id;
      for (const auto& tok : tokenize(judgment.sentences[s], cfg)) ++doc.counts[out.vocab.add(tok)];
      if (doc.counts.empty()) {
        throw DataError("sentence " + std::to_string(s) + " of dimension " + std::to_string(dim) +
                        " has no tokens after filtering");
      }
      out.docs.push_back(std::move(doc));
    }
  }
  return out;
}

json corpus_to_json(const Corpus& corpus) {
  json docs = json::array();
  for (const auto& doc : corpus.docs) {
    json counts = json::array();
    for (const auto& [w, c] : doc.counts) counts.push_back({w, c});
    json d = {{"id", doc.id}, {"counts", counts}, {"source", doc_source_name(doc.source)}};
    d["origin_topic"] = doc.origin_topic ? json(*doc.origin_topic) : json(nullptr);
    docs.push_back(std::move(d));
  }
  return {{"format", "lenskit-corpus"},
          {"version", 1},
          {"iteration_tag", corpus.iteration_tag},
          {"vocab", corpus.vocab.tokens()},
          {"docs", docs}};
}

Corpus corpus_from_json(const json& j) {
  Corpus corpus;
  try {
    corpus.iteration_tag = j.value("iteration_tag", 0);
    corpus.vocab = Vocabulary(j.at("vocab").get<std::vector<std::string>>());
    for (const auto& d : j.at("docs")) {
      Document doc;
      doc.id = d.at("id").get<std::string>();
      for (const auto& pair : d.at("counts")) {
        doc.counts[pair.at(0).get<TokenId>()] = pair.at(1).get<std::uint32_t>();
      }
      const std::string source = d.value("source", "original");
      if (source == "informant_sentence") {
        doc.source = DocSource::informant_sentence;
      } else if (source != "original") {
        throw DataError("unknown document source '" + source + "'");
      }
      if (d.contains("origin_topic") && !d["origin_topic"].is_null()) {
        doc.origin_topic = d["origin_topic"].get<std::uint32_t>();
      }
      corpus.docs.push_back(std::move(doc));
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed corpus JSON: ") + e.what());
  }
  try {
    corpus.validate();
  } catch (const InvariantError& e) {
    throw DataError(std::string("invalid corpus: ") + e.what());
  }
  return corpus;
}

BehaviorMatrix::BehaviorMatrix(std::vector<std::string> user_ids,
                               std::vector<std::string> factor_names,
                               std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs)
    : user_ids_(std::move(user_ids)), factor_names_(std::move(factor_names)) {
  const std::size_t m = user_ids_.size(), n = factor_names_.size();
  if (m == 0) throw DataError("behavior matrix has no users");
  if (n == 0) throw DataError("behavior matrix has no factors");
  for (const auto& [u, f] : pairs) {
    if (u >= m || f >= n) throw DataError("matrix entry index out of range");
  }
  std::sort(pairs.begin(), pairs.end());
  const std::size_t before = pairs.size();
  pairs.erase(std::unique(pairs.begin(), pairs.end()), pairs.end());
  duplicate_count_ = before - pairs.size();
  entries_ = std::move(pairs);

  user_offsets_.assign(m + 1, 0);
  factor_offsets_.assign(n + 1, 0);
  for (const auto& [u, f] : entries_) {
    ++user_offsets_[u + 1];
    ++factor_offsets_[f + 1];
  }
  std::partial_sum(user_offsets_.begin(), user_offsets_.end(), user_offsets_.begin());
  std::partial_sum(factor_offsets_.begin(), factor_offsets_.end(), factor_offsets_.begin());
  factor_index_.resize(entries_.size());
  std::vector<std::size_t> fill(factor_offsets_.begin(), factor_offsets_.end() - 1);
  for (std::size_t e = 0; e < entries_.size(); ++e) {
    factor_index_[fill[entries_[e].second]++] = static_cast<std::uint32_t>(e);
  }
}

bool BehaviorMatrix::contains(std::size_t m, std::size_t n) const {
  auto first = entries_.begin() + static_cast<std::ptrdiff_t>(user_offsets_[m]);
  auto last = entries_.begin() + static_cast<std::ptrdiff_t>(user_offsets_[m + 1]);
  return std::binary_search(first, last, std::make_pair(static_cast<std::uint32_t>(m),
                                                        static_cast<std::uint32_t>(n)));
}

std::optional<std::size_t> BehaviorMatrix::find_user(const std::string& id) const {
  auto it = std::find(user_ids_.begin(), user_ids_.end(), id);
  if (it == user_ids_.end()) return std::nullopt;
  return static_cast<std::size_t>(it - user_ids_.begin());
}

BehaviorMatrix parse_behavior_matrix(std::string_view text) {
  enum class Section { none, users, factors, entries } section = Section::none;
  std::vector<std::string> users, factors;
  std::unordered_map<std::string, std::uint32_t> user_index, factor_index;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs;
  std::size_t line_no = 0, pos = 0;
  auto fail = [&](const std::string& msg) {
    throw DataError("line " + std::to_string(line_no) + ": " + msg);
  };
  while (pos <= text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string_view::npos) eol = text.size();
    std::string line(text.substr(pos, eol - pos));
    pos = eol + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line == "#users") {
      if (section != Section::none) fail("#users block must come first");
      section = Section::users;
      continue;
    }
    if (line == "#factors") {
      if (section != Section::users) fail("#factors block must follow #users");
      section = Section::factors;
      continue;
    }
    if (line == "#entries") {
      if (section != Section::factors) fail("#entries must follow #factors");
      section = Section::entries;
      continue;
    }
    if (line[0] == '#') continue;  // comment
    if (section == Section::factors && line.find('\t') != std::string::npos) {
      section = Section::entries;
    }
    switch (section) {
      case Section::none:
        fail("expected #users header");
        break;
      case Section::users:
        if (!user_index.emplace(line, users.size()).second) fail("duplicate user id '" + line + "'");
        users.push_back(line);
        break;
      case Section::factors:
        if (!factor_index.emplace(line, factors.size()).second) {
          fail("duplicate factor id '" + line + "'");
        }
        factors.push_back(line);
        break;
      case Section::entries: {
        std::vector<std::string> cols;
        std::size_t start = 0;
        while (true) {
          std::size_t tab = line.find('\t', start);
          cols.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
          if (tab == std::string::npos) break;
          start = tab + 1;
        }
        if (cols.size() < 2 || cols.size() > 3) fail("expected user_id<TAB>factor_id");
        auto u = user_index.find(cols[0]);
        if (u == user_index.end()) fail("unknown user id '" + cols[0] + "'");
        auto f = factor_index.find(cols[1]);
        if (f == factor_index.end()) fail("unknown factor id '" + cols[1] + "'");
        if (cols.size() == 3) {
          if (cols[2] == "0") continue;
          if (cols[2] != "1") fail("entry value must be 0 or 1");
        }
        pairs.emplace_back(u->second, f->second);
        break;
      }
    }
  }
  return BehaviorMatrix(std::move(users), std::move(factors), std::move(pairs));
}

BehaviorMatrix ingest_behavior_matrix(const std::filesystem::path& path) {
  return parse_behavior_matrix(read_file(path));
}

std::string behavior_matrix_to_tsv(const BehaviorMatrix& matrix) {
  std::ostringstream out;
  out << "#users\n";
  for (const auto& u : matrix.user_ids()) out << u << '\n';
  out << "#factors\n";
  for (const auto& f : matrix.factor_names()) out << f << '\n';
  out << "#entries\n";
  for (const auto& [u, f] : matrix.entries()) {
    out << matrix.user_ids()[u] << '\t' << matrix.factor_names()[f] << '\n';
  }
  return out.str();
}

}  // namespace lenskit
