#pragma once

// Synthetic data shared by the unit tests and the acceptance runner.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "lenskit/corpus.hpp"
#include "lenskit/json_io.hpp"
#include "lenskit/random.hpp"

namespace fixtures {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    std::string tmpl = (fs::temp_directory_path() / "lenskit-test-XXXXXX").string();
    if (!::mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
    path_ = tmpl;
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

inline std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

using Records = std::vector<std::pair<std::string, std::string>>;

inline void write_jsonl(const fs::path& path, const Records& records) {
  std::string text;
  for (const auto& [id, body] : records) {
    text += lenskit::json{{"id", id}, {"text", body}}.dump() + "\n";
  }
  write_text(path, text);
}

// Documents drawn from `topics` disjoint word blocks. Document d uses block
// d % topics; each block has vocab / topics words named w<block>_<i>.
struct PlantedCorpus {
  Records records;
  std::vector<std::uint32_t> topic_of;
  std::vector<std::vector<std::string>> block_words;
};

inline PlantedCorpus planted_corpus(std::size_t docs, std::size_t vocab, std::size_t topics,
                                    std::size_t doc_len, std::uint64_t seed,
                                    const std::string& prefix = "d") {
  PlantedCorpus out;
  const std::size_t per_block = vocab / topics;
  for (std::size_t t = 0; t < topics; ++t) {
    std::vector<std::string> words;
    for (std::size_t i = 0; i < per_block; ++i) {
      words.push_back("w" + std::to_string(t) + "_" + std::to_string(i));
    }
    out.block_words.push_back(words);
  }
  lenskit::Rng rng(seed);
  for (std::size_t d = 0; d < docs; ++d) {
    const auto t = static_cast<std::uint32_t>(d % topics);
    std::string text;
    for (std::size_t i = 0; i < doc_len; ++i) {
      if (i) text += ' ';
      text += out.block_words[t][lenskit::uniform_index(rng, per_block)];
    }
    out.records.emplace_back(prefix + std::to_string(d), text);
    out.topic_of.push_back(t);
  }
  return out;
}

struct Triplets {
  std::size_t users = 0, factors = 0;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs;
};

inline lenskit::BehaviorMatrix to_matrix(const Triplets& t) {
  std::vector<std::string> users, factors;
  for (std::size_t m = 0; m < t.users; ++m) users.push_back("u" + std::to_string(m));
  for (std::size_t n = 0; n < t.factors; ++n) factors.push_back("f" + std::to_string(n));
  return lenskit::BehaviorMatrix(users, factors, t.pairs);
}

inline Triplets random_binary(std::size_t users, std::size_t factors, double density,
                              std::uint64_t seed) {
  Triplets t{users, factors, {}};
  lenskit::Rng rng(seed);
  for (std::uint32_t m = 0; m < users; ++m) {
    for (std::uint32_t n = 0; n < factors; ++n) {
      if (lenskit::uniform01(rng) < density) t.pairs.emplace_back(m, n);
    }
  }
  return t;
}

// Users in the first half favor the first half of the factors and vice versa.
inline Triplets planted_blocks(std::size_t users, std::size_t factors, double p_in,
                               double p_out, std::uint64_t seed) {
  Triplets t{users, factors, {}};
  lenskit::Rng rng(seed);
  for (std::uint32_t m = 0; m < users; ++m) {
    for (std::uint32_t n = 0; n < factors; ++n) {
      const bool same = (m < users / 2) == (n < factors / 2);
      if (lenskit::uniform01(rng) < (same ? p_in : p_out)) t.pairs.emplace_back(m, n);
    }
  }
  return t;
}

inline bool same_block(std::size_t m, std::size_t n, std::size_t users, std::size_t factors) {
  return (m < users / 2) == (n < factors / 2);
}

}  // namespace fixtures
