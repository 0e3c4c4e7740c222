#include <doctest.h>

#include <set>

#include "fixtures.hpp"
#include "lenskit/corpus.hpp"
#include "lenskit/error.hpp"
#include "lenskit/lens.hpp"

using namespace lenskit;

TEST_CASE("tokenize lowercases and strips punctuation") {
  TokenizerConfig cfg;
  CHECK(tokenize("Why does my MOM...", cfg) == std::vector<std::string>{"why", "does", "my", "mom"});
  CHECK(tokenize("", cfg).empty());
  cfg.stopwords = {"imo", "fyi"};
  CHECK(tokenize("IMO, FYI!!", cfg).empty());
}

TEST_CASE("tokenize handles unicode whitespace, punctuation and length filter") {
  TokenizerConfig cfg;
  CHECK(tokenize("caf\xC3\xA9\xE2\x80\x83ok\xE2\x80\x9D", cfg) == std::vector<std::string>{"caf\xC3\xA9", "ok"});
  CHECK(tokenize("\xE2\x80\x9Cquoted\xE2\x80\x9D (paren)", cfg) == std::vector<std::string>{"quoted", "paren"});
  cfg.min_length = 3;
  CHECK(tokenize("a an the \xC3\xA9t\xC3\xA9", cfg) == std::vector<std::string>{"the", "\xC3\xA9t\xC3\xA9"});
  cfg.min_length = 1;
  cfg.lowercase = false;
  CHECK(tokenize("Mom mom", cfg) == std::vector<std::string>{"Mom", "mom"});
  CHECK(tokenize("... !!! ,", TokenizerConfig{}).empty());
}

TEST_CASE("ingest counts tokens per document") {
  fixtures::TempDir dir;
  fixtures::write_jsonl(dir / "c.jsonl", {{"a", "sad sad day"}, {"b", "day off"}});
  const Corpus c = ingest_transcripts(dir / "c.jsonl", TokenizerConfig{});
  REQUIRE(c.num_docs() == 2);
  CHECK(c.vocab.tokens() == std::vector<std::string>{"sad", "day", "off"});
  const auto sad = *c.vocab.find("sad"), day = *c.vocab.find("day"), off = *c.vocab.find("off");
  CHECK(c.docs[0].counts == std::map<TokenId, std::uint32_t>{{sad, 2}, {day, 1}});
  CHECK(c.docs[1].counts == std::map<TokenId, std::uint32_t>{{day, 1}, {off, 1}});
  CHECK(c.docs[0].length() == 3);
}

TEST_CASE("ingest rejects bad input") {
  fixtures::TempDir dir;
  fixtures::write_text(dir / "empty.jsonl", "");
  CHECK_THROWS_WITH_AS(ingest_transcripts(dir / "empty.jsonl", {}), "empty corpus", DataError);
  CHECK_THROWS_AS(ingest_transcripts(dir / "missing.jsonl", {}), DataError);
  fixtures::write_text(dir / "bad.jsonl", "{\"id\":\"a\",\"text\":\"x\"}\n{not json}\n");
  CHECK_THROWS_WITH_AS(ingest_transcripts(dir / "bad.jsonl", {}), doctest::Contains("line 2"), DataError);
  fixtures::write_text(dir / "dup.jsonl", "{\"id\":\"a\",\"text\":\"x\"}\n{\"id\":\"a\",\"text\":\"y\"}\n");
  CHECK_THROWS_AS(ingest_transcripts(dir / "dup.jsonl", {}), DataError);
  fixtures::write_text(dir / "shape.jsonl", "{\"id\":1,\"text\":\"x\"}\n");
  CHECK_THROWS_AS(ingest_transcripts(dir / "shape.jsonl", {}), DataError);
}

TEST_CASE("documents empty after filtering are dropped and reported") {
  TokenizerConfig cfg;
  cfg.stopwords = {"imo"};
  IngestStats stats;
  const Corpus c = corpus_from_texts({{"a", "IMO"}, {"b", "real words"}}, cfg, &stats);
  CHECK(c.num_docs() == 1);
  CHECK(stats.records == 2);
  CHECK(stats.empty_after_filtering == std::vector<std::string>{"a"});
  CHECK_THROWS_WITH_AS(corpus_from_texts({{"a", "IMO"}}, cfg), "empty corpus", DataError);
}

TEST_CASE("100 synthetic transcripts over a 50-word vocabulary") {
  const auto planted = fixtures::planted_corpus(100, 50, 5, 12, 7);
  std::set<std::string> distinct;
  for (const auto& [id, text] : planted.records) {
    for (const auto& t : tokenize(text, {})) distinct.insert(t);
  }
  const Corpus c = corpus_from_texts(planted.records, {});
  CHECK(c.num_docs() == 100);
  CHECK(c.vocab_size() <= 50);
  CHECK(c.vocab_size() == distinct.size());
}

TEST_CASE("token counts are conserved and JSON round-trips exactly") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto planted = fixtures::planted_corpus(15, 30, 3, 5 + seed % 7, seed);
    const Corpus c = corpus_from_texts(planted.records, {});
    for (std::size_t d = 0; d < c.num_docs(); ++d) {
      CHECK(c.docs[d].length() == tokenize(planted.records[d].second, {}).size());
    }
    const Corpus back = corpus_from_json(json::parse(corpus_to_json(c).dump()));
    CHECK(back == c);
  }
}

TEST_CASE("augment_with_sentences appends informant documents") {
  const auto planted = fixtures::planted_corpus(100, 20, 2, 10, 3);
  const Corpus c = corpus_from_texts(planted.records, {});
  Lens lens(ModelKind::lda, 3);
  lens = lens.record_judgment(0, DimensionJudgment::labeled("alpha", {"w0_1 w0_2", "w0_3 novelone"}))
             .record_judgment(1, DimensionJudgment::labeled("beta", {"w1_1", "w1_2 novelone"}))
             .record_judgment(2, DimensionJudgment::labeled("gamma", {"w0_1 noveltwo", "w1_1"}));
  const Corpus plus = augment_with_sentences(c, lens, {});
  CHECK(plus.num_docs() == c.num_docs() + 6);
  CHECK(plus.vocab_size() == c.vocab_size() + 2);
  CHECK(plus.iteration_tag == c.iteration_tag + 1);
  for (TokenId w = 0; w < c.vocab_size(); ++w) CHECK(plus.vocab.token(w) == c.vocab.token(w));
  const auto& last = plus.docs.back();
  CHECK(last.source == DocSource::informant_sentence);
  CHECK(last.origin_topic == std::optional<std::uint32_t>(2));
  plus.validate();

  const Corpus same = augment_with_sentences(c, Lens(ModelKind::lda, 3), {});
  Corpus expected = c;
  expected.iteration_tag += 1;
  CHECK(same == expected);

  Lens reuse = Lens(ModelKind::lda, 2).record_judgment(0, DimensionJudgment::labeled("x", {"w0_0 w1_0"}));
  CHECK(augment_with_sentences(c, reuse, {}).vocab_size() == c.vocab_size());

  Lens empty_sentence = Lens(ModelKind::lda, 2).record_judgment(0, DimensionJudgment::labeled("x", {"!!!"}));
  CHECK_THROWS_AS(augment_with_sentences(c, empty_sentence, {}), DataError);
}

TEST_CASE("augmentation is vocabulary-monotone over random lenses") {
  Rng rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    const auto planted = fixtures::planted_corpus(10, 12, 2, 6, 100 + trial);
    Corpus c = corpus_from_texts(planted.records, {});
    for (int round = 0; round < 3; ++round) {
      Lens lens(ModelKind::lda, 4);
      for (std::uint32_t d = 0; d < 4; ++d) {
        std::vector<std::string> sentences;
        const auto n = uniform_index(rng, 3);
        for (std::uint64_t s = 0; s < n; ++s) {
          sentences.push_back("w0_" + std::to_string(uniform_index(rng, 6)) + " fresh" +
                              std::to_string(uniform_index(rng, 50)));
        }
        lens = lens.record_judgment(d, DimensionJudgment::labeled("l" + std::to_string(d), sentences));
      }
      const Corpus next = augment_with_sentences(c, lens, {});
      for (TokenId w = 0; w < c.vocab_size(); ++w) REQUIRE(*next.vocab.find(c.vocab.token(w)) == w);
      for (std::size_t d = 0; d < c.num_docs(); ++d) REQUIRE(next.docs[d] == c.docs[d]);
      c = next;
    }
  }
}

TEST_CASE("behavior matrix TSV") {
  const std::string tsv =
      "#users\nu1\nu2\nu3\n#factors\nf1\nf2\nf3\nf4\n#entries\n"
      "u1\tf1\nu1\tf3\nu2\tf2\nu3\tf4\nu3\tf1\n";
  const auto m = parse_behavior_matrix(tsv);
  CHECK(m.n_users() == 3);
  CHECK(m.n_factors() == 4);
  CHECK(m.nnz() == 5);
  CHECK(m.duplicate_count() == 0);
  CHECK(m.contains(2, 0));
  CHECK_FALSE(m.contains(1, 0));
  CHECK(parse_behavior_matrix(behavior_matrix_to_tsv(m)) == m);

  CHECK_THROWS_WITH_AS(parse_behavior_matrix("#users\nu1\n#factors\nf1\nu1\tf9\n"),
                       doctest::Contains("unknown factor"), DataError);
  const auto dup = parse_behavior_matrix("#users\nu1\n#factors\nf1\nu1\tf1\nu1\tf1\n");
  CHECK(dup.nnz() == 1);
  CHECK(dup.duplicate_count() == 1);
  const auto valued = parse_behavior_matrix("#users\nu1\n# note\n#factors\nf1\nf2\nu1\tf1\t1\nu1\tf2\t0\n");
  CHECK(valued.nnz() == 1);
  CHECK_THROWS_AS(parse_behavior_matrix("#users\nu1\n#factors\nf1\nu1\tf1\t3\n"), DataError);
  CHECK_THROWS_AS(parse_behavior_matrix("u1\tf1\n"), DataError);
  CHECK_THROWS_AS(parse_behavior_matrix("#users\n#factors\nf1\n"), DataError);
  CHECK_THROWS_AS(parse_behavior_matrix("#users\nu1\nu1\n#factors\nf1\n"), DataError);
}

TEST_CASE("behavior matrix CSR views agree with the entry list") {
  const auto t = fixtures::random_binary(17, 11, 0.3, 5);
  const auto m = fixtures::to_matrix(t);
  std::size_t seen = 0;
  for (std::size_t n = 0; n < m.n_factors(); ++n) {
    auto [b, e] = m.factor_entries(n);
    std::uint32_t prev_user = 0;
    for (auto p = b; p != e; ++p) {
      CHECK(m.entries()[*p].second == n);
      if (p != b) CHECK(m.entries()[*p].first > prev_user);
      prev_user = m.entries()[*p].first;
      ++seen;
    }
  }
  CHECK(seen == m.nnz());
  for (std::size_t u = 0; u < m.n_users(); ++u) {
    for (std::size_t e = m.user_begin(u); e < m.user_begin(u + 1); ++e) CHECK(m.entries()[e].first == u);
  }
}
