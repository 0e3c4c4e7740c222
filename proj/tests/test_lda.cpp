#include <doctest.h>
#include <omp.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fixtures.hpp"
#include "lda_oracle.hpp"
#include "lenskit/error.hpp"
#include "lenskit/lda.hpp"

using namespace lenskit;
using namespace lenskit::lda;

namespace {

LdaConfig plain(std::size_t k, std::size_t sweeps, std::uint64_t seed = 1) {
  LdaConfig c;
  c.k = k;
  c.sweeps = sweeps;
  c.burn_in = sweeps > 0 ? sweeps / 4 : 0;
  c.hyper_opt_interval = 0;
  c.seed = seed;
  return c;
}

// Hand-built state for checking formulas against fixed tables.
TopicModelState table_state(std::size_t k, std::size_t vocab, std::vector<std::uint32_t> n_dk,
                            std::vector<std::uint32_t> n_kw, std::vector<double> alpha, double eta) {
  TopicModelState s;
  s.k = k;
  s.vocab_size = vocab;
  s.n_dk = std::move(n_dk);
  s.n_kw = std::move(n_kw);
  s.n_k.assign(k, 0);
  for (std::size_t t = 0; t < k; ++t) {
    for (std::size_t w = 0; w < vocab; ++w) s.n_k[t] += s.n_kw[t * vocab + w];
  }
  s.alpha = std::move(alpha);
  s.eta = eta;
  const std::size_t docs = s.n_dk.size() / k;
  for (std::size_t d = 0; d < docs; ++d) {
    std::uint32_t len = 0;
    for (std::size_t t = 0; t < k; ++t) len += s.n_dk[d * k + t];
    s.words.emplace_back(len, 0);
    s.z.emplace_back(len, 0);
  }
  return s;
}

std::vector<std::uint32_t> flatten(const std::vector<std::vector<std::uint32_t>>& rows) {
  std::vector<std::uint32_t> out;
  for (const auto& r : rows) out.insert(out.end(), r.begin(), r.end());
  return out;
}

}  // namespace

TEST_CASE("config validation") {
  LdaConfig c;
  c.k = 1;
  CHECK_THROWS_AS(c.validate(), UsageError);
  c = LdaConfig{};
  c.burn_in = c.sweeps;
  CHECK_THROWS_AS(c.validate(), UsageError);
  c = LdaConfig{};
  c.eta = 0;
  CHECK_THROWS_AS(c.validate(), UsageError);
  CHECK(LdaConfig::from_json(LdaConfig{}.to_json()).to_json() == LdaConfig{}.to_json());
}

TEST_CASE("one-document corpus keeps consistent counts") {
  const Corpus c = corpus_from_texts({{"only", "a b a c"}}, {});
  auto s = init_state(c, plain(2, 0));
  s.check_invariants();
  run_sweeps(s, plain(2, 5), full_mask(1, 2));
  s.check_invariants();
  CHECK(s.sweep_count == 5);
}

TEST_CASE("zero sweeps leave the state unchanged") {
  const auto planted = fixtures::planted_corpus(6, 8, 2, 5, 1);
  const Corpus c = corpus_from_texts(planted.records, {});
  const auto s0 = init_state(c, plain(3, 0));
  auto s1 = s0;
  run_sweeps(s1, plain(3, 0), full_mask(c.num_docs(), 3));
  CHECK(s1 == s0);
}

TEST_CASE("a singleton lens forces initial assignments") {
  const Corpus c = corpus_from_texts({{"a", "x y z"}, {"b", "y z"}}, {});
  Lens lens = Lens(ModelKind::lda, 3)
                  .record_judgment(0, DimensionJudgment::labeled("zero"))
                  .record_judgment(1, DimensionJudgment::labeled("one"))
                  .record_judgment(2, DimensionJudgment::labeled("two"));
  lens = lens.build_item_labels({{"a", {0.1, 0.8, 0.1}}, {"b", {0.4, 0.3, 0.3}}});
  const auto s = init_state(c, plain(3, 0), &lens);
  for (auto t : s.z[0]) CHECK(t == 1);
}

TEST_CASE("gibbs_conditional examples") {
  auto zero = table_state(2, 3, {0, 0}, {0, 0, 0, 0, 0, 0}, {0.5, 0.5}, 0.1);
  const std::vector<std::uint32_t> both{0, 1};
  auto p = gibbs_conditional(zero, 0, 1, both);
  CHECK(p[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(p[1] == doctest::Approx(0.5).epsilon(1e-15));

  // weights (2+1)(1+1)/(3+2) = 1.2 and (0+1)(0+1)/(0+2) = 0.5
  auto s = table_state(2, 2, {2, 0}, {1, 2, 0, 0}, {1.0, 1.0}, 1.0);
  p = gibbs_conditional(s, 0, 0, both);
  CHECK(p[0] == doctest::Approx(12.0 / 17.0).epsilon(1e-14));
  CHECK(p[1] == doctest::Approx(5.0 / 17.0).epsilon(1e-14));
  CHECK(std::abs(p[0] - 0.7059) < 5e-5);

  const std::vector<std::uint32_t> only0{0};
  p = gibbs_conditional(s, 0, 0, only0);
  CHECK(p == std::vector<double>{1.0, 0.0});
}

TEST_CASE("gibbs_conditional matches ratios of the brute-force joint") {
  Rng rng(2024);
  for (int trial = 0; trial < 40; ++trial) {
    lda_oracle::MicroCorpus mc;
    mc.k = 2 + uniform_index(rng, 3);
    mc.vocab = 2 + uniform_index(rng, 3);
    mc.eta = 0.05 + uniform01(rng);
    for (std::size_t t = 0; t < mc.k; ++t) mc.alpha.push_back(0.1 + uniform01(rng));
    std::vector<std::vector<std::uint32_t>> z;
    const std::size_t docs = 1 + uniform_index(rng, 3);
    for (std::size_t d = 0; d < docs; ++d) {
      std::vector<std::uint32_t> words, zd;
      const std::size_t len = 1 + uniform_index(rng, 4);
      for (std::size_t i = 0; i < len; ++i) {
        words.push_back(static_cast<std::uint32_t>(uniform_index(rng, mc.vocab)));
        zd.push_back(static_cast<std::uint32_t>(uniform_index(rng, mc.k)));
      }
      std::sort(words.begin(), words.end());
      mc.docs.push_back(words);
      z.push_back(zd);
    }
    TopicModelState s;
    s.k = mc.k;
    s.vocab_size = mc.vocab;
    s.alpha = mc.alpha;
    s.eta = mc.eta;
    s.words = mc.docs;
    s.z = z;
    s.n_dk.assign(docs * mc.k, 0);
    s.n_kw.assign(mc.k * mc.vocab, 0);
    s.n_k.assign(mc.k, 0);
    for (std::size_t d = 0; d < docs; ++d) {
      for (std::size_t i = 0; i < z[d].size(); ++i) {
        ++s.n_dk[d * mc.k + z[d][i]];
        ++s.n_kw[z[d][i] * mc.vocab + mc.docs[d][i]];
        ++s.n_k[z[d][i]];
      }
    }
    // Remove token (0, 0) and compare against the joint over its values.
    const auto w = mc.docs[0][0];
    const auto t0 = z[0][0];
    --s.n_dk[t0];
    --s.n_kw[t0 * mc.vocab + w];
    --s.n_k[t0];
    std::vector<std::uint32_t> all(mc.k);
    std::iota(all.begin(), all.end(), 0u);
    const auto p = gibbs_conditional(s, 0, w, all);
    std::vector<double> lj(mc.k);
    for (std::uint32_t t = 0; t < mc.k; ++t) {
      auto zz = z;
      zz[0][0] = t;
      lj[t] = lda_oracle::log_joint(mc, zz);
    }
    const double mx = *std::max_element(lj.begin(), lj.end());
    double total = 0.0;
    for (auto& v : lj) total += (v = std::exp(v - mx));
    double psum = 0.0;
    for (std::uint32_t t = 0; t < mc.k; ++t) {
      REQUIRE(p[t] == doctest::Approx(lj[t] / total).epsilon(1e-10));
      psum += p[t];
    }
    REQUIRE(std::abs(psum - 1.0) < 1e-12);

    if (mc.k > 2) {
      const std::vector<std::uint32_t> some{0, 2};
      const auto q = gibbs_conditional(s, 0, w, some);
      REQUIRE(q[1] == 0.0);
      REQUIRE(std::abs(q[0] + q[2] - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("training is deterministic for a seed and sensitive to it") {
  const auto planted = fixtures::planted_corpus(20, 20, 2, 15, 9);
  const Corpus c = corpus_from_texts(planted.records, {});
  LdaConfig cfg = plain(3, 40, 77);
  cfg.hyper_opt_interval = 5;
  cfg.average_interval = 3;
  const auto a = train(c, cfg);
  const auto b = train(c, cfg);
  CHECK(a == b);
  CHECK(snapshot_to_json(a, cfg).dump() == snapshot_to_json(b, cfg).dump());
  cfg.seed = 78;
  CHECK_FALSE(train(c, cfg).z == a.z);
}

TEST_CASE("planted topics are recovered") {
  const auto planted = fixtures::planted_corpus(40, 20, 2, 40, 5);
  const Corpus c = corpus_from_texts(planted.records, {});
  const auto s = train(c, plain(2, 200, 3));
  std::size_t agree = 0;
  for (std::size_t d = 0; d < c.num_docs(); ++d) {
    const auto p = doc_topic_proportions(s, d);
    const auto arg = static_cast<std::uint32_t>(std::max_element(p.begin(), p.end()) - p.begin());
    agree += arg == planted.topic_of[d];
  }
  CHECK(std::max(agree, c.num_docs() - agree) >= 36);
}

TEST_CASE("lensed training never leaves the allowed sets") {
  const auto planted = fixtures::planted_corpus(30, 20, 2, 20, 4);
  const Corpus c = corpus_from_texts(planted.records, {});
  Lens lens = Lens(ModelKind::lda, 4)
                  .record_judgment(0, DimensionJudgment::labeled("zero"))
                  .record_judgment(1, DimensionJudgment::labeled("one"))
                  .record_judgment(3, DimensionJudgment::discarded());
  std::map<std::string, std::vector<double>> items;
  for (std::size_t d = 0; d < c.num_docs(); ++d) {
    if (d % 3 == 0) items[c.docs[d].id] = {0.9, 0.05, 0.03, 0.02};
    else if (d % 3 == 1) items[c.docs[d].id] = {0.05, 0.9, 0.03, 0.02};
    else items[c.docs[d].id] = {0.1, 0.1, 0.7, 0.1};
  }
  lens = lens.build_item_labels(items);
  const auto mask = allowed_topics(c, &lens, 4);
  LdaConfig cfg = plain(4, 60, 5);
  cfg.hyper_opt_interval = 10;
  auto s = init_state(c, cfg, mask);
  run_sweeps(s, cfg, mask, [&](const TopicModelState& st) {
    for (std::size_t d = 0; d < st.num_docs(); ++d) {
      for (std::uint32_t t = 0; t < 4; ++t) {
        if (std::find(mask[d].begin(), mask[d].end(), t) == mask[d].end()) {
          REQUIRE(st.doc_topic(d, t) == 0);
        }
      }
    }
  });
  CHECK(s.n_k[3] == 0);
  for (std::size_t d = 0; d < c.num_docs(); ++d) {
    if (mask[d].size() == 1) {
      const auto p = doc_topic_proportions(s, d);
      CHECK(std::max_element(p.begin(), p.end()) - p.begin() == mask[d][0]);
    }
  }
}

TEST_CASE("sentences are pinned to their origin topic") {
  Corpus c = corpus_from_texts({{"a", "x y"}, {"b", "y z"}}, {});
  Lens lens = Lens(ModelKind::lda, 3)
                  .record_judgment(0, DimensionJudgment::labeled("zero"))
                  .record_judgment(2, DimensionJudgment::labeled("two", {"x z"}))
                  .record_judgment(1, DimensionJudgment::discarded());
  lens = lens.build_item_labels({{"a", {0.2, 0.2, 0.6}}, {"b", {0.1, 0.1, 0.8}}});
  const Corpus plus = augment_with_sentences(c, lens, {});
  const auto mask = allowed_topics(plus, &lens, 3);
  CHECK(mask[2] == std::vector<std::uint32_t>{2});
  CHECK(mask[0] == std::vector<std::uint32_t>{2});
  Lens wrong(ModelKind::lda, 4);
  CHECK_THROWS_AS(allowed_topics(plus, &wrong, 3), UsageError);
}

TEST_CASE("optimize_alpha against the independent oracle") {
  const auto skewed = flatten({{9, 1}, {8, 2}, {9, 1}});
  const std::vector<double> ones{1.0, 1.0};
  const auto next = optimize_alpha(skewed, 2, ones);
  CHECK(next[0] == doctest::Approx(1.3822280961821238).epsilon(1e-12));
  CHECK(next[1] == doctest::Approx(0.5775928274186921).epsilon(1e-12));
  CHECK(next[0] / next[1] > 1.0);
  CHECK(dirichlet_multinomial_log_evidence(skewed, 2, next) >=
        dirichlet_multinomial_log_evidence(skewed, 2, ones));

  const auto sym = flatten({{3, 3}, {5, 5}, {1, 1}});
  const auto s2 = optimize_alpha(sym, 2, std::vector<double>{0.7, 0.7});
  CHECK(s2[0] == s2[1]);

  struct Case {
    std::vector<std::vector<std::uint32_t>> table;
    std::vector<double> expect;
  };
  const std::vector<Case> cases{
      {{{10, 0}, {9, 1}, {3, 7}, {8, 2}, {0, 10}, {10, 0}}, {0.43919068603406397, 0.2501297425858678}},
      {{{6, 0, 1}, {0, 5, 2}, {7, 1, 0}, {1, 1, 5}, {9, 0, 0}, {2, 6, 1}},
       {0.7956417847441061, 0.46163372827911936, 0.41218895757611174}},
      {{{12, 2}, {1, 11}, {14, 0}, {13, 3}, {2, 9}, {11, 1}, {15, 0}}, {0.7608515483641803, 0.3411350633572842}},
  };
  for (const auto& cs : cases) {
    const auto table = flatten(cs.table);
    const std::size_t k = cs.expect.size();
    std::vector<double> a(k, 0.5);
    for (int i = 0; i < 200; ++i) {
      auto n = optimize_alpha(table, k, a);
      double rel = 0.0;
      for (std::size_t t = 0; t < k; ++t) rel = std::max(rel, std::abs(n[t] - a[t]) / a[t]);
      a = n;
      if (rel < 1e-6) break;
    }
    for (std::size_t t = 0; t < k; ++t) CHECK(a[t] == doctest::Approx(cs.expect[t]).epsilon(1e-5));
    const auto again = optimize_alpha(table, k, a);
    for (std::size_t t = 0; t < k; ++t) CHECK(std::abs(again[t] - a[t]) / a[t] < 1e-6);
  }
}

TEST_CASE("optimize_alpha edge cases") {
  const std::vector<std::uint32_t> empty(6, 0);
  const std::vector<double> a{0.3, 0.3};
  CHECK(optimize_alpha(empty, 2, a) == a);
  CHECK_THROWS_AS(optimize_alpha(empty, 3, a), UsageError);
  const Corpus c = corpus_from_texts({{"a", "x y"}}, {});
  CHECK_THROWS_AS(optimize_alpha(init_state(c, plain(2, 0))), StateError);
}

TEST_CASE("top words and topic weights") {
  auto s = table_state(2, 3, {5, 0}, {5, 0, 0, 0, 0, 0}, {1.0, 1.0}, 0.01);
  Vocabulary v(std::vector<std::string>{"mom", "dad", "sis"});
  const auto top = top_words(s, v, 0, 20);
  CHECK(top.size() == 3);
  CHECK(top[0].first == "mom");
  for (std::size_t t = 0; t < 2; ++t) {
    const auto w = topic_word_weights(s, t);
    CHECK(std::abs(std::accumulate(w.begin(), w.end(), 0.0) - 1.0) < 1e-9);
  }
  CHECK(top_words(s, v, 1, 2).size() == 2);
  CHECK_THROWS_AS(top_words(s, v, 2), UsageError);
}

TEST_CASE("doc_topic_proportions examples and normalization") {
  auto s = table_state(4, 1, {0, 0, 0, 0}, {0, 0, 0, 0}, {0.5, 0.5, 0.5, 0.5}, 0.1);
  for (double p : doc_topic_proportions(s, 0)) CHECK(p == doctest::Approx(0.25).epsilon(1e-15));
  auto s2 = table_state(2, 1, {3, 1}, {3, 1}, {1.0, 1.0}, 0.1);
  const auto p2 = doc_topic_proportions(s2, 0);
  CHECK(p2[0] == doctest::Approx(4.0 / 6.0).epsilon(1e-15));
  CHECK(p2[1] == doctest::Approx(2.0 / 6.0).epsilon(1e-15));

  const auto planted = fixtures::planted_corpus(12, 10, 2, 8, 3);
  const Corpus c = corpus_from_texts(planted.records, {});
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    LdaConfig cfg = plain(3, 12, seed);
    cfg.average_interval = 2;
    const auto st = train(c, cfg);
    for (std::size_t d = 0; d < c.num_docs(); ++d) {
      for (auto est : {PointEstimate::final_state, PointEstimate::averaged}) {
        const auto p = doc_topic_proportions(st, d, est);
        REQUIRE(std::abs(std::accumulate(p.begin(), p.end(), 0.0) - 1.0) < 1e-12);
      }
    }
  }
}

TEST_CASE("held-out log-likelihood degenerate models") {
  auto certain = table_state(1, 1, {4}, {4}, {1.0}, 0.5);
  const Vocabulary v1(std::vector<std::string>{"w"});
  const Corpus h1 = corpus_from_texts({{"h", "w w"}}, {});
  const auto r1 = heldout_loglik(certain, v1, h1, {});
  CHECK(r1.per_token_loglik == 0.0);
  CHECK(r1.scored_tokens == 1);

  auto uniform = table_state(2, 5, {0, 0}, std::vector<std::uint32_t>(10, 0), {0.5, 0.5}, 0.1);
  const Vocabulary v5(std::vector<std::string>{"a", "b", "c", "d", "e"});
  const Corpus h5 = corpus_from_texts({{"h1", "a b c d"}, {"h2", "e e a zz"}}, {});
  const auto r5 = heldout_loglik(uniform, v5, h5, {});
  CHECK(r5.per_token_loglik == doctest::Approx(-std::log(5.0)).epsilon(1e-12));
  CHECK(r5.oov_tokens == 1);

  CHECK_THROWS_AS(heldout_loglik(uniform, v5, corpus_from_texts({{"h", "zz"}}, {}), {}), DataError);
}

TEST_CASE("held-out: matched topics beat permuted topics") {
  const auto train_set = fixtures::planted_corpus(40, 20, 2, 30, 21);
  const auto held = fixtures::planted_corpus(20, 20, 2, 30, 22, "h");
  const Corpus c = corpus_from_texts(train_set.records, {});
  const Corpus h = corpus_from_texts(held.records, {});
  const auto s = train(c, plain(2, 150, 4));
  // Scramble the topic-word table so topics no longer match documents.
  auto scrambled = s;
  Rng rng(5);
  for (std::size_t t = 0; t < s.k; ++t) {
    std::vector<std::uint32_t> row(s.n_kw.begin() + t * s.vocab_size, s.n_kw.begin() + (t + 1) * s.vocab_size);
    for (std::size_t i = row.size() - 1; i > 0; --i) std::swap(row[i], row[uniform_index(rng, i + 1)]);
    std::copy(row.begin(), row.end(), scrambled.n_kw.begin() + t * s.vocab_size);
  }
  const auto good = heldout_loglik(s, c.vocab, h, {});
  const auto bad = heldout_loglik(scrambled, c.vocab, h, {});
  CHECK(good.per_token_loglik > bad.per_token_loglik);
}

TEST_CASE("parallel held-out scoring equals the serial reference") {
  const auto train_set = fixtures::planted_corpus(30, 24, 3, 20, 1);
  const auto held = fixtures::planted_corpus(25, 24, 3, 17, 2, "h");
  const Corpus c = corpus_from_texts(train_set.records, {});
  const Corpus h = corpus_from_texts(held.records, {});
  const auto s = train(c, plain(3, 50, 8));
  HeldoutOptions opts;
  opts.fold_in_sweeps = 20;
  opts.fold_in_burn_in = 5;
  opts.topics = {0, 2};
  const auto serial = heldout_loglik_serial(s, c.vocab, h, opts);
  for (int threads : {1, 2, 4}) {
    omp_set_num_threads(threads);
    const auto par = heldout_loglik(s, c.vocab, h, opts);
    CHECK(par.total_loglik == serial.total_loglik);
    CHECK(par.scored_tokens == serial.scored_tokens);
  }
}

TEST_CASE("snapshots round-trip and are validated") {
  const auto planted = fixtures::planted_corpus(10, 12, 2, 9, 4);
  const Corpus c = corpus_from_texts(planted.records, {});
  LdaConfig cfg = plain(3, 20, 6);
  cfg.average_interval = 2;
  auto s = train(c, cfg);
  LdaConfig back_cfg;
  const auto back = snapshot_from_json(json::parse(snapshot_to_json(s, cfg).dump()), c, &back_cfg);
  CHECK(back == s);
  CHECK(back_cfg.to_json() == cfg.to_json());

  // Resuming from a snapshot continues the same chain.
  LdaConfig more = cfg;
  more.sweeps = 5;
  more.burn_in = 0;
  auto resumed = back;
  auto cont = s;
  const auto mask = full_mask(c.num_docs(), 3);
  run_sweeps(resumed, more, mask);
  run_sweeps(cont, more, mask);
  CHECK(resumed == cont);

  json broken = snapshot_to_json(s, cfg);
  broken["z"][0][0] = (broken["z"][0][0].get<int>() + 1) % 3;
  CHECK_THROWS_AS(snapshot_from_json(broken, c), DataError);
  const Corpus other = corpus_from_texts({{"x", "a b"}}, {});
  CHECK_THROWS_AS(snapshot_from_json(snapshot_to_json(s, cfg), other), DataError);
}
