#include <cmath>
#include <numeric>

#include "lenskit/error.hpp"
#include "lenskit/lda.hpp"

namespace lenskit::lda {

namespace {

struct DocScore {
  double loglik = 0.0;
  std::size_t scored = 0;
  std::size_t oov = 0;
};

// Frozen topic-word probabilities shared read-only by every document.
struct FrozenTopics {
  std::size_t vocab_size;
  std::vector<std::uint32_t> topics;
  std::vector<double> alpha;  // restricted to `topics`
  std::vector<double> phi;    // topics.size() x vocab_size
};

FrozenTopics freeze(const TopicModelState& state, const HeldoutOptions& opts) {
  FrozenTopics f;
  f.vocab_size = state.vocab_size;
  f.topics = opts.topics;
  if (f.topics.empty()) {
    f.topics.resize(state.k);
    std::iota(f.topics.begin(), f.topics.end(), 0u);
  }
  for (auto t : f.topics) {
    if (t >= state.k) throw UsageError("held-out topic out of range");
    f.alpha.push_back(state.alpha[t]);
    const auto w = topic_word_weights(state, t);
    f.phi.insert(f.phi.end(), w.begin(), w.end());
  }
  return f;
}

DocScore score_document(const FrozenTopics& f, const Vocabulary& train_vocab,
                        const Vocabulary& doc_vocab, const Document& doc,
                        const HeldoutOptions& opts, std::uint64_t stream) {
  DocScore out;
  std::vector<TokenId> tokens;
  for (const auto& [w, c] : doc.counts) {
    const auto id = train_vocab.find(doc_vocab.token(w));
    if (!id) {
      out.oov += c;
      continue;
    }
    tokens.insert(tokens.end(), c, *id);
  }
  if (tokens.empty()) return out;

  Rng rng(mix_seed(opts.seed, stream));
  for (std::size_t i = tokens.size() - 1; i > 0; --i) {
    std::swap(tokens[i], tokens[uniform_index(rng, i + 1)]);
  }
  const std::size_t observed = tokens.size() / 2;
  const std::size_t kk = f.topics.size();
  const double asum = std::accumulate(f.alpha.begin(), f.alpha.end(), 0.0);

  std::vector<double> theta(kk, 0.0);
  if (observed == 0) {
    for (std::size_t t = 0; t < kk; ++t) theta[t] = f.alpha[t] / asum;
  } else {
    std::vector<std::uint32_t> z(observed), counts(kk, 0);
    for (std::size_t i = 0; i < observed; ++i) {
      z[i] = static_cast<std::uint32_t>(uniform_index(rng, kk));
      ++counts[z[i]];
    }
    std::vector<double> cumulative(kk);
    std::size_t samples = 0;
    const std::size_t sweeps = std::max(opts.fold_in_sweeps, opts.fold_in_burn_in + 1);
    for (std::size_t sweep = 0; sweep < sweeps; ++sweep) {
      for (std::size_t i = 0; i < observed; ++i) {
        --counts[z[i]];
        double total = 0.0;
        for (std::size_t t = 0; t < kk; ++t) {
          total += (counts[t] + f.alpha[t]) * f.phi[t * f.vocab_size + tokens[i]];
          cumulative[t] = total;
        }
        const double u = uniform01(rng) * total;
        std::size_t pick = kk - 1;
        for (std::size_t t = 0; t < kk; ++t) {
          if (u < cumulative[t]) {
            pick = t;
            break;
          }
        }
        z[i] = static_cast<std::uint32_t>(pick);
        ++counts[pick];
      }
      if (sweep >= opts.fold_in_burn_in) {
        for (std::size_t t = 0; t < kk; ++t) {
          theta[t] += (counts[t] + f.alpha[t]) / (static_cast<double>(observed) + asum);
        }
        ++samples;
      }
    }
    for (double& x : theta) x /= static_cast<double>(samples);
  }

  for (std::size_t i = observed; i < tokens.size(); ++i) {
    double p = 0.0;
    for (std::size_t t = 0; t < kk; ++t) p += theta[t] * f.phi[t * f.vocab_size + tokens[i]];
    out.loglik += std::log(p);
    ++out.scored;
  }
  return out;
}

HeldoutResult reduce(const std::vector<DocScore>& scores) {
  HeldoutResult r;
  r.documents = scores.size();
  for (const auto& s : scores) {
    r.total_loglik += s.loglik;
    r.scored_tokens += s.scored;
    r.oov_tokens += s.oov;
  }
  if (r.scored_tokens == 0) throw DataError("held-out set has no in-vocabulary tokens to score");
  r.per_token_loglik = r.total_loglik / static_cast<double>(r.scored_tokens);
  return r;
}

void check_inputs(const TopicModelState& state, const Vocabulary& train_vocab,
                  const Corpus& heldout) {
  if (heldout.docs.empty()) throw DataError("empty held-out set");
  if (train_vocab.size() != state.vocab_size) {
    throw UsageError("training vocabulary does not match the model");
  }
}

}  // namespace

HeldoutResult heldout_loglik(const TopicModelState& state, const Vocabulary& train_vocab,
                             const Corpus& heldout, const HeldoutOptions& opts) {
  check_inputs(state, train_vocab, heldout);
  const auto frozen = freeze(state, opts);
  const auto n = static_cast<std::ptrdiff_t>(heldout.num_docs());
  std::vector<DocScore> scores(heldout.num_docs());
#pragma omp parallel for schedule(dynamic, 4)
  for (std::ptrdiff_t d = 0; d < n; ++d) {
    scores[d] = score_document(frozen, train_vocab, heldout.vocab, heldout.docs[d], opts,
                               static_cast<std::uint64_t>(d));
  }
  return reduce(scores);
}

HeldoutResult heldout_loglik_serial(const TopicModelState& state, const Vocabulary& train_vocab,
                                    const Corpus& heldout, const HeldoutOptions& opts) {
  check_inputs(state, train_vocab, heldout);
  const auto frozen = freeze(state, opts);
  std::vector<DocScore> scores;
  for (std::size_t d = 0; d < heldout.num_docs(); ++d) {
    scores.push_back(score_document(frozen, train_vocab, heldout.vocab, heldout.docs[d], opts, d));
  }
  return reduce(scores);
}

}  // namespace lenskit::lda
