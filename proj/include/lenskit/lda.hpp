#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lenskit/corpus.hpp"
#include "lenskit/json_io.hpp"
#include "lenskit/lens.hpp"
#include "lenskit/random.hpp"

namespace lenskit::lda {

struct LdaConfig {
  std::size_t k = 10;
  double alpha_init = 0.1;  // expanded to a length-k vector
  double eta = 0.01;
  std::size_t sweeps = 200;
  std::size_t burn_in = 50;
  std::size_t hyper_opt_interval = 10;  // sweeps between alpha updates; 0 = off
  std::size_t hyper_opt_steps = 5;     // fixed-point steps per update
  std::size_t average_interval = 0;    // thinning for averaged estimates; 0 = off
  std::uint64_t seed = 1;

  void validate() const;
  json to_json() const;
  static LdaConfig from_json(const json& j);
};

// Allowed topics per document, ascending. Every entry is nonempty.
using TopicMask = std::vector<std::vector<std::uint32_t>>;

// Unconstrained mask (every document may use all k topics).
TopicMask full_mask(std::size_t num_docs, std::size_t k);

// Lens restriction: informant sentences are pinned to their origin topic,
// labeled documents to lens.allowed_dims, and everything else to the
// non-discarded topics. Without a lens the mask is full.
TopicMask allowed_topics(const Corpus& corpus, const Lens* lens, std::size_t k);

struct TopicModelState {
  std::size_t k = 0;
  std::size_t vocab_size = 0;
  std::vector<std::vector<TokenId>> words;  // token sequence per document
  std::vector<std::vector<std::uint32_t>> z;
  std::vector<std::uint32_t> n_dk;  // num_docs x k, row-major
  std::vector<std::uint32_t> n_kw;  // k x vocab_size, row-major
  std::vector<std::uint32_t> n_k;
  std::vector<double> alpha;
  double eta = 0.01;
  std::uint64_t sweep_count = 0;
  Rng rng;

  // Averaged estimates (average_interval > 0): sums of per-sample
  // posterior means and the number of samples accumulated.
  std::vector<double> theta_sum;
  std::vector<double> phi_sum;
  std::uint64_t averaged_samples = 0;

  std::size_t num_docs() const { return words.size(); }
  std::uint32_t doc_topic(std::size_t d, std::size_t t) const { return n_dk[d * k + t]; }
  std::uint32_t topic_word(std::size_t t, std::size_t w) const { return n_kw[t * vocab_size + w]; }
  double alpha_sum() const;

  // Throws InvariantError when the count tables disagree with z.
  void check_invariants() const;

  bool operator==(const TopicModelState& o) const;
};

// Expands a document's sparse counts into its token sequence (ascending id).
std::vector<TokenId> expand_tokens(const Document& doc);

TopicModelState init_state(const Corpus& corpus, const LdaConfig& cfg, const TopicMask& mask);
TopicModelState init_state(const Corpus& corpus, const LdaConfig& cfg, const Lens* lens = nullptr);

// Normalized collapsed conditional for a token of word `w` in document `d`
// whose own assignment has already been removed from the tables. Returns a
// length-k vector that is zero outside `allowed`.
std::vector<double> gibbs_conditional(const TopicModelState& state, std::size_t d, TokenId w,
                                      std::span<const std::uint32_t> allowed);

// Called after every sweep with the total sweeps completed so far.
using SweepCallback = std::function<void(const TopicModelState&)>;

void run_sweeps(TopicModelState& state, const LdaConfig& cfg, const TopicMask& mask,
                const SweepCallback& on_sweep = {});

// init_state followed by run_sweeps.
TopicModelState train(const Corpus& corpus, const LdaConfig& cfg, const Lens* lens = nullptr,
                      const SweepCallback& on_sweep = {});

double dirichlet_multinomial_log_evidence(std::span<const std::uint32_t> table, std::size_t k,
                                          std::span<const double> alpha);

// One Minka fixed-point step on a num_rows x k count table. Throws
// NumericalError on non-finite values or if the evidence decreases.
std::vector<double> optimize_alpha(std::span<const std::uint32_t> table, std::size_t k,
                                   std::span<const double> alpha);
std::vector<double> optimize_alpha(const TopicModelState& state);

enum class PointEstimate { final_state, averaged };

// (n_kw + eta) / (n_k + V * eta) over the full vocabulary.
std::vector<double> topic_word_weights(const TopicModelState& state, std::size_t dim,
                                       PointEstimate est = PointEstimate::final_state);

std::vector<std::pair<std::string, double>> top_words(const TopicModelState& state,
                                                      const Vocabulary& vocab, std::size_t dim,
                                                      std::size_t n = 20,
                                                      PointEstimate est = PointEstimate::final_state);

std::vector<double> doc_topic_proportions(const TopicModelState& state, std::size_t d,
                                          PointEstimate est = PointEstimate::final_state);

struct HeldoutOptions {
  std::size_t fold_in_sweeps = 50;
  std::size_t fold_in_burn_in = 10;
  std::uint64_t seed = 1;
  std::vector<std::uint32_t> topics;  // topics usable in fold-in; empty = all
};

struct HeldoutResult {
  double per_token_loglik = 0.0;
  double total_loglik = 0.0;
  std::size_t scored_tokens = 0;
  std::size_t oov_tokens = 0;
  std::size_t documents = 0;
};

// Document completion: each held-out document's tokens are shuffled with a
// per-document stream, the first half is folded in by Gibbs sampling against
// frozen topics, and the second half is scored under the averaged mixture.
// Documents are processed in parallel; results do not depend on thread count.
HeldoutResult heldout_loglik(const TopicModelState& state, const Vocabulary& train_vocab,
                             const Corpus& heldout, const HeldoutOptions& opts);
// Single-threaded reference used by tests and benchmarks.
HeldoutResult heldout_loglik_serial(const TopicModelState& state, const Vocabulary& train_vocab,
                                    const Corpus& heldout, const HeldoutOptions& opts);

json snapshot_to_json(const TopicModelState& state, const LdaConfig& cfg);
// Rebuilds token sequences from `corpus` and validates them against z.
TopicModelState snapshot_from_json(const json& j, const Corpus& corpus, LdaConfig* cfg = nullptr);

}  // namespace lenskit::lda
