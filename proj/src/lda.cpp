#include "lenskit/lda.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <boost/math/special_functions/digamma.hpp>

#include "lenskit/error.hpp"

namespace lenskit::lda {

void LdaConfig::validate() const {
  if (k < 2) throw UsageError("LDA needs k >= 2 topics");
  if (!(alpha_init > 0.0) || !std::isfinite(alpha_init)) throw UsageError("alpha must be > 0");
  if (!(eta > 0.0) || !std::isfinite(eta)) throw UsageError("eta must be > 0");
  if (sweeps > 0 && burn_in >= sweeps) throw UsageError("burn_in must be < sweeps");
  if (sweeps == 0 && burn_in != 0) throw UsageError("burn_in must be 0 when sweeps is 0");
  if (hyper_opt_interval > 0 && hyper_opt_steps == 0) {
    throw UsageError("hyper_opt_steps must be >= 1 when optimization is on");
  }
}

json LdaConfig::to_json() const {
  return {{"k", k},
          {"alpha", alpha_init},
          {"eta", eta},
          {"sweeps", sweeps},
          {"burn_in", burn_in},
          {"hyper_opt_interval", hyper_opt_interval},
          {"hyper_opt_steps", hyper_opt_steps},
          {"average_interval", average_interval},
          {"seed", seed}};
}

LdaConfig LdaConfig::from_json(const json& j) {
  LdaConfig c;
  try {
    c.k = j.value("k", c.k);
    c.alpha_init = j.value("alpha", c.alpha_init);
    c.eta = j.value("eta", c.eta);
    c.sweeps = j.value("sweeps", c.sweeps);
    c.burn_in = j.value("burn_in", c.burn_in);
    c.hyper_opt_interval = j.value("hyper_opt_interval", c.hyper_opt_interval);
    c.hyper_opt_steps = j.value("hyper_opt_steps", c.hyper_opt_steps);
    c.average_interval = j.value("average_interval", c.average_interval);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw UsageError(std::string("malformed LDA config: ") + e.what());
  }
  c.validate();
  return c;
}

TopicMask full_mask(std::size_t num_docs, std::size_t k) {
  std::vector<std::uint32_t> all(k);
  std::iota(all.begin(), all.end(), 0u);
  return TopicMask(num_docs, all);
}

TopicMask allowed_topics(const Corpus& corpus, const Lens* lens, std::size_t k) {
  if (!lens) return full_mask(corpus.num_docs(), k);
  if (lens->model_kind() != ModelKind::lda) throw UsageError("LDA training needs an LDA lens");
  if (lens->k_original() != k) {
    throw UsageError("lens has k = " + std::to_string(lens->k_original()) +
                     " but the model has k = " + std::to_string(k));
  }
  const auto open = lens->non_discarded_dims();
  if (open.empty()) throw DataError("lens discards every topic");
  TopicMask mask;
  mask.reserve(corpus.num_docs());
  for (const auto& doc : corpus.docs) {
    if (doc.origin_topic && *doc.origin_topic < k && !lens->is_discarded(*doc.origin_topic)) {
      mask.push_back({*doc.origin_topic});
    } else if (lens->item_labels().count(doc.id)) {
      mask.push_back(lens->allowed_dims(doc.id));
    } else {
      mask.push_back(open);
    }
    if (mask.back().empty()) throw DataError("document " + doc.id + " has no allowed topics");
  }
  return mask;
}

double TopicModelState::alpha_sum() const {
  return std::accumulate(alpha.begin(), alpha.end(), 0.0);
}

void TopicModelState::check_invariants() const {
  const std::size_t D = num_docs();
  if (z.size() != D || n_dk.size() != D * k || n_kw.size() != k * vocab_size || n_k.size() != k ||
      alpha.size() != k) {
    throw InvariantError("topic model tables have inconsistent shapes");
  }
  std::vector<std::uint32_t> dk(D * k, 0), kw(k * vocab_size, 0), tk(k, 0);
  for (std::size_t d = 0; d < D; ++d) {
    if (z[d].size() != words[d].size()) throw InvariantError("z and words disagree in length");
    for (std::size_t i = 0; i < words[d].size(); ++i) {
      const auto t = z[d][i];
      if (t >= k || words[d][i] >= vocab_size) throw InvariantError("assignment out of range");
      ++dk[d * k + t];
      ++kw[t * vocab_size + words[d][i]];
      ++tk[t];
    }
  }
  if (dk != n_dk || kw != n_kw || tk != n_k) {
    throw InvariantError("count tables are not the tallies of z");
  }
}

bool TopicModelState::operator==(const TopicModelState& o) const {
  return k == o.k && vocab_size == o.vocab_size && words == o.words && z == o.z &&
         n_dk == o.n_dk && n_kw == o.n_kw && n_k == o.n_k && alpha == o.alpha && eta == o.eta &&
         sweep_count == o.sweep_count && rng == o.rng && theta_sum == o.theta_sum &&
         phi_sum == o.phi_sum && averaged_samples == o.averaged_samples;
}

std::vector<TokenId> expand_tokens(const Document& doc) {
  std::vector<TokenId> out;
  out.reserve(doc.length());
  for (const auto& [w, c] : doc.counts) out.insert(out.end(), c, w);
  return out;
}

TopicModelState init_state(const Corpus& corpus, const LdaConfig& cfg, const TopicMask& mask) {
  cfg.validate();
  if (corpus.docs.empty()) throw DataError("cannot train on an empty corpus");
  if (mask.size() != corpus.num_docs()) throw UsageError("topic mask does not match corpus");
  TopicModelState s;
  s.k = cfg.k;
  s.vocab_size = corpus.vocab_size();
  s.alpha.assign(cfg.k, cfg.alpha_init);
  s.eta = cfg.eta;
  s.rng = Rng(cfg.seed);
  s.n_dk.assign(corpus.num_docs() * s.k, 0);
  s.n_kw.assign(s.k * s.vocab_size, 0);
  s.n_k.assign(s.k, 0);
  for (std::size_t d = 0; d < corpus.num_docs(); ++d) {
    const auto& allowed = mask[d];
    if (allowed.empty()) {
      throw DataError("document " + corpus.docs[d].id + " has an empty allowed topic set");
    }
    for (auto t : allowed) {
      if (t >= s.k) throw UsageError("allowed topic out of range");
    }
    s.words.push_back(expand_tokens(corpus.docs[d]));
    auto& zd = s.z.emplace_back();
    zd.reserve(s.words[d].size());
    for (TokenId w : s.words[d]) {
      const auto t = allowed[uniform_index(s.rng, allowed.size())];
      zd.push_back(t);
      ++s.n_dk[d * s.k + t];
      ++s.n_kw[t * s.vocab_size + w];
      ++s.n_k[t];
    }
  }
  return s;
}

TopicModelState init_state(const Corpus& corpus, const LdaConfig& cfg, const Lens* lens) {
  return init_state(corpus, cfg, allowed_topics(corpus, lens, cfg.k));
}

namespace {

inline double conditional_weight(const TopicModelState& s, std::size_t d, TokenId w,
                                 std::uint32_t t, double v_eta) {
  return (s.n_dk[d * s.k + t] + s.alpha[t]) * (s.n_kw[t * s.vocab_size + w] + s.eta) /
         (s.n_k[t] + v_eta);
}

inline void decrement(std::uint32_t& c) {
  if (c == 0) throw InvariantError("negative count in topic model tables");
  --c;
}

void accumulate_average(TopicModelState& s) {
  const std::size_t D = s.num_docs();
  if (s.theta_sum.empty()) {
    s.theta_sum.assign(D * s.k, 0.0);
    s.phi_sum.assign(s.k * s.vocab_size, 0.0);
  }
  const double asum = s.alpha_sum();
  for (std::size_t d = 0; d < D; ++d) {
    const double denom = static_cast<double>(s.words[d].size()) + asum;
    for (std::size_t t = 0; t < s.k; ++t) {
      s.theta_sum[d * s.k + t] += (s.n_dk[d * s.k + t] + s.alpha[t]) / denom;
    }
  }
  const double v_eta = static_cast<double>(s.vocab_size) * s.eta;
  for (std::size_t t = 0; t < s.k; ++t) {
    for (std::size_t w = 0; w < s.vocab_size; ++w) {
      s.phi_sum[t * s.vocab_size + w] += (s.n_kw[t * s.vocab_size + w] + s.eta) / (s.n_k[t] + v_eta);
    }
  }
  ++s.averaged_samples;
}

}  // namespace

std::vector<double> gibbs_conditional(const TopicModelState& state, std::size_t d, TokenId w,
                                      std::span<const std::uint32_t> allowed) {
  if (d >= state.num_docs()) throw UsageError("document index out of range");
  if (w >= state.vocab_size) throw UsageError("token id out of range");
  if (allowed.empty()) throw UsageError("allowed topic set is empty");
  const double v_eta = static_cast<double>(state.vocab_size) * state.eta;
  std::vector<double> p(state.k, 0.0);
  double total = 0.0;
  for (auto t : allowed) {
    p[t] = conditional_weight(state, d, w, t, v_eta);
    total += p[t];
  }
  for (auto t : allowed) p[t] /= total;
  return p;
}

void run_sweeps(TopicModelState& s, const LdaConfig& cfg, const TopicMask& mask,
                const SweepCallback& on_sweep) {
  if (mask.size() != s.num_docs()) throw UsageError("topic mask does not match state");
  const double v_eta = static_cast<double>(s.vocab_size) * s.eta;
  std::vector<double> cumulative(s.k);
  for (std::size_t sweep = 0; sweep < cfg.sweeps; ++sweep) {
    for (std::size_t d = 0; d < s.num_docs(); ++d) {
      const auto& allowed = mask[d];
      auto& zd = s.z[d];
      const auto& wd = s.words[d];
      for (std::size_t i = 0; i < wd.size(); ++i) {
        const TokenId w = wd[i];
        std::uint32_t t = zd[i];
        decrement(s.n_dk[d * s.k + t]);
        decrement(s.n_kw[t * s.vocab_size + w]);
        decrement(s.n_k[t]);

        double total = 0.0;
        for (std::size_t a = 0; a < allowed.size(); ++a) {
          total += conditional_weight(s, d, w, allowed[a], v_eta);
          cumulative[a] = total;
        }
        const double u = uniform01(s.rng) * total;
        std::size_t pick = allowed.size() - 1;
        for (std::size_t a = 0; a < allowed.size(); ++a) {
          if (u < cumulative[a]) {
            pick = a;
            break;
          }
        }
        t = allowed[pick];
        zd[i] = t;
        ++s.n_dk[d * s.k + t];
        ++s.n_kw[t * s.vocab_size + w];
        ++s.n_k[t];
      }
    }
    ++s.sweep_count;
#ifndef NDEBUG
    s.check_invariants();
#endif
    if (cfg.hyper_opt_interval > 0 && s.sweep_count > cfg.burn_in &&
        (s.sweep_count - cfg.burn_in) % cfg.hyper_opt_interval == 0) {
      for (std::size_t step = 0; step < cfg.hyper_opt_steps; ++step) {
        auto next = optimize_alpha(s);
        double change = 0.0;
        for (std::size_t t = 0; t < s.k; ++t) {
          change = std::max(change, std::abs(next[t] - s.alpha[t]) / s.alpha[t]);
        }
        s.alpha = std::move(next);
        if (change < 1e-6) break;
      }
    }
    if (cfg.average_interval > 0 && s.sweep_count > cfg.burn_in &&
        (s.sweep_count - cfg.burn_in) % cfg.average_interval == 0) {
      accumulate_average(s);
    }
    if (on_sweep) on_sweep(s);
  }
}

TopicModelState train(const Corpus& corpus, const LdaConfig& cfg, const Lens* lens,
                      const SweepCallback& on_sweep) {
  const auto mask = allowed_topics(corpus, lens, cfg.k);
  auto state = init_state(corpus, cfg, mask);
  run_sweeps(state, cfg, mask, on_sweep);
  state.check_invariants();
  return state;
}

double dirichlet_multinomial_log_evidence(std::span<const std::uint32_t> table, std::size_t k,
                                          std::span<const double> alpha) {
  if (alpha.size() != k || table.size() % k != 0) throw UsageError("table/alpha shape mismatch");
  const double asum = std::accumulate(alpha.begin(), alpha.end(), 0.0);
  const double lg_asum = std::lgamma(asum);
  std::vector<double> lg_alpha(k);
  for (std::size_t t = 0; t < k; ++t) lg_alpha[t] = std::lgamma(alpha[t]);
  double ev = 0.0;
  for (std::size_t row = 0; row < table.size() / k; ++row) {
    double len = 0.0;
    for (std::size_t t = 0; t < k; ++t) {
      const double n = table[row * k + t];
      len += n;
      if (n > 0) ev += std::lgamma(n + alpha[t]) - lg_alpha[t];
    }
    ev += lg_asum - std::lgamma(len + asum);
  }
  return ev;
}

std::vector<double> optimize_alpha(std::span<const std::uint32_t> table, std::size_t k,
                                   std::span<const double> alpha) {
  using boost::math::digamma;
  if (alpha.size() != k || table.size() % k != 0) throw UsageError("table/alpha shape mismatch");
  const std::size_t rows = table.size() / k;
  const double asum = std::accumulate(alpha.begin(), alpha.end(), 0.0);
  const double dg_asum = digamma(asum);
  double denominator = 0.0;
  std::vector<double> numerator(k, 0.0);
  for (std::size_t row = 0; row < rows; ++row) {
    double len = 0.0;
    for (std::size_t t = 0; t < k; ++t) {
      const double n = table[row * k + t];
      len += n;
      // Psi(n + a) - Psi(a) vanishes for n = 0.
      if (n > 0) numerator[t] += digamma(n + alpha[t]) - digamma(alpha[t]);
    }
    if (len > 0) denominator += digamma(len + asum) - dg_asum;
  }
  auto snapshot = [&] {
    std::string s = "[";
    for (std::size_t t = 0; t < k; ++t) s += (t ? ", " : "") + std::to_string(alpha[t]);
    return s + "]";
  };
  if (!(denominator > 0.0)) {
    // No tokens at all: the evidence is flat in alpha.
    return std::vector<double>(alpha.begin(), alpha.end());
  }
  std::vector<double> next(k);
  for (std::size_t t = 0; t < k; ++t) {
    next[t] = std::max(alpha[t] * numerator[t] / denominator, 1e-8);
    if (!std::isfinite(next[t])) {
      throw NumericalError("non-finite alpha update from alpha = " + snapshot());
    }
  }
  const double before = dirichlet_multinomial_log_evidence(table, k, alpha);
  const double after = dirichlet_multinomial_log_evidence(table, k, next);
  if (!std::isfinite(after)) throw NumericalError("non-finite evidence from alpha = " + snapshot());
  if (after < before - 1e-9 * std::max(1.0, std::abs(before))) {
    throw NumericalError("alpha update decreased the evidence from alpha = " + snapshot());
  }
  return next;
}

std::vector<double> optimize_alpha(const TopicModelState& state) {
  if (state.sweep_count == 0) throw StateError("optimize_alpha needs at least one completed sweep");
  return optimize_alpha(state.n_dk, state.k, state.alpha);
}

std::vector<double> topic_word_weights(const TopicModelState& state, std::size_t dim,
                                       PointEstimate est) {
  if (dim >= state.k) throw UsageError("topic " + std::to_string(dim) + " out of range");
  std::vector<double> out(state.vocab_size);
  if (est == PointEstimate::averaged) {
    if (state.averaged_samples == 0) throw StateError("no averaged samples were collected");
    const double n = static_cast<double>(state.averaged_samples);
    for (std::size_t w = 0; w < state.vocab_size; ++w) {
      out[w] = state.phi_sum[dim * state.vocab_size + w] / n;
    }
    return out;
  }
  const double denom = state.n_k[dim] + static_cast<double>(state.vocab_size) * state.eta;
  for (std::size_t w = 0; w < state.vocab_size; ++w) {
    out[w] = (state.topic_word(dim, w) + state.eta) / denom;
  }
  return out;
}

std::vector<std::pair<std::string, double>> top_words(const TopicModelState& state,
                                                      const Vocabulary& vocab, std::size_t dim,
                                                      std::size_t n, PointEstimate est) {
  if (vocab.size() != state.vocab_size) throw UsageError("vocabulary does not match the model");
  const auto weights = topic_word_weights(state, dim, est);
  std::vector<std::uint32_t> order(weights.size());
  std::iota(order.begin(), order.end(), 0u);
  const std::size_t m = std::min(n, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(m), order.end(),
                    [&](std::uint32_t a, std::uint32_t b) {
                      return weights[a] != weights[b] ? weights[a] > weights[b] : a < b;
                    });
  std::vector<std::pair<std::string, double>> out;
  for (std::size_t i = 0; i < m; ++i) out.emplace_back(vocab.token(order[i]), weights[order[i]]);
  return out;
}

std::vector<double> doc_topic_proportions(const TopicModelState& state, std::size_t d,
                                          PointEstimate est) {
  if (d >= state.num_docs()) throw NotFoundError("unknown document index " + std::to_string(d));
  std::vector<double> out(state.k);
  if (est == PointEstimate::averaged) {
    if (state.averaged_samples == 0) throw StateError("no averaged samples were collected");
    for (std::size_t t = 0; t < state.k; ++t) {
      out[t] = state.theta_sum[d * state.k + t] / static_cast<double>(state.averaged_samples);
    }
  } else {
    const double denom = static_cast<double>(state.words[d].size()) + state.alpha_sum();
    for (std::size_t t = 0; t < state.k; ++t) out[t] = (state.doc_topic(d, t) + state.alpha[t]) / denom;
  }
  const double total = std::accumulate(out.begin(), out.end(), 0.0);
  for (double& p : out) p /= total;
  return out;
}

json snapshot_to_json(const TopicModelState& s, const LdaConfig& cfg) {
  json z = json::array();
  for (const auto& zd : s.z) z.push_back(zd);
  json j = {{"format", "lenskit-lda-snapshot"},
            {"version", 1},
            {"config", cfg.to_json()},
            {"k", s.k},
            {"vocab_size", s.vocab_size},
            {"num_docs", s.num_docs()},
            {"alpha", s.alpha},
            {"eta", s.eta},
            {"sweep_count", s.sweep_count},
            {"n_dk", s.n_dk},
            {"n_kw", s.n_kw},
            {"n_k", s.n_k},
            {"z", z},
            {"rng_state", rng_state(s.rng)},
            {"averaged_samples", s.averaged_samples}};
  if (s.averaged_samples > 0) {
    j["theta_sum"] = s.theta_sum;
    j["phi_sum"] = s.phi_sum;
  }
  return j;
}

TopicModelState snapshot_from_json(const json& j, const Corpus& corpus, LdaConfig* cfg) {
  TopicModelState s;
  try {
    if (j.value("format", "") != "lenskit-lda-snapshot") throw DataError("not an LDA snapshot");
    if (j.at("version").get<int>() != 1) throw DataError("unsupported LDA snapshot version");
    if (cfg) *cfg = LdaConfig::from_json(j.at("config"));
    s.k = j.at("k").get<std::size_t>();
    s.vocab_size = j.at("vocab_size").get<std::size_t>();
    s.alpha = j.at("alpha").get<std::vector<double>>();
    s.eta = j.at("eta").get<double>();
    s.sweep_count = j.at("sweep_count").get<std::uint64_t>();
    s.n_dk = j.at("n_dk").get<std::vector<std::uint32_t>>();
    s.n_kw = j.at("n_kw").get<std::vector<std::uint32_t>>();
    s.n_k = j.at("n_k").get<std::vector<std::uint32_t>>();
    for (const auto& zd : j.at("z")) s.z.push_back(zd.get<std::vector<std::uint32_t>>());
    s.rng = rng_from_state(j.at("rng_state").get<std::string>());
    s.averaged_samples = j.value("averaged_samples", std::uint64_t{0});
    if (s.averaged_samples > 0) {
      s.theta_sum = j.at("theta_sum").get<std::vector<double>>();
      s.phi_sum = j.at("phi_sum").get<std::vector<double>>();
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed LDA snapshot: ") + e.what());
  }
  if (corpus.num_docs() != s.z.size() || corpus.vocab_size() != s.vocab_size) {
    throw DataError("LDA snapshot does not match the corpus");
  }
  for (const auto& doc : corpus.docs) s.words.push_back(expand_tokens(doc));
  try {
    s.check_invariants();
  } catch (const InvariantError& e) {
    throw DataError(std::string("inconsistent LDA snapshot: ") + e.what());
  }
  return s;
}

}  // namespace lenskit::lda
