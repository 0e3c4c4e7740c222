#include "lenskit/hpmf.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <boost/math/special_functions/digamma.hpp>

#include "lenskit/error.hpp"
#include "lenskit/random.hpp"

namespace lenskit::hpmf {

using boost::math::digamma;

void HpmfConfig::validate() const {
  if (k < 1) throw UsageError("HPMF needs k >= 1");
  for (double h : {hyper.a, hyper.a_prime, hyper.b_prime, hyper.c, hyper.c_prime, hyper.d_prime}) {
    if (!(h > 0.0) || !std::isfinite(h)) throw UsageError("HPMF hyperparameters must be > 0");
  }
  if (!(elbo_tol >= 0.0)) throw UsageError("elbo_tol must be >= 0");
  if (!(jitter >= 0.0 && jitter < 1.0)) throw UsageError("jitter must lie in [0, 1)");
  if (convergence_window == 0) throw UsageError("convergence_window must be >= 1");
}

json HpmfConfig::to_json() const {
  return {{"k", k},
          {"a", hyper.a},
          {"a_prime", hyper.a_prime},
          {"b_prime", hyper.b_prime},
          {"c", hyper.c},
          {"c_prime", hyper.c_prime},
          {"d_prime", hyper.d_prime},
          {"max_iters", max_iters},
          {"elbo_tol", elbo_tol},
          {"convergence_window", convergence_window},
          {"jitter", jitter},
          {"seed", seed}};
}

HpmfConfig HpmfConfig::from_json(const json& j) {
  HpmfConfig c;
  try {
    c.k = j.value("k", c.k);
    c.hyper.a = j.value("a", c.hyper.a);
    c.hyper.a_prime = j.value("a_prime", c.hyper.a_prime);
    c.hyper.b_prime = j.value("b_prime", c.hyper.b_prime);
    c.hyper.c = j.value("c", c.hyper.c);
    c.hyper.c_prime = j.value("c_prime", c.hyper.c_prime);
    c.hyper.d_prime = j.value("d_prime", c.hyper.d_prime);
    c.max_iters = j.value("max_iters", c.max_iters);
    c.elbo_tol = j.value("elbo_tol", c.elbo_tol);
    c.convergence_window = j.value("convergence_window", c.convergence_window);
    c.jitter = j.value("jitter", c.jitter);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw UsageError(std::string("malformed HPMF config: ") + e.what());
  }
  c.validate();
  return c;
}

double HpmfState::expected_theta(std::size_t m, std::size_t j) const {
  if (!theta_free(m, j)) return 0.0;
  return user_shape[m * k + j] / user_rate[m * k + j];
}

double HpmfState::expected_beta(std::size_t n, std::size_t j) const {
  if (!active[j]) return 0.0;
  return factor_shape[n * k + j] / factor_rate[n * k + j];
}

std::vector<std::uint32_t> HpmfState::active_dims() const {
  std::vector<std::uint32_t> out;
  for (std::uint32_t j = 0; j < k; ++j) {
    if (active[j]) out.push_back(j);
  }
  return out;
}

HpmfState init_hpmf(const BehaviorMatrix& matrix, const HpmfConfig& cfg,
                    std::vector<std::string>* warnings) {
  cfg.validate();
  const std::size_t M = matrix.n_users(), N = matrix.n_factors(), K = cfg.k;
  if (M == 0 || N == 0) throw DataError("behavior matrix is empty");
  if (warnings && K > std::min(M, N)) {
    warnings->push_back("k = " + std::to_string(K) + " exceeds min(users, factors) = " +
                        std::to_string(std::min(M, N)));
  }
  const Hyper& h = cfg.hyper;
  HpmfState s;
  s.n_users = M;
  s.n_factors = N;
  s.k = K;
  Rng rng(cfg.seed);
  auto jittered = [&](double mean) {
    return mean * (1.0 + cfg.jitter * (2.0 * uniform01(rng) - 1.0));
  };
  s.user_shape.resize(M * K);
  s.user_rate.resize(M * K);
  for (std::size_t i = 0; i < M * K; ++i) {
    s.user_shape[i] = jittered(h.a);
    s.user_rate[i] = jittered(h.b_prime);
  }
  s.factor_shape.resize(N * K);
  s.factor_rate.resize(N * K);
  for (std::size_t i = 0; i < N * K; ++i) {
    s.factor_shape[i] = jittered(h.c);
    s.factor_rate[i] = jittered(h.d_prime);
  }
  s.activity_shape.assign(M, h.a_prime);
  s.activity_rate.assign(M, h.a_prime / h.b_prime);
  s.popularity_shape.assign(N, h.c_prime);
  s.popularity_rate.assign(N, h.c_prime / h.d_prime);
  s.responsibilities.assign(matrix.nnz() * K, 0.0);
  s.active.assign(K, 1);
  s.user_allowed.assign(M * K, 1);
  return s;
}

void apply_lens(HpmfState& s, const BehaviorMatrix& matrix, const Lens& lens) {
  if (lens.model_kind() != ModelKind::hpmf) throw UsageError("HPMF training needs an HPMF lens");
  if (lens.k_original() != s.k) {
    throw UsageError("lens has k = " + std::to_string(lens.k_original()) +
                     " but the model has k = " + std::to_string(s.k));
  }
  for (std::uint32_t j = 0; j < s.k; ++j) s.active[j] = lens.is_discarded(j) ? 0 : 1;
  if (s.active_dims().empty()) throw DataError("lens discards every dimension");
  std::fill(s.user_allowed.begin(), s.user_allowed.end(), 1);
  if (!lens.item_labels_built()) return;
  for (std::size_t m = 0; m < s.n_users; ++m) {
    const auto& id = matrix.user_ids()[m];
    if (!lens.item_labels().count(id)) continue;
    const auto allowed = lens.allowed_dims(id);
    std::fill(s.user_allowed.begin() + static_cast<std::ptrdiff_t>(m * s.k),
              s.user_allowed.begin() + static_cast<std::ptrdiff_t>((m + 1) * s.k), 0);
    for (auto j : allowed) s.user_allowed[m * s.k + j] = 1;
  }
}

namespace {

double gamma_entropy(double shape, double rate) {
  return shape - std::log(rate) + std::lgamma(shape) + (1.0 - shape) * digamma(shape);
}

void check_shape(const HpmfState& s, const BehaviorMatrix& matrix) {
  if (s.n_users != matrix.n_users() || s.n_factors != matrix.n_factors() ||
      s.responsibilities.size() != matrix.nnz() * s.k) {
    throw UsageError("HPMF state does not match the behavior matrix");
  }
}

}  // namespace

void cavi_iteration(HpmfState& s, const BehaviorMatrix& matrix, const HpmfConfig& cfg) {
  check_shape(s, matrix);
  const Hyper& h = cfg.hyper;
  const std::size_t M = s.n_users, N = s.n_factors, K = s.k;
  const auto Mi = static_cast<std::ptrdiff_t>(M), Ni = static_cast<std::ptrdiff_t>(N);
  const auto& entries = matrix.entries();

  std::vector<double> elog_theta(M * K), elog_beta(N * K);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t m = 0; m < Mi; ++m) {
    for (std::size_t j = 0; j < K; ++j) {
      const std::size_t i = static_cast<std::size_t>(m) * K + j;
      elog_theta[i] = digamma(s.user_shape[i]) - std::log(s.user_rate[i]);
    }
  }
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t n = 0; n < Ni; ++n) {
    for (std::size_t j = 0; j < K; ++j) {
      const std::size_t i = static_cast<std::size_t>(n) * K + j;
      elog_beta[i] = digamma(s.factor_shape[i]) - std::log(s.factor_rate[i]);
    }
  }

  // Responsibilities: softmax over the user's free dims, per nonzero entry.
#pragma omp parallel for schedule(dynamic, 16)
  for (std::ptrdiff_t m = 0; m < Mi; ++m) {
    const auto mu = static_cast<std::size_t>(m);
    for (std::size_t e = matrix.user_begin(mu); e < matrix.user_begin(mu + 1); ++e) {
      const std::size_t n = entries[e].second;
      double* phi = &s.responsibilities[e * K];
      double top = -INFINITY;
      for (std::size_t j = 0; j < K; ++j) {
        if (s.theta_free(mu, j)) top = std::max(top, elog_theta[mu * K + j] + elog_beta[n * K + j]);
      }
      double total = 0.0;
      for (std::size_t j = 0; j < K; ++j) {
        phi[j] = s.theta_free(mu, j)
                     ? std::exp(elog_theta[mu * K + j] + elog_beta[n * K + j] - top)
                     : 0.0;
        total += phi[j];
      }
      for (std::size_t j = 0; j < K; ++j) phi[j] /= total;
    }
  }

  // Users.
  std::vector<double> beta_total(K, 0.0);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t j = 0; j < K; ++j) beta_total[j] += s.expected_beta(n, j);
  }
#pragma omp parallel for schedule(dynamic, 16)
  for (std::ptrdiff_t m = 0; m < Mi; ++m) {
    const auto mu = static_cast<std::size_t>(m);
    const double activity = s.activity_shape[mu] / s.activity_rate[mu];
    for (std::size_t j = 0; j < K; ++j) {
      if (!s.theta_free(mu, j)) continue;
      double shape = h.a;
      for (std::size_t e = matrix.user_begin(mu); e < matrix.user_begin(mu + 1); ++e) {
        shape += s.responsibilities[e * K + j];
      }
      s.user_shape[mu * K + j] = shape;
      s.user_rate[mu * K + j] = activity + beta_total[j];
    }
    double free_dims = 0.0, theta_sum = 0.0;
    for (std::size_t j = 0; j < K; ++j) {
      if (!s.theta_free(mu, j)) continue;
      free_dims += 1.0;
      theta_sum += s.user_shape[mu * K + j] / s.user_rate[mu * K + j];
    }
    s.activity_shape[mu] = h.a_prime + free_dims * h.a;
    s.activity_rate[mu] = h.a_prime / h.b_prime + theta_sum;
  }

  // Factors.
  std::vector<double> theta_total(K, 0.0);
  for (std::size_t m = 0; m < M; ++m) {
    for (std::size_t j = 0; j < K; ++j) theta_total[j] += s.expected_theta(m, j);
  }
#pragma omp parallel for schedule(dynamic, 16)
  for (std::ptrdiff_t n = 0; n < Ni; ++n) {
    const auto nu = static_cast<std::size_t>(n);
    const double popularity = s.popularity_shape[nu] / s.popularity_rate[nu];
    const auto [first, last] = matrix.factor_entries(nu);
    double active_dims = 0.0, beta_sum = 0.0;
    for (std::size_t j = 0; j < K; ++j) {
      if (!s.active[j]) continue;
      double shape = h.c;
      for (const std::uint32_t* e = first; e != last; ++e) shape += s.responsibilities[*e * K + j];
      s.factor_shape[nu * K + j] = shape;
      s.factor_rate[nu * K + j] = popularity + theta_total[j];
      active_dims += 1.0;
      beta_sum += shape / s.factor_rate[nu * K + j];
    }
    s.popularity_shape[nu] = h.c_prime + active_dims * h.c;
    s.popularity_rate[nu] = h.c_prime / h.d_prime + beta_sum;
  }

  const double value = elbo(s, matrix, cfg);
  if (!std::isfinite(value)) {
    throw NumericalError("non-finite ELBO at iteration " + std::to_string(s.elbo_trace.size()));
  }
  if (!s.elbo_trace.empty()) {
    const double prev = s.elbo_trace.back();
    if (value - prev < -1e-8 * std::abs(prev)) {
      throw NumericalError("ELBO decreased from " + std::to_string(prev) + " to " +
                           std::to_string(value) + " at iteration " +
                           std::to_string(s.elbo_trace.size()));
    }
  }
  s.elbo_trace.push_back(value);
}

double elbo(const HpmfState& s, const BehaviorMatrix& matrix, const HpmfConfig& cfg) {
  check_shape(s, matrix);
  const Hyper& h = cfg.hyper;
  const std::size_t M = s.n_users, N = s.n_factors, K = s.k;
  const auto Mi = static_cast<std::ptrdiff_t>(M), Ni = static_cast<std::ptrdiff_t>(N);
  const auto& entries = matrix.entries();
  const double lg_a = std::lgamma(h.a), lg_c = std::lgamma(h.c);
  const double lg_ap = std::lgamma(h.a_prime), lg_cp = std::lgamma(h.c_prime);
  const double act_rate0 = h.a_prime / h.b_prime, pop_rate0 = h.c_prime / h.d_prime;

  std::vector<double> user_terms(M), factor_terms(N);
#pragma omp parallel for schedule(dynamic, 16)
  for (std::ptrdiff_t m = 0; m < Mi; ++m) {
    const auto mu = static_cast<std::size_t>(m);
    const double ks = s.activity_shape[mu], kr = s.activity_rate[mu];
    const double e_act = ks / kr, elog_act = digamma(ks) - std::log(kr);
    double t = h.a_prime * std::log(act_rate0) - lg_ap + (h.a_prime - 1.0) * elog_act -
               act_rate0 * e_act + gamma_entropy(ks, kr);
    for (std::size_t j = 0; j < K; ++j) {
      if (!s.theta_free(mu, j)) continue;
      const double gs = s.user_shape[mu * K + j], gr = s.user_rate[mu * K + j];
      const double elog = digamma(gs) - std::log(gr);
      t += h.a * elog_act - lg_a + (h.a - 1.0) * elog - e_act * gs / gr + gamma_entropy(gs, gr);
    }
    for (std::size_t e = matrix.user_begin(mu); e < matrix.user_begin(mu + 1); ++e) {
      const std::size_t n = entries[e].second;
      for (std::size_t j = 0; j < K; ++j) {
        const double phi = s.responsibilities[e * K + j];
        if (phi <= 0.0) continue;
        const double elog_theta = digamma(s.user_shape[mu * K + j]) - std::log(s.user_rate[mu * K + j]);
        const double elog_beta = digamma(s.factor_shape[n * K + j]) - std::log(s.factor_rate[n * K + j]);
        t += phi * (elog_theta + elog_beta - std::log(phi));
      }
    }
    user_terms[mu] = t;
  }
#pragma omp parallel for schedule(dynamic, 16)
  for (std::ptrdiff_t n = 0; n < Ni; ++n) {
    const auto nu = static_cast<std::size_t>(n);
    const double ts = s.popularity_shape[nu], tr = s.popularity_rate[nu];
    const double e_pop = ts / tr, elog_pop = digamma(ts) - std::log(tr);
    double t = h.c_prime * std::log(pop_rate0) - lg_cp + (h.c_prime - 1.0) * elog_pop -
               pop_rate0 * e_pop + gamma_entropy(ts, tr);
    for (std::size_t j = 0; j < K; ++j) {
      if (!s.active[j]) continue;
      const double ls = s.factor_shape[nu * K + j], lr = s.factor_rate[nu * K + j];
      const double elog = digamma(ls) - std::log(lr);
      t += h.c * elog_pop - lg_c + (h.c - 1.0) * elog - e_pop * ls / lr + gamma_entropy(ls, lr);
    }
    factor_terms[nu] = t;
  }

  double total = 0.0;
  for (double t : user_terms) total += t;
  for (double t : factor_terms) total += t;
  std::vector<double> theta_total(K, 0.0), beta_total(K, 0.0);
  for (std::size_t m = 0; m < M; ++m) {
    for (std::size_t j = 0; j < K; ++j) theta_total[j] += s.expected_theta(m, j);
  }
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t j = 0; j < K; ++j) beta_total[j] += s.expected_beta(n, j);
  }
  for (std::size_t j = 0; j < K; ++j) total -= theta_total[j] * beta_total[j];
  return total;
}

HpmfState train(const BehaviorMatrix& matrix, const HpmfConfig& cfg, const Lens* lens,
                const IterationCallback& on_iteration) {
  auto state = init_hpmf(matrix, cfg);
  if (lens) apply_lens(state, matrix, *lens);
  std::size_t quiet = 0;
  for (std::size_t it = 0; it < cfg.max_iters; ++it) {
    cavi_iteration(state, matrix, cfg);
    if (on_iteration) on_iteration(state);
    const auto& trace = state.elbo_trace;
    if (trace.size() >= 2) {
      const double prev = trace[trace.size() - 2];
      const double rel = std::abs(trace.back() - prev) / std::max(std::abs(prev), 1e-300);
      quiet = rel < cfg.elbo_tol ? quiet + 1 : 0;
      if (quiet >= cfg.convergence_window) break;
    }
  }
  return state;
}

std::vector<std::pair<std::string, double>> top_factors(const HpmfState& s,
                                                        const BehaviorMatrix& matrix,
                                                        std::size_t dim, std::size_t n) {
  if (dim >= s.k) throw UsageError("dimension " + std::to_string(dim) + " out of range");
  if (!s.active[dim]) throw UsageError("dimension " + std::to_string(dim) + " is inactive");
  if (matrix.n_factors() != s.n_factors) throw UsageError("matrix does not match the model");
  std::vector<double> weight(s.n_factors);
  for (std::size_t f = 0; f < s.n_factors; ++f) weight[f] = s.expected_beta(f, dim);
  std::vector<std::uint32_t> order(s.n_factors);
  std::iota(order.begin(), order.end(), 0u);
  const std::size_t m = std::min(n, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(m), order.end(),
                    [&](std::uint32_t a, std::uint32_t b) {
                      return weight[a] != weight[b] ? weight[a] > weight[b] : a < b;
                    });
  std::vector<std::pair<std::string, double>> out;
  for (std::size_t i = 0; i < m; ++i) out.emplace_back(matrix.factor_names()[order[i]], weight[order[i]]);
  return out;
}

Proportions user_preference_proportions(const HpmfState& s, std::size_t m) {
  if (m >= s.n_users) throw NotFoundError("unknown user index " + std::to_string(m));
  Proportions p;
  p.values.assign(s.k, 0.0);
  double total = 0.0;
  for (std::size_t j = 0; j < s.k; ++j) {
    p.values[j] = s.expected_theta(m, j);
    total += p.values[j];
  }
  if (total > 0.0) {
    for (double& v : p.values) v /= total;
    return p;
  }
  const auto act = s.active_dims();
  for (auto j : act) p.values[j] = 1.0 / static_cast<double>(act.size());
  p.uniform_fallback = true;
  return p;
}

double predict_rate(const HpmfState& s, std::size_t m, std::size_t n) {
  if (m >= s.n_users || n >= s.n_factors) throw UsageError("user/factor index out of range");
  double rate = 0.0;
  for (std::size_t j = 0; j < s.k; ++j) rate += s.expected_theta(m, j) * s.expected_beta(n, j);
  return rate;
}

double heldout_loglik(const HpmfState& s, const BehaviorMatrix& heldout) {
  if (heldout.n_users() != s.n_users || heldout.n_factors() != s.n_factors) {
    throw DataError("held-out matrix shape does not match the model");
  }
  const auto Mi = static_cast<std::ptrdiff_t>(s.n_users);
  const auto& entries = heldout.entries();
  std::vector<double> per_user(s.n_users, 0.0);
#pragma omp parallel for schedule(dynamic, 16)
  for (std::ptrdiff_t m = 0; m < Mi; ++m) {
    const auto mu = static_cast<std::size_t>(m);
    double t = 0.0;
    for (std::size_t e = heldout.user_begin(mu); e < heldout.user_begin(mu + 1); ++e) {
      t += std::log(std::max(predict_rate(s, mu, entries[e].second), 1e-300));
    }
    per_user[mu] = t;
  }
  double total = 0.0;
  for (double t : per_user) total += t;
  std::vector<double> theta_total(s.k, 0.0), beta_total(s.k, 0.0);
  for (std::size_t m = 0; m < s.n_users; ++m) {
    for (std::size_t j = 0; j < s.k; ++j) theta_total[j] += s.expected_theta(m, j);
  }
  for (std::size_t n = 0; n < s.n_factors; ++n) {
    for (std::size_t j = 0; j < s.k; ++j) beta_total[j] += s.expected_beta(n, j);
  }
  for (std::size_t j = 0; j < s.k; ++j) total -= theta_total[j] * beta_total[j];
  return total / static_cast<double>(s.n_users * s.n_factors);
}

json snapshot_to_json(const HpmfState& s, const HpmfConfig& cfg) {
  return {{"format", "lenskit-hpmf-snapshot"},
          {"version", 1},
          {"config", cfg.to_json()},
          {"n_users", s.n_users},
          {"n_factors", s.n_factors},
          {"k", s.k},
          {"user_shape", s.user_shape},
          {"user_rate", s.user_rate},
          {"factor_shape", s.factor_shape},
          {"factor_rate", s.factor_rate},
          {"activity_shape", s.activity_shape},
          {"activity_rate", s.activity_rate},
          {"popularity_shape", s.popularity_shape},
          {"popularity_rate", s.popularity_rate},
          {"responsibilities", s.responsibilities},
          {"active", s.active},
          {"user_allowed", s.user_allowed},
          {"elbo_trace", s.elbo_trace}};
}

HpmfState snapshot_from_json(const json& j, HpmfConfig* cfg) {
  HpmfState s;
  try {
    if (j.value("format", "") != "lenskit-hpmf-snapshot") throw DataError("not an HPMF snapshot");
    if (j.at("version").get<int>() != 1) throw DataError("unsupported HPMF snapshot version");
    if (cfg) *cfg = HpmfConfig::from_json(j.at("config"));
    s.n_users = j.at("n_users").get<std::size_t>();
    s.n_factors = j.at("n_factors").get<std::size_t>();
    s.k = j.at("k").get<std::size_t>();
    s.user_shape = j.at("user_shape").get<std::vector<double>>();
    s.user_rate = j.at("user_rate").get<std::vector<double>>();
    s.factor_shape = j.at("factor_shape").get<std::vector<double>>();
    s.factor_rate = j.at("factor_rate").get<std::vector<double>>();
    s.activity_shape = j.at("activity_shape").get<std::vector<double>>();
    s.activity_rate = j.at("activity_rate").get<std::vector<double>>();
    s.popularity_shape = j.at("popularity_shape").get<std::vector<double>>();
    s.popularity_rate = j.at("popularity_rate").get<std::vector<double>>();
    s.responsibilities = j.at("responsibilities").get<std::vector<double>>();
    s.active = j.at("active").get<std::vector<std::uint8_t>>();
    s.user_allowed = j.at("user_allowed").get<std::vector<std::uint8_t>>();
    s.elbo_trace = j.at("elbo_trace").get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed HPMF snapshot: ") + e.what());
  }
  const std::size_t MK = s.n_users * s.k, NK = s.n_factors * s.k;
  if (s.user_shape.size() != MK || s.user_rate.size() != MK || s.factor_shape.size() != NK ||
      s.factor_rate.size() != NK || s.activity_shape.size() != s.n_users ||
      s.activity_rate.size() != s.n_users || s.popularity_shape.size() != s.n_factors ||
      s.popularity_rate.size() != s.n_factors || s.active.size() != s.k ||
      s.user_allowed.size() != MK || s.responsibilities.size() % std::max<std::size_t>(s.k, 1) != 0) {
    throw DataError("HPMF snapshot arrays have inconsistent sizes");
  }
  return s;
}

}  // namespace lenskit::hpmf
