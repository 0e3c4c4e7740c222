#include <cmath>

#include <boost/math/special_functions/digamma.hpp>

#include "lenskit/error.hpp"
#include "lenskit/hpmf.hpp"

namespace lenskit::hpmf::reference {

using boost::math::digamma;

namespace {

double elog(double shape, double rate) { return digamma(shape) - std::log(rate); }

double entropy(double shape, double rate) {
  return shape - std::log(rate) + std::lgamma(shape) + (1.0 - shape) * digamma(shape);
}

// E[log Gamma(x; shape0, rate)] for x ~ Gamma(xs, xr) and a random rate with
// the given mean and expected log.
double elog_gamma_prior(double shape0, double rate_mean, double rate_elog, double xs, double xr) {
  return shape0 * rate_elog - std::lgamma(shape0) + (shape0 - 1.0) * elog(xs, xr) -
         rate_mean * xs / xr;
}

}  // namespace

void cavi_iteration(HpmfState& s, const BehaviorMatrix& matrix, const HpmfConfig& cfg) {
  const Hyper& h = cfg.hyper;
  const std::size_t M = s.n_users, N = s.n_factors, K = s.k;
  const auto& entries = matrix.entries();

  for (std::size_t e = 0; e < entries.size(); ++e) {
    const auto [m, n] = entries[e];
    double top = -INFINITY;
    for (std::size_t j = 0; j < K; ++j) {
      if (s.theta_free(m, j)) {
        top = std::max(top, elog(s.user_shape[m * K + j], s.user_rate[m * K + j]) +
                                elog(s.factor_shape[n * K + j], s.factor_rate[n * K + j]));
      }
    }
    double total = 0.0;
    for (std::size_t j = 0; j < K; ++j) {
      double w = 0.0;
      if (s.theta_free(m, j)) {
        w = std::exp(elog(s.user_shape[m * K + j], s.user_rate[m * K + j]) +
                     elog(s.factor_shape[n * K + j], s.factor_rate[n * K + j]) - top);
      }
      s.responsibilities[e * K + j] = w;
      total += w;
    }
    for (std::size_t j = 0; j < K; ++j) s.responsibilities[e * K + j] /= total;
  }

  for (std::size_t m = 0; m < M; ++m) {
    for (std::size_t j = 0; j < K; ++j) {
      if (!s.theta_free(m, j)) continue;
      double shape = h.a;
      for (std::size_t e = 0; e < entries.size(); ++e) {
        if (entries[e].first == m) shape += s.responsibilities[e * K + j];
      }
      double beta_sum = 0.0;
      for (std::size_t n = 0; n < N; ++n) beta_sum += s.expected_beta(n, j);
      s.user_shape[m * K + j] = shape;
      s.user_rate[m * K + j] = s.activity_shape[m] / s.activity_rate[m] + beta_sum;
    }
  }
  for (std::size_t m = 0; m < M; ++m) {
    double free_dims = 0.0, theta_sum = 0.0;
    for (std::size_t j = 0; j < K; ++j) {
      if (!s.theta_free(m, j)) continue;
      free_dims += 1.0;
      theta_sum += s.expected_theta(m, j);
    }
    s.activity_shape[m] = h.a_prime + free_dims * h.a;
    s.activity_rate[m] = h.a_prime / h.b_prime + theta_sum;
  }

  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t j = 0; j < K; ++j) {
      if (!s.active[j]) continue;
      double shape = h.c;
      for (std::size_t e = 0; e < entries.size(); ++e) {
        if (entries[e].second == n) shape += s.responsibilities[e * K + j];
      }
      double theta_sum = 0.0;
      for (std::size_t m = 0; m < M; ++m) theta_sum += s.expected_theta(m, j);
      s.factor_shape[n * K + j] = shape;
      s.factor_rate[n * K + j] = s.popularity_shape[n] / s.popularity_rate[n] + theta_sum;
    }
  }
  for (std::size_t n = 0; n < N; ++n) {
    double active_dims = 0.0, beta_sum = 0.0;
    for (std::size_t j = 0; j < K; ++j) {
      if (!s.active[j]) continue;
      active_dims += 1.0;
      beta_sum += s.expected_beta(n, j);
    }
    s.popularity_shape[n] = h.c_prime + active_dims * h.c;
    s.popularity_rate[n] = h.c_prime / h.d_prime + beta_sum;
  }

  const double value = reference::elbo(s, matrix, cfg);
  if (!std::isfinite(value)) throw NumericalError("non-finite ELBO");
  s.elbo_trace.push_back(value);
}

double elbo(const HpmfState& s, const BehaviorMatrix& matrix, const HpmfConfig& cfg) {
  const Hyper& h = cfg.hyper;
  const std::size_t M = s.n_users, N = s.n_factors, K = s.k;
  double total = 0.0;

  for (std::size_t e = 0; e < matrix.entries().size(); ++e) {
    const auto [m, n] = matrix.entries()[e];
    for (std::size_t j = 0; j < K; ++j) {
      const double phi = s.responsibilities[e * K + j];
      if (phi <= 0.0) continue;
      total += phi * (elog(s.user_shape[m * K + j], s.user_rate[m * K + j]) +
                      elog(s.factor_shape[n * K + j], s.factor_rate[n * K + j]) - std::log(phi));
    }
  }
  for (std::size_t m = 0; m < M; ++m) {
    for (std::size_t n = 0; n < N; ++n) total -= predict_rate(s, m, n);
  }

  for (std::size_t m = 0; m < M; ++m) {
    const double ks = s.activity_shape[m], kr = s.activity_rate[m];
    total += elog_gamma_prior(h.a_prime, h.a_prime / h.b_prime, std::log(h.a_prime / h.b_prime), ks, kr);
    total += entropy(ks, kr);
    for (std::size_t j = 0; j < K; ++j) {
      if (!s.theta_free(m, j)) continue;
      const double gs = s.user_shape[m * K + j], gr = s.user_rate[m * K + j];
      total += elog_gamma_prior(h.a, ks / kr, elog(ks, kr), gs, gr) + entropy(gs, gr);
    }
  }
  for (std::size_t n = 0; n < N; ++n) {
    const double ts = s.popularity_shape[n], tr = s.popularity_rate[n];
    total += elog_gamma_prior(h.c_prime, h.c_prime / h.d_prime, std::log(h.c_prime / h.d_prime), ts, tr);
    total += entropy(ts, tr);
    for (std::size_t j = 0; j < K; ++j) {
      if (!s.active[j]) continue;
      const double ls = s.factor_shape[n * K + j], lr = s.factor_rate[n * K + j];
      total += elog_gamma_prior(h.c, ts / tr, elog(ts, tr), ls, lr) + entropy(ls, lr);
    }
  }
  return total;
}

double heldout_loglik(const HpmfState& s, const BehaviorMatrix& heldout) {
  double total = 0.0;
  for (std::size_t m = 0; m < s.n_users; ++m) {
    for (std::size_t n = 0; n < s.n_factors; ++n) {
      const double rate = predict_rate(s, m, n);
      if (heldout.contains(m, n)) total += std::log(std::max(rate, 1e-300));
      total -= rate;
    }
  }
  return total / static_cast<double>(s.n_users * s.n_factors);
}

}  // namespace lenskit::hpmf::reference
