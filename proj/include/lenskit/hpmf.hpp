#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "lenskit/corpus.hpp"
#include "lenskit/json_io.hpp"
#include "lenskit/lens.hpp"

namespace lenskit::hpmf {

// Gamma hyperparameters. User preferences theta ~ Gamma(a, activity) with
// activity ~ Gamma(a', a'/b'); factor attributes beta ~ Gamma(c, popularity)
// with popularity ~ Gamma(c', c'/d'). All Gammas use shape/rate.
struct Hyper {
  double a = 0.3;
  double a_prime = 0.3;
  double b_prime = 1.0;
  double c = 0.3;
  double c_prime = 0.3;
  double d_prime = 1.0;
};

struct HpmfConfig {
  std::size_t k = 10;
  Hyper hyper;
  std::size_t max_iters = 500;
  double elbo_tol = 1e-6;           // relative ELBO change
  std::size_t convergence_window = 3;
  double jitter = 0.1;              // relative init perturbation; 0 = exact prior means
  std::uint64_t seed = 1;

  void validate() const;
  json to_json() const;
  static HpmfConfig from_json(const json& j);
};

struct HpmfState {
  std::size_t n_users = 0, n_factors = 0, k = 0;
  std::vector<double> user_shape, user_rate;          // n_users x k
  std::vector<double> factor_shape, factor_rate;      // n_factors x k
  std::vector<double> activity_shape, activity_rate;  // n_users
  std::vector<double> popularity_shape, popularity_rate;  // n_factors
  std::vector<double> responsibilities;               // nnz x k
  std::vector<std::uint8_t> active;                   // k flags
  std::vector<std::uint8_t> user_allowed;             // n_users x k; 0 pins E[theta] to 0
  std::vector<double> elbo_trace;

  bool theta_free(std::size_t m, std::size_t j) const {
    return active[j] && user_allowed[m * k + j];
  }
  // Expectations; pinned or inactive entries are exactly 0.
  double expected_theta(std::size_t m, std::size_t j) const;
  double expected_beta(std::size_t n, std::size_t j) const;
  std::vector<std::uint32_t> active_dims() const;

  bool operator==(const HpmfState&) const = default;
};

HpmfState init_hpmf(const BehaviorMatrix& matrix, const HpmfConfig& cfg,
                    std::vector<std::string>* warnings = nullptr);

// Deactivates discarded dims and pins, for each user with a nonzero label
// vector, the dims outside that user's allowed set.
void apply_lens(HpmfState& state, const BehaviorMatrix& matrix, const Lens& lens);

// One coordinate-ascent sweep (responsibilities, users, activity, factors,
// popularity) followed by the ELBO, appended to elbo_trace. Rows are updated
// in parallel; every reduction runs in a fixed order, so results are
// identical for any thread count.
void cavi_iteration(HpmfState& state, const BehaviorMatrix& matrix, const HpmfConfig& cfg);
double elbo(const HpmfState& state, const BehaviorMatrix& matrix, const HpmfConfig& cfg);

// Straightforward single-threaded implementation of the same updates, kept
// as a test oracle and benchmark baseline.
namespace reference {
void cavi_iteration(HpmfState& state, const BehaviorMatrix& matrix, const HpmfConfig& cfg);
double elbo(const HpmfState& state, const BehaviorMatrix& matrix, const HpmfConfig& cfg);
double heldout_loglik(const HpmfState& state, const BehaviorMatrix& heldout);
}  // namespace reference

using IterationCallback = std::function<void(const HpmfState&)>;

// Iterates until the relative ELBO change stays below elbo_tol for
// convergence_window consecutive iterations, or max_iters.
HpmfState train(const BehaviorMatrix& matrix, const HpmfConfig& cfg, const Lens* lens = nullptr,
                const IterationCallback& on_iteration = {});

std::vector<std::pair<std::string, double>> top_factors(const HpmfState& state,
                                                        const BehaviorMatrix& matrix,
                                                        std::size_t dim, std::size_t n = 20);

struct Proportions {
  std::vector<double> values;  // length k, zero on inactive dims
  bool uniform_fallback = false;
};
Proportions user_preference_proportions(const HpmfState& state, std::size_t m);

double predict_rate(const HpmfState& state, std::size_t m, std::size_t n);

// Mean Poisson log-likelihood per cell over all users x factors.
double heldout_loglik(const HpmfState& state, const BehaviorMatrix& heldout);

json snapshot_to_json(const HpmfState& state, const HpmfConfig& cfg);
HpmfState snapshot_from_json(const json& j, HpmfConfig* cfg = nullptr);

}  // namespace lenskit::hpmf
