#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lgas/constants.hpp"
#include "lgas/limit_chain.hpp"
#include "lgas/parallel.hpp"
#include "lgas/paths.hpp"
#include "lgas/rng.hpp"

namespace lgas {

double normal_cdf(double z);
double normal_quantile(double p);  // inverse standard normal CDF

struct DistanceReport {
  std::string metric;
  double horizon = 0.0;  // n or t
  double value = 0.0;
  double stderr_ = 0.0;  // bootstrap (200 resamples)
  int64_t replicas = 0;
};

inline constexpr int kBootstrapResamples = 200;

// 1-d Wasserstein-1 against the standard normal via quantile coupling:
// mean |sorted sample - Phi^{-1}((i-0.5)/n)|.
double w1_value_normal(std::span<const double> sample);
// Two-sample version: mean |sorted a - sorted b|; requires equal sizes.
double w1_value_two(std::span<const double> a, std::span<const double> b);

enum class RefDist { standard_normal, second_sample };
DistanceReport w1_1d(std::span<const double> sample, RefDist ref, Pcg32& rng,
                     std::span<const double> second = {});

// Mean of w1_value_normal over n_proj random unit-vector projections.
DistanceReport sliced_w1(const TrajectoryBatch& samples, int n_proj, Pcg32& rng,
                         Exec exec = Exec::openmp);

// sup over grid points z of |P(all coords <= z) - prod_k Phi(z_k)|.
DistanceReport ks_orthant(const TrajectoryBatch& samples, std::span<const Vec> grid);

// Classical two-sided 1-d Kolmogorov-Smirnov against the standard normal.
double ks_1d_normal(std::span<const double> sample);
// Two-sample Kolmogorov distance (pooled-jump sup).
double ks_two_sample(std::span<const double> a, std::span<const double> b);

struct MomentReport {
  int64_t n = 0;
  double r_n = 0.0;
  // empirical moments
  double xi2 = 0.0, xi3 = 0.0, xi4 = 0.0;
  double m1 = 0.0, m2 = 0.0;
  double tilde2 = 0.0, tilde4 = 0.0;
  // paper-predicted leading terms (ModelConstants only)
  double xi2_pred = 0.0;  // d sigma_d^2 log n
  double m1_pred = 0.0;   // xi_bar
  // normalized ratios
  double xi2_ratio = 0.0;    // xi2 / (d sigma^2 log n)
  double xi3_scaled = 0.0;   // xi3 / r_n
  double xi4_scaled = 0.0;   // xi4 / r_n^2
  double tilde4_scaled = 0.0;
};

MomentReport moment_suite(const Decomposition& dec, const TruncationParams& params,
                          const ModelConstants& c);

// Second-moment estimator for heavy-tailed truncated draws: plain mean over
// the bulk plus the known-shape x^-3 tail integrated analytically with its
// amplitude estimated from the exceedance count beyond the tail start. The
// plain sample mean has standard error of order the estimate itself at
// desk-scale sample sizes; this keeps the tail contribution's error at the
// 1/sqrt(#exceedances) scale. Returns (estimate, stderr).
std::pair<double, double> tail_corrected_second_moment(std::span<const double> draws,
                                                       const SurrogateKernel& kernel,
                                                       double r_n);

// E ||Q'_n||^2 / (d sigma_d^2 n log n); requires >= 100 replicas.
double second_moment_ratio(const TrajectoryBatch& truncated, const ModelConstants& c);

enum class RateModel { inv_sqrt_log, sqrt_loglog_over_log, inv_sqrt_n };

struct RateFit {
  RateModel model;
  double c = 0.0;
  double residual = 0.0;  // RMS in distance space
};

const char* rate_model_name(RateModel m);
RateFit rate_fit(std::span<const std::pair<double, double>> points, RateModel model);
// All three models fitted; first element is the residual argmin.
std::vector<RateFit> rate_fit_all(std::span<const std::pair<double, double>> points);

struct MixingFit {
  double C = 0.0;
  double omega = 0.0;
  bool decay_detected = false;
};

// Log-linear fit of |cov(k)| over lags k >= 1 above the noise floor.
MixingFit mixing_fit(std::span<const double> cov, double noise_floor);

// Noise floor: 3x the sd of lag-1 covariances of permuted copies.
double mixing_noise_floor(std::span<const double> series, int n_perm, Pcg32& rng);

}  // namespace lgas
