#include "lgas/stats.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace lgas {

namespace {

double sorted_w1_normal(const std::vector<double>& sorted) {
  const size_t n = sorted.size();
  Kahan acc;
  for (size_t i = 0; i < n; ++i) {
    double q = normal_quantile((static_cast<double>(i) + 0.5) / static_cast<double>(n));
    acc.add(std::abs(sorted[i] - q));
  }
  return acc.sum / static_cast<double>(n);
}

double bootstrap_stderr(std::span<const double> sample, Pcg32& rng,
                        const std::function<double(std::vector<double>&)>& stat) {
  const size_t n = sample.size();
  std::vector<double> values(kBootstrapResamples);
  std::vector<double> work(n);
  for (int b = 0; b < kBootstrapResamples; ++b) {
    for (size_t i = 0; i < n; ++i) work[i] = sample[rng.next_below(n)];
    values[static_cast<size_t>(b)] = stat(work);
  }
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= kBootstrapResamples;
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  return std::sqrt(var / (kBootstrapResamples - 1));
}

}  // namespace

double normal_cdf(double z) { return 0.5 * std::erfc(-z * 0.70710678118654752440); }

// Acklam's rational approximation refined by one Halley step; good to
// ~1e-15 over (0, 1).
double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("normal_quantile: p outside (0,1)");
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                             1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                             6.680131188771972e+01,  -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                             -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
  static const double dd[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                              3.754408661907416e+00};
  const double plow = 0.02425;
  double x;
  if (p < plow) {
    double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((dd[0] * q + dd[1]) * q + dd[2]) * q + dd[3]) * q + 1.0);
  } else if (p <= 1.0 - plow) {
    double q = p - 0.5;
    double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    double q = std::sqrt(-2.0 * std::log(1.0 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((dd[0] * q + dd[1]) * q + dd[2]) * q + dd[3]) * q + 1.0);
  }
  // Halley refinement
  double e = normal_cdf(x) - p;
  double u = e * 2.50662827463100050242 * std::exp(0.5 * x * x);
  x = x - u / (1.0 + 0.5 * x * u);
  return x;
}

double w1_value_normal(std::span<const double> sample) {
  if (sample.size() < 2) throw std::invalid_argument("w1: sample too small");
  std::vector<double> s(sample.begin(), sample.end());
  std::sort(s.begin(), s.end());
  return sorted_w1_normal(s);
}

double w1_value_two(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty())
    throw std::invalid_argument("w1 two-sample: sizes must match and be nonzero");
  std::vector<double> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  Kahan acc;
  for (size_t i = 0; i < sa.size(); ++i) acc.add(std::abs(sa[i] - sb[i]));
  return acc.sum / static_cast<double>(sa.size());
}

DistanceReport w1_1d(std::span<const double> sample, RefDist ref, Pcg32& rng,
                     std::span<const double> second) {
  DistanceReport rep;
  rep.replicas = static_cast<int64_t>(sample.size());
  if (ref == RefDist::standard_normal) {
    rep.metric = "w1_1d";
    rep.value = w1_value_normal(sample);
    rep.stderr_ = bootstrap_stderr(sample, rng, [](std::vector<double>& w) {
      std::sort(w.begin(), w.end());
      return sorted_w1_normal(w);
    });
  } else {
    rep.metric = "w1_1d_two";
    rep.value = w1_value_two(sample, second);
    std::vector<double> sb(second.begin(), second.end());
    rep.stderr_ = bootstrap_stderr(sample, rng, [&sb](std::vector<double>& w) {
      return w1_value_two(w, sb);
    });
  }
  return rep;
}

DistanceReport sliced_w1(const TrajectoryBatch& samples, int n_proj, Pcg32& rng,
                         Exec exec) {
  if (samples.d < 2) throw std::invalid_argument("sliced_w1: dimension must be >= 2");
  if (n_proj < 1) throw std::invalid_argument("sliced_w1: need at least one projection");
  const int64_t R = samples.replicas;
  const int d = samples.d;

  // Fixed per-projection streams so the result is independent of scheduling.
  uint64_t base = rng.next_u64();
  std::vector<Vec> dirs(static_cast<size_t>(n_proj));
  for (int p = 0; p < n_proj; ++p) {
    Pcg32 pr = derive_stream(base, Stage::slice, static_cast<uint64_t>(p));
    dirs[static_cast<size_t>(p)] = uniform_on_sphere(d, pr);
  }

  std::vector<double> per_proj(static_cast<size_t>(n_proj), 0.0);
  std::vector<std::vector<double>> proj_samples(static_cast<size_t>(n_proj));
  parallel_for(exec, n_proj, [&](int64_t p) {
    std::vector<double> x(static_cast<size_t>(R));
    const Vec& u = dirs[static_cast<size_t>(p)];
    for (int64_t i = 0; i < R; ++i) {
      const double* q = samples.row(i);
      double s = 0.0;
      for (int k = 0; k < d; ++k) s += q[k] * u[k];
      x[static_cast<size_t>(i)] = s;
    }
    std::sort(x.begin(), x.end());
    per_proj[static_cast<size_t>(p)] = sorted_w1_normal(x);
    proj_samples[static_cast<size_t>(p)] = std::move(x);
  });

  Kahan acc;
  for (double v : per_proj) acc.add(v);

  DistanceReport rep;
  rep.metric = "sliced_w1";
  rep.replicas = R;
  rep.value = acc.sum / n_proj;

  // Bootstrap over replicas, reusing the fixed projections.
  std::vector<double> boot(kBootstrapResamples, 0.0);
  parallel_for(exec, kBootstrapResamples, [&](int64_t bi) {
    Pcg32 br = derive_stream(base, Stage::bootstrap, static_cast<uint64_t>(bi));
    std::vector<size_t> idx(static_cast<size_t>(R));
    for (int64_t i = 0; i < R; ++i) idx[static_cast<size_t>(i)] = static_cast<size_t>(br.next_below(static_cast<uint64_t>(R)));
    std::vector<double> x(static_cast<size_t>(R));
    Kahan a2;
    for (int p = 0; p < n_proj; ++p) {
      const auto& proj = proj_samples[static_cast<size_t>(p)];
      for (int64_t i = 0; i < R; ++i) x[static_cast<size_t>(i)] = proj[idx[static_cast<size_t>(i)]];
      std::sort(x.begin(), x.end());
      a2.add(sorted_w1_normal(x));
    }
    boot[static_cast<size_t>(bi)] = a2.sum / n_proj;
  });
  double mean = 0.0;
  for (double v : boot) mean += v;
  mean /= kBootstrapResamples;
  double var = 0.0;
  for (double v : boot) var += (v - mean) * (v - mean);
  rep.stderr_ = std::sqrt(var / (kBootstrapResamples - 1));
  return rep;
}

DistanceReport ks_orthant(const TrajectoryBatch& samples, std::span<const Vec> grid) {
  if (grid.empty()) throw std::invalid_argument("ks_orthant: empty grid");
  if (samples.replicas == 0) throw std::invalid_argument("ks_orthant: empty samples");
  const int64_t R = samples.replicas;
  const int d = samples.d;
  double sup = 0.0;
  for (const Vec& z : grid) {
    int64_t count = 0;
    for (int64_t i = 0; i < R; ++i) {
      const double* q = samples.row(i);
      bool all = true;
      for (int k = 0; k < d; ++k)
        if (q[k] > z[k]) {
          all = false;
          break;
        }
      count += all;
    }
    double emp = static_cast<double>(count) / static_cast<double>(R);
    double theo = 1.0;
    for (int k = 0; k < d; ++k) theo *= normal_cdf(z[k]);
    sup = std::max(sup, std::abs(emp - theo));
  }
  DistanceReport rep;
  rep.metric = "ks_orthant";
  rep.replicas = R;
  rep.value = sup;
  rep.stderr_ = 0.0;
  return rep;
}

double ks_1d_normal(std::span<const double> sample) {
  if (sample.empty()) throw std::invalid_argument("ks: empty sample");
  std::vector<double> s(sample.begin(), sample.end());
  std::sort(s.begin(), s.end());
  const double n = static_cast<double>(s.size());
  double sup = 0.0;
  for (size_t i = 0; i < s.size(); ++i) {
    double f = normal_cdf(s[i]);
    sup = std::max(sup, std::max((static_cast<double>(i) + 1.0) / n - f, f - static_cast<double>(i) / n));
  }
  return sup;
}

double ks_two_sample(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("ks_two_sample: empty sample");
  std::vector<double> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  size_t i = 0, j = 0;
  double sup = 0.0;
  const double na = static_cast<double>(sa.size()), nb = static_cast<double>(sb.size());
  while (i < sa.size() && j < sb.size()) {
    if (sa[i] <= sb[j])
      ++i;
    else
      ++j;
    sup = std::max(sup, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
  }
  return sup;
}

MomentReport moment_suite(const Decomposition& dec, const TruncationParams& params,
                          const ModelConstants& c) {
  const size_t n_samples = dec.xi_trunc.size();
  if (n_samples < 1000) throw std::invalid_argument("moment_suite: need at least 1e3 samples");
  MomentReport rep;
  rep.n = params.n;
  rep.r_n = params.r_n;
  Kahan s2, s3, s4, m1, m2, t2, t4;
  for (size_t i = 0; i < n_samples; ++i) {
    double x = dec.xi_trunc[i];
    double x2 = x * x;
    s2.add(x2);
    s3.add(x2 * x);
    s4.add(x2 * x2);
    m1.add(dec.m[i]);
    m2.add(dec.m[i] * dec.m[i]);
    double td = dec.xi_tilde[i];
    t2.add(td * td);
    t4.add(td * td * td * td);
  }
  const double N = static_cast<double>(n_samples);
  rep.xi2 = s2.sum / N;
  rep.xi3 = s3.sum / N;
  rep.xi4 = s4.sum / N;
  rep.m1 = m1.sum / N;
  rep.m2 = m2.sum / N;
  rep.tilde2 = t2.sum / N;
  rep.tilde4 = t4.sum / N;

  const double logn = std::log(static_cast<double>(params.n));
  rep.xi2_pred = c.d * c.sigma2_d * logn;
  rep.m1_pred = c.xi_bar;
  rep.xi2_ratio = rep.xi2 / rep.xi2_pred;
  rep.xi3_scaled = rep.xi3 / params.r_n;
  rep.xi4_scaled = rep.xi4 / (params.r_n * params.r_n);
  rep.tilde4_scaled = rep.tilde4 / (params.r_n * params.r_n);
  return rep;
}

std::pair<double, double> tail_corrected_second_moment(std::span<const double> draws,
                                                       const SurrogateKernel& kernel,
                                                       double r_n) {
  if (draws.empty()) throw std::invalid_argument("tail_corrected_second_moment: no draws");
  const double L = kernel.x0;
  const double N = static_cast<double>(draws.size());
  Kahan bulk;
  int64_t exceed = 0;
  for (double x : draws) {
    if (x > r_n) continue;  // truncated to zero
    if (x <= L)
      bulk.add(x * x);
    else
      ++exceed;
  }
  // Amplitude of the x^-3 tail from the exceedance frequency:
  // P(xi > L) = theta / (2 L^2).
  double p_hat = static_cast<double>(exceed) / N;
  double theta_hat = 2.0 * L * L * p_hat;
  double lr = r_n > L ? std::log(r_n / L) : 0.0;
  double value = bulk.sum / N + theta_hat * lr;
  // Bulk term is bounded by b^2, its error is negligible next to the
  // binomial error of the exceedance count.
  double p_err = std::sqrt(std::max(p_hat, 1.0 / N) / N);
  double err = 2.0 * L * L * p_err * lr;
  return {value, err};
}

double second_moment_ratio(const TrajectoryBatch& truncated, const ModelConstants& c) {
  if (truncated.replicas < 100)
    throw std::invalid_argument("second_moment_ratio: need at least 100 replicas");
  Kahan acc;
  for (int64_t r = 0; r < truncated.replicas; ++r) {
    const double* q = truncated.row(r);
    double n2 = 0.0;
    for (int k = 0; k < truncated.d; ++k) n2 += q[k] * q[k];
    acc.add(n2);
  }
  double mean = acc.sum / static_cast<double>(truncated.replicas);
  double nn = static_cast<double>(truncated.n);
  return mean / (c.d * c.sigma2_d * nn * std::log(nn));
}

const char* rate_model_name(RateModel m) {
  switch (m) {
    case RateModel::inv_sqrt_log: return "c/sqrt(log n)";
    case RateModel::sqrt_loglog_over_log: return "c*sqrt(loglog n/log n)";
    default: return "c/sqrt(n)";
  }
}

namespace {
double model_shape(RateModel m, double n) {
  switch (m) {
    case RateModel::inv_sqrt_log: return 1.0 / std::sqrt(std::log(n));
    case RateModel::sqrt_loglog_over_log: return std::sqrt(std::log(std::log(n)) / std::log(n));
    default: return 1.0 / std::sqrt(n);
  }
}
}  // namespace

RateFit rate_fit(std::span<const std::pair<double, double>> points, RateModel model) {
  if (points.size() < 3) throw std::invalid_argument("rate_fit: need at least 3 points");
  double sg2 = 0.0, sgy = 0.0;
  for (const auto& [n, y] : points) {
    if (n < 3.0) throw std::invalid_argument("rate_fit: points require n >= 3");
    double g = model_shape(model, n);
    sg2 += g * g;
    sgy += g * y;
  }
  RateFit fit;
  fit.model = model;
  fit.c = sgy / sg2;
  double rss = 0.0;
  for (const auto& [n, y] : points) {
    double e = y - fit.c * model_shape(model, n);
    rss += e * e;
  }
  fit.residual = std::sqrt(rss / static_cast<double>(points.size()));
  return fit;
}

std::vector<RateFit> rate_fit_all(std::span<const std::pair<double, double>> points) {
  std::vector<RateFit> fits;
  for (RateModel m : {RateModel::inv_sqrt_log, RateModel::sqrt_loglog_over_log, RateModel::inv_sqrt_n})
    fits.push_back(rate_fit(points, m));
  std::stable_sort(fits.begin(), fits.end(),
                   [](const RateFit& a, const RateFit& b) { return a.residual < b.residual; });
  return fits;
}

MixingFit mixing_fit(std::span<const double> cov, double noise_floor) {
  if (cov.size() < 5) throw std::invalid_argument("mixing_fit: need at least 4 lags");
  std::vector<std::pair<double, double>> pts;  // (k, ln|cov_k|)
  for (size_t k = 1; k < cov.size(); ++k) {
    if (std::abs(cov[k]) > noise_floor) pts.emplace_back(static_cast<double>(k), std::log(std::abs(cov[k])));
  }
  MixingFit fit;
  if (pts.size() < 2) return fit;  // no-decay-detected flag
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (auto& [x, y] : pts) {
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  double m = static_cast<double>(pts.size());
  double slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
  double intercept = (sy - slope * sx) / m;
  fit.C = std::exp(intercept);
  fit.omega = std::exp(slope);
  fit.decay_detected = fit.omega < 1.0;
  return fit;
}

double mixing_noise_floor(std::span<const double> series, int n_perm, Pcg32& rng) {
  std::vector<double> y(series.begin(), series.end());
  std::vector<double> covs(static_cast<size_t>(n_perm));
  for (int p = 0; p < n_perm; ++p) {
    for (size_t i = y.size() - 1; i > 0; --i)
      std::swap(y[i], y[rng.next_below(i + 1)]);
    covs[static_cast<size_t>(p)] = lagged_covariance(y, 1)[1];
  }
  double mean = 0.0;
  for (double v : covs) mean += v;
  mean /= n_perm;
  double var = 0.0;
  for (double v : covs) var += (v - mean) * (v - mean);
  return 3.0 * std::sqrt(var / std::max(1, n_perm - 1));
}

}  // namespace lgas
