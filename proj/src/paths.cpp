#include "lgas/paths.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "lgas/errors.hpp"

namespace lgas {

Vec displacement(std::span<const Flight> flights) {
  if (flights.empty()) throw std::invalid_argument("displacement: no flights");
  const int d = flights.front().v.d;
  std::array<Kahan, kMaxDim> acc{};
  for (const auto& f : flights)
    for (int k = 0; k < d; ++k) acc[static_cast<size_t>(k)].add(f.xi * f.v[k]);
  Vec q(d);
  for (int k = 0; k < d; ++k) q[k] = acc[static_cast<size_t>(k)].sum;
  return q;
}

std::vector<double> flight_times(std::span<const double> xi) {
  std::vector<double> tau;
  tau.reserve(xi.size() + 1);
  tau.push_back(0.0);
  Kahan acc;
  for (double x : xi) {
    if (!(x > 0.0)) throw std::invalid_argument("flight_times: nonpositive free path");
    acc.add(x);
    tau.push_back(acc.sum);
  }
  return tau;
}

int64_t collisions_before(double t, std::span<const double> tau) {
  if (t < 0.0) throw std::invalid_argument("collisions_before: negative time");
  if (tau.empty() || t > tau.back())
    throw NeedMoreFlights("collisions_before: time lies beyond the last recorded collision");
  auto it = std::upper_bound(tau.begin(), tau.end(), t);
  return static_cast<int64_t>(it - tau.begin()) - 1;
}

Vec continuous_position(double t, std::span<const Flight> flights, std::span<const double> tau) {
  int64_t nu = collisions_before(t, tau);
  const int d = flights.front().v.d;
  std::array<Kahan, kMaxDim> acc{};
  for (int64_t j = 0; j < nu; ++j)
    for (int k = 0; k < d; ++k) acc[static_cast<size_t>(k)].add(flights[static_cast<size_t>(j)].xi * flights[static_cast<size_t>(j)].v[k]);
  Vec x(d);
  for (int k = 0; k < d; ++k) x[k] = acc[static_cast<size_t>(k)].sum;
  double over = t - tau[static_cast<size_t>(nu)];
  if (over == 0.0) return x;
  if (nu >= static_cast<int64_t>(flights.size()))
    throw NeedMoreFlights("continuous_position: trajectory does not cover t");
  // velocity after collision nu = velocity of flight nu+1
  const Vec& v = flights[static_cast<size_t>(nu)].v;
  for (int k = 0; k < d; ++k) x[k] += over * v[k];
  return x;
}

TruncationParams TruncationParams::make(int64_t n, double gamma) {
  if (n < 2) throw std::invalid_argument("truncation: n must be >= 2");
  if (!(gamma > 0.0 && gamma < 1.0)) throw std::invalid_argument("truncation: gamma must lie in (0,1)");
  TruncationParams p;
  p.gamma = gamma;
  p.n = n;
  p.r_n = std::sqrt(static_cast<double>(n) * std::pow(std::log(static_cast<double>(n)), gamma));
  return p;
}

std::vector<double> truncate(std::span<const double> xi, const TruncationParams& params) {
  std::vector<double> out(xi.begin(), xi.end());
  const double r2 = params.r_n * params.r_n;
  for (double& x : out)
    if (x * x > r2) x = 0.0;
  return out;
}

Decomposition decompose(std::span<const double> xi_trunc, std::span<const double> deflection,
                        const KernelBackend& backend, const TruncationParams& params) {
  Decomposition dec;
  dec.xi_trunc.assign(xi_trunc.begin(), xi_trunc.end());
  const size_t n = dec.xi_trunc.size();
  dec.m.resize(n);
  dec.xi_tilde.resize(n);

  if (backend.kind == KernelBackend::Kind::surrogate_iid) {
    // iid kernel: the conditional mean degenerates to the unconditional
    // truncated mean.
    double m = backend.surrogate.truncated_moment(1, params.r_n);
    std::fill(dec.m.begin(), dec.m.end(), m);
  } else {
    if (deflection.size() != n)
      throw std::invalid_argument("decompose: deflection length mismatch");
    const int bins = backend.m_bins;
    if (static_cast<int64_t>(n) < 2 * static_cast<int64_t>(bins))
      throw WidenBinsError("decompose: sample too small for " + std::to_string(bins) +
                           " equal-count bins (" + std::to_string(n) + " rows); reduce bins");
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
      return deflection[a] < deflection[b];
    });
    size_t base = n / static_cast<size_t>(bins);
    size_t extra = n % static_cast<size_t>(bins);
    size_t pos = 0;
    for (int bin = 0; bin < bins; ++bin) {
      size_t count = base + (static_cast<size_t>(bin) < extra ? 1 : 0);
      if (count == 0)
        throw WidenBinsError("decompose: empty deflection bin " + std::to_string(bin));
      Kahan s;
      for (size_t j = pos; j < pos + count; ++j) s.add(dec.xi_trunc[order[j]]);
      double mean = s.sum / static_cast<double>(count);
      for (size_t j = pos; j < pos + count; ++j) dec.m[order[j]] = mean;
      pos += count;
    }
  }

  for (size_t i = 0; i < n; ++i) dec.xi_tilde[i] = dec.xi_trunc[i] - dec.m[i];
  return dec;
}

double discrete_scale(int64_t n, const ModelConstants& c) {
  if (n < 2) throw std::invalid_argument("discrete_scale: n must be >= 2");
  double nn = static_cast<double>(n);
  return 1.0 / (std::sqrt(c.sigma2_d) * std::sqrt(nn * std::log(nn)));
}

double continuous_scale(double t, const ModelConstants& c) {
  if (!(t > 1.0)) throw std::invalid_argument("continuous_scale: t must exceed 1");
  return 1.0 / (std::sqrt(c.Sigma2_d) * std::sqrt(t * std::log(t)));
}

TrajectoryBatch normalize_discrete(const TrajectoryBatch& batch, const ModelConstants& c) {
  double s = discrete_scale(batch.n, c);
  TrajectoryBatch out = batch;
  for (double& q : out.Q) q *= s;
  return out;
}

Vec normalize_continuous(const Vec& x_t, double t, const ModelConstants& c) {
  return continuous_scale(t, c) * x_t;
}

RenewalRecord renewal_compare(double t, std::span<const double> tau, const ModelConstants& c) {
  RenewalRecord rec;
  rec.nu_t = collisions_before(t, tau);
  rec.n_t = static_cast<int64_t>(std::floor(t / c.xi_bar));
  rec.deviation = std::abs(static_cast<double>(rec.nu_t - rec.n_t));
  return rec;
}

}  // namespace lgas
