#include "lgas/limit_chain.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "lgas/errors.hpp"

namespace lgas {

namespace {

// Bulk parameters implied by mass + mean once the tail start is fixed.
struct Bulk {
  double mass;  // bulk mass M0
  double mean;  // bulk mean mu0
  double b;
  double c0;
};

Bulk bulk_for(double theta, double xi_bar, double x0) {
  Bulk out;
  out.mass = 1.0 - theta / (2.0 * x0 * x0);
  out.mean = xi_bar - theta / x0;
  out.b = 2.0 * out.mean / out.mass;
  out.c0 = out.mass / out.b;
  return out;
}

}  // namespace

double SurrogateKernel::pdf(double x) const {
  if (x <= 0.0) return 0.0;
  if (x <= b) return c0;
  if (x < x0) return 0.0;
  return theta / (x * x * x);
}

double SurrogateKernel::cdf(double x) const {
  if (x <= 0.0) return 0.0;
  if (x <= b) return c0 * x;
  if (x < x0) return c0 * b;
  return 1.0 - theta / (2.0 * x * x);
}

double SurrogateKernel::inv_cdf(double u) const {
  double bulk_mass = c0 * b;
  if (u < bulk_mass) return u / c0;
  double tail = 1.0 - u;
  if (tail <= 0.0) tail = 5e-324;
  return std::sqrt(theta / (2.0 * tail));
}

double SurrogateKernel::truncated_moment(int k, double L) const {
  if (k < 0 || k > 4) throw std::invalid_argument("truncated_moment: k out of range");
  if (L <= 0.0) return 0.0;
  double bl = std::min(L, b);
  double bulk = c0 * std::pow(bl, k + 1) / (k + 1);
  if (L <= x0) return bulk;
  double tail;
  switch (k) {
    case 0: tail = theta / 2.0 * (1.0 / (x0 * x0) - 1.0 / (L * L)); break;
    case 1: tail = theta * (1.0 / x0 - 1.0 / L); break;
    case 2: tail = theta * std::log(L / x0); break;
    case 3: tail = theta * (L - x0); break;
    default: tail = theta * (L * L - x0 * x0) / 2.0; break;
  }
  return bulk + tail;
}

SurrogateKernel calibrate_surrogate(const ModelConstants& constants) {
  const double theta = constants.theta_d;
  const double xi_bar = constants.xi_bar;

  // Residual of the second-moment constraint: bulk second moment minus
  // theta*ln(x0). The bulk is pinned by mass + mean, so this is a function
  // of the tail start alone; it is positive at small x0 and decreases
  // through the root.
  auto resid = [&](double x0) {
    Bulk bk = bulk_for(theta, xi_bar, x0);
    return bk.c0 * bk.b * bk.b * bk.b / 3.0 - theta * std::log(x0);
  };

  SurrogateKernel ker;
  ker.d = constants.d;
  ker.theta = theta;
  ker.xi_bar = xi_bar;

  double lo = std::max(1.0001, 1.2 * std::sqrt(theta / 2.0));
  double hi = lo;
  bool bracketed = false;
  while (hi < kTailStartCap) {
    hi *= 2.0;
    if (resid(hi) < 0.0) {
      bracketed = true;
      break;
    }
  }

  if (bracketed) {
    for (int it = 0; it < 200; ++it) {
      double mid = 0.5 * (lo + hi);
      if (resid(mid) > 0.0)
        lo = mid;
      else
        hi = mid;
    }
    double x0 = 0.5 * (lo + hi);
    Bulk bk = bulk_for(theta, xi_bar, x0);
    ker.x0 = x0;
    ker.b = bk.b;
    ker.c0 = bk.c0;
    ker.moment_matched = true;
  } else {
    // High dimensions: the moment-matched tail start explodes, fall back to
    // the plain plateau + tail family (mass and mean only, x0 = b).
    double disc = xi_bar * xi_bar - 1.5 * theta;
    if (disc <= 0.0) throw CalibrationError("calibrate_surrogate: no plateau root");
    double x0 = xi_bar + std::sqrt(disc);
    double c0 = (1.0 - theta / (2.0 * x0 * x0)) / x0;
    if (c0 <= 0.0) throw CalibrationError("calibrate_surrogate: negative plateau density");
    ker.x0 = x0;
    ker.b = x0;
    ker.c0 = c0;
    ker.moment_matched = false;
  }

  if (!(ker.b > 0.0) || !(ker.c0 > 0.0) || ker.b > ker.x0)
    throw CalibrationError("calibrate_surrogate: invalid geometry of calibrated density");
  double mass = ker.truncated_moment(0, 1e300);
  double mean = ker.truncated_moment(1, 1e300);
  if (std::abs(mass - 1.0) > 1e-10 || std::abs(mean - xi_bar) > 1e-10)
    throw CalibrationError("calibrate_surrogate: constraint residuals too large");
  return ker;
}

KernelBackend KernelBackend::make_surrogate(const ModelConstants& constants) {
  KernelBackend b;
  b.kind = Kind::surrogate_iid;
  b.d = constants.d;
  b.surrogate = calibrate_surrogate(constants);
  return b;
}

KernelBackend KernelBackend::make_empirical(int d, EmpiricalTable table, int m_bins) {
  KernelBackend b;
  b.kind = Kind::empirical;
  b.d = d;
  b.table = std::move(table);
  b.m_bins = m_bins;
  b.validate();
  return b;
}

void KernelBackend::validate() const {
  if (d < 2 || d > kMaxDim) throw ConfigError("backend: dimension out of range");
  if (kind == Kind::empirical) {
    if (table.xi.empty()) throw ConfigError("backend: empirical table is empty");
    if (table.xi.size() != table.deflection.size())
      throw ConfigError("backend: empirical table columns differ in length");
  }
}

double sample_free_path(const KernelBackend& backend, Pcg32& rng) {
  if (backend.kind == KernelBackend::Kind::surrogate_iid)
    return backend.surrogate.inv_cdf(rng.next_double());
  size_t i = static_cast<size_t>(rng.next_below(backend.table.xi.size()));
  return backend.table.xi[i];
}

ChainState initial_chain_state(int d) {
  ChainState s;
  s.V = Vec::axis(d, 0);  // fixed initial velocity e1
  return s;
}

ChainState step_chain(const ChainState& state, const KernelBackend& backend, Pcg32& rng) {
  const int d = backend.d;
  ChainState next;
  if (backend.kind == KernelBackend::Kind::surrogate_iid) {
    next.xi = backend.surrogate.inv_cdf(rng.next_double());
    next.V = uniform_on_sphere(d, rng);
    next.deflection = angle_between(state.V, next.V);
    return next;
  }
  // Empirical: paired (xi, deflection) resampling, deflection applied about
  // a uniform azimuth around the current direction.
  size_t i = static_cast<size_t>(rng.next_below(backend.table.xi.size()));
  next.xi = backend.table.xi[i];
  double th = backend.table.deflection[i];
  next.deflection = th;
  if (d == 2) {
    double s = rng.next_double() < 0.5 ? -1.0 : 1.0;
    double cs = std::cos(th), sn = s * std::sin(th);
    Vec v(2);
    v[0] = cs * state.V[0] - sn * state.V[1];
    v[1] = sn * state.V[0] + cs * state.V[1];
    next.V = v;
  } else {
    Vec u(d);
    for (;;) {
      Vec g(d);
      for (int k = 0; k < d; ++k) g[k] = rng.normal();
      Vec t = g - dot(g, state.V) * state.V;
      double t2 = norm2(t);
      if (t2 > 1e-12) {
        u = (1.0 / std::sqrt(t2)) * t;
        break;
      }
    }
    next.V = normalized(std::cos(th) * state.V + std::sin(th) * u);
  }
  return next;
}

std::vector<double> lagged_covariance(std::span<const double> y, int max_lag) {
  const int64_t m = static_cast<int64_t>(y.size());
  if (m < 2) throw std::invalid_argument("lagged_covariance: series too short");
  Kahan acc;
  for (double v : y) acc.add(v);
  double mean = acc.sum / static_cast<double>(m);
  std::vector<double> cov(static_cast<size_t>(max_lag) + 1, 0.0);
  for (int k = 0; k <= max_lag; ++k) {
    Kahan s;
    for (int64_t i = 0; i + k < m; ++i) s.add((y[static_cast<size_t>(i)] - mean) * (y[static_cast<size_t>(i + k)] - mean));
    cov[static_cast<size_t>(k)] = s.sum / static_cast<double>(m - k);
  }
  return cov;
}

std::vector<double> mixing_series(std::span<const ChainState> run,
                                  const std::function<double(const ChainState&, const ChainState&)>& f,
                                  int max_lag) {
  if (static_cast<int64_t>(run.size()) < 10 * static_cast<int64_t>(max_lag) + 2)
    throw std::invalid_argument("mixing_series: run too short for requested lag");
  std::vector<double> y;
  y.reserve(run.size() - 1);
  for (size_t i = 0; i + 1 < run.size(); ++i) y.push_back(f(run[i], run[i + 1]));
  return lagged_covariance(y, max_lag);
}

}  // namespace lgas
