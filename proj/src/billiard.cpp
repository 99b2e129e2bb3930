#include "lgas/billiard.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "lgas/errors.hpp"

namespace lgas {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kTangencyTol = 1e-12;  // discriminant at or below this counts as a miss
constexpr double kUnitTol = 1e-9;

void check_unit(const Vec& v, const char* what) {
  if (std::abs(norm(v) - 1.0) > kUnitTol)
    throw std::invalid_argument(std::string(what) + ": vector is not unit length");
}

struct SphereHit {
  double t;
  double impact2;  // squared perpendicular distance from center to the ray
};

// Intersection in the frame shifted to the candidate center; keeps the
// discriminant free of large-coordinate cancellation.
bool ray_sphere(const Vec& origin, const Vec& dir, const Vec& center, double r, SphereHit& out) {
  Vec oc = origin - center;
  double b = dot(oc, dir);
  if (b >= 0.0) return false;  // moving away; the near root is behind us
  double c2 = norm2(oc) - r * r;
  double disc = b * b - c2;
  if (disc <= kTangencyTol) return false;  // miss (tangency counts as a miss)
  double t = -b - std::sqrt(disc);
  if (t <= 0.0) return false;
  out.t = t;
  out.impact2 = norm2(oc) - b * b;
  return true;
}

CollisionEvent make_event(const ParticleState& state, const LatticePoint& lp, const Vec& center,
                          double r, const SphereHit& hit) {
  CollisionEvent ev;
  ev.free_path = hit.t;
  ev.hit_point = state.position + hit.t * state.velocity;
  ev.scatterer_center = center;
  ev.scatterer = lp;
  ev.v_in = state.velocity;
  Vec n = normalized(ev.hit_point - center);
  ev.v_out = reflect(state.velocity, n);
  ev.impact_parameter = std::sqrt(std::max(0.0, hit.impact2));
  ev.deflection_angle = angle_between(ev.v_in, ev.v_out);
  ev.horizon = false;
  return ev;
}

}  // namespace

double LatticeConfig::spacing() const {
  if (scaling == LatticeScaling::raw) return 1.0;
  return std::pow(r, static_cast<double>(d - 1) / d);
}

void LatticeConfig::validate() const {
  if (d < 2 || d > kMaxDim) throw ConfigError("lattice: dimension out of range");
  if (!(r > 0.0)) throw ConfigError("lattice: radius must be positive");
  if (!(l_max > 0.0)) throw ConfigError("lattice: l_max must be positive");
  if (!(2.0 * r < spacing())) throw ConfigError("lattice: scatterers overlap (2r >= spacing)");
}

Vec reflect(const Vec& v_in, const Vec& normal) {
  check_unit(v_in, "reflect");
  check_unit(normal, "reflect");
  double vn = dot(v_in, normal);
  if (vn >= 0.0) throw std::invalid_argument("reflect: ray is leaving, not entering (v.n >= 0)");
  return v_in - (2.0 * vn) * normal;
}

std::optional<CollisionEvent> next_collision(const ParticleState& state,
                                             const LatticeConfig& config,
                                             const LatticePoint* exclude) {
  config.validate();
  check_unit(state.velocity, "next_collision");

  const int d = config.d;
  const double a = config.spacing();
  const double r = config.r;
  const Vec& p = state.position;
  const Vec& v = state.velocity;

  // Amanatides-Woo traversal state.
  std::array<int64_t, kMaxDim> cell{};
  std::array<int64_t, kMaxDim> step{};
  std::array<double, kMaxDim> t_max{};
  std::array<double, kMaxDim> t_delta{};
  for (int k = 0; k < d; ++k) {
    cell[static_cast<size_t>(k)] = static_cast<int64_t>(std::floor(p[k] / a));
    if (v[k] > 0.0) {
      step[static_cast<size_t>(k)] = 1;
      t_max[static_cast<size_t>(k)] = ((cell[static_cast<size_t>(k)] + 1) * a - p[k]) / v[k];
      t_delta[static_cast<size_t>(k)] = a / v[k];
    } else if (v[k] < 0.0) {
      step[static_cast<size_t>(k)] = -1;
      t_max[static_cast<size_t>(k)] = (cell[static_cast<size_t>(k)] * a - p[k]) / v[k];
      t_delta[static_cast<size_t>(k)] = -a / v[k];
    } else {
      step[static_cast<size_t>(k)] = 0;
      t_max[static_cast<size_t>(k)] = kInf;
      t_delta[static_cast<size_t>(k)] = kInf;
    }
  }

  double best_t = kInf;
  SphereHit best_hit{};
  LatticePoint best_lp{};
  Vec best_center(d);

  const int corners = 1 << d;
  for (;;) {
    // Candidate scatterers: the 2^d corners of the current cell. A hit
    // point always lies within r < spacing/2 of its center, hence inside a
    // cell adjacent to it, so marching in ray order cannot skip the first
    // intersection.
    for (int mask = 0; mask < corners; ++mask) {
      LatticePoint lp;
      lp.d = d;
      for (int k = 0; k < d; ++k)
        lp.idx[static_cast<size_t>(k)] = cell[static_cast<size_t>(k)] + ((mask >> k) & 1);
      if (exclude && lp == *exclude) continue;
      Vec center(d);
      for (int k = 0; k < d; ++k) center[k] = a * static_cast<double>(lp.idx[static_cast<size_t>(k)]);
      SphereHit hit;
      if (ray_sphere(p, v, center, r, hit) && hit.t < best_t && hit.t <= config.l_max) {
        best_t = hit.t;
        best_hit = hit;
        best_lp = lp;
        best_center = center;
      }
    }

    double t_exit = kInf;
    int k_min = 0;
    for (int k = 0; k < d; ++k) {
      if (t_max[static_cast<size_t>(k)] < t_exit) {
        t_exit = t_max[static_cast<size_t>(k)];
        k_min = k;
      }
    }
    // Every sphere whose hit point lies in an already-visited cell has been
    // tested, so once the best candidate precedes the cell exit it is final.
    if (best_t <= t_exit) break;
    if (t_exit > config.l_max) break;
    cell[static_cast<size_t>(k_min)] += step[static_cast<size_t>(k_min)];
    t_max[static_cast<size_t>(k_min)] += t_delta[static_cast<size_t>(k_min)];
  }

  if (best_t > config.l_max) return std::nullopt;
  return make_event(state, best_lp, best_center, r, best_hit);
}

std::vector<CollisionEvent> trace_flights(int64_t n_flights, const LatticeConfig& config,
                                          const ParticleState& init,
                                          const LatticePoint* on_scatterer) {
  config.validate();
  std::vector<CollisionEvent> out;
  out.reserve(static_cast<size_t>(n_flights));
  ParticleState state = init;
  LatticePoint excl{};
  const LatticePoint* exclude = nullptr;
  if (on_scatterer) {
    excl = *on_scatterer;
    exclude = &excl;
  }
  for (int64_t i = 0; i < n_flights; ++i) {
    auto ev = next_collision(state, config, exclude);
    if (ev) {
      out.push_back(*ev);
      state.position = ev->hit_point;
      state.velocity = ev->v_out;
      excl = ev->scatterer;
      exclude = &excl;
    } else {
      CollisionEvent cap;
      cap.free_path = config.l_max;
      cap.hit_point = state.position + config.l_max * state.velocity;
      cap.scatterer_center = Vec::zero(config.d);
      cap.scatterer = LatticePoint{};
      cap.v_in = state.velocity;
      cap.v_out = state.velocity;
      cap.impact_parameter = 0.0;
      cap.deflection_angle = 0.0;
      cap.horizon = true;
      out.push_back(cap);
      state.position = cap.hit_point;
      // velocity unchanged; keep excluding the last real scatterer (it lies
      // behind the ray and can never be re-entered on a straight line).
    }
  }
  return out;
}

std::pair<ParticleState, LatticePoint> equilibrium_surface_state(const LatticeConfig& config,
                                                                 Pcg32& rng) {
  config.validate();
  const int d = config.d;
  Vec n = uniform_on_sphere(d, rng);
  // Cosine-law outgoing direction about the outward normal: sin(theta) =
  // u^{1/(d-1)} makes the surface flux density proportional to cos(theta).
  double u = rng.next_double();
  double sin_t = std::pow(u, 1.0 / (d - 1));
  double cos_t = std::sqrt(std::max(0.0, 1.0 - sin_t * sin_t));
  Vec tangent(d);
  for (;;) {
    Vec g(d);
    for (int i = 0; i < d; ++i) g[i] = rng.normal();
    Vec t = g - dot(g, n) * n;
    double t2 = norm2(t);
    if (t2 > 1e-12) {
      tangent = (1.0 / std::sqrt(t2)) * t;
      break;
    }
  }
  ParticleState s;
  s.position = config.r * n;  // on the surface of the origin scatterer
  s.velocity = normalized(cos_t * n + sin_t * tangent);
  LatticePoint origin;
  origin.d = d;
  return {s, origin};
}

std::vector<CollisionEvent> sample_flight_sequence(uint64_t seed, int64_t n_flights,
                                                   const LatticeConfig& config) {
  Pcg32 rng = derive_stream(seed, Stage::launch, 0);
  auto [init, origin] = equilibrium_surface_state(config, rng);
  return trace_flights(n_flights, config, init, &origin);
}

std::vector<CollisionEvent> sample_flight_sequence(uint64_t seed, int64_t n_flights,
                                                   const LatticeConfig& config,
                                                   const ParticleState& init,
                                                   const LatticePoint* on_scatterer) {
  (void)seed;  // dynamics are deterministic given the initial state
  return trace_flights(n_flights, config, init, on_scatterer);
}

std::vector<double> stitched_free_paths(std::span<const CollisionEvent> flights) {
  std::vector<double> out;
  out.reserve(flights.size());
  double carry = 0.0;
  for (const auto& ev : flights) {
    if (ev.horizon) {
      carry += ev.free_path;
    } else {
      out.push_back(carry + ev.free_path);
      carry = 0.0;
    }
  }
  return out;
}

std::vector<double> free_path_survival(std::span<const double> xi, std::span<const double> grid) {
  if (xi.empty()) throw std::invalid_argument("free_path_survival: no flights");
  std::vector<double> sorted(xi.begin(), xi.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> out;
  out.reserve(grid.size());
  for (double x : grid) {
    auto it = std::upper_bound(sorted.begin(), sorted.end(), x);
    out.push_back(static_cast<double>(sorted.end() - it) / static_cast<double>(sorted.size()));
  }
  return out;
}

std::optional<CollisionEvent> next_collision_brute_force(const ParticleState& state,
                                                         const LatticeConfig& config,
                                                         const LatticePoint* exclude) {
  config.validate();
  check_unit(state.velocity, "next_collision_brute_force");
  const int d = config.d;
  const double a = config.spacing();
  const double reach = config.l_max + config.r + a;

  std::array<int64_t, kMaxDim> lo{}, hi{};
  for (int k = 0; k < d; ++k) {
    double x0 = state.position[k];
    double x1 = state.position[k] + config.l_max * state.velocity[k];
    lo[static_cast<size_t>(k)] = static_cast<int64_t>(std::floor((std::min(x0, x1) - config.r - a) / a));
    hi[static_cast<size_t>(k)] = static_cast<int64_t>(std::ceil((std::max(x0, x1) + config.r + a) / a));
    (void)reach;
  }

  double best_t = kInf;
  SphereHit best_hit{};
  LatticePoint best_lp{};
  Vec best_center(d);

  std::array<int64_t, kMaxDim> idx = lo;
  for (;;) {
    LatticePoint lp;
    lp.d = d;
    lp.idx = idx;
    bool skip = exclude && lp == *exclude;
    if (!skip) {
      Vec center(d);
      for (int k = 0; k < d; ++k) center[k] = a * static_cast<double>(idx[static_cast<size_t>(k)]);
      SphereHit hit;
      if (ray_sphere(state.position, state.velocity, center, config.r, hit) && hit.t < best_t &&
          hit.t <= config.l_max) {
        best_t = hit.t;
        best_hit = hit;
        best_lp = lp;
        best_center = center;
      }
    }
    int k = 0;
    while (k < d) {
      if (++idx[static_cast<size_t>(k)] <= hi[static_cast<size_t>(k)]) break;
      idx[static_cast<size_t>(k)] = lo[static_cast<size_t>(k)];
      ++k;
    }
    if (k == d) break;
  }

  if (best_t > config.l_max) return std::nullopt;
  return make_event(state, best_lp, best_center, config.r, best_hit);
}

}  // namespace lgas
