#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "lgas/rng.hpp"
#include "lgas/vec.hpp"

namespace lgas {

enum class LatticeScaling { raw, boltzmann_grad };

// Spheres of radius r centered on spacing * Z^d. In boltzmann_grad mode the
// spacing is r^{(d-1)/d}, which keeps the mean free path of order one as
// r -> 0.
struct LatticeConfig {
  int d = 2;
  double r = 0.1;
  LatticeScaling scaling = LatticeScaling::raw;
  double l_max = 1e4;

  double spacing() const;
  void validate() const;  // throws ConfigError on overlap / bad fields
};

struct LatticePoint {
  std::array<int64_t, kMaxDim> idx{};
  int d = 0;

  bool operator==(const LatticePoint& o) const {
    if (d != o.d) return false;
    for (int i = 0; i < d; ++i)
      if (idx[static_cast<size_t>(i)] != o.idx[static_cast<size_t>(i)]) return false;
    return true;
  }
};

struct ParticleState {
  Vec position;
  Vec velocity;  // unit
};

struct CollisionEvent {
  double free_path = 0.0;
  Vec hit_point;
  Vec scatterer_center;
  LatticePoint scatterer;
  Vec v_in;
  Vec v_out;
  double impact_parameter = 0.0;   // in [0, r)
  double deflection_angle = 0.0;   // in (0, pi]
  bool horizon = false;            // capped at l_max, velocity unchanged
};

// Specular reflection v - 2(v.n)n. Requires unit inputs and v.n < 0
// (grazing incidence v.n = 0 is rejected); throws std::invalid_argument.
Vec reflect(const Vec& v_in, const Vec& normal);

// First ray-sphere intersection within l_max, visiting lattice cells in ray
// order and testing the 2^d corner scatterers of each visited cell.
// `exclude` names the scatterer the particle just left (a departing ray can
// never re-enter a sphere it starts on, so it is skipped outright).
// Returns nullopt iff no intersection within l_max.
std::optional<CollisionEvent> next_collision(const ParticleState& state,
                                             const LatticeConfig& config,
                                             const LatticePoint* exclude = nullptr);

// Deterministic chain of flights from a given state. Horizon-capped flights
// are recorded with free_path = l_max, horizon = true, and the trajectory
// continues from the cap point with unchanged velocity. `on_scatterer`
// marks the sphere the initial position sits on, if any.
std::vector<CollisionEvent> trace_flights(int64_t n_flights, const LatticeConfig& config,
                                          const ParticleState& init,
                                          const LatticePoint* on_scatterer = nullptr);

// Equilibrium launch: a point on the surface of the origin scatterer with a
// cosine-law outgoing direction. Approximates the stationary post-collision
// law of the flight process.
std::pair<ParticleState, LatticePoint> equilibrium_surface_state(const LatticeConfig& config,
                                                                 Pcg32& rng);

// Seeded wrapper: equilibrium launch + trace. Deterministic in (seed,
// config, n_flights).
std::vector<CollisionEvent> sample_flight_sequence(uint64_t seed, int64_t n_flights,
                                                   const LatticeConfig& config);
std::vector<CollisionEvent> sample_flight_sequence(uint64_t seed, int64_t n_flights,
                                                   const LatticeConfig& config,
                                                   const ParticleState& init,
                                                   const LatticePoint* on_scatterer);

// Physical free paths: horizon-capped records are stitched into the flight
// that terminates them.
std::vector<double> stitched_free_paths(std::span<const CollisionEvent> flights);

// Empirical survival P(xi > x) on the given grid. Throws on empty input.
std::vector<double> free_path_survival(std::span<const double> xi, std::span<const double> grid);

// Test oracle: brute force over every lattice point reachable within l_max.
std::optional<CollisionEvent> next_collision_brute_force(const ParticleState& state,
                                                         const LatticeConfig& config,
                                                         const LatticePoint* exclude = nullptr);

}  // namespace lgas
