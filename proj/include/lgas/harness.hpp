#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "lgas/billiard.hpp"
#include "lgas/constants.hpp"
#include "lgas/limit_chain.hpp"
#include "lgas/parallel.hpp"
#include "lgas/paths.hpp"
#include "lgas/stats.hpp"
#include "lgas/stein.hpp"

namespace lgas {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr int kSchemaVersion = 1;
inline constexpr const char* kOutRootEnv = "LGAS_OUT_ROOT";

enum class Mode { billiard, limit, distances, stein_check, rates, renewal };

const char* mode_name(Mode m);
Mode parse_mode(const std::string& s);

struct ExperimentConfig {
  Mode mode = Mode::limit;
  int d = 2;
  // billiard
  double r = 0.005;
  LatticeScaling scaling = LatticeScaling::boltzmann_grad;
  int64_t n_flights = 100000;
  double l_max_factor = 1e4;  // l_max = factor * xi_bar
  bool emit_flights = true;
  // chain experiments
  std::string backend = "surrogate";  // surrogate | empirical
  std::string table_path;             // empirical input table
  double gamma = 0.5;
  std::vector<int64_t> n_grid = {100, 1000, 10000};
  std::vector<double> t_grid = {10000.0};
  int64_t replicas = 1000;
  int n_proj = 64;
  int m_bins = 32;
  int inner_samples = 256;
  int64_t stein_n = 1000;
  std::string ledger_path;  // rates-mode input; empty = compute in-process
  // common
  uint64_t seed = 1;
  int workers = 0;  // 0 = library default
  std::string out_dir = "out";

  // Merged key=value view (config file first, CLI overrides on top).
  static ExperimentConfig from_map(const std::map<std::string, std::string>& kv);
  void validate() const;  // throws ConfigError with field diagnostics
  std::map<std::string, std::string> to_map() const;
};

struct RunManifest {
  std::map<std::string, std::string> config_echo;
  ModelConstants constants;
  std::string version;
  double wall_ms = 0.0;
  std::vector<std::pair<std::string, double>> stage_ms;
  std::vector<std::pair<std::string, uint64_t>> outputs;  // (filename, fnv64)
};

// Executes the mode pipeline, writes every output atomically under
// out_dir, and returns the manifest (also written as manifest.json).
RunManifest run(const ExperimentConfig& config);

// ---- chain building blocks (shared by pipelines, tests and benchmarks) ----

// Replays replica `replica` of the flight chain: visit(i, xi, v_prev,
// deflection) for i = 0..n-1, where v_prev is the flight's velocity
// V_{i}. Randomness is a pure function of (seed, replica).
template <class Visitor>
void replay_chain(const KernelBackend& backend, int64_t n, uint64_t seed, int64_t replica,
                  Visitor&& visit) {
  Pcg32 rng = derive_stream(seed, Stage::chain, static_cast<uint64_t>(replica));
  ChainState state = initial_chain_state(backend.d);
  for (int64_t i = 0; i < n; ++i) {
    Vec v_prev = state.V;
    state = step_chain(state, backend, rng);
    visit(i, state.xi, v_prev, state.deflection);
  }
}

// Batch of displacements Q_n (optionally truncated at r_n(gamma)).
TrajectoryBatch chain_displacements(const KernelBackend& backend, int64_t n, int64_t replicas,
                                    uint64_t seed, bool truncated, double gamma,
                                    Exec exec = Exec::openmp);

// Pair-machinery adapters for the two kernel backends.
ReplicaGenerator make_replica_generator(const KernelBackend& backend, int64_t n, double gamma,
                                        uint64_t seed);
TildeResampler make_tilde_resampler(const KernelBackend& backend, int64_t n, double gamma);

// Equal-count deflection bins of an empirical table, truncated at r_n.
struct BinnedTable {
  std::vector<double> edges;        // bin upper edges on the deflection angle
  std::vector<double> mean;         // E(xi' | bin)
  std::vector<double> var;          // Var(xi' | bin)
  std::vector<std::vector<double>> members;  // truncated xi' values per bin
  int bin_of(double deflection) const;
};
BinnedTable bin_table(const EmpiricalTable& table, int bins, double r_n);

}  // namespace lgas
