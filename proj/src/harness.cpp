#include "lgas/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <sstream>

#include <json.hpp>

#include "lgas/errors.hpp"
#include "lgas/io.hpp"

namespace lgas {

using nlohmann::json;
namespace fs = std::filesystem;

const char* mode_name(Mode m) {
  switch (m) {
    case Mode::billiard: return "billiard";
    case Mode::limit: return "limit";
    case Mode::distances: return "distances";
    case Mode::stein_check: return "stein-check";
    case Mode::rates: return "rates";
    default: return "renewal";
  }
}

Mode parse_mode(const std::string& s) {
  for (Mode m : {Mode::billiard, Mode::limit, Mode::distances, Mode::stein_check, Mode::rates,
                 Mode::renewal})
    if (s == mode_name(m)) return m;
  throw ConfigError("mode: unknown value '" + s + "'");
}

namespace {

int64_t parse_i64(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    int64_t x = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return x;
  } catch (...) {
    throw ConfigError(key + ": expected integer, got '" + v + "'");
  }
}

double parse_f64(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return x;
  } catch (...) {
    throw ConfigError(key + ": expected number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

template <class T, class F>
std::vector<T> parse_list(const std::string& key, const std::string& v, F&& one) {
  std::vector<T> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(one(key, item));
  }
  if (out.empty()) throw ConfigError(key + ": empty list");
  return out;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_map(const std::map<std::string, std::string>& kv) {
  ExperimentConfig c;
  for (const auto& [key, val] : kv) {
    if (key == "schema_version") {
      if (parse_i64(key, val) != kSchemaVersion)
        throw ConfigError("schema_version: expected " + std::to_string(kSchemaVersion));
    } else if (key == "mode") {
      c.mode = parse_mode(val);
    } else if (key == "d") {
      c.d = static_cast<int>(parse_i64(key, val));
    } else if (key == "r") {
      c.r = parse_f64(key, val);
    } else if (key == "scaling") {
      if (val == "raw")
        c.scaling = LatticeScaling::raw;
      else if (val == "boltzmann_grad")
        c.scaling = LatticeScaling::boltzmann_grad;
      else
        throw ConfigError("scaling: expected raw|boltzmann_grad");
    } else if (key == "n_flights") {
      c.n_flights = parse_i64(key, val);
    } else if (key == "l_max_factor") {
      c.l_max_factor = parse_f64(key, val);
    } else if (key == "emit_flights") {
      c.emit_flights = parse_bool(key, val);
    } else if (key == "backend") {
      if (val != "surrogate" && val != "empirical")
        throw ConfigError("backend: expected surrogate|empirical");
      c.backend = val;
    } else if (key == "table") {
      c.table_path = val;
    } else if (key == "gamma") {
      c.gamma = parse_f64(key, val);
    } else if (key == "n_grid") {
      c.n_grid = parse_list<int64_t>(key, val, parse_i64);
    } else if (key == "t_grid") {
      c.t_grid = parse_list<double>(key, val, parse_f64);
    } else if (key == "replicas") {
      c.replicas = parse_i64(key, val);
    } else if (key == "n_proj") {
      c.n_proj = static_cast<int>(parse_i64(key, val));
    } else if (key == "m_bins") {
      c.m_bins = static_cast<int>(parse_i64(key, val));
    } else if (key == "inner_samples") {
      c.inner_samples = static_cast<int>(parse_i64(key, val));
    } else if (key == "stein_n") {
      c.stein_n = parse_i64(key, val);
    } else if (key == "ledger") {
      c.ledger_path = val;
    } else if (key == "seed") {
      c.seed = static_cast<uint64_t>(parse_i64(key, val));
    } else if (key == "workers") {
      c.workers = static_cast<int>(parse_i64(key, val));
    } else if (key == "out") {
      c.out_dir = val;
    } else {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  c.validate();
  return c;
}

void ExperimentConfig::validate() const {
  if (d < 2 || d > kMaxDim) throw ConfigError("d: must lie in [2, " + std::to_string(kMaxDim) + "]");
  if (!(r > 0.0)) throw ConfigError("r: must be positive");
  if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("gamma: must lie in (0,1)");
  if (n_flights < 0) throw ConfigError("n_flights: must be nonnegative");
  if (replicas <= 0) throw ConfigError("replicas: must be positive");
  if (n_proj <= 0) throw ConfigError("n_proj: must be positive");
  if (m_bins <= 0) throw ConfigError("m_bins: must be positive");
  if (inner_samples <= 0) throw ConfigError("inner_samples: must be positive");
  if (stein_n < 2) throw ConfigError("stein_n: must be >= 2");
  if (workers < 0) throw ConfigError("workers: must be nonnegative");
  if (!(l_max_factor > 0.0)) throw ConfigError("l_max_factor: must be positive");
  if (n_grid.empty()) throw ConfigError("n_grid: must be nonempty");
  for (size_t i = 0; i < n_grid.size(); ++i) {
    if (n_grid[i] < 2) throw ConfigError("n_grid: entries must be >= 2");
    if (i && n_grid[i] <= n_grid[i - 1]) throw ConfigError("n_grid: must be sorted ascending");
  }
  for (double t : t_grid)
    if (!(t > 1.0)) throw ConfigError("t_grid: entries must exceed 1");
  if (backend == "empirical" && table_path.empty() && mode != Mode::billiard)
    throw ConfigError("table: empirical backend needs a table path");
}

std::map<std::string, std::string> ExperimentConfig::to_map() const {
  std::map<std::string, std::string> kv;
  kv["schema_version"] = std::to_string(kSchemaVersion);
  kv["mode"] = mode_name(mode);
  kv["d"] = std::to_string(d);
  kv["r"] = format_double(r);
  kv["scaling"] = scaling == LatticeScaling::raw ? "raw" : "boltzmann_grad";
  kv["n_flights"] = std::to_string(n_flights);
  kv["l_max_factor"] = format_double(l_max_factor);
  kv["emit_flights"] = emit_flights ? "true" : "false";
  kv["backend"] = backend;
  if (!table_path.empty()) kv["table"] = table_path;
  kv["gamma"] = format_double(gamma);
  std::string ns;
  for (size_t i = 0; i < n_grid.size(); ++i) ns += (i ? "," : "") + std::to_string(n_grid[i]);
  kv["n_grid"] = ns;
  std::string ts;
  for (size_t i = 0; i < t_grid.size(); ++i) ts += (i ? "," : "") + format_double(t_grid[i]);
  kv["t_grid"] = ts;
  kv["replicas"] = std::to_string(replicas);
  kv["n_proj"] = std::to_string(n_proj);
  kv["m_bins"] = std::to_string(m_bins);
  kv["inner_samples"] = std::to_string(inner_samples);
  kv["stein_n"] = std::to_string(stein_n);
  if (!ledger_path.empty()) kv["ledger"] = ledger_path;
  kv["seed"] = std::to_string(seed);
  kv["workers"] = std::to_string(workers);
  kv["out"] = out_dir;
  return kv;
}

// ---- chain building blocks ----

TrajectoryBatch chain_displacements(const KernelBackend& backend, int64_t n, int64_t replicas,
                                    uint64_t seed, bool truncated, double gamma, Exec exec) {
  TrajectoryBatch batch;
  batch.d = backend.d;
  batch.n = n;
  batch.replicas = replicas;
  batch.Q.assign(static_cast<size_t>(replicas * backend.d), 0.0);
  const double r_n = truncated ? TruncationParams::make(n, gamma).r_n : 0.0;
  const int d = backend.d;
  parallel_for(exec, replicas, [&](int64_t rep) {
    std::array<Kahan, kMaxDim> acc{};
    replay_chain(backend, n, seed, rep, [&](int64_t, double xi, const Vec& v, double) {
      if (truncated && xi > r_n) return;
      for (int k = 0; k < d; ++k) acc[static_cast<size_t>(k)].add(xi * v[k]);
    });
    double* q = batch.row(rep);
    for (int k = 0; k < d; ++k) q[k] = acc[static_cast<size_t>(k)].sum;
  });
  return batch;
}

BinnedTable bin_table(const EmpiricalTable& table, int bins, double r_n) {
  const size_t n = table.xi.size();
  if (n < 2 * static_cast<size_t>(bins))
    throw WidenBinsError("bin_table: table too small for " + std::to_string(bins) + " bins");
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return table.deflection[a] < table.deflection[b]; });
  BinnedTable bt;
  bt.edges.resize(static_cast<size_t>(bins));
  bt.mean.resize(static_cast<size_t>(bins));
  bt.var.resize(static_cast<size_t>(bins));
  bt.members.resize(static_cast<size_t>(bins));
  size_t base = n / static_cast<size_t>(bins), extra = n % static_cast<size_t>(bins), pos = 0;
  for (int bin = 0; bin < bins; ++bin) {
    size_t count = base + (static_cast<size_t>(bin) < extra ? 1 : 0);
    auto& mem = bt.members[static_cast<size_t>(bin)];
    mem.reserve(count);
    Kahan s1, s2;
    for (size_t j = pos; j < pos + count; ++j) {
      double x = table.xi[order[j]];
      if (x > r_n) x = 0.0;
      mem.push_back(x);
      s1.add(x);
      s2.add(x * x);
    }
    double m = s1.sum / static_cast<double>(count);
    bt.mean[static_cast<size_t>(bin)] = m;
    bt.var[static_cast<size_t>(bin)] = std::max(0.0, s2.sum / static_cast<double>(count) - m * m);
    pos += count;
    bt.edges[static_cast<size_t>(bin)] =
        bin + 1 < bins ? table.deflection[order[pos - 1]] : std::numeric_limits<double>::infinity();
  }
  return bt;
}

int BinnedTable::bin_of(double deflection) const {
  auto it = std::lower_bound(edges.begin(), edges.end(), deflection);
  if (it == edges.end()) --it;
  return static_cast<int>(it - edges.begin());
}

ReplicaGenerator make_replica_generator(const KernelBackend& backend, int64_t n, double gamma,
                                        uint64_t seed) {
  auto params = TruncationParams::make(n, gamma);
  if (backend.kind == KernelBackend::Kind::surrogate_iid) {
    const double m = backend.surrogate.truncated_moment(1, params.r_n);
    const double var = backend.surrogate.truncated_moment(2, params.r_n) - m * m;
    const KernelBackend* bk = &backend;
    return [bk, n, seed, m, var, params](int64_t replica, ReplicaPath& out) {
      out.xi_tilde.assign(static_cast<size_t>(n), 0.0);
      out.V.assign(static_cast<size_t>(n), Vec());
      out.cond_var.assign(static_cast<size_t>(n), var);
      out.bin.clear();
      replay_chain(*bk, n, seed, replica, [&](int64_t i, double xi, const Vec& v, double) {
        double trunc = xi > params.r_n ? 0.0 : xi;
        out.xi_tilde[static_cast<size_t>(i)] = trunc - m;
        out.V[static_cast<size_t>(i)] = v;
      });
    };
  }
  auto bt = std::make_shared<BinnedTable>(bin_table(backend.table, backend.m_bins, params.r_n));
  const KernelBackend* bk = &backend;
  return [bk, bt, n, seed, params](int64_t replica, ReplicaPath& out) {
    out.xi_tilde.assign(static_cast<size_t>(n), 0.0);
    out.V.assign(static_cast<size_t>(n), Vec());
    out.cond_var.assign(static_cast<size_t>(n), 0.0);
    out.bin.assign(static_cast<size_t>(n), 0);
    replay_chain(*bk, n, seed, replica, [&](int64_t i, double xi, const Vec& v, double defl) {
      int bin = bt->bin_of(defl);
      double trunc = xi > params.r_n ? 0.0 : xi;
      out.xi_tilde[static_cast<size_t>(i)] = trunc - bt->mean[static_cast<size_t>(bin)];
      out.V[static_cast<size_t>(i)] = v;
      out.cond_var[static_cast<size_t>(i)] = bt->var[static_cast<size_t>(bin)];
      out.bin[static_cast<size_t>(i)] = bin;
    });
  };
}

TildeResampler make_tilde_resampler(const KernelBackend& backend, int64_t n, double gamma) {
  auto params = TruncationParams::make(n, gamma);
  if (backend.kind == KernelBackend::Kind::surrogate_iid) {
    const double m = backend.surrogate.truncated_moment(1, params.r_n);
    const SurrogateKernel kernel = backend.surrogate;
    return [kernel, m, params](size_t, const ReplicaPath&, Pcg32& rng) {
      double xi = kernel.inv_cdf(rng.next_double());
      return (xi > params.r_n ? 0.0 : xi) - m;
    };
  }
  auto bt = std::make_shared<BinnedTable>(bin_table(backend.table, backend.m_bins, params.r_n));
  return [bt](size_t i, const ReplicaPath& path, Pcg32& rng) {
    int bin = path.bin.empty() ? 0 : path.bin[i];
    const auto& mem = bt->members[static_cast<size_t>(bin)];
    return mem[rng.next_below(mem.size())] - bt->mean[static_cast<size_t>(bin)];
  };
}

// ---- pipelines ----

namespace {

struct StageTimer {
  std::vector<std::pair<std::string, double>>& sink;
  std::string name;
  std::chrono::steady_clock::time_point start;
  StageTimer(std::vector<std::pair<std::string, double>>& s, std::string n)
      : sink(s), name(std::move(n)), start(std::chrono::steady_clock::now()) {}
  ~StageTimer() {
    double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    sink.emplace_back(name, ms);
  }
};

json constants_json(const ModelConstants& c) {
  json j;
  j["d"] = c.d;
  j["zeta_d"] = c.zeta_d;
  j["theta_d"] = c.theta_d;
  j["sigma2_d"] = c.sigma2_d;
  j["Sigma2_d"] = c.Sigma2_d;
  j["xi_bar"] = c.xi_bar;
  return j;
}

json config_json(const ExperimentConfig& c) {
  json j;
  for (const auto& [k, v] : c.to_map()) j[k] = v;
  return j;
}

struct OutputSink {
  fs::path dir;
  std::vector<std::pair<std::string, uint64_t>> written;
  void write(const std::string& name, const std::string& content) {
    fs::path p = dir / name;
    write_file_atomic(p, content);
    written.emplace_back(name, fnv1a64(std::span<const char>(content.data(), content.size())));
  }
};

KernelBackend build_backend(const ExperimentConfig& cfg, const ModelConstants& constants) {
  if (cfg.backend == "surrogate") return KernelBackend::make_surrogate(constants);
  auto [xi, defl] = read_table_csv(cfg.table_path);
  EmpiricalTable table{std::move(xi), std::move(defl)};
  return KernelBackend::make_empirical(cfg.d, std::move(table), cfg.m_bins);
}

json backend_json(const KernelBackend& backend) {
  json j;
  if (backend.kind == KernelBackend::Kind::surrogate_iid) {
    j["kind"] = "surrogate_iid";
    j["x0"] = backend.surrogate.x0;
    j["c0"] = backend.surrogate.c0;
    j["plateau_edge"] = backend.surrogate.b;
    j["theta_d"] = backend.surrogate.theta;
    j["xi_bar"] = backend.surrogate.xi_bar;
    j["moment_matched"] = backend.surrogate.moment_matched;
  } else {
    j["kind"] = "empirical";
    j["rows"] = backend.table.xi.size();
    j["m_bins"] = backend.m_bins;
  }
  return j;
}

CsvWriter make_ledger() {
  return CsvWriter({"metric", "backend", "d", "gamma", "n_or_t", "value", "stderr", "seed"});
}

void ledger_row(CsvWriter& csv, const std::string& metric, const ExperimentConfig& cfg,
                double n_or_t, double value, double err) {
  std::vector<std::string> row{metric,
                               cfg.backend,
                               std::to_string(cfg.d),
                               format_double(cfg.gamma),
                               format_double(n_or_t),
                               format_double(value),
                               format_double(err),
                               std::to_string(cfg.seed)};
  csv.add_row(row);
}

std::vector<Vec> orthant_grid(int d) {
  std::vector<double> axis;
  for (double z = -3.0; z <= 3.0001; z += 0.75) axis.push_back(z);
  std::vector<Vec> grid;
  std::array<size_t, kMaxDim> idx{};
  size_t total = 1;
  for (int k = 0; k < d; ++k) total *= axis.size();
  for (size_t flat = 0; flat < total; ++flat) {
    Vec z(d);
    for (int k = 0; k < d; ++k) z[k] = axis[idx[static_cast<size_t>(k)]];
    grid.push_back(z);
    for (int k = 0; k < d; ++k) {
      if (++idx[static_cast<size_t>(k)] < axis.size()) break;
      idx[static_cast<size_t>(k)] = 0;
    }
  }
  return grid;
}

// ---------- billiard ----------

void run_billiard(const ExperimentConfig& cfg, const ModelConstants& constants, OutputSink& sink,
                  std::vector<std::pair<std::string, double>>& stages) {
  LatticeConfig lat;
  lat.d = cfg.d;
  lat.r = cfg.r;
  lat.scaling = cfg.scaling;
  lat.l_max = cfg.l_max_factor * constants.xi_bar;

  std::vector<CollisionEvent> flights;
  {
    StageTimer t(stages, "trace");
    flights = sample_flight_sequence(cfg.seed, cfg.n_flights, lat);
  }

  std::vector<double> xi;
  std::vector<double> defl;
  int64_t horizon_count = 0;
  {
    StageTimer t(stages, "stats");
    xi = stitched_free_paths(flights);
    double carry = 0.0;
    for (const auto& ev : flights) {
      if (ev.horizon) {
        ++horizon_count;
        carry += ev.free_path;
      } else {
        defl.push_back(ev.deflection_angle);
        carry = 0.0;
      }
    }
    (void)carry;
  }

  Kahan mean_acc;
  for (double x : xi) mean_acc.add(x);
  double mean_xi = xi.empty() ? 0.0 : mean_acc.sum / static_cast<double>(xi.size());

  // survival on a log grid
  std::vector<double> grid;
  for (double x = 0.02; x <= 400.0; x *= 1.2589254117941673) grid.push_back(x);  // 10^(1/10) steps
  std::vector<double> surv = free_path_survival(xi, grid);

  // log-log slope over [5, 50] and the tail amplitude at x = 20
  double slope = 0.0, tail_at_20 = 0.0;
  int fit_points = 0;
  {
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (size_t i = 0; i < grid.size(); ++i) {
      if (grid[i] < 5.0 || grid[i] > 50.0 || surv[i] <= 0.0) continue;
      double lx = std::log(grid[i]), ly = std::log(surv[i]);
      sx += lx;
      sy += ly;
      sxx += lx * lx;
      sxy += lx * ly;
      ++fit_points;
    }
    if (fit_points >= 3)
      slope = (fit_points * sxy - sx * sy) / (fit_points * sxx - sx * sx);
    std::vector<double> at20 = free_path_survival(xi, std::vector<double>{20.0});
    tail_at_20 = 400.0 * at20[0];
  }

  {
    StageTimer t(stages, "write");
    if (cfg.emit_flights) {
      std::vector<std::string> cols{"index", "xi"};
      for (int k = 0; k < cfg.d; ++k) cols.push_back("hit_x" + std::to_string(k + 1));
      for (int k = 0; k < cfg.d; ++k) cols.push_back("v_out_" + std::to_string(k + 1));
      cols.push_back("impact_parameter");
      cols.push_back("deflection_angle");
      cols.push_back("horizon_flag");
      CsvWriter csv(cols);
      for (size_t i = 0; i < flights.size(); ++i) {
        const auto& ev = flights[i];
        std::vector<std::string> row;
        row.push_back(std::to_string(i));
        row.push_back(format_double(ev.free_path));
        for (int k = 0; k < cfg.d; ++k) row.push_back(format_double(ev.hit_point[k]));
        for (int k = 0; k < cfg.d; ++k) row.push_back(format_double(ev.v_out[k]));
        row.push_back(format_double(ev.impact_parameter));
        row.push_back(format_double(ev.deflection_angle));
        row.push_back(ev.horizon ? "1" : "0");
        csv.add_row(row);
      }
      sink.write("flights.csv", csv.str());
    }

    CsvWriter scsv({"x", "survival"});
    for (size_t i = 0; i < grid.size(); ++i) {
      std::vector<std::string> row{format_double(grid[i]), format_double(surv[i])};
      scsv.add_row(row);
    }
    sink.write("survival.csv", scsv.str());

    write_table_csv(sink.dir / "table.csv", xi, defl);
    sink.written.emplace_back("table.csv", file_hash(sink.dir / "table.csv"));

    json j;
    j["constants"] = constants_json(constants);
    j["config"] = config_json(cfg);
    j["mean_xi"] = mean_xi;
    j["flights"] = xi.size();
    j["horizon_count"] = horizon_count;
    j["survival_slope_5_50"] = slope;
    j["survival_fit_points"] = fit_points;
    j["tail_x2_survival_at_20"] = tail_at_20;
    j["tail_target_half_theta"] = constants.theta_d / 2.0;
    sink.write("summary.json", j.dump(2) + "\n");
  }
}

// ---------- limit ----------

void run_limit(const ExperimentConfig& cfg, const ModelConstants& constants, OutputSink& sink,
               std::vector<std::pair<std::string, double>>& stages) {
  KernelBackend backend = build_backend(cfg, constants);
  CsvWriter ledger = make_ledger();
  json moments = json::array();

  TrajectoryBatch last_batch;
  for (int64_t n : cfg.n_grid) {
    StageTimer t(stages, "n=" + std::to_string(n));
    auto params = TruncationParams::make(n, cfg.gamma);

    TrajectoryBatch trunc = chain_displacements(backend, n, cfg.replicas, cfg.seed, true, cfg.gamma);
    double q2 = second_moment_ratio(trunc, constants);

    // pooled decomposition over as many replicas as fit a 2e6-draw budget
    int64_t pool_reps = std::max<int64_t>(1, std::min(cfg.replicas, 2000000 / n));
    std::vector<double> xi_pool, defl_pool;
    xi_pool.reserve(static_cast<size_t>(pool_reps * n));
    defl_pool.reserve(static_cast<size_t>(pool_reps * n));
    for (int64_t rep = 0; rep < pool_reps; ++rep)
      replay_chain(backend, n, cfg.seed, rep, [&](int64_t, double xv, const Vec&, double dv) {
        xi_pool.push_back(xv);
        defl_pool.push_back(dv);
      });
    Kahan mean_raw;
    for (double x : xi_pool) mean_raw.add(x);
    double mean_xi = mean_raw.sum / static_cast<double>(xi_pool.size());

    auto xtr = truncate(xi_pool, params);
    auto dec = decompose(xtr, defl_pool, backend, params);
    MomentReport rep = moment_suite(dec, params, constants);

    ledger_row(ledger, "mean_xi", cfg, static_cast<double>(n), mean_xi, 0.0);
    ledger_row(ledger, "xi2_ratio", cfg, static_cast<double>(n), rep.xi2_ratio, 0.0);
    ledger_row(ledger, "q2_ratio", cfg, static_cast<double>(n), q2, 0.0);

    Kahan m_acc, t2_acc;
    for (double mv : dec.m) m_acc.add(mv);
    for (double tv : dec.xi_tilde) t2_acc.add(tv * tv);
    json mj;
    mj["n"] = n;
    mj["gamma"] = cfg.gamma;
    mj["r_n"] = params.r_n;
    mj["pooled_draws"] = xi_pool.size();
    mj["mean_xi"] = mean_xi;
    mj["mean_m"] = m_acc.sum / static_cast<double>(dec.m.size());
    mj["var_xi_tilde"] = t2_acc.sum / static_cast<double>(dec.xi_tilde.size());
    mj["xi2"] = rep.xi2;
    mj["xi2_pred"] = rep.xi2_pred;
    mj["xi2_ratio"] = rep.xi2_ratio;
    mj["xi3_over_rn"] = rep.xi3_scaled;
    mj["xi4_over_rn2"] = rep.xi4_scaled;
    mj["tilde4_over_rn2"] = rep.tilde4_scaled;
    mj["q2_ratio"] = q2;
    moments.push_back(mj);

    if (n == cfg.n_grid.back()) last_batch = std::move(trunc);
  }

  // mixing diagnostics on one long replica
  json mixing_json;
  {
    StageTimer t(stages, "mixing");
    const int max_lag = 8;
    const int64_t run_len = std::max<int64_t>(2000, 10 * max_lag + 2);
    std::vector<ChainState> run;
    run.reserve(static_cast<size_t>(run_len));
    Pcg32 rng = derive_stream(cfg.seed, Stage::chain, 1u << 30);
    ChainState st = initial_chain_state(backend.d);
    for (int64_t i = 0; i < run_len; ++i) {
      st = step_chain(st, backend, rng);
      run.push_back(st);
    }
    auto f = [](const ChainState& a, const ChainState&) { return a.V[0] * a.xi; };
    auto cov = mixing_series(run, f, max_lag);
    std::vector<double> series;
    series.reserve(run.size() - 1);
    for (size_t i = 0; i + 1 < run.size(); ++i) series.push_back(f(run[i], run[i + 1]));
    Pcg32 prng = derive_stream(cfg.seed, Stage::misc, 7);
    double floor = mixing_noise_floor(series, 32, prng);
    MixingFit fit = mixing_fit(cov, floor);

    CsvWriter mcsv({"lag", "cov"});
    for (size_t k = 0; k < cov.size(); ++k) {
      std::vector<std::string> row{std::to_string(k), format_double(cov[k])};
      mcsv.add_row(row);
    }
    sink.write("mixing.csv", mcsv.str());
    mixing_json["noise_floor"] = floor;
    mixing_json["decay_detected"] = fit.decay_detected;
    mixing_json["C"] = fit.C;
    mixing_json["omega"] = fit.omega;
  }

  {
    StageTimer t(stages, "write");
    sink.write("ledger.csv", ledger.str());

    CsvWriter bcsv([&] {
      std::vector<std::string> cols{"replica", "n"};
      for (int k = 0; k < cfg.d; ++k) cols.push_back("q_" + std::to_string(k + 1));
      return cols;
    }());
    for (int64_t rr = 0; rr < last_batch.replicas; ++rr) {
      std::vector<std::string> row{std::to_string(rr), std::to_string(last_batch.n)};
      for (int k = 0; k < cfg.d; ++k) row.push_back(format_double(last_batch.row(rr)[k]));
      bcsv.add_row(row);
    }
    sink.write("batch.csv", bcsv.str());

    json j;
    j["constants"] = constants_json(constants);
    j["config"] = config_json(cfg);
    j["backend"] = backend_json(backend);
    j["moments"] = moments;
    j["mixing"] = mixing_json;
    sink.write("moments.json", j.dump(2) + "\n");
  }
}

// ---------- distances ----------

json distances_for_grid(const ExperimentConfig& cfg, const ModelConstants& constants,
                        const KernelBackend& backend, CsvWriter& ledger,
                        std::vector<std::pair<std::string, double>>& stages,
                        std::vector<std::pair<int64_t, double>>* sliced_points) {
  json rows = json::array();
  auto grid = orthant_grid(cfg.d);
  for (int64_t n : cfg.n_grid) {
    StageTimer t(stages, "n=" + std::to_string(n));
    TrajectoryBatch q = chain_displacements(backend, n, cfg.replicas, cfg.seed, false, cfg.gamma);
    TrajectoryBatch w = normalize_discrete(q, constants);

    Pcg32 rng = derive_stream(cfg.seed, Stage::slice, static_cast<uint64_t>(n));
    DistanceReport sw = sliced_w1(w, cfg.n_proj, rng);

    double ks_max = 0.0;
    std::vector<double> coord(static_cast<size_t>(w.replicas));
    for (int k = 0; k < cfg.d; ++k) {
      for (int64_t rr = 0; rr < w.replicas; ++rr) coord[static_cast<size_t>(rr)] = w.row(rr)[k];
      ks_max = std::max(ks_max, ks_1d_normal(coord));
    }
    DistanceReport ko = ks_orthant(w, grid);

    ledger_row(ledger, "sliced_w1", cfg, static_cast<double>(n), sw.value, sw.stderr_);
    ledger_row(ledger, "ks_coord_max", cfg, static_cast<double>(n), ks_max, 0.0);
    ledger_row(ledger, "ks_orthant", cfg, static_cast<double>(n), ko.value, 0.0);

    json row;
    row["n"] = n;
    row["sliced_w1"] = sw.value;
    row["sliced_w1_stderr"] = sw.stderr_;
    row["ks_coord_max"] = ks_max;
    row["ks_orthant"] = ko.value;
    rows.push_back(row);
    if (sliced_points) sliced_points->emplace_back(n, sw.value);
  }
  return rows;
}

void run_distances(const ExperimentConfig& cfg, const ModelConstants& constants, OutputSink& sink,
                   std::vector<std::pair<std::string, double>>& stages) {
  KernelBackend backend = build_backend(cfg, constants);
  CsvWriter ledger = make_ledger();
  json rows = distances_for_grid(cfg, constants, backend, ledger, stages, nullptr);
  StageTimer t(stages, "write");
  sink.write("ledger.csv", ledger.str());
  json j;
  j["constants"] = constants_json(constants);
  j["config"] = config_json(cfg);
  j["backend"] = backend_json(backend);
  j["distances"] = rows;
  sink.write("distances.json", j.dump(2) + "\n");
}

// ---------- rates ----------

void run_rates(const ExperimentConfig& cfg, const ModelConstants& constants, OutputSink& sink,
               std::vector<std::pair<std::string, double>>& stages) {
  std::vector<std::pair<double, double>> points;
  json source;
  if (!cfg.ledger_path.empty()) {
    StageTimer t(stages, "parse");
    std::istringstream in(read_file(cfg.ledger_path));
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
      std::stringstream ss(line);
      std::string cell;
      std::vector<std::string> cells;
      while (std::getline(ss, cell, ',')) cells.push_back(cell);
      if (cells.size() >= 6 && cells[0] == "sliced_w1")
        points.emplace_back(std::stod(cells[4]), std::stod(cells[5]));
    }
    source["ledger"] = cfg.ledger_path;
  } else {
    KernelBackend backend = build_backend(cfg, constants);
    CsvWriter ledger = make_ledger();
    std::vector<std::pair<int64_t, double>> sp;
    distances_for_grid(cfg, constants, backend, ledger, stages, &sp);
    for (auto& [n, v] : sp) points.emplace_back(static_cast<double>(n), v);
    sink.write("ledger.csv", ledger.str());
    source["ledger"] = "ledger.csv";
  }

  StageTimer t(stages, "fit");
  auto fits = rate_fit_all(points);
  json j;
  j["constants"] = constants_json(constants);
  j["config"] = config_json(cfg);
  j["source"] = source;
  json farr = json::array();
  for (const auto& f : fits) {
    json fj;
    fj["model"] = rate_model_name(f.model);
    fj["c"] = f.c;
    fj["residual"] = f.residual;
    farr.push_back(fj);
  }
  j["fits"] = farr;  // sorted by residual; first entry wins the comparison
  j["winner"] = rate_model_name(fits.front().model);
  json parr = json::array();
  for (auto& [n, v] : points) {
    json pj;
    pj["n"] = n;
    pj["value"] = v;
    parr.push_back(pj);
  }
  j["points"] = parr;
  sink.write("rates.json", j.dump(2) + "\n");
}

// ---------- stein-check ----------

void run_stein_check(const ExperimentConfig& cfg, const ModelConstants& constants,
                     OutputSink& sink, std::vector<std::pair<std::string, double>>& stages) {
  KernelBackend backend = build_backend(cfg, constants);
  auto battery = test_battery(cfg.d, cfg.seed);
  auto probes = bound_probes(cfg.d, 100, cfg.seed);

  json records = json::array();
  std::vector<SteinSolution> solutions;
  solutions.reserve(battery.size());
  {
    StageTimer t(stages, "battery");
    for (const auto& fn : battery) solutions.push_back(solve_stein(fn));
    std::vector<json> recs(battery.size());
    parallel_for(Exec::openmp, static_cast<int64_t>(battery.size()), [&](int64_t i) {
      const auto& fn = battery[static_cast<size_t>(i)];
      const auto& sol = solutions[static_cast<size_t>(i)];
      double worst = 0.0;
      for (const Vec& w : probes) worst = std::max(worst, std::abs(sol.stein_residual(w)));
      BoundsReport br = check_derivative_bounds(fn, sol, probes);
      json r;
      r["id"] = fn.id;
      r["stein_residual_max"] = worst;
      r["e_h_z"] = sol.e_h_z();
      r["bounds"] = {{"sup_df", br.sup_df},         {"bound_df", br.bound_df},
                     {"sup_hess_hs", br.sup_hess_hs}, {"bound_hess", br.bound_hess},
                     {"sup_d3", br.sup_d3},          {"bound_d3", br.bound_d3},
                     {"ok", br.ok}};
      recs[static_cast<size_t>(i)] = r;
    });
    for (auto& r : recs) records.push_back(r);
  }

  auto gen = make_replica_generator(backend, cfg.stein_n, cfg.gamma, cfg.seed);
  auto res = make_tilde_resampler(backend, cfg.stein_n, cfg.gamma);

  json identities;
  {
    StageTimer t(stages, "identities");
    const SteinSolution* fh = nullptr;
    for (size_t i = 0; i < battery.size(); ++i)
      if (battery[i].id == "sin_1") fh = &solutions[i];
    PairIdentityReport rep = verify_pair_identities(gen, res, cfg.d, cfg.stein_n, cfg.replicas,
                                                    cfg.inner_samples, constants, cfg.seed, fh);
    identities["n"] = rep.n;
    identities["replicas"] = rep.replicas;
    identities["inner_samples"] = rep.inner;
    identities["slope"] = rep.slope;
    identities["slope_target"] = rep.slope_target;
    identities["slope_stderr"] = rep.slope_stderr;
    identities["quad_max_abs_z"] = rep.quad_max_abs_z;
    identities["antisym_mean"] = rep.antisym_mean;
    identities["antisym_stderr"] = rep.antisym_stderr;
    if (rep.has_quadrature_fh) {
      identities["antisym_quad_mean"] = rep.antisym_q_mean;
      identities["antisym_quad_stderr"] = rep.antisym_q_stderr;
    }
  }

  json leading = json::array();
  {
    StageTimer t(stages, "leading_error");
    int64_t reps = std::min<int64_t>(cfg.replicas, 1000);
    std::vector<std::string> subset{"coord_1", "square_1", "sin_1", "bump_1"};
    for (int64_t n : {cfg.stein_n, cfg.stein_n * 10}) {
      auto gen_n = make_replica_generator(backend, n, cfg.gamma, cfg.seed);
      for (size_t i = 0; i < battery.size(); ++i) {
        if (std::find(subset.begin(), subset.end(), battery[i].id) == subset.end()) continue;
        LeadingErrorRecord rec =
            leading_error_term(gen_n, cfg.d, n, reps, constants, solutions[i], cfg.seed);
        json r;
        r["id"] = rec.fn_id;
        r["n"] = rec.n;
        r["estimate"] = rec.estimate;
        r["est_stderr"] = rec.est_stderr;
        r["direct_gap"] = rec.direct_gap;
        r["gap_stderr"] = rec.gap_stderr;
        leading.push_back(r);
      }
    }
  }

  StageTimer t(stages, "write");
  json j;
  j["constants"] = constants_json(constants);
  j["config"] = config_json(cfg);
  j["backend"] = backend_json(backend);
  j["battery"] = records;
  j["pair_identities"] = identities;
  j["leading_error"] = leading;
  sink.write("stein.json", j.dump(2) + "\n");
}

// ---------- renewal ----------

void run_renewal(const ExperimentConfig& cfg, const ModelConstants& constants, OutputSink& sink,
                 std::vector<std::pair<std::string, double>>& stages) {
  KernelBackend backend = build_backend(cfg, constants);
  CsvWriter rcsv({"t", "n_t", "mean_dev", "p_dev_ge_t075", "bound", "ks_cont", "ks_disc"});
  json rows = json::array();
  const int d = cfg.d;

  for (double t : cfg.t_grid) {
    StageTimer st(stages, "t=" + format_double(t));
    const int64_t n_t = static_cast<int64_t>(std::floor(t / constants.xi_bar));
    const int64_t max_flights = 3 * n_t + 1000;
    const int64_t R = cfg.replicas;

    std::vector<double> dev(static_cast<size_t>(R), 0.0);
    std::vector<double> w_cont(static_cast<size_t>(R * d), 0.0);
    std::vector<double> w_disc(static_cast<size_t>(R * d), 0.0);

    parallel_for(Exec::openmp, R, [&](int64_t rep) {
      Pcg32 rng = derive_stream(cfg.seed, Stage::chain, static_cast<uint64_t>(rep));
      ChainState state = initial_chain_state(d);
      std::array<Kahan, kMaxDim> q{};
      Kahan tau;
      int64_t i = 0;
      int64_t nu = -1;
      std::array<double, kMaxDim> q_nt{};
      std::array<double, kMaxDim> x_t{};
      bool have_nt = n_t == 0, have_nu = false;
      while (i < max_flights && (!have_nt || !have_nu)) {
        Vec v_prev = state.V;
        state = step_chain(state, backend, rng);
        double tau_prev = tau.sum;
        if (!have_nu && tau_prev <= t && t < tau_prev + state.xi) {
          nu = i;
          for (int k = 0; k < d; ++k)
            x_t[static_cast<size_t>(k)] = q[static_cast<size_t>(k)].sum + (t - tau_prev) * v_prev[k];
          have_nu = true;
        }
        tau.add(state.xi);
        for (int k = 0; k < d; ++k) q[static_cast<size_t>(k)].add(state.xi * v_prev[k]);
        ++i;
        if (!have_nt && i == n_t) {
          for (int k = 0; k < d; ++k) q_nt[static_cast<size_t>(k)] = q[static_cast<size_t>(k)].sum;
          have_nt = true;
        }
      }
      dev[static_cast<size_t>(rep)] = std::abs(static_cast<double>(nu - n_t));
      double cs = continuous_scale(t, constants);
      double ds = discrete_scale(std::max<int64_t>(n_t, 2), constants);
      for (int k = 0; k < d; ++k) {
        w_cont[static_cast<size_t>(rep * d + k)] = cs * x_t[static_cast<size_t>(k)];
        w_disc[static_cast<size_t>(rep * d + k)] = ds * q_nt[static_cast<size_t>(k)];
      }
    });

    double thresh = std::pow(t, 0.75);
    int64_t exceed = 0;
    Kahan dev_acc;
    for (double dv : dev) {
      dev_acc.add(dv);
      if (dv >= thresh) ++exceed;
    }
    double p_dev = static_cast<double>(exceed) / static_cast<double>(R);
    double bound = 5.0 * t * std::log(t) / std::pow(t, 1.5);

    double ks_cont = 0.0, ks_disc = 0.0;
    std::vector<double> coord(static_cast<size_t>(R));
    for (int k = 0; k < d; ++k) {
      for (int64_t rep = 0; rep < R; ++rep) coord[static_cast<size_t>(rep)] = w_cont[static_cast<size_t>(rep * d + k)];
      ks_cont = std::max(ks_cont, ks_1d_normal(coord));
      for (int64_t rep = 0; rep < R; ++rep) coord[static_cast<size_t>(rep)] = w_disc[static_cast<size_t>(rep * d + k)];
      ks_disc = std::max(ks_disc, ks_1d_normal(coord));
    }

    std::vector<std::string> row{format_double(t),        std::to_string(n_t),
                                 format_double(dev_acc.sum / static_cast<double>(R)),
                                 format_double(p_dev),    format_double(bound),
                                 format_double(ks_cont),  format_double(ks_disc)};
    rcsv.add_row(row);
    json rj;
    rj["t"] = t;
    rj["n_t"] = n_t;
    rj["mean_dev"] = dev_acc.sum / static_cast<double>(R);
    rj["p_dev_ge_t075"] = p_dev;
    rj["bound"] = bound;
    rj["ks_cont"] = ks_cont;
    rj["ks_disc"] = ks_disc;
    rows.push_back(rj);
  }

  StageTimer t2(stages, "write");
  sink.write("renewal.csv", rcsv.str());
  json j;
  j["constants"] = constants_json(constants);
  j["config"] = config_json(cfg);
  j["renewal"] = rows;
  sink.write("renewal.json", j.dump(2) + "\n");
}

}  // namespace

RunManifest run(const ExperimentConfig& config) {
  config.validate();
  set_workers(config.workers);
  auto t0 = std::chrono::steady_clock::now();

  ModelConstants constants = make_constants(config.d);

  fs::path out = config.out_dir;
  if (const char* root = std::getenv(kOutRootEnv); root && *root && out.is_relative())
    out = fs::path(root) / out;

  OutputSink sink;
  sink.dir = out;
  fs::create_directories(out);

  RunManifest manifest;
  manifest.config_echo = config.to_map();
  manifest.constants = constants;
  manifest.version = kVersion;

  switch (config.mode) {
    case Mode::billiard: run_billiard(config, constants, sink, manifest.stage_ms); break;
    case Mode::limit: run_limit(config, constants, sink, manifest.stage_ms); break;
    case Mode::distances: run_distances(config, constants, sink, manifest.stage_ms); break;
    case Mode::rates: run_rates(config, constants, sink, manifest.stage_ms); break;
    case Mode::stein_check: run_stein_check(config, constants, sink, manifest.stage_ms); break;
    case Mode::renewal: run_renewal(config, constants, sink, manifest.stage_ms); break;
  }

  manifest.outputs = sink.written;
  manifest.wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

  json j;
  j["schema_version"] = kSchemaVersion;
  j["version"] = manifest.version;
  json cj;
  for (const auto& [k, v] : manifest.config_echo) cj[k] = v;
  j["config"] = cj;
  j["constants"] = constants_json(constants);
  json outs = json::array();
  char hex[24];
  for (const auto& [name, hash] : manifest.outputs) {
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(hash));
    json oj;
    oj["file"] = name;
    oj["fnv64"] = hex;
    outs.push_back(oj);
  }
  j["outputs"] = outs;
  json timings;
  timings["wall_ms"] = manifest.wall_ms;
  json st = json::array();
  for (const auto& [name, ms] : manifest.stage_ms) {
    json sj;
    sj["name"] = name;
    sj["ms"] = ms;
    st.push_back(sj);
  }
  timings["stages"] = st;
  j["timings"] = timings;  // nondeterministic section; data outputs above are seed-pure
  write_file_atomic(out / "manifest.json", j.dump(2) + "\n");
  return manifest;
}

}  // namespace lgas
