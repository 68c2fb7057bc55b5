#pragma once

// Command implementations behind the `gplsim` executable. Each command reads
// a resolved RunConfig, writes its files into the output directory and
// returns the process exit code.

#include <json.hpp>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "gplsim/bootstrap.hpp"
#include "gplsim/competitors.hpp"
#include "gplsim/el.hpp"
#include "gplsim/io.hpp"
#include "gplsim/profile.hpp"
#include "gplsim/simulation.hpp"

namespace gplsim::cli {

using nlohmann::json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 2;
inline constexpr int kExitNonConverged = 3;

/// Flat key/value configuration. Defaults, then a JSON file, then flags.
class RunConfig {
 public:
  RunConfig() : j_(defaults()) {}

  static json defaults() {
    return json{{"data", ""},
                {"out", "."},
                {"family", "gaussian"},
                {"corr", "ar1"},
                {"K", json::array({6, 8, 10, 12})},
                {"tol_theta", 1e-6},
                {"tol_gamma", 1e-8},
                {"max_outer", 100},
                {"max_inner", 50},
                {"update_rho", true},
                {"freeze_rho", false},
                {"level", 0.95},
                {"seed", 1},
                {"B", 200},
                {"B_star", 200},
                {"L", 200},
                {"cv_folds", 5},
                {"standardize", false},
                {"allow_nonconverged", false},
                {"method", "all"},
                {"components", json::array()},
                {"poly_degree", 2},
                {"n", 100},
                {"rho", 0.0},
                {"kappa", 0.0},
                {"heavy_tails", false},
                {"allow_override", false},
                {"with_ci", true},
                {"corrs", json::array({"independence", "ar1", "exchangeable"})},
                {"ci_ind", ""},
                {"ci_ar1", ""},
                {"ci_exc", ""}};
  }

  /// Merges `patch`, rejecting unknown keys and type mismatches.
  void merge(const json& patch, const std::string& origin) {
    if (!patch.is_object()) throw ConfigError(origin + ": configuration must be a flat JSON object");
    const json def = defaults();
    for (auto it = patch.begin(); it != patch.end(); ++it) {
      if (!def.contains(it.key())) throw ConfigError(origin + ": unknown key '" + it.key() + "'");
      const json& ref = def[it.key()];
      const json& v = it.value();
      const bool ok = (ref.is_boolean() && v.is_boolean()) || (ref.is_string() && v.is_string()) ||
                      (ref.is_number_integer() && v.is_number_integer()) ||
                      (ref.is_number_float() && v.is_number()) || (ref.is_array() && v.is_array());
      if (!ok) throw ConfigError(origin + ": key '" + it.key() + "' has the wrong type");
      j_[it.key()] = v.is_number() && ref.is_number_float() ? json(v.get<double>()) : v;
    }
  }

  void merge_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path);
    json patch;
    try {
      patch = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError(path + ": " + e.what());
    }
    merge(patch, path);
  }

  /// Converts a flag value given as text into the key's JSON type.
  static json from_text(const std::string& key, const std::string& text) {
    const json def = defaults();
    if (!def.contains(key)) throw ConfigError("unknown option '" + key + "'");
    const json& ref = def[key];
    try {
      if (ref.is_boolean()) {
        if (text == "true" || text == "1") return true;
        if (text == "false" || text == "0") return false;
        throw ConfigError("");
      }
      if (ref.is_string()) return text;
      if (ref.is_number_integer()) return std::stoll(text);
      if (ref.is_number_float()) return std::stod(text);
      json arr = json::array();
      std::stringstream ss(text);
      std::string item;
      const bool ints = key == "K";
      while (std::getline(ss, item, ','))
        if (!io::trim(item).empty()) arr.push_back(ints ? json(std::stoi(item)) : json(io::trim(item)));
      return arr;
    } catch (const std::exception&) {
      throw ConfigError("option --" + key + ": cannot parse '" + text + "'");
    }
  }

  const json& raw() const { return j_; }
  std::string str(const char* k) const { return j_.at(k).get<std::string>(); }
  double num(const char* k) const { return j_.at(k).get<double>(); }
  long long integer(const char* k) const { return j_.at(k).get<long long>(); }
  bool flag(const char* k) const { return j_.at(k).get<bool>(); }
  std::vector<std::string> strings(const char* k) const { return j_.at(k).get<std::vector<std::string>>(); }
  std::vector<int> ints(const char* k) const { return j_.at(k).get<std::vector<int>>(); }

  OutcomeFamily family() const { return OutcomeFamily::parse(str("family")); }
  CorrFamily corr() const { return parse_corr(str("corr")); }

  WorkingCovSpec spec() const {
    WorkingCovSpec s;
    s.family = family();
    s.corr = corr();
    return s;
  }

  FitConfig fit_config() const {
    FitConfig c;
    c.tol_theta = num("tol_theta");
    c.tol_gamma = num("tol_gamma");
    c.max_outer = static_cast<int>(integer("max_outer"));
    c.max_inner = static_cast<int>(integer("max_inner"));
    c.update_rho = flag("update_rho");
    c.freeze_rho = flag("freeze_rho");
    c.validate();
    return c;
  }

  std::filesystem::path out_dir() const {
    std::filesystem::path p(str("out"));
    std::filesystem::create_directories(p);
    return p;
  }

  void write_resolved(const std::filesystem::path& dir) const {
    io::write_text((dir / "resolved_config.json").string(), j_.dump(2) + "\n");
  }

 private:
  json j_;
};

inline LongitudinalDataset load_data(const RunConfig& cfg) {
  if (cfg.str("data").empty()) throw ConfigError("no input data (--data)");
  io::IngestOptions opt;
  opt.standardize = cfg.flag("standardize");
  LongitudinalDataset data = io::ingest_csv(cfg.str("data"), opt);
  data.validate_for(cfg.family());
  return data;
}

/// Curve centered to mean zero and oriented so that it increases through
/// the middle of the grid.
inline std::vector<double> normalize_curve(const VectorXd& y) {
  std::vector<double> out(y.data(), y.data() + y.size());
  if (out.empty()) return out;
  const double mean = std::accumulate(out.begin(), out.end(), 0.0) / static_cast<double>(out.size());
  for (double& v : out) v -= mean;
  const std::size_t mid = out.size() / 2;
  if (out.size() >= 3 && out[std::min(mid + 1, out.size() - 1)] - out[mid - 1] < 0.0)
    for (double& v : out) v = -v;
  return out;
}

inline io::Table theta_table(const FitResult& f) {
  io::Table t{{"component", "estimate"}, {}};
  for (Eigen::Index k = 0; k < f.theta_hat.beta().size(); ++k)
    t.rows.push_back({"beta" + std::to_string(k + 1), io::fmt(f.theta_hat.beta()(k))});
  for (Eigen::Index k = 0; k < f.alpha_hat.alpha.size(); ++k)
    t.rows.push_back({"alpha" + std::to_string(k + 1), io::fmt(f.alpha_hat.alpha(k))});
  return t;
}

inline io::Table eta_table(const FitResult& f, int L) {
  io::Table t{{"grid", "value"}, {}};
  const VectorXd g = unit_grid(L);
  for (int l = 0; l < L; ++l) t.rows.push_back({io::fmt(g(l)), io::fmt(f.sieve_hat.eval(f.sieve_hat.unscale(g(l))))});
  return t;
}

inline bool check_converged(const RunConfig& cfg, const std::vector<std::pair<std::string, bool>>& fits,
                            std::string& msg) {
  bool all = true;
  for (const auto& [name, ok] : fits)
    if (!ok) {
      all = false;
      msg += (msg.empty() ? "" : ", ") + name;
    }
  return all || cfg.flag("allow_nonconverged");
}

inline json error_json(const std::string& kind, const std::string& message) {
  return json{{"error", {{"kind", kind}, {"message", message}}}};
}

/// Reports non-convergence on stderr and picks the exit code.
inline int finish(const RunConfig& cfg, const std::vector<std::pair<std::string, bool>>& fits, std::ostream& err) {
  std::string msg;
  if (check_converged(cfg, fits, msg)) return kExitOk;
  err << error_json("NonConvergence", "fit did not converge: " + msg).dump() << "\n";
  return kExitNonConverged;
}

inline int cmd_fit(const RunConfig& cfg, std::ostream& err) {
  const LongitudinalDataset data = load_data(cfg);
  const auto dir = cfg.out_dir();
  const WorkingCovSpec spec = cfg.spec();
  const KSelection sel = select_K(data, initial_theta(data, spec.family), spec, cfg.fit_config(), cfg.ints("K"));
  const FitResult& f = sel.fit;
  io::write_table((dir / "theta_hat.csv").string(), theta_table(f));
  io::write_table((dir / "eta_hat.csv").string(), eta_table(f, static_cast<int>(cfg.integer("L"))));
  json bic = json::array();
  for (std::size_t c = 0; c < sel.candidates.size(); ++c)
    bic.push_back({{"K", sel.candidates[c]}, {"bic", std::isfinite(sel.bic[c]) ? json(sel.bic[c]) : json(nullptr)}});
  const json meta{{"converged", f.converged},
                  {"K", sel.K},
                  {"rho_hat", f.rho_hat},
                  {"dispersion_hat", f.dispersion_hat},
                  {"iterations", f.n_outer},
                  {"score_inf_norm", f.score_inf_norm()},
                  {"index_lo", f.sieve_hat.lo()},
                  {"index_hi", f.sieve_hat.hi()},
                  {"degenerate_index", f.degenerate_index},
                  {"family", std::string(spec.family.name())},
                  {"working_corr", std::string(corr_name(spec.corr))},
                  {"n_subjects", data.n()},
                  {"n_obs", data.total_obs()},
                  {"bic", bic}};
  io::write_text((dir / "fit_meta.json").string(), meta.dump(2) + "\n");
  cfg.write_resolved(dir);
  return finish(cfg, {{"profile fit", f.converged}}, err);
}

inline std::vector<Method> requested_methods(const RunConfig& cfg) {
  const std::string m = cfg.str("method");
  if (m == "all") return all_methods();
  std::vector<Method> out;
  std::stringstream ss(m);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_method(io::trim(item)));
  return out;
}

inline std::vector<std::string> requested_components(const RunConfig& cfg, const LongitudinalDataset& data) {
  auto comps = cfg.strings("components");
  if (!comps.empty()) return comps;
  for (Eigen::Index k = 1; k <= data.p(); ++k) comps.push_back("beta" + std::to_string(k));
  for (Eigen::Index k = 2; k <= data.q(); ++k) comps.push_back("alpha" + std::to_string(k));
  return comps;
}

/// The fits behind every method on one dataset.
struct MethodFitSet {
  std::optional<KSelection> main;   // working correlation, spline
  std::optional<KSelection> indep;  // independence, spline (naive EL)
  std::optional<FitResult> poly;
  std::optional<WaldResult> wald;
  std::optional<WaldResult> poly_wald;
};

inline MethodFitSet fit_methods(const LongitudinalDataset& data, const WorkingCovSpec& spec, const FitConfig& fc,
                                const std::vector<int>& Ks, const std::vector<Method>& methods, int poly_degree,
                                double level, bool need_wald) {
  auto wants = [&](Method m) { return std::find(methods.begin(), methods.end(), m) != methods.end(); };
  MethodFitSet s;
  const Theta init = initial_theta(data, spec.family);
  if (wants(Method::profile_bel) || wants(Method::gee_wald)) {
    s.main = select_K(data, init, spec, fc, Ks);
    if (need_wald && s.main->fit.converged) {
      const ProfileProblem prob(data, Sieve::cubic_bspline(s.main->K), spec, fc);
      s.wald = wald_from_fit(prob, s.main->fit, level);
    }
  }
  if (wants(Method::naive_el)) {
    WorkingCovSpec ind = spec;
    ind.corr = CorrFamily::independence;
    ind.rho = 0.0;
    s.indep = select_K(data, init, ind, fc, Ks);
  }
  if (wants(Method::gee_poly)) {
    const ProfileProblem prob = polynomial_problem(data, spec, fc, poly_degree);
    s.poly = fit(prob, init);
    if (need_wald && s.poly->converged) s.poly_wald = wald_from_fit(prob, *s.poly, level);
  }
  return s;
}

inline int cmd_infer(const RunConfig& cfg, std::ostream& err) {
  const LongitudinalDataset data = load_data(cfg);
  const auto dir = cfg.out_dir();
  const WorkingCovSpec spec = cfg.spec();
  const FitConfig fc = cfg.fit_config();
  const double level = cfg.num("level");
  const auto methods = requested_methods(cfg);
  const auto comps = requested_components(cfg, data);
  auto wants = [&](Method m) { return std::find(methods.begin(), methods.end(), m) != methods.end(); };
  for (const auto& c : comps) {
    const Component comp = Component::parse(c);
    if (comp.kind == Component::Kind::alpha && comp.index == 1 && (wants(Method::profile_bel) || wants(Method::naive_el)))
      throw ConfigError("alpha1 has no profile EL interval; request it with gee_wald only");
  }

  MethodFitSet fits = fit_methods(data, spec, fc, cfg.ints("K"), methods, static_cast<int>(cfg.integer("poly_degree")),
                                  level, true);
  std::vector<std::pair<std::string, bool>> conv;
  if (fits.main) conv.push_back({"profile fit", fits.main->fit.converged});
  if (fits.indep) conv.push_back({"independence fit", fits.indep->fit.converged});
  if (fits.poly) conv.push_back({"polynomial fit", fits.poly->converged});

  std::map<std::string, std::map<Method, Interval>> rows;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  if (wants(Method::profile_bel) && fits.main) {
    const ProfileProblem prob(data, Sieve::cubic_bspline(fits.main->K), spec, fc);
    for (const auto& c : comps) {
      const Component comp = Component::parse(c);
      const Eigen::Index k = comp.theta_index(data.p(), data.q());
      const double se0 = fits.wald ? fits.wald->theta_intervals[k].se : detail::unit_scale_se(prob, fits.main->fit, ELUnits::block)(k);
      ProfileCIOptions opt;
      opt.level = level;
      rows[c][Method::profile_bel] = to_interval(profile_ci(prob, fits.main->fit, comp, se0, ELUnits::block, opt));
    }
  }
  if (wants(Method::naive_el) && fits.indep) {
    WorkingCovSpec ind = spec;
    ind.corr = CorrFamily::independence;
    ind.rho = 0.0;
    const ProfileProblem prob(data, Sieve::cubic_bspline(fits.indep->K), ind, fc);
    const VectorXd se = detail::unit_scale_se(prob, fits.indep->fit, ELUnits::observation);
    for (const auto& c : comps) {
      const Component comp = Component::parse(c);
      const Eigen::Index k = comp.theta_index(data.p(), data.q());
      ProfileCIOptions opt;
      opt.level = level;
      rows[c][Method::naive_el] = to_interval(profile_ci(prob, fits.indep->fit, comp, se(k), ELUnits::observation, opt));
    }
  }
  for (const auto& c : comps) {
    if (wants(Method::gee_wald)) rows[c][Method::gee_wald] = fits.wald ? to_interval(fits.wald->find(c)) : Interval{nan, nan};
    if (wants(Method::gee_poly))
      rows[c][Method::gee_poly] = fits.poly_wald ? to_interval(fits.poly_wald->find(c)) : Interval{nan, nan};
  }

  io::Table t{{"component", "method", "lo", "hi", "length"}, {}};
  for (const auto& c : comps)
    for (Method m : all_methods()) {
      if (!wants(m)) continue;
      const Interval& iv = rows[c][m];
      const double lo = iv.lo_bounded ? iv.lo : -std::numeric_limits<double>::infinity();
      const double hi = iv.hi_bounded ? iv.hi : std::numeric_limits<double>::infinity();
      t.rows.push_back({c, method_name(m), io::fmt(lo), io::fmt(hi), io::fmt(hi - lo)});
    }
  io::write_table((dir / "ci.csv").string(), t);

  std::vector<io::SvgCurve> curves;
  const int L = static_cast<int>(cfg.integer("L"));
  const VectorXd grid = unit_grid(L);
  auto add_curve = [&](const std::string& label, const Sieve& s) {
    VectorXd y(L);
    for (int l = 0; l < L; ++l) y(l) = s.eval(s.unscale(grid(l)));
    curves.push_back({label, std::vector<double>(grid.data(), grid.data() + L), normalize_curve(y)});
  };
  if (fits.main) add_curve("profile_bel / gee_wald", fits.main->fit.sieve_hat);
  if (fits.indep) add_curve("naive_el", fits.indep->fit.sieve_hat);
  if (fits.poly) add_curve("gee_poly", fits.poly->sieve_hat);
  if (!curves.empty()) io::write_text((dir / "curves.svg").string(), io::curves_svg(curves, "fitted links"));
  cfg.write_resolved(dir);
  return finish(cfg, conv, err);
}

inline int cmd_band(const RunConfig& cfg, std::ostream& err) {
  const LongitudinalDataset data = load_data(cfg);
  const auto dir = cfg.out_dir();
  const WorkingCovSpec spec = cfg.spec();
  const FitConfig fc = cfg.fit_config();
  const KSelection sel = select_K(data, initial_theta(data, spec.family), spec, fc, cfg.ints("K"));
  if (!sel.fit.converged && !cfg.flag("allow_nonconverged")) return finish(cfg, {{"profile fit", false}}, err);
  const ProfileProblem prob(data, Sieve::cubic_bspline(sel.K), spec, fc);
  BandOptions opt;
  opt.B_star = static_cast<int>(cfg.integer("B_star"));
  opt.level = cfg.num("level");
  opt.L = static_cast<int>(cfg.integer("L"));
  opt.seed = static_cast<std::uint64_t>(cfg.integer("seed"));
  const BandResult band = cluster_bootstrap_band(prob, sel.fit, opt);
  io::Table t{{"grid", "u", "eta_hat", "lo", "hi", "sim_lo", "sim_hi"}, {}};
  for (int l = 0; l < opt.L; ++l)
    t.rows.push_back({io::fmt(band.grid(l)), io::fmt(band.u_raw(l)), io::fmt(band.eta_hat(l)), io::fmt(band.lo(l)),
                      io::fmt(band.hi(l)), io::fmt(band.eta_hat(l) - band.sup_radius),
                      io::fmt(band.eta_hat(l) + band.sup_radius)});
  io::write_table((dir / "band.csv").string(), t);
  io::SvgBand svg;
  auto vec = [](const VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  svg.x = vec(band.grid);
  svg.center = vec(band.eta_hat);
  svg.lo = vec(band.lo);
  svg.hi = vec(band.hi);
  svg.sup_radius = band.sup_radius;
  svg.title = "bootstrap bands (" + std::to_string(band.B_star - band.failures) + " replicates)";
  io::write_text((dir / "band.svg").string(), io::band_svg(svg));
  cfg.write_resolved(dir);
  return finish(cfg, {{"profile fit", sel.fit.converged}}, err);
}

inline int cmd_simulate(const RunConfig& cfg, std::ostream&) {
  const auto dir = cfg.out_dir();
  SimDesign d;
  d.family = cfg.family();
  d.n = static_cast<int>(cfg.integer("n"));
  d.rho_latent = cfg.num("rho");
  d.kappa = cfg.num("kappa");
  d.heavy_tails = cfg.flag("heavy_tails");
  d.allow_override = cfg.flag("allow_override");
  d.seed = static_cast<std::uint64_t>(cfg.integer("seed"));
  StudyOptions opt;
  opt.working_corr = cfg.corr();
  opt.methods = requested_methods(cfg);
  opt.with_ci = cfg.flag("with_ci");
  opt.level = cfg.num("level");
  opt.K_candidates = cfg.ints("K");
  opt.poly_degree = static_cast<int>(cfg.integer("poly_degree"));
  opt.config = cfg.fit_config();
  opt.B = static_cast<int>(cfg.integer("B"));
  if (opt.B < 1) throw ConfigError("B must be >= 1");
  if (!cfg.strings("components").empty()) opt.ci_targets = cfg.strings("components");
  const CellResult cell = run_cell(d, opt);
  io::Table t{{"family", "n", "rho", "working_corr", "method", "metric", "value"}, {}};
  for (const auto& r : cell.rows)
    t.rows.push_back({r.family, std::to_string(r.n), io::fmt(r.rho), r.working_corr, r.method, r.metric, io::fmt(r.value)});
  io::write_table((dir / "metrics.csv").string(), t);
  cfg.write_resolved(dir);
  return kExitOk;
}

/// Subject indices per fold from a seeded shuffle.
inline std::vector<std::vector<std::size_t>> cv_folds(std::size_t n, int K, std::uint64_t seed) {
  if (K < 2) throw ConfigError("cv_folds must be >= 2");
  if (static_cast<std::size_t>(K) > n) throw ConfigError("cv: " + std::to_string(K) + " folds but only " +
                                                         std::to_string(n) + " subjects; a fold would be empty");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(derive_seed(seed, 0, 0xCF));
  for (std::size_t i = n - 1; i > 0; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % (i + 1));
    std::swap(perm[i], perm[j]);
  }
  std::vector<std::vector<std::size_t>> folds(K);
  for (std::size_t i = 0; i < n; ++i) folds[i % K].push_back(perm[i]);
  for (auto& f : folds) std::sort(f.begin(), f.end());
  return folds;
}

/// Total unit deviance and count of held-out observations under a fit.
inline std::pair<double, double> heldout_deviance(const LongitudinalDataset& data, const std::vector<std::size_t>& idx,
                                                  const FitResult& f, const OutcomeFamily& fam) {
  double dev = 0.0, N = 0.0;
  for (std::size_t i : idx) {
    const SubjectBlock& s = data[i];
    const VectorXd xi = linear_predictor(s, f.theta_hat, f.sieve_hat);
    for (Eigen::Index j = 0; j < xi.size(); ++j) {
      dev += unit_deviance(fam, s.y(j), fam.clamp_mean(fam.inverse_link(xi(j))));
      N += 1.0;
    }
  }
  return {dev, N};
}

inline int cmd_cv(const RunConfig& cfg, std::ostream& err) {
  const LongitudinalDataset data = load_data(cfg);
  const auto dir = cfg.out_dir();
  const FitConfig fc = cfg.fit_config();
  const int K_f = static_cast<int>(cfg.integer("cv_folds"));
  const auto folds = cv_folds(data.n(), K_f, static_cast<std::uint64_t>(cfg.integer("seed")));
  const auto methods = requested_methods(cfg);
  const OutcomeFamily fam = cfg.family();
  std::vector<std::pair<std::string, bool>> conv;

  struct Acc {
    double dev = 0.0, N = 0.0;
  };
  // Fits that do not depend on the working correlation are computed once.
  std::map<std::string, Acc> indep_cache;
  io::Table t{{"method", "working_corr", "mean_deviance"}, {}};
  for (const auto& corr_s : cfg.strings("corrs")) {
    WorkingCovSpec spec;
    spec.family = fam;
    spec.corr = parse_corr(corr_s);
    std::map<Method, Acc> acc;
    for (int f = 0; f < K_f; ++f) {
      std::vector<std::size_t> train;
      for (int g = 0; g < K_f; ++g)
        if (g != f) train.insert(train.end(), folds[g].begin(), folds[g].end());
      std::sort(train.begin(), train.end());
      const LongitudinalDataset tr = data.subset(train);
      std::vector<Method> need;
      for (Method m : methods)
        if (m != Method::naive_el || !indep_cache.count("done")) need.push_back(m);
      const MethodFitSet fits = fit_methods(tr, spec, fc, cfg.ints("K"), need,
                                            static_cast<int>(cfg.integer("poly_degree")), cfg.num("level"), false);
      const std::string tag = " (" + corr_s + ", fold " + std::to_string(f + 1) + ")";
      if (fits.main) {
        conv.push_back({"profile fit" + tag, fits.main->fit.converged});
        const auto [d, n] = heldout_deviance(data, folds[f], fits.main->fit, fam);
        for (Method m : {Method::profile_bel, Method::gee_wald}) {
          acc[m].dev += d;
          acc[m].N += n;
        }
      }
      if (fits.indep) {
        conv.push_back({"independence fit" + tag, fits.indep->fit.converged});
        const auto [d, n] = heldout_deviance(data, folds[f], fits.indep->fit, fam);
        indep_cache["naive"].dev += d;
        indep_cache["naive"].N += n;
      }
      if (fits.poly) {
        conv.push_back({"polynomial fit" + tag, fits.poly->converged});
        const auto [d, n] = heldout_deviance(data, folds[f], *fits.poly, fam);
        acc[Method::gee_poly].dev += d;
        acc[Method::gee_poly].N += n;
      }
    }
    if (std::find(methods.begin(), methods.end(), Method::naive_el) != methods.end()) {
      indep_cache["done"];
      acc[Method::naive_el] = indep_cache["naive"];
    }
    for (Method m : all_methods()) {
      if (std::find(methods.begin(), methods.end(), m) == methods.end()) continue;
      t.rows.push_back({method_name(m), std::string(corr_name(spec.corr)), io::fmt(acc[m].dev / acc[m].N)});
    }
  }
  io::write_table((dir / "cv.csv").string(), t);
  cfg.write_resolved(dir);
  return finish(cfg, conv, err);
}

inline int cmd_stability(const RunConfig& cfg, std::ostream&) {
  const auto dir = cfg.out_dir();
  std::vector<std::string> missing;
  std::map<std::string, io::Table> tables;
  for (const auto& [key, tag] : std::vector<std::pair<const char*, std::string>>{
           {"ci_ind", "independence"}, {"ci_ar1", "ar1"}, {"ci_exc", "exchangeable"}}) {
    const std::string path = cfg.str(key);
    if (path.empty() || !std::filesystem::exists(path)) {
      missing.push_back(tag);
      continue;
    }
    tables[tag] = io::read_table(path);
  }
  if (!missing.empty()) {
    std::string msg = "stability needs ci.csv for every working correlation; missing:";
    for (const auto& m : missing) msg += " " + m;
    throw ConfigError(msg);
  }
  auto lengths = [](const io::Table& t) {
    std::map<std::pair<std::string, std::string>, double> out;
    const auto c = t.column("component"), m = t.column("method"), l = t.column("length");
    for (std::size_t r = 0; r < t.rows.size(); ++r)
      out[{t.rows[r][c], t.rows[r][m]}] = io::parse_double(t.rows[r][l], r + 2, "ci.csv");
    return out;
  };
  const auto ind = lengths(tables["independence"]);
  const auto ar1 = lengths(tables["ar1"]);
  const auto exc = lengths(tables["exchangeable"]);
  io::Table out{{"component", "method", "avg_length", "range"}, {}};
  const io::Table& first = tables["independence"];
  const auto cc = first.column("component"), mc = first.column("method");
  for (const auto& row : first.rows) {
    const std::pair<std::string, std::string> key{row[cc], row[mc]};
    if (!ar1.count(key) || !exc.count(key))
      throw ConfigError("stability: " + key.first + "/" + key.second + " missing from some ci.csv");
    const double a = ind.at(key), b = ar1.at(key), c = exc.at(key);
    const double avg = (a + b + c) / 3.0;
    const double range = std::max({a, b, c}) - std::min({a, b, c});
    out.rows.push_back({key.first, key.second, io::fmt(avg), io::fmt(range)});
  }
  io::write_table((dir / "stability.csv").string(), out);
  cfg.write_resolved(dir);
  return kExitOk;
}

}  // namespace gplsim::cli
