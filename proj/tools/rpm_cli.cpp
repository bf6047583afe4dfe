// Command-line entry point for the studies and diagnostics.

#include "rpm/datagen.hpp"
#include "rpm/localization.hpp"
#include "rpm/robustness.hpp"
#include "rpm/study.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitPartial = 3;

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw rpm::ConfigError("'" + item + "' is not a number");
    }
  }
  return out;
}

struct Globals {
  std::uint64_t seed = 0;
  bool seed_set = false;
  int threads = 1;
  std::string out = "out";
  std::string config;
};

int run_study_cmd(const Globals& g, const std::string& study, const std::string& grid, long n_obs, int n_reps,
                  const std::string& prior, const std::string& method, const std::string& data, bool synthetic,
                  CLI::App& sub) {
  nlohmann::json j = nlohmann::json::object();
  if (!g.config.empty()) {
    std::ifstream in(g.config);
    if (!in) throw rpm::ConfigError("cannot open config " + g.config);
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw rpm::ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
  }
  if (!study.empty()) j["study"] = study;
  if (!grid.empty()) {
    nlohmann::json levels = nlohmann::json::array();
    std::stringstream ss(grid);
    std::string item;
    while (std::getline(ss, item, ',')) levels.push_back(item);
    j["grid"] = levels;
  }
  if (sub.count("--n-obs")) j["n_obs"] = n_obs;
  if (sub.count("--n-reps")) j["n_reps"] = n_reps;
  if (!prior.empty()) j["weight_prior"] = prior;
  if (!method.empty()) j["inference"]["method"] = method;
  if (!data.empty()) j["data_path"] = data;
  if (synthetic) j["synthetic_data"] = true;
  if (g.seed_set) j["seed"] = g.seed;
  if (g.threads > 1 || !j.contains("threads")) j["threads"] = g.threads;
  if (!j.contains("out_dir")) j["out_dir"] = g.out;

  rpm::StudyConfig cfg = rpm::StudyConfig::from_json(j);
  cfg.validate();
  rpm::StudyResult result = rpm::run_study(cfg);
  std::filesystem::path dir = rpm::write_study(result);
  for (rpm::TableKind t : rpm::study_tables(cfg.study)) {
    try {
      rpm::Table tab = rpm::build_table(result, t);
      std::cout << rpm::emit_table(result, t, dir).string();
      if (tab.skipped) std::cout << " (skipped " << tab.skipped << " error rows)";
      std::cout << '\n';
    } catch (const rpm::MissingRows& e) {
      std::cerr << "table " << rpm::to_string(t) << ": " << e.what() << '\n';
    }
  }
  std::cout << "study dir: " << dir.string() << "\nhash: " << result.hash << '\n';
  if (result.n_errors() > 0) {
    std::cerr << result.n_errors() << " of " << result.rows.size() << " rows failed\n";
    return kExitPartial;
  }
  return kExitOk;
}

int emit_table_cmd(const std::string& dir, const std::string& table) {
  rpm::StudyResult result = rpm::load_study(dir);
  rpm::Table t = rpm::build_table(result, rpm::parse_table_kind(table));
  std::cout << rpm::emit_table(result, rpm::parse_table_kind(table), dir).string() << '\n';
  return t.skipped ? kExitPartial : kExitOk;
}

int influence_cmd(const Globals& g, const std::string& prior, long n, double rate, const std::string& grid, double t,
                  const std::string& csv_path) {
  rpm::Rng rng = rpm::make_rng(g.seed, 0);
  rpm::Dataset base = rpm::gen_poisson_outliers(n, 0.0, rng, rate).dense();
  std::vector<double> z = parse_list(grid);
  rpm::Vector zg = Eigen::Map<rpm::Vector>(z.data(), static_cast<Eigen::Index>(z.size()));
  std::optional<rpm::WeightPriorSpec> w;
  if (prior != "none") w = rpm::WeightPriorSpec::parse(prior);
  rpm::InfluenceCheck c = rpm::influence_decay_check(rpm::PoissonRateSpec{}, w, base, zg, t);
  std::ostringstream out;
  out.precision(10);
  out << "z,loglik,if_value\n";
  for (Eigen::Index i = 0; i < zg.size(); ++i)
    out << c.curve.z_grid[i] << ',' << c.curve.loglik_at_z[i] << ',' << c.curve.if_values[i] << '\n';
  if (csv_path.empty()) {
    std::cout << out.str();
  } else {
    std::ofstream(csv_path) << out.str();
  }
  std::cout << "decay check: " << (c.pass ? "pass" : "fail") << '\n';
  return kExitOk;
}

int glm_cmd(const Globals& g, long n, int configs) {
  rpm::Rng rng = rpm::make_rng(g.seed, 0);
  double worst = 0.0;
  for (int k = 0; k < configs; ++k) {
    rpm::Vector y(n);
    rpm::Matrix x(n, 1);
    double slope = rng.normal(0, 3), icpt = rng.normal(0, 3);
    for (long i = 0; i < n; ++i) {
      x(i, 0) = rng.normal(0, 2);
      y[i] = icpt + slope * x(i, 0) + rng.normal();
    }
    double lambda_sq = std::exp(rng.normal(-1, 1)), sigma_sq = std::exp(rng.normal(0, 1));
    rpm::GlmEquivalence e = rpm::verify_glm_equivalence(rpm::Dataset(y, x), lambda_sq, sigma_sq);
    worst = std::max(worst, e.max_abs_diff);
  }
  std::cout << "configurations: " << configs << "\nmax_abs_diff: " << worst << '\n';
  return kExitOk;
}

int ingest_cmd(const Globals& g, const std::string& path, long users, long items) {
  rpm::RatingsMatrix m = rpm::load_movielens(path);
  if (users > 0 && items > 0) m = rpm::densest_subset(m, users, items);
  std::filesystem::path dir = std::filesystem::path(g.out) / "movielens";
  std::filesystem::create_directories(dir);
  std::ofstream csv(dir / "ratings.csv");
  rpm::write_pf_csv(m.data, csv);
  nlohmann::json ids = {{"user_ids", m.user_ids}, {"item_ids", m.item_ids}, {"duplicate_pairs", m.duplicate_pairs}};
  std::ofstream(dir / "id_map.json") << ids.dump() << '\n';
  std::cout << "users: " << m.data.n_users() << "\nitems: " << m.data.n_items()
            << "\nentries: " << m.data.entries().size() << "\nduplicates: " << m.duplicate_pairs << '\n';
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Reweighted probabilistic models: studies and diagnostics"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Root seed")->each([&](const std::string&) { g.seed_set = true; });
  app.add_option("--threads", g.threads, "Worker threads")->check(CLI::PositiveNumber);
  app.add_option("--out", g.out, "Output root directory");
  app.add_option("--config", g.config, "JSON config file");

  auto* run = app.add_subcommand("run-study", "Run a study grid and write rows and tables");
  std::string study, grid, prior, method, data;
  long n_obs = 100;
  int n_reps = 50;
  bool synthetic = false;
  run->add_option("--study", study, "poisson-outliers | missing-group | linreg-misspec | gmm-skew | movielens-pf");
  run->add_option("--grid", grid, "Comma-separated mismatch levels");
  run->add_option("--n-obs", n_obs);
  run->add_option("--n-reps", n_reps);
  run->add_option("--weight-prior", prior, "beta:A,B | dirichlet:A | gamma:A,B");
  run->add_option("--method", method, "map | coord | mcmc");
  run->add_option("--data", data, "MovieLens ratings.dat");
  run->add_flag("--synthetic", synthetic, "Generate ratings instead of reading --data");

  auto* emit = app.add_subcommand("emit-table", "Rebuild one table from a study directory");
  std::string dir, table;
  emit->add_option("--dir", dir)->required();
  emit->add_option("--table", table, "fig3b | table1 | table2 | table3 | fig5 | weights")->required();

  auto* infl = app.add_subcommand("influence-check", "Influence curve on a Poisson sample");
  std::string iprior = "gamma:2,1", igrid = "15,30,60,120", icsv;
  long in = 100;
  double irate = 5.0, it = 1e-3;
  infl->add_option("--weight-prior", iprior, "weight prior, or none for the plain model");
  infl->add_option("--n", in);
  infl->add_option("--rate", irate);
  infl->add_option("--z-grid", igrid);
  infl->add_option("--t", it);
  infl->add_option("--csv", icsv);

  auto* glm = app.add_subcommand("glm-equivalence", "Localized vs reweighted regression fits");
  long gn = 50;
  int gconfigs = 50;
  glm->add_option("--n", gn);
  glm->add_option("--configs", gconfigs);

  auto* ingest = app.add_subcommand("ingest-movielens", "Parse ratings.dat into a binary matrix");
  std::string mpath;
  long musers = 0, mitems = 0;
  ingest->add_option("--path", mpath)->required();
  ingest->add_option("--subset-users", musers);
  ingest->add_option("--subset-items", mitems);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*run) return run_study_cmd(g, study, grid, n_obs, n_reps, prior, method, data, synthetic, *run);
    if (*emit) return emit_table_cmd(dir, table);
    if (*infl) return influence_cmd(g, iprior, in, irate, igrid, it, icsv);
    if (*glm) return glm_cmd(g, gn, gconfigs);
    if (*ingest) return ingest_cmd(g, mpath, musers, mitems);
  } catch (const rpm::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const rpm::ParseError& e) {
    std::cerr << "parse error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return kExitOk;
}
