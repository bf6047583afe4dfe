#include "rpm/study.hpp"

#include "rpm/datagen.hpp"
#include "rpm/inference.hpp"
#include "rpm/localization.hpp"
#include "rpm/models.hpp"
#include "rpm/prediction.hpp"
#include "rpm/robustness.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

namespace rpm {

using nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string fmt(double v, int digits = 17) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

double to_double(std::string_view s, std::size_t line = 0) {
  if (s == "nan") return kNaN;
  double v = 0.0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) throw ParseError(line, "bad number '" + std::string(s) + "'");
  return v;
}

double level_value(const std::string& level) {
  try {
    return to_double(level);
  } catch (const ParseError&) {
    throw ConfigError("grid level '" + level + "' is not a number");
  }
}

double median(std::vector<double> v) {
  if (v.empty()) return kNaN;
  return quantile(std::move(v), 0.5);
}

// ---------------------------------------------------------------------------
// Fitting

SamplerConfig sampler_for(const InferenceSettings& s, Rng& rng, std::uint64_t stream) {
  SamplerConfig c;
  c.n_warmup = s.n_warmup;
  c.n_draws = s.n_draws;
  c.seed = rng.next_u64() ^ s.seed;
  c.stream = stream;
  return c;
}

MapConfig map_config() {
  MapConfig m;
  m.throw_on_failure = false;
  m.max_iter = 3000;
  return m;
}

Posterior fit_original(const std::shared_ptr<const Model>& model, const InferenceSettings& s, Rng& rng) {
  const ParameterLayout& layout = model->layout();
  if (s.method == "mcmc") {
    ModelObjective obj(model, JacobianMode::kInclude);
    Vector init = layout.to_unconstrained(model->initial_params());
    return Posterior::from_chain(sample_posterior(obj.as_log_density(), init, sampler_for(s, rng, 1)), layout);
  }
  if (model->has_mm_step()) {
    const Vector ones = Vector::Ones(model->n_terms());
    MapResult best;
    best.value = -std::numeric_limits<double>::infinity();
    for (int r = 0; r < std::max(1, s.restarts); ++r) {
      Vector x = r == 0 ? model->flatten(model->initial_params()) : model->random_start(rng);
      double prev = -std::numeric_limits<double>::infinity(), v = prev;
      for (int k = 0; k < s.max_sweeps; ++k) {
        model->mm_step(x, ones);
        v = model->weighted_loglik(x, ones, nullptr, nullptr) + model->log_prior(x, nullptr);
        if (v - prev < 1e-9 * std::abs(v)) break;
        prev = v;
      }
      if (v > best.value) {
        best.value = v;
        best.point = layout.to_unconstrained(model->unflatten(x));
      }
    }
    return Posterior::from_map(std::move(best), layout);
  }
  ModelObjective obj(model, JacobianMode::kExclude);
  LogDensityFn f = obj.as_log_density();
  MapResult best;
  best.value = -std::numeric_limits<double>::infinity();
  for (int r = 0; r < std::max(1, s.restarts); ++r) {
    Vector x0 = r == 0 ? model->flatten(model->initial_params()) : model->random_start(rng);
    MapResult m = map_estimate(f, layout.to_unconstrained(model->unflatten(x0)), map_config());
    if (m.value > best.value) best = std::move(m);
  }
  return Posterior::from_map(std::move(best), layout);
}

Posterior fit_rpm(const std::shared_ptr<const Model>& model, const WeightPriorSpec& prior, const InferenceSettings& s,
                  Rng& rng) {
  const ParameterLayout& layout = model->layout();
  if (s.method == "mcmc") {
    auto joint = std::make_shared<RpmObjective>(model, prior, JacobianMode::kInclude);
    Posterior post = Posterior::from_chain(
        sample_posterior(joint->as_log_density(), joint->initial_point(), sampler_for(s, rng, 2)), layout);
    post.set_weight_map([joint](const Vector& z) { return joint->weights_of(z); });
    return post;
  }
  if (s.method == "coord") {
    CoordinateConfig cc;
    cc.max_sweeps = s.max_sweeps;
    cc.inner = map_config();
    CoordinateResult r = coordinate_map(model, prior, cc);
    auto joint = std::make_shared<RpmObjective>(model, prior, JacobianMode::kExclude);
    Posterior post = Posterior::from_map(std::move(r.result), layout);
    post.set_weight_map([joint](const Vector& z) { return joint->weights_of(z); });
    return post;
  }
  // joint MAP in the unconstrained coordinates; the weight transform's
  // Jacobian keeps Beta weights with b < 1 off the boundary
  if (model->has_mm_step() && prior.is_beta()) {
    // same objective by coordinate ascent: Beta(a, b) times the logit
    // Jacobian w (1 - w) is the Beta(a + 1, b + 1) kernel
    const auto& bb = std::get<BetaBank>(prior.variant());
    const WeightPriorSpec shifted(BetaBank{bb.a + 1.0, bb.b + 1.0});
    auto joint = std::make_shared<RpmObjective>(model, prior, JacobianMode::kInclude);
    MapResult best;
    best.value = -std::numeric_limits<double>::infinity();
    for (int r = 0; r < std::max(1, s.restarts); ++r) {
      CoordinateConfig cc;
      cc.max_sweeps = s.max_sweeps;
      cc.inner = map_config();
      if (r > 0) cc.init_params = model->random_start(rng);
      CoordinateResult c = coordinate_map(model, shifted, cc);
      // both priors use logit weight coordinates, so the point carries over
      MapResult m = std::move(c.result);
      m.value = joint->eval(m.point, nullptr);
      if (m.value > best.value) best = std::move(m);
    }
    Posterior post = Posterior::from_map(std::move(best), layout);
    post.set_weight_map([joint](const Vector& z) { return joint->weights_of(z); });
    return post;
  }
  auto joint = std::make_shared<RpmObjective>(model, prior, JacobianMode::kInclude);
  LogDensityFn f = joint->as_log_density();
  MapResult best;
  best.value = -std::numeric_limits<double>::infinity();
  for (int r = 0; r < std::max(1, s.restarts); ++r) {
    Vector x0 = r == 0 ? model->flatten(model->initial_params()) : model->random_start(rng);
    Vector z0 = joint->pack(model->unflatten(x0), Vector::Constant(model->n_terms(), prior.initial_weight()));
    MapResult m = map_estimate(f, z0, map_config());
    if (m.value > best.value) best = std::move(m);
  }
  Posterior post = Posterior::from_map(std::move(best), layout);
  post.set_weight_map([joint](const Vector& z) { return joint->weights_of(z); });
  return post;
}

// ---------------------------------------------------------------------------
// Per-cell work

struct CellOutput {
  std::vector<StudyRow> rows;
  std::vector<WeightRecord> weights;
};

struct Cell {
  const StudyConfig& cfg;
  std::string level;
  int rep;
  Rng rng;
  CellOutput out;

  StudyRow row(const std::string& model) const {
    StudyRow r;
    r.level = level;
    r.rep = rep;
    r.model = model;
    return r;
  }

  // runs one model variant, turning its failure into an error row
  template <typename F>
  void attempt(const std::string& model, F&& body) {
    StudyRow r = row(model);
    try {
      body(r);
    } catch (const std::exception& e) {
      r = row(model);
      r.ok = false;
      r.error = e.what();
    }
    out.rows.push_back(std::move(r));
  }

  void fill_weights(StudyRow& r, const Vector& w, const std::vector<char>& mask) {
    std::vector<double> bad, good;
    for (Index n = 0; n < w.size(); ++n) {
      bool c = mask[static_cast<std::size_t>(n)] != 0;
      (c ? bad : good).push_back(w[n]);
      out.weights.push_back({level, rep, r.model, n, w[n], c});
    }
    r.weight_median_corrupt = median(bad);
    r.weight_median_clean = median(good);
    r.weight_max_corrupt = bad.empty() ? kNaN : *std::max_element(bad.begin(), bad.end());
    if (!good.empty())
      r.frac_clean_above = static_cast<double>(std::count_if(good.begin(), good.end(), [](double v) { return v > 0.2; })) /
                           static_cast<double>(good.size());
    WeightDiagnostic d = weight_bimodality(w);
    r.mode_count = d.kde_mode_count;
    r.bimodal = d.bimodal_flag ? 1 : 0;
    r.frac_below = d.frac_below;
    if (!bad.empty()) {
      auto low = rank_downweighted(w, static_cast<Index>(bad.size()));
      double hits = 0;
      for (const auto& [idx, _] : low) hits += mask[static_cast<std::size_t>(idx)] ? 1 : 0;
      r.precision_at_k = hits / static_cast<double>(bad.size());
    }
  }

  static void fill_scalar(StudyRow& r, const Posterior& post, const std::string& block, Index j, double truth) {
    BlockSummary s = posterior_summary(post, block);
    r.estimate = s.mean[j];
    r.ci_low = s.ci95_low[j];
    r.ci_high = s.ci95_high[j];
    r.truth = truth;
    r.abs_error = std::abs(r.estimate - truth);
  }

  static void fill_predictive(StudyRow& r, const PredictiveEstimate& clean, const PredictiveEstimate& bad) {
    r.lp_clean_mean = clean.mean_log_predictive;
    r.lp_clean_total = clean.total_log_predictive();
    r.lp_corrupt_mean = bad.mean_log_predictive;
    r.lp_corrupt_total = bad.total_log_predictive();
  }

  // the three dense studies share one shape: original, localized, reweighted
  void dense_study(const ModelSpec& spec, const LabeledDataset& train, const Dataset& test_clean,
                   const Dataset& test_bad, const std::string& block, Index coef, double truth) {
    const InferenceSettings& s = cfg.inference;
    auto model = std::shared_ptr<const Model>(make_model(spec, train.dense()));
    attempt("original", [&](StudyRow& r) {
      Posterior post = fit_original(model, s, rng);
      fill_scalar(r, post, block, coef, truth);
      fill_predictive(r, predictive_original(post, spec, test_clean, s.pred_draws),
                      predictive_original(post, spec, test_bad, s.pred_draws));
    });
    if (cfg.with_localized) {
      attempt("localized", [&](StudyRow& r) {
        LocalizedSpec ls;
        ls.base = spec;
        LocalizedModel lm(ls, train.dense());
        Posterior post = fit_localized(lm, sampler_for(s, rng, 3));
        fill_scalar(r, post, block, coef, truth);
        Rng pr = rng.substream(3);
        PredictiveEstimate a = predictive_localized(post, lm, test_clean, pr, 10, s.pred_draws);
        PredictiveEstimate b = predictive_localized(post, lm, test_bad, pr, 10, s.pred_draws);
        fill_predictive(r, a, b);
      });
    }
    attempt("rpm", [&](StudyRow& r) {
      const WeightPriorSpec prior = cfg.prior();
      Posterior post = fit_rpm(model, prior, s, rng);
      fill_scalar(r, post, block, coef, truth);
      Rng pr = rng.substream(4);
      const Index n = train.dense().n_obs();
      PredictiveEstimate a = predictive_rpm(post, spec, prior, n, test_clean, pr, s.weight_draws, s.pred_draws);
      PredictiveEstimate b = predictive_rpm(post, spec, prior, n, test_bad, pr, s.weight_draws, s.pred_draws);
      fill_predictive(r, a, b);
      fill_weights(r, post.weight_means(), train.corrupted_mask);
    });
  }

  void poisson() {
    const double f = level_value(level);
    LabeledDataset train = gen_poisson_outliers(cfg.n_obs, f, rng);
    LabeledDataset clean = gen_poisson_outliers(cfg.n_test, 0.0, rng);
    LabeledDataset bad = gen_poisson_outliers(cfg.n_test, f, rng);
    dense_study(PoissonRateSpec{}, train, clean.dense(), bad.dense(), "theta", 0, train.truth.at("rate"));
  }

  void missing_group() {
    const double f = level_value(level);
    LabeledDataset train = gen_missing_group(cfg.n_obs, f, rng);
    LabeledDataset clean = gen_missing_group(cfg.n_test, 0.0, rng);
    LabeledDataset bad = gen_missing_group(cfg.n_test, f, rng);
    dense_study(LogisticRegressionSpec{}, train, clean.dense(), bad.dense(), "beta", 0, train.truth.at("slope"));
  }

  void linreg() {
    const MisspecVariant v = parse_misspec_variant(level);
    LabeledDataset train = gen_linreg_misspec(cfg.n_obs, v, rng);
    // clean test data drop the term the fitted model cannot express
    std::map<std::string, double> clean_truth = train.truth;
    clean_truth[v == MisspecVariant::kMissingCovariate ? "beta2" : "beta3"] = 0.0;
    LabeledDataset clean = gen_linreg_misspec_like(cfg.n_test, v, clean_truth, rng);
    LabeledDataset bad = gen_linreg_misspec_like(cfg.n_test, v, train.truth, rng);
    dense_study(LinearRegressionSpec{}, train, clean.dense(), bad.dense(), "beta", 1, train.truth.at("beta1"));
  }

  void gmm() {
    LabeledDataset data = gen_skewnormal_mixture(cfg.n_obs, rng);
    FiniteGmmSpec spec;
    auto model = std::shared_ptr<const Model>(make_model(spec, data.dense()));
    const double cut = 2.0 / static_cast<double>(cfg.n_obs);
    auto clusters = [&](const Posterior& post) {
      Vector pi = post.params_at(0).tail(spec.components);
      return static_cast<double>((pi.array() > cut).count());
    };
    attempt("original", [&](StudyRow& r) {
      Posterior post = fit_original(model, cfg.inference, rng);
      r.estimate = clusters(post);
      r.truth = 3;
      r.abs_error = std::abs(r.estimate - 3);
    });
    attempt("rpm", [&](StudyRow& r) {
      Posterior post = fit_rpm(model, cfg.prior(), cfg.inference, rng);
      r.estimate = clusters(post);
      r.truth = 3;
      r.abs_error = std::abs(r.estimate - 3);
      fill_weights(r, post.weights_at(0), data.corrupted_mask);
    });
  }

  void factorization(const PFDataset& base) {
    const double ratio = level_value(level);
    LabeledDataset corrupted = corrupt_users(base, cfg.pct_users, ratio, rng);
    IndexSplit users = split_indices(base.n_users(), cfg.heldout_users, rng);
    PFDataset train = select_users(corrupted.sparse(), users.train);
    PFDataset held = select_users(corrupted.sparse(), users.test);
    std::vector<char> train_mask;
    for (Index u : users.train) train_mask.push_back(corrupted.corrupted_mask[static_cast<std::size_t>(u)]);

    // each held-out user's items split in two; the first half fits theta
    std::vector<std::vector<char>> fit_half(static_cast<std::size_t>(held.n_users()));
    for (auto& h : fit_half) {
      h.assign(static_cast<std::size_t>(held.n_items()), 0);
      for (std::size_t i = 0; i < h.size(); ++i) h[i] = rng.bernoulli(0.5) ? 1 : 0;
    }

    PoissonFactorizationSpec spec;
    spec.latent_dim = cfg.latent_dim;
    auto model = std::shared_ptr<const Model>(make_model(spec, train));
    const Index k = cfg.latent_dim;
    const Index n_train_users = train.n_users();

    auto heldout = [&](const Vector& x) {
      Matrix beta = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
          x.data() + n_train_users * k, held.n_items(), k);
      double total = 0.0;
      Index scored = 0;
      for (Index u = 0; u < held.n_users(); ++u) {
        const auto& half = fit_half[static_cast<std::size_t>(u)];
        Vector mass = Vector::Zero(k);
        for (Index i = 0; i < held.n_items(); ++i)
          if (half[static_cast<std::size_t>(i)]) mass += beta.row(i).transpose();
        Vector theta = Vector::Constant(k, 0.1);
        for (int it = 0; it < 200; ++it) {
          Vector acc = Vector::Zero(k);
          for (const PFEntry& e : held.row(u)) {
            if (!half[static_cast<std::size_t>(e.item)]) continue;
            double rate = beta.row(e.item).dot(theta);
            acc += e.count * (theta.array() * beta.row(e.item).transpose().array()).matrix() / rate;
          }
          const double a1 = std::max(spec.gamma_shape - 1.0, 0.0);
          theta = ((acc.array() + a1) / (mass.array() + spec.gamma_rate)).max(1e-30).matrix();
        }
        // Poisson log-lik over every item of the scored half
        for (const PFEntry& e : held.row(u)) {
          if (half[static_cast<std::size_t>(e.item)]) continue;
          double rate = beta.row(e.item).dot(theta);
          total += e.count * std::log(rate) - std::lgamma(e.count + 1.0);
        }
        for (Index i = 0; i < held.n_items(); ++i) {
          if (half[static_cast<std::size_t>(i)]) continue;
          total -= beta.row(i).dot(theta);
          ++scored;
        }
      }
      return total / static_cast<double>(std::max<Index>(scored, 1));
    };

    attempt("original", [&](StudyRow& r) {
      Posterior post = fit_original(model, cfg.inference, rng);
      r.estimate = heldout(post.params_at(0));
      r.lp_corrupt_mean = r.estimate;
    });
    attempt("rpm", [&](StudyRow& r) {
      Posterior post = fit_rpm(model, cfg.prior(), cfg.inference, rng);
      r.estimate = heldout(post.params_at(0));
      r.lp_corrupt_mean = r.estimate;
      fill_weights(r, post.weights_at(0), train_mask);
    });
  }
};

PFDataset factorization_base(const StudyConfig& cfg) {
  RatingsMatrix m;
  if (cfg.data_path) {
    m = load_movielens(*cfg.data_path);
  } else {
    Rng rng = make_rng(cfg.seed, 0);
    m = gen_synthetic_ratings(cfg.subset_users + cfg.subset_users / 5, cfg.subset_items + cfg.subset_items / 2, 10,
                              0.2 * static_cast<double>(cfg.subset_items), rng);
  }
  if (!cfg.full_data) m = densest_subset(m, cfg.subset_users, cfg.subset_items);
  return m.data;
}

// ---------------------------------------------------------------------------
// CSV helpers

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

std::string sanitize(std::string s) {
  for (char& c : s)
    if (c == ',' || c == '\n' || c == '\r') c = ';';
  return s;
}

const std::vector<std::string> kRowHeader = {
    "level",         "rep",          "model",          "ok",           "error",
    "estimate",      "ci_low",       "ci_high",        "truth",        "abs_error",
    "lp_clean_mean", "lp_clean_total", "lp_corrupt_mean", "lp_corrupt_total", "weight_median_corrupt",
    "weight_median_clean", "weight_max_corrupt", "frac_clean_above", "precision_at_k", "mode_count",
    "bimodal",       "frac_below"};

void write_atomically(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw ConfigError("cannot write " + tmp.string());
    out << text;
  }
  std::filesystem::rename(tmp, path);
}

std::string timestamp_now() {
  std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

template <typename T>
void read_key(const json& j, const char* key, T& field) {
  if (j.contains(key)) {
    try {
      field = j.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(std::string("field '") + key + "': " + e.what());
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------

StudyKind parse_study_kind(std::string_view text) {
  if (text == "poisson-outliers") return StudyKind::kPoissonOutliers;
  if (text == "missing-group") return StudyKind::kMissingGroup;
  if (text == "linreg-misspec") return StudyKind::kLinregMisspec;
  if (text == "gmm-skew") return StudyKind::kGmmSkew;
  if (text == "movielens-pf") return StudyKind::kMovielensPf;
  throw ConfigError("unknown study '" + std::string(text) + "'");
}

std::string_view to_string(StudyKind kind) {
  switch (kind) {
    case StudyKind::kPoissonOutliers: return "poisson-outliers";
    case StudyKind::kMissingGroup: return "missing-group";
    case StudyKind::kLinregMisspec: return "linreg-misspec";
    case StudyKind::kGmmSkew: return "gmm-skew";
    case StudyKind::kMovielensPf: return "movielens-pf";
  }
  return "?";
}

InferenceSettings InferenceSettings::from_json(const json& j, InferenceSettings s) {
  if (!j.is_object()) throw ConfigError("inference block must be an object");
  static const std::set<std::string> known = {"method",     "seed",       "n_draws",     "n_warmup",
                                              "restarts",   "max_sweeps", "pred_draws",  "weight_draws"};
  for (const auto& [k, _] : j.items())
    if (!known.count(k)) throw ConfigError("unknown inference field '" + k + "'");
  read_key(j, "method", s.method);
  read_key(j, "seed", s.seed);
  read_key(j, "n_draws", s.n_draws);
  read_key(j, "n_warmup", s.n_warmup);
  read_key(j, "restarts", s.restarts);
  read_key(j, "max_sweeps", s.max_sweeps);
  read_key(j, "pred_draws", s.pred_draws);
  read_key(j, "weight_draws", s.weight_draws);
  return s;
}

json InferenceSettings::to_json() const {
  return {{"method", method},         {"seed", seed},         {"n_draws", n_draws},       {"n_warmup", n_warmup},
          {"restarts", restarts},     {"max_sweeps", max_sweeps}, {"pred_draws", pred_draws}, {"weight_draws", weight_draws}};
}

StudyConfig StudyConfig::defaults(StudyKind kind) {
  StudyConfig c;
  c.study = kind;
  c.weight_prior = "beta:0.1,0.01";
  switch (kind) {
    case StudyKind::kPoissonOutliers:
    case StudyKind::kMissingGroup:
      c.grid = {"0", "0.1", "0.2", "0.25", "0.3", "0.4"};
      c.table_level = "0.25";
      break;
    case StudyKind::kLinregMisspec:
      c.grid = {"interaction", "quadratic", "missing-covariate"};
      c.table_level = "interaction";
      break;
    case StudyKind::kGmmSkew:
      c.grid = {"skew"};
      c.n_obs = 2000;
      c.n_reps = 1;
      c.weight_prior = "beta:1,0.05";
      c.inference.method = "map";
      c.with_localized = false;
      c.table_level = "skew";
      break;
    case StudyKind::kMovielensPf:
      c.grid = {"0.1", "0.5", "1"};
      c.n_reps = 3;
      c.weight_prior = "beta:100,1";
      c.inference.method = "coord";
      c.inference.max_sweeps = 200;
      c.with_localized = false;
      c.table_level = "1";
      break;
  }
  return c;
}

StudyConfig StudyConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  if (!j.contains("study")) throw ConfigError("config needs a 'study' field");
  StudyConfig c = defaults(parse_study_kind(j.at("study").get<std::string>()));
  static const std::set<std::string> known = {
      "study",     "grid",        "n_obs",        "n_test",     "n_reps",       "weight_prior",
      "inference", "seed",        "out_dir",      "threads",    "with_localized", "table_level",
      "data_path", "subset_users", "subset_items", "full_data", "pct_users",    "heldout_users",
      "latent_dim", "synthetic_data"};
  for (const auto& [k, _] : j.items())
    if (!known.count(k)) throw ConfigError("unknown config field '" + k + "'");
  if (j.contains("grid")) {
    if (!j.at("grid").is_array()) throw ConfigError("grid must be an array");
    c.grid.clear();
    for (const auto& v : j.at("grid")) c.grid.push_back(v.is_string() ? v.get<std::string>() : v.dump());
  }
  read_key(j, "n_obs", c.n_obs);
  read_key(j, "n_test", c.n_test);
  read_key(j, "n_reps", c.n_reps);
  read_key(j, "weight_prior", c.weight_prior);
  read_key(j, "seed", c.seed);
  read_key(j, "threads", c.threads);
  read_key(j, "with_localized", c.with_localized);
  read_key(j, "table_level", c.table_level);
  read_key(j, "subset_users", c.subset_users);
  read_key(j, "subset_items", c.subset_items);
  read_key(j, "full_data", c.full_data);
  read_key(j, "pct_users", c.pct_users);
  read_key(j, "heldout_users", c.heldout_users);
  read_key(j, "latent_dim", c.latent_dim);
  read_key(j, "synthetic_data", c.synthetic_data);
  if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
  if (j.contains("data_path") && !j.at("data_path").is_null()) c.data_path = j.at("data_path").get<std::string>();
  if (j.contains("inference")) c.inference = InferenceSettings::from_json(j.at("inference"), c.inference);
  return c;
}

json StudyConfig::to_json() const {
  json j = {{"study", std::string(to_string(study))},
            {"grid", grid},
            {"n_obs", n_obs},
            {"n_test", n_test},
            {"n_reps", n_reps},
            {"weight_prior", weight_prior},
            {"inference", inference.to_json()},
            {"seed", seed},
            {"out_dir", out_dir.string()},
            {"threads", threads},
            {"with_localized", with_localized},
            {"table_level", table_level}};
  if (study == StudyKind::kMovielensPf) {
    j["data_path"] = data_path ? json(data_path->string()) : json(nullptr);
    j["synthetic_data"] = synthetic_data;
    j["subset_users"] = subset_users;
    j["subset_items"] = subset_items;
    j["full_data"] = full_data;
    j["pct_users"] = pct_users;
    j["heldout_users"] = heldout_users;
    j["latent_dim"] = latent_dim;
  }
  return j;
}

void StudyConfig::validate() const {
  if (grid.empty()) throw ConfigError("grid must not be empty");
  if (n_reps < 1) throw ConfigError("n_reps must be at least 1");
  if (n_obs < 1) throw ConfigError("n_obs must be at least 1");
  if (n_test < 1) throw ConfigError("n_test must be at least 1");
  if (threads < 1) throw ConfigError("threads must be at least 1");
  prior();
  const std::string& m = inference.method;
  if (m != "mcmc" && m != "map" && m != "coord") throw ConfigError("inference method must be map, coord or mcmc");
  if (inference.n_draws < 1 || inference.n_warmup < 0) throw ConfigError("sampler sizes must be positive");
  std::set<std::string> seen;
  for (const std::string& level : grid) {
    if (!seen.insert(level).second) throw ConfigError("grid level '" + level + "' repeats");
    switch (study) {
      case StudyKind::kPoissonOutliers:
      case StudyKind::kMissingGroup: {
        double f = level_value(level);
        if (!(f >= 0.0 && f < 1.0)) throw ConfigError("grid level " + level + " outside [0, 1)");
        break;
      }
      case StudyKind::kLinregMisspec: parse_misspec_variant(level); break;
      case StudyKind::kGmmSkew: break;
      case StudyKind::kMovielensPf: {
        double r = level_value(level);
        if (!(r > 0.0 && r <= 1.0)) throw ConfigError("grid level " + level + " outside (0, 1]");
        break;
      }
    }
  }
  if (study == StudyKind::kMovielensPf) {
    if (!data_path && !synthetic_data) throw ConfigError("movielens-pf needs data_path (or synthetic_data)");
    if (!(pct_users > 0.0 && pct_users <= 1.0)) throw ConfigError("pct_users outside (0, 1]");
    if (!(heldout_users > 0.0 && heldout_users < 1.0)) throw ConfigError("heldout_users outside (0, 1)");
    if (latent_dim < 1) throw ConfigError("latent_dim must be positive");
  }
  if ((study == StudyKind::kGmmSkew || study == StudyKind::kMovielensPf) && m == "mcmc")
    throw ConfigError("this study runs MAP inference only");
}

Index StudyResult::n_errors() const {
  return static_cast<Index>(std::count_if(rows.begin(), rows.end(), [](const StudyRow& r) { return !r.ok; }));
}

std::vector<std::string> study_models(const StudyConfig& cfg) {
  if (cfg.study == StudyKind::kGmmSkew || cfg.study == StudyKind::kMovielensPf) return {"original", "rpm"};
  if (cfg.with_localized) return {"original", "localized", "rpm"};
  return {"original", "rpm"};
}

StudyResult run_study(const StudyConfig& cfg) {
  cfg.validate();
  std::optional<PFDataset> base;
  if (cfg.study == StudyKind::kMovielensPf) base = factorization_base(cfg);

  const std::size_t n_cells = cfg.grid.size() * static_cast<std::size_t>(cfg.n_reps);
  std::vector<CellOutput> outputs(n_cells);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t c = next++; c < n_cells; c = next++) {
      const std::size_t li = c / static_cast<std::size_t>(cfg.n_reps);
      const int rep = static_cast<int>(c % static_cast<std::size_t>(cfg.n_reps));
      Cell cell{cfg, cfg.grid[li], rep, make_rng(cfg.seed, (li + 1) * 1000000 + static_cast<std::size_t>(rep)), {}};
      try {
        switch (cfg.study) {
          case StudyKind::kPoissonOutliers: cell.poisson(); break;
          case StudyKind::kMissingGroup: cell.missing_group(); break;
          case StudyKind::kLinregMisspec: cell.linreg(); break;
          case StudyKind::kGmmSkew: cell.gmm(); break;
          case StudyKind::kMovielensPf: cell.factorization(*base); break;
        }
      } catch (const std::exception& e) {
        // data generation failed: every variant gets an error row
        cell.out = {};
        for (const std::string& m : study_models(cfg)) {
          StudyRow r = cell.row(m);
          r.ok = false;
          r.error = e.what();
          cell.out.rows.push_back(std::move(r));
        }
      }
      outputs[c] = std::move(cell.out);
    }
  };
  const int n_threads = std::min<int>(cfg.threads, static_cast<int>(n_cells));
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  }

  StudyResult result;
  result.config = cfg;
  for (CellOutput& o : outputs) {
    for (StudyRow& r : o.rows) result.rows.push_back(std::move(r));
    for (WeightRecord& w : o.weights) result.weights.push_back(std::move(w));
  }
  std::ostringstream text;
  text << cfg.to_json().dump();
  write_rows_csv(result.rows, text);
  result.hash = fnv1a_hex(text.str());
  return result;
}

// ---------------------------------------------------------------------------
// Serialization

void write_rows_csv(const std::vector<StudyRow>& rows, std::ostream& out) {
  for (std::size_t i = 0; i < kRowHeader.size(); ++i) out << (i ? "," : "") << kRowHeader[i];
  out << '\n';
  for (const StudyRow& r : rows) {
    out << r.level << ',' << r.rep << ',' << r.model << ',' << (r.ok ? 1 : 0) << ',' << sanitize(r.error) << ','
        << fmt(r.estimate) << ',' << fmt(r.ci_low) << ',' << fmt(r.ci_high) << ',' << fmt(r.truth) << ','
        << fmt(r.abs_error) << ',' << fmt(r.lp_clean_mean) << ',' << fmt(r.lp_clean_total) << ','
        << fmt(r.lp_corrupt_mean) << ',' << fmt(r.lp_corrupt_total) << ',' << fmt(r.weight_median_corrupt) << ','
        << fmt(r.weight_median_clean) << ',' << fmt(r.weight_max_corrupt) << ',' << fmt(r.frac_clean_above) << ','
        << fmt(r.precision_at_k) << ',' << r.mode_count << ',' << r.bimodal << ',' << fmt(r.frac_below) << '\n';
  }
}

std::vector<StudyRow> read_rows_csv(std::istream& in) {
  Table t = read_table_csv(in);
  if (t.header != kRowHeader) throw ParseError(1, "unexpected rows.csv header");
  std::vector<StudyRow> rows;
  std::size_t line = 1;
  for (const auto& f : t.rows) {
    ++line;
    StudyRow r;
    r.level = f[0];
    r.rep = static_cast<int>(to_double(f[1], line));
    r.model = f[2];
    r.ok = f[3] == "1";
    r.error = f[4];
    double* fields[] = {&r.estimate,          &r.ci_low,          &r.ci_high,           &r.truth,
                        &r.abs_error,         &r.lp_clean_mean,   &r.lp_clean_total,    &r.lp_corrupt_mean,
                        &r.lp_corrupt_total,  &r.weight_median_corrupt, &r.weight_median_clean,
                        &r.weight_max_corrupt, &r.frac_clean_above, &r.precision_at_k};
    for (std::size_t k = 0; k < std::size(fields); ++k) *fields[k] = to_double(f[5 + k], line);
    r.mode_count = static_cast<int>(to_double(f[19], line));
    r.bimodal = static_cast<int>(to_double(f[20], line));
    r.frac_below = to_double(f[21], line);
    rows.push_back(std::move(r));
  }
  return rows;
}

void write_weights_csv(const std::vector<WeightRecord>& w, std::ostream& out) {
  out << "level,rep,model,index,weight,corrupted\n";
  for (const WeightRecord& r : w)
    out << r.level << ',' << r.rep << ',' << r.model << ',' << r.index << ',' << fmt(r.weight) << ','
        << (r.corrupted ? 1 : 0) << '\n';
}

std::vector<WeightRecord> read_weights_csv(std::istream& in) {
  Table t = read_table_csv(in);
  if (t.header != std::vector<std::string>{"level", "rep", "model", "index", "weight", "corrupted"})
    throw ParseError(1, "unexpected weights.csv header");
  std::vector<WeightRecord> out;
  std::size_t line = 1;
  for (const auto& f : t.rows) {
    ++line;
    out.push_back({f[0], static_cast<int>(to_double(f[1], line)), f[2], static_cast<Index>(to_double(f[3], line)),
                   to_double(f[4], line), f[5] == "1"});
  }
  return out;
}

std::filesystem::path write_study(const StudyResult& result, const std::string& timestamp) {
  namespace fs = std::filesystem;
  fs::path dir = result.config.out_dir / std::string(to_string(result.config.study)) /
                 (timestamp.empty() ? timestamp_now() : timestamp);
  fs::create_directories(dir / "tables");
  json cfg = result.config.to_json();
  cfg["hash"] = result.hash;
  write_atomically(dir / "config.json", cfg.dump(2) + "\n");
  std::ostringstream rows, weights;
  write_rows_csv(result.rows, rows);
  write_weights_csv(result.weights, weights);
  write_atomically(dir / "rows.csv", rows.str());
  write_atomically(dir / "weights.csv", weights.str());
  json diag = json::array();
  for (const StudyRow& r : result.rows)
    if (r.mode_count >= 0)
      diag.push_back({{"level", r.level}, {"rep", r.rep}, {"model", r.model}, {"mode_count", r.mode_count},
                      {"frac_below", r.frac_below}, {"bimodal", r.bimodal == 1}});
  write_atomically(dir / "weight_diagnostics.json", diag.dump(2) + "\n");
  return dir;
}

StudyResult load_study(const std::filesystem::path& dir) {
  std::ifstream cfg_in(dir / "config.json");
  if (!cfg_in) throw ConfigError("no config.json in " + dir.string());
  json j = json::parse(cfg_in);
  StudyResult r;
  r.hash = j.value("hash", "");
  j.erase("hash");
  r.config = StudyConfig::from_json(j);
  std::ifstream rows_in(dir / "rows.csv");
  if (!rows_in) throw ConfigError("no rows.csv in " + dir.string());
  r.rows = read_rows_csv(rows_in);
  std::ifstream w_in(dir / "weights.csv");
  if (w_in) r.weights = read_weights_csv(w_in);
  return r;
}

// ---------------------------------------------------------------------------
// Tables

TableKind parse_table_kind(std::string_view text) {
  if (text == "fig3b") return TableKind::kFig3b;
  if (text == "table1") return TableKind::kTable1;
  if (text == "table2") return TableKind::kTable2;
  if (text == "table3") return TableKind::kTable3;
  if (text == "fig5") return TableKind::kFig5;
  if (text == "weights") return TableKind::kWeights;
  throw ConfigError("unknown table '" + std::string(text) + "'");
}

std::string_view to_string(TableKind kind) {
  switch (kind) {
    case TableKind::kFig3b: return "fig3b";
    case TableKind::kTable1: return "table1";
    case TableKind::kTable2: return "table2";
    case TableKind::kTable3: return "table3";
    case TableKind::kFig5: return "fig5";
    case TableKind::kWeights: return "weights";
  }
  return "?";
}

std::vector<TableKind> study_tables(StudyKind kind) {
  switch (kind) {
    case StudyKind::kPoissonOutliers: return {TableKind::kFig3b, TableKind::kTable2, TableKind::kWeights};
    case StudyKind::kMissingGroup: return {TableKind::kFig5, TableKind::kTable2, TableKind::kWeights};
    case StudyKind::kLinregMisspec: return {TableKind::kTable1, TableKind::kTable2, TableKind::kWeights};
    case StudyKind::kGmmSkew: return {TableKind::kWeights};
    case StudyKind::kMovielensPf: return {TableKind::kTable3, TableKind::kWeights};
  }
  return {};
}

Table build_table(const StudyResult& result, TableKind kind) {
  const StudyConfig& cfg = result.config;
  const std::vector<std::string> models = study_models(cfg);
  Table t;

  // successful rows of one (level, model), skipping error rows
  auto cell = [&](const std::string& level, const std::string& model) {
    std::vector<const StudyRow*> ok;
    bool any = false;
    for (const StudyRow& r : result.rows) {
      if (r.level != level || r.model != model) continue;
      any = true;
      if (r.ok) ok.push_back(&r);
      else ++t.skipped;
    }
    if (!any || ok.empty()) throw MissingRows("no rows for level " + level + ", model " + model);
    return ok;
  };
  auto mean_of = [](const std::vector<const StudyRow*>& rows, double StudyRow::*field) {
    double s = 0.0;
    Index n = 0;
    for (const StudyRow* r : rows)
      if (!std::isnan(r->*field)) {
        s += r->*field;
        ++n;
      }
    return n ? s / static_cast<double>(n) : kNaN;
  };

  switch (kind) {
    case TableKind::kFig3b:
    case TableKind::kFig5: {
      t.header = {"F", "model", "mean", "ci_low", "ci_high"};
      if (kind == TableKind::kFig5) t.header.push_back("coverage");
      for (const std::string& level : cfg.grid)
        for (const std::string& m : models) {
          auto rows = cell(level, m);
          std::vector<std::string> line = {level, m, fmt(mean_of(rows, &StudyRow::estimate), 10),
                                           fmt(mean_of(rows, &StudyRow::ci_low), 10),
                                           fmt(mean_of(rows, &StudyRow::ci_high), 10)};
          if (kind == TableKind::kFig5) {
            double hit = 0;
            for (const StudyRow* r : rows) hit += (r->ci_low <= r->truth && r->truth <= r->ci_high) ? 1 : 0;
            line.push_back(fmt(hit / static_cast<double>(rows.size()), 10));
          }
          t.rows.push_back(std::move(line));
        }
      break;
    }
    case TableKind::kTable1: {
      t.header = {"variant", "model", "mean_abs_dev", "std_abs_dev", "summary"};
      for (const std::string& level : cfg.grid)
        for (const std::string& m : models) {
          auto rows = cell(level, m);
          std::vector<double> dev;
          for (const StudyRow* r : rows) dev.push_back(r->abs_error);
          double mean = 0.0;
          for (double d : dev) mean += d;
          mean /= static_cast<double>(dev.size());
          double var = 0.0;
          for (double d : dev) var += (d - mean) * (d - mean);
          double sd = dev.size() > 1 ? std::sqrt(var / static_cast<double>(dev.size() - 1)) : 0.0;
          char buf[64];
          std::snprintf(buf, sizeof buf, "%.2f(%.2f)", mean, sd);
          t.rows.push_back({level, m, fmt(mean, 10), fmt(sd, 10), buf});
        }
      break;
    }
    case TableKind::kTable2: {
      t.header = {"study", "condition", "model", "mean_log_pred", "total_log_pred"};
      const std::string study(to_string(cfg.study));
      for (const char* cond : {"clean", "corrupted"})
        for (const std::string& m : models) {
          auto rows = cell(cfg.table_level, m);
          bool clean = std::string(cond) == "clean";
          double mean = mean_of(rows, clean ? &StudyRow::lp_clean_mean : &StudyRow::lp_corrupt_mean);
          double total = mean_of(rows, clean ? &StudyRow::lp_clean_total : &StudyRow::lp_corrupt_total);
          if (std::isnan(mean)) throw MissingRows("no predictive scores for model " + m);
          t.rows.push_back({study, cond, m, fmt(mean, 10), fmt(total, 10)});
        }
      break;
    }
    case TableKind::kTable3: {
      t.header = {"R", "model", "heldout_loglik", "median_weight_corrupted", "median_weight_clean", "precision_at_k"};
      for (const std::string& level : cfg.grid)
        for (const std::string& m : models) {
          auto rows = cell(level, m);
          t.rows.push_back({level, m, fmt(mean_of(rows, &StudyRow::estimate), 10),
                            fmt(mean_of(rows, &StudyRow::weight_median_corrupt), 10),
                            fmt(mean_of(rows, &StudyRow::weight_median_clean), 10),
                            fmt(mean_of(rows, &StudyRow::precision_at_k), 10)});
        }
      break;
    }
    case TableKind::kWeights: {
      t.header = {"level", "rep", "model", "index", "weight", "corrupted"};
      if (result.weights.empty()) throw MissingRows("study recorded no weights");
      for (const WeightRecord& w : result.weights)
        t.rows.push_back({w.level, std::to_string(w.rep), w.model, std::to_string(w.index), fmt(w.weight),
                          w.corrupted ? "1" : "0"});
      break;
    }
  }
  return t;
}

std::filesystem::path emit_table(const StudyResult& result, TableKind kind, const std::filesystem::path& dir) {
  Table t = build_table(result, kind);
  std::filesystem::create_directories(dir / "tables");
  std::filesystem::path path = dir / "tables" / (std::string(to_string(kind)) + ".csv");
  std::ostringstream out;
  write_table_csv(t, out);
  write_atomically(path, out.str());
  return path;
}

void write_table_csv(const Table& t, std::ostream& out) {
  for (std::size_t i = 0; i < t.header.size(); ++i) out << (i ? "," : "") << t.header[i];
  out << '\n';
  for (const auto& row : t.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << row[i];
    out << '\n';
  }
}

Table read_table_csv(std::istream& in) {
  Table t;
  std::string line;
  if (!std::getline(in, line)) throw ParseError(1, "missing header");
  t.header = split_csv(line);
  std::size_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    auto f = split_csv(line);
    if (f.size() != t.header.size()) throw ParseError(n, "expected " + std::to_string(t.header.size()) + " fields");
    t.rows.push_back(std::move(f));
  }
  return t;
}

WeightPriorSpec scale_prior_helper(Index n) {
  if (n < 1) throw DomainError("n must be at least 1");
  const double a = static_cast<double>(n) / 1000.0;
  return BetaBank{a, 0.1 * a};
}

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace rpm
