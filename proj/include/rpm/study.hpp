#pragma once

#include "rpm/core.hpp"
#include "rpm/weight_priors.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace rpm {

enum class StudyKind { kPoissonOutliers, kMissingGroup, kLinregMisspec, kGmmSkew, kMovielensPf };

StudyKind parse_study_kind(std::string_view text);
std::string_view to_string(StudyKind kind);

/// Inference block: `{"method":"map|coord|mcmc","seed":..,"n_draws":..,"n_warmup":..}` plus
/// optional `restarts`, `max_sweeps`, `pred_draws`, `weight_draws`.
struct InferenceSettings {
  std::string method = "mcmc";
  std::uint64_t seed = 0;
  int n_draws = 1000;
  int n_warmup = 1000;
  int restarts = 5;
  int max_sweeps = 300;
  Index pred_draws = 250;
  Index weight_draws = 50;

  static InferenceSettings from_json(const nlohmann::json& j, InferenceSettings defaults);
  nlohmann::json to_json() const;
};

struct StudyConfig {
  StudyKind study = StudyKind::kPoissonOutliers;
  /// Mismatch levels: F for the synthetic studies, the variant name for the
  /// regression study, R for factorization.
  std::vector<std::string> grid;
  Index n_obs = 100;
  Index n_test = 100;
  int n_reps = 50;
  std::string weight_prior;
  InferenceSettings inference;
  std::uint64_t seed = 0;
  std::filesystem::path out_dir = "out";
  int threads = 1;
  bool with_localized = true;
  /// Level whose clean/corrupted predictive scores feed table2.
  std::string table_level;

  // factorization only
  std::optional<std::filesystem::path> data_path;
  /// Generate ratings instead of reading data_path.
  bool synthetic_data = false;
  Index subset_users = 500;
  Index subset_items = 500;
  bool full_data = false;
  double pct_users = 0.01;
  double heldout_users = 0.2;
  Index latent_dim = 20;

  /// Study defaults (grid, prior, inference method, sizes).
  static StudyConfig defaults(StudyKind kind);
  /// Overlays a JSON object on the defaults of its "study". Throws ConfigError.
  static StudyConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  /// Throws ConfigError naming the offending field.
  void validate() const;
  WeightPriorSpec prior() const { return WeightPriorSpec::parse(weight_prior); }
};

/// One fitted model variant in one replication of one level. Missing values
/// are NaN.
struct StudyRow {
  std::string level;
  int rep = 0;
  std::string model;
  bool ok = true;
  std::string error;
  double estimate = kNaN;  // rate, slope, x1 coefficient, cluster count, or held-out log-lik
  double ci_low = kNaN;
  double ci_high = kNaN;
  double truth = kNaN;
  double abs_error = kNaN;
  double lp_clean_mean = kNaN;
  double lp_clean_total = kNaN;
  double lp_corrupt_mean = kNaN;
  double lp_corrupt_total = kNaN;
  double weight_median_corrupt = kNaN;
  double weight_median_clean = kNaN;
  double weight_max_corrupt = kNaN;
  double frac_clean_above = kNaN;  // clean weights above 0.2
  double precision_at_k = kNaN;
  int mode_count = -1;
  int bimodal = -1;
  double frac_below = kNaN;

  static constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
};

struct WeightRecord {
  std::string level;
  int rep = 0;
  std::string model;
  Index index = 0;
  double weight = 0.0;
  bool corrupted = false;
};

struct StudyResult {
  StudyConfig config;
  std::vector<StudyRow> rows;
  std::vector<WeightRecord> weights;
  /// FNV-1a over the serialized config and rows.
  std::string hash;
  Index n_errors() const;
};

/// Model variants fitted in each cell, in row order.
std::vector<std::string> study_models(const StudyConfig& cfg);

/// Runs every level x replication cell. A failing cell yields error rows for
/// each model variant instead of aborting.
StudyResult run_study(const StudyConfig& cfg);

/// Writes config.json, rows.csv and weights.csv under
/// out_dir/<study>/<timestamp>/ and returns that directory.
std::filesystem::path write_study(const StudyResult& result, const std::string& timestamp = "");

void write_rows_csv(const std::vector<StudyRow>& rows, std::ostream& out);
std::vector<StudyRow> read_rows_csv(std::istream& in);
void write_weights_csv(const std::vector<WeightRecord>& w, std::ostream& out);
std::vector<WeightRecord> read_weights_csv(std::istream& in);

/// Reloads a study directory written by write_study.
StudyResult load_study(const std::filesystem::path& dir);

enum class TableKind { kFig3b, kTable1, kTable2, kTable3, kFig5, kWeights };

TableKind parse_table_kind(std::string_view text);
std::string_view to_string(TableKind kind);

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  /// Error rows left out of the aggregates.
  Index skipped = 0;
};

/// Tables a study produces.
std::vector<TableKind> study_tables(StudyKind kind);

/// Aggregates across replications. Throws MissingRows naming the absent
/// (level, model).
Table build_table(const StudyResult& result, TableKind kind);

/// Writes the table to <dir>/tables/<name>.csv and returns the path.
std::filesystem::path emit_table(const StudyResult& result, TableKind kind, const std::filesystem::path& dir);

void write_table_csv(const Table& t, std::ostream& out);
/// Comma-separated text with a header line; throws ParseError on ragged rows.
Table read_table_csv(std::istream& in);

/// BetaBank(n / 1000, 0.1 n / 1000).
WeightPriorSpec scale_prior_helper(Index n);

/// 64-bit FNV-1a as 16 hex digits.
std::string fnv1a_hex(std::string_view bytes);

}  // namespace rpm
