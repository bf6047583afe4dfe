#pragma once

#include "rpm/core.hpp"
#include "rpm/models.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace rpm {

/// A generated or loaded dataset with its corruption labels and the constants
/// that produced it.
struct LabeledDataset {
  std::variant<Dataset, PFDataset> data;
  std::vector<char> corrupted_mask;  // per observation, or per user for PF data
  std::map<std::string, double> truth;
  std::vector<Index> component;  // mixture component per observation (mixtures only)

  const Dataset& dense() const { return std::get<Dataset>(data); }
  const PFDataset& sparse() const { return std::get<PFDataset>(data); }
  Index n_corrupted() const;
};

/// round(f n) draws from Poisson(rate_hi), the rest from Poisson(rate_lo), in
/// random order.
LabeledDataset gen_poisson_outliers(Index n, double f, Rng& rng, double rate_lo = 5.0, double rate_hi = 50.0);

/// x ~ U(-10, 10), y ~ Bernoulli(sigmoid(slope x)); round(f n) rows use the
/// minority slope. The single covariate column is x.
LabeledDataset gen_missing_group(Index n, double f, Rng& rng, double slope_dom = 0.5, double slope_min = 0.01);

enum class MisspecVariant { kInteraction, kQuadratic, kMissingCovariate };

MisspecVariant parse_misspec_variant(std::string_view text);
std::string_view to_string(MisspecVariant v);

/// y from the full structure; covariates hold only the columns of the
/// misspecified fit ((x1, x2), or x1 alone for the missing covariate).
/// Coefficients are drawn from U(-10, 10) unless given.
LabeledDataset gen_linreg_misspec(Index n, MisspecVariant variant, Rng& rng,
                                  std::optional<std::array<double, 4>> coefs = std::nullopt);

/// Same covariate and coefficient draw as gen_linreg_misspec but the response
/// computed from a supplied truth block; used for held-out test sets.
LabeledDataset gen_linreg_misspec_like(Index n, MisspecVariant variant, const std::map<std::string, double>& truth,
                                       Rng& rng);

/// Location xi, scale omega, shape alpha.
double sample_skewnormal(double xi, double omega, double alpha, Rng& rng);

struct SkewComponent {
  std::array<double, 2> location;
  std::array<double, 2> scale;
  double shape;
  double proportion;
};

std::vector<SkewComponent> default_skew_components();

/// Two-dimensional skewnormal mixture; observations live in the covariates.
LabeledDataset gen_skewnormal_mixture(Index n, Rng& rng,
                                      const std::vector<SkewComponent>& components = default_skew_components());

/// Binary user x item matrix with the original ids of each dense index.
struct RatingsMatrix {
  PFDataset data;
  std::vector<std::int64_t> user_ids;
  std::vector<std::int64_t> item_ids;
  std::size_t duplicate_pairs = 0;
};

/// Reads `UserID::MovieID::Rating::Timestamp` lines. Every observed pair
/// becomes a one; repeated pairs are collapsed and counted. Throws ParseError.
RatingsMatrix load_movielens(const std::filesystem::path& path);
RatingsMatrix parse_movielens(std::istream& in);

/// Writes the ratings file format (rating 5, timestamp 0 for every entry).
void write_movielens(const RatingsMatrix& m, std::ostream& out);

/// The n_items most watched items, then the n_users most active users on them.
RatingsMatrix densest_subset(const RatingsMatrix& m, Index n_users, Index n_items);

/// Low-rank Gamma-Poisson implicit feedback with heavy-tailed user activity;
/// entries are binarized.
RatingsMatrix gen_synthetic_ratings(Index n_users, Index n_items, Index rank, double mean_row_size, Rng& rng);

/// Picks round(pct U) users; for each replaces round(ratio row-size) watched
/// items with items outside the original row. Throws InsufficientItems.
LabeledDataset corrupt_users(const PFDataset& data, double pct_users, double ratio_r, Rng& rng);

/// Disjoint, jointly exhaustive split of 0..n-1; the test part has
/// round(test_fraction n) indices. Both parts are sorted.
struct IndexSplit {
  std::vector<Index> train;
  std::vector<Index> test;
};
IndexSplit split_indices(Index n, double test_fraction, Rng& rng);

/// Rows of a PF dataset for the given users, renumbered 0..k-1.
PFDataset select_users(const PFDataset& data, const std::vector<Index>& users);

/// For each user, a random half of their entries (at least one) kept as the
/// fitting part; the rest is scored.
struct RowSplit {
  PFDataset fit;
  PFDataset score;
};
RowSplit split_rows(const PFDataset& data, Rng& rng);

/// CSV `y[,x1,x2,...]`.
void write_dataset_csv(const Dataset& d, std::ostream& out);
Dataset read_dataset_csv(std::istream& in);
/// CSV `user,item,count`.
void write_pf_csv(const PFDataset& d, std::ostream& out);

}  // namespace rpm
