#include "rpm/datagen.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <unordered_set>

namespace rpm {

namespace {

void require_fraction(double f) {
  if (!(f >= 0.0 && f < 1.0)) throw DomainError("mismatch fraction must lie in [0, 1)");
}

// positions of the corrupted block after a random permutation
std::vector<char> shuffled_mask(Index n, Index n_bad, Rng& rng) {
  std::vector<char> mask(static_cast<std::size_t>(n), 0);
  std::fill_n(mask.begin(), n_bad, 1);
  rng.shuffle(mask);
  return mask;
}

template <typename T>
T parse_number(std::string_view field, std::size_t line, const char* what) {
  T v{};
  auto [end, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  if (ec != std::errc() || end != field.data() + field.size())
    throw ParseError(line, std::string("bad ") + what + " '" + std::string(field) + "'");
  return v;
}

std::vector<std::string_view> split(std::string_view s, std::string_view sep) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (true) {
    std::size_t next = s.find(sep, pos);
    if (next == std::string_view::npos) {
      out.push_back(s.substr(pos));
      return out;
    }
    out.push_back(s.substr(pos, next - pos));
    pos = next + sep.size();
  }
}

double linreg_mean(MisspecVariant v, const std::array<double, 4>& b, double x1, double x2) {
  double y = b[0] + b[1] * x1 + b[2] * x2;
  switch (v) {
    case MisspecVariant::kInteraction: return y + b[3] * x1 * x2;
    case MisspecVariant::kQuadratic: return y + b[3] * x2 * x2;
    case MisspecVariant::kMissingCovariate: return y;
  }
  return y;
}

LabeledDataset linreg_draw(Index n, MisspecVariant variant, const std::array<double, 4>& b, Rng& rng) {
  Vector y(n);
  const Index cols = variant == MisspecVariant::kMissingCovariate ? 1 : 2;
  Matrix x(n, cols);
  for (Index i = 0; i < n; ++i) {
    double x1 = rng.normal(10.0, 5.0);
    double x2 = rng.normal(0.0, 10.0);
    y[i] = linreg_mean(variant, b, x1, x2) + rng.normal();
    x(i, 0) = x1;
    if (cols == 2) x(i, 1) = x2;
  }
  LabeledDataset out{Dataset(y, x), std::vector<char>(static_cast<std::size_t>(n), 0), {}, {}};
  for (int j = 0; j < 4; ++j) out.truth["beta" + std::to_string(j)] = b[static_cast<std::size_t>(j)];
  out.truth["variant"] = static_cast<double>(variant);
  out.truth["noise_sd"] = 1.0;
  return out;
}

RatingsMatrix from_pairs(std::vector<std::pair<std::int64_t, std::int64_t>> pairs) {
  RatingsMatrix m;
  for (const auto& [u, i] : pairs) {
    m.user_ids.push_back(u);
    m.item_ids.push_back(i);
  }
  auto densify = [](std::vector<std::int64_t>& ids) {
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  };
  densify(m.user_ids);
  densify(m.item_ids);
  auto index_of = [](const std::vector<std::int64_t>& ids, std::int64_t id) {
    return static_cast<Index>(std::lower_bound(ids.begin(), ids.end(), id) - ids.begin());
  };
  std::sort(pairs.begin(), pairs.end());
  std::vector<PFEntry> entries;
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    if (k > 0 && pairs[k] == pairs[k - 1]) {
      ++m.duplicate_pairs;
      continue;
    }
    entries.push_back({index_of(m.user_ids, pairs[k].first), index_of(m.item_ids, pairs[k].second), 1.0});
  }
  m.data = PFDataset(static_cast<Index>(m.user_ids.size()), static_cast<Index>(m.item_ids.size()), std::move(entries));
  return m;
}

}  // namespace

Index LabeledDataset::n_corrupted() const {
  return static_cast<Index>(std::count(corrupted_mask.begin(), corrupted_mask.end(), 1));
}

LabeledDataset gen_poisson_outliers(Index n, double f, Rng& rng, double rate_lo, double rate_hi) {
  require_fraction(f);
  if (n < 1) throw DomainError("need at least one observation");
  const Index n_bad = round_half_up(f * static_cast<double>(n));
  std::vector<char> mask = shuffled_mask(n, n_bad, rng);
  Vector y(n);
  for (Index i = 0; i < n; ++i)
    y[i] = static_cast<double>(rng.poisson(mask[static_cast<std::size_t>(i)] ? rate_hi : rate_lo));
  LabeledDataset out{Dataset(y), std::move(mask), {}, {}};
  out.truth = {{"rate", rate_lo}, {"outlier_rate", rate_hi}, {"f", f}, {"n", static_cast<double>(n)}};
  return out;
}

LabeledDataset gen_missing_group(Index n, double f, Rng& rng, double slope_dom, double slope_min) {
  require_fraction(f);
  if (n < 1) throw DomainError("need at least one observation");
  const Index n_bad = round_half_up(f * static_cast<double>(n));
  std::vector<char> mask = shuffled_mask(n, n_bad, rng);
  Vector y(n);
  Matrix x(n, 1);
  for (Index i = 0; i < n; ++i) {
    x(i, 0) = rng.uniform(-10.0, 10.0);
    double slope = mask[static_cast<std::size_t>(i)] ? slope_min : slope_dom;
    y[i] = rng.bernoulli(sigmoid(slope * x(i, 0))) ? 1.0 : 0.0;
  }
  LabeledDataset out{Dataset(y, x), std::move(mask), {}, {}};
  out.truth = {{"slope", slope_dom}, {"minority_slope", slope_min}, {"f", f}, {"n", static_cast<double>(n)}};
  return out;
}

MisspecVariant parse_misspec_variant(std::string_view text) {
  if (text == "interaction") return MisspecVariant::kInteraction;
  if (text == "quadratic") return MisspecVariant::kQuadratic;
  if (text == "missing-covariate") return MisspecVariant::kMissingCovariate;
  throw ConfigError("unknown misspecification variant '" + std::string(text) + "'");
}

std::string_view to_string(MisspecVariant v) {
  switch (v) {
    case MisspecVariant::kInteraction: return "interaction";
    case MisspecVariant::kQuadratic: return "quadratic";
    case MisspecVariant::kMissingCovariate: return "missing-covariate";
  }
  return "?";
}

LabeledDataset gen_linreg_misspec(Index n, MisspecVariant variant, Rng& rng,
                                  std::optional<std::array<double, 4>> coefs) {
  std::array<double, 4> b{};
  if (coefs) {
    b = *coefs;
  } else {
    for (double& v : b) v = rng.uniform(-10.0, 10.0);
  }
  if (variant == MisspecVariant::kMissingCovariate) b[3] = 0.0;
  return linreg_draw(n, variant, b, rng);
}

LabeledDataset gen_linreg_misspec_like(Index n, MisspecVariant variant, const std::map<std::string, double>& truth,
                                       Rng& rng) {
  std::array<double, 4> b{};
  for (int j = 0; j < 4; ++j) {
    auto it = truth.find("beta" + std::to_string(j));
    if (it == truth.end()) throw ConfigError("truth block lacks beta" + std::to_string(j));
    b[static_cast<std::size_t>(j)] = it->second;
  }
  return linreg_draw(n, variant, b, rng);
}

double sample_skewnormal(double xi, double omega, double alpha, Rng& rng) {
  if (!(omega > 0.0)) throw DomainError("skewnormal scale must be positive");
  const double delta = alpha / std::sqrt(1.0 + alpha * alpha);
  const double z0 = rng.normal();
  const double z1 = rng.normal();
  return xi + omega * (delta * std::abs(z0) + std::sqrt(1.0 - delta * delta) * z1);
}

std::vector<SkewComponent> default_skew_components() {
  return {{{-2.0, -2.0}, {2.0, 2.0}, -5.0, 0.3}, {{3.0, 0.0}, {2.0, 4.0}, 10.0, 0.3}, {{-5.0, 7.0}, {4.0, 2.0}, 15.0, 0.4}};
}

LabeledDataset gen_skewnormal_mixture(Index n, Rng& rng, const std::vector<SkewComponent>& components) {
  if (components.empty()) throw ConfigError("mixture needs at least one component");
  std::vector<double> props;
  for (const auto& c : components) props.push_back(c.proportion);
  Matrix x(n, 2);
  LabeledDataset out;
  out.component.resize(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    std::size_t k = rng.categorical(props);
    out.component[static_cast<std::size_t>(i)] = static_cast<Index>(k);
    for (int d = 0; d < 2; ++d)
      x(i, d) = sample_skewnormal(components[k].location[static_cast<std::size_t>(d)],
                                  components[k].scale[static_cast<std::size_t>(d)], components[k].shape, rng);
  }
  out.data = Dataset(Vector::Zero(n), x);
  out.corrupted_mask.assign(static_cast<std::size_t>(n), 0);
  out.truth["components"] = static_cast<double>(components.size());
  for (std::size_t k = 0; k < components.size(); ++k) {
    const std::string p = "c" + std::to_string(k) + "_";
    out.truth[p + "loc0"] = components[k].location[0];
    out.truth[p + "loc1"] = components[k].location[1];
    out.truth[p + "scale0"] = components[k].scale[0];
    out.truth[p + "scale1"] = components[k].scale[1];
    out.truth[p + "shape"] = components[k].shape;
    out.truth[p + "proportion"] = components[k].proportion;
  }
  return out;
}

RatingsMatrix parse_movielens(std::istream& in) {
  std::vector<std::pair<std::int64_t, std::int64_t>> pairs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split(line, "::");
    if (fields.size() != 4) throw ParseError(line_no, "expected UserID::MovieID::Rating::Timestamp");
    auto user = parse_number<std::int64_t>(fields[0], line_no, "user id");
    auto item = parse_number<std::int64_t>(fields[1], line_no, "movie id");
    parse_number<double>(fields[2], line_no, "rating");
    parse_number<std::int64_t>(fields[3], line_no, "timestamp");
    pairs.emplace_back(user, item);
  }
  return from_pairs(std::move(pairs));
}

RatingsMatrix load_movielens(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open ratings file " + path.string());
  return parse_movielens(in);
}

void write_movielens(const RatingsMatrix& m, std::ostream& out) {
  for (const PFEntry& e : m.data.entries())
    out << m.user_ids[static_cast<std::size_t>(e.user)] << "::" << m.item_ids[static_cast<std::size_t>(e.item)]
        << "::5::0\n";
}

RatingsMatrix densest_subset(const RatingsMatrix& m, Index n_users, Index n_items) {
  const PFDataset& d = m.data;
  n_items = std::min(n_items, d.n_items());
  n_users = std::min(n_users, d.n_users());
  std::vector<Index> item_count(static_cast<std::size_t>(d.n_items()), 0);
  for (const PFEntry& e : d.entries()) ++item_count[static_cast<std::size_t>(e.item)];
  std::vector<Index> items(static_cast<std::size_t>(d.n_items()));
  std::iota(items.begin(), items.end(), 0);
  std::stable_sort(items.begin(), items.end(), [&](Index a, Index b) {
    return item_count[static_cast<std::size_t>(a)] > item_count[static_cast<std::size_t>(b)];
  });
  items.resize(static_cast<std::size_t>(n_items));
  std::vector<char> keep_item(static_cast<std::size_t>(d.n_items()), 0);
  for (Index i : items) keep_item[static_cast<std::size_t>(i)] = 1;

  std::vector<Index> user_count(static_cast<std::size_t>(d.n_users()), 0);
  for (const PFEntry& e : d.entries())
    if (keep_item[static_cast<std::size_t>(e.item)]) ++user_count[static_cast<std::size_t>(e.user)];
  std::vector<Index> users(static_cast<std::size_t>(d.n_users()));
  std::iota(users.begin(), users.end(), 0);
  std::stable_sort(users.begin(), users.end(), [&](Index a, Index b) {
    return user_count[static_cast<std::size_t>(a)] > user_count[static_cast<std::size_t>(b)];
  });
  users.resize(static_cast<std::size_t>(n_users));

  std::vector<std::pair<std::int64_t, std::int64_t>> pairs;
  for (Index u : users)
    for (const PFEntry& e : d.row(u))
      if (keep_item[static_cast<std::size_t>(e.item)])
        pairs.emplace_back(m.user_ids[static_cast<std::size_t>(u)], m.item_ids[static_cast<std::size_t>(e.item)]);
  return from_pairs(std::move(pairs));
}

RatingsMatrix gen_synthetic_ratings(Index n_users, Index n_items, Index rank, double mean_row_size, Rng& rng) {
  if (n_users < 1 || n_items < 1 || rank < 1) throw DomainError("ratings shape must be positive");
  if (!(mean_row_size > 0.0)) throw DomainError("mean row size must be positive");
  Matrix theta(n_users, rank), beta(n_items, rank);
  for (Index u = 0; u < n_users; ++u)
    for (Index k = 0; k < rank; ++k) theta(u, k) = rng.gamma(0.3, 0.3);
  for (Index i = 0; i < n_items; ++i)
    for (Index k = 0; k < rank; ++k) beta(i, k) = rng.gamma(0.3, 0.3);
  // user activity: lognormal multiplier scaled to the requested mean row size
  Vector activity(n_users);
  for (Index u = 0; u < n_users; ++u) activity[u] = std::exp(rng.normal(0.0, 0.7));
  const Matrix rate = theta * beta.transpose();
  Vector row_mass = rate.rowwise().sum();
  std::vector<std::pair<std::int64_t, std::int64_t>> pairs;
  for (Index u = 0; u < n_users; ++u) {
    double scale = row_mass[u] > 0.0 ? mean_row_size * activity[u] / row_mass[u] : 0.0;
    for (Index i = 0; i < n_items; ++i)
      if (rng.poisson(scale * rate(u, i)) > 0) pairs.emplace_back(u + 1, i + 1);
  }
  RatingsMatrix m = from_pairs(std::move(pairs));
  if (m.data.n_users() != n_users || m.data.n_items() != n_items) {
    // keep the requested shape even when some rows or columns came out empty
    std::vector<PFEntry> entries;
    for (const PFEntry& e : m.data.entries())
      entries.push_back({static_cast<Index>(m.user_ids[static_cast<std::size_t>(e.user)] - 1),
                         static_cast<Index>(m.item_ids[static_cast<std::size_t>(e.item)] - 1), 1.0});
    m.data = PFDataset(n_users, n_items, std::move(entries));
    m.user_ids.resize(static_cast<std::size_t>(n_users));
    m.item_ids.resize(static_cast<std::size_t>(n_items));
    std::iota(m.user_ids.begin(), m.user_ids.end(), 1);
    std::iota(m.item_ids.begin(), m.item_ids.end(), 1);
  }
  return m;
}

LabeledDataset corrupt_users(const PFDataset& data, double pct_users, double ratio_r, Rng& rng) {
  if (!(pct_users > 0.0 && pct_users <= 1.0)) throw DomainError("user fraction must lie in (0, 1]");
  if (!(ratio_r > 0.0 && ratio_r <= 1.0)) throw DomainError("replacement ratio must lie in (0, 1]");
  const Index n_users = data.n_users();
  const Index n_bad = round_half_up(pct_users * static_cast<double>(n_users));
  std::vector<char> mask = shuffled_mask(n_users, n_bad, rng);

  std::vector<PFEntry> entries;
  entries.reserve(data.entries().size());
  for (Index u = 0; u < n_users; ++u) {
    auto row = data.row(u);
    if (!mask[static_cast<std::size_t>(u)]) {
      entries.insert(entries.end(), row.begin(), row.end());
      continue;
    }
    std::vector<PFEntry> kept(row.begin(), row.end());
    const auto m = static_cast<Index>(kept.size());
    const Index k = round_half_up(ratio_r * static_cast<double>(m));
    std::unordered_set<Index> watched;
    for (const PFEntry& e : kept) watched.insert(e.item);
    std::vector<Index> fresh;
    for (Index i = 0; i < data.n_items(); ++i)
      if (!watched.count(i)) fresh.push_back(i);
    if (static_cast<Index>(fresh.size()) < k)
      throw InsufficientItems("user " + std::to_string(u) + " has too few unwatched items to replace " +
                              std::to_string(k));
    rng.shuffle(kept);
    rng.shuffle(fresh);
    for (Index j = 0; j < k; ++j) kept[static_cast<std::size_t>(j)] = {u, fresh[static_cast<std::size_t>(j)], 1.0};
    entries.insert(entries.end(), kept.begin(), kept.end());
  }
  LabeledDataset out{PFDataset(n_users, data.n_items(), std::move(entries)), std::move(mask), {}, {}};
  out.truth = {{"pct_users", pct_users}, {"ratio", ratio_r}, {"corrupted_users", static_cast<double>(n_bad)}};
  return out;
}

IndexSplit split_indices(Index n, double test_fraction, Rng& rng) {
  if (!(test_fraction >= 0.0 && test_fraction <= 1.0)) throw DomainError("test fraction must lie in [0, 1]");
  std::vector<Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  rng.shuffle(idx);
  const auto n_test = static_cast<std::size_t>(round_half_up(test_fraction * static_cast<double>(n)));
  IndexSplit s;
  s.test.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
  s.train.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
  std::sort(s.test.begin(), s.test.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

PFDataset select_users(const PFDataset& data, const std::vector<Index>& users) {
  std::vector<PFEntry> entries;
  for (std::size_t k = 0; k < users.size(); ++k)
    for (const PFEntry& e : data.row(users[k])) entries.push_back({static_cast<Index>(k), e.item, e.count});
  return PFDataset(static_cast<Index>(users.size()), data.n_items(), std::move(entries));
}

RowSplit split_rows(const PFDataset& data, Rng& rng) {
  std::vector<PFEntry> fit, score;
  for (Index u = 0; u < data.n_users(); ++u) {
    std::vector<PFEntry> row(data.row(u).begin(), data.row(u).end());
    rng.shuffle(row);
    const std::size_t n_fit = (row.size() + 1) / 2;
    fit.insert(fit.end(), row.begin(), row.begin() + static_cast<std::ptrdiff_t>(n_fit));
    score.insert(score.end(), row.begin() + static_cast<std::ptrdiff_t>(n_fit), row.end());
  }
  return {PFDataset(data.n_users(), data.n_items(), std::move(fit)),
          PFDataset(data.n_users(), data.n_items(), std::move(score))};
}

void write_dataset_csv(const Dataset& d, std::ostream& out) {
  const Index cols = d.n_covariates();
  out << "y";
  for (Index j = 0; j < cols; ++j) out << ",x" << j + 1;
  out << '\n';
  out.precision(std::numeric_limits<double>::max_digits10);
  for (Index i = 0; i < d.n_obs(); ++i) {
    out << d.responses()[i];
    for (Index j = 0; j < cols; ++j) out << ',' << d.covariates()(i, j);
    out << '\n';
  }
}

Dataset read_dataset_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError(1, "missing header");
  const std::size_t cols = split(line, ",").size();
  if (cols < 1 || split(line, ",")[0] != "y") throw ParseError(1, "header must start with y");
  std::vector<std::vector<double>> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto fields = split(line, ",");
    if (fields.size() != cols) throw ParseError(line_no, "wrong number of fields");
    std::vector<double> row;
    for (auto f : fields) row.push_back(parse_number<double>(f, line_no, "value"));
    rows.push_back(std::move(row));
  }
  const auto n = static_cast<Index>(rows.size());
  Vector y(n);
  Matrix x(n, static_cast<Index>(cols) - 1);
  for (Index i = 0; i < n; ++i) {
    y[i] = rows[static_cast<std::size_t>(i)][0];
    for (Index j = 1; j < static_cast<Index>(cols); ++j) x(i, j - 1) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  }
  if (cols == 1) return Dataset(y);
  return Dataset(y, x);
}

void write_pf_csv(const PFDataset& d, std::ostream& out) {
  out << "user,item,count\n";
  for (const PFEntry& e : d.entries()) out << e.user << ',' << e.item << ',' << e.count << '\n';
}

}  // namespace rpm
