#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "qclust/dissimilarity.hpp"
#include "qclust/error.hpp"
#include "qclust/features.hpp"
#include "qclust/hclust.hpp"
#include "qclust/ingest.hpp"
#include "qclust/parallel.hpp"

namespace qclust {

// ---------------------------------------------------------------------------
// Adjusted Rand index

namespace detail {

inline double choose2(std::uint64_t x) { return 0.5 * static_cast<double>(x) * static_cast<double>(x ? x - 1 : 0); }

}  // namespace detail

inline double adjusted_rand_index(std::span<const std::size_t> a, std::span<const std::size_t> b) {
  if (a.size() != b.size())
    throw std::invalid_argument("adjusted_rand_index: partitions cover " + std::to_string(a.size()) + " and " +
                                std::to_string(b.size()) + " items");
  const std::size_t n = a.size();
  std::map<std::pair<std::size_t, std::size_t>, std::uint64_t> cells;
  std::map<std::size_t, std::uint64_t> rows, cols;
  for (std::size_t i = 0; i < n; ++i) {
    ++cells[{a[i], b[i]}];
    ++rows[a[i]];
    ++cols[b[i]];
  }
  double index = 0.0, sum_rows = 0.0, sum_cols = 0.0;
  for (const auto& [key, c] : cells) index += detail::choose2(c);
  for (const auto& [key, c] : rows) sum_rows += detail::choose2(c);
  for (const auto& [key, c] : cols) sum_cols += detail::choose2(c);
  const double total = detail::choose2(n);
  const double expected = total > 0.0 ? sum_rows * sum_cols / total : 0.0;
  const double max_index = 0.5 * (sum_rows + sum_cols);
  if (max_index == expected) {
    // Both partitions trivial: agreement is all-or-nothing.
    const bool identical = cells.size() == rows.size() && cells.size() == cols.size();
    return identical ? 1.0 : 0.0;
  }
  return (index - expected) / (max_index - expected);
}

inline double adjusted_rand_index(const Partition& a, const Partition& b) {
  return adjusted_rand_index(a.labels, b.labels);
}

// ---------------------------------------------------------------------------
// Contingency tables and Pearson's chi-squared test

struct ContingencyTable {
  std::vector<std::size_t> rows;  // cluster ids
  std::vector<std::string> cols;  // category names, sorted
  std::vector<std::vector<std::uint64_t>> counts;

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (const auto& r : counts)
      for (const auto c : r) t += c;
    return t;
  }
};

// Cross-tabulates clusters against external categories. Atypical clusters
// are left out unless `include_atypical` is set.
inline ContingencyTable contingency_table(const Partition& partition,
                                          std::span<const std::optional<std::string>> labels,
                                          std::span<const std::string> meter_ids = {},
                                          bool include_atypical = false) {
  if (labels.size() != partition.labels.size())
    throw std::invalid_argument("contingency_table: label count does not match partition");
  std::vector<std::string> unlabeled;
  std::vector<std::string> categories;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!include_atypical && partition.is_atypical(partition.labels[i])) continue;
    if (!labels[i]) {
      unlabeled.push_back(i < meter_ids.size() ? meter_ids[i] : "#" + std::to_string(i));
      continue;
    }
    categories.push_back(*labels[i]);
  }
  if (!unlabeled.empty()) {
    std::string msg = "missing external label for:";
    for (const auto& id : unlabeled) msg += " " + id;
    throw DataError(msg);
  }
  std::sort(categories.begin(), categories.end());
  categories.erase(std::unique(categories.begin(), categories.end()), categories.end());

  ContingencyTable t;
  t.cols = categories;
  std::vector<std::size_t> row_of(partition.k, std::numeric_limits<std::size_t>::max());
  const auto sizes = partition.sizes();
  for (std::size_t c = 0; c < partition.k; ++c) {
    if ((!include_atypical && partition.is_atypical(c)) || sizes[c] == 0) continue;
    row_of[c] = t.rows.size();
    t.rows.push_back(c);
  }
  t.counts.assign(t.rows.size(), std::vector<std::uint64_t>(t.cols.size(), 0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto r = row_of[partition.labels[i]];
    if (r == std::numeric_limits<std::size_t>::max()) continue;
    const auto col = std::lower_bound(t.cols.begin(), t.cols.end(), *labels[i]) - t.cols.begin();
    ++t.counts[r][static_cast<std::size_t>(col)];
  }
  return t;
}

// Regularized lower incomplete gamma P(a, x): power series for x < a + 1,
// otherwise 1 - Q(a, x) with Q from a Lentz continued fraction.
inline double regularized_gamma_q(double a, double x);

inline double regularized_gamma_p(double a, double x) {
  if (!(a > 0.0) || x < 0.0) throw std::invalid_argument("regularized gamma: need a > 0 and x >= 0");
  if (x == 0.0) return 0.0;
  if (x >= a + 1.0) return 1.0 - regularized_gamma_q(a, x);
  double term = 1.0 / a;
  double sum = term;
  for (int i = 1; i < 10000; ++i) {
    term *= x / (a + i);
    sum += term;
    if (std::abs(term) < std::abs(sum) * 1e-16) break;
  }
  return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

inline double regularized_gamma_q(double a, double x) {
  if (!(a > 0.0) || x < 0.0) throw std::invalid_argument("regularized gamma: need a > 0 and x >= 0");
  if (x < a + 1.0) return 1.0 - regularized_gamma_p(a, x);
  constexpr double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < 10000; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < 1e-16) break;
  }
  return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
}

inline double chi_squared_sf(double statistic, double df) {
  if (statistic <= 0.0) return 1.0;
  return regularized_gamma_q(0.5 * df, 0.5 * statistic);
}

struct ChiSquaredResult {
  double statistic = 0.0;
  std::size_t df = 0;
  double p_value = 1.0;
  std::size_t low_expected_cells = 0;  // cells with expected count < 5
};

inline ChiSquaredResult chi_squared_test(const ContingencyTable& table) {
  const std::size_t r = table.counts.size();
  const std::size_t c = r ? table.counts.front().size() : 0;
  std::vector<double> row_sum(r, 0.0), col_sum(c, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const auto v = static_cast<double>(table.counts[i][j]);
      row_sum[i] += v;
      col_sum[j] += v;
      total += v;
    }
  if (total == 0.0) throw DataError("chi-squared test on an empty table");
  ChiSquaredResult res;
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const double e = row_sum[i] * col_sum[j] / total;
      if (!(e > 0.0)) throw DataError("chi-squared test: a row or column of the table is empty");
      if (e < 5.0) ++res.low_expected_cells;
      const double diff = static_cast<double>(table.counts[i][j]) - e;
      res.statistic += diff * diff / e;
    }
  res.df = (r - 1) * (c - 1);
  res.p_value = res.df == 0 ? 1.0 : chi_squared_sf(res.statistic, static_cast<double>(res.df));
  return res;
}

// ---------------------------------------------------------------------------
// Prototypes

// Member with the smallest mean dissimilarity to the other members.
inline std::size_t medoid(std::span<const std::size_t> members, const CondensedMatrix& matrix) {
  if (members.empty()) throw std::invalid_argument("medoid of an empty cluster");
  for (const auto m : members)
    if (m >= matrix.n()) throw std::out_of_range("medoid: member index out of range");
  if (members.size() == 1) return members.front();
  std::size_t best = members.front();
  double best_mean = std::numeric_limits<double>::infinity();
  const double denom = static_cast<double>(members.size() - 1);
  for (const auto i : members) {
    double s = 0.0;
    for (const auto j : members) s += matrix(i, j);
    const double mean = s / denom;
    if (mean < best_mean || (mean == best_mean && i < best)) {
      best_mean = mean;
      best = i;
    }
  }
  return best;
}

inline std::vector<std::vector<std::size_t>> cluster_members(const Partition& p) {
  std::vector<std::vector<std::size_t>> out(p.k);
  for (std::size_t i = 0; i < p.labels.size(); ++i) out[p.labels[i]].push_back(i);
  return out;
}

// One medoid per cluster id (atypical clusters included).
inline std::vector<std::size_t> cluster_medoids(const Partition& p, const CondensedMatrix& matrix,
                                                std::size_t threads = 1) {
  const auto members = cluster_members(p);
  std::vector<std::size_t> out(p.k, 0);
  parallel_for(p.k, threads, [&](std::size_t c) { out[c] = medoid(members[c], matrix); });
  return out;
}

// Mean load per time-of-day slot; `slots` is 48 (half-hours) or 24 (hours).
inline std::vector<std::optional<double>> hourly_profile(const LoadSeries& series, std::size_t slots = kSlotsPerDay) {
  if (slots != 48 && slots != 24) throw std::invalid_argument("profile slots must be 48 or 24");
  if (series.size() == 0) throw DataError("meter " + series.meter_id + ": empty series");
  std::vector<double> sum(slots, 0.0);
  std::vector<std::size_t> count(slots, 0);
  const std::int64_t day = 86400;
  const std::int64_t slot_seconds = day / static_cast<std::int64_t>(slots);
  for (std::size_t t = 0; t < series.size(); ++t) {
    if (series.missing[t]) continue;
    const std::int64_t secs = series.time_at(t).time_since_epoch().count();
    const std::int64_t of_day = ((secs % day) + day) % day;
    const auto s = static_cast<std::size_t>(of_day / slot_seconds);
    sum[s] += series.values[t];
    ++count[s];
  }
  std::vector<std::optional<double>> out(slots);
  for (std::size_t s = 0; s < slots; ++s)
    if (count[s]) out[s] = sum[s] / static_cast<double>(count[s]);
  return out;
}

struct ClusterMean {
  std::size_t cluster = 0;
  std::size_t size = 0;
  std::vector<double> mean;
};

inline std::vector<ClusterMean> cluster_feature_means(std::span<const FeatureVector> features, const Partition& p,
                                                      bool include_atypical = false) {
  if (features.size() != p.labels.size())
    throw std::invalid_argument("cluster_feature_means: features do not align with the partition");
  const std::size_t dim = features.empty() ? 0 : features.front().size();
  std::vector<ClusterMean> acc(p.k);
  for (std::size_t c = 0; c < p.k; ++c) acc[c] = {c, 0, std::vector<double>(dim, 0.0)};
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (features[i].size() != dim) throw std::invalid_argument("cluster_feature_means: ragged feature vectors");
    auto& a = acc[p.labels[i]];
    ++a.size;
    for (std::size_t k = 0; k < dim; ++k) a.mean[k] += features[i].values[k];
  }
  std::vector<ClusterMean> out;
  for (auto& a : acc) {
    if (a.size == 0 || (!include_atypical && p.is_atypical(a.cluster))) continue;
    for (auto& v : a.mean) v /= static_cast<double>(a.size);
    out.push_back(std::move(a));
  }
  return out;
}

}  // namespace qclust
