#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "qclust/error.hpp"
#include "qclust/preprocess.hpp"

namespace qclust {

enum class FeatureKind : unsigned char { AC = 0, PAC = 1, QC = 2 };

inline std::string_view to_string(FeatureKind kind) {
  switch (kind) {
    case FeatureKind::AC: return "AC";
    case FeatureKind::PAC: return "PAC";
    case FeatureKind::QC: return "QC";
  }
  return "?";
}

inline FeatureKind parse_feature_kind(std::string_view text) {
  if (text == "AC" || text == "ac") return FeatureKind::AC;
  if (text == "PAC" || text == "pac") return FeatureKind::PAC;
  if (text == "QC" || text == "qc") return FeatureKind::QC;
  throw std::invalid_argument("unknown feature kind '" + std::string(text) + "' (expected AC, PAC or QC)");
}

using QuantilePair = std::pair<double, double>;

struct FeatureVector {
  std::string meter_id;
  FeatureKind kind = FeatureKind::AC;
  std::vector<double> values;
  std::size_t k_max = 0;
  std::vector<QuantilePair> quantile_grid;  // QC only
  std::vector<std::size_t> lag_set;         // QC only

  std::size_t size() const { return values.size(); }
};

inline constexpr std::size_t kDefaultMaxLag = 96;

// Linear interpolation between order statistics at h = (n - 1) * tau.
// `sorted` must be ascending.
inline double quantile_of_sorted(std::span<const double> sorted, double tau) {
  if (sorted.empty()) throw DataError("quantile of an empty sample");
  if (!(tau >= 0.0 && tau <= 1.0)) throw std::invalid_argument("quantile level must lie in [0, 1]");
  const double h = static_cast<double>(sorted.size() - 1) * tau;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= sorted.size()) return sorted[sorted.size() - 1];
  const double frac = h - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

inline double sample_quantile(std::span<const double> values, double tau) {
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  return quantile_of_sorted(sorted, tau);
}

namespace detail {

inline std::vector<double> observed_values(const DiffSeries& series) {
  std::vector<double> out;
  out.reserve(series.size());
  for (std::size_t t = 0; t < series.size(); ++t)
    if (!series.missing[t]) out.push_back(series.values[t]);
  return out;
}

inline bool negligible_variance(double variance, double mean) { return variance <= 1e-24 * (1.0 + mean * mean); }

}  // namespace detail

// Lag-j autocorrelation over the pairs (t, t+j) where both ends are observed.
// Means and variances are taken separately for the leading and lagged
// members of those pairs, with the pair count as divisor.
inline double lag_correlation(const DiffSeries& series, std::size_t lag, std::size_t min_pairs = 2) {
  const std::size_t n = series.size();
  if (lag >= n) throw DataError("meter " + series.meter_id + ": lag " + std::to_string(lag) + " exceeds series length");
  const double* x = series.values.data();
  const std::uint8_t* miss = series.missing.data();
  std::size_t pairs = 0;
  double sum_lead = 0.0, sum_lag = 0.0;
  for (std::size_t t = 0; t + lag < n; ++t) {
    if (miss[t] | miss[t + lag]) continue;
    sum_lead += x[t];
    sum_lag += x[t + lag];
    ++pairs;
  }
  if (pairs < min_pairs)
    throw DataError("meter " + series.meter_id + ": too few complete pairs at lag " + std::to_string(lag));
  const double m = static_cast<double>(pairs);
  const double mean_lead = sum_lead / m;
  const double mean_lag = sum_lag / m;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t t = 0; t + lag < n; ++t) {
    if (miss[t] | miss[t + lag]) continue;
    const double a = x[t] - mean_lead;
    const double b = x[t + lag] - mean_lag;
    sxy += a * b;
    sxx += a * a;
    syy += b * b;
  }
  const double var_lead = sxx / m;
  const double var_lag = syy / m;
  if (detail::negligible_variance(var_lead, mean_lead) || detail::negligible_variance(var_lag, mean_lag))
    throw NumericError("meter " + series.meter_id + ": degenerate series (zero variance at lag " +
                       std::to_string(lag) + ")");
  const double r = (sxy / m) / std::sqrt(var_lead * var_lag);
  return std::clamp(r, -1.0, 1.0);
}

inline FeatureVector acf(const DiffSeries& series, std::size_t k_max) {
  if (k_max == 0) throw std::invalid_argument("k_max must be at least 1");
  FeatureVector out;
  out.meter_id = series.meter_id;
  out.kind = FeatureKind::AC;
  out.k_max = k_max;
  out.values.resize(k_max);
  for (std::size_t j = 1; j <= k_max; ++j) out.values[j - 1] = lag_correlation(series, j, k_max + 2);
  return out;
}

struct DurbinLevinson {
  std::vector<double> partial;   // phi_kk for k = 1..K
  std::vector<double> variance;  // innovation variance ratio v_k / gamma(0) for k = 0..K
};

enum class OnBreakdown { Throw, Truncate };

// Levinson recursion over rho(1..K). When the denominator 1 - sum(phi * rho)
// collapses (or the innovation variance turns non-positive) it either throws
// NumericError or returns the orders computed so far.
inline DurbinLevinson durbin_levinson(std::span<const double> rho, OnBreakdown mode = OnBreakdown::Throw) {
  const std::size_t K = rho.size();
  DurbinLevinson out;
  out.partial.reserve(K);
  out.variance.reserve(K + 1);
  out.variance.push_back(1.0);
  std::vector<double> phi, prev;
  phi.reserve(K);
  prev.reserve(K);
  for (std::size_t k = 1; k <= K; ++k) {
    double num = rho[k - 1];
    double den = 1.0;
    for (std::size_t j = 1; j < k; ++j) {
      num -= prev[j - 1] * rho[k - j - 1];
      den -= prev[j - 1] * rho[j - 1];
    }
    if (std::abs(den) < 1e-12) {
      if (mode == OnBreakdown::Truncate) break;
      throw NumericError("near-singular autocorrelation sequence at lag " + std::to_string(k));
    }
    const double phi_kk = num / den;
    const double v = out.variance.back() * (1.0 - phi_kk * phi_kk);
    if (mode == OnBreakdown::Truncate && !(v > 0.0)) break;
    phi.assign(k, 0.0);
    for (std::size_t j = 1; j < k; ++j) phi[j - 1] = prev[j - 1] - phi_kk * prev[k - j - 1];
    phi[k - 1] = phi_kk;
    out.partial.push_back(phi_kk);
    out.variance.push_back(v);
    std::swap(phi, prev);
  }
  return out;
}

inline FeatureVector pacf_from_acf(const FeatureVector& ac) {
  if (ac.kind != FeatureKind::AC) throw std::invalid_argument("pacf_from_acf expects an AC feature vector");
  FeatureVector out;
  out.meter_id = ac.meter_id;
  out.kind = FeatureKind::PAC;
  out.k_max = ac.k_max;
  try {
    out.values = durbin_levinson(ac.values).partial;
  } catch (const NumericError& e) {
    throw NumericError("meter " + ac.meter_id + ": " + e.what());
  }
  // Lag-local correlations need not form a positive-definite sequence.
  for (auto& v : out.values) v = std::clamp(v, -1.0, 1.0);
  return out;
}

inline FeatureVector pacf(const DiffSeries& series, std::size_t k_max) { return pacf_from_acf(acf(series, k_max)); }

namespace detail {

inline double quantile_autocov_with(const DiffSeries& series, std::size_t lag, double q_lead, double q_lag,
                                    double tau, double tau_prime) {
  const std::size_t n = series.size();
  std::size_t pairs = 0, hits = 0;
  for (std::size_t t = 0; t + lag < n; ++t) {
    if (series.missing[t] || series.missing[t + lag]) continue;
    ++pairs;
    hits += static_cast<std::size_t>(series.values[t] <= q_lead && series.values[t + lag] <= q_lag);
  }
  if (pairs == 0) throw DataError("meter " + series.meter_id + ": no complete pairs at lag " + std::to_string(lag));
  return static_cast<double>(hits) / static_cast<double>(pairs) - tau * tau_prime;
}

inline void check_qac_args(const DiffSeries& series, std::size_t lag, double tau, double tau_prime) {
  if (lag == 0) throw std::invalid_argument("quantile autocovariance lag must be at least 1");
  if (!(tau > 0.0 && tau < 1.0) || !(tau_prime > 0.0 && tau_prime < 1.0))
    throw std::invalid_argument("quantile levels must lie in (0, 1)");
  if (lag >= series.size())
    throw DataError("meter " + series.meter_id + ": lag " + std::to_string(lag) + " exceeds series length");
}

}  // namespace detail

// Fraction of complete pairs (t, t+lag) with X[t] <= q(tau) and
// X[t+lag] <= q(tau'), minus tau * tau'. Quantiles use every observed value.
inline double quantile_autocov(const DiffSeries& series, std::size_t lag, double tau, double tau_prime) {
  detail::check_qac_args(series, lag, tau, tau_prime);
  auto sorted = detail::observed_values(series);
  if (sorted.empty()) throw DataError("meter " + series.meter_id + ": no observed values");
  std::sort(sorted.begin(), sorted.end());
  return detail::quantile_autocov_with(series, lag, quantile_of_sorted(sorted, tau),
                                       quantile_of_sorted(sorted, tau_prime), tau, tau_prime);
}

inline const std::vector<double>& default_quantile_levels() {
  static const std::vector<double> levels{0.1, 0.5, 0.9};
  return levels;
}

// Entries ordered by (lag, tau, tau') over the full grid levels x levels.
inline FeatureVector qac_feature_vector(const DiffSeries& series, std::span<const std::size_t> lags,
                                        std::span<const double> levels) {
  if (lags.empty() || levels.empty()) throw std::invalid_argument("QC features need at least one lag and one level");
  for (const auto lag : lags)
    for (const auto tau : levels) detail::check_qac_args(series, lag, tau, tau);
  auto sorted = detail::observed_values(series);
  if (sorted.empty()) throw DataError("meter " + series.meter_id + ": no observed values");
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> q(levels.size());
  for (std::size_t i = 0; i < levels.size(); ++i) q[i] = quantile_of_sorted(sorted, levels[i]);

  FeatureVector out;
  out.meter_id = series.meter_id;
  out.kind = FeatureKind::QC;
  out.lag_set.assign(lags.begin(), lags.end());
  out.values.reserve(lags.size() * levels.size() * levels.size());
  for (const auto lag : lags)
    for (std::size_t a = 0; a < levels.size(); ++a)
      for (std::size_t b = 0; b < levels.size(); ++b)
        out.values.push_back(detail::quantile_autocov_with(series, lag, q[a], q[b], levels[a], levels[b]));
  for (std::size_t a = 0; a < levels.size(); ++a)
    for (std::size_t b = 0; b < levels.size(); ++b) out.quantile_grid.emplace_back(levels[a], levels[b]);
  return out;
}

inline FeatureVector qac_feature_vector(const DiffSeries& series) {
  const std::size_t lag = 1;
  return qac_feature_vector(series, std::span<const std::size_t>(&lag, 1), default_quantile_levels());
}

// ---------------------------------------------------------------------------
// AR order selection

struct OrderSelection {
  std::size_t k = 0;                         // max over series of the BIC order
  std::vector<std::optional<std::size_t>> orders;  // per series; nullopt when skipped
  std::vector<std::string> warnings;
};

// BIC-optimal AR order of one series from its Yule-Walker fit. Uses the
// usual mean-centred autocovariance with divisor n, which keeps the
// Toeplitz system positive definite.
inline std::size_t bic_order(const DiffSeries& series, std::size_t p_max) {
  const auto observed = detail::observed_values(series);
  const std::size_t n_obs = observed.size();
  if (n_obs <= p_max + 1) throw DataError("meter " + series.meter_id + ": too short for AR order selection");
  double mean = 0.0;
  for (const double v : observed) mean += v;
  mean /= static_cast<double>(n_obs);

  const std::size_t n = series.size();
  std::vector<double> gamma(p_max + 1, 0.0);
  for (std::size_t h = 0; h <= std::min(p_max, n - 1); ++h) {
    double s = 0.0;
    for (std::size_t t = 0; t + h < n; ++t) {
      if (series.missing[t] || series.missing[t + h]) continue;
      s += (series.values[t] - mean) * (series.values[t + h] - mean);
    }
    gamma[h] = s / static_cast<double>(n_obs);
  }
  if (detail::negligible_variance(gamma[0], mean))
    throw NumericError("meter " + series.meter_id + ": degenerate series (zero variance)");
  std::vector<double> rho(p_max);
  for (std::size_t h = 1; h <= p_max; ++h) rho[h - 1] = gamma[h] / gamma[0];

  const auto fit = durbin_levinson(rho, OnBreakdown::Truncate);
  const double nd = static_cast<double>(n_obs);
  const double log_n = std::log(nd);
  std::size_t best = 0;
  double best_bic = std::numeric_limits<double>::infinity();
  for (std::size_t p = 0; p < fit.variance.size(); ++p) {
    const double bic = nd * std::log(gamma[0] * fit.variance[p]) + static_cast<double>(p) * log_n;
    if (bic < best_bic) {
      best_bic = bic;
      best = p;
    }
  }
  return best;
}

inline OrderSelection select_max_lag_bic(std::span<const DiffSeries> series_set, std::size_t p_max) {
  if (p_max == 0) throw std::invalid_argument("p_max must be at least 1");
  OrderSelection out;
  out.orders.reserve(series_set.size());
  bool any = false;
  for (const auto& s : series_set) {
    try {
      const auto p = bic_order(s, p_max);
      out.orders.emplace_back(p);
      out.k = std::max(out.k, p);
      any = true;
    } catch (const DataError& e) {
      out.orders.emplace_back(std::nullopt);
      out.warnings.push_back(std::string("skipped in order selection: ") + e.what());
    }
  }
  if (!any) throw DataError("order selection failed: every series was degenerate");
  return out;
}

}  // namespace qclust
