#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "qclust/error.hpp"
#include "qclust/ingest.hpp"

namespace qclust {

struct LogSeries {
  std::string meter_id;
  std::vector<double> values;
  Mask missing;

  std::size_t size() const { return values.size(); }
};

// X[t] = l[t + period] - l[t], the daily seasonal difference of log load.
struct DiffSeries {
  std::string meter_id;
  std::vector<double> values;
  Mask missing;
  std::size_t period = kSlotsPerDay;

  std::size_t size() const { return values.size(); }
};

enum class ZeroPolicy { Missing, Floor };

inline constexpr double kDefaultFloorKwh = 1e-3;

// Exact zeros become missing under ZeroPolicy::Missing; otherwise every
// value is clamped to `floor` before the logarithm.
inline LogSeries log_transform(const LoadSeries& series, ZeroPolicy policy = ZeroPolicy::Missing,
                               double floor = kDefaultFloorKwh) {
  if (!(floor > 0.0)) throw std::invalid_argument("log floor must be positive");
  LogSeries out{series.meter_id, std::vector<double>(series.size(), 0.0), series.missing};
  for (std::size_t t = 0; t < series.size(); ++t) {
    if (out.missing[t]) continue;
    const double v = series.values[t];
    if (!std::isfinite(v))
      throw DataError("meter " + series.meter_id + ": non-finite value at index " + std::to_string(t));
    if (v == 0.0 && policy == ZeroPolicy::Missing) {
      out.missing[t] = 1;
      continue;
    }
    out.values[t] = std::log(std::max(v, floor));
  }
  return out;
}

// Linear interpolation across interior runs of at most `max_gap` missing
// values. Runs touching either end of the series are left missing.
inline LogSeries impute_short_gaps(LogSeries series, std::size_t max_gap) {
  const std::size_t n = series.size();
  std::size_t t = 0;
  while (t < n) {
    if (!series.missing[t]) {
      ++t;
      continue;
    }
    const std::size_t run_begin = t;
    while (t < n && series.missing[t]) ++t;
    const std::size_t run_end = t;  // one past the run
    const std::size_t run = run_end - run_begin;
    if (run_begin == 0 || run_end == n || run > max_gap) continue;
    const double left = series.values[run_begin - 1];
    const double right = series.values[run_end];
    const double span = static_cast<double>(run + 1);
    for (std::size_t k = run_begin; k < run_end; ++k) {
      const double w = static_cast<double>(k - run_begin + 1) / span;
      series.values[k] = left + w * (right - left);
      series.missing[k] = 0;
    }
  }
  return series;
}

inline DiffSeries seasonal_difference(const LogSeries& series, std::size_t period = kSlotsPerDay) {
  if (period == 0) throw std::invalid_argument("period must be at least 1");
  if (series.size() <= period)
    throw DataError("meter " + series.meter_id + ": series of length " + std::to_string(series.size()) +
                    " is too short for seasonal period " + std::to_string(period));
  const std::size_t n = series.size() - period;
  DiffSeries out{series.meter_id, std::vector<double>(n, 0.0), Mask(n, 0), period};
  for (std::size_t t = 0; t < n; ++t) {
    if (series.missing[t] || series.missing[t + period]) {
      out.missing[t] = 1;
      continue;
    }
    out.values[t] = series.values[t + period] - series.values[t];
  }
  return out;
}

}  // namespace qclust
