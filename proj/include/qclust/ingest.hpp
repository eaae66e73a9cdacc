#pragma once

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "qclust/error.hpp"

namespace qclust {

using Instant = std::chrono::sys_seconds;
using Mask = std::vector<std::uint8_t>;

inline constexpr std::chrono::seconds kHalfHour{1800};
inline constexpr std::size_t kSlotsPerDay = 48;

struct RawReading {
  std::string meter_id;
  Instant timestamp;
  double kwh = 0.0;
  std::string acorn_group;
};

// One meter's readings on a regular half-hourly grid.
struct LoadSeries {
  std::string meter_id;
  Instant start{};
  std::chrono::seconds step = kHalfHour;
  std::vector<double> values;
  Mask missing;
  std::optional<std::string> external_label;

  std::size_t size() const { return values.size(); }
  std::size_t missing_count() const {
    return static_cast<std::size_t>(std::count(missing.begin(), missing.end(), 1));
  }
  double missing_fraction() const {
    return values.empty() ? 1.0 : static_cast<double>(missing_count()) / static_cast<double>(values.size());
  }
  Instant time_at(std::size_t index) const { return start + step * static_cast<std::int64_t>(index); }
};

struct RejectedRow {
  std::size_t line = 0;
  std::string reason;
};

struct ParseResult {
  std::vector<LoadSeries> series;
  std::vector<RejectedRow> rejected;
  std::vector<std::string> warnings;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  for (;;) {
    const auto comma = line.find(',', pos);
    if (comma == std::string_view::npos) {
      out.push_back(trim(line.substr(pos)));
      return out;
    }
    out.push_back(trim(line.substr(pos, comma - pos)));
    pos = comma + 1;
  }
}

template <typename Int>
bool parse_fixed(std::string_view s, std::size_t pos, std::size_t len, Int& out) {
  if (pos + len > s.size()) return false;
  const char* first = s.data() + pos;
  const char* last = first + len;
  if (!std::all_of(first, last, [](char c) { return c >= '0' && c <= '9'; })) return false;
  return std::from_chars(first, last, out).ec == std::errc{};
}

}  // namespace detail

// Parses `YYYY-MM-DDTHH:MM:SS[.fff][Z]` (a space is accepted in place of `T`).
// Returns the instant in whole seconds plus the fractional part in [0, 1).
inline std::optional<std::pair<Instant, double>> parse_timestamp(std::string_view s) {
  using namespace std::chrono;
  int y = 0;
  unsigned mo = 0, d = 0, hh = 0, mm = 0, ss = 0;
  if (s.size() < 19 || s[4] != '-' || s[7] != '-' || (s[10] != 'T' && s[10] != ' ') || s[13] != ':' ||
      s[16] != ':')
    return std::nullopt;
  if (!detail::parse_fixed(s, 0, 4, y) || !detail::parse_fixed(s, 5, 2, mo) || !detail::parse_fixed(s, 8, 2, d) ||
      !detail::parse_fixed(s, 11, 2, hh) || !detail::parse_fixed(s, 14, 2, mm) || !detail::parse_fixed(s, 17, 2, ss))
    return std::nullopt;
  std::string_view rest = s.substr(19);
  double fraction = 0.0;
  if (!rest.empty() && rest.front() == '.') {
    std::size_t digits = 1;
    while (digits < rest.size() && rest[digits] >= '0' && rest[digits] <= '9') ++digits;
    if (digits == 1) return std::nullopt;
    std::string frac_text = "0";
    frac_text.append(rest.substr(0, digits));
    fraction = std::strtod(frac_text.c_str(), nullptr);
    rest.remove_prefix(digits);
  }
  if (!rest.empty() && rest.front() == 'Z') rest.remove_prefix(1);
  if (!rest.empty()) return std::nullopt;
  const year_month_day ymd{year{y}, month{mo}, day{d}};
  if (!ymd.ok() || hh > 23 || mm > 59 || ss > 59) return std::nullopt;
  const Instant t = sys_days{ymd} + hours{hh} + minutes{mm} + seconds{ss};
  return std::pair{t, fraction};
}

inline std::string format_timestamp(Instant t) {
  using namespace std::chrono;
  const auto day_point = floor<days>(t);
  const year_month_day ymd{day_point};
  const hh_mm_ss hms{t - day_point};
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02uT%02d:%02d:%02dZ", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()),
                static_cast<int>(hms.hours().count()), static_cast<int>(hms.minutes().count()),
                static_cast<int>(hms.seconds().count()));
  return buf;
}

// Shortest representation that round-trips through strtod.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

// Reads `meter_id,timestamp,kwh[,acorn_group]` CSV. Bad rows are reported
// and skipped; a file without a single valid row is fatal.
inline ParseResult parse_readings(std::istream& in) {
  ParseResult result;
  std::string line;
  std::size_t line_no = 0;

  int col_meter = -1, col_time = -1, col_kwh = -1, col_group = -1;
  while (std::getline(in, line)) {
    ++line_no;
    const auto trimmed = detail::trim(line);
    if (trimmed.empty()) continue;
    const auto header = detail::split_csv(trimmed);
    for (std::size_t i = 0; i < header.size(); ++i) {
      const auto name = header[i];
      const int idx = static_cast<int>(i);
      if (name == "meter_id" || name == "LCLid") col_meter = idx;
      else if (name == "timestamp" || name == "DateTime") col_time = idx;
      else if (name == "kwh" || name.rfind("KWH/hh", 0) == 0) col_kwh = idx;
      else if (name == "acorn_group" || name == "Acorn_grouped") col_group = idx;
    }
    break;
  }
  if (col_meter < 0 || col_time < 0 || col_kwh < 0)
    throw DataError("missing header: expected columns meter_id,timestamp,kwh[,acorn_group]");
  const auto min_fields = static_cast<std::size_t>(std::max({col_meter, col_time, col_kwh, col_group})) + 1;

  struct Entry {
    Instant t;
    double kwh;
    std::size_t line;
  };
  struct Accum {
    std::vector<Entry> entries;
    std::string group;
  };
  std::map<std::string, Accum, std::less<>> meters;
  std::vector<std::string> order;

  auto reject = [&](std::string reason) { result.rejected.push_back({line_no, std::move(reason)}); };

  while (std::getline(in, line)) {
    ++line_no;
    const auto trimmed = detail::trim(line);
    if (trimmed.empty()) continue;
    const auto fields = detail::split_csv(trimmed);
    if (fields.size() < min_fields) {
      reject("expected at least " + std::to_string(min_fields) + " fields");
      continue;
    }
    const auto id = fields[col_meter];
    if (id.empty()) {
      reject("empty meter_id");
      continue;
    }
    const auto ts = parse_timestamp(fields[col_time]);
    if (!ts) {
      reject("bad timestamp");
      continue;
    }
    // Snap to the half-hour grid when within one second of it.
    const auto raw = ts->first.time_since_epoch().count();
    const double exact = static_cast<double>(raw) + ts->second;
    const double step = static_cast<double>(kHalfHour.count());
    const double nearest = std::round(exact / step) * step;
    if (std::abs(exact - nearest) > 1.0) {
      reject("timestamp off the 30-minute grid");
      continue;
    }
    const Instant t{std::chrono::seconds{static_cast<std::int64_t>(nearest)}};

    const auto kwh_text = fields[col_kwh];
    double kwh = 0.0;
    const auto parsed = std::from_chars(kwh_text.data(), kwh_text.data() + kwh_text.size(), kwh);
    if (kwh_text.empty() || parsed.ec != std::errc{} || parsed.ptr != kwh_text.data() + kwh_text.size()) {
      reject("bad kwh");
      continue;
    }
    if (!std::isfinite(kwh)) {
      reject("non-finite kwh");
      continue;
    }
    if (kwh < 0.0) {
      reject("negative kwh");
      continue;
    }

    auto it = meters.find(id);
    if (it == meters.end()) {
      it = meters.emplace(std::string(id), Accum{}).first;
      order.emplace_back(id);
    }
    it->second.entries.push_back({t, kwh, line_no});
    if (col_group >= 0 && !fields[col_group].empty()) {
      const auto group = fields[col_group];
      if (!it->second.group.empty() && it->second.group != group)
        result.warnings.push_back("meter " + std::string(id) + ": conflicting acorn_group at line " +
                                  std::to_string(line_no) + ", keeping the last");
      it->second.group = std::string(group);
    }
  }

  std::sort(order.begin(), order.end());
  for (const auto& id : order) {
    auto& acc = meters.at(id);
    auto& entries = acc.entries;
    std::stable_sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) { return a.t < b.t; });
    // Keep the last row (in file order) of each duplicated timestamp.
    std::vector<Entry> unique;
    unique.reserve(entries.size());
    for (const auto& e : entries) {
      if (!unique.empty() && unique.back().t == e.t) {
        result.warnings.push_back("meter " + id + ": duplicate timestamp " + format_timestamp(e.t) + " at line " +
                                  std::to_string(e.line) + " replaces line " + std::to_string(unique.back().line));
        unique.back() = e;
      } else {
        unique.push_back(e);
      }
    }

    LoadSeries s;
    s.meter_id = id;
    s.start = unique.front().t;
    const auto length = static_cast<std::size_t>((unique.back().t - s.start) / kHalfHour) + 1;
    s.values.assign(length, 0.0);
    s.missing.assign(length, 1);
    for (const auto& e : unique) {
      const auto idx = static_cast<std::size_t>((e.t - s.start) / kHalfHour);
      s.values[idx] = e.kwh;
      s.missing[idx] = 0;
    }
    if (!acc.group.empty()) s.external_label = acc.group;
    result.series.push_back(std::move(s));
  }

  if (result.series.empty()) throw DataError("no series: input contains no valid readings");
  return result;
}

// Inverse of parse_readings: one row per non-missing value.
inline void write_readings(std::ostream& out, std::span<const LoadSeries> series) {
  const bool with_group =
      std::any_of(series.begin(), series.end(), [](const LoadSeries& s) { return s.external_label.has_value(); });
  out << "meter_id,timestamp,kwh" << (with_group ? ",acorn_group" : "") << '\n';
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s.missing[i]) continue;
      out << s.meter_id << ',' << format_timestamp(s.time_at(i)) << ',' << format_double(s.values[i]);
      if (with_group) out << ',' << s.external_label.value_or("");
      out << '\n';
    }
  }
}

inline void write_rejected(std::ostream& out, std::span<const RejectedRow> rows) {
  out << "line,reason\n";
  for (const auto& r : rows) out << r.line << ',' << r.reason << '\n';
}

struct MissingnessSplit {
  std::vector<LoadSeries> kept;
  std::vector<LoadSeries> discarded;
};

inline MissingnessSplit filter_by_missingness(std::vector<LoadSeries> series, double max_missing_fraction) {
  if (!(max_missing_fraction >= 0.0 && max_missing_fraction <= 1.0))
    throw std::invalid_argument("max_missing_fraction must lie in [0, 1]");
  MissingnessSplit split;
  for (auto& s : series) {
    const double allowed = max_missing_fraction * static_cast<double>(s.size());
    if (static_cast<double>(s.missing_count()) <= allowed)
      split.kept.push_back(std::move(s));
    else
      split.discarded.push_back(std::move(s));
  }
  return split;
}

}  // namespace qclust
