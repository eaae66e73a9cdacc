#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "qclust/ingest.hpp"

using namespace qclust;

namespace {

ParseResult parse(const std::string& text) {
  std::istringstream in(text);
  return parse_readings(in);
}

LoadSeries with_missing(std::string id, std::size_t length, std::size_t missing) {
  LoadSeries s;
  s.meter_id = std::move(id);
  s.values.assign(length, 1.0);
  s.missing.assign(length, 0);
  for (std::size_t t = 0; t < missing; ++t) s.missing[t * (length / missing)] = 1;
  return s;
}

}  // namespace

TEST(ParseReadings, GapOnGridBecomesMissing) {
  const auto r = parse(
      "meter_id,timestamp,kwh\n"
      "M1,2013-01-01T00:00:00Z,0.5\n"
      "M1,2013-01-01T00:30:00Z,0.6\n"
      "M1,2013-01-01T01:30:00Z,0.7\n");
  ASSERT_EQ(r.series.size(), 1u);
  const auto& s = r.series[0];
  ASSERT_EQ(s.size(), 4u);
  EXPECT_EQ(s.missing, (Mask{0, 0, 1, 0}));
  EXPECT_DOUBLE_EQ(s.values[3], 0.7);
  EXPECT_EQ(format_timestamp(s.time_at(3)), "2013-01-01T01:30:00Z");
}

TEST(ParseReadings, HeaderOnlyIsFatal) {
  EXPECT_THROW(parse("meter_id,timestamp,kwh\n"), DataError);
  try {
    parse("meter_id,timestamp,kwh\n");
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("no series"), std::string::npos);
  }
}

TEST(ParseReadings, TwoMetersOfOneDay) {
  std::ostringstream csv;
  csv << "LCLid,DateTime,KWH/hh (per half hour),Acorn_grouped\n";
  for (const char* id : {"B", "A"})
    for (int slot = 0; slot < 48; ++slot)
      csv << id << ",2013-06-01 " << (slot / 2 < 10 ? "0" : "") << slot / 2 << ':' << (slot % 2 ? "30" : "00")
          << ":00.0000000," << 0.1 * slot << ",Affluent\n";
  const auto r = parse(csv.str());
  ASSERT_EQ(r.series.size(), 2u);
  EXPECT_EQ(r.series[0].meter_id, "A");
  EXPECT_EQ(r.series[1].meter_id, "B");
  for (const auto& s : r.series) {
    EXPECT_EQ(s.size(), 48u);
    EXPECT_EQ(s.missing_count(), 0u);
    EXPECT_EQ(s.external_label, "Affluent");
  }
  EXPECT_TRUE(r.rejected.empty());
}

TEST(ParseReadings, MalformedRowsCarryLineNumbers) {
  const auto r = parse(
      "meter_id,timestamp,kwh\n"
      "M1,2013-01-01T00:00:00Z,0.5\n"
      "M1,not-a-time,0.5\n"
      "M1,2013-01-01T00:30:00Z,-1\n"
      "M1,2013-01-01T01:00:00Z,abc\n"
      "M1,2013-01-01T01:10:00Z,0.2\n"
      "M1,2013-01-01T01:30:00Z,nan\n"
      "M1\n"
      "M1,2013-01-01T02:00:00Z,0.9\n");
  ASSERT_EQ(r.rejected.size(), 6u);
  std::vector<std::size_t> lines;
  for (const auto& row : r.rejected) lines.push_back(row.line);
  EXPECT_EQ(lines, (std::vector<std::size_t>{3, 4, 5, 6, 7, 8}));
  ASSERT_EQ(r.series.size(), 1u);
  EXPECT_EQ(r.series[0].size(), 5u);
  EXPECT_EQ(r.series[0].size() - r.series[0].missing_count(), 2u);
}

TEST(ParseReadings, SnapsNearGridTimestamps) {
  const auto r = parse(
      "meter_id,timestamp,kwh\n"
      "M1,2013-01-01T00:00:00.4Z,1\n"
      "M1,2013-01-01T00:29:59.5Z,2\n");
  ASSERT_EQ(r.series[0].size(), 2u);
  EXPECT_TRUE(r.rejected.empty());
}

TEST(ParseReadings, DuplicateTimestampKeepsLastWithWarning) {
  const auto r = parse(
      "meter_id,timestamp,kwh\n"
      "M1,2013-01-01T00:00:00Z,1\n"
      "M1,2013-01-01T00:00:00Z,2\n"
      "M1,2013-01-01T00:30:00Z,3\n");
  ASSERT_EQ(r.series[0].size(), 2u);
  EXPECT_DOUBLE_EQ(r.series[0].values[0], 2.0);
  EXPECT_FALSE(r.warnings.empty());
}

TEST(ParseReadings, NonMissingCountEqualsAcceptedRows) {
  std::mt19937_64 rng(7);
  std::ostringstream csv;
  csv << "meter_id,timestamp,kwh\n";
  std::map<std::string, std::size_t> accepted;
  const Instant start = std::chrono::sys_days{std::chrono::year{2013} / 3 / 1};
  for (const char* id : {"X", "Y", "Z"}) {
    for (int t = 0; t < 200; ++t) {
      if (rng() % 3 == 0) continue;
      csv << id << ',' << format_timestamp(start + kHalfHour * t) << ',' << (rng() % 100) / 10.0 << '\n';
      ++accepted[id];
    }
  }
  const auto r = parse(csv.str());
  for (const auto& s : r.series) EXPECT_EQ(s.size() - s.missing_count(), accepted[s.meter_id]) << s.meter_id;
}

TEST(ParseReadings, IdempotentOnOwnOutput) {
  std::mt19937_64 rng(3);
  std::ostringstream csv;
  csv << "meter_id,timestamp,kwh,acorn_group\n";
  const Instant start = std::chrono::sys_days{std::chrono::year{2013} / 3 / 1};
  for (const char* id : {"P", "Q"})
    for (int t = 0; t < 100; ++t)
      if (rng() % 4) csv << id << ',' << format_timestamp(start + kHalfHour * t) << ',' << std::ldexp(rng() % 997, -7)
                         << ",Comfortable\n";
  const auto first = parse(csv.str());
  std::ostringstream once;
  write_readings(once, first.series);
  const auto second = parse(once.str());
  std::ostringstream twice;
  write_readings(twice, second.series);
  EXPECT_EQ(once.str(), twice.str());
  ASSERT_EQ(first.series.size(), second.series.size());
  for (std::size_t i = 0; i < first.series.size(); ++i) {
    EXPECT_EQ(first.series[i].values, second.series[i].values);
    EXPECT_EQ(first.series[i].missing, second.series[i].missing);
    EXPECT_EQ(first.series[i].start, second.series[i].start);
  }
}

TEST(FilterByMissingness, CompleteSeriesIsKept) {
  auto split = filter_by_missingness({with_missing("a", 100, 0)}, 0.1);
  EXPECT_EQ(split.kept.size(), 1u);
  EXPECT_TRUE(split.discarded.empty());
}

TEST(FilterByMissingness, TwentyOfHundredIsDiscarded) {
  auto split = filter_by_missingness({with_missing("a", 100, 20)}, 0.1);
  EXPECT_TRUE(split.kept.empty());
  EXPECT_EQ(split.discarded.size(), 1u);
}

TEST(FilterByMissingness, MatchesHandCount) {
  const std::size_t counts[] = {0, 1, 2, 3, 4, 5, 6, 8, 10, 20};
  std::vector<LoadSeries> in;
  for (std::size_t i = 0; i < 10; ++i) in.push_back(with_missing("m" + std::to_string(i), 100, counts[i]));
  const auto split = filter_by_missingness(in, 0.05);
  EXPECT_EQ(split.kept.size() + split.discarded.size(), in.size());
  std::vector<std::string> kept;
  for (const auto& s : split.kept) kept.push_back(s.meter_id);
  EXPECT_EQ(kept, (std::vector<std::string>{"m0", "m1", "m2", "m3", "m4", "m5"}));
}

TEST(FilterByMissingness, RejectsBadThreshold) {
  EXPECT_THROW(filter_by_missingness({}, 1.5), std::invalid_argument);
}

TEST(Timestamps, RoundTrip) {
  const auto t = parse_timestamp("2014-02-28 23:30:00");
  ASSERT_TRUE(t);
  EXPECT_EQ(format_timestamp(t->first), "2014-02-28T23:30:00Z");
  EXPECT_FALSE(parse_timestamp("2014-02-30T00:00:00Z"));
  EXPECT_FALSE(parse_timestamp("yesterday"));
}
