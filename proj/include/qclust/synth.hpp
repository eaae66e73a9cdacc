#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <random>
#include <string>
#include <vector>

#include "qclust/ingest.hpp"

namespace qclust {

// Dynamics of the log-load deviation from a fixed daily profile.
enum class ProcessKind : std::size_t {
  AR1 = 0,         // z[t] = 0.8 z[t-1] + e[t]
  SeasonalMA = 1,  // z[t] = e[t] + 0.8 e[t-48]
  Threshold = 2,   // z[t] = (z[t-1] <= 0 ? 0.99 : -0.5) z[t-1] + e[t]
};

inline constexpr std::array<const char*, 3> kAcornGroups{"Adversity", "Comfortable", "Affluent"};

struct SynthParams {
  std::size_t series_per_class = 200;
  std::size_t days = 60;
  std::uint64_t seed = 1;
  double noise_sd = 0.25;
  // Fraction of readings dropped at random.
  double missing_fraction = 0.0;
  // Fraction of meters replaced by a constant load (no dynamics at all).
  double degenerate_fraction = 0.0;
  // Probability that a meter's acorn_group is tied to its process class;
  // otherwise the group is drawn uniformly.
  double label_strength = 0.5;
  Instant start = std::chrono::sys_days{std::chrono::year{2013} / 1 / 1};
};

struct SynthPopulation {
  std::vector<LoadSeries> series;
  std::vector<std::size_t> truth;        // process class per series
  std::vector<std::string> degenerate;   // ids of planted constant series
};

inline std::string synth_meter_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "SYN%06zu", index);
  return buf;
}

// One meter of the population; deterministic in (params.seed, index).
inline LoadSeries synth_series(ProcessKind kind, std::size_t index, const SynthParams& params,
                               bool degenerate = false) {
  const std::size_t period = kSlotsPerDay;
  const std::size_t length = params.days * period;
  std::mt19937_64 rng(params.seed * 0x9E3779B97F4A7C15ULL + index);
  std::normal_distribution<double> noise(0.0, params.noise_sd);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  LoadSeries s;
  s.meter_id = synth_meter_id(index);
  s.start = params.start;
  s.values.assign(length, 0.0);
  s.missing.assign(length, 0);

  const double level = std::log(0.2 + 0.4 * unit(rng));
  const double evening = 0.4 + 0.6 * unit(rng);
  const double morning = 0.2 + 0.4 * unit(rng);
  std::array<double, kSlotsPerDay> profile{};
  for (std::size_t slot = 0; slot < period; ++slot) {
    const double h = static_cast<double>(slot) / 2.0;
    profile[slot] = level + evening * std::exp(-0.5 * (h - 19.0) * (h - 19.0) / 4.0) +
                    morning * std::exp(-0.5 * (h - 8.0) * (h - 8.0) / 2.0);
  }

  if (degenerate) {
    const double constant = std::exp(level);
    for (auto& v : s.values) v = constant;
  } else {
    std::vector<double> e(length + period);
    for (auto& x : e) x = noise(rng);
    double z = 0.0;
    // Burn-in so the AR recursions start near stationarity.
    for (std::size_t t = 0; t < 200; ++t) {
      const double shock = noise(rng);
      if (kind == ProcessKind::AR1) z = 0.8 * z + shock;
      if (kind == ProcessKind::Threshold) z = (z <= 0.0 ? 0.99 : -0.5) * z + shock;
    }
    for (std::size_t t = 0; t < length; ++t) {
      const double shock = e[t + period];
      switch (kind) {
        case ProcessKind::AR1: z = 0.8 * z + shock; break;
        case ProcessKind::SeasonalMA: z = shock + 0.8 * e[t]; break;
        case ProcessKind::Threshold: z = (z <= 0.0 ? 0.99 : -0.5) * z + shock; break;
      }
      s.values[t] = std::exp(profile[t % period] + z);
    }
  }
  if (params.missing_fraction > 0.0)
    for (std::size_t t = 0; t < length; ++t)
      if (unit(rng) < params.missing_fraction) {
        s.missing[t] = 1;
        s.values[t] = 0.0;
      }

  const auto cls = static_cast<std::size_t>(kind);
  const std::size_t group = unit(rng) < params.label_strength
                                ? cls % kAcornGroups.size()
                                : static_cast<std::size_t>(unit(rng) * kAcornGroups.size()) % kAcornGroups.size();
  s.external_label = kAcornGroups[group];
  return s;
}

// Process class of each meter, shuffled so class is not implied by id order.
inline std::vector<std::size_t> synth_classes(const SynthParams& params) {
  std::vector<std::size_t> classes;
  classes.reserve(3 * params.series_per_class);
  for (std::size_t c = 0; c < 3; ++c) classes.insert(classes.end(), params.series_per_class, c);
  std::mt19937_64 rng(params.seed);
  std::shuffle(classes.begin(), classes.end(), rng);
  return classes;
}

inline bool synth_is_degenerate(std::size_t index, const SynthParams& params) {
  if (params.degenerate_fraction <= 0.0) return false;
  std::mt19937_64 rng(params.seed ^ (0xD1B54A32D192ED03ULL * (index + 1)));
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < params.degenerate_fraction;
}

inline SynthPopulation generate_population(const SynthParams& params) {
  SynthPopulation pop;
  pop.truth = synth_classes(params);
  pop.series.reserve(pop.truth.size());
  for (std::size_t i = 0; i < pop.truth.size(); ++i) {
    const bool degenerate = synth_is_degenerate(i, params);
    pop.series.push_back(synth_series(static_cast<ProcessKind>(pop.truth[i]), i, params, degenerate));
    if (degenerate) pop.degenerate.push_back(pop.series.back().meter_id);
  }
  return pop;
}

}  // namespace qclust
