#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "qclust/config.hpp"
#include "qclust/dissimilarity.hpp"
#include "qclust/error.hpp"
#include "qclust/evaluate.hpp"
#include "qclust/features.hpp"
#include "qclust/hclust.hpp"
#include "qclust/ingest.hpp"
#include "qclust/parallel.hpp"
#include "qclust/preprocess.hpp"
#include "qclust/synth.hpp"
#include "qclust/tree.hpp"

namespace qclust {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct RunOptions {
  std::size_t threads = 1;
  bool force = false;          // accept inputs produced under different configs
  bool chi_squared = true;     // evaluate: require external labels and test them
  std::ostream* log = &std::cerr;
};

inline constexpr FeatureKind kAllKinds[] = {FeatureKind::AC, FeatureKind::PAC, FeatureKind::QC};

inline std::string method_tag(FeatureKind kind) {
  std::string s(to_string(kind));
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

// ---------------------------------------------------------------------------
// Feature extraction

struct SeriesFeatures {
  FeatureVector ac, pac, qc;
};

inline DiffSeries preprocess_series(const LoadSeries& load, const PipelineConfig& config) {
  auto logged = log_transform(load, config.zero_policy, config.log_floor);
  logged = impute_short_gaps(std::move(logged), config.max_gap);
  return seasonal_difference(logged, config.period);
}

inline SeriesFeatures features_of(const DiffSeries& diff, std::size_t k_max, const PipelineConfig& config) {
  SeriesFeatures out;
  out.ac = acf(diff, k_max);
  out.pac = pacf_from_acf(out.ac);
  out.qc = qac_feature_vector(diff, config.qc_lags, config.qc_levels);
  return out;
}

struct DroppedSeries {
  std::string meter_id;
  std::string reason;
};

struct Extraction {
  std::size_t k_max = 0;
  std::vector<FeatureVector> ac, pac, qc;  // aligned, in input order
  std::vector<DroppedSeries> dropped;
  std::vector<std::string> warnings;

  const std::vector<FeatureVector>& of(FeatureKind kind) const {
    return kind == FeatureKind::AC ? ac : kind == FeatureKind::PAC ? pac : qc;
  }
};

// Preprocesses every series and computes its three feature vectors. Series
// that fail at any step are dropped with the reason.
inline Extraction extract_features(std::span<const LoadSeries> series, const PipelineConfig& config,
                                   std::size_t threads = 1) {
  const std::size_t n = series.size();
  std::vector<std::optional<DiffSeries>> diffs(n);
  std::vector<std::string> errors(n);
  parallel_for(n, threads, [&](std::size_t i) {
    try {
      diffs[i] = preprocess_series(series[i], config);
    } catch (const DataError& e) {
      errors[i] = e.what();
    }
  });

  Extraction out;
  out.k_max = config.k_max;
  if (config.select_k) {
    std::vector<DiffSeries> usable;
    for (const auto& d : diffs)
      if (d) usable.push_back(*d);
    if (!usable.empty()) {
      auto sel = select_max_lag_bic(usable, config.p_max);
      out.warnings.insert(out.warnings.end(), sel.warnings.begin(), sel.warnings.end());
      out.k_max = std::max<std::size_t>(sel.k, 1);
      if (sel.k == 0) out.warnings.push_back("BIC selected order 0 for every series; using K = 1");
    }
  }

  std::vector<std::optional<SeriesFeatures>> feats(n);
  parallel_for(n, threads, [&](std::size_t i) {
    if (!diffs[i]) return;
    try {
      feats[i] = features_of(*diffs[i], out.k_max, config);
    } catch (const DataError& e) {
      errors[i] = e.what();
    }
    diffs[i].reset();
  });
  for (std::size_t i = 0; i < n; ++i) {
    if (!feats[i]) {
      out.dropped.push_back({series[i].meter_id, errors[i]});
      continue;
    }
    out.ac.push_back(std::move(feats[i]->ac));
    out.pac.push_back(std::move(feats[i]->pac));
    out.qc.push_back(std::move(feats[i]->qc));
  }
  return out;
}

inline std::vector<std::string> feature_names(FeatureKind kind, std::size_t dim, const PipelineConfig& config) {
  std::vector<std::string> names;
  names.reserve(dim);
  if (kind == FeatureKind::QC) {
    for (const auto lag : config.qc_lags)
      for (const auto a : config.qc_levels)
        for (const auto b : config.qc_levels)
          names.push_back("gamma_j" + std::to_string(lag) + "_" + format_double(a) + "_" + format_double(b));
  }
  const std::string stem = kind == FeatureKind::AC ? "rho" : kind == FeatureKind::PAC ? "pi" : "qc";
  for (std::size_t i = names.size(); i < dim; ++i) names.push_back(stem + std::to_string(i + 1));
  names.resize(dim);
  return names;
}

// ---------------------------------------------------------------------------
// Files. Every CSV starts with a `# config_hash=<hex>` line; every JSON
// carries a "config_hash" field.

namespace detail {

inline std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

inline void write_json(const fs::path& path, const json& j) {
  auto out = open_out(path);
  out << j.dump(2) << '\n';
}

inline json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  return json::parse(in);
}

struct CsvFile {
  std::string config_hash;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

inline CsvFile read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  CsvFile f;
  std::string line;
  bool have_header = false;
  while (std::getline(in, line)) {
    const auto t = trim(line);
    if (t.empty()) continue;
    if (t.front() == '#') {
      constexpr std::string_view key = "# config_hash=";
      if (t.rfind(key, 0) == 0) f.config_hash = std::string(t.substr(key.size()));
      continue;
    }
    std::vector<std::string> fields;
    for (const auto part : split_csv(t)) fields.emplace_back(part);
    if (!have_header) {
      f.header = std::move(fields);
      have_header = true;
    } else {
      f.rows.push_back(std::move(fields));
    }
  }
  return f;
}

inline double to_double(const std::string& s, const fs::path& where) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw DataError(where.string() + ": bad number '" + s + "'");
  return v;
}

inline std::size_t to_size(const std::string& s, const fs::path& where) {
  std::size_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw DataError(where.string() + ": bad integer '" + s + "'");
  return v;
}

inline void record_outputs(const fs::path& out_dir, const std::string& command, const std::string& hash,
                           const std::vector<std::string>& files) {
  const auto path = out_dir / "manifest.json";
  json m = fs::exists(path) ? read_json(path) : json::object();
  if (!m.contains("files")) m["files"] = json::object();
  m["config_hash"] = hash;
  for (const auto& f : files) m["files"][f] = {{"command", command}, {"config_hash", hash}};
  write_json(path, m);
}

inline void write_config_copy(const fs::path& out_dir, const PipelineConfig& config) {
  auto out = open_out(out_dir / "config.txt");
  out << "# config_hash=" << config.hash() << '\n' << config.to_text();
}

}  // namespace detail

inline fs::path features_path(const fs::path& dir, FeatureKind kind) {
  return dir / ("features_" + method_tag(kind) + ".csv");
}
inline fs::path partition_path(const fs::path& dir, FeatureKind kind) {
  return dir / ("partition_" + method_tag(kind) + ".csv");
}
inline fs::path matrix_path(const fs::path& dir, FeatureKind kind) {
  return dir / ("matrix_" + method_tag(kind) + ".qcdm");
}

inline void write_features_csv(std::ostream& out, std::span<const FeatureVector> features, const std::string& hash) {
  out << "# config_hash=" << hash << '\n';
  out << "meter_id,kind";
  const std::size_t dim = features.empty() ? 0 : features.front().size();
  for (std::size_t k = 1; k <= dim; ++k) out << ",f" << k;
  out << '\n';
  for (const auto& f : features) {
    out << f.meter_id << ',' << to_string(f.kind);
    for (const double v : f.values) out << ',' << format_double(v);
    out << '\n';
  }
}

// Row-major little-endian f64 block with a JSON header describing it.
inline void write_features_binary(const fs::path& path, std::span<const FeatureVector> features,
                                  const std::string& hash) {
  const std::size_t dim = features.empty() ? 0 : features.front().size();
  auto out = detail::open_out(path);
  for (const auto& f : features)
    out.write(reinterpret_cast<const char*>(f.values.data()), static_cast<std::streamsize>(dim * sizeof(double)));
  std::vector<std::string> ids;
  for (const auto& f : features) ids.push_back(f.meter_id);
  detail::write_json(fs::path(path.string() + ".json"),
                     {{"rows", features.size()},
                      {"cols", dim},
                      {"dtype", "f64le"},
                      {"layout", "row-major"},
                      {"kind", features.empty() ? "" : std::string(to_string(features.front().kind))},
                      {"meter_ids", ids},
                      {"config_hash", hash}});
}

struct FeatureTable {
  FeatureKind kind = FeatureKind::AC;
  std::vector<FeatureVector> vectors;
  std::string config_hash;
};

inline FeatureTable read_features(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("missing feature file " + path.string() + " (run `extract` first)");
  const auto csv = detail::read_csv(path);
  if (csv.header.size() < 2 || csv.header[0] != "meter_id" || csv.header[1] != "kind")
    throw DataError(path.string() + ": expected header meter_id,kind,f1..fM");
  FeatureTable t;
  t.config_hash = csv.config_hash;
  bool first = true;
  for (const auto& row : csv.rows) {
    if (row.size() != csv.header.size()) throw DataError(path.string() + ": ragged row for " + row[0]);
    FeatureVector f;
    f.meter_id = row[0];
    f.kind = parse_feature_kind(row[1]);
    if (first) t.kind = f.kind;
    first = false;
    f.values.reserve(row.size() - 2);
    for (std::size_t k = 2; k < row.size(); ++k) f.values.push_back(detail::to_double(row[k], path));
    f.k_max = f.kind == FeatureKind::QC ? 0 : f.values.size();
    t.vectors.push_back(std::move(f));
  }
  return t;
}

struct ExtractReport {
  std::size_t parsed = 0;
  std::vector<std::string> discarded_missing;
  std::vector<DroppedSeries> dropped;
  std::size_t kept = 0;
  std::size_t k_max = 0;
  std::size_t rejected_rows = 0;
};

inline ExtractReport cmd_extract(const PipelineConfig& config, const RunOptions& options = {}) {
  config.validate();
  std::ifstream in(config.input);
  if (!in) throw DataError("cannot open input " + config.input);
  auto parsed = parse_readings(in);
  for (const auto& w : parsed.warnings) *options.log << "warning: " << w << '\n';

  ExtractReport report;
  report.parsed = parsed.series.size();
  report.rejected_rows = parsed.rejected.size();
  auto split = filter_by_missingness(std::move(parsed.series), config.missing_threshold);
  for (const auto& s : split.discarded) report.discarded_missing.push_back(s.meter_id);

  auto ex = extract_features(split.kept, config, options.threads);
  for (const auto& w : ex.warnings) *options.log << "warning: " << w << '\n';
  for (const auto& d : ex.dropped) *options.log << "dropped " << d.meter_id << ": " << d.reason << '\n';
  report.dropped = ex.dropped;
  report.kept = ex.ac.size();
  report.k_max = ex.k_max;
  if (split.kept.empty()) throw DataError("every series exceeded the missing-data threshold");
  const double drop_rate = static_cast<double>(ex.dropped.size()) / static_cast<double>(split.kept.size());
  if (drop_rate > config.max_drop_fraction)
    throw DataError("extraction failed for " + std::to_string(ex.dropped.size()) + " of " +
                    std::to_string(split.kept.size()) + " series");

  const fs::path dir = config.out_dir;
  const auto hash = config.hash();
  std::vector<std::string> files;
  for (const auto kind : kAllKinds) {
    const auto path = features_path(dir, kind);
    auto out = detail::open_out(path);
    write_features_csv(out, ex.of(kind), hash);
    files.push_back(path.filename().string());
    if (config.binary_features) {
      const auto bin = dir / ("features_" + method_tag(kind) + ".bin");
      write_features_binary(bin, ex.of(kind), hash);
      files.push_back(bin.filename().string());
      files.push_back(bin.filename().string() + ".json");
    }
  }
  {
    auto out = detail::open_out(dir / "labels.csv");
    out << "# config_hash=" << hash << "\nmeter_id,acorn_group\n";
    std::set<std::string> kept_ids;
    for (const auto& f : ex.ac) kept_ids.insert(f.meter_id);
    for (const auto& s : split.kept)
      if (kept_ids.count(s.meter_id)) out << s.meter_id << ',' << s.external_label.value_or("") << '\n';
    files.push_back("labels.csv");
  }
  {
    auto out = detail::open_out(dir / "rejected_rows.csv");
    out << "# config_hash=" << hash << '\n';
    write_rejected(out, parsed.rejected);
    files.push_back("rejected_rows.csv");
  }
  json dropped = json::array();
  for (const auto& d : ex.dropped) dropped.push_back({{"meter_id", d.meter_id}, {"reason", d.reason}});
  detail::write_json(dir / "extract_report.json", {{"config_hash", hash},
                                                    {"series_parsed", report.parsed},
                                                    {"rejected_rows", report.rejected_rows},
                                                    {"discarded_missing", report.discarded_missing},
                                                    {"dropped", dropped},
                                                    {"series_kept", report.kept},
                                                    {"k_max", report.k_max},
                                                    {"widths",
                                                     {{"AC", ex.ac.empty() ? 0 : ex.ac.front().size()},
                                                      {"PAC", ex.pac.empty() ? 0 : ex.pac.front().size()},
                                                      {"QC", ex.qc.empty() ? 0 : ex.qc.front().size()}}}});
  files.push_back("extract_report.json");
  detail::write_config_copy(dir, config);
  files.push_back("config.txt");
  detail::record_outputs(dir, "extract", hash, files);
  return report;
}

// ---------------------------------------------------------------------------
// Clustering

struct ClusterResult {
  Dendrogram dendrogram;
  Partition partition;
  std::vector<std::string> meter_ids;
};

inline Partition apply_cut(const Dendrogram& d, const CutSpec& cut) {
  switch (cut.mode) {
    case CutSpec::Mode::K: return cut_k(d, cut.k);
    case CutSpec::Mode::Height: return cut_height(d, cut.height);
    case CutSpec::Mode::None: break;
  }
  throw std::invalid_argument("no cut given: set k=<count> or height=<value> for this method");
}

inline void write_dendrogram_csv(std::ostream& out, const Dendrogram& d, const std::string& hash) {
  out << "# config_hash=" << hash << "\nmerge_index,left,right,height,size\n";
  for (std::size_t k = 0; k < d.merges.size(); ++k) {
    const auto& m = d.merges[k];
    out << k << ',' << m.left << ',' << m.right << ',' << format_double(m.height) << ',' << m.size << '\n';
  }
}

inline void write_partition_csv(std::ostream& out, const Partition& p, std::span<const std::string> ids,
                                const std::string& hash) {
  out << "# config_hash=" << hash << "\nmeter_id,cluster,atypical\n";
  for (std::size_t i = 0; i < p.labels.size(); ++i)
    out << ids[i] << ',' << p.labels[i] << ',' << (p.is_atypical(p.labels[i]) ? 1 : 0) << '\n';
}

struct PartitionTable {
  Partition partition;
  std::vector<std::string> meter_ids;
  std::string config_hash;
};

inline PartitionTable read_partition(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("missing partition file " + path.string() + " (run `cluster` first)");
  const auto csv = detail::read_csv(path);
  if (csv.header != std::vector<std::string>{"meter_id", "cluster", "atypical"})
    throw DataError(path.string() + ": expected header meter_id,cluster,atypical");
  PartitionTable t;
  t.config_hash = csv.config_hash;
  std::map<std::size_t, bool> flags;
  for (const auto& row : csv.rows) {
    if (row.size() != 3) throw DataError(path.string() + ": bad row");
    t.meter_ids.push_back(row[0]);
    const auto c = detail::to_size(row[1], path);
    t.partition.labels.push_back(c);
    flags[c] = row[2] == "1";
  }
  t.partition.k = flags.empty() ? 0 : flags.rbegin()->first + 1;
  t.partition.atypical.assign(t.partition.k, 0);
  for (const auto& [c, a] : flags) t.partition.atypical[c] = a ? 1 : 0;
  return t;
}

inline ClusterResult cluster_features(std::span<const FeatureVector> features, const PipelineConfig& config,
                                      FeatureKind kind, std::size_t threads = 1,
                                      std::optional<fs::path> mapped_path = std::nullopt) {
  MatrixOptions mo;
  mo.threads = threads;
  mo.standardize = config.standardize;
  mo.mmap_threshold = config.mmap_threshold;
  mo.mapped_path = std::move(mapped_path);
  auto matrix = build_matrix(features, mo);
  ClusterResult r;
  r.meter_ids = matrix.meter_ids();
  const auto n = matrix.n();
  r.dendrogram = agglomerate(std::move(matrix).take_data(), n, config.linkage);
  r.partition = flag_atypical(apply_cut(r.dendrogram, config.cut_for(kind)), config.atypical_fraction);
  return r;
}

inline ClusterResult cmd_cluster(const PipelineConfig& config, FeatureKind kind, const RunOptions& options = {}) {
  config.validate();
  if (config.cut_for(kind).mode == CutSpec::Mode::None)
    throw std::invalid_argument("no cut given for " + std::string(to_string(kind)) + ": set cut_" + method_tag(kind) +
                                " to k=<count> or height=<value>");
  const fs::path dir = config.out_dir;
  const auto table = read_features(features_path(dir, kind));
  const auto hash = config.hash();
  std::vector<std::string> files;

  MatrixOptions mo;
  mo.threads = options.threads;
  mo.standardize = config.standardize;
  mo.mmap_threshold = config.mmap_threshold;
  if (config.persist_matrix) mo.mapped_path = matrix_path(dir, kind);
  auto matrix = build_matrix(table.vectors, mo);
  if (config.persist_matrix) {
    if (!matrix.is_mapped()) write_matrix(matrix_path(dir, kind), matrix);
    auto side = matrix_sidecar(matrix);
    side["config_hash"] = hash;
    detail::write_json(fs::path(matrix_path(dir, kind).string() + ".json"), side);
    files.push_back(matrix_path(dir, kind).filename().string());
    files.push_back(matrix_path(dir, kind).filename().string() + ".json");
  }

  ClusterResult r;
  r.meter_ids = matrix.meter_ids();
  const auto n = matrix.n();
  r.dendrogram = agglomerate(std::move(matrix).take_data(), n, config.linkage);
  r.partition = flag_atypical(apply_cut(r.dendrogram, config.cut_for(kind)), config.atypical_fraction);

  const auto tag = method_tag(kind);
  {
    auto out = detail::open_out(dir / ("dendrogram_" + tag + ".csv"));
    write_dendrogram_csv(out, r.dendrogram, hash);
    files.push_back("dendrogram_" + tag + ".csv");
  }
  {
    auto out = detail::open_out(partition_path(dir, kind));
    write_partition_csv(out, r.partition, r.meter_ids, hash);
    files.push_back(partition_path(dir, kind).filename().string());
  }
  const auto sizes = r.partition.sizes();
  json clusters = json::array();
  for (std::size_t c = 0; c < r.partition.k; ++c)
    clusters.push_back({{"cluster", c}, {"size", sizes[c]}, {"atypical", r.partition.is_atypical(c)}});
  detail::write_json(dir / ("cluster_summary_" + tag + ".json"),
                     {{"config_hash", hash},
                      {"method", std::string(to_string(kind))},
                      {"linkage", std::string(to_string(config.linkage))},
                      {"cut", config.cut_for(kind).str()},
                      {"n", n},
                      {"k", r.partition.k},
                      {"typical_clusters", r.partition.typical_count()},
                      {"atypical_fraction", config.atypical_fraction},
                      {"clusters", clusters}});
  files.push_back("cluster_summary_" + tag + ".json");
  detail::write_config_copy(dir, config);
  detail::record_outputs(dir, "cluster", hash, files);
  return r;
}

// ---------------------------------------------------------------------------
// Evaluation

namespace detail {

inline void check_hashes(const std::map<std::string, std::string>& hashes, bool force) {
  std::set<std::string> distinct;
  for (const auto& [file, h] : hashes) distinct.insert(h);
  if (distinct.size() <= 1 || force) return;
  std::string msg = "inputs were produced by different configurations:";
  for (const auto& [file, h] : hashes) msg += " " + file + "=" + (h.empty() ? "<none>" : h);
  throw DataError(msg + " (use --force to proceed anyway)");
}

inline std::map<std::string, std::optional<std::string>> read_labels(const fs::path& path, std::string& hash) {
  const auto csv = read_csv(path);
  hash = csv.config_hash;
  std::map<std::string, std::optional<std::string>> out;
  for (const auto& row : csv.rows) {
    std::optional<std::string> label;
    if (row.size() >= 2 && !row[1].empty()) label = row[1];
    out[row[0]] = label;
  }
  return out;
}

inline CondensedMatrix matrix_for(const fs::path& dir, FeatureKind kind, const FeatureTable& features,
                                  const PipelineConfig& config, std::size_t threads) {
  const auto path = matrix_path(dir, kind);
  if (fs::exists(path)) {
    std::vector<std::string> ids;
    for (const auto& f : features.vectors) ids.push_back(f.meter_id);
    auto m = read_matrix(path, ids);
    if (m.n() == ids.size()) return m;
  }
  MatrixOptions mo;
  mo.threads = threads;
  mo.standardize = config.standardize;
  return build_matrix(features.vectors, mo);
}

}  // namespace detail

struct EvaluateSummary {
  std::map<std::string, double> ari;  // "QC-AC" -> value
  std::map<std::string, ChiSquaredResult> chi_squared;
};

inline EvaluateSummary cmd_evaluate(const PipelineConfig& config, std::span<const FeatureKind> methods,
                                    const RunOptions& options = {}) {
  config.validate();
  if (methods.empty()) throw std::invalid_argument("evaluate needs at least one method");
  const fs::path dir = config.out_dir;
  const auto hash = config.hash();

  std::map<std::string, std::string> hashes;
  std::vector<PartitionTable> parts;
  std::vector<FeatureTable> feats;
  for (const auto kind : methods) {
    parts.push_back(read_partition(partition_path(dir, kind)));
    hashes[partition_path(dir, kind).filename().string()] = parts.back().config_hash;
    feats.push_back(read_features(features_path(dir, kind)));
    hashes[features_path(dir, kind).filename().string()] = feats.back().config_hash;
    if (feats.back().vectors.size() != parts.back().meter_ids.size())
      throw DataError("features and partition for " + std::string(to_string(kind)) + " cover different series");
  }
  std::map<std::string, std::optional<std::string>> labels;
  if (options.chi_squared) {
    const auto path = dir / "labels.csv";
    if (!fs::exists(path)) throw DataError("label file " + path.string() + " is missing; chi-squared tests need it");
    std::string label_hash;
    labels = detail::read_labels(path, label_hash);
    hashes["labels.csv"] = label_hash;
  }
  detail::check_hashes(hashes, options.force);

  std::map<std::string, LoadSeries> loads;
  {
    std::ifstream in(config.input);
    if (!in) throw DataError("cannot open input " + config.input + " (needed for medoid profiles)");
    for (auto& s : parse_readings(in).series) loads.emplace(s.meter_id, std::move(s));
  }

  EvaluateSummary summary;
  json report{{"config_hash", hash}, {"methods", json::array()}};
  std::vector<std::string> files;
  for (const auto kind : methods) report["methods"].push_back(std::string(to_string(kind)));

  json ari = json::object();
  for (std::size_t a = 0; a < methods.size(); ++a)
    for (std::size_t b = a + 1; b < methods.size(); ++b) {
      if (parts[a].meter_ids != parts[b].meter_ids)
        throw DataError("partitions for " + std::string(to_string(methods[a])) + " and " +
                        std::string(to_string(methods[b])) + " cover different series");
      const auto key = std::string(to_string(methods[a])) + "-" + std::string(to_string(methods[b]));
      const double v = adjusted_rand_index(parts[a].partition, parts[b].partition);
      summary.ari[key] = v;
      ari[key] = v;
    }
  report["ari"] = ari;

  json chi = json::object();
  json medoid_report = json::object();
  for (std::size_t m = 0; m < methods.size(); ++m) {
    const auto kind = methods[m];
    const auto tag = method_tag(kind);
    const auto& part = parts[m];
    const auto& ids = part.meter_ids;

    if (options.chi_squared) {
      std::vector<std::optional<std::string>> lab(ids.size());
      for (std::size_t i = 0; i < ids.size(); ++i) {
        const auto it = labels.find(ids[i]);
        if (it != labels.end()) lab[i] = it->second;
      }
      const auto table = contingency_table(part.partition, lab, ids, config.include_atypical);
      auto out = detail::open_out(dir / ("contingency_" + tag + ".csv"));
      out << "# config_hash=" << hash << "\ncluster";
      for (const auto& c : table.cols) out << ',' << c;
      out << '\n';
      for (std::size_t r = 0; r < table.rows.size(); ++r) {
        out << table.rows[r];
        for (const auto v : table.counts[r]) out << ',' << v;
        out << '\n';
      }
      files.push_back("contingency_" + tag + ".csv");
      const auto res = chi_squared_test(table);
      summary.chi_squared[std::string(to_string(kind))] = res;
      chi[std::string(to_string(kind))] = {{"statistic", res.statistic},
                                           {"df", res.df},
                                           {"p_value", res.p_value},
                                           {"low_expected_cells", res.low_expected_cells}};
      if (res.low_expected_cells)
        *options.log << "warning: " << to_string(kind) << " table has " << res.low_expected_cells
                     << " cells with expected count below 5\n";
    }

    const auto matrix = detail::matrix_for(dir, kind, feats[m], config, options.threads);
    const auto medoids = cluster_medoids(part.partition, matrix, options.threads);
    const auto sizes = part.partition.sizes();
    json med = json::array();
    auto prof = detail::open_out(dir / ("profiles_" + tag + ".csv"));
    prof << "# config_hash=" << hash << "\ncluster,medoid,slot,kwh\n";
    for (std::size_t c = 0; c < part.partition.k; ++c) {
      if (sizes[c] == 0 || (!config.include_atypical && part.partition.is_atypical(c))) continue;
      const auto& id = ids[medoids[c]];
      med.push_back({{"cluster", c}, {"size", sizes[c]}, {"medoid", id}});
      const auto it = loads.find(id);
      if (it == loads.end()) throw DataError("medoid " + id + " is not present in " + config.input);
      const auto profile = hourly_profile(it->second, config.profile_slots);
      for (std::size_t s = 0; s < profile.size(); ++s) {
        prof << c << ',' << id << ',' << s << ',';
        if (profile[s]) prof << format_double(*profile[s]);
        prof << '\n';
      }
    }
    medoid_report[std::string(to_string(kind))] = med;
    files.push_back("profiles_" + tag + ".csv");

    const auto means = cluster_feature_means(feats[m].vectors, part.partition, config.include_atypical);
    auto fm = detail::open_out(dir / ("feature_means_" + tag + ".csv"));
    fm << "# config_hash=" << hash << "\ncluster,size";
    const auto names =
        feature_names(kind, feats[m].vectors.empty() ? 0 : feats[m].vectors.front().size(), config);
    for (const auto& n : names) fm << ',' << n;
    fm << '\n';
    for (const auto& cm : means) {
      fm << cm.cluster << ',' << cm.size;
      for (const auto v : cm.mean) fm << ',' << format_double(v);
      fm << '\n';
    }
    files.push_back("feature_means_" + tag + ".csv");
  }
  if (options.chi_squared) report["chi_squared"] = chi;
  report["medoids"] = medoid_report;
  detail::write_json(dir / "evaluate_summary.json", report);
  files.push_back("evaluate_summary.json");
  detail::write_config_copy(dir, config);
  detail::record_outputs(dir, "evaluate", hash, files);
  return summary;
}

// ---------------------------------------------------------------------------
// Cluster explanation

struct ImportanceResult {
  std::vector<double> importance;
  std::vector<std::string> names;
  CrossValidation cv;
  DecisionTree tree;
};

// Trains on the non-atypical members of `partition` only.
inline ImportanceResult explain_partition(std::span<const FeatureVector> features, const Partition& partition,
                                          const PipelineConfig& config, FeatureKind kind, std::size_t threads = 1) {
  if (partition.typical_count() < 2) throw DataError("need at least two non-atypical clusters to explain");
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < partition.labels.size(); ++i)
    if (!partition.is_atypical(partition.labels[i])) rows.push_back(i);
  const std::size_t dim = features.front().size();
  FeatureMatrix X(rows.size(), dim);
  std::vector<std::size_t> y(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::copy(features[rows[r]].values.begin(), features[rows[r]].values.end(),
              X.data.begin() + static_cast<std::ptrdiff_t>(r * dim));
    y[r] = partition.labels[rows[r]];
  }
  ImportanceResult res;
  res.names = feature_names(kind, dim, config);
  res.tree = fit_tree(X, y, config.tree);
  res.importance = config.importance_mode == ImportanceMode::Impurity
                       ? predictor_importance(res.tree)
                       : permutation_importance(res.tree, X, y, config.seed);
  res.cv = cv_misclassification(X, y, config.cv_folds, config.tree, config.seed, threads);
  return res;
}

inline ImportanceResult cmd_importance(const PipelineConfig& config, FeatureKind kind, const RunOptions& options = {}) {
  config.validate();
  const fs::path dir = config.out_dir;
  const auto feats = read_features(features_path(dir, kind));
  const auto part = read_partition(partition_path(dir, kind));
  detail::check_hashes({{features_path(dir, kind).filename().string(), feats.config_hash},
                        {partition_path(dir, kind).filename().string(), part.config_hash}},
                       options.force);
  for (std::size_t i = 0; i < feats.vectors.size(); ++i)
    if (i >= part.meter_ids.size() || feats.vectors[i].meter_id != part.meter_ids[i])
      throw DataError("features and partition list different series");

  auto res = explain_partition(feats.vectors, part.partition, config, kind, options.threads);
  for (const auto& w : res.cv.warnings) *options.log << "warning: " << w << '\n';

  const auto hash = config.hash();
  const auto tag = method_tag(kind);
  std::vector<std::string> files;
  {
    auto out = detail::open_out(dir / ("importance_" + tag + ".csv"));
    out << "# config_hash=" << hash << "\nfeature_index,feature_name,importance\n";
    for (std::size_t f = 0; f < res.importance.size(); ++f)
      out << f << ',' << res.names[f] << ',' << format_double(res.importance[f]) << '\n';
    files.push_back("importance_" + tag + ".csv");
  }
  auto tree_json = tree_to_json(res.tree, res.names);
  tree_json["config_hash"] = hash;
  detail::write_json(dir / ("tree_" + tag + ".json"), tree_json);
  files.push_back("tree_" + tag + ".json");

  const auto top = static_cast<std::size_t>(std::max_element(res.importance.begin(), res.importance.end()) -
                                            res.importance.begin());
  detail::write_json(dir / ("importance_summary_" + tag + ".json"),
                     {{"config_hash", hash},
                      {"method", std::string(to_string(kind))},
                      {"importance_mode",
                       config.importance_mode == ImportanceMode::Impurity ? "impurity" : "permutation"},
                      {"samples", res.cv.fold_of.size()},
                      {"cv_folds", config.cv_folds},
                      {"cv_misclassified", res.cv.misclassified},
                      {"cv_error", res.cv.error},
                      {"tree_depth", res.tree.depth()},
                      {"tree_leaves", res.tree.leaf_count()},
                      {"top_feature", res.names[top]}});
  files.push_back("importance_summary_" + tag + ".json");
  detail::write_config_copy(dir, config);
  detail::record_outputs(dir, "importance", hash, files);
  return res;
}

// ---------------------------------------------------------------------------
// Synthetic populations

inline SynthPopulation cmd_synth(const SynthParams& params, const fs::path& output) {
  auto pop = generate_population(params);
  {
    auto out = detail::open_out(output);
    write_readings(out, pop.series);
  }
  auto truth = detail::open_out(fs::path(output.string() + ".truth.csv"));
  truth << "meter_id,process,degenerate\n";
  std::set<std::string> degenerate(pop.degenerate.begin(), pop.degenerate.end());
  static const char* names[] = {"ar1", "seasonal_ma", "threshold"};
  for (std::size_t i = 0; i < pop.series.size(); ++i)
    truth << pop.series[i].meter_id << ',' << names[pop.truth[i]] << ',' << degenerate.count(pop.series[i].meter_id)
          << '\n';
  return pop;
}

}  // namespace qclust
