#pragma once

#include <charconv>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "qclust/features.hpp"
#include "qclust/hclust.hpp"
#include "qclust/ingest.hpp"
#include "qclust/preprocess.hpp"
#include "qclust/tree.hpp"

namespace qclust {

// How a dendrogram is cut: into k clusters or at a height.
struct CutSpec {
  enum class Mode { None, K, Height } mode = Mode::None;
  std::size_t k = 0;
  double height = 0.0;

  static CutSpec parse(std::string_view text) {
    CutSpec c;
    if (text.empty() || text == "none") return c;
    const auto eq = text.find('=');
    if (eq == std::string_view::npos) throw std::invalid_argument("cut must be k=<count> or height=<value>");
    const auto key = text.substr(0, eq);
    const auto val = std::string(text.substr(eq + 1));
    try {
      if (key == "k") {
        c.mode = Mode::K;
        c.k = std::stoul(val);
      } else if (key == "height") {
        c.mode = Mode::Height;
        c.height = std::stod(val);
      } else {
        throw std::invalid_argument("");
      }
    } catch (const std::exception&) {
      throw std::invalid_argument("cut must be k=<count> or height=<value>, got '" + std::string(text) + "'");
    }
    return c;
  }

  std::string str() const {
    switch (mode) {
      case Mode::None: return "";
      case Mode::K: return "k=" + std::to_string(k);
      case Mode::Height: return "height=" + format_double(height);
    }
    return "";
  }
};

enum class ImportanceMode { Impurity, Permutation };

struct PipelineConfig {
  std::string input;
  std::string out_dir = "out";

  ZeroPolicy zero_policy = ZeroPolicy::Missing;
  double log_floor = kDefaultFloorKwh;
  std::size_t max_gap = 3;
  double missing_threshold = 0.10;
  std::size_t period = kSlotsPerDay;

  std::size_t k_max = kDefaultMaxLag;
  bool select_k = false;
  std::size_t p_max = 120;
  std::vector<std::size_t> qc_lags{1};
  std::vector<double> qc_levels{0.1, 0.5, 0.9};
  double max_drop_fraction = 0.5;
  bool binary_features = false;

  Linkage linkage = Linkage::Complete;
  CutSpec cut_ac, cut_pac, cut_qc;
  double atypical_fraction = 0.01;
  bool standardize = false;
  bool persist_matrix = true;
  std::size_t mmap_threshold = 20000;

  std::size_t profile_slots = 48;
  bool include_atypical = false;

  TreeParams tree;
  ImportanceMode importance_mode = ImportanceMode::Impurity;
  std::size_t cv_folds = 10;
  std::uint64_t seed = 1;

  CutSpec& cut_for(FeatureKind kind) {
    return kind == FeatureKind::AC ? cut_ac : kind == FeatureKind::PAC ? cut_pac : cut_qc;
  }
  const CutSpec& cut_for(FeatureKind kind) const {
    return kind == FeatureKind::AC ? cut_ac : kind == FeatureKind::PAC ? cut_pac : cut_qc;
  }

  static const std::vector<std::string>& keys() {
    static const std::vector<std::string> k{
        "input",          "out_dir",        "zero_policy",       "log_floor",
        "max_gap",        "missing_threshold", "period",         "k_max",
        "select_k",       "p_max",          "qc_lags",           "qc_levels",
        "max_drop_fraction", "binary_features", "linkage",       "cut_ac",
        "cut_pac",        "cut_qc",         "atypical_fraction", "standardize",
        "persist_matrix", "mmap_threshold", "profile_slots",     "include_atypical",
        "tree_max_depth", "tree_min_leaf",  "tree_min_impurity_decrease", "importance_mode",
        "cv_folds",       "seed"};
    return k;
  }

  void set(std::string_view key, std::string_view value);
  std::string get(std::string_view key) const;

  void validate() const {
    auto require = [](bool ok, const char* what) {
      if (!ok) throw std::invalid_argument(std::string("invalid configuration: ") + what);
    };
    require(log_floor > 0.0, "log_floor must be positive");
    require(missing_threshold >= 0.0 && missing_threshold <= 1.0, "missing_threshold must lie in [0, 1]");
    require(period >= 1, "period must be at least 1");
    require(k_max >= 1, "k_max must be at least 1");
    require(p_max >= 1, "p_max must be at least 1");
    require(!qc_lags.empty(), "qc_lags must not be empty");
    for (const auto l : qc_lags) require(l >= 1, "qc_lags entries must be at least 1");
    require(!qc_levels.empty(), "qc_levels must not be empty");
    for (const auto q : qc_levels) require(q > 0.0 && q < 1.0, "qc_levels entries must lie in (0, 1)");
    require(max_drop_fraction >= 0.0 && max_drop_fraction <= 1.0, "max_drop_fraction must lie in [0, 1]");
    require(atypical_fraction >= 0.0 && atypical_fraction < 1.0, "atypical_fraction must lie in [0, 1)");
    require(profile_slots == 24 || profile_slots == 48, "profile_slots must be 24 or 48");
    require(tree.max_depth >= 1, "tree_max_depth must be at least 1");
    require(tree.min_leaf >= 1, "tree_min_leaf must be at least 1");
    require(tree.min_impurity_decrease >= 0.0, "tree_min_impurity_decrease must be non-negative");
    require(cv_folds >= 2, "cv_folds must be at least 2");
  }

  // Every key, one `key = value` line each, in a fixed order.
  std::string to_text() const {
    std::string out;
    for (const auto& k : keys()) out += k + " = " + get(k) + "\n";
    return out;
  }

  static PipelineConfig from_text(std::string_view text) {
    PipelineConfig c;
    std::size_t line_no = 0;
    while (!text.empty()) {
      const auto nl = text.find('\n');
      auto line = detail::trim(text.substr(0, nl));
      text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
      ++line_no;
      if (line.empty() || line.front() == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string_view::npos)
        throw std::invalid_argument("config line " + std::to_string(line_no) + ": expected key = value");
      c.set(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    }
    return c;
  }

  static PipelineConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot read config file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return from_text(ss.str());
  }

  // FNV-1a over every setting that can change an output; the output
  // directory is excluded so results can be relocated.
  std::string hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& k : keys()) {
      if (k == "out_dir") continue;
      for (const char ch : k + "=" + get(k) + "\n") {
        h ^= static_cast<unsigned char>(ch);
        h *= 0x100000001b3ULL;
      }
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
  }
};

namespace detail {

inline bool parse_bool(std::string_view v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw std::invalid_argument("expected a boolean, got '" + std::string(v) + "'");
}

template <typename T>
T parse_number(std::string_view v) {
  T out{};
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || res.ec != std::errc{} || res.ptr != v.data() + v.size())
    throw std::invalid_argument("expected a number, got '" + std::string(v) + "'");
  return out;
}

template <typename T>
std::vector<T> parse_list(std::string_view v) {
  std::vector<T> out;
  for (const auto part : split_csv(v))
    if (!part.empty()) out.push_back(parse_number<T>(part));
  return out;
}

template <typename T>
std::string join_list(const std::vector<T>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ',';
    if constexpr (std::is_floating_point_v<T>)
      out += format_double(xs[i]);
    else
      out += std::to_string(xs[i]);
  }
  return out;
}

}  // namespace detail

inline void PipelineConfig::set(std::string_view key, std::string_view value) {
  using namespace detail;
  try {
    if (key == "input") input = value;
    else if (key == "out_dir") out_dir = value;
    else if (key == "zero_policy") {
      if (value == "missing") zero_policy = ZeroPolicy::Missing;
      else if (value == "floor") zero_policy = ZeroPolicy::Floor;
      else throw std::invalid_argument("expected missing or floor");
    } else if (key == "log_floor") log_floor = parse_number<double>(value);
    else if (key == "max_gap") max_gap = parse_number<std::size_t>(value);
    else if (key == "missing_threshold") missing_threshold = parse_number<double>(value);
    else if (key == "period") period = parse_number<std::size_t>(value);
    else if (key == "k_max") k_max = parse_number<std::size_t>(value);
    else if (key == "select_k") select_k = parse_bool(value);
    else if (key == "p_max") p_max = parse_number<std::size_t>(value);
    else if (key == "qc_lags") qc_lags = parse_list<std::size_t>(value);
    else if (key == "qc_levels") qc_levels = parse_list<double>(value);
    else if (key == "max_drop_fraction") max_drop_fraction = parse_number<double>(value);
    else if (key == "binary_features") binary_features = parse_bool(value);
    else if (key == "linkage") linkage = parse_linkage(value);
    else if (key == "cut_ac") cut_ac = CutSpec::parse(value);
    else if (key == "cut_pac") cut_pac = CutSpec::parse(value);
    else if (key == "cut_qc") cut_qc = CutSpec::parse(value);
    else if (key == "atypical_fraction") atypical_fraction = parse_number<double>(value);
    else if (key == "standardize") standardize = parse_bool(value);
    else if (key == "persist_matrix") persist_matrix = parse_bool(value);
    else if (key == "mmap_threshold") mmap_threshold = parse_number<std::size_t>(value);
    else if (key == "profile_slots") profile_slots = parse_number<std::size_t>(value);
    else if (key == "include_atypical") include_atypical = parse_bool(value);
    else if (key == "tree_max_depth") tree.max_depth = parse_number<std::size_t>(value);
    else if (key == "tree_min_leaf") tree.min_leaf = parse_number<std::size_t>(value);
    else if (key == "tree_min_impurity_decrease") tree.min_impurity_decrease = parse_number<double>(value);
    else if (key == "importance_mode") {
      if (value == "impurity") importance_mode = ImportanceMode::Impurity;
      else if (value == "permutation") importance_mode = ImportanceMode::Permutation;
      else throw std::invalid_argument("expected impurity or permutation");
    } else if (key == "cv_folds") cv_folds = parse_number<std::size_t>(value);
    else if (key == "seed") seed = parse_number<std::uint64_t>(value);
    else throw std::invalid_argument("unknown key");
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument("config key '" + std::string(key) + "': " + e.what());
  }
}

inline std::string PipelineConfig::get(std::string_view key) const {
  using namespace detail;
  auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  if (key == "input") return input;
  if (key == "out_dir") return out_dir;
  if (key == "zero_policy") return zero_policy == ZeroPolicy::Missing ? "missing" : "floor";
  if (key == "log_floor") return format_double(log_floor);
  if (key == "max_gap") return std::to_string(max_gap);
  if (key == "missing_threshold") return format_double(missing_threshold);
  if (key == "period") return std::to_string(period);
  if (key == "k_max") return std::to_string(k_max);
  if (key == "select_k") return b(select_k);
  if (key == "p_max") return std::to_string(p_max);
  if (key == "qc_lags") return join_list(qc_lags);
  if (key == "qc_levels") return join_list(qc_levels);
  if (key == "max_drop_fraction") return format_double(max_drop_fraction);
  if (key == "binary_features") return b(binary_features);
  if (key == "linkage") return std::string(to_string(linkage));
  if (key == "cut_ac") return cut_ac.str();
  if (key == "cut_pac") return cut_pac.str();
  if (key == "cut_qc") return cut_qc.str();
  if (key == "atypical_fraction") return format_double(atypical_fraction);
  if (key == "standardize") return b(standardize);
  if (key == "persist_matrix") return b(persist_matrix);
  if (key == "mmap_threshold") return std::to_string(mmap_threshold);
  if (key == "profile_slots") return std::to_string(profile_slots);
  if (key == "include_atypical") return b(include_atypical);
  if (key == "tree_max_depth") return std::to_string(tree.max_depth);
  if (key == "tree_min_leaf") return std::to_string(tree.min_leaf);
  if (key == "tree_min_impurity_decrease") return format_double(tree.min_impurity_decrease);
  if (key == "importance_mode") return importance_mode == ImportanceMode::Impurity ? "impurity" : "permutation";
  if (key == "cv_folds") return std::to_string(cv_folds);
  if (key == "seed") return std::to_string(seed);
  throw std::invalid_argument("unknown config key '" + std::string(key) + "'");
}

}  // namespace qclust
