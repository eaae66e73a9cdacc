#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "qclust/error.hpp"
#include "qclust/parallel.hpp"

namespace qclust {

// Dense row-major sample-by-feature matrix.
struct FeatureMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  FeatureMatrix() = default;
  FeatureMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
  std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }

  FeatureMatrix select_rows(std::span<const std::size_t> idx) const {
    FeatureMatrix out(idx.size(), cols);
    for (std::size_t r = 0; r < idx.size(); ++r)
      std::copy_n(data.begin() + static_cast<std::ptrdiff_t>(idx[r] * cols), cols,
                  out.data.begin() + static_cast<std::ptrdiff_t>(r * cols));
    return out;
  }
};

struct TreeParams {
  std::size_t max_depth = 12;
  std::size_t min_leaf = 5;
  double min_impurity_decrease = 1e-4;
};

struct TreeNode {
  // Internal nodes have feature >= 0; samples with x[feature] <= threshold go left.
  int feature = -1;
  double threshold = 0.0;
  std::size_t left = 0;
  std::size_t right = 0;
  std::size_t label = 0;  // majority class, ties to the smaller id
  std::vector<std::size_t> class_counts;
  std::size_t samples = 0;
  double impurity = 0.0;
  double weighted_decrease = 0.0;  // (samples / N) * Gini decrease of the split

  bool is_leaf() const { return feature < 0; }
};

class DecisionTree {
 public:
  std::vector<TreeNode> nodes;
  std::size_t n_features = 0;
  std::size_t n_classes = 0;
  TreeParams params;

  std::size_t predict(std::span<const double> x) const {
    if (x.size() != n_features)
      throw std::invalid_argument("predict: expected " + std::to_string(n_features) + " features, got " +
                                  std::to_string(x.size()));
    std::size_t i = 0;
    while (!nodes[i].is_leaf()) {
      const auto& nd = nodes[i];
      i = x[static_cast<std::size_t>(nd.feature)] <= nd.threshold ? nd.left : nd.right;
    }
    return nodes[i].label;
  }

  std::size_t depth() const { return depth_from(0); }
  std::size_t leaf_count() const {
    return static_cast<std::size_t>(std::count_if(nodes.begin(), nodes.end(), [](const TreeNode& n) { return n.is_leaf(); }));
  }

 private:
  std::size_t depth_from(std::size_t i) const {
    if (nodes[i].is_leaf()) return 0;
    return 1 + std::max(depth_from(nodes[i].left), depth_from(nodes[i].right));
  }
};

namespace detail {

inline double gini_from(double sum_sq, double n) { return n > 0.0 ? 1.0 - sum_sq / (n * n) : 0.0; }

inline std::size_t majority(const std::vector<std::size_t>& counts) {
  return static_cast<std::size_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

struct SplitChoice {
  int feature = -1;
  double threshold = 0.0;
  double gain = 0.0;
};

class TreeBuilder {
 public:
  TreeBuilder(const FeatureMatrix& X, std::span<const std::size_t> y, std::size_t n_classes, const TreeParams& params)
      : X_(X), y_(y), n_classes_(n_classes), params_(params), total_(static_cast<double>(y.size())) {}

  DecisionTree build() {
    DecisionTree tree;
    tree.n_features = X_.cols;
    tree.n_classes = n_classes_;
    tree.params = params_;
    std::vector<std::size_t> idx(y_.size());
    std::iota(idx.begin(), idx.end(), 0);
    grow(tree, idx, 0);
    return tree;
  }

 private:
  std::size_t grow(DecisionTree& tree, std::vector<std::size_t>& idx, std::size_t depth) {
    const std::size_t id = tree.nodes.size();
    tree.nodes.emplace_back();
    TreeNode node;
    node.samples = idx.size();
    node.class_counts.assign(n_classes_, 0);
    for (const auto i : idx) ++node.class_counts[y_[i]];
    double sq = 0.0;
    for (const auto c : node.class_counts) sq += static_cast<double>(c) * static_cast<double>(c);
    node.impurity = gini_from(sq, static_cast<double>(idx.size()));
    node.label = majority(node.class_counts);

    const bool can_split = depth < params_.max_depth && idx.size() >= 2 * std::max<std::size_t>(params_.min_leaf, 1) &&
                           node.impurity > 0.0;
    SplitChoice split;
    if (can_split) split = best_split(idx, node);
    const double needed = std::max(params_.min_impurity_decrease, 1e-12);
    if (split.feature < 0 || split.gain < needed) {
      tree.nodes[id] = std::move(node);
      return id;
    }

    std::vector<std::size_t> left, right;
    for (const auto i : idx) (X_(i, static_cast<std::size_t>(split.feature)) <= split.threshold ? left : right).push_back(i);
    idx.clear();
    idx.shrink_to_fit();
    node.feature = split.feature;
    node.threshold = split.threshold;
    node.weighted_decrease = split.gain;
    tree.nodes[id] = std::move(node);
    const auto l = grow(tree, left, depth + 1);
    const auto r = grow(tree, right, depth + 1);
    tree.nodes[id].left = l;
    tree.nodes[id].right = r;
    return id;
  }

  // Scans every feature and every midpoint between consecutive distinct
  // values. Strict improvement is required to replace the incumbent, so ties
  // go to the smaller feature index and then the smaller threshold.
  SplitChoice best_split(const std::vector<std::size_t>& idx, const TreeNode& node) const {
    const std::size_t m = idx.size();
    const double md = static_cast<double>(m);
    const std::size_t min_leaf = std::max<std::size_t>(params_.min_leaf, 1);
    SplitChoice best;
    std::vector<std::pair<double, std::size_t>> order(m);
    std::vector<std::size_t> left_counts(n_classes_);
    for (std::size_t f = 0; f < X_.cols; ++f) {
      for (std::size_t r = 0; r < m; ++r) order[r] = {X_(idx[r], f), y_[idx[r]]};
      std::sort(order.begin(), order.end());
      std::fill(left_counts.begin(), left_counts.end(), 0);
      double sq_left = 0.0;
      double sq_right = 0.0;
      for (const auto c : node.class_counts) sq_right += static_cast<double>(c) * static_cast<double>(c);
      for (std::size_t r = 0; r + 1 < m; ++r) {
        const std::size_t cls = order[r].second;
        const double cl = static_cast<double>(left_counts[cls]);
        const double cr = static_cast<double>(node.class_counts[cls] - left_counts[cls]);
        sq_left += 2.0 * cl + 1.0;
        sq_right -= 2.0 * cr - 1.0;
        ++left_counts[cls];
        const std::size_t n_left = r + 1;
        if (order[r].first == order[r + 1].first) continue;
        if (n_left < min_leaf || m - n_left < min_leaf) continue;
        const double nl = static_cast<double>(n_left);
        const double nr = md - nl;
        const double child = (nl / md) * gini_from(sq_left, nl) + (nr / md) * gini_from(sq_right, nr);
        const double gain = (md / total_) * (node.impurity - child);
        if (gain > best.gain) {
          double thr = 0.5 * (order[r].first + order[r + 1].first);
          if (!(thr < order[r + 1].first)) thr = order[r].first;
          best = {static_cast<int>(f), thr, gain};
        }
      }
    }
    return best;
  }

  const FeatureMatrix& X_;
  std::span<const std::size_t> y_;
  std::size_t n_classes_;
  TreeParams params_;
  double total_;
};

}  // namespace detail

// Greedy binary CART with Gini impurity.
inline DecisionTree fit_tree(const FeatureMatrix& X, std::span<const std::size_t> y, const TreeParams& params = {}) {
  if (X.rows == 0 || y.empty()) throw DataError("fit_tree: empty training data");
  if (X.rows != y.size()) throw std::invalid_argument("fit_tree: feature rows and labels differ in count");
  for (const double v : X.data)
    if (!std::isfinite(v)) throw DataError("fit_tree: non-finite feature value");
  const std::size_t n_classes = *std::max_element(y.begin(), y.end()) + 1;
  return detail::TreeBuilder(X, y, n_classes, params).build();
}

inline double training_error(const DecisionTree& tree, const FeatureMatrix& X, std::span<const std::size_t> y) {
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < X.rows; ++i) wrong += tree.predict(X.row(i)) != y[i];
  return X.rows ? static_cast<double>(wrong) / static_cast<double>(X.rows) : 0.0;
}

// Total weighted impurity decrease per feature, normalized to sum to one
// (all zeros for a single-leaf tree).
inline std::vector<double> predictor_importance(const DecisionTree& tree) {
  std::vector<double> out(tree.n_features, 0.0);
  for (const auto& nd : tree.nodes)
    if (!nd.is_leaf()) out[static_cast<std::size_t>(nd.feature)] += nd.weighted_decrease;
  double total = 0.0;
  for (const auto v : out) total += v;
  if (total > 0.0)
    for (auto& v : out) v /= total;
  return out;
}

// Error increase when one feature column of (X, y) is shuffled, floored at
// zero and normalized like predictor_importance.
inline std::vector<double> permutation_importance(const DecisionTree& tree, const FeatureMatrix& X,
                                                  std::span<const std::size_t> y, std::uint64_t seed,
                                                  std::size_t repeats = 5) {
  const double base = training_error(tree, X, y);
  std::vector<double> out(tree.n_features, 0.0);
  std::mt19937_64 rng(seed);
  FeatureMatrix shuffled = X;
  std::vector<double> column(X.rows);
  for (std::size_t f = 0; f < X.cols; ++f) {
    double increase = 0.0;
    for (std::size_t r = 0; r < repeats; ++r) {
      for (std::size_t i = 0; i < X.rows; ++i) column[i] = X(i, f);
      std::shuffle(column.begin(), column.end(), rng);
      for (std::size_t i = 0; i < X.rows; ++i) shuffled(i, f) = column[i];
      increase += training_error(tree, shuffled, y) - base;
    }
    for (std::size_t i = 0; i < X.rows; ++i) shuffled(i, f) = X(i, f);
    out[f] = std::max(0.0, increase / static_cast<double>(repeats));
  }
  double total = 0.0;
  for (const auto v : out) total += v;
  if (total > 0.0)
    for (auto& v : out) v /= total;
  return out;
}

struct CrossValidation {
  double error = 0.0;
  std::size_t misclassified = 0;
  std::vector<std::size_t> fold_of;  // per sample
  std::vector<std::string> warnings;
};

// Stratified k-fold assignment: each class is shuffled and dealt round-robin,
// continuing the rotation from one class to the next.
inline std::vector<std::size_t> stratified_folds(std::span<const std::size_t> y, std::size_t folds, std::uint64_t seed) {
  const std::size_t n_classes = y.empty() ? 0 : *std::max_element(y.begin(), y.end()) + 1;
  std::vector<std::vector<std::size_t>> by_class(n_classes);
  for (std::size_t i = 0; i < y.size(); ++i) by_class[y[i]].push_back(i);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> fold_of(y.size(), 0);
  std::size_t next = 0;
  for (auto& members : by_class) {
    std::shuffle(members.begin(), members.end(), rng);
    for (const auto i : members) fold_of[i] = next++ % folds;
  }
  return fold_of;
}

inline CrossValidation cv_misclassification(const FeatureMatrix& X, std::span<const std::size_t> y, std::size_t folds,
                                            const TreeParams& params = {}, std::uint64_t seed = 0,
                                            std::size_t threads = 1) {
  if (folds < 2) throw std::invalid_argument("cross-validation needs at least two folds");
  if (X.rows != y.size()) throw std::invalid_argument("cv_misclassification: rows and labels differ in count");
  if (X.rows < folds) throw DataError("cross-validation: fewer samples than folds");
  CrossValidation cv;
  {
    std::vector<std::size_t> per_class(*std::max_element(y.begin(), y.end()) + 1, 0);
    for (const auto c : y) ++per_class[c];
    for (std::size_t c = 0; c < per_class.size(); ++c)
      if (per_class[c] > 0 && per_class[c] < folds)
        cv.warnings.push_back("class " + std::to_string(c) + " has " + std::to_string(per_class[c]) +
                              " members, fewer than " + std::to_string(folds) + " folds");
  }
  cv.fold_of = stratified_folds(y, folds, seed);
  std::vector<std::size_t> wrong(folds, 0);
  parallel_for(folds, threads, [&](std::size_t f) {
    std::vector<std::size_t> train, test;
    for (std::size_t i = 0; i < y.size(); ++i) (cv.fold_of[i] == f ? test : train).push_back(i);
    if (test.empty() || train.empty()) return;
    const auto Xtr = X.select_rows(train);
    std::vector<std::size_t> ytr(train.size());
    for (std::size_t r = 0; r < train.size(); ++r) ytr[r] = y[train[r]];
    const auto tree = fit_tree(Xtr, ytr, params);
    for (const auto i : test) wrong[f] += tree.predict(X.row(i)) != y[i];
  });
  for (const auto w : wrong) cv.misclassified += w;
  cv.error = static_cast<double>(cv.misclassified) / static_cast<double>(X.rows);
  return cv;
}

inline nlohmann::json tree_to_json(const DecisionTree& tree, std::span<const std::string> feature_names = {}) {
  nlohmann::json nodes = nlohmann::json::array();
  for (std::size_t i = 0; i < tree.nodes.size(); ++i) {
    const auto& nd = tree.nodes[i];
    nlohmann::json j{{"id", i},
                     {"samples", nd.samples},
                     {"impurity", nd.impurity},
                     {"class", nd.label},
                     {"class_counts", nd.class_counts}};
    if (!nd.is_leaf()) {
      const auto f = static_cast<std::size_t>(nd.feature);
      j["feature"] = f;
      if (f < feature_names.size()) j["feature_name"] = feature_names[f];
      j["threshold"] = nd.threshold;
      j["left"] = nd.left;
      j["right"] = nd.right;
      j["weighted_decrease"] = nd.weighted_decrease;
    }
    nodes.push_back(std::move(j));
  }
  return {{"n_features", tree.n_features},
          {"n_classes", tree.n_classes},
          {"params",
           {{"max_depth", tree.params.max_depth},
            {"min_leaf", tree.params.min_leaf},
            {"min_impurity_decrease", tree.params.min_impurity_decrease}}},
          {"nodes", std::move(nodes)}};
}

}  // namespace qclust
