#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "qclust/dissimilarity.hpp"
#include "qclust/error.hpp"

namespace qclust {

enum class Linkage { Single, Complete, Average };

inline std::string_view to_string(Linkage linkage) {
  switch (linkage) {
    case Linkage::Single: return "single";
    case Linkage::Complete: return "complete";
    case Linkage::Average: return "average";
  }
  return "?";
}

inline Linkage parse_linkage(std::string_view text) {
  if (text == "single") return Linkage::Single;
  if (text == "complete") return Linkage::Complete;
  if (text == "average") return Linkage::Average;
  throw std::invalid_argument("unknown linkage '" + std::string(text) + "' (expected single, complete or average)");
}

// Merge k joins nodes `left` < `right` into node n + k.
struct Merge {
  std::size_t left = 0;
  std::size_t right = 0;
  double height = 0.0;
  std::size_t size = 0;
};

struct Dendrogram {
  std::size_t n = 0;
  std::vector<Merge> merges;  // sorted by height; ties keep discovery order
};

struct Partition {
  std::vector<std::size_t> labels;
  std::size_t k = 0;
  std::vector<std::uint8_t> atypical;  // per cluster id

  std::vector<std::size_t> sizes() const {
    std::vector<std::size_t> out(k, 0);
    for (const auto l : labels) ++out[l];
    return out;
  }
  std::size_t typical_count() const {
    return static_cast<std::size_t>(std::count(atypical.begin(), atypical.end(), 0));
  }
  bool is_atypical(std::size_t cluster) const { return !atypical.empty() && atypical[cluster] != 0; }
};

namespace detail {

// Lance-Williams update of d(a u b, c) from d(a, c) and d(b, c).
inline double lance_williams(Linkage linkage, double dac, double dbc, double na, double nb) {
  switch (linkage) {
    case Linkage::Single: return std::min(dac, dbc);
    case Linkage::Complete: return std::max(dac, dbc);
    case Linkage::Average: return (na * dac + nb * dbc) / (na + nb);
  }
  return dac;
}

struct RawMerge {
  std::size_t a, b;  // leaf representatives
  double height;
};

// Turns merges between leaf representatives into a dendrogram with node
// ids, ordered by height.
inline Dendrogram label_merges(std::size_t n, std::vector<RawMerge> raw) {
  std::stable_sort(raw.begin(), raw.end(), [](const RawMerge& x, const RawMerge& y) { return x.height < y.height; });
  std::vector<std::size_t> parent(n), node(n), size(n, 1);
  std::iota(parent.begin(), parent.end(), 0);
  std::iota(node.begin(), node.end(), 0);
  auto find = [&](std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  Dendrogram d{n, {}};
  d.merges.reserve(raw.size());
  for (std::size_t k = 0; k < raw.size(); ++k) {
    const auto ra = find(raw[k].a), rb = find(raw[k].b);
    const auto na = node[ra], nb = node[rb];
    const auto sz = size[ra] + size[rb];
    d.merges.push_back({std::min(na, nb), std::max(na, nb), raw[k].height, sz});
    parent[ra] = rb;
    size[rb] = sz;
    node[rb] = n + k;
  }
  return d;
}

}  // namespace detail

// Nearest-neighbour-chain agglomeration. Consumes the condensed distances,
// which are overwritten by the Lance-Williams updates.
inline Dendrogram agglomerate(std::vector<double> dist, std::size_t n, Linkage linkage = Linkage::Complete) {
  if (n < 2) throw DataError("agglomeration needs at least two series");
  if (dist.size() != condensed_size(n)) throw std::invalid_argument("condensed data has the wrong length");
  for (const double v : dist)
    if (!std::isfinite(v)) throw DataError("dissimilarity matrix contains non-finite entries");

  auto D = [&](std::size_t i, std::size_t j) -> double& {
    if (i > j) std::swap(i, j);
    return dist[condensed_index(n, i, j)];
  };

  // Active clusters form a doubly linked list over slots; slot s always
  // holds a cluster that contains leaf s.
  std::vector<std::size_t> succ(n + 1), pred(n + 1);
  for (std::size_t i = 0; i <= n; ++i) {
    succ[i] = i + 1;
    pred[i] = i == 0 ? n : i - 1;
  }
  std::size_t head = 0;
  auto deactivate = [&](std::size_t s) {
    if (s == head) {
      head = succ[s];
    } else {
      succ[pred[s]] = succ[s];
    }
    if (succ[s] < n) pred[succ[s]] = pred[s];
  };

  std::vector<double> size(n, 1.0);
  std::vector<std::size_t> chain;
  chain.reserve(n);
  std::vector<detail::RawMerge> raw;
  raw.reserve(n - 1);

  while (raw.size() < n - 1) {
    if (chain.empty()) chain.push_back(head);
    for (;;) {
      const std::size_t a = chain.back();
      const std::size_t prev = chain.size() >= 2 ? chain[chain.size() - 2] : n;
      // Nearest active neighbour; ties prefer the previous chain element,
      // then the smaller slot.
      std::size_t best = n;
      double best_d = std::numeric_limits<double>::infinity();
      if (prev < n) {
        best = prev;
        best_d = D(a, prev);
      }
      for (std::size_t c = head; c < n; c = succ[c]) {
        if (c == a || c == prev) continue;
        const double dc = D(a, c);
        if (dc < best_d || (dc == best_d && best != prev && c < best)) {
          best_d = dc;
          best = c;
        }
      }
      if (best == prev) break;
      chain.push_back(best);
    }

    const std::size_t a = chain.back();
    chain.pop_back();
    const std::size_t b = chain.back();
    chain.pop_back();
    const double height = D(a, b);
    raw.push_back({a, b, height});

    // The merged cluster lives in the larger slot.
    const std::size_t keep = std::max(a, b), drop = std::min(a, b);
    for (std::size_t c = head; c < n; c = succ[c]) {
      if (c == a || c == b) continue;
      D(keep, c) = detail::lance_williams(linkage, D(a, c), D(b, c), size[a], size[b]);
    }
    size[keep] = size[a] + size[b];
    deactivate(drop);
  }
  return detail::label_merges(n, std::move(raw));
}

inline Dendrogram agglomerate(const CondensedMatrix& matrix, Linkage linkage = Linkage::Complete) {
  return agglomerate(matrix.to_vector(), matrix.n(), linkage);
}

namespace detail {

// Labels clusters of the forest formed by the first `keep` merges; ids
// follow the smallest leaf of each cluster.
inline Partition partition_from_prefix(const Dendrogram& d, std::size_t keep) {
  const std::size_t n = d.n;
  std::vector<std::size_t> parent(n), rep(n + d.merges.size());
  std::iota(parent.begin(), parent.end(), 0);
  std::iota(rep.begin(), rep.begin() + static_cast<std::ptrdiff_t>(n), 0);
  auto find = [&](std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (std::size_t k = 0; k < keep; ++k) {
    const auto& m = d.merges[k];
    const auto ra = find(rep[m.left]), rb = find(rep[m.right]);
    parent[std::max(ra, rb)] = std::min(ra, rb);
    rep[n + k] = std::min(ra, rb);
  }
  Partition p;
  p.labels.assign(n, 0);
  std::vector<std::size_t> label_of(n, std::numeric_limits<std::size_t>::max());
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = find(i);
    if (label_of[r] == std::numeric_limits<std::size_t>::max()) label_of[r] = p.k++;
    p.labels[i] = label_of[r];
  }
  p.atypical.assign(p.k, 0);
  return p;
}

}  // namespace detail

// Severs the k - 1 highest merges.
inline Partition cut_k(const Dendrogram& d, std::size_t k) {
  if (k < 1 || k > d.n)
    throw std::invalid_argument("cluster count must lie in [1, " + std::to_string(d.n) + "], got " + std::to_string(k));
  return detail::partition_from_prefix(d, d.n - k);
}

// Keeps every merge at or below `height`.
inline Partition cut_height(const Dendrogram& d, double height) {
  if (!(height >= 0.0)) throw std::invalid_argument("cut height must be non-negative");
  std::size_t keep = 0;
  while (keep < d.merges.size() && d.merges[keep].height <= height) ++keep;
  return detail::partition_from_prefix(d, keep);
}

// Marks clusters holding fewer than min_fraction * n members.
inline Partition flag_atypical(Partition p, double min_fraction) {
  if (!(min_fraction >= 0.0 && min_fraction < 1.0)) throw std::invalid_argument("min_fraction must lie in [0, 1)");
  const double threshold = min_fraction * static_cast<double>(p.labels.size());
  const auto sizes = p.sizes();
  p.atypical.assign(p.k, 0);
  for (std::size_t c = 0; c < p.k; ++c) p.atypical[c] = static_cast<double>(sizes[c]) < threshold ? 1 : 0;
  return p;
}

}  // namespace qclust
