// Exact k-nearest-neighbor search with a kd-tree, in coordinates scaled per
// dimension, with minimal-image distances along periodic dimensions.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "bflow/core.hpp"
#include "bflow/sde.hpp"

namespace bflow {

struct Neighbor {
  double dist2;
  std::uint32_t index;

  bool operator<(const Neighbor& o) const { return dist2 < o.dist2 || (dist2 == o.dist2 && index < o.index); }
};

class KdTree {
 public:
  KdTree() = default;

  /// `rows` is row-major n x d. `scale[k]` divides coordinate k; `period[k]`
  /// is the (unscaled) period of a periodic coordinate or 0.
  KdTree(std::span<const double> rows, std::size_t d, std::vector<double> scale, std::vector<double> period)
      : d_(d), scale_(std::move(scale)), period_(std::move(period)) {
    if (d == 0 || d > kMaxStateDims || rows.size() % d) throw ShapeError("KdTree: bad row data");
    if (scale_.size() != d || period_.size() != d) throw ShapeError("KdTree: scale/period width mismatch");
    n_ = rows.size() / d;
    if (n_ > std::numeric_limits<std::uint32_t>::max()) throw ConfigError("KdTree: too many points");
    pts_.resize(rows.size());
    for (std::size_t i = 0; i < n_; ++i)
      for (std::size_t k = 0; k < d; ++k) pts_[i * d + k] = rows[i * d + k] / scale_[k];
    for (std::size_t k = 0; k < d; ++k) period_[k] /= scale_[k];
    idx_.resize(n_);
    std::iota(idx_.begin(), idx_.end(), 0u);
    if (n_) build(0, n_);
  }

  std::size_t size() const { return n_; }
  std::size_t dims() const { return d_; }

  /// The k nearest points to q (unscaled), sorted by distance then index.
  std::vector<Neighbor> query(std::span<const double> q, std::size_t k) const {
    if (q.size() != d_) throw ShapeError("KdTree::query: width mismatch");
    k = std::min(k, n_);
    std::vector<Neighbor> out;
    if (k == 0) return out;
    std::array<double, kMaxStateDims> qs{};
    for (std::size_t i = 0; i < d_; ++i) qs[i] = q[i] / scale_[i];

    std::vector<std::size_t> periodic;
    for (std::size_t i = 0; i < d_; ++i)
      if (period_[i] > 0) periodic.push_back(i);
    if (periodic.empty()) {
      search(qs, k, out);
      std::sort_heap(out.begin(), out.end());
      return out;
    }
    // Search from every image q + {-P, 0, P} along periodic dimensions and
    // keep each point once at its smallest distance.
    std::vector<Neighbor> all;
    std::size_t combos = 1;
    for (std::size_t i = 0; i < periodic.size(); ++i) combos *= 3;
    for (std::size_t c = 0; c < combos; ++c) {
      auto img = qs;
      std::size_t code = c;
      for (std::size_t p : periodic) {
        img[p] += (static_cast<double>(code % 3) - 1.0) * period_[p];
        code /= 3;
      }
      std::vector<Neighbor> part;
      search(img, k, part);
      all.insert(all.end(), part.begin(), part.end());
    }
    std::sort(all.begin(), all.end(), [](const Neighbor& a, const Neighbor& b) {
      return a.index < b.index || (a.index == b.index && a.dist2 < b.dist2);
    });
    all.erase(std::unique(all.begin(), all.end(), [](const Neighbor& a, const Neighbor& b) { return a.index == b.index; }),
              all.end());
    std::sort(all.begin(), all.end());
    all.resize(std::min(k, all.size()));
    return all;
  }

 private:
  struct Node {
    std::uint32_t begin, end;
    std::int32_t left = -1, right = -1;
    std::uint8_t axis = 0;
    double split = 0;
    std::array<double, kMaxStateDims> lo{}, hi{};
  };

  static constexpr std::size_t kLeafSize = 16;

  std::int32_t build(std::size_t begin, std::size_t end) {
    Node node;
    node.begin = static_cast<std::uint32_t>(begin);
    node.end = static_cast<std::uint32_t>(end);
    node.lo.fill(std::numeric_limits<double>::infinity());
    node.hi.fill(-std::numeric_limits<double>::infinity());
    for (std::size_t i = begin; i < end; ++i)
      for (std::size_t k = 0; k < d_; ++k) {
        node.lo[k] = std::min(node.lo[k], pts_[idx_[i] * d_ + k]);
        node.hi[k] = std::max(node.hi[k], pts_[idx_[i] * d_ + k]);
      }
    const auto id = static_cast<std::int32_t>(nodes_.size());
    nodes_.push_back(node);
    if (end - begin <= kLeafSize) return id;
    std::size_t axis = 0;
    for (std::size_t k = 1; k < d_; ++k)
      if (node.hi[k] - node.lo[k] > node.hi[axis] - node.lo[axis]) axis = k;
    if (!(node.hi[axis] > node.lo[axis])) return id;  // all points coincide
    const std::size_t mid = begin + (end - begin) / 2;
    std::nth_element(idx_.begin() + static_cast<std::ptrdiff_t>(begin), idx_.begin() + static_cast<std::ptrdiff_t>(mid),
                     idx_.begin() + static_cast<std::ptrdiff_t>(end), [&](std::uint32_t a, std::uint32_t b) {
                       const double va = pts_[a * d_ + axis], vb = pts_[b * d_ + axis];
                       return va < vb || (va == vb && a < b);
                     });
    const std::int32_t l = build(begin, mid);
    const std::int32_t r = build(mid, end);
    nodes_[static_cast<std::size_t>(id)].left = l;
    nodes_[static_cast<std::size_t>(id)].right = r;
    nodes_[static_cast<std::size_t>(id)].axis = static_cast<std::uint8_t>(axis);
    nodes_[static_cast<std::size_t>(id)].split = pts_[idx_[mid] * d_ + axis];
    return id;
  }

  double box_dist2(const Node& n, const std::array<double, kMaxStateDims>& q) const {
    double s = 0;
    for (std::size_t k = 0; k < d_; ++k) {
      const double v = q[k] < n.lo[k] ? n.lo[k] - q[k] : (q[k] > n.hi[k] ? q[k] - n.hi[k] : 0.0);
      s += v * v;
    }
    return s;
  }

  // Max-heap of the best k in `heap` (front is the current worst).
  void search(const std::array<double, kMaxStateDims>& q, std::size_t k, std::vector<Neighbor>& heap) const {
    heap.clear();
    heap.reserve(k + 1);
    std::vector<std::int32_t> stack{0};
    while (!stack.empty()) {
      const Node& n = nodes_[static_cast<std::size_t>(stack.back())];
      stack.pop_back();
      if (heap.size() == k && box_dist2(n, q) > heap.front().dist2) continue;
      if (n.left < 0) {
        for (std::uint32_t i = n.begin; i < n.end; ++i) {
          const std::uint32_t id = idx_[i];
          double s = 0;
          for (std::size_t c = 0; c < d_; ++c) {
            const double v = pts_[id * d_ + c] - q[c];
            s += v * v;
          }
          const Neighbor cand{s, id};
          if (heap.size() < k) {
            heap.push_back(cand);
            std::push_heap(heap.begin(), heap.end());
          } else if (cand < heap.front()) {
            std::pop_heap(heap.begin(), heap.end());
            heap.back() = cand;
            std::push_heap(heap.begin(), heap.end());
          }
        }
        continue;
      }
      // Visit the nearer child last so it is popped first.
      const bool go_left = q[n.axis] < n.split;
      stack.push_back(go_left ? n.right : n.left);
      stack.push_back(go_left ? n.left : n.right);
    }
  }

  std::size_t d_ = 0, n_ = 0;
  std::vector<double> scale_, period_;
  std::vector<double> pts_;
  std::vector<std::uint32_t> idx_;
  std::vector<Node> nodes_;
};

/// Brute-force reference with the same distance and tie-break rules.
inline std::vector<Neighbor> brute_force_knn(std::span<const double> rows, std::size_t d, std::span<const double> q,
                                             std::size_t k, std::span<const double> scale,
                                             std::span<const double> period) {
  const std::size_t n = rows.size() / d;
  std::vector<Neighbor> all(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t c = 0; c < d; ++c) {
      double v = rows[i * d + c] - q[c];
      if (period[c] > 0) {
        v = std::fmod(v, period[c]);
        if (v > 0.5 * period[c]) v -= period[c];
        if (v < -0.5 * period[c]) v += period[c];
      }
      v /= scale[c];
      s += v * v;
    }
    all[i] = {s, static_cast<std::uint32_t>(i)};
  }
  std::sort(all.begin(), all.end());
  all.resize(std::min(k, n));
  return all;
}

}  // namespace bflow
