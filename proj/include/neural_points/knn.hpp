#pragma once

#include <algorithm>
#include <cstdint>
#include <utility>
#include <vector>

#include "neural_points/errors.hpp"
#include "neural_points/point_cloud.hpp"
#include "neural_points/tensor.hpp"

namespace np {

/// Neighbor candidate ordered by (squared distance, index). The index
/// tie-break makes every query result unique, so the tree matches a
/// brute-force scan exactly even with duplicate points.
struct Neighbor {
    double d2;
    int index;
    bool operator<(const Neighbor& o) const {
        return d2 < o.d2 || (d2 == o.d2 && index < o.index);
    }
};

namespace detail {

// Bounded candidate list for small k: sorted insertion beats a heap for the
// k <= 16 queries this codebase issues.
class NeighborList {
public:
    NeighborList(int k, std::vector<Neighbor>& storage) : k_(k), items_(storage) {
        items_.clear();
    }
    bool full() const { return static_cast<int>(items_.size()) == k_; }
    double worst_d2() const { return items_.back().d2; }
    bool admits(const Neighbor& c) const { return !full() || c < items_.back(); }
    void insert(const Neighbor& c) {
        auto pos = std::upper_bound(items_.begin(), items_.end(), c);
        items_.insert(pos, c);
        if (static_cast<int>(items_.size()) > k_) items_.pop_back();
    }

private:
    int k_;
    std::vector<Neighbor>& items_;
};

}  // namespace detail

/// Exact k-nearest-neighbor index over an (N,3) tensor. Immutable after
/// construction; queries allocate nothing beyond the caller's output vector.
class KdTree {
public:
    explicit KdTree(Tensor points) : pts_(std::move(points)) {
        if (!pts_.defined() || pts_.rank() != 2 || pts_.dim(1) != 3)
            throw contract_error("KdTree: points must be (N,3)");
        const int n = pts_.dim(0);
        if (n == 0) throw contract_error("KdTree: empty cloud");
        idx_.resize(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) idx_[static_cast<std::size_t>(i)] = i;
        nodes_.reserve(static_cast<std::size_t>(2 * n / kLeafSize + 2));
        root_ = build(0, n);
    }

    explicit KdTree(const PointCloud& cloud) : KdTree(cloud.points) {}

    int size() const { return pts_.dim(0); }
    const Tensor& points() const { return pts_; }

    /// min(k,N) nearest neighbors of q, ascending by (distance, index).
    void knn(const double* q, int k, std::vector<int>& out) const {
        if (k < 1) throw contract_error("KdTree::knn: k must be >= 1");
        k = std::min(k, size());
        scratch_.reserve(static_cast<std::size_t>(k) + 1);
        detail::NeighborList list(k, scratch_);
        search(root_, q, list);
        out.resize(scratch_.size());
        for (std::size_t i = 0; i < scratch_.size(); ++i) out[i] = scratch_[i].index;
    }

    std::vector<int> knn(const double* q, int k) const {
        std::vector<int> out;
        knn(q, k, out);
        return out;
    }

    int nearest(const double* q) const {
        std::vector<int> out;
        knn(q, 1, out);
        return out[0];
    }

    double nearest_d2(const double* q) const {
        std::vector<int> out;
        knn(q, 1, out);
        const double* p = row(pts_, out[0]);
        const double dx = q[0] - p[0], dy = q[1] - p[1], dz = q[2] - p[2];
        return dx * dx + dy * dy + dz * dz;
    }

    /// All indices with distance <= radius, ascending by (distance, index).
    void radius_search(const double* q, double radius, std::vector<Neighbor>& out) const {
        out.clear();
        radius_visit(root_, q, radius * radius, out);
        std::sort(out.begin(), out.end());
    }

    static std::vector<int> brute_force(const Tensor& points, const double* q, int k) {
        const int n = points.dim(0);
        std::vector<Neighbor> all(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            const double* p = row(points, i);
            const double dx = q[0] - p[0], dy = q[1] - p[1], dz = q[2] - p[2];
            all[static_cast<std::size_t>(i)] = {dx * dx + dy * dy + dz * dz, i};
        }
        std::sort(all.begin(), all.end());
        k = std::min(k, n);
        std::vector<int> out(static_cast<std::size_t>(k));
        for (int i = 0; i < k; ++i) out[static_cast<std::size_t>(i)] = all[static_cast<std::size_t>(i)].index;
        return out;
    }

private:
    static constexpr int kLeafSize = 8;

    struct KdNode {
        int axis = -1;       // -1 marks a leaf
        double split = 0.0;
        int left = -1, right = -1;
        int begin = 0, end = 0;  // leaf range in idx_
    };

    Tensor pts_;
    std::vector<int> idx_;
    std::vector<KdNode> nodes_;
    int root_;
    mutable std::vector<Neighbor> scratch_;

    double coord(int point, int axis) const {
        return pts_.data()[static_cast<std::int64_t>(point) * 3 + axis];
    }

    int build(int begin, int end) {
        KdNode node;
        if (end - begin <= kLeafSize) {
            node.begin = begin;
            node.end = end;
            nodes_.push_back(node);
            return static_cast<int>(nodes_.size()) - 1;
        }
        double lo[3], hi[3];
        for (int a = 0; a < 3; ++a) {
            lo[a] = coord(idx_[static_cast<std::size_t>(begin)], a);
            hi[a] = lo[a];
        }
        for (int i = begin + 1; i < end; ++i)
            for (int a = 0; a < 3; ++a) {
                const double c = coord(idx_[static_cast<std::size_t>(i)], a);
                lo[a] = std::min(lo[a], c);
                hi[a] = std::max(hi[a], c);
            }
        int axis = 0;
        for (int a = 1; a < 3; ++a)
            if (hi[a] - lo[a] > hi[axis] - lo[axis]) axis = a;

        const int mid = begin + (end - begin) / 2;
        std::nth_element(idx_.begin() + begin, idx_.begin() + mid, idx_.begin() + end,
                         [this, axis](int a, int b) {
                             const double ca = coord(a, axis), cb = coord(b, axis);
                             return ca < cb || (ca == cb && a < b);
                         });
        node.axis = axis;
        node.split = coord(idx_[static_cast<std::size_t>(mid)], axis);
        node.left = build(begin, mid);
        node.right = build(mid, end);
        nodes_.push_back(node);
        return static_cast<int>(nodes_.size()) - 1;
    }

    void search(int id, const double* q, detail::NeighborList& list) const {
        const KdNode& node = nodes_[static_cast<std::size_t>(id)];
        if (node.axis < 0) {
            for (int i = node.begin; i < node.end; ++i) {
                const int pi = idx_[static_cast<std::size_t>(i)];
                const double* p = row(pts_, pi);
                const double dx = q[0] - p[0], dy = q[1] - p[1], dz = q[2] - p[2];
                const Neighbor cand{dx * dx + dy * dy + dz * dz, pi};
                if (list.admits(cand)) list.insert(cand);
            }
            return;
        }
        const double delta = q[node.axis] - node.split;
        const int near = delta < 0.0 ? node.left : node.right;
        const int far = delta < 0.0 ? node.right : node.left;
        search(near, q, list);
        // the far side may still hold an equal-distance smaller index, so
        // only prune on strictly larger plane distance
        if (!list.full() || delta * delta <= list.worst_d2()) search(far, q, list);
    }

    void radius_visit(int id, const double* q, double r2, std::vector<Neighbor>& out) const {
        const KdNode& node = nodes_[static_cast<std::size_t>(id)];
        if (node.axis < 0) {
            for (int i = node.begin; i < node.end; ++i) {
                const int pi = idx_[static_cast<std::size_t>(i)];
                const double* p = row(pts_, pi);
                const double dx = q[0] - p[0], dy = q[1] - p[1], dz = q[2] - p[2];
                const double d2 = dx * dx + dy * dy + dz * dz;
                if (d2 <= r2) out.push_back({d2, pi});
            }
            return;
        }
        const double delta = q[node.axis] - node.split;
        const int near = delta < 0.0 ? node.left : node.right;
        const int far = delta < 0.0 ? node.right : node.left;
        radius_visit(near, q, r2, out);
        if (delta * delta <= r2) radius_visit(far, q, r2, out);
    }
};

}  // namespace np
