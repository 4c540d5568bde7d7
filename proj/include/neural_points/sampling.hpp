#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <queue>
#include <vector>

#include "neural_points/errors.hpp"
#include "neural_points/knn.hpp"
#include "neural_points/point_cloud.hpp"
#include "neural_points/rng.hpp"
#include "neural_points/tensor.hpp"

namespace np {

/// Farthest point sampling: greedy max-min coverage starting from
/// `first_index`. Distance ties pick the smaller index.
inline std::vector<int> farthest_point_sample(const Tensor& points, int m, int first_index) {
    const int n = points.dim(0);
    if (m < 1 || m > n)
        throw contract_error("farthest_point_sample: m=" + std::to_string(m) +
                             " out of range [1," + std::to_string(n) + "]");
    if (first_index < 0 || first_index >= n)
        throw contract_error("farthest_point_sample: first_index out of range");
    std::vector<int> chosen;
    chosen.reserve(static_cast<std::size_t>(m));
    chosen.push_back(first_index);
    // Coordinates split per axis so the distance update and the farthest
    // reduction both vectorize; ties pick the lowest row index.
    std::vector<double> xs(static_cast<std::size_t>(n)), ys(xs), zs(xs);
    std::vector<double> min_d2(static_cast<std::size_t>(n),
                               std::numeric_limits<double>::infinity());
    const double* base = points.data();
    for (int i = 0; i < n; ++i) {
        xs[static_cast<std::size_t>(i)] = base[3 * i];
        ys[static_cast<std::size_t>(i)] = base[3 * i + 1];
        zs[static_cast<std::size_t>(i)] = base[3 * i + 2];
    }
    Eigen::Map<const Eigen::ArrayXd> ax(xs.data(), n), ay(ys.data(), n), az(zs.data(), n);
    Eigen::Map<Eigen::ArrayXd> amd(min_d2.data(), n);
    for (int step = 1; step < m; ++step) {
        const std::size_t last = static_cast<std::size_t>(chosen.back());
        amd = amd.min((ax - xs[last]).square() + (ay - ys[last]).square() +
                      (az - zs[last]).square());
        const double far_d2 = amd.maxCoeff();
        int far = 0;
        while (min_d2[static_cast<std::size_t>(far)] != far_d2) ++far;
        chosen.push_back(far);
    }
    return chosen;
}

inline std::vector<int> farthest_point_sample(const Tensor& points, int m, Rng& rng) {
    return farthest_point_sample(points, m, static_cast<int>(rng.uniform_int(
                                                static_cast<std::uint64_t>(points.dim(0)))));
}

// ---------------------------------------------------------------------------
// unit-ball normalization

struct UnitBallTransform {
    double center[3] = {0, 0, 0};
    double scale = 1.0;
};

struct NormalizeResult {
    PointCloud cloud;
    UnitBallTransform transform;
    bool degenerate = false;  // all points identical; scale forced to 1
};

inline Tensor apply_transform(const UnitBallTransform& t, const Tensor& points) {
    Tensor out(points.shape());
    for (int r = 0; r < points.dim(0); ++r) {
        const double* p = row(points, r);
        double* q = row(out, r);
        for (int a = 0; a < 3; ++a) q[a] = (p[a] - t.center[a]) / t.scale;
    }
    return out;
}

inline Tensor invert_transform(const UnitBallTransform& t, const Tensor& points) {
    Tensor out(points.shape());
    for (int r = 0; r < points.dim(0); ++r) {
        const double* p = row(points, r);
        double* q = row(out, r);
        for (int a = 0; a < 3; ++a) q[a] = p[a] * t.scale + t.center[a];
    }
    return out;
}

/// Centers the cloud at its centroid and scales the farthest point onto the
/// unit sphere. Normals pass through unchanged.
inline NormalizeResult normalize_unit_ball(const PointCloud& cloud) {
    validate_cloud(cloud, "normalize_unit_ball");
    const int n = cloud.size();
    UnitBallTransform t;
    for (int r = 0; r < n; ++r) {
        const double* p = row(cloud.points, r);
        for (int a = 0; a < 3; ++a) t.center[a] += p[a];
    }
    for (int a = 0; a < 3; ++a) t.center[a] /= n;
    double max_r2 = 0.0;
    for (int r = 0; r < n; ++r) {
        const double* p = row(cloud.points, r);
        const double dx = p[0] - t.center[0], dy = p[1] - t.center[1], dz = p[2] - t.center[2];
        max_r2 = std::max(max_r2, dx * dx + dy * dy + dz * dz);
    }
    NormalizeResult result;
    const double radius = std::sqrt(max_r2);
    if (radius < 1e-12) {
        t.scale = 1.0;
        result.degenerate = true;
    } else {
        t.scale = radius;
    }
    result.transform = t;
    result.cloud.points = apply_transform(t, cloud.points);
    if (cloud.has_normals()) result.cloud.normals = cloud.normals;
    return result;
}

// ---------------------------------------------------------------------------
// Poisson-like subset by weighted sample elimination

namespace detail {

// Hex-packing bound: m disks of radius r on area A satisfy A = 2*sqrt(3)*r^2*m.
inline double poisson_radius(double area, int m) {
    return std::sqrt(area / (2.0 * std::sqrt(3.0) * static_cast<double>(m)));
}

// Surface area estimate from mean 1-NN spacing of a uniform sample:
// E[d_1nn] ~ 0.5*sqrt(A/N)  =>  A ~ 4*N*mean(d)^2.
inline double estimate_area(const Tensor& points) {
    const KdTree tree(points);
    const int n = points.dim(0);
    double sum = 0.0;
    std::vector<int> nb;
    for (int i = 0; i < n; ++i) {
        tree.knn(row(points, i), 2, nb);
        const double* p = row(points, i);
        const double* q = row(points, nb.size() > 1 ? nb[1] : nb[0]);
        const double dx = p[0] - q[0], dy = p[1] - q[1], dz = p[2] - q[2];
        sum += std::sqrt(dx * dx + dy * dy + dz * dz);
    }
    const double mean = sum / n;
    return 4.0 * n * mean * mean;
}

}  // namespace detail

/// Indices of an m-point blue-noise-like subset of `candidates`, selected by
/// weighted sample elimination: the most crowded candidate (largest sum of
/// (1 - d/r)^8 over neighbors within r) is removed until m remain. Pass the
/// true surface area when known; otherwise it is estimated from spacing.
inline std::vector<int> sample_elimination(const Tensor& candidates, int m,
                                           double area = 0.0) {
    const int n = candidates.dim(0);
    if (m < 1 || m > n)
        throw contract_error("sample_elimination: m=" + std::to_string(m) +
                             " out of range [1," + std::to_string(n) + "]");
    std::vector<int> alive_idx(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) alive_idx[static_cast<std::size_t>(i)] = i;
    if (m == n) return alive_idx;

    if (area <= 0.0) area = detail::estimate_area(candidates);
    const double r = 2.0 * detail::poisson_radius(area, m);

    const KdTree tree(candidates);
    std::vector<std::vector<Neighbor>> adj(static_cast<std::size_t>(n));
    std::vector<Neighbor> found;
    for (int i = 0; i < n; ++i) {
        tree.radius_search(row(candidates, i), r, found);
        auto& list = adj[static_cast<std::size_t>(i)];
        for (const Neighbor& nb : found)
            if (nb.index != i) list.push_back(nb);
    }

    auto term = [r](double d2) {
        const double d = std::sqrt(d2);
        const double base = 1.0 - std::min(d / r, 1.0);
        double p = base * base;  // ^2
        p *= p;                  // ^4
        return p * p;            // ^8
    };

    std::vector<double> weight(static_cast<std::size_t>(n), 0.0);
    for (int i = 0; i < n; ++i)
        for (const Neighbor& nb : adj[static_cast<std::size_t>(i)])
            weight[static_cast<std::size_t>(i)] += term(nb.d2);

    struct Entry {
        double w;
        int idx;
        std::uint32_t version;
        bool operator<(const Entry& o) const {
            // max-heap on weight; equal weights eliminate the larger index
            // first so the kept set is deterministic
            return w < o.w || (w == o.w && idx < o.idx);
        }
    };
    std::priority_queue<Entry> heap;
    std::vector<std::uint32_t> version(static_cast<std::size_t>(n), 0);
    std::vector<char> alive(static_cast<std::size_t>(n), 1);
    for (int i = 0; i < n; ++i)
        heap.push({weight[static_cast<std::size_t>(i)], i, 0});

    int remaining = n;
    while (remaining > m) {
        const Entry top = heap.top();
        heap.pop();
        const auto ui = static_cast<std::size_t>(top.idx);
        if (!alive[ui] || top.version != version[ui]) continue;
        alive[ui] = 0;
        --remaining;
        for (const Neighbor& nb : adj[ui]) {
            const auto uj = static_cast<std::size_t>(nb.index);
            if (!alive[uj]) continue;
            weight[uj] -= term(nb.d2);
            heap.push({weight[uj], nb.index, ++version[uj]});
        }
    }

    std::vector<int> kept;
    kept.reserve(static_cast<std::size_t>(m));
    for (int i = 0; i < n; ++i)
        if (alive[static_cast<std::size_t>(i)]) kept.push_back(i);
    return kept;
}

/// Blue-noise subset of a dense cloud, keeping normals.
inline PointCloud poisson_like_sample(const PointCloud& dense, int m, double area = 0.0) {
    validate_cloud(dense, "poisson_like_sample");
    if (m > dense.size())
        throw contract_error("poisson_like_sample: requested " + std::to_string(m) +
                             " points from " + std::to_string(dense.size()) + " candidates");
    const std::vector<int> kept = sample_elimination(dense.points, m, area);
    Tensor pts({m, 3});
    Tensor nrm = dense.has_normals() ? Tensor({m, 3}) : Tensor();
    for (int i = 0; i < m; ++i) {
        const int src = kept[static_cast<std::size_t>(i)];
        std::copy(row(dense.points, src), row(dense.points, src) + 3, row(pts, i));
        if (dense.has_normals())
            std::copy(row(dense.normals, src), row(dense.normals, src) + 3, row(nrm, i));
    }
    PointCloud out(std::move(pts));
    if (dense.has_normals()) out.normals = std::move(nrm);
    return out;
}

}  // namespace np
