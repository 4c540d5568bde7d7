#pragma once

#include <algorithm>
#include <cmath>

#include "neural_points/knn.hpp"
#include "neural_points/surfaces.hpp"
#include "neural_points/tensor.hpp"

namespace np {

namespace detail {

inline void check_metric_cloud(const Tensor& t, const char* context) {
    if (t.rank() != 2 || t.dim(1) != 3 || t.dim(0) < 1)
        throw contract_error(std::string(context) + ": need a nonempty (N,3) cloud");
}

/// Mean over p of squared nearest-neighbor distance into q.
inline double mean_sq_nn(const Tensor& p, const KdTree& q_tree) {
    double acc = 0.0;
    for (int i = 0; i < p.dim(0); ++i) acc += q_tree.nearest_d2(p.data() + 3 * i);
    return acc / p.dim(0);
}

/// Largest over p of nearest-neighbor distance into q (Euclidean).
inline double max_nn(const Tensor& p, const KdTree& q_tree) {
    double worst = 0.0;
    for (int i = 0; i < p.dim(0); ++i)
        worst = std::max(worst, q_tree.nearest_d2(p.data() + 3 * i));
    return std::sqrt(worst);
}

}  // namespace detail

/// Chamfer distance: both directed means of squared nearest-neighbor
/// distances, summed. Squared by convention here (stated in the docs).
inline double chamfer(const Tensor& p, const Tensor& q) {
    detail::check_metric_cloud(p, "chamfer");
    detail::check_metric_cloud(q, "chamfer");
    KdTree pt(p), qt(q);
    return detail::mean_sq_nn(p, qt) + detail::mean_sq_nn(q, pt);
}

/// Hausdorff distance: the larger of the two directed max-min Euclidean
/// distances.
inline double hausdorff(const Tensor& p, const Tensor& q) {
    detail::check_metric_cloud(p, "hausdorff");
    detail::check_metric_cloud(q, "hausdorff");
    KdTree pt(p), qt(q);
    return std::max(detail::max_nn(p, qt), detail::max_nn(q, pt));
}

/// Mean unsigned distance to an analytic surface.
inline double point_to_surface(const Tensor& p, const AnalyticSurface& surface) {
    detail::check_metric_cloud(p, "point_to_surface");
    double acc = 0.0;
    for (int i = 0; i < p.dim(0); ++i)
        acc += std::abs(surface.distance(p.data() + 3 * i));
    return acc / p.dim(0);
}

/// Mean unsigned distance to a triangle mesh.
inline double point_to_surface(const Tensor& p, const MeshDistance& mesh) {
    detail::check_metric_cloud(p, "point_to_surface");
    double acc = 0.0;
    for (int i = 0; i < p.dim(0); ++i) acc += mesh.distance(p.data() + 3 * i);
    return acc / p.dim(0);
}

}  // namespace np
