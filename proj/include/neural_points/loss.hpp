#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "neural_points/field.hpp"
#include "neural_points/graph.hpp"
#include "neural_points/integrate.hpp"
#include "neural_points/knn.hpp"

namespace np {

struct LossWeights {
    double normal = 0.01;       // weight of the normal-difference term
    double integration = 0.3;   // weight of the chart-consistency term
};

struct LossReport {
    double shape = 0.0;
    double normal = 0.0;
    double integration = 0.0;
    double total = 0.0;
};

/// Projection distance d(P,Q) = (1/|P|) sum_s ||p_s - Proj(p_s, Q)||^2.
/// Soft by construction: each point is compared against the exp-weighted
/// blend of its k nearest targets, never a single matched point.
inline Value proj_distance(const Value& p, const Value& q, int k, double alpha,
                           const KdTree* q_tree = nullptr) {
    ProjResult pr = proj_points(p, q, nullptr, k, alpha, q_tree);
    return mul_scalar(sum_all(square(sub(p, pr.points))), 1.0 / p.val.dim(0));
}

/// Normal-difference distance d_n(P,Q) = (1/|P|) sum_s ||n_s - n_Proj,s||^2
/// with each projected normal sign-aligned to the query's normal first.
inline Value proj_normal_distance(const Value& p, const Value& p_normals, const Value& q,
                                  const Value& q_normals, int k, double alpha,
                                  const KdTree* q_tree = nullptr) {
    if (!p_normals.val.defined() || !q_normals.val.defined())
        throw contract_error("proj_normal_distance: both clouds must carry normals");
    if (!p_normals.val.same_shape(p.val) || !q_normals.val.same_shape(q.val))
        throw contract_error("proj_normal_distance: normals must match their points");
    ProjResult pr = proj_points(p, q, &q_normals, k, alpha, q_tree);
    const int m = p.val.dim(0);

    Graph* g = common_graph_of({&p, &p_normals, &q, &q_normals});
    const Tensor& nv = pr.normals.val;
    const Tensor& pv = p_normals.val;
    auto compute_signs = [&]() {
        Tensor s({m, 1});
        for (int i = 0; i < m; ++i) {
            const double* a = nv.data() + 3 * i;
            const double* b = pv.data() + 3 * i;
            const double dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
            s.data()[i] = dot < 0.0 ? -1.0 : 1.0;
        }
        return s;
    };
    Tensor signs = plan_aux(g, compute_signs);
    Value aligned = mul_colvec(pr.normals, Value(signs));
    return mul_scalar(sum_all(square(sub(p_normals, aligned))), 1.0 / m);
}

// One training item's clouds: the dense chart samples X_R, the integrated
// output Y, and the reference Z, each with unit normals. z_tree optionally
// caches the KD-tree over the (fixed) reference points.
struct LossInputs {
    Value xr_points, xr_normals;
    Value y_points, y_normals;
    Value z_points, z_normals;
    const KdTree* z_tree = nullptr;
};

/// Four-direction projection distance between the predictions and the
/// reference: d(X_R,Z) + d(Z,X_R) + d(Y,Z) + d(Z,Y).
inline Value shape_loss(const LossInputs& in, int k, double alpha) {
    Value a = proj_distance(in.xr_points, in.z_points, k, alpha, in.z_tree);
    Value b = proj_distance(in.z_points, in.xr_points, k, alpha);
    Value c = proj_distance(in.y_points, in.z_points, k, alpha, in.z_tree);
    Value d = proj_distance(in.z_points, in.y_points, k, alpha);
    return add(add(a, b), add(c, d));
}

/// Same four directions over normal differences.
inline Value normal_loss(const LossInputs& in, int k, double alpha) {
    Value a = proj_normal_distance(in.xr_points, in.xr_normals, in.z_points, in.z_normals, k,
                                   alpha, in.z_tree);
    Value b = proj_normal_distance(in.z_points, in.z_normals, in.xr_points, in.xr_normals, k,
                                   alpha);
    Value c = proj_normal_distance(in.y_points, in.y_normals, in.z_points, in.z_normals, k,
                                   alpha, in.z_tree);
    Value d = proj_normal_distance(in.z_points, in.z_normals, in.y_points, in.y_normals, k,
                                   alpha);
    return add(add(a, b), add(c, d));
}

/// Chart-consistency term: for every output point and each of its neighbor
/// centers (nearest in the input cloud), the squared distance to its
/// projection onto that single center's chart samples — summed raw, not
/// averaged.
inline Value integration_loss(const Value& y, const GlobalField& gf) {
    if (y.val.rank() != 2 || y.val.dim(1) != 3)
        throw contract_error("integration_loss: outputs must be (J,3)");
    const int m = y.val.dim(0);
    const int k = std::min(gf.blend_k, gf.centers.dim(0));
    Graph* g = common_graph_of({&y, &gf.samples});

    const Tensor& yv = y.val;
    auto compute_centers = [&]() {
        std::vector<std::int64_t> idx(static_cast<std::size_t>(m) * k);
        std::vector<int> nbrs;
        for (int i = 0; i < m; ++i) {
            gf.center_tree->knn(yv.data() + 3 * i, k, nbrs);
            for (int j = 0; j < k; ++j)
                idx[static_cast<std::size_t>(i) * k + j] = nbrs[static_cast<std::size_t>(j)];
        }
        return idx;
    };
    IndexVec cidx = plan_indices(g, compute_centers);
    std::vector<int> block(cidx->begin(), cidx->end());
    IndexVec rep = make_indices(detail::repeat_each(m, k));
    Value yp = gather_rows(y, rep);
    ProjResult pp = proj_points_blocked(yp, gf.samples, nullptr, block, gf.per_center,
                                        gf.knn_proj, gf.alpha_proj);
    return sum_all(square(sub(yp, pp.points)));
}

namespace detail {

struct DirectionalPair {
    Value shape, normal;
};

/// One projection pass scored both ways: the mean squared point gap and the
/// mean squared sign-aligned normal gap share a single neighbor search and
/// blend. Values match proj_distance / proj_normal_distance exactly.
inline DirectionalPair proj_pair(const Value& p, const Value& p_normals, const Value& q,
                                 const Value& q_normals, int k, double alpha,
                                 const KdTree* q_tree) {
    if (!p_normals.val.defined() || !q_normals.val.defined())
        throw contract_error("proj_pair: both clouds must carry normals");
    if (!p_normals.val.same_shape(p.val) || !q_normals.val.same_shape(q.val))
        throw contract_error("proj_pair: normals must match their points");
    ProjResult pr = proj_points(p, q, &q_normals, k, alpha, q_tree);
    const int m = p.val.dim(0);
    DirectionalPair out;
    out.shape = mul_scalar(sum_all(square(sub(p, pr.points))), 1.0 / m);

    Graph* g = common_graph_of({&p, &p_normals, &q, &q_normals});
    const Tensor& nv = pr.normals.val;
    const Tensor& pv = p_normals.val;
    auto compute_signs = [&]() {
        Tensor s({m, 1});
        for (int i = 0; i < m; ++i) {
            const double* a = nv.data() + 3 * i;
            const double* b = pv.data() + 3 * i;
            const double dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
            s.data()[i] = dot < 0.0 ? -1.0 : 1.0;
        }
        return s;
    };
    Tensor signs = plan_aux(g, compute_signs);
    Value aligned = mul_colvec(pr.normals, Value(signs));
    out.normal = mul_scalar(sum_all(square(sub(p_normals, aligned))), 1.0 / m);
    return out;
}

}  // namespace detail

struct TotalLoss {
    Value shape, normal, integration, total;
    LossReport report;
};

/// L = L_shape + w_normal * L_normal + w_integration * L_integration.
/// Each of the four projection directions runs once and feeds both the shape
/// and the normal term; the trees over the two prediction clouds are shared
/// by their reverse directions.
inline TotalLoss total_loss(const LossInputs& in, const GlobalField& gf,
                            const LossWeights& weights) {
    if (weights.normal < 0.0 || weights.integration < 0.0)
        throw contract_error("total_loss: loss weights must be nonnegative");
    const int k = gf.knn_proj;
    const double alpha = gf.alpha_proj;
    KdTree xr_tree(in.xr_points.val);
    KdTree y_tree(in.y_points.val);
    detail::DirectionalPair a = detail::proj_pair(in.xr_points, in.xr_normals, in.z_points,
                                                  in.z_normals, k, alpha, in.z_tree);
    detail::DirectionalPair b = detail::proj_pair(in.z_points, in.z_normals, in.xr_points,
                                                  in.xr_normals, k, alpha, &xr_tree);
    detail::DirectionalPair c = detail::proj_pair(in.y_points, in.y_normals, in.z_points,
                                                  in.z_normals, k, alpha, in.z_tree);
    detail::DirectionalPair d = detail::proj_pair(in.z_points, in.z_normals, in.y_points,
                                                  in.y_normals, k, alpha, &y_tree);
    TotalLoss out;
    out.shape = add(add(a.shape, b.shape), add(c.shape, d.shape));
    out.normal = add(add(a.normal, b.normal), add(c.normal, d.normal));
    out.integration = integration_loss(in.y_points, gf);
    out.total = add(out.shape, add(mul_scalar(out.normal, weights.normal),
                                   mul_scalar(out.integration, weights.integration)));
    out.report.shape = out.shape.val.data()[0];
    out.report.normal = out.normal.val.data()[0];
    out.report.integration = out.integration.val.data()[0];
    out.report.total = out.total.val.data()[0];
    return out;
}

}  // namespace np
