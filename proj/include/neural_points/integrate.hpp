#pragma once

#include <algorithm>
#include <cstdint>
#include <memory>
#include <vector>

#include "neural_points/config.hpp"
#include "neural_points/field.hpp"
#include "neural_points/graph.hpp"
#include "neural_points/knn.hpp"

namespace np {

// All local charts sampled and ready to blend: row c*per_center + s of
// `samples` is center c's s-th sampled point. Immutable after construction;
// queries are pure.
struct GlobalField {
    Tensor centers;  // (I,3)
    Value samples;   // (I*R,3)
    Value normals;   // (I*R,3)
    int per_center = 0;
    double alpha_blend = 100.0;  // sharpness of the center blend
    double alpha_proj = 1000.0;  // sharpness inside each patch projection
    int blend_k = 4;             // neighbor centers per query
    int knn_proj = 4;            // neighbor samples per patch projection
    std::shared_ptr<const KdTree> center_tree;
};

inline GlobalField make_global_field(Tensor centers, FieldEvalResult fields,
                                     const ModelConfig& cfg) {
    if (cfg.alpha_blend <= 0.0)
        throw contract_error("make_global_field: blend sharpness must be positive");
    const int i_count = centers.dim(0);
    if (fields.centers != i_count)
        throw contract_error("make_global_field: field evaluation covers " +
                             std::to_string(fields.centers) + " centers, cloud has " +
                             std::to_string(i_count));
    GlobalField g;
    g.center_tree = std::make_shared<KdTree>(centers);
    g.centers = std::move(centers);
    g.samples = std::move(fields.points);
    g.normals = std::move(fields.normals);
    g.per_center = fields.per_center;
    g.alpha_blend = cfg.alpha_blend;
    g.alpha_proj = cfg.alpha_proj;
    g.blend_k = cfg.blend_k;
    g.knn_proj = cfg.knn_proj;
    return g;
}

/// Raw blend weights exp(-alpha d^2) of a query against an explicit neighbor
/// list. If every weight underflows to zero the nearest neighbor gets weight
/// one and `underflow` is set.
inline std::vector<double> blend_weights(const double* x, const Tensor& centers,
                                         const std::vector<int>& neighbors, double alpha,
                                         bool* underflow = nullptr) {
    if (neighbors.empty()) throw contract_error("blend_weights: neighbor list is empty");
    std::vector<double> w(neighbors.size());
    double best_d2 = 0.0;
    std::size_t best = 0;
    bool all_zero = true;
    for (std::size_t j = 0; j < neighbors.size(); ++j) {
        const int c = neighbors[j];
        if (c < 0 || c >= centers.dim(0))
            throw contract_error("blend_weights: center index out of range");
        const double* p = centers.data() + 3 * c;
        const double dx = x[0] - p[0], dy = x[1] - p[1], dz = x[2] - p[2];
        const double d2 = dx * dx + dy * dy + dz * dz;
        w[j] = std::exp(-alpha * d2);
        if (w[j] != 0.0) all_zero = false;
        if (j == 0 || d2 < best_d2) {
            best_d2 = d2;
            best = j;
        }
    }
    if (all_zero) w[best] = 1.0;
    if (underflow != nullptr) *underflow = all_zero;
    return w;
}

struct RhoResult {
    Value points;   // (M,3)
    Value normals;  // (M,3)
    bool far_query = false;   // some query's nearest-center weight would underflow
    bool underflow = false;   // some inner patch projection underflowed
    int degenerate_normals = 0;
};

/// The integrated surface map: each query point is projected through its
/// blend_k nearest centers' charts and the results are combined with weights
/// exp(-alpha ||x - x_c||^2). Weights are evaluated in max-stabilized form, so
/// far queries smoothly reduce to the nearest center's chart (and are
/// flagged). Normals blend the same way after sign alignment to the
/// nearest center's contribution, then normalize; a vanishing blend falls
/// back to that nearest contribution.
inline RhoResult rho_batch(const Value& x, const GlobalField& gf) {
    if (x.val.rank() != 2 || x.val.dim(1) != 3)
        throw contract_error("rho_batch: queries must be (M,3)");
    const int m = x.val.dim(0);
    const int i_count = gf.centers.dim(0);
    const int k = std::min(gf.blend_k, i_count);
    Graph* g = common_graph_of({&x, &gf.samples, &gf.normals});

    const Tensor& xv = x.val;
    auto compute_centers = [&]() {
        std::vector<std::int64_t> idx(static_cast<std::size_t>(m) * k);
        std::vector<int> nbrs;
        for (int i = 0; i < m; ++i) {
            gf.center_tree->knn(xv.data() + 3 * i, k, nbrs);
            for (int j = 0; j < k; ++j)
                idx[static_cast<std::size_t>(i) * k + j] = nbrs[static_cast<std::size_t>(j)];
        }
        return idx;
    };
    IndexVec cidx = plan_indices(g, compute_centers);

    std::vector<int> block(cidx->begin(), cidx->end());
    IndexVec rep = make_indices(detail::repeat_each(m, k));
    Value xp = gather_rows(x, rep);  // (M*k,3): each query repeated per center

    ProjResult pp = proj_points_blocked(xp, gf.samples, &gf.normals, block, gf.per_center,
                                        gf.knn_proj, gf.alpha_proj);

    // Center blend weights from the query-to-center distances.
    Value cg = gather_rows(Value(gf.centers), cidx);  // constant rows
    Value d2 = reshape(sum_reduce(square(sub(cg, xp)), 1), {m, k});
    const Tensor& d2v = d2.val;
    auto compute_dmin = [&]() {
        Tensor t({m, 1});
        const double* pd = d2v.data();
        for (int i = 0; i < m; ++i) {
            double best = pd[i * k];
            for (int j = 1; j < k; ++j) best = std::min(best, pd[i * k + j]);
            t.data()[i] = best;
        }
        return t;
    };
    Tensor dmin = plan_aux(g, compute_dmin);

    RhoResult out;
    out.underflow = pp.underflow;
    for (int i = 0; i < m; ++i) {
        if (gf.alpha_blend * dmin.data()[i] > kWeightUnderflowExponent) {
            out.far_query = true;
            if (g != nullptr) g->flag("query far from all centers; nearest chart dominates");
            break;
        }
    }

    Value w = exp(mul_scalar(sub_colvec(d2, Value(dmin)), -gf.alpha_blend));
    Value wsum = reshape(sum_reduce(w, 1), {m, 1});
    Value num = sum_reduce(mul_bcast_last(reshape(pp.points, {m, k, 3}), w), 1);
    out.points = div_colvec(num, wsum);

    // Normal blend: align each contribution to the nearest center's one.
    Value ng = pp.normals;
    const Tensor& ngv = ng.val;
    auto compute_signs = [&]() {
        Tensor s({m, k});
        const double* pn = ngv.data();
        for (int i = 0; i < m; ++i) {
            const double* ref = pn + 3 * (i * k);
            for (int j = 0; j < k; ++j) {
                const double* n = pn + 3 * (i * k + j);
                const double dot = n[0] * ref[0] + n[1] * ref[1] + n[2] * ref[2];
                s.data()[i * k + j] = dot < 0.0 ? -1.0 : 1.0;
            }
        }
        return s;
    };
    Tensor signs = plan_aux(g, compute_signs);
    Value oriented = mul_bcast_last(reshape(ng, {m, k, 3}), Value(signs));
    Value nsum = sum_reduce(mul_bcast_last(oriented, w), 1);

    const Tensor& nsv = nsum.val;
    auto compute_rescue = [&]() {
        Tensor t({m, 3});
        const double* pv = nsv.data();
        const double* pn = ngv.data();
        for (int i = 0; i < m; ++i) {
            const double* v = pv + 3 * i;
            if (std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]) < kDegenerateNormEps) {
                for (int c = 0; c < 3; ++c) t.data()[3 * i + c] = pn[3 * (i * k) + c];
            }
        }
        return t;
    };
    Tensor rescue = plan_aux(g, compute_rescue);
    bool any_rescue = false;
    for (std::int64_t i = 0; i < rescue.size(); ++i)
        if (rescue.data()[i] != 0.0) any_rescue = true;
    if (any_rescue) {
        nsum = add(nsum, Value(rescue));
        if (g != nullptr) g->flag("degenerate blended normal; nearest chart normal substituted");
    }
    out.normals = normalize3(nsum, &out.degenerate_normals);
    return out;
}

/// Surface point for a single query.
inline Value rho(const double* x, const GlobalField& gf) {
    Tensor q({1, 3}, {x[0], x[1], x[2]});
    return rho_batch(Value(q), gf).points;
}

/// Blended unit normal for a single query.
inline Value rho_normal(const double* x, const GlobalField& gf) {
    Tensor q({1, 3}, {x[0], x[1], x[2]});
    return rho_batch(Value(q), gf).normals;
}

}  // namespace np
