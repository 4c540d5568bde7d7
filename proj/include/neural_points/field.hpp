#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "neural_points/config.hpp"
#include "neural_points/graph.hpp"
#include "neural_points/knn.hpp"
#include "neural_points/params.hpp"

namespace np {

inline constexpr double kPi = 3.141592653589793238462643383279502884;

// Raw weight exponents beyond this underflow exp() to zero; the blend is
// computed in stabilized form regardless, but callers are told.
inline constexpr double kWeightUnderflowExponent = 709.0;

// ---------------------------------------------------------------------------
// Positional encoding

// Layout per row: [sin(2^0 pi u), cos(2^0 pi u), ..., sin(2^{L-1} pi u),
// cos(2^{L-1} pi u), same for v, then raw u, v if include_input].
inline Tensor pos_encode_batch(const Tensor& uv, const PosEncodingConfig& cfg) {
    if (uv.rank() != 2 || uv.dim(1) != 2)
        throw contract_error("pos_encode_batch: uv must be (R,2)");
    const int r = uv.dim(0), L = cfg.num_frequencies, d = cfg.output_dim();
    Tensor out({r, d});
    const double* pu = uv.data();
    double* po = out.data();
    for (int i = 0; i < r; ++i) {
        for (int axis = 0; axis < 2; ++axis) {
            const double x = pu[2 * i + axis];
            double* dst = po + i * d + axis * 2 * L;
            double freq = kPi;
            for (int l = 0; l < L; ++l, freq *= 2.0) {
                dst[2 * l + 0] = std::sin(freq * x);
                dst[2 * l + 1] = std::cos(freq * x);
            }
        }
        if (cfg.include_input) {
            po[i * d + 4 * L + 0] = pu[2 * i + 0];
            po[i * d + 4 * L + 1] = pu[2 * i + 1];
        }
    }
    return out;
}

/// Per-row partial derivatives of the encoding w.r.t. u and v.
inline void pos_encode_jacobian(const Tensor& uv, const PosEncodingConfig& cfg, Tensor* du,
                                Tensor* dv) {
    if (uv.rank() != 2 || uv.dim(1) != 2)
        throw contract_error("pos_encode_jacobian: uv must be (R,2)");
    const int r = uv.dim(0), L = cfg.num_frequencies, d = cfg.output_dim();
    *du = Tensor({r, d});
    *dv = Tensor({r, d});
    const double* pu = uv.data();
    for (int i = 0; i < r; ++i) {
        for (int axis = 0; axis < 2; ++axis) {
            const double x = pu[2 * i + axis];
            double* dst = (axis == 0 ? du : dv)->data() + i * d + axis * 2 * L;
            double freq = kPi;
            for (int l = 0; l < L; ++l, freq *= 2.0) {
                dst[2 * l + 0] = freq * std::cos(freq * x);
                dst[2 * l + 1] = -freq * std::sin(freq * x);
            }
        }
        if (cfg.include_input) {
            du->data()[i * d + 4 * L + 0] = 1.0;
            dv->data()[i * d + 4 * L + 1] = 1.0;
        }
    }
}

inline Tensor pos_encode(double u, double v, const PosEncodingConfig& cfg) {
    Tensor uv({1, 2}, {u, v});
    return pos_encode_batch(uv, cfg).reshaped({cfg.output_dim()});
}

// ---------------------------------------------------------------------------
// Parametric sampling grid

/// Cell-center grid over [-1,1]^2: ceil(sqrt(R)) cells per side, truncated to
/// R rows, u varying fastest. R=1 yields (0,0).
inline Tensor grid_uv(int r) {
    if (r < 1) throw contract_error("grid_uv: need R >= 1");
    const int g = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(r))));
    Tensor uv({r, 2});
    double* p = uv.data();
    for (int s = 0; s < r; ++s) {
        const int ju = s % g, jv = s / g;
        p[2 * s + 0] = -1.0 + 2.0 * (ju + 0.5) / g;
        p[2 * s + 1] = -1.0 + 2.0 * (jv + 0.5) / g;
    }
    return uv;
}

// Encoding of a fixed uv set plus its derivative tables; reusable across
// centers and iterations since it depends only on uv and the config.
struct EncodingTables {
    Tensor uv;         // (R,2)
    Tensor gamma;      // (R,D)
    Tensor dgamma_du;  // (R,D)
    Tensor dgamma_dv;  // (R,D)
};

inline EncodingTables make_encoding_tables(Tensor uv, const PosEncodingConfig& cfg) {
    EncodingTables t;
    t.gamma = pos_encode_batch(uv, cfg);
    pos_encode_jacobian(uv, cfg, &t.dgamma_du, &t.dgamma_dv);
    t.uv = std::move(uv);
    return t;
}

inline EncodingTables make_grid_tables(int r, const PosEncodingConfig& cfg) {
    return make_encoding_tables(grid_uv(r), cfg);
}

// ---------------------------------------------------------------------------
// Field parameters

// The first layer consumes the concatenation (encoding ⊕ feature); its weight
// is stored as the two row blocks field.l1.gw / field.l1.fw so the encoding
// and feature products can be formed separately. Both blocks are initialized
// with the combined fan-in. The final layer starts near zero so fresh patches
// hug their centers.
inline void init_field_params(ParamStore& store, const FieldConfig& cfg, int feature_dim,
                              Rng& rng) {
    if (feature_dim < 1) throw contract_error("init_field_params: feature_dim must be >= 1");
    const int d = cfg.encoding.output_dim(), h = cfg.hidden;
    store.set("field.l1.gw", init_weight(rng, {d, h}, d + feature_dim));
    store.set("field.l1.fw", init_weight(rng, {feature_dim, h}, d + feature_dim));
    store.set("field.l1.b", Tensor({h}));
    store.set("field.l2.w", init_linear_weight(rng, h, h));
    store.set("field.l2.b", Tensor({h}));
    Tensor w3({h, 3});
    for (std::int64_t i = 0; i < w3.size(); ++i) w3.data()[i] = rng.uniform(-0.01, 0.01);
    store.set("field.l3.w", std::move(w3));
    store.set("field.l3.b", Tensor({3}));
}

// ---------------------------------------------------------------------------
// Field evaluation

struct FieldEvalResult {
    Value points;   // (I*R, 3): row c*R + s is center c evaluated at uv row s
    Value normals;  // (I*R, 3): unit normals from d/du x d/dv
    Value du, dv;   // (I*R, 3): raw partial derivatives
    int centers = 0;
    int per_center = 0;
    int degenerate_normals = 0;  // rows where the cross product vanished
};

namespace detail {

// Forward-mode tangent rule for relu(x W + b) when only x carries a tangent:
// t_out = (t_in W) masked by the layer's activation pattern.
inline Value masked_tangent(const Value& t, const Value& w, const Tensor& mask) {
    return mul(matmul(t, w), Value(mask));
}

inline std::vector<std::int64_t> repeat_each(int count, int times) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(count) * times);
    for (int c = 0; c < count; ++c)
        for (int s = 0; s < times; ++s)
            idx[static_cast<std::size_t>(c) * times + s] = c;
    return idx;
}

inline std::vector<std::int64_t> tile_range(int count, int times) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(times) * count);
    for (int c = 0; c < times; ++c)
        for (int s = 0; s < count; ++s)
            idx[static_cast<std::size_t>(c) * count + s] = s;
    return idx;
}

}  // namespace detail

/// Evaluate every center's chart at every uv row of `enc`, with exact partial
/// derivatives carried through the network in forward mode (the relu masks of
/// the value pass gate the tangents). Normals are the normalized cross
/// product; rows whose cross product vanishes fall back to (0,0,1) and are
/// counted. When `orient_patch_normals` is set, each center's normals are
/// flipped to a nonnegative dot with that center's mean normal (the flip
/// signs are frozen constants under a replayed plan).
inline FieldEvalResult eval_field(const Tensor& centers, const Value& features,
                                  const EncodingTables& enc, const ParamValues& params,
                                  bool orient_patch_normals) {
    if (centers.rank() != 2 || centers.dim(1) != 3)
        throw contract_error("eval_field: centers must be (I,3)");
    const int i_count = centers.dim(0);
    if (features.val.rank() != 2 || features.val.dim(0) != i_count)
        throw contract_error("eval_field: features must be (I,F), got " +
                             features.val.shape_string() + " for " + std::to_string(i_count) +
                             " centers");
    const int r = enc.uv.dim(0);
    const int rows = i_count * r;

    const Value& gw = params.at("field.l1.gw");
    const Value& fw = params.at("field.l1.fw");
    const Value& b1 = params.at("field.l1.b");
    const Value& w2 = params.at("field.l2.w");
    const Value& b2 = params.at("field.l2.b");
    const Value& w3 = params.at("field.l3.w");
    const Value& b3 = params.at("field.l3.b");

    IndexVec rep = make_indices(detail::repeat_each(i_count, r));   // rows -> center
    IndexVec tile = make_indices(detail::tile_range(r, i_count));   // rows -> uv row

    // Layer 1: the encoding product is shared by all centers and the feature
    // product by all uv rows; both are formed small and spread by gather.
    Value enc_h = gather_rows(matmul(Value(enc.gamma), gw), tile);
    Value feat_h = gather_rows(matmul(features, fw), rep);
    ReluPair l1 = relu_pair(add_rowvec(add(enc_h, feat_h), b1));
    Value tu = mul(gather_rows(matmul(Value(enc.dgamma_du), gw), tile), Value(l1.mask));
    Value tv = mul(gather_rows(matmul(Value(enc.dgamma_dv), gw), tile), Value(l1.mask));

    ReluPair l2 = relu_pair(add_rowvec(matmul(l1.act, w2), b2));
    tu = detail::masked_tangent(tu, w2, l2.mask);
    tv = detail::masked_tangent(tv, w2, l2.mask);

    Value residual = add_rowvec(matmul(l2.act, w3), b3);
    Value du = matmul(tu, w3);
    Value dv = matmul(tv, w3);

    // Residual structure: points = x_i + theta(gamma ⊕ f). The tiled centers
    // are pure data, so the gather stays off the tape.
    Tensor center_rows = gather_rows(Value(centers), rep).val;
    Value points = add(residual, Value(center_rows));

    int degenerate = 0;
    Value normals = normalize3(cross3(du, dv), &degenerate);

    if (orient_patch_normals) {
        Graph* g = normals.graph;
        const Tensor& nv = normals.val;
        auto compute_signs = [&]() {
            Tensor s({rows, 1});
            const double* pn = nv.data();
            double* ps = s.data();
            for (int c = 0; c < i_count; ++c) {
                double mx = 0.0, my = 0.0, mz = 0.0;
                for (int k = 0; k < r; ++k) {
                    const double* n = pn + 3 * (c * r + k);
                    mx += n[0];
                    my += n[1];
                    mz += n[2];
                }
                for (int k = 0; k < r; ++k) {
                    const double* n = pn + 3 * (c * r + k);
                    const double dot = n[0] * mx + n[1] * my + n[2] * mz;
                    ps[c * r + k] = dot < 0.0 ? -1.0 : 1.0;
                }
            }
            return s;
        };
        Tensor signs = plan_aux(g, compute_signs);
        normals = mul_colvec(normals, Value(signs));
    }

    FieldEvalResult out;
    out.points = std::move(points);
    out.normals = std::move(normals);
    out.du = std::move(du);
    out.dv = std::move(dv);
    out.centers = i_count;
    out.per_center = r;
    out.degenerate_normals = degenerate;
    return out;
}

// ---------------------------------------------------------------------------
// Single-center conveniences

struct FieldSample {
    Tensor uv;       // (R,2)
    Value points;    // (R,3)
    Value normals;   // (R,3)
    int center_index = 0;
    int degenerate_normals = 0;
};

/// Chart value at one uv: x_i + theta(gamma(u,v) ⊕ f_i). `feature_row` is
/// (1,F), `center` is (1,3).
inline Value phi(double u, double v, const Value& feature_row, const Tensor& center,
                 const ParamValues& params, const PosEncodingConfig& enc_cfg) {
    Tensor uv({1, 2}, {u, v});
    return eval_field(center, feature_row, make_encoding_tables(std::move(uv), enc_cfg), params,
                      /*orient_patch_normals=*/false)
        .points;
}

/// Unit normal at one uv from the exact partials (no patch-level orientation).
inline Value phi_normal(double u, double v, const Value& feature_row, const Tensor& center,
                        const ParamValues& params, const PosEncodingConfig& enc_cfg,
                        int* degenerate = nullptr) {
    Tensor uv({1, 2}, {u, v});
    FieldEvalResult res = eval_field(center, feature_row, make_encoding_tables(std::move(uv), enc_cfg),
                                     params, /*orient_patch_normals=*/false);
    if (degenerate != nullptr) *degenerate = res.degenerate_normals;
    return res.normals;
}

/// R grid samples of center i's chart, with patch-oriented normals.
inline FieldSample sample_patch(const Tensor& centers, int center_index, const Value& features,
                                int r, const ParamValues& params,
                                const PosEncodingConfig& enc_cfg) {
    if (center_index < 0 || center_index >= centers.dim(0))
        throw contract_error("sample_patch: center index out of range");
    Tensor one_center({1, 3});
    for (int k = 0; k < 3; ++k) one_center.data()[k] = centers.data()[3 * center_index + k];
    Value one_feature = gather_rows(features, {static_cast<std::int64_t>(center_index)});
    EncodingTables enc = make_grid_tables(r, enc_cfg);
    FieldEvalResult res =
        eval_field(one_center, one_feature, enc, params, /*orient_patch_normals=*/true);
    FieldSample s;
    s.uv = enc.uv;
    s.points = std::move(res.points);
    s.normals = std::move(res.normals);
    s.center_index = center_index;
    s.degenerate_normals = res.degenerate_normals;
    return s;
}

// ---------------------------------------------------------------------------
// Projection blend

struct ProjResult {
    Value points;        // (M,3)
    Value normals;       // (M,3); defined only when the target carried normals
    bool has_normals = false;
    bool underflow = false;  // some query's raw nearest weight would underflow
    int degenerate_normals = 0;
};

namespace detail {

// Shared weighted blend over preselected neighbors. flat_idx lists k rows of q
// per query, nearest first. Weights use the max-stabilized form
// exp(-alpha (d^2 - d^2_min)) with the per-query minimum frozen as a plan
// constant; the normalized quotient is exactly the textbook one. Normals are
// sign-aligned to the nearest neighbor's normal (frozen signs) when `align`.
inline ProjResult weighted_blend(const Value& p, const Value& q, const Value* q_normals,
                                 IndexVec flat_idx, int k, double alpha, bool align = true) {
    const int m = p.val.dim(0);
    Graph* g = common_graph_of({&p, &q, q_normals});
    IndexVec rep = make_indices(detail::repeat_each(m, k));

    Value qg = gather_rows(q, flat_idx);
    Value pg = gather_rows(p, rep);
    Value d2 = reshape(sum_reduce(square(sub(qg, pg)), 1), {m, k});

    const Tensor& d2v = d2.val;
    auto compute_dmin = [&]() {
        Tensor t({m, 1});
        const double* pd = d2v.data();
        double* pt = t.data();
        for (int i = 0; i < m; ++i) {
            double best = pd[i * k];
            for (int j = 1; j < k; ++j) best = std::min(best, pd[i * k + j]);
            pt[i] = best;
        }
        return t;
    };
    Tensor dmin = plan_aux(g, compute_dmin);

    ProjResult out;
    for (int i = 0; i < m; ++i) {
        if (alpha * dmin.data()[i] > kWeightUnderflowExponent) {
            out.underflow = true;
            if (g != nullptr) g->flag("projection weights underflow; stabilized blend used");
            break;
        }
    }

    Value w = exp(mul_scalar(sub_colvec(d2, Value(dmin)), -alpha));
    Value wsum = reshape(sum_reduce(w, 1), {m, 1});
    Value num = sum_reduce(mul_bcast_last(reshape(qg, {m, k, 3}), w), 1);
    out.points = div_colvec(num, wsum);

    if (q_normals != nullptr) {
        Value ng = gather_rows(*q_normals, flat_idx);
        if (align) {
            const Tensor& ngv = ng.val;
            auto compute_signs = [&]() {
                Tensor s({m, k});
                const double* pn = ngv.data();
                double* ps = s.data();
                for (int i = 0; i < m; ++i) {
                    const double* ref = pn + 3 * (i * k);  // nearest neighbor's normal
                    for (int j = 0; j < k; ++j) {
                        const double* n = pn + 3 * (i * k + j);
                        const double dot = n[0] * ref[0] + n[1] * ref[1] + n[2] * ref[2];
                        ps[i * k + j] = dot < 0.0 ? -1.0 : 1.0;
                    }
                }
                return s;
            };
            Tensor signs = plan_aux(g, compute_signs);
            ng = mul_bcast_last(reshape(ng, {m, k, 3}), Value(signs));
            ng = reshape(ng, {m * k, 3});
        }
        Value nsum = sum_reduce(mul_bcast_last(reshape(ng, {m, k, 3}), w), 1);

        // A vanishing blend falls back to the nearest neighbor's normal: a
        // frozen rescue row is added where the blend is degenerate.
        const Tensor& nsv = nsum.val;
        const Tensor& ngv2 = ng.val;
        auto compute_rescue = [&]() {
            Tensor t({m, 3});
            const double* pv = nsv.data();
            const double* pn = ngv2.data();
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
            if (g != nullptr) g->flag("degenerate normal blend; nearest normal substituted");
        }
        out.normals = normalize3(nsum, &out.degenerate_normals);
        out.has_normals = true;
    }
    return out;
}

}  // namespace detail

/// Projection onto a sampled point set: each query blends its k nearest rows
/// of q with weights exp(-alpha d^2), normalized. Neighbor selection follows
/// current values and is frozen under a recorded plan.
inline ProjResult proj_points(const Value& p, const Value& q, const Value* q_normals, int k,
                              double alpha, const KdTree* q_tree = nullptr) {
    if (p.val.rank() != 2 || p.val.dim(1) != 3 || q.val.rank() != 2 || q.val.dim(1) != 3)
        throw contract_error("proj_points: p and q must be (M,3)/(N,3)");
    const int m = p.val.dim(0), n = q.val.dim(0);
    if (n == 0) throw contract_error("proj_points: empty target set");
    if (q_normals != nullptr &&
        (q_normals->val.rank() != 2 || q_normals->val.dim(0) != n || q_normals->val.dim(1) != 3))
        throw contract_error("proj_points: normals must match q");
    if (k < 1) throw contract_error("proj_points: k must be >= 1");
    const int kk = std::min(k, n);

    Graph* g = common_graph_of({&p, &q, q_normals});
    const Tensor& pv = p.val;
    const Tensor& qv = q.val;
    auto compute_knn = [&]() {
        std::vector<std::int64_t> idx(static_cast<std::size_t>(m) * kk);
        std::vector<int> nbrs;
        if (q_tree != nullptr) {
            for (int i = 0; i < m; ++i) {
                q_tree->knn(pv.data() + 3 * i, kk, nbrs);
                for (int j = 0; j < kk; ++j)
                    idx[static_cast<std::size_t>(i) * kk + j] = nbrs[static_cast<std::size_t>(j)];
            }
        } else {
            KdTree tree(qv);
            for (int i = 0; i < m; ++i) {
                tree.knn(pv.data() + 3 * i, kk, nbrs);
                for (int j = 0; j < kk; ++j)
                    idx[static_cast<std::size_t>(i) * kk + j] = nbrs[static_cast<std::size_t>(j)];
            }
        }
        return idx;
    };
    IndexVec flat_idx = plan_indices(g, compute_knn);
    return detail::weighted_blend(p, q, q_normals, std::move(flat_idx), kk, alpha);
}

/// Blocked projection: query row m is projected onto rows
/// [block[m]*rows_per_block, (block[m]+1)*rows_per_block) of q. Used when q is
/// the concatenation of many per-center patches.
inline ProjResult proj_points_blocked(const Value& p, const Value& q, const Value* q_normals,
                                      const std::vector<int>& block, int rows_per_block, int k,
                                      double alpha) {
    if (p.val.rank() != 2 || p.val.dim(1) != 3 || q.val.rank() != 2 || q.val.dim(1) != 3)
        throw contract_error("proj_points_blocked: p and q must be rank-2 with 3 columns");
    const int m = p.val.dim(0);
    if (static_cast<int>(block.size()) != m)
        throw contract_error("proj_points_blocked: one block per query required");
    if (rows_per_block < 1 || q.val.dim(0) % rows_per_block != 0)
        throw contract_error("proj_points_blocked: q rows must divide into blocks");
    const int nblocks = q.val.dim(0) / rows_per_block;
    const int kk = std::min(k, rows_per_block);

    Graph* g = common_graph_of({&p, &q, q_normals});
    const Tensor& pv = p.val;
    const Tensor& qv = q.val;
    auto compute_knn = [&]() {
        std::vector<std::int64_t> idx(static_cast<std::size_t>(m) * kk);
        std::vector<Neighbor> cand(static_cast<std::size_t>(rows_per_block));
        for (int i = 0; i < m; ++i) {
            const int b = block[static_cast<std::size_t>(i)];
            if (b < 0 || b >= nblocks)
                throw contract_error("proj_points_blocked: block index out of range");
            const double* pq = pv.data() + 3 * i;
            const std::int64_t base = static_cast<std::int64_t>(b) * rows_per_block;
            for (int j = 0; j < rows_per_block; ++j) {
                const double* r = qv.data() + 3 * (base + j);
                const double dx = pq[0] - r[0], dy = pq[1] - r[1], dz = pq[2] - r[2];
                cand[static_cast<std::size_t>(j)] = {dx * dx + dy * dy + dz * dz, j};
            }
            std::partial_sort(cand.begin(), cand.begin() + kk, cand.end());
            for (int j = 0; j < kk; ++j)
                idx[static_cast<std::size_t>(i) * kk + j] =
                    base + cand[static_cast<std::size_t>(j)].index;
        }
        return idx;
    };
    IndexVec flat_idx = plan_indices(g, compute_knn);
    return detail::weighted_blend(p, q, q_normals, std::move(flat_idx), kk, alpha);
}

/// Single-point projection (k nearest of q_set under exp(-alpha d^2) weights).
inline ProjResult proj(const double* point, const Value& q, const Value* q_normals, int k,
                       double alpha) {
    Tensor p({1, 3}, {point[0], point[1], point[2]});
    return proj_points(Value(p), q, q_normals, k, alpha);
}

/// Chart-and-back composition: project a 3D point onto a patch's sampled
/// points. The parametric pullback is never materialized; this composition is
/// its only observable form.
inline ProjResult phi_psi(const double* point, const FieldSample& patch, int k, double alpha) {
    return proj(point, patch.points, &patch.normals, k, alpha);
}

}  // namespace np
