#pragma once

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "neural_points/config.hpp"
#include "neural_points/encoder.hpp"
#include "neural_points/field.hpp"
#include "neural_points/integrate.hpp"
#include "neural_points/point_cloud.hpp"
#include "neural_points/sampling.hpp"

namespace np {

// ---------------------------------------------------------------------------
// Target counts and per-chart sample budgets

/// Non-integer factors are legal: the target count is the rounded product.
inline int target_count_from_factor(double factor, int input_count) {
    if (!(factor > 0.0)) throw contract_error("target count: factor must be positive");
    if (input_count < 1) throw contract_error("target count: empty input");
    const long long j = std::llround(factor * input_count);
    if (j < 1) throw contract_error("target count: factor too small for this input");
    return static_cast<int>(j);
}

/// Default per-chart sample count: floor(4 J / I), at least 1.
inline int default_per_patch(int input_count, int target_count) {
    if (input_count < 1 || target_count < 1)
        throw contract_error("per-patch rule: counts must be positive");
    const long long r = 4LL * target_count / input_count;
    return static_cast<int>(std::max(1LL, r));
}

struct UpsampleRequest {
    PointCloud input;
    int target_count = 0;  // J; use target_count_from_factor for fractional factors
    int per_patch = 0;     // R; 0 applies the default rule
    int anchors = 0;       // chart-extraction anchors; 0 picks enough for <= patch_size cells
};

// ---------------------------------------------------------------------------
// Union of chart samples

struct SampleUnion {
    Tensor points;   // (sum of R over charts, 3)
    Tensor normals;  // same shape
    std::vector<std::pair<int, int>> provenance;  // (chart id, sample row)
};

/// Concatenates per-chart samples; every chart must carry the same count.
inline SampleUnion build_union(const std::vector<FieldSample>& charts) {
    if (charts.empty()) throw contract_error("build_union: no charts");
    const int r = charts.front().points.val.dim(0);
    for (const FieldSample& c : charts)
        if (c.points.val.dim(0) != r || c.normals.val.dim(0) != r)
            throw contract_error("build_union: charts carry unequal sample counts");
    const int total = static_cast<int>(charts.size()) * r;
    SampleUnion u;
    u.points = Tensor({total, 3});
    u.normals = Tensor({total, 3});
    u.provenance.reserve(static_cast<std::size_t>(total));
    int row = 0;
    for (const FieldSample& c : charts) {
        std::copy_n(c.points.val.data(), 3 * r, u.points.data() + 3 * row);
        std::copy_n(c.normals.val.data(), 3 * r, u.normals.data() + 3 * row);
        for (int s = 0; s < r; ++s) u.provenance.emplace_back(c.center_index, s);
        row += r;
    }
    return u;
}

/// Splits a batched field evaluation into per-chart samples tagged with the
/// given chart ids.
inline std::vector<FieldSample> split_samples(const FieldEvalResult& fields, const Tensor& uv,
                                              const std::vector<int>& chart_ids) {
    if (static_cast<int>(chart_ids.size()) != fields.centers)
        throw contract_error("split_samples: one chart id per center required");
    const int r = fields.per_center;
    std::vector<FieldSample> out(chart_ids.size());
    for (int c = 0; c < fields.centers; ++c) {
        Tensor pts({r, 3}), nrm({r, 3});
        std::copy_n(fields.points.val.data() + 3 * c * r, 3 * r, pts.data());
        std::copy_n(fields.normals.val.data() + 3 * c * r, 3 * r, nrm.data());
        FieldSample& s = out[static_cast<std::size_t>(c)];
        s.uv = uv;
        s.points = Value(std::move(pts));
        s.normals = Value(std::move(nrm));
        s.center_index = chart_ids[static_cast<std::size_t>(c)];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Target selection and surface pull

/// Farthest point sampling of j rows; j equal to the row count returns every
/// row. The caller guarantees j <= |X_R| (the pipeline raises R beforehand).
inline std::vector<int> subsample_targets(const Tensor& xr, int j, int first_index = 0) {
    return farthest_point_sample(xr, j, first_index);
}

struct PulledCloud {
    PointCloud cloud;
    bool far_query = false;
    bool underflow = false;
    int degenerate_normals = 0;
};

/// Evaluates the integrated surface map at every query row.
inline PulledCloud pull_to_surface(const Tensor& ystar, const GlobalField& gf) {
    RhoResult r = rho_batch(Value(ystar), gf);
    PulledCloud out;
    out.cloud.points = r.points.val;
    out.cloud.normals = r.normals.val;
    out.far_query = r.far_query;
    out.underflow = r.underflow;
    out.degenerate_normals = r.degenerate_normals;
    return out;
}

// ---------------------------------------------------------------------------
// Anchored chart extraction

namespace detail {

/// Each point joins its nearest anchor's cell (ties to the lower anchor id);
/// the anchor count doubles until every cell fits the patch size.
struct AnchorLayout {
    std::vector<int> anchor_ids;          // indices into the input cloud
    std::vector<std::vector<int>> cells;  // owned input indices per anchor
};

inline AnchorLayout assign_anchors(const Tensor& points, int requested, int patch_size) {
    const int n = points.dim(0);
    int a = requested > 0 ? std::min(requested, n)
                          : std::min(n, std::max(1, (n + patch_size - 1) / patch_size));
    for (;;) {
        AnchorLayout layout;
        layout.anchor_ids = farthest_point_sample(points, a, 0);
        Tensor anchor_pts({a, 3});
        for (int j = 0; j < a; ++j)
            std::copy_n(points.data() + 3 * layout.anchor_ids[static_cast<std::size_t>(j)], 3,
                        anchor_pts.data() + 3 * j);
        KdTree tree(anchor_pts);
        layout.cells.assign(static_cast<std::size_t>(a), {});
        for (int i = 0; i < n; ++i) {
            const int owner = tree.nearest(points.data() + 3 * i);
            layout.cells[static_cast<std::size_t>(owner)].push_back(i);
        }
        std::size_t largest = 0;
        for (const auto& c : layout.cells) largest = std::max(largest, c.size());
        if (static_cast<int>(largest) <= patch_size || a == n) return layout;
        a = std::min(n, 2 * a);  // halve cells until they fit
    }
}

/// Cell indices padded with the nearest outside points to the anchor until
/// the patch reaches min(patch_size, N); the cell occupies the front rows.
inline std::vector<int> pad_cell(const Tensor& points, const KdTree& tree,
                                 const std::vector<int>& cell, int anchor_id, int patch_size) {
    const int n = points.dim(0);
    const int want = std::min(patch_size, n);
    std::vector<int> patch = cell;
    if (static_cast<int>(patch.size()) >= want) return patch;
    std::vector<char> in_patch(static_cast<std::size_t>(n), 0);
    for (int i : cell) in_patch[static_cast<std::size_t>(i)] = 1;
    // The anchor's k nearest can overlap the cell entirely; widen until the
    // patch fills (k = n always suffices).
    for (int k = want; static_cast<int>(patch.size()) < want; k = std::min(n, 2 * k)) {
        for (int nb : tree.knn(points.data() + 3 * anchor_id, k)) {
            if (static_cast<int>(patch.size()) >= want) break;
            if (!in_patch[static_cast<std::size_t>(nb)]) {
                in_patch[static_cast<std::size_t>(nb)] = 1;
                patch.push_back(nb);
            }
        }
    }
    return patch;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Full pipeline

struct UpsampleResult {
    PointCloud cloud;  // exactly J points with unit normals, input frame
    int per_patch = 0;       // R actually used
    int anchor_count = 0;    // charts were extracted around this many anchors
    bool far_query = false;
    bool underflow = false;
    int degenerate_normals = 0;
};

/// Input cloud -> unit ball -> per-anchor patches -> local features -> chart
/// samples -> union -> farthest-point selection of J -> integrated-surface
/// pull -> original frame.
inline UpsampleResult upsample(const UpsampleRequest& req, const ParamStore& params,
                               const ModelConfig& cfg) {
    validate_cloud(req.input, "upsample");
    const int i_count = req.input.size();
    const int j = req.target_count;
    if (j < 1) throw contract_error("upsample: target count must be >= 1");

    int r = req.per_patch > 0 ? req.per_patch : default_per_patch(i_count, j);
    if (static_cast<long long>(i_count) * r < j)  // raise R to ceil(J/I)+1
        r = static_cast<int>((static_cast<long long>(j) + i_count - 1) / i_count + 1);

    NormalizeResult norm = normalize_unit_ball(req.input);
    Tensor work = std::move(norm.cloud.points);

    detail::AnchorLayout layout = detail::assign_anchors(work, req.anchors, cfg.patch_size);
    KdTree tree(work);
    ParamValues pv = ParamValues::constants(params);
    EncodingTables enc = make_grid_tables(r, cfg.field.encoding);

    std::vector<FieldSample> charts(static_cast<std::size_t>(i_count));
    for (std::size_t a = 0; a < layout.cells.size(); ++a) {
        const std::vector<int>& cell = layout.cells[a];
        if (cell.empty()) continue;
        std::vector<int> patch = detail::pad_cell(work, tree, cell, layout.anchor_ids[a],
                                                  cfg.patch_size);
        Tensor patch_pts({static_cast<int>(patch.size()), 3});
        for (std::size_t p = 0; p < patch.size(); ++p)
            std::copy_n(work.data() + 3 * patch[p], 3, patch_pts.data() + 3 * p);

        LocalFeatures lf = extract_local_features(patch_pts, cfg.encoder, pv);
        // Owned points occupy the front rows of the padded patch.
        std::vector<std::int64_t> owned(cell.size());
        for (std::size_t p = 0; p < cell.size(); ++p) owned[p] = static_cast<std::int64_t>(p);
        Value feats = gather_rows(lf.f, owned);
        Tensor centers({static_cast<int>(cell.size()), 3});
        std::copy_n(patch_pts.data(), 3 * cell.size(), centers.data());

        FieldEvalResult fields = eval_field(centers, feats, enc, pv, true);
        std::vector<FieldSample> split = split_samples(fields, enc.uv, cell);
        for (std::size_t c = 0; c < cell.size(); ++c)
            charts[static_cast<std::size_t>(cell[c])] = std::move(split[c]);
    }

    SampleUnion xr = build_union(charts);

    // Assemble the blended surface over all charts in input order.
    FieldEvalResult global;
    global.centers = i_count;
    global.per_center = r;
    global.points = Value(xr.points);
    global.normals = Value(xr.normals);
    GlobalField gf = make_global_field(work, std::move(global), cfg);

    std::vector<int> picked = subsample_targets(xr.points, j, 0);
    Tensor ystar({j, 3});
    for (int s = 0; s < j; ++s)
        std::copy_n(xr.points.data() + 3 * picked[static_cast<std::size_t>(s)], 3,
                    ystar.data() + 3 * s);

    PulledCloud pulled = pull_to_surface(ystar, gf);
    pulled.cloud.points = invert_transform(norm.transform, pulled.cloud.points);

    UpsampleResult out;
    out.cloud = std::move(pulled.cloud);
    out.per_patch = r;
    out.anchor_count = static_cast<int>(layout.anchor_ids.size());
    out.far_query = pulled.far_query;
    out.underflow = pulled.underflow;
    out.degenerate_normals = pulled.degenerate_normals;
    return out;
}

}  // namespace np
