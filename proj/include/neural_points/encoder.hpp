#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "neural_points/config.hpp"
#include "neural_points/graph.hpp"
#include "neural_points/knn.hpp"
#include "neural_points/params.hpp"

namespace np {

// Parameter layout: enc.conv{1..5}.{w,b} for the backbone EdgeConv layers,
// enc.agg.{w,b} for the post-concatenation aggregation layer. Each EdgeConv
// weight maps an edge feature of width 2*C_in to C_out; biases start at zero.
inline void init_encoder_params(ParamStore& store, const EncoderConfig& cfg, Rng& rng) {
    int in_dim = 3;
    for (std::size_t l = 0; l < cfg.layer_widths.size(); ++l) {
        const int out_dim = cfg.layer_widths[l];
        const std::string base = "enc.conv" + std::to_string(l + 1) + ".";
        store.set(base + "w", init_linear_weight(rng, 2 * in_dim, out_dim));
        store.set(base + "b", Tensor({out_dim}));
        in_dim = out_dim;
    }
    int concat_dim = 0;
    for (int w : cfg.layer_widths) concat_dim += w;
    store.set("enc.agg.w", init_linear_weight(rng, 2 * concat_dim, cfg.aggregation_width));
    store.set("enc.agg.b", Tensor({cfg.aggregation_width}));
}

namespace detail {

// EdgeConv over pre-flattened (point, neighbor) pairs: k pairs per point, pair
// r carrying edge feature f_center[r] concat (f_source[r] - f_center[r]), a linear
// map + bias + relu, then a max over each point's k pairs.
inline Value edge_conv_flat(const Value& feats, IndexVec centers, IndexVec sources, int k,
                            const Value& w, const Value& b) {
    const int n = feats.val.dim(0);
    const int cout = w.val.dim(1);
    Value fc = gather_rows(feats, std::move(centers));
    Value fs = gather_rows(feats, std::move(sources));
    Value edge = concat(1, fc, sub(fs, fc));
    Value h = relu(add_rowvec(matmul(edge, w), b));
    return max_reduce(reshape(h, {n, k, cout}), 1);
}

}  // namespace detail

/// One EdgeConv layer over an explicit neighbor graph:
/// out_i = max_{j in graph[i]} relu((f_i concat (f_j - f_i)) W + b).
/// Every point must list the same number of neighbors.
inline Value edge_conv(const Value& feats, const std::vector<std::vector<int>>& graph,
                       const Value& w, const Value& b) {
    if (feats.val.rank() != 2) throw contract_error("edge_conv: features must be rank 2");
    const int n = feats.val.dim(0);
    if (n == 0) throw contract_error("edge_conv: empty input");
    if (static_cast<int>(graph.size()) != n)
        throw contract_error("edge_conv: graph lists " + std::to_string(graph.size()) +
                             " points for " + std::to_string(n) + " feature rows");
    const std::size_t k = graph[0].size();
    if (k == 0) throw contract_error("edge_conv: empty neighbor list");
    if (static_cast<int>(k) > n)
        throw contract_error("edge_conv: k = " + std::to_string(k) + " exceeds point count " +
                             std::to_string(n));
    std::vector<std::int64_t> centers, sources;
    centers.reserve(static_cast<std::size_t>(n) * k);
    sources.reserve(static_cast<std::size_t>(n) * k);
    for (int i = 0; i < n; ++i) {
        if (graph[static_cast<std::size_t>(i)].size() != k)
            throw contract_error("edge_conv: neighbor lists must have uniform length");
        for (int j : graph[static_cast<std::size_t>(i)]) {
            if (j < 0 || j >= n) throw contract_error("edge_conv: neighbor index out of range");
            centers.push_back(i);
            sources.push_back(j);
        }
    }
    return detail::edge_conv_flat(feats, make_indices(std::move(centers)),
                                  make_indices(std::move(sources)), static_cast<int>(k), w, b);
}

/// Exact k-NN graph among the rows of an (N,C) feature matrix, self included,
/// neighbors ascending by (squared distance, index).
inline std::vector<std::vector<int>> feature_knn(const Tensor& feats, int k) {
    if (feats.rank() != 2) throw contract_error("feature_knn: features must be rank 2");
    const int n = feats.dim(0), c = feats.dim(1);
    if (k < 1 || k > n) throw contract_error("feature_knn: need 1 <= k <= N");
    std::vector<std::vector<int>> graph(static_cast<std::size_t>(n));
    std::vector<Neighbor> cand(static_cast<std::size_t>(n));
    const double* p = feats.data();
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            double d2 = 0.0;
            for (int t = 0; t < c; ++t) {
                const double d = p[i * c + t] - p[j * c + t];
                d2 += d * d;
            }
            cand[static_cast<std::size_t>(j)] = {d2, j};
        }
        std::partial_sort(cand.begin(), cand.begin() + k, cand.end());
        auto& row = graph[static_cast<std::size_t>(i)];
        row.resize(static_cast<std::size_t>(k));
        for (int m = 0; m < k; ++m) row[static_cast<std::size_t>(m)] = cand[static_cast<std::size_t>(m)].index;
    }
    return graph;
}

// Everything about a cloud's neighborhoods that does not depend on parameters:
// the spatial KNN of every point, its decentralized minipatch, the flattened
// within-minipatch pair graph, and the indices for the final neighbor pooling.
// Cacheable across iterations while a cloud's coordinates are fixed.
struct EncoderPlanData {
    int patch = 0;                              // points per minipatch
    Tensor minipatch;                           // (N*patch, 3), row i*patch+m = x_knn[i][m] - x_i
    std::vector<std::vector<int>> spatial_knn;  // per point, its patch cloud indices
    IndexVec pair_centers;                      // (N*patch*patch) flattened complete graph
    IndexVec pair_sources;
    IndexVec pool_sources;                      // (N*patch) rows of f_star pooled into f
};

inline EncoderPlanData prepare_encoder_input(const Tensor& points, int knn_k) {
    if (points.rank() != 2 || points.dim(1) != 3)
        throw contract_error("prepare_encoder_input: points must be (N,3)");
    const int n = points.dim(0);
    if (n == 0) throw contract_error("prepare_encoder_input: empty cloud");
    if (knn_k < 1) throw contract_error("prepare_encoder_input: knn_k must be >= 1");
    const int p = std::min(knn_k, n);  // mirrors the KNN clamp for tiny clouds
    KdTree tree(points);

    EncoderPlanData pd;
    pd.patch = p;
    pd.spatial_knn.resize(static_cast<std::size_t>(n));
    Tensor mp({n * p, 3});
    double* pm = mp.data();
    const double* px = points.data();
    std::vector<std::int64_t> centers(static_cast<std::size_t>(n) * p * p);
    std::vector<std::int64_t> sources(static_cast<std::size_t>(n) * p * p);
    std::vector<std::int64_t> pool(static_cast<std::size_t>(n) * p);
    for (int i = 0; i < n; ++i) {
        auto& nbrs = pd.spatial_knn[static_cast<std::size_t>(i)];
        tree.knn(px + 3 * i, p, nbrs);
        for (int m = 0; m < p; ++m) {
            const int j = nbrs[static_cast<std::size_t>(m)];
            const std::int64_t r = static_cast<std::int64_t>(i) * p + m;
            pm[3 * r + 0] = px[3 * j + 0] - px[3 * i + 0];
            pm[3 * r + 1] = px[3 * j + 1] - px[3 * i + 1];
            pm[3 * r + 2] = px[3 * j + 2] - px[3 * i + 2];
            pool[static_cast<std::size_t>(r)] = j;
            for (int q = 0; q < p; ++q) {
                const std::size_t e = static_cast<std::size_t>(r) * p + q;
                centers[e] = r;
                sources[e] = static_cast<std::int64_t>(i) * p + q;
            }
        }
    }
    pd.minipatch = std::move(mp);
    pd.pair_centers = make_indices(std::move(centers));
    pd.pair_sources = make_indices(std::move(sources));
    pd.pool_sources = make_indices(std::move(pool));
    return pd;
}

struct LocalFeatures {
    Value f_star;  // (N, C) per-point feature before neighbor pooling
    Value f;       // (N, 2C) final feature: f_star concat max over spatial neighbors
};

// Per point: decentralized KNN minipatch -> 5 EdgeConv layers (the within-
// minipatch graph has k equal to the minipatch size, so the dynamic per-layer
// graph is the complete graph in every feature space) -> concatenation of all
// layer outputs -> aggregation EdgeConv -> max over the minipatch -> f_star;
// f = f_star concat max over the spatial neighbors' f_star.
inline LocalFeatures extract_local_features(const EncoderPlanData& pd, const ParamValues& params) {
    const int rows = pd.minipatch.dim(0);
    const int n = rows / pd.patch;
    Value cur{pd.minipatch};
    std::vector<Value> outs;
    outs.reserve(5);
    for (int l = 1; l <= 5; ++l) {
        const std::string base = "enc.conv" + std::to_string(l) + ".";
        cur = detail::edge_conv_flat(cur, pd.pair_centers, pd.pair_sources, pd.patch,
                                     params.at(base + "w"), params.at(base + "b"));
        outs.push_back(cur);
    }
    Value cat = concat(1, outs);
    Value agg = detail::edge_conv_flat(cat, pd.pair_centers, pd.pair_sources, pd.patch,
                                       params.at("enc.agg.w"), params.at("enc.agg.b"));
    const int cagg = agg.val.dim(1);
    Value f_star = max_reduce(reshape(agg, {n, pd.patch, cagg}), 1);
    Value pooled = max_reduce(reshape(gather_rows(f_star, pd.pool_sources), {n, pd.patch, cagg}), 1);
    Value f = concat(1, f_star, pooled);
    return {std::move(f_star), std::move(f)};
}

inline LocalFeatures extract_local_features(const Tensor& points, const EncoderConfig& cfg,
                                            const ParamValues& params) {
    return extract_local_features(prepare_encoder_input(points, cfg.knn), params);
}

}  // namespace np
