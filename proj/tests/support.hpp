#pragma once

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "neural_points/graph.hpp"
#include "neural_points/optimizer.hpp"
#include "neural_points/rng.hpp"
#include "neural_points/tensor.hpp"

namespace test_support {

inline np::Tensor random_tensor(np::Rng& rng, std::vector<int> shape, double scale = 1.0) {
    np::Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < t.size(); ++i) t.data()[i] = scale * rng.normal();
    return t;
}

inline np::Tensor random_cloud(np::Rng& rng, int n, double scale = 1.0) {
    return random_tensor(rng, {n, 3}, scale);
}

/// Snap every entry to a multiple of 2^-bits so that adding small dyadic
/// offsets stays exact in double arithmetic.
inline void quantize(np::Tensor& t, int bits = 20) {
    const double s = static_cast<double>(1 << bits);
    for (std::int64_t i = 0; i < t.size(); ++i) t.data()[i] = std::round(t.data()[i] * s) / s;
}

inline np::Tensor translated(const np::Tensor& t, double dx, double dy, double dz) {
    np::Tensor out = t.clone();
    const double off[3] = {dx, dy, dz};
    for (int r = 0; r < out.dim(0); ++r)
        for (int c = 0; c < 3; ++c) out.data()[3 * r + c] += off[c];
    return out;
}

// Finite-difference verification of every parameter gradient of a model
// built by `build`. The model is recorded once (freezing data-dependent
// choices: relu masks, neighbor sets, sign conventions); the finite
// differences replay the frozen trace so only the parameter values move.
inline void check_param_grads_fd(const std::function<np::Value(const np::ParamStore&, np::Graph&)>& build,
                                 const np::ParamStore& store, double tol = 1e-4, double h = 1e-5,
                                 int stride = 1) {
    np::TracePlan plan;
    np::Graph graph;
    graph.set_plan(&plan, np::PlanMode::kRecord);
    np::Value loss = build(store, graph);
    REQUIRE(loss.val.size() == 1);
    graph.backward(loss);
    auto grads = graph.named_grads();

    auto eval = [&](const np::ParamStore& s) {
        plan.rewind();
        np::Graph g;
        g.set_plan(&plan, np::PlanMode::kReplay);
        return build(s, g).val.data()[0];
    };

    for (const auto& [name, base] : store) {
        const np::Tensor* grad = nullptr;
        auto it = grads.find(name);
        if (it != grads.end()) grad = &it->second;
        for (std::int64_t i = 0; i < base.size(); i += stride) {
            np::ParamStore hi_store;
            np::ParamStore lo_store;
            for (const auto& [n2, t2] : store) {
                hi_store.set(n2, t2);
                lo_store.set(n2, t2);
            }
            np::Tensor hi = base.clone();
            np::Tensor lo = base.clone();
            hi.data()[i] += h;
            lo.data()[i] -= h;
            hi_store.set(name, std::move(hi));
            lo_store.set(name, std::move(lo));
            const double fd = (eval(hi_store) - eval(lo_store)) / (2.0 * h);
            const double ad = grad != nullptr ? grad->data()[i] : 0.0;
            const double denom = std::max({std::abs(ad), std::abs(fd), 1e-2});
            INFO("param " << name << " entry " << i << " ad=" << ad << " fd=" << fd);
            CHECK(std::abs(ad - fd) <= tol * denom);
        }
    }
}

}  // namespace test_support
