#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>

#include "neural_points/errors.hpp"
#include "neural_points/tensor.hpp"

namespace np {

/// Named parameter tensors. std::map keeps iteration (and therefore
/// serialization) order deterministic.
class ParamStore {
public:
    using Map = std::map<std::string, Tensor>;

    void set(const std::string& name, Tensor t) { params_[name] = std::move(t); }

    const Tensor& at(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end())
            throw contract_error("ParamStore: no parameter named '" + name + "'");
        return it->second;
    }

    bool contains(const std::string& name) const { return params_.count(name) > 0; }
    std::size_t size() const { return params_.size(); }
    Map::const_iterator begin() const { return params_.begin(); }
    Map::const_iterator end() const { return params_.end(); }

    std::int64_t total_scalars() const {
        std::int64_t n = 0;
        for (const auto& [name, t] : params_) n += t.size();
        return n;
    }

private:
    Map params_;
};

struct SgdConfig {
    double lr = 0.01;
    double decay = 0.5;
    std::int64_t decay_interval = 250;
};

/// Plain gradient descent with stepwise learning-rate decay:
/// rate(step) = lr * decay^floor(step / decay_interval).
class Sgd {
public:
    explicit Sgd(SgdConfig cfg, std::int64_t start_step = 0)
        : cfg_(cfg), step_(start_step) {
        if (cfg.decay_interval <= 0)
            throw config_error("Sgd: decay_interval must be positive");
    }

    double current_lr() const {
        const auto k = step_ / cfg_.decay_interval;
        return cfg_.lr * std::pow(cfg_.decay, static_cast<double>(k));
    }

    std::int64_t step() const { return step_; }

    /// One descent step over every parameter present in `grads`. A non-finite
    /// gradient aborts before any parameter is touched.
    void apply(ParamStore& params, const std::map<std::string, Tensor>& grads) {
        for (const auto& [name, g] : grads) {
            if (!all_finite(g))
                throw training_error("Sgd: non-finite gradient for parameter '" + name + "'");
        }
        const double rate = current_lr();
        for (const auto& [name, g] : grads) {
            const Tensor& p = params.at(name);
            if (!p.same_shape(g))
                throw dimension_error("Sgd: gradient shape " + g.shape_string() +
                                      " does not match parameter '" + name + "' " +
                                      p.shape_string());
            Tensor next(p.shape());
            const double* pp = p.data();
            const double* pg = g.data();
            double* pn = next.data();
            for (std::int64_t i = 0, n = next.size(); i < n; ++i)
                pn[i] = pp[i] - rate * pg[i];
            params.set(name, std::move(next));
        }
        ++step_;
    }

private:
    SgdConfig cfg_;
    std::int64_t step_ = 0;
};

}  // namespace np
