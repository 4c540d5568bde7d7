#pragma once

#include <map>
#include <string>

#include "neural_points/graph.hpp"
#include "neural_points/optimizer.hpp"
#include "neural_points/rng.hpp"

namespace np {

// A named set of Values backed by a ParamStore. Built either as graph leaves
// (gradients flow to the store's names) or as plain constants (inference).
class ParamValues {
  public:
    static ParamValues leaves(Graph& g, const ParamStore& store) {
        ParamValues pv;
        for (const auto& [name, tensor] : store)
            pv.values_.emplace(name, g.leaf(name, tensor));
        return pv;
    }

    static ParamValues constants(const ParamStore& store) {
        ParamValues pv;
        for (const auto& [name, tensor] : store)
            pv.values_.emplace(name, Value(tensor));
        return pv;
    }

    const Value& at(const std::string& name) const {
        auto it = values_.find(name);
        if (it == values_.end())
            throw contract_error("ParamValues: no parameter named '" + name + "'");
        return it->second;
    }

    bool contains(const std::string& name) const { return values_.count(name) != 0; }

  private:
    std::map<std::string, Value> values_;
};

// He-style uniform init: entries ~ U(-b, b) with b = sqrt(6 / fan_in). The
// shaped variant covers weight blocks whose effective fan-in spans several
// tensors (a layer whose input is a concatenation stored as two matrices).
inline Tensor init_weight(Rng& rng, std::vector<int> shape, std::int64_t fan_in) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    Tensor w(std::move(shape));
    for (std::int64_t i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-bound, bound);
    return w;
}

inline Tensor init_linear_weight(Rng& rng, int fan_in, int fan_out) {
    return init_weight(rng, {fan_in, fan_out}, fan_in);
}

}  // namespace np
