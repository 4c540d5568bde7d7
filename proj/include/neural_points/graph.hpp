#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "neural_points/errors.hpp"
#include "neural_points/tensor.hpp"

namespace np {

using EigenRowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<EigenRowMat>;
using ConstMatMap = Eigen::Map<const EigenRowMat>;

inline ConstMatMap as_matrix(const Tensor& t) {
    return ConstMatMap(t.data(), t.rows(), t.cols());
}
inline MatMap as_matrix(Tensor& t) { return MatMap(t.data(), t.rows(), t.cols()); }

enum class OpKind {
    kLeaf,
    kMatmul,
    kAdd,
    kAddRowvec,
    kSub,
    kSubColvec,
    kMul,
    kMulScalar,
    kMulColvec,
    kMulBcastLast,
    kDiv,
    kDivColvec,
    kRelu,
    kExp,
    kSin,
    kCos,
    kSquare,
    kConcat,
    kMaxReduce,
    kSumReduce,
    kSumAll,
    kGatherRows,
    kReshape,
    kCross3,
    kL2Norm,
    kNormalize3,
};

inline const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::kLeaf: return "leaf";
        case OpKind::kMatmul: return "matmul";
        case OpKind::kAdd: return "add";
        case OpKind::kAddRowvec: return "add_rowvec";
        case OpKind::kSub: return "sub";
        case OpKind::kSubColvec: return "sub_colvec";
        case OpKind::kMul: return "mul";
        case OpKind::kMulScalar: return "mul_scalar";
        case OpKind::kMulColvec: return "mul_colvec";
        case OpKind::kMulBcastLast: return "mul_bcast_last";
        case OpKind::kDiv: return "div";
        case OpKind::kDivColvec: return "div_colvec";
        case OpKind::kRelu: return "relu";
        case OpKind::kExp: return "exp";
        case OpKind::kSin: return "sin";
        case OpKind::kCos: return "cos";
        case OpKind::kSquare: return "square";
        case OpKind::kConcat: return "concat";
        case OpKind::kMaxReduce: return "max_reduce";
        case OpKind::kSumReduce: return "sum_reduce";
        case OpKind::kSumAll: return "sum_all";
        case OpKind::kGatherRows: return "gather_rows";
        case OpKind::kReshape: return "reshape";
        case OpKind::kCross3: return "cross3";
        case OpKind::kL2Norm: return "l2norm";
        case OpKind::kNormalize3: return "normalize3";
    }
    return "?";
}

using IndexVec = std::shared_ptr<const std::vector<std::int64_t>>;

inline IndexVec make_indices(std::vector<std::int64_t> v) {
    return std::make_shared<const std::vector<std::int64_t>>(std::move(v));
}

struct OpAttrs {
    int axis = -1;
    double scalar = 0.0;
    IndexVec indices;
    std::vector<int> shape;  // reshape target
};

struct Node {
    OpKind kind = OpKind::kLeaf;
    std::vector<int> input_ids;       // -1 for constant inputs
    std::vector<Tensor> input_values; // forward values of all inputs
    Tensor output;
    OpAttrs attrs;
    Tensor aux;       // relu mask / degenerate-row mask
    IndexVec arg_idx; // max_reduce winners
    std::string name; // leaf parameter name
};

/// Recorded discrete structure of one pipeline evaluation: relu masks,
/// neighbor index sets, and detached sign/constant tensors, in call order.
/// Replaying a plan freezes every discrete decision, which makes the traced
/// computation a smooth function of the parameters (used by the
/// finite-difference gradient checks).
struct TracePlan {
    std::vector<Tensor> masks;
    std::vector<IndexVec> index_sets;
    std::vector<Tensor> aux;
    std::size_t mask_cursor = 0;
    std::size_t index_cursor = 0;
    std::size_t aux_cursor = 0;

    void rewind() { mask_cursor = index_cursor = aux_cursor = 0; }
};

enum class PlanMode { kNone, kRecord, kReplay };

class Graph;

/// A tensor value optionally attached to a recording graph. Values with no
/// graph (or produced purely from constants) are plain eager results.
struct Value {
    Tensor val;
    Graph* graph = nullptr;
    int node = -1;

    Value() = default;
    Value(Tensor t) : val(std::move(t)) {}  // constant
    Value(Tensor t, Graph* g, int n) : val(std::move(t)), graph(g), node(n) {}

    bool tracked() const { return graph != nullptr && node >= 0; }
    const std::vector<int>& shape() const { return val.shape(); }
};

inline Value constant(Tensor t) { return Value(std::move(t)); }

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// vector is already a topological order; backward is a single reverse scan
/// that visits each node exactly once.
class Graph {
public:
    Value leaf(const std::string& name, Tensor value) {
        Node n;
        n.kind = OpKind::kLeaf;
        n.output = value;
        n.name = name;
        nodes_.push_back(std::move(n));
        const int id = static_cast<int>(nodes_.size()) - 1;
        leaves_.emplace_back(name, id);
        return Value(std::move(value), this, id);
    }

    int record(Node n) {
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    std::size_t node_count() const { return nodes_.size(); }
    const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }

    void backward(const Value& loss);

    /// Gradient of the last backward's loss w.r.t. `v` (zeros if unreached).
    Tensor grad(const Value& v) const {
        if (!v.tracked() || v.graph != this)
            throw contract_error("Graph::grad: value does not belong to this graph");
        const Tensor& g = grads_[static_cast<std::size_t>(v.node)];
        if (!g.defined()) return Tensor(v.val.shape());
        return g;
    }

    /// Gradients for every registered leaf, in name order. Unreachable
    /// leaves get zero tensors.
    std::map<std::string, Tensor> named_grads() const {
        std::map<std::string, Tensor> out;
        for (const auto& [name, id] : leaves_) {
            const Tensor& g = grads_[static_cast<std::size_t>(id)];
            out[name] = g.defined() ? g : Tensor(nodes_[static_cast<std::size_t>(id)].output.shape());
        }
        return out;
    }

    // --- discrete-structure plan -------------------------------------------
    void set_plan(TracePlan* plan, PlanMode mode) {
        plan_ = plan;
        mode_ = plan ? mode : PlanMode::kNone;
    }
    TracePlan* plan() { return plan_; }
    PlanMode plan_mode() const { return mode_; }

    Tensor plan_mask(const std::function<Tensor()>& compute) {
        if (mode_ == PlanMode::kReplay) {
            if (plan_->mask_cursor >= plan_->masks.size())
                throw contract_error("TracePlan: mask replay exhausted");
            return plan_->masks[plan_->mask_cursor++];
        }
        Tensor m = compute();
        if (mode_ == PlanMode::kRecord) plan_->masks.push_back(m);
        return m;
    }

    const std::vector<std::string>& degeneracy_flags() const { return flags_; }
    void flag(std::string s) { flags_.push_back(std::move(s)); }

private:
    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
    std::vector<std::pair<std::string, int>> leaves_;
    std::vector<std::string> flags_;
    TracePlan* plan_ = nullptr;
    PlanMode mode_ = PlanMode::kNone;

    void accumulate(int id, Tensor contribution);
};

/// Frozen index sets for pipeline-level discrete decisions (KNN graphs, FPS
/// selections, neighbor assignments). In replay mode the recorded indices are
/// returned instead of recomputing them.
inline IndexVec plan_indices(Graph* g, const std::function<std::vector<std::int64_t>()>& compute) {
    if (g != nullptr && g->plan_mode() == PlanMode::kReplay) {
        TracePlan* p = g->plan();
        if (p->index_cursor >= p->index_sets.size())
            throw contract_error("TracePlan: index replay exhausted");
        return p->index_sets[p->index_cursor++];
    }
    IndexVec idx = make_indices(compute());
    if (g != nullptr && g->plan_mode() == PlanMode::kRecord) g->plan()->index_sets.push_back(idx);
    return idx;
}

/// Frozen detached tensors (orientation signs, stabilization offsets).
inline Tensor plan_aux(Graph* g, const std::function<Tensor()>& compute) {
    if (g != nullptr && g->plan_mode() == PlanMode::kReplay) {
        TracePlan* p = g->plan();
        if (p->aux_cursor >= p->aux.size())
            throw contract_error("TracePlan: aux replay exhausted");
        return p->aux[p->aux_cursor++];
    }
    Tensor t = compute();
    if (g != nullptr && g->plan_mode() == PlanMode::kRecord) g->plan()->aux.push_back(t);
    return t;
}

// ---------------------------------------------------------------------------
// shape helpers

namespace detail {

inline void require(bool cond, OpKind op, const std::string& what) {
    if (!cond) throw dimension_error(std::string(op_name(op)) + ": " + what);
}

inline void require_same_shape(OpKind op, const Tensor& a, const Tensor& b) {
    require(a.same_shape(b), op,
            "shape mismatch " + a.shape_string() + " vs " + b.shape_string());
}

inline Graph* common_graph(std::initializer_list<const Value*> vs) {
    Graph* g = nullptr;
    for (const Value* v : vs) {
        if (v->graph == nullptr) continue;
        if (g != nullptr && g != v->graph)
            throw contract_error("op inputs belong to different graphs");
        g = v->graph;
    }
    return g;
}

inline Value emit(Graph* g, OpKind kind, std::vector<const Value*> inputs, Tensor out,
                  OpAttrs attrs = {}, Tensor aux = {}, IndexVec arg_idx = {}) {
    if (g == nullptr) return Value(std::move(out));
    Node n;
    n.kind = kind;
    n.attrs = std::move(attrs);
    n.aux = std::move(aux);
    n.arg_idx = std::move(arg_idx);
    n.output = out;
    n.input_ids.reserve(inputs.size());
    n.input_values.reserve(inputs.size());
    for (const Value* v : inputs) {
        n.input_ids.push_back(v->graph == g ? v->node : -1);
        n.input_values.push_back(v->val);
    }
    const int id = g->record(std::move(n));
    return Value(std::move(out), g, id);
}

}  // namespace detail

/// Graph shared by the non-null values (nullptr entries are skipped); null
/// when every input is a plain constant.
inline Graph* common_graph_of(std::initializer_list<const Value*> vs) {
    Graph* g = nullptr;
    for (const Value* v : vs) {
        if (v == nullptr || v->graph == nullptr) continue;
        if (g != nullptr && g != v->graph)
            throw contract_error("op inputs belong to different graphs");
        g = v->graph;
    }
    return g;
}

// ---------------------------------------------------------------------------
// operations

inline Value matmul(const Value& a, const Value& b) {
    detail::require(a.val.rank() == 2 && b.val.rank() == 2, OpKind::kMatmul,
                    "rank-2 operands required, got " + a.val.shape_string() + " and " +
                        b.val.shape_string());
    detail::require(a.val.dim(1) == b.val.dim(0), OpKind::kMatmul,
                    "inner dimensions disagree " + a.val.shape_string() + " x " +
                        b.val.shape_string());
    Tensor out({a.val.dim(0), b.val.dim(1)});
    as_matrix(out).noalias() = as_matrix(a.val) * as_matrix(b.val);
    return detail::emit(detail::common_graph({&a, &b}), OpKind::kMatmul, {&a, &b},
                        std::move(out));
}

inline Value add(const Value& a, const Value& b) {
    detail::require_same_shape(OpKind::kAdd, a.val, b.val);
    Tensor out(a.val.shape());
    const double* pa = a.val.data();
    const double* pb = b.val.data();
    double* po = out.data();
    for (std::int64_t i = 0, n = out.size(); i < n; ++i) po[i] = pa[i] + pb[i];
    return detail::emit(detail::common_graph({&a, &b}), OpKind::kAdd, {&a, &b}, std::move(out));
}

inline Value add_rowvec(const Value& a, const Value& b) {
    detail::require(a.val.rank() == 2, OpKind::kAddRowvec, "matrix operand must be rank 2");
    detail::require(b.val.size() == a.val.dim(1), OpKind::kAddRowvec,
                    "row vector length " + b.val.shape_string() + " does not match " +
                        a.val.shape_string());
    Tensor out(a.val.shape());
    const int rows = a.val.dim(0), cols = a.val.dim(1);
    const double* pa = a.val.data();
    const double* pb = b.val.data();
    double* po = out.data();
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) po[r * cols + c] = pa[r * cols + c] + pb[c];
    return detail::emit(detail::common_graph({&a, &b}), OpKind::kAddRowvec, {&a, &b},
                        std::move(out));
}

inline Value sub(const Value& a, const Value& b) {
    detail::require_same_shape(OpKind::kSub, a.val, b.val);
    Tensor out(a.val.shape());
    const double* pa = a.val.data();
    const double* pb = b.val.data();
    double* po = out.data();
    for (std::int64_t i = 0, n = out.size(); i < n; ++i) po[i] = pa[i] - pb[i];
    return detail::emit(detail::common_graph({&a, &b}), OpKind::kSub, {&a, &b}, std::move(out));
}

inline Value sub_colvec(const Value& a, const Value& b) {
    detail::require(a.val.rank() == 2 && b.val.rank() == 2 && b.val.dim(1) == 1 &&
                        b.val.dim(0) == a.val.dim(0),
                    OpKind::kSubColvec,
                    "need (M,N) and (M,1), got " + a.val.shape_string() + " and " +
                        b.val.shape_string());
    Tensor out(a.val.shape());
    const int rows = a.val.dim(0), cols = a.val.dim(1);
    const double* pa = a.val.data();
    const double* pb = b.val.data();
    double* po = out.data();
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) po[r * cols + c] = pa[r * cols + c] - pb[r];
    return detail::emit(detail::common_graph({&a, &b}), OpKind::kSubColvec, {&a, &b},
                        std::move(out));
}

inline Value mul(const Value& a, const Value& b) {
    detail::require_same_shape(OpKind::kMul, a.val, b.val);
    Tensor out(a.val.shape());
    const double* pa = a.val.data();
    const double* pb = b.val.data();
    double* po = out.data();
    for (std::int64_t i = 0, n = out.size(); i < n; ++i) po[i] = pa[i] * pb[i];
    return detail::emit(detail::common_graph({&a, &b}), OpKind::kMul, {&a, &b}, std::move(out));
}

inline Value mul_scalar(const Value& a, double s) {
    Tensor out(a.val.shape());
    const double* pa = a.val.data();
    double* po = out.data();
    for (std::int64_t i = 0, n = out.size(); i < n; ++i) po[i] = pa[i] * s;
    OpAttrs attrs;
    attrs.scalar = s;
    return detail::emit(detail::common_graph({&a}), OpKind::kMulScalar, {&a}, std::move(out),
                        std::move(attrs));
}

inline Value mul_colvec(const Value& a, const Value& c) {
    detail::require(a.val.rank() == 2 && c.val.rank() == 2 && c.val.dim(1) == 1 &&
                        c.val.dim(0) == a.val.dim(0),
                    OpKind::kMulColvec,
                    "need (M,N) and (M,1), got " + a.val.shape_string() + " and " +
                        c.val.shape_string());
    Tensor out(a.val.shape());
    const int rows = a.val.dim(0), cols = a.val.dim(1);
    const double* pa = a.val.data();
    const double* pc = c.val.data();
    double* po = out.data();
    for (int r = 0; r < rows; ++r)
        for (int k = 0; k < cols; ++k) po[r * cols + k] = pa[r * cols + k] * pc[r];
    return detail::emit(detail::common_graph({&a, &c}), OpKind::kMulColvec, {&a, &c},
                        std::move(out));
}

/// (P,Q,C) scaled along the last axis by (P,Q).
inline Value mul_bcast_last(const Value& a, const Value& w) {
    detail::require(a.val.rank() == 3 && w.val.rank() == 2 && a.val.dim(0) == w.val.dim(0) &&
                        a.val.dim(1) == w.val.dim(1),
                    OpKind::kMulBcastLast,
                    "need (P,Q,C) and (P,Q), got " + a.val.shape_string() + " and " +
                        w.val.shape_string());
    Tensor out(a.val.shape());
    const std::int64_t pq = static_cast<std::int64_t>(a.val.dim(0)) * a.val.dim(1);
    const int ch = a.val.dim(2);
    const double* pa = a.val.data();
    const double* pw = w.val.data();
    double* po = out.data();
    for (std::int64_t i = 0; i < pq; ++i)
        for (int c = 0; c < ch; ++c) po[i * ch + c] = pa[i * ch + c] * pw[i];
    return detail::emit(detail::common_graph({&a, &w}), OpKind::kMulBcastLast, {&a, &w},
                        std::move(out));
}

inline Value div(const Value& a, const Value& b) {
    detail::require_same_shape(OpKind::kDiv, a.val, b.val);
    Tensor out(a.val.shape());
    const double* pa = a.val.data();
    const double* pb = b.val.data();
    double* po = out.data();
    for (std::int64_t i = 0, n = out.size(); i < n; ++i) po[i] = pa[i] / pb[i];
    return detail::emit(detail::common_graph({&a, &b}), OpKind::kDiv, {&a, &b}, std::move(out));
}

inline Value div_colvec(const Value& a, const Value& c) {
    detail::require(a.val.rank() == 2 && c.val.rank() == 2 && c.val.dim(1) == 1 &&
                        c.val.dim(0) == a.val.dim(0),
                    OpKind::kDivColvec,
                    "need (M,N) and (M,1), got " + a.val.shape_string() + " and " +
                        c.val.shape_string());
    Tensor out(a.val.shape());
    const int rows = a.val.dim(0), cols = a.val.dim(1);
    const double* pa = a.val.data();
    const double* pc = c.val.data();
    double* po = out.data();
    for (int r = 0; r < rows; ++r)
        for (int k = 0; k < cols; ++k) po[r * cols + k] = pa[r * cols + k] / pc[r];
    return detail::emit(detail::common_graph({&a, &c}), OpKind::kDivColvec, {&a, &c},
                        std::move(out));
}

// ReLU uses the subgradient-0 convention at 0. The 0/1 mask is a detached
// constant; under a replayed TracePlan the recorded mask is reused.
struct ReluPair {
    Value act;
    Tensor mask;  // detached 0/1 mask, for forward-mode tangent propagation
};

/// ReLU that also hands back its mask without consuming a second plan slot.
inline ReluPair relu_pair(const Value& a) {
    Graph* g = detail::common_graph({&a});
    auto compute_mask = [&a]() {
        Tensor m(a.val.shape());
        const double* pa = a.val.data();
        double* pm = m.data();
        for (std::int64_t i = 0, n = m.size(); i < n; ++i) pm[i] = pa[i] > 0.0 ? 1.0 : 0.0;
        return m;
    };
    Tensor mask = (g != nullptr) ? g->plan_mask(compute_mask) : compute_mask();
    Tensor out(a.val.shape());
    const double* pa = a.val.data();
    const double* pm = mask.data();
    double* po = out.data();
    for (std::int64_t i = 0, n = out.size(); i < n; ++i) po[i] = pa[i] * pm[i];
    Value act = detail::emit(g, OpKind::kRelu, {&a}, std::move(out), {}, mask);
    return {std::move(act), std::move(mask)};
}

inline Value relu(const Value& a) { return relu_pair(a).act; }

inline Value exp(const Value& a) {
    Tensor out(a.val.shape());
    const double* pa = a.val.data();
    double* po = out.data();
    for (std::int64_t i = 0, n = out.size(); i < n; ++i) po[i] = std::exp(pa[i]);
    return detail::emit(detail::common_graph({&a}), OpKind::kExp, {&a}, std::move(out));
}

inline Value sin(const Value& a) {
    Tensor out(a.val.shape());
    const double* pa = a.val.data();
    double* po = out.data();
    for (std::int64_t i = 0, n = out.size(); i < n; ++i) po[i] = std::sin(pa[i]);
    return detail::emit(detail::common_graph({&a}), OpKind::kSin, {&a}, std::move(out));
}

inline Value cos(const Value& a) {
    Tensor out(a.val.shape());
    const double* pa = a.val.data();
    double* po = out.data();
    for (std::int64_t i = 0, n = out.size(); i < n; ++i) po[i] = std::cos(pa[i]);
    return detail::emit(detail::common_graph({&a}), OpKind::kCos, {&a}, std::move(out));
}

inline Value square(const Value& a) {
    Tensor out(a.val.shape());
    const double* pa = a.val.data();
    double* po = out.data();
    for (std::int64_t i = 0, n = out.size(); i < n; ++i) po[i] = pa[i] * pa[i];
    return detail::emit(detail::common_graph({&a}), OpKind::kSquare, {&a}, std::move(out));
}

/// Concatenate rank-2 tensors along axis 0 (rows) or 1 (columns).
inline Value concat(int axis, const std::vector<Value>& inputs) {
    detail::require(!inputs.empty(), OpKind::kConcat, "no inputs");
    detail::require(axis == 0 || axis == 1, OpKind::kConcat, "axis must be 0 or 1");
    for (const Value& v : inputs)
        detail::require(v.val.rank() == 2, OpKind::kConcat, "rank-2 inputs required");
    int rows = inputs[0].val.dim(0), cols = inputs[0].val.dim(1);
    if (axis == 0) {
        rows = 0;
        for (const Value& v : inputs) {
            detail::require(v.val.dim(1) == cols, OpKind::kConcat,
                            "column mismatch " + v.val.shape_string());
            rows += v.val.dim(0);
        }
    } else {
        cols = 0;
        for (const Value& v : inputs) {
            detail::require(v.val.dim(0) == rows, OpKind::kConcat,
                            "row mismatch " + v.val.shape_string());
            cols += v.val.dim(1);
        }
    }
    Tensor out({rows, cols});
    double* po = out.data();
    if (axis == 0) {
        std::int64_t off = 0;
        for (const Value& v : inputs) {
            std::copy(v.val.data(), v.val.data() + v.val.size(), po + off);
            off += v.val.size();
        }
    } else {
        int col_off = 0;
        for (const Value& v : inputs) {
            const int vc = v.val.dim(1);
            const double* pv = v.val.data();
            for (int r = 0; r < rows; ++r)
                std::copy(pv + static_cast<std::int64_t>(r) * vc,
                          pv + static_cast<std::int64_t>(r + 1) * vc,
                          po + static_cast<std::int64_t>(r) * cols + col_off);
            col_off += vc;
        }
    }
    std::vector<const Value*> ptrs;
    ptrs.reserve(inputs.size());
    Graph* g = nullptr;
    for (const Value& v : inputs) {
        if (v.graph != nullptr) {
            if (g != nullptr && g != v.graph)
                throw contract_error("concat inputs belong to different graphs");
            g = v.graph;
        }
        ptrs.push_back(&v);
    }
    OpAttrs attrs;
    attrs.axis = axis;
    return detail::emit(g, OpKind::kConcat, std::move(ptrs), std::move(out), std::move(attrs));
}

inline Value concat(int axis, const Value& a, const Value& b) {
    return concat(axis, std::vector<Value>{a, b});
}

namespace detail {

// Reduction geometry: rank-2 axis 0 -> (1,N); rank-2 axis 1 -> (M,1);
// rank-3 axis 1 -> (P,C). Expressed as outer/reduce/inner strides.
struct ReduceDims {
    std::int64_t outer, red, inner;
    std::vector<int> out_shape;
};

inline ReduceDims reduce_dims(OpKind op, const Tensor& t, int axis) {
    if (t.rank() == 2) {
        require(axis == 0 || axis == 1, op, "axis must be 0 or 1 for rank-2 input");
        if (axis == 0) return {1, t.dim(0), t.dim(1), {1, t.dim(1)}};
        return {t.dim(0), t.dim(1), 1, {t.dim(0), 1}};
    }
    if (t.rank() == 3) {
        require(axis == 1, op, "axis must be 1 for rank-3 input");
        return {t.dim(0), t.dim(1), t.dim(2), {t.dim(0), t.dim(2)}};
    }
    throw dimension_error(std::string(op_name(op)) + ": unsupported rank " +
                          std::to_string(t.rank()));
}

}  // namespace detail

/// Reduction by maximum. Keeps a 1-sized dim for rank-2 inputs; drops the
/// middle axis for rank-3. On ties the first (lowest flat index) element wins
/// and receives the whole gradient.
inline Value max_reduce(const Value& a, int axis) {
    const auto rd = detail::reduce_dims(OpKind::kMaxReduce, a.val, axis);
    Tensor out(rd.out_shape);
    std::vector<std::int64_t> winners(static_cast<std::size_t>(rd.outer * rd.inner));
    const double* pa = a.val.data();
    double* po = out.data();
    for (std::int64_t o = 0; o < rd.outer; ++o) {
        for (std::int64_t i = 0; i < rd.inner; ++i) {
            std::int64_t best = o * rd.red * rd.inner + i;
            double bv = pa[best];
            for (std::int64_t r = 1; r < rd.red; ++r) {
                const std::int64_t idx = (o * rd.red + r) * rd.inner + i;
                if (pa[idx] > bv) {
                    bv = pa[idx];
                    best = idx;
                }
            }
            po[o * rd.inner + i] = bv;
            winners[static_cast<std::size_t>(o * rd.inner + i)] = best;
        }
    }
    OpAttrs attrs;
    attrs.axis = axis;
    return detail::emit(detail::common_graph({&a}), OpKind::kMaxReduce, {&a}, std::move(out),
                        std::move(attrs), {}, make_indices(std::move(winners)));
}

inline Value sum_reduce(const Value& a, int axis) {
    const auto rd = detail::reduce_dims(OpKind::kSumReduce, a.val, axis);
    Tensor out(rd.out_shape);
    const double* pa = a.val.data();
    double* po = out.data();
    for (std::int64_t o = 0; o < rd.outer; ++o)
        for (std::int64_t r = 0; r < rd.red; ++r)
            for (std::int64_t i = 0; i < rd.inner; ++i)
                po[o * rd.inner + i] += pa[(o * rd.red + r) * rd.inner + i];
    OpAttrs attrs;
    attrs.axis = axis;
    return detail::emit(detail::common_graph({&a}), OpKind::kSumReduce, {&a}, std::move(out),
                        std::move(attrs));
}

inline Value sum_all(const Value& a) {
    double s = 0.0;
    const double* pa = a.val.data();
    for (std::int64_t i = 0, n = a.val.size(); i < n; ++i) s += pa[i];
    return detail::emit(detail::common_graph({&a}), OpKind::kSumAll, {&a}, Tensor::scalar(s));
}

inline Value mean_all(const Value& a) {
    return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.val.size()));
}

/// Select rows of a rank-2 tensor by index (duplicates allowed).
inline Value gather_rows(const Value& a, IndexVec idx) {
    detail::require(a.val.rank() == 2, OpKind::kGatherRows, "rank-2 input required");
    const int cols = a.val.dim(1);
    const std::int64_t nrows = a.val.dim(0);
    Tensor out({static_cast<int>(idx->size()), cols});
    const double* pa = a.val.data();
    double* po = out.data();
    for (std::size_t r = 0; r < idx->size(); ++r) {
        const std::int64_t src = (*idx)[r];
        if (src < 0 || src >= nrows)
            throw contract_error("gather_rows: index " + std::to_string(src) +
                                 " out of range [0," + std::to_string(nrows) + ")");
        std::copy(pa + src * cols, pa + (src + 1) * cols,
                  po + static_cast<std::int64_t>(r) * cols);
    }
    OpAttrs attrs;
    attrs.indices = std::move(idx);
    return detail::emit(detail::common_graph({&a}), OpKind::kGatherRows, {&a}, std::move(out),
                        std::move(attrs));
}

inline Value gather_rows(const Value& a, std::vector<std::int64_t> idx) {
    return gather_rows(a, make_indices(std::move(idx)));
}

inline Value reshape(const Value& a, std::vector<int> shape) {
    Tensor out = a.val.reshaped(shape);
    OpAttrs attrs;
    attrs.shape = a.val.shape();
    return detail::emit(detail::common_graph({&a}), OpKind::kReshape, {&a}, std::move(out),
                        std::move(attrs));
}

/// Row-wise cross product of (N,3) tensors.
inline Value cross3(const Value& a, const Value& b) {
    detail::require(a.val.rank() == 2 && a.val.dim(1) == 3, OpKind::kCross3,
                    "(N,3) required, got " + a.val.shape_string());
    detail::require_same_shape(OpKind::kCross3, a.val, b.val);
    Tensor out(a.val.shape());
    const double* pa = a.val.data();
    const double* pb = b.val.data();
    double* po = out.data();
    for (int r = 0; r < a.val.dim(0); ++r) {
        const double* x = pa + 3 * r;
        const double* y = pb + 3 * r;
        double* z = po + 3 * r;
        z[0] = x[1] * y[2] - x[2] * y[1];
        z[1] = x[2] * y[0] - x[0] * y[2];
        z[2] = x[0] * y[1] - x[1] * y[0];
    }
    return detail::emit(detail::common_graph({&a, &b}), OpKind::kCross3, {&a, &b},
                        std::move(out));
}

/// Row-wise Euclidean norm of (N,3) -> (N,1).
inline Value l2norm(const Value& a) {
    detail::require(a.val.rank() == 2 && a.val.dim(1) == 3, OpKind::kL2Norm,
                    "(N,3) required, got " + a.val.shape_string());
    Tensor out({a.val.dim(0), 1});
    const double* pa = a.val.data();
    double* po = out.data();
    for (int r = 0; r < a.val.dim(0); ++r) {
        const double* x = pa + 3 * r;
        po[r] = std::sqrt(x[0] * x[0] + x[1] * x[1] + x[2] * x[2]);
    }
    return detail::emit(detail::common_graph({&a}), OpKind::kL2Norm, {&a}, std::move(out));
}

constexpr double kDegenerateNormEps = 1e-12;

/// Row-wise normalization of (N,3). Rows with norm below 1e-12 fall back to
/// (0,0,1) with zero gradient; the count of such rows is reported through
/// `degenerate_count` and the graph's flag list.
inline Value normalize3(const Value& a, int* degenerate_count = nullptr) {
    detail::require(a.val.rank() == 2 && a.val.dim(1) == 3, OpKind::kNormalize3,
                    "(N,3) required, got " + a.val.shape_string());
    Graph* g = detail::common_graph({&a});
    const int n = a.val.dim(0);
    Tensor out(a.val.shape());
    Tensor aux({n, 1});  // per-row: norm, or 0 for degenerate rows
    const double* pa = a.val.data();
    double* po = out.data();
    double* pn = aux.data();
    int degen = 0;
    for (int r = 0; r < n; ++r) {
        const double* x = pa + 3 * r;
        const double norm = std::sqrt(x[0] * x[0] + x[1] * x[1] + x[2] * x[2]);
        if (norm < kDegenerateNormEps) {
            po[3 * r + 0] = 0.0;
            po[3 * r + 1] = 0.0;
            po[3 * r + 2] = 1.0;
            pn[r] = 0.0;
            ++degen;
        } else {
            po[3 * r + 0] = x[0] / norm;
            po[3 * r + 1] = x[1] / norm;
            po[3 * r + 2] = x[2] / norm;
            pn[r] = norm;
        }
    }
    if (degenerate_count != nullptr) *degenerate_count = degen;
    if (degen > 0 && g != nullptr)
        g->flag("normalize3: " + std::to_string(degen) + " degenerate rows");
    return detail::emit(g, OpKind::kNormalize3, {&a}, std::move(out), {}, std::move(aux));
}

// ---------------------------------------------------------------------------
// generic dispatcher

/// Name-based dispatch used by the generic op interface and its tests.
inline Value forward_op(const std::string& kind, const std::vector<Value>& inputs,
                        OpAttrs attrs = {}) {
    auto expect = [&](int n) {
        if (static_cast<int>(inputs.size()) != n)
            throw contract_error("forward_op(" + kind + "): expected " + std::to_string(n) +
                                 " inputs, got " + std::to_string(inputs.size()));
    };
    if (kind == "matmul") { expect(2); return matmul(inputs[0], inputs[1]); }
    if (kind == "add") { expect(2); return add(inputs[0], inputs[1]); }
    if (kind == "add_rowvec") { expect(2); return add_rowvec(inputs[0], inputs[1]); }
    if (kind == "sub") { expect(2); return sub(inputs[0], inputs[1]); }
    if (kind == "sub_colvec") { expect(2); return sub_colvec(inputs[0], inputs[1]); }
    if (kind == "mul") { expect(2); return mul(inputs[0], inputs[1]); }
    if (kind == "mul_scalar") { expect(1); return mul_scalar(inputs[0], attrs.scalar); }
    if (kind == "mul_colvec") { expect(2); return mul_colvec(inputs[0], inputs[1]); }
    if (kind == "mul_bcast_last") { expect(2); return mul_bcast_last(inputs[0], inputs[1]); }
    if (kind == "div") { expect(2); return div(inputs[0], inputs[1]); }
    if (kind == "div_colvec") { expect(2); return div_colvec(inputs[0], inputs[1]); }
    if (kind == "relu") { expect(1); return relu(inputs[0]); }
    if (kind == "exp") { expect(1); return exp(inputs[0]); }
    if (kind == "sin") { expect(1); return sin(inputs[0]); }
    if (kind == "cos") { expect(1); return cos(inputs[0]); }
    if (kind == "square") { expect(1); return square(inputs[0]); }
    if (kind == "concat") { return concat(attrs.axis, inputs); }
    if (kind == "max_reduce") { expect(1); return max_reduce(inputs[0], attrs.axis); }
    if (kind == "sum_reduce") { expect(1); return sum_reduce(inputs[0], attrs.axis); }
    if (kind == "sum_all") { expect(1); return sum_all(inputs[0]); }
    if (kind == "gather_rows") { expect(1); return gather_rows(inputs[0], attrs.indices); }
    if (kind == "reshape") { expect(1); return reshape(inputs[0], attrs.shape); }
    if (kind == "cross3") { expect(2); return cross3(inputs[0], inputs[1]); }
    if (kind == "l2norm") { expect(1); return l2norm(inputs[0]); }
    if (kind == "normalize3") { expect(1); return normalize3(inputs[0]); }
    throw contract_error("forward_op: unknown op kind '" + kind + "'");
}

// ---------------------------------------------------------------------------
// backward

// Every contribution is a freshly allocated tensor (views are cloned by the
// callers), so first write moves and later writes add in place.
inline void Graph::accumulate(int id, Tensor contribution) {
    if (id < 0) return;
    Tensor& slot = grads_[static_cast<std::size_t>(id)];
    if (!slot.defined()) {
        slot = std::move(contribution);
        return;
    }
    double* ps = slot.data();
    const double* pc = contribution.data();
    for (std::int64_t i = 0, n = slot.size(); i < n; ++i) ps[i] += pc[i];
}

inline void Graph::backward(const Value& loss) {
    if (!loss.tracked() || loss.graph != this)
        throw contract_error("backward: loss value does not belong to this graph");
    if (loss.val.size() != 1)
        throw contract_error("backward: loss must be a scalar, got shape " +
                             loss.val.shape_string());
    grads_.assign(nodes_.size(), Tensor());
    grads_[static_cast<std::size_t>(loss.node)] = Tensor::full(loss.val.shape(), 1.0);

    for (int id = loss.node; id >= 0; --id) {
        const Node& n = nodes_[static_cast<std::size_t>(id)];
        Tensor gout = grads_[static_cast<std::size_t>(id)];
        if (!gout.defined()) continue;
        switch (n.kind) {
            case OpKind::kLeaf:
                break;
            case OpKind::kMatmul: {
                const Tensor& A = n.input_values[0];
                const Tensor& B = n.input_values[1];
                if (n.input_ids[0] >= 0) {
                    Tensor da(A.shape());
                    as_matrix(da).noalias() = as_matrix(gout) * as_matrix(B).transpose();
                    accumulate(n.input_ids[0], std::move(da));
                }
                if (n.input_ids[1] >= 0) {
                    Tensor db(B.shape());
                    as_matrix(db).noalias() = as_matrix(A).transpose() * as_matrix(gout);
                    accumulate(n.input_ids[1], std::move(db));
                }
                break;
            }
            case OpKind::kAdd: {
                if (n.input_ids[0] >= 0) accumulate(n.input_ids[0], gout.clone());
                if (n.input_ids[1] >= 0) accumulate(n.input_ids[1], gout.clone());
                break;
            }
            case OpKind::kAddRowvec: {
                if (n.input_ids[0] >= 0) accumulate(n.input_ids[0], gout.clone());
                if (n.input_ids[1] >= 0) {
                    const int rows = gout.dim(0), cols = gout.dim(1);
                    Tensor db(n.input_values[1].shape());
                    double* pd = db.data();
                    const double* pg = gout.data();
                    for (int r = 0; r < rows; ++r)
                        for (int c = 0; c < cols; ++c) pd[c] += pg[r * cols + c];
                    accumulate(n.input_ids[1], std::move(db));
                }
                break;
            }
            case OpKind::kSub: {
                if (n.input_ids[0] >= 0) accumulate(n.input_ids[0], gout.clone());
                if (n.input_ids[1] >= 0) {
                    Tensor db(gout.shape());
                    const double* pg = gout.data();
                    double* pd = db.data();
                    for (std::int64_t i = 0, m = db.size(); i < m; ++i) pd[i] = -pg[i];
                    accumulate(n.input_ids[1], std::move(db));
                }
                break;
            }
            case OpKind::kSubColvec: {
                if (n.input_ids[0] >= 0) accumulate(n.input_ids[0], gout.clone());
                if (n.input_ids[1] >= 0) {
                    const int rows = gout.dim(0), cols = gout.dim(1);
                    Tensor dc({rows, 1});
                    double* pd = dc.data();
                    const double* pg = gout.data();
                    for (int r = 0; r < rows; ++r) {
                        double s = 0.0;
                        for (int c = 0; c < cols; ++c) s += pg[r * cols + c];
                        pd[r] = -s;
                    }
                    accumulate(n.input_ids[1], std::move(dc));
                }
                break;
            }
            case OpKind::kMul: {
                for (int side = 0; side < 2; ++side) {
                    if (n.input_ids[side] < 0) continue;
                    const Tensor& other = n.input_values[1 - side];
                    Tensor d(gout.shape());
                    const double* pg = gout.data();
                    const double* po = other.data();
                    double* pd = d.data();
                    for (std::int64_t i = 0, m = d.size(); i < m; ++i) pd[i] = pg[i] * po[i];
                    accumulate(n.input_ids[side], std::move(d));
                }
                break;
            }
            case OpKind::kMulScalar: {
                if (n.input_ids[0] >= 0) {
                    Tensor d(gout.shape());
                    const double* pg = gout.data();
                    double* pd = d.data();
                    for (std::int64_t i = 0, m = d.size(); i < m; ++i)
                        pd[i] = pg[i] * n.attrs.scalar;
                    accumulate(n.input_ids[0], std::move(d));
                }
                break;
            }
            case OpKind::kMulColvec: {
                const Tensor& A = n.input_values[0];
                const Tensor& C = n.input_values[1];
                const int rows = A.dim(0), cols = A.dim(1);
                if (n.input_ids[0] >= 0) {
                    Tensor da(A.shape());
                    const double* pg = gout.data();
                    const double* pc = C.data();
                    double* pd = da.data();
                    for (int r = 0; r < rows; ++r)
                        for (int c = 0; c < cols; ++c) pd[r * cols + c] = pg[r * cols + c] * pc[r];
                    accumulate(n.input_ids[0], std::move(da));
                }
                if (n.input_ids[1] >= 0) {
                    Tensor dc({rows, 1});
                    const double* pg = gout.data();
                    const double* pa = A.data();
                    double* pd = dc.data();
                    for (int r = 0; r < rows; ++r) {
                        double s = 0.0;
                        for (int c = 0; c < cols; ++c) s += pg[r * cols + c] * pa[r * cols + c];
                        pd[r] = s;
                    }
                    accumulate(n.input_ids[1], std::move(dc));
                }
                break;
            }
            case OpKind::kMulBcastLast: {
                const Tensor& A = n.input_values[0];
                const Tensor& W = n.input_values[1];
                const std::int64_t pq = static_cast<std::int64_t>(A.dim(0)) * A.dim(1);
                const int ch = A.dim(2);
                if (n.input_ids[0] >= 0) {
                    Tensor da(A.shape());
                    const double* pg = gout.data();
                    const double* pw = W.data();
                    double* pd = da.data();
                    for (std::int64_t i = 0; i < pq; ++i)
                        for (int c = 0; c < ch; ++c) pd[i * ch + c] = pg[i * ch + c] * pw[i];
                    accumulate(n.input_ids[0], std::move(da));
                }
                if (n.input_ids[1] >= 0) {
                    Tensor dw(W.shape());
                    const double* pg = gout.data();
                    const double* pa = A.data();
                    double* pd = dw.data();
                    for (std::int64_t i = 0; i < pq; ++i) {
                        double s = 0.0;
                        for (int c = 0; c < ch; ++c) s += pg[i * ch + c] * pa[i * ch + c];
                        pd[i] = s;
                    }
                    accumulate(n.input_ids[1], std::move(dw));
                }
                break;
            }
            case OpKind::kDiv: {
                const Tensor& A = n.input_values[0];
                const Tensor& B = n.input_values[1];
                if (n.input_ids[0] >= 0) {
                    Tensor da(gout.shape());
                    const double* pg = gout.data();
                    const double* pb = B.data();
                    double* pd = da.data();
                    for (std::int64_t i = 0, m = da.size(); i < m; ++i) pd[i] = pg[i] / pb[i];
                    accumulate(n.input_ids[0], std::move(da));
                }
                if (n.input_ids[1] >= 0) {
                    Tensor db(gout.shape());
                    const double* pg = gout.data();
                    const double* pa = A.data();
                    const double* pb = B.data();
                    double* pd = db.data();
                    for (std::int64_t i = 0, m = db.size(); i < m; ++i)
                        pd[i] = -pg[i] * pa[i] / (pb[i] * pb[i]);
                    accumulate(n.input_ids[1], std::move(db));
                }
                break;
            }
            case OpKind::kDivColvec: {
                const Tensor& A = n.input_values[0];
                const Tensor& C = n.input_values[1];
                const int rows = A.dim(0), cols = A.dim(1);
                if (n.input_ids[0] >= 0) {
                    Tensor da(A.shape());
                    const double* pg = gout.data();
                    const double* pc = C.data();
                    double* pd = da.data();
                    for (int r = 0; r < rows; ++r)
                        for (int c = 0; c < cols; ++c) pd[r * cols + c] = pg[r * cols + c] / pc[r];
                    accumulate(n.input_ids[0], std::move(da));
                }
                if (n.input_ids[1] >= 0) {
                    Tensor dc({rows, 1});
                    const double* pg = gout.data();
                    const double* pa = A.data();
                    const double* pc = C.data();
                    double* pd = dc.data();
                    for (int r = 0; r < rows; ++r) {
                        double s = 0.0;
                        for (int c = 0; c < cols; ++c) s += pg[r * cols + c] * pa[r * cols + c];
                        pd[r] = -s / (pc[r] * pc[r]);
                    }
                    accumulate(n.input_ids[1], std::move(dc));
                }
                break;
            }
            case OpKind::kRelu: {
                if (n.input_ids[0] >= 0) {
                    Tensor d(gout.shape());
                    const double* pg = gout.data();
                    const double* pm = n.aux.data();
                    double* pd = d.data();
                    for (std::int64_t i = 0, m = d.size(); i < m; ++i) pd[i] = pg[i] * pm[i];
                    accumulate(n.input_ids[0], std::move(d));
                }
                break;
            }
            case OpKind::kExp: {
                if (n.input_ids[0] >= 0) {
                    Tensor d(gout.shape());
                    const double* pg = gout.data();
                    const double* po = n.output.data();
                    double* pd = d.data();
                    for (std::int64_t i = 0, m = d.size(); i < m; ++i) pd[i] = pg[i] * po[i];
                    accumulate(n.input_ids[0], std::move(d));
                }
                break;
            }
            case OpKind::kSin: {
                if (n.input_ids[0] >= 0) {
                    const Tensor& A = n.input_values[0];
                    Tensor d(gout.shape());
                    const double* pg = gout.data();
                    const double* pa = A.data();
                    double* pd = d.data();
                    for (std::int64_t i = 0, m = d.size(); i < m; ++i)
                        pd[i] = pg[i] * std::cos(pa[i]);
                    accumulate(n.input_ids[0], std::move(d));
                }
                break;
            }
            case OpKind::kCos: {
                if (n.input_ids[0] >= 0) {
                    const Tensor& A = n.input_values[0];
                    Tensor d(gout.shape());
                    const double* pg = gout.data();
                    const double* pa = A.data();
                    double* pd = d.data();
                    for (std::int64_t i = 0, m = d.size(); i < m; ++i)
                        pd[i] = -pg[i] * std::sin(pa[i]);
                    accumulate(n.input_ids[0], std::move(d));
                }
                break;
            }
            case OpKind::kSquare: {
                if (n.input_ids[0] >= 0) {
                    const Tensor& A = n.input_values[0];
                    Tensor d(gout.shape());
                    const double* pg = gout.data();
                    const double* pa = A.data();
                    double* pd = d.data();
                    for (std::int64_t i = 0, m = d.size(); i < m; ++i)
                        pd[i] = 2.0 * pg[i] * pa[i];
                    accumulate(n.input_ids[0], std::move(d));
                }
                break;
            }
            case OpKind::kConcat: {
                const int axis = n.attrs.axis;
                if (axis == 0) {
                    std::int64_t off = 0;
                    for (std::size_t k = 0; k < n.input_values.size(); ++k) {
                        const Tensor& in = n.input_values[k];
                        if (n.input_ids[k] >= 0) {
                            Tensor d(in.shape());
                            std::copy(gout.data() + off, gout.data() + off + in.size(), d.data());
                            accumulate(n.input_ids[k], std::move(d));
                        }
                        off += in.size();
                    }
                } else {
                    const int rows = gout.dim(0), cols = gout.dim(1);
                    int col_off = 0;
                    for (std::size_t k = 0; k < n.input_values.size(); ++k) {
                        const Tensor& in = n.input_values[k];
                        const int vc = in.dim(1);
                        if (n.input_ids[k] >= 0) {
                            Tensor d(in.shape());
                            double* pd = d.data();
                            const double* pg = gout.data();
                            for (int r = 0; r < rows; ++r)
                                std::copy(pg + static_cast<std::int64_t>(r) * cols + col_off,
                                          pg + static_cast<std::int64_t>(r) * cols + col_off + vc,
                                          pd + static_cast<std::int64_t>(r) * vc);
                            accumulate(n.input_ids[k], std::move(d));
                        }
                        col_off += vc;
                    }
                }
                break;
            }
            case OpKind::kMaxReduce: {
                if (n.input_ids[0] >= 0) {
                    Tensor d(n.input_values[0].shape());
                    const double* pg = gout.data();
                    double* pd = d.data();
                    const auto& winners = *n.arg_idx;
                    for (std::size_t k = 0; k < winners.size(); ++k) pd[winners[k]] += pg[k];
                    accumulate(n.input_ids[0], std::move(d));
                }
                break;
            }
            case OpKind::kSumReduce: {
                if (n.input_ids[0] >= 0) {
                    const auto rd =
                        detail::reduce_dims(OpKind::kSumReduce, n.input_values[0], n.attrs.axis);
                    Tensor d(n.input_values[0].shape());
                    const double* pg = gout.data();
                    double* pd = d.data();
                    for (std::int64_t o = 0; o < rd.outer; ++o)
                        for (std::int64_t r = 0; r < rd.red; ++r)
                            for (std::int64_t i = 0; i < rd.inner; ++i)
                                pd[(o * rd.red + r) * rd.inner + i] = pg[o * rd.inner + i];
                    accumulate(n.input_ids[0], std::move(d));
                }
                break;
            }
            case OpKind::kSumAll: {
                if (n.input_ids[0] >= 0) {
                    accumulate(n.input_ids[0],
                               Tensor::full(n.input_values[0].shape(), gout.at(0)));
                }
                break;
            }
            case OpKind::kGatherRows: {
                if (n.input_ids[0] >= 0) {
                    const Tensor& A = n.input_values[0];
                    const int cols = A.dim(1);
                    Tensor d(A.shape());
                    const double* pg = gout.data();
                    double* pd = d.data();
                    const auto& idx = *n.attrs.indices;
                    for (std::size_t r = 0; r < idx.size(); ++r) {
                        const std::int64_t src = idx[r];
                        for (int c = 0; c < cols; ++c)
                            pd[src * cols + c] += pg[static_cast<std::int64_t>(r) * cols + c];
                    }
                    accumulate(n.input_ids[0], std::move(d));
                }
                break;
            }
            case OpKind::kReshape: {
                if (n.input_ids[0] >= 0) {
                    // reshaped view shares the buffer; clone so later
                    // accumulation cannot corrupt this node's gradient
                    accumulate(n.input_ids[0], gout.reshaped(n.attrs.shape).clone());
                }
                break;
            }
            case OpKind::kCross3: {
                const Tensor& A = n.input_values[0];
                const Tensor& B = n.input_values[1];
                const int rows = A.dim(0);
                auto cross_into = [rows](const Tensor& x, const Tensor& y, Tensor& dst) {
                    const double* px = x.data();
                    const double* py = y.data();
                    double* pz = dst.data();
                    for (int r = 0; r < rows; ++r) {
                        const double* u = px + 3 * r;
                        const double* v = py + 3 * r;
                        double* w = pz + 3 * r;
                        w[0] = u[1] * v[2] - u[2] * v[1];
                        w[1] = u[2] * v[0] - u[0] * v[2];
                        w[2] = u[0] * v[1] - u[1] * v[0];
                    }
                };
                if (n.input_ids[0] >= 0) {
                    Tensor da(A.shape());
                    cross_into(B, gout, da);  // dA = b x g
                    accumulate(n.input_ids[0], std::move(da));
                }
                if (n.input_ids[1] >= 0) {
                    Tensor db(B.shape());
                    cross_into(gout, A, db);  // dB = g x a
                    accumulate(n.input_ids[1], std::move(db));
                }
                break;
            }
            case OpKind::kL2Norm: {
                if (n.input_ids[0] >= 0) {
                    const Tensor& A = n.input_values[0];
                    const int rows = A.dim(0);
                    Tensor d(A.shape());
                    const double* pa = A.data();
                    const double* pg = gout.data();
                    const double* pn = n.output.data();
                    double* pd = d.data();
                    for (int r = 0; r < rows; ++r) {
                        if (pn[r] > 0.0) {
                            const double s = pg[r] / pn[r];
                            pd[3 * r + 0] = pa[3 * r + 0] * s;
                            pd[3 * r + 1] = pa[3 * r + 1] * s;
                            pd[3 * r + 2] = pa[3 * r + 2] * s;
                        }
                    }
                    accumulate(n.input_ids[0], std::move(d));
                }
                break;
            }
            case OpKind::kNormalize3: {
                if (n.input_ids[0] >= 0) {
                    const Tensor& A = n.input_values[0];
                    const int rows = A.dim(0);
                    Tensor d(A.shape());
                    const double* pg = gout.data();
                    const double* pu = n.output.data();
                    const double* pn = n.aux.data();
                    double* pd = d.data();
                    for (int r = 0; r < rows; ++r) {
                        const double norm = pn[r];
                        if (norm == 0.0) continue;  // degenerate row, frozen output
                        const double* u = pu + 3 * r;
                        const double* gr = pg + 3 * r;
                        const double ug = u[0] * gr[0] + u[1] * gr[1] + u[2] * gr[2];
                        pd[3 * r + 0] = (gr[0] - u[0] * ug) / norm;
                        pd[3 * r + 1] = (gr[1] - u[1] * ug) / norm;
                        pd[3 * r + 2] = (gr[2] - u[2] * ug) / norm;
                    }
                    accumulate(n.input_ids[0], std::move(d));
                }
                break;
            }
        }
    }
}

}  // namespace np
