#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ilab/array.hpp"
#include "ilab/faults.hpp"

namespace ilab {

enum class Op : std::uint8_t {
    kLeaf,
    kConst,
    kMatMul,
    kAdd,
    kMul,
    kRowLayerNorm,
    kLogSoftmax,
    kGatherRows,
    kGatherPerRow,
    kSum,
    kMean,
    kSquare,
    kLog,
    kExp,
    kClamp,
    kStopGrad,
};

const char* op_name(Op op);

struct ValueRef {
    std::int32_t idx = -1;
    bool valid() const { return idx >= 0; }
};

using GradMap = std::map<std::string, DenseArray>;

// Named parameter arrays in a stable insertion order. Trainability is a
// property of how a parameter enters a particular graph, not of the store.
class ParamStore {
public:
    void add(const std::string& name, DenseArray value);
    bool has(const std::string& name) const;
    const DenseArray& get(const std::string& name) const;
    DenseArray& mutable_get(const std::string& name);
    const std::vector<std::string>& names() const { return order_; }
    std::size_t size() const { return order_.size(); }

    // Bitwise content hash of one parameter / of the whole store, for
    // freeze-contract checks.
    std::uint64_t hash_of(const std::string& name) const;
    std::uint64_t hash_all() const;

private:
    std::vector<std::string> order_;
    std::map<std::string, DenseArray> values_;
};

// Define-by-run reverse-mode tape over DenseArray. Forward values are
// computed eagerly at node creation and checked finite; backward walks the
// tape once in reverse insertion order (which is a topological order by
// construction). The graph is rebuilt every step and confined to one worker.
class Graph {
public:
    // Added under the square root in row layer normalization; guards
    // constant rows.
    static constexpr double kNormEps = 1e-5;

    ValueRef param(const std::string& name, const DenseArray& value, bool trainable);
    ValueRef constant(DenseArray value);
    ValueRef scalar(double v) { return constant(DenseArray::scalar(v)); }

    // a[m,k] * b[k,n] -> [m,n]
    ValueRef matmul(ValueRef a, ValueRef b);
    // Equal shapes, or b a row/scalar broadcast against a.
    ValueRef add(ValueRef a, ValueRef b);
    ValueRef mul(ValueRef a, ValueRef b);
    ValueRef row_layer_norm(ValueRef x);
    ValueRef log_softmax(ValueRef x);
    // y[i,:] = x[rows[i],:]
    ValueRef gather_rows(ValueRef x, std::vector<int> rows);
    // y[i] = x[i, cols[i]] -> rank-1 [r]
    ValueRef gather_per_row(ValueRef x, std::vector<int> cols);
    ValueRef sum(ValueRef x);
    ValueRef mean(ValueRef x);
    ValueRef square(ValueRef x);
    ValueRef log(ValueRef x);
    ValueRef exp(ValueRef x);
    ValueRef clamp(ValueRef x, double lo, double hi);
    ValueRef stop_gradient(ValueRef x);

    // Conveniences composed from the primitives above.
    ValueRef scale(ValueRef x, double c) { return mul(x, scalar(c)); }
    ValueRef add_const(ValueRef x, double c) { return add(x, scalar(c)); }
    ValueRef sub(ValueRef a, ValueRef b) { return add(a, scale(b, -1.0)); }
    // [r,c] -> [1,c]
    ValueRef mean_rows(ValueRef x);

    const DenseArray& value(ValueRef r) const;
    double scalar_value(ValueRef r) const;

    // Reverse-mode gradients of a scalar loss for every trainable leaf.
    // Trainable leaves the loss never touches report zero gradients.
    GradMap backward(ValueRef loss) const;

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Op op;
        std::array<std::int32_t, 2> in{-1, -1};
        DenseArray value;
        std::vector<int> index; // gather targets
        double lo = 0.0, hi = 0.0;
        std::string name;       // leaves only
        bool trainable = false; // leaves only
    };

    ValueRef push(Node n);
    const Node& node(ValueRef r) const;
    void check_finite(const Node& n, std::int32_t idx) const;

    std::vector<Node> nodes_;
};

// Max over parameter entries of |analytic - central difference| divided by
// max(|analytic|, 1e-8). The builder must construct the loss from scratch on
// every call (stochastic builders must replay their own RNG); analytic
// gradients come from one backward pass, the differences from value-only
// rebuilds at perturbed parameters.
double finite_diff_check(const std::function<ValueRef(Graph&, const ParamStore&)>& build_loss,
                         const ParamStore& params, const std::vector<std::string>& wrt,
                         double step);

// Plain SGD with momentum 0.9; per-parameter learning-rate scale supports a
// smaller step on designated parameter groups.
class SgdMomentum {
public:
    explicit SgdMomentum(double lr, double momentum = 0.9) : lr_(lr), momentum_(momentum) {}

    void set_lr_scale(const std::string& name, double scale) { lr_scale_[name] = scale; }
    double lr() const { return lr_; }

    void step(ParamStore& params, const GradMap& grads);

private:
    double lr_;
    double momentum_;
    std::map<std::string, double> lr_scale_;
    std::map<std::string, std::vector<double>> velocity_;
};

} // namespace ilab
