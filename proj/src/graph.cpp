#include "ilab/graph.hpp"

#include <algorithm>
#include <cmath>

#include "ilab/kernels.hpp"

namespace ilab {

const char* op_name(Op op) {
    switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kConst: return "const";
    case Op::kMatMul: return "matmul";
    case Op::kAdd: return "add";
    case Op::kMul: return "elementwise-mul";
    case Op::kRowLayerNorm: return "row-layer-normalize";
    case Op::kLogSoftmax: return "log-softmax";
    case Op::kGatherRows: return "gather-index";
    case Op::kGatherPerRow: return "gather-index-per-row";
    case Op::kSum: return "sum";
    case Op::kMean: return "mean";
    case Op::kSquare: return "square";
    case Op::kLog: return "log";
    case Op::kExp: return "exp";
    case Op::kClamp: return "clamp";
    case Op::kStopGrad: return "stop-gradient";
    }
    return "?";
}

// ---------------------------------------------------------------- ParamStore

void ParamStore::add(const std::string& name, DenseArray value) {
    if (has(name)) throw ContractViolation("parameter '" + name + "' already present");
    order_.push_back(name);
    values_.emplace(name, std::move(value));
}

bool ParamStore::has(const std::string& name) const { return values_.count(name) != 0; }

const DenseArray& ParamStore::get(const std::string& name) const {
    auto it = values_.find(name);
    if (it == values_.end()) throw ContractViolation("unknown parameter '" + name + "'");
    return it->second;
}

DenseArray& ParamStore::mutable_get(const std::string& name) {
    auto it = values_.find(name);
    if (it == values_.end()) throw ContractViolation("unknown parameter '" + name + "'");
    return it->second;
}

std::uint64_t ParamStore::hash_of(const std::string& name) const { return bitwise_hash(get(name)); }

std::uint64_t ParamStore::hash_all() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& n : order_) h = bitwise_hash(get(n), h ^ std::hash<std::string>{}(n));
    return h;
}

// --------------------------------------------------------------------- Graph

ValueRef Graph::push(Node n) {
    const auto idx = static_cast<std::int32_t>(nodes_.size());
    check_finite(n, idx);
    nodes_.push_back(std::move(n));
    return ValueRef{idx};
}

const Graph::Node& Graph::node(ValueRef r) const {
    if (!r.valid() || r.idx >= static_cast<std::int32_t>(nodes_.size()))
        throw ContractViolation("value reference out of range");
    return nodes_[static_cast<std::size_t>(r.idx)];
}

void Graph::check_finite(const Node& n, std::int32_t idx) const {
    if (!n.value.all_finite())
        throw NumericFault("non-finite value produced by node #" + std::to_string(idx) + " (" +
                           op_name(n.op) + (n.name.empty() ? "" : " '" + n.name + "'") + ")");
}

ValueRef Graph::param(const std::string& name, const DenseArray& value, bool trainable) {
    for (const auto& n : nodes_)
        if (n.op == Op::kLeaf && n.name == name)
            throw ContractViolation("parameter '" + name + "' already bound to this graph");
    Node n;
    n.op = Op::kLeaf;
    n.value = value;
    n.name = name;
    n.trainable = trainable;
    return push(std::move(n));
}

ValueRef Graph::constant(DenseArray value) {
    Node n;
    n.op = Op::kConst;
    n.value = std::move(value);
    return push(std::move(n));
}

ValueRef Graph::matmul(ValueRef a, ValueRef b) {
    const DenseArray& av = node(a).value;
    const DenseArray& bv = node(b).value;
    if (bv.shape.size() != 2 || av.cols() != bv.rows())
        throw ContractViolation("matmul shapes not conformable: " + shape_str(av.shape) + " x " +
                                shape_str(bv.shape));
    Node n;
    n.op = Op::kMatMul;
    n.in = {a.idx, b.idx};
    n.value = DenseArray::zeros({av.rows(), bv.cols()});
    kernels::matmul(av.data.data(), bv.data.data(), n.value.data.data(), av.rows(), av.cols(),
                    bv.cols());
    return push(std::move(n));
}

namespace {

enum class Broadcast { kSame, kRow, kScalar };

Broadcast broadcast_kind(const DenseArray& a, const DenseArray& b, const char* what) {
    if (a.same_shape(b)) return Broadcast::kSame;
    if (b.is_scalar()) return Broadcast::kScalar;
    if (b.rows() == 1 && b.cols() == a.cols()) return Broadcast::kRow;
    throw ContractViolation(std::string(what) + " shapes not conformable: " + shape_str(a.shape) +
                            " vs " + shape_str(b.shape));
}

} // namespace

ValueRef Graph::add(ValueRef a, ValueRef b) {
    const DenseArray& av = node(a).value;
    const DenseArray& bv = node(b).value;
    const Broadcast bc = broadcast_kind(av, bv, "add");
    Node n;
    n.op = Op::kAdd;
    n.in = {a.idx, b.idx};
    n.value = av;
    const std::size_t c = av.cols();
    for (std::size_t i = 0; i < av.numel(); ++i) {
        const double o = bc == Broadcast::kSame ? bv.data[i]
                       : bc == Broadcast::kScalar ? bv.data[0]
                                                  : bv.data[i % c];
        n.value.data[i] += o;
    }
    return push(std::move(n));
}

ValueRef Graph::mul(ValueRef a, ValueRef b) {
    const DenseArray& av = node(a).value;
    const DenseArray& bv = node(b).value;
    const Broadcast bc = broadcast_kind(av, bv, "elementwise-mul");
    Node n;
    n.op = Op::kMul;
    n.in = {a.idx, b.idx};
    n.value = av;
    const std::size_t c = av.cols();
    for (std::size_t i = 0; i < av.numel(); ++i) {
        const double o = bc == Broadcast::kSame ? bv.data[i]
                       : bc == Broadcast::kScalar ? bv.data[0]
                                                  : bv.data[i % c];
        n.value.data[i] *= o;
    }
    return push(std::move(n));
}

ValueRef Graph::row_layer_norm(ValueRef x) {
    const DenseArray& xv = node(x).value;
    Node n;
    n.op = Op::kRowLayerNorm;
    n.in = {x.idx, -1};
    n.value = DenseArray::zeros(xv.shape);
    kernels::layer_norm_rows(xv.data.data(), n.value.data.data(), xv.rows(), xv.cols(), kNormEps);
    return push(std::move(n));
}

ValueRef Graph::log_softmax(ValueRef x) {
    const DenseArray& xv = node(x).value;
    Node n;
    n.op = Op::kLogSoftmax;
    n.in = {x.idx, -1};
    n.value = DenseArray::zeros(xv.shape);
    kernels::log_softmax_rows(xv.data.data(), n.value.data.data(), xv.rows(), xv.cols());
    return push(std::move(n));
}

ValueRef Graph::gather_rows(ValueRef x, std::vector<int> rows) {
    const DenseArray& xv = node(x).value;
    if (rows.empty()) throw ContractViolation("gather-index needs at least one row index");
    for (int r : rows)
        if (r < 0 || static_cast<std::size_t>(r) >= xv.rows())
            throw ContractViolation("gather-index row " + std::to_string(r) + " out of range for " +
                                    shape_str(xv.shape));
    Node n;
    n.op = Op::kGatherRows;
    n.in = {x.idx, -1};
    n.value = DenseArray::zeros({rows.size(), xv.cols()});
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < xv.cols(); ++j)
            n.value.at(i, j) = xv.at(static_cast<std::size_t>(rows[i]), j);
    n.index = std::move(rows);
    return push(std::move(n));
}

ValueRef Graph::gather_per_row(ValueRef x, std::vector<int> cols) {
    const DenseArray& xv = node(x).value;
    if (cols.size() != xv.rows())
        throw ContractViolation("gather-index per-row needs one column per row: " +
                                std::to_string(cols.size()) + " indices for " + shape_str(xv.shape));
    for (int c : cols)
        if (c < 0 || static_cast<std::size_t>(c) >= xv.cols())
            throw ContractViolation("gather-index column " + std::to_string(c) +
                                    " out of range for " + shape_str(xv.shape));
    Node n;
    n.op = Op::kGatherPerRow;
    n.in = {x.idx, -1};
    n.value = DenseArray::zeros({cols.size()});
    for (std::size_t i = 0; i < cols.size(); ++i)
        n.value.data[i] = xv.at(i, static_cast<std::size_t>(cols[i]));
    n.index = std::move(cols);
    return push(std::move(n));
}

ValueRef Graph::sum(ValueRef x) {
    const DenseArray& xv = node(x).value;
    double s = 0.0;
    for (double v : xv.data) s += v;
    Node n;
    n.op = Op::kSum;
    n.in = {x.idx, -1};
    n.value = DenseArray::scalar(s);
    return push(std::move(n));
}

ValueRef Graph::mean(ValueRef x) {
    const DenseArray& xv = node(x).value;
    double s = 0.0;
    for (double v : xv.data) s += v;
    Node n;
    n.op = Op::kMean;
    n.in = {x.idx, -1};
    n.value = DenseArray::scalar(s / static_cast<double>(xv.numel()));
    return push(std::move(n));
}

ValueRef Graph::square(ValueRef x) {
    Node n;
    n.op = Op::kSquare;
    n.in = {x.idx, -1};
    n.value = node(x).value;
    for (double& v : n.value.data) v *= v;
    return push(std::move(n));
}

ValueRef Graph::log(ValueRef x) {
    Node n;
    n.op = Op::kLog;
    n.in = {x.idx, -1};
    n.value = node(x).value;
    for (double& v : n.value.data) v = std::log(v);
    return push(std::move(n));
}

ValueRef Graph::exp(ValueRef x) {
    Node n;
    n.op = Op::kExp;
    n.in = {x.idx, -1};
    n.value = node(x).value;
    for (double& v : n.value.data) v = std::exp(v);
    return push(std::move(n));
}

ValueRef Graph::clamp(ValueRef x, double lo, double hi) {
    if (!(lo <= hi)) throw ContractViolation("clamp needs lo <= hi");
    Node n;
    n.op = Op::kClamp;
    n.in = {x.idx, -1};
    n.lo = lo;
    n.hi = hi;
    n.value = node(x).value;
    for (double& v : n.value.data) v = std::min(hi, std::max(lo, v));
    return push(std::move(n));
}

ValueRef Graph::stop_gradient(ValueRef x) {
    Node n;
    n.op = Op::kStopGrad;
    n.in = {x.idx, -1};
    n.value = node(x).value;
    return push(std::move(n));
}

ValueRef Graph::mean_rows(ValueRef x) {
    const DenseArray& xv = node(x).value;
    const std::size_t r = xv.rows();
    return matmul(constant(DenseArray::full({1, r}, 1.0 / static_cast<double>(r))), x);
}

const DenseArray& Graph::value(ValueRef r) const { return node(r).value; }

double Graph::scalar_value(ValueRef r) const {
    const DenseArray& v = node(r).value;
    if (!v.is_scalar()) throw ContractViolation("expected a scalar node, got " + shape_str(v.shape));
    return v.data[0];
}

GradMap Graph::backward(ValueRef loss) const {
    const Node& ln = node(loss);
    if (!ln.value.is_scalar())
        throw ContractViolation("backward needs a scalar loss, got " + shape_str(ln.value.shape));

    std::vector<DenseArray> adj(static_cast<std::size_t>(loss.idx) + 1);
    adj[static_cast<std::size_t>(loss.idx)] = DenseArray::scalar(1.0);

    auto accum = [&](std::int32_t idx, std::size_t flat, double v) {
        DenseArray& g = adj[static_cast<std::size_t>(idx)];
        if (g.data.empty()) g = DenseArray::zeros(nodes_[static_cast<std::size_t>(idx)].value.shape);
        g.data[flat] += v;
    };

    for (std::int32_t i = loss.idx; i >= 0; --i) {
        const Node& n = nodes_[static_cast<std::size_t>(i)];
        const DenseArray& gy = adj[static_cast<std::size_t>(i)];
        if (gy.data.empty()) continue;

        switch (n.op) {
        case Op::kLeaf:
        case Op::kConst:
        case Op::kStopGrad:
            break;
        case Op::kMatMul: {
            const DenseArray& av = nodes_[n.in[0]].value;
            const DenseArray& bv = nodes_[n.in[1]].value;
            const std::size_t m = av.rows(), k = av.cols(), nn = bv.cols();
            DenseArray da = DenseArray::zeros(av.shape);
            DenseArray db = DenseArray::zeros(bv.shape);
            kernels::matmul_nt(gy.data.data(), bv.data.data(), da.data.data(), m, nn, k);
            kernels::matmul_tn(av.data.data(), gy.data.data(), db.data.data(), k, m, nn);
            for (std::size_t t = 0; t < da.numel(); ++t) accum(n.in[0], t, da.data[t]);
            for (std::size_t t = 0; t < db.numel(); ++t) accum(n.in[1], t, db.data[t]);
            break;
        }
        case Op::kAdd: {
            const DenseArray& av = nodes_[n.in[0]].value;
            const DenseArray& bv = nodes_[n.in[1]].value;
            for (std::size_t t = 0; t < gy.numel(); ++t) accum(n.in[0], t, gy.data[t]);
            if (av.same_shape(bv)) {
                for (std::size_t t = 0; t < gy.numel(); ++t) accum(n.in[1], t, gy.data[t]);
            } else if (bv.is_scalar()) {
                double s = 0.0;
                for (double v : gy.data) s += v;
                accum(n.in[1], 0, s);
            } else {
                const std::size_t c = av.cols();
                for (std::size_t t = 0; t < gy.numel(); ++t) accum(n.in[1], t % c, gy.data[t]);
            }
            break;
        }
        case Op::kMul: {
            const DenseArray& av = nodes_[n.in[0]].value;
            const DenseArray& bv = nodes_[n.in[1]].value;
            const std::size_t c = av.cols();
            const bool same = av.same_shape(bv);
            const bool scalar = !same && bv.is_scalar();
            for (std::size_t t = 0; t < gy.numel(); ++t) {
                const std::size_t bi = same ? t : scalar ? 0 : t % c;
                accum(n.in[0], t, gy.data[t] * bv.data[bi]);
                accum(n.in[1], bi, gy.data[t] * av.data[t]);
            }
            break;
        }
        case Op::kRowLayerNorm: {
            const DenseArray& xv = nodes_[n.in[0]].value;
            const DenseArray& yv = n.value;
            const std::size_t r = xv.rows(), c = xv.cols();
            for (std::size_t ri = 0; ri < r; ++ri) {
                double mu = 0.0;
                for (std::size_t j = 0; j < c; ++j) mu += xv.at(ri, j);
                mu /= static_cast<double>(c);
                double var = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    const double d = xv.at(ri, j) - mu;
                    var += d * d;
                }
                var /= static_cast<double>(c);
                const double inv = 1.0 / std::sqrt(var + kNormEps);
                double gmean = 0.0, gymean = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    gmean += gy.at(ri, j);
                    gymean += gy.at(ri, j) * yv.at(ri, j);
                }
                gmean /= static_cast<double>(c);
                gymean /= static_cast<double>(c);
                for (std::size_t j = 0; j < c; ++j)
                    accum(n.in[0], ri * c + j,
                          inv * (gy.at(ri, j) - gmean - yv.at(ri, j) * gymean));
            }
            break;
        }
        case Op::kLogSoftmax: {
            const DenseArray& yv = n.value;
            const std::size_t r = yv.rows(), c = yv.cols();
            for (std::size_t ri = 0; ri < r; ++ri) {
                double gsum = 0.0;
                for (std::size_t j = 0; j < c; ++j) gsum += gy.at(ri, j);
                for (std::size_t j = 0; j < c; ++j)
                    accum(n.in[0], ri * c + j, gy.at(ri, j) - std::exp(yv.at(ri, j)) * gsum);
            }
            break;
        }
        case Op::kGatherRows: {
            const std::size_t c = n.value.cols();
            for (std::size_t i2 = 0; i2 < n.index.size(); ++i2)
                for (std::size_t j = 0; j < c; ++j)
                    accum(n.in[0], static_cast<std::size_t>(n.index[i2]) * c + j, gy.at(i2, j));
            break;
        }
        case Op::kGatherPerRow: {
            const std::size_t c = nodes_[n.in[0]].value.cols();
            for (std::size_t i2 = 0; i2 < n.index.size(); ++i2)
                accum(n.in[0], i2 * c + static_cast<std::size_t>(n.index[i2]), gy.data[i2]);
            break;
        }
        case Op::kSum:
            for (std::size_t t = 0; t < nodes_[n.in[0]].value.numel(); ++t)
                accum(n.in[0], t, gy.data[0]);
            break;
        case Op::kMean: {
            const std::size_t m = nodes_[n.in[0]].value.numel();
            for (std::size_t t = 0; t < m; ++t)
                accum(n.in[0], t, gy.data[0] / static_cast<double>(m));
            break;
        }
        case Op::kSquare: {
            const DenseArray& xv = nodes_[n.in[0]].value;
            for (std::size_t t = 0; t < gy.numel(); ++t)
                accum(n.in[0], t, 2.0 * xv.data[t] * gy.data[t]);
            break;
        }
        case Op::kLog: {
            const DenseArray& xv = nodes_[n.in[0]].value;
            for (std::size_t t = 0; t < gy.numel(); ++t)
                accum(n.in[0], t, gy.data[t] / xv.data[t]);
            break;
        }
        case Op::kExp: {
            for (std::size_t t = 0; t < gy.numel(); ++t)
                accum(n.in[0], t, n.value.data[t] * gy.data[t]);
            break;
        }
        case Op::kClamp: {
            const DenseArray& xv = nodes_[n.in[0]].value;
            for (std::size_t t = 0; t < gy.numel(); ++t)
                if (xv.data[t] >= n.lo && xv.data[t] <= n.hi) accum(n.in[0], t, gy.data[t]);
            break;
        }
        }
    }

    GradMap out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        const Node& n = nodes_[i];
        if (n.op != Op::kLeaf || !n.trainable) continue;
        if (i <= static_cast<std::size_t>(loss.idx) && !adj[i].data.empty())
            out[n.name] = adj[i];
        else
            out[n.name] = DenseArray::zeros(n.value.shape);
    }
    return out;
}

// --------------------------------------------------------- finite differences

double finite_diff_check(const std::function<ValueRef(Graph&, const ParamStore&)>& build_loss,
                         const ParamStore& params, const std::vector<std::string>& wrt,
                         double step) {
    if (step < 1e-7 || step > 1e-3)
        throw ContractViolation("finite_diff_check step must lie in [1e-7, 1e-3]");

    Graph g;
    ValueRef loss = build_loss(g, params);
    if (!g.value(loss).is_scalar())
        throw ContractViolation("finite_diff_check needs a scalar loss");
    const GradMap grads = g.backward(loss);

    ParamStore probe = params;
    double worst = 0.0;
    for (const auto& name : wrt) {
        auto it = grads.find(name);
        if (it == grads.end())
            throw ContractViolation("finite_diff_check: '" + name +
                                    "' was not bound as a trainable parameter by the builder");
        const DenseArray& analytic = it->second;
        DenseArray& arr = probe.mutable_get(name);
        for (std::size_t t = 0; t < arr.numel(); ++t) {
            const double saved = arr.data[t];
            arr.data[t] = saved + step;
            Graph gp;
            const double fp = gp.scalar_value(build_loss(gp, probe));
            arr.data[t] = saved - step;
            Graph gm;
            const double fm = gm.scalar_value(build_loss(gm, probe));
            arr.data[t] = saved;
            const double fd = (fp - fm) / (2.0 * step);
            const double a = analytic.data[t];
            const double rel = std::abs(a - fd) / std::max(std::abs(a), 1e-8);
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

// ----------------------------------------------------------------- optimizer

void SgdMomentum::step(ParamStore& params, const GradMap& grads) {
    for (const auto& [name, g] : grads) {
        DenseArray& p = params.mutable_get(name);
        if (!p.same_shape(g))
            throw ContractViolation("gradient shape " + shape_str(g.shape) +
                                    " does not match parameter '" + name + "' " +
                                    shape_str(p.shape));
        auto& v = velocity_[name];
        if (v.empty()) v.assign(p.numel(), 0.0);
        double lr = lr_;
        if (auto it = lr_scale_.find(name); it != lr_scale_.end()) lr *= it->second;
        for (std::size_t t = 0; t < p.numel(); ++t) {
            v[t] = momentum_ * v[t] + g.data[t];
            p.data[t] -= lr * v[t];
        }
    }
}

} // namespace ilab
