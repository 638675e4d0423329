#include "nsid/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace nsid::ad {

std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)), data(shape_size(shape), fill) {}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != shape_size(shape)) {
        throw ShapeError("tensor: " + std::to_string(data.size()) + " values for shape " +
                         shape_str(shape));
    }
}

Tensor Tensor::vector(std::vector<double> values) {
    Shape s{values.size()};
    return Tensor(std::move(s), std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return Tensor(Shape{rows, cols}, std::move(values));
}

double Tensor::item() const {
    if (data.size() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape) + " is not a scalar");
    return data[0];
}

namespace {

constexpr const char* kNames[] = {"matmul", "add",   "subtract", "multiply", "scale",
                                  "relu",   "tanh",  "concat",   "slice",    "sum",
                                  "mean",   "square", "reshape", "gather_rows"};

[[noreturn]] void mismatch(OpKind kind, const Shape& a, const Shape& b) {
    throw ShapeError(std::string(op_name(kind)) + ": incompatible shapes " + shape_str(a) + " and " +
                     shape_str(b));
}

bool is_suffix(const Shape& full, const Shape& tail) {
    if (tail.size() > full.size()) return false;
    return std::equal(tail.begin(), tail.end(), full.end() - static_cast<std::ptrdiff_t>(tail.size()));
}

void require_arity(OpKind kind, std::size_t got, std::size_t want) {
    if (got != want) {
        throw std::invalid_argument(std::string(op_name(kind)) + ": expected " + std::to_string(want) +
                                    " operands, got " + std::to_string(got));
    }
}

// Elementwise binary op; b may be broadcast over the leading axes of a.
template <typename F>
Tensor broadcast_binary(OpKind kind, const Tensor& a, const Tensor& b, F f) {
    if (!is_suffix(a.shape, b.shape)) mismatch(kind, a.shape, b.shape);
    Tensor out(a.shape);
    const std::size_t nb = b.size();
    if (nb == 0) return out;
    const double* pa = a.data.data();
    const double* pb = b.data.data();
    double* po = out.data.data();
    for (std::size_t base = 0; base < a.size(); base += nb) {
        for (std::size_t j = 0; j < nb; ++j) po[base + j] = f(pa[base + j], pb[j]);
    }
    return out;
}

Tensor matmul_fwd(const Tensor& a, const Tensor& b) {
    if (a.rank() < 1 || b.rank() != 2 || a.last() != b.shape[0]) mismatch(OpKind::matmul, a.shape, b.shape);
    const std::size_t rows = a.rows(), k = b.shape[0], n = b.shape[1];
    Shape s = a.shape;
    s.back() = n;
    Tensor out(std::move(s));
    for (std::size_t r = 0; r < rows; ++r) {
        const double* ar = a.data.data() + r * k;
        double* orow = out.data.data() + r * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ar[p];
            const double* brow = b.data.data() + p * n;
            for (std::size_t c = 0; c < n; ++c) orow[c] += av * brow[c];
        }
    }
    return out;
}

Tensor concat_fwd(std::span<const Tensor* const> parts) {
    if (parts.empty()) throw std::invalid_argument("concat: no operands");
    const Tensor& first = *parts[0];
    if (first.rank() == 0) throw ShapeError("concat: scalar operand");
    Shape lead(first.shape.begin(), first.shape.end() - 1);
    std::size_t width = 0;
    for (const Tensor* p : parts) {
        Shape pl(p->shape.begin(), p->shape.end() - (p->rank() ? 1 : 0));
        if (p->rank() == 0 || pl != lead) mismatch(OpKind::concat, first.shape, p->shape);
        width += p->last();
    }
    Shape s = lead;
    s.push_back(width);
    Tensor out(std::move(s));
    const std::size_t rows = shape_size(lead);
    for (std::size_t r = 0; r < rows; ++r) {
        double* dst = out.data.data() + r * width;
        for (const Tensor* p : parts) {
            const std::size_t w = p->last();
            std::copy_n(p->data.data() + r * w, w, dst);
            dst += w;
        }
    }
    return out;
}

Tensor slice_fwd(const Tensor& a, std::size_t begin, std::size_t end) {
    if (a.rank() == 0 || begin > end || end > a.last()) {
        throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for shape " + shape_str(a.shape));
    }
    const std::size_t w = a.last(), nw = end - begin, rows = a.rows();
    Shape s = a.shape;
    s.back() = nw;
    Tensor out(std::move(s));
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(a.data.data() + r * w + begin, nw, out.data.data() + r * nw);
    }
    return out;
}

Tensor gather_fwd(const Tensor& a, const std::vector<std::size_t>& idx) {
    if (a.rank() == 0) throw ShapeError("gather_rows: scalar operand");
    const std::size_t n_rows = a.shape[0];
    const std::size_t row = n_rows == 0 ? 0 : a.size() / n_rows;
    Shape s = a.shape;
    s[0] = idx.size();
    Tensor out(std::move(s));
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= n_rows) {
            throw ShapeError("gather_rows: index " + std::to_string(idx[i]) + " out of range for shape " +
                             shape_str(a.shape));
        }
        std::copy_n(a.data.data() + idx[i] * row, row, out.data.data() + i * row);
    }
    return out;
}

}  // namespace

const char* op_name(OpKind kind) { return kNames[static_cast<int>(kind)]; }

OpKind op_from_name(const std::string& name) {
    for (std::size_t i = 0; i < std::size(kNames); ++i) {
        if (name == kNames[i]) return static_cast<OpKind>(i);
    }
    throw std::invalid_argument("unknown primitive '" + name + "'");
}

Tensor evaluate(OpKind kind, std::span<const Tensor* const> ops, const OpAttrs& attrs) {
    switch (kind) {
        case OpKind::matmul:
            require_arity(kind, ops.size(), 2);
            return matmul_fwd(*ops[0], *ops[1]);
        case OpKind::add:
            require_arity(kind, ops.size(), 2);
            return broadcast_binary(kind, *ops[0], *ops[1], [](double x, double y) { return x + y; });
        case OpKind::subtract:
            require_arity(kind, ops.size(), 2);
            return broadcast_binary(kind, *ops[0], *ops[1], [](double x, double y) { return x - y; });
        case OpKind::multiply:
            require_arity(kind, ops.size(), 2);
            return broadcast_binary(kind, *ops[0], *ops[1], [](double x, double y) { return x * y; });
        case OpKind::scale: {
            require_arity(kind, ops.size(), 1);
            Tensor out = *ops[0];
            for (double& v : out.data) v *= attrs.factor;
            return out;
        }
        case OpKind::relu: {
            require_arity(kind, ops.size(), 1);
            Tensor out = *ops[0];
            for (double& v : out.data) v = v > 0.0 ? v : 0.0;
            return out;
        }
        case OpKind::tanh: {
            require_arity(kind, ops.size(), 1);
            Tensor out = *ops[0];
            for (double& v : out.data) v = std::tanh(v);
            return out;
        }
        case OpKind::concat:
            return concat_fwd(ops);
        case OpKind::slice:
            require_arity(kind, ops.size(), 1);
            return slice_fwd(*ops[0], attrs.begin, attrs.end);
        case OpKind::sum:
        case OpKind::mean: {
            require_arity(kind, ops.size(), 1);
            double acc = 0.0;
            for (double v : ops[0]->data) acc += v;
            if (kind == OpKind::mean) {
                if (ops[0]->size() == 0) throw ShapeError("mean: empty tensor");
                acc /= static_cast<double>(ops[0]->size());
            }
            return Tensor::scalar(acc);
        }
        case OpKind::square: {
            require_arity(kind, ops.size(), 1);
            Tensor out = *ops[0];
            for (double& v : out.data) v = v * v;
            return out;
        }
        case OpKind::reshape: {
            require_arity(kind, ops.size(), 1);
            if (shape_size(attrs.shape) != ops[0]->size()) mismatch(kind, ops[0]->shape, attrs.shape);
            return Tensor(attrs.shape, ops[0]->data);
        }
        case OpKind::gather_rows:
            require_arity(kind, ops.size(), 1);
            return gather_fwd(*ops[0], attrs.indices);
    }
    throw std::invalid_argument("unknown primitive kind");
}

Variable::Variable(Tensor value, bool requires_grad, std::string name)
    : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
    node_->name = std::move(name);
}

void Variable::zero_grad() {
    Tensor& g = ensure_grad();
    std::fill(g.data.begin(), g.data.end(), 0.0);
}

Variable constant(Tensor value) { return Variable(std::move(value), false); }

Variable Tape::apply(OpKind kind, std::span<const Variable> operands, const OpAttrs& attrs) {
    std::vector<const Tensor*> vals;
    vals.reserve(operands.size());
    bool any_grad = false;
    for (const auto& v : operands) {
        if (!v.valid()) throw std::invalid_argument(std::string(op_name(kind)) + ": null operand");
        vals.push_back(&v.value());
        any_grad = any_grad || v.requires_grad();
    }
    const bool rec = any_grad && recording();
    Variable result(evaluate(kind, vals, attrs), rec);
    if (rec) entries_.push_back(Entry{kind, {operands.begin(), operands.end()}, result, attrs});
    return result;
}

namespace {

// Reduces a gradient of a's shape down to b's (suffix) shape by summing over leading axes.
void accumulate_broadcast(Tensor& dst, const std::vector<double>& g) {
    const std::size_t nb = dst.size();
    if (nb == 0) return;
    if (nb == g.size()) {
        for (std::size_t i = 0; i < nb; ++i) dst.data[i] += g[i];
        return;
    }
    double* pd = dst.data.data();
    for (std::size_t base = 0; base < g.size(); base += nb) {
        for (std::size_t j = 0; j < nb; ++j) pd[j] += g[base + j];
    }
}

}  // namespace

void Tape::backward(const Variable& root) {
    if (entries_.empty()) return;
    if (root.value().size() != 1 || root.value().rank() > 1) {
        throw ShapeError("backward: root must be a scalar, got shape " + shape_str(root.shape()));
    }
    Variable r = root;
    r.grad().data[0] += 1.0;

    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
        Entry& e = *it;
        const Tensor& go = e.result.grad();
        auto& ops = e.operands;
        auto wants = [&](std::size_t i) { return ops[i].requires_grad(); };

        switch (e.kind) {
            case OpKind::matmul: {
                const Tensor& a = ops[0].value();
                const Tensor& b = ops[1].value();
                const std::size_t rows = a.rows(), k = b.shape[0], n = b.shape[1];
                if (wants(0)) {
                    Tensor& ga = ops[0].grad();
                    for (std::size_t rr = 0; rr < rows; ++rr) {
                        const double* gr = go.data.data() + rr * n;
                        double* gar = ga.data.data() + rr * k;
                        for (std::size_t p = 0; p < k; ++p) {
                            const double* brow = b.data.data() + p * n;
                            double acc = 0.0;
                            for (std::size_t c = 0; c < n; ++c) acc += gr[c] * brow[c];
                            gar[p] += acc;
                        }
                    }
                }
                if (wants(1)) {
                    Tensor& gb = ops[1].grad();
                    for (std::size_t rr = 0; rr < rows; ++rr) {
                        const double* ar = a.data.data() + rr * k;
                        const double* gr = go.data.data() + rr * n;
                        for (std::size_t p = 0; p < k; ++p) {
                            const double av = ar[p];
                            double* gbrow = gb.data.data() + p * n;
                            for (std::size_t c = 0; c < n; ++c) gbrow[c] += av * gr[c];
                        }
                    }
                }
                break;
            }
            case OpKind::add:
            case OpKind::subtract: {
                if (wants(0)) {
                    Tensor& ga = ops[0].grad();
                    for (std::size_t i = 0; i < ga.size(); ++i) ga.data[i] += go.data[i];
                }
                if (wants(1)) {
                    if (e.kind == OpKind::add) {
                        accumulate_broadcast(ops[1].grad(), go.data);
                    } else {
                        std::vector<double> neg(go.data.size());
                        for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = -go.data[i];
                        accumulate_broadcast(ops[1].grad(), neg);
                    }
                }
                break;
            }
            case OpKind::multiply: {
                const Tensor& a = ops[0].value();
                const Tensor& b = ops[1].value();
                const std::size_t nb = b.size();
                if (wants(0)) {
                    Tensor& ga = ops[0].grad();
                    for (std::size_t i = 0; i < ga.size(); ++i) ga.data[i] += go.data[i] * b.data[i % nb];
                }
                if (wants(1)) {
                    std::vector<double> g(go.size());
                    for (std::size_t i = 0; i < g.size(); ++i) g[i] = go.data[i] * a.data[i];
                    accumulate_broadcast(ops[1].grad(), g);
                }
                break;
            }
            case OpKind::scale: {
                if (wants(0)) {
                    Tensor& ga = ops[0].grad();
                    for (std::size_t i = 0; i < ga.size(); ++i) ga.data[i] += e.attrs.factor * go.data[i];
                }
                break;
            }
            case OpKind::relu: {
                if (wants(0)) {
                    const Tensor& a = ops[0].value();
                    Tensor& ga = ops[0].grad();
                    for (std::size_t i = 0; i < ga.size(); ++i) {
                        if (a.data[i] > 0.0) ga.data[i] += go.data[i];
                    }
                }
                break;
            }
            case OpKind::tanh: {
                if (wants(0)) {
                    const Tensor& y = e.result.value();
                    Tensor& ga = ops[0].grad();
                    for (std::size_t i = 0; i < ga.size(); ++i) ga.data[i] += go.data[i] * (1.0 - y.data[i] * y.data[i]);
                }
                break;
            }
            case OpKind::concat: {
                const std::size_t width = go.last(), rows = go.rows();
                std::size_t offset = 0;
                for (std::size_t j = 0; j < ops.size(); ++j) {
                    const std::size_t w = ops[j].value().last();
                    if (wants(j)) {
                        Tensor& gj = ops[j].grad();
                        for (std::size_t rr = 0; rr < rows; ++rr) {
                            const double* src = go.data.data() + rr * width + offset;
                            double* dst = gj.data.data() + rr * w;
                            for (std::size_t c = 0; c < w; ++c) dst[c] += src[c];
                        }
                    }
                    offset += w;
                }
                break;
            }
            case OpKind::slice: {
                if (wants(0)) {
                    Tensor& ga = ops[0].grad();
                    const std::size_t w = ga.last(), nw = e.attrs.end - e.attrs.begin, rows = ga.rows();
                    for (std::size_t rr = 0; rr < rows; ++rr) {
                        for (std::size_t c = 0; c < nw; ++c) ga.data[rr * w + e.attrs.begin + c] += go.data[rr * nw + c];
                    }
                }
                break;
            }
            case OpKind::sum:
            case OpKind::mean: {
                if (wants(0)) {
                    Tensor& ga = ops[0].grad();
                    double g = go.data[0];
                    if (e.kind == OpKind::mean) g /= static_cast<double>(ga.size());
                    for (double& v : ga.data) v += g;
                }
                break;
            }
            case OpKind::square: {
                if (wants(0)) {
                    const Tensor& a = ops[0].value();
                    Tensor& ga = ops[0].grad();
                    for (std::size_t i = 0; i < ga.size(); ++i) ga.data[i] += 2.0 * a.data[i] * go.data[i];
                }
                break;
            }
            case OpKind::reshape: {
                if (wants(0)) {
                    Tensor& ga = ops[0].grad();
                    for (std::size_t i = 0; i < ga.size(); ++i) ga.data[i] += go.data[i];
                }
                break;
            }
            case OpKind::gather_rows: {
                if (wants(0)) {
                    Tensor& ga = ops[0].grad();
                    const std::size_t n_rows = ga.shape[0];
                    const std::size_t row = n_rows == 0 ? 0 : ga.size() / n_rows;
                    const auto& idx = e.attrs.indices;
                    for (std::size_t i = 0; i < idx.size(); ++i) {
                        double* dst = ga.data.data() + idx[i] * row;
                        const double* src = go.data.data() + i * row;
                        for (std::size_t c = 0; c < row; ++c) dst[c] += src[c];
                    }
                }
                break;
            }
        }
    }
    entries_.clear();
}

bool Tape::replay_matches() const {
    for (const auto& e : entries_) {
        std::vector<const Tensor*> vals;
        for (const auto& v : e.operands) vals.push_back(&v.value());
        if (evaluate(e.kind, vals, e.attrs).data != e.result.value().data) return false;
    }
    return true;
}

Variable matmul(Tape& t, const Variable& a, const Variable& b) {
    const Variable ops[] = {a, b};
    return t.apply(OpKind::matmul, ops);
}
Variable add(Tape& t, const Variable& a, const Variable& b) {
    const Variable ops[] = {a, b};
    return t.apply(OpKind::add, ops);
}
Variable subtract(Tape& t, const Variable& a, const Variable& b) {
    const Variable ops[] = {a, b};
    return t.apply(OpKind::subtract, ops);
}
Variable multiply(Tape& t, const Variable& a, const Variable& b) {
    const Variable ops[] = {a, b};
    return t.apply(OpKind::multiply, ops);
}
Variable scale(Tape& t, const Variable& a, double factor) {
    OpAttrs attrs;
    attrs.factor = factor;
    return t.apply(OpKind::scale, std::span<const Variable>(&a, 1), attrs);
}
Variable relu(Tape& t, const Variable& a) { return t.apply(OpKind::relu, std::span<const Variable>(&a, 1)); }
Variable tanh(Tape& t, const Variable& a) { return t.apply(OpKind::tanh, std::span<const Variable>(&a, 1)); }
Variable concat(Tape& t, std::span<const Variable> parts) { return t.apply(OpKind::concat, parts); }
Variable concat(Tape& t, std::initializer_list<Variable> parts) {
    return t.apply(OpKind::concat, std::span<const Variable>(parts.begin(), parts.size()));
}
Variable slice(Tape& t, const Variable& a, std::size_t begin, std::size_t end) {
    OpAttrs attrs;
    attrs.begin = begin;
    attrs.end = end;
    return t.apply(OpKind::slice, std::span<const Variable>(&a, 1), attrs);
}
Variable sum(Tape& t, const Variable& a) { return t.apply(OpKind::sum, std::span<const Variable>(&a, 1)); }
Variable mean(Tape& t, const Variable& a) { return t.apply(OpKind::mean, std::span<const Variable>(&a, 1)); }
Variable square(Tape& t, const Variable& a) { return t.apply(OpKind::square, std::span<const Variable>(&a, 1)); }
Variable reshape(Tape& t, const Variable& a, Shape shape) {
    OpAttrs attrs;
    attrs.shape = std::move(shape);
    return t.apply(OpKind::reshape, std::span<const Variable>(&a, 1), attrs);
}
Variable gather_rows(Tape& t, const Variable& a, std::vector<std::size_t> indices) {
    OpAttrs attrs;
    attrs.indices = std::move(indices);
    return t.apply(OpKind::gather_rows, std::span<const Variable>(&a, 1), attrs);
}

double check_gradients(const std::function<Variable(Tape&)>& fn, std::span<const Variable> point, double step) {
    if (!(step > 0.0)) throw std::invalid_argument("check_gradients: step must be positive");

    std::vector<Tensor> analytic;
    {
        for (auto v : point) v.zero_grad();
        Tape tape;
        Variable root = fn(tape);
        tape.backward(root);
        for (const auto& v : point) analytic.push_back(v.grad());
    }

    auto eval_at = [&](std::size_t vi, std::size_t ci) {
        Tape probe(Tape::Mode::no_grad);
        const double f = fn(probe).value().item();
        if (!std::isfinite(f)) {
            const auto& name = point[vi].name();
            throw NonFiniteError("check_gradients: non-finite value perturbing variable " +
                                 (name.empty() ? std::to_string(vi) : name) + " coordinate " + std::to_string(ci));
        }
        return f;
    };

    double worst = 0.0;
    for (std::size_t vi = 0; vi < point.size(); ++vi) {
        Variable v = point[vi];
        for (std::size_t ci = 0; ci < v.value().size(); ++ci) {
            const double orig = v.value().data[ci];
            v.value().data[ci] = orig + step;
            const double fp = eval_at(vi, ci);
            v.value().data[ci] = orig - step;
            const double fm = eval_at(vi, ci);
            v.value().data[ci] = orig;
            const double numeric = (fp - fm) / (2.0 * step);
            const double err = std::abs(analytic[vi].data[ci] - numeric) / std::max(1.0, std::abs(numeric));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

}  // namespace nsid::ad
