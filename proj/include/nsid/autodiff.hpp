#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nsid::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major array of doubles.
struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0);
    Tensor(Shape s, std::vector<double> values);

    static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
    static Tensor vector(std::vector<double> values);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    // Extent of the last axis (1 for scalars).
    std::size_t last() const { return shape.empty() ? 1 : shape.back(); }
    // Number of rows when viewed as [rows, last()].
    std::size_t rows() const { return last() == 0 ? 0 : size() / last(); }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }
    double item() const;

    bool operator==(const Tensor&) const = default;
};

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum class OpKind {
    matmul,
    add,
    subtract,
    multiply,
    scale,
    relu,
    tanh,
    concat,
    slice,
    sum,
    mean,
    square,
    reshape,
    gather_rows,
};

const char* op_name(OpKind kind);
// Parses an op name ("matmul", "relu", ...); throws std::invalid_argument for unknown names.
OpKind op_from_name(const std::string& name);

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::string name;
};

// Shared handle to a value/gradient pair. Copies alias the same node.
class Variable {
public:
    Variable() = default;
    explicit Variable(Tensor value, bool requires_grad = false, std::string name = {});

    const Tensor& value() const { return node_->value; }
    Tensor& value() { return node_->value; }
    // Gradient buffers are allocated on first access.
    const Tensor& grad() const { return ensure_grad(); }
    Tensor& grad() { return ensure_grad(); }
    const Shape& shape() const { return node_->value.shape; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }
    const std::string& name() const { return node_->name; }
    void zero_grad();
    bool valid() const { return node_ != nullptr; }
    bool same_node(const Variable& other) const { return node_ == other.node_; }

private:
    Tensor& ensure_grad() const {
        if (node_->grad.data.size() != node_->value.data.size() || node_->grad.shape != node_->value.shape) {
            node_->grad = Tensor(node_->value.shape);
        }
        return node_->grad;
    }

    std::shared_ptr<Node> node_;
};

// Non-shape attributes for the primitives that need them.
struct OpAttrs {
    double factor = 1.0;                // scale
    std::size_t begin = 0, end = 0;     // slice [begin, end) on the last axis
    Shape shape;                        // reshape target
    std::vector<std::size_t> indices;   // gather_rows
};

// Define-by-run record of primitive applications. Results of ops with at least one
// differentiable operand are appended in evaluation order, so the record is
// topologically sorted by construction.
class Tape {
public:
    enum class Mode { record, no_grad };

    explicit Tape(Mode mode = Mode::record) : mode_(mode) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Variable apply(OpKind kind, std::span<const Variable> operands, const OpAttrs& attrs = {});

    // Accumulates d(root)/d(v) into v.grad for every differentiable v reachable from root,
    // then clears the tape. No-op on an empty tape.
    void backward(const Variable& root);

    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    bool recording() const { return mode_ == Mode::record; }
    void clear() { entries_.clear(); }

    // Recomputes every recorded result from its operands; returns false if any differs.
    bool replay_matches() const;

private:
    struct Entry {
        OpKind kind;
        std::vector<Variable> operands;
        Variable result;
        OpAttrs attrs;
    };
    Mode mode_;
    std::vector<Entry> entries_;
};

// Forward evaluation of a primitive without any recording.
Tensor evaluate(OpKind kind, std::span<const Tensor* const> operands, const OpAttrs& attrs);

// Convenience wrappers around Tape::apply.
Variable matmul(Tape& t, const Variable& a, const Variable& b);
Variable add(Tape& t, const Variable& a, const Variable& b);
Variable subtract(Tape& t, const Variable& a, const Variable& b);
Variable multiply(Tape& t, const Variable& a, const Variable& b);
Variable scale(Tape& t, const Variable& a, double factor);
Variable relu(Tape& t, const Variable& a);
Variable tanh(Tape& t, const Variable& a);
Variable concat(Tape& t, std::span<const Variable> parts);
Variable concat(Tape& t, std::initializer_list<Variable> parts);
Variable slice(Tape& t, const Variable& a, std::size_t begin, std::size_t end);
Variable sum(Tape& t, const Variable& a);
Variable mean(Tape& t, const Variable& a);
Variable square(Tape& t, const Variable& a);
Variable reshape(Tape& t, const Variable& a, Shape shape);
Variable gather_rows(Tape& t, const Variable& a, std::vector<std::size_t> indices);

Variable constant(Tensor value);

class NonFiniteError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Central-difference gradient check. `fn` builds a scalar on the supplied tape from the
// variables in `point`. Returns max |analytic - numeric| / max(1, |numeric|).
double check_gradients(const std::function<Variable(Tape&)>& fn,
                       std::span<const Variable> point, double step);

}  // namespace nsid::ad
