#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ofq/tensor.hpp"

namespace ofq {

class Graph;

/// Handle to a node in a Graph. Cheap to copy; only valid while the graph lives.
class Var {
public:
    Var() = default;

    bool valid() const noexcept { return graph_ != nullptr; }
    Graph& graph() const { return *graph_; }
    std::size_t id() const noexcept { return id_; }
    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }

private:
    friend class Graph;
    Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

    Graph* graph_ = nullptr;
    std::size_t id_ = 0;
};

/// What a backward rule sees: input values, its own output, and dL/d(output).
/// `needs[i]` tells the rule whether input i wants a gradient at all.
struct GradContext {
    std::span<const Tensor* const> inputs;
    const Tensor& output;
    const Tensor& upstream;
    std::span<const bool> needs;
};

/// Returns one gradient per input. An empty Tensor means "no gradient".
using GradFn = std::function<std::vector<Tensor>(const GradContext&)>;
using ForwardFn = std::function<Tensor(std::span<const Tensor* const>)>;

/// Tape of recorded operations with reverse-mode differentiation.
///
/// Nodes are appended in execution order, so the node vector is already a
/// topological order and backward is a single reverse sweep. Parameters are
/// external tensors bound by pointer; `backward` overwrites their gradients
/// (zero for every registered parameter the loss does not reach).
class Graph {
public:
    explicit Graph(bool check_finite = true) : check_finite_(check_finite) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var constant(Tensor value, std::string_view name = {});
    /// Binds `param` as a differentiable leaf. Registering the same tensor
    /// twice returns the same node.
    Var parameter(Tensor& param, std::string_view name = {});
    /// Appends an op node. `backward` may be empty for non-differentiable ops.
    Var record(std::string_view op, std::vector<Var> inputs, Tensor output, GradFn backward);

    /// Reverse sweep from a scalar loss; fills grad() of every parameter.
    void backward(Var loss);

    const Tensor& value(Var v) const;
    /// dL/dv after backward, or nullptr when v did not receive a gradient.
    const Tensor* adjoint(Var v) const;

    std::size_t node_count() const noexcept { return nodes_.size(); }
    std::string_view op(std::size_t id) const { return nodes_.at(id).op; }
    std::string_view name(std::size_t id) const { return nodes_.at(id).name; }
    std::span<const std::size_t> inputs(std::size_t id) const { return nodes_.at(id).inputs; }
    bool needs_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }
    std::vector<Tensor*> parameters() const;

    /// Named markers let callers find nodes of interest after construction.
    void mark(std::string name, Var v) { marks_[std::move(name)] = v.id(); }
    std::optional<std::size_t> find_mark(const std::string& name) const;

    /// Ancestors of `target` with id > `boundary`, including target itself.
    std::vector<std::size_t> ancestors(std::size_t target, std::size_t boundary) const;

private:
    struct Node {
        std::string op;
        std::string name;
        std::vector<std::size_t> inputs;
        Tensor value;
        GradFn backward;
        Tensor* param = nullptr;
        bool needs_grad = false;
    };

    Var push(Node node);

    std::vector<Node> nodes_;
    std::vector<Tensor> adjoints_;
    std::unordered_map<const Tensor*, std::size_t> param_ids_;
    std::unordered_map<std::string, std::size_t> marks_;
    bool check_finite_ = true;
};

/// Node whose forward value is `forward(inputs)` and whose backward uses
/// `backward` verbatim. This is how surrogate gradients (STE) enter the graph.
Var custom_grad_node(const ForwardFn& forward, GradFn backward, std::vector<Var> inputs,
                     std::string_view op = "custom");

// Differentiable ops. All operands must come from the same graph.
Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
/// x[N×D] + b[D] broadcast over rows.
Var add_rowvec(Var x, Var b);
Var sum(Var a);
Var mean(Var a);
Var softmax_lastdim(Var x);
Var layer_norm(Var x, Var gamma, Var beta, double eps);
/// tanh approximation of GELU.
Var gelu(Var x);
Var slice_rows(Var x, std::size_t begin, std::size_t count);
Var slice_cols(Var x, std::size_t begin, std::size_t count);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
/// Mean cross-entropy of logits[B×C] against integer labels.
Var cross_entropy(Var logits, std::span<const std::size_t> labels);

}  // namespace ofq
