#include "ofq/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "ofq/errors.hpp"
#include "ofq/kernels.hpp"

namespace ofq {

const Tensor& Var::value() const {
    if (!graph_) throw ContractError("use of an unbound Var");
    return graph_->value(*this);
}

Var Graph::push(Node node) {
    if (check_finite_ && !node.value.all_finite()) {
        throw NumericError("non-finite value produced by op '" + node.op + "'" +
                           (node.name.empty() ? std::string() : " (" + node.name + ")"));
    }
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

Var Graph::constant(Tensor value, std::string_view name) {
    Node n;
    n.op = "constant";
    n.name = name;
    n.value = std::move(value);
    return push(std::move(n));
}

Var Graph::parameter(Tensor& param, std::string_view name) {
    if (auto it = param_ids_.find(&param); it != param_ids_.end()) return Var(this, it->second);
    Node n;
    n.op = "parameter";
    n.name = name;
    n.value = Tensor(param.shape(), param.storage());
    n.param = &param;
    n.needs_grad = true;
    Var v = push(std::move(n));
    param_ids_.emplace(&param, v.id());
    return v;
}

Var Graph::record(std::string_view op, std::vector<Var> inputs, Tensor output, GradFn backward) {
    Node n;
    n.op = op;
    n.value = std::move(output);
    n.inputs.reserve(inputs.size());
    for (const Var& in : inputs) {
        if (&in.graph() != this) throw ContractError(std::string(op) + ": operand belongs to another graph");
        n.inputs.push_back(in.id());
        n.needs_grad = n.needs_grad || nodes_[in.id()].needs_grad;
    }
    if (n.needs_grad) n.backward = std::move(backward);
    return push(std::move(n));
}

const Tensor& Graph::value(Var v) const { return nodes_.at(v.id()).value; }

const Tensor* Graph::adjoint(Var v) const {
    if (v.id() >= adjoints_.size() || adjoints_[v.id()].empty()) return nullptr;
    return &adjoints_[v.id()];
}

std::vector<Tensor*> Graph::parameters() const {
    std::vector<Tensor*> out;
    for (const auto& n : nodes_) {
        if (n.param) out.push_back(n.param);
    }
    return out;
}

std::optional<std::size_t> Graph::find_mark(const std::string& name) const {
    if (auto it = marks_.find(name); it != marks_.end()) return it->second;
    return std::nullopt;
}

std::vector<std::size_t> Graph::ancestors(std::size_t target, std::size_t boundary) const {
    std::vector<bool> seen(nodes_.size(), false);
    std::vector<std::size_t> stack{target};
    std::vector<std::size_t> out;
    while (!stack.empty()) {
        const auto id = stack.back();
        stack.pop_back();
        if (id <= boundary || seen[id]) continue;
        seen[id] = true;
        out.push_back(id);
        for (auto in : nodes_[id].inputs) stack.push_back(in);
    }
    std::sort(out.begin(), out.end());
    return out;
}

void Graph::backward(Var loss) {
    if (&loss.graph() != this) throw ContractError("backward: loss belongs to another graph");
    const Tensor& lv = value(loss);
    if (lv.size() != 1) {
        throw ContractError("backward: loss must be scalar, got shape " + shape_to_string(lv.shape()));
    }
    adjoints_.assign(nodes_.size(), Tensor());
    adjoints_[loss.id()] = Tensor(lv.shape(), 1.0);

    std::size_t max_inputs = 1;
    for (const auto& n : nodes_) max_inputs = std::max(max_inputs, n.inputs.size());
    std::vector<const Tensor*> in_values;
    std::unique_ptr<bool[]> needs(new bool[max_inputs]);
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
        Node& node = nodes_[id];
        if (adjoints_[id].empty() || !node.backward) continue;
        in_values.clear();
        for (std::size_t i = 0; i < node.inputs.size(); ++i) {
            in_values.push_back(&nodes_[node.inputs[i]].value);
            needs[i] = nodes_[node.inputs[i]].needs_grad;
        }
        GradContext ctx{in_values, node.value, adjoints_[id], std::span<const bool>(needs.get(), node.inputs.size())};
        std::vector<Tensor> grads = node.backward(ctx);
        if (grads.size() != node.inputs.size()) {
            throw ContractError("op '" + node.op + "' returned " + std::to_string(grads.size()) +
                                " gradients for " + std::to_string(node.inputs.size()) + " inputs");
        }
        for (std::size_t i = 0; i < grads.size(); ++i) {
            const auto in = node.inputs[i];
            if (grads[i].empty() || !nodes_[in].needs_grad) continue;
            if (grads[i].size() != nodes_[in].value.size()) {
                throw ContractError("op '" + node.op + "' returned gradient of shape " +
                                    shape_to_string(grads[i].shape()) + " for input of shape " +
                                    shape_to_string(nodes_[in].value.shape()));
            }
            if (adjoints_[in].empty()) {
                adjoints_[in] = std::move(grads[i]);
            } else {
                kernels::add_into(adjoints_[in], grads[i]);
            }
        }
        // Intermediate adjoints are no longer needed once propagated.
        if (!node.param) adjoints_[id] = Tensor();
    }

    for (auto& node : nodes_) {
        if (!node.param) continue;
        node.param->zero_grad();
    }
    for (std::size_t id = 0; id < nodes_.size(); ++id) {
        Node& node = nodes_[id];
        if (!node.param || adjoints_[id].empty()) continue;
        auto g = node.param->grad();
        auto a = adjoints_[id].data();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += a[i];
    }
}

Var custom_grad_node(const ForwardFn& forward, GradFn backward, std::vector<Var> inputs, std::string_view op) {
    if (inputs.empty()) throw ContractError("custom_grad_node needs at least one input");
    Graph& g = inputs.front().graph();
    std::vector<const Tensor*> values;
    values.reserve(inputs.size());
    for (const Var& v : inputs) values.push_back(&v.value());
    Tensor out = forward(values);
    return g.record(op, std::move(inputs), std::move(out), std::move(backward));
}

namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shapes " + shape_to_string(a.shape()) + " and " +
                             shape_to_string(b.shape()) + " differ");
    }
}

void require_matrix(const char* op, const Tensor& a) {
    if (a.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_to_string(a.shape()));
}

Tensor map(const Tensor& a, auto&& f) {
    Tensor out(a.shape(), std::vector<double>(a.size()));
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
    return out;
}

}  // namespace

Var matmul(Var a, Var b) {
    Tensor out = kernels::matmul(a.value(), b.value());
    return a.graph().record("matmul", {a, b}, std::move(out), [](const GradContext& c) {
        std::vector<Tensor> g(2);
        if (c.needs[0]) g[0] = kernels::matmul_nt(c.upstream, *c.inputs[1]);
        if (c.needs[1]) g[1] = kernels::matmul_tn(*c.inputs[0], c.upstream);
        return g;
    });
}

Var transpose(Var a) {
    Tensor out = kernels::transpose(a.value());
    return a.graph().record("transpose", {a}, std::move(out), [](const GradContext& c) {
        return std::vector<Tensor>{kernels::transpose(c.upstream)};
    });
}

Var add(Var a, Var b) {
    require_same_shape("add", a.value(), b.value());
    Tensor out = a.value();
    kernels::add_into(out, b.value());
    return a.graph().record("add", {a, b}, std::move(out), [](const GradContext& c) {
        return std::vector<Tensor>{c.needs[0] ? c.upstream : Tensor(), c.needs[1] ? c.upstream : Tensor()};
    });
}

Var sub(Var a, Var b) {
    require_same_shape("sub", a.value(), b.value());
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
    return a.graph().record("sub", {a, b}, std::move(out), [](const GradContext& c) {
        std::vector<Tensor> g(2);
        if (c.needs[0]) g[0] = c.upstream;
        if (c.needs[1]) g[1] = map(c.upstream, [](double v) { return -v; });
        return g;
    });
}

Var mul(Var a, Var b) {
    require_same_shape("mul", a.value(), b.value());
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    return a.graph().record("mul", {a, b}, std::move(out), [](const GradContext& c) {
        std::vector<Tensor> g(2);
        for (int k = 0; k < 2; ++k) {
            if (!c.needs[k]) continue;
            g[k] = c.upstream;
            const Tensor& other = *c.inputs[1 - k];
            for (std::size_t i = 0; i < g[k].size(); ++i) g[k][i] *= other[i];
        }
        return g;
    });
}

Var scale(Var a, double factor) {
    Tensor out = map(a.value(), [factor](double v) { return v * factor; });
    return a.graph().record("scale", {a}, std::move(out), [factor](const GradContext& c) {
        return std::vector<Tensor>{map(c.upstream, [factor](double v) { return v * factor; })};
    });
}

Var add_rowvec(Var x, Var b) {
    const Tensor& xv = x.value();
    const Tensor& bv = b.value();
    require_matrix("add_rowvec", xv);
    const std::size_t rows = xv.shape()[0], cols = xv.shape()[1];
    if (bv.size() != cols) {
        throw DimensionError("add_rowvec: bias " + shape_to_string(bv.shape()) + " does not match " +
                             shape_to_string(xv.shape()));
    }
    Tensor out = xv;
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] += bv[j];
    }
    return x.graph().record("add_rowvec", {x, b}, std::move(out), [rows, cols](const GradContext& c) {
        std::vector<Tensor> g(2);
        if (c.needs[0]) g[0] = c.upstream;
        if (c.needs[1]) {
            g[1] = Tensor(c.inputs[1]->shape());
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < cols; ++j) g[1][j] += c.upstream[r * cols + j];
            }
        }
        return g;
    });
}

Var sum(Var a) {
    double s = 0.0;
    for (double v : a.value().data()) s += v;
    return a.graph().record("sum", {a}, Tensor::scalar(s), [](const GradContext& c) {
        return std::vector<Tensor>{Tensor(c.inputs[0]->shape(), c.upstream.item())};
    });
}

Var mean(Var a) {
    const double n = static_cast<double>(a.value().size());
    double s = 0.0;
    for (double v : a.value().data()) s += v;
    return a.graph().record("mean", {a}, Tensor::scalar(s / n), [n](const GradContext& c) {
        return std::vector<Tensor>{Tensor(c.inputs[0]->shape(), c.upstream.item() / n)};
    });
}

Var softmax_lastdim(Var x) {
    const Tensor& xv = x.value();
    if (xv.empty()) throw DimensionError("softmax_lastdim: empty tensor");
    const std::size_t cols = xv.shape().empty() ? 1 : xv.shape().back();
    const std::size_t rows = xv.size() / cols;
    Tensor out(xv.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = xv.data().data() + r * cols;
        double* o = out.data().data() + r * cols;
        const double mx = *std::max_element(in, in + cols);
        double z = 0.0;
        for (std::size_t j = 0; j < cols; ++j) z += (o[j] = std::exp(in[j] - mx));
        for (std::size_t j = 0; j < cols; ++j) o[j] /= z;
    }
    return x.graph().record("softmax", {x}, std::move(out), [rows, cols](const GradContext& c) {
        Tensor g(c.output.shape());
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = c.output.data().data() + r * cols;
            const double* dy = c.upstream.data().data() + r * cols;
            double dot = 0.0;
            for (std::size_t j = 0; j < cols; ++j) dot += dy[j] * y[j];
            for (std::size_t j = 0; j < cols; ++j) g[r * cols + j] = y[j] * (dy[j] - dot);
        }
        return std::vector<Tensor>{std::move(g)};
    });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
    if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");
    const Tensor& xv = x.value();
    require_matrix("layer_norm", xv);
    const std::size_t rows = xv.shape()[0], cols = xv.shape()[1];
    if (gamma.value().size() != cols || beta.value().size() != cols) {
        throw DimensionError("layer_norm: gamma/beta must have " + std::to_string(cols) + " entries");
    }
    Tensor xhat(xv.shape());
    std::vector<double> inv_std(rows);
    Tensor out(xv.shape());
    const Tensor& gv = gamma.value();
    const Tensor& bv = beta.value();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = xv.data().data() + r * cols;
        double mu = 0.0;
        for (std::size_t j = 0; j < cols; ++j) mu += in[j];
        mu /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t j = 0; j < cols; ++j) var += (in[j] - mu) * (in[j] - mu);
        var /= static_cast<double>(cols);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < cols; ++j) {
            const double h = (in[j] - mu) * inv_std[r];
            xhat[r * cols + j] = h;
            out[r * cols + j] = gv[j] * h + bv[j];
        }
    }
    return x.graph().record(
        "layer_norm", {x, gamma, beta}, std::move(out),
        [rows, cols, xhat = std::move(xhat), inv_std = std::move(inv_std)](const GradContext& c) {
            const Tensor& gv = *c.inputs[1];
            std::vector<Tensor> g(3);
            if (c.needs[0]) {
                g[0] = Tensor(c.inputs[0]->shape());
                std::vector<double> dh(cols);
                for (std::size_t r = 0; r < rows; ++r) {
                    double mean_dh = 0.0, mean_dh_h = 0.0;
                    for (std::size_t j = 0; j < cols; ++j) {
                        dh[j] = c.upstream[r * cols + j] * gv[j];
                        mean_dh += dh[j];
                        mean_dh_h += dh[j] * xhat[r * cols + j];
                    }
                    mean_dh /= static_cast<double>(cols);
                    mean_dh_h /= static_cast<double>(cols);
                    for (std::size_t j = 0; j < cols; ++j) {
                        g[0][r * cols + j] = inv_std[r] * (dh[j] - mean_dh - xhat[r * cols + j] * mean_dh_h);
                    }
                }
            }
            if (c.needs[1] || c.needs[2]) {
                Tensor dg(c.inputs[1]->shape()), db(c.inputs[2]->shape());
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t j = 0; j < cols; ++j) {
                        dg[j] += c.upstream[r * cols + j] * xhat[r * cols + j];
                        db[j] += c.upstream[r * cols + j];
                    }
                }
                if (c.needs[1]) g[1] = std::move(dg);
                if (c.needs[2]) g[2] = std::move(db);
            }
            return g;
        });
}

Var gelu(Var x) {
    constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double a = 0.044715;
    Tensor out = map(x.value(), [](double v) { return 0.5 * v * (1.0 + std::tanh(k * (v + a * v * v * v))); });
    return x.graph().record("gelu", {x}, std::move(out), [](const GradContext& c) {
        const Tensor& xv = *c.inputs[0];
        Tensor g(xv.shape());
        for (std::size_t i = 0; i < xv.size(); ++i) {
            const double v = xv[i];
            const double t = std::tanh(k * (v + a * v * v * v));
            const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * k * (1.0 + 3.0 * a * v * v);
            g[i] = c.upstream[i] * d;
        }
        return std::vector<Tensor>{std::move(g)};
    });
}

Var slice_rows(Var x, std::size_t begin, std::size_t count) {
    const Tensor& xv = x.value();
    require_matrix("slice_rows", xv);
    const std::size_t rows = xv.shape()[0], cols = xv.shape()[1];
    if (count == 0 || begin + count > rows) throw DimensionError("slice_rows: range out of bounds");
    Tensor out(Shape{count, cols},
               std::vector<double>(xv.data().begin() + begin * cols, xv.data().begin() + (begin + count) * cols));
    return x.graph().record("slice_rows", {x}, std::move(out), [begin, cols](const GradContext& c) {
        Tensor g(c.inputs[0]->shape());
        std::copy(c.upstream.data().begin(), c.upstream.data().end(), g.data().begin() + begin * cols);
        return std::vector<Tensor>{std::move(g)};
    });
}

Var slice_cols(Var x, std::size_t begin, std::size_t count) {
    const Tensor& xv = x.value();
    require_matrix("slice_cols", xv);
    const std::size_t rows = xv.shape()[0], cols = xv.shape()[1];
    if (count == 0 || begin + count > cols) throw DimensionError("slice_cols: range out of bounds");
    Tensor out(Shape{rows, count});
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < count; ++j) out[r * count + j] = xv[r * cols + begin + j];
    }
    return x.graph().record("slice_cols", {x}, std::move(out), [begin, rows, cols, count](const GradContext& c) {
        Tensor g(c.inputs[0]->shape());
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < count; ++j) g[r * cols + begin + j] = c.upstream[r * count + j];
        }
        return std::vector<Tensor>{std::move(g)};
    });
}

Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows: no operands");
    const std::size_t cols = parts.front().value().cols();
    std::size_t rows = 0;
    std::vector<double> data;
    std::vector<std::size_t> counts;
    for (const Var& p : parts) {
        const Tensor& v = p.value();
        require_matrix("concat_rows", v);
        if (v.cols() != cols) throw DimensionError("concat_rows: column count mismatch");
        rows += v.rows();
        counts.push_back(v.rows());
        data.insert(data.end(), v.data().begin(), v.data().end());
    }
    return parts.front().graph().record(
        "concat_rows", parts, Tensor(Shape{rows, cols}, std::move(data)), [counts, cols](const GradContext& c) {
            std::vector<Tensor> g(counts.size());
            std::size_t offset = 0;
            for (std::size_t i = 0; i < counts.size(); ++i) {
                const std::size_t n = counts[i] * cols;
                if (c.needs[i]) {
                    g[i] = Tensor(Shape{counts[i], cols},
                                  std::vector<double>(c.upstream.data().begin() + offset,
                                                      c.upstream.data().begin() + offset + n));
                }
                offset += n;
            }
            return g;
        });
}

Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no operands");
    const std::size_t rows = parts.front().value().rows();
    std::vector<std::size_t> widths;
    std::size_t cols = 0;
    for (const Var& p : parts) {
        require_matrix("concat_cols", p.value());
        if (p.value().rows() != rows) throw DimensionError("concat_cols: row count mismatch");
        widths.push_back(p.value().cols());
        cols += widths.back();
    }
    Tensor out(Shape{rows, cols});
    std::size_t offset = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        const Tensor& v = parts[i].value();
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < widths[i]; ++j) out[r * cols + offset + j] = v[r * widths[i] + j];
        }
        offset += widths[i];
    }
    return parts.front().graph().record("concat_cols", parts, std::move(out), [widths, rows, cols](const GradContext& c) {
        std::vector<Tensor> g(widths.size());
        std::size_t offset = 0;
        for (std::size_t i = 0; i < widths.size(); ++i) {
            if (c.needs[i]) {
                g[i] = Tensor(Shape{rows, widths[i]});
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t j = 0; j < widths[i]; ++j) g[i][r * widths[i] + j] = c.upstream[r * cols + offset + j];
                }
            }
            offset += widths[i];
        }
        return g;
    });
}

Var cross_entropy(Var logits, std::span<const std::size_t> labels) {
    const Tensor& lv = logits.value();
    require_matrix("cross_entropy", lv);
    const std::size_t batch = lv.shape()[0], classes = lv.shape()[1];
    if (labels.size() != batch) throw DimensionError("cross_entropy: label count does not match batch");
    Tensor probs(lv.shape());
    double loss = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
        if (labels[b] >= classes) throw DimensionError("cross_entropy: label out of range");
        const double* row = lv.data().data() + b * classes;
        const double mx = *std::max_element(row, row + classes);
        double z = 0.0;
        for (std::size_t j = 0; j < classes; ++j) z += std::exp(row[j] - mx);
        const double lse = mx + std::log(z);
        loss += lse - row[labels[b]];
        for (std::size_t j = 0; j < classes; ++j) probs[b * classes + j] = std::exp(row[j] - lse);
    }
    loss /= static_cast<double>(batch);
    std::vector<std::size_t> lab(labels.begin(), labels.end());
    return logits.graph().record(
        "cross_entropy", {logits}, Tensor::scalar(loss),
        [probs = std::move(probs), lab = std::move(lab), batch, classes](const GradContext& c) {
            Tensor g = probs;
            const double s = c.upstream.item() / static_cast<double>(batch);
            for (std::size_t b = 0; b < batch; ++b) g[b * classes + lab[b]] -= 1.0;
            for (std::size_t i = 0; i < g.size(); ++i) g[i] *= s;
            return std::vector<Tensor>{std::move(g)};
        });
}

}  // namespace ofq
