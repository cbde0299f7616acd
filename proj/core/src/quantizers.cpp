#include "ofq/quantizers.hpp"

#include <algorithm>
#include <cmath>

#include "ofq/errors.hpp"
#include "ofq/kernels.hpp"

namespace ofq {

std::string_view to_string(QuantKind kind) {
    switch (kind) {
        case QuantKind::Identity: return "identity";
        case QuantKind::Lsq: return "lsq";
        case QuantKind::StatsQ: return "statsq";
    }
    return "?";
}

std::string_view to_string(Granularity g) {
    switch (g) {
        case Granularity::PerTensor: return "per-tensor";
        case Granularity::LastDim: return "last-dim";
        case Granularity::SeqDim: return "seq-dim";
    }
    return "?";
}

QuantKind parse_quant_kind(std::string_view text) {
    if (text == "identity" || text == "fp" || text == "none") return QuantKind::Identity;
    if (text == "lsq") return QuantKind::Lsq;
    if (text == "statsq") return QuantKind::StatsQ;
    throw ConfigError("unknown quantizer kind '" + std::string(text) + "'");
}

QuantSpec QuantSpec::identity() { return QuantSpec{}; }

QuantSpec QuantSpec::lsq(int bits, Granularity g, bool is_signed) {
    QuantSpec s;
    s.bits = bits;
    s.kind = QuantKind::Lsq;
    s.granularity = g;
    if (bits < 2 || bits > 16) throw ConfigError("LSQ bit-width must be in [2, 16], got " + std::to_string(bits));
    if (is_signed) {
        s.qn = -(1 << (bits - 1));
        s.qp = (1 << (bits - 1)) - 1;
    } else {
        s.qn = 0;
        s.qp = (1 << bits) - 1;
    }
    return s;
}

QuantSpec QuantSpec::statsq(int bits, Granularity g) {
    if (bits < 2 || bits > 16) throw ConfigError("StatsQ bit-width must be in [2, 16], got " + std::to_string(bits));
    QuantSpec s;
    s.bits = bits;
    s.kind = QuantKind::StatsQ;
    s.granularity = g;
    s.qn = -(1 << (bits - 1));
    s.qp = (1 << (bits - 1)) - 1;
    return s;
}

void QuantSpec::validate() const {
    if (kind == QuantKind::Identity) return;
    if (bits < 2 || bits > 16) throw ConfigError("bit-width must be in [2, 16], got " + std::to_string(bits));
    if (kind == QuantKind::Lsq && !(qn < qp)) {
        throw ConfigError("LSQ clip range needs Q_n < Q_p, got [" + std::to_string(qn) + ", " + std::to_string(qp) + "]");
    }
}

namespace {

struct Layout {
    std::size_t rows;
    std::size_t cols;
};

Layout layout_of(const Shape& shape) {
    switch (shape.size()) {
        case 0: return {1, 1};
        case 1: return {1, shape[0]};
        case 2: return {shape[0], shape[1]};
        default: throw DimensionError("quantizers support rank <= 2, got " + shape_to_string(shape));
    }
}

inline std::size_t group_index(std::size_t flat, const Layout& l, Granularity g) {
    switch (g) {
        case Granularity::PerTensor: return 0;
        case Granularity::LastDim: return flat / l.cols;
        case Granularity::SeqDim: return flat % l.cols;
    }
    return 0;
}

// Group of each flat index in order, without a division per element.
class GroupCursor {
public:
    GroupCursor(const Layout& l, Granularity g) : cols_(l.cols), g_(g) {}
    std::size_t group() const {
        return g_ == Granularity::LastDim ? row_ : g_ == Granularity::SeqDim ? col_ : 0;
    }
    void next() {
        if (++col_ == cols_) {
            col_ = 0;
            ++row_;
        }
    }

private:
    std::size_t cols_;
    Granularity g_;
    std::size_t row_ = 0;
    std::size_t col_ = 0;
};

void check_scale(const Tensor& w, const Tensor& scale, Granularity g) {
    const auto groups = group_count(w.shape(), g);
    if (scale.size() != groups) {
        throw DimensionError("scale vector has " + std::to_string(scale.size()) + " entries but " +
                             shape_to_string(w.shape()) + " has " + std::to_string(groups) + " groups (" +
                             std::string(to_string(g)) + ")");
    }
    for (double s : scale.data()) {
        if (!(s > 0.0) || !std::isfinite(s)) throw StateError("quantizer scale must be positive, got " + std::to_string(s));
    }
}

void require_kind(const QuantSpec& spec, QuantKind kind, const char* op) {
    spec.validate();
    if (spec.kind != kind) {
        throw ContractError(std::string(op) + ": spec kind is " + std::string(to_string(spec.kind)));
    }
}

}  // namespace

std::size_t group_count(const Shape& shape, Granularity g) {
    const Layout l = layout_of(shape);
    switch (g) {
        case Granularity::PerTensor: return 1;
        case Granularity::LastDim: return l.rows;
        case Granularity::SeqDim: return l.cols;
    }
    return 1;
}

double round_half_away(double x) {
    // Inline replacement for std::round; same results, including signed zero.
    constexpr double kIntegral = 4503599627370496.0;  // 2^52: every larger double is an integer
    if (!(std::abs(x) < kIntegral)) return x;
    const double t = static_cast<double>(static_cast<std::int64_t>(x));
    const double r = std::abs(x - t) >= 0.5 ? std::abs(t) + 1.0 : std::abs(t);
    return std::copysign(r, x);
}

Tensor QuantizedTensor::dequantize() const {
    const Layout l = layout_of(codes.shape());
    Tensor out(codes.shape(), std::vector<double>(codes.size()));
    GroupCursor gc(l, granularity);
    for (std::size_t i = 0; i < codes.size(); ++i, gc.next()) out[i] = scale[gc.group()] * codes[i];
    return out;
}

std::size_t QuantizedTensor::group_of(std::size_t flat) const {
    return group_index(flat, layout_of(codes.shape()), granularity);
}

namespace {

// Level indices are optional (codes alone define the value) but must cover
// every code when present.
void check_index(const QuantizedTensor& q) {
    if (!q.index.empty() && q.index.size() != q.codes.size()) {
        throw DimensionError("quantized tensor has " + std::to_string(q.index.size()) + " level indices for " +
                             std::to_string(q.codes.size()) + " codes");
    }
}

}  // namespace

QuantizedTensor QuantizedTensor::transposed() const {
    if (codes.rank() != 2) throw DimensionError("transposed: codes must be a matrix");
    check_index(*this);
    QuantizedTensor t;
    t.codes = kernels::transpose(codes);
    const std::size_t r = codes.shape()[0], c = codes.shape()[1];
    t.index.resize(index.size());
    for (std::size_t i = 0; i < r && !index.empty(); ++i) {
        for (std::size_t j = 0; j < c; ++j) t.index[j * r + i] = index[i * c + j];
    }
    t.scale = scale;
    t.granularity = granularity == Granularity::LastDim  ? Granularity::SeqDim
                    : granularity == Granularity::SeqDim ? Granularity::LastDim
                                                         : Granularity::PerTensor;
    return t;
}

QuantizedTensor QuantizedTensor::slice_cols(std::size_t begin, std::size_t count) const {
    if (codes.rank() != 2) throw DimensionError("slice_cols: codes must be a matrix");
    const std::size_t r = codes.shape()[0], c = codes.shape()[1];
    if (count == 0 || begin + count > c) throw DimensionError("slice_cols: range out of bounds");
    check_index(*this);
    QuantizedTensor s;
    s.codes = Tensor(Shape{r, count});
    if (!index.empty()) s.index.resize(r * count);
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < count; ++j) {
            s.codes[i * count + j] = codes[i * c + begin + j];
            if (!index.empty()) s.index[i * count + j] = index[i * c + begin + j];
        }
    }
    s.granularity = granularity;
    if (granularity == Granularity::SeqDim) {
        s.scale = Tensor(Shape{count}, std::vector<double>(scale.data().begin() + begin,
                                                            scale.data().begin() + begin + count));
    } else {
        s.scale = scale;
    }
    return s;
}

// ---- LSQ -------------------------------------------------------------------

QuantizedTensor lsq_quantize(const Tensor& w, const Tensor& scale, const QuantSpec& spec) {
    require_kind(spec, QuantKind::Lsq, "lsq_quantize");
    check_scale(w, scale, spec.granularity);
    const Layout l = layout_of(w.shape());
    QuantizedTensor q;
    q.codes = Tensor(w.shape(), std::vector<double>(w.size()));
    q.index.resize(w.size());
    q.scale = scale;
    q.granularity = spec.granularity;
    const double lo = spec.qn, hi = spec.qp;
    GroupCursor gc(l, spec.granularity);
    for (std::size_t i = 0; i < w.size(); ++i, gc.next()) {
        const double a = scale[gc.group()];
        const double code = round_half_away(std::clamp(w[i] / a, lo, hi));
        q.codes[i] = code;
        q.index[i] = static_cast<std::int32_t>(code);
    }
    return q;
}

LsqGrads lsq_backward(const Tensor& upstream, const Tensor& w, const Tensor& scale, const QuantSpec& spec,
                      double grad_scale) {
    require_kind(spec, QuantKind::Lsq, "lsq_backward");
    check_scale(w, scale, spec.granularity);
    if (upstream.size() != w.size()) throw DimensionError("lsq_backward: upstream does not match weights");
    const Layout l = layout_of(w.shape());
    LsqGrads g{Tensor(w.shape()), Tensor(scale.shape())};
    const double lo = spec.qn, hi = spec.qp;
    GroupCursor gc(l, spec.granularity);
    for (std::size_t i = 0; i < w.size(); ++i, gc.next()) {
        const std::size_t grp = gc.group();
        const double r = w[i] / scale[grp];
        double dscale;
        if (r < lo) {
            dscale = lo;
        } else if (r > hi) {
            dscale = hi;
        } else {
            g.grad_w[i] = upstream[i];
            dscale = round_half_away(r) - r;
        }
        g.grad_scale[grp] += upstream[i] * dscale;
    }
    for (double& v : g.grad_scale.data()) v *= grad_scale;
    return g;
}

double lsq_grad_scale(std::size_t group_size, const QuantSpec& spec) {
    return 1.0 / std::sqrt(static_cast<double>(group_size) * static_cast<double>(spec.qp));
}

double lsq_scale_from_stats(double mean_abs, double max_abs, const QuantSpec& spec) {
    const double qp = static_cast<double>(spec.qp);
    return std::max(std::min(2.0 * mean_abs / std::sqrt(qp), max_abs / qp), kScaleFloor);
}

Tensor lsq_init_scale(const Tensor& w, const QuantSpec& spec) {
    const Layout l = layout_of(w.shape());
    const std::size_t groups = group_count(w.shape(), spec.granularity);
    std::vector<double> sum(groups, 0.0), count(groups, 0.0), peak(groups, 0.0);
    GroupCursor gc(l, spec.granularity);
    for (std::size_t i = 0; i < w.size(); ++i, gc.next()) {
        const auto grp = gc.group();
        sum[grp] += std::abs(w[i]);
        count[grp] += 1.0;
        peak[grp] = std::max(peak[grp], std::abs(w[i]));
    }
    Tensor s(Shape{groups});
    for (std::size_t k = 0; k < groups; ++k) s[k] = lsq_scale_from_stats(sum[k] / count[k], peak[k], spec);
    return s;
}

// ---- StatsQ ----------------------------------------------------------------

Tensor statsq_scale(const Tensor& w, Granularity g) {
    const Layout l = layout_of(w.shape());
    const std::size_t groups = group_count(w.shape(), g);
    std::vector<double> sum(groups, 0.0), count(groups, 0.0);
    GroupCursor gc(l, g);
    for (std::size_t i = 0; i < w.size(); ++i, gc.next()) {
        const auto grp = gc.group();
        sum[grp] += std::abs(w[i]);
        count[grp] += 1.0;
    }
    Tensor s(Shape{groups});
    for (std::size_t k = 0; k < groups; ++k) s[k] = std::max(2.0 * sum[k] / count[k], kScaleFloor);
    return s;
}

QuantizedTensor statsq_quantize(const Tensor& w, const QuantSpec& spec) {
    require_kind(spec, QuantKind::StatsQ, "statsq_quantize");
    return statsq_quantize(w, statsq_scale(w, spec.granularity), spec);
}

QuantizedTensor statsq_quantize(const Tensor& w, const Tensor& scale, const QuantSpec& spec) {
    require_kind(spec, QuantKind::StatsQ, "statsq_quantize");
    check_scale(w, scale, spec.granularity);
    const Layout l = layout_of(w.shape());
    const int n = spec.half_levels();
    const double inv_n = 1.0 / n;
    QuantizedTensor q;
    q.codes = Tensor(w.shape(), std::vector<double>(w.size()));
    q.index.resize(w.size());
    q.scale = scale;
    q.granularity = spec.granularity;
    GroupCursor gc(l, spec.granularity);
    for (std::size_t i = 0; i < w.size(); ++i, gc.next()) {
        const double a = scale[gc.group()];
        const double arg = std::clamp(w[i] / a, -1.0, 1.0) * n - 0.5;
        // round(n - 0.5) at the upper clip edge rounds away to n; clamp keeps 2^b levels.
        const double k = std::clamp(round_half_away(arg), static_cast<double>(-n), static_cast<double>(n - 1));
        q.codes[i] = (k + 0.5) * inv_n;
        q.index[i] = static_cast<std::int32_t>(k);
    }
    return q;
}

Tensor statsq_backward(const Tensor& upstream, const Tensor& w, const QuantSpec& spec) {
    return statsq_backward(upstream, w, statsq_scale(w, spec.granularity), spec);
}

Tensor statsq_backward(const Tensor& upstream, const Tensor& w, const Tensor& scale, const QuantSpec& spec) {
    require_kind(spec, QuantKind::StatsQ, "statsq_backward");
    check_scale(w, scale, spec.granularity);
    if (upstream.size() != w.size()) throw DimensionError("statsq_backward: upstream does not match weights");
    const Layout l = layout_of(w.shape());
    Tensor g(w.shape());
    GroupCursor gc(l, spec.granularity);
    for (std::size_t i = 0; i < w.size(); ++i, gc.next()) {
        const double r = w[i] / scale[gc.group()];
        if (r >= -1.0 && r <= 1.0) g[i] = upstream[i];
    }
    return g;
}

// ---- shared ----------------------------------------------------------------

Tensor quantized_matmul(const QuantizedTensor& x, const QuantizedTensor& y) {
    if (x.codes.rank() != 2 || y.codes.rank() != 2) throw DimensionError("quantized_matmul: operands must be matrices");
    for (const auto* t : {&x, &y}) {
        if (t->granularity == Granularity::SeqDim) {
            throw ContractError("quantized_matmul: operand scale of shape " + shape_to_string(t->scale.shape()) +
                                " lies along the contracted dimension; the scale factor must align with the "
                                "multiplication direction");
        }
    }
    Tensor out = kernels::matmul_nt(x.codes, y.codes);
    const std::size_t n = out.shape()[0], m = out.shape()[1];
    const bool xr = x.granularity == Granularity::LastDim;
    const bool yr = y.granularity == Granularity::LastDim;
    for (std::size_t i = 0; i < n; ++i) {
        const double sx = x.scale[xr ? i : 0];
        for (std::size_t j = 0; j < m; ++j) out[i * m + j] *= sx * y.scale[yr ? j : 0];
    }
    return out;
}

Tensor rounding_argument(const Tensor& w, const Tensor& scale, const QuantSpec& spec) {
    spec.validate();
    if (spec.is_identity()) throw ContractError("rounding_argument: identity quantizer has no rounding");
    check_scale(w, scale, spec.granularity);
    const Layout l = layout_of(w.shape());
    Tensor out(w.shape());
    const int n = spec.half_levels();
    GroupCursor gc(l, spec.granularity);
    for (std::size_t i = 0; i < w.size(); ++i, gc.next()) {
        const double r = w[i] / scale[gc.group()];
        if (spec.kind == QuantKind::Lsq) {
            out[i] = std::clamp(r, static_cast<double>(spec.qn), static_cast<double>(spec.qp));
        } else {
            out[i] = std::clamp(r, -1.0, 1.0) * n - 0.5;
        }
    }
    return out;
}

Tensor boundary_distance(const Tensor& w, const Tensor& scale, const QuantSpec& spec) {
    Tensor arg = rounding_argument(w, scale, spec);
    // Decision boundaries sit at half-integers k+0.5 that separate two codes
    // both inside the representable range.
    double lo, hi;
    if (spec.kind == QuantKind::Lsq) {
        lo = spec.qn + 0.5;
        hi = spec.qp - 0.5;
    } else {
        const int n = spec.half_levels();
        lo = -n + 0.5;
        hi = n - 1.5;
    }
    for (double& v : arg.data()) {
        const double nearest = std::clamp(std::floor(v) + 0.5, lo, hi);
        v = std::abs(v - nearest);
    }
    return arg;
}

// ---- graph integration -----------------------------------------------------

Quantizer::Quantizer(QuantSpec spec, std::size_t groups) : spec_(spec) {
    spec_.validate();
    if (spec_.kind == QuantKind::Lsq) {
        if (groups == 0) throw ConfigError("LSQ quantizer needs at least one scale group");
        state_.scale = Tensor(Shape{groups}, 1.0);
        state_.scale.set_requires_grad(true);
    }
}

void Quantizer::init_from(const Tensor& w) {
    if (spec_.kind == QuantKind::Lsq) {
        Tensor s = lsq_init_scale(w, spec_);
        if (s.size() != state_.scale.size()) throw DimensionError("init_from: group count mismatch");
        state_.scale.storage() = s.storage();
        state_.initialized = true;
    } else if (spec_.kind == QuantKind::StatsQ) {
        state_.scale = statsq_scale(w, spec_.granularity);
        state_.initialized = true;
    }
}

Tensor Quantizer::scale_for(const Tensor& x) const {
    switch (spec_.kind) {
        case QuantKind::Lsq: return state_.scale;
        case QuantKind::StatsQ: return statsq_scale(x, spec_.granularity);
        case QuantKind::Identity: break;
    }
    throw ContractError("identity quantizer has no scale");
}

QuantizedTensor Quantizer::quantize(const Tensor& x) const {
    switch (spec_.kind) {
        case QuantKind::Lsq: return lsq_quantize(x, state_.scale, spec_);
        case QuantKind::StatsQ: return statsq_quantize(x, spec_);
        case QuantKind::Identity: break;
    }
    throw ContractError("identity quantizer cannot produce codes");
}

Tensor Quantizer::distances(const Tensor& x) const { return boundary_distance(x, scale_for(x), spec_); }

void Quantizer::begin_calibration() {
    if (spec_.kind != QuantKind::Lsq) return;
    calibrating_ = true;
    calib_sum_.assign(state_.scale.size(), 0.0);
    calib_count_.assign(state_.scale.size(), 0.0);
    calib_max_.assign(state_.scale.size(), 0.0);
}

void Quantizer::end_calibration() {
    if (!calibrating_) return;
    calibrating_ = false;
    for (std::size_t k = 0; k < calib_sum_.size(); ++k) {
        const double m = calib_count_[k] > 0 ? calib_sum_[k] / calib_count_[k] : 0.0;
        state_.scale[k] = lsq_scale_from_stats(m, calib_max_[k], spec_);
    }
    state_.initialized = true;
}

QVar Quantizer::apply(Graph& g, Var x) {
    switch (spec_.kind) {
        case QuantKind::Identity: return {x, nullptr};

        case QuantKind::Lsq: {
            const Tensor& xv = x.value();
            const std::size_t groups = group_count(xv.shape(), spec_.granularity);
            if (groups != state_.scale.size()) {
                throw DimensionError("LSQ quantizer has " + std::to_string(state_.scale.size()) +
                                     " scales but input " + shape_to_string(xv.shape()) + " has " +
                                     std::to_string(groups) + " groups");
            }
            if (calibrating_) {
                const Layout l = layout_of(xv.shape());
                GroupCursor gc(l, spec_.granularity);
                for (std::size_t i = 0; i < xv.size(); ++i, gc.next()) {
                    const auto grp = gc.group();
                    calib_sum_[grp] += std::abs(xv[i]);
                    calib_count_[grp] += 1.0;
                    calib_max_[grp] = std::max(calib_max_[grp], std::abs(xv[i]));
                }
                return {x, nullptr};
            }
            state_.grad_scale = lsq_grad_scale(xv.size() / groups, spec_);
            // Registering the scale may grow the node list, so re-read x afterwards.
            Var s = g.parameter(state_.scale);
            auto q = std::make_shared<QuantizedTensor>(lsq_quantize(x.value(), s.value(), spec_));
            Tensor value = q->dequantize();
            const QuantSpec spec = spec_;
            const double gs = state_.grad_scale;
            Var out = g.record("quantize.lsq", {x, s}, std::move(value), [spec, gs](const GradContext& c) {
                LsqGrads lg = lsq_backward(c.upstream, *c.inputs[0], *c.inputs[1], spec, gs);
                return std::vector<Tensor>{c.needs[0] ? std::move(lg.grad_w) : Tensor(),
                                           c.needs[1] ? std::move(lg.grad_scale) : Tensor()};
            });
            return {out, std::move(q)};
        }

        case QuantKind::StatsQ: {
            const Tensor& xv = x.value();
            Tensor alpha = statsq_scale(xv, spec_.granularity);
            state_.scale = alpha;
            auto q = std::make_shared<QuantizedTensor>(statsq_quantize(xv, alpha, spec_));
            Tensor value = q->dequantize();
            const QuantSpec spec = spec_;
            Var out = g.record("quantize.statsq", {x}, std::move(value),
                               [spec, alpha = std::move(alpha)](const GradContext& c) {
                                   return std::vector<Tensor>{statsq_backward(c.upstream, *c.inputs[0], alpha, spec)};
                               });
            return {out, std::move(q)};
        }
    }
    throw ContractError("unknown quantizer kind");
}

Var qmatmul_nt(const QVar& x, const QVar& y) {
    Tensor out = (x.quantized && y.quantized) ? quantized_matmul(*x.quantized, *y.quantized)
                                              : kernels::matmul_nt(x.value.value(), y.value.value());
    return x.value.graph().record("qmatmul", {x.value, y.value}, std::move(out), [](const GradContext& c) {
        std::vector<Tensor> g(2);
        if (c.needs[0]) g[0] = kernels::matmul(c.upstream, *c.inputs[1]);
        if (c.needs[1]) g[1] = kernels::matmul_tn(c.upstream, *c.inputs[0]);
        return g;
    });
}

Var qmatmul_nn(const QVar& x, const QVar& y) {
    Tensor out = (x.quantized && y.quantized) ? quantized_matmul(*x.quantized, y.quantized->transposed())
                                              : kernels::matmul(x.value.value(), y.value.value());
    return x.value.graph().record("qmatmul", {x.value, y.value}, std::move(out), [](const GradContext& c) {
        std::vector<Tensor> g(2);
        if (c.needs[0]) g[0] = kernels::matmul_nt(c.upstream, *c.inputs[1]);
        if (c.needs[1]) g[1] = kernels::matmul_tn(*c.inputs[0], c.upstream);
        return g;
    });
}

QVar qslice_cols(const QVar& x, std::size_t begin, std::size_t count) {
    QVar out{slice_cols(x.value, begin, count), nullptr};
    if (x.quantized) out.quantized = std::make_shared<QuantizedTensor>(x.quantized->slice_cols(begin, count));
    return out;
}

}  // namespace ofq
