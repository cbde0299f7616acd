#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "ofq/autodiff.hpp"
#include "ofq/tensor.hpp"

namespace ofq {

/// Lower bound applied to every scale so all-zero groups never divide by zero.
inline constexpr double kScaleFloor = 1e-8;

enum class QuantKind { Identity, Lsq, StatsQ };

/// Which axis shares a scale.
///  - PerTensor: one scale for everything.
///  - LastDim:   scale shared along the last dimension, i.e. one scale per row.
///  - SeqDim:    scale shared along the first (sequence) dimension, i.e. one
///               scale per column. Used for the value matrix in Attn·V.
enum class Granularity { PerTensor, LastDim, SeqDim };

std::string_view to_string(QuantKind kind);
std::string_view to_string(Granularity g);
QuantKind parse_quant_kind(std::string_view text);

struct QuantSpec {
    int bits = 32;
    QuantKind kind = QuantKind::Identity;
    int qn = 0;  // LSQ clip range, inclusive
    int qp = 0;
    Granularity granularity = Granularity::PerTensor;

    static QuantSpec identity();
    /// Signed: [-2^(b-1), 2^(b-1)-1]; unsigned: [0, 2^b - 1].
    static QuantSpec lsq(int bits, Granularity g, bool is_signed = true);
    static QuantSpec statsq(int bits, Granularity g);

    /// StatsQ half-level count n = 2^(b-1).
    int half_levels() const { return 1 << (bits - 1); }
    bool is_identity() const { return kind == QuantKind::Identity; }
    void validate() const;
};

/// Number of scale groups a tensor of `shape` has under granularity `g`.
std::size_t group_count(const Shape& shape, Granularity g);

/// Per-group scale. For LSQ this is the learnable α (a trainable tensor);
/// for StatsQ it is a cache of the last derived α_s.
struct QuantizerState {
    Tensor scale;
    double grad_scale = 1.0;  // LSQ gradient scale g
    bool initialized = false;
};

/// Integer (LSQ) or half-integer/n (StatsQ) codes plus per-group scales.
/// Dequantized value = scale[group] * code.
struct QuantizedTensor {
    Tensor codes;
    std::vector<std::int32_t> index;  // level index: LSQ code, StatsQ k with code = (k+0.5)/n
    Tensor scale;
    Granularity granularity = Granularity::PerTensor;

    Tensor dequantize() const;
    std::size_t group_of(std::size_t flat) const;
    /// Transposes a matrix; LastDim and SeqDim swap.
    QuantizedTensor transposed() const;
    QuantizedTensor slice_cols(std::size_t begin, std::size_t count) const;
};

double round_half_away(double x);

// ---- LSQ -------------------------------------------------------------------

QuantizedTensor lsq_quantize(const Tensor& w, const Tensor& scale, const QuantSpec& spec);

struct LsqGrads {
    Tensor grad_w;
    Tensor grad_scale;
};

/// STE backward: grad_w masks out-of-range entries; grad_scale follows the LSQ
/// rule (round(w/α) - w/α inside, Q_n / Q_p outside) summed per group times g.
LsqGrads lsq_backward(const Tensor& upstream, const Tensor& w, const Tensor& scale, const QuantSpec& spec,
                      double grad_scale);

/// g = 1 / sqrt(group_size * Q_p).
double lsq_grad_scale(std::size_t group_size, const QuantSpec& spec);
/// LSQ initialisation per group: min(2·mean|w| / sqrt(Q_p), max|w| / Q_p).
/// The first term is the usual low-bit rule; the second keeps the step no
/// coarser than needed to cover the group's range at high bit widths.
Tensor lsq_init_scale(const Tensor& w, const QuantSpec& spec);
double lsq_scale_from_stats(double mean_abs, double max_abs, const QuantSpec& spec);

// ---- StatsQ ----------------------------------------------------------------

/// α_s = 2·mean(|w|) per group, floored at kScaleFloor.
Tensor statsq_scale(const Tensor& w, Granularity g);
QuantizedTensor statsq_quantize(const Tensor& w, const QuantSpec& spec);
/// Same as above with a caller-supplied scale.
QuantizedTensor statsq_quantize(const Tensor& w, const Tensor& scale, const QuantSpec& spec);
/// grad_w = upstream · 1[-1 ≤ w/α_s ≤ 1]; α_s is treated as a constant.
Tensor statsq_backward(const Tensor& upstream, const Tensor& w, const QuantSpec& spec);
Tensor statsq_backward(const Tensor& upstream, const Tensor& w, const Tensor& scale, const QuantSpec& spec);

// ---- shared ----------------------------------------------------------------

/// X·Yᵀ from codes: (α_X ⊗ α_Y) ⊙ (X̂ Ŷᵀ). Both operands must carry their
/// scales on the non-contracted (row) axis, i.e. LastDim or PerTensor.
Tensor quantized_matmul(const QuantizedTensor& x, const QuantizedTensor& y);

/// Distance of each weight's rounding argument to the nearest rounding
/// decision boundary that separates two representable levels.
/// LSQ uses clip(w/α); StatsQ uses clip(w/α_s, -1, 1)·n - 0.5.
Tensor boundary_distance(const Tensor& w, const Tensor& scale, const QuantSpec& spec);

/// Rounding argument (W̃_q) per weight, the quantity the distance is measured in.
Tensor rounding_argument(const Tensor& w, const Tensor& scale, const QuantSpec& spec);

// ---- graph integration -----------------------------------------------------

/// A graph value together with the quantized form it was produced from.
/// `quantized` is null when the quantizer is the identity.
struct QVar {
    Var value;
    std::shared_ptr<const QuantizedTensor> quantized;
};

/// Stateful quantizer bound to one operand: spec plus scale state.
///
/// LSQ scales are trainable; `apply` registers them with the graph so the
/// optimizer sees their gradient. StatsQ derives α_s from the input on every
/// call and caches the last value in `state().scale`.
class Quantizer {
public:
    Quantizer() = default;
    /// `groups` is the scale-vector length for LSQ (ignored otherwise).
    Quantizer(QuantSpec spec, std::size_t groups);

    const QuantSpec& spec() const noexcept { return spec_; }
    QuantizerState& state() noexcept { return state_; }
    const QuantizerState& state() const noexcept { return state_; }
    bool is_identity() const noexcept { return spec_.is_identity(); }
    bool learnable() const noexcept { return spec_.kind == QuantKind::Lsq; }

    /// LSQ: α from lsq_init_scale; StatsQ: caches α_s.
    void init_from(const Tensor& w);

    /// Quantize with STE backward. Records one node tagged "quantize".
    QVar apply(Graph& g, Var x);
    /// Pure forward quantization with the current state.
    QuantizedTensor quantize(const Tensor& x) const;
    /// LSQ: the learnable α; StatsQ: α_s derived from `x`.
    Tensor scale_for(const Tensor& x) const;
    Tensor distances(const Tensor& x) const;

    /// While calibrating, `apply` is a pass-through that accumulates per-group
    /// mean and max |x|; `end_calibration` turns the statistics into LSQ scales.
    void begin_calibration();
    void end_calibration();
    bool calibrating() const noexcept { return calibrating_; }

private:
    QuantSpec spec_;
    QuantizerState state_;
    bool calibrating_ = false;
    std::vector<double> calib_sum_;
    std::vector<double> calib_count_;
    std::vector<double> calib_max_;
};

/// X·Yᵀ for graph operands, computed from codes when both are quantized.
Var qmatmul_nt(const QVar& x, const QVar& y);
/// X·Y where Y is quantized along its sequence (row) axis, i.e. SeqDim.
Var qmatmul_nn(const QVar& x, const QVar& y);
QVar qslice_cols(const QVar& x, std::size_t begin, std::size_t count);

}  // namespace ofq
