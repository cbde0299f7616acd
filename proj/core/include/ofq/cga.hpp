#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ofq/qvit.hpp"

namespace ofq {

/// How the gradient mask evolves during annealing.
///  - Sticky:    a weight outside BR_x is frozen for good.
///  - Literal:   the mask is recomputed every step, so a weight that drifts
///               back into BR_x trains again.
///  - Iterative: comparison mode that freezes weights whose level keeps
///               changing (oscillation frequency above a threshold).
enum class FreezeSemantics { Sticky, Literal, Iterative };

std::string_view to_string(FreezeSemantics s);
FreezeSemantics parse_freeze_semantics(std::string_view text);

struct AnnealConfig {
    double x = 0.005;
    std::size_t steps = 2000;  // iteration budget
    double lr = 0.05;
    std::size_t window = 50;  // convergence window in steps
    FreezeSemantics semantics = FreezeSemantics::Sticky;
    /// Iterative mode: EMA momentum and frequency threshold.
    double iterative_momentum = 0.99;
    double iterative_threshold = 0.02;

    void validate() const;
};

/// Per-weight frozen flags of one tensor.
class FreezeMask {
public:
    FreezeMask() = default;
    FreezeMask(std::string name, std::size_t size, double x, std::uint64_t created);

    const std::string& name() const { return name_; }
    std::size_t size() const { return frozen_.size(); }
    bool frozen(std::size_t i) const { return frozen_[i] != 0; }
    std::size_t frozen_count() const { return count_; }
    double x() const { return x_; }
    std::uint64_t created() const { return created_; }
    const std::vector<std::uint8_t>& flags() const { return frozen_; }

    void freeze(std::size_t i);
    /// Only the literal per-step mask may clear a flag.
    void set(std::size_t i, bool value);

private:
    std::string name_;
    std::vector<std::uint8_t> frozen_;
    std::size_t count_ = 0;
    double x_ = 0;
    std::uint64_t created_ = 0;
};

struct ConvergenceProbe {
    bool all_frozen = false;
    /// Variance of each α_s group over the trailing window, one vector per tensor.
    std::vector<std::vector<double>> scale_variance;
    double max_variance() const;
};

/// Confidence-guided annealing over a fixed set of quantized weights.
class Annealer {
public:
    /// init_anneal: freezes every weight whose boundary distance exceeds x.
    Annealer(std::vector<QuantizedWeight> weights, AnnealConfig config, std::uint64_t step = 0);

    const AnnealConfig& config() const { return config_; }
    const std::vector<FreezeMask>& masks() const { return masks_; }
    const std::vector<QuantizedWeight>& weights() const { return weights_; }

    /// Zeroes the gradient of every frozen weight.
    void mask_gradients();
    /// After an optimizer update: refresh scales, freeze weights now outside BR_x
    /// and log the scale trajectory.
    void after_update(std::uint64_t step);
    /// Masked plain-SGD update of the tracked weights with config().lr,
    /// followed by after_update.
    void masked_step(std::uint64_t step);

    ConvergenceProbe convergence_probe(std::size_t window) const;
    ConvergenceProbe convergence_probe() const { return convergence_probe(config_.window); }

    bool all_frozen() const;
    double frozen_fraction() const;
    std::size_t frozen_count() const;
    std::size_t total() const;
    /// Current scale vector of tensor t (α_s recomputed from the weights).
    Tensor scale(std::size_t t) const;

private:
    void refresh_mask(std::size_t t);

    std::vector<QuantizedWeight> weights_;
    AnnealConfig config_;
    std::vector<FreezeMask> masks_;
    std::vector<std::vector<std::vector<double>>> scale_history_;  // [tensor][step][group]
    std::vector<std::vector<double>> osc_ema_;
    std::vector<std::vector<std::int32_t>> levels_;
};

}  // namespace ofq
