#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ofq/quantizers.hpp"
#include "ofq/qvit.hpp"

namespace ofq {

/// Boundary-range membership and threshold crossings of one weight tensor.
///
/// A crossing is a change of quantized level between consecutive updates,
/// i.e. the rounding argument moved across a decision boundary.
class BoundaryTracker {
public:
    BoundaryTracker() = default;
    BoundaryTracker(std::string name, double x);

    /// Takes the initial membership snapshot and resets crossing counts.
    void start(const Tensor& w, const Tensor& scale, const QuantSpec& spec);
    void update(const Tensor& w, const Tensor& scale, const QuantSpec& spec);

    const std::string& name() const { return name_; }
    double x() const { return x_; }
    bool started() const { return !inside_.empty(); }
    const std::vector<std::uint8_t>& inside() const { return inside_; }
    const std::vector<std::uint8_t>& initially_inside() const { return initial_; }
    const std::vector<std::uint32_t>& crossings() const { return crossings_; }

    std::size_t inside_count() const;
    std::size_t initial_count() const;
    std::size_t still_inside_count() const;
    std::uint64_t total_crossings() const;

private:
    void measure(const Tensor& w, const Tensor& scale, const QuantSpec& spec, bool first);

    std::string name_;
    double x_ = 0.005;
    std::vector<std::uint8_t> inside_;
    std::vector<std::uint8_t> initial_;
    std::vector<std::int32_t> level_;
    std::vector<std::uint32_t> crossings_;
};

struct Composition {
    std::size_t still_inside = 0;
    std::size_t total_inside = 0;
};

Composition composition_report(const BoundaryTracker& tracker);

/// Gradient-direction flips per weight. A step whose gradient is exactly zero
/// keeps the previous sign. Flip steps are kept so any trailing window can be
/// reported.
class FlipCounter {
public:
    FlipCounter() = default;
    explicit FlipCounter(std::size_t size);

    void record(std::span<const double> grad, std::uint64_t step);

    std::size_t size() const { return sign_.size(); }
    std::size_t recorded_steps() const { return recorded_; }
    std::uint64_t last_step() const { return last_step_; }
    /// Flips of weight i among the last `window` recorded steps.
    std::size_t flips(std::size_t i, std::size_t window) const;

private:
    std::vector<std::int8_t> sign_;
    std::vector<std::vector<std::uint32_t>> flip_steps_;  // recorded-step ordinal of each flip
    std::size_t recorded_ = 0;
    std::uint64_t last_step_ = 0;
};

/// Per-group scale values over training.
class TrajectoryLog {
public:
    void record(const std::string& series, std::uint64_t step, std::span<const double> values);

    struct Point {
        std::uint64_t step;
        std::vector<double> values;
    };
    const std::map<std::string, std::vector<Point>>& series() const { return series_; }
    const std::vector<Point>& at(const std::string& series) const;

private:
    std::map<std::string, std::vector<Point>> series_;
};

struct FlipBucket {
    std::string label;  // "BR_0.001" … "BR_0.009", "beyond"
    double lo = 0;      // distance range (lo, hi]; the first bucket includes 0
    double hi = 0;
    std::size_t weights = 0;
    double mean_flips = 0;
};

/// Default bucket edges 0.001·k, k = 1..9.
std::vector<double> default_flip_edges();

/// Mean flips over the trailing `window` recorded steps, bucketed by each
/// weight's current boundary distance. Empty buckets are omitted.
std::vector<FlipBucket> flip_report(const FlipCounter& counter, const Tensor& distances, std::size_t window,
                                    const std::vector<double>& edges = default_flip_edges());

/// Pools several tensors into one report.
std::vector<FlipBucket> flip_report(const std::vector<const FlipCounter*>& counters,
                                    const std::vector<Tensor>& distances, std::size_t window,
                                    const std::vector<double>& edges = default_flip_edges());

struct Correlation {
    double rho = 0;
    double p_value = 1;
    std::size_t n = 0;
};

/// Spearman rank correlation (average ranks for ties) with a two-sided p-value
/// from the t approximation.
Correlation spearman(std::span<const double> x, std::span<const double> y);

/// Bucket position vs. mean flips over a flip report (beyond = last).
Correlation flip_distance_correlation(const std::vector<FlipBucket>& buckets);

/// Records boundary membership, flips, crossings and scale trajectories for
/// every registered weight tensor.
class Recorder {
public:
    Recorder() = default;
    explicit Recorder(double x) : x_(x) {}

    void add(const std::string& name, const QuantSpec& spec, std::size_t size);
    bool has(const std::string& name) const { return entries_.contains(name); }

    /// One training step for one tensor. `grad` may be empty to skip flips.
    void record(const std::string& name, const Tensor& w, std::span<const double> grad, const Tensor& scale,
                std::uint64_t step);

    /// Records all weights of a model (gradients read from each tensor) and
    /// appends one composition row.
    void record_model(const std::vector<QuantizedWeight>& weights, std::uint64_t step, bool flips = true);
    void register_model(const std::vector<QuantizedWeight>& weights);

    const BoundaryTracker& tracker(const std::string& name) const;
    const FlipCounter& flips(const std::string& name) const;
    const TrajectoryLog& trajectories() const { return trajectories_; }
    std::vector<std::string> names() const;

    /// Composition summed over all tensors.
    Composition composition() const;
    const std::vector<std::pair<std::uint64_t, Composition>>& composition_history() const { return history_; }
    std::uint64_t total_crossings() const;
    double x() const { return x_; }

private:
    struct Entry {
        QuantSpec spec;
        BoundaryTracker tracker;
        FlipCounter flips;
    };
    Entry& entry(const std::string& name);
    const Entry& entry(const std::string& name) const;

    double x_ = 0.005;
    std::map<std::string, Entry> entries_;
    TrajectoryLog trajectories_;
    std::vector<std::pair<std::uint64_t, Composition>> history_;
};

// ---- boundary-range population and noise injection ----------------------------

struct Population {
    std::size_t inside = 0;
    std::size_t total = 0;
    double fraction() const { return total ? static_cast<double>(inside) / static_cast<double>(total) : 0.0; }
};

/// Weights with boundary distance ≤ x across all tensors.
Population br_population(const std::vector<QuantizedWeight>& weights, double x);

enum class NoiseMode { WithinBR, RandomPositions };

struct NoiseResult {
    std::size_t perturbed = 0;
    std::size_t total = 0;
};

/// WithinBR: `param` is the half-width x, every weight with distance ≤ x gets
/// noise. RandomPositions: `param` is the fraction of all weights, picked
/// uniformly at random model-wide. Noise is uniform on [-amplitude, amplitude]
/// in rescaled units and mapped back through the current scale.
NoiseResult inject_noise(const std::vector<QuantizedWeight>& weights, NoiseMode mode, double param, double amplitude,
                         std::uint64_t seed);

/// Per element, the weight-space size of one rescaled unit (α for LSQ,
/// α_s/n for StatsQ).
Tensor rescaled_unit(const Tensor& w, const Quantizer& q);

// ---- CSV ---------------------------------------------------------------------

/// Rows of the diagnostics schema step,tensor,bucket,value.
struct ReportRow {
    std::uint64_t step;
    std::string tensor;
    std::string bucket;
    double value;
};

void write_report_csv(const std::filesystem::path& path, const std::vector<ReportRow>& rows);

/// Histogram of rounding arguments of `w` over [lo, hi) with `bins` bins.
std::vector<ReportRow> weight_histogram(const std::string& name, const Tensor& w, const Quantizer& q,
                                        std::size_t bins, double lo, double hi);

}  // namespace ofq
