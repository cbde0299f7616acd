#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ofq/cga.hpp"
#include "ofq/diagnostics.hpp"
#include "ofq/qvit.hpp"

namespace ofq {

enum class ExperimentKind { Toy, Train, Anneal, Diagnose };

std::string_view to_string(ExperimentKind k);
ExperimentKind parse_experiment_kind(std::string_view text);

struct DataConfig {
    std::string kind = "synthetic-shapes";  // or "external"
    std::size_t size = 1024;
    std::string path;  // external only
    double val_fraction = 0.2;
    double noise = 0.35;  // synthetic pixel noise stddev

    bool operator==(const DataConfig&) const = default;
};

struct OptimizerConfig {
    std::string kind = "sgd";
    double lr = 0.05;
    double momentum = 0.9;
    std::string schedule = "cosine";  // or "constant"
    double min_lr = 0.0;
    std::size_t epochs = 50;
    std::size_t batch_size = 32;
    /// Images used to calibrate activation scales before the first step.
    std::size_t calibration_images = 256;

    bool operator==(const OptimizerConfig&) const = default;
};

struct DiagnosticsConfig {
    double x = 0.005;
    /// Record flips/crossings during training for the last `record_steps`
    /// optimizer steps (0 disables recording during training).
    std::size_t record_steps = 0;
    std::size_t flip_window = 2000;
    /// Upper edges of the distance buckets in the flip report.
    std::vector<double> flip_edges = default_flip_edges();
    /// diagnose: extra steps of training at `probe_lr` while recording.
    std::size_t probe_steps = 500;
    double probe_lr = 0.01;
    /// Rescaled units; unset means twice the boundary half-width.
    std::optional<double> noise_amplitude;
    std::size_t noise_seeds = 10;
    /// Epochs of training at `probe_lr` after each injection before measuring.
    std::size_t noise_recovery_epochs = 1;
    std::size_t histogram_bins = 100;

    double amplitude() const { return noise_amplitude.value_or(2.0 * x); }
    bool operator==(const DiagnosticsConfig&) const = default;
};

struct AnnealSection {
    AnnealConfig cga;
    std::size_t log_every = 10;
    /// Extra steps after all weights are frozen, so the probe window only
    /// sees post-freeze scales.
    bool settle = true;
};

struct ToyConfig {
    QuantKind quantizer = QuantKind::Lsq;
    int bits = 2;
    std::vector<double> target{2.0, 0.5, 0.5};
    std::vector<double> init{0.1, 0.51, 0.49};
    double alpha0 = 0.5;
    double lr = 0.02;
    std::size_t steps = 2000;
    std::size_t batch = 8;

    void validate() const;
};

struct ExperimentConfig {
    static constexpr int kVersion = 1;

    ExperimentKind kind = ExperimentKind::Train;
    std::uint64_t seed = 0;
    std::string output_dir = "runs/default";
    /// Input checkpoint for anneal and diagnose.
    std::string checkpoint;
    ModelConfig model;
    DataConfig data;
    OptimizerConfig optimizer;
    DiagnosticsConfig diagnostics;
    AnnealSection anneal;
    ToyConfig toy;

    void validate() const;
};

/// Parses a versioned JSON config. Unknown keys and version mismatches are
/// ConfigErrors naming the offending key.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string config_to_json(const ExperimentConfig& cfg);

}  // namespace ofq
