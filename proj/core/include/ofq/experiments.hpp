#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "ofq/cga.hpp"
#include "ofq/config.hpp"
#include "ofq/csv.hpp"
#include "ofq/data.hpp"
#include "ofq/diagnostics.hpp"
#include "ofq/qvit.hpp"

namespace ofq {

// ---- optimizer -----------------------------------------------------------------

/// SGD with heavy-ball momentum over named tensors. Tensors can be excluded
/// entirely or masked per element; masked elements neither move nor keep
/// velocity. LSQ scales are kept above the scale floor.
class Sgd {
public:
    Sgd(std::vector<NamedTensor> params, double momentum);

    void step(double lr);
    void zero_grad();
    void set_trainable(const Tensor* t, bool trainable);
    void set_mask(const Tensor* t, const std::vector<std::uint8_t>* frozen);
    const std::vector<NamedTensor>& params() const { return params_; }

    /// Throws NumericError naming the first tensor with a non-finite gradient.
    void check_gradients(std::uint64_t step) const;

private:
    struct Slot {
        bool trainable = true;
        bool is_scale = false;
        const std::vector<std::uint8_t>* mask = nullptr;
        std::vector<double> velocity;
    };
    std::vector<NamedTensor> params_;
    std::vector<Slot> slots_;
    double momentum_;
};

/// Cosine decay from `base` to `min` over `total` steps.
double cosine_lr(double base, double min, std::uint64_t step, std::uint64_t total);

// ---- toy regression ------------------------------------------------------------

struct ToyResult {
    std::array<std::uint64_t, 3> crossings{};
    std::uint64_t total_crossings = 0;
    double final_loss = 0;
    std::array<double, 3> weights{};
    double scale = 0;
};

/// Three weights, one shared scale, loss E_X[½(X·W* − X·W_q)²] with
/// X ~ U[0,1)³ drawn per step. Logs one CSV row per step when `log` is set.
ToyResult run_toy_regression(const ToyConfig& cfg, std::uint64_t seed, CsvWriter* log = nullptr);

// ---- training ------------------------------------------------------------------

struct Evaluation {
    double loss = 0;
    double accuracy = 0;
};

Evaluation evaluate(QViT& model, const Dataset& data, std::size_t batch = 64);

struct EpochRow {
    std::uint64_t step = 0;
    std::size_t epoch = 0;
    double lr = 0;
    double train_loss = 0;
    double train_accuracy = 0;
    Evaluation val;
    double br_fraction = 0;
};

struct TrainOptions {
    /// Records body weights during the last `record_steps` steps.
    Recorder* recorder = nullptr;
    std::size_t record_steps = 0;
    CsvWriter* metrics = nullptr;
    bool verbose = false;
};

struct TrainResult {
    std::vector<EpochRow> history;
    Evaluation final_val;
    std::uint64_t steps = 0;
};

/// Stable metrics schema shared by train and anneal.
std::vector<std::string> metrics_header();

/// QAT loop: calibrate activations, then SGD over epochs with the configured
/// schedule. Aborts with NumericError naming the step and tensor on NaN.
TrainResult train_model(QViT& model, const DataSplit& data, const OptimizerConfig& opt, double br_x,
                        std::uint64_t seed, const TrainOptions& options = {});

// ---- annealing -----------------------------------------------------------------

struct AnnealRow {
    std::uint64_t step = 0;
    double frozen_fraction = 0;
    std::vector<double> block_scale;  // mean α_s per block
    double loss = 0;
};

struct AnnealResult {
    bool converged = false;
    std::uint64_t steps_to_frozen = 0;  // valid when converged
    std::uint64_t steps = 0;
    Evaluation before;
    Evaluation after;
    std::vector<AnnealRow> rows;
    ConvergenceProbe probe;
    bool monotone = true;  // frozen fraction never decreased
};

/// Weights CGA acts on: all quantized weights of the model.
std::vector<QuantizedWeight> anneal_targets(QViT& model);

/// CGA phase on a trained model. Non-weight parameters keep training with
/// the annealing learning rate; in QKR mode the query/key weights are held.
AnnealResult anneal_model(QViT& model, const DataSplit& data, const AnnealSection& cfg, std::size_t batch_size,
                          double momentum, std::uint64_t seed, CsvWriter* log = nullptr);

// ---- diagnosis -----------------------------------------------------------------

struct NoiseComparison {
    std::size_t population = 0;
    std::size_t total = 0;
    double base_loss = 0;
    /// Val loss after the recovery training alone, without noise.
    double control_loss = 0;
    std::vector<double> within_loss;  // per seed
    std::vector<double> random_loss;
    double mean_within() const;
    double mean_random() const;
};

/// Per seed: injects noise, trains with `recovery` on data.train (skipped
/// when recovery.epochs is 0), then measures val loss. The model is restored
/// after every run.
NoiseComparison noise_comparison(QViT& model, const DataSplit& data, double x, double amplitude, std::size_t seeds,
                                 std::uint64_t seed0, const OptimizerConfig& recovery);

/// The recovery setting used by `diagnose`: constant `probe_lr` for
/// `noise_recovery_epochs`, other optimizer fields from the config.
OptimizerConfig noise_recovery(const ExperimentConfig& cfg);

/// Weight snapshot for restore.
std::vector<Tensor> snapshot(QViT& model);
void restore(QViT& model, const std::vector<Tensor>& snap);

// ---- CLI entry points ------------------------------------------------------------

/// Runs one experiment end to end, writing outputs under cfg.output_dir.
/// Returns a one-line summary.
std::string run_experiment(const ExperimentConfig& cfg);

}  // namespace ofq
