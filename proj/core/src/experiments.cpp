#include "ofq/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ofq/errors.hpp"

namespace ofq {

using nlohmann::json;

// ---- optimizer -----------------------------------------------------------------

Sgd::Sgd(std::vector<NamedTensor> params, double momentum) : params_(std::move(params)), momentum_(momentum) {
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
    for (const auto& p : params_) {
        Slot s;
        s.is_scale = p.name.ends_with(".scale");
        s.velocity.assign(p.tensor->size(), 0.0);
        slots_.push_back(std::move(s));
    }
}

void Sgd::set_trainable(const Tensor* t, bool trainable) {
    for (std::size_t k = 0; k < params_.size(); ++k) {
        if (params_[k].tensor == t) {
            slots_[k].trainable = trainable;
            std::fill(slots_[k].velocity.begin(), slots_[k].velocity.end(), 0.0);
            return;
        }
    }
    throw ContractError("optimizer does not own the tensor being toggled");
}

void Sgd::set_mask(const Tensor* t, const std::vector<std::uint8_t>* frozen) {
    for (std::size_t k = 0; k < params_.size(); ++k) {
        if (params_[k].tensor == t) {
            if (frozen && frozen->size() != t->size()) throw DimensionError("mask size does not match tensor");
            slots_[k].mask = frozen;
            return;
        }
    }
    throw ContractError("optimizer does not own the tensor being masked");
}

void Sgd::zero_grad() {
    for (auto& p : params_) p.tensor->clear_grad();
}

void Sgd::check_gradients(std::uint64_t step) const {
    for (const auto& p : params_) {
        if (!p.tensor->has_grad()) continue;
        for (double g : std::as_const(*p.tensor).grad()) {
            if (!std::isfinite(g)) {
                throw NumericError("non-finite gradient in '" + p.name + "' at step " + std::to_string(step));
            }
        }
    }
}

void Sgd::step(double lr) {
    for (std::size_t k = 0; k < params_.size(); ++k) {
        Slot& s = slots_[k];
        Tensor& t = *params_[k].tensor;
        if (!s.trainable || !t.has_grad()) continue;
        const auto g = std::as_const(t).grad();
        for (std::size_t i = 0; i < t.size(); ++i) {
            if (s.mask && (*s.mask)[i]) {
                s.velocity[i] = 0.0;
                continue;
            }
            s.velocity[i] = momentum_ * s.velocity[i] + g[i];
            t[i] -= lr * s.velocity[i];
        }
        if (s.is_scale) {
            for (double& v : t.data()) v = std::max(v, kScaleFloor);
        }
    }
}

double cosine_lr(double base, double min, std::uint64_t step, std::uint64_t total) {
    if (total == 0) return base;
    const double t = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
    return min + 0.5 * (base - min) * (1.0 + std::cos(M_PI * t));
}

// ---- toy regression ------------------------------------------------------------

ToyResult run_toy_regression(const ToyConfig& cfg, std::uint64_t seed, CsvWriter* log) {
    cfg.validate();
    const QuantSpec spec = cfg.quantizer == QuantKind::Lsq ? QuantSpec::lsq(cfg.bits, Granularity::PerTensor)
                                                           : QuantSpec::statsq(cfg.bits, Granularity::PerTensor);
    Tensor w(Shape{3}, cfg.init);
    const Tensor target(Shape{3}, cfg.target);
    Tensor alpha(Shape{1}, cfg.alpha0);
    const double gs = lsq_grad_scale(3, spec);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);

    ToyResult r;
    std::vector<std::int32_t> prev;
    std::vector<double> x(3 * cfg.batch);
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        if (spec.kind == QuantKind::StatsQ) alpha = statsq_scale(w, Granularity::PerTensor);
        const QuantizedTensor q =
            spec.kind == QuantKind::Lsq ? lsq_quantize(w, alpha, spec) : statsq_quantize(w, alpha, spec);
        const Tensor wq = q.dequantize();
        if (!prev.empty()) {
            for (std::size_t i = 0; i < 3; ++i) r.crossings[i] += q.index[i] != prev[i];
        }
        prev = q.index;

        for (double& v : x) v = unif(rng);
        Tensor gwq(Shape{3});
        double loss = 0;
        for (std::size_t b = 0; b < cfg.batch; ++b) {
            double res = 0;
            for (std::size_t i = 0; i < 3; ++i) res += x[3 * b + i] * (target[i] - wq[i]);
            loss += 0.5 * res * res;
            for (std::size_t i = 0; i < 3; ++i) gwq[i] -= x[3 * b + i] * res;
        }
        loss /= static_cast<double>(cfg.batch);
        for (double& v : gwq.data()) v /= static_cast<double>(cfg.batch);

        if (log) {
            *log << static_cast<unsigned long long>(step);
            for (std::size_t i = 0; i < 3; ++i) *log << w[i];
            for (std::size_t i = 0; i < 3; ++i) *log << wq[i];
            *log << alpha[0] << loss;
            for (std::size_t i = 0; i < 3; ++i) *log << static_cast<unsigned long long>(r.crossings[i]);
            log->end_row();
        }

        if (spec.kind == QuantKind::Lsq) {
            LsqGrads g = lsq_backward(gwq, w, alpha, spec, gs);
            alpha[0] = std::max(alpha[0] - cfg.lr * g.grad_scale[0], kScaleFloor);
            for (std::size_t i = 0; i < 3; ++i) w[i] -= cfg.lr * g.grad_w[i];
        } else {
            const Tensor gw = statsq_backward(gwq, w, alpha, spec);
            for (std::size_t i = 0; i < 3; ++i) w[i] -= cfg.lr * gw[i];
        }
    }
    if (spec.kind == QuantKind::StatsQ) alpha = statsq_scale(w, Granularity::PerTensor);
    const Tensor wq =
        (spec.kind == QuantKind::Lsq ? lsq_quantize(w, alpha, spec) : statsq_quantize(w, alpha, spec)).dequantize();
    // Exact expectation over X ~ U[0,1)³: E[x_i²] = 1/3, E[x_i x_j] = 1/4.
    double loss = 0;
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 3; ++j) {
            loss += 0.5 * (i == j ? 1.0 / 3.0 : 0.25) * (target[i] - wq[i]) * (target[j] - wq[j]);
        }
    }
    r.final_loss = loss;
    for (std::size_t i = 0; i < 3; ++i) r.weights[i] = w[i];
    r.scale = alpha[0];
    r.total_crossings = r.crossings[0] + r.crossings[1] + r.crossings[2];
    return r;
}

// ---- training ------------------------------------------------------------------

namespace {

struct BatchOutcome {
    double loss = 0;
    std::size_t correct = 0;
};

std::size_t argmax_row(const Tensor& logits, std::size_t row) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < logits.cols(); ++c) {
        if (logits.at(row, c) > logits.at(row, best)) best = c;
    }
    return best;
}

/// Forward + backward on one batch. Gradients land in the parameter tensors.
BatchOutcome train_batch(QViT& model, const Dataset& data, std::span<const std::size_t> idx, std::uint64_t step) {
    std::vector<const Tensor*> imgs;
    std::vector<std::size_t> labels;
    for (auto i : idx) {
        imgs.push_back(&data.images[i]);
        labels.push_back(data.labels[i]);
    }
    BatchOutcome out;
    try {
        Graph g;
        Var logits = model.forward_batch(g, imgs);
        Var loss = cross_entropy(logits, labels);
        out.loss = loss.value().item();
        for (std::size_t b = 0; b < labels.size(); ++b) out.correct += argmax_row(logits.value(), b) == labels[b];
        g.backward(loss);
    } catch (const NumericError& e) {
        throw NumericError("step " + std::to_string(step) + ": " + e.what());
    }
    return out;
}

void check_parameters(QViT& model, std::uint64_t step) {
    for (const auto& p : model.parameters()) {
        if (!p.tensor->all_finite()) {
            throw NumericError("non-finite value in '" + p.name + "' after step " + std::to_string(step));
        }
    }
}

void write_metrics(CsvWriter* csv, std::uint64_t step, std::size_t epoch, const char* phase, double lr, double loss,
                   double acc, const Evaluation& val, double frozen, double br) {
    if (!csv) return;
    *csv << static_cast<unsigned long long>(step) << static_cast<unsigned long long>(epoch) << phase << lr << loss
         << acc << val.loss << val.accuracy << frozen << br;
    csv->end_row();
}

std::vector<std::size_t> shuffled(std::size_t n, std::mt19937_64& rng) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

}  // namespace

std::vector<std::string> metrics_header() {
    return {"step", "epoch", "phase", "lr", "loss", "accuracy", "val_loss", "val_accuracy", "frozen_fraction",
            "br_fraction"};
}

Evaluation evaluate(QViT& model, const Dataset& data, std::size_t batch) {
    Evaluation ev;
    if (data.empty()) return ev;
    double loss = 0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < data.size(); start += batch) {
        const std::size_t end = std::min(data.size(), start + batch);
        std::vector<const Tensor*> imgs;
        std::vector<std::size_t> labels;
        for (std::size_t i = start; i < end; ++i) {
            imgs.push_back(&data.images[i]);
            labels.push_back(data.labels[i]);
        }
        Graph g;
        Var logits = model.forward_batch(g, imgs);
        loss += cross_entropy(logits, labels).value().item() * static_cast<double>(end - start);
        for (std::size_t b = 0; b < labels.size(); ++b) correct += argmax_row(logits.value(), b) == labels[b];
    }
    ev.loss = loss / static_cast<double>(data.size());
    ev.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
    return ev;
}

TrainResult train_model(QViT& model, const DataSplit& data, const OptimizerConfig& opt, double br_x,
                        std::uint64_t seed, const TrainOptions& options) {
    TrainResult result;
    if (!model.calibrated() && !data.train.empty()) {
        auto ptrs = data.train.pointers();
        ptrs.resize(std::min(ptrs.size(), opt.calibration_images));
        model.calibrate(ptrs);
    }
    Sgd sgd(model.parameters(), opt.momentum);
    const std::size_t n = data.train.size();
    const std::size_t per_epoch = (n + opt.batch_size - 1) / opt.batch_size;
    const std::uint64_t total = per_epoch * opt.epochs;
    const auto body = model.body_weights();
    if (options.recorder) {
        for (const auto& w : body) {
            if (!options.recorder->has(w.name)) options.recorder->add(w.name, w.quantizer->spec(), w.weight->size());
        }
    }
    const std::uint64_t record_from = total > options.record_steps ? total - options.record_steps : 0;

    std::mt19937_64 rng(seed ^ 0x7a11ULL);
    std::uint64_t step = 0;
    for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
        const auto order = shuffled(n, rng);
        double loss_sum = 0;
        std::size_t correct = 0;
        double lr = opt.lr;
        for (std::size_t start = 0; start < n; start += opt.batch_size) {
            const std::size_t end = std::min(n, start + opt.batch_size);
            lr = opt.schedule == "cosine" ? cosine_lr(opt.lr, opt.min_lr, step, total) : opt.lr;
            const BatchOutcome b =
                train_batch(model, data.train, std::span(order).subspan(start, end - start), step);
            if (!std::isfinite(b.loss)) throw NumericError("non-finite loss at step " + std::to_string(step));
            sgd.check_gradients(step);
            if (options.recorder && options.record_steps > 0 && step >= record_from) {
                options.recorder->record_model(body, step);
            }
            sgd.step(lr);
            check_parameters(model, step);
            loss_sum += b.loss * static_cast<double>(end - start);
            correct += b.correct;
            ++step;
        }
        EpochRow row;
        row.step = step;
        row.epoch = epoch + 1;
        row.lr = lr;
        row.train_loss = n ? loss_sum / static_cast<double>(n) : 0.0;
        row.train_accuracy = n ? static_cast<double>(correct) / static_cast<double>(n) : 0.0;
        row.val = evaluate(model, data.val);
        row.br_fraction = body.empty() ? 0.0 : br_population(body, br_x).fraction();
        write_metrics(options.metrics, row.step, row.epoch, "train", row.lr, row.train_loss, row.train_accuracy,
                      row.val, 0.0, row.br_fraction);
        if (options.verbose) {
            std::cerr << "epoch " << row.epoch << " loss " << row.train_loss << " acc " << row.train_accuracy
                      << " val_acc " << row.val.accuracy << " br " << row.br_fraction << "\n";
        }
        result.history.push_back(row);
    }
    sgd.zero_grad();
    result.steps = step;
    result.final_val = evaluate(model, data.val);
    return result;
}

// ---- annealing -----------------------------------------------------------------

std::vector<QuantizedWeight> anneal_targets(QViT& model) { return model.quantized_weights(); }

namespace {

std::vector<double> block_scales(const Annealer& ann, std::size_t layers) {
    std::vector<double> sum(layers, 0.0), count(layers, 0.0);
    for (std::size_t t = 0; t < ann.weights().size(); ++t) {
        const std::string& name = ann.weights()[t].name;
        if (!name.starts_with("blocks.")) continue;
        const std::size_t blk = std::stoul(name.substr(7));
        const Tensor s = ann.scale(t);
        for (double v : s.data()) sum[blk] += v;
        count[blk] += static_cast<double>(s.size());
    }
    for (std::size_t i = 0; i < layers; ++i) sum[i] = count[i] > 0 ? sum[i] / count[i] : 0.0;
    return sum;
}

void log_anneal(CsvWriter* log, const AnnealRow& row) {
    if (!log) return;
    *log << static_cast<unsigned long long>(row.step) << row.frozen_fraction;
    for (double v : row.block_scale) *log << v;
    *log << row.loss;
    log->end_row();
}

}  // namespace

AnnealResult anneal_model(QViT& model, const DataSplit& data, const AnnealSection& cfg, std::size_t batch_size,
                          double momentum, std::uint64_t seed, CsvWriter* log) {
    AnnealResult r;
    r.before = evaluate(model, data.val);
    Annealer ann(anneal_targets(model), cfg.cga, 0);
    const std::size_t layers = model.config().layers;

    AnnealRow row0{0, ann.frozen_fraction(), block_scales(ann, layers), r.before.loss};
    r.rows.push_back(row0);
    log_anneal(log, row0);
    if (ann.all_frozen()) {
        r.converged = true;
        r.probe = ann.convergence_probe();
        r.after = r.before;
        return r;
    }
    if (data.train.empty()) throw ConfigError("annealing needs training data");

    Sgd sgd(model.parameters(), momentum);
    for (std::size_t t = 0; t < ann.weights().size(); ++t) {
        sgd.set_mask(ann.weights()[t].weight, &ann.masks()[t].flags());
        // Weight scales stay where training left them; only the weights anneal.
        Quantizer* q = ann.weights()[t].quantizer;
        if (q->learnable()) sgd.set_trainable(&q->state().scale, false);
    }
    if (model.config().attention == AttentionMode::Qkr) {
        for (auto& b : model.blocks()) {
            sgd.set_trainable(&b.attn.wq, false);
            sgd.set_trainable(&b.attn.wk, false);
        }
    }

    std::mt19937_64 rng(seed ^ 0xa22ea1ULL);
    std::vector<std::size_t> order;
    std::size_t cursor = 0;
    std::size_t frozen_prev = ann.frozen_count();
    std::uint64_t stop_at = cfg.cga.steps;
    for (std::uint64_t step = 1; step <= stop_at; ++step) {
        if (cursor + batch_size > order.size()) {
            order = shuffled(data.train.size(), rng);
            cursor = 0;
        }
        const std::size_t take = std::min(batch_size, order.size());
        const BatchOutcome b = train_batch(model, data.train, std::span(order).subspan(cursor, take), step);
        cursor += take;
        sgd.check_gradients(step);
        ann.mask_gradients();
        sgd.step(cfg.cga.lr);
        ann.after_update(step);
        check_parameters(model, step);

        if (ann.frozen_count() < frozen_prev) r.monotone = false;
        frozen_prev = ann.frozen_count();
        r.steps = step;
        if (step % cfg.log_every == 0 || step == stop_at || (!r.converged && ann.all_frozen())) {
            AnnealRow row{step, ann.frozen_fraction(), block_scales(ann, layers), b.loss};
            log_anneal(log, row);
            r.rows.push_back(std::move(row));
        }
        if (!r.converged && ann.all_frozen()) {
            r.converged = true;
            r.steps_to_frozen = step;
            stop_at = cfg.settle ? std::min<std::uint64_t>(cfg.cga.steps + cfg.cga.window, step + cfg.cga.window)
                                 : step;
        }
    }
    sgd.zero_grad();
    r.probe = ann.convergence_probe();
    r.after = evaluate(model, data.val);
    return r;
}

// ---- diagnosis -----------------------------------------------------------------

double NoiseComparison::mean_within() const {
    return within_loss.empty() ? 0.0
                               : std::accumulate(within_loss.begin(), within_loss.end(), 0.0) /
                                     static_cast<double>(within_loss.size());
}

double NoiseComparison::mean_random() const {
    return random_loss.empty() ? 0.0
                               : std::accumulate(random_loss.begin(), random_loss.end(), 0.0) /
                                     static_cast<double>(random_loss.size());
}

std::vector<Tensor> snapshot(QViT& model) {
    std::vector<Tensor> out;
    for (const auto& p : model.parameters()) out.push_back(*p.tensor);
    return out;
}

void restore(QViT& model, const std::vector<Tensor>& snap) {
    auto params = model.parameters();
    if (params.size() != snap.size()) throw ContractError("restore: snapshot does not match model");
    for (std::size_t k = 0; k < params.size(); ++k) params[k].tensor->storage() = snap[k].storage();
}

OptimizerConfig noise_recovery(const ExperimentConfig& cfg) {
    OptimizerConfig r = cfg.optimizer;
    r.schedule = "constant";
    r.lr = cfg.diagnostics.probe_lr;
    r.epochs = cfg.diagnostics.noise_recovery_epochs;
    return r;
}

NoiseComparison noise_comparison(QViT& model, const DataSplit& data, double x, double amplitude, std::size_t seeds,
                                 std::uint64_t seed0, const OptimizerConfig& recovery) {
    NoiseComparison nc;
    const auto weights = model.quantized_weights();
    const Population pop = br_population(weights, x);
    nc.population = pop.inside;
    nc.total = pop.total;
    nc.base_loss = evaluate(model, data.val).loss;
    const auto snap = snapshot(model);
    // Same batch order for every run of a seed, so the noise is the only difference.
    auto measure = [&](std::uint64_t seed) {
        if (recovery.epochs > 0 && !data.train.empty()) train_model(model, data, recovery, x, seed);
        const double loss = evaluate(model, data.val).loss;
        restore(model, snap);
        return loss;
    };
    nc.control_loss = measure(seed0);
    if (pop.inside == 0) return nc;
    for (std::size_t s = 0; s < seeds; ++s) {
        inject_noise(weights, NoiseMode::WithinBR, x, amplitude, seed0 + s);
        nc.within_loss.push_back(measure(seed0 + s));
        inject_noise(weights, NoiseMode::RandomPositions, pop.fraction(), amplitude, seed0 + s);
        nc.random_loss.push_back(measure(seed0 + s));
    }
    return nc;
}

// ---- CLI entry points ------------------------------------------------------------

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << text << '\n';
}

std::filesystem::path prepare_output(const ExperimentConfig& cfg) {
    std::filesystem::path dir(cfg.output_dir);
    std::filesystem::create_directories(dir);
    write_text(dir / "config.json", config_to_json(cfg));
    return dir;
}

QViT load_matching(const ExperimentConfig& cfg) {
    std::string meta;
    QViT model = load_checkpoint(cfg.checkpoint, &meta);
    if (!(model.config() == cfg.model)) {
        throw ConfigError("checkpoint " + cfg.checkpoint +
                          " was built with a different model/bit configuration than the config's model section");
    }
    return model;
}

std::string fmt(double v) {
    std::ostringstream ss;
    ss.precision(4);
    ss << v;
    return ss.str();
}

std::vector<ReportRow> flip_rows(const Recorder& rec, QViT& model, std::size_t window,
                                 const std::vector<double>& edges) {
    std::vector<const FlipCounter*> counters;
    std::vector<Tensor> dists;
    std::uint64_t last = 0;
    for (const auto& w : model.body_weights()) {
        counters.push_back(&rec.flips(w.name));
        dists.push_back(w.quantizer->distances(*w.weight));
        last = rec.flips(w.name).last_step();
    }
    std::vector<ReportRow> rows;
    if (counters.empty() || counters.front()->recorded_steps() < 2) return rows;
    window = std::min(window, counters.front()->recorded_steps());
    for (const auto& b : flip_report(counters, dists, window, edges)) {
        rows.push_back({last, "mean_flips", b.label, b.mean_flips});
        rows.push_back({last, "weights", b.label, static_cast<double>(b.weights)});
    }
    return rows;
}

std::vector<ReportRow> composition_rows(const Recorder& rec) {
    std::vector<ReportRow> rows;
    for (const auto& [step, c] : rec.composition_history()) {
        rows.push_back({step, "all", "still_inside", static_cast<double>(c.still_inside)});
        rows.push_back({step, "all", "total_inside", static_cast<double>(c.total_inside)});
    }
    return rows;
}

std::string run_toy(const ExperimentConfig& cfg) {
    const auto dir = prepare_output(cfg);
    CsvWriter log(dir / "toy.csv", {"step", "w0", "w1", "w2", "wq0", "wq1", "wq2", "scale", "loss", "crossings0",
                                    "crossings1", "crossings2"});
    const ToyResult r = run_toy_regression(cfg.toy, cfg.seed, &log);
    json s{{"crossings", r.crossings}, {"total_crossings", r.total_crossings}, {"final_loss", r.final_loss},
           {"weights", r.weights}, {"scale", r.scale}};
    write_text(dir / "summary.json", s.dump(2));
    return "toy " + std::string(to_string(cfg.toy.quantizer)) + ": crossings " + std::to_string(r.crossings[0]) + "/" +
           std::to_string(r.crossings[1]) + "/" + std::to_string(r.crossings[2]) + ", final loss " +
           fmt(r.final_loss);
}

std::string run_train(const ExperimentConfig& cfg) {
    const auto dir = prepare_output(cfg);
    const DataSplit data = make_dataset(cfg.data, cfg.model, cfg.seed);
    QViT model(cfg.model, cfg.seed);
    CsvWriter metrics(dir / "metrics.csv", metrics_header());
    Recorder rec(cfg.diagnostics.x);
    TrainOptions opts;
    opts.metrics = &metrics;
    if (cfg.diagnostics.record_steps > 0) {
        opts.recorder = &rec;
        opts.record_steps = cfg.diagnostics.record_steps;
    }
    const TrainResult r = train_model(model, data, cfg.optimizer, cfg.diagnostics.x, cfg.seed, opts);
    json meta{{"experiment", json::parse(config_to_json(cfg))},
              {"steps", r.steps},
              {"val_accuracy", r.final_val.accuracy},
              {"val_loss", r.final_val.loss}};
    save_checkpoint(dir / "checkpoint.ofq", model, meta.dump());
    if (opts.recorder) {
        write_report_csv(dir / "flips.csv", flip_rows(rec, model, cfg.diagnostics.flip_window, cfg.diagnostics.flip_edges));
        write_report_csv(dir / "composition.csv", composition_rows(rec));
    }
    write_text(dir / "summary.json", json{{"steps", r.steps},
                                          {"val_accuracy", r.final_val.accuracy},
                                          {"val_loss", r.final_val.loss}}
                                         .dump(2));
    return "train: " + std::to_string(r.steps) + " steps, val accuracy " + fmt(r.final_val.accuracy);
}

std::string run_anneal(const ExperimentConfig& cfg) {
    const auto dir = prepare_output(cfg);
    QViT model = load_matching(cfg);
    const DataSplit data = make_dataset(cfg.data, cfg.model, cfg.seed);
    std::vector<std::string> header{"step", "frozen_fraction"};
    for (std::size_t i = 0; i < cfg.model.layers; ++i) header.push_back("alpha_block" + std::to_string(i));
    header.push_back("loss");
    CsvWriter log(dir / "anneal.csv", header);
    const AnnealResult r =
        anneal_model(model, data, cfg.anneal, cfg.optimizer.batch_size, cfg.optimizer.momentum, cfg.seed, &log);
    json summary{{"converged", r.converged},
                 {"steps_to_frozen", r.steps_to_frozen},
                 {"steps", r.steps},
                 {"val_accuracy_before", r.before.accuracy},
                 {"val_accuracy_after", r.after.accuracy},
                 {"max_scale_variance", r.probe.max_variance()},
                 {"monotone", r.monotone}};
    save_checkpoint(dir / "checkpoint.ofq", model,
                    json{{"experiment", json::parse(config_to_json(cfg))}, {"anneal", summary}}.dump());
    write_text(dir / "summary.json", summary.dump(2));
    return "anneal: " + std::string(r.converged ? "all frozen at step " + std::to_string(r.steps_to_frozen)
                                                : "not converged in " + std::to_string(r.steps) + " steps") +
           ", val accuracy " + fmt(r.before.accuracy) + " -> " + fmt(r.after.accuracy);
}

std::string run_diagnose(const ExperimentConfig& cfg) {
    const auto dir = prepare_output(cfg);
    QViT model = load_matching(cfg);
    const DataSplit data = make_dataset(cfg.data, cfg.model, cfg.seed);
    const auto& d = cfg.diagnostics;

    std::vector<ReportRow> hist;
    for (auto& b : model.blocks()) {
        const auto& w = b.ffn.fc1;
        auto rows = weight_histogram(w.name() + ".weight", w.weight, w.weight_quant, d.histogram_bins, -3.0, 3.0);
        hist.insert(hist.end(), rows.begin(), rows.end());
    }
    write_report_csv(dir / "histogram.csv", hist);

    // Noise injection on the checkpoint as loaded.
    const NoiseComparison nc =
        noise_comparison(model, data, d.x, d.amplitude(), d.noise_seeds, cfg.seed, noise_recovery(cfg));
    std::vector<ReportRow> noise{{0, "base", "loss", nc.base_loss},
                                 {0, "control", "loss", nc.control_loss},
                                 {0, "population", "count", static_cast<double>(nc.population)},
                                 {0, "population", "total", static_cast<double>(nc.total)}};
    for (std::size_t s = 0; s < nc.within_loss.size(); ++s) {
        noise.push_back({s, "within_br", "loss", nc.within_loss[s]});
        noise.push_back({s, "random", "loss", nc.random_loss[s]});
    }
    write_report_csv(dir / "noise.csv", noise);

    // Flip and composition tracking over a short probe phase.
    Recorder rec(d.x);
    Correlation corr;
    if (d.probe_steps > 0 && !data.train.empty()) {
        OptimizerConfig probe = cfg.optimizer;
        probe.schedule = "constant";
        probe.lr = d.probe_lr;
        const std::size_t per_epoch = (data.train.size() + probe.batch_size - 1) / probe.batch_size;
        probe.epochs = (d.probe_steps + per_epoch - 1) / per_epoch;
        TrainOptions opts;
        opts.recorder = &rec;
        opts.record_steps = probe.epochs * per_epoch;
        train_model(model, data, probe, d.x, cfg.seed, opts);
        const auto flips = flip_rows(rec, model, d.flip_window, d.flip_edges);
        write_report_csv(dir / "flips.csv", flips);
        write_report_csv(dir / "composition.csv", composition_rows(rec));
        std::vector<FlipBucket> buckets;
        for (const auto& r : flips) {
            if (r.tensor == "mean_flips") buckets.push_back({r.bucket, 0, 0, 0, r.value});
        }
        for (std::size_t i = 0; i < buckets.size(); ++i) buckets[i].hi = static_cast<double>(i + 1);
        corr = flip_distance_correlation(buckets);
    }
    json summary{{"noise_base_loss", nc.base_loss},
                 {"noise_within_br_mean_loss", nc.mean_within()},
                 {"noise_random_mean_loss", nc.mean_random()},
                 {"br_population", nc.population},
                 {"weights", nc.total},
                 {"flip_spearman_rho", corr.rho},
                 {"flip_spearman_p", corr.p_value}};
    write_text(dir / "summary.json", summary.dump(2));
    return "diagnose: BR population " + std::to_string(nc.population) + "/" + std::to_string(nc.total) +
           ", noise loss within " + fmt(nc.mean_within()) + " vs random " + fmt(nc.mean_random()) +
           ", flip rho " + fmt(corr.rho);
}

}  // namespace

std::string run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    switch (cfg.kind) {
        case ExperimentKind::Toy: return run_toy(cfg);
        case ExperimentKind::Train: return run_train(cfg);
        case ExperimentKind::Anneal: return run_anneal(cfg);
        case ExperimentKind::Diagnose: return run_diagnose(cfg);
    }
    throw ConfigError("unknown experiment kind");
}

}  // namespace ofq
