#include "ofq/cga.hpp"

#include <algorithm>

#include "ofq/errors.hpp"

namespace ofq {

std::string_view to_string(FreezeSemantics s) {
    switch (s) {
        case FreezeSemantics::Sticky: return "sticky";
        case FreezeSemantics::Literal: return "literal";
        case FreezeSemantics::Iterative: return "iterative";
    }
    return "?";
}

FreezeSemantics parse_freeze_semantics(std::string_view text) {
    if (text == "sticky") return FreezeSemantics::Sticky;
    if (text == "literal") return FreezeSemantics::Literal;
    if (text == "iterative") return FreezeSemantics::Iterative;
    throw ConfigError("unknown freeze semantics '" + std::string(text) + "' (expected sticky, literal or iterative)");
}

void AnnealConfig::validate() const {
    if (!(x > 0.0)) throw ConfigError("anneal.x must be positive, got " + std::to_string(x));
    if (steps == 0) throw ConfigError("anneal.steps must be positive");
    if (!(lr >= 0.0)) throw ConfigError("anneal.lr must be non-negative");
    if (window == 0) throw ConfigError("anneal.window must be positive");
}

FreezeMask::FreezeMask(std::string name, std::size_t size, double x, std::uint64_t created)
    : name_(std::move(name)), frozen_(size, 0), x_(x), created_(created) {}

void FreezeMask::freeze(std::size_t i) {
    if (!frozen_.at(i)) {
        frozen_[i] = 1;
        ++count_;
    }
}

void FreezeMask::set(std::size_t i, bool value) {
    if (value) {
        freeze(i);
    } else if (frozen_.at(i)) {
        frozen_[i] = 0;
        --count_;
    }
}

double ConvergenceProbe::max_variance() const {
    double m = 0;
    for (const auto& v : scale_variance) {
        for (double x : v) m = std::max(m, x);
    }
    return m;
}

Annealer::Annealer(std::vector<QuantizedWeight> weights, AnnealConfig config, std::uint64_t step)
    : weights_(std::move(weights)), config_(config) {
    config_.validate();
    if (weights_.empty()) throw ConfigError("annealing needs at least one quantized weight tensor");
    for (std::size_t t = 0; t < weights_.size(); ++t) {
        const auto& w = weights_[t];
        if (w.quantizer->is_identity()) throw ContractError("cannot anneal identity-quantized '" + w.name + "'");
        masks_.emplace_back(w.name, w.weight->size(), config_.x, step);
        osc_ema_.emplace_back(w.weight->size(), 0.0);
        levels_.push_back(w.quantizer->quantize(*w.weight).index);
        scale_history_.emplace_back();
        if (config_.semantics != FreezeSemantics::Iterative) refresh_mask(t);
        const Tensor s = scale(t);
        scale_history_[t].emplace_back(s.storage());
    }
}

Tensor Annealer::scale(std::size_t t) const { return weights_.at(t).quantizer->scale_for(*weights_[t].weight); }

void Annealer::refresh_mask(std::size_t t) {
    const auto& w = weights_[t];
    FreezeMask& m = masks_[t];
    switch (config_.semantics) {
        case FreezeSemantics::Sticky: {
            const Tensor d = w.quantizer->distances(*w.weight);
            for (std::size_t i = 0; i < d.size(); ++i) {
                if (d[i] > config_.x) m.freeze(i);
            }
            break;
        }
        case FreezeSemantics::Literal: {
            const Tensor d = w.quantizer->distances(*w.weight);
            for (std::size_t i = 0; i < d.size(); ++i) m.set(i, d[i] > config_.x);
            break;
        }
        case FreezeSemantics::Iterative: {
            const auto idx = w.quantizer->quantize(*w.weight).index;
            auto& ema = osc_ema_[t];
            for (std::size_t i = 0; i < idx.size(); ++i) {
                const double changed = idx[i] != levels_[t][i] ? 1.0 : 0.0;
                ema[i] = config_.iterative_momentum * ema[i] + (1.0 - config_.iterative_momentum) * changed;
                if (ema[i] > config_.iterative_threshold) m.freeze(i);
            }
            levels_[t] = idx;
            break;
        }
    }
}

void Annealer::mask_gradients() {
    for (std::size_t t = 0; t < weights_.size(); ++t) {
        Tensor& w = *weights_[t].weight;
        if (!w.has_grad()) continue;
        auto g = w.grad();
        const auto& flags = masks_[t].flags();
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (flags[i]) g[i] = 0.0;
        }
    }
}

void Annealer::after_update(std::uint64_t step) {
    (void)step;
    for (std::size_t t = 0; t < weights_.size(); ++t) {
        // StatsQ derives α_s from the whole tensor; LSQ returns its learned α.
        Tensor s = scale(t);
        if (weights_[t].quantizer->spec().kind == QuantKind::StatsQ) weights_[t].quantizer->state().scale = s;
        refresh_mask(t);
        scale_history_[t].push_back(std::move(s.storage()));
    }
}

void Annealer::masked_step(std::uint64_t step) {
    mask_gradients();
    for (std::size_t t = 0; t < weights_.size(); ++t) {
        Tensor& w = *weights_[t].weight;
        if (!w.has_grad()) continue;
        const auto g = std::as_const(w).grad();
        const auto& flags = masks_[t].flags();
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (!flags[i]) w[i] -= config_.lr * g[i];
        }
    }
    after_update(step);
}

ConvergenceProbe Annealer::convergence_probe(std::size_t window) const {
    if (window == 0) throw ConfigError("convergence window must be positive");
    ConvergenceProbe p;
    p.all_frozen = all_frozen();
    for (const auto& hist : scale_history_) {
        const std::size_t n = std::min(window, hist.size());
        const std::size_t groups = hist.empty() ? 0 : hist.back().size();
        std::vector<double> var(groups, 0.0);
        for (std::size_t g = 0; g < groups; ++g) {
            // Deviations from the first sample keep identical values at exactly zero.
            const double ref = hist[hist.size() - n][g];
            double s = 0, ss = 0;
            for (std::size_t k = hist.size() - n; k < hist.size(); ++k) {
                const double d = hist[k][g] - ref;
                s += d;
                ss += d * d;
            }
            const double mean = s / static_cast<double>(n);
            var[g] = std::max(0.0, ss / static_cast<double>(n) - mean * mean);
        }
        p.scale_variance.push_back(std::move(var));
    }
    return p;
}

std::size_t Annealer::frozen_count() const {
    std::size_t n = 0;
    for (const auto& m : masks_) n += m.frozen_count();
    return n;
}

std::size_t Annealer::total() const {
    std::size_t n = 0;
    for (const auto& m : masks_) n += m.size();
    return n;
}

bool Annealer::all_frozen() const { return frozen_count() == total(); }

double Annealer::frozen_fraction() const {
    return static_cast<double>(frozen_count()) / static_cast<double>(total());
}

}  // namespace ofq
