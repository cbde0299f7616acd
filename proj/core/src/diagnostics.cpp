#include "ofq/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>

#include <boost/math/distributions/students_t.hpp>

#include "ofq/csv.hpp"
#include "ofq/errors.hpp"

namespace ofq {

namespace {

QuantizedTensor quantize_with(const Tensor& w, const Tensor& scale, const QuantSpec& spec) {
    switch (spec.kind) {
        case QuantKind::Lsq: return lsq_quantize(w, scale, spec);
        case QuantKind::StatsQ: return statsq_quantize(w, scale, spec);
        case QuantKind::Identity: break;
    }
    throw ContractError("boundary tracking needs an LSQ or StatsQ spec");
}

std::string edge_label(double edge) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "BR_%g", edge);
    return buf;
}

}  // namespace

// ---- BoundaryTracker -----------------------------------------------------------

BoundaryTracker::BoundaryTracker(std::string name, double x) : name_(std::move(name)), x_(x) {
    if (!(x > 0.0)) throw ConfigError("boundary range half-width must be positive");
}

void BoundaryTracker::measure(const Tensor& w, const Tensor& scale, const QuantSpec& spec, bool first) {
    const Tensor dist = boundary_distance(w, scale, spec);
    const QuantizedTensor q = quantize_with(w, scale, spec);
    if (!first && dist.size() != inside_.size()) {
        throw DimensionError("tracker '" + name_ + "' registered with " + std::to_string(inside_.size()) +
                             " weights, got " + std::to_string(dist.size()));
    }
    inside_.resize(dist.size());
    for (std::size_t i = 0; i < dist.size(); ++i) inside_[i] = dist[i] <= x_;
    if (first) {
        initial_ = inside_;
        crossings_.assign(dist.size(), 0);
    } else {
        for (std::size_t i = 0; i < q.index.size(); ++i) crossings_[i] += q.index[i] != level_[i];
    }
    level_ = q.index;
}

void BoundaryTracker::start(const Tensor& w, const Tensor& scale, const QuantSpec& spec) {
    measure(w, scale, spec, true);
}

void BoundaryTracker::update(const Tensor& w, const Tensor& scale, const QuantSpec& spec) {
    if (!started()) throw StateError("tracker '" + name_ + "' updated before start");
    measure(w, scale, spec, false);
}

std::size_t BoundaryTracker::inside_count() const {
    return static_cast<std::size_t>(std::count(inside_.begin(), inside_.end(), 1));
}

std::size_t BoundaryTracker::initial_count() const {
    return static_cast<std::size_t>(std::count(initial_.begin(), initial_.end(), 1));
}

std::size_t BoundaryTracker::still_inside_count() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < inside_.size(); ++i) n += inside_[i] && initial_[i];
    return n;
}

std::uint64_t BoundaryTracker::total_crossings() const {
    return std::accumulate(crossings_.begin(), crossings_.end(), std::uint64_t{0});
}

Composition composition_report(const BoundaryTracker& tracker) {
    return {tracker.still_inside_count(), tracker.inside_count()};
}

// ---- FlipCounter ---------------------------------------------------------------

FlipCounter::FlipCounter(std::size_t size) : sign_(size, 0), flip_steps_(size) {}

void FlipCounter::record(std::span<const double> grad, std::uint64_t step) {
    if (grad.size() != sign_.size()) {
        throw DimensionError("flip counter has " + std::to_string(sign_.size()) + " weights, gradient has " +
                             std::to_string(grad.size()));
    }
    if (recorded_ > 0 && step <= last_step_) throw ContractError("flip counter steps must strictly increase");
    const auto ordinal = static_cast<std::uint32_t>(recorded_);
    for (std::size_t i = 0; i < grad.size(); ++i) {
        const std::int8_t s = grad[i] > 0 ? 1 : (grad[i] < 0 ? -1 : 0);
        if (s == 0) continue;
        if (sign_[i] != 0 && s != sign_[i]) flip_steps_[i].push_back(ordinal);
        sign_[i] = s;
    }
    ++recorded_;
    last_step_ = step;
}

std::size_t FlipCounter::flips(std::size_t i, std::size_t window) const {
    const auto& steps = flip_steps_.at(i);
    // A flip at ordinal t compares steps t-1 and t; both must be in the window.
    const std::size_t first = recorded_ > window ? recorded_ - window + 1 : 0;
    auto it = std::lower_bound(steps.begin(), steps.end(), first);
    return static_cast<std::size_t>(steps.end() - it);
}

// ---- TrajectoryLog -------------------------------------------------------------

void TrajectoryLog::record(const std::string& series, std::uint64_t step, std::span<const double> values) {
    auto& s = series_[series];
    if (!s.empty() && step <= s.back().step) {
        throw ContractError("trajectory '" + series + "': step " + std::to_string(step) + " after " +
                            std::to_string(s.back().step));
    }
    s.push_back({step, std::vector<double>(values.begin(), values.end())});
}

const std::vector<TrajectoryLog::Point>& TrajectoryLog::at(const std::string& series) const {
    auto it = series_.find(series);
    if (it == series_.end()) throw ContractError("no trajectory named '" + series + "'");
    return it->second;
}

// ---- flip report ---------------------------------------------------------------

std::vector<double> default_flip_edges() {
    std::vector<double> e;
    for (int k = 1; k <= 9; ++k) e.push_back(0.001 * k);
    return e;
}

std::vector<FlipBucket> flip_report(const std::vector<const FlipCounter*>& counters,
                                    const std::vector<Tensor>& distances, std::size_t window,
                                    const std::vector<double>& edges) {
    if (counters.size() != distances.size()) throw DimensionError("flip_report: counters and distances differ");
    if (edges.empty() || !std::is_sorted(edges.begin(), edges.end())) {
        throw ConfigError("flip_report: bucket edges must be non-empty and sorted");
    }
    for (const auto* c : counters) {
        if (window == 0 || window > c->recorded_steps()) {
            throw ConfigError("flip_report: window " + std::to_string(window) + " exceeds " +
                              std::to_string(c->recorded_steps()) + " recorded steps");
        }
    }
    std::vector<double> sum(edges.size() + 1, 0.0);
    std::vector<std::size_t> count(edges.size() + 1, 0);
    for (std::size_t t = 0; t < counters.size(); ++t) {
        const Tensor& d = distances[t];
        if (d.size() != counters[t]->size()) throw DimensionError("flip_report: distance/counter size mismatch");
        for (std::size_t i = 0; i < d.size(); ++i) {
            const auto b = static_cast<std::size_t>(std::lower_bound(edges.begin(), edges.end(), d[i]) - edges.begin());
            sum[b] += static_cast<double>(counters[t]->flips(i, window));
            ++count[b];
        }
    }
    std::vector<FlipBucket> out;
    for (std::size_t b = 0; b <= edges.size(); ++b) {
        if (count[b] == 0) continue;
        FlipBucket fb;
        fb.lo = b == 0 ? 0.0 : edges[b - 1];
        fb.hi = b < edges.size() ? edges[b] : INFINITY;
        fb.label = b < edges.size() ? edge_label(edges[b]) : "beyond";
        fb.weights = count[b];
        fb.mean_flips = sum[b] / static_cast<double>(count[b]);
        out.push_back(fb);
    }
    return out;
}

std::vector<FlipBucket> flip_report(const FlipCounter& counter, const Tensor& distances, std::size_t window,
                                    const std::vector<double>& edges) {
    return flip_report(std::vector<const FlipCounter*>{&counter}, std::vector<Tensor>{distances}, window, edges);
}

namespace {

std::vector<double> ranks(std::span<const double> v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
        i = j + 1;
    }
    return r;
}

}  // namespace

Correlation spearman(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw DimensionError("spearman: samples differ in length");
    Correlation c;
    c.n = x.size();
    if (c.n < 3) return c;
    const auto rx = ranks(x), ry = ranks(y);
    const double mean = (static_cast<double>(c.n) + 1.0) / 2.0;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < c.n; ++i) {
        sxy += (rx[i] - mean) * (ry[i] - mean);
        sxx += (rx[i] - mean) * (rx[i] - mean);
        syy += (ry[i] - mean) * (ry[i] - mean);
    }
    if (sxx == 0 || syy == 0) return c;
    c.rho = sxy / std::sqrt(sxx * syy);
    const double df = static_cast<double>(c.n) - 2.0;
    if (std::abs(c.rho) >= 1.0) {
        c.p_value = 0.0;
    } else {
        const double t = c.rho * std::sqrt(df / (1.0 - c.rho * c.rho));
        boost::math::students_t dist(df);
        c.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
    }
    return c;
}

Correlation flip_distance_correlation(const std::vector<FlipBucket>& buckets) {
    std::vector<double> pos, flips;
    for (std::size_t i = 0; i < buckets.size(); ++i) {
        pos.push_back(std::isfinite(buckets[i].hi) ? buckets[i].hi : buckets[i].lo * 2.0);
        flips.push_back(buckets[i].mean_flips);
    }
    return spearman(pos, flips);
}

// ---- Recorder ------------------------------------------------------------------

void Recorder::add(const std::string& name, const QuantSpec& spec, std::size_t size) {
    if (spec.is_identity()) throw ContractError("cannot track identity-quantized tensor '" + name + "'");
    Entry e{spec, BoundaryTracker(name, x_), FlipCounter(size)};
    entries_.insert_or_assign(name, std::move(e));
}

Recorder::Entry& Recorder::entry(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ContractError("tensor '" + name + "' is not registered for recording");
    return it->second;
}

const Recorder::Entry& Recorder::entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ContractError("tensor '" + name + "' is not registered for recording");
    return it->second;
}

void Recorder::record(const std::string& name, const Tensor& w, std::span<const double> grad, const Tensor& scale,
                      std::uint64_t step) {
    Entry& e = entry(name);
    if (w.size() != e.flips.size()) {
        throw DimensionError("tensor '" + name + "' registered with " + std::to_string(e.flips.size()) +
                             " weights, got " + std::to_string(w.size()));
    }
    if (e.tracker.started()) {
        e.tracker.update(w, scale, e.spec);
    } else {
        e.tracker.start(w, scale, e.spec);
    }
    if (!grad.empty()) e.flips.record(grad, step);
    trajectories_.record(name, step, scale.data());
}

void Recorder::register_model(const std::vector<QuantizedWeight>& weights) {
    for (const auto& w : weights) add(w.name, w.quantizer->spec(), w.weight->size());
}

void Recorder::record_model(const std::vector<QuantizedWeight>& weights, std::uint64_t step, bool flips) {
    for (const auto& w : weights) {
        std::span<const double> grad;
        if (flips && w.weight->has_grad()) grad = std::as_const(*w.weight).grad();
        record(w.name, *w.weight, grad, w.quantizer->scale_for(*w.weight), step);
    }
    history_.emplace_back(step, composition());
}

const BoundaryTracker& Recorder::tracker(const std::string& name) const { return entry(name).tracker; }
const FlipCounter& Recorder::flips(const std::string& name) const { return entry(name).flips; }

std::vector<std::string> Recorder::names() const {
    std::vector<std::string> out;
    for (const auto& [k, _] : entries_) out.push_back(k);
    return out;
}

Composition Recorder::composition() const {
    Composition c;
    for (const auto& [_, e] : entries_) {
        const Composition t = composition_report(e.tracker);
        c.still_inside += t.still_inside;
        c.total_inside += t.total_inside;
    }
    return c;
}

std::uint64_t Recorder::total_crossings() const {
    std::uint64_t n = 0;
    for (const auto& [_, e] : entries_) n += e.tracker.total_crossings();
    return n;
}

// ---- population and noise --------------------------------------------------------

Population br_population(const std::vector<QuantizedWeight>& weights, double x) {
    if (!(x > 0.0)) throw ConfigError("boundary range half-width must be positive");
    Population p;
    for (const auto& w : weights) {
        const Tensor d = w.quantizer->distances(*w.weight);
        for (double v : d.data()) p.inside += v <= x;
        p.total += d.size();
    }
    return p;
}

Tensor rescaled_unit(const Tensor& w, const Quantizer& q) {
    const QuantizedTensor qt = q.quantize(w);
    const double per = q.spec().kind == QuantKind::StatsQ ? 1.0 / q.spec().half_levels() : 1.0;
    Tensor out(w.shape());
    for (std::size_t i = 0; i < w.size(); ++i) out[i] = qt.scale[qt.group_of(i)] * per;
    return out;
}

NoiseResult inject_noise(const std::vector<QuantizedWeight>& weights, NoiseMode mode, double param, double amplitude,
                         std::uint64_t seed) {
    if (amplitude < 0.0) throw ConfigError("noise amplitude must be non-negative");
    if (mode == NoiseMode::RandomPositions && !(param > 0.0 && param <= 1.0)) {
        throw ConfigError("random-position fraction must be in (0, 1], got " + std::to_string(param));
    }
    if (mode == NoiseMode::WithinBR && !(param > 0.0)) throw ConfigError("boundary range half-width must be positive");

    // Select positions and units from the unperturbed model first.
    std::vector<std::pair<std::size_t, std::size_t>> chosen;  // (tensor, element)
    std::vector<Tensor> units;
    NoiseResult r;
    for (std::size_t t = 0; t < weights.size(); ++t) {
        const auto& w = weights[t];
        units.push_back(rescaled_unit(*w.weight, *w.quantizer));
        if (mode == NoiseMode::WithinBR) {
            const Tensor d = w.quantizer->distances(*w.weight);
            for (std::size_t i = 0; i < d.size(); ++i) {
                if (d[i] <= param) chosen.emplace_back(t, i);
            }
        }
        r.total += w.weight->size();
    }
    std::mt19937_64 rng(seed);
    if (mode == NoiseMode::RandomPositions) {
        const auto count = static_cast<std::size_t>(std::llround(param * static_cast<double>(r.total)));
        std::vector<std::pair<std::size_t, std::size_t>> all;
        all.reserve(r.total);
        for (std::size_t t = 0; t < weights.size(); ++t) {
            for (std::size_t i = 0; i < weights[t].weight->size(); ++i) all.emplace_back(t, i);
        }
        std::sample(all.begin(), all.end(), std::back_inserter(chosen), count, rng);
    }
    std::uniform_real_distribution<double> noise(-amplitude, amplitude);
    for (auto [t, i] : chosen) {
        const double delta = amplitude > 0.0 ? noise(rng) : 0.0;
        (*weights[t].weight)[i] += delta * units[t][i];
    }
    r.perturbed = chosen.size();
    return r;
}

// ---- reports -------------------------------------------------------------------

void write_report_csv(const std::filesystem::path& path, const std::vector<ReportRow>& rows) {
    CsvWriter csv(path, {"step", "tensor", "bucket", "value"});
    for (const auto& r : rows) {
        csv << static_cast<unsigned long long>(r.step) << r.tensor << r.bucket << r.value;
        csv.end_row();
    }
}

std::vector<ReportRow> weight_histogram(const std::string& name, const Tensor& w, const Quantizer& q,
                                        std::size_t bins, double lo, double hi) {
    if (bins == 0 || !(hi > lo)) throw ConfigError("histogram needs bins > 0 and hi > lo");
    const Tensor unit = rescaled_unit(w, q);
    const double shift = q.spec().kind == QuantKind::StatsQ ? 0.5 : 0.0;
    std::vector<double> counts(bins, 0.0);
    double under = 0, over = 0;
    const double width = (hi - lo) / static_cast<double>(bins);
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double r = w[i] / unit[i] - shift;
        if (r < lo) {
            ++under;
        } else if (r >= hi) {
            ++over;
        } else {
            counts[std::min(bins - 1, static_cast<std::size_t>((r - lo) / width))] += 1.0;
        }
    }
    std::vector<ReportRow> rows;
    char buf[48];
    rows.push_back({0, name, "below", under});
    for (std::size_t b = 0; b < bins; ++b) {
        std::snprintf(buf, sizeof buf, "%.6g", lo + (static_cast<double>(b) + 0.5) * width);
        rows.push_back({0, name, buf, counts[b]});
    }
    rows.push_back({0, name, "above", over});
    return rows;
}

}  // namespace ofq
