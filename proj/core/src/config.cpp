#include "ofq/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ofq/errors.hpp"

namespace ofq {

using nlohmann::json;

std::string_view to_string(ExperimentKind k) {
    switch (k) {
        case ExperimentKind::Toy: return "toy";
        case ExperimentKind::Train: return "train";
        case ExperimentKind::Anneal: return "anneal";
        case ExperimentKind::Diagnose: return "diagnose";
    }
    return "?";
}

ExperimentKind parse_experiment_kind(std::string_view text) {
    if (text == "toy") return ExperimentKind::Toy;
    if (text == "train") return ExperimentKind::Train;
    if (text == "anneal") return ExperimentKind::Anneal;
    if (text == "diagnose") return ExperimentKind::Diagnose;
    throw ConfigError("unknown experiment kind '" + std::string(text) + "' (expected toy, train, anneal or diagnose)");
}

void ToyConfig::validate() const {
    if (target.size() != 3 || init.size() != 3) {
        throw ConfigError("toy regression is exactly 3-D: target and init need 3 entries, got " +
                          std::to_string(target.size()) + " and " + std::to_string(init.size()));
    }
    if (quantizer == QuantKind::Identity) throw ConfigError("toy.quantizer must be lsq or statsq");
    if (bits < 2 || bits > 16) throw ConfigError("toy.bits must be in [2, 16]");
    if (!(alpha0 > 0.0)) throw ConfigError("toy.alpha0 must be positive");
    if (steps == 0 || batch == 0) throw ConfigError("toy.steps and toy.batch must be positive");
}

void ExperimentConfig::validate() const {
    model.validate();
    if (data.kind != "synthetic-shapes" && data.kind != "external") {
        throw ConfigError("data.kind must be synthetic-shapes or external, got '" + data.kind + "'");
    }
    if (data.kind == "external" && data.path.empty()) throw ConfigError("data.path is required for external data");
    if (!(data.val_fraction >= 0.0 && data.val_fraction < 1.0)) throw ConfigError("data.val_fraction must be in [0, 1)");
    if (optimizer.kind != "sgd") throw ConfigError("optimizer.kind must be sgd, got '" + optimizer.kind + "'");
    if (optimizer.schedule != "cosine" && optimizer.schedule != "constant") {
        throw ConfigError("optimizer.schedule must be cosine or constant");
    }
    if (!(optimizer.lr >= 0.0) || !(optimizer.momentum >= 0.0 && optimizer.momentum < 1.0)) {
        throw ConfigError("optimizer.lr must be >= 0 and optimizer.momentum in [0, 1)");
    }
    if (optimizer.batch_size == 0) throw ConfigError("optimizer.batch_size must be positive");
    if (!(diagnostics.x > 0.0)) throw ConfigError("diagnostics.x must be positive");
    const auto& edges = diagnostics.flip_edges;
    if (edges.empty() || !std::is_sorted(edges.begin(), edges.end()) ||
        std::adjacent_find(edges.begin(), edges.end()) != edges.end() || !(edges.front() > 0.0)) {
        throw ConfigError("diagnostics.flip_edges must be positive and strictly increasing");
    }
    if (diagnostics.noise_amplitude && !(*diagnostics.noise_amplitude > 0.0)) {
        throw ConfigError("diagnostics.noise_amplitude must be positive");
    }
    anneal.cga.validate();
    if (kind == ExperimentKind::Toy) toy.validate();
    if ((kind == ExperimentKind::Anneal || kind == ExperimentKind::Diagnose) && checkpoint.empty()) {
        throw ConfigError(std::string(to_string(kind)) + " needs a checkpoint path");
    }
}

namespace {

/// Reads keys from one JSON object and rejects any that were never asked for.
class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError("'" + path_ + "' must be a JSON object");
    }

    template <class T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception&) {
            throw ConfigError("'" + where(key) + "' has the wrong type");
        }
    }

    const json* sub(const char* key) {
        seen_.insert(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }

    std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    void finish() const {
        for (const auto& [key, _] : j_.items()) {
            if (!seen_.contains(key)) throw ConfigError("unknown config key '" + where(key) + "'");
        }
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

}  // namespace

ExperimentConfig parse_config(const std::string& text) {
    json root;
    try {
        root = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    Section top(root, "");
    int version = 0;
    top.get("version", version);
    if (version != ExperimentConfig::kVersion) {
        throw ConfigError("config version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(ExperimentConfig::kVersion) + ")");
    }
    ExperimentConfig c;
    std::string kind = std::string(to_string(c.kind));
    top.get("kind", kind);
    c.kind = parse_experiment_kind(kind);
    top.get("seed", c.seed);
    top.get("output_dir", c.output_dir);
    top.get("checkpoint", c.checkpoint);

    if (const json* m = top.sub("model")) c.model = model_config_from_json(m->dump());

    if (const json* d = top.sub("data")) {
        Section s(*d, "data");
        s.get("kind", c.data.kind);
        s.get("size", c.data.size);
        s.get("path", c.data.path);
        s.get("val_fraction", c.data.val_fraction);
        s.get("noise", c.data.noise);
        s.finish();
    }
    if (const json* o = top.sub("optimizer")) {
        Section s(*o, "optimizer");
        s.get("kind", c.optimizer.kind);
        s.get("lr", c.optimizer.lr);
        s.get("momentum", c.optimizer.momentum);
        s.get("schedule", c.optimizer.schedule);
        s.get("min_lr", c.optimizer.min_lr);
        s.get("epochs", c.optimizer.epochs);
        s.get("batch_size", c.optimizer.batch_size);
        s.get("calibration_images", c.optimizer.calibration_images);
        s.finish();
    }
    if (const json* d = top.sub("diagnostics")) {
        Section s(*d, "diagnostics");
        auto& g = c.diagnostics;
        s.get("x", g.x);
        s.get("record_steps", g.record_steps);
        s.get("flip_window", g.flip_window);
        s.get("flip_edges", g.flip_edges);
        s.get("probe_steps", g.probe_steps);
        s.get("probe_lr", g.probe_lr);
        if (const json* a = s.sub("noise_amplitude"); a && !a->is_null()) {
            if (!a->is_number()) throw ConfigError("'diagnostics.noise_amplitude' has the wrong type");
            g.noise_amplitude = a->get<double>();
        }
        s.get("noise_seeds", g.noise_seeds);
        s.get("noise_recovery_epochs", g.noise_recovery_epochs);
        s.get("histogram_bins", g.histogram_bins);
        s.finish();
    }
    if (const json* a = top.sub("anneal")) {
        Section s(*a, "anneal");
        auto& g = c.anneal.cga;
        s.get("x", g.x);
        s.get("steps", g.steps);
        s.get("lr", g.lr);
        s.get("window", g.window);
        std::string sem = std::string(to_string(g.semantics));
        s.get("semantics", sem);
        g.semantics = parse_freeze_semantics(sem);
        s.get("iterative_momentum", g.iterative_momentum);
        s.get("iterative_threshold", g.iterative_threshold);
        s.get("log_every", c.anneal.log_every);
        s.get("settle", c.anneal.settle);
        s.finish();
    }
    if (const json* t = top.sub("toy")) {
        Section s(*t, "toy");
        auto& g = c.toy;
        std::string q = std::string(to_string(g.quantizer));
        s.get("quantizer", q);
        g.quantizer = parse_quant_kind(q);
        s.get("bits", g.bits);
        s.get("target", g.target);
        s.get("init", g.init);
        s.get("alpha0", g.alpha0);
        s.get("lr", g.lr);
        s.get("steps", g.steps);
        s.get("batch", g.batch);
        s.finish();
    }
    top.finish();
    c.validate();
    return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    try {
        return parse_config(ss.str());
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

std::string config_to_json(const ExperimentConfig& c) {
    json j;
    j["version"] = ExperimentConfig::kVersion;
    j["kind"] = std::string(to_string(c.kind));
    j["seed"] = c.seed;
    j["output_dir"] = c.output_dir;
    j["checkpoint"] = c.checkpoint;
    j["model"] = json::parse(model_config_to_json(c.model));
    j["data"] = {{"kind", c.data.kind},
                 {"size", c.data.size},
                 {"path", c.data.path},
                 {"val_fraction", c.data.val_fraction},
                 {"noise", c.data.noise}};
    j["optimizer"] = {{"kind", c.optimizer.kind},
                      {"lr", c.optimizer.lr},
                      {"momentum", c.optimizer.momentum},
                      {"schedule", c.optimizer.schedule},
                      {"min_lr", c.optimizer.min_lr},
                      {"epochs", c.optimizer.epochs},
                      {"batch_size", c.optimizer.batch_size},
                      {"calibration_images", c.optimizer.calibration_images}};
    const auto& d = c.diagnostics;
    j["diagnostics"] = {{"x", d.x},
                        {"record_steps", d.record_steps},
                        {"flip_window", d.flip_window},
                        {"flip_edges", d.flip_edges},
                        {"probe_steps", d.probe_steps},
                        {"probe_lr", d.probe_lr},
                        {"noise_amplitude", d.noise_amplitude ? json(*d.noise_amplitude) : json(nullptr)},
                        {"noise_seeds", d.noise_seeds},
                        {"noise_recovery_epochs", d.noise_recovery_epochs},
                        {"histogram_bins", d.histogram_bins}};
    const auto& a = c.anneal.cga;
    j["anneal"] = {{"x", a.x},
                   {"steps", a.steps},
                   {"lr", a.lr},
                   {"window", a.window},
                   {"semantics", std::string(to_string(a.semantics))},
                   {"iterative_momentum", a.iterative_momentum},
                   {"iterative_threshold", a.iterative_threshold},
                   {"log_every", c.anneal.log_every},
                   {"settle", c.anneal.settle}};
    const auto& t = c.toy;
    j["toy"] = {{"quantizer", std::string(to_string(t.quantizer))},
                {"bits", t.bits},
                {"target", t.target},
                {"init", t.init},
                {"alpha0", t.alpha0},
                {"lr", t.lr},
                {"steps", t.steps},
                {"batch", t.batch}};
    return j.dump(2);
}

}  // namespace ofq
