#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ofq/config.hpp"
#include "ofq/data.hpp"
#include "ofq/errors.hpp"
#include "ofq/experiments.hpp"

using namespace ofq;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / "ofq_experiments_test" / name;
    fs::remove_all(p);
    fs::create_directories(p.parent_path());
    return p;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string first_line(const fs::path& p) {
    std::ifstream in(p);
    std::string line;
    std::getline(in, line);
    return line;
}

std::size_t line_count(const fs::path& p) {
    std::ifstream in(p);
    std::size_t n = 0;
    for (std::string line; std::getline(in, line);) ++n;
    return n;
}

ModelConfig tiny_model(QuantKind w = QuantKind::StatsQ) {
    ModelConfig m;
    m.layers = 1;
    m.embed_dim = 8;
    m.heads = 2;
    m.mlp_hidden = 16;
    m.image = 8;
    m.patch = 4;
    m.classes = 3;
    m.quant.weight_kind = w;
    return m;
}

ExperimentConfig tiny_experiment(ExperimentKind kind, const fs::path& out) {
    ExperimentConfig c;
    c.kind = kind;
    c.output_dir = out.string();
    c.model = tiny_model();
    c.data.size = 48;
    c.optimizer.epochs = 2;
    c.optimizer.batch_size = 16;
    c.optimizer.calibration_images = 16;
    c.diagnostics.record_steps = 4;
    c.diagnostics.flip_window = 4;
    c.diagnostics.probe_steps = 3;
    c.diagnostics.noise_seeds = 2;
    c.anneal.cga.steps = 5;
    c.anneal.cga.window = 2;
    return c;
}

}  // namespace

// ---- config ----------------------------------------------------------------------

TEST(Config, DefaultsRoundTrip) {
    ExperimentConfig c;
    c.checkpoint = "model.ofq";
    c.diagnostics.noise_amplitude = 0.02;
    c.diagnostics.flip_edges = {0.002, 0.004};
    const ExperimentConfig back = parse_config(config_to_json(c));
    EXPECT_EQ(back.model, c.model);
    EXPECT_EQ(back.data, c.data);
    EXPECT_EQ(back.optimizer, c.optimizer);
    EXPECT_EQ(back.diagnostics, c.diagnostics);
    EXPECT_EQ(back.anneal.cga.x, c.anneal.cga.x);
    EXPECT_EQ(back.anneal.cga.semantics, c.anneal.cga.semantics);
    EXPECT_EQ(back.toy.target, c.toy.target);
    EXPECT_EQ(back.checkpoint, "model.ofq");
}

TEST(Config, UnknownKeysAreNamed) {
    try {
        parse_config(R"({"version": 1, "optimizer": {"lr": 0.1, "lr_decay": 2}})");
        FAIL() << "unknown key accepted";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("optimizer.lr_decay"), std::string::npos) << e.what();
    }
    EXPECT_THROW(parse_config(R"({"version": 1, "extra": 0})"), ConfigError);
    EXPECT_THROW(parse_config(R"({"version": 1, "model": {"quant": {"bitz": 2}}})"), ConfigError);
}

TEST(Config, VersionTypesAndValues) {
    EXPECT_THROW(parse_config(R"({"kind": "train"})"), ConfigError);
    EXPECT_THROW(parse_config(R"({"version": 2})"), ConfigError);
    EXPECT_THROW(parse_config("{not json"), ConfigError);
    EXPECT_THROW(parse_config(R"({"version": 1, "seed": "zero"})"), ConfigError);
    EXPECT_THROW(parse_config(R"({"version": 1, "kind": "fit"})"), ConfigError);
    EXPECT_THROW(parse_config(R"({"version": 1, "diagnostics": {"flip_edges": [0.002, 0.001]}})"), ConfigError);
    EXPECT_THROW(parse_config(R"({"version": 1, "kind": "anneal"})"), ConfigError);
    EXPECT_THROW(parse_config(R"({"version": 1, "optimizer": {"momentum": 1.0}})"), ConfigError);
    const ExperimentConfig c = parse_config(R"({"version": 1, "kind": "toy", "toy": {"quantizer": "statsq"}})");
    EXPECT_EQ(c.kind, ExperimentKind::Toy);
    EXPECT_EQ(c.toy.quantizer, QuantKind::StatsQ);
}

TEST(Config, LoadNamesTheFile) {
    const fs::path p = scratch("bad.json");
    std::ofstream(p) << R"({"version": 1, "nope": 1})";
    try {
        load_config(p);
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find(p.string()), std::string::npos);
    }
    EXPECT_THROW(load_config(scratch("missing.json")), IoError);
}

// ---- data ----------------------------------------------------------------------

TEST(Data, SyntheticShapesAreSeededAndLabelled) {
    const Dataset a = synthetic_shapes(40, 3, 8, 1, 5, 0.1), b = synthetic_shapes(40, 3, 8, 1, 5, 0.1);
    const Dataset c = synthetic_shapes(40, 4, 8, 1, 5, 0.1);
    ASSERT_EQ(a.size(), 40u);
    EXPECT_EQ(a.classes, 5u);
    bool differs = false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_TRUE(a.images[i].same_values(b.images[i]));
        EXPECT_EQ(a.labels[i], b.labels[i]);
        EXPECT_LT(a.labels[i], 5u);
        EXPECT_EQ(a.images[i].shape(), (Shape{1, 8, 8}));
        differs |= !a.images[i].same_values(c.images[i]);
    }
    EXPECT_TRUE(differs);
}

TEST(Data, ExternalRoundTripAndCorruption) {
    Dataset d;
    d.classes = 3;
    for (std::size_t i = 0; i < 5; ++i) {
        Tensor img(Shape{2, 4, 4});
        for (std::size_t k = 0; k < img.size(); ++k) img[k] = static_cast<double>(k % 7) * 0.25 - 0.5;
        d.images.push_back(img);
        d.labels.push_back(i % 3);
    }
    const fs::path p = scratch("data.bin");
    write_external(p, d);
    const Dataset back = read_external(p);
    ASSERT_EQ(back.size(), 5u);
    EXPECT_EQ(back.classes, 3u);
    for (std::size_t i = 0; i < 5; ++i) {
        EXPECT_TRUE(back.images[i].same_values(d.images[i]));
        EXPECT_EQ(back.labels[i], d.labels[i]);
    }
    std::string bytes = read_file(p);
    std::ofstream(p, std::ios::binary | std::ios::trunc) << bytes.substr(0, bytes.size() - 3);
    EXPECT_THROW(read_external(p), IoError);
    bytes[0] = 'X';
    std::ofstream(p, std::ios::binary | std::ios::trunc) << bytes;
    EXPECT_THROW(read_external(p), IoError);
}

TEST(Data, SplitSizesAndShapeChecks) {
    const Dataset d = synthetic_shapes(10, 1, 8, 1, 3, 0.1);
    const DataSplit s = split_dataset(d, 0.2, 7);
    EXPECT_EQ(s.train.size(), 8u);
    EXPECT_EQ(s.val.size(), 2u);
    DataConfig cfg;
    cfg.size = 20;
    const DataSplit m = make_dataset(cfg, tiny_model(), 1);
    EXPECT_EQ(m.train.size() + m.val.size(), 20u);
    EXPECT_EQ(m.train.images[0].shape(), (Shape{1, 8, 8}));

    Dataset wrong = synthetic_shapes(4, 1, 16, 1, 3, 0.1);
    const fs::path p = scratch("wrong.bin");
    write_external(p, wrong);
    cfg.kind = "external";
    cfg.path = p.string();
    EXPECT_THROW(make_dataset(cfg, tiny_model(), 1), ConfigError);
}

// ---- optimizer -----------------------------------------------------------------

TEST(Sgd, HeavyBallMomentumAndMasks) {
    Tensor w(Shape{2}, std::vector<double>{1.0, 1.0});
    Tensor s(Shape{1}, 1e-7);
    Sgd opt({{"w", &w}, {"q.scale", &s}}, 0.5);
    auto g = w.ensure_grad();
    g[0] = 1.0;
    g[1] = 2.0;
    s.ensure_grad()[0] = 1.0;
    opt.step(0.1);  // v = g
    EXPECT_DOUBLE_EQ(w[0], 0.9);
    EXPECT_DOUBLE_EQ(w[1], 0.8);
    EXPECT_EQ(s[0], kScaleFloor);
    opt.step(0.1);  // v = 0.5·g + g
    EXPECT_DOUBLE_EQ(w[0], 0.9 - 0.15);
    const std::vector<std::uint8_t> frozen{1, 0};
    opt.set_mask(&w, &frozen);
    opt.step(0.1);
    EXPECT_DOUBLE_EQ(w[0], 0.75);
    opt.set_trainable(&w, false);
    const double before = w[1];
    opt.step(0.1);
    EXPECT_EQ(w[1], before);
    Tensor other(Shape{1});
    EXPECT_THROW(opt.set_trainable(&other, false), ContractError);
    const std::vector<std::uint8_t> short_mask{1};
    EXPECT_THROW(opt.set_mask(&w, &short_mask), DimensionError);
    g[1] = NAN;
    try {
        opt.check_gradients(12);
        FAIL();
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("'w'"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("12"), std::string::npos);
    }
}

TEST(Sgd, CosineSchedule) {
    EXPECT_DOUBLE_EQ(cosine_lr(1.0, 0.0, 0, 100), 1.0);
    EXPECT_NEAR(cosine_lr(1.0, 0.0, 50, 100), 0.5, 1e-15);
    EXPECT_NEAR(cosine_lr(1.0, 0.1, 100, 100), 0.1, 1e-15);
    EXPECT_NEAR(cosine_lr(1.0, 0.1, 500, 100), 0.1, 1e-15);
}

// ---- toy ---------------------------------------------------------------------------

TEST(Toy, DeterministicAndLogged) {
    ToyConfig c;
    c.steps = 200;
    const ToyResult a = run_toy_regression(c, 5), b = run_toy_regression(c, 5);
    EXPECT_EQ(a.crossings, b.crossings);
    EXPECT_EQ(a.final_loss, b.final_loss);
    EXPECT_EQ(a.total_crossings, a.crossings[0] + a.crossings[1] + a.crossings[2]);
    const fs::path p = scratch("toy.csv");
    {
        CsvWriter log(p, {"step", "w0", "w1", "w2", "wq0", "wq1", "wq2", "scale", "loss", "c0", "c1", "c2"});
        run_toy_regression(c, 5, &log);
    }
    EXPECT_EQ(line_count(p), 201u);
    c.quantizer = QuantKind::StatsQ;
    const ToyResult s = run_toy_regression(c, 5);
    EXPECT_TRUE(std::isfinite(s.final_loss));
    c.init = {1.0};
    EXPECT_THROW(run_toy_regression(c, 5), ConfigError);
}

// ---- training, annealing and noise on a tiny model --------------------------------

TEST(Training, DeterministicForASeed) {
    OptimizerConfig opt;
    opt.epochs = 2;
    opt.batch_size = 16;
    opt.calibration_images = 16;
    DataConfig dc;
    dc.size = 48;
    const DataSplit data = make_dataset(dc, tiny_model(), 2);
    QViT a(tiny_model(), 2), b(tiny_model(), 2);
    const TrainResult ra = train_model(a, data, opt, 0.005, 2);
    const TrainResult rb = train_model(b, data, opt, 0.005, 2);
    EXPECT_EQ(ra.steps, 6u);
    ASSERT_EQ(ra.history.size(), 2u);
    EXPECT_EQ(ra.final_val.loss, rb.final_val.loss);
    EXPECT_TRUE(a.head().weight.same_values(b.head().weight));
}

TEST(Training, DivergenceNamesStepAndTensor) {
    OptimizerConfig opt;
    opt.epochs = 1;
    opt.batch_size = 8;
    opt.lr = 1e300;
    opt.schedule = "constant";
    DataConfig dc;
    dc.size = 16;
    const DataSplit data = make_dataset(dc, tiny_model(), 3);
    QViT m(tiny_model(), 3);
    try {
        train_model(m, data, opt, 0.005, 3);
        FAIL() << "divergence not detected";
    } catch (const NumericError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("step"), std::string::npos) << msg;
        EXPECT_NE(msg.find("'"), std::string::npos) << msg;
    }
}

TEST(Annealing, FrozenFractionNeverDecreases) {
    OptimizerConfig opt;
    opt.epochs = 2;
    opt.batch_size = 16;
    DataConfig dc;
    dc.size = 48;
    const DataSplit data = make_dataset(dc, tiny_model(), 4);
    QViT m(tiny_model(), 4);
    train_model(m, data, opt, 0.005, 4);
    AnnealSection cfg;
    cfg.cga.steps = 20;
    cfg.cga.window = 3;
    const AnnealResult r = anneal_model(m, data, cfg, 16, 0.9, 4);
    EXPECT_TRUE(r.monotone);
    ASSERT_FALSE(r.rows.empty());
    for (std::size_t i = 1; i < r.rows.size(); ++i) EXPECT_GE(r.rows[i].frozen_fraction, r.rows[i - 1].frozen_fraction);
    EXPECT_EQ(r.rows.front().block_scale.size(), 1u);
    if (r.converged) EXPECT_LE(r.steps_to_frozen, r.steps);
}

TEST(Noise, ComparisonRestoresTheModel) {
    DataConfig dc;
    dc.size = 24;
    const DataSplit data = make_dataset(dc, tiny_model(QuantKind::Lsq), 5);
    QViT m(tiny_model(QuantKind::Lsq), 5);
    const auto snap = snapshot(m);
    OptimizerConfig recovery;
    recovery.epochs = 1;
    recovery.batch_size = 8;
    const NoiseComparison nc = noise_comparison(m, data, 0.05, 0.1, 3, 11, recovery);
    EXPECT_EQ(nc.within_loss.size(), 3u);
    EXPECT_EQ(nc.random_loss.size(), 3u);
    EXPECT_GT(nc.total, 0u);
    const auto after = snapshot(m);
    ASSERT_EQ(after.size(), snap.size());
    for (std::size_t i = 0; i < snap.size(); ++i) EXPECT_TRUE(after[i].same_values(snap[i]));
}

TEST(Noise, ZeroRecoveryEpochsMeasuresImmediately) {
    DataConfig dc;
    dc.size = 24;
    const DataSplit data = make_dataset(dc, tiny_model(QuantKind::Lsq), 5);
    QViT m(tiny_model(QuantKind::Lsq), 5);
    OptimizerConfig none;
    none.epochs = 0;
    const NoiseComparison nc = noise_comparison(m, data, 0.05, 0.1, 2, 11, none);
    EXPECT_EQ(nc.control_loss, nc.base_loss);
}

// ---- end to end through run_experiment ---------------------------------------------

TEST(RunExperiment, TrainAnnealDiagnoseWriteTheirFiles) {
    const fs::path root = scratch("e2e");
    ExperimentConfig t = tiny_experiment(ExperimentKind::Train, root / "train");
    run_experiment(t);
    EXPECT_EQ(first_line(root / "train" / "metrics.csv"),
              "step,epoch,phase,lr,loss,accuracy,val_loss,val_accuracy,frozen_fraction,br_fraction");
    EXPECT_EQ(first_line(root / "train" / "flips.csv"), "step,tensor,bucket,value");
    EXPECT_TRUE(fs::exists(root / "train" / "checkpoint.ofq"));
    EXPECT_NO_THROW(parse_config(read_file(root / "train" / "config.json")));

    ExperimentConfig a = tiny_experiment(ExperimentKind::Anneal, root / "anneal");
    a.checkpoint = (root / "train" / "checkpoint.ofq").string();
    run_experiment(a);
    EXPECT_EQ(first_line(root / "anneal" / "anneal.csv"), "step,frozen_fraction,alpha_block0,loss");

    ExperimentConfig d = tiny_experiment(ExperimentKind::Diagnose, root / "diag");
    d.checkpoint = a.checkpoint;
    run_experiment(d);
    for (const char* f : {"histogram.csv", "noise.csv", "flips.csv", "composition.csv"}) {
        EXPECT_EQ(first_line(root / "diag" / f), "step,tensor,bucket,value") << f;
    }

    // A checkpoint from a different bit configuration is refused.
    ExperimentConfig mismatch = d;
    mismatch.model.quant.weight_bits = 3;
    EXPECT_THROW(run_experiment(mismatch), ConfigError);
}

#ifdef OFQ_CLI_PATH
namespace {

struct CliResult {
    int code;
    std::string out, err;
};

CliResult run_cli(const std::string& args) {
    const fs::path dir = fs::temp_directory_path() / "ofq_experiments_test";
    fs::create_directories(dir);
    const std::string cmd = std::string(OFQ_CLI_PATH) + " " + args + " >" + (dir / "cli.out").string() + " 2>" +
                            (dir / "cli.err").string();
    const int status = std::system(cmd.c_str());
    return {WEXITSTATUS(status), read_file(dir / "cli.out"), read_file(dir / "cli.err")};
}

}  // namespace

TEST(Cli, ToyRunSucceeds) {
    const fs::path dir = scratch("cli_toy");
    fs::create_directories(dir);
    ExperimentConfig c;
    c.kind = ExperimentKind::Toy;
    c.toy.steps = 50;
    const fs::path cfg = dir / "toy.json";
    std::ofstream(cfg) << config_to_json(c);
    const CliResult r = run_cli("toy --config " + cfg.string() + " --seed 3 --out " + (dir / "out").string());
    EXPECT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(fs::exists(dir / "out" / "toy.csv"));
    const auto saved = parse_config(read_file(dir / "out" / "config.json"));
    EXPECT_EQ(saved.seed, 3u);
    EXPECT_EQ(saved.kind, ExperimentKind::Toy);
}

TEST(Cli, FailuresExitNonzeroWithOneLine) {
    const fs::path dir = scratch("cli_bad");
    fs::create_directories(dir);
    const fs::path cfg = dir / "bad.json";
    std::ofstream(cfg) << R"({"version": 1, "optimizer": {"warmup": 3}})";
    CliResult r = run_cli("train --config " + cfg.string());
    EXPECT_NE(r.code, 0);
    EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1) << r.err;
    EXPECT_NE(r.err.find("optimizer.warmup"), std::string::npos) << r.err;

    r = run_cli("anneal --config " + (dir / "missing.json").string());
    EXPECT_NE(r.code, 0);
    EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1) << r.err;

    std::ofstream(cfg, std::ios::trunc) << R"({"version": 1, "checkpoint": ")" + (dir / "none.ofq").string() + R"("})";
    r = run_cli("diagnose --config " + cfg.string());
    EXPECT_NE(r.code, 0);
    EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1) << r.err;

    r = run_cli("bogus");
    EXPECT_NE(r.code, 0);
}
#endif
