#include "ofq/qvit.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <regex>

#include <nlohmann/json.hpp>

#include "ofq/errors.hpp"

namespace ofq {

std::string_view to_string(AttentionMode mode) { return mode == AttentionMode::Naive ? "naive" : "qkr"; }

AttentionMode parse_attention_mode(std::string_view text) {
    if (text == "naive") return AttentionMode::Naive;
    if (text == "qkr") return AttentionMode::Qkr;
    throw ConfigError("unknown attention mode '" + std::string(text) + "' (expected naive or qkr)");
}

void ModelConfig::validate() const {
    if (layers == 0) throw ConfigError("model.layers must be positive");
    if (embed_dim == 0 || heads == 0 || embed_dim % heads != 0) {
        throw ConfigError("model.embed_dim must be a positive multiple of model.heads");
    }
    if (patch == 0 || image == 0 || image % patch != 0) throw ConfigError("model.image must be a multiple of model.patch");
    if (channels == 0 || classes == 0 || mlp_hidden == 0) throw ConfigError("model dimensions must be positive");
    if (!(ln_eps > 0.0)) throw ConfigError("model.ln_eps must be positive");
    for (int b : {quant.weight_bits, quant.act_bits, quant.first_last_bits}) {
        if (b < 2 || b > 16) throw ConfigError("bit-widths must be in [2, 16], got " + std::to_string(b));
    }
}

Quantizer make_weight_quantizer(QuantKind kind, int bits, std::size_t rows) {
    switch (kind) {
        case QuantKind::Identity: return Quantizer();
        case QuantKind::Lsq: return Quantizer(QuantSpec::lsq(bits, Granularity::LastDim), rows);
        case QuantKind::StatsQ: return Quantizer(QuantSpec::statsq(bits, Granularity::LastDim), 0);
    }
    return Quantizer();
}

Quantizer make_act_quantizer(QuantKind kind, int bits, Granularity g, std::size_t groups, bool is_signed) {
    switch (kind) {
        case QuantKind::Identity: return Quantizer();
        case QuantKind::Lsq: return Quantizer(QuantSpec::lsq(bits, g, is_signed), groups);
        case QuantKind::StatsQ: return Quantizer(QuantSpec::statsq(bits, g), 0);
    }
    return Quantizer();
}

namespace {

Tensor xavier(std::size_t out, std::size_t in, std::mt19937_64& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    Tensor w(Shape{out, in});
    for (double& v : w.data()) v = dist(rng);
    w.set_requires_grad(true);
    return w;
}

Tensor filled(Shape shape, double value) {
    Tensor t(std::move(shape), value);
    t.set_requires_grad(true);
    return t;
}

Tensor normal(Shape shape, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = dist(rng);
    t.set_requires_grad(true);
    return t;
}

void add_quantizer_scale(std::vector<NamedTensor>& out, const std::string& name, Quantizer& q) {
    if (q.learnable()) out.push_back({name + ".scale", &q.state().scale});
}

void add_act(std::vector<Quantizer*>& out, Quantizer& q) {
    if (!q.is_identity()) out.push_back(&q);
}

}  // namespace

// ---- QLinear -----------------------------------------------------------------

QLinear::QLinear(std::string name, std::size_t in, std::size_t out, std::size_t rows, Quantizer weight_quant_,
                 Quantizer act_quant_, bool bias_, std::mt19937_64& rng)
    : weight(xavier(out, in, rng)),
      weight_quant(std::move(weight_quant_)),
      act_quant(std::move(act_quant_)),
      name_(std::move(name)),
      has_bias_(bias_) {
    (void)rows;
    if (has_bias_) bias = filled(Shape{out}, 0.0);
    weight_quant.init_from(weight);
}

Var qlinear_forward(Graph& g, Var x, Var w, Quantizer& act_quant, Quantizer& weight_quant) {
    QVar xq = act_quant.apply(g, x);
    QVar wq = weight_quant.apply(g, w);
    return qmatmul_nt(xq, wq);
}

Var QLinear::forward(Graph& g, Var x) {
    Var y = qlinear_forward(g, x, g.parameter(weight, name_ + ".weight"), act_quant, weight_quant);
    if (has_bias_) y = add_rowvec(y, g.parameter(bias, name_ + ".bias"));
    return y;
}

void QLinear::collect(std::vector<NamedTensor>& out) {
    out.push_back({name_ + ".weight", &weight});
    if (has_bias_) out.push_back({name_ + ".bias", &bias});
    add_quantizer_scale(out, name_ + ".weight_quant", weight_quant);
    add_quantizer_scale(out, name_ + ".act_quant", act_quant);
}

void QLinear::collect_weights(std::vector<QuantizedWeight>& out) {
    if (!weight_quant.is_identity()) out.push_back({name_ + ".weight", &weight, &weight_quant});
}

void QLinear::collect_act_quantizers(std::vector<Quantizer*>& out) { add_act(out, act_quant); }

// ---- Attention -----------------------------------------------------------------

Attention::Attention(std::string name, const AttentionConfig& cfg, std::mt19937_64& rng)
    : name_(std::move(name)), cfg_(cfg) {
    const std::size_t D = cfg.embed_dim, N = cfg.tokens, H = cfg.heads;
    if (H == 0 || D % H != 0) throw ConfigError("attention: embed_dim must be a multiple of heads");
    wq = xavier(D, D, rng);
    wk = xavier(D, D, rng);
    auto act = [&](Granularity g, std::size_t groups, bool is_signed = true) {
        return make_act_quantizer(cfg.act_kind, cfg.act_bits, g, groups, is_signed);
    };
    if (cfg.mode == AttentionMode::Naive) {
        wq_quant = make_weight_quantizer(cfg.weight_kind, cfg.weight_bits, D);
        wk_quant = make_weight_quantizer(cfg.weight_kind, cfg.weight_bits, D);
        wq_quant.init_from(wq);
        wk_quant.init_from(wk);
        q_in = act(Granularity::LastDim, N);
        k_in = act(Granularity::LastDim, N);
        q_out = act(Granularity::LastDim, N);
        k_out = act(Granularity::LastDim, N);
    } else {
        x_left = act(Granularity::LastDim, N);
        x_right = act(Granularity::LastDim, N);
        for (std::size_t h = 0; h < H; ++h) {
            merged_quant.push_back(cfg.weight_kind == QuantKind::Identity
                                       ? Quantizer()
                                       : Quantizer(QuantSpec::statsq(cfg.weight_bits, Granularity::LastDim), 0));
            z_quant.push_back(act(Granularity::LastDim, N));
        }
    }
    v = QLinear(name_ + ".v", D, D, N, make_weight_quantizer(cfg.weight_kind, cfg.weight_bits, D),
                act(Granularity::LastDim, N), true, rng);
    v_seq = act(Granularity::SeqDim, D);
    for (std::size_t h = 0; h < H; ++h) attn_quant.push_back(act(Granularity::LastDim, N, false));
    proj = QLinear(name_ + ".proj", D, D, N, make_weight_quantizer(cfg.weight_kind, cfg.weight_bits, D),
                   act(Granularity::LastDim, N), true, rng);
}

Var Attention::scores_naive(Graph& g, Var x, std::vector<Var>& per_head) {
    const std::size_t d = cfg_.head_dim();
    Var xq = qlinear_forward(g, x, g.parameter(wq, name_ + ".wq"), q_in, wq_quant);
    Var xk = qlinear_forward(g, x, g.parameter(wk, name_ + ".wk"), k_in, wk_quant);
    QVar qq = q_out.apply(g, xq);
    QVar kq = k_out.apply(g, xk);
    const double inv = 1.0 / std::sqrt(static_cast<double>(d));
    for (std::size_t h = 0; h < cfg_.heads; ++h) {
        Var s = qmatmul_nt(qslice_cols(qq, h * d, d), qslice_cols(kq, h * d, d));
        per_head.push_back(scale(s, inv));
    }
    return x;
}

Var Attention::scores_qkr(Graph& g, Var x, std::vector<Var>& per_head) {
    const std::size_t d = cfg_.head_dim();
    QVar xl = x_left.apply(g, x);
    QVar xr = x_right.apply(g, x);
    Var WQ = g.parameter(wq, name_ + ".wq");
    Var WK = g.parameter(wk, name_ + ".wk");
    const double inv = 1.0 / std::sqrt(static_cast<double>(d));
    for (std::size_t h = 0; h < cfg_.heads; ++h) {
        // Merged W_Qᵀ·W_K per head, formed in full precision every pass.
        Var merged = matmul(transpose(slice_rows(WQ, h * d, d)), slice_rows(WK, h * d, d));
        QVar mq = merged_quant[h].apply(g, merged);
        QVar z = z_quant[h].apply(g, qmatmul_nt(xr, mq));  // X·Mᵀ, i.e. (M·Xᵀ)ᵀ
        per_head.push_back(scale(qmatmul_nt(xl, z), inv));
    }
    return x;
}

Var Attention::forward(Graph& g, Var x, const std::string& prefix) {
    if (x.value().rank() != 2 || x.value().cols() != cfg_.embed_dim) {
        throw DimensionError("attention expects [N×" + std::to_string(cfg_.embed_dim) + "], got " +
                             shape_to_string(x.value().shape()));
    }
    if (!prefix.empty()) g.mark(prefix + ".in", x);
    std::vector<Var> scores;
    if (cfg_.mode == AttentionMode::Naive) {
        scores_naive(g, x, scores);
    } else {
        scores_qkr(g, x, scores);
    }
    const std::size_t d = cfg_.head_dim();
    QVar vq = v_seq.apply(g, v.forward(g, x));
    std::vector<Var> heads;
    for (std::size_t h = 0; h < cfg_.heads; ++h) {
        if (!prefix.empty()) g.mark(prefix + ".head" + std::to_string(h) + ".qk", scores[h]);
        QVar a = attn_quant[h].apply(g, softmax_lastdim(scores[h]));
        heads.push_back(qmatmul_nn(a, qslice_cols(vq, h * d, d)));
    }
    Var out = proj.forward(g, heads.size() == 1 ? heads.front() : concat_cols(heads));
    if (!prefix.empty()) g.mark(prefix + ".out", out);
    return out;
}

void Attention::collect(std::vector<NamedTensor>& out) {
    out.push_back({name_ + ".wq", &wq});
    out.push_back({name_ + ".wk", &wk});
    add_quantizer_scale(out, name_ + ".wq_quant", wq_quant);
    add_quantizer_scale(out, name_ + ".wk_quant", wk_quant);
    add_quantizer_scale(out, name_ + ".q_in", q_in);
    add_quantizer_scale(out, name_ + ".k_in", k_in);
    add_quantizer_scale(out, name_ + ".q_out", q_out);
    add_quantizer_scale(out, name_ + ".k_out", k_out);
    add_quantizer_scale(out, name_ + ".x_left", x_left);
    add_quantizer_scale(out, name_ + ".x_right", x_right);
    for (std::size_t h = 0; h < z_quant.size(); ++h) {
        add_quantizer_scale(out, name_ + ".z_quant" + std::to_string(h), z_quant[h]);
    }
    v.collect(out);
    add_quantizer_scale(out, name_ + ".v_seq", v_seq);
    for (std::size_t h = 0; h < attn_quant.size(); ++h) {
        add_quantizer_scale(out, name_ + ".attn_quant" + std::to_string(h), attn_quant[h]);
    }
    proj.collect(out);
}

void Attention::collect_weights(std::vector<QuantizedWeight>& out) {
    if (!wq_quant.is_identity()) out.push_back({name_ + ".wq", &wq, &wq_quant});
    if (!wk_quant.is_identity()) out.push_back({name_ + ".wk", &wk, &wk_quant});
    v.collect_weights(out);
    proj.collect_weights(out);
}

void Attention::collect_act_quantizers(std::vector<Quantizer*>& out) {
    for (Quantizer* q : {&q_in, &k_in, &q_out, &k_out, &x_left, &x_right, &v_seq}) add_act(out, *q);
    for (auto& q : z_quant) add_act(out, q);
    for (auto& q : attn_quant) add_act(out, q);
    v.collect_act_quantizers(out);
    proj.collect_act_quantizers(out);
}

// ---- FeedForward ---------------------------------------------------------------

FeedForward::FeedForward(std::string name, std::size_t dim, std::size_t hidden, std::size_t rows,
                         const QuantConfig& q, std::mt19937_64& rng)
    : fc1(name + ".fc1", dim, hidden, rows, make_weight_quantizer(q.weight_kind, q.weight_bits, hidden),
          make_act_quantizer(q.act_kind, q.act_bits, Granularity::LastDim, rows), true, rng),
      fc2(name + ".fc2", hidden, dim, rows, make_weight_quantizer(q.weight_kind, q.weight_bits, dim),
          make_act_quantizer(q.act_kind, q.act_bits, Granularity::LastDim, rows), true, rng) {}

Var FeedForward::forward(Graph& g, Var x) { return fc2.forward(g, gelu(fc1.forward(g, x))); }

// ---- QViT ----------------------------------------------------------------------

QViT::QViT(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    const auto& q = cfg_.quant;
    const std::size_t D = cfg_.embed_dim, N = cfg_.tokens();
    // The 8-bit first and last layers use LSQ whatever the body quantizer is.
    const QuantKind edge = q.weight_kind == QuantKind::Identity ? QuantKind::Identity : QuantKind::Lsq;

    patch_embed_ = QLinear("patch_embed", cfg_.patch_dim(), D, cfg_.patches(),
                           make_weight_quantizer(edge, q.first_last_bits, D),
                           make_act_quantizer(q.act_kind, q.first_last_bits, Granularity::LastDim, cfg_.patches()),
                           true, rng);
    cls_token_ = normal(Shape{1, D}, 0.02, rng);
    pos_embed_ = normal(Shape{N, D}, 0.02, rng);

    AttentionConfig acfg;
    acfg.embed_dim = D;
    acfg.heads = cfg_.heads;
    acfg.tokens = N;
    acfg.mode = cfg_.attention;
    acfg.weight_kind = q.weight_kind;
    acfg.act_kind = q.act_kind;
    acfg.weight_bits = q.weight_bits;
    acfg.act_bits = q.act_bits;
    for (std::size_t i = 0; i < cfg_.layers; ++i) {
        const std::string prefix = "blocks." + std::to_string(i);
        Block b;
        b.norm1_gamma = filled(Shape{D}, 1.0);
        b.norm1_beta = filled(Shape{D}, 0.0);
        b.attn = Attention(prefix + ".attn", acfg, rng);
        b.norm2_gamma = filled(Shape{D}, 1.0);
        b.norm2_beta = filled(Shape{D}, 0.0);
        b.ffn = FeedForward(prefix + ".ffn", D, cfg_.mlp_hidden, N, q, rng);
        blocks_.push_back(std::move(b));
    }
    norm_gamma_ = filled(Shape{D}, 1.0);
    norm_beta_ = filled(Shape{D}, 0.0);
    head_ = QLinear("head", D, cfg_.classes, 1, make_weight_quantizer(edge, q.first_last_bits, cfg_.classes),
                    make_act_quantizer(q.act_kind, q.first_last_bits, Granularity::LastDim, 1), true, rng);
}

Tensor QViT::patchify(const Tensor& image) const {
    const std::size_t C = cfg_.channels, S = cfg_.image, P = cfg_.patch, G = S / P;
    if (image.shape() != Shape{C, S, S}) {
        throw DimensionError("image must have shape " + shape_to_string(Shape{C, S, S}) + ", got " +
                             shape_to_string(image.shape()));
    }
    Tensor out(Shape{G * G, C * P * P});
    for (std::size_t py = 0; py < G; ++py) {
        for (std::size_t px = 0; px < G; ++px) {
            const std::size_t row = py * G + px;
            std::size_t col = 0;
            for (std::size_t c = 0; c < C; ++c) {
                for (std::size_t y = 0; y < P; ++y) {
                    for (std::size_t x = 0; x < P; ++x) {
                        out[row * out.cols() + col++] = image[(c * S + py * P + y) * S + px * P + x];
                    }
                }
            }
        }
    }
    return out;
}

Var QViT::forward(Graph& g, const Tensor& image, bool mark) {
    Var patches = g.constant(patchify(image), "patches");
    Var x = concat_rows({g.parameter(cls_token_, "cls_token"), patch_embed_.forward(g, patches)});
    x = add(x, g.parameter(pos_embed_, "pos_embed"));
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        Block& b = blocks_[i];
        const std::string prefix = "block" + std::to_string(i);
        Var h = layer_norm(x, g.parameter(b.norm1_gamma), g.parameter(b.norm1_beta), cfg_.ln_eps);
        x = add(x, b.attn.forward(g, h, mark ? prefix + ".attn" : std::string()));
        h = layer_norm(x, g.parameter(b.norm2_gamma), g.parameter(b.norm2_beta), cfg_.ln_eps);
        if (mark) g.mark(prefix + ".ffn.in", h);
        Var f = b.ffn.forward(g, h);
        if (mark) g.mark(prefix + ".ffn.out", f);
        x = add(x, f);
    }
    x = layer_norm(x, g.parameter(norm_gamma_), g.parameter(norm_beta_), cfg_.ln_eps);
    return head_.forward(g, slice_rows(x, 0, 1));
}

Var QViT::forward_batch(Graph& g, std::span<const Tensor* const> images) {
    if (images.empty()) throw DimensionError("forward_batch: empty batch");
    std::vector<Var> logits;
    logits.reserve(images.size());
    for (const Tensor* img : images) logits.push_back(forward(g, *img));
    return logits.size() == 1 ? logits.front() : concat_rows(logits);
}

std::vector<NamedTensor> QViT::parameters() {
    std::vector<NamedTensor> out;
    patch_embed_.collect(out);
    out.push_back({"cls_token", &cls_token_});
    out.push_back({"pos_embed", &pos_embed_});
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        const std::string prefix = "blocks." + std::to_string(i);
        Block& b = blocks_[i];
        out.push_back({prefix + ".norm1.gamma", &b.norm1_gamma});
        out.push_back({prefix + ".norm1.beta", &b.norm1_beta});
        b.attn.collect(out);
        out.push_back({prefix + ".norm2.gamma", &b.norm2_gamma});
        out.push_back({prefix + ".norm2.beta", &b.norm2_beta});
        b.ffn.fc1.collect(out);
        b.ffn.fc2.collect(out);
    }
    out.push_back({"norm.gamma", &norm_gamma_});
    out.push_back({"norm.beta", &norm_beta_});
    head_.collect(out);
    return out;
}

std::vector<QuantizedWeight> QViT::body_weights() {
    std::vector<QuantizedWeight> out;
    for (auto& b : blocks_) {
        b.attn.collect_weights(out);
        b.ffn.fc1.collect_weights(out);
        b.ffn.fc2.collect_weights(out);
    }
    return out;
}

std::vector<QuantizedWeight> QViT::quantized_weights() {
    std::vector<QuantizedWeight> out;
    patch_embed_.collect_weights(out);
    for (auto& w : body_weights()) out.push_back(w);
    head_.collect_weights(out);
    return out;
}

std::vector<Quantizer*> QViT::activation_quantizers() {
    std::vector<Quantizer*> out;
    patch_embed_.collect_act_quantizers(out);
    for (auto& b : blocks_) {
        b.attn.collect_act_quantizers(out);
        b.ffn.fc1.collect_act_quantizers(out);
        b.ffn.fc2.collect_act_quantizers(out);
    }
    head_.collect_act_quantizers(out);
    return out;
}

void QViT::calibrate(std::span<const Tensor* const> images) {
    auto quantizers = activation_quantizers();
    for (Quantizer* q : quantizers) q->begin_calibration();
    for (const Tensor* img : images) {
        Graph g;
        forward(g, *img);
    }
    for (Quantizer* q : quantizers) q->end_calibration();
    calibrated_ = true;
}

std::size_t count_quant_ops(QViT& model, const std::string& path) {
    static const std::regex head_re(R"(block(\d+)\.head(\d+)\.qk)");
    static const std::regex sub_re(R"(block(\d+)\.(attn|ffn))");
    const auto& cfg = model.config();
    std::string begin_mark, end_mark;
    std::smatch m;
    if (path == "qk") {
        begin_mark = "block0.attn.in";
        end_mark = "block0.attn.head0.qk";
    } else if (std::regex_match(path, m, head_re)) {
        const auto layer = std::stoul(m[1]), head = std::stoul(m[2]);
        if (layer >= cfg.layers || head >= cfg.heads) throw ConfigError("count_quant_ops: path out of range: " + path);
        begin_mark = "block" + m[1].str() + ".attn.in";
        end_mark = "block" + m[1].str() + ".attn.head" + m[2].str() + ".qk";
    } else if (std::regex_match(path, m, sub_re)) {
        if (std::stoul(m[1]) >= cfg.layers) throw ConfigError("count_quant_ops: path out of range: " + path);
        begin_mark = "block" + m[1].str() + "." + m[2].str() + ".in";
        end_mark = "block" + m[1].str() + "." + m[2].str() + ".out";
    } else {
        throw ConfigError("count_quant_ops: unknown path '" + path + "'");
    }
    Graph g(false);
    Tensor image(Shape{cfg.channels, cfg.image, cfg.image});
    model.forward(g, image, true);
    const auto begin = g.find_mark(begin_mark);
    const auto end = g.find_mark(end_mark);
    if (!begin || !end) throw ContractError("count_quant_ops: forward pass did not mark " + path);
    std::size_t count = 0;
    for (auto id : g.ancestors(*end, *begin)) {
        if (g.op(id).starts_with("quantize")) ++count;
    }
    return count;
}

// ---- checkpoints -------------------------------------------------------------

namespace {

using nlohmann::json;

constexpr char kCheckpointMagic[8] = {'O', 'F', 'Q', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kCheckpointVersion = 1;

json model_json(const ModelConfig& c) {
    return json{{"layers", c.layers},
                {"embed_dim", c.embed_dim},
                {"heads", c.heads},
                {"mlp_hidden", c.mlp_hidden},
                {"patch", c.patch},
                {"image", c.image},
                {"channels", c.channels},
                {"classes", c.classes},
                {"attention", std::string(to_string(c.attention))},
                {"ln_eps", c.ln_eps},
                {"quant",
                 {{"weight", std::string(to_string(c.quant.weight_kind))},
                  {"act", std::string(to_string(c.quant.act_kind))},
                  {"weight_bits", c.quant.weight_bits},
                  {"act_bits", c.quant.act_bits},
                  {"first_last_bits", c.quant.first_last_bits}}}};
}

void reject_unknown(const json& j, std::initializer_list<std::string_view> known, const std::string& where) {
    for (const auto& [key, _] : j.items()) {
        bool ok = false;
        for (auto k : known) ok = ok || key == k;
        if (!ok) throw ConfigError("unknown key '" + where + key + "'");
    }
}

ModelConfig model_from(const json& j) {
    if (!j.is_object()) throw ConfigError("model config must be a JSON object");
    reject_unknown(j,
                   {"layers", "embed_dim", "heads", "mlp_hidden", "patch", "image", "channels", "classes", "attention",
                    "ln_eps", "quant"},
                   "model.");
    ModelConfig c;
    try {
        c.layers = j.value("layers", c.layers);
        c.embed_dim = j.value("embed_dim", c.embed_dim);
        c.heads = j.value("heads", c.heads);
        c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
        c.patch = j.value("patch", c.patch);
        c.image = j.value("image", c.image);
        c.channels = j.value("channels", c.channels);
        c.classes = j.value("classes", c.classes);
        c.ln_eps = j.value("ln_eps", c.ln_eps);
        if (j.contains("attention")) c.attention = parse_attention_mode(j.at("attention").get<std::string>());
        if (j.contains("quant")) {
            const json& q = j.at("quant");
            if (!q.is_object()) throw ConfigError("model.quant must be a JSON object");
            reject_unknown(q, {"weight", "act", "weight_bits", "act_bits", "first_last_bits"}, "model.quant.");
            if (q.contains("weight")) c.quant.weight_kind = parse_quant_kind(q.at("weight").get<std::string>());
            if (q.contains("act")) c.quant.act_kind = parse_quant_kind(q.at("act").get<std::string>());
            c.quant.weight_bits = q.value("weight_bits", c.quant.weight_bits);
            c.quant.act_bits = q.value("act_bits", c.quant.act_bits);
            c.quant.first_last_bits = q.value("first_last_bits", c.quant.first_last_bits);
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
}

class Writer {
public:
    explicit Writer(const std::filesystem::path& path) : path_(path), out_(path, std::ios::binary) {
        if (!out_) throw IoError("cannot open " + path.string() + " for writing");
    }
    void bytes(const void* p, std::size_t n) {
        out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
        if (!out_) throw IoError("write failed: " + path_.string());
    }
    template <class T>
    void pod(T v) { bytes(&v, sizeof v); }
    void string(const std::string& s) {
        pod<std::uint64_t>(s.size());
        bytes(s.data(), s.size());
    }

private:
    std::filesystem::path path_;
    std::ofstream out_;
};

class Reader {
public:
    explicit Reader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary) {
        if (!in_) throw IoError("cannot open " + path.string());
    }
    void bytes(void* p, std::size_t n) {
        in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n) fail("truncated file");
        offset_ += n;
    }
    template <class T>
    T pod() {
        T v;
        bytes(&v, sizeof v);
        return v;
    }
    std::string string(std::uint64_t limit) {
        const auto n = pod<std::uint64_t>();
        if (n > limit) fail("string length " + std::to_string(n) + " exceeds limit");
        std::string s(n, '\0');
        bytes(s.data(), n);
        return s;
    }
    [[noreturn]] void fail(const std::string& what) const {
        throw IoError(path_.string() + " at offset " + std::to_string(offset_) + ": " + what);
    }
    bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

private:
    std::filesystem::path path_;
    std::ifstream in_;
    std::size_t offset_ = 0;
};

}  // namespace

std::string model_config_to_json(const ModelConfig& cfg) { return model_json(cfg).dump(2); }

ModelConfig model_config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("model config is not valid JSON: ") + e.what());
    }
    return model_from(j);
}

void save_checkpoint(const std::filesystem::path& path, QViT& model, const std::string& metadata_json) {
    json meta;
    try {
        meta = json::parse(metadata_json);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
    }
    const json header{{"model", model_json(model.config())}, {"calibrated", model.calibrated()}, {"metadata", meta}};
    Writer w(path);
    w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
    w.pod<std::uint32_t>(kCheckpointVersion);
    w.string(header.dump());
    auto params = model.parameters();
    w.pod<std::uint64_t>(params.size());
    for (const auto& [name, t] : params) {
        w.string(name);
        w.pod<std::uint32_t>(static_cast<std::uint32_t>(t->rank()));
        for (auto e : t->shape()) w.pod<std::uint64_t>(e);
        w.bytes(t->storage().data(), t->size() * sizeof(double));
    }
}

QViT load_checkpoint(const std::filesystem::path& path, std::string* metadata_json) {
    Reader r(path);
    char magic[sizeof kCheckpointMagic];
    r.bytes(magic, sizeof magic);
    if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) r.fail("bad magic, not an ofq checkpoint");
    const auto version = r.pod<std::uint32_t>();
    if (version != kCheckpointVersion) r.fail("unsupported checkpoint version " + std::to_string(version));
    json header;
    try {
        header = json::parse(r.string(std::uint64_t{1} << 24));
    } catch (const json::exception& e) {
        r.fail(std::string("corrupt header: ") + e.what());
    }
    if (!header.contains("model")) r.fail("header has no model config");
    QViT model(model_from(header.at("model")), 0);
    model.set_calibrated(header.value("calibrated", false));
    if (metadata_json) *metadata_json = header.contains("metadata") ? header.at("metadata").dump() : "{}";

    auto params = model.parameters();
    const auto count = r.pod<std::uint64_t>();
    if (count != params.size()) {
        r.fail("checkpoint has " + std::to_string(count) + " tensors, model expects " + std::to_string(params.size()));
    }
    for (auto& [name, t] : params) {
        const std::string stored = r.string(4096);
        if (stored != name) r.fail("expected tensor '" + name + "', found '" + stored + "'");
        const auto rank = r.pod<std::uint32_t>();
        if (rank > 4) r.fail("tensor '" + name + "' has implausible rank " + std::to_string(rank));
        Shape shape(rank);
        for (auto& e : shape) e = r.pod<std::uint64_t>();
        if (shape != t->shape()) {
            r.fail("tensor '" + name + "' has shape " + shape_to_string(shape) + ", model expects " +
                   shape_to_string(t->shape()));
        }
        r.bytes(t->storage().data(), t->size() * sizeof(double));
    }
    if (!r.at_end()) r.fail("trailing bytes after last tensor");
    for (auto& w : model.quantized_weights()) {
        if (w.quantizer->spec().kind == QuantKind::StatsQ) w.quantizer->init_from(*w.weight);
        else if (w.quantizer->learnable()) w.quantizer->state().initialized = true;
    }
    return model;
}

}  // namespace ofq
