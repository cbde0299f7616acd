#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ofq/autodiff.hpp"
#include "ofq/quantizers.hpp"

namespace ofq {

enum class AttentionMode { Naive, Qkr };

std::string_view to_string(AttentionMode mode);
AttentionMode parse_attention_mode(std::string_view text);

/// Quantizer choice for the whole model. Weights and activations of the
/// first (patch embedding) and last (classifier) layers use `first_last_bits`.
struct QuantConfig {
    QuantKind weight_kind = QuantKind::StatsQ;
    QuantKind act_kind = QuantKind::Lsq;
    int weight_bits = 2;
    int act_bits = 2;
    int first_last_bits = 8;

    bool operator==(const QuantConfig&) const = default;
};

struct ModelConfig {
    std::size_t layers = 2;
    std::size_t embed_dim = 32;
    std::size_t heads = 4;
    std::size_t mlp_hidden = 64;
    std::size_t patch = 4;
    std::size_t image = 16;
    std::size_t channels = 1;
    std::size_t classes = 4;
    AttentionMode attention = AttentionMode::Naive;
    QuantConfig quant;
    double ln_eps = 1e-6;

    std::size_t patches() const { return (image / patch) * (image / patch); }
    /// Patches plus the class token.
    std::size_t tokens() const { return patches() + 1; }
    std::size_t patch_dim() const { return channels * patch * patch; }
    std::size_t head_dim() const { return embed_dim / heads; }
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

/// Shape and quantizer specs of one multi-head self-attention layer.
struct AttentionConfig {
    std::size_t embed_dim = 32;
    std::size_t heads = 4;
    std::size_t tokens = 17;
    AttentionMode mode = AttentionMode::Naive;
    QuantKind weight_kind = QuantKind::StatsQ;
    QuantKind act_kind = QuantKind::Lsq;
    int weight_bits = 2;
    int act_bits = 2;

    std::size_t head_dim() const { return embed_dim / heads; }
};

struct NamedTensor {
    std::string name;
    Tensor* tensor;
};

/// A weight matrix that goes through a weight quantizer.
struct QuantizedWeight {
    std::string name;
    Tensor* weight;
    Quantizer* quantizer;
};

/// Builds a weight/activation quantizer for `kind` at `bits`.
Quantizer make_weight_quantizer(QuantKind kind, int bits, std::size_t rows);
Quantizer make_act_quantizer(QuantKind kind, int bits, Granularity g, std::size_t groups, bool is_signed = true);

/// Fully connected layer y = F_q(x)·F_q(W)ᵀ + b with both operands quantized
/// along the contracted (last) dimension.
class QLinear {
public:
    QLinear() = default;
    QLinear(std::string name, std::size_t in, std::size_t out, std::size_t rows, Quantizer weight_quant,
            Quantizer act_quant, bool bias, std::mt19937_64& rng);

    Var forward(Graph& g, Var x);

    const std::string& name() const { return name_; }
    Tensor weight;
    Tensor bias;
    Quantizer weight_quant;
    Quantizer act_quant;

    void collect(std::vector<NamedTensor>& out);
    void collect_weights(std::vector<QuantizedWeight>& out);
    void collect_act_quantizers(std::vector<Quantizer*>& out);

private:
    std::string name_;
    bool has_bias_ = false;
};

/// Standalone qlinear: weights/quantizers passed explicitly, no bias.
Var qlinear_forward(Graph& g, Var x, Var w, Quantizer& act_quant, Quantizer& weight_quant);

class Attention {
public:
    Attention() = default;
    Attention(std::string name, const AttentionConfig& cfg, std::mt19937_64& rng);

    /// `prefix` names graph markers: "<prefix>.in", "<prefix>.head<j>.qk".
    Var forward(Graph& g, Var x, const std::string& prefix = {});

    const AttentionConfig& config() const { return cfg_; }

    Tensor wq;  // [D×D], rows grouped by head
    Tensor wk;
    // Naive path quantizers
    Quantizer wq_quant, wk_quant, q_in, k_in, q_out, k_out;
    // QKR path quantizers
    Quantizer x_left, x_right;
    std::vector<Quantizer> merged_quant;
    std::vector<Quantizer> z_quant;
    // Value path
    QLinear v;
    Quantizer v_seq;
    std::vector<Quantizer> attn_quant;
    QLinear proj;

    void collect(std::vector<NamedTensor>& out);
    void collect_weights(std::vector<QuantizedWeight>& out);
    void collect_act_quantizers(std::vector<Quantizer*>& out);

private:
    Var scores_naive(Graph& g, Var x, std::vector<Var>& per_head);
    Var scores_qkr(Graph& g, Var x, std::vector<Var>& per_head);

    std::string name_;
    AttentionConfig cfg_;
};

/// fc1 → GELU → fc2, both linears quantized.
class FeedForward {
public:
    FeedForward() = default;
    FeedForward(std::string name, std::size_t dim, std::size_t hidden, std::size_t rows, const QuantConfig& q,
                std::mt19937_64& rng);

    Var forward(Graph& g, Var x);
    /// The first fully connected weight, the tensor whose histogram shows
    /// clustering around quantization thresholds.
    const Tensor& histogram_weight() const { return fc1.weight; }
    const Quantizer& histogram_quantizer() const { return fc1.weight_quant; }

    QLinear fc1;
    QLinear fc2;
};

struct Block {
    Tensor norm1_gamma, norm1_beta;
    Attention attn;
    Tensor norm2_gamma, norm2_beta;
    FeedForward ffn;
};

/// Desk-scale quantized ViT: 8-bit patch embedding → L blocks → 8-bit head.
class QViT {
public:
    QViT(ModelConfig cfg, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }

    /// Logits [1×classes] for one image of shape [C×H×W].
    Var forward(Graph& g, const Tensor& image, bool mark = false);
    /// Logits [B×classes].
    Var forward_batch(Graph& g, std::span<const Tensor* const> images);

    /// Every trainable tensor with a stable dotted name.
    std::vector<NamedTensor> parameters();
    std::vector<QuantizedWeight> quantized_weights();
    /// Weights of the transformer blocks only (excludes first/last layers).
    std::vector<QuantizedWeight> body_weights();
    std::vector<Quantizer*> activation_quantizers();
    std::vector<Block>& blocks() { return blocks_; }

    /// Initialises LSQ activation scales from the data (see lsq_init_scale).
    void calibrate(std::span<const Tensor* const> images);
    bool calibrated() const { return calibrated_; }
    void set_calibrated(bool flag) { calibrated_ = flag; }

    QLinear& patch_embed() { return patch_embed_; }
    QLinear& head() { return head_; }

private:
    Tensor patchify(const Tensor& image) const;

    ModelConfig cfg_;
    QLinear patch_embed_;
    Tensor cls_token_;
    Tensor pos_embed_;
    std::vector<Block> blocks_;
    Tensor norm_gamma_, norm_beta_;
    QLinear head_;
    bool calibrated_ = false;
};

/// Number of quantization nodes on a subgraph of one forward pass.
/// Paths: "qk" (block 0, head 0), "block<i>.head<j>.qk", "block<i>.attn", "block<i>.ffn".
std::size_t count_quant_ops(QViT& model, const std::string& path);

// ---- checkpoints -------------------------------------------------------------

std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

/// Binary checkpoint: magic "OFQCKPT1", JSON header (model config and
/// metadata), then named float64 arrays. See docs/formats.md.
void save_checkpoint(const std::filesystem::path& path, QViT& model, const std::string& metadata_json = "{}");
QViT load_checkpoint(const std::filesystem::path& path, std::string* metadata_json = nullptr);

}  // namespace ofq
