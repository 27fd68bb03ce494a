#pragma once

// Channel-independent patch Transformer shared by every pre-training
// objective, plus EMA averaging and checkpoint persistence.

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tsrep/tensor.hpp"

namespace tsrep {

struct BackboneConfig {
    std::size_t patch_len = 16;
    std::size_t d_model = 256;
    std::size_t n_heads = 8;
    std::size_t n_layers = 8;
    std::size_t n_predictor_layers = 4;
    std::size_t ffn_ratio = 4;
    std::size_t max_patches = 64;  // rows of the learned positional table
    bool causal = false;
    float dropout = 0.0f;

    // 16 heads at d_model 128, 8 heads at d_model 256.
    static std::size_t default_heads(std::size_t d_model);
    void validate() const;
    bool operator==(const BackboneConfig&) const = default;
};

struct Linear {
    Tensor weight;  // [in, out]
    Tensor bias;    // [out]
};

struct Norm {
    Tensor gain;
    Tensor bias;
};

struct TransformerLayerWeights {
    Norm attn_norm;
    Linear query, key, value, out;
    Norm ffn_norm;
    Linear ffn_in, ffn_out;
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

struct EncoderWeights {
    Linear patch_embed;  // [patch_len, d_model]
    Tensor position;     // [max_patches, d_model]
    std::vector<TransformerLayerWeights> layers;
    Norm final_norm;

    // Handles share storage with the weights.
    NamedTensors named_parameters() const;
    std::vector<Tensor> parameters() const;
    EncoderWeights clone() const;
    void set_requires_grad(bool value) const;
};

Linear make_linear(std::size_t in, std::size_t out, std::mt19937_64& rng);
Tensor apply_linear(const Linear& layer, const Tensor& x);
Norm make_norm(std::size_t d);
Tensor apply_norm(const Norm& norm, const Tensor& x);
TransformerLayerWeights make_transformer_layer(std::size_t d_model, std::size_t ffn_ratio, std::mt19937_64& rng);
void append_parameters(NamedTensors& out, const std::string& prefix, const Linear& layer);
void append_parameters(NamedTensors& out, const std::string& prefix, const Norm& norm);
void append_parameters(NamedTensors& out, const std::string& prefix, const TransformerLayerWeights& layer);

EncoderWeights init_encoder(const BackboneConfig& cfg, std::mt19937_64& rng);

struct PatchBatch {
    Tensor values;                      // [batch, n_patches, patch_len]
    std::vector<std::uint8_t> pad_mask;  // batch * n_patches, nonzero = padded
    std::size_t batch() const { return values.dim(0); }
    std::size_t n_patches() const { return values.dim(1); }
    std::size_t patch_len() const { return values.dim(2); }
};

// series is row-major [T, C]; returns C univariate series in channel order.
std::vector<std::vector<float>> flatten_channels(const Tensor& series);

struct InstanceStats {
    float mean = 0.0f;
    float stddev = 1.0f;
};

// (x - mean) / sqrt(var + eps), in place; returns the statistics used.
InstanceStats instance_normalize(std::span<float> series, float eps = 1e-5f);
void instance_denormalize(std::span<float> values, const InstanceStats& stats);

// floor(T / patch_len) non-overlapping patches; the trailing remainder is dropped.
PatchBatch patchify(std::span<const float> series, std::size_t patch_len);
// All series must share one length.
PatchBatch patchify_batch(const std::vector<std::vector<float>>& series, std::size_t patch_len);

struct EncodeOptions {
    bool training = false;
    std::mt19937_64* rng = nullptr;  // required when training with dropout
};

// [B, N, P] -> [B, N, D]: patch projection plus positional rows 0..N-1.
Tensor embed_patches(const EncoderWeights& w, const Tensor& values);

// Attention mask for [B, H, N, N] scores; nonzero entries are blocked.
std::vector<std::uint8_t> attention_mask(std::size_t batch, std::size_t n_heads, std::size_t n,
                                         bool causal, std::span<const std::uint8_t> pad_mask);

Tensor transformer_layer(const Tensor& x, const TransformerLayerWeights& layer, std::size_t n_heads,
                         std::span<const std::uint8_t> mask, float dropout, const EncodeOptions& opts);

// Runs the layer stack and final norm on already-embedded tokens.
Tensor encode_embedded(const Tensor& tokens, const EncoderWeights& w, const BackboneConfig& cfg,
                       std::span<const std::uint8_t> pad_mask, const EncodeOptions& opts = {});

Tensor encode(const PatchBatch& patches, const EncoderWeights& w, const BackboneConfig& cfg,
              const EncodeOptions& opts = {});

// teacher <- momentum * teacher + (1 - momentum) * student
void ema_update(const EncoderWeights& teacher, const EncoderWeights& student, float momentum);
void ema_update(const NamedTensors& teacher, const NamedTensors& student, float momentum);

std::uint64_t weights_digest(const NamedTensors& params);

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

struct BackboneCheckpoint {
    BackboneConfig config;
    EncoderWeights weights;
    std::string objective = "none";
    std::string data_source = "none";
    std::uint64_t seed = 0;
    std::uint32_t epoch = 0;
};

void save_checkpoint(const std::filesystem::path& path, const BackboneCheckpoint& ckpt);
BackboneCheckpoint load_checkpoint(const std::filesystem::path& path);
std::string checkpoint_bytes(const BackboneCheckpoint& ckpt);

// Random-initialized checkpoint used as the no-pretraining baseline.
BackboneCheckpoint random_checkpoint(const BackboneConfig& cfg, std::uint64_t seed);

}  // namespace tsrep
