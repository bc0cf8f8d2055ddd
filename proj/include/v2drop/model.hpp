#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "v2drop/tensor.hpp"

namespace v2drop {

enum class PositionalMode { rope, nope };

// Attention execution path. `dense` materializes per-head attention weight
// matrices (and hands policies a head-averaged copy); `streaming` computes
// the same outputs with online softmax and never exposes weights.
enum class AttnPath { dense, streaming };

struct ModelConfig {
    int n_layers = 8;
    int d_model = 64;
    int n_heads = 4;
    int d_ff = 172;
    int vocab_size = 256;
    PositionalMode positional_mode = PositionalMode::rope;
    double rope_base = 10000.0;

    int head_dim() const { return d_model / n_heads; }

    // Throws ConfigError on an invalid combination.
    void validate() const;

    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);
};

struct LayerWeights {
    std::vector<float> attn_norm_gain; // d
    Tensor2D wq, wk, wv, wo;           // d x d
    std::vector<float> mlp_norm_gain;  // d
    Tensor2D w_gate, w_up;             // d x f
    Tensor2D w_down;                   // f x d
};

struct ModelWeights {
    Tensor2D embedding_table;           // vocab x d
    std::vector<LayerWeights> layers;
    std::vector<float> final_norm_gain; // d
    Tensor2D lm_head;                   // d x vocab
};

// Deterministic weights: a splitmix64-seeded xoshiro256** stream fills every
// dense tensor, in the serialization order, with uniform [-1, 1) values
// scaled by 1/sqrt(d_model). Norm gains are ones. Identical seed and config
// give bit-identical weights.
ModelWeights generate_weights(const ModelConfig& config, std::uint64_t seed);

// Binary weight format, little-endian throughout:
//   magic "V2DM" | u32 version=1 | u32 tensor_count
//   per tensor: u16 name_len | name bytes | u8 rank | rank x u64 dims
//               | f32 payload, row-major, no padding
// The config rides in a UTF-8 JSON sidecar at <path>.json.
void save_model(const ModelWeights& weights, const ModelConfig& config,
                const std::string& path);

struct LoadedModel {
    ModelWeights weights;
    ModelConfig config;
};

LoadedModel load_model(const std::string& path);

std::string attn_path_name(AttnPath path);
AttnPath attn_path_from_name(const std::string& name);

} // namespace v2drop
