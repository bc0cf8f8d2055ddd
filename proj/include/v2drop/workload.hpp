#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "v2drop/model.hpp"
#include "v2drop/tensor.hpp"

namespace v2drop {

enum class EmbeddingMode { random_gaussian, duplicated_background_with_needles };

// Synthetic prompt description. `seed` drives every random choice (system
// and text token ids, vision embeddings, needle placement) through
// independent derived streams.
struct WorkloadSpec {
    std::uint64_t seed = 1;
    int vision_tokens = 0; // M
    int system_len = 0;
    int text_len = 0;
    int decode_steps = 0;
    EmbeddingMode embedding_mode = EmbeddingMode::random_gaussian;
    int n_needles = 1;  // needle mode only
    int grid_w = 0;     // optional mask geometry, grid_w*grid_h == M
    int grid_h = 0;

    void validate() const;

    std::string to_json() const;
    static WorkloadSpec from_json_text(const std::string& text);
    static WorkloadSpec from_json_file(const std::string& path);
};

struct BuiltWorkload {
    std::vector<int> system_ids;
    std::vector<int> text_ids;
    Tensor2D vision_embeddings;          // M x d_model
    std::vector<int> needle_block_indices; // 0-based positions inside the vision block
};

BuiltWorkload build_workload(const WorkloadSpec& spec, const ModelConfig& config);

// Same, with needle placement forced (used by the calibration loop).
BuiltWorkload build_workload(const WorkloadSpec& spec, const ModelConfig& config,
                             std::span<const int> forced_needle_positions);

// Embedding conventions shared between needle workloads and the needle
// model: background vision tokens sit on one coordinate axis, needles on
// another, with equal norm so RMS normalization cannot tell them apart by
// scale alone.
constexpr int kNeedleAxis = 0;
constexpr int kBackgroundAxis = 1;
constexpr float kVisionAmplitude = 1.0f;

// Hand-constructed weights for calibration: attention is inert (wq = wk =
// wv = wo = 0) and each layer's gated MLP reads only the needle axis, so a
// background token's hidden state never changes (variation exactly zero)
// while a needle token keeps moving at every layer regardless of position.
ModelWeights build_needle_model(const ModelConfig& config, std::uint64_t seed);

} // namespace v2drop
