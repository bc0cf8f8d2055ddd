#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "v2drop/model.hpp"
#include "v2drop/tensor.hpp"

namespace v2drop {

enum class Segment : std::uint8_t { system, vision, text };

std::string segment_name(Segment s);

struct TokenEntry {
    std::uint32_t content_id = 0;
    Segment segment = Segment::text;
    int original_position = 0;
};

// A fully assembled prefill input: system prefix, one contiguous vision
// block, text suffix. Embedding row i belongs to entries[i]. Content ids are
// assigned at assembly time and stay attached to tokens across drops.
struct TokenSequence {
    std::vector<TokenEntry> entries;
    Tensor2D embeddings; // entries.size() x d_model
    int vision_count = 0;
    int vision_begin = -1; // original position of the first vision token, -1 if none

    int length() const { return static_cast<int>(entries.size()); }
    std::vector<std::uint32_t> vision_ids() const;
};

// System and text ids embed through the table; vision rows are taken
// verbatim (the projector that would produce them is upstream of this
// runtime). Throws RangeError for out-of-vocabulary ids.
TokenSequence assemble_sequence(std::span<const int> system_ids,
                                const Tensor2D& vision_embeddings,
                                std::span<const int> text_ids,
                                const Tensor2D& embedding_table);

struct TokenRef {
    std::uint32_t content_id = 0;
    int original_position = 0;
    Segment segment = Segment::text;
};

// Snapshot handed to the compression hook after a layer's forward pass.
// `hidden` is that layer's output, `prev_hidden` the aligned output of the
// previous layer (layer 0 = the input embeddings), both over the currently
// retained tokens in original order.
struct LayerState {
    int layer_index = 0; // 1-based
    Tensor2D hidden;
    Tensor2D prev_hidden;
    std::vector<TokenRef> retained;
};

// Returns the content ids to keep for subsequent layers. Must be a subset of
// state.retained and must keep every non-vision token; order is ignored
// (the runtime preserves original sequence order). `attn_weights` is the
// head-averaged post-softmax matrix, present iff the dense path ran.
using PrefillHook =
    std::function<std::vector<std::uint32_t>(const LayerState& state,
                                             const Tensor2D* attn_weights)>;

// Per-layer cache of rotary-encoded keys and raw values, split by head.
// Rows cover exactly the tokens retained when the layer executed; decode
// appends one row per generated token.
struct KVCache {
    std::vector<Tensor2D> k_heads;
    std::vector<Tensor2D> v_heads;
    int rows = 0;
};

struct PrefillResult {
    LayerState final_state;
    std::vector<KVCache> caches;          // one per layer
    std::vector<int> retained_per_layer;  // token count when each layer executed
    std::vector<TokenRef> final_retained; // survivors after the last layer + hook
    std::vector<float> last_logits;       // logits of the final retained row
    std::uint64_t flops = 0;
    std::uint64_t peak_activation_elems = 0;
    std::uint64_t attention_matrix_allocs = 0;
    int original_length = 0;
};

PrefillResult prefill(const TokenSequence& seq, const ModelWeights& weights,
                      const ModelConfig& config, AttnPath path,
                      const PrefillHook& hook = {});

struct DecodeResult {
    std::vector<int> generated_ids;
    std::vector<std::uint64_t> per_step_logits_digest;
    std::uint64_t flop_total = 0; // prefill + decode
    std::uint64_t peak_activation_elems = 0;
};

// Greedy decoding; ties go to the lowest token id. The first token comes
// from the prefill logits, each further token from one forward pass whose
// layer-l attention sees exactly layer l's cache plus previously generated
// rows. Generated positions continue from the original sequence length.
DecodeResult decode(PrefillResult& pre, const ModelWeights& weights,
                    const ModelConfig& config, AttnPath path, int steps,
                    std::optional<int> stop_id = std::nullopt);

// FNV-1a over the byte image of a float buffer.
std::uint64_t digest_f32(std::span<const float> values);
std::uint64_t digest_combine(std::uint64_t acc, std::uint64_t value);

} // namespace v2drop
