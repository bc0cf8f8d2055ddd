#include "v2drop/accounting.hpp"

#include <algorithm>

#include "v2drop/errors.hpp"

namespace v2drop {

namespace {

std::uint64_t u(int v) {
    return static_cast<std::uint64_t>(v);
}

} // namespace

std::uint64_t flops_prefill_layer(const ModelConfig& config, int n_tokens) {
    const std::uint64_t n = u(n_tokens);
    const std::uint64_t d = u(config.d_model);
    const std::uint64_t f = u(config.d_ff);
    return 8 * n * d * d + 4 * n * n * d + 6 * n * d * f;
}

std::uint64_t flops_attention_quadratic(const ModelConfig& config, int n_tokens) {
    const std::uint64_t n = u(n_tokens);
    return 4 * n * n * u(config.d_model);
}

std::uint64_t flops_decode_layer(const ModelConfig& config, int kv_len) {
    const std::uint64_t d = u(config.d_model);
    const std::uint64_t f = u(config.d_ff);
    return 8 * d * d + 4 * u(kv_len) * d + 6 * d * f;
}

std::uint64_t count_flops(const ModelConfig& config, std::span<const int> retained_per_layer,
                          int decode_steps) {
    if (static_cast<int>(retained_per_layer.size()) != config.n_layers) {
        throw ShapeError("count_flops: retained_per_layer has " +
                         std::to_string(retained_per_layer.size()) + " entries, config has " +
                         std::to_string(config.n_layers) + " layers");
    }
    std::uint64_t total = 0;
    for (int n : retained_per_layer) {
        total += flops_prefill_layer(config, n);
    }
    // `steps` generated tokens take steps-1 forwards: the first token falls
    // out of the prefill logits. Forward s attends to n_l + s rows at layer l.
    for (int s = 1; s <= decode_steps - 1; ++s) {
        for (int n : retained_per_layer) {
            total += flops_decode_layer(config, n + s);
        }
    }
    return total;
}

std::uint64_t expected_prefill_layer_elems(const ModelConfig& config, int n_tokens,
                                           AttnPath path) {
    const std::uint64_t n = u(n_tokens);
    const std::uint64_t d = u(config.d_model);
    const std::uint64_t f = u(config.d_ff);
    const std::uint64_t h = u(config.n_heads);
    // norm + qkv + attn_out + o-proj + mlp-norm + down, plus rope copies of
    // q and k, plus per-head q/k/v slices and outputs
    std::uint64_t nd_terms = 8;
    if (config.positional_mode == PositionalMode::rope) {
        nd_terms += 2;
    }
    std::uint64_t total = nd_terms * n * d + 4 * n * d + 2 * n * f;
    if (path == AttnPath::dense) {
        total += (h + 1) * n * n; // per-head weight matrices + the head-mean copy
    } else {
        total += 2 * n * h; // running max and denominator per query row
    }
    return total;
}

std::uint64_t expected_decode_layer_elems(const ModelConfig& config, int kv_len,
                                          AttnPath path) {
    const std::uint64_t d = u(config.d_model);
    const std::uint64_t f = u(config.d_ff);
    const std::uint64_t h = u(config.n_heads);
    std::uint64_t d_terms = 8;
    if (config.positional_mode == PositionalMode::rope) {
        d_terms += 2;
    }
    std::uint64_t total = d_terms * d + 2 * d + 2 * f; // + per-head q slice and output
    if (path == AttnPath::dense) {
        total += h * u(kv_len); // one 1 x kv_len weight row per head
    } else {
        total += 2 * h;
    }
    return total;
}

std::uint64_t expected_head_scope_elems(const ModelConfig& config) {
    // prefill: last-row copy + its norm + logits
    return 2 * u(config.d_model) + u(config.vocab_size);
}

std::uint64_t expected_peak_activation_elems(const ModelConfig& config,
                                             std::span<const int> retained_per_layer,
                                             int final_retained, int decode_steps,
                                             AttnPath path) {
    if (static_cast<int>(retained_per_layer.size()) != config.n_layers) {
        throw ShapeError("expected_peak_activation_elems: layer count mismatch");
    }
    std::uint64_t peak = 0;
    for (int n : retained_per_layer) {
        peak = std::max(peak, expected_prefill_layer_elems(config, n, path));
    }
    if (final_retained > 0) {
        peak = std::max(peak, expected_head_scope_elems(config)); // prefill logits
    }
    if (decode_steps >= 2 && final_retained > 0) {
        peak = std::max(peak, u(config.d_model)); // embedding staging row
        for (int s = 1; s <= decode_steps - 1; ++s) {
            for (int n : retained_per_layer) {
                peak = std::max(peak, expected_decode_layer_elems(config, n + s, path));
            }
        }
        // decode logits reuse the residual row: norm + logits only
        peak = std::max(peak, u(config.d_model) + u(config.vocab_size));
    }
    return peak;
}

} // namespace v2drop
