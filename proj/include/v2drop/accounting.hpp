#pragma once

// Closed-form cost model for the toy decoder. The runtime accumulates its
// own counters at each kernel site; these formulas restate the totals
// independently so tests can require exact integer agreement.
//
// FLOP model (multiply and add counted separately, norms/rope/softmax/
// embedding/lm-head excluded):
//   prefill layer, n tokens: attention 8*n*d^2 + 4*n^2*d, MLP 6*n*d*d_ff
//   decode forward s (s = 1..steps-1), layer l with n_l prefill rows:
//     attention 8*d^2 + 4*(n_l + s)*d, MLP 6*d*d_ff
// The first generated token comes from the prefill logits, so `steps`
// generated tokens cost steps-1 decode forwards.
//
// Activation model: elements of every tensor allocated inside one layer
// scope, summed; the reported figure is the max over scopes. The dense path
// adds (n_heads + 1) attention matrices of n^2 elements per prefill layer;
// the streaming path adds 2 running scalars per query row per head.

#include <cstdint>
#include <span>

#include "v2drop/model.hpp"

namespace v2drop {

std::uint64_t flops_prefill_layer(const ModelConfig& config, int n_tokens);

// The 4*n^2*d score/weighted-sum term alone.
std::uint64_t flops_attention_quadratic(const ModelConfig& config, int n_tokens);

std::uint64_t flops_decode_layer(const ModelConfig& config, int kv_len);

std::uint64_t count_flops(const ModelConfig& config, std::span<const int> retained_per_layer,
                          int decode_steps);

std::uint64_t expected_prefill_layer_elems(const ModelConfig& config, int n_tokens,
                                           AttnPath path);

std::uint64_t expected_decode_layer_elems(const ModelConfig& config, int kv_len,
                                          AttnPath path);

// Prefill final-norm + logits scope (one copied row): 2*d + vocab elements.
std::uint64_t expected_head_scope_elems(const ModelConfig& config);

// `final_retained` is the row count surviving the last layer's hook; decode
// scopes only exist when it is positive and decode_steps >= 2.
std::uint64_t expected_peak_activation_elems(const ModelConfig& config,
                                             std::span<const int> retained_per_layer,
                                             int final_retained, int decode_steps,
                                             AttnPath path);

} // namespace v2drop
