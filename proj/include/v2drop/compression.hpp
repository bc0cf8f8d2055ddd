#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "v2drop/rng.hpp"
#include "v2drop/runtime.hpp"

namespace v2drop {

// --- variation metrics ------------------------------------------------------

enum class MetricKind { l1, l2, cosine_distance };

struct VariationMetric {
    MetricKind kind = MetricKind::l2;
    double epsilon = 1e-12; // cosine only: norms below this count as zero
};

std::string metric_name(const VariationMetric& metric);
VariationMetric metric_from_name(const std::string& name);

// Distance between a token's hidden states at consecutive layers:
//   l1              sum |curr - prev|
//   l2              sqrt(sum (curr - prev)^2)
//   cosine_distance 1 - curr.prev / (|curr||prev|), 1 if either norm ~ 0
// Accumulation in double.
double variation(const VariationMetric& metric, std::span<const float> prev,
                 std::span<const float> curr);

struct ScoredToken {
    std::uint32_t content_id = 0;
    int original_position = 0;
    double score = 0.0;
};

struct VariationScores {
    int layer_index = 0;
    std::vector<ScoredToken> scores; // in original sequence order
};

// One variation score per retained vision token, from the aligned
// prev_hidden/hidden rows of `state`. vision_ids must all be retained.
VariationScores score_tokens(const VariationMetric& metric, const LayerState& state,
                             std::span<const std::uint32_t> vision_ids);

// Ids of the k highest scores, ties broken by ascending original position,
// returned in original sequence order. k > |scores| is clamped (with a note
// in `warnings` when provided).
std::vector<std::uint32_t> select_topk(const VariationScores& scores, int k,
                                       std::vector<std::string>* warnings = nullptr);

// --- drop schedules ---------------------------------------------------------

struct DropStage {
    int layer = 0; // 1-based; the drop applies after this layer's forward pass
    bool is_ratio = true;
    double prune_ratio = 0.0; // fraction of the *current* vision count to remove
    int target_count = 0;     // absolute K, used when !is_ratio
};

struct DropSchedule {
    std::vector<DropStage> stages; // strictly increasing layers
    int total_llm_layers = 0;      // depth used for equivalent-count accounting

    void validate() const; // throws ConfigError
};

struct ResolvedStage {
    int layer = 0;
    int keep = 0;
};

struct ExactStage {
    int layer = 0;
    double keep = 0.0;
};

// Half-away-from-zero rounding, the convention for ratio-resolved targets.
int round_half_away(double value);

// Resolves ratios against the running vision count into integer keep-counts.
// Absolute targets above the current count clamp (with a warning).
std::vector<ResolvedStage> resolve_schedule(const DropSchedule& schedule,
                                            int initial_vision_count,
                                            std::vector<std::string>* warnings = nullptr);

// Same resolution without rounding; used for accounting, where the published
// equivalents come from the exact stage values.
std::vector<ExactStage> resolve_schedule_exact(const DropSchedule& schedule,
                                               int initial_vision_count);

// Layer-averaged vision-token count across total_llm_layers: layers 1..l1
// see M, layers l1+1..l2 see K1, and so on.
double equivalent_token_count(std::span<const ExactStage> resolved, double initial_vision_count,
                              int total_llm_layers);
double equivalent_token_count(std::span<const ResolvedStage> resolved,
                              double initial_vision_count, int total_llm_layers);

// Single-stage schedule at `layer` whose equivalent token count matches the
// reference schedule's within half a token.
DropSchedule derive_one_time_schedule(const DropSchedule& reference, int initial_vision_count,
                                      int layer);

// --- policies ----------------------------------------------------------------

enum class PolicyKind { none, v2drop, random_drop, attention_guided, one_time_v2drop };

std::string policy_name(PolicyKind kind);
PolicyKind policy_from_name(const std::string& name);

struct PolicyDescriptor {
    PolicyKind kind = PolicyKind::v2drop;
    VariationMetric metric{};
    std::uint64_t seed = 0; // random_drop only

    bool needs_attention_weights() const { return kind == PolicyKind::attention_guided; }
};

// Stateful hook implementing one policy over one inference. At each stage
// layer it shrinks the vision set to the stage target; everywhere else it is
// the identity. Non-vision tokens are always retained.
class PolicyRunner {
public:
    PolicyRunner(PolicyDescriptor descriptor, std::vector<ResolvedStage> stages);

    std::vector<std::uint32_t> operator()(const LayerState& state,
                                          const Tensor2D* attn_weights);

    // The returned hook borrows this runner; keep the runner alive for the
    // whole prefill.
    PrefillHook as_hook();

    const std::vector<std::string>& warnings() const { return warnings_; }

private:
    PolicyDescriptor descriptor_;
    std::vector<ResolvedStage> stages_;
    Xoshiro256ss rng_;
    std::vector<std::string> warnings_;
};

// Signed location of the retained vision tokens inside the block: -1 when
// everything kept sits at the first position, +1 at the last, 0 for a
// symmetric (or empty) selection. Inputs are 0-based indices within the
// vision block.
double positional_bias_stat(std::span<const int> retained_block_indices, int vision_count);

} // namespace v2drop
