#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "v2drop/compression.hpp"
#include "v2drop/model.hpp"
#include "v2drop/workload.hpp"

namespace v2drop {

// Parses the schedule flag grammar: comma-separated stages, each either
// "layer:ratio" (prune that fraction of the current vision tokens) or
// "layer=K" (keep exactly K). Example: "3:0.5,17:0.7,22:1.0".
DropSchedule parse_schedule(const std::string& text, int total_llm_layers);

struct RunRequest {
    PolicyDescriptor policy;
    bool compress = true; // false: no hook at all (--policy none)
    std::string schedule_text;
    DropSchedule schedule; // for one_time_v2drop this is the reference schedule
    int one_time_layer = 0; // 0: reuse the reference's first stage layer
    AttnPath path = AttnPath::streaming;
    std::optional<int> stop_id;
    std::string model_label; // echoed into the report
};

// Everything a single inference produces, ready for serialization. Numeric
// fields are exact counters except wall_time_ms, which is recorded but never
// part of any comparison.
struct BenchReport {
    std::string model_label;
    WorkloadSpec workload;
    std::string policy;
    std::string metric;
    std::string schedule;
    std::string attn_path;
    int accounting_layers = 0;
    std::uint64_t prefill_flops = 0;
    std::uint64_t decode_flops = 0;
    std::uint64_t peak_activation_elems = 0;
    std::uint64_t attention_matrix_allocs = 0;
    double equivalent_token_count = 0.0; // rounded to 2 decimals
    double positional_bias_stat = 0.0;
    std::vector<std::uint8_t> retained_mask; // one flag per vision token
    std::vector<int> retained_per_layer;
    std::vector<int> generated_ids;
    std::string logits_digest; // 16 hex chars
    int needles_total = -1;    // -1 when the workload has no needles
    int needles_retained = -1;
    std::vector<std::string> warnings;
    double wall_time_ms = 0.0;

    std::string to_json() const;
    static BenchReport from_json_text(const std::string& text);
};

BenchReport run_inference(const ModelWeights& weights, const ModelConfig& config,
                          const WorkloadSpec& workload, const RunRequest& request);

// P5 PGM, maxval 255: retained pixels 255, dropped 128. A text rendering
// ('#' retained, '.' dropped) goes to <path>.txt.
void emit_mask(std::span<const std::uint8_t> retained_mask, int grid_w, int grid_h,
               const std::string& path);

struct CompareRequest {
    std::vector<std::string> workload_paths;
    std::vector<PolicyDescriptor> policies;
    std::vector<bool> compress_flags; // aligned with policies
    std::vector<std::string> schedule_texts;
    std::vector<AttnPath> paths;
    int accounting_layers = 0; // 0: model depth
    int needle_trials = 50;    // recall estimation for needle workloads
    std::uint64_t needle_trial_seed = 1;
};

// One CSV row per (workload, policy, schedule, path). Header is frozen; see
// docs/report_schema.json. Incompatible combinations (attention_guided under
// streaming) throw PolicyCompatibilityError, matching `run`.
std::string run_compare(const ModelWeights& weights, const ModelConfig& config,
                        const CompareRequest& request);

// Fraction of `trials` random needle placements whose needles all survive
// prefill under the given policy and schedule.
double measure_needle_recall(const ModelWeights& weights, const ModelConfig& config,
                             const WorkloadSpec& workload, const RunRequest& request,
                             int trials, std::uint64_t seed);

// Line-by-line JSON equality ignoring the wall_time_ms field; the
// determinism checks use this.
bool reports_equal_ignoring_walltime(const std::string& json_a, const std::string& json_b);

} // namespace v2drop
