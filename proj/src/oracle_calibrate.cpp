#include <vector>

#include "v2drop/errors.hpp"
#include "v2drop/harness.hpp"
#include "v2drop/oracle.hpp"
#include "v2drop/rng.hpp"

// Needle recall calibration. Runs the real pipeline (needle workloads over a
// needle model) under each policy and measures survival through the drop
// schedule. The numbers this produces get frozen as regression floors.

namespace v2drop::oracle {

namespace {

WorkloadSpec protocol_workload(const NeedleProtocol& protocol) {
    WorkloadSpec w;
    w.vision_tokens = protocol.vision_tokens;
    w.system_len = 0;
    w.text_len = protocol.text_len;
    w.decode_steps = 0;
    w.embedding_mode = EmbeddingMode::duplicated_background_with_needles;
    w.n_needles = 1;
    return w;
}

struct PinnedOutcome {
    bool survived = false;
    double bias = 0.0; // positional_bias_stat of the surviving vision set
};

// Single run with the needle forced to `position` inside the vision block.
PinnedOutcome pinned_run(const ModelWeights& weights, const ModelConfig& config,
                         const WorkloadSpec& workload, const RunRequest& request,
                         int position) {
    const int forced[1] = {position};
    WorkloadSpec spec = workload;
    const BuiltWorkload built = build_workload(spec, config, forced);
    const TokenSequence seq = assemble_sequence(built.system_ids, built.vision_embeddings,
                                                built.text_ids, weights.embedding_table);
    std::vector<ResolvedStage> stages =
        resolve_schedule(request.schedule, spec.vision_tokens);
    PolicyRunner runner(request.policy, std::move(stages));
    PrefillHook hook = runner.as_hook();
    const PrefillResult pre = prefill(seq, weights, config, request.path, hook);
    const int needle_position = seq.vision_begin + position;
    PinnedOutcome outcome;
    std::vector<int> block_indices;
    for (const TokenRef& ref : pre.final_retained) {
        if (ref.segment != Segment::vision) {
            continue;
        }
        block_indices.push_back(ref.original_position - seq.vision_begin);
        if (ref.original_position == needle_position) {
            outcome.survived = true;
        }
    }
    outcome.bias = positional_bias_stat(block_indices, spec.vision_tokens);
    return outcome;
}

} // namespace

NeedleCalibration calibrate_needle(const std::string& model_path, int trials,
                                   std::uint64_t seed, const NeedleProtocol& protocol) {
    if (trials < 1) {
        throw ConfigError("calibrate_needle: trials must be >= 1");
    }
    LoadedModel model;
    try {
        model = load_model(model_path);
    } catch (const FormatError& e) {
        throw FormatError(std::string("calibrate_needle: needle model missing or unreadable: ") +
                          e.what());
    }

    const WorkloadSpec workload = protocol_workload(protocol);
    DropSchedule schedule = parse_schedule(protocol.schedule, model.config.n_layers);

    NeedleCalibration result;
    result.trials = trials;
    const std::vector<ResolvedStage> resolved = resolve_schedule(schedule, workload.vision_tokens);
    result.analytic_random =
        resolved.empty() ? 1.0
                         : static_cast<double>(resolved.back().keep) / workload.vision_tokens;

    RunRequest v2drop_request;
    v2drop_request.policy.kind = PolicyKind::v2drop;
    v2drop_request.compress = true;
    v2drop_request.schedule_text = protocol.schedule;
    v2drop_request.schedule = schedule;
    v2drop_request.path = AttnPath::streaming;

    RunRequest random_request = v2drop_request;
    random_request.policy.kind = PolicyKind::random_drop;

    RunRequest one_time_request = v2drop_request;
    one_time_request.policy.kind = PolicyKind::one_time_v2drop;
    one_time_request.one_time_layer = protocol.one_time_layer;
    if (!protocol.one_time_schedule.empty()) {
        one_time_request.schedule_text = protocol.one_time_schedule;
        one_time_request.schedule =
            parse_schedule(protocol.one_time_schedule, model.config.n_layers);
    }

    result.recall_v2drop = measure_needle_recall(model.weights, model.config, workload,
                                                 v2drop_request, trials, seed);
    result.recall_random = measure_needle_recall(model.weights, model.config, workload,
                                                 random_request, trials, derive_seed(seed, 1));
    result.recall_one_time = measure_needle_recall(model.weights, model.config, workload,
                                                   one_time_request, trials,
                                                   derive_seed(seed, 2));

    const PinnedOutcome first =
        pinned_run(model.weights, model.config, workload, v2drop_request, 0);
    const PinnedOutcome last = pinned_run(model.weights, model.config, workload,
                                          v2drop_request, workload.vision_tokens - 1);
    result.recall_first_pos = first.survived ? 1.0 : 0.0;
    result.recall_last_pos = last.survived ? 1.0 : 0.0;
    result.bias_first_pos = first.bias;
    result.bias_last_pos = last.bias;
    return result;
}

} // namespace v2drop::oracle
