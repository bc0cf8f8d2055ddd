#include "v2drop/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>
#include <unordered_set>

#include "json.hpp"
#include "v2drop/errors.hpp"
#include "v2drop/rng.hpp"
#include "v2drop/runtime.hpp"

namespace v2drop {

DropSchedule parse_schedule(const std::string& text, int total_llm_layers) {
    DropSchedule schedule;
    schedule.total_llm_layers = total_llm_layers;
    if (text.empty()) {
        schedule.validate();
        return schedule;
    }
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        DropStage stage;
        std::size_t sep = item.find(':');
        if (sep != std::string::npos) {
            stage.is_ratio = true;
        } else {
            sep = item.find('=');
            if (sep == std::string::npos) {
                throw ConfigError("schedule: stage '" + item +
                                  "' must be layer:ratio or layer=count");
            }
            stage.is_ratio = false;
        }
        try {
            std::size_t used = 0;
            stage.layer = std::stoi(item.substr(0, sep), &used);
            if (used != sep) {
                throw std::invalid_argument("layer");
            }
            const std::string value = item.substr(sep + 1);
            if (stage.is_ratio) {
                stage.prune_ratio = std::stod(value, &used);
            } else {
                stage.target_count = std::stoi(value, &used);
            }
            if (used != value.size() || value.empty()) {
                throw std::invalid_argument("value");
            }
        } catch (const std::exception&) {
            throw ConfigError("schedule: cannot parse stage '" + item + "'");
        }
        schedule.stages.push_back(stage);
    }
    schedule.validate();
    return schedule;
}

namespace {

std::string hex_digest(std::uint64_t value) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
    return std::string(buf);
}

double round2(double value) {
    return std::round(value * 100.0) / 100.0;
}

// RFC 4180 quoting; schedule strings carry commas.
std::string csv_field(const std::string& value) {
    if (value.find_first_of(",\"\n") == std::string::npos) {
        return value;
    }
    std::string quoted = "\"";
    for (char c : value) {
        if (c == '"') {
            quoted += '"';
        }
        quoted += c;
    }
    quoted += '"';
    return quoted;
}

} // namespace

std::string BenchReport::to_json() const {
    nlohmann::ordered_json j;
    j["schema_version"] = 1;
    j["model"] = model_label;
    j["workload"] = nlohmann::ordered_json::parse(workload.to_json());
    j["policy"] = policy;
    j["metric"] = metric;
    j["schedule"] = schedule;
    j["attn_path"] = attn_path;
    j["accounting_layers"] = accounting_layers;
    j["prefill_flops"] = prefill_flops;
    j["decode_flops"] = decode_flops;
    j["peak_activation_elems"] = peak_activation_elems;
    j["attention_matrix_allocs"] = attention_matrix_allocs;
    j["equivalent_token_count"] = equivalent_token_count;
    j["positional_bias_stat"] = positional_bias_stat;
    std::string mask;
    mask.reserve(retained_mask.size());
    for (std::uint8_t bit : retained_mask) {
        mask.push_back(bit != 0 ? '1' : '0');
    }
    j["retained_mask"] = mask;
    j["retained_per_layer"] = retained_per_layer;
    j["generated_ids"] = generated_ids;
    j["logits_digest"] = logits_digest;
    if (needles_total >= 0) {
        j["needles_total"] = needles_total;
        j["needles_retained"] = needles_retained;
    }
    j["warnings"] = warnings;
    j["wall_time_ms"] = wall_time_ms;
    return j.dump(2) + "\n";
}

BenchReport BenchReport::from_json_text(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("report: invalid JSON: ") + e.what());
    }
    BenchReport r;
    try {
        r.model_label = j.at("model").get<std::string>();
        r.workload = WorkloadSpec::from_json_text(j.at("workload").dump());
        r.policy = j.at("policy").get<std::string>();
        r.metric = j.at("metric").get<std::string>();
        r.schedule = j.at("schedule").get<std::string>();
        r.attn_path = j.at("attn_path").get<std::string>();
        r.accounting_layers = j.at("accounting_layers").get<int>();
        r.prefill_flops = j.at("prefill_flops").get<std::uint64_t>();
        r.decode_flops = j.at("decode_flops").get<std::uint64_t>();
        r.peak_activation_elems = j.at("peak_activation_elems").get<std::uint64_t>();
        r.attention_matrix_allocs = j.at("attention_matrix_allocs").get<std::uint64_t>();
        r.equivalent_token_count = j.at("equivalent_token_count").get<double>();
        r.positional_bias_stat = j.at("positional_bias_stat").get<double>();
        const std::string mask = j.at("retained_mask").get<std::string>();
        r.retained_mask.reserve(mask.size());
        for (char c : mask) {
            r.retained_mask.push_back(c == '1' ? 1 : 0);
        }
        r.retained_per_layer = j.at("retained_per_layer").get<std::vector<int>>();
        r.generated_ids = j.at("generated_ids").get<std::vector<int>>();
        r.logits_digest = j.at("logits_digest").get<std::string>();
        if (j.contains("needles_total")) {
            r.needles_total = j.at("needles_total").get<int>();
            r.needles_retained = j.at("needles_retained").get<int>();
        }
        r.warnings = j.at("warnings").get<std::vector<std::string>>();
        r.wall_time_ms = j.at("wall_time_ms").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("report: missing or mistyped key: ") + e.what());
    }
    return r;
}

BenchReport run_inference(const ModelWeights& weights, const ModelConfig& config,
                          const WorkloadSpec& workload, const RunRequest& request) {
    const auto t0 = std::chrono::steady_clock::now();
    workload.validate();
    config.validate();
    DropSchedule schedule = request.schedule;
    if (schedule.total_llm_layers == 0) {
        schedule.total_llm_layers = config.n_layers;
    }
    schedule.validate();
    if (request.compress && request.policy.kind == PolicyKind::one_time_v2drop &&
        !schedule.stages.empty()) {
        const int layer = request.one_time_layer > 0 ? request.one_time_layer
                                                     : schedule.stages.front().layer;
        schedule = derive_one_time_schedule(schedule, workload.vision_tokens, layer);
    }
    for (const DropStage& stage : schedule.stages) {
        if (request.compress && stage.layer > config.n_layers) {
            throw ConfigError("schedule: stage at layer " + std::to_string(stage.layer) +
                              " cannot execute on a " + std::to_string(config.n_layers) +
                              "-layer model");
        }
    }
    if (request.policy.needs_attention_weights() && request.path == AttnPath::streaming) {
        throw PolicyCompatibilityError(
            "policy incompatible with streaming attention: attention_guided needs "
            "materialized attention weights; rerun with the dense path");
    }

    const BuiltWorkload built = build_workload(workload, config);
    const TokenSequence seq =
        assemble_sequence(built.system_ids, built.vision_embeddings, built.text_ids,
                          weights.embedding_table);

    BenchReport report;
    report.model_label = request.model_label;
    report.workload = workload;
    report.policy = request.compress ? policy_name(request.policy.kind) : "none";
    report.metric = metric_name(request.policy.metric);
    report.schedule = request.schedule_text;
    report.attn_path = attn_path_name(request.path);
    report.accounting_layers = schedule.total_llm_layers;

    std::vector<ResolvedStage> stages;
    PrefillHook hook;
    std::unique_ptr<PolicyRunner> runner;
    if (request.compress && request.policy.kind != PolicyKind::none) {
        stages = resolve_schedule(schedule, workload.vision_tokens, &report.warnings);
        runner = std::make_unique<PolicyRunner>(request.policy, stages);
        hook = runner->as_hook();
    }

    PrefillResult pre = prefill(seq, weights, config, request.path, hook);
    DecodeResult dec =
        decode(pre, weights, config, request.path, workload.decode_steps, request.stop_id);

    report.prefill_flops = pre.flops;
    report.decode_flops = dec.flop_total - pre.flops;
    report.peak_activation_elems = dec.peak_activation_elems;
    report.attention_matrix_allocs = pre.attention_matrix_allocs;
    report.retained_per_layer = pre.retained_per_layer;
    report.generated_ids = dec.generated_ids;

    std::uint64_t digest = digest_f32(pre.last_logits);
    for (std::uint64_t step_digest : dec.per_step_logits_digest) {
        digest = digest_combine(digest, step_digest);
    }
    report.logits_digest = hex_digest(digest);

    // an uncompressed run keeps everything regardless of the schedule text
    const std::vector<ExactStage> exact =
        hook ? resolve_schedule_exact(schedule, workload.vision_tokens)
             : std::vector<ExactStage>{};
    report.equivalent_token_count = round2(equivalent_token_count(
        std::span<const ExactStage>(exact), workload.vision_tokens,
        schedule.total_llm_layers));

    report.retained_mask.assign(workload.vision_tokens, 0);
    std::vector<int> retained_block_indices;
    for (const TokenRef& ref : pre.final_retained) {
        if (ref.segment == Segment::vision) {
            const int block_index = ref.original_position - seq.vision_begin;
            report.retained_mask[block_index] = 1;
            retained_block_indices.push_back(block_index);
        }
    }
    report.positional_bias_stat =
        workload.vision_tokens >= 1
            ? positional_bias_stat(retained_block_indices, workload.vision_tokens)
            : 0.0;

    if (workload.embedding_mode == EmbeddingMode::duplicated_background_with_needles) {
        report.needles_total = static_cast<int>(built.needle_block_indices.size());
        report.needles_retained = 0;
        for (int p : built.needle_block_indices) {
            if (report.retained_mask[p] != 0) {
                ++report.needles_retained;
            }
        }
    }
    if (runner) {
        report.warnings.insert(report.warnings.end(), runner->warnings().begin(),
                               runner->warnings().end());
    }

    const auto t1 = std::chrono::steady_clock::now();
    report.wall_time_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    return report;
}

void emit_mask(std::span<const std::uint8_t> retained_mask, int grid_w, int grid_h,
               const std::string& path) {
    if (grid_w < 1 || grid_h < 1 ||
        static_cast<std::size_t>(grid_w) * grid_h != retained_mask.size()) {
        throw ShapeError("emit_mask: grid " + std::to_string(grid_w) + "x" +
                         std::to_string(grid_h) + " does not cover " +
                         std::to_string(retained_mask.size()) + " tokens");
    }
    std::ofstream pgm(path, std::ios::binary | std::ios::trunc);
    if (!pgm) {
        throw FormatError("mask file '" + path + "': cannot open for writing");
    }
    pgm << "P5\n" << grid_w << " " << grid_h << "\n255\n";
    for (std::uint8_t bit : retained_mask) {
        pgm.put(bit != 0 ? static_cast<char>(255) : static_cast<char>(128));
    }
    if (!pgm) {
        throw FormatError("mask file '" + path + "': write failed");
    }

    std::ofstream txt(path + ".txt", std::ios::binary | std::ios::trunc);
    if (!txt) {
        throw FormatError("mask file '" + path + ".txt': cannot open for writing");
    }
    for (int y = 0; y < grid_h; ++y) {
        for (int x = 0; x < grid_w; ++x) {
            txt.put(retained_mask[static_cast<std::size_t>(y) * grid_w + x] != 0 ? '#' : '.');
        }
        txt.put('\n');
    }
}

double measure_needle_recall(const ModelWeights& weights, const ModelConfig& config,
                             const WorkloadSpec& workload, const RunRequest& request,
                             int trials, std::uint64_t seed) {
    if (workload.embedding_mode != EmbeddingMode::duplicated_background_with_needles) {
        throw ConfigError("needle recall: workload has no needles");
    }
    if (trials < 1) {
        throw ConfigError("needle recall: trials must be >= 1");
    }
    int survived = 0;
    int total = 0;
    for (int t = 0; t < trials; ++t) {
        WorkloadSpec trial = workload;
        trial.seed = derive_seed(seed, static_cast<std::uint64_t>(t));
        trial.decode_steps = 0;
        RunRequest trial_request = request;
        trial_request.policy.seed = derive_seed(seed ^ 0x5eedull, static_cast<std::uint64_t>(t));
        const BenchReport r = run_inference(weights, config, trial, trial_request);
        survived += r.needles_retained;
        total += r.needles_total;
    }
    return total > 0 ? static_cast<double>(survived) / total : 0.0;
}

std::string run_compare(const ModelWeights& weights, const ModelConfig& config,
                        const CompareRequest& request) {
    if (request.policies.empty()) {
        throw ConfigError("compare: policy list is empty");
    }
    if (request.workload_paths.empty()) {
        throw ConfigError("compare: need at least one workload");
    }
    if (request.schedule_texts.empty() || request.paths.empty()) {
        throw ConfigError("compare: need at least one schedule and one attention path");
    }

    std::ostringstream csv;
    csv << "workload,policy,metric,schedule,attn_path,prefill_flops,decode_flops,"
           "peak_activation_elems,equivalent_token_count,positional_bias_stat,"
           "needle_recall\n";
    for (const std::string& workload_path : request.workload_paths) {
        const WorkloadSpec workload = WorkloadSpec::from_json_file(workload_path);
        for (std::size_t pi = 0; pi < request.policies.size(); ++pi) {
            for (const std::string& schedule_text : request.schedule_texts) {
                for (AttnPath path : request.paths) {
                    RunRequest run;
                    run.policy = request.policies[pi];
                    run.compress = request.compress_flags[pi];
                    run.schedule_text = schedule_text;
                    const int total_layers = request.accounting_layers > 0
                                                 ? request.accounting_layers
                                                 : config.n_layers;
                    run.schedule = parse_schedule(schedule_text, total_layers);
                    run.path = path;
                    run.model_label = "";
                    const BenchReport report =
                        run_inference(weights, config, workload, run);
                    std::string recall;
                    if (workload.embedding_mode ==
                        EmbeddingMode::duplicated_background_with_needles) {
                        const double value =
                            measure_needle_recall(weights, config, workload, run,
                                                  request.needle_trials,
                                                  request.needle_trial_seed);
                        char buf[32];
                        std::snprintf(buf, sizeof(buf), "%.4f", value);
                        recall = buf;
                    }
                    char bias[32];
                    std::snprintf(bias, sizeof(bias), "%.6f", report.positional_bias_stat);
                    char equiv[32];
                    std::snprintf(equiv, sizeof(equiv), "%.2f", report.equivalent_token_count);
                    csv << csv_field(workload_path) << ',' << report.policy << ','
                        << report.metric << ',' << csv_field(report.schedule) << ','
                        << report.attn_path << ',' << report.prefill_flops << ','
                        << report.decode_flops << ',' << report.peak_activation_elems << ','
                        << equiv << ',' << bias << ',' << recall << '\n';
                }
            }
        }
    }
    return csv.str();
}

bool reports_equal_ignoring_walltime(const std::string& json_a, const std::string& json_b) {
    nlohmann::ordered_json a;
    nlohmann::ordered_json b;
    try {
        a = nlohmann::ordered_json::parse(json_a);
        b = nlohmann::ordered_json::parse(json_b);
    } catch (const nlohmann::json::exception&) {
        return false;
    }
    a.erase("wall_time_ms");
    b.erase("wall_time_ms");
    return a.dump() == b.dump();
}

} // namespace v2drop
