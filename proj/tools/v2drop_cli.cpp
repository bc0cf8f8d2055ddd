// v2drop: generate toy decoder models, run single inferences with a token
// compression policy, sweep policy grids, and render retention masks.
//
// Exit codes: 0 success, 2 usage error, 3 policy/attention-path
// incompatibility, 4 file format error, 1 anything else.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "v2drop/errors.hpp"
#include "v2drop/harness.hpp"
#include "v2drop/model.hpp"
#include "v2drop/workload.hpp"

namespace {

using namespace v2drop;

std::uint64_t effective_seed(std::uint64_t configured) {
    // V2DROP_SEED overrides every configured seed (workload and policy).
    if (const char* env = std::getenv("V2DROP_SEED")) {
        try {
            return std::stoull(env);
        } catch (const std::exception&) {
            throw ConfigError("V2DROP_SEED is not an integer");
        }
    }
    return configured;
}

bool seed_overridden() {
    return std::getenv("V2DROP_SEED") != nullptr;
}

void write_file(const std::string& path, const std::string& contents) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw FormatError("output file '" + path + "': cannot open for writing");
    }
    out << contents;
    if (!out) {
        throw FormatError("output file '" + path + "': write failed");
    }
}

int cmd_gen_model(const std::string& out_path, std::uint64_t seed, int layers, int d_model,
                  int heads, int d_ff, int vocab, const std::string& positional,
                  double rope_base, bool needle) {
    ModelConfig config;
    config.n_layers = layers;
    config.d_model = d_model;
    config.n_heads = heads;
    config.d_ff = d_ff;
    config.vocab_size = vocab;
    config.positional_mode =
        positional == "nope" ? PositionalMode::nope : PositionalMode::rope;
    config.rope_base = rope_base;
    config.validate();

    const std::uint64_t s = effective_seed(seed);
    const ModelWeights weights =
        needle ? build_needle_model(config, s) : generate_weights(config, s);
    save_model(weights, config, out_path);
    std::cout << "wrote " << out_path << " (" << layers << " layers, d_model " << d_model
              << (needle ? ", needle construction" : "") << ")\n";
    return 0;
}

RunRequest make_run_request(const ModelConfig& config, const std::string& policy,
                            const std::string& metric, const std::string& schedule_text,
                            const std::string& path, int accounting_layers,
                            int one_time_layer, std::uint64_t policy_seed,
                            const std::string& model_label) {
    RunRequest request;
    const PolicyKind kind = policy_from_name(policy);
    request.compress = kind != PolicyKind::none;
    request.policy.kind = kind;
    request.policy.metric = metric_from_name(metric);
    request.policy.seed = effective_seed(policy_seed);
    request.schedule_text = schedule_text;
    const int total = accounting_layers > 0 ? accounting_layers : config.n_layers;
    request.schedule = parse_schedule(schedule_text, total);
    request.one_time_layer = one_time_layer;
    request.path = attn_path_from_name(path);
    request.model_label = model_label;
    return request;
}

int cmd_run(const std::string& model_path, const std::string& workload_path,
            const std::string& policy, const std::string& metric,
            const std::string& schedule_text, const std::string& path,
            int accounting_layers, int one_time_layer, std::uint64_t policy_seed,
            const std::string& out_path, const std::string& mask_path, int stop_id) {
    const LoadedModel model = load_model(model_path);
    WorkloadSpec workload = WorkloadSpec::from_json_file(workload_path);
    if (seed_overridden()) {
        workload.seed = effective_seed(workload.seed);
    }

    RunRequest request = make_run_request(model.config, policy, metric, schedule_text, path,
                                          accounting_layers, one_time_layer, policy_seed,
                                          model_path);
    if (stop_id >= 0) {
        request.stop_id = stop_id;
    }

    const BenchReport report = run_inference(model.weights, model.config, workload, request);
    const std::string json = report.to_json();
    if (out_path.empty()) {
        std::cout << json;
    } else {
        write_file(out_path, json);
    }
    if (!mask_path.empty()) {
        int grid_w = workload.grid_w;
        int grid_h = workload.grid_h;
        if (grid_w == 0) {
            grid_w = workload.vision_tokens;
            grid_h = workload.vision_tokens > 0 ? 1 : 0;
        }
        emit_mask(report.retained_mask, grid_w, grid_h, mask_path);
    }
    return 0;
}

// Each --workloads argument is a workload JSON or a directory of them
// (taken in name order).
std::vector<std::string> expand_workloads(const std::vector<std::string>& args) {
    namespace fs = std::filesystem;
    std::vector<std::string> paths;
    for (const std::string& arg : args) {
        if (fs::is_directory(arg)) {
            std::vector<std::string> found;
            for (const auto& entry : fs::directory_iterator(arg)) {
                if (entry.is_regular_file() && entry.path().extension() == ".json") {
                    found.push_back(entry.path().string());
                }
            }
            std::sort(found.begin(), found.end());
            paths.insert(paths.end(), found.begin(), found.end());
        } else {
            paths.push_back(arg);
        }
    }
    return paths;
}

int cmd_compare(const std::string& model_path, const std::vector<std::string>& workloads,
                const std::vector<std::string>& policies, const std::string& metric,
                const std::vector<std::string>& schedules,
                const std::vector<std::string>& paths, int accounting_layers,
                std::uint64_t policy_seed, int needle_trials, const std::string& out_path) {
    if (policies.empty()) {
        throw ConfigError("compare: policy list is empty");
    }
    const LoadedModel model = load_model(model_path);
    CompareRequest request;
    request.workload_paths = expand_workloads(workloads);
    for (const std::string& name : policies) {
        PolicyDescriptor descriptor;
        const PolicyKind kind = policy_from_name(name);
        descriptor.kind = kind;
        descriptor.metric = metric_from_name(metric);
        descriptor.seed = effective_seed(policy_seed);
        request.policies.push_back(descriptor);
        request.compress_flags.push_back(kind != PolicyKind::none);
    }
    request.schedule_texts = schedules;
    for (const std::string& p : paths) {
        request.paths.push_back(attn_path_from_name(p));
    }
    request.accounting_layers = accounting_layers;
    request.needle_trials = needle_trials;
    request.needle_trial_seed = effective_seed(1);

    const std::string csv = run_compare(model.weights, model.config, request);
    if (out_path.empty()) {
        std::cout << csv;
    } else {
        write_file(out_path, csv);
    }
    return 0;
}

int cmd_mask(const std::string& report_path, int grid_w, int grid_h,
             const std::string& out_path) {
    std::ifstream in(report_path, std::ios::binary);
    if (!in) {
        throw FormatError("report file '" + report_path + "': cannot open");
    }
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const BenchReport report = BenchReport::from_json_text(text);
    int w = grid_w;
    int h = grid_h;
    if (w == 0 && report.workload.grid_w > 0) {
        w = report.workload.grid_w;
        h = report.workload.grid_h;
    }
    if (w == 0) {
        w = static_cast<int>(report.retained_mask.size());
        h = report.retained_mask.empty() ? 0 : 1;
    }
    emit_mask(report.retained_mask, w, h, out_path);
    std::cout << "wrote " << out_path << " and " << out_path << ".txt\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"toy decoder runtime with progressive vision-token dropping"};
    app.require_subcommand(1);

    // gen-model
    auto* gen = app.add_subcommand("gen-model", "generate a deterministic weight file");
    std::string gen_out;
    std::uint64_t gen_seed = 42;
    int gen_layers = 8, gen_d = 64, gen_heads = 4, gen_ff = 172, gen_vocab = 256;
    std::string gen_positional = "rope";
    double gen_rope_base = 10000.0;
    bool gen_needle = false;
    gen->add_option("--out", gen_out, "output weight file")->required();
    gen->add_option("--seed", gen_seed, "generator seed");
    gen->add_option("--layers", gen_layers, "decoder layers");
    gen->add_option("--d-model", gen_d, "hidden width");
    gen->add_option("--heads", gen_heads, "attention heads");
    gen->add_option("--d-ff", gen_ff, "MLP width");
    gen->add_option("--vocab", gen_vocab, "vocabulary size");
    gen->add_option("--positional", gen_positional, "rope|nope")
        ->check(CLI::IsMember({"rope", "nope"}));
    gen->add_option("--rope-base", gen_rope_base, "rotary base");
    gen->add_flag("--needle", gen_needle,
                  "needle calibration construction instead of random weights");

    // run
    auto* run = app.add_subcommand("run", "run one inference and write a JSON report");
    std::string run_model, run_workload, run_policy = "v2drop", run_metric = "l2";
    std::string run_schedule, run_path = "streaming", run_out, run_mask;
    int run_accounting = 0, run_one_time_layer = 0, run_stop = -1;
    std::uint64_t run_policy_seed = 0;
    run->add_option("--model", run_model, "weight file")->required();
    run->add_option("--workload", run_workload, "workload JSON file")->required();
    run->add_option("--policy", run_policy,
                    "none|v2drop|random|attention_guided|one_time_v2drop");
    run->add_option("--metric", run_metric, "l1|l2|cosine");
    run->add_option("--schedule", run_schedule,
                    "drop stages, layer:ratio or layer=K, comma separated");
    run->add_option("--attn-path", run_path, "dense|streaming");
    run->add_option("--accounting-layers", run_accounting,
                    "LLM depth for equivalent-token accounting (default: model depth)");
    run->add_option("--one-time-layer", run_one_time_layer,
                    "stage layer for one_time_v2drop (default: first stage)");
    run->add_option("--policy-seed", run_policy_seed, "seed for the random policy");
    run->add_option("--stop-id", run_stop, "stop decoding at this token id");
    run->add_option("--out", run_out, "report path (default: stdout)");
    run->add_option("--mask", run_mask, "also write a retention-mask PGM here");

    // compare
    auto* cmp = app.add_subcommand("compare", "grid of runs, one CSV row each");
    std::string cmp_model, cmp_metric = "l2", cmp_out;
    std::vector<std::string> cmp_workloads, cmp_policies, cmp_schedules;
    std::vector<std::string> cmp_paths = {"streaming"};
    int cmp_accounting = 0, cmp_trials = 50;
    std::uint64_t cmp_policy_seed = 0;
    cmp->add_option("--model", cmp_model, "weight file")->required();
    cmp->add_option("--workloads", cmp_workloads,
                    "workload JSON files or directories of them")
        ->required();
    cmp->add_option("--policies", cmp_policies, "policy names")
        ->required()
        ->delimiter(',');
    cmp->add_option("--metric", cmp_metric, "l1|l2|cosine");
    cmp->add_option("--schedules", cmp_schedules,
                    "schedule strings, ';'-separated (stages use commas)")
        ->required()
        ->delimiter(';');
    cmp->add_option("--attn-paths", cmp_paths, "dense|streaming")->delimiter(',');
    cmp->add_option("--accounting-layers", cmp_accounting, "accounting depth");
    cmp->add_option("--needle-trials", cmp_trials, "trials per needle-recall estimate");
    cmp->add_option("--policy-seed", cmp_policy_seed, "seed for the random policy");
    cmp->add_option("--out", cmp_out, "CSV path (default: stdout)");

    // mask
    auto* mask = app.add_subcommand("mask", "render a report's retained mask as PGM");
    std::string mask_report, mask_out;
    int mask_w = 0, mask_h = 0;
    mask->add_option("--report", mask_report, "report JSON from `run`")->required();
    mask->add_option("--grid-w", mask_w, "grid width (default: workload grid)");
    mask->add_option("--grid-h", mask_h, "grid height");
    mask->add_option("--out", mask_out, "output PGM path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (gen->parsed()) {
            return cmd_gen_model(gen_out, gen_seed, gen_layers, gen_d, gen_heads, gen_ff,
                                 gen_vocab, gen_positional, gen_rope_base, gen_needle);
        }
        if (run->parsed()) {
            return cmd_run(run_model, run_workload, run_policy, run_metric, run_schedule,
                           run_path, run_accounting, run_one_time_layer, run_policy_seed,
                           run_out, run_mask, run_stop);
        }
        if (cmp->parsed()) {
            return cmd_compare(cmp_model, cmp_workloads, cmp_policies, cmp_metric,
                               cmp_schedules, cmp_paths, cmp_accounting, cmp_policy_seed,
                               cmp_trials, cmp_out);
        }
        if (mask->parsed()) {
            return cmd_mask(mask_report, mask_w, mask_h, mask_out);
        }
    } catch (const PolicyCompatibilityError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
