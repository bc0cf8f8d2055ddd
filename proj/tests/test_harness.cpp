// end-to-end runs through the bench harness: reports, masks, grids, needles

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "v2drop/errors.hpp"
#include "v2drop/harness.hpp"
#include "v2drop/oracle.hpp"
#include "v2drop/workload.hpp"

using namespace v2drop;

namespace {

std::filesystem::path temp_dir() {
    const auto dir = std::filesystem::temp_directory_path() / "v2drop_harness_tests";
    std::filesystem::create_directories(dir);
    return dir;
}

std::string slurp(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::string((std::istreambuf_iterator<char>(in)),
                       std::istreambuf_iterator<char>());
}

WorkloadSpec small_workload() {
    WorkloadSpec w;
    w.seed = 5;
    w.vision_tokens = 16;
    w.system_len = 2;
    w.text_len = 4;
    w.decode_steps = 3;
    w.grid_w = 4;
    w.grid_h = 4;
    return w;
}

RunRequest request_for(const ModelConfig& config, PolicyKind kind,
                       const std::string& schedule_text, AttnPath path) {
    RunRequest r;
    r.policy.kind = kind;
    r.compress = kind != PolicyKind::none;
    r.schedule_text = schedule_text;
    r.schedule = parse_schedule(schedule_text, config.n_layers);
    r.path = path;
    r.model_label = "test";
    return r;
}

// Minimal structural validator for the subset of JSON Schema the report
// schema uses: required keys, primitive types, enums, additionalProperties.
void validate_against_schema(const nlohmann::json& schema, const nlohmann::json& value,
                             const std::string& where) {
    const std::string type = schema.value("type", "object");
    INFO("at ", where);
    if (type == "object") {
        REQUIRE(value.is_object());
        for (const auto& req : schema.value("required", nlohmann::json::array())) {
            INFO("missing required key ", req.get<std::string>());
            REQUIRE(value.contains(req.get<std::string>()));
        }
        const auto& props = schema.value("properties", nlohmann::json::object());
        if (schema.value("additionalProperties", true) == false) {
            for (const auto& [key, sub] : value.items()) {
                (void)sub;
                INFO("unexpected key ", key);
                REQUIRE(props.contains(key));
            }
        }
        for (const auto& [key, sub_schema] : props.items()) {
            if (value.contains(key)) {
                validate_against_schema(sub_schema, value.at(key), where + "." + key);
            }
        }
    } else if (type == "integer") {
        REQUIRE(value.is_number_integer());
    } else if (type == "number") {
        REQUIRE(value.is_number());
    } else if (type == "string") {
        REQUIRE(value.is_string());
        if (schema.contains("enum")) {
            bool found = false;
            for (const auto& option : schema.at("enum")) {
                found = found || option == value;
            }
            REQUIRE(found);
        }
    } else if (type == "array") {
        REQUIRE(value.is_array());
        if (schema.contains("items")) {
            for (std::size_t i = 0; i < value.size(); ++i) {
                validate_against_schema(schema.at("items"), value.at(i),
                                        where + "[" + std::to_string(i) + "]");
            }
        }
    }
}

} // namespace

TEST_CASE("workload construction is deterministic and seed sensitive") {
    ModelConfig config;
    const WorkloadSpec spec = small_workload();
    const BuiltWorkload a = build_workload(spec, config);
    const BuiltWorkload b = build_workload(spec, config);
    CHECK(a.vision_embeddings.data == b.vision_embeddings.data);
    CHECK(a.system_ids == b.system_ids);
    CHECK(a.text_ids == b.text_ids);

    WorkloadSpec other = spec;
    other.seed = 6;
    const BuiltWorkload c = build_workload(other, config);
    CHECK(a.vision_embeddings.data != c.vision_embeddings.data);
}

TEST_CASE("needle workloads mark the needle axes") {
    ModelConfig config;
    WorkloadSpec spec = small_workload();
    spec.embedding_mode = EmbeddingMode::duplicated_background_with_needles;
    spec.n_needles = 2;
    const BuiltWorkload built = build_workload(spec, config);
    REQUIRE(built.needle_block_indices.size() == 2);
    std::set<int> needles(built.needle_block_indices.begin(),
                          built.needle_block_indices.end());
    for (int i = 0; i < spec.vision_tokens; ++i) {
        if (needles.count(i)) {
            CHECK(built.vision_embeddings.at(i, kNeedleAxis) == kVisionAmplitude);
            CHECK(built.vision_embeddings.at(i, kBackgroundAxis) == 0.0f);
        } else {
            CHECK(built.vision_embeddings.at(i, kNeedleAxis) == 0.0f);
            CHECK(built.vision_embeddings.at(i, kBackgroundAxis) == kVisionAmplitude);
        }
    }

    const int forced[2] = {0, 15};
    const BuiltWorkload pinned = build_workload(spec, config, forced);
    CHECK(pinned.needle_block_indices == std::vector<int>{0, 15});
}

TEST_CASE("workload json round trips and validates") {
    WorkloadSpec spec = small_workload();
    const WorkloadSpec back = WorkloadSpec::from_json_text(spec.to_json());
    CHECK(back.seed == spec.seed);
    CHECK(back.vision_tokens == spec.vision_tokens);
    CHECK(back.grid_w == 4);
    CHECK_THROWS_AS(WorkloadSpec::from_json_text("{}"), FormatError);
    WorkloadSpec bad = spec;
    bad.grid_w = 3;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("schedule grammar parses ratios and absolute counts") {
    const DropSchedule s = parse_schedule("3:0.5,17:0.7,22:1.0", 32);
    REQUIRE(s.stages.size() == 3);
    CHECK(s.stages[0].layer == 3);
    CHECK(s.stages[0].prune_ratio == doctest::Approx(0.5));
    CHECK(s.stages[2].prune_ratio == doctest::Approx(1.0));

    const DropSchedule abs = parse_schedule("2=8,5=3", 8);
    CHECK_FALSE(abs.stages[0].is_ratio);
    CHECK(abs.stages[0].target_count == 8);
    CHECK(abs.stages[1].target_count == 3);

    CHECK(parse_schedule("", 8).stages.empty());
    CHECK_THROWS_AS(parse_schedule("3", 8), ConfigError);
    CHECK_THROWS_AS(parse_schedule("3:0.5,2:0.5", 8), ConfigError);
    CHECK_THROWS_AS(parse_schedule("9:0.5", 8), ConfigError);
    CHECK_THROWS_AS(parse_schedule("x:0.5", 8), ConfigError);
    CHECK_THROWS_AS(parse_schedule("3:abc", 8), ConfigError);
}

TEST_CASE("baseline run keeps every vision token") {
    ModelConfig config;
    const ModelWeights weights = generate_weights(config, 42);
    const WorkloadSpec workload = small_workload();
    const RunRequest request = request_for(config, PolicyKind::none, "", AttnPath::streaming);
    const BenchReport report = run_inference(weights, config, workload, request);
    CHECK(report.policy == "none");
    CHECK(report.retained_mask == std::vector<std::uint8_t>(16, 1));
    CHECK(report.equivalent_token_count == doctest::Approx(16.0));
    CHECK(report.positional_bias_stat == doctest::Approx(0.0));
    CHECK(report.generated_ids.size() == 3);
    CHECK(report.attention_matrix_allocs == 0);
}

TEST_CASE("an uncompressed run reports the full token average even with a schedule") {
    ModelConfig config;
    const ModelWeights weights = generate_weights(config, 42);
    const WorkloadSpec workload = small_workload();
    RunRequest request = request_for(config, PolicyKind::none, "2:0.5,5:0.5",
                                     AttnPath::streaming);
    const BenchReport report = run_inference(weights, config, workload, request);
    CHECK(report.equivalent_token_count == doctest::Approx(16.0));
    CHECK(report.retained_mask == std::vector<std::uint8_t>(16, 1));
}

TEST_CASE("keep-everything v2drop matches the baseline digest") {
    ModelConfig config;
    const ModelWeights weights = generate_weights(config, 42);
    const WorkloadSpec workload = small_workload();
    const RunRequest none = request_for(config, PolicyKind::none, "", AttnPath::streaming);
    const RunRequest identity =
        request_for(config, PolicyKind::v2drop, "2:0.0,5:0.0", AttnPath::streaming);
    const BenchReport a = run_inference(weights, config, workload, none);
    const BenchReport b = run_inference(weights, config, workload, identity);
    CHECK(a.logits_digest == b.logits_digest);
    CHECK(a.generated_ids == b.generated_ids);
    CHECK(b.retained_mask == std::vector<std::uint8_t>(16, 1));
}

TEST_CASE("reports are byte-stable apart from wall time") {
    ModelConfig config;
    const ModelWeights weights = generate_weights(config, 42);
    const WorkloadSpec workload = small_workload();
    const RunRequest request =
        request_for(config, PolicyKind::v2drop, "2:0.5,5:0.5", AttnPath::streaming);
    const std::string a = run_inference(weights, config, workload, request).to_json();
    const std::string b = run_inference(weights, config, workload, request).to_json();
    CHECK(reports_equal_ignoring_walltime(a, b));
}

TEST_CASE("report json validates against the frozen schema document") {
    const nlohmann::json schema =
        nlohmann::json::parse(slurp(std::filesystem::path(V2DROP_SOURCE_DIR) / "docs" /
                                    "report_schema.json"));
    ModelConfig config;
    const ModelWeights weights = generate_weights(config, 42);

    WorkloadSpec workload = small_workload();
    RunRequest request =
        request_for(config, PolicyKind::v2drop, "2:0.5,5:0.5", AttnPath::streaming);
    validate_against_schema(
        schema, nlohmann::json::parse(run_inference(weights, config, workload, request).to_json()),
        "report");

    workload.embedding_mode = EmbeddingMode::duplicated_background_with_needles;
    workload.n_needles = 1;
    request.path = AttnPath::dense;
    request.policy.kind = PolicyKind::attention_guided;
    validate_against_schema(
        schema, nlohmann::json::parse(run_inference(weights, config, workload, request).to_json()),
        "report");
}

TEST_CASE("report json round trips through the parser") {
    ModelConfig config;
    const ModelWeights weights = generate_weights(config, 42);
    const WorkloadSpec workload = small_workload();
    const RunRequest request =
        request_for(config, PolicyKind::v2drop, "2:0.5,5:0.5", AttnPath::streaming);
    const BenchReport report = run_inference(weights, config, workload, request);
    const BenchReport back = BenchReport::from_json_text(report.to_json());
    CHECK(back.logits_digest == report.logits_digest);
    CHECK(back.retained_mask == report.retained_mask);
    CHECK(back.workload.vision_tokens == 16);
}

TEST_CASE("prefill flops are policy independent for a fixed schedule") {
    ModelConfig config;
    const ModelWeights weights = generate_weights(config, 42);
    const WorkloadSpec workload = small_workload();
    const std::string schedule = "2:0.5,5:0.5";
    std::vector<std::uint64_t> flops;
    std::vector<std::vector<std::uint8_t>> masks;
    for (PolicyKind kind : {PolicyKind::v2drop, PolicyKind::random_drop}) {
        RunRequest request = request_for(config, kind, schedule, AttnPath::streaming);
        request.policy.seed = 7;
        const BenchReport report = run_inference(weights, config, workload, request);
        flops.push_back(report.prefill_flops);
        masks.push_back(report.retained_mask);
    }
    CHECK(flops[0] == flops[1]);
    CHECK(masks[0] != masks[1]); // same counts, different identities
}

TEST_CASE("mask files render retention as pgm plus text") {
    const auto dir = temp_dir();
    const auto path = dir / "mask.pgm";
    std::vector<std::uint8_t> mask(16, 1);
    emit_mask(mask, 4, 4, path.string());
    const std::string pgm = slurp(path);
    CHECK(pgm.substr(0, 3) == "P5\n");
    CHECK(pgm.size() == std::string("P5\n4 4\n255\n").size() + 16);
    for (std::size_t i = pgm.size() - 16; i < pgm.size(); ++i) {
        CHECK(static_cast<unsigned char>(pgm[i]) == 255);
    }

    std::fill(mask.begin(), mask.end(), 0);
    emit_mask(mask, 4, 4, path.string());
    const std::string dropped = slurp(path);
    for (std::size_t i = dropped.size() - 16; i < dropped.size(); ++i) {
        CHECK(static_cast<unsigned char>(dropped[i]) == 128);
    }
    const std::string text = slurp(path.string() + ".txt");
    CHECK(text == "....\n....\n....\n....\n");

    mask[3] = 1;
    CHECK_THROWS_AS(emit_mask(mask, 5, 4, path.string()), ShapeError);
}

TEST_CASE("mask popcount equals the final keep target") {
    ModelConfig config;
    const ModelWeights weights = generate_weights(config, 42);
    const WorkloadSpec workload = small_workload();
    const RunRequest request =
        request_for(config, PolicyKind::v2drop, "2:0.5,5:0.5", AttnPath::streaming);
    const BenchReport report = run_inference(weights, config, workload, request);
    int popcount = 0;
    for (std::uint8_t bit : report.retained_mask) {
        popcount += bit;
    }
    CHECK(popcount == 4); // 16 -> 8 -> 4
}

TEST_CASE("compare emits one row per combination with the frozen header") {
    ModelConfig config;
    const ModelWeights weights = generate_weights(config, 42);
    const auto dir = temp_dir();
    const auto w_path = dir / "w.json";
    {
        std::ofstream out(w_path);
        out << small_workload().to_json();
    }
    CompareRequest request;
    request.workload_paths = {w_path.string()};
    PolicyDescriptor v2;
    v2.kind = PolicyKind::v2drop;
    PolicyDescriptor rnd;
    rnd.kind = PolicyKind::random_drop;
    rnd.seed = 3;
    request.policies = {v2, rnd};
    request.compress_flags = {true, true};
    request.schedule_texts = {"2:0.5,5:0.5", "2:0.75"};
    request.paths = {AttnPath::streaming};
    const std::string csv = run_compare(weights, config, request);

    std::istringstream lines(csv);
    std::string line;
    std::getline(lines, line);
    CHECK(line ==
          "workload,policy,metric,schedule,attn_path,prefill_flops,decode_flops,"
          "peak_activation_elems,equivalent_token_count,positional_bias_stat,needle_recall");
    int rows = 0;
    while (std::getline(lines, line)) {
        ++rows;
        // comma-bearing schedules must arrive quoted so columns stay aligned
        if (line.find("2:0.5,5:0.5") != std::string::npos) {
            CHECK(line.find("\"2:0.5,5:0.5\"") != std::string::npos);
        }
    }
    CHECK(rows == 4); // 1 workload x 2 policies x 2 schedules x 1 path

    CompareRequest empty = request;
    empty.policies.clear();
    empty.compress_flags.clear();
    CHECK_THROWS_AS(run_compare(weights, config, empty), ConfigError);
}

TEST_CASE("the canonical 576-token schedule runs and reports its equivalents") {
    ModelConfig config;
    config.n_layers = 24;
    config.d_model = 32;
    config.n_heads = 2;
    config.d_ff = 86;
    const ModelWeights weights = generate_weights(config, 42);

    WorkloadSpec workload;
    workload.seed = 3;
    workload.vision_tokens = 576;
    workload.system_len = 4;
    workload.text_len = 8;
    workload.decode_steps = 0;

    RunRequest request;
    request.policy.kind = PolicyKind::v2drop;
    request.schedule_text = "3:0.5,17:0.7,22:1.0";
    request.schedule = parse_schedule(request.schedule_text, 32);
    request.path = AttnPath::streaming;
    const BenchReport report = run_inference(weights, config, workload, request);

    CHECK(report.accounting_layers == 32);
    CHECK(report.equivalent_token_count == doctest::Approx(193.5));

    // retained counts per layer follow the resolved stages exactly:
    // prefix of 12 tokens plus 576 -> 288 -> 86 -> 0 vision survivors
    REQUIRE(report.retained_per_layer.size() == 24);
    for (int layer = 1; layer <= 24; ++layer) {
        int vision = 576;
        if (layer > 3) vision = 288;
        if (layer > 17) vision = 86;
        if (layer > 22) vision = 0;
        CHECK(report.retained_per_layer[layer - 1] == vision + 12);
    }
    int popcount = 0;
    for (std::uint8_t bit : report.retained_mask) {
        popcount += bit;
    }
    CHECK(popcount == 0); // final stage prunes everything
    CHECK(report.positional_bias_stat == 0.0);
    CHECK(report.generated_ids.empty());
}

TEST_CASE("needle recall: random policy tracks K over M and v2drop finds the needle") {
    ModelConfig config;
    config.n_layers = 6;
    const ModelWeights weights = build_needle_model(config, 9);

    WorkloadSpec workload;
    workload.seed = 1;
    workload.vision_tokens = 16;
    workload.text_len = 2;
    workload.embedding_mode = EmbeddingMode::duplicated_background_with_needles;
    workload.n_needles = 1;

    RunRequest v2 = request_for(config, PolicyKind::v2drop, "2:0.5,4:0.5", AttnPath::streaming);
    const double v2_recall = measure_needle_recall(weights, config, workload, v2, 64, 10);
    CHECK(v2_recall == doctest::Approx(1.0));

    RunRequest rnd =
        request_for(config, PolicyKind::random_drop, "2:0.5,4:0.5", AttnPath::streaming);
    const double rnd_recall = measure_needle_recall(weights, config, workload, rnd, 400, 11);
    // survival through uniform stages is K_final / M = 4/16
    CHECK(rnd_recall == doctest::Approx(0.25).epsilon(0.35));
    CHECK(rnd_recall > 0.05);
    CHECK(rnd_recall < 0.5);
}

TEST_CASE("one-time policy reports a matched equivalent count") {
    ModelConfig config;
    config.n_layers = 6;
    const ModelWeights weights = generate_weights(config, 21);
    WorkloadSpec workload = small_workload();
    workload.decode_steps = 0;

    RunRequest progressive =
        request_for(config, PolicyKind::v2drop, "2:0.5,4:0.7", AttnPath::streaming);
    RunRequest one_time =
        request_for(config, PolicyKind::one_time_v2drop, "2:0.5,4:0.7", AttnPath::streaming);
    const BenchReport prog = run_inference(weights, config, workload, progressive);
    const BenchReport once = run_inference(weights, config, workload, one_time);
    CHECK(std::abs(prog.equivalent_token_count - once.equivalent_token_count) <= 1.0);
    CHECK(prog.prefill_flops != once.prefill_flops);
    // one stage instead of two: retained counts change exactly once
    std::set<int> distinct(once.retained_per_layer.begin(), once.retained_per_layer.end());
    CHECK(distinct.size() == 2);
}

TEST_CASE("calibrate_needle measures recall and positional symmetry") {
    ModelConfig config;
    config.n_layers = 6;
    const ModelWeights weights = build_needle_model(config, 9);
    const auto model_path = (temp_dir() / "needle.v2dm").string();
    save_model(weights, config, model_path);

    oracle::NeedleProtocol protocol;
    protocol.vision_tokens = 16;
    const oracle::NeedleCalibration cal =
        oracle::calibrate_needle(model_path, 100, 77, protocol);
    CHECK(cal.recall_v2drop == doctest::Approx(1.0));
    CHECK(cal.recall_one_time == doctest::Approx(1.0));
    CHECK(cal.recall_first_pos == doctest::Approx(1.0));
    CHECK(cal.recall_last_pos == doctest::Approx(1.0));
    // stages resolve 16 -> 8 -> 2, so uniform survival is 2/16
    CHECK(cal.analytic_random == doctest::Approx(0.125));
    CHECK(std::abs(cal.recall_random - cal.analytic_random) < 0.15);

    CHECK_THROWS_AS(oracle::calibrate_needle((temp_dir() / "missing.v2dm").string(), 10, 1),
                    FormatError);
}
