#include "v2drop/workload.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "v2drop/errors.hpp"
#include "v2drop/rng.hpp"

namespace v2drop {

namespace {

// Lane indices for deriving independent streams from the workload seed.
enum : std::uint64_t { kLaneSystem = 1, kLaneText = 2, kLaneVision = 3, kLaneNeedle = 4 };

std::string mode_name(EmbeddingMode mode) {
    return mode == EmbeddingMode::random_gaussian ? "random_gaussian"
                                                  : "duplicated_background_with_needles";
}

EmbeddingMode mode_from_name(const std::string& name) {
    if (name == "random_gaussian") {
        return EmbeddingMode::random_gaussian;
    }
    if (name == "duplicated_background_with_needles") {
        return EmbeddingMode::duplicated_background_with_needles;
    }
    throw FormatError("workload: unknown embedding_mode '" + name + "'");
}

} // namespace

void WorkloadSpec::validate() const {
    if (vision_tokens < 0 || system_len < 0 || text_len < 0 || decode_steps < 0) {
        throw ConfigError("workload: counts must be >= 0");
    }
    if (vision_tokens + system_len + text_len < 1) {
        throw ConfigError("workload: sequence must contain at least one token");
    }
    if (embedding_mode == EmbeddingMode::duplicated_background_with_needles) {
        if (n_needles < 1 || n_needles > vision_tokens) {
            throw ConfigError("workload: n_needles must lie in 1..vision_tokens");
        }
    }
    if ((grid_w > 0) != (grid_h > 0)) {
        throw ConfigError("workload: grid_w and grid_h must be given together");
    }
    if (grid_w > 0 && grid_w * grid_h != vision_tokens) {
        throw ConfigError("workload: grid_w*grid_h must equal vision_tokens");
    }
}

std::string WorkloadSpec::to_json() const {
    nlohmann::ordered_json j;
    j["seed"] = seed;
    j["vision_tokens"] = vision_tokens;
    j["system_len"] = system_len;
    j["text_len"] = text_len;
    j["decode_steps"] = decode_steps;
    j["embedding_mode"] = mode_name(embedding_mode);
    if (embedding_mode == EmbeddingMode::duplicated_background_with_needles) {
        j["n_needles"] = n_needles;
    }
    if (grid_w > 0) {
        j["grid_w"] = grid_w;
        j["grid_h"] = grid_h;
    }
    return j.dump(2) + "\n";
}

WorkloadSpec WorkloadSpec::from_json_text(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("workload: invalid JSON: ") + e.what());
    }
    WorkloadSpec spec;
    try {
        spec.seed = j.at("seed").get<std::uint64_t>();
        spec.vision_tokens = j.at("vision_tokens").get<int>();
        spec.system_len = j.at("system_len").get<int>();
        spec.text_len = j.at("text_len").get<int>();
        spec.decode_steps = j.at("decode_steps").get<int>();
        spec.embedding_mode = mode_from_name(j.at("embedding_mode").get<std::string>());
        if (j.contains("n_needles")) {
            spec.n_needles = j.at("n_needles").get<int>();
        }
        if (j.contains("grid_w")) {
            spec.grid_w = j.at("grid_w").get<int>();
        }
        if (j.contains("grid_h")) {
            spec.grid_h = j.at("grid_h").get<int>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("workload: missing or mistyped key: ") + e.what());
    }
    spec.validate();
    return spec;
}

WorkloadSpec WorkloadSpec::from_json_file(const std::string& path) {
    std::ifstream file(path, std::ios::binary);
    if (!file) {
        throw FormatError("workload file '" + path + "': cannot open");
    }
    std::ostringstream buf;
    buf << file.rdbuf();
    return from_json_text(buf.str());
}

namespace {

std::vector<int> random_token_ids(int count, int vocab, Xoshiro256ss& rng) {
    std::vector<int> ids(count);
    for (int& id : ids) {
        id = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(vocab)));
    }
    return ids;
}

std::vector<int> sample_needle_positions(int vision_tokens, int n_needles,
                                         Xoshiro256ss& rng) {
    // Floyd-style distinct sampling at small scale: shuffle-prefix.
    std::vector<int> all(vision_tokens);
    for (int i = 0; i < vision_tokens; ++i) {
        all[i] = i;
    }
    for (int i = 0; i < n_needles; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(
                                      rng.next_below(static_cast<std::uint64_t>(
                                          vision_tokens - i)));
        std::swap(all[i], all[j]);
    }
    all.resize(n_needles);
    std::sort(all.begin(), all.end());
    return all;
}

} // namespace

BuiltWorkload build_workload(const WorkloadSpec& spec, const ModelConfig& config) {
    return build_workload(spec, config, {});
}

BuiltWorkload build_workload(const WorkloadSpec& spec, const ModelConfig& config,
                             std::span<const int> forced_needle_positions) {
    spec.validate();
    config.validate();
    const int d = config.d_model;

    BuiltWorkload built;
    {
        Xoshiro256ss rng(derive_seed(spec.seed, kLaneSystem));
        built.system_ids = random_token_ids(spec.system_len, config.vocab_size, rng);
    }
    {
        Xoshiro256ss rng(derive_seed(spec.seed, kLaneText));
        built.text_ids = random_token_ids(spec.text_len, config.vocab_size, rng);
    }

    built.vision_embeddings = Tensor2D(spec.vision_tokens, d);
    if (spec.embedding_mode == EmbeddingMode::random_gaussian) {
        Xoshiro256ss rng(derive_seed(spec.seed, kLaneVision));
        const double scale = 1.0 / std::sqrt(static_cast<double>(d));
        for (float& v : built.vision_embeddings.data) {
            v = static_cast<float>(rng.next_gaussian() * scale);
        }
    } else {
        if (!forced_needle_positions.empty()) {
            built.needle_block_indices.assign(forced_needle_positions.begin(),
                                              forced_needle_positions.end());
            for (int p : built.needle_block_indices) {
                if (p < 0 || p >= spec.vision_tokens) {
                    throw ConfigError("workload: forced needle position out of range");
                }
            }
        } else {
            Xoshiro256ss rng(derive_seed(spec.seed, kLaneNeedle));
            built.needle_block_indices =
                sample_needle_positions(spec.vision_tokens, spec.n_needles, rng);
        }
        // Background tokens are one repeated axis vector, needles another;
        // same norm, different direction. See build_needle_model().
        for (int i = 0; i < spec.vision_tokens; ++i) {
            built.vision_embeddings.at(i, kBackgroundAxis) = kVisionAmplitude;
        }
        for (int p : built.needle_block_indices) {
            built.vision_embeddings.at(p, kBackgroundAxis) = 0.0f;
            built.vision_embeddings.at(p, kNeedleAxis) = kVisionAmplitude;
        }
    }
    return built;
}

ModelWeights build_needle_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    if (config.d_model < 3) {
        throw ConfigError("needle model: d_model must be >= 3");
    }
    const int d = config.d_model;
    const int f = config.d_ff;
    Xoshiro256ss rng(seed);

    ModelWeights w;
    // Ordinary random embeddings for system/text ids; they cannot influence
    // vision rows because attention is inert below.
    w.embedding_table = Tensor2D(config.vocab_size, d);
    const double emb_scale = 1.0 / std::sqrt(static_cast<double>(d));
    for (float& v : w.embedding_table.data) {
        v = static_cast<float>(rng.next_symmetric() * emb_scale);
    }

    w.layers.resize(config.n_layers);
    for (LayerWeights& layer : w.layers) {
        layer.attn_norm_gain.assign(d, 1.0f);
        // Inert attention: zero projections mean every token's residual
        // update comes from its own MLP alone.
        layer.wq = Tensor2D(d, d);
        layer.wk = Tensor2D(d, d);
        layer.wv = Tensor2D(d, d);
        layer.wo = Tensor2D(d, d);
        layer.mlp_norm_gain.assign(d, 1.0f);
        // Gate and up read only the needle axis: w_gate[r][j] nonzero solely
        // for r == kNeedleAxis. A background row (needle-axis component zero)
        // gates to silu(0) = 0, so its hidden state never moves. A needle row
        // keeps producing a nonzero update at every layer, at any position.
        layer.w_gate = Tensor2D(d, f);
        layer.w_up = Tensor2D(d, f);
        layer.w_down = Tensor2D(f, d);
        for (int j = 0; j < f; ++j) {
            layer.w_gate.at(kNeedleAxis, j) =
                static_cast<float>(0.25 * (rng.next_double() < 0.5 ? -1.0 : 1.0));
            layer.w_up.at(kNeedleAxis, j) = static_cast<float>(0.25 * rng.next_symmetric());
        }
        const double down_scale = 0.5 / std::sqrt(static_cast<double>(f));
        for (float& v : layer.w_down.data) {
            v = static_cast<float>(rng.next_symmetric() * down_scale);
        }
    }
    w.final_norm_gain.assign(d, 1.0f);
    w.lm_head = Tensor2D(d, config.vocab_size);
    for (float& v : w.lm_head.data) {
        v = static_cast<float>(rng.next_symmetric() * emb_scale);
    }
    return w;
}

} // namespace v2drop
