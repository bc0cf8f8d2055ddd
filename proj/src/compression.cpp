#include "v2drop/compression.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>
#include <unordered_set>

#include "v2drop/errors.hpp"

namespace v2drop {

std::string metric_name(const VariationMetric& metric) {
    switch (metric.kind) {
        case MetricKind::l1: return "l1";
        case MetricKind::l2: return "l2";
        case MetricKind::cosine_distance: return "cosine";
    }
    return "?";
}

VariationMetric metric_from_name(const std::string& name) {
    VariationMetric m;
    if (name == "l1") {
        m.kind = MetricKind::l1;
    } else if (name == "l2") {
        m.kind = MetricKind::l2;
    } else if (name == "cosine" || name == "cosine_distance") {
        m.kind = MetricKind::cosine_distance;
    } else {
        throw ConfigError("unknown variation metric '" + name + "'");
    }
    return m;
}

double variation(const VariationMetric& metric, std::span<const float> prev,
                 std::span<const float> curr) {
    if (prev.size() != curr.size()) {
        throw ShapeError("variation: vector lengths differ, " + std::to_string(prev.size()) +
                         " vs " + std::to_string(curr.size()));
    }
    switch (metric.kind) {
        case MetricKind::l1: {
            double sum = 0.0;
            for (std::size_t i = 0; i < prev.size(); ++i) {
                sum += std::abs(static_cast<double>(curr[i]) - prev[i]);
            }
            return sum;
        }
        case MetricKind::l2: {
            double sum = 0.0;
            for (std::size_t i = 0; i < prev.size(); ++i) {
                const double diff = static_cast<double>(curr[i]) - prev[i];
                sum += diff * diff;
            }
            return std::sqrt(sum);
        }
        case MetricKind::cosine_distance: {
            double dot = 0.0;
            double norm_prev = 0.0;
            double norm_curr = 0.0;
            for (std::size_t i = 0; i < prev.size(); ++i) {
                dot += static_cast<double>(curr[i]) * prev[i];
                norm_prev += static_cast<double>(prev[i]) * prev[i];
                norm_curr += static_cast<double>(curr[i]) * curr[i];
            }
            norm_prev = std::sqrt(norm_prev);
            norm_curr = std::sqrt(norm_curr);
            if (norm_prev < metric.epsilon || norm_curr < metric.epsilon) {
                return 1.0;
            }
            // clamp tiny negative excursions from rounding
            return std::max(0.0, 1.0 - dot / (norm_prev * norm_curr));
        }
    }
    throw ConfigError("variation: unhandled metric kind");
}

VariationScores score_tokens(const VariationMetric& metric, const LayerState& state,
                             std::span<const std::uint32_t> vision_ids) {
    if (!state.hidden.same_shape(state.prev_hidden) ||
        state.hidden.rows != static_cast<int>(state.retained.size())) {
        throw ShapeError("score_tokens: hidden/prev_hidden/retained misaligned at layer " +
                         std::to_string(state.layer_index));
    }
    std::unordered_map<std::uint32_t, int> row_of;
    row_of.reserve(state.retained.size());
    for (std::size_t i = 0; i < state.retained.size(); ++i) {
        row_of.emplace(state.retained[i].content_id, static_cast<int>(i));
    }
    std::unordered_set<std::uint32_t> wanted(vision_ids.begin(), vision_ids.end());
    for (std::uint32_t id : vision_ids) {
        if (row_of.find(id) == row_of.end()) {
            throw ContractViolation("score_tokens: vision id " + std::to_string(id) +
                                    " is not retained at layer " +
                                    std::to_string(state.layer_index));
        }
    }

    VariationScores out;
    out.layer_index = state.layer_index;
    out.scores.reserve(wanted.size());
    const int cols = state.hidden.cols;
    for (const TokenRef& ref : state.retained) {
        if (wanted.find(ref.content_id) == wanted.end()) {
            continue;
        }
        const int row = row_of[ref.content_id];
        const double score =
            variation(metric, std::span<const float>(state.prev_hidden.row(row), cols),
                      std::span<const float>(state.hidden.row(row), cols));
        out.scores.push_back({ref.content_id, ref.original_position, score});
    }
    return out;
}

std::vector<std::uint32_t> select_topk(const VariationScores& scores, int k,
                                       std::vector<std::string>* warnings) {
    if (k < 0) {
        throw ConfigError("select_topk: negative k");
    }
    const int n = static_cast<int>(scores.scores.size());
    if (k > n) {
        if (warnings != nullptr) {
            warnings->push_back("select_topk: k=" + std::to_string(k) + " clamped to " +
                                std::to_string(n) + " at layer " +
                                std::to_string(scores.layer_index));
        }
        k = n;
    }
    // Order by descending score; scores.scores is already in sequence order,
    // so a stable sort gives the ascending-position tie break for free.
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) {
        order[i] = i;
    }
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return scores.scores[a].score > scores.scores[b].score;
    });
    order.resize(k);
    std::sort(order.begin(), order.end()); // back to sequence order
    std::vector<std::uint32_t> ids;
    ids.reserve(k);
    for (int idx : order) {
        ids.push_back(scores.scores[idx].content_id);
    }
    return ids;
}

// --- schedules ----------------------------------------------------------------

void DropSchedule::validate() const {
    if (total_llm_layers < 1) {
        throw ConfigError("schedule: total_llm_layers must be >= 1");
    }
    int prev_layer = 0;
    for (const DropStage& stage : stages) {
        if (stage.layer <= prev_layer) {
            throw ConfigError("schedule: stage layers must be strictly increasing");
        }
        if (stage.layer > total_llm_layers) {
            throw ConfigError("schedule: stage layer " + std::to_string(stage.layer) +
                              " exceeds total_llm_layers " + std::to_string(total_llm_layers));
        }
        if (stage.is_ratio && (stage.prune_ratio < 0.0 || stage.prune_ratio > 1.0)) {
            throw ConfigError("schedule: prune ratio must lie in [0, 1]");
        }
        if (!stage.is_ratio && stage.target_count < 0) {
            throw ConfigError("schedule: absolute target must be >= 0");
        }
        prev_layer = stage.layer;
    }
}

int round_half_away(double value) {
    return static_cast<int>(value >= 0.0 ? std::floor(value + 0.5) : std::ceil(value - 0.5));
}

std::vector<ResolvedStage> resolve_schedule(const DropSchedule& schedule,
                                            int initial_vision_count,
                                            std::vector<std::string>* warnings) {
    schedule.validate();
    std::vector<ResolvedStage> out;
    out.reserve(schedule.stages.size());
    int current = initial_vision_count;
    for (const DropStage& stage : schedule.stages) {
        int keep;
        if (stage.is_ratio) {
            keep = round_half_away((1.0 - stage.prune_ratio) * current);
        } else {
            keep = stage.target_count;
            if (keep > current) {
                if (warnings != nullptr) {
                    warnings->push_back("schedule: stage at layer " +
                                        std::to_string(stage.layer) + " asks for " +
                                        std::to_string(keep) + " tokens, clamped to " +
                                        std::to_string(current));
                }
                keep = current;
            }
        }
        keep = std::max(0, std::min(keep, current));
        out.push_back({stage.layer, keep});
        current = keep;
    }
    return out;
}

std::vector<ExactStage> resolve_schedule_exact(const DropSchedule& schedule,
                                               int initial_vision_count) {
    schedule.validate();
    std::vector<ExactStage> out;
    out.reserve(schedule.stages.size());
    double current = initial_vision_count;
    for (const DropStage& stage : schedule.stages) {
        double keep;
        if (stage.is_ratio) {
            keep = (1.0 - stage.prune_ratio) * current;
        } else {
            keep = std::min<double>(stage.target_count, current);
        }
        keep = std::max(0.0, keep);
        out.push_back({stage.layer, keep});
        current = keep;
    }
    return out;
}

namespace {

template <typename Stage>
double equivalent_from_stages(std::span<const Stage> resolved, double initial,
                              int total_llm_layers) {
    if (total_llm_layers < 1) {
        throw ConfigError("equivalent_token_count: total_llm_layers must be >= 1");
    }
    double sum = 0.0;
    double current = initial;
    std::size_t idx = 0;
    for (int layer = 1; layer <= total_llm_layers; ++layer) {
        sum += current;
        while (idx < resolved.size() && resolved[idx].layer == layer) {
            current = static_cast<double>(resolved[idx].keep);
            ++idx;
        }
    }
    return sum / total_llm_layers;
}

} // namespace

double equivalent_token_count(std::span<const ExactStage> resolved, double initial_vision_count,
                              int total_llm_layers) {
    return equivalent_from_stages(resolved, initial_vision_count, total_llm_layers);
}

double equivalent_token_count(std::span<const ResolvedStage> resolved,
                              double initial_vision_count, int total_llm_layers) {
    return equivalent_from_stages(resolved, initial_vision_count, total_llm_layers);
}

DropSchedule derive_one_time_schedule(const DropSchedule& reference, int initial_vision_count,
                                      int layer) {
    reference.validate();
    if (layer < 1 || layer > reference.total_llm_layers) {
        throw ConfigError("one-time schedule: layer " + std::to_string(layer) +
                          " outside 1.." + std::to_string(reference.total_llm_layers));
    }
    const std::vector<ExactStage> exact = resolve_schedule_exact(reference, initial_vision_count);
    const double target_equiv =
        equivalent_token_count(std::span<const ExactStage>(exact), initial_vision_count,
                               reference.total_llm_layers);
    const int total = reference.total_llm_layers;
    if (layer == total) {
        throw ConfigError("one-time schedule: dropping after the final layer has no effect");
    }
    // Solve (layer*M + (total-layer)*K) / total == target_equiv for K.
    const double keep =
        (target_equiv * total - static_cast<double>(layer) * initial_vision_count) /
        (total - layer);
    DropSchedule single;
    single.total_llm_layers = total;
    DropStage stage;
    stage.layer = layer;
    stage.is_ratio = false;
    stage.target_count =
        std::max(0, std::min(initial_vision_count, round_half_away(keep)));
    single.stages.push_back(stage);
    return single;
}

// --- policies ----------------------------------------------------------------

std::string policy_name(PolicyKind kind) {
    switch (kind) {
        case PolicyKind::none: return "none";
        case PolicyKind::v2drop: return "v2drop";
        case PolicyKind::random_drop: return "random";
        case PolicyKind::attention_guided: return "attention_guided";
        case PolicyKind::one_time_v2drop: return "one_time_v2drop";
    }
    return "?";
}

PolicyKind policy_from_name(const std::string& name) {
    if (name == "none") return PolicyKind::none;
    if (name == "v2drop") return PolicyKind::v2drop;
    if (name == "random") return PolicyKind::random_drop;
    if (name == "attention_guided") return PolicyKind::attention_guided;
    if (name == "one_time_v2drop") return PolicyKind::one_time_v2drop;
    throw ConfigError("unknown policy '" + name + "'");
}

PolicyRunner::PolicyRunner(PolicyDescriptor descriptor, std::vector<ResolvedStage> stages)
    : descriptor_(descriptor), stages_(std::move(stages)), rng_(descriptor.seed) {}

std::vector<std::uint32_t> PolicyRunner::operator()(const LayerState& state,
                                                    const Tensor2D* attn_weights) {
    std::vector<std::uint32_t> all_ids;
    all_ids.reserve(state.retained.size());
    std::vector<std::uint32_t> vision_ids;
    for (const TokenRef& ref : state.retained) {
        all_ids.push_back(ref.content_id);
        if (ref.segment == Segment::vision) {
            vision_ids.push_back(ref.content_id);
        }
    }

    const ResolvedStage* stage = nullptr;
    for (const ResolvedStage& s : stages_) {
        if (s.layer == state.layer_index) {
            stage = &s;
            break;
        }
    }
    if (stage == nullptr || descriptor_.kind == PolicyKind::none) {
        return all_ids;
    }
    const int keep = std::min<int>(stage->keep, static_cast<int>(vision_ids.size()));
    if (keep == static_cast<int>(vision_ids.size())) {
        return all_ids;
    }

    std::vector<std::uint32_t> kept_vision;
    switch (descriptor_.kind) {
        case PolicyKind::v2drop:
        case PolicyKind::one_time_v2drop: {
            const VariationScores scores =
                score_tokens(descriptor_.metric, state, vision_ids);
            kept_vision = select_topk(scores, keep, &warnings_);
            break;
        }
        case PolicyKind::random_drop: {
            // Partial Fisher-Yates over the vision ids, then restore order.
            std::vector<std::uint32_t> pool = vision_ids;
            for (int i = 0; i < keep; ++i) {
                const std::size_t j =
                    i + static_cast<std::size_t>(rng_.next_below(pool.size() - i));
                std::swap(pool[i], pool[j]);
            }
            pool.resize(keep);
            std::unordered_set<std::uint32_t> chosen(pool.begin(), pool.end());
            for (std::uint32_t id : vision_ids) {
                if (chosen.find(id) != chosen.end()) {
                    kept_vision.push_back(id);
                }
            }
            break;
        }
        case PolicyKind::attention_guided: {
            if (attn_weights == nullptr) {
                throw PolicyCompatibilityError(
                    "policy incompatible with streaming attention: attention_guided needs "
                    "materialized attention weights; rerun with the dense path");
            }
            // Head-averaged attention that each vision token receives from
            // the final sequence token.
            const int last_row = attn_weights->rows - 1;
            VariationScores scores;
            scores.layer_index = state.layer_index;
            for (std::size_t i = 0; i < state.retained.size(); ++i) {
                const TokenRef& ref = state.retained[i];
                if (ref.segment != Segment::vision) {
                    continue;
                }
                scores.scores.push_back(
                    {ref.content_id, ref.original_position,
                     static_cast<double>(attn_weights->at(last_row, static_cast<int>(i)))});
            }
            kept_vision = select_topk(scores, keep, &warnings_);
            break;
        }
        case PolicyKind::none:
            break;
    }

    std::unordered_set<std::uint32_t> kept(kept_vision.begin(), kept_vision.end());
    std::vector<std::uint32_t> result;
    result.reserve(state.retained.size() - vision_ids.size() + kept.size());
    for (const TokenRef& ref : state.retained) {
        if (ref.segment != Segment::vision || kept.find(ref.content_id) != kept.end()) {
            result.push_back(ref.content_id);
        }
    }
    return result;
}

PrefillHook PolicyRunner::as_hook() {
    return [this](const LayerState& state, const Tensor2D* attn_weights) {
        return (*this)(state, attn_weights);
    };
}

double positional_bias_stat(std::span<const int> retained_block_indices, int vision_count) {
    if (vision_count < 1) {
        throw ConfigError("positional_bias_stat: vision_count must be >= 1");
    }
    if (retained_block_indices.empty() || vision_count == 1) {
        return 0.0;
    }
    double mean = 0.0;
    for (int idx : retained_block_indices) {
        mean += idx;
    }
    mean /= static_cast<double>(retained_block_indices.size());
    const double center = (vision_count - 1) / 2.0;
    return (mean - center) / center;
}

} // namespace v2drop
