#include "v2drop/runtime.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

#include "v2drop/errors.hpp"

namespace v2drop {

std::string segment_name(Segment s) {
    switch (s) {
        case Segment::system: return "system";
        case Segment::vision: return "vision";
        case Segment::text: return "text";
    }
    return "?";
}

std::vector<std::uint32_t> TokenSequence::vision_ids() const {
    std::vector<std::uint32_t> ids;
    ids.reserve(vision_count);
    for (const TokenEntry& e : entries) {
        if (e.segment == Segment::vision) {
            ids.push_back(e.content_id);
        }
    }
    return ids;
}

TokenSequence assemble_sequence(std::span<const int> system_ids,
                                const Tensor2D& vision_embeddings,
                                std::span<const int> text_ids,
                                const Tensor2D& embedding_table) {
    if (vision_embeddings.rows > 0 && vision_embeddings.cols != embedding_table.cols) {
        throw ShapeError("assemble_sequence: vision embedding width " +
                         std::to_string(vision_embeddings.cols) + " != d_model " +
                         std::to_string(embedding_table.cols));
    }
    const int vocab = embedding_table.rows;
    auto check_id = [vocab](int id) {
        if (id < 0 || id >= vocab) {
            throw RangeError("assemble_sequence: token id " + std::to_string(id) +
                             " outside vocabulary of " + std::to_string(vocab));
        }
    };

    TokenSequence seq;
    const int total = static_cast<int>(system_ids.size()) + vision_embeddings.rows +
                      static_cast<int>(text_ids.size());
    seq.embeddings = Tensor2D(total, embedding_table.cols);
    seq.entries.reserve(total);
    seq.vision_count = vision_embeddings.rows;

    int pos = 0;
    auto add_token = [&](Segment segment, const float* embedding) {
        seq.entries.push_back({static_cast<std::uint32_t>(pos), segment, pos});
        std::copy(embedding, embedding + embedding_table.cols, seq.embeddings.row(pos));
        ++pos;
    };
    for (int id : system_ids) {
        check_id(id);
        add_token(Segment::system, embedding_table.row(id));
    }
    if (vision_embeddings.rows > 0) {
        seq.vision_begin = pos;
    }
    for (int i = 0; i < vision_embeddings.rows; ++i) {
        add_token(Segment::vision, vision_embeddings.row(i));
    }
    for (int id : text_ids) {
        check_id(id);
        add_token(Segment::text, embedding_table.row(id));
    }
    return seq;
}

namespace {

// Copies the head_dim-wide column band of one head into its own tensor.
Tensor2D head_slice(const Tensor2D& x, int head, int head_dim) {
    Tensor2D out(x.rows, head_dim);
    const int off = head * head_dim;
    for (int i = 0; i < x.rows; ++i) {
        const float* src = x.row(i) + off;
        std::copy(src, src + head_dim, out.row(i));
    }
    return out;
}

void add_inplace(Tensor2D& acc, const Tensor2D& other) {
    for (std::size_t i = 0; i < acc.data.size(); ++i) {
        acc.data[i] += other.data[i];
    }
}

struct LayerIo {
    Tensor2D output;
    Tensor2D mean_weights; // dense path only
};

// One transformer layer over `hidden` (n x d). Fills the KV cache for this
// layer. All tensor allocations happen while the caller's tracker scope is
// open, so the activation accountant sees exactly this code path.
LayerIo layer_forward(const Tensor2D& hidden, const LayerWeights& lw,
                      const ModelConfig& config, std::span<const int> positions,
                      AttnPath path, KVCache& cache, std::uint64_t& flops) {
    const int n = hidden.rows;
    const int d = config.d_model;
    const int dh = config.head_dim();
    const std::uint64_t un = static_cast<std::uint64_t>(n);
    const std::uint64_t ud = static_cast<std::uint64_t>(d);

    const Tensor2D normed = rms_norm(hidden, lw.attn_norm_gain, 1e-6);
    Tensor2D q = matmul(normed, lw.wq);
    Tensor2D k = matmul(normed, lw.wk);
    const Tensor2D v = matmul(normed, lw.wv);
    flops += 3 * 2 * un * ud * ud;
    if (config.positional_mode == PositionalMode::rope) {
        q = rope_apply(q, positions, dh, config.rope_base);
        k = rope_apply(k, positions, dh, config.rope_base);
    }

    Tensor2D attn_out(n, d);
    LayerIo io;
    if (path == AttnPath::dense && n > 0) {
        io.mean_weights = Tensor2D(n, n);
        if (current_tracker() != nullptr && n > 1) {
            current_tracker()->note_attention_matrix();
        }
    }
    cache.k_heads.resize(config.n_heads);
    cache.v_heads.resize(config.n_heads);
    cache.rows = n;
    const double head_norm = config.n_heads > 0 ? 1.0 / config.n_heads : 0.0;
    for (int h = 0; h < config.n_heads; ++h) {
        Tensor2D qh = head_slice(q, h, dh);
        Tensor2D kh = head_slice(k, h, dh);
        Tensor2D vh = head_slice(v, h, dh);
        Tensor2D oh;
        if (path == AttnPath::dense) {
            AttentionResult res = attention_dense(qh, kh, vh, /*causal=*/true);
            oh = std::move(res.out);
            if (io.mean_weights.rows == n && n > 0) {
                for (std::size_t i = 0; i < io.mean_weights.data.size(); ++i) {
                    io.mean_weights.data[i] +=
                        static_cast<float>(res.weights.data[i] * head_norm);
                }
            }
        } else {
            oh = attention_streaming(qh, kh, vh, /*causal=*/true);
        }
        // scores + weighted sum, canonical dense-equivalent count
        flops += 2 * 2 * un * un * static_cast<std::uint64_t>(dh);
        for (int i = 0; i < n; ++i) {
            std::copy(oh.row(i), oh.row(i) + dh, attn_out.row(i) + h * dh);
        }
        cache.k_heads[h] = std::move(kh);
        cache.v_heads[h] = std::move(vh);
    }

    Tensor2D attn_proj = matmul(attn_out, lw.wo);
    flops += 2 * un * ud * ud;
    add_inplace(attn_proj, hidden);

    const Tensor2D mlp_normed = rms_norm(attn_proj, lw.mlp_norm_gain, 1e-6);
    Tensor2D mlp_out = swiglu_mlp(mlp_normed, lw.w_gate, lw.w_up, lw.w_down);
    flops += 3 * 2 * un * ud * static_cast<std::uint64_t>(config.d_ff);
    add_inplace(mlp_out, attn_proj);

    io.output = std::move(mlp_out);
    return io;
}

std::vector<float> project_logits(const Tensor2D& hidden_row,
                                  const ModelWeights& weights) {
    const Tensor2D normed = rms_norm(hidden_row, weights.final_norm_gain, 1e-6);
    const Tensor2D logits = matmul(normed, weights.lm_head);
    return logits.data;
}

Tensor2D copy_row(const Tensor2D& src, int row) {
    Tensor2D out(1, src.cols);
    std::copy(src.row(row), src.row(row) + src.cols, out.row(0));
    return out;
}

} // namespace

PrefillResult prefill(const TokenSequence& seq, const ModelWeights& weights,
                      const ModelConfig& config, AttnPath path, const PrefillHook& hook) {
    config.validate();
    if (seq.embeddings.cols != config.d_model) {
        throw ShapeError("prefill: sequence width " + std::to_string(seq.embeddings.cols) +
                         " != d_model " + std::to_string(config.d_model));
    }
    if (static_cast<int>(weights.layers.size()) != config.n_layers) {
        throw ConfigError("prefill: weights carry " + std::to_string(weights.layers.size()) +
                          " layers, config says " + std::to_string(config.n_layers));
    }

    PrefillResult result;
    result.original_length = seq.length();
    result.caches.resize(config.n_layers);
    result.retained_per_layer.reserve(config.n_layers);

    ActivationTracker tracker;
    Tensor2D hidden = seq.embeddings;
    std::vector<TokenRef> retained;
    retained.reserve(seq.entries.size());
    for (const TokenEntry& e : seq.entries) {
        retained.push_back({e.content_id, e.original_position, e.segment});
    }
    std::vector<int> positions;
    positions.reserve(retained.size());
    for (const TokenRef& ref : retained) {
        positions.push_back(ref.original_position);
    }

    LayerState state;
    for (int layer = 1; layer <= config.n_layers; ++layer) {
        result.retained_per_layer.push_back(static_cast<int>(retained.size()));
        LayerIo io;
        {
            TrackerScope scope(&tracker);
            tracker.begin_scope();
            io = layer_forward(hidden, weights.layers[layer - 1], config, positions, path,
                               result.caches[layer - 1], result.flops);
            tracker.end_scope();
        }

        state.layer_index = layer;
        state.prev_hidden = std::move(hidden);
        state.hidden = std::move(io.output);
        state.retained = retained;

        if (hook) {
            const Tensor2D* attn =
                path == AttnPath::dense && state.hidden.rows > 0 ? &io.mean_weights : nullptr;
            std::vector<std::uint32_t> keep_ids = hook(state, attn);

            std::unordered_set<std::uint32_t> current;
            for (const TokenRef& ref : retained) {
                current.insert(ref.content_id);
            }
            std::unordered_set<std::uint32_t> keep;
            for (std::uint32_t id : keep_ids) {
                if (current.find(id) == current.end()) {
                    throw ContractViolation("prefill hook at layer " + std::to_string(layer) +
                                            " returned unknown content id " +
                                            std::to_string(id));
                }
                keep.insert(id);
            }
            for (const TokenRef& ref : retained) {
                if (ref.segment != Segment::vision && keep.find(ref.content_id) == keep.end()) {
                    throw ContractViolation("prefill hook at layer " + std::to_string(layer) +
                                            " dropped a " + segment_name(ref.segment) +
                                            " token at position " +
                                            std::to_string(ref.original_position));
                }
            }

            if (keep.size() < retained.size()) {
                std::vector<TokenRef> next_refs;
                next_refs.reserve(keep.size());
                std::vector<int> next_rows;
                for (std::size_t i = 0; i < retained.size(); ++i) {
                    if (keep.find(retained[i].content_id) != keep.end()) {
                        next_refs.push_back(retained[i]);
                        next_rows.push_back(static_cast<int>(i));
                    }
                }
                Tensor2D filtered(static_cast<int>(next_rows.size()), config.d_model);
                for (std::size_t i = 0; i < next_rows.size(); ++i) {
                    std::copy(state.hidden.row(next_rows[i]),
                              state.hidden.row(next_rows[i]) + config.d_model,
                              filtered.row(static_cast<int>(i)));
                }
                retained = std::move(next_refs);
                hidden = std::move(filtered);
                positions.clear();
                for (const TokenRef& ref : retained) {
                    positions.push_back(ref.original_position);
                }
                continue;
            }
        }
        hidden = state.hidden; // copy: state keeps the unfiltered view
    }

    result.final_state = std::move(state);
    result.final_retained = retained;

    if (!retained.empty()) {
        TrackerScope scope(&tracker);
        tracker.begin_scope();
        const Tensor2D last = copy_row(hidden, hidden.rows - 1);
        result.last_logits = project_logits(last, weights);
        tracker.end_scope();
    }

    result.peak_activation_elems = tracker.peak_scope_elems();
    result.attention_matrix_allocs = tracker.attention_matrix_allocs();
    return result;
}

namespace {

int argmax_lowest_id(std::span<const float> logits) {
    int best = 0;
    float best_value = logits[0];
    for (int i = 1; i < static_cast<int>(logits.size()); ++i) {
        if (logits[i] > best_value) {
            best_value = logits[i];
            best = i;
        }
    }
    return best;
}

} // namespace

DecodeResult decode(PrefillResult& pre, const ModelWeights& weights,
                    const ModelConfig& config, AttnPath path, int steps,
                    std::optional<int> stop_id) {
    DecodeResult result;
    result.flop_total = pre.flops;
    result.peak_activation_elems = pre.peak_activation_elems;
    if (steps <= 0) {
        return result;
    }
    if (pre.last_logits.empty()) {
        throw ContractViolation("decode: prefill retained no rows, nothing to continue");
    }

    const int d = config.d_model;
    const int dh = config.head_dim();
    const std::uint64_t ud = static_cast<std::uint64_t>(d);
    ActivationTracker tracker;
    std::uint64_t flops = 0;

    std::vector<float> logits = pre.last_logits;
    for (int step = 1; step <= steps; ++step) {
        result.per_step_logits_digest.push_back(digest_f32(logits));
        const int token = argmax_lowest_id(logits);
        result.generated_ids.push_back(token);
        if (stop_id.has_value() && token == *stop_id) {
            break;
        }
        if (step == steps) {
            break;
        }

        // Forward the freshly generated token; its position continues after
        // the original sequence, never reusing dropped positions.
        const int position = pre.original_length + step - 1;
        Tensor2D x;
        {
            TrackerScope scope(&tracker);
            tracker.begin_scope();
            x = copy_row(weights.embedding_table, token);
            tracker.end_scope();
        }
        for (int layer = 1; layer <= config.n_layers; ++layer) {
            const LayerWeights& lw = weights.layers[layer - 1];
            KVCache& cache = pre.caches[layer - 1];
            TrackerScope scope(&tracker);
            tracker.begin_scope();

            const Tensor2D normed = rms_norm(x, lw.attn_norm_gain, 1e-6);
            Tensor2D q = matmul(normed, lw.wq);
            Tensor2D k = matmul(normed, lw.wk);
            const Tensor2D v = matmul(normed, lw.wv);
            flops += 3 * 2 * ud * ud;
            if (config.positional_mode == PositionalMode::rope) {
                const int pos_arr[1] = {position};
                q = rope_apply(q, pos_arr, dh, config.rope_base);
                k = rope_apply(k, pos_arr, dh, config.rope_base);
            }
            // Append this token's K/V rows to the per-head cache. Growth of
            // persistent cache storage is state, not activation traffic.
            for (int h = 0; h < config.n_heads; ++h) {
                cache.k_heads[h].data.insert(cache.k_heads[h].data.end(),
                                             k.row(0) + h * dh, k.row(0) + (h + 1) * dh);
                cache.k_heads[h].rows += 1;
                cache.v_heads[h].data.insert(cache.v_heads[h].data.end(),
                                             v.row(0) + h * dh, v.row(0) + (h + 1) * dh);
                cache.v_heads[h].rows += 1;
            }
            cache.rows += 1;

            Tensor2D attn_out(1, d);
            for (int h = 0; h < config.n_heads; ++h) {
                const Tensor2D qh = head_slice(q, h, dh);
                Tensor2D oh;
                if (path == AttnPath::dense) {
                    AttentionResult res =
                        attention_dense(qh, cache.k_heads[h], cache.v_heads[h], true);
                    oh = std::move(res.out);
                } else {
                    oh = attention_streaming(qh, cache.k_heads[h], cache.v_heads[h], true);
                }
                flops += 2 * 2 * static_cast<std::uint64_t>(cache.rows) *
                         static_cast<std::uint64_t>(dh);
                std::copy(oh.row(0), oh.row(0) + dh, attn_out.row(0) + h * dh);
            }
            Tensor2D attn_proj = matmul(attn_out, lw.wo);
            flops += 2 * ud * ud;
            add_inplace(attn_proj, x);

            const Tensor2D mlp_normed = rms_norm(attn_proj, lw.mlp_norm_gain, 1e-6);
            Tensor2D mlp_out = swiglu_mlp(mlp_normed, lw.w_gate, lw.w_up, lw.w_down);
            flops += 3 * 2 * ud * static_cast<std::uint64_t>(config.d_ff);
            add_inplace(mlp_out, attn_proj);
            x = std::move(mlp_out);
            tracker.end_scope();
        }
        {
            TrackerScope scope(&tracker);
            tracker.begin_scope();
            logits = project_logits(x, weights);
            tracker.end_scope();
        }
    }

    result.flop_total += flops;
    result.peak_activation_elems =
        std::max(result.peak_activation_elems, tracker.peak_scope_elems());
    return result;
}

std::uint64_t digest_f32(std::span<const float> values) {
    std::uint64_t hash = 14695981039346656037ull;
    for (float v : values) {
        std::uint32_t bits;
        static_assert(sizeof(bits) == sizeof(v));
        std::memcpy(&bits, &v, 4);
        for (int b = 0; b < 4; ++b) {
            hash ^= (bits >> (8 * b)) & 0xff;
            hash *= 1099511628211ull;
        }
    }
    return hash;
}

std::uint64_t digest_combine(std::uint64_t acc, std::uint64_t value) {
    for (int b = 0; b < 8; ++b) {
        acc ^= (value >> (8 * b)) & 0xff;
        acc *= 1099511628211ull;
    }
    return acc;
}

} // namespace v2drop
