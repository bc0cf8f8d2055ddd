#include "v2drop/tensor.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "v2drop/errors.hpp"

namespace v2drop {

namespace {

thread_local ActivationTracker* g_tracker = nullptr;

std::string shape_str(const Tensor2D& t) {
    return std::to_string(t.rows) + "x" + std::to_string(t.cols);
}

} // namespace

TrackerScope::TrackerScope(ActivationTracker* tracker) : previous_(g_tracker) {
    g_tracker = tracker;
}

TrackerScope::~TrackerScope() {
    g_tracker = previous_;
}

ActivationTracker* current_tracker() {
    return g_tracker;
}

Tensor2D::Tensor2D(int rows_, int cols_)
    : rows(rows_), cols(cols_), data(static_cast<std::size_t>(rows_) * cols_, 0.0f) {
    if (g_tracker != nullptr && !data.empty()) {
        g_tracker->on_alloc(data.size());
    }
}

void check_finite(const Tensor2D& t, const char* what) {
    for (float v : t.data) {
        if (!std::isfinite(v)) {
            throw Error(std::string(what) + ": non-finite element in " + shape_str(t) +
                        " result");
        }
    }
}

Tensor2D matmul(const Tensor2D& a, const Tensor2D& b) {
    if (a.cols != b.rows) {
        throw ShapeError("matmul: inner dimensions differ, " + shape_str(a) + " * " +
                         shape_str(b));
    }
    Tensor2D c(a.rows, b.cols);
    std::vector<double> acc(static_cast<std::size_t>(b.cols));
    for (int i = 0; i < a.rows; ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        const float* arow = a.row(i);
        for (int k = 0; k < a.cols; ++k) {
            const double aik = arow[k];
            const float* brow = b.row(k);
            for (int j = 0; j < b.cols; ++j) {
                acc[j] += aik * brow[j];
            }
        }
        float* crow = c.row(i);
        for (int j = 0; j < b.cols; ++j) {
            crow[j] = static_cast<float>(acc[j]);
        }
    }
    check_finite(c, "matmul");
    return c;
}

Tensor2D rms_norm(const Tensor2D& x, std::span<const float> gain, double epsilon) {
    if (static_cast<int>(gain.size()) != x.cols) {
        throw ShapeError("rms_norm: gain length " + std::to_string(gain.size()) +
                         " != cols " + std::to_string(x.cols));
    }
    if (epsilon < 0.0) {
        throw ConfigError("rms_norm: negative epsilon");
    }
    Tensor2D y(x.rows, x.cols);
    for (int i = 0; i < x.rows; ++i) {
        const float* in = x.row(i);
        double sumsq = 0.0;
        for (int j = 0; j < x.cols; ++j) {
            sumsq += static_cast<double>(in[j]) * in[j];
        }
        const double mean = x.cols > 0 ? sumsq / x.cols : 0.0;
        if (mean + epsilon == 0.0) {
            // all-zero row with zero epsilon: normalized row stays zero
            continue;
        }
        const double inv = 1.0 / std::sqrt(mean + epsilon);
        float* out = y.row(i);
        for (int j = 0; j < x.cols; ++j) {
            out[j] = static_cast<float>(in[j] * inv * gain[j]);
        }
    }
    check_finite(y, "rms_norm");
    return y;
}

Tensor2D rope_apply(const Tensor2D& x, std::span<const int> positions, int head_dim,
                    double base) {
    if (head_dim <= 0 || head_dim % 2 != 0) {
        throw ConfigError("rope_apply: head_dim must be positive and even, got " +
                          std::to_string(head_dim));
    }
    if (x.cols % head_dim != 0) {
        throw ShapeError("rope_apply: cols " + std::to_string(x.cols) +
                         " not divisible by head_dim " + std::to_string(head_dim));
    }
    if (static_cast<int>(positions.size()) != x.rows) {
        throw ShapeError("rope_apply: positions length " + std::to_string(positions.size()) +
                         " != rows " + std::to_string(x.rows));
    }
    Tensor2D y(x.rows, x.cols);
    const int n_heads = x.cols / head_dim;
    for (int i = 0; i < x.rows; ++i) {
        const double pos = positions[i];
        const float* in = x.row(i);
        float* out = y.row(i);
        for (int h = 0; h < n_heads; ++h) {
            const int off = h * head_dim;
            for (int k = 0; k < head_dim / 2; ++k) {
                const double theta = pos * std::pow(base, -2.0 * k / head_dim);
                const double c = std::cos(theta);
                const double s = std::sin(theta);
                const double a = in[off + 2 * k];
                const double b = in[off + 2 * k + 1];
                out[off + 2 * k] = static_cast<float>(a * c - b * s);
                out[off + 2 * k + 1] = static_cast<float>(a * s + b * c);
            }
        }
    }
    check_finite(y, "rope_apply");
    return y;
}

namespace {

void check_attention_shapes(const Tensor2D& q, const Tensor2D& k, const Tensor2D& v) {
    if (q.cols != k.cols) {
        throw ShapeError("attention: q/k width differs, " + shape_str(q) + " vs " +
                         shape_str(k));
    }
    if (k.rows != v.rows) {
        throw ShapeError("attention: k/v row counts differ, " + shape_str(k) + " vs " +
                         shape_str(v));
    }
}

// Highest key index query row i may attend to (inclusive), or -1 for none.
inline int causal_limit(bool causal, int i, int n_q, int n_k) {
    return causal ? i + (n_k - n_q) : n_k - 1;
}

} // namespace

AttentionResult attention_dense(const Tensor2D& q, const Tensor2D& k, const Tensor2D& v,
                                bool causal) {
    check_attention_shapes(q, k, v);
    const int n_q = q.rows;
    const int n_k = k.rows;
    const double scale = q.cols > 0 ? 1.0 / std::sqrt(static_cast<double>(q.cols)) : 1.0;
    const double neg_inf = -std::numeric_limits<double>::infinity();

    AttentionResult res;
    res.weights = Tensor2D(n_q, n_k);
    if (g_tracker != nullptr && n_q == n_k && n_q > 1) {
        g_tracker->note_attention_matrix();
    }
    res.out = Tensor2D(n_q, v.cols);

    std::vector<double> logits(static_cast<std::size_t>(n_k));
    std::vector<double> acc(static_cast<std::size_t>(v.cols));
    for (int i = 0; i < n_q; ++i) {
        const int limit = causal_limit(causal, i, n_q, n_k);
        if (limit < 0) {
            throw ShapeError("attention: causal mask leaves query row " + std::to_string(i) +
                             " without keys");
        }
        const float* qrow = q.row(i);
        double max_logit = neg_inf;
        for (int j = 0; j < n_k; ++j) {
            if (j > limit) {
                logits[j] = neg_inf;
                continue;
            }
            const float* krow = k.row(j);
            double dot = 0.0;
            for (int c = 0; c < q.cols; ++c) {
                dot += static_cast<double>(qrow[c]) * krow[c];
            }
            logits[j] = dot * scale;
            if (logits[j] > max_logit) {
                max_logit = logits[j];
            }
        }
        double denom = 0.0;
        for (int j = 0; j <= limit; ++j) {
            logits[j] = std::exp(logits[j] - max_logit);
            denom += logits[j];
        }
        std::fill(acc.begin(), acc.end(), 0.0);
        float* wrow = res.weights.row(i);
        for (int j = 0; j < n_k; ++j) {
            const double w = j <= limit ? logits[j] / denom : 0.0;
            wrow[j] = static_cast<float>(w);
            if (w != 0.0) {
                const float* vrow = v.row(j);
                for (int c = 0; c < v.cols; ++c) {
                    acc[c] += w * vrow[c];
                }
            }
        }
        float* orow = res.out.row(i);
        for (int c = 0; c < v.cols; ++c) {
            orow[c] = static_cast<float>(acc[c]);
        }
    }
    check_finite(res.out, "attention_dense");
    check_finite(res.weights, "attention_dense");
    return res;
}

Tensor2D attention_streaming(const Tensor2D& q, const Tensor2D& k, const Tensor2D& v,
                             bool causal) {
    check_attention_shapes(q, k, v);
    const int n_q = q.rows;
    const int n_k = k.rows;
    const double scale = q.cols > 0 ? 1.0 / std::sqrt(static_cast<double>(q.cols)) : 1.0;

    Tensor2D out(n_q, v.cols);
    // Running statistics for one query row at a time: max, denominator, and
    // the rescaled value accumulator. Nothing here scales with n_k.
    std::vector<double> acc(static_cast<std::size_t>(v.cols));
    if (g_tracker != nullptr) {
        g_tracker->on_alloc(2 * static_cast<std::uint64_t>(n_q));
    }
    for (int i = 0; i < n_q; ++i) {
        const int limit = causal_limit(causal, i, n_q, n_k);
        if (limit < 0) {
            throw ShapeError("attention: causal mask leaves query row " + std::to_string(i) +
                             " without keys");
        }
        const float* qrow = q.row(i);
        double running_max = -std::numeric_limits<double>::infinity();
        double denom = 0.0;
        std::fill(acc.begin(), acc.end(), 0.0);
        for (int j = 0; j <= limit; ++j) {
            const float* krow = k.row(j);
            double dot = 0.0;
            for (int c = 0; c < q.cols; ++c) {
                dot += static_cast<double>(qrow[c]) * krow[c];
            }
            const double logit = dot * scale;
            if (logit > running_max) {
                const double rescale =
                    denom == 0.0 ? 0.0 : std::exp(running_max - logit);
                denom *= rescale;
                for (double& a : acc) {
                    a *= rescale;
                }
                running_max = logit;
            }
            const double w = std::exp(logit - running_max);
            denom += w;
            const float* vrow = v.row(j);
            for (int c = 0; c < v.cols; ++c) {
                acc[c] += w * vrow[c];
            }
        }
        float* orow = out.row(i);
        for (int c = 0; c < v.cols; ++c) {
            orow[c] = static_cast<float>(acc[c] / denom);
        }
    }
    check_finite(out, "attention_streaming");
    return out;
}

Tensor2D swiglu_mlp(const Tensor2D& x, const Tensor2D& w_gate, const Tensor2D& w_up,
                    const Tensor2D& w_down) {
    Tensor2D gate = matmul(x, w_gate);
    const Tensor2D up = matmul(x, w_up);
    if (!gate.same_shape(up)) {
        throw ShapeError("swiglu_mlp: gate/up shapes differ");
    }
    for (std::size_t idx = 0; idx < gate.data.size(); ++idx) {
        const double z = gate.data[idx];
        const double silu = z / (1.0 + std::exp(-z));
        gate.data[idx] = static_cast<float>(silu * up.data[idx]);
    }
    Tensor2D out = matmul(gate, w_down);
    check_finite(out, "swiglu_mlp");
    return out;
}

} // namespace v2drop
