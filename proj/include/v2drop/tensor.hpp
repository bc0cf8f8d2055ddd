#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace v2drop {

// Records activation traffic while a forward pass runs. Every Tensor2D
// constructed with nonzero size while a tracker is installed (see
// TrackerScope) is counted into the current scope; the runtime opens one
// scope per transformer layer, so `peak_scope_elems` is the largest
// per-layer activation footprint in elements.
//
// `attention_matrix_allocs` counts materialized square attention-weight
// matrices (n_q == n_k > 1). The streaming path must keep it at zero.
class ActivationTracker {
public:
    void begin_scope() { scope_elems_ = 0; }
    void end_scope() {
        if (scope_elems_ > peak_scope_elems_) {
            peak_scope_elems_ = scope_elems_;
        }
    }

    void on_alloc(std::uint64_t elems) {
        scope_elems_ += elems;
        total_elems_ += elems;
    }

    void note_attention_matrix() { ++attention_matrix_allocs_; }

    std::uint64_t peak_scope_elems() const { return peak_scope_elems_; }
    std::uint64_t total_elems() const { return total_elems_; }
    std::uint64_t attention_matrix_allocs() const { return attention_matrix_allocs_; }

private:
    std::uint64_t scope_elems_ = 0;
    std::uint64_t peak_scope_elems_ = 0;
    std::uint64_t total_elems_ = 0;
    std::uint64_t attention_matrix_allocs_ = 0;
};

// Installs a tracker for the current thread for the lifetime of the object.
struct TrackerScope {
    explicit TrackerScope(ActivationTracker* tracker);
    ~TrackerScope();
    TrackerScope(const TrackerScope&) = delete;
    TrackerScope& operator=(const TrackerScope&) = delete;

private:
    ActivationTracker* previous_;
};

ActivationTracker* current_tracker();

// Dense row-major float32 matrix. The only tensor abstraction in the
// project; batching happens as independent runs, never as a third axis.
struct Tensor2D {
    int rows = 0;
    int cols = 0;
    std::vector<float> data;

    Tensor2D() = default;
    Tensor2D(int rows, int cols);

    float* row(int r) { return data.data() + static_cast<std::size_t>(r) * cols; }
    const float* row(int r) const { return data.data() + static_cast<std::size_t>(r) * cols; }

    float& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
    float at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }

    std::size_t size() const { return data.size(); }

    bool same_shape(const Tensor2D& other) const {
        return rows == other.rows && cols == other.cols;
    }
};

// Throws if any element is NaN or infinite. Public ops call this
// on their results; the runtime relies on it to catch numeric escapes early.
void check_finite(const Tensor2D& t, const char* what);

// c[i][j] = sum_k a[i][k] * b[k][j], accumulated in double, stored as float.
Tensor2D matmul(const Tensor2D& a, const Tensor2D& b);

// Per-row RMS normalization: y = x / sqrt(mean(x^2) + epsilon) * gain.
// epsilon must be >= 0 (zero is allowed for rows with nonzero RMS).
Tensor2D rms_norm(const Tensor2D& x, std::span<const float> gain, double epsilon);

// Rotary position embedding. Each head splits into pairs (2k, 2k+1) rotated
// by positions[i] * base^(-2k/head_dim). head_dim must be even and divide
// x.cols; positions.size() must equal x.rows.
Tensor2D rope_apply(const Tensor2D& x, std::span<const int> positions, int head_dim,
                    double base);

struct AttentionResult {
    Tensor2D out;
    Tensor2D weights; // n_q x n_k, rows sum to 1
};

// Attention with explicit softmax: materializes the full post-softmax weight
// matrix. With `causal`, query row i may attend to key row j only when
// j <= i + (n_k - n_q); masked logits are -inf so masked weights are exactly
// zero. This is the path attention-weight-based policies require and the one
// that costs O(n_q * n_k) activation memory.
AttentionResult attention_dense(const Tensor2D& q, const Tensor2D& k, const Tensor2D& v,
                                bool causal);

// Same math as attention_dense().out computed by single-pass online softmax
// (running max and running denominator). Never allocates an n_q x n_k
// buffer; extra storage is O(n_q) scalars plus the output. The tracker, when
// installed, sees those scalars but no attention matrix.
Tensor2D attention_streaming(const Tensor2D& q, const Tensor2D& k, const Tensor2D& v,
                             bool causal);

// Gated MLP: (silu(x * w_gate) ⊙ (x * w_up)) * w_down, silu(z) = z/(1+e^-z).
// w_gate, w_up: d x f; w_down: f x d.
Tensor2D swiglu_mlp(const Tensor2D& x, const Tensor2D& w_gate, const Tensor2D& w_up,
                    const Tensor2D& w_down);

} // namespace v2drop
