// tensor kernel unit tests: hand examples plus oracle comparisons

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <atomic>
#include <cmath>
#include <thread>

#include "v2drop/errors.hpp"
#include "v2drop/oracle.hpp"
#include "v2drop/rng.hpp"
#include "v2drop/tensor.hpp"

using namespace v2drop;

namespace {

Tensor2D make(int rows, int cols, std::initializer_list<float> values) {
    Tensor2D t(rows, cols);
    std::copy(values.begin(), values.end(), t.data.begin());
    return t;
}

Tensor2D random_tensor(int rows, int cols, Xoshiro256ss& rng, double scale = 1.0) {
    Tensor2D t(rows, cols);
    for (float& v : t.data) {
        v = static_cast<float>(rng.next_symmetric() * scale);
    }
    return t;
}

} // namespace

TEST_CASE("matmul identity and hand products") {
    const Tensor2D eye = make(2, 2, {1, 0, 0, 1});
    const Tensor2D b = make(2, 2, {3, 4, 5, 6});
    const Tensor2D c = matmul(eye, b);
    CHECK(c.data == b.data);

    const Tensor2D row = make(1, 2, {1, 2});
    const Tensor2D col = make(2, 1, {3, 4});
    CHECK(matmul(row, col).at(0, 0) == doctest::Approx(11.0));
}

TEST_CASE("matmul matches the triple-loop oracle") {
    Xoshiro256ss rng(7);
    const Tensor2D a = random_tensor(7, 5, rng);
    const Tensor2D b = random_tensor(5, 3, rng);
    const Tensor2D got = matmul(a, b);
    const std::vector<double> want = oracle::oracle_matmul(a, b);
    oracle::OracleReport report{.op_name = "matmul"};
    oracle::accumulate_errors(report, got.data, want, 1e-6);
    CHECK(report.max_rel_err < 1e-5);
}

TEST_CASE("matmul shape error names both shapes") {
    const Tensor2D a(7, 5);
    const Tensor2D b(4, 3);
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("7x5"), ShapeError);
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("4x3"), ShapeError);
}

TEST_CASE("ops are pure: repeated calls are bit-identical") {
    Xoshiro256ss rng(11);
    const Tensor2D a = random_tensor(6, 6, rng);
    const Tensor2D b = random_tensor(6, 6, rng);
    CHECK(matmul(a, b).data == matmul(a, b).data);
    CHECK(attention_dense(a, b, b, true).out.data == attention_dense(a, b, b, true).out.data);
    CHECK(attention_streaming(a, b, b, true).data == attention_streaming(a, b, b, true).data);
    const std::vector<float> gain(6, 0.7f);
    CHECK(rms_norm(a, gain, 1e-6).data == rms_norm(a, gain, 1e-6).data);
}

TEST_CASE("rms_norm constant row with zero epsilon") {
    const Tensor2D x = make(1, 4, {2, 2, 2, 2});
    const std::vector<float> gain(4, 1.0f);
    const Tensor2D y = rms_norm(x, gain, 0.0);
    for (float v : y.data) {
        CHECK(v == doctest::Approx(1.0));
    }
}

TEST_CASE("rms_norm zero row stays zero") {
    const Tensor2D x(1, 4);
    const std::vector<float> gain(4, 1.0f);
    for (float v : rms_norm(x, gain, 1e-6).data) {
        CHECK(v == 0.0f);
    }
    for (float v : rms_norm(x, gain, 0.0).data) {
        CHECK(v == 0.0f);
    }
}

TEST_CASE("rms_norm matches the oracle") {
    Xoshiro256ss rng(3);
    const Tensor2D x = random_tensor(5, 32, rng);
    std::vector<float> gain(32);
    for (float& g : gain) {
        g = static_cast<float>(rng.next_symmetric());
    }
    const Tensor2D got = rms_norm(x, gain, 1e-6);
    const std::vector<double> want = oracle::oracle_rms_norm(x, gain, 1e-6);
    oracle::OracleReport report{.op_name = "rms_norm"};
    oracle::accumulate_errors(report, got.data, want, 1e-3);
    CHECK(report.max_rel_err < 1e-5);

    const std::vector<float> bad_gain(31, 1.0f);
    CHECK_THROWS_AS(rms_norm(x, bad_gain, 1e-6), ShapeError);
}

TEST_CASE("rope at position zero is the identity") {
    Xoshiro256ss rng(5);
    const Tensor2D x = random_tensor(3, 8, rng);
    const std::vector<int> positions(3, 0);
    CHECK(rope_apply(x, positions, 4, 10000.0).data == x.data);
}

TEST_CASE("rope rotates a unit pair by the position angle") {
    const Tensor2D x = make(1, 2, {1, 0});
    for (int p : {1, 2, 7}) {
        const std::vector<int> positions{p};
        const Tensor2D y = rope_apply(x, positions, 2, 10000.0);
        CHECK(y.at(0, 0) == doctest::Approx(std::cos(p)).epsilon(1e-6));
        CHECK(y.at(0, 1) == doctest::Approx(std::sin(p)).epsilon(1e-6));
    }
}

TEST_CASE("rope inverse rotation recovers the input") {
    Xoshiro256ss rng(6);
    const Tensor2D x = random_tensor(4, 16, rng);
    const std::vector<int> fwd{3, 9, 21, 40};
    const Tensor2D y = rope_apply(x, fwd, 8, 10000.0);
    std::vector<int> bwd(fwd.size());
    for (std::size_t i = 0; i < fwd.size(); ++i) {
        bwd[i] = -fwd[i];
    }
    const Tensor2D back = rope_apply(y, bwd, 8, 10000.0);
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        CHECK(back.data[i] == doctest::Approx(x.data[i]).epsilon(1e-5));
    }
}

TEST_CASE("rope rejects odd head_dim") {
    const Tensor2D x(2, 6);
    const std::vector<int> positions{0, 1};
    CHECK_THROWS_AS(rope_apply(x, positions, 3, 10000.0), ConfigError);
}

TEST_CASE("attention with a single matching kv pair returns the value row") {
    const Tensor2D q = make(1, 2, {1, 1});
    const Tensor2D k = q;
    const Tensor2D v = make(1, 3, {5, -2, 7});
    const AttentionResult res = attention_dense(q, k, v, false);
    CHECK(res.weights.at(0, 0) == doctest::Approx(1.0));
    for (int c = 0; c < 3; ++c) {
        CHECK(res.out.at(0, c) == doctest::Approx(v.at(0, c)));
    }
    const Tensor2D streamed = attention_streaming(q, k, v, false);
    for (int c = 0; c < 3; ++c) {
        CHECK(streamed.at(0, c) == doctest::Approx(v.at(0, c)));
    }
}

TEST_CASE("attention over two identical keys is uniform") {
    const Tensor2D q = make(1, 2, {0.3f, -0.7f});
    const Tensor2D k = make(2, 2, {1, 2, 1, 2});
    const Tensor2D v = make(2, 2, {1, 0, 0, 1});
    const AttentionResult res = attention_dense(q, k, v, false);
    CHECK(res.weights.at(0, 0) == doctest::Approx(0.5));
    CHECK(res.weights.at(0, 1) == doctest::Approx(0.5));
}

TEST_CASE("dense attention matches the oracle under causal masking") {
    Xoshiro256ss rng(9);
    const Tensor2D q = random_tensor(6, 4, rng);
    const Tensor2D k = random_tensor(6, 4, rng);
    const Tensor2D v = random_tensor(6, 4, rng);
    const AttentionResult res = attention_dense(q, k, v, true);
    const oracle::OracleAttention want = oracle::oracle_attention(q, k, v, true);
    oracle::OracleReport report{.op_name = "attention_dense"};
    oracle::accumulate_errors(report, res.out.data, want.out);
    CHECK(report.max_abs_err < 1e-4);
}

TEST_CASE("causal weights above the diagonal are exactly zero and rows sum to one") {
    Xoshiro256ss rng(10);
    for (int rep = 0; rep < 20; ++rep) {
        const int n = 2 + static_cast<int>(rng.next_below(10));
        const Tensor2D q = random_tensor(n, 8, rng);
        const Tensor2D k = random_tensor(n, 8, rng);
        const Tensor2D v = random_tensor(n, 8, rng);
        const AttentionResult res = attention_dense(q, k, v, true);
        for (int i = 0; i < n; ++i) {
            double row_sum = 0.0;
            for (int j = 0; j < n; ++j) {
                if (j > i) {
                    CHECK(res.weights.at(i, j) == 0.0f);
                }
                row_sum += res.weights.at(i, j);
            }
            CHECK(row_sum == doctest::Approx(1.0).epsilon(1e-5));
        }
    }
}

TEST_CASE("streaming attention equals dense over random shapes") {
    Xoshiro256ss rng(12);
    ActivationTracker tracker;
    for (int rep = 0; rep < 100; ++rep) {
        const int n = 1 + static_cast<int>(rng.next_below(128));
        const int d = 1 + static_cast<int>(rng.next_below(64));
        const bool causal = rng.next_below(2) == 0;
        const Tensor2D q = random_tensor(n, d, rng);
        const Tensor2D k = random_tensor(n, d, rng);
        const Tensor2D v = random_tensor(n, d, rng);
        const AttentionResult dense = attention_dense(q, k, v, causal);
        Tensor2D streamed;
        {
            TrackerScope scope(&tracker);
            tracker.begin_scope();
            streamed = attention_streaming(q, k, v, causal);
            tracker.end_scope();
        }
        for (std::size_t i = 0; i < dense.out.data.size(); ++i) {
            CHECK(std::abs(dense.out.data[i] - streamed.data[i]) < 1e-4);
        }
    }
    CHECK(tracker.attention_matrix_allocs() == 0);
}

TEST_CASE("streaming attention matches the oracle") {
    Xoshiro256ss rng(13);
    oracle::OracleReport report{.op_name = "attention_streaming"};
    for (int rep = 0; rep < 50; ++rep) {
        const int n_q = 1 + static_cast<int>(rng.next_below(24));
        const int n_k = n_q + static_cast<int>(rng.next_below(24));
        const Tensor2D q = random_tensor(n_q, 8, rng);
        const Tensor2D k = random_tensor(n_k, 8, rng);
        const Tensor2D v = random_tensor(n_k, 8, rng);
        const Tensor2D got = attention_streaming(q, k, v, true);
        const oracle::OracleAttention want = oracle::oracle_attention(q, k, v, true);
        oracle::accumulate_errors(report, got.data, want.out);
    }
    report.pass = report.max_abs_err < 1e-4;
    CHECK(report.pass);
    MESSAGE(report.to_json_line());
}

TEST_CASE("swiglu of zero input is zero") {
    const Tensor2D x(2, 3);
    Xoshiro256ss rng(14);
    const Tensor2D wg = random_tensor(3, 5, rng);
    const Tensor2D wu = random_tensor(3, 5, rng);
    const Tensor2D wd = random_tensor(5, 3, rng);
    for (float out : swiglu_mlp(x, wg, wu, wd).data) {
        CHECK(out == 0.0f);
    }
}

TEST_CASE("silu saturates for large gate values") {
    const Tensor2D x = make(1, 1, {1});
    const Tensor2D wg = make(1, 1, {20});
    const Tensor2D wu = make(1, 1, {1});
    const Tensor2D wd = make(1, 1, {1});
    CHECK(swiglu_mlp(x, wg, wu, wd).at(0, 0) == doctest::Approx(20.0).epsilon(1e-3));
}

TEST_CASE("swiglu matches the oracle") {
    Xoshiro256ss rng(15);
    const Tensor2D x = random_tensor(4, 16, rng);
    const Tensor2D wg = random_tensor(16, 40, rng, 0.3);
    const Tensor2D wu = random_tensor(16, 40, rng, 0.3);
    const Tensor2D wd = random_tensor(40, 16, rng, 0.3);
    const Tensor2D got = swiglu_mlp(x, wg, wu, wd);
    const std::vector<double> want = oracle::oracle_swiglu(x, wg, wu, wd);
    oracle::OracleReport report{.op_name = "swiglu_mlp"};
    oracle::accumulate_errors(report, got.data, want);
    CHECK(report.max_abs_err < 1e-4);
}

TEST_CASE("ops are safe under concurrent callers") {
    Xoshiro256ss rng(17);
    const Tensor2D a = random_tensor(24, 24, rng);
    const Tensor2D b = random_tensor(24, 24, rng);
    const Tensor2D expected = matmul(a, b);
    std::vector<std::thread> workers;
    std::atomic<int> mismatches{0};
    for (int t = 0; t < 8; ++t) {
        workers.emplace_back([&] {
            for (int rep = 0; rep < 50; ++rep) {
                if (matmul(a, b).data != expected.data) {
                    mismatches.fetch_add(1);
                }
                if (attention_streaming(a, b, b, true).rows != 24) {
                    mismatches.fetch_add(1);
                }
            }
        });
    }
    for (std::thread& w : workers) {
        w.join();
    }
    CHECK(mismatches.load() == 0);
}

TEST_CASE("dense attention counts one square matrix per call") {
    Xoshiro256ss rng(16);
    const Tensor2D q = random_tensor(5, 4, rng);
    const Tensor2D k = random_tensor(5, 4, rng);
    const Tensor2D v = random_tensor(5, 4, rng);
    ActivationTracker tracker;
    {
        TrackerScope scope(&tracker);
        tracker.begin_scope();
        attention_dense(q, k, v, true);
        tracker.end_scope();
    }
    CHECK(tracker.attention_matrix_allocs() == 1);
    // weights 5x5 + out 5x4
    CHECK(tracker.peak_scope_elems() == 25 + 20);
}
