#pragma once

// Brute-force reference implementations used to validate the runtime's
// numeric paths. Everything here runs in double precision with the most
// literal algorithm available (triple loops, full sorts, explicit softmax)
// and shares no arithmetic with the code it checks. This library is linked
// by tests and the calibration tooling only, never by the inference path.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "v2drop/compression.hpp"
#include "v2drop/tensor.hpp"

namespace v2drop::oracle {

struct OracleReport {
    std::string op_name;
    double max_abs_err = 0.0;
    double max_rel_err = 0.0;
    int cases = 0;
    bool pass = false;

    // One JSON object per line, for CI log scraping.
    std::string to_json_line() const;
};

std::vector<double> oracle_matmul(const Tensor2D& a, const Tensor2D& b);

std::vector<double> oracle_rms_norm(const Tensor2D& x, const std::vector<float>& gain,
                                    double epsilon);

std::vector<double> oracle_swiglu(const Tensor2D& x, const Tensor2D& w_gate,
                                  const Tensor2D& w_up, const Tensor2D& w_down);

struct OracleAttention {
    std::vector<double> out;     // n_q x v.cols, row-major
    std::vector<double> weights; // n_q x n_k, row-major
};

OracleAttention oracle_attention(const Tensor2D& q, const Tensor2D& k, const Tensor2D& v,
                                 bool causal);

// Full stable sort by descending score, then the first k ids, returned in
// original sequence order.
std::vector<std::uint32_t> oracle_topk(const VariationScores& scores, int k);

double oracle_variation(const VariationMetric& metric, const std::vector<float>& prev,
                        const std::vector<float>& curr);

// Compares a float32 buffer against a double reference and folds the result
// into a report. `rel_floor` guards the relative error against tiny
// denominators.
void accumulate_errors(OracleReport& report, const std::vector<float>& got,
                       const std::vector<double>& want, double rel_floor = 1e-30);

// --- needle calibration -----------------------------------------------------
//
// Measures how reliably each policy keeps a designated high-variation vision
// token ("needle") through a progressive drop schedule, over `trials` random
// needle placements. Requires a weight file built by build_needle_model()
// (see workload.hpp for the embedding conventions it pairs with).

struct NeedleProtocol {
    int vision_tokens = 32;
    int text_len = 2;
    std::string schedule = "2:0.5,4:0.7";
    std::string one_time_schedule; // derived from `schedule` when empty
    int one_time_layer = 2;
};

struct NeedleCalibration {
    double recall_v2drop = 0.0;
    double recall_random = 0.0;
    double recall_one_time = 0.0;
    double recall_first_pos = 0.0; // needle pinned to block start, v2drop
    double recall_last_pos = 0.0;  // needle pinned to block end, v2drop
    double bias_first_pos = 0.0;   // positional_bias_stat of the surviving set
    double bias_last_pos = 0.0;
    double analytic_random = 0.0;  // final K / M
    int trials = 0;
};

NeedleCalibration calibrate_needle(const std::string& model_path, int trials,
                                   std::uint64_t seed,
                                   const NeedleProtocol& protocol = {});

} // namespace v2drop::oracle
