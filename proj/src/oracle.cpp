#include "v2drop/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "v2drop/errors.hpp"

// Reference arithmetic only. Everything below restates the target operation
// with the most naive loops available, in double precision; none of it calls
// into the runtime kernels it exists to check.

namespace v2drop::oracle {

std::string OracleReport::to_json_line() const {
    std::ostringstream out;
    out.setf(std::ios::scientific);
    out.precision(6);
    out << "{\"op_name\":\"" << op_name << "\",\"max_abs_err\":" << max_abs_err
        << ",\"max_rel_err\":" << max_rel_err << ",\"cases\":" << cases
        << ",\"pass\":" << (pass ? "true" : "false") << "}";
    return out.str();
}

std::vector<double> oracle_matmul(const Tensor2D& a, const Tensor2D& b) {
    if (a.cols != b.rows) {
        throw ShapeError("oracle_matmul: inner dimensions differ");
    }
    std::vector<double> c(static_cast<std::size_t>(a.rows) * b.cols, 0.0);
    for (int i = 0; i < a.rows; ++i) {
        for (int j = 0; j < b.cols; ++j) {
            double sum = 0.0;
            for (int k = 0; k < a.cols; ++k) {
                sum += static_cast<double>(a.at(i, k)) * static_cast<double>(b.at(k, j));
            }
            c[static_cast<std::size_t>(i) * b.cols + j] = sum;
        }
    }
    return c;
}

std::vector<double> oracle_rms_norm(const Tensor2D& x, const std::vector<float>& gain,
                                    double epsilon) {
    if (static_cast<int>(gain.size()) != x.cols) {
        throw ShapeError("oracle_rms_norm: gain length mismatch");
    }
    std::vector<double> y(x.data.size(), 0.0);
    for (int i = 0; i < x.rows; ++i) {
        double sumsq = 0.0;
        for (int j = 0; j < x.cols; ++j) {
            sumsq += static_cast<double>(x.at(i, j)) * x.at(i, j);
        }
        const double denom = std::sqrt(sumsq / x.cols + epsilon);
        for (int j = 0; j < x.cols; ++j) {
            y[static_cast<std::size_t>(i) * x.cols + j] =
                denom == 0.0 ? 0.0 : x.at(i, j) / denom * gain[j];
        }
    }
    return y;
}

std::vector<double> oracle_swiglu(const Tensor2D& x, const Tensor2D& w_gate,
                                  const Tensor2D& w_up, const Tensor2D& w_down) {
    const std::vector<double> gate = oracle_matmul(x, w_gate);
    const std::vector<double> up = oracle_matmul(x, w_up);
    const int f = w_gate.cols;
    const int d = w_down.cols;
    std::vector<double> y(static_cast<std::size_t>(x.rows) * d, 0.0);
    for (int i = 0; i < x.rows; ++i) {
        for (int j = 0; j < d; ++j) {
            double sum = 0.0;
            for (int k = 0; k < f; ++k) {
                const double z = gate[static_cast<std::size_t>(i) * f + k];
                const double silu = z / (1.0 + std::exp(-z));
                sum += silu * up[static_cast<std::size_t>(i) * f + k] *
                       static_cast<double>(w_down.at(k, j));
            }
            y[static_cast<std::size_t>(i) * d + j] = sum;
        }
    }
    return y;
}

OracleAttention oracle_attention(const Tensor2D& q, const Tensor2D& k, const Tensor2D& v,
                                 bool causal) {
    if (q.cols != k.cols || k.rows != v.rows) {
        throw ShapeError("oracle_attention: shape mismatch");
    }
    const int n_q = q.rows;
    const int n_k = k.rows;
    const int dv = v.cols;
    OracleAttention res;
    res.out.assign(static_cast<std::size_t>(n_q) * dv, 0.0);
    res.weights.assign(static_cast<std::size_t>(n_q) * n_k, 0.0);
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols));
    for (int i = 0; i < n_q; ++i) {
        std::vector<double> logits(n_k, -std::numeric_limits<double>::infinity());
        for (int j = 0; j < n_k; ++j) {
            if (causal && j > i + (n_k - n_q)) {
                continue;
            }
            double dot = 0.0;
            for (int c = 0; c < q.cols; ++c) {
                dot += static_cast<double>(q.at(i, c)) * k.at(j, c);
            }
            logits[j] = dot * scale;
        }
        double max_logit = -std::numeric_limits<double>::infinity();
        for (double l : logits) {
            max_logit = std::max(max_logit, l);
        }
        double denom = 0.0;
        std::vector<double> numer(n_k, 0.0);
        for (int j = 0; j < n_k; ++j) {
            if (std::isinf(logits[j])) {
                continue;
            }
            numer[j] = std::exp(logits[j] - max_logit);
            denom += numer[j];
        }
        for (int j = 0; j < n_k; ++j) {
            const double w = numer[j] / denom;
            res.weights[static_cast<std::size_t>(i) * n_k + j] = w;
            for (int c = 0; c < dv; ++c) {
                res.out[static_cast<std::size_t>(i) * dv + c] += w * v.at(j, c);
            }
        }
    }
    return res;
}

std::vector<std::uint32_t> oracle_topk(const VariationScores& scores, int k) {
    std::vector<ScoredToken> sorted = scores.scores;
    std::stable_sort(sorted.begin(), sorted.end(),
                     [](const ScoredToken& a, const ScoredToken& b) {
                         return a.score > b.score;
                     });
    if (k < static_cast<int>(sorted.size())) {
        sorted.resize(std::max(k, 0));
    }
    // report in original sequence order
    std::sort(sorted.begin(), sorted.end(), [](const ScoredToken& a, const ScoredToken& b) {
        return a.original_position < b.original_position;
    });
    std::vector<std::uint32_t> ids;
    ids.reserve(sorted.size());
    for (const ScoredToken& t : sorted) {
        ids.push_back(t.content_id);
    }
    return ids;
}

double oracle_variation(const VariationMetric& metric, const std::vector<float>& prev,
                        const std::vector<float>& curr) {
    if (prev.size() != curr.size()) {
        throw ShapeError("oracle_variation: length mismatch");
    }
    switch (metric.kind) {
        case MetricKind::l1: {
            double sum = 0.0;
            for (std::size_t i = 0; i < prev.size(); ++i) {
                const double diff = static_cast<double>(curr[i]) - prev[i];
                sum += diff < 0.0 ? -diff : diff;
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
            double pp = 0.0;
            double cc = 0.0;
            for (std::size_t i = 0; i < prev.size(); ++i) {
                dot += static_cast<double>(prev[i]) * curr[i];
                pp += static_cast<double>(prev[i]) * prev[i];
                cc += static_cast<double>(curr[i]) * curr[i];
            }
            if (std::sqrt(pp) < metric.epsilon || std::sqrt(cc) < metric.epsilon) {
                return 1.0;
            }
            const double cosine = dot / (std::sqrt(pp) * std::sqrt(cc));
            return cosine > 1.0 ? 0.0 : 1.0 - cosine;
        }
    }
    throw ConfigError("oracle_variation: unhandled metric");
}

void accumulate_errors(OracleReport& report, const std::vector<float>& got,
                       const std::vector<double>& want, double rel_floor) {
    if (got.size() != want.size()) {
        throw ShapeError("accumulate_errors: buffer sizes differ");
    }
    for (std::size_t i = 0; i < got.size(); ++i) {
        const double abs_err = std::abs(static_cast<double>(got[i]) - want[i]);
        const double denom = std::max(std::abs(want[i]), rel_floor);
        report.max_abs_err = std::max(report.max_abs_err, abs_err);
        report.max_rel_err = std::max(report.max_rel_err, abs_err / denom);
    }
    ++report.cases;
}

} // namespace v2drop::oracle
