#pragma once

#include <cstdint>
#include <vector>

#include "eianet/tensor.hpp"

namespace eianet {

// Fixed simplex-ETF prototype classifier. The d x K matrix E holds one unit
// prototype per class column; distinct columns have inner product -1/(K-1).
// E is frozen: it never requires gradients and is byte-stable across a run.
struct EtfClassifier {
    Tensor prototypes;   // d x K, requires_grad = false
    size_t class_count = 0;
    size_t feature_dim = 0;
    uint64_t seed = 0;
    double logit_scale = 16.0;
};

struct EtfValidationReport {
    double max_norm_deviation = 0.0;     // max_i | ||u_i|| - 1 |
    double max_offdiag_deviation = 0.0;  // max_{i != j} | <u_i,u_j> + 1/(K-1) |
    bool passed = false;
};

// E = sqrt(K/(K-1)) * U * (I_K - (1/K) 1 1^T), U = orthonormal_columns(d,K,seed).
// Requires 2 <= K <= d.
EtfClassifier build_etf(size_t class_count, size_t feature_dim, uint64_t seed,
                        double logit_scale = 16.0);

// Same construction from a caller-supplied orthonormal factor.
EtfClassifier build_etf_from_factor(const Tensor& u, uint64_t seed,
                                    double logit_scale = 16.0);

EtfValidationReport validate_etf(const EtfClassifier& c, double tolerance = 1e-9);

// logits[b,i] = s * cos(features[b], u_i). Zero-norm feature rows produce an
// all-zero logits row. Differentiable w.r.t. features only.
Tensor etf_logits(const EtfClassifier& c, const Tensor& features);

// argmax_i cos(features[b], u_i); ties break to the lowest class index.
// Labels are 1-based.
std::vector<int> etf_predict(const EtfClassifier& c, const Tensor& features);

// Shared argmax-cosine rule for any prototype matrix (d x K).
std::vector<int> cosine_predict(const Tensor& prototypes, const Tensor& features);

}  // namespace eianet
