#include "eianet/etf.hpp"

#include <cmath>

#include "eianet/errors.hpp"

namespace eianet {

EtfClassifier build_etf_from_factor(const Tensor& u, uint64_t seed,
                                    double logit_scale) {
    if (u.rank() != 2)
        throw DimensionError("build_etf: factor must be 2-D, got " +
                             shape_str(u.shape()));
    const size_t d = u.dim(0), k = u.dim(1);
    if (k < 2)
        throw ContractError("build_etf: class count must be at least 2, got " +
                            std::to_string(k));
    if (k > d)
        throw DimensionError("build_etf: feature dimension " + std::to_string(d) +
                             " must be >= class count " + std::to_string(k));
    if (logit_scale <= 0.0)
        throw ConfigError("build_etf: logit scale must be positive");

    // E[i][j] = c * (U[i][j] - row_mean(U)[i]); centering realizes I - 11^T/K.
    const double scale = std::sqrt(static_cast<double>(k) / (k - 1.0));
    std::vector<double> e(d * k);
    for (size_t i = 0; i < d; ++i) {
        double row_mean = 0.0;
        for (size_t j = 0; j < k; ++j) row_mean += u.values()[i * k + j];
        row_mean /= static_cast<double>(k);
        for (size_t j = 0; j < k; ++j)
            e[i * k + j] = scale * (u.values()[i * k + j] - row_mean);
    }

    EtfClassifier c;
    c.prototypes = Tensor::from_data({d, k}, std::move(e), /*requires_grad=*/false);
    c.class_count = k;
    c.feature_dim = d;
    c.seed = seed;
    c.logit_scale = logit_scale;
    return c;
}

EtfClassifier build_etf(size_t class_count, size_t feature_dim, uint64_t seed,
                        double logit_scale) {
    if (class_count < 2)
        throw ContractError("build_etf: class count must be at least 2, got " +
                            std::to_string(class_count));
    if (class_count > feature_dim)
        throw DimensionError("build_etf: feature dimension " +
                             std::to_string(feature_dim) + " must be >= class count " +
                             std::to_string(class_count));
    Tensor u = orthonormal_columns(feature_dim, class_count, seed);
    return build_etf_from_factor(u, seed, logit_scale);
}

EtfValidationReport validate_etf(const EtfClassifier& c, double tolerance) {
    const size_t d = c.feature_dim, k = c.class_count;
    const std::vector<double>& e = c.prototypes.values();
    EtfValidationReport report;
    const double target_off = -1.0 / (static_cast<double>(k) - 1.0);
    for (size_t i = 0; i < k; ++i) {
        for (size_t j = i; j < k; ++j) {
            double dot = 0.0;
            for (size_t r = 0; r < d; ++r) dot += e[r * k + i] * e[r * k + j];
            if (i == j) {
                const double dev = std::abs(std::sqrt(dot) - 1.0);
                report.max_norm_deviation = std::max(report.max_norm_deviation, dev);
            } else {
                const double dev = std::abs(dot - target_off);
                report.max_offdiag_deviation =
                    std::max(report.max_offdiag_deviation, dev);
            }
        }
    }
    report.passed = report.max_norm_deviation <= tolerance &&
                    report.max_offdiag_deviation <= tolerance;
    return report;
}

Tensor etf_logits(const EtfClassifier& c, const Tensor& features) {
    if (features.rank() != 2 || features.dim(1) != c.feature_dim)
        throw DimensionError("etf_logits: features " + shape_str(features.shape()) +
                             " do not match feature dimension " +
                             std::to_string(c.feature_dim));
    // Prototypes are unit-norm, so cosine = dot with the normalized feature.
    Tensor unit = l2_normalize(features, 1);
    return mul_scalar(matmul(unit, c.prototypes), c.logit_scale);
}

std::vector<int> cosine_predict(const Tensor& prototypes, const Tensor& features) {
    if (features.rank() != 2 || features.dim(1) != prototypes.dim(0))
        throw DimensionError("cosine_predict: features " +
                             shape_str(features.shape()) + " do not match prototypes " +
                             shape_str(prototypes.shape()));
    const size_t b = features.dim(0), d = prototypes.dim(0), k = prototypes.dim(1);

    // Normalize both sides so ties are exact cosine ties regardless of scale.
    Tensor unit_f = l2_normalize(features, 1);
    Tensor unit_p = l2_normalize(prototypes, 0);
    std::vector<int> labels(b, 1);
    for (size_t r = 0; r < b; ++r) {
        double best = -2.0;
        size_t best_j = 0;
        for (size_t j = 0; j < k; ++j) {
            double dot = 0.0;
            for (size_t i = 0; i < d; ++i)
                dot += unit_f.values()[r * d + i] * unit_p.values()[i * k + j];
            if (dot > best) {  // strict: ties keep the lowest index
                best = dot;
                best_j = j;
            }
        }
        labels[r] = static_cast<int>(best_j) + 1;
    }
    return labels;
}

std::vector<int> etf_predict(const EtfClassifier& c, const Tensor& features) {
    return cosine_predict(c.prototypes, features);
}

}  // namespace eianet
