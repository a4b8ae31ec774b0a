#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace eianet {

enum class DivSign { negated, literal };

std::string div_sign_name(DivSign s);
DivSign div_sign_from_name(const std::string& name);

// Every hyperparameter and ablation switch of a run. alpha < 0 means
// "derive from M" via alpha = 0.1 * M.
struct RunConfig {
    size_t class_count = 10;   // K
    size_t feature_dim = 64;   // d
    size_t image_size = 32;
    std::vector<size_t> encoder_widths = {16, 32, 64};
    bool use_attention = true;
    bool use_etf = true;
    size_t neighbor_count = 4;  // M
    double alpha = -1.0;
    double logit_scale = 16.0;
    double label_smoothing = 0.1;
    double lr_source = 0.01;
    double lr_adapt = 0.001;
    size_t epochs_source = 50;
    size_t epochs_adapt = 20;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    uint64_t seed = 0;
    DivSign div_sign = DivSign::negated;
    size_t batch_size = 32;

    double resolved_alpha() const {
        return alpha < 0.0 ? 0.1 * static_cast<double>(neighbor_count) : alpha;
    }

    // Throws ConfigError on violated invariants.
    void validate() const;

    std::string to_json_string() const;
    static RunConfig from_json_string(const std::string& text);
};

}  // namespace eianet
