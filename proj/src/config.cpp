#include "eianet/config.hpp"

#include <json.hpp>

#include "eianet/errors.hpp"

namespace eianet {

using nlohmann::json;

std::string div_sign_name(DivSign s) {
    return s == DivSign::negated ? "negated" : "literal";
}

DivSign div_sign_from_name(const std::string& name) {
    if (name == "negated") return DivSign::negated;
    if (name == "literal") return DivSign::literal;
    throw ConfigError("div_sign must be 'negated' or 'literal', got '" + name + "'");
}

void RunConfig::validate() const {
    if (class_count < 2) throw ConfigError("config: class_count must be >= 2");
    if (feature_dim < class_count)
        throw ConfigError("config: feature_dim (" + std::to_string(feature_dim) +
                          ") must be >= class_count (" + std::to_string(class_count) +
                          ")");
    if (neighbor_count < 1) throw ConfigError("config: neighbor_count must be >= 1");
    if (resolved_alpha() < 0.0) throw ConfigError("config: alpha must be >= 0");
    if (lr_source <= 0.0 || lr_adapt <= 0.0)
        throw ConfigError("config: learning rates must be > 0");
    if (logit_scale <= 0.0) throw ConfigError("config: logit_scale must be > 0");
    if (label_smoothing < 0.0 || label_smoothing >= 1.0)
        throw ConfigError("config: label_smoothing must be in [0, 1)");
    if (momentum < 0.0 || momentum >= 1.0)
        throw ConfigError("config: momentum must be in [0, 1)");
    if (weight_decay < 0.0) throw ConfigError("config: weight_decay must be >= 0");
    if (batch_size < 1) throw ConfigError("config: batch_size must be >= 1");
    if (encoder_widths.empty()) throw ConfigError("config: encoder_widths is empty");
    for (size_t w : encoder_widths)
        if (w == 0) throw ConfigError("config: encoder widths must be positive");
    // Each block except the last halves the spatial size.
    size_t spatial = image_size;
    for (size_t i = 0; i + 1 < encoder_widths.size(); ++i) {
        if (spatial % 2 != 0 || spatial < 2)
            throw ConfigError("config: image_size " + std::to_string(image_size) +
                              " cannot be pooled through " +
                              std::to_string(encoder_widths.size()) + " blocks");
        spatial /= 2;
    }
    if (spatial < 1) throw ConfigError("config: image too small for encoder depth");
}

std::string RunConfig::to_json_string() const {
    json j;
    j["class_count"] = class_count;
    j["feature_dim"] = feature_dim;
    j["image_size"] = image_size;
    j["encoder_widths"] = encoder_widths;
    j["use_attention"] = use_attention;
    j["use_etf"] = use_etf;
    j["neighbor_count"] = neighbor_count;
    j["alpha"] = alpha;
    j["logit_scale"] = logit_scale;
    j["label_smoothing"] = label_smoothing;
    j["lr_source"] = lr_source;
    j["lr_adapt"] = lr_adapt;
    j["epochs_source"] = epochs_source;
    j["epochs_adapt"] = epochs_adapt;
    j["momentum"] = momentum;
    j["weight_decay"] = weight_decay;
    j["seed"] = seed;
    j["div_sign"] = div_sign_name(div_sign);
    j["batch_size"] = batch_size;
    return j.dump();
}

RunConfig RunConfig::from_json_string(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    RunConfig cfg;
    try {
        if (j.contains("class_count")) cfg.class_count = j["class_count"].get<size_t>();
        if (j.contains("feature_dim")) cfg.feature_dim = j["feature_dim"].get<size_t>();
        if (j.contains("image_size")) cfg.image_size = j["image_size"].get<size_t>();
        if (j.contains("encoder_widths"))
            cfg.encoder_widths = j["encoder_widths"].get<std::vector<size_t>>();
        if (j.contains("use_attention")) cfg.use_attention = j["use_attention"].get<bool>();
        if (j.contains("use_etf")) cfg.use_etf = j["use_etf"].get<bool>();
        if (j.contains("neighbor_count"))
            cfg.neighbor_count = j["neighbor_count"].get<size_t>();
        if (j.contains("alpha")) cfg.alpha = j["alpha"].get<double>();
        if (j.contains("logit_scale")) cfg.logit_scale = j["logit_scale"].get<double>();
        if (j.contains("label_smoothing"))
            cfg.label_smoothing = j["label_smoothing"].get<double>();
        if (j.contains("lr_source")) cfg.lr_source = j["lr_source"].get<double>();
        if (j.contains("lr_adapt")) cfg.lr_adapt = j["lr_adapt"].get<double>();
        if (j.contains("epochs_source")) cfg.epochs_source = j["epochs_source"].get<size_t>();
        if (j.contains("epochs_adapt")) cfg.epochs_adapt = j["epochs_adapt"].get<size_t>();
        if (j.contains("momentum")) cfg.momentum = j["momentum"].get<double>();
        if (j.contains("weight_decay")) cfg.weight_decay = j["weight_decay"].get<double>();
        if (j.contains("seed")) cfg.seed = j["seed"].get<uint64_t>();
        if (j.contains("div_sign"))
            cfg.div_sign = div_sign_from_name(j["div_sign"].get<std::string>());
        if (j.contains("batch_size")) cfg.batch_size = j["batch_size"].get<size_t>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: bad field type: ") + e.what());
    }
    return cfg;
}

}  // namespace eianet
