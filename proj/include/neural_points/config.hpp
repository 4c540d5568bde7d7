#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "neural_points/errors.hpp"

namespace np {

using Json = nlohmann::json;

struct PosEncodingConfig {
    int num_frequencies = 6;
    bool include_input = true;

    int output_dim() const {
        return 4 * num_frequencies + (include_input ? 2 : 0);
    }
};

struct EncoderConfig {
    std::vector<int> layer_widths = {32, 32, 64, 64, 128};
    int aggregation_width = 128;
    int knn = 10;

    int feature_dim() const { return 2 * aggregation_width; }
};

struct FieldConfig {
    PosEncodingConfig encoding;
    int hidden = 256;  // widths of the two hidden linear layers; output is 3
};

struct ModelConfig {
    EncoderConfig encoder;
    FieldConfig field;
    double alpha_blend = 100.0;   // center-blend sharpness
    double alpha_proj = 1000.0;   // projection sharpness
    int knn_proj = 4;             // neighbors in every projection
    int blend_k = 4;              // neighbor centers in the global blend
    int patch_size = 256;         // max points handled by one feature patch
};

struct TrainConfig {
    ModelConfig model;
    int batch_size = 4;
    std::int64_t iterations = 2000;
    double lr = 0.01;
    double lr_decay = 0.5;
    std::int64_t decay_interval = 250;
    double omega_normal = 0.01;
    double omega_integration = 0.3;
    std::uint64_t seed = 1;
    std::int64_t checkpoint_interval = 500;
    std::string dataset_dir;
    std::string out_dir = ".";

    void validate() const {
        if (batch_size < 1 || iterations < 0 || decay_interval < 1)
            throw config_error("TrainConfig: counts must be positive");
        if (omega_normal < 0.0 || omega_integration < 0.0)
            throw config_error("TrainConfig: loss weights must be nonnegative");
        if (model.knn_proj < 1 || model.blend_k < 1 || model.encoder.knn < 1)
            throw config_error("TrainConfig: neighbor counts must be positive");
    }
};

struct DatasetConfig {
    std::vector<std::string> surfaces = {"sphere"};
    int points_in = 256;
    double factor = 4.0;
    int anchors = 1;
    int patch_size = 256;
    std::uint64_t seed = 1;
    std::string out_dir = "dataset";
};

// ---------------------------------------------------------------------------
// JSON round trip; every field is optional and falls back to the default.

namespace detail {

template <typename T>
void get_if(const Json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline PosEncodingConfig pos_encoding_from_json(const Json& j) {
    PosEncodingConfig c;
    detail::get_if(j, "num_frequencies", c.num_frequencies);
    detail::get_if(j, "include_input", c.include_input);
    if (c.num_frequencies < 1) throw config_error("num_frequencies must be >= 1");
    return c;
}

inline Json to_json(const PosEncodingConfig& c) {
    return Json{{"num_frequencies", c.num_frequencies}, {"include_input", c.include_input}};
}

inline EncoderConfig encoder_from_json(const Json& j) {
    EncoderConfig c;
    detail::get_if(j, "layer_widths", c.layer_widths);
    detail::get_if(j, "aggregation_width", c.aggregation_width);
    detail::get_if(j, "knn", c.knn);
    if (c.layer_widths.size() != 5)
        throw config_error("encoder layer_widths must list exactly 5 widths");
    for (int w : c.layer_widths)
        if (w < 1) throw config_error("encoder layer widths must be positive");
    if (c.aggregation_width < 1 || c.knn < 1)
        throw config_error("encoder aggregation_width and knn must be positive");
    return c;
}

inline Json to_json(const EncoderConfig& c) {
    return Json{{"layer_widths", c.layer_widths},
                {"aggregation_width", c.aggregation_width},
                {"knn", c.knn}};
}

inline FieldConfig field_from_json(const Json& j) {
    FieldConfig c;
    if (j.contains("encoding")) c.encoding = pos_encoding_from_json(j.at("encoding"));
    detail::get_if(j, "hidden", c.hidden);
    if (c.hidden < 1) throw config_error("field hidden width must be positive");
    return c;
}

inline Json to_json(const FieldConfig& c) {
    return Json{{"encoding", to_json(c.encoding)}, {"hidden", c.hidden}};
}

inline ModelConfig model_from_json(const Json& j) {
    ModelConfig c;
    if (j.contains("encoder")) c.encoder = encoder_from_json(j.at("encoder"));
    if (j.contains("field")) c.field = field_from_json(j.at("field"));
    detail::get_if(j, "alpha_blend", c.alpha_blend);
    detail::get_if(j, "alpha_proj", c.alpha_proj);
    detail::get_if(j, "knn_proj", c.knn_proj);
    detail::get_if(j, "blend_k", c.blend_k);
    detail::get_if(j, "patch_size", c.patch_size);
    if (c.alpha_blend <= 0.0 || c.alpha_proj <= 0.0)
        throw config_error("blend/projection sharpness must be positive");
    if (c.knn_proj < 1 || c.blend_k < 1 || c.patch_size < 1)
        throw config_error("neighbor counts and patch_size must be positive");
    return c;
}

inline Json to_json(const ModelConfig& c) {
    return Json{{"encoder", to_json(c.encoder)}, {"field", to_json(c.field)},
                {"alpha_blend", c.alpha_blend},  {"alpha_proj", c.alpha_proj},
                {"knn_proj", c.knn_proj},        {"blend_k", c.blend_k},
                {"patch_size", c.patch_size}};
}

inline TrainConfig train_from_json(const Json& j) {
    TrainConfig c;
    if (j.contains("model")) c.model = model_from_json(j.at("model"));
    detail::get_if(j, "batch_size", c.batch_size);
    detail::get_if(j, "iterations", c.iterations);
    detail::get_if(j, "lr", c.lr);
    detail::get_if(j, "lr_decay", c.lr_decay);
    detail::get_if(j, "decay_interval", c.decay_interval);
    detail::get_if(j, "omega_normal", c.omega_normal);
    detail::get_if(j, "omega_integration", c.omega_integration);
    detail::get_if(j, "seed", c.seed);
    detail::get_if(j, "checkpoint_interval", c.checkpoint_interval);
    detail::get_if(j, "dataset_dir", c.dataset_dir);
    detail::get_if(j, "out_dir", c.out_dir);
    c.validate();
    return c;
}

inline Json to_json(const TrainConfig& c) {
    return Json{{"model", to_json(c.model)},
                {"batch_size", c.batch_size},
                {"iterations", c.iterations},
                {"lr", c.lr},
                {"lr_decay", c.lr_decay},
                {"decay_interval", c.decay_interval},
                {"omega_normal", c.omega_normal},
                {"omega_integration", c.omega_integration},
                {"seed", c.seed},
                {"checkpoint_interval", c.checkpoint_interval},
                {"dataset_dir", c.dataset_dir},
                {"out_dir", c.out_dir}};
}

inline DatasetConfig dataset_from_json(const Json& j) {
    DatasetConfig c;
    detail::get_if(j, "surfaces", c.surfaces);
    detail::get_if(j, "points_in", c.points_in);
    detail::get_if(j, "factor", c.factor);
    detail::get_if(j, "anchors", c.anchors);
    detail::get_if(j, "patch_size", c.patch_size);
    detail::get_if(j, "seed", c.seed);
    detail::get_if(j, "out_dir", c.out_dir);
    if (c.surfaces.empty()) throw config_error("dataset needs at least one surface");
    if (c.points_in < 1 || c.anchors < 1 || c.patch_size < 1)
        throw config_error("dataset counts must be positive");
    if (c.factor < 1.0) throw config_error("dataset factor must be >= 1");
    return c;
}

inline Json to_json(const DatasetConfig& c) {
    return Json{{"surfaces", c.surfaces}, {"points_in", c.points_in},
                {"factor", c.factor},     {"anchors", c.anchors},
                {"patch_size", c.patch_size}, {"seed", c.seed},
                {"out_dir", c.out_dir}};
}

}  // namespace np
