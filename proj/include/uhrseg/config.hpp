#pragma once

#include "uhrseg/model.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>

namespace uhrseg {

struct TrainConfig {
    int64_t iters = 2000;
    int64_t batch = 4;
    double base_lr = 1e-2;
    double power = 0.9;
    double momentum = 0.9;
    double weight_decay = 0.0;
    double lambda_s = 1.0;
    double lambda_b = 0.4;
    double lambda_l = 0.4;
    int64_t crop = 128;
    int64_t query_samples = 2048; // 0 = dense supervision at crop resolution
    int64_t eval_every = 200;    // 0 = only the final test evaluation
    int64_t eval_scenes = 16;    // val scenes per evaluation
    int64_t checkpoint_every = 0; // 0 = final checkpoint only
    uint64_t seed = 1234;

    void validate() const;
};

struct TilingConfig {
    int64_t patch = 128;
    int64_t overlap = -1; // -1: patch/16
    int64_t budget_bytes = 512ll * 1024 * 1024;
    int64_t chunk_rows = 0; // 0: auto
    int64_t workers = 1;
    std::string mode = "local";
    int64_t target_side = 512;

    void validate() const;
};

struct DataConfig {
    std::string manifest; // path to manifest.json

    void validate() const {}
};

/// The run configuration file: sections {model, train, tiling, data,
/// ablation}; unknown keys are rejected, missing keys take documented
/// defaults and are echoed back in outputs.
struct RunConfig {
    int64_t schema_version = 1;
    ModelConfig model;
    TrainConfig train;
    TilingConfig tiling;
    DataConfig data;
    AblationFlags ablation;

    void validate() const;
    nlohmann::json to_json() const;
    static RunConfig from_json(const nlohmann::json& js);
    static RunConfig from_file(const std::string& path);

    /// FNV-1a 64 over the canonical (sorted-key) serialization.
    std::string hash() const;
};

/// FNV-1a 64-bit, hex string.
std::string fnv1a_hex(const std::string& bytes);

} // namespace uhrseg
