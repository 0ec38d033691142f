#pragma once

#include "uhrseg/config.hpp"
#include "uhrseg/dataset.hpp"
#include "uhrseg/memory_bank.hpp"
#include "uhrseg/metrics.hpp"
#include "uhrseg/tiling.hpp"

#include <json.hpp>

#include <string>
#include <utility>
#include <vector>

namespace uhrseg {

struct RunRecord {
    nlohmann::json config;   // resolved configuration, echoed back
    std::string config_hash; // fnv1a64 of the canonical config
    std::vector<std::pair<int64_t, double>> eval_history; // (iter, val mIoU)
    IoUReport final_test;
    MemoryReport memory;
    double wall_time_sec = 0.0;

    /// fnv1a64 over the record with wall-time fields masked out, so
    /// determinism checks can compare hashes directly.
    std::string record_hash() const;
    nlohmann::json to_json() const;
};

/// End-to-end training: per iteration sample a crop batch, run the enabled
/// branches, refine the guidance mask through the memory read, decode the
/// query head at crop-resolution coordinates, assemble the weighted
/// cross-entropy loss, backprop, SGD step, then the moving-average memory
/// update outside the tape. Writes checkpoint + run_record.json +
/// config_resolved.json under out_dir.
RunRecord train(const RunConfig& cfg, const std::string& out_dir);

struct AblationAxis {
    std::string name;                // flag name
    std::vector<std::string> values; // e.g. "true"/"false" or mode names
};

/// Cross product of the axis values over the base config, one training run
/// per row with the shared seed; writes a machine-readable table (JSON) plus
/// an aligned text table under out_dir.
std::vector<std::pair<std::string, RunRecord>> ablation_matrix(
    const RunConfig& base, const std::vector<AblationAxis>& axes,
    const std::string& out_dir);

/// Preset row sets mirroring the structure and memory-strategy studies.
std::vector<std::pair<std::string, AblationFlags>> structure_ablation_rows();
std::vector<std::pair<std::string, AblationFlags>> memory_ablation_rows();

/// Exposed for tests: the memory-update batch for a set of latent (or f_b)
/// features plus nearest-downsampled labels; returns the provenance tag of
/// the feature tensor consumed.
std::pair<UpdateBatch, std::string> build_update_batch(
    const std::vector<TensorPtr>& features, const std::vector<std::vector<int32_t>>& labels);

/// Nearest-neighbor label downsampling (top-left rule: src = i*src_dim/dst_dim).
std::vector<int32_t> downsample_labels(const std::vector<int32_t>& labels, int64_t h,
                                       int64_t w, int64_t oh, int64_t ow);

} // namespace uhrseg
