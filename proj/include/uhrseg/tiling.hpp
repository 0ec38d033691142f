#pragma once

#include "uhrseg/metrics.hpp"
#include "uhrseg/model.hpp"
#include "uhrseg/netpbm.hpp"

#include <json.hpp>

#include <map>
#include <string>
#include <utility>
#include <vector>

namespace uhrseg {

/// Deterministic decomposition of an image into overlapping square patches.
/// Placements sit at multiples of stride = patch - overlap, row-major, with
/// the last placement per axis clamped to the image edge.
struct PatchGrid {
    int64_t image_h = 0, image_w = 0;
    int64_t patch = 0, stride = 0;
    std::vector<std::pair<int64_t, int64_t>> placements; // (row0, col0)
};

PatchGrid partition(int64_t image_h, int64_t image_w, int64_t patch, int64_t overlap);

/// Per-pixel mean of softmax probabilities over all covering patches, then
/// argmax with ties toward the smaller class index. One logits block
/// {C,patch,patch} per placement, in placement order.
LabelMap merge(const std::vector<TensorPtr>& patch_logits, const PatchGrid& grid);

struct MemoryReport {
    int64_t estimated_peak_bytes = 0;
    int64_t measured_peak_bytes = 0;
    int64_t budget_bytes = 0;
    std::map<std::string, int64_t> per_stage; // branches, query_chunks, merge_buffers

    nlohmann::json to_json() const;
};

struct InferOptions {
    int64_t patch = 128;
    int64_t overlap = -1;     // -1: default patch/16
    int64_t budget_bytes = 512ll * 1024 * 1024;
    int64_t chunk_rows = 0;   // 0: auto (patch/8, at least 1)
    int64_t workers = 1;
    int64_t target_side = 512; // global mode downscale bound
};

/// Local inference: crop -> downscale -> branches -> memory read -> query
/// decode at patch resolution -> release, then merge. Per-patch work consumes
/// only the crop and read-only model state. Fails with a BudgetError naming
/// the stage if the measured peak exceeds the budget.
std::pair<LabelMap, MemoryReport> infer_local(const ImageU8& image, const LoadedModel& lm,
                                              const InferOptions& opt);

/// Global inference: bilinearly downscale the whole image so its max side is
/// at most target_side, run the single-patch pipeline once, and decode at the
/// original resolution.
std::pair<LabelMap, MemoryReport> infer_global(const ImageU8& image, const LoadedModel& lm,
                                               const InferOptions& opt);

/// Analytic peak-byte estimate for the local-inference pipeline at workers=1.
/// With image_h/image_w zero, covers the per-patch pipeline only (no input
/// image or merge buffers). Formulas are documented at the implementation.
int64_t estimate_peak_memory(const ModelConfig& cfg, const AblationFlags& flags,
                             int64_t patch, int64_t chunk_rows, int64_t image_h = 0,
                             int64_t image_w = 0);

struct BenchRow {
    int64_t patch = 0;
    double miou = 0.0;
    int64_t measured_peak_bytes = 0;
    int64_t estimated_peak_bytes = 0;
    double wall_time_sec = 0.0;
};

/// Patch-size sweep at a fixed budget; one row per size.
std::vector<BenchRow> run_bench(const ImageU8& image, const LabelMap& gt,
                                const LoadedModel& lm, const std::vector<int64_t>& patches,
                                const InferOptions& base);

} // namespace uhrseg
