#pragma once

#include "uhrseg/tensor.hpp"

#include <cstdint>
#include <vector>

namespace uhrseg {

/// Cross-image class-prototype bank: column c of the D x C matrix is the
/// moving-average prototype of class c. Lives outside the gradient tape;
/// reads build constant tensors from it.
struct MemoryBank {
    int64_t d = 0;
    int64_t classes = 0;
    double momentum = 0.9;
    std::vector<double> m;            // D x C, row-major
    std::vector<uint8_t> initialized; // per class

    static MemoryBank make(int64_t d, int64_t classes, double momentum = 0.9);

    double at(int64_t row, int64_t c) const { return m[static_cast<size_t>(row * classes + c)]; }
    double& at(int64_t row, int64_t c) { return m[static_cast<size_t>(row * classes + c)]; }
    bool any_initialized() const;
};

/// Flattened semantic-branch features with their ground-truth class per
/// column (nearest-downsampled labels; kIgnoreLabel columns are skipped).
struct UpdateBatch {
    int64_t d = 0;
    int64_t n = 0;
    std::vector<double> features; // D x N row-major
    std::vector<int32_t> labels;  // length N
};

/// Mean prototype per class present in the batch; absent classes stay
/// uninitialized until first seen during training.
MemoryBank init_memory(const UpdateBatch& batch, int64_t classes, int64_t d,
                       double momentum = 0.9);

/// Cosine-weighted class summaries (the bank's update transform): weights
/// (1 - cos(feature, prototype)) normalized per class, emphasizing features
/// unlike the stored prototype. Zero-norm cosines are defined as 0; a
/// degenerate all-zero weight sum falls back to the unweighted mean, as does
/// any class whose prototype is not initialized yet.
struct ClassVector {
    int32_t cls;
    std::vector<double> v; // length D
};
std::vector<ClassVector> transform_features(const UpdateBatch& batch,
                                            const MemoryBank& bank);

/// Unweighted per-class mean (the "Mean" update-mode ablation).
std::vector<ClassVector> mean_update_ablation(const UpdateBatch& batch,
                                              const MemoryBank& bank);

/// Moving-average update: M^c <- momentum*M^c + (1-momentum)*r^c for present
/// classes; uninitialized classes are set directly and flagged.
void update_memory(MemoryBank& bank, const std::vector<ClassVector>& transformed);

/// Per-pixel relation W = softmax_over_classes(M^T f_b / sqrt(D)) with
/// uninitialized columns masked out, then m_b <- (1 + W) * m_b elementwise.
/// m_b carries probabilities; the refined mask is the query guidance.
/// Multiply-adds are linear in the pixel count.
TensorPtr read_refine(const MemoryBank& bank, const TensorPtr& f_b, const TensorPtr& m_b);

/// Ablation read: concat(M^T f_b / sqrt(D), m_b) -> 1x1 conv back to C
/// channels (head weights live in the model).
TensorPtr read_refine_concat(const MemoryBank& bank, const TensorPtr& f_b,
                             const TensorPtr& m_b, const TensorPtr& head_w,
                             const TensorPtr& head_b);

/// Serialization helpers used by the checkpoint glue.
std::vector<double> bank_flags_as_doubles(const MemoryBank& bank);
void bank_flags_from_doubles(MemoryBank& bank, const std::vector<double>& flags);

} // namespace uhrseg
