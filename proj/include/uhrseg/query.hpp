#pragma once

#include "uhrseg/model.hpp"
#include "uhrseg/tensor.hpp"

#include <cstdint>
#include <utility>
#include <vector>

namespace uhrseg {

/// Cell-center coordinate grid normalized to [-1,1] per axis; cell (i,j) sits
/// at (-1 + (2i+1)/h, -1 + (2j+1)/w).
struct CoordGrid {
    int64_t h = 0, w = 0;

    double center_y(int64_t i) const {
        return -1.0 + (2.0 * static_cast<double>(i) + 1.0) / static_cast<double>(h);
    }
    double center_x(int64_t j) const {
        return -1.0 + (2.0 * static_cast<double>(j) + 1.0) / static_cast<double>(w);
    }
};

struct NearestResult {
    int64_t row = 0, col = 0;
    double cy = 0.0, cx = 0.0; // the chosen cell center
};

/// Nearest cell center under Euclidean distance; ties break toward the
/// smaller row index, then the smaller column index. Queries must lie in
/// [-1,1]^2 and the grid must be non-empty.
NearestResult nearest_lookup(double yq, double xq, const CoordGrid& grid);

/// Periodic relative-coordinate encoding, per axis, row block then column
/// block: [w_1 sin d, w_1 cos d, ..., w_n sin d, w_n cos d] for each axis.
/// Plain-math variant for callers outside the tape.
std::vector<double> periodic_encode_values(double dy, double dx,
                                           const std::vector<double>& freqs);

/// Tape variant: delta {2} (row, col), freqs {n} -> {4n}; differentiable in
/// both inputs (the frequencies are fine-tuned during training).
TensorPtr periodic_encode(const TensorPtr& delta, const TensorPtr& freqs);

/// Softmax-probability guidance grids; null members are fed to the head as
/// zero blocks (values, relative coordinates and encodings all zero).
struct QueryGuidance {
    TensorPtr m_b; // {C, hb, wb}, refined by the memory read when enabled
    TensorPtr m_l; // {C, hl, wl}
};

/// Assembles the concatenated query matrix {N, K} for the given normalized
/// coordinates: [z*, dq, phi(dq), m_b*, db, phi(db), m_l*, dl, phi(dl)] with
/// each source using its own grid's nearest lookup. Gradients flow to the
/// latent grid, both guidance grids and the encoder frequencies.
TensorPtr gather_query_inputs(const std::vector<double>& ys, const std::vector<double>& xs,
                              const TensorPtr& latent, const QueryGuidance& guidance,
                              const TensorPtr& freqs, int64_t classes);

/// Query-head logits {N, C} at explicit coordinates.
TensorPtr query_logits(const Model& model, const TensorPtr& latent,
                       const QueryGuidance& guidance, const std::vector<double>& ys,
                       const std::vector<double>& xs);

/// Single-coordinate decode -> {C} logits.
TensorPtr query_pixel(const Model& model, const TensorPtr& latent,
                      const QueryGuidance& guidance, double yq, double xq);

/// Dense decode at an arbitrary output resolution, chunk_rows output rows at
/// a time (bounds the number of simultaneously materialized query vectors);
/// the result is independent of chunk_rows.
TensorPtr query_mask(const Model& model, const TensorPtr& latent,
                     const QueryGuidance& guidance, int64_t out_h, int64_t out_w,
                     int64_t chunk_rows);

/// Ablation baseline: align-corners-false bilinear upsampling of
/// low-resolution logits.
TensorPtr bilinear_baseline(const TensorPtr& low_logits, int64_t out_h, int64_t out_w);

} // namespace uhrseg
