#pragma once

#include "uhrseg/tensor.hpp"

#include <cstdint>
#include <vector>

namespace uhrseg {

// Multiply-add accounting convention (forward only):
//   matmul/linear      m*n*k
//   conv2d             out_pixels * out_channels * in_channels * kh * kw (bias excluded)
//   add/mul/scale      numel
//   bilinear_resize    4 * out_numel
//   softmax            numel (the normalizing divide)
//   relu/sin/cos/sum/mean/copy/losses  0
// Shapes are row-major throughout; images are {C,H,W}.

/// a {m,k} x b {k,n} -> {m,n}
TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);

/// x {n,k}, w {m,k}, bias {m} (may be null) -> {n,m}; y = x * w^T + bias
TensorPtr linear(const TensorPtr& x, const TensorPtr& w, const TensorPtr& bias);

/// x {Cin,H,W}, w {Cout,Cin,kh,kw}, bias {Cout} (may be null), stride 1 or 2,
/// zero padding -> {Cout,Ho,Wo}
TensorPtr conv2d(const TensorPtr& x, const TensorPtr& w, const TensorPtr& bias,
                 int64_t stride, int64_t pad);

TensorPtr relu(const TensorPtr& x);
TensorPtr add(const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(const TensorPtr& a, const TensorPtr& b);
TensorPtr add_scalar(const TensorPtr& x, double c);
TensorPtr scale(const TensorPtr& x, double c);
TensorPtr sin_op(const TensorPtr& x);
TensorPtr cos_op(const TensorPtr& x);
TensorPtr sum(const TensorPtr& x);
TensorPtr mean(const TensorPtr& x);

/// Softmax over dim 0 (channels) of {C,...}.
TensorPtr softmax_channels(const TensorPtr& x);

/// Same, but channels with active[c]==0 get probability exactly 0 and do not
/// participate in the normalization. At least one channel must be active.
TensorPtr softmax_channels_masked(const TensorPtr& x, const std::vector<uint8_t>& active);

/// {C,H,W} -> {C,oh,ow}, align-corners-false.
TensorPtr bilinear_resize(const TensorPtr& x, int64_t oh, int64_t ow);

/// Concatenate along dim 0; trailing dims must match.
TensorPtr concat0(const TensorPtr& a, const TensorPtr& b);
TensorPtr concat0_many(const std::vector<TensorPtr>& parts);

/// {m,n} -> {n,m} copy.
TensorPtr transpose2d(const TensorPtr& x);

/// Multiplies every row of {N,K} by the constant vector s (length K); no
/// gradient flows into s.
TensorPtr scale_columns(const TensorPtr& x, const std::vector<double>& s);

/// Same data, new shape (numel preserved).
TensorPtr reshape(const TensorPtr& x, Shape shape);

constexpr int32_t kIgnoreLabel = 255;

/// Mean cross-entropy with integer labels over {C,N} or {C,H,W} logits.
/// Pixels labeled `ignore` are excluded; at least one pixel must be valid.
TensorPtr cross_entropy_logits(const TensorPtr& logits, const std::vector<int32_t>& labels,
                               int32_t ignore = kIgnoreLabel);

/// Mean negative log-likelihood over positive per-class scores (an
/// unnormalized probability mask): loss_i = log(sum_k s_ki) - log(s_yi).
TensorPtr nll_scores(const TensorPtr& scores, const std::vector<int32_t>& labels,
                     int32_t ignore = kIgnoreLabel);

/// Per-pixel argmax over dim 0 of {C,H,W} or {C,N}; ties toward the smaller
/// class index. Not a tape op.
std::vector<int32_t> argmax_channels(const Tensor& t);

/// Raw GEMM used by the op layer: C(m,n) = A(m,k [or k,m if ta]) * B(k,n [or
/// n,k if tb]) with accumulate=true adding into C. Row-major buffers.
void gemm_raw(bool ta, bool tb, int64_t m, int64_t n, int64_t k, const double* a,
              const double* b, double* c, bool accumulate);

} // namespace uhrseg
