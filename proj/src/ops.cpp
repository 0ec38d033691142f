#define EIGEN_DONT_PARALLELIZE
#include "uhrseg/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace uhrseg {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat, Eigen::Unaligned, Eigen::OuterStride<>>;
using CMapMat = Eigen::Map<const RowMat, Eigen::Unaligned, Eigen::OuterStride<>>;

CMapMat cmap(const double* p, int64_t rows, int64_t cols, int64_t stride) {
    return CMapMat(p, rows, cols, Eigen::OuterStride<>(stride));
}
MapMat map(double* p, int64_t rows, int64_t cols, int64_t stride) {
    return MapMat(p, rows, cols, Eigen::OuterStride<>(stride));
}

bool want_grad(const TensorPtr& a) { return a && a->requires_grad; }

void attach(const TensorPtr& out, std::vector<TensorPtr> parents,
            std::function<void(Tensor&)> fn) {
    if (!grad_enabled()) return;
    bool any = false;
    for (const auto& p : parents) {
        if (want_grad(p)) any = true;
    }
    if (!any) return;
    out->requires_grad = true;
    out->parents = std::move(parents);
    out->backward_fn = std::move(fn);
}

void same_shape_or_throw(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) {
        throw ShapeError(std::string(op) + ": shape " + shape_str(a.shape) +
                         " incompatible with " + shape_str(b.shape));
    }
}

} // namespace

void gemm_raw(bool ta, bool tb, int64_t m, int64_t n, int64_t k, const double* a,
              const double* b, double* c, bool accumulate) {
    auto A = ta ? cmap(a, k, m, m) : cmap(a, m, k, k);
    auto B = tb ? cmap(b, n, k, k) : cmap(b, k, n, n);
    auto C = map(c, m, n, n);
    if (accumulate) {
        if (ta && tb) C.noalias() += A.transpose() * B.transpose();
        else if (ta) C.noalias() += A.transpose() * B;
        else if (tb) C.noalias() += A * B.transpose();
        else C.noalias() += A * B;
    } else {
        if (ta && tb) C.noalias() = A.transpose() * B.transpose();
        else if (ta) C.noalias() = A.transpose() * B;
        else if (tb) C.noalias() = A * B.transpose();
        else C.noalias() = A * B;
    }
}

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
    if (a->ndim() != 2 || b->ndim() != 2 || a->dim(1) != b->dim(0)) {
        throw ShapeError("matmul: shape " + shape_str(a->shape) +
                         " incompatible with " + shape_str(b->shape));
    }
    int64_t m = a->dim(0), k = a->dim(1), n = b->dim(1);
    auto out = Tensor::create({m, n});
    gemm_raw(false, false, m, n, k, a->data.data(), b->data.data(), out->data.data(),
             false);
    flops::add(static_cast<uint64_t>(m) * n * k);
    check_finite(*out, "matmul");
    attach(out, {a, b}, [a, b, m, n, k](Tensor& self) {
        if (a->requires_grad) {
            a->ensure_grad();
            gemm_raw(false, true, m, k, n, self.grad.data(), b->data.data(),
                     a->grad.data(), true);
        }
        if (b->requires_grad) {
            b->ensure_grad();
            gemm_raw(true, false, k, n, m, a->data.data(), self.grad.data(),
                     b->grad.data(), true);
        }
    });
    return out;
}

namespace {

// Forward kernel for linear: per-element accumulation order over k is fixed
// and independent of the row count, so row-chunked evaluation (chunk_rows) is
// bit-identical to the unchunked one. Eigen's gemm does not guarantee that.
void linear_forward_det(const double* x, const double* w, const double* bias, double* out,
                        int64_t rows, int64_t k, int64_t m) {
    ScratchBuffer wt_buf(k * m); // w transposed to {k,m} for contiguous j access
    double* wt = wt_buf.data();
    for (int64_t r = 0; r < m; ++r) {
        for (int64_t c = 0; c < k; ++c) wt[c * m + r] = w[r * k + c];
    }
    for (int64_t i = 0; i < rows; ++i) {
        double* crow = out + i * m;
        if (bias) {
            std::memcpy(crow, bias, static_cast<size_t>(m) * sizeof(double));
        } else {
            std::memset(crow, 0, static_cast<size_t>(m) * sizeof(double));
        }
        const double* arow = x + i * k;
        int64_t kk = 0;
        for (; kk + 4 <= k; kk += 4) {
            const double a0 = arow[kk], a1 = arow[kk + 1];
            const double a2 = arow[kk + 2], a3 = arow[kk + 3];
            const double* b0 = wt + kk * m;
            const double* b1 = b0 + m;
            const double* b2 = b1 + m;
            const double* b3 = b2 + m;
            for (int64_t j = 0; j < m; ++j) {
                crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
        }
        for (; kk < k; ++kk) {
            const double a0 = arow[kk];
            const double* b0 = wt + kk * m;
            for (int64_t j = 0; j < m; ++j) crow[j] += a0 * b0[j];
        }
    }
}

} // namespace

TensorPtr linear(const TensorPtr& x, const TensorPtr& w, const TensorPtr& bias) {
    if (x->ndim() != 2 || w->ndim() != 2 || x->dim(1) != w->dim(1)) {
        throw ShapeError("linear: shape " + shape_str(x->shape) +
                         " incompatible with " + shape_str(w->shape));
    }
    int64_t n = x->dim(0), k = x->dim(1), m = w->dim(0);
    if (bias && bias->numel() != m) {
        throw ShapeError("linear: bias shape " + shape_str(bias->shape) +
                         " incompatible with " + shape_str(w->shape));
    }
    auto out = Tensor::create({n, m});
    linear_forward_det(x->data.data(), w->data.data(), bias ? bias->data.data() : nullptr,
                       out->data.data(), n, k, m);
    flops::add(static_cast<uint64_t>(n) * m * k);
    check_finite(*out, "linear");
    std::vector<TensorPtr> parents = {x, w};
    if (bias) parents.push_back(bias);
    attach(out, parents, [x, w, bias, n, m, k](Tensor& self) {
        if (x->requires_grad) {
            x->ensure_grad();
            gemm_raw(false, false, n, k, m, self.grad.data(), w->data.data(),
                     x->grad.data(), true);
        }
        if (w->requires_grad) {
            w->ensure_grad();
            gemm_raw(true, false, m, k, n, self.grad.data(), x->data.data(),
                     w->grad.data(), true);
        }
        if (bias && bias->requires_grad) {
            bias->ensure_grad();
            for (int64_t i = 0; i < n; ++i) {
                const double* row = self.grad.data() + i * m;
                for (int64_t j = 0; j < m; ++j) bias->grad[static_cast<size_t>(j)] += row[j];
            }
        }
    });
    return out;
}

namespace {

// Valid output-column range [c_lo, c_hi) for a kernel offset: the columns
// whose source index c*stride - pad + kx lies inside [0, w).
inline void col_range(int64_t kx, int64_t stride, int64_t pad, int64_t w, int64_t wo,
                      int64_t& c_lo, int64_t& c_hi) {
    // smallest c with c*stride >= pad - kx
    int64_t lo_num = pad - kx;
    c_lo = lo_num <= 0 ? 0 : (lo_num + stride - 1) / stride;
    // largest c with c*stride <= w - 1 + pad - kx
    int64_t hi_num = w - 1 + pad - kx;
    c_hi = hi_num < 0 ? 0 : hi_num / stride + 1;
    c_lo = std::min(c_lo, wo);
    c_hi = std::clamp(c_hi, c_lo, wo);
}

// im2col over a chunk of output rows: cols is (Cin*kh*kw) x (rows*Wo),
// padded reads produce zeros. Interior spans copy without bounds checks.
void im2col_chunk(const double* x, int64_t cin, int64_t h, int64_t w, int64_t kh,
                  int64_t kw, int64_t stride, int64_t pad, int64_t wo, int64_t r0,
                  int64_t r1, double* cols) {
    const int64_t ncols = (r1 - r0) * wo;
    int64_t krow = 0;
    for (int64_t ci = 0; ci < cin; ++ci) {
        for (int64_t ky = 0; ky < kh; ++ky) {
            for (int64_t kx = 0; kx < kw; ++kx, ++krow) {
                double* dst = cols + krow * ncols;
                int64_t c_lo, c_hi;
                col_range(kx, stride, pad, w, wo, c_lo, c_hi);
                for (int64_t r = r0; r < r1; ++r) {
                    int64_t sy = r * stride - pad + ky;
                    double* drow = dst + (r - r0) * wo;
                    if (sy < 0 || sy >= h) {
                        std::memset(drow, 0, static_cast<size_t>(wo) * sizeof(double));
                        continue;
                    }
                    const double* src = x + (ci * h + sy) * w;
                    for (int64_t c = 0; c < c_lo; ++c) drow[c] = 0.0;
                    if (stride == 1) {
                        std::memcpy(drow + c_lo, src + c_lo - pad + kx,
                                    static_cast<size_t>(c_hi - c_lo) * sizeof(double));
                    } else {
                        const double* s = src + c_lo * stride - pad + kx;
                        for (int64_t c = c_lo; c < c_hi; ++c, s += stride) drow[c] = *s;
                    }
                    for (int64_t c = c_hi; c < wo; ++c) drow[c] = 0.0;
                }
            }
        }
    }
}

// Reverse of im2col_chunk: scatter-add cols into dx.
void col2im_chunk(const double* cols, int64_t cin, int64_t h, int64_t w, int64_t kh,
                  int64_t kw, int64_t stride, int64_t pad, int64_t wo, int64_t r0,
                  int64_t r1, double* dx) {
    const int64_t ncols = (r1 - r0) * wo;
    int64_t krow = 0;
    for (int64_t ci = 0; ci < cin; ++ci) {
        for (int64_t ky = 0; ky < kh; ++ky) {
            for (int64_t kx = 0; kx < kw; ++kx, ++krow) {
                const double* src = cols + krow * ncols;
                int64_t c_lo, c_hi;
                col_range(kx, stride, pad, w, wo, c_lo, c_hi);
                for (int64_t r = r0; r < r1; ++r) {
                    int64_t sy = r * stride - pad + ky;
                    if (sy < 0 || sy >= h) continue;
                    const double* srow = src + (r - r0) * wo;
                    double* dst = dx + (ci * h + sy) * w;
                    if (stride == 1) {
                        double* d = dst + c_lo - pad + kx;
                        for (int64_t c = c_lo; c < c_hi; ++c) d[c - c_lo] += srow[c];
                    } else {
                        double* d = dst + c_lo * stride - pad + kx;
                        for (int64_t c = c_lo; c < c_hi; ++c, d += stride) *d += srow[c];
                    }
                }
            }
        }
    }
}

// im2col chunk height: grows with the output so scratch stays a roughly
// constant fraction of the activation footprint. A pure function of the
// output shape, so results never depend on thread count or callers.
int64_t conv_chunk_rows(int64_t ho) { return std::max<int64_t>(16, ho / 4); }

// Few-channel stride-1 3x3 convolutions bypass im2col: each input row is
// streamed once per (ci,ky,oc-pair) with the three taps unrolled. Used where
// the im2col GEMM is too thin to run well (m = cout <= 16).
constexpr int64_t kDirectConvMaxChannels = 16;

bool direct_conv_eligible(int64_t stride, int64_t kh, int64_t kw, int64_t pad,
                          int64_t planes, int64_t wd) {
    return stride == 1 && kh == 3 && kw == 3 && pad == 1 &&
           planes <= kDirectConvMaxChannels && wd >= 3;
}

// out[oc][r][c] (+)= sum_{ci,ky,kx} w[oc][ci][ky][kx] * x[ci][r+ky-1][c+kx-1]
// with zero padding; `weight_at` abstracts the kernel layout so the same
// routine also runs the transposed (dx) convolution with flipped taps.
template <typename WeightAt>
void conv3x3_direct(const double* x, WeightAt weight_at, const double* bias, double* out,
                    int64_t cin, int64_t h, int64_t wd, int64_t cout, bool accumulate) {
    std::vector<double> acc(static_cast<size_t>(cout) * wd);
    for (int64_t r = 0; r < h; ++r) {
        for (int64_t oc = 0; oc < cout; ++oc) {
            double b = bias ? bias[oc] : 0.0;
            double* a = acc.data() + oc * wd;
            for (int64_t c = 0; c < wd; ++c) a[c] = b;
        }
        for (int64_t ci = 0; ci < cin; ++ci) {
            for (int64_t ky = 0; ky < 3; ++ky) {
                int64_t sy = r + ky - 1;
                if (sy < 0 || sy >= h) continue;
                const double* xrow = x + (ci * h + sy) * wd;
                int64_t oc = 0;
                for (; oc + 2 <= cout; oc += 2) {
                    const double w00 = weight_at(oc, ci, ky, 0);
                    const double w01 = weight_at(oc, ci, ky, 1);
                    const double w02 = weight_at(oc, ci, ky, 2);
                    const double w10 = weight_at(oc + 1, ci, ky, 0);
                    const double w11 = weight_at(oc + 1, ci, ky, 1);
                    const double w12 = weight_at(oc + 1, ci, ky, 2);
                    double* a0 = acc.data() + oc * wd;
                    double* a1 = acc.data() + (oc + 1) * wd;
                    for (int64_t c = 1; c + 1 < wd; ++c) {
                        const double xm = xrow[c - 1], x0 = xrow[c], xp = xrow[c + 1];
                        a0[c] += w00 * xm + w01 * x0 + w02 * xp;
                        a1[c] += w10 * xm + w11 * x0 + w12 * xp;
                    }
                    a0[0] += w01 * xrow[0] + w02 * xrow[1];
                    a1[0] += w11 * xrow[0] + w12 * xrow[1];
                    a0[wd - 1] += w00 * xrow[wd - 2] + w01 * xrow[wd - 1];
                    a1[wd - 1] += w10 * xrow[wd - 2] + w11 * xrow[wd - 1];
                }
                for (; oc < cout; ++oc) {
                    const double w0 = weight_at(oc, ci, ky, 0);
                    const double w1 = weight_at(oc, ci, ky, 1);
                    const double w2 = weight_at(oc, ci, ky, 2);
                    double* a0 = acc.data() + oc * wd;
                    for (int64_t c = 1; c + 1 < wd; ++c) {
                        a0[c] += w0 * xrow[c - 1] + w1 * xrow[c] + w2 * xrow[c + 1];
                    }
                    a0[0] += w1 * xrow[0] + w2 * xrow[1];
                    a0[wd - 1] += w0 * xrow[wd - 2] + w1 * xrow[wd - 1];
                }
            }
        }
        for (int64_t oc = 0; oc < cout; ++oc) {
            double* dst = out + (oc * h + r) * wd;
            const double* a = acc.data() + oc * wd;
            if (accumulate) {
                for (int64_t c = 0; c < wd; ++c) dst[c] += a[c];
            } else {
                std::memcpy(dst, a, static_cast<size_t>(wd) * sizeof(double));
            }
        }
    }
}

// dw[oc][ci][ky][kx] += sum_{r,c} g[oc][r][c] * x[ci][r+ky-1][c+kx-1]
void conv3x3_direct_dw(const double* x, const double* g, double* dw, int64_t cin,
                       int64_t h, int64_t wd, int64_t cout) {
    for (int64_t oc = 0; oc < cout; ++oc) {
        const double* gplane = g + oc * h * wd;
        for (int64_t ci = 0; ci < cin; ++ci) {
            const double* xplane = x + ci * h * wd;
            for (int64_t ky = 0; ky < 3; ++ky) {
                for (int64_t kx = 0; kx < 3; ++kx) {
                    const int64_t shift = kx - 1;
                    const int64_t c_lo = std::max<int64_t>(0, -shift);
                    const int64_t c_hi = std::min(wd, wd - shift);
                    double s = 0.0;
                    for (int64_t r = 0; r < h; ++r) {
                        int64_t sy = r + ky - 1;
                        if (sy < 0 || sy >= h) continue;
                        const double* grow = gplane + r * wd;
                        const double* xrow = xplane + sy * wd + shift;
                        for (int64_t c = c_lo; c < c_hi; ++c) s += grow[c] * xrow[c];
                    }
                    dw[((oc * cin + ci) * 3 + ky) * 3 + kx] += s;
                }
            }
        }
    }
}

} // namespace

TensorPtr conv2d(const TensorPtr& x, const TensorPtr& w, const TensorPtr& bias,
                 int64_t stride, int64_t pad) {
    if (x->ndim() != 3 || w->ndim() != 4 || x->dim(0) != w->dim(1)) {
        throw ShapeError("conv2d: shape " + shape_str(x->shape) +
                         " incompatible with " + shape_str(w->shape));
    }
    if (stride != 1 && stride != 2) throw ShapeError("conv2d: stride must be 1 or 2");
    const int64_t cin = x->dim(0), h = x->dim(1), wd = x->dim(2);
    const int64_t cout = w->dim(0), kh = w->dim(2), kw = w->dim(3);
    const int64_t ho = (h + 2 * pad - kh) / stride + 1;
    const int64_t wo = (wd + 2 * pad - kw) / stride + 1;
    if (ho < 1 || wo < 1) {
        throw ShapeError("conv2d: input " + shape_str(x->shape) +
                         " smaller than kernel footprint " + shape_str(w->shape));
    }
    if (bias && bias->numel() != cout) {
        throw ShapeError("conv2d: bias shape " + shape_str(bias->shape) +
                         " incompatible with " + shape_str(w->shape));
    }
    const int64_t K = cin * kh * kw;
    auto out = Tensor::create({cout, ho, wo});
    if (direct_conv_eligible(stride, kh, kw, pad, cout, wd)) {
        const double* wp = w->data.data();
        conv3x3_direct(
            x->data.data(),
            [wp, cin](int64_t oc, int64_t ci, int64_t ky, int64_t kx) {
                return wp[((oc * cin + ci) * 3 + ky) * 3 + kx];
            },
            bias ? bias->data.data() : nullptr, out->data.data(), cin, h, wd, cout,
            false);
    } else {
        const int64_t chunk = conv_chunk_rows(ho);
        ScratchBuffer cols(K * std::min(chunk, ho) * wo);
        for (int64_t r0 = 0; r0 < ho; r0 += chunk) {
            int64_t r1 = std::min(r0 + chunk, ho);
            int64_t ncols = (r1 - r0) * wo;
            im2col_chunk(x->data.data(), cin, h, wd, kh, kw, stride, pad, wo, r0, r1,
                         cols.data());
            auto W = cmap(w->data.data(), cout, K, K);
            auto C = cmap(cols.data(), K, ncols, ncols);
            map(out->data.data() + r0 * wo, cout, ncols, ho * wo).noalias() = W * C;
        }
        if (bias) {
            for (int64_t oc = 0; oc < cout; ++oc) {
                double b = bias->data[static_cast<size_t>(oc)];
                double* plane = out->data.data() + oc * ho * wo;
                for (int64_t i = 0; i < ho * wo; ++i) plane[i] += b;
            }
        }
    }
    flops::add(static_cast<uint64_t>(ho * wo) * cout * cin * kh * kw);
    check_finite(*out, "conv2d");

    std::vector<TensorPtr> parents = {x, w};
    if (bias) parents.push_back(bias);
    attach(out, parents,
           [x, w, bias, stride, pad, cin, h, wd, cout, kh, kw, ho, wo, K](Tensor& self) {
               const bool need_dx = x->requires_grad;
               const bool need_dw = w->requires_grad;
               if (need_dx) x->ensure_grad();
               if (need_dw) w->ensure_grad();
               if (direct_conv_eligible(stride, kh, kw, pad, cout, wd)) {
                   if (need_dw) {
                       conv3x3_direct_dw(x->data.data(), self.grad.data(),
                                         w->grad.data(), cin, h, wd, cout);
                   }
                   if (need_dx) {
                       // dx = transposed convolution: same kernel with input
                       // and output channels swapped and the taps flipped
                       const double* wp = w->data.data();
                       conv3x3_direct(
                           self.grad.data(),
                           [wp, cin](int64_t ci, int64_t oc, int64_t ky, int64_t kx) {
                               return wp[((oc * cin + ci) * 3 + (2 - ky)) * 3 + (2 - kx)];
                           },
                           nullptr, x->grad.data(), cout, h, wd, cin, true);
                   }
               } else {
                   const int64_t chunk = conv_chunk_rows(ho);
                   ScratchBuffer cols(K * std::min(chunk, ho) * wo);
                   ScratchBuffer dcols(need_dx ? cols.size() : 0);
                   for (int64_t r0 = 0; r0 < ho; r0 += chunk) {
                       int64_t r1 = std::min(r0 + chunk, ho);
                       int64_t ncols = (r1 - r0) * wo;
                       auto G = cmap(self.grad.data() + r0 * wo, cout, ncols, ho * wo);
                       if (need_dw) {
                           im2col_chunk(x->data.data(), cin, h, wd, kh, kw, stride, pad,
                                        wo, r0, r1, cols.data());
                           auto C = cmap(cols.data(), K, ncols, ncols);
                           map(w->grad.data(), cout, K, K).noalias() += G * C.transpose();
                       }
                       if (need_dx) {
                           auto W = cmap(w->data.data(), cout, K, K);
                           map(dcols.data(), K, ncols, ncols).noalias() = W.transpose() * G;
                           col2im_chunk(dcols.data(), cin, h, wd, kh, kw, stride, pad, wo,
                                        r0, r1, x->grad.data());
                       }
                   }
               }
               if (bias && bias->requires_grad) {
                   bias->ensure_grad();
                   for (int64_t oc = 0; oc < cout; ++oc) {
                       const double* plane = self.grad.data() + oc * ho * wo;
                       double s = 0.0;
                       for (int64_t i = 0; i < ho * wo; ++i) s += plane[i];
                       bias->grad[static_cast<size_t>(oc)] += s;
                   }
               }
           });
    return out;
}

TensorPtr relu(const TensorPtr& x) {
    auto out = Tensor::create(x->shape);
    for (int64_t i = 0; i < x->numel(); ++i) {
        out->data[static_cast<size_t>(i)] = std::max(0.0, x->data[static_cast<size_t>(i)]);
    }
    attach(out, {x}, [x](Tensor& self) {
        x->ensure_grad();
        for (int64_t i = 0; i < x->numel(); ++i) {
            if (x->data[static_cast<size_t>(i)] > 0.0) {
                x->grad[static_cast<size_t>(i)] += self.grad[static_cast<size_t>(i)];
            }
        }
    });
    return out;
}

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
    same_shape_or_throw("add", *a, *b);
    auto out = Tensor::create(a->shape);
    for (int64_t i = 0; i < a->numel(); ++i) {
        out->data[static_cast<size_t>(i)] =
            a->data[static_cast<size_t>(i)] + b->data[static_cast<size_t>(i)];
    }
    flops::add(static_cast<uint64_t>(a->numel()));
    check_finite(*out, "add");
    attach(out, {a, b}, [a, b](Tensor& self) {
        if (a->requires_grad) a->accumulate_grad(self.grad.data(), self.numel());
        if (b->requires_grad) b->accumulate_grad(self.grad.data(), self.numel());
    });
    return out;
}

TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
    same_shape_or_throw("mul", *a, *b);
    auto out = Tensor::create(a->shape);
    for (int64_t i = 0; i < a->numel(); ++i) {
        out->data[static_cast<size_t>(i)] =
            a->data[static_cast<size_t>(i)] * b->data[static_cast<size_t>(i)];
    }
    flops::add(static_cast<uint64_t>(a->numel()));
    check_finite(*out, "mul");
    attach(out, {a, b}, [a, b](Tensor& self) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (int64_t i = 0; i < a->numel(); ++i) {
                a->grad[static_cast<size_t>(i)] +=
                    self.grad[static_cast<size_t>(i)] * b->data[static_cast<size_t>(i)];
            }
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (int64_t i = 0; i < b->numel(); ++i) {
                b->grad[static_cast<size_t>(i)] +=
                    self.grad[static_cast<size_t>(i)] * a->data[static_cast<size_t>(i)];
            }
        }
    });
    return out;
}

TensorPtr add_scalar(const TensorPtr& x, double c) {
    auto out = Tensor::create(x->shape);
    for (int64_t i = 0; i < x->numel(); ++i) {
        out->data[static_cast<size_t>(i)] = x->data[static_cast<size_t>(i)] + c;
    }
    flops::add(static_cast<uint64_t>(x->numel()));
    check_finite(*out, "add_scalar");
    attach(out, {x}, [x](Tensor& self) {
        x->accumulate_grad(self.grad.data(), self.numel());
    });
    return out;
}

TensorPtr scale(const TensorPtr& x, double c) {
    auto out = Tensor::create(x->shape);
    for (int64_t i = 0; i < x->numel(); ++i) {
        out->data[static_cast<size_t>(i)] = x->data[static_cast<size_t>(i)] * c;
    }
    flops::add(static_cast<uint64_t>(x->numel()));
    check_finite(*out, "scale");
    attach(out, {x}, [x, c](Tensor& self) {
        x->ensure_grad();
        for (int64_t i = 0; i < x->numel(); ++i) {
            x->grad[static_cast<size_t>(i)] += self.grad[static_cast<size_t>(i)] * c;
        }
    });
    return out;
}

TensorPtr sin_op(const TensorPtr& x) {
    auto out = Tensor::create(x->shape);
    for (int64_t i = 0; i < x->numel(); ++i) {
        out->data[static_cast<size_t>(i)] = std::sin(x->data[static_cast<size_t>(i)]);
    }
    check_finite(*out, "sin");
    attach(out, {x}, [x](Tensor& self) {
        x->ensure_grad();
        for (int64_t i = 0; i < x->numel(); ++i) {
            x->grad[static_cast<size_t>(i)] +=
                self.grad[static_cast<size_t>(i)] * std::cos(x->data[static_cast<size_t>(i)]);
        }
    });
    return out;
}

TensorPtr cos_op(const TensorPtr& x) {
    auto out = Tensor::create(x->shape);
    for (int64_t i = 0; i < x->numel(); ++i) {
        out->data[static_cast<size_t>(i)] = std::cos(x->data[static_cast<size_t>(i)]);
    }
    check_finite(*out, "cos");
    attach(out, {x}, [x](Tensor& self) {
        x->ensure_grad();
        for (int64_t i = 0; i < x->numel(); ++i) {
            x->grad[static_cast<size_t>(i)] -=
                self.grad[static_cast<size_t>(i)] * std::sin(x->data[static_cast<size_t>(i)]);
        }
    });
    return out;
}

TensorPtr sum(const TensorPtr& x) {
    double s = 0.0;
    for (double v : x->data) s += v;
    auto out = Tensor::scalar(s);
    check_finite(*out, "sum");
    attach(out, {x}, [x](Tensor& self) {
        x->ensure_grad();
        double g = self.grad[0];
        for (int64_t i = 0; i < x->numel(); ++i) x->grad[static_cast<size_t>(i)] += g;
    });
    return out;
}

TensorPtr mean(const TensorPtr& x) {
    if (x->numel() == 0) throw ShapeError("mean of empty tensor");
    double s = 0.0;
    for (double v : x->data) s += v;
    double inv = 1.0 / static_cast<double>(x->numel());
    auto out = Tensor::scalar(s * inv);
    check_finite(*out, "mean");
    attach(out, {x}, [x, inv](Tensor& self) {
        x->ensure_grad();
        double g = self.grad[0] * inv;
        for (int64_t i = 0; i < x->numel(); ++i) x->grad[static_cast<size_t>(i)] += g;
    });
    return out;
}

namespace {

TensorPtr softmax_impl(const TensorPtr& x, const std::vector<uint8_t>* active) {
    if (x->ndim() < 1 || x->dim(0) < 1) {
        throw ShapeError("softmax: needs a leading channel dim, got " +
                         shape_str(x->shape));
    }
    const int64_t c = x->dim(0);
    const int64_t p = x->numel() / c;
    if (active) {
        if (static_cast<int64_t>(active->size()) != c) {
            throw ShapeError("softmax: mask length mismatch");
        }
        bool any = false;
        for (uint8_t m : *active) any = any || m;
        if (!any) throw ShapeError("softmax: all channels masked");
    }
    auto out = Tensor::create(x->shape);
    const double* xd = x->data.data();
    double* od = out->data.data();
    for (int64_t i = 0; i < p; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int64_t k = 0; k < c; ++k) {
            if (active && !(*active)[static_cast<size_t>(k)]) continue;
            mx = std::max(mx, xd[k * p + i]);
        }
        double z = 0.0;
        for (int64_t k = 0; k < c; ++k) {
            if (active && !(*active)[static_cast<size_t>(k)]) {
                od[k * p + i] = 0.0;
                continue;
            }
            double e = std::exp(xd[k * p + i] - mx);
            od[k * p + i] = e;
            z += e;
        }
        double inv = 1.0 / z;
        for (int64_t k = 0; k < c; ++k) od[k * p + i] *= inv;
    }
    flops::add(static_cast<uint64_t>(x->numel()));
    check_finite(*out, "softmax");
    // Masked channels have probability exactly 0, which also zeroes their
    // backward contribution, so one closure covers both variants.
    attach(out, {x}, [x, c, p](Tensor& self) {
        x->ensure_grad();
        const double* od = self.data.data();
        const double* gd = self.grad.data();
        double* xg = x->grad.data();
        for (int64_t i = 0; i < p; ++i) {
            double dot = 0.0;
            for (int64_t k = 0; k < c; ++k) dot += gd[k * p + i] * od[k * p + i];
            for (int64_t k = 0; k < c; ++k) {
                xg[k * p + i] += od[k * p + i] * (gd[k * p + i] - dot);
            }
        }
    });
    return out;
}

} // namespace

TensorPtr softmax_channels(const TensorPtr& x) { return softmax_impl(x, nullptr); }

TensorPtr softmax_channels_masked(const TensorPtr& x, const std::vector<uint8_t>& active) {
    return softmax_impl(x, &active);
}

TensorPtr bilinear_resize(const TensorPtr& x, int64_t oh, int64_t ow) {
    if (x->ndim() != 3) throw ShapeError("bilinear_resize: expected {C,H,W}");
    if (oh < 1 || ow < 1) throw ShapeError("bilinear_resize: bad output size");
    const int64_t c = x->dim(0), h = x->dim(1), w = x->dim(2);
    auto out = Tensor::create({c, oh, ow});
    const double sy = static_cast<double>(h) / static_cast<double>(oh);
    const double sx = static_cast<double>(w) / static_cast<double>(ow);

    struct Tap {
        int64_t i0, i1;
        double f;
    };
    std::vector<Tap> ys(static_cast<size_t>(oh)), xs(static_cast<size_t>(ow));
    auto make_tap = [](int64_t i, double s, int64_t n) {
        double src = (static_cast<double>(i) + 0.5) * s - 0.5;
        src = std::max(0.0, std::min(src, static_cast<double>(n - 1)));
        int64_t i0 = static_cast<int64_t>(std::floor(src));
        int64_t i1 = std::min(i0 + 1, n - 1);
        return Tap{i0, i1, src - static_cast<double>(i0)};
    };
    for (int64_t i = 0; i < oh; ++i) ys[static_cast<size_t>(i)] = make_tap(i, sy, h);
    for (int64_t j = 0; j < ow; ++j) xs[static_cast<size_t>(j)] = make_tap(j, sx, w);

    for (int64_t ch = 0; ch < c; ++ch) {
        const double* src = x->data.data() + ch * h * w;
        double* dst = out->data.data() + ch * oh * ow;
        for (int64_t i = 0; i < oh; ++i) {
            const Tap& ty = ys[static_cast<size_t>(i)];
            for (int64_t j = 0; j < ow; ++j) {
                const Tap& tx = xs[static_cast<size_t>(j)];
                double v00 = src[ty.i0 * w + tx.i0];
                double v01 = src[ty.i0 * w + tx.i1];
                double v10 = src[ty.i1 * w + tx.i0];
                double v11 = src[ty.i1 * w + tx.i1];
                double top = v00 + tx.f * (v01 - v00);
                double bot = v10 + tx.f * (v11 - v10);
                dst[i * ow + j] = top + ty.f * (bot - top);
            }
        }
    }
    flops::add(static_cast<uint64_t>(4 * out->numel()));
    check_finite(*out, "bilinear_resize");
    attach(out, {x}, [x, ys, xs, c, h, w, oh, ow](Tensor& self) {
        x->ensure_grad();
        for (int64_t ch = 0; ch < c; ++ch) {
            double* dsrc = x->grad.data() + ch * h * w;
            const double* g = self.grad.data() + ch * oh * ow;
            for (int64_t i = 0; i < oh; ++i) {
                const Tap& ty = ys[static_cast<size_t>(i)];
                for (int64_t j = 0; j < ow; ++j) {
                    const Tap& tx = xs[static_cast<size_t>(j)];
                    double gv = g[i * ow + j];
                    dsrc[ty.i0 * w + tx.i0] += (1 - ty.f) * (1 - tx.f) * gv;
                    dsrc[ty.i0 * w + tx.i1] += (1 - ty.f) * tx.f * gv;
                    dsrc[ty.i1 * w + tx.i0] += ty.f * (1 - tx.f) * gv;
                    dsrc[ty.i1 * w + tx.i1] += ty.f * tx.f * gv;
                }
            }
        }
    });
    return out;
}

TensorPtr concat0(const TensorPtr& a, const TensorPtr& b) { return concat0_many({a, b}); }

TensorPtr concat0_many(const std::vector<TensorPtr>& parts) {
    if (parts.empty()) throw ShapeError("concat0: no inputs");
    Shape tail(parts[0]->shape.begin() + 1, parts[0]->shape.end());
    int64_t total0 = 0;
    for (const auto& p : parts) {
        Shape t(p->shape.begin() + 1, p->shape.end());
        if (t != tail) {
            throw ShapeError("concat0: shape " + shape_str(parts[0]->shape) +
                             " incompatible with " + shape_str(p->shape));
        }
        total0 += p->dim(0);
    }
    Shape oshape = parts[0]->shape;
    oshape[0] = total0;
    auto out = Tensor::create(oshape);
    int64_t off = 0;
    for (const auto& p : parts) {
        std::memcpy(out->data.data() + off, p->data.data(),
                    static_cast<size_t>(p->numel()) * sizeof(double));
        off += p->numel();
    }
    attach(out, parts, [parts](Tensor& self) {
        int64_t off = 0;
        for (const auto& p : parts) {
            if (p->requires_grad) p->accumulate_grad(self.grad.data() + off, p->numel());
            off += p->numel();
        }
    });
    return out;
}

TensorPtr transpose2d(const TensorPtr& x) {
    if (x->ndim() != 2) throw ShapeError("transpose2d: expected {m,n}");
    const int64_t m = x->dim(0), n = x->dim(1);
    auto out = Tensor::create({n, m});
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            out->data[static_cast<size_t>(j * m + i)] = x->data[static_cast<size_t>(i * n + j)];
        }
    }
    attach(out, {x}, [x, m, n](Tensor& self) {
        x->ensure_grad();
        for (int64_t i = 0; i < m; ++i) {
            for (int64_t j = 0; j < n; ++j) {
                x->grad[static_cast<size_t>(i * n + j)] += self.grad[static_cast<size_t>(j * m + i)];
            }
        }
    });
    return out;
}

TensorPtr scale_columns(const TensorPtr& x, const std::vector<double>& s) {
    if (x->ndim() != 2 || x->dim(1) != static_cast<int64_t>(s.size())) {
        throw ShapeError("scale_columns: shape " + shape_str(x->shape) +
                         " incompatible with " + std::to_string(s.size()) + " scales");
    }
    const int64_t n = x->dim(0), k = x->dim(1);
    auto out = Tensor::create(x->shape);
    for (int64_t i = 0; i < n; ++i) {
        const double* src = x->data.data() + i * k;
        double* dst = out->data.data() + i * k;
        for (int64_t j = 0; j < k; ++j) dst[j] = src[j] * s[static_cast<size_t>(j)];
    }
    flops::add(static_cast<uint64_t>(x->numel()));
    check_finite(*out, "scale_columns");
    attach(out, {x}, [x, s, n, k](Tensor& self) {
        x->ensure_grad();
        for (int64_t i = 0; i < n; ++i) {
            const double* g = self.grad.data() + i * k;
            double* xg = x->grad.data() + i * k;
            for (int64_t j = 0; j < k; ++j) xg[j] += g[j] * s[static_cast<size_t>(j)];
        }
    });
    return out;
}

TensorPtr reshape(const TensorPtr& x, Shape shape) {
    if (shape_numel(shape) != x->numel()) {
        throw ShapeError("reshape: shape " + shape_str(x->shape) +
                         " incompatible with " + shape_str(shape));
    }
    auto out = Tensor::from_data(std::move(shape), x->data);
    attach(out, {x}, [x](Tensor& self) {
        x->accumulate_grad(self.grad.data(), self.numel());
    });
    return out;
}

namespace {

void check_label_args(const Tensor& t, const std::vector<int32_t>& labels, const char* op) {
    const int64_t c = t.dim(0);
    const int64_t p = t.numel() / c;
    if (static_cast<int64_t>(labels.size()) != p) {
        throw ShapeError(std::string(op) + ": labels length " +
                         std::to_string(labels.size()) + " vs " + std::to_string(p) +
                         " pixels of " + shape_str(t.shape));
    }
}

} // namespace

TensorPtr cross_entropy_logits(const TensorPtr& logits, const std::vector<int32_t>& labels,
                               int32_t ignore) {
    check_label_args(*logits, labels, "cross_entropy");
    const int64_t c = logits->dim(0);
    const int64_t p = logits->numel() / c;
    const double* xd = logits->data.data();
    int64_t valid = 0;
    double loss = 0.0;
    for (int64_t i = 0; i < p; ++i) {
        int32_t y = labels[static_cast<size_t>(i)];
        if (y == ignore) continue;
        if (y < 0 || y >= c) {
            throw ShapeError("cross_entropy: label " + std::to_string(y) +
                             " out of range for " + std::to_string(c) + " classes");
        }
        double mx = -std::numeric_limits<double>::infinity();
        for (int64_t k = 0; k < c; ++k) mx = std::max(mx, xd[k * p + i]);
        double z = 0.0;
        for (int64_t k = 0; k < c; ++k) z += std::exp(xd[k * p + i] - mx);
        loss += std::log(z) + mx - xd[y * p + i];
        ++valid;
    }
    if (valid == 0) throw ShapeError("cross_entropy: no valid pixels");
    auto out = Tensor::scalar(loss / static_cast<double>(valid));
    check_finite(*out, "cross_entropy");
    attach(out, {logits}, [logits, labels, ignore, c, p, valid](Tensor& self) {
        logits->ensure_grad();
        const double g = self.grad[0] / static_cast<double>(valid);
        const double* xd = logits->data.data();
        double* xg = logits->grad.data();
        for (int64_t i = 0; i < p; ++i) {
            int32_t y = labels[static_cast<size_t>(i)];
            if (y == ignore) continue;
            double mx = -std::numeric_limits<double>::infinity();
            for (int64_t k = 0; k < c; ++k) mx = std::max(mx, xd[k * p + i]);
            double z = 0.0;
            for (int64_t k = 0; k < c; ++k) z += std::exp(xd[k * p + i] - mx);
            for (int64_t k = 0; k < c; ++k) {
                double sm = std::exp(xd[k * p + i] - mx) / z;
                xg[k * p + i] += g * (sm - (k == y ? 1.0 : 0.0));
            }
        }
    });
    return out;
}

TensorPtr nll_scores(const TensorPtr& scores, const std::vector<int32_t>& labels,
                     int32_t ignore) {
    check_label_args(*scores, labels, "nll_scores");
    const int64_t c = scores->dim(0);
    const int64_t p = scores->numel() / c;
    constexpr double kEps = 1e-12;
    const double* xd = scores->data.data();
    int64_t valid = 0;
    double loss = 0.0;
    for (int64_t i = 0; i < p; ++i) {
        int32_t y = labels[static_cast<size_t>(i)];
        if (y == ignore) continue;
        if (y < 0 || y >= c) {
            throw ShapeError("nll_scores: label " + std::to_string(y) +
                             " out of range for " + std::to_string(c) + " classes");
        }
        double z = 0.0;
        for (int64_t k = 0; k < c; ++k) z += xd[k * p + i];
        loss += std::log(z + c * kEps) - std::log(xd[y * p + i] + kEps);
        ++valid;
    }
    if (valid == 0) throw ShapeError("nll_scores: no valid pixels");
    auto out = Tensor::scalar(loss / static_cast<double>(valid));
    check_finite(*out, "nll_scores");
    attach(out, {scores}, [scores, labels, ignore, c, p, valid](Tensor& self) {
        scores->ensure_grad();
        const double g = self.grad[0] / static_cast<double>(valid);
        const double* xd = scores->data.data();
        double* xg = scores->grad.data();
        for (int64_t i = 0; i < p; ++i) {
            int32_t y = labels[static_cast<size_t>(i)];
            if (y == ignore) continue;
            double z = 0.0;
            for (int64_t k = 0; k < c; ++k) z += xd[k * p + i];
            double dz = g / (z + c * kEps);
            for (int64_t k = 0; k < c; ++k) xg[k * p + i] += dz;
            xg[y * p + i] -= g / (xd[y * p + i] + kEps);
        }
    });
    return out;
}

std::vector<int32_t> argmax_channels(const Tensor& t) {
    const int64_t c = t.dim(0);
    const int64_t p = t.numel() / c;
    std::vector<int32_t> out(static_cast<size_t>(p));
    const double* d = t.data.data();
    for (int64_t i = 0; i < p; ++i) {
        int32_t best = 0;
        double bv = d[i];
        for (int64_t k = 1; k < c; ++k) {
            double v = d[k * p + i];
            if (v > bv) {
                bv = v;
                best = static_cast<int32_t>(k);
            }
        }
        out[static_cast<size_t>(i)] = best;
    }
    return out;
}

} // namespace uhrseg
