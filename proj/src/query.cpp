#include "uhrseg/query.hpp"

#include "uhrseg/ops.hpp"

#include <algorithm>
#include <cmath>

namespace uhrseg {

namespace {

// Nearest index along one axis; per-axis minimization is exact for the
// separable Euclidean distance, and per-axis smaller-index tie-breaking
// matches the (row, col) lexicographic rule.
int64_t nearest_axis(double q, int64_t n) {
    double u = ((q + 1.0) * static_cast<double>(n) - 1.0) / 2.0;
    double r = std::floor(u + 0.5);
    if (r - u == 0.5) r -= 1.0; // equidistant: prefer the smaller index
    int64_t i = static_cast<int64_t>(r);
    return std::clamp<int64_t>(i, 0, n - 1);
}

// Tape hookup for this module's fused ops.
void attach_node(const TensorPtr& out, std::vector<TensorPtr> parents,
                 std::function<void(Tensor&)> fn) {
    if (!grad_enabled()) return;
    bool any = false;
    for (const auto& p : parents) {
        if (p && p->requires_grad) any = true;
    }
    if (!any) return;
    out->requires_grad = true;
    for (auto& p : parents) {
        if (p) out->parents.push_back(p);
    }
    out->backward_fn = std::move(fn);
}

} // namespace

NearestResult nearest_lookup(double yq, double xq, const CoordGrid& grid) {
    if (grid.h <= 0 || grid.w <= 0) {
        throw ShapeError("nearest_lookup: empty grid");
    }
    if (yq < -1.0 || yq > 1.0 || xq < -1.0 || xq > 1.0) {
        throw ShapeError("nearest_lookup: query outside [-1,1]^2");
    }
    NearestResult r;
    r.row = nearest_axis(yq, grid.h);
    r.col = nearest_axis(xq, grid.w);
    r.cy = grid.center_y(r.row);
    r.cx = grid.center_x(r.col);
    return r;
}

std::vector<double> periodic_encode_values(double dy, double dx,
                                           const std::vector<double>& freqs) {
    const size_t n = freqs.size();
    std::vector<double> out(4 * n);
    const double sy = std::sin(dy), cy = std::cos(dy);
    const double sx = std::sin(dx), cx = std::cos(dx);
    for (size_t j = 0; j < n; ++j) {
        out[2 * j] = freqs[j] * sy;
        out[2 * j + 1] = freqs[j] * cy;
        out[2 * n + 2 * j] = freqs[j] * sx;
        out[2 * n + 2 * j + 1] = freqs[j] * cx;
    }
    return out;
}

TensorPtr periodic_encode(const TensorPtr& delta, const TensorPtr& freqs) {
    if (delta->numel() != 2) throw ShapeError("periodic_encode: delta must have 2 entries");
    if (freqs->ndim() != 1 || freqs->numel() < 1) {
        throw ShapeError("periodic_encode: freqs must be a non-empty vector");
    }
    const int64_t n = freqs->numel();
    auto out = Tensor::from_data(
        {4 * n}, periodic_encode_values(delta->data[0], delta->data[1], freqs->data));
    flops::add(static_cast<uint64_t>(4 * n));
    check_finite(*out, "periodic_encode");
    attach_node(out, {delta, freqs}, [delta, freqs, n](Tensor& self) {
        const double dy = delta->data[0], dx = delta->data[1];
        const double sy = std::sin(dy), cy = std::cos(dy);
        const double sx = std::sin(dx), cx = std::cos(dx);
        if (freqs->requires_grad) {
            freqs->ensure_grad();
            for (int64_t j = 0; j < n; ++j) {
                freqs->grad[static_cast<size_t>(j)] +=
                    sy * self.grad[static_cast<size_t>(2 * j)] +
                    cy * self.grad[static_cast<size_t>(2 * j + 1)] +
                    sx * self.grad[static_cast<size_t>(2 * n + 2 * j)] +
                    cx * self.grad[static_cast<size_t>(2 * n + 2 * j + 1)];
            }
        }
        if (delta->requires_grad) {
            delta->ensure_grad();
            double gy = 0.0, gx = 0.0;
            for (int64_t j = 0; j < n; ++j) {
                const double w = freqs->data[static_cast<size_t>(j)];
                gy += w * cy * self.grad[static_cast<size_t>(2 * j)] -
                      w * sy * self.grad[static_cast<size_t>(2 * j + 1)];
                gx += w * cx * self.grad[static_cast<size_t>(2 * n + 2 * j)] -
                      w * sx * self.grad[static_cast<size_t>(2 * n + 2 * j + 1)];
            }
            delta->grad[0] += gy;
            delta->grad[1] += gx;
        }
    });
    return out;
}

namespace {

struct SourceRefs {
    // per query: flat cell index and relative offsets for one source grid
    std::vector<int64_t> cell;
    std::vector<double> dy, dx;
};

SourceRefs resolve(const std::vector<double>& ys, const std::vector<double>& xs,
                   const CoordGrid& grid) {
    SourceRefs s;
    const size_t n = ys.size();
    s.cell.resize(n);
    s.dy.resize(n);
    s.dx.resize(n);
    for (size_t i = 0; i < n; ++i) {
        NearestResult nr = nearest_lookup(ys[i], xs[i], grid);
        s.cell[i] = nr.row * grid.w + nr.col;
        s.dy[i] = ys[i] - nr.cy;
        s.dx[i] = xs[i] - nr.cx;
    }
    return s;
}

} // namespace

TensorPtr gather_query_inputs(const std::vector<double>& ys, const std::vector<double>& xs,
                              const TensorPtr& latent, const QueryGuidance& guidance,
                              const TensorPtr& freqs, int64_t classes) {
    if (ys.size() != xs.size() || ys.empty()) {
        throw ShapeError("gather_query_inputs: coordinate lists must match and be non-empty");
    }
    if (!latent || latent->ndim() != 3) {
        throw ShapeError("gather_query_inputs: latent must be {D,h,w}");
    }
    const int64_t n_q = static_cast<int64_t>(ys.size());
    const int64_t d = latent->dim(0);
    const int64_t nf = freqs->numel();
    const int64_t block = 2 + 4 * nf;   // delta + encoding
    const int64_t k = d + 2 * classes + 3 * block;

    const CoordGrid zg{latent->dim(1), latent->dim(2)};
    SourceRefs zr = resolve(ys, xs, zg);
    SourceRefs br, lr;
    if (guidance.m_b) {
        if (guidance.m_b->ndim() != 3 || guidance.m_b->dim(0) != classes) {
            throw ShapeError("gather_query_inputs: m_b must be {C,hb,wb}");
        }
        br = resolve(ys, xs, CoordGrid{guidance.m_b->dim(1), guidance.m_b->dim(2)});
    }
    if (guidance.m_l) {
        if (guidance.m_l->ndim() != 3 || guidance.m_l->dim(0) != classes) {
            throw ShapeError("gather_query_inputs: m_l must be {C,hl,wl}");
        }
        lr = resolve(ys, xs, CoordGrid{guidance.m_l->dim(1), guidance.m_l->dim(2)});
    }

    auto out = Tensor::create({n_q, k});
    const double* fw = freqs->data.data();

    auto write_block = [&](double* row, const TensorPtr& grid, const SourceRefs& refs,
                           int64_t values, int64_t i) -> double* {
        // values, then (dy,dx), then per-axis encodings; zeros when disabled
        if (grid) {
            const int64_t cells = grid->dim(1) * grid->dim(2);
            const double* gd = grid->data.data();
            const int64_t cell = refs.cell[static_cast<size_t>(i)];
            for (int64_t v = 0; v < values; ++v) row[v] = gd[v * cells + cell];
            row += values;
            const double dy = refs.dy[static_cast<size_t>(i)];
            const double dx = refs.dx[static_cast<size_t>(i)];
            row[0] = dy;
            row[1] = dx;
            row += 2;
            const double sy = std::sin(dy), cy = std::cos(dy);
            const double sx = std::sin(dx), cx = std::cos(dx);
            for (int64_t j = 0; j < nf; ++j) {
                row[2 * j] = fw[j] * sy;
                row[2 * j + 1] = fw[j] * cy;
                row[2 * nf + 2 * j] = fw[j] * sx;
                row[2 * nf + 2 * j + 1] = fw[j] * cx;
            }
            return row + 4 * nf;
        }
        for (int64_t v = 0; v < values + 2 + 4 * nf; ++v) row[v] = 0.0;
        return row + values + 2 + 4 * nf;
    };

    for (int64_t i = 0; i < n_q; ++i) {
        double* row = out->data.data() + i * k;
        row = write_block(row, latent, zr, d, i);
        row = write_block(row, guidance.m_b, br, classes, i);
        write_block(row, guidance.m_l, lr, classes, i);
    }

    int64_t sources = 1 + (guidance.m_b ? 1 : 0) + (guidance.m_l ? 1 : 0);
    flops::add(static_cast<uint64_t>(n_q) * sources * 4 * nf);
    check_finite(*out, "gather_query_inputs");

    attach_node(
        out, {latent, guidance.m_b, guidance.m_l, freqs},
        [latent, mb = guidance.m_b, ml = guidance.m_l, freqs, zr, br, lr, n_q, d,
         classes, nf, k](Tensor& self) {
            const double* g = self.grad.data();
            auto scatter_block = [&](const double* grow, const TensorPtr& grid,
                                     const SourceRefs& refs, int64_t values,
                                     int64_t i) -> const double* {
                if (!grid) return grow + values + 2 + 4 * nf;
                const int64_t cells = grid->dim(1) * grid->dim(2);
                const int64_t cell = refs.cell[static_cast<size_t>(i)];
                if (grid->requires_grad) {
                    grid->ensure_grad();
                    for (int64_t v = 0; v < values; ++v) {
                        grid->grad[static_cast<size_t>(v * cells + cell)] += grow[v];
                    }
                }
                grow += values + 2; // coordinates are constants
                if (freqs->requires_grad) {
                    freqs->ensure_grad();
                    const double dy = refs.dy[static_cast<size_t>(i)];
                    const double dx = refs.dx[static_cast<size_t>(i)];
                    const double sy = std::sin(dy), cy = std::cos(dy);
                    const double sx = std::sin(dx), cx = std::cos(dx);
                    for (int64_t j = 0; j < nf; ++j) {
                        freqs->grad[static_cast<size_t>(j)] +=
                            sy * grow[2 * j] + cy * grow[2 * j + 1] +
                            sx * grow[2 * nf + 2 * j] + cx * grow[2 * nf + 2 * j + 1];
                    }
                }
                return grow + 4 * nf;
            };
            for (int64_t i = 0; i < n_q; ++i) {
                const double* grow = g + i * k;
                grow = scatter_block(grow, latent, zr, d, i);
                grow = scatter_block(grow, mb, br, classes, i);
                scatter_block(grow, ml, lr, classes, i);
            }
        });
    return out;
}

namespace {

// The head normalizes its encoding inputs by the initial frequency
// amplitudes (fixed constants): the encoded channels carry values up to
// w_n = 2e^n, which would otherwise dominate the fan-in-scaled first layer
// and its gradients. The raw concatenation is unchanged.
std::vector<double> head_input_scale(const ModelConfig& cfg) {
    const int64_t n = cfg.enc_freqs;
    std::vector<double> s(static_cast<size_t>(cfg.query_input_width()), 1.0);
    auto scale_block = [&](int64_t phi_start) {
        for (int64_t axis = 0; axis < 2; ++axis) {
            for (int64_t j = 0; j < n; ++j) {
                double inv = 1.0 / std::max(1.0, 2.0 * std::exp(static_cast<double>(j + 1)));
                s[static_cast<size_t>(phi_start + axis * 2 * n + 2 * j)] = inv;
                s[static_cast<size_t>(phi_start + axis * 2 * n + 2 * j + 1)] = inv;
            }
        }
    };
    const int64_t block = 2 + 4 * n;
    scale_block(cfg.d + 2);
    scale_block(cfg.d + block + cfg.classes + 2);
    scale_block(cfg.d + 2 * block + 2 * cfg.classes + 2);
    return s;
}

} // namespace

TensorPtr query_logits(const Model& model, const TensorPtr& latent,
                       const QueryGuidance& guidance, const std::vector<double>& ys,
                       const std::vector<double>& xs) {
    auto x = gather_query_inputs(ys, xs, latent, guidance, model.p("query.freqs"),
                                 model.cfg.classes);
    if (x->dim(1) != model.p("query.fc1.w")->dim(1)) {
        throw ShapeError("query head: input width " + std::to_string(x->dim(1)) +
                         " does not match head weights " +
                         shape_str(model.p("query.fc1.w")->shape));
    }
    x = scale_columns(x, head_input_scale(model.cfg));
    auto h1 = relu(linear(x, model.p("query.fc1.w"), model.p("query.fc1.b")));
    auto h2 = relu(linear(h1, model.p("query.fc2.w"), model.p("query.fc2.b")));
    return linear(h2, model.p("query.fc3.w"), model.p("query.fc3.b"));
}

TensorPtr query_pixel(const Model& model, const TensorPtr& latent,
                      const QueryGuidance& guidance, double yq, double xq) {
    auto logits = query_logits(model, latent, guidance, {yq}, {xq});
    return reshape(logits, {model.cfg.classes});
}

TensorPtr query_mask(const Model& model, const TensorPtr& latent,
                     const QueryGuidance& guidance, int64_t out_h, int64_t out_w,
                     int64_t chunk_rows) {
    if (out_h < 1 || out_w < 1) throw ShapeError("query_mask: bad output size");
    if (chunk_rows < 1) throw ShapeError("query_mask: chunk_rows must be >= 1");
    const CoordGrid og{out_h, out_w};
    std::vector<TensorPtr> chunks;
    chunks.reserve(static_cast<size_t>((out_h + chunk_rows - 1) / chunk_rows));
    std::vector<double> ys, xs;
    for (int64_t r0 = 0; r0 < out_h; r0 += chunk_rows) {
        const int64_t r1 = std::min(r0 + chunk_rows, out_h);
        ys.clear();
        xs.clear();
        ys.reserve(static_cast<size_t>((r1 - r0) * out_w));
        xs.reserve(static_cast<size_t>((r1 - r0) * out_w));
        for (int64_t r = r0; r < r1; ++r) {
            for (int64_t c = 0; c < out_w; ++c) {
                ys.push_back(og.center_y(r));
                xs.push_back(og.center_x(c));
            }
        }
        chunks.push_back(query_logits(model, latent, guidance, ys, xs));
    }
    auto rows = chunks.size() == 1 ? chunks[0] : concat0_many(chunks); // {HW, C}
    return reshape(transpose2d(rows), {model.cfg.classes, out_h, out_w});
}

TensorPtr bilinear_baseline(const TensorPtr& low_logits, int64_t out_h, int64_t out_w) {
    return bilinear_resize(low_logits, out_h, out_w);
}

} // namespace uhrseg
