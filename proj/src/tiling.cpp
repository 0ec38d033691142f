#include "uhrseg/tiling.hpp"

#include "uhrseg/ops.hpp"
#include "uhrseg/query.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <exception>
#include <map>
#include <mutex>
#include <thread>

namespace uhrseg {

PatchGrid partition(int64_t image_h, int64_t image_w, int64_t patch, int64_t overlap) {
    if (patch <= 0) throw ConfigError("partition: patch must be positive");
    if (overlap < 0 || overlap >= patch) {
        throw ConfigError("partition: overlap must satisfy 0 <= overlap < patch");
    }
    if (patch > image_h || patch > image_w) {
        throw ConfigError("partition: patch " + std::to_string(patch) +
                          " exceeds image extent " + std::to_string(image_h) + "x" +
                          std::to_string(image_w) +
                          "; use global mode or pad the input");
    }
    PatchGrid g;
    g.image_h = image_h;
    g.image_w = image_w;
    g.patch = patch;
    g.stride = patch - overlap;

    auto axis_positions = [&](int64_t extent) {
        std::vector<int64_t> pos;
        for (int64_t r = 0;; r += g.stride) {
            if (r + patch >= extent) {
                pos.push_back(extent - patch); // edge-aligned final placement
                break;
            }
            pos.push_back(r);
        }
        return pos;
    };
    const std::vector<int64_t> rows = axis_positions(image_h);
    const std::vector<int64_t> cols = axis_positions(image_w);
    for (int64_t r : rows) {
        for (int64_t c : cols) g.placements.emplace_back(r, c);
    }
    return g;
}

namespace {

TensorPtr image_to_tensor(const ImageU8& img) {
    auto t = Tensor::create({3, img.h, img.w});
    const int64_t hw = img.h * img.w;
    for (int64_t i = 0; i < hw; ++i) {
        for (int64_t ch = 0; ch < 3; ++ch) {
            t->data[static_cast<size_t>(ch * hw + i)] =
                static_cast<double>(img.rgb[static_cast<size_t>(i * 3 + ch)]) / 255.0;
        }
    }
    return t;
}

TensorPtr crop_tensor(const Tensor& image, int64_t r0, int64_t c0, int64_t size) {
    const int64_t h = image.dim(1), w = image.dim(2);
    auto out = Tensor::create({3, size, size});
    for (int64_t ch = 0; ch < 3; ++ch) {
        for (int64_t r = 0; r < size; ++r) {
            const double* src = image.data.data() + (ch * h + r0 + r) * w + c0;
            double* dst = out->data.data() + (ch * size + r) * size;
            std::copy(src, src + size, dst);
        }
    }
    return out;
}

void accumulate_probs(Tensor& prob_sum, const Tensor& probs, int64_t r0, int64_t c0) {
    const int64_t c = prob_sum.dim(0), h = prob_sum.dim(1), w = prob_sum.dim(2);
    const int64_t p = probs.dim(1);
    for (int64_t ch = 0; ch < c; ++ch) {
        for (int64_t r = 0; r < p; ++r) {
            const double* src = probs.data.data() + (ch * p + r) * p;
            double* dst = prob_sum.data.data() + (ch * h + r0 + r) * w + c0;
            for (int64_t cc = 0; cc < p; ++cc) dst[cc] += src[cc];
        }
    }
}

LabelMap labels_from(const Tensor& scores, int64_t h, int64_t w) {
    std::vector<int32_t> arg = argmax_channels(scores);
    LabelMap lm;
    lm.h = h;
    lm.w = w;
    lm.v.resize(static_cast<size_t>(h * w));
    for (size_t i = 0; i < lm.v.size(); ++i) lm.v[i] = static_cast<uint8_t>(arg[i]);
    return lm;
}

/// Budget-aware stage bookkeeping (single-worker path).
struct StageWatch {
    MemoryReport* report = nullptr;
    int64_t budget = 0;

    void enter() { memtrack::reset_stage_peak(); }
    void leave(const std::string& name) {
        int64_t peak = memtrack::stage_peak_bytes();
        if (report) {
            auto it = report->per_stage.find(name);
            if (it == report->per_stage.end() || it->second < peak) {
                report->per_stage[name] = peak;
            }
        }
        if (budget > 0 && memtrack::peak_bytes() > budget) {
            throw BudgetError(name, "memory budget exceeded during stage '" + name +
                                        "': peak " + std::to_string(memtrack::peak_bytes()) +
                                        " > budget " + std::to_string(budget) +
                                        " bytes; use a smaller patch or chunk_rows");
        }
    }
};

int64_t effective_chunk_rows(const InferOptions& opt, int64_t patch) {
    if (opt.chunk_rows > 0) return opt.chunk_rows;
    return std::max<int64_t>(1, patch / 8);
}

/// The per-patch pipeline. Locality contract: consumes only the crop and the
/// read-only model state; no tensor from one patch feeds another. Returns
/// softmax probabilities {C,p,p}.
TensorPtr segment_patch_probs(const LoadedModel& lm, TensorPtr crop, int64_t out_h,
                              int64_t out_w, int64_t chunk_rows, StageWatch* watch) {
    const Model& model = lm.model;
    const AblationFlags& flags = lm.flags;

    if (watch) watch->enter();
    PatchPair pp = PatchPair::make(crop, model.cfg.downscale);
    crop.reset();
    TensorPtr latent = model.semantic_branch(pp.down);
    pp.down.reset();

    if (flags.upsampler == "bilinear") {
        auto logits = model.semantic_logit_head(latent);
        latent.reset();
        pp.full.reset();
        if (watch) watch->leave("branches");
        if (watch) watch->enter();
        auto up = bilinear_baseline(logits, out_h, out_w);
        logits.reset();
        auto probs = softmax_channels(up);
        if (watch) watch->leave("query_chunks");
        return probs;
    }

    QueryGuidance guidance;
    if (flags.use_m_b) {
        auto [f_b, mb_logits] = model.memory_branch(pp.full);
        guidance.m_b = softmax_channels(mb_logits);
        mb_logits.reset();
        if (flags.use_memory && lm.bank.any_initialized()) {
            if (flags.read_mode == "concat") {
                guidance.m_b = softmax_channels(
                    read_refine_concat(lm.bank, f_b, guidance.m_b,
                                       model.p("memread.head.w"), model.p("memread.head.b")));
            } else {
                guidance.m_b = read_refine(lm.bank, f_b, guidance.m_b);
            }
        }
    }
    if (flags.use_m_l) {
        guidance.m_l = softmax_channels(model.spatial_branch(pp.full));
    }
    pp.full.reset();
    if (watch) watch->leave("branches");

    if (watch) watch->enter();
    auto logits = query_mask(model, latent, guidance, out_h, out_w, chunk_rows);
    latent.reset();
    guidance.m_b.reset();
    guidance.m_l.reset();
    auto probs = softmax_channels(logits);
    if (watch) watch->leave("query_chunks");
    return probs;
}

void check_patch_divisibility(const ModelConfig& cfg, int64_t patch) {
    if (patch % 4 != 0 || patch % cfg.downscale != 0) {
        throw ConfigError("patch size must be divisible by 4 and by the downscale factor");
    }
}

} // namespace

LabelMap merge(const std::vector<TensorPtr>& patch_logits, const PatchGrid& grid) {
    if (patch_logits.size() != grid.placements.size()) {
        throw ShapeError("merge: got " + std::to_string(patch_logits.size()) +
                         " logit blocks for " + std::to_string(grid.placements.size()) +
                         " placements");
    }
    if (patch_logits.empty()) throw ShapeError("merge: empty grid");
    const int64_t c = patch_logits[0]->dim(0);
    auto prob_sum = Tensor::create({c, grid.image_h, grid.image_w});
    NoGradGuard ng;
    for (size_t i = 0; i < patch_logits.size(); ++i) {
        const auto& block = patch_logits[i];
        if (block->ndim() != 3 || block->dim(0) != c || block->dim(1) != grid.patch ||
            block->dim(2) != grid.patch) {
            throw ShapeError("merge: block " + std::to_string(i) + " has shape " +
                             shape_str(block->shape));
        }
        auto probs = softmax_channels(block);
        accumulate_probs(*prob_sum, *probs, grid.placements[i].first,
                         grid.placements[i].second);
    }
    return labels_from(*prob_sum, grid.image_h, grid.image_w);
}

nlohmann::json MemoryReport::to_json() const {
    return {{"estimated_peak_bytes", estimated_peak_bytes},
            {"measured_peak_bytes", measured_peak_bytes},
            {"budget_bytes", budget_bytes},
            {"per_stage", per_stage}};
}

std::pair<LabelMap, MemoryReport> infer_local(const ImageU8& image, const LoadedModel& lm,
                                              const InferOptions& opt) {
    const ModelConfig& cfg = lm.model.cfg;
    check_patch_divisibility(cfg, opt.patch);
    const int64_t overlap = opt.overlap >= 0 ? opt.overlap : opt.patch / 16;
    const int64_t chunk_rows = effective_chunk_rows(opt, opt.patch);
    PatchGrid grid = partition(image.h, image.w, opt.patch, overlap);

    MemoryReport rep;
    rep.budget_bytes = opt.budget_bytes;
    rep.estimated_peak_bytes =
        estimate_peak_memory(cfg, lm.flags, opt.patch, chunk_rows, image.h, image.w);

    memtrack::reset_peak();
    NoGradGuard ng;
    auto img_t = image_to_tensor(image);
    auto prob_sum = Tensor::create({cfg.classes, image.h, image.w});
    rep.per_stage["merge_buffers"] =
        static_cast<int64_t>(sizeof(double)) * (cfg.classes + 3) * image.h * image.w;

    StageWatch watch{&rep, opt.budget_bytes};
    const int64_t n = static_cast<int64_t>(grid.placements.size());
    const int64_t workers = std::max<int64_t>(1, opt.workers);

    if (workers == 1) {
        for (int64_t i = 0; i < n; ++i) {
            auto [r0, c0] = grid.placements[static_cast<size_t>(i)];
            auto probs = segment_patch_probs(
                lm, crop_tensor(*img_t, r0, c0, opt.patch), opt.patch, opt.patch,
                chunk_rows, &watch);
            accumulate_probs(*prob_sum, *probs, r0, c0);
        }
        rep.measured_peak_bytes = memtrack::peak_bytes();
    } else {
        // Static round-robin placement assignment; a bounded reorder buffer
        // lets the caller accumulate in placement order, so labels do not
        // depend on scheduling. The peak is the process-wide high-water mark
        // across all workers.
        std::mutex mu;
        std::condition_variable cv_ready, cv_space;
        std::map<int64_t, TensorPtr> ready;
        int64_t next = 0;
        std::exception_ptr error;
        std::vector<std::thread> pool;
        for (int64_t wk = 0; wk < workers; ++wk) {
            pool.emplace_back([&, wk]() {
                try {
                    for (int64_t i = wk; i < n; i += workers) {
                        auto [r0, c0] = grid.placements[static_cast<size_t>(i)];
                        auto probs = segment_patch_probs(
                            lm, crop_tensor(*img_t, r0, c0, opt.patch), opt.patch,
                            opt.patch, chunk_rows, nullptr);
                        std::unique_lock<std::mutex> lk(mu);
                        cv_space.wait(lk, [&] {
                            return error || i - next <= workers;
                        });
                        if (error) return;
                        ready.emplace(i, std::move(probs));
                        cv_ready.notify_all();
                    }
                } catch (...) {
                    std::lock_guard<std::mutex> lk(mu);
                    if (!error) error = std::current_exception();
                    cv_ready.notify_all();
                    cv_space.notify_all();
                }
            });
        }
        {
            std::unique_lock<std::mutex> lk(mu);
            while (next < n) {
                cv_ready.wait(lk, [&] { return error || ready.count(next) > 0; });
                if (error) break;
                TensorPtr probs = std::move(ready.at(next));
                ready.erase(next);
                auto [r0, c0] = grid.placements[static_cast<size_t>(next)];
                lk.unlock();
                accumulate_probs(*prob_sum, *probs, r0, c0);
                probs.reset();
                lk.lock();
                ++next;
                cv_space.notify_all();
            }
        }
        for (auto& t : pool) t.join();
        if (error) std::rethrow_exception(error);
        rep.measured_peak_bytes = memtrack::peak_bytes();
        if (opt.budget_bytes > 0 && rep.measured_peak_bytes > opt.budget_bytes) {
            throw BudgetError("workers", "memory budget exceeded across workers: " +
                                             std::to_string(rep.measured_peak_bytes) +
                                             " > " + std::to_string(opt.budget_bytes) +
                                             " bytes; use fewer workers or a smaller patch");
        }
    }

    return {labels_from(*prob_sum, image.h, image.w), rep};
}

std::pair<LabelMap, MemoryReport> infer_global(const ImageU8& image, const LoadedModel& lm,
                                               const InferOptions& opt) {
    const ModelConfig& cfg = lm.model.cfg;
    const int64_t chunk_rows = effective_chunk_rows(opt, opt.target_side);

    MemoryReport rep;
    rep.budget_bytes = opt.budget_bytes;

    memtrack::reset_peak();
    NoGradGuard ng;
    auto img_t = image_to_tensor(image);

    const int64_t align = std::max<int64_t>(4, cfg.downscale);
    const int64_t min_side = 8 * cfg.downscale; // semantic stack footprint
    const int64_t side = std::max(image.h, image.w);
    TensorPtr g = img_t;
    if (side > opt.target_side) {
        double s = static_cast<double>(opt.target_side) / static_cast<double>(side);
        auto snap = [&](int64_t v) {
            int64_t out = static_cast<int64_t>(std::llround(v * s / align)) * align;
            return std::max(out, min_side);
        };
        g = bilinear_resize(img_t, snap(image.h), snap(image.w));
    } else if (image.h % align != 0 || image.w % align != 0) {
        throw ConfigError("infer_global: image dimensions must be divisible by " +
                          std::to_string(align));
    }
    img_t.reset();

    StageWatch watch{&rep, opt.budget_bytes};
    auto probs = segment_patch_probs(lm, g, image.h, image.w, chunk_rows, &watch);
    rep.measured_peak_bytes = memtrack::peak_bytes();
    rep.estimated_peak_bytes = rep.measured_peak_bytes; // no analytic model for global

    return {labels_from(*probs, image.h, image.w), rep};
}

// ---------------------------------------------------------------------------
// Analytic peak estimate, mirroring segment_patch_probs stage by stage.
// Every tensor is 8 bytes per value; conv layers add an im2col scratch chunk
// of min(16, out_h)*out_w*cin*k*k values, and each activation+relu pair holds
// input + conv output + relu output simultaneously.
// ---------------------------------------------------------------------------
namespace {

struct EstWalk {
    int64_t held = 0; // long-lived bytes at this point
    int64_t peak = 0;

    void bump(int64_t transient) { peak = std::max(peak, held + transient); }
    void hold(int64_t bytes) {
        held += bytes;
        peak = std::max(peak, held);
    }
    void release(int64_t bytes) { held -= bytes; }
};

int64_t conv_scratch_bytes(int64_t cin, int64_t k, int64_t ho, int64_t wo) {
    const int64_t chunk = std::max<int64_t>(16, ho / 4); // mirrors conv2d's im2col
    return 8 * std::min(chunk, ho) * wo * cin * k * k;
}

// conv(+relu) transient: conv output + scratch, then conv output + relu copy.
void walk_conv(EstWalk& w, int64_t cin, int64_t& h, int64_t& wd, int64_t cout,
               int64_t stride, int64_t k, bool with_relu, int64_t& in_bytes) {
    int64_t ho = stride == 1 ? h : h / 2;
    int64_t wo = stride == 1 ? wd : wd / 2;
    int64_t out_bytes = 8 * cout * ho * wo;
    w.bump(in_bytes + out_bytes + conv_scratch_bytes(cin, k, ho, wo));
    if (with_relu) w.bump(in_bytes + 2 * out_bytes);
    w.release(0);
    h = ho;
    wd = wo;
    in_bytes = out_bytes;
}

} // namespace

int64_t estimate_peak_memory(const ModelConfig& cfg, const AblationFlags& flags,
                             int64_t patch, int64_t chunk_rows, int64_t image_h,
                             int64_t image_w) {
    check_patch_divisibility(cfg, patch);
    if (chunk_rows <= 0) chunk_rows = std::max<int64_t>(1, patch / 8);
    const int64_t p = patch;
    const int64_t hd = p / cfg.downscale;
    const auto& sw = cfg.semantic_widths;

    EstWalk w;
    if (image_h > 0 && image_w > 0) {
        // full-run estimate: parameters + frozen bank live for the whole run,
        // plus the input image and the merge accumulators. Without image
        // dimensions this is a pure per-patch activation estimate, where the
        // dominant terms are quadratic in the patch side.
        Model probe = Model::init(cfg, 0);
        w.hold(8 * (probe.param_count() + cfg.d * cfg.classes + cfg.classes));
        w.hold(8 * 3 * image_h * image_w);           // input image tensor
        w.hold(8 * cfg.classes * image_h * image_w); // merge probability sums
    }

    // one patch: crop + downscaled copy
    const int64_t crop_b = 8 * 3 * p * p;
    w.hold(crop_b);
    const int64_t down_b = 8 * 3 * hd * hd;
    w.bump(crop_b + down_b); // during bilinear downscale both exist
    w.hold(down_b);

    // semantic branch on the downscaled patch
    int64_t h = hd, wd = hd, in_b = down_b;
    walk_conv(w, 3, h, wd, sw[0], 2, 3, true, in_b);
    walk_conv(w, sw[0], h, wd, sw[1], 1, 3, true, in_b);
    walk_conv(w, sw[1], h, wd, sw[2], 2, 3, true, in_b);
    walk_conv(w, sw[2], h, wd, cfg.d, 1, 3, true, in_b);
    // two residual blocks: skip input + two intermediates live together
    const int64_t lat_b = 8 * cfg.d * h * wd;
    w.bump(3 * lat_b + conv_scratch_bytes(cfg.d, 3, h, wd));
    w.bump(3 * lat_b + conv_scratch_bytes(cfg.d, 3, h, wd));
    w.hold(lat_b);       // latent persists into the query stage
    w.release(down_b);   // downscaled patch freed after the semantic branch

    const int64_t hp = p / 2;
    int64_t guidance_b = 0;
    if (flags.upsampler == "query" && flags.use_m_b) {
        // memory branch on the full patch
        h = p;
        wd = p;
        in_b = crop_b;
        walk_conv(w, 3, h, wd, cfg.d, 2, 3, true, in_b);
        walk_conv(w, cfg.d, h, wd, cfg.d, 1, 3, true, in_b);
        walk_conv(w, cfg.d, h, wd, cfg.d, 1, 3, true, in_b);
        const int64_t fb_b = 8 * cfg.d * hp * hp;
        const int64_t mb_b = 8 * cfg.classes * hp * hp;
        w.hold(fb_b);
        w.bump(mb_b + conv_scratch_bytes(cfg.d, 1, hp, hp)); // 1x1 head
        w.bump(2 * mb_b);                                    // logits + softmax
        w.hold(mb_b);
        if (flags.use_memory) {
            // read: flattened features + a couple of C x P transients
            w.bump(fb_b + 2 * mb_b);
            w.bump(3 * mb_b);
            w.hold(mb_b);    // refined guidance replaces the plain softmax
            w.release(mb_b); // previous guidance freed
        }
        w.release(fb_b);
        guidance_b += mb_b;
    }
    if (flags.upsampler == "query" && flags.use_m_l) {
        h = p;
        wd = p;
        in_b = crop_b;
        walk_conv(w, 3, h, wd, cfg.spatial_width, 1, 3, true, in_b);
        walk_conv(w, cfg.spatial_width, h, wd, cfg.spatial_width, 1, 3, true, in_b);
        walk_conv(w, cfg.spatial_width, h, wd, cfg.classes, 1, 3, false, in_b);
        const int64_t ml_b = 8 * cfg.classes * p * p;
        w.bump(2 * ml_b); // logits + softmax
        w.hold(ml_b);
        guidance_b += ml_b;
    }
    w.release(crop_b); // full patch freed before the query stage

    const int64_t out_b = 8 * cfg.classes * p * p;
    if (flags.upsampler == "bilinear") {
        const int64_t lo_b = 8 * cfg.classes * hd / 4 * hd / 4;
        w.bump(lat_b + lo_b);
        w.release(lat_b);
        w.bump(lo_b + out_b);
        w.bump(2 * out_b); // upsampled logits + softmax
    } else {
        // chunked query: gathered rows + two hidden activations + logits per
        // chunk, while finished chunk logits accumulate to C*p*p total
        const int64_t nc = std::min(chunk_rows, p) * p;
        const int64_t chunk_b =
            8 * nc * (cfg.query_input_width() + 2 * cfg.head_hidden + cfg.classes);
        w.bump(out_b + chunk_b);
        // concat + transpose + reshape tail, then softmax
        w.bump(3 * out_b);
        w.release(lat_b + guidance_b);
        w.bump(2 * out_b);
    }
    return w.peak;
}

std::vector<BenchRow> run_bench(const ImageU8& image, const LabelMap& gt,
                                const LoadedModel& lm, const std::vector<int64_t>& patches,
                                const InferOptions& base) {
    if (patches.empty()) throw ConfigError("bench: need at least one patch size");
    std::vector<BenchRow> rows;
    for (int64_t p : patches) {
        InferOptions opt = base;
        opt.patch = p;
        opt.overlap = base.overlap >= 0 ? std::min(base.overlap, p - 1) : -1;
        auto t0 = std::chrono::steady_clock::now();
        auto [labels, rep] = infer_local(image, lm, opt);
        auto t1 = std::chrono::steady_clock::now();
        BenchRow row;
        row.patch = p;
        row.miou = miou(labels, gt, lm.model.cfg.classes).miou;
        row.measured_peak_bytes = rep.measured_peak_bytes;
        row.estimated_peak_bytes = rep.estimated_peak_bytes;
        row.wall_time_sec = std::chrono::duration<double>(t1 - t0).count();
        rows.push_back(row);
    }
    return rows;
}

} // namespace uhrseg
