#include "uhrseg/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>
#include <sstream>
#include <unordered_set>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace uhrseg {

namespace {
// Activation buffers are MB-scale and recycled constantly; keeping them on
// the heap instead of per-call mmap regions avoids page-fault churn.
struct MallocTuning {
    MallocTuning() {
#if defined(__GLIBC__)
        mallopt(M_MMAP_THRESHOLD, 1 << 30);
        mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
    }
};
const MallocTuning g_malloc_tuning;
} // namespace

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t e : s) {
        if (e < 0) throw ShapeError("negative extent in shape " + shape_str(s));
        n *= e;
    }
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << "]";
    return os.str();
}

namespace flops {
namespace {
thread_local uint64_t g_mads = 0;
}
void reset() { g_mads = 0; }
uint64_t count() { return g_mads; }
void add(uint64_t mads) { g_mads += mads; }
} // namespace flops

namespace memtrack {
namespace {
// Process-wide accounting: tensors may be created on a worker thread and
// released by the merger, so live bytes are a global sum and the high-water
// marks are CAS maxima over it. Deterministic at workers=1.
std::atomic<int64_t> g_live{0};
std::atomic<int64_t> g_peak{0};
std::atomic<int64_t> g_stage_peak{0};

void raise_watermark(std::atomic<int64_t>& mark, int64_t value) {
    int64_t cur = mark.load(std::memory_order_relaxed);
    while (cur < value && !mark.compare_exchange_weak(cur, value, std::memory_order_relaxed)) {
    }
}
} // namespace

void on_alloc(int64_t bytes) {
    int64_t now = g_live.fetch_add(bytes, std::memory_order_relaxed) + bytes;
    raise_watermark(g_peak, now);
    raise_watermark(g_stage_peak, now);
}
void on_free(int64_t bytes) { g_live.fetch_sub(bytes, std::memory_order_relaxed); }
int64_t live_bytes() { return g_live.load(std::memory_order_relaxed); }
int64_t total_live_bytes() { return live_bytes(); }
void reset_peak() { g_peak.store(live_bytes(), std::memory_order_relaxed); }
int64_t peak_bytes() { return g_peak.load(std::memory_order_relaxed); }
void reset_stage_peak() { g_stage_peak.store(live_bytes(), std::memory_order_relaxed); }
int64_t stage_peak_bytes() { return g_stage_peak.load(std::memory_order_relaxed); }
} // namespace memtrack

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor::Tensor(Shape s, std::vector<double> d, bool rg)
    : shape(std::move(s)), data(std::move(d)), requires_grad(rg) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
        throw ShapeError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
    }
    memtrack::on_alloc(static_cast<int64_t>(data.size() * sizeof(double)));
}

Tensor::~Tensor() {
    memtrack::on_free(static_cast<int64_t>((data.size() + grad.size()) * sizeof(double)));
}

double Tensor::item() const {
    if (numel() != 1) {
        throw ShapeError("item() requires a scalar, got shape " + shape_str(shape));
    }
    return data[0];
}

void Tensor::ensure_grad() {
    if (grad.empty() && !data.empty()) {
        grad.assign(data.size(), 0.0);
        memtrack::on_alloc(static_cast<int64_t>(grad.size() * sizeof(double)));
    }
}

void Tensor::zero_grad() {
    std::fill(grad.begin(), grad.end(), 0.0);
}

void Tensor::accumulate_grad(const double* g, int64_t n) {
    if (n != numel()) {
        throw ShapeError("gradient length mismatch: " + std::to_string(n) +
                         " vs " + std::to_string(numel()));
    }
    ensure_grad();
    for (int64_t i = 0; i < n; ++i) grad[static_cast<size_t>(i)] += g[i];
}

bool Tensor::all_finite() const {
    for (double v : data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

TensorPtr Tensor::create(Shape shape, bool requires_grad) {
    int64_t n = shape_numel(shape);
    return std::make_shared<Tensor>(Access{}, std::move(shape),
                                    std::vector<double>(static_cast<size_t>(n), 0.0),
                                    requires_grad);
}

TensorPtr Tensor::from_data(Shape shape, std::vector<double> values, bool requires_grad) {
    return std::make_shared<Tensor>(Access{}, std::move(shape), std::move(values),
                                    requires_grad);
}

TensorPtr Tensor::zeros(Shape shape, bool requires_grad) {
    return create(std::move(shape), requires_grad);
}

TensorPtr Tensor::full(Shape shape, double value, bool requires_grad) {
    int64_t n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<double>(static_cast<size_t>(n), value),
                     requires_grad);
}

TensorPtr Tensor::scalar(double value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

void check_finite(const Tensor& t, const char* what) {
    if (!t.all_finite()) {
        throw NumericError(std::string("non-finite value in ") + what);
    }
}

void backward(const TensorPtr& loss) {
    if (!loss) throw ShapeError("backward on null tensor");
    if (loss->numel() != 1) {
        throw ShapeError("backward requires a scalar loss, got shape " +
                         shape_str(loss->shape));
    }
    if (!loss->requires_grad) {
        throw ShapeError("backward on a tensor outside the tape");
    }

    // Deterministic topological order: DFS over parents in insertion order.
    std::vector<Tensor*> order;
    std::unordered_set<Tensor*> visited;
    std::vector<std::pair<Tensor*, size_t>> stack;
    stack.emplace_back(loss.get(), 0);
    visited.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Tensor* p = node->parents[idx].get();
            ++idx;
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    // Each sweep is independent: intermediate (non-leaf) grads are reset so
    // that repeated backward calls accumulate exactly one gradient into the
    // leaves per call.
    for (Tensor* node : order) {
        if (node->backward_fn) node->zero_grad();
    }
    loss->ensure_grad();
    loss->grad[0] += 1.0;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Tensor* node = *it;
        if (node->backward_fn) {
            node->ensure_grad();
            node->backward_fn(*node);
        }
    }

    // NaN policy: a backward sweep must produce finite gradients everywhere.
    for (Tensor* node : order) {
        for (double v : node->grad) {
            if (!std::isfinite(v)) {
                throw NumericError("non-finite gradient after backward" +
                                   (node->tag.empty() ? std::string()
                                                      : " in " + node->tag));
            }
        }
    }
}

} // namespace uhrseg
