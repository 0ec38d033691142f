#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace uhrseg {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

/// Structured error categories; the CLI maps these to exit codes.
class ShapeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};
class BudgetError : public std::runtime_error {
public:
    BudgetError(const std::string& stage, const std::string& msg)
        : std::runtime_error(msg), stage_(stage) {}
    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

// ---------------------------------------------------------------------------
// Multiply-add accounting (per thread, i.e. per tape).
// Conventions per op are documented at each op implementation; the one hard
// contract is conv2d == out_pixels * out_channels * in_channels * kh * kw.
// ---------------------------------------------------------------------------
namespace flops {
void reset();
uint64_t count();
void add(uint64_t mads);
} // namespace flops

// ---------------------------------------------------------------------------
// Live-byte accounting with high-water marks. Tensor data/grad buffers and
// conv scratch buffers register here; this is the artifact's definition of
// "peak activation bytes".
// ---------------------------------------------------------------------------
namespace memtrack {
void on_alloc(int64_t bytes);
void on_free(int64_t bytes);
int64_t live_bytes();       // this thread
int64_t total_live_bytes(); // all threads
void reset_peak();          // run-level watermark <- current live (this thread)
int64_t peak_bytes();
void reset_stage_peak(); // stage-level watermark <- current live (this thread)
int64_t stage_peak_bytes();
} // namespace memtrack

/// RAII scratch allocation that participates in peak-byte accounting without
/// being part of the autograd graph (used by conv's im2col chunks).
class ScratchBuffer {
public:
    explicit ScratchBuffer(int64_t count) : v_(static_cast<size_t>(count)) {
        memtrack::on_alloc(count * static_cast<int64_t>(sizeof(double)));
    }
    ~ScratchBuffer() {
        memtrack::on_free(static_cast<int64_t>(v_.size() * sizeof(double)));
    }
    ScratchBuffer(const ScratchBuffer&) = delete;
    ScratchBuffer& operator=(const ScratchBuffer&) = delete;
    double* data() { return v_.data(); }
    int64_t size() const { return static_cast<int64_t>(v_.size()); }

private:
    std::vector<double> v_;
};

class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

/// Dense double-precision tensor participating in a reverse-mode tape.
/// The tape is implicit: each op stores its parents and a backward closure.
class Tensor : public std::enable_shared_from_this<Tensor> {
public:
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad; // sized lazily, same numel as data
    std::string tag;          // provenance label, used by tests

    // tape bookkeeping (empty for leaves and in no-grad mode)
    std::vector<TensorPtr> parents;
    std::function<void(Tensor&)> backward_fn;

    ~Tensor();

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int64_t dim(size_t i) const { return shape.at(i); }
    int64_t ndim() const { return static_cast<int64_t>(shape.size()); }

    double item() const;
    void ensure_grad();
    void zero_grad();
    /// Accumulates g into grad; g must have numel() entries.
    void accumulate_grad(const double* g, int64_t n);

    bool all_finite() const;

    static TensorPtr create(Shape shape, bool requires_grad = false);
    static TensorPtr from_data(Shape shape, std::vector<double> values,
                               bool requires_grad = false);
    static TensorPtr zeros(Shape shape, bool requires_grad = false);
    static TensorPtr full(Shape shape, double value, bool requires_grad = false);
    static TensorPtr scalar(double value, bool requires_grad = false);

private:
    Tensor(Shape s, std::vector<double> d, bool rg);
    struct Access {};

public:
    Tensor(Access, Shape s, std::vector<double> d, bool rg)
        : Tensor(std::move(s), std::move(d), rg) {}
};

/// Whether ops record tape entries (thread-local).
bool grad_enabled();

/// Disables tape recording in a scope (memory updates, inference).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

/// Reverse-mode sweep from a scalar loss. Every requires_grad tensor
/// reachable through the tape gets its grad populated; repeated calls
/// accumulate. Throws ShapeError for non-scalar losses.
void backward(const TensorPtr& loss);

/// Throws NumericError naming `what` if any value is non-finite.
void check_finite(const Tensor& t, const char* what);

} // namespace uhrseg
