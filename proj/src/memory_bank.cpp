#include "uhrseg/memory_bank.hpp"

#include "uhrseg/ops.hpp"

#include <cmath>
#include <map>

namespace uhrseg {

MemoryBank MemoryBank::make(int64_t d, int64_t classes, double momentum) {
    if (classes <= 0) throw ConfigError("memory bank: classes must be positive");
    if (d <= 0) throw ConfigError("memory bank: feature dim must be positive");
    if (momentum < 0.0 || momentum >= 1.0) {
        throw ConfigError("memory bank: momentum must be in [0,1)");
    }
    MemoryBank b;
    b.d = d;
    b.classes = classes;
    b.momentum = momentum;
    b.m.assign(static_cast<size_t>(d * classes), 0.0);
    b.initialized.assign(static_cast<size_t>(classes), 0);
    return b;
}

bool MemoryBank::any_initialized() const {
    for (uint8_t f : initialized) {
        if (f) return true;
    }
    return false;
}

namespace {

void check_batch(const UpdateBatch& batch, int64_t classes) {
    if (batch.d <= 0 || batch.n <= 0) throw ShapeError("update batch: empty");
    if (static_cast<int64_t>(batch.features.size()) != batch.d * batch.n) {
        throw ShapeError("update batch: feature buffer size mismatch");
    }
    if (static_cast<int64_t>(batch.labels.size()) != batch.n) {
        throw ShapeError("update batch: labels length " +
                         std::to_string(batch.labels.size()) + " vs " +
                         std::to_string(batch.n) + " feature columns");
    }
    for (int32_t y : batch.labels) {
        if (y != kIgnoreLabel && (y < 0 || y >= classes)) {
            throw ShapeError("update batch: label " + std::to_string(y) +
                             " out of range");
        }
    }
}

// Columns of each class, as indices into the batch.
std::map<int32_t, std::vector<int64_t>> group_by_class(const UpdateBatch& batch) {
    std::map<int32_t, std::vector<int64_t>> groups;
    for (int64_t i = 0; i < batch.n; ++i) {
        int32_t y = batch.labels[static_cast<size_t>(i)];
        if (y == kIgnoreLabel) continue;
        groups[y].push_back(i);
    }
    return groups;
}

std::vector<double> class_mean(const UpdateBatch& batch, const std::vector<int64_t>& idx) {
    std::vector<double> v(static_cast<size_t>(batch.d), 0.0);
    for (int64_t i : idx) {
        for (int64_t r = 0; r < batch.d; ++r) {
            v[static_cast<size_t>(r)] += batch.features[static_cast<size_t>(r * batch.n + i)];
        }
    }
    double inv = 1.0 / static_cast<double>(idx.size());
    for (double& x : v) x *= inv;
    return v;
}

} // namespace

MemoryBank init_memory(const UpdateBatch& batch, int64_t classes, int64_t d,
                       double momentum) {
    MemoryBank bank = MemoryBank::make(d, classes, momentum);
    check_batch(batch, classes);
    if (batch.d != d) throw ShapeError("init_memory: feature dim mismatch");
    for (const auto& [cls, idx] : group_by_class(batch)) {
        std::vector<double> v = class_mean(batch, idx);
        for (int64_t r = 0; r < d; ++r) bank.at(r, cls) = v[static_cast<size_t>(r)];
        bank.initialized[static_cast<size_t>(cls)] = 1;
    }
    return bank;
}

std::vector<ClassVector> transform_features(const UpdateBatch& batch,
                                            const MemoryBank& bank) {
    check_batch(batch, bank.classes);
    if (batch.d != bank.d) throw ShapeError("transform_features: feature dim mismatch");
    std::vector<ClassVector> out;
    for (const auto& [cls, idx] : group_by_class(batch)) {
        if (!bank.initialized[static_cast<size_t>(cls)]) {
            // first occurrence: nothing to compare against, use the mean
            out.push_back({cls, class_mean(batch, idx)});
            continue;
        }
        double proto_norm = 0.0;
        for (int64_t r = 0; r < bank.d; ++r) proto_norm += bank.at(r, cls) * bank.at(r, cls);
        proto_norm = std::sqrt(proto_norm);

        const int64_t nc = static_cast<int64_t>(idx.size());
        std::vector<double> weights(static_cast<size_t>(nc), 0.0);
        double wsum = 0.0;
        for (int64_t j = 0; j < nc; ++j) {
            int64_t i = idx[static_cast<size_t>(j)];
            double dot = 0.0, norm = 0.0;
            for (int64_t r = 0; r < bank.d; ++r) {
                double f = batch.features[static_cast<size_t>(r * batch.n + i)];
                dot += f * bank.at(r, cls);
                norm += f * f;
            }
            norm = std::sqrt(norm);
            // zero-norm feature or prototype: cosine defined as 0
            double cosine = (norm > 0.0 && proto_norm > 0.0) ? dot / (norm * proto_norm) : 0.0;
            double wgt = 1.0 - cosine;
            weights[static_cast<size_t>(j)] = wgt;
            wsum += wgt;
        }
        ClassVector cv{cls, std::vector<double>(static_cast<size_t>(bank.d), 0.0)};
        if (wsum <= 1e-9) {
            // all features parallel to the prototype: 0/0, fall back to mean
            cv.v = class_mean(batch, idx);
        } else {
            for (int64_t j = 0; j < nc; ++j) {
                int64_t i = idx[static_cast<size_t>(j)];
                double w = weights[static_cast<size_t>(j)] / wsum;
                for (int64_t r = 0; r < bank.d; ++r) {
                    cv.v[static_cast<size_t>(r)] +=
                        w * batch.features[static_cast<size_t>(r * batch.n + i)];
                }
            }
        }
        out.push_back(std::move(cv));
    }
    return out;
}

std::vector<ClassVector> mean_update_ablation(const UpdateBatch& batch,
                                              const MemoryBank& bank) {
    check_batch(batch, bank.classes);
    if (batch.d != bank.d) throw ShapeError("mean_update: feature dim mismatch");
    std::vector<ClassVector> out;
    for (const auto& [cls, idx] : group_by_class(batch)) {
        out.push_back({cls, class_mean(batch, idx)});
    }
    return out;
}

void update_memory(MemoryBank& bank, const std::vector<ClassVector>& transformed) {
    for (const auto& cv : transformed) {
        if (cv.cls < 0 || cv.cls >= bank.classes) {
            throw ShapeError("update_memory: class out of range");
        }
        if (static_cast<int64_t>(cv.v.size()) != bank.d) {
            throw ShapeError("update_memory: vector dim mismatch");
        }
        if (!bank.initialized[static_cast<size_t>(cv.cls)]) {
            for (int64_t r = 0; r < bank.d; ++r) bank.at(r, cv.cls) = cv.v[static_cast<size_t>(r)];
            bank.initialized[static_cast<size_t>(cv.cls)] = 1;
        } else {
            const double m = bank.momentum;
            for (int64_t r = 0; r < bank.d; ++r) {
                bank.at(r, cv.cls) = m * bank.at(r, cv.cls) + (1.0 - m) * cv.v[static_cast<size_t>(r)];
            }
        }
    }
}

namespace {

// The transposed bank matrix {C,D} as a constant tensor; gradients never
// flow into it (the tag is what tape-exclusion assertions look for).
TensorPtr bank_tensor_t(const MemoryBank& bank) {
    std::vector<double> mt(static_cast<size_t>(bank.d * bank.classes));
    for (int64_t c = 0; c < bank.classes; ++c) {
        for (int64_t r = 0; r < bank.d; ++r) {
            mt[static_cast<size_t>(c * bank.d + r)] = bank.at(r, c);
        }
    }
    auto t = Tensor::from_data({bank.classes, bank.d}, std::move(mt), false);
    t->tag = "memory.bank";
    return t;
}

void check_read_args(const MemoryBank& bank, const Tensor& f_b, const Tensor& m_b) {
    if (f_b.ndim() != 3 || f_b.dim(0) != bank.d) {
        throw ShapeError("memory read: features " + shape_str(f_b.shape) +
                         " incompatible with bank dim " + std::to_string(bank.d));
    }
    if (m_b.ndim() != 3 || m_b.dim(0) != bank.classes || m_b.dim(1) != f_b.dim(1) ||
        m_b.dim(2) != f_b.dim(2)) {
        throw ShapeError("memory read: mask " + shape_str(m_b.shape) +
                         " incompatible with features " + shape_str(f_b.shape));
    }
    if (!bank.any_initialized()) {
        throw ShapeError("memory read: no initialized prototype columns");
    }
}

} // namespace

TensorPtr read_refine(const MemoryBank& bank, const TensorPtr& f_b, const TensorPtr& m_b) {
    check_read_args(bank, *f_b, *m_b);
    const int64_t hp = f_b->dim(1), wp = f_b->dim(2);
    auto flat = reshape(f_b, {bank.d, hp * wp});
    auto rel = matmul(bank_tensor_t(bank), flat);                 // {C, P}
    rel = scale(rel, 1.0 / std::sqrt(static_cast<double>(bank.d)));
    auto w = softmax_channels_masked(rel, bank.initialized);      // {C, P}
    auto gain = add_scalar(reshape(w, {bank.classes, hp, wp}), 1.0);
    return mul(gain, m_b);
}

TensorPtr read_refine_concat(const MemoryBank& bank, const TensorPtr& f_b,
                             const TensorPtr& m_b, const TensorPtr& head_w,
                             const TensorPtr& head_b) {
    check_read_args(bank, *f_b, *m_b);
    const int64_t hp = f_b->dim(1), wp = f_b->dim(2);
    auto flat = reshape(f_b, {bank.d, hp * wp});
    auto rel = matmul(bank_tensor_t(bank), flat);
    rel = scale(rel, 1.0 / std::sqrt(static_cast<double>(bank.d)));
    auto stacked = concat0(reshape(rel, {bank.classes, hp, wp}), m_b);
    return conv2d(stacked, head_w, head_b, 1, 0);
}

std::vector<double> bank_flags_as_doubles(const MemoryBank& bank) {
    std::vector<double> out(bank.initialized.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = bank.initialized[i] ? 1.0 : 0.0;
    return out;
}

void bank_flags_from_doubles(MemoryBank& bank, const std::vector<double>& flags) {
    if (flags.size() != bank.initialized.size()) {
        throw ShapeError("memory bank: flag count mismatch");
    }
    for (size_t i = 0; i < flags.size(); ++i) bank.initialized[i] = flags[i] != 0.0 ? 1 : 0;
}

} // namespace uhrseg
