#pragma once

#include "uhrseg/tensor.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace uhrseg {

/// Container file: 8-byte magic, u64 little-endian header length, JSON header
/// (format version, tensor table with shapes/offsets/sizes, free-form meta),
/// then raw little-endian float64 blobs. Round-trips bit-exactly.
struct CheckpointTensor {
    std::string name;
    Shape shape;
    std::vector<double> data;
};

struct Checkpoint {
    nlohmann::json meta; // model config, ablation flags, bank state
    std::vector<CheckpointTensor> tensors;

    void add(const std::string& name, const Shape& shape, const std::vector<double>& data);
    const CheckpointTensor* find(const std::string& name) const;

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);
};

} // namespace uhrseg
