#include "uhrseg/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace uhrseg {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian; big-endian hosts unsupported");

namespace {
constexpr char kMagic[8] = {'U', 'H', 'R', 'S', 'C', 'K', 'P', 'T'};
constexpr int kFormatVersion = 1;
} // namespace

void Checkpoint::add(const std::string& name, const Shape& shape,
                     const std::vector<double>& data) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
        throw ShapeError("checkpoint: tensor " + name + " data/shape mismatch");
    }
    tensors.push_back({name, shape, data});
}

const CheckpointTensor* Checkpoint::find(const std::string& name) const {
    for (const auto& t : tensors) {
        if (t.name == name) return &t;
    }
    return nullptr;
}

void Checkpoint::save(const std::string& path) const {
    nlohmann::json header;
    header["format_version"] = kFormatVersion;
    header["dtype"] = "float64";
    header["meta"] = meta;
    nlohmann::json table = nlohmann::json::array();
    uint64_t offset = 0;
    for (const auto& t : tensors) {
        uint64_t nbytes = t.data.size() * sizeof(double);
        table.push_back({{"name", t.name},
                         {"shape", t.shape},
                         {"offset", offset},
                         {"nbytes", nbytes}});
        offset += nbytes;
    }
    header["tensors"] = table;
    const std::string hs = header.dump();

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("checkpoint: cannot open " + path + " for writing");
    f.write(kMagic, sizeof(kMagic));
    uint64_t hlen = hs.size();
    f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& t : tensors) {
        f.write(reinterpret_cast<const char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    }
    if (!f) throw IoError("checkpoint: write failed for " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("checkpoint: cannot open " + path);
    char magic[8];
    if (!f.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw IoError("checkpoint: bad magic in " + path + " at byte offset 0");
    }
    uint64_t hlen = 0;
    if (!f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen))) {
        throw IoError("checkpoint: truncated header length at byte offset 8");
    }
    std::string hs(hlen, '\0');
    if (!f.read(hs.data(), static_cast<std::streamsize>(hlen))) {
        throw IoError("checkpoint: truncated header, expected " + std::to_string(hlen) +
                      " bytes at byte offset 16");
    }
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hs);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("checkpoint: header parse error: ") + e.what());
    }
    if (header.value("format_version", -1) != kFormatVersion) {
        throw IoError("checkpoint: unsupported format_version");
    }
    if (header.value("dtype", "") != std::string("float64")) {
        throw IoError("checkpoint: unsupported dtype");
    }
    Checkpoint ck;
    ck.meta = header.value("meta", nlohmann::json::object());
    const uint64_t payload_start = 16 + hlen;
    for (const auto& entry : header.at("tensors")) {
        CheckpointTensor t;
        t.name = entry.at("name").get<std::string>();
        t.shape = entry.at("shape").get<Shape>();
        uint64_t offset = entry.at("offset").get<uint64_t>();
        uint64_t nbytes = entry.at("nbytes").get<uint64_t>();
        if (nbytes != static_cast<uint64_t>(shape_numel(t.shape)) * sizeof(double)) {
            throw IoError("checkpoint: tensor " + t.name + " nbytes/shape mismatch");
        }
        t.data.resize(nbytes / sizeof(double));
        f.seekg(static_cast<std::streamoff>(payload_start + offset));
        if (!f.read(reinterpret_cast<char*>(t.data.data()),
                    static_cast<std::streamsize>(nbytes))) {
            throw IoError("checkpoint: truncated payload for " + t.name +
                          " at byte offset " + std::to_string(payload_start + offset));
        }
        ck.tensors.push_back(std::move(t));
    }
    return ck;
}

} // namespace uhrseg
