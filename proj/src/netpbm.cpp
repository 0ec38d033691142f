#include "uhrseg/netpbm.hpp"

#include "uhrseg/tensor.hpp"

#include <fstream>
#include <sstream>

namespace uhrseg {

namespace {

// Reads the three header fields (width, height, maxval) after the magic,
// skipping single whitespace separators. NetPBM comments are not emitted by
// this writer and are rejected on read to keep the format bit-exact.
struct HeaderParse {
    int64_t w = 0, h = 0, maxval = 0;
    int64_t payload_offset = 0;
};

HeaderParse parse_header(const std::string& bytes, const char* magic,
                         const std::string& path) {
    if (bytes.size() < 2 || bytes[0] != magic[0] || bytes[1] != magic[1]) {
        throw IoError(path + ": bad magic at byte offset 0, expected " +
                      std::string(magic));
    }
    size_t pos = 2;
    auto skip_ws = [&]() {
        if (pos >= bytes.size() || !(bytes[pos] == ' ' || bytes[pos] == '\n' ||
                                     bytes[pos] == '\t' || bytes[pos] == '\r')) {
            throw IoError(path + ": expected whitespace at byte offset " +
                          std::to_string(pos));
        }
        while (pos < bytes.size() && (bytes[pos] == ' ' || bytes[pos] == '\n' ||
                                      bytes[pos] == '\t' || bytes[pos] == '\r')) {
            ++pos;
        }
    };
    auto read_int = [&]() {
        if (pos >= bytes.size() || bytes[pos] < '0' || bytes[pos] > '9') {
            throw IoError(path + ": expected integer at byte offset " +
                          std::to_string(pos));
        }
        int64_t v = 0;
        while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') {
            v = v * 10 + (bytes[pos] - '0');
            ++pos;
        }
        return v;
    };
    HeaderParse hp;
    skip_ws();
    hp.w = read_int();
    skip_ws();
    hp.h = read_int();
    skip_ws();
    hp.maxval = read_int();
    if (pos >= bytes.size() || bytes[pos] != '\n') {
        throw IoError(path + ": expected newline after maxval at byte offset " +
                      std::to_string(pos));
    }
    hp.payload_offset = static_cast<int64_t>(pos + 1);
    if (hp.w <= 0 || hp.h <= 0) {
        throw IoError(path + ": non-positive dimensions in header");
    }
    if (hp.maxval != 255) {
        throw IoError(path + ": unsupported maxval " + std::to_string(hp.maxval));
    }
    return hp;
}

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError(path + ": cannot open");
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void check_payload(const std::string& bytes, const HeaderParse& hp, int64_t expect,
                   const std::string& path) {
    int64_t actual = static_cast<int64_t>(bytes.size()) - hp.payload_offset;
    if (actual != expect) {
        throw IoError(path + ": truncated payload, expected " + std::to_string(expect) +
                      " bytes, got " + std::to_string(actual) + " at byte offset " +
                      std::to_string(hp.payload_offset));
    }
}

} // namespace

void write_ppm(const std::string& path, const ImageU8& img) {
    if (static_cast<int64_t>(img.rgb.size()) != 3 * img.h * img.w) {
        throw ShapeError("write_ppm: buffer size mismatch");
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError(path + ": cannot open for writing");
    f << "P6\n" << img.w << " " << img.h << "\n255\n";
    f.write(reinterpret_cast<const char*>(img.rgb.data()),
            static_cast<std::streamsize>(img.rgb.size()));
    if (!f) throw IoError(path + ": write failed");
}

ImageU8 read_ppm(const std::string& path) {
    std::string bytes = read_file(path);
    HeaderParse hp = parse_header(bytes, "P6", path);
    check_payload(bytes, hp, 3 * hp.w * hp.h, path);
    ImageU8 img;
    img.h = hp.h;
    img.w = hp.w;
    img.rgb.assign(bytes.begin() + hp.payload_offset, bytes.end());
    return img;
}

void write_pgm(const std::string& path, const LabelMap& labels) {
    if (static_cast<int64_t>(labels.v.size()) != labels.h * labels.w) {
        throw ShapeError("write_pgm: buffer size mismatch");
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError(path + ": cannot open for writing");
    f << "P5\n" << labels.w << " " << labels.h << "\n255\n";
    f.write(reinterpret_cast<const char*>(labels.v.data()),
            static_cast<std::streamsize>(labels.v.size()));
    if (!f) throw IoError(path + ": write failed");
}

LabelMap read_pgm(const std::string& path) {
    std::string bytes = read_file(path);
    HeaderParse hp = parse_header(bytes, "P5", path);
    check_payload(bytes, hp, hp.w * hp.h, path);
    LabelMap lm;
    lm.h = hp.h;
    lm.w = hp.w;
    lm.v.assign(bytes.begin() + hp.payload_offset, bytes.end());
    return lm;
}

} // namespace uhrseg
