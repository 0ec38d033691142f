#include "uhrseg/checkpoint.hpp"
#include "uhrseg/rng.hpp"

#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

using namespace uhrseg;

namespace {

std::string tmp_path(const char* name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

} // namespace

TEST_SUITE("checkpoint") {

TEST_CASE("bit-exact round trip including meta") {
    Rng rng(99);
    Checkpoint ck;
    ck.meta = {{"note", "roundtrip"}, {"k", 3}};
    std::vector<double> a(64), b(7);
    for (double& x : a) x = rng.uniform(-1e9, 1e9);
    for (double& x : b) x = rng.uniform(-1e-9, 1e-9);
    ck.add("layer.w", {8, 8}, a);
    ck.add("layer.b", {7}, b);

    std::string path = tmp_path("uhrseg_ckpt_test.uhrs");
    ck.save(path);
    Checkpoint loaded = Checkpoint::load(path);
    CHECK(loaded.meta.at("note") == "roundtrip");
    REQUIRE(loaded.tensors.size() == 2);
    CHECK(loaded.tensors[0].name == "layer.w");
    CHECK(loaded.tensors[0].shape == Shape{8, 8});
    CHECK(loaded.tensors[0].data == a); // bit-exact
    CHECK(loaded.tensors[1].data == b);

    // byte-identical re-serialization
    std::string path2 = tmp_path("uhrseg_ckpt_test2.uhrs");
    loaded.save(path2);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), {});
    std::string s2((std::istreambuf_iterator<char>(f2)), {});
    CHECK(s1 == s2);
    std::remove(path.c_str());
    std::remove(path2.c_str());
}

TEST_CASE("bad magic and truncation are structured errors") {
    std::string path = tmp_path("uhrseg_ckpt_bad.uhrs");
    {
        std::ofstream f(path, std::ios::binary);
        f << "NOTACKPT";
    }
    CHECK_THROWS_AS(Checkpoint::load(path), IoError);

    Checkpoint ck;
    ck.add("t", {4}, {1, 2, 3, 4});
    ck.save(path);
    // chop the payload
    auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size - 8);
    try {
        Checkpoint::load(path);
        FAIL("expected IoError");
    } catch (const IoError& e) {
        CHECK(std::string(e.what()).find("truncated") != std::string::npos);
    }
    std::remove(path.c_str());
}

TEST_CASE("missing file") {
    CHECK_THROWS_AS(Checkpoint::load("/nonexistent/nowhere.uhrs"), IoError);
}

} // TEST_SUITE
