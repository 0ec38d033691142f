#include "uhrseg/dataset.hpp"
#include "uhrseg/scene.hpp"
#include "uhrseg/tensor.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>

using namespace uhrseg;
namespace fs = std::filesystem;

TEST_SUITE("scene") {

TEST_CASE("same seed twice gives a bit-identical scene") {
    Scene a = generate_scene(77, 128, 128, 8);
    Scene b = generate_scene(77, 128, 128, 8);
    CHECK(a.image.rgb == b.image.rgb);
    CHECK(a.labels.v == b.labels.v);
    Scene c = generate_scene(78, 128, 128, 8);
    CHECK(a.image.rgb != c.image.rgb);
}

TEST_CASE("labels stay in [0,C)") {
    for (int64_t classes : {2, 5, 8}) {
        Scene sc = generate_scene(5, 64, 64, classes);
        for (uint8_t v : sc.labels.v) CHECK(v < classes);
    }
}

TEST_CASE("preconditions: class count and divisibility") {
    CHECK_THROWS_AS(generate_scene(1, 64, 64, 1), ConfigError);
    CHECK_THROWS_AS(generate_scene(1, 64, 64, 9), ConfigError); // more than generators
    CHECK_THROWS_AS(generate_scene(1, 63, 64, 4), ConfigError);
}

TEST_CASE("100 seeds: every class occupies at least 0.5% of pixels on average") {
    const int64_t side = 256; // quarter-area proxy of the default benchmark scenes
    std::vector<double> share(8, 0.0);
    const int seeds = 100;
    for (int s = 0; s < seeds; ++s) {
        Scene sc = generate_scene(1000 + static_cast<uint64_t>(s), side, side, 8);
        std::vector<int64_t> count(8, 0);
        for (uint8_t v : sc.labels.v) ++count[v];
        for (int c = 0; c < 8; ++c) {
            share[static_cast<size_t>(c)] +=
                static_cast<double>(count[static_cast<size_t>(c)]) /
                static_cast<double>(side * side);
        }
    }
    for (int c = 0; c < 8; ++c) {
        INFO("class ", c, " share ", share[static_cast<size_t>(c)] / seeds);
        CHECK(share[static_cast<size_t>(c)] / seeds >= 0.005);
    }
}

TEST_CASE("manifest: deterministic split with floor rule") {
    fs::path dir = fs::temp_directory_path() / "uhrseg_scene_test";
    fs::remove_all(dir);
    for (int i = 0; i < 20; ++i) {
        Scene sc = generate_scene(static_cast<uint64_t>(i), 32, 32, 4);
        char stem[8];
        std::snprintf(stem, sizeof(stem), "%04d", i);
        write_scene(dir.string(), stem, sc);
    }
    Manifest m = build_manifest(dir.string(), {0.7, 0.15, 0.15}, 9);
    CHECK(m.train.size() == 14);
    CHECK(m.val.size() == 3);
    CHECK(m.test.size() == 3);

    Manifest m2 = build_manifest(dir.string(), {0.7, 0.15, 0.15}, 9);
    CHECK(m.train == m2.train);
    CHECK(m.val == m2.val);
    CHECK(m.test == m2.test);

    Manifest all = build_manifest(dir.string(), {1.0, 0.0, 0.0}, 9);
    CHECK(all.train.size() == 20);
    CHECK(all.val.empty());
    CHECK(all.test.empty());

    // round trip through disk
    save_manifest(m, (dir / "manifest.json").string());
    Manifest back = load_manifest((dir / "manifest.json").string());
    CHECK(back.train == m.train);
    CHECK(back.classes == 4);

    // scene loads back bit-exactly
    Scene sc = load_scene(back, back.train[0]);
    CHECK(sc.image.h == 32);
    CHECK(sc.classes == 4);

    fs::remove_all(dir);
}

TEST_CASE("manifest: empty directory is an error") {
    fs::path dir = fs::temp_directory_path() / "uhrseg_scene_empty";
    fs::remove_all(dir);
    fs::create_directories(dir / "scenes");
    CHECK_THROWS_AS(build_manifest(dir.string(), {0.7, 0.15, 0.15}, 1), IoError);
    fs::remove_all(dir);
}

} // TEST_SUITE
