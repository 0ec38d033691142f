#include "uhrseg/dataset.hpp"

#include "uhrseg/tensor.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;

namespace uhrseg {

namespace {
constexpr int kManifestVersion = 1;
}

nlohmann::json Manifest::to_json() const {
    return {{"version", kManifestVersion},
            {"rng_algorithm", rng_algorithm_name()},
            {"seed", seed},
            {"classes", classes},
            {"fractions", fractions},
            {"train", train},
            {"val", val},
            {"test", test}};
}

void write_scene(const std::string& dir, const std::string& stem, const Scene& scene) {
    fs::path scenes = fs::path(dir) / "scenes";
    std::error_code ec;
    fs::create_directories(scenes, ec);
    if (ec) throw IoError("write_scene: cannot create " + scenes.string());
    write_ppm((scenes / (stem + ".ppm")).string(), scene.image);
    write_pgm((scenes / (stem + ".pgm")).string(), scene.labels);
    nlohmann::json side = {{"seed", scene.seed},
                           {"classes", scene.classes},
                           {"class_names", scene.class_names},
                           {"rng_algorithm", rng_algorithm_name()}};
    std::ofstream f(scenes / (stem + ".json"));
    if (!f) throw IoError("write_scene: cannot open sidecar for " + stem);
    f << side.dump(2) << "\n";
}

Scene load_scene(const Manifest& m, const std::string& stem) {
    fs::path scenes = fs::path(m.root) / "scenes";
    Scene sc;
    sc.image = read_ppm((scenes / (stem + ".ppm")).string());
    sc.labels = read_pgm((scenes / (stem + ".pgm")).string());
    if (sc.image.h != sc.labels.h || sc.image.w != sc.labels.w) {
        throw IoError("load_scene: image/label size mismatch for " + stem);
    }
    std::ifstream f(scenes / (stem + ".json"));
    if (f) {
        nlohmann::json side;
        try {
            f >> side;
            sc.seed = side.value("seed", 0ull);
            sc.classes = side.value("classes", m.classes);
            sc.class_names = side.value("class_names", std::vector<std::string>{});
        } catch (const nlohmann::json::exception& e) {
            throw IoError("load_scene: bad sidecar for " + stem + ": " + e.what());
        }
    } else {
        sc.classes = m.classes;
    }
    return sc;
}

Manifest build_manifest(const std::string& dir, const std::vector<double>& fractions,
                        uint64_t seed) {
    if (fractions.size() != 3) {
        throw ConfigError("build_manifest: need train/val/test fractions");
    }
    double fsum = fractions[0] + fractions[1] + fractions[2];
    if (fractions[0] < 0 || fractions[1] < 0 || fractions[2] < 0 ||
        std::abs(fsum - 1.0) > 1e-9) {
        throw ConfigError("build_manifest: fractions must be non-negative and sum to 1");
    }
    fs::path scenes = fs::path(dir) / "scenes";
    std::vector<std::string> stems;
    if (fs::is_directory(scenes)) {
        for (const auto& entry : fs::directory_iterator(scenes)) {
            if (entry.path().extension() == ".ppm") {
                stems.push_back(entry.path().stem().string());
            }
        }
    }
    if (stems.empty()) {
        throw IoError("build_manifest: no scenes found under " + scenes.string());
    }
    std::sort(stems.begin(), stems.end());

    Manifest m;
    m.root = dir;
    m.seed = seed;
    m.fractions = fractions;

    // classes from the first sidecar, if present
    std::ifstream side(scenes / (stems[0] + ".json"));
    if (side) {
        try {
            nlohmann::json js;
            side >> js;
            m.classes = js.value("classes", 0);
        } catch (const nlohmann::json::exception&) {
            m.classes = 0;
        }
    }

    Rng rng(seed);
    rng.shuffle(stems);
    const int64_t n = static_cast<int64_t>(stems.size());
    const int64_t n_train = static_cast<int64_t>(std::floor(n * fractions[0]));
    const int64_t n_val = static_cast<int64_t>(std::floor(n * fractions[1]));
    for (int64_t i = 0; i < n; ++i) {
        if (i < n_train) m.train.push_back(stems[static_cast<size_t>(i)]);
        else if (i < n_train + n_val) m.val.push_back(stems[static_cast<size_t>(i)]);
        else m.test.push_back(stems[static_cast<size_t>(i)]);
    }
    return m;
}

void save_manifest(const Manifest& m, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("save_manifest: cannot open " + path);
    f << m.to_json().dump(2) << "\n";
}

Manifest load_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("load_manifest: cannot open " + path);
    nlohmann::json js;
    try {
        f >> js;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("load_manifest: parse error in " + path + ": " + e.what());
    }
    Manifest m;
    try {
        if (js.value("version", -1) != kManifestVersion) {
            throw IoError("load_manifest: unsupported version in " + path);
        }
        m.seed = js.value("seed", 0ull);
        m.classes = js.value("classes", 0);
        m.fractions = js.value("fractions", std::vector<double>{});
        m.train = js.at("train").get<std::vector<std::string>>();
        m.val = js.at("val").get<std::vector<std::string>>();
        m.test = js.at("test").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError("load_manifest: malformed manifest " + path + ": " + e.what());
    }
    m.root = fs::path(path).parent_path().string();
    if (m.root.empty()) m.root = ".";
    return m;
}

} // namespace uhrseg
