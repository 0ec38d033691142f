#pragma once

#include "uhrseg/scene.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace uhrseg {

/// Directory layout: scenes/NNNN.ppm + scenes/NNNN.pgm + scenes/NNNN.json
/// sidecar, plus manifest.json at the dataset root.
struct Manifest {
    int64_t classes = 0;
    uint64_t seed = 0;
    std::vector<double> fractions; // train/val/test
    std::vector<std::string> train, val, test; // scene stems relative to root
    std::string root;

    nlohmann::json to_json() const;
};

/// Writes one scene (image, labels, sidecar) under <dir>/scenes/<stem>.*
void write_scene(const std::string& dir, const std::string& stem, const Scene& scene);

/// Loads image + labels for a scene stem recorded in a manifest.
Scene load_scene(const Manifest& m, const std::string& stem);

/// Deterministic shuffled split over the scene stems found under dir/scenes.
/// n_train = floor(N*f_train), n_val = floor(N*f_val), test takes the rest.
Manifest build_manifest(const std::string& dir, const std::vector<double>& fractions,
                        uint64_t seed);

void save_manifest(const Manifest& m, const std::string& path);
Manifest load_manifest(const std::string& path);

} // namespace uhrseg
