#pragma once

#include "uhrseg/netpbm.hpp"
#include "uhrseg/rng.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace uhrseg {

/// A synthetic aerial scene with dense ground truth. Image values are stored
/// quantized (the PPM byte payload); consumers map them to [0,1].
struct Scene {
    ImageU8 image;
    LabelMap labels;
    uint64_t seed = 0;
    int64_t classes = 0;
    std::vector<std::string> class_names;
};

/// Names of the available class generators, index = class id. Class 0 is the
/// background; requesting more classes than this list is an error.
const std::vector<std::string>& scene_class_names();

/// Deterministic per seed (splitmix64 streams, no libm transcendentals, so
/// scenes reproduce bit-exactly across platforms). Classes differ in scale
/// and shape: large smooth field/meadow blobs, lakes, thin curvy rivers,
/// straight roads, small buildings, large depots; some class pairs share
/// colors on purpose and are separable only by shape or scale.
Scene generate_scene(uint64_t seed, int64_t h, int64_t w, int64_t classes);

} // namespace uhrseg
