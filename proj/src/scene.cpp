#include "uhrseg/scene.hpp"

#include "uhrseg/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace uhrseg {

namespace {

struct Rgb {
    double r, g, b;
};

// Per-class base colors. Field/meadow, lake/river, and building/depot pairs
// collide on purpose; shape and scale are what separates them.
constexpr Rgb kColors[8] = {
    {0.72, 0.66, 0.55}, // 0 terrain
    {0.35, 0.58, 0.25}, // 1 field
    {0.40, 0.61, 0.28}, // 2 meadow
    {0.18, 0.35, 0.60}, // 3 lake
    {0.22, 0.38, 0.58}, // 4 river
    {0.33, 0.33, 0.35}, // 5 road
    {0.56, 0.30, 0.26}, // 6 building
    {0.52, 0.31, 0.28}, // 7 depot
};

struct Canvas {
    int64_t h, w;
    std::vector<uint8_t> label;
    std::vector<float> shade;

    Canvas(int64_t hh, int64_t ww)
        : h(hh), w(ww), label(static_cast<size_t>(h * w), 0),
          shade(static_cast<size_t>(h * w), 1.0f) {}

    void put(int64_t y, int64_t x, uint8_t cls, float sh) {
        if (y < 0 || y >= h || x < 0 || x >= w) return;
        size_t i = static_cast<size_t>(y * w + x);
        label[i] = cls;
        shade[i] = sh;
    }
};

void fill_disk(Canvas& cv, double cy, double cx, double r, uint8_t cls, float shade) {
    int64_t y0 = static_cast<int64_t>(std::floor(cy - r));
    int64_t y1 = static_cast<int64_t>(std::ceil(cy + r));
    int64_t x0 = static_cast<int64_t>(std::floor(cx - r));
    int64_t x1 = static_cast<int64_t>(std::ceil(cx + r));
    double r2 = r * r;
    for (int64_t y = y0; y <= y1; ++y) {
        for (int64_t x = x0; x <= x1; ++x) {
            double dy = static_cast<double>(y) + 0.5 - cy;
            double dx = static_cast<double>(x) + 0.5 - cx;
            if (dy * dy + dx * dx <= r2) cv.put(y, x, cls, shade);
        }
    }
}

void fill_rect(Canvas& cv, int64_t y0, int64_t x0, int64_t rh, int64_t rw, uint8_t cls,
               float shade) {
    for (int64_t y = y0; y < y0 + rh; ++y) {
        for (int64_t x = x0; x < x0 + rw; ++x) cv.put(y, x, cls, shade);
    }
}

// Irregular blob as a union of overlapping disks around a center.
void fill_blob(Canvas& cv, Rng& rng, double cy, double cx, double radius, uint8_t cls) {
    float shade = static_cast<float>(rng.uniform(0.88, 1.12));
    int64_t lobes = rng.uniform_int(3, 6);
    fill_disk(cv, cy, cx, radius, cls, shade);
    for (int64_t i = 0; i < lobes; ++i) {
        double oy = rng.uniform(-0.7, 0.7) * radius;
        double ox = rng.uniform(-0.7, 0.7) * radius;
        double rr = rng.uniform(0.4, 0.8) * radius;
        fill_disk(cv, cy + oy, cx + ox, rr, cls, shade);
    }
}

// Thin curvy polyline: a smoothed random walk stamped with disks.
void fill_river(Canvas& cv, Rng& rng, uint8_t cls) {
    float shade = static_cast<float>(rng.uniform(0.9, 1.1));
    double width = rng.uniform(2.5, 5.5);
    bool vertical = rng.next_below(2) == 0;
    double y, x, dy, dx;
    if (vertical) {
        y = 0.0;
        x = rng.uniform(0.1, 0.9) * static_cast<double>(cv.w);
        dy = 1.0;
        dx = rng.uniform(-0.4, 0.4);
    } else {
        y = rng.uniform(0.1, 0.9) * static_cast<double>(cv.h);
        x = 0.0;
        dy = rng.uniform(-0.4, 0.4);
        dx = 1.0;
    }
    int64_t max_steps = 2 * (cv.h + cv.w);
    for (int64_t s = 0; s < max_steps; ++s) {
        fill_disk(cv, y, x, width * 0.5, cls, shade);
        // bend the heading a little, renormalize (sqrt only, stays exact)
        dy += rng.uniform(-0.22, 0.22);
        dx += rng.uniform(-0.22, 0.22);
        double n = std::sqrt(dy * dy + dx * dx);
        if (n < 1e-9) {
            dy = vertical ? 1.0 : 0.0;
            dx = vertical ? 0.0 : 1.0;
            n = 1.0;
        }
        dy /= n;
        dx /= n;
        // keep the overall crossing direction
        if (vertical && dy < 0.35) dy = 0.35;
        if (!vertical && dx < 0.35) dx = 0.35;
        y += dy * 1.5;
        x += dx * 1.5;
        if (y < -width || y > static_cast<double>(cv.h) + width || x < -width ||
            x > static_cast<double>(cv.w) + width) {
            break;
        }
    }
}

// Straight thick segment across the image.
void fill_road(Canvas& cv, Rng& rng, uint8_t cls) {
    float shade = static_cast<float>(rng.uniform(0.92, 1.08));
    double width = rng.uniform(2.5, 5.0);
    bool vertical = rng.next_below(2) == 0;
    double y0, x0, y1, x1;
    if (vertical) {
        y0 = 0.0;
        y1 = static_cast<double>(cv.h);
        x0 = rng.uniform(0.05, 0.95) * static_cast<double>(cv.w);
        x1 = std::clamp(x0 + rng.uniform(-0.3, 0.3) * static_cast<double>(cv.w), 0.0,
                        static_cast<double>(cv.w));
    } else {
        x0 = 0.0;
        x1 = static_cast<double>(cv.w);
        y0 = rng.uniform(0.05, 0.95) * static_cast<double>(cv.h);
        y1 = std::clamp(y0 + rng.uniform(-0.3, 0.3) * static_cast<double>(cv.h), 0.0,
                        static_cast<double>(cv.h));
    }
    double len = std::sqrt((y1 - y0) * (y1 - y0) + (x1 - x0) * (x1 - x0));
    int64_t steps = static_cast<int64_t>(len) + 1;
    for (int64_t s = 0; s <= steps; ++s) {
        double t = static_cast<double>(s) / static_cast<double>(steps);
        fill_disk(cv, y0 + t * (y1 - y0), x0 + t * (x1 - x0), width * 0.5, cls, shade);
    }
}

int64_t scaled_count(Rng& rng, int64_t lo, int64_t hi, double area_ratio) {
    double c = static_cast<double>(rng.uniform_int(lo, hi)) * area_ratio;
    return std::max<int64_t>(1, static_cast<int64_t>(c + 0.5));
}

} // namespace

const std::vector<std::string>& scene_class_names() {
    static const std::vector<std::string> names = {"terrain", "field", "meadow", "lake",
                                                   "river", "road", "building", "depot"};
    return names;
}

Scene generate_scene(uint64_t seed, int64_t h, int64_t w, int64_t classes) {
    if (classes < 2) throw ConfigError("generate_scene: need at least 2 classes");
    if (classes > static_cast<int64_t>(scene_class_names().size())) {
        throw ConfigError("generate_scene: only " +
                          std::to_string(scene_class_names().size()) +
                          " class generators available, requested " +
                          std::to_string(classes));
    }
    if (h % 4 != 0 || w % 4 != 0 || h <= 0 || w <= 0) {
        throw ConfigError("generate_scene: H and W must be positive multiples of 4");
    }

    Rng rng(seed);
    Canvas cv(h, w);
    const double area_ratio =
        static_cast<double>(h * w) / (512.0 * 512.0);

    auto want = [&](int64_t cls) { return cls < classes; };

    if (want(1)) {
        int64_t n = scaled_count(rng, 2, 4, area_ratio);
        for (int64_t i = 0; i < n; ++i) {
            fill_blob(cv, rng, rng.uniform(0, 1) * h, rng.uniform(0, 1) * w,
                      rng.uniform(0.16, 0.30) * std::min(h, w), 1);
        }
    }
    if (want(2)) {
        int64_t n = scaled_count(rng, 7, 12, area_ratio);
        for (int64_t i = 0; i < n; ++i) {
            fill_blob(cv, rng, rng.uniform(0, 1) * h, rng.uniform(0, 1) * w,
                      rng.uniform(0.03, 0.07) * std::min(h, w), 2);
        }
    }
    if (want(3)) {
        int64_t n = scaled_count(rng, 2, 4, area_ratio);
        for (int64_t i = 0; i < n; ++i) {
            fill_blob(cv, rng, rng.uniform(0, 1) * h, rng.uniform(0, 1) * w,
                      rng.uniform(0.06, 0.12) * std::min(h, w), 3);
        }
    }
    if (want(4)) {
        int64_t n = scaled_count(rng, 1, 3, area_ratio);
        for (int64_t i = 0; i < n; ++i) fill_river(cv, rng, 4);
    }
    if (want(5)) {
        int64_t n = scaled_count(rng, 2, 4, area_ratio);
        for (int64_t i = 0; i < n; ++i) fill_road(cv, rng, 5);
    }
    if (want(7)) {
        int64_t n = scaled_count(rng, 4, 8, area_ratio);
        for (int64_t i = 0; i < n; ++i) {
            int64_t rh = rng.uniform_int(26, 46);
            int64_t rw = rng.uniform_int(26, 46);
            fill_rect(cv, rng.next_below(std::max<int64_t>(1, h - rh)),
                      rng.next_below(std::max<int64_t>(1, w - rw)), rh, rw, 7,
                      static_cast<float>(rng.uniform(0.88, 1.12)));
        }
    }
    if (want(6)) {
        int64_t n = scaled_count(rng, 22, 40, area_ratio);
        for (int64_t i = 0; i < n; ++i) {
            int64_t rh = rng.uniform_int(7, 18);
            int64_t rw = rng.uniform_int(7, 18);
            fill_rect(cv, rng.next_below(std::max<int64_t>(1, h - rh)),
                      rng.next_below(std::max<int64_t>(1, w - rw)), rh, rw, 6,
                      static_cast<float>(rng.uniform(0.85, 1.15)));
        }
    }

    // Image synthesis: class color * instance shade * linear illumination
    // gradient + per-pixel uniform noise, quantized to bytes.
    Scene sc;
    sc.seed = seed;
    sc.classes = classes;
    sc.class_names.assign(scene_class_names().begin(),
                          scene_class_names().begin() + classes);
    sc.labels.h = h;
    sc.labels.w = w;
    sc.labels.v = cv.label;
    sc.image.h = h;
    sc.image.w = w;
    sc.image.rgb.resize(static_cast<size_t>(3 * h * w));

    const double gy = rng.uniform(-0.14, 0.14);
    const double gx = rng.uniform(-0.14, 0.14);
    const double noise_amp = 0.05;
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            size_t i = static_cast<size_t>(y * w + x);
            const Rgb& c = kColors[cv.label[i]];
            double illum = 1.0 + gy * (static_cast<double>(y) / h - 0.5) +
                           gx * (static_cast<double>(x) / w - 0.5);
            double f = illum * static_cast<double>(cv.shade[i]);
            double rgb[3] = {c.r * f, c.g * f, c.b * f};
            for (int ch = 0; ch < 3; ++ch) {
                double v = rgb[ch] + rng.uniform(-noise_amp, noise_amp);
                v = std::clamp(v, 0.0, 1.0);
                sc.image.rgb[i * 3 + static_cast<size_t>(ch)] =
                    static_cast<uint8_t>(std::lround(v * 255.0));
            }
        }
    }
    return sc;
}

} // namespace uhrseg
