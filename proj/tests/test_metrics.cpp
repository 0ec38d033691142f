#include "uhrseg/metrics.hpp"
#include "uhrseg/rng.hpp"
#include "uhrseg/tensor.hpp"

#include <doctest.h>

using namespace uhrseg;

namespace {

LabelMap lm_from(std::vector<uint8_t> v, int64_t h, int64_t w) {
    LabelMap lm;
    lm.h = h;
    lm.w = w;
    lm.v = std::move(v);
    return lm;
}

} // namespace

TEST_SUITE("metrics") {

TEST_CASE("pred == gt gives miou 1, complement gives 0") {
    auto gt = lm_from({0, 1, 0, 1, 1, 0, 1, 0}, 2, 4);
    CHECK(miou(gt, gt, 2).miou == doctest::Approx(1.0));
    auto inv = gt;
    for (auto& b : inv.v) b = static_cast<uint8_t>(1 - b);
    CHECK(miou(inv, gt, 2).miou == doctest::Approx(0.0));
}

TEST_CASE("hand-counted 2x2 confusion: IoU 1/2 and 2/3, miou 7/12") {
    auto gt = lm_from({0, 0, 1, 1}, 2, 2);
    auto pred = lm_from({0, 1, 1, 1}, 2, 2);
    IoUReport r = miou(pred, gt, 2);
    CHECK(r.per_class_iou[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(r.per_class_iou[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    CHECK(r.miou == doctest::Approx(7.0 / 12.0).epsilon(1e-15));
}

TEST_CASE("ignore pixels are excluded everywhere; absent classes excluded from mean") {
    auto gt = lm_from({0, 255, 1, 1}, 2, 2);
    auto pred = lm_from({0, 3, 1, 0}, 2, 2);
    IoUReport r = miou(pred, gt, 4);
    CHECK(r.defined[0]);
    CHECK(r.defined[1]);
    CHECK_FALSE(r.defined[2]);
    CHECK_FALSE(r.defined[3]); // predicted only on an ignored pixel
    CHECK(r.miou == doctest::Approx((0.5 + 0.5) / 2.0));
}

TEST_CASE("shape mismatch is an error") {
    auto a = lm_from({0, 0}, 1, 2);
    auto b = lm_from({0}, 1, 1);
    CHECK_THROWS_AS(miou(a, b, 2), ShapeError);
}

TEST_CASE("oracle: random maps match a brute-force per-pixel confusion count") {
    Rng rng(17);
    for (int trial = 0; trial < 20; ++trial) {
        const int64_t h = 3 + rng.next_below(6), w = 3 + rng.next_below(6);
        const int64_t c = 2 + rng.next_below(4);
        LabelMap gt, pred;
        gt.h = pred.h = h;
        gt.w = pred.w = w;
        gt.v.resize(static_cast<size_t>(h * w));
        pred.v.resize(static_cast<size_t>(h * w));
        for (auto& x : gt.v) {
            x = rng.next_below(10) == 0 ? 255 : static_cast<uint8_t>(rng.next_below(c));
        }
        for (auto& x : pred.v) x = static_cast<uint8_t>(rng.next_below(c));

        // brute force
        std::vector<int64_t> tp(static_cast<size_t>(c), 0), fp(static_cast<size_t>(c), 0),
            fn(static_cast<size_t>(c), 0);
        for (size_t i = 0; i < gt.v.size(); ++i) {
            if (gt.v[i] == 255) continue;
            for (int64_t k = 0; k < c; ++k) {
                bool in_gt = gt.v[i] == k, in_pred = pred.v[i] == k;
                if (in_gt && in_pred) ++tp[static_cast<size_t>(k)];
                if (!in_gt && in_pred) ++fp[static_cast<size_t>(k)];
                if (in_gt && !in_pred) ++fn[static_cast<size_t>(k)];
            }
        }
        double total = 0;
        int64_t ndef = 0;
        for (int64_t k = 0; k < c; ++k) {
            int64_t uni = tp[static_cast<size_t>(k)] + fp[static_cast<size_t>(k)] +
                          fn[static_cast<size_t>(k)];
            if (uni == 0) continue;
            total += static_cast<double>(tp[static_cast<size_t>(k)]) / uni;
            ++ndef;
        }
        double expect = ndef ? total / ndef : 0.0;
        CHECK(miou(pred, gt, c).miou == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("confusion row sums equal per-class gt pixel counts") {
    Rng rng(23);
    LabelMap gt, pred;
    gt.h = pred.h = 8;
    gt.w = pred.w = 8;
    gt.v.resize(64);
    pred.v.resize(64);
    for (auto& x : gt.v) x = static_cast<uint8_t>(rng.next_below(3));
    for (auto& x : pred.v) x = static_cast<uint8_t>(rng.next_below(3));
    IoUReport r = miou(pred, gt, 3);
    for (int64_t g = 0; g < 3; ++g) {
        int64_t row = 0, count = 0;
        for (int64_t p = 0; p < 3; ++p) row += r.confusion[static_cast<size_t>(g * 3 + p)];
        for (auto x : gt.v) count += x == g;
        CHECK(row == count);
    }
}

} // TEST_SUITE
