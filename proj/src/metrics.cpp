#include "uhrseg/metrics.hpp"

#include "uhrseg/tensor.hpp"

#include <cmath>
#include <limits>

namespace uhrseg {

nlohmann::json IoUReport::to_json() const {
    nlohmann::json per = nlohmann::json::array();
    for (size_t c = 0; c < per_class_iou.size(); ++c) {
        if (defined[c]) {
            per.push_back(per_class_iou[c]);
        } else {
            per.push_back(nullptr);
        }
    }
    const int64_t c = static_cast<int64_t>(per_class_iou.size());
    nlohmann::json conf = nlohmann::json::array();
    for (int64_t i = 0; i < c; ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (int64_t j = 0; j < c; ++j) row.push_back(confusion[static_cast<size_t>(i * c + j)]);
        conf.push_back(row);
    }
    return {{"per_class_iou", per}, {"miou", miou}, {"confusion", conf}};
}

IoUReport report_from_confusion(std::vector<int64_t> confusion, int64_t classes) {
    if (static_cast<int64_t>(confusion.size()) != classes * classes) {
        throw ShapeError("report_from_confusion: matrix size mismatch");
    }
    IoUReport r;
    r.confusion = std::move(confusion);
    r.per_class_iou.assign(static_cast<size_t>(classes), std::numeric_limits<double>::quiet_NaN());
    r.defined.assign(static_cast<size_t>(classes), false);
    double total = 0.0;
    int64_t ndef = 0;
    for (int64_t c = 0; c < classes; ++c) {
        int64_t tp = r.confusion[static_cast<size_t>(c * classes + c)];
        int64_t fp = 0, fn = 0;
        for (int64_t k = 0; k < classes; ++k) {
            if (k == c) continue;
            fp += r.confusion[static_cast<size_t>(k * classes + c)];
            fn += r.confusion[static_cast<size_t>(c * classes + k)];
        }
        int64_t uni = tp + fp + fn;
        if (uni == 0) continue;
        double iou = static_cast<double>(tp) / static_cast<double>(uni);
        r.per_class_iou[static_cast<size_t>(c)] = iou;
        r.defined[static_cast<size_t>(c)] = true;
        total += iou;
        ++ndef;
    }
    r.miou = ndef > 0 ? total / static_cast<double>(ndef) : 0.0;
    return r;
}

IoUReport miou(const LabelMap& pred, const LabelMap& gt, int64_t classes, int32_t ignore) {
    if (pred.h != gt.h || pred.w != gt.w) {
        throw ShapeError("miou: prediction " + std::to_string(pred.w) + "x" +
                         std::to_string(pred.h) + " vs ground truth " +
                         std::to_string(gt.w) + "x" + std::to_string(gt.h));
    }
    std::vector<int64_t> confusion(static_cast<size_t>(classes * classes), 0);
    for (size_t i = 0; i < gt.v.size(); ++i) {
        int32_t g = gt.v[i];
        if (g == ignore) continue;
        int32_t p = pred.v[i];
        if (g >= classes || p >= classes) {
            throw ShapeError("miou: label out of range for " + std::to_string(classes) +
                             " classes");
        }
        ++confusion[static_cast<size_t>(g * classes + p)];
    }
    return report_from_confusion(std::move(confusion), classes);
}

} // namespace uhrseg
