#pragma once

#include "uhrseg/netpbm.hpp"

#include <json.hpp>

#include <cstdint>
#include <vector>

namespace uhrseg {

struct IoUReport {
    std::vector<double> per_class_iou; // NaN for classes with zero union
    std::vector<bool> defined;         // whether the class has any union
    double miou = 0.0;                 // mean over defined classes
    std::vector<int64_t> confusion;    // C x C, row = gt, col = pred

    nlohmann::json to_json() const;
};

/// IoU_c = TP/(TP+FP+FN); classes with zero union are excluded from the mean;
/// pixels labeled `ignore` in gt are excluded everywhere.
IoUReport miou(const LabelMap& pred, const LabelMap& gt, int64_t classes,
               int32_t ignore = 255);

/// Builds the report from an already-accumulated C x C confusion matrix
/// (row = gt, col = pred), e.g. aggregated over a scene set.
IoUReport report_from_confusion(std::vector<int64_t> confusion, int64_t classes);

} // namespace uhrseg
