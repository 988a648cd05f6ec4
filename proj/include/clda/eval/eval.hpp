#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "clda/core/types.hpp"

namespace clda {

/// Greedy matching of one image/class: predictions (sorted by descending
/// confidence) each claim the highest-IoU unmatched GT with IoU >= thr.
std::vector<bool> match(std::span<const Detection> predictions, std::span<const LabeledBox> gts,
                        double iou_thr = 0.5);

/// All-point interpolated AP: area under the precision envelope. Requires
/// num_gt >= 1.
double average_precision(std::span<const bool> tp_flags, std::span<const double> confidences, int num_gt);

struct PrPoint {
    double recall = 0.0;
    double precision = 0.0;
};

struct ClassResult {
    std::optional<double> ap;  // absent when the class has no GT
    int tp = 0;
    int fp = 0;
    int fn = 0;
    int num_gt = 0;
    std::vector<PrPoint> pr_curve;
};

struct EvalResult {
    std::vector<ClassResult> classes;
    double map50 = 0.0;
    int images = 0;
};

/// Per-class AP and mAP@thr over a set of images.
EvalResult evaluate(const std::vector<std::vector<Detection>>& predictions,
                    const std::vector<std::vector<LabeledBox>>& gts, int num_classes, double iou_thr = 0.5);

/// Human-readable table followed by a `key=value` block.
std::string format_report(const EvalResult& r, std::span<const std::string> class_names, const std::string& title);

}  // namespace clda
