#pragma once

#include <span>
#include <vector>

#include "clda/core/types.hpp"
#include "clda/detector/dense.hpp"

namespace clda {

/// Total order used wherever detections are ranked: confidence descending,
/// then box corners, then category. Makes every ranking input-order free.
bool ranks_before(const Detection& a, const Detection& b);

/// Greedy per-class suppression in descending confidence. Output is sorted by
/// `ranks_before`.
std::vector<Detection> nms(std::vector<Detection> detections, double iou_threshold);

struct PostprocessOptions {
    double confidence_floor = 0.05;
    double nms_iou = 0.65;
    int pre_nms_top_k = 1000;
    int max_detections = 100;
    bool keep_distributions = true;
};

/// Decodes one image's dense outputs into final detections: best class per
/// anchor, confidence floor, clipping to the image, NMS. Each detection carries
/// the side distributions and anchor it came from.
std::vector<Detection> postprocess(const DenseImagePrediction& pred, std::span<const AnchorPoint> anchors,
                                   double image_size, const PostprocessOptions& opt);

}  // namespace clda
