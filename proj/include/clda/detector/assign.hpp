#pragma once

#include <span>
#include <vector>

#include "clda/core/types.hpp"
#include "clda/detector/dense.hpp"

namespace clda {

struct AssignOptions {
    double kappa_score = 1.0;  // exponent on the class probability
    double kappa_iou = 6.0;    // exponent on the predicted-box IoU
    int top_k = 10;
};

/// Per-anchor training targets. Anchors with `matched_gt == -1` are negatives.
struct Assignment {
    std::vector<int> matched_gt;
    std::vector<int> target_class;
    std::vector<BBox> target_box;
    std::vector<double> align_score;  // s^k1 * iou^k2 of the winning pair
    std::vector<double> pred_iou;     // IoU of the predicted box with its target

    explicit Assignment(std::size_t anchors = 0)
        : matched_gt(anchors, -1), target_class(anchors, -1), target_box(anchors), align_score(anchors, 0.0),
          pred_iou(anchors, 0.0) {}

    std::size_t size() const { return matched_gt.size(); }
    int num_positive() const;
    std::vector<int> positives() const;
};

/// Alignment metric of one (anchor, gt) pair.
double alignment_metric(double class_prob, double box_iou, const AssignOptions& opt);

/// Simplified task-aligned assignment: among anchors whose centers lie
/// strictly inside a GT, the top-k by alignment metric become positives
/// (ties to the lower flat index); an anchor claimed by several GTs keeps the
/// highest-metric pair.
Assignment assign(const DenseImagePrediction& pred, std::span<const AnchorPoint> anchors,
                  std::span<const LabeledBox> gts, const AssignOptions& opt = {});

/// Same rule over precomputed class probabilities (A x C) and predicted boxes.
Assignment assign_from(std::span<const double> class_probs, int num_classes, std::span<const BBox> pred_boxes,
                       std::span<const AnchorPoint> anchors, std::span<const LabeledBox> gts,
                       const AssignOptions& opt = {});

bool center_inside(const AnchorPoint& a, const BBox& b);

}  // namespace clda
