#pragma once

#include <span>
#include <vector>

#include "clda/core/geometry.hpp"
#include "clda/core/types.hpp"
#include "clda/detector/assign.hpp"
#include "clda/detector/dense.hpp"
#include "clda/losses/sup_losses.hpp"

namespace clda {

struct Thresholds {
    double low = 0.3;   // p_l
    double high = 0.8;  // p_h

    void validate() const;
};

enum class Tier { Positive, Uncertain, Negative };

struct GradedPseudoLabels {
    std::vector<Detection> positives;
    std::vector<Detection> uncertains;
    std::vector<Detection> negatives;

    std::size_t size() const { return positives.size() + uncertains.size() + negatives.size(); }
    bool empty() const { return size() == 0; }
};

/// Confidence >= high is positive, <= low is negative, anything strictly
/// between is uncertain.
Tier tier_of(double confidence, const Thresholds& t);
GradedPseudoLabels grade(std::span<const Detection> detections, const Thresholds& t);

/// Maps teacher pseudo-labels into the student's augmented frame, clipping to
/// the image. Boxes that clip to nothing are dropped and counted.
GradedPseudoLabels transform_pseudo_labels(const GradedPseudoLabels& g, const Affine2D& t, double image_size,
                                           int* dropped = nullptr);

/// Pseudo-labels of one target image matched onto the student's anchors.
struct PseudoTargets {
    GradedPseudoLabels graded;
    /// Positive and uncertain labels assigned with the detector's assigner;
    /// gt index i < positives.size() refers to positives[i], the rest to
    /// uncertains[i - positives.size()].
    Assignment assignment;
    /// For each negative, its nearest anchor at the teacher's source level, or
    /// -1 when skipped.
    std::vector<int> negative_anchor;
    int skipped_negatives = 0;

    Tier tier_of_gt(int gt) const {
        return gt < static_cast<int>(graded.positives.size()) ? Tier::Positive : Tier::Uncertain;
    }
    const Detection& label_of_gt(int gt) const;
};

PseudoTargets match_pseudo_labels(const DenseImagePrediction& student, std::span<const AnchorPoint> anchors,
                                  GradedPseudoLabels graded, const AssignOptions& opt);

/// Nearest anchor center to `(x, y)` among anchors of `level`.
int nearest_anchor(std::span<const AnchorPoint> anchors, int level, double x, double y);

/// Per image, the sum over matched anchors of BCE(student, teacher confidence)
/// for uncertain labels and BCE(student, 1) for positive labels on the
/// pseudo-label's class, divided by the image's anchor count; averaged over
/// images. Negatives contribute nothing.
double uncertain_cls_loss(std::span<const DenseImagePrediction> student, std::span<const PseudoTargets> targets,
                          GradSink sink = {});

/// Mean over matched negatives of the side-averaged JS divergence between the
/// student's side distributions and the teacher's.
double negative_box_loss(std::span<const DenseImagePrediction> student, std::span<const PseudoTargets> targets,
                         GradSink sink = {});

struct DistillWeights {
    double cls = 1.0;
    double dfl = 1.5;
    double iou = 7.5;
    double negative = 1.0;
};

struct DistillBreakdown {
    double cls = 0.0;
    double dfl = 0.0;
    double iou = 0.0;
    double negative = 0.0;
    double total = 0.0;
    int matched_anchors = 0;
    int matched_negatives = 0;
};

/// Weighted sum of the tiered classification term, the box losses over
/// positive and uncertain labels, and the negative-box JS term.
DistillBreakdown distill_loss(std::span<const DenseImagePrediction> student, std::span<const PseudoTargets> targets,
                              std::span<const AnchorPoint> anchors, const DistillWeights& w, GradSink sink = {});

}  // namespace clda
