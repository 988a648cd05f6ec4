#pragma once

#include <array>
#include <span>
#include <vector>

#include "clda/core/types.hpp"
#include "clda/detector/assign.hpp"
#include "clda/detector/dense.hpp"

namespace clda {

struct LossWeights {
    double cls = 0.5;
    double dfl = 1.5;
    double iou = 7.5;

    void validate() const;
};

enum class ClsTarget { IouAware, Hard };

struct SupLossOptions {
    LossWeights weights;
    ClsTarget cls_target = ClsTarget::IouAware;
};

/// Destination for analytic gradients: `grads[i]` receives scale * dL/dlogits
/// of image i. A default-constructed sink disables gradient computation.
struct GradSink {
    std::vector<DenseGrad>* grads = nullptr;
    double scale = 1.0;

    explicit operator bool() const { return grads != nullptr; }
    DenseGrad& at(std::size_t i) const { return (*grads)[i]; }
    GradSink scaled(double f) const { return {grads, scale * f}; }
};

/// IoU and its partial derivatives w.r.t. (x1, y1, x2, y2) of `pred`.
std::pair<double, std::array<double, 4>> iou_with_grad(const BBox& pred, const BBox& target);

/// Mean over anchors of the per-class binary cross-entropy. Positives target
/// their IoU-aligned score (or 1.0 with ClsTarget::Hard), negatives target 0.
double cls_loss(std::span<const DenseImagePrediction> preds, std::span<const Assignment> assigns,
                ClsTarget target = ClsTarget::IouAware, GradSink sink = {});

/// Distribution focal loss over positive anchors, mean over positive sides.
/// `clamped` (optional) counts side targets that fell outside [0, reg_max].
double dfl_loss(std::span<const DenseImagePrediction> preds, std::span<const Assignment> assigns,
                std::span<const AnchorPoint> anchors, GradSink sink = {}, int* clamped = nullptr);

/// Mean over positive anchors of 1 - IoU(decoded box, target box).
double iou_loss(std::span<const DenseImagePrediction> preds, std::span<const Assignment> assigns,
                std::span<const AnchorPoint> anchors, GradSink sink = {});

/// Box-level form: mean of 1 - IoU over paired boxes.
double iou_loss(std::span<const BBox> pred, std::span<const BBox> target);

/// Single-side DFL cross-entropy for a continuous target in bin units.
double dfl_side_loss(std::span<const double> logits, double target, std::span<double> grad = {});

struct SupLossBreakdown {
    double cls = 0.0;
    double dfl = 0.0;
    double iou = 0.0;
    double total = 0.0;
    int positives = 0;
    int clamped = 0;
};

/// w_cls * cls + w_dfl * dfl + w_iou * iou over precomputed assignments.
SupLossBreakdown supervised_loss(std::span<const DenseImagePrediction> preds, std::span<const Assignment> assigns,
                                 std::span<const AnchorPoint> anchors, const SupLossOptions& opt, GradSink sink = {});

/// Assigns each source sample's labels and evaluates the supervised loss.
/// Rejects target-domain samples.
SupLossBreakdown supervised_loss(std::span<const Sample> batch, std::span<const DenseImagePrediction> preds,
                                 std::span<const AnchorPoint> anchors, const SupLossOptions& opt,
                                 const AssignOptions& assign_opt, GradSink sink = {},
                                 std::vector<Assignment>* assigns_out = nullptr);

}  // namespace clda
