#pragma once

#include <array>
#include <span>
#include <vector>

#include "clda/core/types.hpp"
#include "clda/detector/config.hpp"

namespace clda {

/// Center and stride of one prediction cell; anchors are flattened level by
/// level, row-major within a level.
struct AnchorPoint {
    double cx = 0.0;
    double cy = 0.0;
    double stride = 1.0;
    int level = 0;
};

std::vector<AnchorPoint> make_anchors(const DetectorConfig& cfg);

/// Dense outputs of one image in double precision: class logits (A x C) and
/// per-side bin logits (A x 4 x bins).
struct DenseImagePrediction {
    int num_anchors = 0;
    int num_classes = 0;
    int bins = 0;
    std::vector<double> cls_logits;
    std::vector<double> reg_logits;

    DenseImagePrediction() = default;
    DenseImagePrediction(int a, int c, int b)
        : num_anchors(a), num_classes(c), bins(b), cls_logits(static_cast<std::size_t>(a) * c),
          reg_logits(static_cast<std::size_t>(a) * 4 * b) {}

    double* cls(int a) { return cls_logits.data() + static_cast<std::size_t>(a) * num_classes; }
    const double* cls(int a) const { return cls_logits.data() + static_cast<std::size_t>(a) * num_classes; }
    double* reg(int a, int side) { return reg_logits.data() + (static_cast<std::size_t>(a) * 4 + side) * bins; }
    const double* reg(int a, int side) const {
        return reg_logits.data() + (static_cast<std::size_t>(a) * 4 + side) * bins;
    }
};

/// Gradient buffer with the same layout as DenseImagePrediction.
using DenseGrad = DenseImagePrediction;

inline DenseGrad zeros_like(const DenseImagePrediction& p) { return {p.num_anchors, p.num_classes, p.bins}; }

double sigmoid(double z);
/// Numerically stable binary cross-entropy on a logit.
double bce_with_logits(double logit, double target);
/// Binary cross-entropy on a probability in (0,1).
double bce(double prob, double target);

void softmax(std::span<const double> logits, std::span<double> out);
/// Expected bin index times stride. Rejects vectors not summing to 1 +- 1e-6.
double decode_dfl(std::span<const double> side_distribution, double stride);

/// Softmax of the 4 side rows of anchor `a`.
BoxDistribution side_distributions(const DenseImagePrediction& p, int a);
/// Decoded ltrb distances (pixels) for anchor `a`.
std::array<double, 4> decoded_distances(const DenseImagePrediction& p, const AnchorPoint& anchor, int a);
BBox decoded_box(const DenseImagePrediction& p, const AnchorPoint& anchor, int a);
std::vector<BBox> decoded_boxes(const DenseImagePrediction& p, std::span<const AnchorPoint> anchors);

}  // namespace clda
