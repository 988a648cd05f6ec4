#pragma once

#include "clda/core/types.hpp"

namespace clda {

/// Intersection over union of two valid boxes. Throws InvalidArgument on a
/// degenerate or non-finite box.
double iou(const BBox& a, const BBox& b);

/// IoU without validation; zero-area inputs yield 0. Used on raw network
/// predictions, which can collapse during training.
double iou_unchecked(const BBox& a, const BBox& b);

/// Intersection of `b` with [0,w] x [0,h]; may be degenerate.
BBox clip_box(const BBox& b, double w, double h);

}  // namespace clda

namespace clda {

/// Axis-aligned scale-translate map x' = sx*x + tx, y' = sy*y + ty. A negative
/// scale encodes a mirror.
struct Affine2D {
    double sx = 1.0;
    double sy = 1.0;
    double tx = 0.0;
    double ty = 0.0;

    double map_x(double x) const { return sx * x + tx; }
    double map_y(double y) const { return sy * y + ty; }
    Affine2D inverse() const;
    /// (this after first): x -> this(first(x)).
    Affine2D after(const Affine2D& first) const;
    /// Image of a box: the corner-wise map, re-ordered so x1 < x2, y1 < y2.
    BBox apply(const BBox& b) const;
    bool is_identity() const { return sx == 1.0 && sy == 1.0 && tx == 0.0 && ty == 0.0; }
};

/// Maps per-side offset distributions through `t`: mirrored axes swap their
/// sides and scaled distances spread each bin's mass linearly onto the bins
/// bracketing k*|scale|, clamped to the last bin.
BoxDistribution transform_distribution(const BoxDistribution& d, const Affine2D& t);

}  // namespace clda
