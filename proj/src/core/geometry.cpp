#include "clda/core/geometry.hpp"

#include <algorithm>
#include <cmath>

namespace clda {

double iou_unchecked(const BBox& a, const BBox& b) {
    const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    if (iw <= 0.0 || ih <= 0.0) return 0.0;
    const double inter = iw * ih;
    const double uni = std::max(a.area(), 0.0) + std::max(b.area(), 0.0) - inter;
    if (uni <= 0.0) return 0.0;
    return std::clamp(inter / uni, 0.0, 1.0);
}

double iou(const BBox& a, const BBox& b) {
    if (!a.valid() || !b.valid()) throw InvalidArgument("iou: degenerate or non-finite box");
    return iou_unchecked(a, b);
}

BBox clip_box(const BBox& b, double w, double h) {
    return {std::clamp(b.x1, 0.0, w), std::clamp(b.y1, 0.0, h), std::clamp(b.x2, 0.0, w),
            std::clamp(b.y2, 0.0, h)};
}

}  // namespace clda

namespace clda {

Affine2D Affine2D::inverse() const {
    if (sx == 0.0 || sy == 0.0) throw InvalidArgument("Affine2D: singular transform");
    return {1.0 / sx, 1.0 / sy, -tx / sx, -ty / sy};
}

Affine2D Affine2D::after(const Affine2D& first) const {
    return {sx * first.sx, sy * first.sy, sx * first.tx + tx, sy * first.ty + ty};
}

BBox Affine2D::apply(const BBox& b) const {
    const double xa = map_x(b.x1), xb = map_x(b.x2);
    const double ya = map_y(b.y1), yb = map_y(b.y2);
    return {std::min(xa, xb), std::min(ya, yb), std::max(xa, xb), std::max(ya, yb)};
}

BoxDistribution transform_distribution(const BoxDistribution& d, const Affine2D& t) {
    BoxDistribution out{d.bins, std::vector<double>(d.probs.size(), 0.0)};
    // sides: 0 left, 1 top, 2 right, 3 bottom
    const int from_side[4] = {t.sx < 0 ? 2 : 0, t.sy < 0 ? 3 : 1, t.sx < 0 ? 0 : 2, t.sy < 0 ? 1 : 3};
    const double scale[4] = {std::abs(t.sx), std::abs(t.sy), std::abs(t.sx), std::abs(t.sy)};
    const int last = d.bins - 1;
    for (int s = 0; s < 4; ++s) {
        const double* src = d.side(from_side[s]);
        double* dst = out.side(s);
        for (int k = 0; k < d.bins; ++k) {
            const double pos = std::min(k * scale[s], static_cast<double>(last));
            const int lo = std::min(static_cast<int>(std::floor(pos)), last);
            const double frac = pos - lo;
            dst[lo] += src[k] * (1.0 - frac);
            if (frac > 0.0) dst[lo + 1] += src[k] * frac;
        }
    }
    return out;
}

}  // namespace clda
