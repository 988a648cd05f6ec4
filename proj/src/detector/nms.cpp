#include "clda/detector/nms.hpp"

#include <algorithm>

#include "clda/core/geometry.hpp"

namespace clda {

bool ranks_before(const Detection& a, const Detection& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    if (a.box.x1 != b.box.x1) return a.box.x1 < b.box.x1;
    if (a.box.y1 != b.box.y1) return a.box.y1 < b.box.y1;
    if (a.box.x2 != b.box.x2) return a.box.x2 < b.box.x2;
    if (a.box.y2 != b.box.y2) return a.box.y2 < b.box.y2;
    return a.category < b.category;
}

std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold) {
    std::sort(dets.begin(), dets.end(), ranks_before);
    std::vector<Detection> kept;
    for (Detection& d : dets) {
        bool suppressed = false;
        for (const Detection& k : kept) {
            if (k.category == d.category && iou_unchecked(k.box, d.box) > iou_threshold) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(std::move(d));
    }
    return kept;
}

std::vector<Detection> postprocess(const DenseImagePrediction& pred, std::span<const AnchorPoint> anchors,
                                   double image_size, const PostprocessOptions& opt) {
    struct Cand {
        double conf;
        int anchor;
        int category;
    };
    std::vector<Cand> cands;
    for (int a = 0; a < pred.num_anchors; ++a) {
        const double* z = pred.cls(a);
        int best = 0;
        for (int c = 1; c < pred.num_classes; ++c)
            if (z[c] > z[best]) best = c;
        const double conf = sigmoid(z[best]);
        if (conf >= opt.confidence_floor) cands.push_back({conf, a, best});
    }
    std::sort(cands.begin(), cands.end(), [](const Cand& l, const Cand& r) {
        return l.conf != r.conf ? l.conf > r.conf : l.anchor < r.anchor;
    });
    if (static_cast<int>(cands.size()) > opt.pre_nms_top_k) cands.resize(static_cast<std::size_t>(opt.pre_nms_top_k));

    std::vector<Detection> dets;
    dets.reserve(cands.size());
    for (const Cand& c : cands) {
        const AnchorPoint& ap = anchors[static_cast<std::size_t>(c.anchor)];
        BBox box = clip_box(decoded_box(pred, ap, c.anchor), image_size, image_size);
        if (!box.valid()) continue;
        Detection d;
        d.box = box;
        d.category = c.category;
        d.confidence = c.conf;
        d.source = AnchorRef{ap.level, c.anchor};
        if (opt.keep_distributions) d.box_distribution = side_distributions(pred, c.anchor);
        dets.push_back(std::move(d));
    }
    dets = nms(std::move(dets), opt.nms_iou);
    if (static_cast<int>(dets.size()) > opt.max_detections) dets.resize(static_cast<std::size_t>(opt.max_detections));
    return dets;
}

}  // namespace clda
