#include "clda/detector/assign.hpp"

#include <algorithm>
#include <cmath>

#include "clda/core/geometry.hpp"

namespace clda {

int Assignment::num_positive() const {
    return static_cast<int>(std::count_if(matched_gt.begin(), matched_gt.end(), [](int g) { return g >= 0; }));
}

std::vector<int> Assignment::positives() const {
    std::vector<int> out;
    for (std::size_t a = 0; a < matched_gt.size(); ++a)
        if (matched_gt[a] >= 0) out.push_back(static_cast<int>(a));
    return out;
}

bool center_inside(const AnchorPoint& a, const BBox& b) {
    return a.cx > b.x1 && a.cx < b.x2 && a.cy > b.y1 && a.cy < b.y2;
}

double alignment_metric(double class_prob, double box_iou, const AssignOptions& opt) {
    return std::pow(class_prob, opt.kappa_score) * std::pow(box_iou, opt.kappa_iou);
}

Assignment assign_from(std::span<const double> class_probs, int num_classes, std::span<const BBox> pred_boxes,
                       std::span<const AnchorPoint> anchors, std::span<const LabeledBox> gts,
                       const AssignOptions& opt) {
    Assignment out(anchors.size());
    if (gts.empty()) return out;

    struct Candidate {
        double metric;
        double iou;
        int anchor;
    };
    for (std::size_t g = 0; g < gts.size(); ++g) {
        const LabeledBox& gt = gts[g];
        if (!gt.box.valid()) throw InvalidArgument("assign: invalid ground-truth box");
        if (gt.category < 0 || gt.category >= num_classes) throw InvalidArgument("assign: category out of range");
        std::vector<Candidate> cands;
        for (std::size_t a = 0; a < anchors.size(); ++a) {
            if (!center_inside(anchors[a], gt.box)) continue;
            const double s = class_probs[a * static_cast<std::size_t>(num_classes) + static_cast<std::size_t>(gt.category)];
            const double ov = iou_unchecked(pred_boxes[a], gt.box);
            cands.push_back({alignment_metric(s, ov, opt), ov, static_cast<int>(a)});
        }
        std::sort(cands.begin(), cands.end(), [](const Candidate& l, const Candidate& r) {
            if (l.metric != r.metric) return l.metric > r.metric;
            return l.anchor < r.anchor;
        });
        const std::size_t take = std::min(cands.size(), static_cast<std::size_t>(std::max(opt.top_k, 0)));
        for (std::size_t i = 0; i < take; ++i) {
            const Candidate& c = cands[i];
            const auto a = static_cast<std::size_t>(c.anchor);
            // Earlier GTs win exact ties.
            if (out.matched_gt[a] >= 0 && out.align_score[a] >= c.metric) continue;
            out.matched_gt[a] = static_cast<int>(g);
            out.target_class[a] = gt.category;
            out.target_box[a] = gt.box;
            out.align_score[a] = c.metric;
            out.pred_iou[a] = c.iou;
        }
    }
    return out;
}

Assignment assign(const DenseImagePrediction& pred, std::span<const AnchorPoint> anchors,
                  std::span<const LabeledBox> gts, const AssignOptions& opt) {
    if (static_cast<std::size_t>(pred.num_anchors) != anchors.size())
        throw InvalidArgument("assign: prediction grid does not match anchors");
    std::vector<double> probs(pred.cls_logits.size());
    for (std::size_t i = 0; i < probs.size(); ++i) probs[i] = sigmoid(pred.cls_logits[i]);
    const std::vector<BBox> boxes = decoded_boxes(pred, anchors);
    return assign_from(probs, pred.num_classes, boxes, anchors, gts, opt);
}

}  // namespace clda
