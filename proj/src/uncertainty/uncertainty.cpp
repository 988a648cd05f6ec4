#include "clda/uncertainty/uncertainty.hpp"

#include <cmath>
#include <limits>

#include "clda/core/divergence.hpp"

namespace clda {

void Thresholds::validate() const {
    if (!(low > 0.0 && low < high && high < 1.0)) throw InvalidArgument("thresholds: need 0 < p_l < p_h < 1");
}

Tier tier_of(double confidence, const Thresholds& t) {
    if (confidence >= t.high) return Tier::Positive;
    if (confidence <= t.low) return Tier::Negative;
    return Tier::Uncertain;
}

GradedPseudoLabels grade(std::span<const Detection> detections, const Thresholds& t) {
    t.validate();
    GradedPseudoLabels g;
    for (const Detection& d : detections) {
        switch (tier_of(d.confidence, t)) {
            case Tier::Positive: g.positives.push_back(d); break;
            case Tier::Uncertain: g.uncertains.push_back(d); break;
            case Tier::Negative: g.negatives.push_back(d); break;
        }
    }
    return g;
}

GradedPseudoLabels transform_pseudo_labels(const GradedPseudoLabels& g, const Affine2D& t, double image_size,
                                           int* dropped) {
    auto map_list = [&](const std::vector<Detection>& in) {
        std::vector<Detection> out;
        for (const Detection& d : in) {
            Detection m = d;
            m.box = clip_box(t.apply(d.box), image_size, image_size);
            if (!m.box.valid()) {
                if (dropped) ++*dropped;
                continue;
            }
            if (d.box_distribution && !t.is_identity()) m.box_distribution = transform_distribution(*d.box_distribution, t);
            out.push_back(std::move(m));
        }
        return out;
    };
    return {map_list(g.positives), map_list(g.uncertains), map_list(g.negatives)};
}

const Detection& PseudoTargets::label_of_gt(int gt) const {
    const auto np = static_cast<int>(graded.positives.size());
    return gt < np ? graded.positives[static_cast<std::size_t>(gt)] : graded.uncertains[static_cast<std::size_t>(gt - np)];
}

int nearest_anchor(std::span<const AnchorPoint> anchors, int level, double x, double y) {
    int best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < anchors.size(); ++a) {
        if (anchors[a].level != level) continue;
        const double dx = anchors[a].cx - x, dy = anchors[a].cy - y;
        const double d = dx * dx + dy * dy;
        if (d < best_d) {
            best_d = d;
            best = static_cast<int>(a);
        }
    }
    return best;
}

PseudoTargets match_pseudo_labels(const DenseImagePrediction& student, std::span<const AnchorPoint> anchors,
                                  GradedPseudoLabels graded, const AssignOptions& opt) {
    PseudoTargets out;
    out.graded = std::move(graded);
    std::vector<LabeledBox> gts;
    for (const Detection& d : out.graded.positives) gts.push_back({d.box, d.category});
    for (const Detection& d : out.graded.uncertains) gts.push_back({d.box, d.category});
    out.assignment = assign(student, anchors, gts, opt);

    for (const Detection& d : out.graded.negatives) {
        if (!d.box_distribution || d.box_distribution->bins != student.bins) {
            ++out.skipped_negatives;
            out.negative_anchor.push_back(-1);
            continue;
        }
        const int level = d.source ? d.source->level : 0;
        out.negative_anchor.push_back(nearest_anchor(anchors, level, d.box.cx(), d.box.cy()));
    }
    return out;
}

double uncertain_cls_loss(std::span<const DenseImagePrediction> student, std::span<const PseudoTargets> targets,
                          GradSink sink) {
    if (student.empty()) return 0.0;
    double total = 0.0;
    const double per_image = 1.0 / static_cast<double>(student.size());
    for (std::size_t i = 0; i < student.size(); ++i) {
        const DenseImagePrediction& p = student[i];
        const PseudoTargets& pt = targets[i];
        const double norm = per_image / p.num_anchors;
        double sum = 0.0;
        for (int a : pt.assignment.positives()) {
            const int gt = pt.assignment.matched_gt[static_cast<std::size_t>(a)];
            const Detection& lab = pt.label_of_gt(gt);
            const double target = pt.tier_of_gt(gt) == Tier::Positive ? 1.0 : lab.confidence;
            const double z = p.cls(a)[lab.category];
            sum += bce_with_logits(z, target);
            if (sink) sink.at(i).cls(a)[lab.category] += sink.scale * norm * (sigmoid(z) - target);
        }
        total += sum * norm;
    }
    return total;
}

double negative_box_loss(std::span<const DenseImagePrediction> student, std::span<const PseudoTargets> targets,
                         GradSink sink) {
    int matched = 0;
    for (const PseudoTargets& pt : targets)
        for (int a : pt.negative_anchor) matched += a >= 0 ? 1 : 0;
    if (matched == 0) return 0.0;
    const double norm = 1.0 / matched;
    double total = 0.0;
    for (std::size_t i = 0; i < student.size(); ++i) {
        const DenseImagePrediction& p = student[i];
        const PseudoTargets& pt = targets[i];
        const auto bins = static_cast<std::size_t>(p.bins);
        std::vector<double> probs(bins), gp(bins);
        for (std::size_t n = 0; n < pt.negative_anchor.size(); ++n) {
            const int a = pt.negative_anchor[n];
            if (a < 0) continue;
            const BoxDistribution& teacher = *pt.graded.negatives[n].box_distribution;
            for (int s = 0; s < 4; ++s) {
                softmax({p.reg(a, s), bins}, probs);
                total += 0.25 * js_divergence_grad(probs, {teacher.side(s), bins}, sink ? std::span<double>(gp) : std::span<double>());
                if (!sink) continue;
                double dot = 0.0;
                for (std::size_t k = 0; k < bins; ++k) dot += probs[k] * gp[k];
                double* dst = sink.at(i).reg(a, s);
                for (std::size_t k = 0; k < bins; ++k)
                    dst[k] += sink.scale * norm * 0.25 * probs[k] * (gp[k] - dot);
            }
        }
    }
    return total * norm;
}

DistillBreakdown distill_loss(std::span<const DenseImagePrediction> student, std::span<const PseudoTargets> targets,
                              std::span<const AnchorPoint> anchors, const DistillWeights& w, GradSink sink) {
    if (student.size() != targets.size()) throw InvalidArgument("distill_loss: size mismatch");
    DistillBreakdown out;
    std::vector<Assignment> assigns;
    for (const PseudoTargets& pt : targets) {
        assigns.push_back(pt.assignment);
        out.matched_anchors += pt.assignment.num_positive();
        for (int a : pt.negative_anchor) out.matched_negatives += a >= 0 ? 1 : 0;
    }
    out.cls = uncertain_cls_loss(student, targets, sink.scaled(w.cls));
    out.dfl = dfl_loss(student, assigns, anchors, sink.scaled(w.dfl));
    out.iou = iou_loss(student, assigns, anchors, sink.scaled(w.iou));
    out.negative = negative_box_loss(student, targets, sink.scaled(w.negative));
    out.total = w.cls * out.cls + w.dfl * out.dfl + w.iou * out.iou + w.negative * out.negative;
    return out;
}

}  // namespace clda
