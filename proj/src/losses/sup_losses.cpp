#include "clda/losses/sup_losses.hpp"

#include <algorithm>
#include <cmath>

#include "clda/core/geometry.hpp"

namespace clda {
namespace {

void check_finite(const DenseImagePrediction& p) {
    for (double v : p.cls_logits)
        if (!std::isfinite(v)) throw InvalidArgument("loss: non-finite class logit");
    for (double v : p.reg_logits)
        if (!std::isfinite(v)) throw InvalidArgument("loss: non-finite box logit");
}

int total_positives(std::span<const Assignment> assigns) {
    int n = 0;
    for (const Assignment& a : assigns) n += a.num_positive();
    return n;
}

}  // namespace

void LossWeights::validate() const {
    for (double w : {cls, dfl, iou})
        if (!std::isfinite(w) || w < 0.0) throw InvalidArgument("loss weights must be finite and >= 0");
}

std::pair<double, std::array<double, 4>> iou_with_grad(const BBox& p, const BBox& g) {
    std::array<double, 4> grad{};
    const double ix1 = std::max(p.x1, g.x1), iy1 = std::max(p.y1, g.y1);
    const double ix2 = std::min(p.x2, g.x2), iy2 = std::min(p.y2, g.y2);
    const double iw = ix2 - ix1, ih = iy2 - iy1;
    const double pw = p.x2 - p.x1, ph = p.y2 - p.y1;
    if (iw <= 0.0 || ih <= 0.0 || pw <= 0.0 || ph <= 0.0) return {0.0, grad};
    const double inter = iw * ih;
    const double uni = pw * ph + g.area() - inter;
    const double val = inter / uni;
    // dI/dcoord
    const std::array<double, 4> di{p.x1 > g.x1 ? -ih : 0.0, p.y1 > g.y1 ? -iw : 0.0, p.x2 < g.x2 ? ih : 0.0,
                                   p.y2 < g.y2 ? iw : 0.0};
    const std::array<double, 4> da{-ph, -pw, ph, pw};
    for (int k = 0; k < 4; ++k) {
        const double du = da[static_cast<std::size_t>(k)] - di[static_cast<std::size_t>(k)];
        grad[static_cast<std::size_t>(k)] = (di[static_cast<std::size_t>(k)] * uni - inter * du) / (uni * uni);
    }
    return {val, grad};
}

double cls_loss(std::span<const DenseImagePrediction> preds, std::span<const Assignment> assigns, ClsTarget target,
                GradSink sink) {
    if (preds.empty()) return 0.0;
    double total = 0.0;
    std::size_t anchors = 0;
    for (const auto& p : preds) anchors += static_cast<std::size_t>(p.num_anchors);
    const double norm = 1.0 / static_cast<double>(anchors);
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const DenseImagePrediction& p = preds[i];
        const Assignment& as = assigns[i];
        check_finite(p);
        for (int a = 0; a < p.num_anchors; ++a) {
            const int tc = as.matched_gt[static_cast<std::size_t>(a)] >= 0 ? as.target_class[static_cast<std::size_t>(a)] : -1;
            const double tv = target == ClsTarget::Hard ? 1.0 : as.pred_iou[static_cast<std::size_t>(a)];
            for (int c = 0; c < p.num_classes; ++c) {
                const double z = p.cls(a)[c];
                const double t = (c == tc) ? tv : 0.0;
                total += bce_with_logits(z, t);
                if (sink) sink.at(i).cls(a)[c] += sink.scale * norm * (sigmoid(z) - t);
            }
        }
    }
    return total * norm;
}

double dfl_side_loss(std::span<const double> logits, double target, std::span<double> grad) {
    const int bins = static_cast<int>(logits.size());
    const int left = std::clamp(static_cast<int>(std::floor(target)), 0, bins - 2);
    const int right = left + 1;
    const double wl = static_cast<double>(right) - target;
    const double wr = target - static_cast<double>(left);
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double sum = 0.0;
    for (double v : logits) sum += std::exp(v - mx);
    const double lse = mx + std::log(sum);
    const double loss = wl * (lse - logits[static_cast<std::size_t>(left)]) + wr * (lse - logits[static_cast<std::size_t>(right)]);
    if (!grad.empty()) {
        for (int k = 0; k < bins; ++k) {
            double g = std::exp(logits[static_cast<std::size_t>(k)] - lse) * (wl + wr);
            if (k == left) g -= wl;
            if (k == right) g -= wr;
            grad[static_cast<std::size_t>(k)] = g;
        }
    }
    return loss;
}

double dfl_loss(std::span<const DenseImagePrediction> preds, std::span<const Assignment> assigns,
                std::span<const AnchorPoint> anchors, GradSink sink, int* clamped) {
    const int npos = total_positives(assigns);
    if (npos == 0) return 0.0;
    const double norm = 1.0 / (4.0 * npos);
    double total = 0.0;
    std::vector<double> g;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const DenseImagePrediction& p = preds[i];
        const Assignment& as = assigns[i];
        const double rmax = p.bins - 1;
        g.assign(static_cast<std::size_t>(p.bins), 0.0);
        for (int a : as.positives()) {
            const AnchorPoint& ap = anchors[static_cast<std::size_t>(a)];
            const BBox& t = as.target_box[static_cast<std::size_t>(a)];
            const std::array<double, 4> dist{(ap.cx - t.x1) / ap.stride, (ap.cy - t.y1) / ap.stride,
                                             (t.x2 - ap.cx) / ap.stride, (t.y2 - ap.cy) / ap.stride};
            for (int s = 0; s < 4; ++s) {
                double d = dist[static_cast<std::size_t>(s)];
                if (d < 0.0 || d > rmax) {
                    if (clamped) ++*clamped;
                    d = std::clamp(d, 0.0, rmax);
                }
                total += dfl_side_loss({p.reg(a, s), static_cast<std::size_t>(p.bins)}, d,
                                       sink ? std::span<double>(g) : std::span<double>());
                if (sink) {
                    double* dst = sink.at(i).reg(a, s);
                    for (int k = 0; k < p.bins; ++k) dst[k] += sink.scale * norm * g[static_cast<std::size_t>(k)];
                }
            }
        }
    }
    return total * norm;
}

double iou_loss(std::span<const DenseImagePrediction> preds, std::span<const Assignment> assigns,
                std::span<const AnchorPoint> anchors, GradSink sink) {
    const int npos = total_positives(assigns);
    if (npos == 0) return 0.0;
    const double norm = 1.0 / npos;
    double total = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const DenseImagePrediction& p = preds[i];
        const Assignment& as = assigns[i];
        std::vector<double> probs(static_cast<std::size_t>(p.bins));
        for (int a : as.positives()) {
            const AnchorPoint& ap = anchors[static_cast<std::size_t>(a)];
            const BBox box = decoded_box(p, ap, a);
            const auto [val, gbox] = iou_with_grad(box, as.target_box[static_cast<std::size_t>(a)]);
            total += 1.0 - val;
            if (!sink) continue;
            // box = (cx - l, cy - t, cx + r, cy + b); each side is stride * E[bin].
            const std::array<double, 4> dside{gbox[0] * -1.0, gbox[1] * -1.0, gbox[2], gbox[3]};
            for (int s = 0; s < 4; ++s) {
                softmax({p.reg(a, s), probs.size()}, probs);
                double e = 0.0;
                for (int k = 0; k < p.bins; ++k) e += k * probs[static_cast<std::size_t>(k)];
                const double up = -sink.scale * norm * dside[static_cast<std::size_t>(s)] * ap.stride;
                double* dst = sink.at(i).reg(a, s);
                for (int k = 0; k < p.bins; ++k) dst[k] += up * probs[static_cast<std::size_t>(k)] * (k - e);
            }
        }
    }
    return total * norm;
}

double iou_loss(std::span<const BBox> pred, std::span<const BBox> target) {
    if (pred.size() != target.size()) throw InvalidArgument("iou_loss: size mismatch");
    if (pred.empty()) return 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) total += 1.0 - iou_unchecked(pred[i], target[i]);
    return total / static_cast<double>(pred.size());
}

SupLossBreakdown supervised_loss(std::span<const DenseImagePrediction> preds, std::span<const Assignment> assigns,
                                 std::span<const AnchorPoint> anchors, const SupLossOptions& opt, GradSink sink) {
    opt.weights.validate();
    if (preds.size() != assigns.size()) throw InvalidArgument("supervised_loss: predictions/assignments mismatch");
    SupLossBreakdown out;
    out.positives = total_positives(assigns);
    out.cls = cls_loss(preds, assigns, opt.cls_target, sink.scaled(opt.weights.cls));
    out.dfl = dfl_loss(preds, assigns, anchors, sink.scaled(opt.weights.dfl), &out.clamped);
    out.iou = iou_loss(preds, assigns, anchors, sink.scaled(opt.weights.iou));
    out.total = opt.weights.cls * out.cls + opt.weights.dfl * out.dfl + opt.weights.iou * out.iou;
    return out;
}

SupLossBreakdown supervised_loss(std::span<const Sample> batch, std::span<const DenseImagePrediction> preds,
                                 std::span<const AnchorPoint> anchors, const SupLossOptions& opt,
                                 const AssignOptions& assign_opt, GradSink sink,
                                 std::vector<Assignment>* assigns_out) {
    if (batch.size() != preds.size()) throw InvalidArgument("supervised_loss: batch/prediction size mismatch");
    std::vector<Assignment> assigns;
    assigns.reserve(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const Sample& s = batch[i];
        if (s.domain != DomainTag::Source || !s.labels)
            throw InvalidArgument("supervised_loss: target-domain sample in a supervised batch");
        assigns.push_back(assign(preds[i], anchors, *s.labels, assign_opt));
    }
    SupLossBreakdown out = supervised_loss(preds, assigns, anchors, opt, sink);
    if (assigns_out) *assigns_out = std::move(assigns);
    return out;
}

}  // namespace clda
