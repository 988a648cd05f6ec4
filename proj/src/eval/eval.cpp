#include "clda/eval/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <memory>
#include <numeric>
#include <sstream>

#include "clda/core/geometry.hpp"

namespace clda {

std::vector<bool> match(std::span<const Detection> predictions, std::span<const LabeledBox> gts, double iou_thr) {
    std::vector<bool> flags(predictions.size(), false);
    std::vector<bool> taken(gts.size(), false);
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        int best = -1;
        double best_iou = iou_thr;
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (taken[g]) continue;
            double v = iou_unchecked(predictions[i].box, gts[g].box);
            if (v >= best_iou && (best < 0 || v > best_iou)) {
                best = static_cast<int>(g);
                best_iou = v;
            }
        }
        if (best >= 0) {
            taken[best] = true;
            flags[i] = true;
        }
    }
    return flags;
}

namespace {

std::vector<PrPoint> pr_curve(std::span<const bool> tp_flags, std::span<const double> confidences, int num_gt) {
    if (tp_flags.size() != confidences.size()) throw InvalidArgument("average_precision: flag/confidence size mismatch");
    if (num_gt < 1) throw InvalidArgument("average_precision: num_gt must be >= 1");
    std::vector<std::size_t> order(tp_flags.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return confidences[a] > confidences[b]; });
    std::vector<PrPoint> pts;
    pts.reserve(order.size());
    int tp = 0, fp = 0;
    for (std::size_t k : order) {
        (tp_flags[k] ? tp : fp) += 1;
        pts.push_back({static_cast<double>(tp) / num_gt, static_cast<double>(tp) / (tp + fp)});
    }
    return pts;
}

}  // namespace

double average_precision(std::span<const bool> tp_flags, std::span<const double> confidences, int num_gt) {
    std::vector<PrPoint> pts = pr_curve(tp_flags, confidences, num_gt);
    // precision envelope, right to left
    for (std::size_t i = pts.size(); i-- > 1;) pts[i - 1].precision = std::max(pts[i - 1].precision, pts[i].precision);
    double ap = 0.0, prev_recall = 0.0;
    for (const PrPoint& p : pts) {
        ap += (p.recall - prev_recall) * p.precision;
        prev_recall = p.recall;
    }
    return ap;
}

EvalResult evaluate(const std::vector<std::vector<Detection>>& predictions,
                    const std::vector<std::vector<LabeledBox>>& gts, int num_classes, double iou_thr) {
    if (predictions.size() != gts.size()) throw InvalidArgument("evaluate: prediction/GT image count mismatch");
    if (num_classes < 1) throw InvalidArgument("evaluate: num_classes < 1");
    EvalResult r;
    r.images = static_cast<int>(gts.size());
    r.classes.resize(num_classes);
    std::vector<std::vector<bool>> flags(num_classes);
    std::vector<std::vector<double>> confs(num_classes);

    for (std::size_t img = 0; img < gts.size(); ++img) {
        for (int c = 0; c < num_classes; ++c) {
            std::vector<Detection> p;
            std::vector<LabeledBox> g;
            for (const Detection& d : predictions[img])
                if (d.category == c) p.push_back(d);
            for (const LabeledBox& b : gts[img])
                if (b.category == c) g.push_back(b);
            std::stable_sort(p.begin(), p.end(),
                             [](const Detection& a, const Detection& b) { return a.confidence > b.confidence; });
            std::vector<bool> f = match(p, g, iou_thr);
            int tp = static_cast<int>(std::count(f.begin(), f.end(), true));
            ClassResult& cr = r.classes[c];
            cr.tp += tp;
            cr.fp += static_cast<int>(p.size()) - tp;
            cr.fn += static_cast<int>(g.size()) - tp;
            cr.num_gt += static_cast<int>(g.size());
            for (std::size_t k = 0; k < p.size(); ++k) {
                flags[c].push_back(f[k]);
                confs[c].push_back(p[k].confidence);
            }
        }
        for (const LabeledBox& b : gts[img])
            if (b.category < 0 || b.category >= num_classes)
                throw InvalidArgument("evaluate: GT class out of range");
    }

    double sum = 0.0;
    int counted = 0;
    for (int c = 0; c < num_classes; ++c) {
        ClassResult& cr = r.classes[c];
        if (cr.num_gt == 0) continue;
        // std::vector<bool> is not contiguous
        const std::size_t n = flags[c].size();
        std::unique_ptr<bool[]> fb(new bool[n]);
        for (std::size_t k = 0; k < n; ++k) fb[k] = flags[c][k];
        std::span<const bool> fs(fb.get(), n);
        cr.ap = average_precision(fs, confs[c], cr.num_gt);
        cr.pr_curve = pr_curve(fs, confs[c], cr.num_gt);
        sum += *cr.ap;
        ++counted;
    }
    r.map50 = counted ? sum / counted : 0.0;
    return r;
}

std::string format_report(const EvalResult& r, std::span<const std::string> class_names, const std::string& title) {
    auto name = [&](int c) {
        return c < static_cast<int>(class_names.size()) ? class_names[c] : "class" + std::to_string(c);
    };
    std::ostringstream os;
    char line[200];
    os << "== " << title << " (" << r.images << " images) ==\n";
    std::snprintf(line, sizeof line, "%-10s %8s %6s %6s %6s %6s\n", "class", "AP@.5", "TP", "FP", "FN", "GT");
    os << line;
    for (std::size_t c = 0; c < r.classes.size(); ++c) {
        const ClassResult& cr = r.classes[c];
        std::string ap = cr.ap ? std::to_string(*cr.ap * 100.0).substr(0, 6) : "n/a";
        std::snprintf(line, sizeof line, "%-10s %8s %6d %6d %6d %6d\n", name(static_cast<int>(c)).c_str(), ap.c_str(),
                      cr.tp, cr.fp, cr.fn, cr.num_gt);
        os << line;
    }
    std::snprintf(line, sizeof line, "mAP@.5 = %.2f\n", r.map50 * 100.0);
    os << line;
    os << "-- metrics --\n";
    std::snprintf(line, sizeof line, "map50=%.6f\n", r.map50);
    os << line;
    for (std::size_t c = 0; c < r.classes.size(); ++c) {
        if (!r.classes[c].ap) continue;
        std::snprintf(line, sizeof line, "ap50.%s=%.6f\n", name(static_cast<int>(c)).c_str(), *r.classes[c].ap);
        os << line;
    }
    os << "images=" << r.images << "\n";
    return os.str();
}

}  // namespace clda
