#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "clda/detector/assign.hpp"
#include "clda/detector/dense.hpp"
#include "oracles.hpp"

namespace toy {

/// Small two-level pyramid on a 32x32 canvas: 4x4 cells at stride 8, 2x2 at 16.
inline std::vector<clda::AnchorPoint> anchors() {
    std::vector<clda::AnchorPoint> out;
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) out.push_back({x * 8 + 4.0, y * 8 + 4.0, 8.0, 0});
    for (int y = 0; y < 2; ++y)
        for (int x = 0; x < 2; ++x) out.push_back({x * 16 + 8.0, y * 16 + 8.0, 16.0, 1});
    return out;
}

inline clda::DenseImagePrediction random_prediction(std::mt19937_64& rng, int num_classes = 2, int bins = 5,
                                                    double scale = 1.0) {
    clda::DenseImagePrediction p(20, num_classes, bins);
    std::normal_distribution<double> n(0.0, scale);
    for (double& v : p.cls_logits) v = n(rng);
    for (double& v : p.reg_logits) v = n(rng);
    return p;
}

inline std::vector<clda::LabeledBox> random_gts(std::mt19937_64& rng, int count, int num_classes = 2) {
    std::vector<clda::LabeledBox> out;
    for (int i = 0; i < count; ++i)
        out.push_back({oracle::random_box(rng, 32, 10, 28), static_cast<int>(rng() % num_classes)});
    return out;
}

/// Largest relative disagreement between analytic gradients and central
/// differences of `f` over every logit of every prediction.
inline double max_grad_error(std::vector<clda::DenseImagePrediction>& preds,
                             const std::vector<clda::DenseGrad>& analytic,
                             const std::function<double(const std::vector<clda::DenseImagePrediction>&)>& f,
                             double h = 1e-5, double floor = 1e-6) {
    double worst = 0.0;
    auto probe = [&](double& x, double g) {
        const double orig = x;
        x = orig + h;
        const double fp = f(preds);
        x = orig - h;
        const double fm = f(preds);
        x = orig;
        worst = std::max(worst, oracle::rel_err(g, (fp - fm) / (2.0 * h), floor));
    };
    for (std::size_t i = 0; i < preds.size(); ++i) {
        for (std::size_t k = 0; k < preds[i].cls_logits.size(); ++k) probe(preds[i].cls_logits[k], analytic[i].cls_logits[k]);
        for (std::size_t k = 0; k < preds[i].reg_logits.size(); ++k) probe(preds[i].reg_logits[k], analytic[i].reg_logits[k]);
    }
    return worst;
}

inline std::vector<clda::DenseGrad> zero_grads(const std::vector<clda::DenseImagePrediction>& preds) {
    std::vector<clda::DenseGrad> g;
    for (const auto& p : preds) g.push_back(clda::zeros_like(p));
    return g;
}

}  // namespace toy
