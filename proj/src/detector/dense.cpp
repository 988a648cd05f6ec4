#include "clda/detector/dense.hpp"

#include <cmath>

namespace clda {

std::vector<AnchorPoint> make_anchors(const DetectorConfig& cfg) {
    std::vector<AnchorPoint> out;
    out.reserve(static_cast<std::size_t>(cfg.num_anchors()));
    for (int l = 0; l < cfg.num_levels(); ++l) {
        const int g = cfg.grid_size(l);
        const double s = cfg.strides[static_cast<std::size_t>(l)];
        for (int y = 0; y < g; ++y)
            for (int x = 0; x < g; ++x) out.push_back({(x + 0.5) * s, (y + 0.5) * s, s, l});
    }
    return out;
}

double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

double bce_with_logits(double z, double t) {
    return std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
}

double bce(double p, double t) {
    constexpr double eps = 1e-12;
    return -(t * std::log(p + eps) + (1.0 - t) * std::log(1.0 - p + eps));
}

void softmax(std::span<const double> logits, std::span<double> out) {
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double sum = 0.0;
    for (std::size_t k = 0; k < logits.size(); ++k) {
        out[k] = std::exp(logits[k] - mx);
        sum += out[k];
    }
    for (std::size_t k = 0; k < logits.size(); ++k) out[k] /= sum;
}

double decode_dfl(std::span<const double> dist, double stride) {
    double sum = 0.0, expect = 0.0;
    for (std::size_t k = 0; k < dist.size(); ++k) {
        if (!(dist[k] >= 0.0)) throw InvalidArgument("decode_dfl: negative or NaN probability");
        sum += dist[k];
        expect += static_cast<double>(k) * dist[k];
    }
    if (std::abs(sum - 1.0) > 1e-6) throw InvalidArgument("decode_dfl: distribution does not sum to 1");
    return expect * stride;
}

BoxDistribution side_distributions(const DenseImagePrediction& p, int a) {
    BoxDistribution d{p.bins, std::vector<double>(static_cast<std::size_t>(4 * p.bins))};
    for (int s = 0; s < 4; ++s)
        softmax({p.reg(a, s), static_cast<std::size_t>(p.bins)}, {d.side(s), static_cast<std::size_t>(p.bins)});
    return d;
}

std::array<double, 4> decoded_distances(const DenseImagePrediction& p, const AnchorPoint& anchor, int a) {
    std::array<double, 4> d{};
    std::vector<double> probs(static_cast<std::size_t>(p.bins));
    for (int s = 0; s < 4; ++s) {
        softmax({p.reg(a, s), probs.size()}, probs);
        double e = 0.0;
        for (int k = 0; k < p.bins; ++k) e += k * probs[static_cast<std::size_t>(k)];
        d[static_cast<std::size_t>(s)] = e * anchor.stride;
    }
    return d;
}

BBox decoded_box(const DenseImagePrediction& p, const AnchorPoint& anchor, int a) {
    const auto d = decoded_distances(p, anchor, a);
    return {anchor.cx - d[0], anchor.cy - d[1], anchor.cx + d[2], anchor.cy + d[3]};
}

std::vector<BBox> decoded_boxes(const DenseImagePrediction& p, std::span<const AnchorPoint> anchors) {
    std::vector<BBox> out(anchors.size());
    for (std::size_t a = 0; a < anchors.size(); ++a) out[a] = decoded_box(p, anchors[a], static_cast<int>(a));
    return out;
}

}  // namespace clda
