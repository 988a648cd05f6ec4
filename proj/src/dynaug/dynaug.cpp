#include "clda/dynaug/dynaug.hpp"

#include <algorithm>
#include <cmath>

#include "clda/core/divergence.hpp"

namespace clda {

double divergence_score(const DenseImagePrediction& student, const DenseImagePrediction& teacher, double gamma) {
    if (student.num_anchors != teacher.num_anchors || student.bins != teacher.bins)
        throw InvalidArgument("divergence_score: grid shape mismatch");
    if (student.num_anchors == 0) return 0.0;
    const auto bins = static_cast<std::size_t>(student.bins);
    std::vector<double> ps(bins), pt(bins);
    double total = 0.0;
    for (int a = 0; a < student.num_anchors; ++a) {
        double per_anchor = 0.0;
        for (int s = 0; s < 4; ++s) {
            softmax({student.reg(a, s), bins}, ps);
            softmax({teacher.reg(a, s), bins}, pt);
            per_anchor += js_divergence_grad(ps, pt, {});
        }
        total += 0.25 * per_anchor;
    }
    return std::pow(total / student.num_anchors, gamma);
}

double teacher_entropy(const DenseImagePrediction& teacher) {
    double total = 0.0;
    for (int a = 0; a < teacher.num_anchors; ++a) {
        double best = teacher.cls(a)[0];
        for (int c = 1; c < teacher.num_classes; ++c) best = std::max(best, teacher.cls(a)[c]);
        const double p = sigmoid(best);
        const double v[2] = {p, 1.0 - p};
        total += entropy(v);
    }
    return teacher.num_anchors ? total / teacher.num_anchors : 0.0;
}

GainState update_gain(GainState s, double batch_divergence) {
    if (!s.frozen) {
        s.warmup_sum += batch_divergence;
        ++s.warmup_count;
        if (s.warmup_count >= s.cfg.warmup_steps) {
            s.baseline = std::max(s.warmup_sum / s.warmup_count, 1e-8);
            s.frozen = true;
        }
        return s;
    }
    const double d = batch_divergence > 0.0 ? batch_divergence : 1e-8;
    const double next = s.cfg.alpha * s.gain + (1.0 - s.cfg.alpha) * s.baseline / d;
    s.gain = std::clamp(next, s.cfg.min_gain, s.cfg.max_gain);
    ++s.updates;
    return s;
}

// ------------------------------------------------------------ augmentation

Image warp_image(const Image& image, const Affine2D& t, float fill) {
    const Affine2D inv = t.inverse();
    Image out(image.height, image.width, fill);
    for (int y = 0; y < out.height; ++y) {
        const double v = inv.map_y(y + 0.5) - 0.5;
        for (int x = 0; x < out.width; ++x) {
            const double u = inv.map_x(x + 0.5) - 0.5;
            if (u < -0.5 || v < -0.5 || u > image.width - 0.5 || v > image.height - 0.5) continue;
            const double uc = std::clamp(u, 0.0, image.width - 1.0);
            const double vc = std::clamp(v, 0.0, image.height - 1.0);
            const int x0 = std::min(static_cast<int>(uc), image.width - 1);
            const int y0 = std::min(static_cast<int>(vc), image.height - 1);
            const int x1 = std::min(x0 + 1, image.width - 1);
            const int y1 = std::min(y0 + 1, image.height - 1);
            const double fx = uc - x0, fy = vc - y0;
            for (int c = 0; c < 3; ++c) {
                const double top = image.at(y0, x0, c) * (1 - fx) + image.at(y0, x1, c) * fx;
                const double bot = image.at(y1, x0, c) * (1 - fx) + image.at(y1, x1, c) * fx;
                out.at(y, x, c) = static_cast<float>(top * (1 - fy) + bot * fy);
            }
        }
    }
    return out;
}

double valid_fraction(const Affine2D& t, int width, int height) {
    // Preimage of the input canvas is an axis-aligned box; intersect with the output canvas.
    const BBox canvas{0.0, 0.0, static_cast<double>(width), static_cast<double>(height)};
    const BBox img = t.apply(canvas);
    const BBox clipped = clip_box(img, width, height);
    if (!clipped.valid()) return 0.0;
    return clipped.area() / canvas.area();
}

std::vector<LabeledBox> transform_boxes(std::span<const LabeledBox> boxes, const Affine2D& t, double width,
                                        double height, double min_side) {
    std::vector<LabeledBox> out;
    for (const LabeledBox& b : boxes) {
        const BBox m = t.apply(b.box);
        const BBox c = clip_box(m, width, height);
        if (c.width() < min_side || c.height() < min_side) continue;
        // Mostly cropped objects are no longer recognisable.
        if (c.area() < 0.4 * m.area()) continue;
        out.push_back({c, b.category});
    }
    return out;
}

Image gaussian_blur(const Image& image, double sigma) {
    if (sigma <= 0.05) return image;
    const int r = std::max(1, static_cast<int>(std::ceil(2.0 * sigma)));
    std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
    double sum = 0.0;
    for (int i = -r; i <= r; ++i) {
        k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
        sum += k[static_cast<std::size_t>(i + r)];
    }
    for (double& v : k) v /= sum;
    Image tmp(image.height, image.width), out(image.height, image.width);
    for (int y = 0; y < image.height; ++y)
        for (int x = 0; x < image.width; ++x)
            for (int c = 0; c < 3; ++c) {
                double acc = 0.0;
                for (int i = -r; i <= r; ++i)
                    acc += k[static_cast<std::size_t>(i + r)] * image.at(y, std::clamp(x + i, 0, image.width - 1), c);
                tmp.at(y, x, c) = static_cast<float>(acc);
            }
    for (int y = 0; y < image.height; ++y)
        for (int x = 0; x < image.width; ++x)
            for (int c = 0; c < 3; ++c) {
                double acc = 0.0;
                for (int i = -r; i <= r; ++i)
                    acc += k[static_cast<std::size_t>(i + r)] * tmp.at(std::clamp(y + i, 0, image.height - 1), x, c);
                out.at(y, x, c) = static_cast<float>(acc);
            }
    return out;
}

namespace {

Affine2D hflip(int width) { return {-1.0, 1.0, static_cast<double>(width), 0.0}; }

void color_jitter(Image& im, double b, double c, double s) {
    double mean = 0.0;
    for (float v : im.pixels) mean += v;
    mean /= static_cast<double>(im.pixels.size());
    for (std::size_t i = 0; i < im.pixels.size(); i += 3) {
        float* px = &im.pixels[i];
        const double gray = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
        for (int ch = 0; ch < 3; ++ch) {
            double v = gray + (px[ch] - gray) * s;
            v = (v - mean) * c + mean;
            v *= b;
            px[ch] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    }
}

}  // namespace

AugmentedView apply_weak(const AugmentationPolicy& policy, const Image& image, std::span<const LabeledBox> boxes,
                         std::mt19937_64& rng) {
    AugmentedView v;
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    if (u01(rng) < policy.flip_prob) v.transform = hflip(image.width);
    v.image = v.transform.is_identity() ? image : warp_image(image, v.transform);
    v.boxes = transform_boxes(boxes, v.transform, image.width, image.height, policy.min_box_side);
    return v;
}

AugmentedView apply_strong(const AugmentationPolicy& policy, double gain, const Image& image,
                           std::span<const LabeledBox> boxes, std::mt19937_64& rng) {
    const double g = policy.scale_magnitudes ? gain : 1.0;
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    auto sym = [&](double m) { return (2.0 * u01(rng) - 1.0) * m; };

    AugmentedView v;
    Affine2D t;
    int tries = 0;
    for (;; ++tries) {
        if (tries > policy.max_retries) {
            AugmentedView w = apply_weak(policy, image, boxes, rng);
            w.retries = tries;
            w.weak_fallback = true;
            return w;
        }
        const double sc = 1.0 + sym(std::min(policy.scale_range * g, 0.9));
        const double tx = sym(policy.translate * g) * image.width;
        const double ty = sym(policy.translate * g) * image.height;
        // Scale about the canvas centre, then translate.
        const double cx = 0.5 * image.width, cy = 0.5 * image.height;
        t = Affine2D{sc, sc, cx - sc * cx + tx, cy - sc * cy + ty};
        if (policy.strong_flip && u01(rng) < 0.5) t = hflip(image.width).after(t);
        if (valid_fraction(t, image.width, image.height) >= policy.min_valid_fraction) break;
    }
    v.retries = tries;
    v.transform = t;
    v.image = t.is_identity() ? image : warp_image(image, t);
    v.boxes = transform_boxes(boxes, t, image.width, image.height, policy.min_box_side);

    const double b = 1.0 + sym(policy.brightness * g);
    const double c = 1.0 + sym(policy.contrast * g);
    const double s = 1.0 + sym(policy.saturation * g);
    if (b != 1.0 || c != 1.0 || s != 1.0) color_jitter(v.image, std::max(b, 0.0), std::max(c, 0.0), std::max(s, 0.0));

    const double blur = u01(rng) * policy.blur_sigma * g;
    v.image = gaussian_blur(v.image, blur);

    const double sigma = policy.noise_sigma * g;
    if (sigma > 0.0) {
        std::normal_distribution<double> n01(0.0, 1.0);
        for (float& px : v.image.pixels) px = static_cast<float>(std::clamp(px + sigma * n01(rng), 0.0, 1.0));
    }

    const double area = policy.erase_area * g;
    if (area > 0.0 && u01(rng) < policy.erase_prob) {
        const double frac = area * (0.3 + 0.7 * u01(rng));
        const double aspect = std::exp(sym(std::log(2.0)));
        const int ew = std::clamp(static_cast<int>(std::sqrt(frac * aspect) * image.width), 1, image.width);
        const int eh = std::clamp(static_cast<int>(std::sqrt(frac / aspect) * image.height), 1, image.height);
        const int ex = static_cast<int>(u01(rng) * (image.width - ew));
        const int ey = static_cast<int>(u01(rng) * (image.height - eh));
        const auto val = static_cast<float>(u01(rng));
        for (int y = ey; y < ey + eh; ++y)
            for (int x = ex; x < ex + ew; ++x)
                for (int ch = 0; ch < 3; ++ch) v.image.at(y, x, ch) = val;
    }
    return v;
}

}  // namespace clda
