#pragma once

#include <random>
#include <span>
#include <vector>

#include "clda/core/geometry.hpp"
#include "clda/core/types.hpp"
#include "clda/detector/dense.hpp"

namespace clda {

struct GainConfig {
    double alpha = 0.999;  // smoothing of the gain recursion
    double gamma = 1.0;    // exponent on the per-batch divergence
    double min_gain = 0.5;
    double max_gain = 2.0;
    int warmup_steps = 50;
    bool entropy_weighting = false;
};

/// Controller state of the dynamic augmentation gain.
struct GainState {
    GainConfig cfg;
    double gain = 1.0;
    double baseline = 0.0;  // mean divergence over the warm-up window, once frozen
    bool frozen = false;
    double warmup_sum = 0.0;
    int warmup_count = 0;
    int updates = 0;
};

/// Mean over anchors of the side-averaged JS divergence between two models'
/// box distributions on the same view, raised to `gamma`.
double divergence_score(const DenseImagePrediction& student, const DenseImagePrediction& teacher, double gamma);

/// Mean binary entropy of the teacher's best-class confidence per anchor.
double teacher_entropy(const DenseImagePrediction& teacher);

/// Feeds one update's batch-averaged divergence. During warm-up the value
/// accumulates into the baseline; afterwards the gain moves towards
/// baseline / divergence and is clamped to [min_gain, max_gain].
GainState update_gain(GainState state, double batch_divergence);

struct AugmentationPolicy {
    double flip_prob = 0.5;  // weak view

    double brightness = 0.25;
    double contrast = 0.25;
    double saturation = 0.25;
    double noise_sigma = 0.03;
    double blur_sigma = 0.6;
    double erase_prob = 0.5;
    double erase_area = 0.04;   // max fraction of the canvas per erase
    double scale_range = 0.15;  // scale drawn from [1 - r, 1 + r]
    double translate = 0.08;    // fraction of the canvas
    bool strong_flip = true;
    bool scale_magnitudes = true;  // multiply magnitudes by the gain

    /// Minimum fraction of the augmented canvas that must come from the input.
    double min_valid_fraction = 0.6;
    int max_retries = 5;
    double min_box_side = 2.0;
};

struct AugmentedView {
    Image image;
    std::vector<LabeledBox> boxes;
    /// Maps coordinates of the input image into the augmented view.
    Affine2D transform;
    int retries = 0;
    bool weak_fallback = false;
};

/// Horizontal flip with probability `flip_prob`.
AugmentedView apply_weak(const AugmentationPolicy& policy, const Image& image, std::span<const LabeledBox> boxes,
                         std::mt19937_64& rng);

/// Strong photometric + geometric augmentation with magnitudes scaled by
/// `gain`. Geometric parameters are recorded in the returned transform.
AugmentedView apply_strong(const AugmentationPolicy& policy, double gain, const Image& image,
                           std::span<const LabeledBox> boxes, std::mt19937_64& rng);

/// Resamples `image` through `t` (bilinear, constant fill outside).
Image warp_image(const Image& image, const Affine2D& t, float fill = 0.5f);

/// Fraction of output pixels whose preimage lies inside the input canvas.
double valid_fraction(const Affine2D& t, int width, int height);

/// Maps labeled boxes through `t`, clipping and dropping slivers.
std::vector<LabeledBox> transform_boxes(std::span<const LabeledBox> boxes, const Affine2D& t, double width,
                                        double height, double min_side);

Image gaussian_blur(const Image& image, double sigma);

}  // namespace clda
