#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "clda/core/tensor.hpp"
#include "clda/detector/config.hpp"
#include "clda/detector/dense.hpp"
#include "clda/nn/layers.hpp"

namespace clda {

/// Raw head outputs of one pyramid level for the whole batch.
struct LevelPrediction {
    Tensor cls;  // N x C x H x W logits
    Tensor reg;  // N x 4*bins x H x W logits
    int level = 0;
    int stride = 0;
};

/// Intermediate maps exposed for alignment: the backbone stage feeding each
/// head, and each head's shared post-block map.
struct FeatureBundle {
    std::array<Tensor, 3> backbone;
    std::array<Tensor, 3> head;
};

struct ForwardResult {
    std::vector<LevelPrediction> levels;
    FeatureBundle features;
};

/// Activation caches recorded by a training-mode forward pass.
struct ForwardTrace {
    nn::ConvBnAct::Cache stem;
    std::array<nn::ConvBnAct::Cache, 4> stages;
    std::array<std::array<nn::ConvBnAct::Cache, 2>, 3> heads;
    FeatureBundle features;
};

/// Upstream gradients for a backward pass; empty tensors mean "no gradient".
struct DetectorGrads {
    std::vector<Tensor> cls;
    std::vector<Tensor> reg;
    std::array<Tensor, 3> backbone;
    std::array<Tensor, 3> head;
};

class Detector {
public:
    explicit Detector(DetectorConfig cfg = {});

    const DetectorConfig& config() const { return cfg_; }

    /// Randomly initialise every weight from `seed`.
    void init(std::uint64_t seed);
    /// Set every parameter and buffer to zero.
    void zero_weights();

    /// Training-mode forward (batch-statistic normalisation, running stats
    /// updated); fills `trace` for a later backward().
    ForwardResult forward(const Tensor& images, ForwardTrace& trace);
    /// Inference forward with running statistics. Never mutates the model.
    ForwardResult infer(const Tensor& images) const;

    /// Accumulates parameter gradients.
    void backward(const ForwardTrace& trace, const DetectorGrads& grads);

    nn::ParamList parameters();
    nn::ConstParamList parameters() const;
    std::uint64_t weight_hash() const { return nn::hash_params(parameters()); }

private:
    void check_input(const Tensor& images) const;

    DetectorConfig cfg_;
    nn::ConvBnAct stem_;
    std::array<nn::ConvBnAct, 4> stages_;
    std::array<std::array<nn::ConvBnAct, 2>, 3> head_blocks_;
    std::array<nn::Conv2d, 3> cls_proj_;
    std::array<nn::Conv2d, 3> reg_proj_;
};

/// Stacks H x W x 3 images into an N x 3 x H x W tensor.
Tensor images_to_tensor(std::span<const Image> images);

/// Gathers one image of the batch into a double-precision dense view.
DenseImagePrediction gather_dense(const std::vector<LevelPrediction>& levels, int image, const DetectorConfig& cfg);
/// Allocates zeroed level-gradient tensors shaped like `levels`.
DetectorGrads make_grads(const std::vector<LevelPrediction>& levels);
/// Adds a dense per-image gradient into the level-gradient tensors.
void scatter_dense_grad(const DenseGrad& g, int image, const DetectorConfig& cfg, DetectorGrads& out);

}  // namespace clda
