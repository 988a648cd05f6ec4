#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "clda/core/tensor.hpp"
#include "clda/core/types.hpp"
#include "clda/nn/layers.hpp"

namespace clda {

enum class Stage { Backbone, Head };

inline const char* to_string(Stage s) { return s == Stage::Backbone ? "backbone" : "head"; }

/// One pooled instance: (feature, confidence, category) plus its origin.
struct InstanceFeature {
    std::vector<double> feature;  // unit L2 norm
    double confidence = 0.0;
    int category = 0;
    DomainTag domain = DomainTag::Source;
    Stage stage = Stage::Backbone;
    int level = 0;
};

/// Bilinear sampling record that lets gradients flow from a pooled vector
/// back into its feature map.
struct PoolingRecord {
    int image = 0;
    std::vector<std::pair<int, double>> taps;  // (spatial index h*W+w, weight)
    std::vector<double> raw;                   // pooled, pre-normalisation
    double norm = 0.0;
};

/// Pools each box from `feature_map` (image `image` of an N x C x H x W
/// tensor): box scaled by 1/stride, 3x3 bilinear grid averaged to a C-vector,
/// L2-normalised. Boxes thinner than one cell use the cell under their center.
std::vector<InstanceFeature> extract_instances(const Tensor& feature_map, int image, std::span<const Detection> boxes,
                                               double stride, Stage stage, DomainTag domain, int level,
                                               std::vector<PoolingRecord>* records = nullptr);

/// Adds dL/dmap given dL/dfeature (w.r.t. the normalised vectors).
void pooling_backward(const PoolingRecord& rec, std::span<const double> grad_feature, Tensor& grad_map);

struct CAConfig {
    double alpha = 1.0;  // queue-confidence exponent
    double beta = 1.0;   // batch-confidence exponent
    double temperature = 2.718281828459045;  // T, tau = ln T
    int queue_capacity = 1024;
    double harvest_floor = 0.1;
    double min_temperature = 1.001;

    void validate() const;
    double tau() const;
};

/// Sigmoid contrastive alignment of batch instances against one queue:
///   -(1/K') sum_i sum_j (1 - p_i^(a/2) q_j^(b/2)) log sigmoid(<x_i, y_j> m_ij tau)
/// with m_ij = +1 for equal categories, -1 otherwise. Writes d/d y_j into
/// `grad_batch` (size n, each of feature dim) and d/d tau into `grad_tau` when
/// provided.
double ca_loss(std::span<const InstanceFeature> batch, std::span<const InstanceFeature> queue, double alpha,
               double beta, double tau, std::vector<std::vector<double>>* grad_batch = nullptr,
               double* grad_tau = nullptr);

/// Fixed-capacity FIFO of instances sharing one (domain, stage, level) key.
class DomainQueue {
public:
    DomainQueue() = default;
    DomainQueue(int capacity, DomainTag domain, Stage stage, int level);

    /// Rejects instances whose key differs from the queue's.
    void push(const InstanceFeature& f);
    void push_all(std::span<const InstanceFeature> fs);

    /// Contents oldest-first.
    std::vector<InstanceFeature> entries() const;
    int size() const { return fill_; }
    int capacity() const { return capacity_; }
    DomainTag domain() const { return domain_; }
    Stage stage() const { return stage_; }
    int level() const { return level_; }
    bool accepts(const InstanceFeature& f) const;

private:
    int capacity_ = 0;
    DomainTag domain_ = DomainTag::Source;
    Stage stage_ = Stage::Backbone;
    int level_ = 0;
    std::vector<InstanceFeature> ring_;
    int cursor_ = 0;
    int fill_ = 0;
};

/// The twelve queues: {backbone, head} x {source, target} x 3 levels.
class QueueBank {
public:
    explicit QueueBank(int capacity = 1024);

    DomainQueue& get(DomainTag d, Stage s, int level);
    const DomainQueue& get(DomainTag d, Stage s, int level) const;
    /// Routes each instance to the queue matching its key.
    void update(std::span<const InstanceFeature> instances);
    std::vector<const DomainQueue*> all() const;

private:
    static int index(DomainTag d, Stage s, int level);
    std::array<DomainQueue, 12> queues_;
};

/// Gradient reversal: identity forward, -lambda * upstream backward.
struct GradientReversal {
    double lambda = 1.0;

    Tensor forward(const Tensor& x) const { return x; }
    Tensor backward(const Tensor& grad) const;
};

/// Binary cross-entropy of a domain logit (SOURCE = 1, TARGET = 0).
double adv_bce(double logit, DomainTag domain, double* dlogit = nullptr);

/// Per-level domain classifier: 3x3 conv -> SiLU -> global average pool ->
/// linear -> one logit per image.
class Discriminator {
public:
    struct Cache {
        Tensor input;
        Tensor pre_act;
        Tensor pooled;  // N x hidden x 1 x 1
    };

    Discriminator() = default;
    Discriminator(const std::string& name, int in_channels, int hidden = 32);

    void init(std::mt19937_64& rng);
    std::vector<double> forward(const Tensor& features, Cache* cache) const;
    /// Accumulates parameter gradients; returns dL/dfeatures.
    Tensor backward(const Cache& cache, std::span<const double> dlogits);

    void collect(nn::ParamList& out);
    void collect(nn::ConstParamList& out) const;

private:
    nn::Conv2d conv_;
    nn::Conv2d linear_;
};

/// Domain-adversarial loss over all levels: features pass through the GRL,
/// each level's discriminator scores every image, and the BCE against the
/// per-image domain labels is averaged over levels and images. Gradients are
/// accumulated into the discriminators and, reversed, into `feature_grads`.
double adv_loss(std::span<Discriminator> discs, std::span<const Tensor> features, std::span<const DomainTag> domains,
                const GradientReversal& grl, std::vector<Tensor>* feature_grads, double scale = 1.0);

}  // namespace clda
