#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "clda/core/tensor.hpp"

namespace clda::nn {

/// A named tensor owned by a layer. Buffers (normalization statistics) carry
/// `trainable == false` and are never touched by the optimizer.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    bool trainable = true;
    bool weight_decay = false;

    Parameter() = default;
    Parameter(std::string n, std::vector<int> shape, bool train = true, bool decay = false)
        : name(std::move(n)), value(shape), grad(train ? Tensor(shape) : Tensor()), trainable(train),
          weight_decay(decay) {}
};

using ParamList = std::vector<Parameter*>;
using ConstParamList = std::vector<const Parameter*>;

enum class Mode { Train, Eval };

class Conv2d {
public:
    Conv2d() = default;
    Conv2d(const std::string& name, int in_ch, int out_ch, int kernel, int stride, bool bias);

    Tensor forward(const Tensor& x) const;
    /// Accumulates parameter gradients; returns dL/dx.
    Tensor backward(const Tensor& x, const Tensor& grad_out, bool need_input_grad = true);

    void init(std::mt19937_64& rng, double gain = 1.0);
    void collect(ParamList& out);
    void collect(ConstParamList& out) const;

    int in_channels() const { return in_; }
    int out_channels() const { return out_; }
    int output_size(int input) const { return (input + 2 * pad_ - k_) / stride_ + 1; }

    Parameter weight;
    Parameter bias;

private:
    int in_ = 0, out_ = 0, k_ = 1, stride_ = 1, pad_ = 0;
    bool has_bias_ = false;
};

class BatchNorm2d {
public:
    struct Cache {
        Tensor xhat;
        std::vector<float> inv_std;
    };

    BatchNorm2d() = default;
    BatchNorm2d(const std::string& name, int channels, float momentum = 0.03f, float eps = 1e-3f);

    /// Train mode normalizes with batch statistics and updates the running ones.
    Tensor forward(const Tensor& x, Mode mode, Cache* cache);
    /// Inference with running statistics; never mutates.
    Tensor forward_eval(const Tensor& x) const;
    Tensor backward(const Cache& cache, const Tensor& grad_out);

    void collect(ParamList& out);
    void collect(ConstParamList& out) const;

    Parameter gamma, beta, running_mean, running_var;

private:
    int channels_ = 0;
    float momentum_ = 0.03f;
    float eps_ = 1e-3f;
};

/// conv (no bias) -> batch norm -> SiLU.
class ConvBnAct {
public:
    struct Cache {
        Tensor input;
        BatchNorm2d::Cache bn;
        Tensor pre_act;
    };

    ConvBnAct() = default;
    ConvBnAct(const std::string& name, int in_ch, int out_ch, int kernel, int stride);

    Tensor forward(const Tensor& x, Mode mode, Cache* cache);
    Tensor forward_eval(const Tensor& x) const;
    Tensor backward(const Cache& cache, const Tensor& grad_out, bool need_input_grad = true);

    void init(std::mt19937_64& rng);
    void collect(ParamList& out);
    void collect(ConstParamList& out) const;

    Conv2d conv;
    BatchNorm2d bn;
};

void silu_inplace(Tensor& x);
/// grad *= dSiLU/dx evaluated at `pre`.
void silu_backward_inplace(const Tensor& pre, Tensor& grad);

/// Momentum SGD (Nesterov) with decoupled-from-buffers L2 decay.
class Sgd {
public:
    struct Options {
        double lr = 0.01;
        double momentum = 0.937;
        double weight_decay = 5e-4;
        bool nesterov = true;
    };

    Sgd() = default;
    explicit Sgd(Options opt) : opt_(opt) {}

    void step(const ParamList& params, double lr);
    void zero_grad(const ParamList& params) const;

    /// Momentum buffers keyed in parameter order; exposed for checkpointing.
    std::vector<Tensor>& velocity() { return velocity_; }
    const std::vector<Tensor>& velocity() const { return velocity_; }
    const Options& options() const { return opt_; }

private:
    Options opt_;
    std::vector<Tensor> velocity_;
};

/// Global L2 norm of all trainable gradients.
double grad_norm(const ParamList& params);
void scale_grads(const ParamList& params, double factor);

/// Order-sensitive FNV-1a hash over parameter names and raw bytes.
std::uint64_t hash_params(const ConstParamList& params);

}  // namespace clda::nn
