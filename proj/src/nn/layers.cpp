#include "clda/nn/layers.hpp"

#include <Eigen/Core>
#include <cmath>
#include <cstring>

#include "clda/core/types.hpp"

namespace clda::nn {
namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

void im2col(const float* x, int c, int h, int w, int k, int stride, int pad, int oh, int ow, float* col) {
    for (int ci = 0; ci < c; ++ci) {
        const float* plane = x + static_cast<std::size_t>(ci) * h * w;
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                float* row = col + (static_cast<std::size_t>((ci * k + ki) * k + kj)) * oh * ow;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride - pad + ki;
                    float* dst = row + static_cast<std::size_t>(oy) * ow;
                    if (iy < 0 || iy >= h) {
                        std::memset(dst, 0, sizeof(float) * ow);
                        continue;
                    }
                    const float* src = plane + static_cast<std::size_t>(iy) * w;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride - pad + kj;
                        dst[ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0f;
                    }
                }
            }
        }
    }
}

void col2im(const float* col, int c, int h, int w, int k, int stride, int pad, int oh, int ow, float* x) {
    std::memset(x, 0, sizeof(float) * static_cast<std::size_t>(c) * h * w);
    for (int ci = 0; ci < c; ++ci) {
        float* plane = x + static_cast<std::size_t>(ci) * h * w;
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                const float* row = col + (static_cast<std::size_t>((ci * k + ki) * k + kj)) * oh * ow;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride - pad + ki;
                    if (iy < 0 || iy >= h) continue;
                    const float* src = row + static_cast<std::size_t>(oy) * ow;
                    float* dst = plane + static_cast<std::size_t>(iy) * w;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride - pad + kj;
                        if (ix >= 0 && ix < w) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

inline float sigmoidf(float x) { return 1.0f / (1.0f + std::exp(-x)); }

}  // namespace

// ---------------------------------------------------------------- Conv2d

Conv2d::Conv2d(const std::string& name, int in_ch, int out_ch, int kernel, int stride, bool bias)
    : weight(name + ".weight", {out_ch, in_ch, kernel, kernel}, true, true),
      in_(in_ch), out_(out_ch), k_(kernel), stride_(stride), pad_(kernel / 2), has_bias_(bias) {
    if (bias) this->bias = Parameter(name + ".bias", {out_ch});
}

void Conv2d::init(std::mt19937_64& rng, double gain) {
    const double fan_in = static_cast<double>(in_) * k_ * k_;
    const double bound = gain * std::sqrt(3.0 / fan_in);
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (float& v : weight.value.data) v = static_cast<float>(dist(rng));
    if (has_bias_) bias.value.zero();
}

Tensor Conv2d::forward(const Tensor& x) const {
    if (x.rank() != 4 || x.dim(1) != in_) throw InvalidArgument("Conv2d " + weight.name + ": bad input " + x.shape_str());
    const int n = x.dim(0), h = x.dim(2), w = x.dim(3);
    const int oh = output_size(h), ow = output_size(w);
    const int kk = in_ * k_ * k_;
    const int hw = oh * ow;
    Tensor y({n, out_, oh, ow});
    const bool direct = (k_ == 1 && stride_ == 1);
    FloatBuffer col(direct ? 0 : static_cast<std::size_t>(kk) * hw);
    ConstMapMat wmat(weight.value.ptr(), out_, kk);
    for (int b = 0; b < n; ++b) {
        const float* src = x.item(b);
        if (!direct) {
            im2col(src, in_, h, w, k_, stride_, pad_, oh, ow, col.data());
            src = col.data();
        }
        MapMat out(y.item(b), out_, hw);
        out.noalias() = wmat * ConstMapMat(src, kk, hw);
        if (has_bias_) {
            for (int o = 0; o < out_; ++o) out.row(o).array() += bias.value.data[o];
        }
    }
    return y;
}

Tensor Conv2d::backward(const Tensor& x, const Tensor& grad_out, bool need_input_grad) {
    const int n = x.dim(0), h = x.dim(2), w = x.dim(3);
    const int oh = grad_out.dim(2), ow = grad_out.dim(3);
    const int kk = in_ * k_ * k_;
    const int hw = oh * ow;
    const bool direct = (k_ == 1 && stride_ == 1);
    Tensor gx;
    if (need_input_grad) gx = Tensor(x.shape);
    FloatBuffer col(direct ? 0 : static_cast<std::size_t>(kk) * hw);
    FloatBuffer dcol(direct ? 0 : static_cast<std::size_t>(kk) * hw);
    ConstMapMat wmat(weight.value.ptr(), out_, kk);
    MapMat gw(weight.grad.ptr(), out_, kk);
    for (int b = 0; b < n; ++b) {
        const float* src = x.item(b);
        if (!direct) {
            im2col(src, in_, h, w, k_, stride_, pad_, oh, ow, col.data());
            src = col.data();
        }
        ConstMapMat dy(grad_out.item(b), out_, hw);
        gw.noalias() += dy * ConstMapMat(src, kk, hw).transpose();
        if (has_bias_) {
            for (int o = 0; o < out_; ++o) bias.grad.data[o] += dy.row(o).sum();
        }
        if (!need_input_grad) continue;
        if (direct) {
            MapMat(gx.item(b), kk, hw).noalias() = wmat.transpose() * dy;
        } else {
            MapMat(dcol.data(), kk, hw).noalias() = wmat.transpose() * dy;
            col2im(dcol.data(), in_, h, w, k_, stride_, pad_, oh, ow, gx.item(b));
        }
    }
    return gx;
}

void Conv2d::collect(ParamList& out) {
    out.push_back(&weight);
    if (has_bias_) out.push_back(&bias);
}

void Conv2d::collect(ConstParamList& out) const {
    out.push_back(&weight);
    if (has_bias_) out.push_back(&bias);
}

// ----------------------------------------------------------- BatchNorm2d

BatchNorm2d::BatchNorm2d(const std::string& name, int channels, float momentum, float eps)
    : gamma(name + ".gamma", {channels}), beta(name + ".beta", {channels}),
      running_mean(name + ".running_mean", {channels}, false),
      running_var(name + ".running_var", {channels}, false), channels_(channels), momentum_(momentum),
      eps_(eps) {
    std::fill(gamma.value.data.begin(), gamma.value.data.end(), 1.0f);
    std::fill(running_var.value.data.begin(), running_var.value.data.end(), 1.0f);
}

Tensor BatchNorm2d::forward(const Tensor& x, Mode mode, Cache* cache) {
    if (mode == Mode::Eval) return forward_eval(x);
    const int n = x.dim(0), c = x.dim(1);
    const std::size_t hw = x.size() / (static_cast<std::size_t>(n) * c);
    const double m = static_cast<double>(n) * hw;
    Tensor y(x.shape);
    Cache local;
    Cache& cc = cache ? *cache : local;
    cc.xhat = Tensor(x.shape);
    cc.inv_std.assign(c, 0.0f);
    for (int ch = 0; ch < c; ++ch) {
        double sum = 0.0, sq = 0.0;
        for (int b = 0; b < n; ++b) {
            const float* p = x.item(b) + ch * hw;
            for (std::size_t i = 0; i < hw; ++i) {
                sum += p[i];
                sq += static_cast<double>(p[i]) * p[i];
            }
        }
        const double mean = sum / m;
        const double var = std::max(sq / m - mean * mean, 0.0);
        const float inv = static_cast<float>(1.0 / std::sqrt(var + eps_));
        cc.inv_std[ch] = inv;
        const float g = gamma.value.data[ch], bt = beta.value.data[ch];
        const float mf = static_cast<float>(mean);
        for (int b = 0; b < n; ++b) {
            const float* p = x.item(b) + ch * hw;
            float* xh = cc.xhat.item(b) + ch * hw;
            float* q = y.item(b) + ch * hw;
            for (std::size_t i = 0; i < hw; ++i) {
                xh[i] = (p[i] - mf) * inv;
                q[i] = g * xh[i] + bt;
            }
        }
        const double unbiased = m > 1 ? var * m / (m - 1) : var;
        running_mean.value.data[ch] = static_cast<float>((1.0 - momentum_) * running_mean.value.data[ch] + momentum_ * mean);
        running_var.value.data[ch] = static_cast<float>((1.0 - momentum_) * running_var.value.data[ch] + momentum_ * unbiased);
    }
    return y;
}

Tensor BatchNorm2d::forward_eval(const Tensor& x) const {
    const int n = x.dim(0), c = x.dim(1);
    const std::size_t hw = x.size() / (static_cast<std::size_t>(n) * c);
    Tensor y(x.shape);
    for (int ch = 0; ch < c; ++ch) {
        const float inv = 1.0f / std::sqrt(running_var.value.data[ch] + eps_);
        const float scale = gamma.value.data[ch] * inv;
        const float shift = beta.value.data[ch] - running_mean.value.data[ch] * scale;
        for (int b = 0; b < n; ++b) {
            const float* p = x.item(b) + ch * hw;
            float* q = y.item(b) + ch * hw;
            for (std::size_t i = 0; i < hw; ++i) q[i] = p[i] * scale + shift;
        }
    }
    return y;
}

Tensor BatchNorm2d::backward(const Cache& cache, const Tensor& grad_out) {
    const int n = grad_out.dim(0), c = grad_out.dim(1);
    const std::size_t hw = grad_out.size() / (static_cast<std::size_t>(n) * c);
    const double m = static_cast<double>(n) * hw;
    Tensor gx(grad_out.shape);
    for (int ch = 0; ch < c; ++ch) {
        double sum_dy = 0.0, sum_dy_xh = 0.0;
        for (int b = 0; b < n; ++b) {
            const float* dy = grad_out.item(b) + ch * hw;
            const float* xh = cache.xhat.item(b) + ch * hw;
            for (std::size_t i = 0; i < hw; ++i) {
                sum_dy += dy[i];
                sum_dy_xh += static_cast<double>(dy[i]) * xh[i];
            }
        }
        gamma.grad.data[ch] += static_cast<float>(sum_dy_xh);
        beta.grad.data[ch] += static_cast<float>(sum_dy);
        const float k = gamma.value.data[ch] * cache.inv_std[ch];
        const float mdy = static_cast<float>(sum_dy / m);
        const float mdyxh = static_cast<float>(sum_dy_xh / m);
        for (int b = 0; b < n; ++b) {
            const float* dy = grad_out.item(b) + ch * hw;
            const float* xh = cache.xhat.item(b) + ch * hw;
            float* g = gx.item(b) + ch * hw;
            for (std::size_t i = 0; i < hw; ++i) g[i] = k * (dy[i] - mdy - xh[i] * mdyxh);
        }
    }
    return gx;
}

void BatchNorm2d::collect(ParamList& out) {
    out.insert(out.end(), {&gamma, &beta, &running_mean, &running_var});
}

void BatchNorm2d::collect(ConstParamList& out) const {
    out.insert(out.end(), {&gamma, &beta, &running_mean, &running_var});
}

// ------------------------------------------------------------- ConvBnAct

ConvBnAct::ConvBnAct(const std::string& name, int in_ch, int out_ch, int kernel, int stride)
    : conv(name + ".conv", in_ch, out_ch, kernel, stride, false), bn(name + ".bn", out_ch) {}

Tensor ConvBnAct::forward(const Tensor& x, Mode mode, Cache* cache) {
    Tensor y = bn.forward(conv.forward(x), mode, cache ? &cache->bn : nullptr);
    if (cache) {
        cache->input = x;
        cache->pre_act = y;
    }
    silu_inplace(y);
    return y;
}

Tensor ConvBnAct::forward_eval(const Tensor& x) const {
    Tensor y = bn.forward_eval(conv.forward(x));
    silu_inplace(y);
    return y;
}

Tensor ConvBnAct::backward(const Cache& cache, const Tensor& grad_out, bool need_input_grad) {
    Tensor g = grad_out;
    silu_backward_inplace(cache.pre_act, g);
    g = bn.backward(cache.bn, g);
    return conv.backward(cache.input, g, need_input_grad);
}

void ConvBnAct::init(std::mt19937_64& rng) { conv.init(rng); }

void ConvBnAct::collect(ParamList& out) {
    conv.collect(out);
    bn.collect(out);
}

void ConvBnAct::collect(ConstParamList& out) const {
    conv.collect(out);
    bn.collect(out);
}

// ------------------------------------------------------------ activations

void silu_inplace(Tensor& x) {
    for (float& v : x.data) v = v * sigmoidf(v);
}

void silu_backward_inplace(const Tensor& pre, Tensor& grad) {
    for (std::size_t i = 0; i < grad.size(); ++i) {
        const float z = pre.data[i];
        const float s = sigmoidf(z);
        grad.data[i] *= s * (1.0f + z * (1.0f - s));
    }
}

// -------------------------------------------------------------------- Sgd

void Sgd::zero_grad(const ParamList& params) const {
    for (Parameter* p : params) {
        if (p->trainable) p->grad.zero();
    }
}

void Sgd::step(const ParamList& params, double lr) {
    if (velocity_.empty()) {
        for (Parameter* p : params) velocity_.push_back(p->trainable ? Tensor(p->value.shape) : Tensor());
    }
    if (velocity_.size() != params.size()) throw InvalidArgument("Sgd: parameter list changed between steps");
    const float mu = static_cast<float>(opt_.momentum);
    const float lrf = static_cast<float>(lr);
    const float wd = static_cast<float>(opt_.weight_decay);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Parameter& p = *params[i];
        if (!p.trainable) continue;
        float* v = velocity_[i].ptr();
        float* w = p.value.ptr();
        const float* g = p.grad.ptr();
        const bool decay = p.weight_decay && wd > 0.0f;
        for (std::size_t j = 0; j < p.value.size(); ++j) {
            const float gj = decay ? g[j] + wd * w[j] : g[j];
            v[j] = mu * v[j] + gj;
            w[j] -= lrf * (opt_.nesterov ? gj + mu * v[j] : v[j]);
        }
    }
}

double grad_norm(const ParamList& params) {
    double sq = 0.0;
    for (const Parameter* p : params) {
        if (!p->trainable) continue;
        for (float g : p->grad.data) sq += static_cast<double>(g) * g;
    }
    return std::sqrt(sq);
}

void scale_grads(const ParamList& params, double factor) {
    const float f = static_cast<float>(factor);
    for (Parameter* p : params) {
        if (!p->trainable) continue;
        for (float& g : p->grad.data) g *= f;
    }
}

std::uint64_t hash_params(const ConstParamList& params) {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* data, std::size_t len) {
        const auto* bytes = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < len; ++i) {
            h ^= bytes[i];
            h *= 1099511628211ull;
        }
    };
    for (const Parameter* p : params) {
        mix(p->name.data(), p->name.size());
        mix(p->value.ptr(), p->value.size() * sizeof(float));
    }
    return h;
}

}  // namespace clda::nn
