#include "clda/align/align.hpp"

#include <algorithm>
#include <cmath>

#include "clda/detector/dense.hpp"

namespace clda {

// --------------------------------------------------------------- pooling

std::vector<InstanceFeature> extract_instances(const Tensor& map, int image, std::span<const Detection> boxes,
                                               double stride, Stage stage, DomainTag domain, int level,
                                               std::vector<PoolingRecord>* records) {
    const int c = map.dim(1), h = map.dim(2), w = map.dim(3);
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    const float* base = map.item(image);
    std::vector<InstanceFeature> out;
    out.reserve(boxes.size());

    for (const Detection& d : boxes) {
        PoolingRecord rec;
        rec.image = image;
        const double bx1 = d.box.x1 / stride, by1 = d.box.y1 / stride;
        const double bx2 = d.box.x2 / stride, by2 = d.box.y2 / stride;
        const double bw = bx2 - bx1, bh = by2 - by1;
        if (bw < 1.0 || bh < 1.0) {
            const int cx = std::clamp(static_cast<int>(std::floor(0.5 * (bx1 + bx2))), 0, w - 1);
            const int cy = std::clamp(static_cast<int>(std::floor(0.5 * (by1 + by2))), 0, h - 1);
            rec.taps.emplace_back(cy * w + cx, 1.0);
        } else {
            for (int gy = 0; gy < 3; ++gy) {
                const double v = std::clamp(by1 + (gy + 0.5) * bh / 3.0 - 0.5, 0.0, h - 1.0);
                const int y0 = std::min(static_cast<int>(v), h - 1);
                const int y1 = std::min(y0 + 1, h - 1);
                const double fy = v - y0;
                for (int gx = 0; gx < 3; ++gx) {
                    const double u = std::clamp(bx1 + (gx + 0.5) * bw / 3.0 - 0.5, 0.0, w - 1.0);
                    const int x0 = std::min(static_cast<int>(u), w - 1);
                    const int x1 = std::min(x0 + 1, w - 1);
                    const double fx = u - x0;
                    rec.taps.emplace_back(y0 * w + x0, (1 - fx) * (1 - fy) / 9.0);
                    rec.taps.emplace_back(y0 * w + x1, fx * (1 - fy) / 9.0);
                    rec.taps.emplace_back(y1 * w + x0, (1 - fx) * fy / 9.0);
                    rec.taps.emplace_back(y1 * w + x1, fx * fy / 9.0);
                }
            }
        }
        rec.raw.assign(static_cast<std::size_t>(c), 0.0);
        for (int ch = 0; ch < c; ++ch) {
            const float* plane = base + static_cast<std::size_t>(ch) * hw;
            double acc = 0.0;
            for (const auto& [idx, wt] : rec.taps) acc += wt * plane[idx];
            rec.raw[static_cast<std::size_t>(ch)] = acc;
        }
        double sq = 0.0;
        for (double v : rec.raw) sq += v * v;
        rec.norm = std::sqrt(sq);

        InstanceFeature f;
        f.feature.resize(static_cast<std::size_t>(c));
        if (rec.norm > 1e-12) {
            for (int ch = 0; ch < c; ++ch) f.feature[static_cast<std::size_t>(ch)] = rec.raw[static_cast<std::size_t>(ch)] / rec.norm;
        } else {
            std::fill(f.feature.begin(), f.feature.end(), 1.0 / std::sqrt(static_cast<double>(c)));
        }
        f.confidence = d.confidence;
        f.category = d.category;
        f.domain = domain;
        f.stage = stage;
        f.level = level;
        out.push_back(std::move(f));
        if (records) records->push_back(std::move(rec));
    }
    return out;
}

void pooling_backward(const PoolingRecord& rec, std::span<const double> grad_feature, Tensor& grad_map) {
    if (rec.norm <= 1e-12) return;
    const int c = grad_map.dim(1);
    const std::size_t hw = static_cast<std::size_t>(grad_map.dim(2)) * grad_map.dim(3);
    double dot = 0.0;
    for (int ch = 0; ch < c; ++ch)
        dot += grad_feature[static_cast<std::size_t>(ch)] * rec.raw[static_cast<std::size_t>(ch)] / rec.norm;
    float* base = grad_map.item(rec.image);
    for (int ch = 0; ch < c; ++ch) {
        const auto chs = static_cast<std::size_t>(ch);
        const double graw = (grad_feature[chs] - rec.raw[chs] / rec.norm * dot) / rec.norm;
        float* plane = base + chs * hw;
        for (const auto& [idx, wt] : rec.taps) plane[idx] += static_cast<float>(wt * graw);
    }
}

// --------------------------------------------------------------- CA loss

void CAConfig::validate() const {
    if (!(temperature > 1.0)) throw InvalidArgument("ca: temperature base T must exceed 1");
    if (queue_capacity < 1) throw InvalidArgument("ca: queue capacity must be positive");
    if (alpha < 0.0 || beta < 0.0) throw InvalidArgument("ca: confidence exponents must be >= 0");
}

double CAConfig::tau() const { return std::log(temperature); }

double ca_loss(std::span<const InstanceFeature> batch, std::span<const InstanceFeature> queue, double alpha,
               double beta, double tau, std::vector<std::vector<double>>* grad_batch, double* grad_tau) {
    if (grad_batch) {
        grad_batch->assign(batch.size(), {});
        for (std::size_t j = 0; j < batch.size(); ++j) (*grad_batch)[j].assign(batch[j].feature.size(), 0.0);
    }
    if (batch.empty() || queue.empty()) return 0.0;
    const double inv_k = 1.0 / static_cast<double>(queue.size());
    double total = 0.0;
    double dtau = 0.0;
    for (const InstanceFeature& xi : queue) {
        const double pw = std::pow(xi.confidence, 0.5 * alpha);
        for (std::size_t j = 0; j < batch.size(); ++j) {
            const InstanceFeature& yj = batch[j];
            if (xi.feature.size() != yj.feature.size()) throw InvalidArgument("ca_loss: feature dimension mismatch");
            const double weight = 1.0 - pw * std::pow(yj.confidence, 0.5 * beta);
            const double mask = xi.category == yj.category ? 1.0 : -1.0;
            double dot = 0.0;
            for (std::size_t k = 0; k < xi.feature.size(); ++k) dot += xi.feature[k] * yj.feature[k];
            const double z = dot * mask * tau;
            // -log sigmoid(z) = softplus(-z)
            total += weight * (std::max(-z, 0.0) + std::log1p(std::exp(-std::abs(z))));
            const double dz = -weight * (1.0 - sigmoid(z)) * inv_k;
            if (grad_batch) {
                auto& g = (*grad_batch)[j];
                for (std::size_t k = 0; k < g.size(); ++k) g[k] += dz * mask * tau * xi.feature[k];
            }
            dtau += dz * dot * mask;
        }
    }
    if (grad_tau) *grad_tau = dtau;
    return total * inv_k;
}

// ---------------------------------------------------------------- queues

DomainQueue::DomainQueue(int capacity, DomainTag domain, Stage stage, int level)
    : capacity_(capacity), domain_(domain), stage_(stage), level_(level) {
    if (capacity < 1) throw InvalidArgument("DomainQueue: capacity must be positive");
    ring_.resize(static_cast<std::size_t>(capacity));
}

bool DomainQueue::accepts(const InstanceFeature& f) const {
    return f.domain == domain_ && f.stage == stage_ && f.level == level_;
}

void DomainQueue::push(const InstanceFeature& f) {
    if (!accepts(f)) throw InvalidArgument("DomainQueue: instance key does not match queue key");
    ring_[static_cast<std::size_t>(cursor_)] = f;
    cursor_ = (cursor_ + 1) % capacity_;
    fill_ = std::min(fill_ + 1, capacity_);
}

void DomainQueue::push_all(std::span<const InstanceFeature> fs) {
    for (const InstanceFeature& f : fs) push(f);
}

std::vector<InstanceFeature> DomainQueue::entries() const {
    std::vector<InstanceFeature> out;
    out.reserve(static_cast<std::size_t>(fill_));
    const int start = fill_ < capacity_ ? 0 : cursor_;
    for (int i = 0; i < fill_; ++i) out.push_back(ring_[static_cast<std::size_t>((start + i) % capacity_)]);
    return out;
}

QueueBank::QueueBank(int capacity) {
    for (DomainTag d : {DomainTag::Source, DomainTag::Target})
        for (Stage s : {Stage::Backbone, Stage::Head})
            for (int l = 0; l < 3; ++l) queues_[static_cast<std::size_t>(index(d, s, l))] = DomainQueue(capacity, d, s, l);
}

int QueueBank::index(DomainTag d, Stage s, int level) {
    if (level < 0 || level > 2) throw InvalidArgument("QueueBank: level out of range");
    return (d == DomainTag::Source ? 0 : 6) + (s == Stage::Backbone ? 0 : 3) + level;
}

DomainQueue& QueueBank::get(DomainTag d, Stage s, int level) { return queues_[static_cast<std::size_t>(index(d, s, level))]; }
const DomainQueue& QueueBank::get(DomainTag d, Stage s, int level) const {
    return queues_[static_cast<std::size_t>(index(d, s, level))];
}

void QueueBank::update(std::span<const InstanceFeature> instances) {
    for (const InstanceFeature& f : instances) get(f.domain, f.stage, f.level).push(f);
}

std::vector<const DomainQueue*> QueueBank::all() const {
    std::vector<const DomainQueue*> out;
    for (const DomainQueue& q : queues_) out.push_back(&q);
    return out;
}

// ---------------------------------------------------------- adversarial

Tensor GradientReversal::backward(const Tensor& grad) const {
    Tensor g = grad;
    const auto f = static_cast<float>(-lambda);
    for (float& v : g.data) v *= f;
    return g;
}

double adv_bce(double logit, DomainTag domain, double* dlogit) {
    const double d = domain == DomainTag::Source ? 1.0 : 0.0;
    if (dlogit) *dlogit = sigmoid(logit) - d;
    return bce_with_logits(logit, d);
}

Discriminator::Discriminator(const std::string& name, int in_channels, int hidden)
    : conv_(name + ".conv", in_channels, hidden, 3, 1, true), linear_(name + ".fc", hidden, 1, 1, 1, true) {}

void Discriminator::init(std::mt19937_64& rng) {
    conv_.init(rng);
    linear_.init(rng);
}

std::vector<double> Discriminator::forward(const Tensor& features, Cache* cache) const {
    Tensor pre = conv_.forward(features);
    Tensor act = pre;
    nn::silu_inplace(act);
    const int n = act.dim(0), c = act.dim(1);
    const std::size_t hw = static_cast<std::size_t>(act.dim(2)) * act.dim(3);
    Tensor pooled({n, c, 1, 1});
    for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch) {
            const float* p = act.item(b) + static_cast<std::size_t>(ch) * hw;
            double acc = 0.0;
            for (std::size_t i = 0; i < hw; ++i) acc += p[i];
            pooled.item(b)[ch] = static_cast<float>(acc / static_cast<double>(hw));
        }
    Tensor logit = linear_.forward(pooled);
    std::vector<double> out(static_cast<std::size_t>(n));
    for (int b = 0; b < n; ++b) out[static_cast<std::size_t>(b)] = logit.item(b)[0];
    if (cache) {
        cache->input = features;
        cache->pre_act = std::move(pre);
        cache->pooled = std::move(pooled);
    }
    return out;
}

Tensor Discriminator::backward(const Cache& cache, std::span<const double> dlogits) {
    const int n = cache.pooled.dim(0);
    Tensor glogit({n, 1, 1, 1});
    for (int b = 0; b < n; ++b) glogit.item(b)[0] = static_cast<float>(dlogits[static_cast<std::size_t>(b)]);
    Tensor gpool = linear_.backward(cache.pooled, glogit);
    Tensor gact(cache.pre_act.shape);
    const int c = gact.dim(1);
    const std::size_t hw = static_cast<std::size_t>(gact.dim(2)) * gact.dim(3);
    for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch) {
            const float g = gpool.item(b)[ch] / static_cast<float>(hw);
            float* p = gact.item(b) + static_cast<std::size_t>(ch) * hw;
            std::fill(p, p + hw, g);
        }
    nn::silu_backward_inplace(cache.pre_act, gact);
    return conv_.backward(cache.input, gact);
}

void Discriminator::collect(nn::ParamList& out) {
    conv_.collect(out);
    linear_.collect(out);
}

void Discriminator::collect(nn::ConstParamList& out) const {
    conv_.collect(out);
    linear_.collect(out);
}

double adv_loss(std::span<Discriminator> discs, std::span<const Tensor> features, std::span<const DomainTag> domains,
                const GradientReversal& grl, std::vector<Tensor>* feature_grads, double scale) {
    if (discs.size() != features.size()) throw InvalidArgument("adv_loss: one discriminator per level required");
    const std::size_t levels = discs.size();
    if (levels == 0 || domains.empty()) return 0.0;
    if (feature_grads) feature_grads->assign(levels, Tensor());
    const double norm = 1.0 / (static_cast<double>(levels) * static_cast<double>(domains.size()));
    double total = 0.0;
    for (std::size_t l = 0; l < levels; ++l) {
        if (features[l].dim(0) != static_cast<int>(domains.size()))
            throw InvalidArgument("adv_loss: domain labels do not match the batch");
        Discriminator::Cache cache;
        const Tensor fwd = grl.forward(features[l]);
        const std::vector<double> logits = discs[l].forward(fwd, feature_grads ? &cache : nullptr);
        std::vector<double> dlogits(logits.size());
        for (std::size_t b = 0; b < logits.size(); ++b) {
            double g = 0.0;
            total += norm * adv_bce(logits[b], domains[b], &g);
            dlogits[b] = scale * norm * g;
        }
        if (feature_grads) (*feature_grads)[l] = grl.backward(discs[l].backward(cache, dlogits));
    }
    return total;
}

}  // namespace clda
