#include "clda/detector/detector.hpp"

#include <random>

#include "clda/core/types.hpp"

namespace clda {
namespace {

void add_into(Tensor& dst, const Tensor& src) {
    if (src.empty()) return;
    if (dst.empty()) {
        dst = src;
        return;
    }
    for (std::size_t i = 0; i < dst.size(); ++i) dst.data[i] += src.data[i];
}

}  // namespace

Detector::Detector(DetectorConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    stem_ = nn::ConvBnAct("backbone.stem", 3, cfg_.stem_width, 3, 2);
    int prev = cfg_.stem_width;
    for (int i = 0; i < 4; ++i) {
        const int w = cfg_.backbone_widths[static_cast<std::size_t>(i)];
        stages_[static_cast<std::size_t>(i)] =
            nn::ConvBnAct("backbone.stage" + std::to_string(i + 1), prev, w, 3, 2);
        prev = w;
    }
    for (int l = 0; l < 3; ++l) {
        const auto li = static_cast<std::size_t>(l);
        const std::string p = "head" + std::to_string(l);
        const int in = cfg_.backbone_widths[li + 1];
        const int hw = cfg_.head_widths[li];
        head_blocks_[li][0] = nn::ConvBnAct(p + ".block1", in, hw, 3, 1);
        head_blocks_[li][1] = nn::ConvBnAct(p + ".block2", hw, hw, 3, 1);
        cls_proj_[li] = nn::Conv2d(p + ".cls", hw, cfg_.num_classes, 1, 1, true);
        reg_proj_[li] = nn::Conv2d(p + ".reg", hw, 4 * cfg_.bins(), 1, 1, true);
    }
}

void Detector::init(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    stem_.init(rng);
    for (auto& s : stages_) s.init(rng);
    for (int l = 0; l < 3; ++l) {
        const auto li = static_cast<std::size_t>(l);
        for (auto& b : head_blocks_[li]) b.init(rng);
        cls_proj_[li].init(rng, 0.1);
        reg_proj_[li].init(rng, 0.1);
        // Class prior of 1% keeps the initial background loss small.
        std::fill(cls_proj_[li].bias.value.data.begin(), cls_proj_[li].bias.value.data.end(), -4.595f);
    }
}

void Detector::zero_weights() {
    for (nn::Parameter* p : parameters()) p->value.zero();
}

void Detector::check_input(const Tensor& images) const {
    if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != cfg_.input_size ||
        images.dim(3) != cfg_.input_size)
        throw InvalidArgument("detector: expected N x 3 x " + std::to_string(cfg_.input_size) + " x " +
                              std::to_string(cfg_.input_size) + " input, got " + images.shape_str());
}

ForwardResult Detector::forward(const Tensor& images, ForwardTrace& trace) {
    check_input(images);
    ForwardResult out;
    Tensor x = stem_.forward(images, nn::Mode::Train, &trace.stem);
    for (int i = 0; i < 4; ++i) {
        x = stages_[static_cast<std::size_t>(i)].forward(x, nn::Mode::Train, &trace.stages[static_cast<std::size_t>(i)]);
        if (i >= 1) out.features.backbone[static_cast<std::size_t>(i - 1)] = x;
    }
    for (int l = 0; l < 3; ++l) {
        const auto li = static_cast<std::size_t>(l);
        Tensor h = head_blocks_[li][0].forward(out.features.backbone[li], nn::Mode::Train, &trace.heads[li][0]);
        h = head_blocks_[li][1].forward(h, nn::Mode::Train, &trace.heads[li][1]);
        out.levels.push_back({cls_proj_[li].forward(h), reg_proj_[li].forward(h), l, cfg_.strides[li]});
        out.features.head[li] = std::move(h);
    }
    trace.features = out.features;
    return out;
}

ForwardResult Detector::infer(const Tensor& images) const {
    check_input(images);
    ForwardResult out;
    Tensor x = stem_.forward_eval(images);
    for (int i = 0; i < 4; ++i) {
        x = stages_[static_cast<std::size_t>(i)].forward_eval(x);
        if (i >= 1) out.features.backbone[static_cast<std::size_t>(i - 1)] = x;
    }
    for (int l = 0; l < 3; ++l) {
        const auto li = static_cast<std::size_t>(l);
        Tensor h = head_blocks_[li][1].forward_eval(head_blocks_[li][0].forward_eval(out.features.backbone[li]));
        out.levels.push_back({cls_proj_[li].forward(h), reg_proj_[li].forward(h), l, cfg_.strides[li]});
        out.features.head[li] = std::move(h);
    }
    return out;
}

void Detector::backward(const ForwardTrace& trace, const DetectorGrads& grads) {
    std::array<Tensor, 3> backbone_grad = grads.backbone;
    for (int l = 0; l < 3; ++l) {
        const auto li = static_cast<std::size_t>(l);
        const Tensor& feat = trace.features.head[li];
        Tensor gh = grads.head[li];
        if (li < grads.cls.size() && !grads.cls[li].empty()) add_into(gh, cls_proj_[li].backward(feat, grads.cls[li]));
        if (li < grads.reg.size() && !grads.reg[li].empty()) add_into(gh, reg_proj_[li].backward(feat, grads.reg[li]));
        if (gh.empty()) continue;
        gh = head_blocks_[li][1].backward(trace.heads[li][1], gh);
        add_into(backbone_grad[li], head_blocks_[li][0].backward(trace.heads[li][0], gh));
    }
    Tensor g;
    for (int i = 3; i >= 0; --i) {
        if (i >= 1) add_into(g, backbone_grad[static_cast<std::size_t>(i - 1)]);
        if (g.empty()) continue;
        g = stages_[static_cast<std::size_t>(i)].backward(trace.stages[static_cast<std::size_t>(i)], g);
    }
    if (!g.empty()) stem_.backward(trace.stem, g, false);
}

nn::ParamList Detector::parameters() {
    nn::ParamList out;
    stem_.collect(out);
    for (auto& s : stages_) s.collect(out);
    for (int l = 0; l < 3; ++l) {
        const auto li = static_cast<std::size_t>(l);
        for (auto& b : head_blocks_[li]) b.collect(out);
        cls_proj_[li].collect(out);
        reg_proj_[li].collect(out);
    }
    return out;
}

nn::ConstParamList Detector::parameters() const {
    nn::ConstParamList out;
    stem_.collect(out);
    for (const auto& s : stages_) s.collect(out);
    for (int l = 0; l < 3; ++l) {
        const auto li = static_cast<std::size_t>(l);
        for (const auto& b : head_blocks_[li]) b.collect(out);
        cls_proj_[li].collect(out);
        reg_proj_[li].collect(out);
    }
    return out;
}

Tensor images_to_tensor(std::span<const Image> images) {
    if (images.empty()) throw InvalidArgument("images_to_tensor: empty batch");
    const int h = images[0].height, w = images[0].width;
    Tensor t({static_cast<int>(images.size()), 3, h, w});
    for (std::size_t n = 0; n < images.size(); ++n) {
        const Image& im = images[n];
        if (im.height != h || im.width != w) throw InvalidArgument("images_to_tensor: mixed resolutions");
        float* dst = t.item(static_cast<int>(n));
        const std::size_t plane = static_cast<std::size_t>(h) * w;
        for (std::size_t i = 0; i < plane; ++i)
            for (int c = 0; c < 3; ++c) dst[c * plane + i] = im.pixels[i * 3 + static_cast<std::size_t>(c)];
    }
    return t;
}

DenseImagePrediction gather_dense(const std::vector<LevelPrediction>& levels, int image, const DetectorConfig& cfg) {
    DenseImagePrediction p(cfg.num_anchors(), cfg.num_classes, cfg.bins());
    int offset = 0;
    for (const LevelPrediction& lv : levels) {
        const int h = lv.cls.dim(2), w = lv.cls.dim(3);
        const std::size_t hw = static_cast<std::size_t>(h) * w;
        const float* cls = lv.cls.item(image);
        const float* reg = lv.reg.item(image);
        for (std::size_t i = 0; i < hw; ++i) {
            const int a = offset + static_cast<int>(i);
            for (int c = 0; c < p.num_classes; ++c) p.cls(a)[c] = cls[static_cast<std::size_t>(c) * hw + i];
            for (int s = 0; s < 4; ++s)
                for (int k = 0; k < p.bins; ++k)
                    p.reg(a, s)[k] = reg[static_cast<std::size_t>(s * p.bins + k) * hw + i];
        }
        offset += static_cast<int>(hw);
    }
    return p;
}

DetectorGrads make_grads(const std::vector<LevelPrediction>& levels) {
    DetectorGrads g;
    for (const LevelPrediction& lv : levels) {
        g.cls.emplace_back(lv.cls.shape);
        g.reg.emplace_back(lv.reg.shape);
    }
    return g;
}

void scatter_dense_grad(const DenseGrad& g, int image, const DetectorConfig& cfg, DetectorGrads& out) {
    int offset = 0;
    for (int l = 0; l < cfg.num_levels(); ++l) {
        const auto li = static_cast<std::size_t>(l);
        const int gs = cfg.grid_size(l);
        const std::size_t hw = static_cast<std::size_t>(gs) * gs;
        float* cls = out.cls[li].item(image);
        float* reg = out.reg[li].item(image);
        for (std::size_t i = 0; i < hw; ++i) {
            const int a = offset + static_cast<int>(i);
            for (int c = 0; c < g.num_classes; ++c)
                cls[static_cast<std::size_t>(c) * hw + i] += static_cast<float>(g.cls(a)[c]);
            for (int s = 0; s < 4; ++s)
                for (int k = 0; k < g.bins; ++k)
                    reg[static_cast<std::size_t>(s * g.bins + k) * hw + i] += static_cast<float>(g.reg(a, s)[k]);
        }
        offset += static_cast<int>(hw);
    }
}

}  // namespace clda
