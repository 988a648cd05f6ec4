#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "clda/detector/assign.hpp"
#include "clda/detector/detector.hpp"
#include "clda/detector/nms.hpp"
#include "oracles.hpp"

using namespace clda;

namespace {

DetectorConfig small_config() {
    DetectorConfig c;
    c.input_size = 64;
    c.stem_width = 4;
    c.backbone_widths = {6, 8, 8, 8};
    c.head_widths = {6, 6, 6};
    c.reg_max = 4;
    return c;
}

Tensor random_images(int n, int size, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    Tensor t({n, 3, size, size});
    for (float& v : t.data) v = u(rng);
    return t;
}

}  // namespace

TEST_SUITE("detector") {

TEST_CASE("anchors are flattened level by level, row-major, at cell centres") {
    DetectorConfig cfg;
    const auto a = make_anchors(cfg);
    REQUIRE(a.size() == 32 * 32 + 16 * 16 + 8 * 8);
    CHECK(cfg.num_anchors() == 1344);
    CHECK(a[0].cx == 4.0);
    CHECK(a[1].cx == 12.0);
    CHECK(a[32].cy == 12.0);
    CHECK(a[1024].level == 1);
    CHECK(a[1024].cx == 8.0);
    CHECK(a[1024].stride == 16.0);
    CHECK(a.back().cx == 256.0 - 16.0);
}

TEST_CASE("decode_dfl closed forms") {
    std::vector<double> one_hot(9, 0.0);
    one_hot[3] = 1.0;
    CHECK(decode_dfl(one_hot, 8.0) == 24.0);
    std::vector<double> uniform(9, 1.0 / 9.0);
    CHECK(decode_dfl(uniform, 8.0) == doctest::Approx(32.0).epsilon(1e-12));
    for (int k = 0; k < 9; ++k) {
        std::vector<double> h(9, 0.0);
        h[static_cast<std::size_t>(k)] = 1.0;
        CHECK(decode_dfl(h, 16.0) == k * 16.0);
    }
    CHECK_THROWS_AS(decode_dfl(std::vector<double>{0.5, 0.4}, 8.0), InvalidArgument);

    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(-3, 3);
    for (int t = 0; t < 100; ++t) {
        std::vector<double> z(9), p(9);
        for (double& v : z) v = u(rng);
        softmax(z, p);
        const double d = decode_dfl(p, 8.0);
        CHECK(d >= 0.0);
        CHECK(d <= 64.0);
    }
}

TEST_CASE("forward shapes at 256x256") {
    DetectorConfig cfg;
    Detector det(cfg);
    det.init(1);
    const ForwardResult r = det.infer(random_images(2, 256, 2));
    REQUIRE(r.levels.size() == 3);
    CHECK(r.levels[0].cls.shape == std::vector<int>{2, 3, 32, 32});
    CHECK(r.levels[1].cls.shape == std::vector<int>{2, 3, 16, 16});
    CHECK(r.levels[2].cls.shape == std::vector<int>{2, 3, 8, 8});
    CHECK(r.levels[0].reg.shape == std::vector<int>{2, 36, 32, 32});
    CHECK(r.features.backbone[0].dim(1) == 64);
    CHECK(r.features.backbone[2].dim(1) == 256);
    CHECK(r.features.head[1].dim(2) == 16);
}

TEST_CASE("zero-weight model gives uniform scores; inference is deterministic and pure") {
    const DetectorConfig cfg = small_config();
    Detector det(cfg);
    det.zero_weights();
    const ForwardResult r = det.infer(random_images(2, 64, 3));
    for (const auto& l : r.levels)
        for (float v : l.cls.data) CHECK(v == r.levels[0].cls.data[0]);

    det.init(5);
    const Tensor x = random_images(2, 64, 4);
    const std::uint64_t before = det.weight_hash();
    const ForwardResult a = det.infer(x), b = det.infer(x);
    CHECK(det.weight_hash() == before);
    CHECK(a.levels[2].reg.data == b.levels[2].reg.data);

    ForwardTrace trace;
    det.forward(x, trace);
    CHECK(det.weight_hash() != before);  // running statistics move in training mode
}

TEST_CASE("backward matches finite differences and reaches every parameter") {
    const DetectorConfig cfg = small_config();
    Detector det(cfg);
    det.init(11);
    const Tensor x = random_images(2, 64, 12);

    // L = sum of random projections of every output and of the exposed features
    ForwardTrace trace;
    ForwardResult r0 = det.forward(x, trace);
    std::mt19937_64 rng(13);
    std::normal_distribution<float> n01(0.0f, 1.0f);
    DetectorGrads g = make_grads(r0.levels);
    for (auto& t : g.cls) for (float& v : t.data) v = n01(rng);
    for (auto& t : g.reg) for (float& v : t.data) v = n01(rng);
    for (int l = 0; l < 3; ++l) {
        g.backbone[l] = Tensor(r0.features.backbone[l].shape);
        g.head[l] = Tensor(r0.features.head[l].shape);
        for (float& v : g.backbone[l].data) v = n01(rng);
        for (float& v : g.head[l].data) v = n01(rng);
    }
    auto objective = [&](Detector& d) {
        ForwardTrace t;
        const ForwardResult r = d.forward(x, t);
        double s = 0.0;
        for (int l = 0; l < 3; ++l) {
            for (std::size_t i = 0; i < r.levels[l].cls.size(); ++i) s += double(r.levels[l].cls.data[i]) * g.cls[l].data[i];
            for (std::size_t i = 0; i < r.levels[l].reg.size(); ++i) s += double(r.levels[l].reg.data[i]) * g.reg[l].data[i];
            for (std::size_t i = 0; i < r.features.backbone[l].size(); ++i)
                s += double(r.features.backbone[l].data[i]) * g.backbone[l].data[i];
            for (std::size_t i = 0; i < r.features.head[l].size(); ++i)
                s += double(r.features.head[l].data[i]) * g.head[l].data[i];
        }
        return s;
    };

    auto params = det.parameters();
    for (auto* p : params)
        if (p->trainable) p->grad.zero();
    det.backward(trace, g);

    int nonzero = 0, trainable = 0;
    for (auto* p : params) {
        if (!p->trainable) continue;
        ++trainable;
        double mx = 0;
        for (float v : p->grad.data) mx = std::max(mx, double(std::abs(v)));
        nonzero += mx > 0.0;
    }
    CHECK(nonzero == trainable);

    int checked = 0, good = 0;
    for (auto* p : params) {
        if (!p->trainable) continue;
        for (std::size_t idx : {std::size_t{0}, p->value.size() / 2, p->value.size() - 1}) {
            const float orig = p->value.data[idx];
            const float h = 1e-2f;
            p->value.data[idx] = orig + h;
            const double fp = objective(det);
            p->value.data[idx] = orig - h;
            const double fm = objective(det);
            p->value.data[idx] = orig;
            const double fd = (fp - fm) / (2.0 * h);
            const double an = p->grad.data[idx];
            ++checked;
            if (std::abs(fd - an) <= 2e-2 * std::max({std::abs(fd), std::abs(an), 1e-1})) ++good;
            else MESSAGE(p->name << "[" << idx << "] analytic " << an << " fd " << fd);
        }
    }
    // float32 differences through batch norm are noisy; demand near-total agreement
    CHECK(good >= checked - 1);
}

TEST_CASE("assignment basics") {
    DetectorConfig cfg;
    const auto anchors = make_anchors(cfg);
    DenseImagePrediction pred(cfg.num_anchors(), cfg.num_classes, cfg.bins());
    CHECK(assign(pred, anchors, {}).num_positive() == 0);

    const std::vector<LabeledBox> whole{{{0, 0, 256, 256}, 1}};
    const Assignment a = assign(pred, anchors, whole);
    CHECK(a.num_positive() == 10);
    for (int i : a.positives()) {
        CHECK(center_inside(anchors[static_cast<std::size_t>(i)], whole[0].box));
        CHECK(a.target_class[static_cast<std::size_t>(i)] == 1);
    }
    CHECK_FALSE(center_inside(AnchorPoint{8, 8, 8, 0}, BBox{8, 0, 16, 16}));  // on the edge is outside
}

TEST_CASE("assignment on a 3x3 toy grid matches exhaustive ranking") {
    std::vector<AnchorPoint> anchors;
    for (int y = 0; y < 3; ++y)
        for (int x = 0; x < 3; ++x) anchors.push_back({x * 8 + 4.0, y * 8 + 4.0, 8.0, 0});
    std::mt19937_64 rng(21);
    std::uniform_real_distribution<double> u(0.05, 0.95);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> probs(9 * 2);
        for (double& p : probs) p = u(rng);
        std::vector<BBox> boxes;
        for (int i = 0; i < 9; ++i) boxes.push_back(oracle::random_box(rng, 24, 4, 20));
        const LabeledBox gt{oracle::random_box(rng, 24, 6, 24), trial % 2};
        AssignOptions opt;
        opt.top_k = 4;
        const Assignment a = assign_from(probs, 2, boxes, anchors, std::span<const LabeledBox>(&gt, 1), opt);

        std::vector<std::pair<double, int>> ranked;
        for (int i = 0; i < 9; ++i) {
            const auto& an = anchors[static_cast<std::size_t>(i)];
            if (!(an.cx > gt.box.x1 && an.cx < gt.box.x2 && an.cy > gt.box.y1 && an.cy < gt.box.y2)) continue;
            const double t = probs[static_cast<std::size_t>(i * 2 + gt.category)] *
                             std::pow(oracle::iou(boxes[static_cast<std::size_t>(i)], gt.box), 6.0);
            ranked.push_back({-t, i});
        }
        std::sort(ranked.begin(), ranked.end());
        std::set<int> expect;
        for (std::size_t k = 0; k < ranked.size() && k < 4; ++k) expect.insert(ranked[k].second);
        const auto pos = a.positives();
        CHECK(std::set<int>(pos.begin(), pos.end()) == expect);
    }
}

TEST_CASE("an anchor claimed by two GTs keeps the higher-metric pair") {
    std::vector<AnchorPoint> anchors{{10, 10, 8, 0}};
    const std::vector<double> probs{0.5, 0.9};
    const std::vector<BBox> pred{{2, 2, 18, 18}};
    const std::vector<LabeledBox> gts{{{0, 0, 20, 20}, 0}, {{1, 1, 19, 19}, 1}};
    const Assignment a = assign_from(probs, 2, pred, anchors, gts);
    CHECK(a.matched_gt[0] == 1);
    CHECK(a.target_class[0] == 1);
}

TEST_CASE("nms closed cases") {
    Detection d{{0, 0, 10, 10}, 0, 0.9, {}, {}};
    CHECK(nms({d}, 0.5).size() == 1);
    Detection e = d;
    e.confidence = 0.8;
    const auto kept = nms({e, d}, 0.5);
    REQUIRE(kept.size() == 1);
    CHECK(kept[0].confidence == 0.9);
    e.category = 1;
    CHECK(nms({e, d}, 0.5).size() == 2);
}

TEST_CASE("nms equals the exhaustive fixed-point oracle and ignores input order") {
    std::mt19937_64 rng(99);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<Detection> dets;
        for (int i = 0; i < 6; ++i)
            dets.push_back({oracle::random_box(rng, 40, 8, 24), static_cast<int>(u(rng) * 2), u(rng), {}, {}});
        std::vector<Detection> ranked = dets;
        std::sort(ranked.begin(), ranked.end(), ranks_before);
        const std::vector<bool> keep = oracle::nms_exhaustive(ranked, 0.5);
        REQUIRE(keep.size() == ranked.size());
        std::vector<Detection> expect;
        for (std::size_t i = 0; i < ranked.size(); ++i)
            if (keep[i]) expect.push_back(ranked[i]);
        std::shuffle(dets.begin(), dets.end(), rng);
        const auto got = nms(dets, 0.5);
        REQUIRE(got.size() == expect.size());
        for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i].box == expect[i].box);
        for (std::size_t i = 0; i < got.size(); ++i)
            for (std::size_t j = i + 1; j < got.size(); ++j)
                if (got[i].category == got[j].category) CHECK(oracle::iou(got[i].box, got[j].box) <= 0.5);
    }
}

TEST_CASE("postprocess clips to the image and keeps the source anchor") {
    DetectorConfig cfg;
    const auto anchors = make_anchors(cfg);
    DenseImagePrediction pred(cfg.num_anchors(), cfg.num_classes, cfg.bins());
    for (double& v : pred.cls_logits) v = -10.0;
    pred.cls(0)[2] = 3.0;                    // corner anchor with wide offsets
    for (int s = 0; s < 4; ++s) pred.reg(0, s)[8] = 10.0;
    PostprocessOptions opt;
    const auto dets = postprocess(pred, anchors, 256, opt);
    REQUIRE(dets.size() == 1);
    CHECK(dets[0].box.x1 == 0.0);
    CHECK(dets[0].box.y1 == 0.0);
    CHECK(dets[0].category == 2);
    REQUIRE(dets[0].source.has_value());
    CHECK(dets[0].source->index == 0);
    REQUIRE(dets[0].box_distribution.has_value());
    CHECK(dets[0].box_distribution->rows_normalized());
}

}
