#include <doctest.h>

#include <cmath>
#include <random>

#include "clda/core/divergence.hpp"
#include "clda/uncertainty/uncertainty.hpp"
#include "toy.hpp"

using namespace clda;

namespace {

BoxDistribution random_distribution(std::mt19937_64& rng, int bins) {
    BoxDistribution d{bins, std::vector<double>(static_cast<std::size_t>(4 * bins))};
    std::uniform_real_distribution<double> u(0.01, 1.0);
    for (double& v : d.probs) v = u(rng);
    d.renormalize();
    return d;
}

Detection pseudo(std::mt19937_64& rng, double conf, int level) {
    Detection d{oracle::random_box(rng, 32, 8, 24), static_cast<int>(rng() % 2), conf, random_distribution(rng, 5),
                AnchorRef{level, 0}};
    return d;
}

struct ToyTargets {
    std::vector<AnchorPoint> anchors = toy::anchors();
    std::vector<DenseImagePrediction> preds;
    std::vector<PseudoTargets> targets;
};

ToyTargets toy_targets(std::uint64_t seed) {
    ToyTargets t;
    std::mt19937_64 rng(seed);
    Thresholds th;
    for (int i = 0; i < 2; ++i) {
        t.preds.push_back(toy::random_prediction(rng));
        std::vector<Detection> dets{pseudo(rng, 0.9, 0), pseudo(rng, 0.55, 1), pseudo(rng, 0.2, 0), pseudo(rng, 0.1, 1)};
        AssignOptions opt;
        opt.top_k = 3;
        t.targets.push_back(match_pseudo_labels(t.preds.back(), t.anchors, grade(dets, th), opt));
    }
    return t;
}

}  // namespace

TEST_SUITE("uncertainty") {

TEST_CASE("tiers partition confidences at the boundaries") {
    const Thresholds t;
    CHECK(tier_of(0.8, t) == Tier::Positive);
    CHECK(tier_of(0.3, t) == Tier::Negative);
    CHECK(tier_of(0.300001, t) == Tier::Uncertain);
    CHECK(tier_of(0.799999, t) == Tier::Uncertain);
    CHECK_THROWS_AS((Thresholds{0.8, 0.3}.validate()), InvalidArgument);
    CHECK_THROWS_AS((Thresholds{0.0, 0.3}.validate()), InvalidArgument);

    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<Detection> dets;
    for (int i = 0; i < 100; ++i) dets.push_back({{0, 0, 1, 1}, 0, u(rng), {}, {}});
    const auto g = grade(dets, t);
    int pos = 0, unc = 0, neg = 0;
    for (const auto& d : dets) {
        if (d.confidence >= 0.8) ++pos;
        else if (d.confidence > 0.3) ++unc;
        else ++neg;
    }
    CHECK(g.positives.size() == static_cast<std::size_t>(pos));
    CHECK(g.uncertains.size() == static_cast<std::size_t>(unc));
    CHECK(g.negatives.size() == static_cast<std::size_t>(neg));
    CHECK(grade(std::vector<Detection>{}, t).empty());
}

TEST_CASE("uncertain pseudo-label closed form: teacher 0.5 vs student 0.5 gives ln 2") {
    const auto anchors = toy::anchors();
    DenseImagePrediction p(20, 2, 5);
    PseudoTargets pt;
    pt.graded.uncertains.push_back({{0, 0, 8, 8}, 1, 0.5, {}, {}});
    pt.assignment = Assignment(20);
    pt.assignment.matched_gt[5] = 0;
    pt.assignment.target_class[5] = 1;
    const double l = uncertain_cls_loss(std::span(&p, 1), std::span(&pt, 1));
    CHECK(l * 20 == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    // the same anchor under a positive label targets 1
    pt.graded.positives = pt.graded.uncertains;
    pt.graded.uncertains.clear();
    p.cls(5)[1] = 40.0;
    CHECK(uncertain_cls_loss(std::span(&p, 1), std::span(&pt, 1)) < 1e-15);
}

TEST_CASE("negative box closed form: one side one-hot 0 vs one-hot 8") {
    DenseImagePrediction p(1, 1, 9);
    for (int s = 0; s < 4; ++s)
        for (int k = 0; k < 9; ++k) p.reg(0, s)[k] = (s == 0 ? (k == 0 ? 60.0 : -60.0) : 0.0);
    BoxDistribution teacher{9, std::vector<double>(36, 1.0 / 9.0)};
    for (int k = 0; k < 9; ++k) teacher.side(0)[k] = k == 8 ? 1.0 : 0.0;
    PseudoTargets pt;
    pt.graded.negatives.push_back({{0, 0, 4, 4}, 0, 0.1, teacher, AnchorRef{0, 0}});
    pt.negative_anchor.push_back(0);
    pt.assignment = Assignment(1);
    CHECK(negative_box_loss(std::span(&p, 1), std::span(&pt, 1)) == doctest::Approx(std::log(2.0) / 4).epsilon(1e-9));
}

TEST_CASE("negatives match the nearest anchor at their source level; missing distributions are skipped") {
    const auto anchors = toy::anchors();
    DenseImagePrediction p(20, 2, 5);
    GradedPseudoLabels g;
    BoxDistribution d{5, std::vector<double>(20, 0.2)};
    g.negatives.push_back({{0, 0, 6, 6}, 0, 0.1, d, AnchorRef{0, 0}});
    g.negatives.push_back({{0, 0, 6, 6}, 0, 0.1, d, AnchorRef{1, 16}});
    g.negatives.push_back({{0, 0, 6, 6}, 0, 0.1, std::nullopt, AnchorRef{0, 0}});
    const PseudoTargets pt = match_pseudo_labels(p, anchors, g, {});
    CHECK(pt.negative_anchor == std::vector<int>{0, 16, -1});
    CHECK(pt.skipped_negatives == 1);
    CHECK(pt.assignment.num_positive() == 0);
}

TEST_CASE("pseudo-labels mapped through a flip keep distributions consistent") {
    GradedPseudoLabels g;
    std::mt19937_64 rng(5);
    BoxDistribution d = random_distribution(rng, 5);
    g.negatives.push_back({{2, 4, 10, 12}, 1, 0.2, d, AnchorRef{0, 0}});
    const Affine2D flip{-1.0, 1.0, 32.0, 0.0};
    int dropped = 0;
    const auto m = transform_pseudo_labels(g, flip, 32, &dropped);
    REQUIRE(m.negatives.size() == 1);
    CHECK(m.negatives[0].box == BBox{22, 4, 30, 12});
    for (int k = 0; k < 5; ++k) {
        CHECK(m.negatives[0].box_distribution->side(0)[k] == doctest::Approx(d.side(2)[k]));
        CHECK(m.negatives[0].box_distribution->side(2)[k] == doctest::Approx(d.side(0)[k]));
        CHECK(m.negatives[0].box_distribution->side(1)[k] == doctest::Approx(d.side(1)[k]));
    }
    const Affine2D away{1.0, 1.0, 100.0, 0.0};
    CHECK(transform_pseudo_labels(g, away, 32, &dropped).empty());
    CHECK(dropped == 1);
}

TEST_CASE("distillation total is the sum of its four independently computed terms") {
    ToyTargets t = toy_targets(8);
    DistillWeights w{1.0, 1.0, 1.0, 1.0};
    const DistillBreakdown b = distill_loss(t.preds, t.targets, t.anchors, w);
    std::vector<Assignment> as{t.targets[0].assignment, t.targets[1].assignment};
    const double sum = uncertain_cls_loss(t.preds, t.targets) + dfl_loss(t.preds, as, t.anchors) +
                       iou_loss(t.preds, as, t.anchors) + negative_box_loss(t.preds, t.targets);
    CHECK(std::abs(b.total - sum) < 1e-9);
    CHECK(b.matched_negatives == 4);
    CHECK(b.matched_anchors > 0);
}

TEST_CASE("gradients of the tiered terms match central differences") {
    for (std::uint64_t seed : {21u, 22u, 23u}) {
        ToyTargets t = toy_targets(seed);
        {
            auto g = toy::zero_grads(t.preds);
            uncertain_cls_loss(t.preds, t.targets, GradSink{&g, 1.0});
            CHECK(toy::max_grad_error(t.preds, g, [&](const auto& p) { return uncertain_cls_loss(p, t.targets); }) < 1e-4);
        }
        {
            auto g = toy::zero_grads(t.preds);
            negative_box_loss(t.preds, t.targets, GradSink{&g, 1.0});
            CHECK(toy::max_grad_error(t.preds, g, [&](const auto& p) { return negative_box_loss(p, t.targets); }) < 1e-4);
        }
        {
            DistillWeights w;
            auto g = toy::zero_grads(t.preds);
            distill_loss(t.preds, t.targets, t.anchors, w, GradSink{&g, 1.0});
            CHECK(toy::max_grad_error(t.preds, g, [&](const auto& p) {
                      return distill_loss(p, t.targets, t.anchors, w).total;
                  }) < 1e-4);
        }
    }
}

}
