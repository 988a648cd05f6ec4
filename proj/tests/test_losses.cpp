#include <doctest.h>

#include <cmath>
#include <random>

#include "clda/losses/sup_losses.hpp"
#include "toy.hpp"

using namespace clda;

namespace {

struct ToyBatch {
    std::vector<AnchorPoint> anchors = toy::anchors();
    std::vector<DenseImagePrediction> preds;
    std::vector<Assignment> assigns;
};

ToyBatch toy_batch(std::uint64_t seed) {
    ToyBatch b;
    std::mt19937_64 rng(seed);
    for (int i = 0; i < 2; ++i) {
        b.preds.push_back(toy::random_prediction(rng));
        AssignOptions opt;
        opt.top_k = 3;
        b.assigns.push_back(assign(b.preds.back(), b.anchors, toy::random_gts(rng, 2), opt));
    }
    return b;
}

}  // namespace

TEST_SUITE("sup_losses") {

TEST_CASE("classification closed forms") {
    DenseImagePrediction p(1, 1, 5);
    Assignment a(1);
    a.matched_gt[0] = 0;
    a.target_class[0] = 0;
    a.pred_iou[0] = 1.0;
    CHECK(cls_loss(std::span(&p, 1), std::span(&a, 1), ClsTarget::Hard) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(cls_loss(std::span(&p, 1), std::span(&a, 1), ClsTarget::IouAware) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    Assignment neg(1);
    p.cls(0)[0] = -30.0;
    CHECK(cls_loss(std::span(&p, 1), std::span(&neg, 1)) < 1e-12);
}

TEST_CASE("dfl closed forms") {
    const std::vector<double> uniform(9, 0.0);
    CHECK(dfl_side_loss(uniform, 3.5) == doctest::Approx(std::log(9.0)).epsilon(1e-12));
    CHECK(dfl_side_loss(uniform, 0.0) == doctest::Approx(std::log(9.0)).epsilon(1e-12));
    std::vector<double> peaked(9, -40.0);
    peaked[3] = peaked[4] = 40.0;
    // mass split evenly between the bracketing bins is optimal only for target 3.5
    CHECK(dfl_side_loss(peaked, 3.5) == doctest::Approx(std::log(2.0)).epsilon(1e-9));
    CHECK(dfl_side_loss(peaked, 3.0) == doctest::Approx(std::log(2.0)).epsilon(1e-9));
}

TEST_CASE("iou loss closed forms") {
    const std::vector<BBox> p{{0, 0, 2, 2}}, t{{1, 1, 3, 3}};
    CHECK(iou_loss(p, t) == doctest::Approx(1.0 - 1.0 / 7.0).epsilon(1e-12));
    CHECK(iou_loss(t, t) == 0.0);
    const std::vector<BBox> far{{10, 10, 12, 12}};
    CHECK(iou_loss(far, t) == 1.0);
    CHECK(iou_loss(std::vector<BBox>{}, std::vector<BBox>{}) == 0.0);
}

TEST_CASE("iou_with_grad matches finite differences") {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 200; ++trial) {
        const BBox p = oracle::random_box(rng, 40, 5, 30), g = oracle::random_box(rng, 40, 5, 30);
        const auto [v, grad] = iou_with_grad(p, g);
        CHECK(v == doctest::Approx(oracle::iou(p, g)).epsilon(1e-12));
        if (v == 0.0) continue;
        std::vector<double> x{p.x1, p.y1, p.x2, p.y2};
        for (int k = 0; k < 4; ++k) {
            const double fd = oracle::central_diff(
                [&](const std::vector<double>& c) { return oracle::iou({c[0], c[1], c[2], c[3]}, g); }, x,
                static_cast<std::size_t>(k), 1e-6);
            CHECK(oracle::rel_err(grad[static_cast<std::size_t>(k)], fd, 1e-6) < 1e-4);
        }
    }
}

TEST_CASE("weighted total is the sum of independently computed terms") {
    ToyBatch b = toy_batch(7);
    SupLossOptions opt;
    opt.weights = {1.0, 1.0, 1.0};
    const SupLossBreakdown s = supervised_loss(b.preds, b.assigns, b.anchors, opt);
    const double c = cls_loss(b.preds, b.assigns), d = dfl_loss(b.preds, b.assigns, b.anchors),
                 i = iou_loss(b.preds, b.assigns, b.anchors);
    CHECK(std::abs(s.total - (c + d + i)) < 1e-9);
    CHECK(s.positives == b.assigns[0].num_positive() + b.assigns[1].num_positive());

    opt.weights = {0.5, 1.5, 7.5};
    const SupLossBreakdown w = supervised_loss(b.preds, b.assigns, b.anchors, opt);
    CHECK(std::abs(w.total - (0.5 * c + 1.5 * d + 7.5 * i)) < 1e-9);
}

TEST_CASE("analytic gradients of every term match central differences") {
    for (std::uint64_t seed : {11u, 12u, 13u}) {
        ToyBatch b = toy_batch(seed);
        REQUIRE(b.assigns[0].num_positive() + b.assigns[1].num_positive() > 0);
        for (ClsTarget target : {ClsTarget::IouAware, ClsTarget::Hard}) {
            SupLossOptions opt;
            opt.cls_target = target;
            auto g = toy::zero_grads(b.preds);
            supervised_loss(b.preds, b.assigns, b.anchors, opt, GradSink{&g, 1.0});
            const double err = toy::max_grad_error(b.preds, g, [&](const std::vector<DenseImagePrediction>& p) {
                return supervised_loss(p, b.assigns, b.anchors, opt).total;
            });
            CHECK(err < 1e-4);
        }
    }
}

TEST_CASE("supervised loss rejects target samples") {
    const auto anchors = toy::anchors();
    std::mt19937_64 rng(1);
    std::vector<DenseImagePrediction> preds{toy::random_prediction(rng)};
    std::vector<Sample> batch(1);
    batch[0].domain = DomainTag::Target;
    CHECK_THROWS_AS(supervised_loss(batch, preds, anchors, {}, {}), InvalidArgument);
    batch[0].domain = DomainTag::Source;
    batch[0].labels = std::vector<LabeledBox>{};
    CHECK(supervised_loss(batch, preds, anchors, {}, {}).positives == 0);
}

TEST_CASE("non-finite logits are rejected") {
    std::mt19937_64 rng(2);
    std::vector<DenseImagePrediction> preds{toy::random_prediction(rng)};
    preds[0].cls_logits[3] = std::nan("");
    std::vector<Assignment> as{Assignment(20)};
    CHECK_THROWS_AS(cls_loss(preds, as), InvalidArgument);
}

}
