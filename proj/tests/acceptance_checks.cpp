#include <doctest.h>

#include <algorithm>
#include <random>

#include "clda/detector/nms.hpp"
#include "clda/eval/eval.hpp"
#include "clda/uncertainty/uncertainty.hpp"
#include "oracles.hpp"

using namespace clda;

TEST_SUITE("acceptance") {

TEST_CASE("tier partition of 10k random confidences") {
    std::mt19937_64 rng(2024);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const Thresholds t;
    std::vector<Detection> dets;
    for (int i = 0; i < 10000; ++i) {
        // a sprinkling of exact boundary values
        const double c = i % 97 == 0 ? t.low : i % 89 == 0 ? t.high : u(rng);
        dets.push_back({{0, 0, 1, 1}, 0, c, {}, {}});
    }
    const GradedPseudoLabels g = grade(dets, t);
    CHECK(g.positives.size() + g.uncertains.size() + g.negatives.size() == dets.size());
    for (const auto& d : g.positives) CHECK(d.confidence >= t.high);
    for (const auto& d : g.uncertains) CHECK((d.confidence > t.low && d.confidence < t.high));
    for (const auto& d : g.negatives) CHECK(d.confidence <= t.low);
    std::size_t pos = 0, neg = 0;
    for (const auto& d : dets) {
        pos += d.confidence >= t.high;
        neg += d.confidence <= t.low;
        CHECK(tier_of(d.confidence, t) ==
              (d.confidence >= t.high ? Tier::Positive : d.confidence <= t.low ? Tier::Negative : Tier::Uncertain));
    }
    CHECK(g.positives.size() == pos);
    CHECK(g.negatives.size() == neg);
}

TEST_CASE("nms and match agree with exhaustive oracles on 50 instances of 5 to 10 boxes") {
    std::mt19937_64 rng(77);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
        const int n = 5 + trial % 6;
        std::vector<Detection> dets;
        for (int i = 0; i < n; ++i)
            dets.push_back({oracle::random_box(rng, 48, 8, 28), static_cast<int>(u(rng) * 2), u(rng), {}, {}});
        std::vector<Detection> ranked = dets;
        std::sort(ranked.begin(), ranked.end(), ranks_before);
        const std::vector<bool> keep = oracle::nms_exhaustive(ranked, 0.5);
        std::vector<Detection> expect;
        for (std::size_t i = 0; i < ranked.size(); ++i)
            if (keep[i]) expect.push_back(ranked[i]);
        const auto got = nms(dets, 0.5);
        REQUIRE(got.size() == expect.size());
        for (std::size_t i = 0; i < got.size(); ++i) {
            CHECK(got[i].box == expect[i].box);
            CHECK(got[i].confidence == expect[i].confidence);
        }

        std::vector<LabeledBox> gts;
        const int ng = 5 + (trial * 3) % 6;
        for (int i = 0; i < ng; ++i) gts.push_back({oracle::random_box(rng, 48, 8, 28), 0});
        std::vector<Detection> preds;
        for (int i = 0; i < n; ++i) {
            const BBox& g = gts[static_cast<std::size_t>(i) % gts.size()].box;
            const double j = 5.0 * u(rng);
            preds.push_back({{g.x1 + j, g.y1 - j, g.x2 + j, g.y2}, 0, u(rng), {}, {}});
        }
        std::sort(preds.begin(), preds.end(), ranks_before);
        CHECK(match(preds, gts) == oracle::match_exhaustive(preds, gts, 0.5));
    }
}

}
