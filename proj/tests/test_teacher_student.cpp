#include <doctest.h>

#include <cmath>
#include <set>

#include "clda/core/rng.hpp"
#include "clda/teacher_student/trainer.hpp"
#include "tempdir.hpp"

using namespace clda;

namespace {

TrainConfig tiny_config() {
    TrainConfig c;
    c.detector.input_size = 64;
    c.detector.stem_width = 4;
    c.detector.backbone_widths = {6, 8, 8, 8};
    c.detector.head_widths = {6, 6, 6};
    c.detector.reg_max = 4;
    c.batch_size = 2;
    c.adapt_steps = 10;
    c.burn_in_steps = 10;
    c.warmup_steps = 2;
    c.disc_hidden = 4;
    c.ca.queue_capacity = 16;
    c.ca.harvest_floor = 0.0;  // an untrained model still harvests instances
    c.teacher_post.confidence_floor = 0.0;
    c.gain.warmup_steps = 2;
    return c;
}

std::vector<Sample> samples(DomainTag domain, int n, std::uint64_t seed) {
    SceneSpec spec;
    spec.canvas = 64;
    spec.min_size = 12;
    spec.max_size = 30;
    std::vector<Sample> out;
    for (int i = 0; i < n; ++i) {
        Scene s = generate_scene(derive_seed(seed, {static_cast<std::uint64_t>(i)}), spec);
        Sample x;
        x.domain = domain;
        x.id = std::to_string(i);
        if (domain == DomainTag::Source) {
            x.image = std::move(s.image);
            x.labels = std::move(s.boxes);
        } else {
            x.image = apply_domain_shift(s.image, make_depth_field(seed + i, 64, 64, DomainShiftSpec{}),
                                         DatasetSpec::default_target_shift(), seed + i);
        }
        out.push_back(std::move(x));
    }
    return out;
}

Trainer adapted_trainer(TrainConfig cfg) {
    Trainer t(std::move(cfg));
    t.initialize();
    const auto src = samples(DomainTag::Source, 2, 1);
    t.burn_in_step(src);
    t.finish_burn_in();
    return t;
}

std::vector<FloatBuffer> values(const Detector& d) {
    std::vector<FloatBuffer> out;
    for (const auto* p : d.parameters()) out.push_back(p->value.data);
    return out;
}

}  // namespace

TEST_SUITE("teacher_student") {

TEST_CASE("ema_update exactness for alpha 0, 0.5, 1 over weights and statistics") {
    const TrainConfig cfg = tiny_config();
    Detector s(cfg.detector), t(cfg.detector);
    s.init(1);
    t.init(2);
    // make the running statistics differ too
    ForwardTrace trace;
    s.forward(images_to_tensor(std::vector<Image>{samples(DomainTag::Source, 1, 3)[0].image}), trace);

    Detector t1 = t;
    ema_update(t1, s, 1.0);
    CHECK(t1.weight_hash() == t.weight_hash());

    Detector th = t;
    ema_update(th, s, 0.5);
    const auto tv = values(t), sv = values(s), hv = values(th);
    bool exact = true;
    for (std::size_t i = 0; i < tv.size(); ++i)
        for (std::size_t k = 0; k < tv[i].size(); ++k)
            exact &= hv[i][k] == static_cast<float>(0.5 * tv[i][k] + 0.5 * static_cast<double>(sv[i][k]));
    CHECK(exact);

    Detector t0 = t;
    ema_update(t0, s, 0.0);
    CHECK(t0.weight_hash() == s.weight_hash());

    TrainConfig other = cfg;
    other.detector.head_widths = {6, 6, 8};
    Detector mismatch(other.detector);
    CHECK_THROWS_AS(ema_update(mismatch, s, 0.5), InvalidArgument);
    CHECK_THROWS_AS(ema_update(t, s, 1.5), InvalidArgument);
}

TEST_CASE("ema scalar case") {
    const TrainConfig cfg = tiny_config();
    Detector s(cfg.detector), t(cfg.detector);
    s.zero_weights();
    for (auto* p : t.parameters()) std::fill(p->value.data.begin(), p->value.data.end(), 1.0f);
    ema_update(t, s, 0.9);
    for (const auto* p : t.parameters()) CHECK(p->value.data[0] == doctest::Approx(0.9f));
}

TEST_CASE("burn-in ends with a bit-exact teacher copy and rejects target samples") {
    Trainer zero(tiny_config());
    zero.initialize();
    zero.finish_burn_in();
    CHECK(zero.teacher().weight_hash() == zero.student().weight_hash());
    CHECK(zero.state().phase == Phase::Adapt);
    CHECK(zero.state().step == 0);

    Trainer t(tiny_config());
    t.initialize();
    const auto src = samples(DomainTag::Source, 2, 4);
    const std::uint64_t init = t.student().weight_hash();
    const StepRecord r = t.burn_in_step(src);
    CHECK(r.finite);
    CHECK(r.total == doctest::Approx(r.l_sup));
    CHECK(t.student().weight_hash() != init);
    CHECK(t.teacher().weight_hash() == init);
    CHECK_THROWS_AS(t.burn_in_step(samples(DomainTag::Target, 2, 5)), InvalidArgument);
    CHECK_THROWS_AS(t.train_step(src, samples(DomainTag::Target, 2, 5)), InvalidArgument);
    t.finish_burn_in();
    CHECK(t.teacher().weight_hash() == t.student().weight_hash());
    CHECK_THROWS_AS(t.burn_in_step(src), InvalidArgument);
}

TEST_CASE("teacher is moved only by the EMA") {
    TrainConfig cfg = tiny_config();
    cfg.ema_decay = 1.0;
    Trainer t = adapted_trainer(cfg);
    const auto src = samples(DomainTag::Source, 2, 6), tgt = samples(DomainTag::Target, 2, 7);
    const std::vector<Image> weak{tgt[0].image, tgt[1].image};
    const auto before = generate_pseudo_labels(t.teacher(), weak, cfg.teacher_post);
    const std::uint64_t th = t.teacher().weight_hash(), sh = t.student().weight_hash();
    for (int i = 0; i < 3; ++i) CHECK(t.train_step(src, tgt).finite);
    CHECK(t.teacher().weight_hash() == th);
    CHECK(t.student().weight_hash() != sh);
    const auto after = generate_pseudo_labels(t.teacher(), weak, cfg.teacher_post);
    REQUIRE(after.size() == before.size());
    for (std::size_t i = 0; i < after.size(); ++i) {
        REQUIRE(after[i].size() == before[i].size());
        for (std::size_t k = 0; k < after[i].size(); ++k) {
            CHECK(after[i][k].box == before[i][k].box);
            CHECK(after[i][k].confidence == before[i][k].confidence);
        }
    }
}

TEST_CASE("teacher after a step is the EMA of the pre-step teacher and post-step student") {
    TrainConfig cfg = tiny_config();
    cfg.ema_decay = 0.75;
    Trainer t = adapted_trainer(cfg);
    const auto src = samples(DomainTag::Source, 2, 8), tgt = samples(DomainTag::Target, 2, 9);
    t.train_step(src, tgt);  // decouple teacher from student first
    Detector expect = t.teacher();
    t.train_step(src, tgt);
    ema_update(expect, t.student(), 0.75);
    CHECK(expect.weight_hash() == t.teacher().weight_hash());
}

TEST_CASE("with zero unsupervised weights a step is a pure supervised step") {
    TrainConfig a = tiny_config();
    a.lambda_distill = a.lambda_adv = a.lambda_ca = 0.0;
    TrainConfig b = tiny_config();
    b.components = Components::preset("source_only");
    Trainer ta = adapted_trainer(a), tb = adapted_trainer(b);
    REQUIRE(ta.student().weight_hash() == tb.student().weight_hash());
    const auto src = samples(DomainTag::Source, 2, 10), tgt = samples(DomainTag::Target, 2, 11);
    const StepRecord ra = ta.train_step(src, tgt);
    const StepRecord rb = tb.train_step(src, tgt);
    CHECK(ta.student().weight_hash() == tb.student().weight_hash());
    CHECK(ra.l_sup == rb.l_sup);
    CHECK(ra.total == rb.total);
}

TEST_CASE("grl ramp starts from zero reversal") {
    TrainConfig a = tiny_config();
    a.grl_ramp_steps = 100;
    TrainConfig b = tiny_config();
    b.grl_lambda = 0.0;
    Trainer ta = adapted_trainer(a), tb = adapted_trainer(b);
    const auto src = samples(DomainTag::Source, 2, 30), tgt = samples(DomainTag::Target, 2, 31);
    const StepRecord ra = ta.train_step(src, tgt);
    const StepRecord rb = tb.train_step(src, tgt);
    CHECK(ra.l_adv > 0.0);
    CHECK(ra.l_adv == rb.l_adv);
    CHECK(ta.student().weight_hash() == tb.student().weight_hash());
    // one step later the ramp is non-zero and the runs part
    ta.train_step(src, tgt);
    tb.train_step(src, tgt);
    CHECK(ta.student().weight_hash() != tb.student().weight_hash());
}

TEST_CASE("source instances can come from ground-truth boxes") {
    TrainConfig cfg = tiny_config();
    cfg.components = Components::preset("st_uc_ca");
    cfg.ca_source_from_labels = true;
    const auto tgt = samples(DomainTag::Target, 2, 33);
    auto src = samples(DomainTag::Source, 2, 32);
    std::size_t boxes = 0;
    for (const auto& s : src) boxes += s.labels->size();
    REQUIRE(boxes > 0);
    auto unlabeled = src;
    for (auto& s : unlabeled) s.labels = std::vector<LabeledBox>{};

    Trainer with = adapted_trainer(cfg), without = adapted_trainer(cfg);
    const int target_only = without.train_step(unlabeled, tgt).ca_instances;
    const int both = with.train_step(src, tgt).ca_instances;
    // one instance per box and stage, for boxes that won a positive anchor
    CHECK(both > target_only);
    CHECK(both - target_only <= 2 * static_cast<int>(boxes));
    CHECK((both - target_only) % 2 == 0);
}

TEST_CASE("the recorded total is the weighted sum of the recorded terms") {
    TrainConfig cfg = tiny_config();
    cfg.lambda_distill = 0.7;
    cfg.lambda_adv = 0.3;
    cfg.lambda_ca = 0.2;
    Trainer t = adapted_trainer(cfg);
    const auto src = samples(DomainTag::Source, 2, 12), tgt = samples(DomainTag::Target, 2, 13);
    for (int i = 0; i < 3; ++i) {
        const StepRecord r = t.train_step(src, tgt);
        CHECK(std::abs(r.total - (r.l_sup + 0.7 * r.l_distill + 0.3 * r.l_adv + 0.2 * r.l_ca)) < 1e-9);
        const auto& w = cfg.sup.weights;
        CHECK(std::abs(r.l_sup - (w.cls * r.sup.cls + w.dfl * r.sup.dfl + w.iou * r.sup.iou)) < 1e-9);
        CHECK(r.l_adv > 0.0);
        CHECK(r.ca_instances > 0);
        CHECK(r.pseudo_positive + r.pseudo_uncertain + r.pseudo_negative > 0);
        if (i > 0) CHECK(r.l_ca > 0.0);  // queues are empty on the first step
    }
    int queued = 0;
    for (const auto* q : t.queues().all()) queued += q->size();
    CHECK(queued > 0);
    CHECK(t.gain().frozen);
    CHECK(t.state().step == 3);
}

TEST_CASE("log records carry every term") {
    StepRecord r;
    r.step = 4;
    r.phase = Phase::Adapt;
    r.l_ca = 0.25;
    const std::string j = r.to_json();
    for (const char* key : {"\"step\":4", "\"phase\":\"adapt\"", "\"L_sup\"", "\"L_distill\"", "\"L_adv\"", "\"L_CA\":0.25",
                            "\"gain\"", "\"lr\""})
        CHECK(j.find(key) != std::string::npos);
}

TEST_CASE("checkpoints restore the full state and resume identically") {
    TempDir dir("ckpt");
    const TrainConfig cfg = tiny_config();
    Trainer a = adapted_trainer(cfg);
    const auto src = samples(DomainTag::Source, 2, 14), tgt = samples(DomainTag::Target, 2, 15);
    for (int i = 0; i < 3; ++i) a.train_step(src, tgt);
    const auto file = dir.path() / "a.ckpt";
    save_checkpoint(file, a);
    const CheckpointInfo info = read_checkpoint_info(file);
    CHECK(info.step == 3);
    CHECK(info.phase == Phase::Adapt);

    Trainer b(cfg);
    b.initialize();
    load_checkpoint(file, b);
    CHECK(b.student().weight_hash() == a.student().weight_hash());
    CHECK(b.teacher().weight_hash() == a.teacher().weight_hash());
    CHECK(b.state().step == 3);
    CHECK(b.temperature() == a.temperature());
    CHECK(b.gain().gain == a.gain().gain);
    const StepRecord ra = a.train_step(src, tgt), rb = b.train_step(src, tgt);
    CHECK(ra.to_json() == rb.to_json());
    CHECK(a.student().weight_hash() == b.student().weight_hash());

    TrainConfig other = cfg;
    other.detector.head_widths = {6, 6, 8};
    Trainer c(other);
    c.initialize();
    CHECK_THROWS_AS(load_checkpoint(file, c), CheckpointError);
}

TEST_CASE("batch sampler is stateless and covers each epoch once") {
    const BatchSampler s(10, 4, 3, 101);
    std::multiset<int> epoch;
    for (int step = 0; step < 2; ++step)
        for (int i : s.indices(step)) epoch.insert(i);
    for (int i : BatchSampler(10, 4, 3, 101).indices(2)) epoch.insert(i);
    CHECK(epoch.size() == 12);
    CHECK(std::set<int>(epoch.begin(), epoch.end()).size() == 10);
    CHECK(BatchSampler(10, 4, 3, 101).indices(7) == s.indices(7));
    CHECK(BatchSampler(10, 4, 3, 103).indices(0) != s.indices(0));
}

TEST_CASE("learning-rate schedule") {
    TrainConfig cfg = tiny_config();
    cfg.burn_in_steps = 100;
    cfg.adapt_steps = 40;
    cfg.warmup_steps = 10;
    Trainer t(cfg);
    CHECK(t.lr_at(Phase::BurnIn, 0) == doctest::Approx(cfg.lr * 0.1));
    CHECK(t.lr_at(Phase::Adapt, 0) == doctest::Approx(cfg.lr));
    CHECK(t.lr_at(Phase::Adapt, 40) == doctest::Approx(cfg.lr * cfg.lr_final_ratio));
    CHECK(t.lr_at(Phase::Adapt, 20) < t.lr_at(Phase::Adapt, 10));
    CHECK(t.lr_at(Phase::BurnIn, 5) < t.lr_at(Phase::BurnIn, 9));
}

TEST_CASE("component presets") {
    CHECK(Components::preset("st").self_training);
    CHECK_FALSE(Components::preset("st").uncertainty);
    CHECK(Components::preset("st_uc").uncertainty);
    CHECK_FALSE(Components::preset("st_uc").contrastive);
    CHECK(Components::preset("st_uc_ca").contrastive);
    CHECK_FALSE(Components::preset("st_uc_ca").grl);
    CHECK_FALSE(Components::preset("source_only").self_training);
    CHECK(Components::preset("full").dynamic_aug);
    CHECK_THROWS_AS(Components::preset("everything"), InvalidArgument);
}

}
