#include "clda/teacher_student/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "clda/core/rng.hpp"

namespace clda {

namespace {

constexpr std::uint64_t kBurnInStream = 11;
constexpr std::uint64_t kAdaptStream = 13;

bool finite(double v) { return std::isfinite(v); }

double clip_gradients(const nn::ParamList& params, double max_norm) {
    const double norm = nn::grad_norm(params);
    if (max_norm > 0.0 && norm > max_norm) nn::scale_grads(params, max_norm / norm);
    return norm;
}

std::vector<Tensor> snapshot_buffers(const nn::ParamList& params) {
    std::vector<Tensor> out;
    for (const nn::Parameter* p : params)
        if (!p->trainable) out.push_back(p->value);
    return out;
}

void restore_buffers(const nn::ParamList& params, std::vector<Tensor>& saved) {
    std::size_t k = 0;
    for (nn::Parameter* p : params)
        if (!p->trainable) p->value = std::move(saved[k++]);
}

void add_into(Tensor& dst, const Tensor& src) {
    if (dst.empty()) {
        dst = src;
        return;
    }
    for (std::size_t i = 0; i < dst.size(); ++i) dst.data[i] += src.data[i];
}

Tensor& ensure_like(Tensor& t, const Tensor& like) {
    if (t.empty()) t = Tensor(like.shape);
    return t;
}

}  // namespace

void EMAConfig::validate() const {
    if (!(decay >= 0.0 && decay <= 1.0)) throw InvalidArgument("EMA decay must lie in [0,1]");
}

void ema_update(Detector& teacher, const Detector& student, double alpha) {
    EMAConfig{alpha}.validate();
    nn::ParamList t = teacher.parameters();
    nn::ConstParamList s = student.parameters();
    if (t.size() != s.size()) throw InvalidArgument("ema_update: parameter count mismatch");
    for (std::size_t i = 0; i < t.size(); ++i)
        if (t[i]->name != s[i]->name || !t[i]->value.same_shape(s[i]->value))
            throw InvalidArgument("ema_update: mismatch at " + t[i]->name);
    if (alpha == 1.0) return;
    for (std::size_t i = 0; i < t.size(); ++i) {
        float* tv = t[i]->value.ptr();
        const float* sv = s[i]->value.ptr();
        const std::size_t n = t[i]->value.size();
        if (alpha == 0.0) {
            std::copy(sv, sv + n, tv);
            continue;
        }
        for (std::size_t k = 0; k < n; ++k) tv[k] = static_cast<float>(alpha * tv[k] + (1.0 - alpha) * sv[k]);
    }
}

Components Components::preset(const std::string& name) {
    Components c;
    if (name == "full") return c;
    c = Components{false, false, false, false, false};
    if (name == "source_only") return c;
    c.self_training = true;
    if (name == "st") return c;
    c.uncertainty = true;
    if (name == "st_uc") return c;
    c.contrastive = true;
    if (name == "st_uc_ca") return c;
    throw InvalidArgument("unknown component preset '" + name + "'");
}

void TrainConfig::validate() const {
    detector.validate();
    if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
    if (burn_in_steps < 0 || adapt_steps < 0) throw InvalidArgument("step counts must be >= 0");
    if (!(lr > 0.0)) throw InvalidArgument("lr must be > 0");
    if (lr_final_ratio < 0.0 || lr_final_ratio > 1.0) throw InvalidArgument("lr_final_ratio outside [0,1]");
    if (warmup_steps < 0) throw InvalidArgument("warmup_steps < 0");
    if (momentum < 0.0 || momentum >= 1.0) throw InvalidArgument("momentum outside [0,1)");
    if (weight_decay < 0.0) throw InvalidArgument("weight_decay < 0");
    EMAConfig{ema_decay}.validate();
    if (lambda_distill < 0.0 || lambda_adv < 0.0 || lambda_ca < 0.0 || grl_lambda < 0.0)
        throw InvalidArgument("loss weights must be >= 0");
    if (disc_hidden < 1) throw InvalidArgument("disc_hidden < 1");
    if (grl_ramp_steps < 0) throw InvalidArgument("grl_ramp_steps < 0");
    sup.weights.validate();
    thresholds.validate();
    ca.validate();
    if (gain.min_gain <= 0.0 || gain.max_gain < gain.min_gain) throw InvalidArgument("bad gain clamp bounds");
    if (gain.alpha < 0.0 || gain.alpha >= 1.0) throw InvalidArgument("gain alpha outside [0,1)");
    if (gain.gamma <= 0.0) throw InvalidArgument("gain gamma must be > 0");
    if (gain.warmup_steps < 0) throw InvalidArgument("gain warm-up < 0");
    if (teacher_post.confidence_floor < 0.0 || teacher_post.confidence_floor >= 1.0)
        throw InvalidArgument("teacher confidence floor outside [0,1)");
}

std::string StepRecord::to_json() const {
    nlohmann::ordered_json j;
    j["step"] = step;
    j["phase"] = to_string(phase);
    j["L_sup"] = l_sup;
    j["L_distill"] = l_distill;
    j["L_adv"] = l_adv;
    j["L_CA"] = l_ca;
    j["total"] = total;
    j["gain"] = gain;
    j["lr"] = lr;
    j["finite"] = finite;
    j["grad_norm"] = grad_norm;
    j["temperature"] = temperature;
    j["divergence"] = divergence;
    j["sup"] = {{"cls", sup.cls}, {"dfl", sup.dfl}, {"iou", sup.iou}, {"positives", sup.positives}};
    j["distill"] = {{"cls", distill.cls},
                    {"dfl", distill.dfl},
                    {"iou", distill.iou},
                    {"negative", distill.negative},
                    {"matched_anchors", distill.matched_anchors},
                    {"matched_negatives", distill.matched_negatives}};
    j["pseudo"] = {pseudo_positive, pseudo_uncertain, pseudo_negative};
    j["ca_instances"] = ca_instances;
    return j.dump();
}

std::vector<std::vector<Detection>> generate_pseudo_labels(const Detector& teacher, std::span<const Image> weak,
                                                           const PostprocessOptions& opt) {
    std::vector<std::vector<Detection>> out;
    if (weak.empty()) return out;
    const DetectorConfig& cfg = teacher.config();
    const ForwardResult r = teacher.infer(images_to_tensor(weak));
    const std::vector<AnchorPoint> anchors = make_anchors(cfg);
    for (std::size_t i = 0; i < weak.size(); ++i) {
        const DenseImagePrediction p = gather_dense(r.levels, static_cast<int>(i), cfg);
        out.push_back(postprocess(p, anchors, cfg.input_size, opt));
    }
    return out;
}

// ------------------------------------------------------------ sample store

SampleStore SampleStore::load(const std::filesystem::path& root, const std::vector<ManifestEntry>& entries) {
    std::vector<Sample> tmp(1);
    SampleStore s;
    s.items_.reserve(entries.size());
    for (const ManifestEntry& e : entries) {
        tmp[0] = load_sample(root, e);
        SampleStore one = from_samples(tmp);
        s.items_.push_back(std::move(one.items_[0]));
    }
    return s;
}

SampleStore SampleStore::from_samples(std::span<const Sample> samples) {
    SampleStore s;
    s.items_.reserve(samples.size());
    for (const Sample& x : samples) {
        Item it;
        it.height = x.image.height;
        it.width = x.image.width;
        it.rgb.resize(x.image.pixels.size());
        for (std::size_t k = 0; k < it.rgb.size(); ++k)
            it.rgb[k] = static_cast<std::uint8_t>(std::lround(std::clamp(x.image.pixels[k], 0.0f, 1.0f) * 255.0f));
        it.labels = x.labels;
        it.domain = x.domain;
        it.id = x.id;
        s.items_.push_back(std::move(it));
    }
    return s;
}

Sample SampleStore::get(std::size_t i) const {
    const Item& it = items_.at(i);
    Sample s;
    s.image = Image(it.height, it.width);
    for (std::size_t k = 0; k < it.rgb.size(); ++k) s.image.pixels[k] = it.rgb[k] / 255.0f;
    s.labels = it.labels;
    s.domain = it.domain;
    s.id = it.id;
    return s;
}

std::vector<Sample> SampleStore::gather(std::span<const int> indices) const {
    std::vector<Sample> out;
    out.reserve(indices.size());
    for (int i : indices) out.push_back(get(static_cast<std::size_t>(i)));
    return out;
}

BatchSampler::BatchSampler(int population, int batch, std::uint64_t seed, std::uint64_t stream)
    : n_(population), batch_(batch), seed_(seed), stream_(stream) {
    if (population < 1) throw InvalidArgument("BatchSampler: empty population");
    if (batch < 1) throw InvalidArgument("BatchSampler: batch < 1");
}

std::vector<int> BatchSampler::indices(int step) const {
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(batch_));
    for (int k = 0; k < batch_; ++k) {
        const long pos = static_cast<long>(step) * batch_ + k;
        const long epoch = pos / n_;
        if (epoch != cached_epoch_) {
            perm_.resize(static_cast<std::size_t>(n_));
            std::iota(perm_.begin(), perm_.end(), 0);
            std::mt19937_64 rng(derive_seed(seed_, {stream_, static_cast<std::uint64_t>(epoch)}));
            std::shuffle(perm_.begin(), perm_.end(), rng);
            cached_epoch_ = epoch;
        }
        out.push_back(perm_[static_cast<std::size_t>(pos % n_)]);
    }
    return out;
}

// ----------------------------------------------------------------- trainer

Trainer::Trainer(TrainConfig cfg)
    : cfg_((cfg.validate(), std::move(cfg))),
      student_(cfg_.detector),
      teacher_(cfg_.detector),
      queues_(cfg_.ca.queue_capacity),
      temperature_(cfg_.ca.temperature),
      opt_(nn::Sgd::Options{cfg_.lr, cfg_.momentum, cfg_.weight_decay, true}),
      disc_opt_(nn::Sgd::Options{cfg_.lr, cfg_.momentum, cfg_.weight_decay, true}),
      anchors_(make_anchors(cfg_.detector)) {
    gain_.cfg = cfg_.gain;
    for (int l = 0; l < cfg_.detector.num_levels(); ++l)
        discs_.emplace_back("disc" + std::to_string(l), cfg_.detector.backbone_widths[static_cast<std::size_t>(l) + 1],
                            cfg_.disc_hidden);
    state_.seed = cfg_.seed;
}

void Trainer::initialize() {
    student_.init(derive_seed(cfg_.seed, {1}));
    teacher_ = student_;
    std::mt19937_64 rng(derive_seed(cfg_.seed, {2}));
    for (Discriminator& d : discs_) d.init(rng);
    state_ = TrainState{0, Phase::BurnIn, cfg_.seed};
    queues_ = QueueBank(cfg_.ca.queue_capacity);
    gain_ = GainState{};
    gain_.cfg = cfg_.gain;
    temperature_ = cfg_.ca.temperature;
    opt_ = nn::Sgd(opt_.options());
    disc_opt_ = nn::Sgd(disc_opt_.options());
}

nn::ParamList Trainer::disc_parameters() {
    nn::ParamList out;
    for (Discriminator& d : discs_) d.collect(out);
    return out;
}

nn::ConstParamList Trainer::disc_parameters() const {
    nn::ConstParamList out;
    for (const Discriminator& d : discs_) d.collect(out);
    return out;
}

double Trainer::lr_at(Phase phase, int step) const {
    const int total = phase == Phase::BurnIn ? cfg_.burn_in_steps : cfg_.adapt_steps;
    const double lo = cfg_.lr * cfg_.lr_final_ratio;
    double lr = cfg_.lr;
    if (total > 0) {
        const double t = std::min(1.0, static_cast<double>(step) / total);
        lr = lo + 0.5 * (cfg_.lr - lo) * (1.0 + std::cos(M_PI * t));
    }
    if (phase == Phase::BurnIn && step < cfg_.warmup_steps)
        lr *= static_cast<double>(step + 1) / cfg_.warmup_steps;
    return lr;
}

std::mt19937_64 Trainer::step_rng() const {
    const std::uint64_t stream = state_.phase == Phase::BurnIn ? kBurnInStream : kAdaptStream;
    return std::mt19937_64(derive_seed(cfg_.seed, {stream, static_cast<std::uint64_t>(state_.step)}));
}

void Trainer::finish_burn_in() {
    if (state_.phase != Phase::BurnIn) throw InvalidArgument("finish_burn_in: already in the adapt phase");
    teacher_ = student_;
    state_.phase = Phase::Adapt;
    state_.step = 0;
    opt_ = nn::Sgd(opt_.options());
}

StepRecord Trainer::burn_in_step(std::span<const Sample> source) {
    if (state_.phase != Phase::BurnIn) throw InvalidArgument("burn_in_step: trainer is not in the burn-in phase");
    if (source.empty()) throw InvalidArgument("burn_in_step: empty batch");
    for (const Sample& s : source)
        if (s.domain != DomainTag::Source || !s.labels)
            throw InvalidArgument("burn_in_step: target or unlabeled sample '" + s.id + "' in the source loader");

    StepRecord rec;
    rec.step = state_.step;
    rec.phase = Phase::BurnIn;
    rec.lr = lr_at(Phase::BurnIn, state_.step);
    rec.gain = gain_.gain;
    rec.temperature = temperature_;

    std::mt19937_64 rng = step_rng();
    std::vector<Sample> views;
    std::vector<Image> images;
    for (const Sample& s : source) {
        AugmentedView w = apply_weak(cfg_.augment, s.image, *s.labels, rng);
        images.push_back(w.image);
        views.push_back(Sample{std::move(w.image), std::move(w.boxes), DomainTag::Source, s.id});
    }

    nn::ParamList params = student_.parameters();
    std::vector<Tensor> buffers = snapshot_buffers(params);
    ForwardTrace trace;
    ForwardResult fr = student_.forward(images_to_tensor(images), trace);
    std::vector<DenseImagePrediction> preds;
    for (std::size_t i = 0; i < images.size(); ++i)
        preds.push_back(gather_dense(fr.levels, static_cast<int>(i), cfg_.detector));
    std::vector<DenseGrad> grads;
    for (const auto& p : preds) grads.push_back(zeros_like(p));
    rec.sup = supervised_loss(views, preds, anchors_, cfg_.sup, cfg_.assign, GradSink{&grads, 1.0});
    rec.l_sup = rec.sup.total;
    rec.total = rec.l_sup;

    if (!finite(rec.total)) {
        rec.finite = false;
        restore_buffers(params, buffers);
        ++state_.step;
        return rec;
    }
    opt_.zero_grad(params);
    DetectorGrads dg = make_grads(fr.levels);
    for (std::size_t i = 0; i < grads.size(); ++i)
        scatter_dense_grad(grads[i], static_cast<int>(i), cfg_.detector, dg);
    student_.backward(trace, dg);
    rec.grad_norm = clip_gradients(params, cfg_.max_grad_norm);
    opt_.step(params, rec.lr);
    ++state_.step;
    return rec;
}

StepRecord Trainer::train_step(std::span<const Sample> source, std::span<const Sample> target) {
    if (state_.phase != Phase::Adapt) throw InvalidArgument("train_step: trainer is not in the adapt phase");
    if (source.empty() || target.empty()) throw InvalidArgument("train_step: both batches must be non-empty");
    for (const Sample& s : source)
        if (s.domain != DomainTag::Source || !s.labels)
            throw InvalidArgument("train_step: sample '" + s.id + "' is not a labelled source sample");
    for (const Sample& s : target)
        if (s.domain != DomainTag::Target || s.labels)
            throw InvalidArgument("train_step: sample '" + s.id + "' is not an unlabelled target sample");

    const Components& cm = cfg_.components;
    const DetectorConfig& dc = cfg_.detector;
    const int bs = static_cast<int>(source.size());
    const int bt = static_cast<int>(target.size());
    const double size = dc.input_size;

    StepRecord rec;
    rec.step = state_.step;
    rec.phase = Phase::Adapt;
    rec.lr = lr_at(Phase::Adapt, state_.step);
    const double gain = cm.dynamic_aug ? gain_.gain : 1.0;
    rec.gain = gain;
    rec.temperature = temperature_;

    // views
    std::mt19937_64 rng = step_rng();
    std::vector<Sample> src_views;
    std::vector<Image> batch_images;
    for (const Sample& s : source) {
        AugmentedView w = apply_weak(cfg_.augment, s.image, *s.labels, rng);
        AugmentedView st = apply_strong(cfg_.augment, gain, w.image, w.boxes, rng);
        batch_images.push_back(st.image);
        src_views.push_back(Sample{std::move(st.image), std::move(st.boxes), DomainTag::Source, s.id});
    }
    std::vector<Image> weak_target;
    std::vector<Affine2D> strong_t;
    for (const Sample& s : target) {
        AugmentedView w = apply_weak(cfg_.augment, s.image, {}, rng);
        AugmentedView st = apply_strong(cfg_.augment, gain, w.image, {}, rng);
        weak_target.push_back(std::move(w.image));
        strong_t.push_back(st.transform);
        batch_images.push_back(std::move(st.image));
    }

    // teacher pseudo-labels on the weak target view, mapped to the strong frame
    std::vector<GradedPseudoLabels> mapped(static_cast<std::size_t>(bt));
    std::vector<DenseImagePrediction> teacher_dense;
    if (cm.self_training || cm.contrastive || cm.dynamic_aug) {
        const Tensor wx = images_to_tensor(weak_target);
        const ForwardResult tr = teacher_.infer(wx);
        for (int i = 0; i < bt; ++i) {
            teacher_dense.push_back(gather_dense(tr.levels, i, dc));
            std::vector<Detection> dets = postprocess(teacher_dense.back(), anchors_, size, cfg_.teacher_post);
            GradedPseudoLabels g = grade(dets, cfg_.thresholds);
            mapped[static_cast<std::size_t>(i)] = transform_pseudo_labels(g, strong_t[static_cast<std::size_t>(i)], size);
            rec.pseudo_positive += static_cast<int>(mapped[static_cast<std::size_t>(i)].positives.size());
            rec.pseudo_uncertain += static_cast<int>(mapped[static_cast<std::size_t>(i)].uncertains.size());
            rec.pseudo_negative += static_cast<int>(mapped[static_cast<std::size_t>(i)].negatives.size());
        }
        if (cm.dynamic_aug) {
            const ForwardResult sr = student_.infer(wx);
            double acc = 0.0;
            for (int i = 0; i < bt; ++i) {
                const DenseImagePrediction sp = gather_dense(sr.levels, i, dc);
                double score = divergence_score(sp, teacher_dense[static_cast<std::size_t>(i)], cfg_.gain.gamma);
                if (cfg_.gain.entropy_weighting) score *= teacher_entropy(teacher_dense[static_cast<std::size_t>(i)]);
                acc += score;
            }
            rec.divergence = acc / bt;
        }
    }

    // student forward on [source; target]
    nn::ParamList params = student_.parameters();
    std::vector<Tensor> buffers = snapshot_buffers(params);
    ForwardTrace trace;
    ForwardResult fr = student_.forward(images_to_tensor(batch_images), trace);
    std::vector<DenseImagePrediction> preds;
    for (int i = 0; i < bs + bt; ++i) preds.push_back(gather_dense(fr.levels, i, dc));
    std::span<const DenseImagePrediction> src_preds(preds.data(), static_cast<std::size_t>(bs));
    std::span<const DenseImagePrediction> tgt_preds(preds.data() + bs, static_cast<std::size_t>(bt));

    std::vector<DenseGrad> sup_grads, dis_grads;
    for (const auto& p : src_preds) sup_grads.push_back(zeros_like(p));
    for (const auto& p : tgt_preds) dis_grads.push_back(zeros_like(p));

    rec.sup = supervised_loss(src_views, src_preds, anchors_, cfg_.sup, cfg_.assign, GradSink{&sup_grads, 1.0});
    rec.l_sup = rec.sup.total;

    const double ld = cfg_.lambda_distill, la = cfg_.lambda_adv, lc = cfg_.lambda_ca;
    GradSink dsink = ld > 0.0 ? GradSink{&dis_grads, ld} : GradSink{};
    if (cm.self_training) {
        if (cm.uncertainty) {
            std::vector<PseudoTargets> targets;
            for (int i = 0; i < bt; ++i)
                targets.push_back(match_pseudo_labels(tgt_preds[static_cast<std::size_t>(i)], anchors_,
                                                      mapped[static_cast<std::size_t>(i)], cfg_.assign));
            rec.distill = distill_loss(tgt_preds, targets, anchors_, cfg_.distill, dsink);
            rec.l_distill = rec.distill.total;
        } else {
            std::vector<Assignment> assigns;
            for (int i = 0; i < bt; ++i) {
                std::vector<LabeledBox> gts;
                for (const Detection& d : mapped[static_cast<std::size_t>(i)].positives) gts.push_back({d.box, d.category});
                assigns.push_back(assign(tgt_preds[static_cast<std::size_t>(i)], anchors_, gts, cfg_.assign));
            }
            SupLossBreakdown hb = supervised_loss(tgt_preds, assigns, anchors_, cfg_.sup, dsink);
            rec.l_distill = hb.total;
            rec.distill.cls = hb.cls;
            rec.distill.dfl = hb.dfl;
            rec.distill.iou = hb.iou;
            rec.distill.total = hb.total;
            rec.distill.matched_anchors = hb.positives;
        }
    }

    DetectorGrads dg = make_grads(fr.levels);
    nn::ParamList dparams = disc_parameters();
    disc_opt_.zero_grad(dparams);
    if (cm.grl) {
        std::vector<DomainTag> domains(static_cast<std::size_t>(bs), DomainTag::Source);
        domains.resize(static_cast<std::size_t>(bs + bt), DomainTag::Target);
        std::vector<Tensor> fgrads;
        double ramp = 1.0;
        if (cfg_.grl_ramp_steps > 0) ramp = std::min(1.0, static_cast<double>(state_.step) / cfg_.grl_ramp_steps);
        const GradientReversal grl{cfg_.grl_lambda * ramp};
        rec.l_adv = adv_loss(discs_, trace.features.backbone, domains, grl, la > 0.0 ? &fgrads : nullptr, la);
        if (la > 0.0)
            for (int l = 0; l < dc.num_levels(); ++l) add_into(dg.backbone[static_cast<std::size_t>(l)], fgrads[static_cast<std::size_t>(l)]);
    }

    std::vector<InstanceFeature> harvested;
    double dtau = 0.0;
    if (cm.contrastive) {
        // per image, detections in the strong frame with their pyramid level
        std::vector<std::vector<Detection>> dets(static_cast<std::size_t>(bs + bt));
        PostprocessOptions hp;
        hp.confidence_floor = cfg_.ca.harvest_floor;
        hp.nms_iou = cfg_.ca_nms_iou;
        hp.keep_distributions = false;
        for (int i = 0; i < bs; ++i) {
            const auto si = static_cast<std::size_t>(i);
            if (!cfg_.ca_source_from_labels) {
                dets[si] = postprocess(src_preds[si], anchors_, size, hp);
                continue;
            }
            // each box sits at the level of its best-overlapping positive anchor
            const std::vector<LabeledBox>& gts = *src_views[si].labels;
            const Assignment a = assign(src_preds[si], anchors_, gts, cfg_.assign);
            std::vector<int> best(gts.size(), -1);
            for (int k : a.positives()) {
                int& b = best[static_cast<std::size_t>(a.matched_gt[static_cast<std::size_t>(k)])];
                if (b < 0 || a.pred_iou[static_cast<std::size_t>(k)] > a.pred_iou[static_cast<std::size_t>(b)]) b = k;
            }
            for (std::size_t g = 0; g < gts.size(); ++g)
                if (best[g] >= 0)
                    dets[si].push_back({gts[g].box, gts[g].category, 1.0, std::nullopt,
                                        AnchorRef{anchors_[static_cast<std::size_t>(best[g])].level, best[g]}});
        }
        for (int i = 0; i < bt; ++i) {
            const GradedPseudoLabels& g = mapped[static_cast<std::size_t>(i)];
            auto& out = dets[static_cast<std::size_t>(bs + i)];
            for (const auto* list : {&g.positives, &g.uncertains, &g.negatives})
                for (const Detection& d : *list)
                    if (d.confidence >= cfg_.ca.harvest_floor && d.source) out.push_back(d);
        }
        const double tau = std::log(temperature_);
        for (Stage stage : {Stage::Backbone, Stage::Head}) {
            for (int l = 0; l < dc.num_levels(); ++l) {
                const auto li = static_cast<std::size_t>(l);
                const Tensor& map = stage == Stage::Backbone ? trace.features.backbone[li] : trace.features.head[li];
                for (DomainTag dom : {DomainTag::Source, DomainTag::Target}) {
                    std::vector<InstanceFeature> group;
                    std::vector<PoolingRecord> records;
                    const int lo = dom == DomainTag::Source ? 0 : bs;
                    const int hi = dom == DomainTag::Source ? bs : bs + bt;
                    for (int i = lo; i < hi; ++i) {
                        std::vector<Detection> at_level;
                        for (const Detection& d : dets[static_cast<std::size_t>(i)])
                            if (d.source && d.source->level == l) at_level.push_back(d);
                        if (at_level.empty()) continue;
                        auto f = extract_instances(map, i, at_level, dc.strides[li], stage, dom, l, &records);
                        group.insert(group.end(), f.begin(), f.end());
                    }
                    if (group.empty()) continue;
                    const DomainTag other = dom == DomainTag::Source ? DomainTag::Target : DomainTag::Source;
                    const std::vector<InstanceFeature> home = queues_.get(dom, stage, l).entries();
                    const std::vector<InstanceFeature> cross = queues_.get(other, stage, l).entries();
                    std::vector<std::vector<double>> gh, gx;
                    double th = 0.0, tx = 0.0;
                    const double norm = cfg_.ca_batch_mean ? 1.0 / static_cast<double>(group.size()) : 1.0;
                    rec.l_ca += norm * ca_loss(group, home, cfg_.ca.alpha, cfg_.ca.beta, tau, &gh, &th);
                    rec.l_ca += norm * ca_loss(group, cross, cfg_.ca.alpha, cfg_.ca.beta, tau, &gx, &tx);
                    dtau += norm * (th + tx);
                    if (lc > 0.0 && (!home.empty() || !cross.empty())) {
                        Tensor& gmap = ensure_like(stage == Stage::Backbone ? dg.backbone[li] : dg.head[li], map);
                        std::vector<double> g(group[0].feature.size());
                        for (std::size_t k = 0; k < group.size(); ++k) {
                            for (std::size_t c = 0; c < g.size(); ++c) {
                                double v = 0.0;
                                if (!gh.empty()) v += gh[k][c];
                                if (!gx.empty()) v += gx[k][c];
                                g[c] = lc * norm * v;
                            }
                            pooling_backward(records[k], g, gmap);
                        }
                    }
                    rec.ca_instances += static_cast<int>(group.size());
                    harvested.insert(harvested.end(), group.begin(), group.end());
                }
            }
        }
    }

    rec.total = rec.l_sup + ld * rec.l_distill + la * rec.l_adv + lc * rec.l_ca;
    if (!finite(rec.total)) {
        rec.finite = false;
        restore_buffers(params, buffers);
        disc_opt_.zero_grad(dparams);
        ++state_.step;
        return rec;
    }

    opt_.zero_grad(params);
    for (int i = 0; i < bs; ++i) scatter_dense_grad(sup_grads[static_cast<std::size_t>(i)], i, dc, dg);
    if (cm.self_training && ld > 0.0)
        for (int i = 0; i < bt; ++i) scatter_dense_grad(dis_grads[static_cast<std::size_t>(i)], bs + i, dc, dg);
    student_.backward(trace, dg);
    rec.grad_norm = clip_gradients(params, cfg_.max_grad_norm);
    opt_.step(params, rec.lr);
    if (cm.grl) {
        clip_gradients(dparams, cfg_.max_grad_norm);
        disc_opt_.step(dparams, rec.lr);
    }
    if (cm.contrastive && lc > 0.0) {
        // d/dT = d/dtau / T
        temperature_ = std::max(cfg_.ca.min_temperature, temperature_ - rec.lr * lc * dtau / temperature_);
    }

    ema_update(teacher_, student_, cfg_.ema_decay);
    if (cm.contrastive) queues_.update(harvested);
    if (cm.dynamic_aug) gain_ = update_gain(gain_, rec.divergence);
    ++state_.step;
    return rec;
}

}  // namespace clda
