#include "clda/cli/run_config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <fstream>
#include <map>
#include <sstream>

namespace clda {

namespace {

std::string fmt(double v) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}
std::string fmt(int v) { return std::to_string(v); }
std::string fmt(std::uint64_t v) { return std::to_string(v); }
std::string fmt(bool v) { return v ? "true" : "false"; }

double to_double(const std::string& key, const std::string& s) {
    double v = 0.0;
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw ConfigError(key + ": expected a number, got '" + s + "'");
    return v;
}

template <class Int>
Int to_int(const std::string& key, const std::string& s) {
    Int v = 0;
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw ConfigError(key + ": expected an integer, got '" + s + "'");
    return v;
}

bool to_bool(const std::string& key, const std::string& s) {
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw ConfigError(key + ": expected true/false, got '" + s + "'");
}

// Builds a key bound to a member reached through `ref`.
template <class T, class Ref>
ConfigKey bind(std::string key, std::string doc, Ref ref) {
    ConfigKey k;
    k.key = key;
    k.doc = std::move(doc);
    k.set = [ref, key](RunConfig& c, const std::string& v) {
        T& dst = ref(c);
        if constexpr (std::is_same_v<T, double>) dst = to_double(key, v);
        else if constexpr (std::is_same_v<T, bool>) dst = to_bool(key, v);
        else if constexpr (std::is_same_v<T, std::string>) dst = v;
        else dst = to_int<T>(key, v);
    };
    k.get = [ref](const RunConfig& c) {
        const T& v = ref(const_cast<RunConfig&>(c));
        if constexpr (std::is_same_v<T, std::string>) return v;
        else return fmt(v);
    };
    return k;
}

#define KEY(T, name, doc, expr) bind<T>(name, doc, [](RunConfig& c) -> T& { return expr; })

std::vector<ConfigKey> build_keys() {
    std::vector<ConfigKey> k;
    // run
    k.push_back(KEY(std::string, "run.name", "run directory name under the run root", c.name));
    k.push_back(KEY(std::string, "run.data_dir", "dataset directory (empty: <run root>/data)", c.data_dir));
    k.push_back(KEY(std::uint64_t, "run.seed", "training seed (weights, batches, augmentation)", c.train.seed));
    k.push_back(KEY(int, "run.checkpoint_every", "steps between periodic checkpoints (0: final only)", c.checkpoint_every));
    // data
    k.push_back(KEY(std::uint64_t, "data.seed", "dataset generation seed", c.data.seed));
    k.push_back(KEY(int, "data.source_train", "labelled source training images", c.data.source_train));
    k.push_back(KEY(int, "data.source_eval", "source evaluation images", c.data.source_eval));
    k.push_back(KEY(int, "data.target_train", "unlabelled target training images", c.data.target_train));
    k.push_back(KEY(int, "data.target_eval", "target evaluation images", c.data.target_eval));
    k.push_back(KEY(int, "data.canvas", "image side in pixels", c.data.scene.canvas));
    k.push_back(KEY(int, "data.min_objects", "fewest objects per scene", c.data.scene.min_objects));
    k.push_back(KEY(int, "data.max_objects", "most objects per scene", c.data.scene.max_objects));
    k.push_back(KEY(double, "data.min_size", "smallest object side (px)", c.data.scene.min_size));
    k.push_back(KEY(double, "data.max_size", "largest object side (px)", c.data.scene.max_size));
    k.push_back(KEY(double, "data.max_overlap", "max IoU between objects of one scene", c.data.scene.max_overlap));
    k.push_back(KEY(double, "data.texture_amplitude", "background texture strength", c.data.scene.texture_amplitude));
    k.push_back(KEY(int, "data.clutter_strokes", "distractor strokes per scene", c.data.scene.clutter_strokes));
    k.push_back(KEY(double, "data.fog_beta", "target fog density", c.data.shift.fog_beta));
    k.push_back(KEY(double, "data.atmospheric_light", "target airlight A", c.data.shift.atmospheric_light));
    k.push_back(KEY(double, "data.depth_base", "pseudo-depth at the bottom edge", c.data.shift.depth_base));
    k.push_back(KEY(double, "data.depth_gradient", "pseudo-depth added towards the top edge", c.data.shift.depth_gradient));
    k.push_back(KEY(double, "data.depth_noise", "low-frequency pseudo-depth amplitude", c.data.shift.depth_noise));
    k.push_back(KEY(double, "data.color_temperature", "target warm shift", c.data.shift.color_temperature));
    k.push_back(KEY(double, "data.noise_sigma", "target sensor noise", c.data.shift.noise_sigma));
    // detector
    k.push_back(KEY(int, "detector.input_size", "network input side; must equal data.canvas", c.train.detector.input_size));
    k.push_back(KEY(int, "detector.reg_max", "largest DFL bin index", c.train.detector.reg_max));
    // train
    k.push_back(KEY(int, "train.batch_size", "images per domain per step", c.train.batch_size));
    k.push_back(KEY(int, "train.burn_in_steps", "source-only steps", c.train.burn_in_steps));
    k.push_back(KEY(int, "train.adapt_steps", "adaptation steps", c.train.adapt_steps));
    k.push_back(KEY(double, "train.lr", "initial SGD learning rate (cosine decay per phase)", c.train.lr));
    k.push_back(KEY(double, "train.lr_final_ratio", "final lr as a fraction of train.lr", c.train.lr_final_ratio));
    k.push_back(KEY(int, "train.warmup_steps", "linear lr warm-up at the start of burn-in", c.train.warmup_steps));
    k.push_back(KEY(double, "train.momentum", "SGD momentum", c.train.momentum));
    k.push_back(KEY(double, "train.weight_decay", "L2 decay on conv weights", c.train.weight_decay));
    k.push_back(KEY(double, "train.max_grad_norm", "gradient clipping norm (<= 0 disables)", c.train.max_grad_norm));
    {
        ConfigKey p;
        p.key = "train.preset";
        p.doc = "component preset: full | st | st_uc | st_uc_ca | source_only (resets the switches below)";
        p.set = [](RunConfig& c, const std::string& v) {
            try {
                c.train.components = Components::preset(v);
            } catch (const InvalidArgument& e) {
                throw ConfigError(std::string("train.preset: ") + e.what());
            }
            c.preset = v;
        };
        p.get = [](const RunConfig& c) { return c.preset; };
        k.push_back(p);
    }
    k.push_back(KEY(bool, "train.self_training", "teacher pseudo-label distillation", c.train.components.self_training));
    k.push_back(KEY(bool, "train.uncertainty", "three-tier pseudo-label losses (off: hard labels >= p_high)", c.train.components.uncertainty));
    k.push_back(KEY(bool, "train.dynamic_aug", "divergence-driven augmentation gain", c.train.components.dynamic_aug));
    k.push_back(KEY(bool, "train.grl", "adversarial alignment through gradient reversal", c.train.components.grl));
    k.push_back(KEY(bool, "train.contrastive", "queue-based contrastive alignment", c.train.components.contrastive));
    // losses
    k.push_back(KEY(double, "loss.cls_weight", "classification weight", c.train.sup.weights.cls));
    k.push_back(KEY(double, "loss.dfl_weight", "distribution focal loss weight", c.train.sup.weights.dfl));
    k.push_back(KEY(double, "loss.iou_weight", "IoU loss weight", c.train.sup.weights.iou));
    {
        ConfigKey p;
        p.key = "loss.cls_target";
        p.doc = "positive classification target: iou_aware | hard";
        p.set = [](RunConfig& c, const std::string& v) {
            if (v == "iou_aware") c.train.sup.cls_target = ClsTarget::IouAware;
            else if (v == "hard") c.train.sup.cls_target = ClsTarget::Hard;
            else throw ConfigError("loss.cls_target: expected iou_aware or hard, got '" + v + "'");
        };
        p.get = [](const RunConfig& c) { return std::string(c.train.sup.cls_target == ClsTarget::Hard ? "hard" : "iou_aware"); };
        k.push_back(p);
    }
    k.push_back(KEY(int, "loss.assign_topk", "positives per GT in assignment", c.train.assign.top_k));
    k.push_back(KEY(double, "loss.assign_score_power", "class-score exponent of the alignment metric", c.train.assign.kappa_score));
    k.push_back(KEY(double, "loss.assign_iou_power", "IoU exponent of the alignment metric", c.train.assign.kappa_iou));
    // teacher
    k.push_back(KEY(double, "teacher.ema_decay", "EMA decay of the teacher", c.train.ema_decay));
    k.push_back(KEY(double, "teacher.confidence_floor", "pseudo-label confidence floor before grading", c.train.teacher_post.confidence_floor));
    k.push_back(KEY(double, "teacher.nms_iou", "pseudo-label NMS IoU", c.train.teacher_post.nms_iou));
    // uncertainty
    k.push_back(KEY(double, "uncertainty.p_low", "negative tier upper bound", c.train.thresholds.low));
    k.push_back(KEY(double, "uncertainty.p_high", "positive tier lower bound", c.train.thresholds.high));
    k.push_back(KEY(double, "uncertainty.lambda_distill", "weight of the distillation loss", c.train.lambda_distill));
    k.push_back(KEY(double, "uncertainty.cls_weight", "distillation classification weight", c.train.distill.cls));
    k.push_back(KEY(double, "uncertainty.dfl_weight", "distillation DFL weight", c.train.distill.dfl));
    k.push_back(KEY(double, "uncertainty.iou_weight", "distillation IoU weight", c.train.distill.iou));
    k.push_back(KEY(double, "uncertainty.negative_weight", "negative-box JS weight", c.train.distill.negative));
    // dynaug
    k.push_back(KEY(double, "dynaug.alpha", "gain smoothing alpha_g", c.train.gain.alpha));
    k.push_back(KEY(double, "dynaug.gamma", "divergence exponent", c.train.gain.gamma));
    k.push_back(KEY(double, "dynaug.min_gain", "lower gain clamp", c.train.gain.min_gain));
    k.push_back(KEY(double, "dynaug.max_gain", "upper gain clamp", c.train.gain.max_gain));
    k.push_back(KEY(int, "dynaug.warmup_steps", "steps averaged into the baseline divergence", c.train.gain.warmup_steps));
    k.push_back(KEY(bool, "dynaug.entropy_weighting", "scale the divergence by teacher entropy", c.train.gain.entropy_weighting));
    k.push_back(KEY(double, "dynaug.flip_prob", "weak-view flip probability", c.train.augment.flip_prob));
    k.push_back(KEY(double, "dynaug.brightness", "strong brightness jitter", c.train.augment.brightness));
    k.push_back(KEY(double, "dynaug.contrast", "strong contrast jitter", c.train.augment.contrast));
    k.push_back(KEY(double, "dynaug.saturation", "strong saturation jitter", c.train.augment.saturation));
    k.push_back(KEY(double, "dynaug.noise_sigma", "strong gaussian noise", c.train.augment.noise_sigma));
    k.push_back(KEY(double, "dynaug.blur_sigma", "strong blur sigma upper bound", c.train.augment.blur_sigma));
    k.push_back(KEY(double, "dynaug.erase_prob", "random erase probability", c.train.augment.erase_prob));
    k.push_back(KEY(double, "dynaug.erase_area", "random erase max area fraction", c.train.augment.erase_area));
    k.push_back(KEY(double, "dynaug.scale_range", "strong scale jitter", c.train.augment.scale_range));
    k.push_back(KEY(double, "dynaug.translate", "strong translation (fraction of canvas)", c.train.augment.translate));
    // align
    k.push_back(KEY(double, "align.lambda_adv", "weight of the adversarial loss", c.train.lambda_adv));
    k.push_back(KEY(double, "align.lambda_ca", "weight of the contrastive loss", c.train.lambda_ca));
    k.push_back(KEY(double, "align.grl_lambda", "gradient reversal scale", c.train.grl_lambda));
    k.push_back(KEY(int, "align.grl_ramp_steps", "adapt steps over which grl_lambda ramps up linearly (0: constant)", c.train.grl_ramp_steps));
    k.push_back(KEY(int, "align.disc_hidden", "discriminator hidden channels", c.train.disc_hidden));
    k.push_back(KEY(double, "align.alpha", "queue-confidence exponent", c.train.ca.alpha));
    k.push_back(KEY(double, "align.beta", "batch-confidence exponent", c.train.ca.beta));
    k.push_back(KEY(double, "align.temperature", "initial temperature base T (tau = ln T)", c.train.ca.temperature));
    k.push_back(KEY(int, "align.queue_capacity", "instances per queue", c.train.ca.queue_capacity));
    k.push_back(KEY(double, "align.harvest_floor", "confidence floor for harvested instances", c.train.ca.harvest_floor));
    k.push_back(KEY(bool, "align.batch_mean", "average each contrastive term over its batch instances", c.train.ca_batch_mean));
    k.push_back(KEY(bool, "align.source_from_labels", "harvest source instances from ground-truth boxes", c.train.ca_source_from_labels));
    k.push_back(KEY(double, "align.nms_iou", "NMS IoU for harvested student predictions", c.train.ca_nms_iou));
    // eval
    k.push_back(KEY(double, "eval.iou_threshold", "TP match IoU", c.eval_iou));
    k.push_back(KEY(double, "eval.confidence_floor", "evaluation confidence floor", c.eval_post.confidence_floor));
    k.push_back(KEY(double, "eval.nms_iou", "evaluation NMS IoU", c.eval_post.nms_iou));
    k.push_back(KEY(int, "eval.max_detections", "detections kept per image", c.eval_post.max_detections));
    k.push_back(KEY(int, "eval.batch", "images per inference batch", c.eval_batch));
    return k;
}

#undef KEY

const ConfigKey& find_key(const std::string& key) {
    for (const ConfigKey& k : config_keys())
        if (k.key == key) return k;
    throw ConfigError("unknown config key '" + key + "'");
}

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

}  // namespace

const std::vector<ConfigKey>& config_keys() {
    static const std::vector<ConfigKey> keys = build_keys();
    return keys;
}

PostprocessOptions RunConfig::default_eval_post() {
    PostprocessOptions p;
    p.confidence_floor = 0.001;
    p.nms_iou = 0.65;
    p.max_detections = 100;
    p.keep_distributions = false;
    return p;
}

void RunConfig::set(const std::string& key, const std::string& value) { find_key(key).set(*this, trim(value)); }

std::string RunConfig::get(const std::string& key) const { return find_key(key).get(*this); }

void RunConfig::validate() const {
    try {
        data.scene.validate();
        data.shift.validate();
        train.validate();
    } catch (const InvalidArgument& e) {
        throw ConfigError(e.what());
    }
    if (data.scene.canvas != train.detector.input_size)
        throw ConfigError("data.canvas must equal the detector input size (" + std::to_string(train.detector.input_size) + ")");
    if (data.source_train < 0 || data.source_eval < 0 || data.target_train < 0 || data.target_eval < 0)
        throw ConfigError("split counts must be >= 0");
    if (eval_iou <= 0.0 || eval_iou > 1.0) throw ConfigError("eval.iou_threshold outside (0,1]");
    if (eval_batch < 1) throw ConfigError("eval.batch < 1");
    if (checkpoint_every < 0) throw ConfigError("run.checkpoint_every < 0");
    if (name.empty() || name.find('/') != std::string::npos) throw ConfigError("run.name must be a plain directory name");
}

std::string RunConfig::dump() const {
    std::ostringstream os;
    std::string section;
    for (const ConfigKey& k : config_keys()) {
        const auto dot = k.key.find('.');
        const std::string sec = k.key.substr(0, dot);
        if (sec != section) {
            os << (section.empty() ? "" : "\n") << "[" << sec << "]\n";
            section = sec;
        }
        os << k.key.substr(dot + 1) << " = " << k.get(*this) << "\n";
    }
    return os.str();
}

std::string RunConfig::describe() {
    const RunConfig defaults;
    std::ostringstream os;
    for (const ConfigKey& k : config_keys()) os << k.key << " = " << k.get(defaults) << "\n    " << k.doc << "\n";
    return os.str();
}

RunConfig RunConfig::parse(const std::string& text, const std::string& origin) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    std::istringstream is(text);
    try {
        pt::read_ini(is, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError(origin + ":" + std::to_string(e.line()) + ": " + e.message());
    }
    RunConfig c;
    // the preset resets component switches, so it goes first
    if (auto p = tree.get_optional<std::string>("train.preset")) c.set("train.preset", *p);
    for (const auto& [section, body] : tree) {
        if (body.empty() && !body.data().empty())
            throw ConfigError(origin + ": key '" + section + "' outside a section");
        for (const auto& [key, value] : body) {
            const std::string full = section + "." + key;
            if (full == "train.preset") continue;
            try {
                c.set(full, value.data());
            } catch (const ConfigError& e) {
                throw ConfigError(origin + ": " + e.what());
            }
        }
    }
    return c;
}

RunConfig RunConfig::load(const std::filesystem::path& file) {
    std::ifstream f(file);
    if (!f) throw ConfigError("cannot read config " + file.string());
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str(), file.string());
}

void RunConfig::apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + assignment + "'");
    set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

}  // namespace clda
