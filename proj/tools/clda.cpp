// Command-line entry point: dataset generation, training, evaluation,
// feature export and run reports.
#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "clda/cli/pipeline.hpp"
#include "clda/cli/run_config.hpp"

namespace fs = std::filesystem;
using namespace clda;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kRuntime = 2;

struct Common {
    std::string config_file;
    std::vector<std::string> overrides;
    std::string run_dir;
    std::string data_dir;
};

void add_common(CLI::App* cmd, Common& c, bool with_run = true) {
    cmd->add_option("-c,--config", c.config_file, "INI config file");
    cmd->add_option("--set", c.overrides, "override: section.key=value (repeatable)");
    if (with_run) cmd->add_option("--run", c.run_dir, "run directory (default: $CLDA_RUN_ROOT/<run.name>)");
    cmd->add_option("--data", c.data_dir, "dataset directory");
}

fs::path run_root() {
    const char* env = std::getenv("CLDA_RUN_ROOT");
    return env && *env ? fs::path(env) : fs::path("runs");
}

RunConfig resolve_config(const Common& c, const std::optional<fs::path>& fallback = std::nullopt) {
    RunConfig cfg;
    if (!c.config_file.empty()) cfg = RunConfig::load(c.config_file);
    else if (fallback && fs::exists(*fallback)) cfg = RunConfig::load(*fallback);
    for (const std::string& o : c.overrides) cfg.apply_override(o);
    cfg.validate();
    return cfg;
}

fs::path run_dir_of(const Common& c, const RunConfig& cfg) {
    return c.run_dir.empty() ? run_root() / cfg.name : fs::path(c.run_dir);
}

fs::path data_dir_of(const Common& c, const RunConfig& cfg) {
    if (!c.data_dir.empty()) return c.data_dir;
    if (!cfg.data_dir.empty()) return cfg.data_dir;
    return run_root() / "data";
}

void write_text(const fs::path& file, const std::string& text) {
    std::ofstream f(file);
    if (!f) throw std::runtime_error("cannot write " + file.string());
    f << text;
}

std::vector<ManifestEntry> manifest_or_hint(const fs::path& data) {
    if (!fs::exists(data / "manifest.txt"))
        throw ConfigError("no dataset at " + data.string() + "; run `clda generate-data` first");
    return read_manifest(data);
}

// Keeps the first `steps` records of a JSON-lines log (used on resume).
void truncate_log(const fs::path& log, int steps) {
    if (!fs::exists(log)) return;
    std::ifstream in(log);
    std::vector<std::string> keep;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (nlohmann::json::parse(line).at("step").get<int>() < steps) keep.push_back(line);
    }
    in.close();
    std::ofstream out(log, std::ios::trunc);
    for (const auto& l : keep) out << l << '\n';
}

// ------------------------------------------------------------- commands

int cmd_generate(const Common& c, const std::string& out_opt, bool force) {
    const RunConfig cfg = resolve_config(c);
    const fs::path out = out_opt.empty() ? data_dir_of(c, cfg) : fs::path(out_opt);
    if (fs::exists(out) && !fs::is_empty(out)) {
        if (!force) throw ConfigError(out.string() + " is not empty; pass --force to overwrite");
        for (const char* p : {"images", "labels", "manifest.txt"}) fs::remove_all(out / p);
    }
    fs::create_directories(out);
    write_dataset(out, generate_dataset(cfg.data));

    // read-back validation
    const std::vector<ManifestEntry> entries = read_manifest(out);
    const std::pair<DomainTag, Split> parts[] = {{DomainTag::Source, Split::Train},
                                                  {DomainTag::Source, Split::Eval},
                                                  {DomainTag::Target, Split::Train},
                                                  {DomainTag::Target, Split::Eval}};
    const int expected[] = {cfg.data.source_train, cfg.data.source_eval, cfg.data.target_train, cfg.data.target_eval};
    for (int k = 0; k < 4; ++k) {
        const auto sel = select(entries, parts[k].first, parts[k].second);
        if (static_cast<int>(sel.size()) != expected[k]) throw std::runtime_error("manifest read-back count mismatch");
        for (const ManifestEntry& e : sel) {
            if (!fs::exists(out / e.image)) throw std::runtime_error("missing " + e.image);
            if (!e.label.empty()) read_labels(out / e.label, cfg.data.scene.canvas, cfg.data.scene.canvas);
        }
        std::cout << to_string(parts[k].first) << "/" << to_string(parts[k].second) << ": " << sel.size() << "\n";
    }
    write_text(out / "dataset.ini", cfg.dump());
    std::cout << "dataset written to " << out.string() << "\n";
    return kOk;
}

int cmd_train(const Common& c, const std::string& phase, const std::string& from, bool resume, int max_steps) {
    if (phase != "burn-in" && phase != "adapt") throw ConfigError("--phase must be burn-in or adapt");
    const Common& cc = c;
    std::optional<fs::path> fallback;
    if (!c.run_dir.empty()) fallback = fs::path(c.run_dir) / "config.ini";
    const RunConfig cfg = resolve_config(cc, phase == "adapt" ? fallback : std::nullopt);
    const fs::path run = run_dir_of(c, cfg);
    const fs::path data = data_dir_of(c, cfg);
    const std::vector<ManifestEntry> entries = manifest_or_hint(data);
    fs::create_directories(run);
    write_text(run / "config.ini", cfg.dump());

    const bool burn = phase == "burn-in";
    const std::string stem = burn ? "burn_in" : "adapt";
    const fs::path log_path = run / (stem + ".log.jsonl");
    const fs::path last = run / (stem + ".last.ckpt");
    const fs::path final_ckpt = run / (stem + ".ckpt");

    Trainer trainer(cfg.train);
    trainer.initialize();
    bool resumed = false;
    if (resume && fs::exists(last)) {
        if (read_checkpoint_info(last).config_hash != cfg.train.detector.hash())
            throw ConfigError("checkpoint " + last.string() + " does not match the detector config");
        load_checkpoint(last, trainer);
        resumed = true;
    }
    if (!burn && !resumed) {
        const fs::path src = from.empty() ? run / "burn_in.ckpt" : fs::path(from);
        if (!fs::exists(src))
            throw ConfigError("no burn-in checkpoint at " + src.string() +
                              "; run `clda train --phase burn-in` first or pass --from");
        if (read_checkpoint_info(src).config_hash != cfg.train.detector.hash())
            throw ConfigError("burn-in checkpoint does not match the detector config");
        load_checkpoint(src, trainer);
        if (trainer.state().phase != Phase::Adapt) throw ConfigError(src.string() + " is not a finished burn-in");
    }
    if (resumed) truncate_log(log_path, trainer.state().step);
    else fs::remove(log_path);

    std::ofstream log(log_path, std::ios::app);
    int done = 0;
    auto on_step = [&](const StepRecord& r) {
        log << r.to_json() << '\n';
        log.flush();
        if (!r.finite) std::cerr << "step " << r.step << ": non-finite loss, update skipped\n";
        ++done;
        if (cfg.checkpoint_every > 0 && trainer.state().step % cfg.checkpoint_every == 0) save_checkpoint(last, trainer);
        if (r.step % 50 == 0)
            std::cerr << stem << " step " << r.step << " total " << r.total << " sup " << r.l_sup << " distill "
                      << r.l_distill << " gain " << r.gain << "\n";
        return max_steps <= 0 || done < max_steps;
    };

    const int goal = burn ? cfg.train.burn_in_steps : cfg.train.adapt_steps;
    if (burn) {
        const SampleStore source = SampleStore::load(data, select(entries, DomainTag::Source, Split::Train));
        run_burn_in(trainer, source, on_step);
    } else {
        const SampleStore source = SampleStore::load(data, select(entries, DomainTag::Source, Split::Train));
        const SampleStore target = SampleStore::load(data, select(entries, DomainTag::Target, Split::Train));
        run_adapt(trainer, source, target, on_step);
    }
    const bool finished = burn ? trainer.state().phase == Phase::Adapt : trainer.state().step >= goal;
    save_checkpoint(finished ? final_ckpt : last, trainer);
    if (finished) fs::remove(last);
    std::cout << stem << (finished ? " finished: " : " interrupted: ") << (finished ? final_ckpt : last).string() << "\n";
    return kOk;
}

Split split_of(const std::string& s, DomainTag& dom) {
    const auto dash = s.find('-');
    if (dash == std::string::npos) throw ConfigError("--split expects <domain>-<train|eval>, got '" + s + "'");
    dom = domain_from_string(s.substr(0, dash));
    return split_from_string(s.substr(dash + 1));
}

int cmd_evaluate(const Common& c, const std::string& ckpt_opt, const std::string& model, const std::string& split_s,
                 const std::string& out_opt) {
    if (model != "teacher" && model != "student") throw ConfigError("--model must be teacher or student");
    std::optional<fs::path> fallback;
    if (!c.run_dir.empty()) fallback = fs::path(c.run_dir) / "config.ini";
    const RunConfig cfg = resolve_config(c, fallback);
    const fs::path run = run_dir_of(c, cfg);
    fs::path ckpt = ckpt_opt;
    if (ckpt.empty()) ckpt = fs::exists(run / "adapt.ckpt") ? run / "adapt.ckpt" : run / "burn_in.ckpt";
    if (!fs::exists(ckpt)) throw ConfigError("checkpoint " + ckpt.string() + " not found");
    if (read_checkpoint_info(ckpt).config_hash != cfg.train.detector.hash())
        throw ConfigError("checkpoint config hash does not match the current detector config");

    DomainTag dom;
    const Split split = split_of(split_s, dom);
    if (dom == DomainTag::Target && split == Split::Train)
        throw ConfigError("target-train labels are hidden; evaluate on an eval split");
    const fs::path data = data_dir_of(c, cfg);
    const auto entries = select(manifest_or_hint(data), dom, split);
    if (entries.empty()) throw ConfigError("split " + split_s + " is empty");

    Trainer trainer(cfg.train);
    load_checkpoint(ckpt, trainer);
    const Detector& det = model == "teacher" ? trainer.teacher() : trainer.student();
    const EvalResult r = evaluate_model(det, data, entries, cfg.eval_post, cfg.eval_iou, cfg.eval_batch);
    const auto names = class_names();
    const std::string report =
        format_report(r, names, model + " @ " + ckpt.filename().string() + " on " + split_s);
    std::cout << report;
    const fs::path out = out_opt.empty()
                             ? ckpt.parent_path() / ("eval_" + ckpt.stem().string() + "_" + model + "_" + split_s + ".txt")
                             : fs::path(out_opt);
    write_text(out, report);
    return kOk;
}

int cmd_export(const Common& c, const std::string& ckpt_opt, const std::string& out_opt) {
    std::optional<fs::path> fallback;
    if (!c.run_dir.empty()) fallback = fs::path(c.run_dir) / "config.ini";
    const RunConfig cfg = resolve_config(c, fallback);
    const fs::path run = run_dir_of(c, cfg);
    const fs::path ckpt = ckpt_opt.empty() ? run / "adapt.ckpt" : fs::path(ckpt_opt);
    if (!fs::exists(ckpt)) throw ConfigError("checkpoint " + ckpt.string() + " not found");
    if (read_checkpoint_info(ckpt).config_hash != cfg.train.detector.hash())
        throw ConfigError("checkpoint config hash does not match the current detector config");
    Trainer trainer(cfg.train);
    load_checkpoint(ckpt, trainer);

    std::ostringstream os;
    os << "domain\tlevel\tstage\tcategory\tconfidence\tfeature\n";
    std::size_t rows = 0;
    for (const DomainQueue* q : trainer.queues().all())
        for (const InstanceFeature& f : q->entries()) {
            os << to_string(f.domain) << '\t' << f.level << '\t' << to_string(f.stage) << '\t' << f.category << '\t'
               << f.confidence << '\t';
            for (std::size_t k = 0; k < f.feature.size(); ++k) os << (k ? "," : "") << f.feature[k];
            os << '\n';
            ++rows;
        }
    const fs::path out = out_opt.empty() ? ckpt.parent_path() / "features.tsv" : fs::path(out_opt);
    write_text(out, os.str());
    std::cout << rows << " instances written to " << out.string() << "\n";
    return kOk;
}

int cmd_report(const Common& c) {
    std::optional<fs::path> fallback;
    if (!c.run_dir.empty()) fallback = fs::path(c.run_dir) / "config.ini";
    const RunConfig cfg = resolve_config(c, fallback);
    const fs::path run = run_dir_of(c, cfg);
    if (!fs::is_directory(run)) throw ConfigError("no run directory at " + run.string());

    std::ostringstream os;
    os << "run: " << run.string() << "\n";
    for (const char* stem : {"burn_in", "adapt"}) {
        const fs::path log = run / (std::string(stem) + ".log.jsonl");
        if (!fs::exists(log)) continue;
        std::ifstream in(log);
        std::vector<nlohmann::json> recs;
        std::string line;
        while (std::getline(in, line))
            if (!line.empty()) recs.push_back(nlohmann::json::parse(line));
        os << "\n[" << stem << "] " << recs.size() << " steps logged\n";
        if (recs.empty()) continue;
        const std::size_t tail = std::min<std::size_t>(recs.size(), 50);
        int skipped = 0;
        for (const auto& r : recs) skipped += r.value("finite", true) ? 0 : 1;
        for (const char* key : {"L_sup", "L_distill", "L_adv", "L_CA", "total"}) {
            double head = 0.0, end = 0.0;
            for (std::size_t i = 0; i < tail; ++i) {
                head += recs[i].value(key, 0.0);
                end += recs[recs.size() - 1 - i].value(key, 0.0);
            }
            char buf[160];
            std::snprintf(buf, sizeof buf, "  %-10s first-%zu mean %.5f  last-%zu mean %.5f\n", key, tail, head / tail,
                          tail, end / tail);
            os << buf;
        }
        os << "  final gain " << recs.back().value("gain", 1.0) << ", lr " << recs.back().value("lr", 0.0)
           << ", skipped steps " << skipped << "\n";
    }
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(run)) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    os << "\ncheckpoints:\n";
    for (const fs::path& p : files)
        if (p.extension() == ".ckpt") {
            const CheckpointInfo info = read_checkpoint_info(p);
            os << "  " << p.filename().string() << "  phase " << to_string(info.phase) << " step " << info.step << "\n";
        }
    os << "\nevaluations:\n";
    for (const fs::path& p : files)
        if (p.filename().string().rfind("eval_", 0) == 0 && p.extension() == ".txt") {
            std::ifstream in(p);
            std::string line;
            while (std::getline(in, line))
                if (line.rfind("map50=", 0) == 0) os << "  " << p.stem().string().substr(5) << "  " << line << "\n";
        }
    std::cout << os.str();
    write_text(run / "report.txt", os.str());
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"clda: cross-domain detector adaptation toolkit"};
    app.require_subcommand(1);

    Common gen_c, train_c, eval_c, exp_c, rep_c;
    std::string gen_out;
    bool gen_force = false;
    auto* gen = app.add_subcommand("generate-data", "write the synthetic two-domain dataset");
    add_common(gen, gen_c, false);
    gen->add_option("-o,--out", gen_out, "output directory (default: --data or run.data_dir)");
    gen->add_flag("--force", gen_force, "overwrite a non-empty output directory");

    std::string phase, from;
    bool resume = false;
    int max_steps = 0;
    auto* train = app.add_subcommand("train", "burn-in or adaptation training");
    add_common(train, train_c);
    train->add_option("--phase", phase, "burn-in | adapt")->required();
    train->add_option("--from", from, "burn-in checkpoint for adapt (default: <run>/burn_in.ckpt)");
    train->add_flag("--resume", resume, "continue from the latest periodic checkpoint");
    train->add_option("--max-steps", max_steps, "stop after this many steps in this invocation");

    std::string ckpt, model = "teacher", split = "target-eval", eval_out;
    auto* ev = app.add_subcommand("evaluate", "mAP@.5 of a checkpoint on one split");
    add_common(ev, eval_c);
    ev->add_option("--checkpoint", ckpt, "checkpoint file (default: <run>/adapt.ckpt, else burn_in.ckpt)");
    ev->add_option("--model", model, "teacher | student");
    ev->add_option("--split", split, "source-eval | target-eval | source-train");
    ev->add_option("-o,--out", eval_out, "report file");

    std::string exp_ckpt, exp_out;
    auto* ex = app.add_subcommand("export-features", "dump alignment queues as a TSV table");
    add_common(ex, exp_c);
    ex->add_option("--checkpoint", exp_ckpt, "checkpoint file (default: <run>/adapt.ckpt)");
    ex->add_option("-o,--out", exp_out, "output file");

    auto* rep = app.add_subcommand("report", "summarise a run directory");
    add_common(rep, rep_c);

    bool describe = false;
    auto* cfgcmd = app.add_subcommand("config", "print every config key with its default");
    cfgcmd->add_flag("--describe", describe, "include descriptions");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kUsage;
    }

    try {
        if (*gen) return cmd_generate(gen_c, gen_out, gen_force);
        if (*train) return cmd_train(train_c, phase, from, resume, max_steps);
        if (*ev) return cmd_evaluate(eval_c, ckpt, model, split, eval_out);
        if (*ex) return cmd_export(exp_c, exp_ckpt, exp_out);
        if (*rep) return cmd_report(rep_c);
        if (*cfgcmd) {
            std::cout << (describe ? RunConfig::describe() : RunConfig{}.dump());
            return kOk;
        }
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const InvalidArgument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "failure: " << e.what() << "\n";
        return kRuntime;
    }
    return kUsage;
}
