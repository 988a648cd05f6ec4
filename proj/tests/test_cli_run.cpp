#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "clda/data/synth.hpp"
#include "tempdir.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
    int code;
    std::string out;
};

Result run_cli(const fs::path& cwd, const std::string& args) {
    const fs::path log = cwd / "cli.out";
    const std::string cmd = "cd '" + cwd.string() + "' && CLDA_RUN_ROOT='" + cwd.string() + "' '" CLDA_CLI_PATH "' " +
                            args + " > '" + log.string() + "' 2>&1";
    const int status = std::system(cmd.c_str());
    std::ifstream in(log);
    std::stringstream ss;
    ss << in.rdbuf();
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_tiny_config(const fs::path& file) {
    std::ofstream(file) << "[data]\nsource_train = 6\nsource_eval = 3\ntarget_train = 6\ntarget_eval = 3\n"
                           "canvas = 64\nmin_size = 10\nmax_size = 24\n"
                           "[detector]\ninput_size = 64\nreg_max = 4\n"
                           "[train]\nbatch_size = 2\nburn_in_steps = 4\nadapt_steps = 3\nwarmup_steps = 2\n"
                           "[teacher]\nconfidence_floor = 0\n"
                           "[dynaug]\nwarmup_steps = 1\n"
                           "[align]\nqueue_capacity = 16\nharvest_floor = 0\n"
                           "[eval]\nbatch = 4\n";
}

}  // namespace

TEST_SUITE("cli_integration") {

TEST_CASE("usage errors exit with code 1") {
    TempDir dir("cli_usage");
    CHECK(run_cli(dir.path(), "").code == 1);
    CHECK(run_cli(dir.path(), "frobnicate").code == 1);
    CHECK(run_cli(dir.path(), "train").code == 1);
    const Result r = run_cli(dir.path(), "train --phase burn-in --set train.nope=1");
    CHECK(r.code == 1);
    CHECK(r.out.find("train.nope") != std::string::npos);
    const Result missing = run_cli(dir.path(), "evaluate --data nowhere --checkpoint x.ckpt");
    CHECK(missing.code == 1);
    CHECK(run_cli(dir.path(), "--help").code == 0);
    CHECK(run_cli(dir.path(), "config --describe").code == 0);
}

TEST_CASE("generate, train, evaluate, export and report on a tiny dataset") {
    TempDir dir("cli_flow");
    const fs::path& d = dir.path();
    write_tiny_config(d / "tiny.ini");

    Result r = run_cli(d, "generate-data -c tiny.ini --data data");
    REQUIRE_MESSAGE(r.code == 0, r.out);
    CHECK(fs::exists(d / "data" / "manifest.txt"));
    CHECK(clda::read_manifest(d / "data").size() == 18);
    CHECK(run_cli(d, "generate-data -c tiny.ini --data data").code == 1);
    CHECK(run_cli(d, "generate-data -c tiny.ini --data data --force").code == 0);

    // adapt before burn-in points at the missing checkpoint
    r = run_cli(d, "train --phase adapt -c tiny.ini --data data --run r1");
    CHECK(r.code == 1);
    CHECK(r.out.find("burn-in") != std::string::npos);

    r = run_cli(d, "train --phase burn-in -c tiny.ini --data data --run r1");
    REQUIRE_MESSAGE(r.code == 0, r.out);
    CHECK(fs::exists(d / "r1" / "burn_in.ckpt"));

    r = run_cli(d, "train --phase adapt --data data --run r1");
    REQUIRE_MESSAGE(r.code == 0, r.out);
    CHECK(fs::exists(d / "r1" / "adapt.ckpt"));

    r = run_cli(d, "evaluate --data data --run r1 --split target-eval");
    REQUIRE_MESSAGE(r.code == 0, r.out);
    CHECK(r.out.find("map50=") != std::string::npos);
    CHECK(run_cli(d, "evaluate --data data --run r1 --split target-train").code == 1);
    CHECK(run_cli(d, "evaluate --data data --run r1 --model critic").code == 1);

    r = run_cli(d, "export-features --run r1");
    REQUIRE_MESSAGE(r.code == 0, r.out);
    CHECK(slurp(d / "r1" / "features.tsv").rfind("domain\tlevel", 0) == 0);

    r = run_cli(d, "report --run r1");
    REQUIRE_MESSAGE(r.code == 0, r.out);
    CHECK(r.out.find("[adapt] 3 steps logged") != std::string::npos);
    CHECK(r.out.find("map50=") != std::string::npos);

    // mismatched detector config is refused
    CHECK(run_cli(d, "evaluate --data data --run r1 --set detector.reg_max=6").code == 1);
}

TEST_CASE("interrupted adaptation resumes to the same log") {
    TempDir dir("cli_resume");
    const fs::path& d = dir.path();
    write_tiny_config(d / "tiny.ini");
    REQUIRE(run_cli(d, "generate-data -c tiny.ini --data data").code == 0);
    REQUIRE(run_cli(d, "train --phase burn-in -c tiny.ini --data data --run a").code == 0);
    fs::create_directories(d / "b");
    fs::copy_file(d / "a" / "burn_in.ckpt", d / "b" / "burn_in.ckpt");

    REQUIRE(run_cli(d, "train --phase adapt -c tiny.ini --data data --run a").code == 0);
    const std::string cfg = "-c tiny.ini --set run.checkpoint_every=1 --data data --run b";
    REQUIRE(run_cli(d, "train --phase adapt " + cfg + " --max-steps 2").code == 0);
    CHECK(fs::exists(d / "b" / "adapt.last.ckpt"));
    REQUIRE(run_cli(d, "train --phase adapt " + cfg + " --resume").code == 0);
    CHECK(slurp(d / "a" / "adapt.log.jsonl") == slurp(d / "b" / "adapt.log.jsonl"));
}

}
