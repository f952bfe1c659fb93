#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <string>

#include <doctest.h>

#include "testing.hpp"

namespace fs = std::filesystem;
using cmargin::testing::scratch_dir;

namespace {

int run_cli(const std::string& args, const fs::path& log) {
    const std::string cmd = std::string(CMARGIN_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    REQUIRE(WIFEXITED(status));
    return WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path write_config(const fs::path& dir, const std::string& body) {
    const auto path = dir / "run.json";
    std::ofstream(path) << body;
    return path;
}

const char* kSmall = R"({
  "seed": 2,
  "dataset": {"ambient_dim": 6, "signal_dim": 2, "separation": 1.0, "train_samples": 80, "test_samples": 80},
  "zoo": {"depths": [1], "widths": [8, 16], "label_noise_fractions": [0.0], "train_subset_sizes": [0],
          "epoch_cap": 20},
  "margin": {"sample_budget": 30},
  "measure": {"modes": ["input-taylor"]},
  "sweeps": {"window": {"size": 3}}
})";

}  // namespace

TEST_CASE("cli exit codes") {
    const auto dir = scratch_dir("cli");
    const auto log = dir / "log.txt";
    const auto config = write_config(dir, kSmall);
    const std::string common = " --config " + config.string() + " --out " + (dir / "run").string();

    SUBCASE("config errors exit with 2") {
        std::ofstream(dir / "typo.json") << R"({"margin": {"gama": 0.3}})";
        CHECK(run_cli("dataset --config " + (dir / "typo.json").string(), log) == 2);
        CHECK(slurp(log).find("margin.gama") != std::string::npos);
        CHECK(run_cli("measure --mode sideways" + common, log) == 2);
        CHECK(run_cli("frobnicate", log) == 2);
        CHECK(run_cli("dataset --config " + (dir / "absent.json").string(), log) == 2);
    }
    SUBCASE("data errors exit with 3") {
        CHECK(run_cli("measure" + common, log) == 3);
        CHECK(slurp(log).find("cmargin dataset") != std::string::npos);
    }
    SUBCASE("a full run succeeds and honours overrides") {
        CHECK(run_cli("dataset" + common + " --seed 5", log) == 0);
        CHECK(slurp(log).find("kneedle") != std::string::npos);
        CHECK(run_cli("zoo" + common + " --seed 5 --jobs 2", log) == 0);
        CHECK(run_cli("measure" + common + " --seed 5 --mode input-taylor,input-deepfool", log) == 0);
        CHECK(run_cli("evaluate" + common + " --seed 5 --mode input-taylor,input-deepfool", log) == 0);
        CHECK(slurp(log).find("input-deepfool") != std::string::npos);
        CHECK(fs::exists(dir / "run" / "report" / "correlations.csv"));
        const auto resolved = slurp(dir / "run" / "resolved_config.json");
        CHECK(resolved.find("\"seed\": 5") != std::string::npos);
        CHECK(run_cli("evaluate" + common + " --seed 5 --mode constrained-taylor", log) == 3);
    }
}
