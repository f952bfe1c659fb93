// Command-line driver for the constrained-margin pipeline.
//
//   cmargin dataset  --config run.json     synthetic dataset + PCA spectrum
//   cmargin zoo      --config run.json     train (or resume) the model zoo
//   cmargin measure  --mode constrained-deepfool,input-taylor
//   cmargin evaluate                        Kendall tau and CMI per mode
//   cmargin sweep                           window / m / sample-count / clipping sweeps
//
// Exit codes: 0 success, 2 config error, 3 data error, 4 numeric error.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "cmargin/error.hpp"
#include "cmargin/pipeline.hpp"

namespace {

using namespace cmargin;

struct Options {
    std::string config;
    std::optional<std::size_t> jobs;
    std::optional<std::string> out;
    std::optional<std::string> modes;
    std::optional<std::uint64_t> seed;
};

RunConfig resolve(const Options& opt) {
    RunConfig config = opt.config.empty() ? RunConfig{} : load_run_config(opt.config);
    if (opt.jobs) config.jobs = *opt.jobs;
    if (opt.out) config.output_dir = *opt.out;
    if (opt.seed) config.seed = *opt.seed;
    if (opt.modes) apply_mode_list(config, *opt.modes);
    config.validate();
    return config;
}

void report_dataset(const RunConfig& config) {
    const auto r = cmd_dataset(config);
    std::printf("dataset: %zu train / %zu test samples, %zu features\n", r.data.train.num_samples(),
                r.data.test.num_samples(), r.data.train.num_features());
    if (r.selection.fallback) {
        std::printf("kneedle: no knee, fallback m = %zu\n", r.selection.m);
    } else {
        std::printf("kneedle: knee at component %zu, m = %zu\n", *r.selection.knee_index, r.selection.m);
    }
}

void report_zoo(const RunConfig& config) {
    const auto zoo = cmd_zoo(config);
    std::size_t failed = 0;
    for (const auto& m : zoo) {
        if (m.entry.failed) {
            ++failed;
            std::printf("%s failed: %s\n", m.entry.model_id.c_str(), m.entry.failure.c_str());
        }
    }
    std::printf("zoo: %zu models, %zu failed, test-accuracy spread %.3f\n", zoo.size(), failed,
                test_accuracy_spread(zoo));
}

void report_measure(const RunConfig& config) {
    const auto r = cmd_measure(config);
    std::printf("basis: m = %zu%s\n", r.selected_m, r.basis_reused ? " (reused)" : "");
    for (const auto& [label, values] : r.columns) {
        double mean = 0.0;
        for (const double v : values) mean += v;
        std::printf("%-28s mean margin over zoo %.6g\n", label.c_str(), mean / static_cast<double>(values.size()));
    }
}

void report_evaluate(const RunConfig& config) {
    const auto r = cmd_evaluate(config);
    std::printf("test-accuracy spread %.3f\n", r.test_accuracy_spread);
    for (const auto& m : r.modes) {
        if (m.cmi) {
            std::printf("%-28s tau %+.3f  cmi %.2f\n", m.mode.c_str(), m.tau, *m.cmi);
        } else {
            std::printf("%-28s tau %+.3f  cmi n/a\n", m.mode.c_str(), m.tau);
        }
    }
}

void report_sweep(const RunConfig& config) {
    const auto r = cmd_sweep(config);
    for (const auto& curve : r.curves) {
        std::printf("%s:", curve.label.c_str());
        for (const auto& p : curve.points) std::printf(" %g:%+.3f%s", p.parameter, p.tau, p.flagged ? "!" : "");
        std::printf("\n");
    }
    if (r.clipping) {
        std::printf("clipping: constrained %+.3f / %+.3f, input %+.3f / %+.3f (clip on / off)%s\n",
                    r.clipping->constrained_clipped, r.clipping->constrained_unclipped, r.clipping->input_clipped,
                    r.clipping->input_unclipped, r.clipping->unclipped_left_bounds ? "" : " [vacuous]");
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Constrained input margins as a generalization measure"};
    app.require_subcommand(1);
    Options opt;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", opt.config, "JSON run config (defaults apply to absent keys)")
            ->check(CLI::ExistingFile);
        sub->add_option("--jobs", opt.jobs, "worker threads (default: available parallelism)")
            ->check(CLI::PositiveNumber);
        sub->add_option("--out", opt.out, "output directory (overrides output_dir)");
        sub->add_option("--seed", opt.seed, "run seed (overrides seed)");
    };

    struct Command {
        const char* name;
        const char* help;
        void (*run)(const RunConfig&);
    };
    const Command commands[] = {
        {"dataset", "generate the synthetic dataset and its PCA spectrum", report_dataset},
        {"zoo", "train the model zoo (resumes completed models)", report_zoo},
        {"measure", "fit or reuse the basis and compute mean margins per model", report_measure},
        {"evaluate", "rank correlation and CMI of every measured mode", report_evaluate},
        {"sweep", "component-window, m, sample-count and clipping sweeps", report_sweep},
    };
    for (const auto& c : commands) {
        auto* sub = app.add_subcommand(c.name, c.help);
        add_common(sub);
        if (std::string(c.name) == "measure" || std::string(c.name) == "evaluate") {
            sub->add_option("--mode", opt.modes,
                            "comma-separated modes: input-taylor, input-deepfool, constrained-taylor, "
                            "constrained-deepfool, hidden-taylor[-first|-last|-all|-equally-spaced]");
        }
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        const auto config = resolve(opt);
        for (const auto& c : commands) {
            if (app.got_subcommand(c.name)) c.run(config);
        }
        return 0;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return 4;
    } catch (const std::filesystem::filesystem_error& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
