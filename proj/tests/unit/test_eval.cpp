#include <cmath>

#include <doctest.h>

#include "cmargin/csv.hpp"
#include "cmargin/error.hpp"
#include "cmargin/eval.hpp"
#include "testing.hpp"

using namespace cmargin;
using namespace cmargin::testing;

namespace {

MeasureSeries toy_series(const std::vector<double>& values, const std::vector<double>& gap,
                         const std::vector<std::string>& type) {
    MeasureSeries s;
    for (std::size_t k = 0; k < values.size(); ++k) {
        s.model_ids.push_back("m" + std::to_string(k));
        s.test_accuracy.push_back(1.0 - gap[k]);
        s.hyperparam_values.push_back({type[k]});
    }
    s.values = values;
    s.gap = gap;
    s.hyperparam_names = {"depth"};
    return s;
}

double entropy_bits(const std::vector<double>& counts) {
    double total = 0.0, h = 0.0;
    for (const double c : counts) total += c;
    for (const double c : counts)
        if (c > 0) h -= c / total * std::log2(c / total);
    return h;
}

struct TinyZoo {
    DatasetPair data;
    std::vector<TrainedModel> zoo;
    PrincipalBasis basis;
};

const TinyZoo& tiny_zoo() {
    static const TinyZoo z = [] {
        TinyZoo out;
        SyntheticSpec spec;
        spec.ambient_dim = 6;
        spec.signal_dim = 2;
        spec.separation = 1.0;
        spec.train_samples = 120;
        spec.test_samples = 120;
        out.data = make_synthetic_dataset(spec, 2);
        std::vector<HyperParams> grid;
        for (const double noise : {0.0, 0.2, 0.4}) {
            HyperParams hp;
            hp.depth = 1;
            hp.width = 24;
            hp.learning_rate = 0.2;
            hp.label_noise_fraction = noise;
            hp.seed = grid.size() + 1;
            grid.push_back(hp);
        }
        TrainSettings settings;
        settings.epoch_cap = 40;
        out.zoo = build_zoo(grid, out.data.train, out.data.test, settings);
        out.basis = fit_pca(out.data.train.inputs);
        return out;
    }();
    return z;
}

ZooContext tiny_context(std::size_t budget = 60) {
    const auto& z = tiny_zoo();
    ZooContext ctx;
    ctx.zoo = &z.zoo;
    ctx.train = &z.data.train;
    ctx.sample_indices = shared_sample_indices(z.data.train.num_samples(), budget, 1);
    return ctx;
}

}  // namespace

TEST_CASE("kendall tau") {
    SUBCASE("perfect agreement and reversal") {
        const std::vector<double> a{1, 2, 3}, b{3, 2, 1};
        CHECK(kendall_tau(a, a) == 1.0);
        CHECK(kendall_tau(a, b) == -1.0);
    }
    SUBCASE("ties in both sequences") {
        const std::vector<double> a{1, 1, 2, 3}, b{1, 2, 2, 3};
        // Pairs: 4 concordant, 1 tied in a only, 1 tied in b only.
        CHECK(kendall_tau(a, b) == doctest::Approx(4.0 / 5.0).epsilon(1e-15));
        CHECK(kendall_tau(a, b) == doctest::Approx(brute_force_tau(a, b)).epsilon(1e-15));
    }
    SUBCASE("published reference values") {
        const std::vector<double> x{17, 86, 60, 77, 47, 3, 70, 87, 88, 92};
        const std::vector<double> y{70, 29, 85, 61, 80, 34, 60, 31, 73, 66};
        CHECK(kendall_tau(x, y) == doctest::Approx(-1.0 / 15.0).epsilon(1e-14));
        const std::vector<double> x_tied{17, 86, 60, 77, 47, 3, 70, 47, 88, 92};
        CHECK(kendall_tau(x_tied, y) == doctest::Approx(0.04494665749754947).epsilon(1e-14));
    }
    SUBCASE("agrees with pair enumeration on random tied data") {
        for (std::uint64_t seed = 0; seed < 50; ++seed) {
            CounterRng rng(seed, "tau");
            const std::size_t n = 2 + rng.below(40);
            std::vector<double> a(n), b(n);
            for (std::size_t k = 0; k < n; ++k) {
                a[k] = static_cast<double>(rng.below(5));
                b[k] = static_cast<double>(rng.below(6));
            }
            a[0] = 0;
            a[1] = 1;
            b[0] = 2;
            b[1] = 3;
            CHECK(std::abs(kendall_tau(a, b) - brute_force_tau(a, b)) <= 1e-12);
        }
    }
    SUBCASE("invariant under increasing transforms") {
        const std::vector<double> a{0.3, 1.2, -0.5, 2.2, 0.9}, b{5, 3, 1, 4, 2};
        std::vector<double> a2(a);
        for (auto& v : a2) v = std::exp(3 * v);
        CHECK(kendall_tau(a, b) == kendall_tau(a2, b));
    }
    SUBCASE("errors") {
        const std::vector<double> a{1, 2, 3}, b{1, 2}, flat{4, 4, 4}, one{1};
        CHECK_THROWS_AS(kendall_tau(a, b), PreconditionError);
        CHECK_THROWS_AS(kendall_tau(one, one), PreconditionError);
        CHECK_THROWS_AS(kendall_tau(a, flat), NumericError);
    }
}

TEST_CASE("conditional mutual information") {
    const std::vector<double> gap{0.05, 0.10, 0.20, 0.07, 0.15, 0.30};
    const std::vector<std::string> depth{"1", "1", "1", "2", "2", "2"};
    SUBCASE("measure equal to gap reaches the bound") {
        // Every cell has H(sign gap) = 1 bit and sign(measure) determines it.
        CHECK(cmi_score(toy_series(gap, gap, depth)) == doctest::Approx(100.0).epsilon(1e-12));
    }
    SUBCASE("constant measure scores zero") {
        CHECK(cmi_score(toy_series(std::vector<double>(6, 1.0), gap, depth)) == doctest::Approx(0.0));
    }
    SUBCASE("sign flip leaves the score unchanged") {
        std::vector<double> neg(gap);
        for (auto& v : neg) v = -v;
        CHECK(cmi_score(toy_series(neg, gap, depth)) == doctest::Approx(cmi_score(toy_series(gap, gap, depth))));
    }
    SUBCASE("partial agreement, enumerated by hand") {
        // Four models, gaps 1..4, measure swaps the last two. Unconditioned:
        // 12 ordered pairs with (m, g) counts (+,+) 5, (-,-) 5, (+,-) 1, (-,+) 1.
        // Conditioned on the type each two-model cell is perfectly
        // (anti)correlated, scoring 1, so the minimum is the unconditioned MI.
        const auto s = toy_series({1, 2, 4, 3}, {1, 2, 3, 4}, {"a", "a", "b", "b"});
        const double mi = 1.0 + 1.0 - entropy_bits({5, 5, 1, 1});
        CHECK(cmi_score(s) == doctest::Approx(100.0 * mi).epsilon(1e-12));
    }
    SUBCASE("insufficient data") {
        const auto tied = toy_series(gap, std::vector<double>(6, 0.1), depth);
        CHECK_THROWS_AS(cmi_score(tied), PreconditionError);
        auto untyped = toy_series(gap, gap, depth);
        untyped.hyperparam_names.clear();
        for (auto& row : untyped.hyperparam_values) row.clear();
        CHECK_THROWS_AS(cmi_score(untyped), PreconditionError);
    }
    SUBCASE("series validation") {
        auto s = toy_series(gap, gap, depth);
        s.values[2] = NAN;
        CHECK_THROWS_AS(cmi_score(s), DataError);
        s = toy_series(gap, gap, depth);
        s.model_ids[1] = s.model_ids[0];
        CHECK_THROWS_AS(s.validate(), DataError);
    }
}

TEST_CASE("series record only the varying hyperparameters") {
    std::vector<ZooEntry> entries(3);
    for (std::size_t k = 0; k < 3; ++k) {
        entries[k].model_id = zoo_model_id(k);
        entries[k].hyperparams.depth = 2;
        entries[k].hyperparams.width = 16 << k;
        entries[k].hyperparams.seed = 5;
        entries[k].train_accuracy = 1.0;
        entries[k].test_accuracy = 0.8 - 0.1 * static_cast<double>(k);
    }
    const auto s = make_series(entries, {1, 2, 3});
    CHECK(s.hyperparam_names == std::vector<std::string>{"width"});
    CHECK(s.gap[2] == doctest::Approx(0.4));
    CHECK_THROWS_AS(make_series(entries, {1, 2}), DataError);
}

TEST_CASE("sweeps over a tiny zoo") {
    const auto& z = tiny_zoo();
    const auto ctx = tiny_context();
    const std::size_t f = z.data.train.num_features();

    SUBCASE("full-basis m matches the input Taylor tau") {
        const auto curve = m_sweep(ctx, z.basis, {f, 1, 2}, 2);
        REQUIRE(curve.points.size() == 3);
        CHECK(curve.points[0].parameter == 1.0);
        const auto input = mean_margins(ctx, MarginRequest{MarginMode::input_taylor});
        CHECK(curve.points[2].tau == doctest::Approx(tau_vs_test_accuracy(ctx, input)).epsilon(1e-12));
        for (std::size_t k = 0; k < input.size(); ++k)
            CHECK(std::abs(curve.points[2].mean_margins[k] - input[k]) <= 1e-10);
        CHECK(curve.marked_parameter == 2.0);
        CHECK_THROWS_AS(m_sweep(ctx, z.basis, {f + 1}, std::nullopt), ConfigError);
    }
    SUBCASE("full-width window matches unconstrained DeepFool") {
        const auto curve = component_window_sweep(ctx, z.basis, f, {0});
        const auto input = mean_margins(ctx, MarginRequest{MarginMode::input_deepfool});
        for (std::size_t k = 0; k < input.size(); ++k)
            CHECK(std::abs(curve.points[0].mean_margins[k] - input[k]) <= 1e-10);
        CHECK_THROWS_AS(component_window_sweep(ctx, z.basis, 3, {4}), ConfigError);
    }
    SUBCASE("windows are reported in start order") {
        const auto curve = component_window_sweep(ctx, z.basis, 2, {3, 0, 1});
        REQUIRE(curve.points.size() == 3);
        CHECK(curve.points[0].parameter == 0.0);
        CHECK(curve.points[2].parameter == 3.0);
        for (const auto& p : curve.points) CHECK(std::abs(p.tau) <= 1.0);
    }
    SUBCASE("full sample count twice gives the same tau") {
        const auto a = sample_count_sweep(ctx, z.basis.truncated(2), {60, 30});
        const auto b = sample_count_sweep(ctx, z.basis.truncated(2), {60});
        CHECK(a.points[1].tau == b.points[0].tau);
        CHECK(a.points[1].mean_margins == b.points[0].mean_margins);
        CHECK_THROWS_AS(sample_count_sweep(ctx, z.basis, {61}), ConfigError);
    }
    SUBCASE("clipping keeps iterates inside the box") {
        const auto ablation = clipping_ablation(ctx, z.basis.truncated(2));
        CHECK(ablation.clipped_within_bounds);
        CHECK(std::abs(ablation.input_clipped) <= 1.0);
    }
    SUBCASE("sweep csv layout") {
        const auto curve = m_sweep(ctx, z.basis, {1, 2}, 2);
        const auto path = scratch_dir("eval") / "m.csv";
        write_sweep_csv(curve, path);
        const auto table = read_csv(path);
        CHECK(table.rows.size() == 2);
        CHECK(table.header.size() == 4 + z.zoo.size());
        CHECK(table.rows[1][table.column("marked")] == "1");
        CHECK(table.rows[0][table.column("marked")] == "0");
    }
    SUBCASE("results do not depend on the worker count") {
        auto wide = ctx;
        wide.jobs = 3;
        const MarginRequest req{MarginMode::input_deepfool};
        CHECK(mean_margins(ctx, req) == mean_margins(wide, req));
    }
}
