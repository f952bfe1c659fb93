#include <cmath>

#include <doctest.h>

#include "cmargin/error.hpp"
#include "cmargin/train.hpp"
#include "testing.hpp"

using namespace cmargin;
using cmargin::testing::scratch_dir;

namespace {

SyntheticSpec separable_blobs() {
    SyntheticSpec spec;
    spec.generator = "blobs";
    spec.num_classes = 2;
    spec.ambient_dim = 2;
    spec.signal_dim = 2;
    spec.noise_std = 0.3;
    spec.separation = 6.0;
    spec.train_samples = 200;
    spec.test_samples = 200;
    return spec;
}

SyntheticSpec small_annuli() {
    SyntheticSpec spec;
    spec.ambient_dim = 6;
    spec.signal_dim = 2;
    spec.separation = 1.0;
    spec.train_samples = 150;
    spec.test_samples = 150;
    return spec;
}

HyperParams small_hp(std::uint64_t seed) {
    HyperParams hp;
    hp.depth = 1;
    hp.width = 16;
    hp.learning_rate = 0.1;
    hp.seed = seed;
    return hp;
}

}  // namespace

TEST_CASE("separated blobs admit a perfect linear probe") {
    const auto data = make_synthetic_dataset(separable_blobs(), 3);
    // Least-squares fit of one-hot targets with a bias column.
    const auto n = static_cast<Eigen::Index>(data.train.num_samples());
    Eigen::MatrixXd a(n, 3), y = Eigen::MatrixXd::Zero(n, 2);
    for (Eigen::Index s = 0; s < n; ++s) {
        a(s, 0) = data.train.inputs(static_cast<std::size_t>(s), 0);
        a(s, 1) = data.train.inputs(static_cast<std::size_t>(s), 1);
        a(s, 2) = 1.0;
        y(s, data.train.labels[static_cast<std::size_t>(s)]) = 1.0;
    }
    const Eigen::MatrixXd w = a.colPivHouseholderQr().solve(y);
    std::size_t correct = 0;
    for (std::size_t s = 0; s < data.test.num_samples(); ++s) {
        Eigen::RowVector3d row(data.test.inputs(s, 0), data.test.inputs(s, 1), 1.0);
        Eigen::Index arg;
        (row * w).maxCoeff(&arg);
        if (arg == data.test.labels[s]) ++correct;
    }
    CHECK(correct == data.test.num_samples());
}

TEST_CASE("noise-free annuli lie exactly on their rings") {
    auto spec = small_annuli();
    spec.noise_std = 0.0;
    spec.separation = 1.5;
    std::vector<int> labels;
    const Tensor x = synthetic_raw_inputs(spec, 4, "train", labels);
    for (std::size_t s = 0; s < x.extent(0); ++s) {
        const double r = std::hypot(x(s, 0), x(s, 1));
        CHECK(std::abs(r - 1.5 * (labels[s] + 1)) <= 1e-12);
    }
}

TEST_CASE("non-signal coordinates follow the mixing rows") {
    auto spec = small_annuli();
    spec.nuisance_std = 0.0;
    std::vector<int> labels;
    const Tensor x = synthetic_raw_inputs(spec, 5, "train", labels);
    // Without nuisance noise every remaining coordinate is a fixed linear
    // function of the signal: the (samples, 6) matrix has rank 2.
    Eigen::MatrixXd m(static_cast<Eigen::Index>(x.extent(0)), 6);
    for (std::size_t s = 0; s < x.extent(0); ++s)
        for (std::size_t c = 0; c < 6; ++c) m(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(c)) = x(s, c);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
    CHECK(svd.singularValues()(2) <= 1e-10 * svd.singularValues()(0));
}

TEST_CASE("dataset generation is deterministic and normalized") {
    const auto a = make_synthetic_dataset(small_annuli(), 8);
    const auto b = make_synthetic_dataset(small_annuli(), 8);
    CHECK(a.train.inputs == b.train.inputs);
    CHECK(a.test.inputs == b.test.inputs);
    CHECK(a.train.labels == b.train.labels);
    CHECK(a.train.checksum() == b.train.checksum());
    CHECK(make_synthetic_dataset(small_annuli(), 9).train.checksum() != a.train.checksum());

    for (std::size_t c = 0; c < a.train.num_features(); ++c) {
        double mean = 0.0, sq = 0.0;
        const auto n = a.train.num_samples();
        for (std::size_t s = 0; s < n; ++s) mean += a.train.inputs(s, c);
        mean /= static_cast<double>(n);
        for (std::size_t s = 0; s < n; ++s) sq += (a.train.inputs(s, c) - mean) * (a.train.inputs(s, c) - mean);
        CHECK(std::abs(mean) <= 1e-12);
        CHECK(std::abs(sq / static_cast<double>(n - 1) - 1.0) <= 1e-12);
    }
    CHECK(a.train.stddev == a.test.stddev);
    CHECK_NOTHROW(a.test.validate());
}

TEST_CASE("invalid dataset specs") {
    auto spec = small_annuli();
    spec.generator = "spirals";
    CHECK_THROWS_AS(make_synthetic_dataset(spec, 1), ConfigError);
    spec = small_annuli();
    spec.signal_dim = 7;
    CHECK_THROWS_AS(make_synthetic_dataset(spec, 1), ConfigError);
    spec = small_annuli();
    spec.noise_std = -0.1;
    CHECK_THROWS_AS(make_synthetic_dataset(spec, 1), ConfigError);
}

TEST_CASE("training") {
    const auto data = make_synthetic_dataset(separable_blobs(), 3);
    SUBCASE("separable blobs are fit exactly") {
        const auto m = train_model(data.train, data.test, small_hp(1));
        CHECK_FALSE(m.entry.failed);
        CHECK(m.entry.train_accuracy == 1.0);
        CHECK(m.entry.epochs <= TrainSettings{}.epoch_cap);
        CHECK(m.network->num_hidden() == 1);
    }
    SUBCASE("heavy label noise costs test accuracy") {
        auto spec = separable_blobs();
        spec.separation = 1.5;
        spec.noise_std = 1.0;
        const auto hard = make_synthetic_dataset(spec, 3);
        auto noisy = small_hp(1);
        noisy.label_noise_fraction = 0.5;
        noisy.width = 64;
        auto clean = noisy;
        clean.label_noise_fraction = 0.0;
        TrainSettings settings;
        settings.epoch_cap = 300;
        const auto a = train_model(hard.train, hard.test, clean, settings);
        const auto b = train_model(hard.train, hard.test, noisy, settings);
        CHECK(b.entry.test_accuracy < a.entry.test_accuracy);
    }
    SUBCASE("same hyperparameters, same model") {
        const auto a = train_model(data.train, data.test, small_hp(2));
        const auto b = train_model(data.train, data.test, small_hp(2));
        CHECK(a.entry.train_loss == b.entry.train_loss);
        CHECK(a.entry.test_accuracy == b.entry.test_accuracy);
        CHECK(a.entry.epochs == b.entry.epochs);
        const std::vector<double> x{0.3, -0.2};
        CHECK(a.network->forward(x) == b.network->forward(x));
    }
    SUBCASE("inputs are left untouched") {
        const auto before_train = data.train.checksum(), before_test = data.test.checksum();
        auto hp = small_hp(3);
        hp.label_noise_fraction = 0.3;
        hp.train_subset_size = 50;
        train_model(data.train, data.test, hp);
        CHECK(data.train.checksum() == before_train);
        CHECK(data.test.checksum() == before_test);
    }
    SUBCASE("depth zero is a linear softmax model") {
        auto hp = small_hp(4);
        hp.depth = 0;
        const auto m = train_model(data.train, data.test, hp);
        CHECK(m.network->num_hidden() == 0);
        CHECK(m.entry.test_accuracy == 1.0);
    }
    SUBCASE("divergence marks the entry failed") {
        auto hp = small_hp(5);
        hp.learning_rate = 1e300;
        const auto m = train_model(data.train, data.test, hp);
        CHECK(m.entry.failed);
        CHECK_FALSE(m.network.has_value());
    }
    SUBCASE("invalid hyperparameters") {
        auto hp = small_hp(6);
        hp.label_noise_fraction = 1.5;
        CHECK_THROWS_AS(train_model(data.train, data.test, hp), ConfigError);
        hp = small_hp(6);
        hp.width = 0;
        CHECK_THROWS_AS(train_model(data.train, data.test, hp), ConfigError);
    }
}

TEST_CASE("label noise flips the requested fraction to other classes") {
    std::vector<int> labels(200);
    for (std::size_t k = 0; k < labels.size(); ++k) labels[k] = static_cast<int>(k % 4);
    const auto noisy = noisy_labels(labels, 4, 0.25, 11);
    std::size_t flipped = 0;
    for (std::size_t k = 0; k < labels.size(); ++k) {
        CHECK(noisy[k] >= 0);
        CHECK(noisy[k] < 4);
        if (noisy[k] != labels[k]) ++flipped;
    }
    CHECK(flipped == 50);
    CHECK(noisy_labels(labels, 4, 0.25, 11) == noisy);
    CHECK(noisy_labels(labels, 4, 0.0, 11) == labels);
}

TEST_CASE("zoo construction") {
    const auto data = make_synthetic_dataset(separable_blobs(), 3);
    TrainSettings settings;
    settings.epoch_cap = 50;
    SUBCASE("grid of one") {
        const auto zoo = build_zoo({small_hp(1)}, data.train, data.test, settings);
        CHECK(zoo.size() == 1);
        CHECK(zoo[0].entry.model_id == "m000");
    }
    SUBCASE("duplicate grid points give duplicate entries") {
        const auto zoo = build_zoo({small_hp(7), small_hp(7)}, data.train, data.test, settings, std::nullopt, 2);
        CHECK(zoo[0].entry.test_accuracy == zoo[1].entry.test_accuracy);
        CHECK(zoo[0].entry.train_loss == zoo[1].entry.train_loss);
    }
    SUBCASE("empty grid") { CHECK_THROWS_AS(build_zoo({}, data.train, data.test, settings), ConfigError); }
    SUBCASE("all entries failing") {
        auto hp = small_hp(1);
        hp.learning_rate = 1e300;
        CHECK_THROWS_AS(build_zoo({hp}, data.train, data.test, settings), NumericError);
    }
    SUBCASE("failed entries are kept but left out of the table") {
        auto bad = small_hp(1);
        bad.learning_rate = 1e300;
        const auto dir = scratch_dir("zoo");
        const auto zoo = build_zoo({small_hp(1), bad}, data.train, data.test, settings, dir);
        CHECK(zoo[1].entry.failed);
        CHECK(read_zoo_table(dir / "zoo.csv").size() == 1);
    }
    SUBCASE("persisted zoos resume and refuse mismatched grids") {
        const auto dir = scratch_dir("zoo");
        const std::vector<HyperParams> grid{small_hp(1), small_hp(2), small_hp(3)};
        const auto first = build_zoo({grid[0]}, data.train, data.test, settings, dir);
        const auto stamp = std::filesystem::last_write_time(dir / "m000" / "meta.json");
        const auto all = build_zoo(grid, data.train, data.test, settings, dir);
        CHECK(std::filesystem::last_write_time(dir / "m000" / "meta.json") == stamp);
        CHECK(all[0].entry.test_accuracy == first[0].entry.test_accuracy);
        const auto table = read_zoo_table(dir / "zoo.csv");
        REQUIRE(table.size() == 3);
        CHECK(table[2].hyperparams == grid[2]);
        CHECK(table[1].test_accuracy == all[1].entry.test_accuracy);

        auto changed = grid;
        changed[1].width = 8;
        CHECK_THROWS_AS(build_zoo(changed, data.train, data.test, settings, dir), ConfigError);
    }
}

TEST_CASE("test-accuracy spread ignores failed entries") {
    std::vector<TrainedModel> zoo(3);
    zoo[0].entry.test_accuracy = 0.6;
    zoo[1].entry.test_accuracy = 0.9;
    zoo[2].entry.test_accuracy = 0.1;
    zoo[2].entry.failed = true;
    CHECK(test_accuracy_spread(zoo) == doctest::Approx(0.3));
}
