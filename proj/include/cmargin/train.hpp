#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cmargin/dataset.hpp"
#include "cmargin/net.hpp"

namespace cmargin {

/// Parameters of a synthetic classification problem.
///
/// Class structure lives in the first `signal_dim` coordinates. Each of the
/// remaining coordinates is a fixed random mixture of the signal coordinates
/// plus independent Gaussian noise of standard deviation `nuisance_std`.
/// Mixture weights of signal coordinate d are drawn with scale
/// `signal_decay^d` and each mixture row is rescaled to length `mixing`, so
/// every non-signal coordinate carries the same signal-to-noise ratio. After
/// per-feature z-normalization the data therefore still concentrates near a
/// `signal_dim`-dimensional subspace with a flat low-variance remainder.
/// A nonzero `detail_shift` adds a small class-dependent offset of that
/// length to the non-signal coordinates: a redundant, low-variance class cue.
struct SyntheticSpec {
    std::string generator = "annuli";  ///< "blobs" or "annuli"
    int num_classes = 3;
    std::size_t ambient_dim = 20;
    std::size_t signal_dim = 3;
    double noise_std = 0.1;      ///< blobs: cluster spread; annuli: radial jitter
    double nuisance_std = 0.05;  ///< independent noise in the non-signal coordinates
    double mixing = 1.0;
    double signal_decay = 0.5;
    double detail_shift = 0.0;
    double separation = 4.0;  ///< blobs: distance scale of class centres; annuli: ring spacing
    std::size_t train_samples = 1000;
    std::size_t test_samples = 1000;

    void validate() const;
};

struct DatasetPair {
    DatasetSplit train;
    DatasetSplit test;
};

/// Deterministic in (spec, seed). Both splits are z-normalized with the
/// train statistics. Train bounds are the train min/max per feature; test
/// bounds are widened to also cover the test inputs.
DatasetPair make_synthetic_dataset(const SyntheticSpec& spec, std::uint64_t seed);

/// Raw (pre-normalization) sample generator, exposed for tests.
Tensor synthetic_raw_inputs(const SyntheticSpec& spec, std::uint64_t seed, const std::string& split,
                            std::vector<int>& labels);

struct HyperParams {
    int depth = 1;  ///< hidden ReLU layers; 0 gives a linear softmax model
    int width = 32;
    double learning_rate = 0.05;
    int batch_size = 32;
    double weight_decay = 0.0;
    double label_noise_fraction = 0.0;
    std::size_t train_subset_size = 0;  ///< 0 means the whole train split
    std::uint64_t seed = 0;

    void validate() const;
    bool operator==(const HyperParams&) const = default;
};

struct TrainSettings {
    int epoch_cap = 500;
    double target_loss = 0.01;
};

struct ZooEntry {
    std::string model_id;
    HyperParams hyperparams;
    std::string manifest;  ///< path of the model manifest, relative to the zoo directory
    double train_loss = 0.0;
    double train_accuracy = 0.0;  ///< on the (possibly noisy) labels the model was fit to
    double test_accuracy = 0.0;
    int epochs = 0;
    bool failed = false;
    std::string failure;

    double gap() const { return train_accuracy - test_accuracy; }
};

struct TrainedModel {
    ZooEntry entry;
    std::optional<Network> network;  ///< empty when training failed
};

/// Minibatch SGD on cross-entropy until the full-batch train loss reaches
/// the target or the epoch cap is hit. Label noise replaces the labels of a
/// seeded subset of the training samples with a different random class.
/// Never modifies `train` or `test`. Divergence marks the entry failed.
TrainedModel train_model(const DatasetSplit& train, const DatasetSplit& test, const HyperParams& hp,
                         const TrainSettings& settings = {}, std::string model_id = "model");

/// Labels after applying the seeded label noise to a subset.
std::vector<int> noisy_labels(const std::vector<int>& labels, int num_classes, double fraction, std::uint64_t seed);

/// Trains every grid point (concurrently, up to `jobs`). With `out_dir` each
/// model is persisted as `<out_dir>/<model_id>/model.json` + meta.json and
/// `<out_dir>/zoo.csv` is written; models whose meta.json already exists
/// are loaded instead of retrained. Failed entries are kept in the result
/// (flagged) but excluded from zoo.csv. Throws when every entry failed.
std::vector<TrainedModel> build_zoo(const std::vector<HyperParams>& grid, const DatasetSplit& train,
                                    const DatasetSplit& test, const TrainSettings& settings = {},
                                    const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                                    std::size_t jobs = 1);

/// Max minus min test accuracy over converged entries.
double test_accuracy_spread(const std::vector<TrainedModel>& zoo);

std::string zoo_model_id(std::size_t index);

void write_zoo_table(const std::vector<ZooEntry>& entries, const std::filesystem::path& path);
std::vector<ZooEntry> read_zoo_table(const std::filesystem::path& path);

}  // namespace cmargin
