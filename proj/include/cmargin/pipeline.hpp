#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmargin/eval.hpp"
#include "cmargin/margin.hpp"
#include "cmargin/train.hpp"

namespace cmargin {

/// Hyperparameter grid expanded in depth, width, label noise, subset order.
struct GridSpec {
    std::vector<int> depths{2, 3};
    std::vector<int> widths{128, 256};
    std::vector<double> label_noise_fractions{0.0, 0.15, 0.3};
    std::vector<std::size_t> train_subset_sizes{200, 500};
    double learning_rate = 0.2;
    int batch_size = 32;
    double weight_decay = 0.0;

    /// Model seeds derive from the run seed and the grid position.
    std::vector<HyperParams> expand(std::uint64_t seed) const;
};

enum class BasisPolicy { kneedle, fixed };

/// Which hidden boundaries feed the hidden margin of a model.
enum class HiddenSelection { first, last, all, equally_spaced };

const char* to_string(HiddenSelection selection) noexcept;
HiddenSelection parse_hidden_selection(const std::string& name);

/// Resolved hidden boundary indices for a model with `num_hidden` boundaries.
std::vector<std::size_t> select_hidden_layers(HiddenSelection selection, std::size_t num_hidden, std::size_t count);

struct SweepSelection {
    bool windows = true;
    std::size_t window = 10;
    std::vector<std::size_t> window_starts;  ///< empty: every feasible start
    bool m_values_enabled = true;
    std::vector<std::size_t> m_values;  ///< empty: 1 .. num_features
    bool sample_counts_enabled = true;
    std::vector<std::size_t> sample_counts;  ///< empty: quarter, half and full budget
    bool clipping = true;
};

/// Everything a pipeline run depends on. Every field has a default; the
/// resolved form is echoed next to each stage's outputs.
struct RunConfig {
    std::uint64_t seed = 1;
    SyntheticSpec dataset;
    GridSpec grid;
    TrainSettings training;
    MarginConfig margin;
    BasisPolicy basis_policy = BasisPolicy::kneedle;
    std::size_t fixed_m = 0;
    std::vector<MarginMode> modes{MarginMode::input_taylor, MarginMode::input_deepfool,
                                  MarginMode::constrained_taylor, MarginMode::constrained_deepfool,
                                  MarginMode::hidden_taylor};
    /// Each selection yields its own hidden-margin column.
    std::vector<HiddenSelection> hidden_layers{HiddenSelection::first, HiddenSelection::all};
    std::size_t hidden_count = 3;  ///< for equally-spaced selection
    SweepSelection sweeps;
    std::filesystem::path output_dir = "run";
    std::size_t jobs = 0;  ///< 0: available parallelism

    void validate() const;
    std::size_t resolved_jobs() const;
};

/// Column labels produced by measure for the configured modes, e.g.
/// "constrained-deepfool" or "hidden-taylor-first".
std::vector<std::string> measure_labels(const RunConfig& config);

/// Replaces the mode list from a comma-separated list of mode names. A bare
/// "hidden-taylor" keeps the configured layer selections; a suffixed name
/// such as "hidden-taylor-last" selects exactly that variant.
void apply_mode_list(RunConfig& config, const std::string& list);

/// Reads a config object. Absent keys keep their defaults; unknown keys and
/// ill-typed values raise ConfigError.
RunConfig parse_run_config(const nlohmann::json& doc);
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json to_json(const RunConfig& config);

/// Artifact locations under the output directory.
struct RunLayout {
    std::filesystem::path root;

    std::filesystem::path dataset_dir() const { return root / "dataset"; }
    std::filesystem::path zoo_dir() const { return root / "zoo"; }
    std::filesystem::path basis_dir() const { return root / "basis"; }
    std::filesystem::path margins_dir() const { return root / "margins"; }
    std::filesystem::path report_dir() const { return root / "report"; }
    std::filesystem::path sweeps_dir() const { return root / "sweeps"; }
};

/// Called once per model, column label and (for hidden columns) layer after
/// a margin distribution is computed, in zoo order.
using MeasureObserver =
    std::function<void(const std::string& model_id, const std::string& label, const MarginSummary&)>;

struct MeasureOptions {
    bool collect_traces = false;
    MeasureObserver observer;
};

struct DatasetResult {
    DatasetPair data;
    PrincipalBasis basis;
    KneeSelection selection;
};

struct MeasureResult {
    std::vector<std::string> model_ids;
    std::map<std::string, std::vector<double>> columns;  ///< mode name -> mean margin per model
    std::size_t selected_m = 0;
    bool basis_reused = false;
};

struct ModeReport {
    std::string mode;
    double tau = 0.0;
    std::optional<double> cmi;  ///< absent when no hyperparameter varies or cells are too sparse
    std::size_t models = 0;
};

struct EvaluationReport {
    std::vector<ModeReport> modes;
    double test_accuracy_spread = 0.0;
};

struct SweepReport {
    std::vector<SweepCurve> curves;
    std::optional<ClippingAblation> clipping;
};

DatasetResult cmd_dataset(const RunConfig& config);
std::vector<TrainedModel> cmd_zoo(const RunConfig& config);
MeasureResult cmd_measure(const RunConfig& config, const MeasureOptions& options = {});
EvaluationReport cmd_evaluate(const RunConfig& config);
SweepReport cmd_sweep(const RunConfig& config);

/// Loaders for persisted stages; missing artifacts raise DataError naming
/// the command that produces them.
DatasetPair load_dataset(const RunLayout& layout);
std::vector<TrainedModel> load_zoo(const RunLayout& layout);

}  // namespace cmargin
