#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cmargin/dataset.hpp"
#include "cmargin/manifold.hpp"
#include "cmargin/margin.hpp"
#include "cmargin/train.hpp"

namespace cmargin {

/// Kendall's tau-b between two equally long sequences, O(n log n).
/// Throws PreconditionError on length mismatch or fewer than two values,
/// and NumericError when either sequence is entirely tied.
double kendall_tau(std::span<const double> a, std::span<const double> b);

/// A complexity measure evaluated on every model of a zoo.
struct MeasureSeries {
    std::vector<std::string> model_ids;
    std::vector<double> values;
    std::vector<double> test_accuracy;
    std::vector<double> gap;
    std::vector<std::string> hyperparam_names;
    std::vector<std::vector<std::string>> hyperparam_values;  ///< [model][name]

    void validate() const;
};

/// Builds a series from zoo entries. Hyperparameter types recorded are the
/// ones taking more than one value across the zoo.
MeasureSeries make_series(const std::vector<ZooEntry>& entries, const std::vector<double>& values);

/// Conditional mutual information score between sign(measure difference)
/// and sign(gap difference) over ordered model pairs, conditioned on every
/// subset of at most two hyperparameter types (including none). Each
/// conditional MI is normalized by the conditional entropy of the gap sign;
/// the score is 100 times the minimum over subsets.
double cmi_score(const MeasureSeries& series);

/// One point of a sweep: the swept parameter, Kendall tau of mean margin
/// against test accuracy, and each model's mean margin.
struct SweepPoint {
    double parameter = 0.0;
    double tau = 0.0;
    std::vector<double> mean_margins;
    std::size_t unreachable = 0;
    std::size_t attempted = 0;
    bool flagged = false;  ///< more than half the samples were unreachable
};

struct SweepCurve {
    std::string label;
    std::vector<std::string> model_ids;
    std::vector<SweepPoint> points;
    std::optional<double> marked_parameter;  ///< e.g. the Kneedle-selected m
};

/// Shared inputs for evaluating margins over a zoo.
struct ZooContext {
    const std::vector<TrainedModel>* zoo = nullptr;  ///< failed entries are ignored
    const DatasetSplit* train = nullptr;
    std::vector<std::size_t> sample_indices;  ///< fixed list shared by all models
    MarginConfig config;
    std::size_t jobs = 1;

    std::vector<const TrainedModel*> members() const;
};

/// Mean margin of every model for one request, in zoo order.
std::vector<double> mean_margins(const ZooContext& ctx, const MarginRequest& request,
                                 std::vector<MarginSummary>* summaries = nullptr);

/// Tau of mean margins against test accuracy.
double tau_vs_test_accuracy(const ZooContext& ctx, const std::vector<double>& margins);

/// Constrained DeepFool margins on windows of `window` consecutive
/// components starting at each of `starts`.
SweepCurve component_window_sweep(const ZooContext& ctx, const PrincipalBasis& full, std::size_t window,
                                  const std::vector<std::size_t>& starts);

/// Constrained Taylor margins with the first m components, for each m.
SweepCurve m_sweep(const ZooContext& ctx, const PrincipalBasis& full, const std::vector<std::size_t>& m_values,
                   std::optional<std::size_t> selected_m);

/// Constrained DeepFool margins on nested prefixes of the sample list.
SweepCurve sample_count_sweep(const ZooContext& ctx, const PrincipalBasis& basis,
                              const std::vector<std::size_t>& counts);

struct ClippingAblation {
    double constrained_clipped = 0.0;
    double constrained_unclipped = 0.0;
    double input_clipped = 0.0;
    double input_unclipped = 0.0;
    bool unclipped_left_bounds = false;  ///< false means the ablation was vacuous
    bool clipped_within_bounds = true;
};

ClippingAblation clipping_ablation(const ZooContext& ctx, const PrincipalBasis& basis);

void write_sweep_csv(const SweepCurve& curve, const std::filesystem::path& path);

}  // namespace cmargin
