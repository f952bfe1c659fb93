#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cmargin/dataset.hpp"
#include "cmargin/manifold.hpp"
#include "cmargin/net.hpp"

namespace cmargin {

enum class Termination { tolerance, violation_increase, max_iterations, first_order };

const char* to_string(Termination t) noexcept;

/// Result of one boundary search for one sample.
struct MarginRecord {
    std::size_t sample_index = 0;
    int true_class = 0;        ///< i, the predicted (and correct) class
    int competitor_class = 0;  ///< j
    double distance = 0.0;     ///< d_best
    double violation = 0.0;    ///< v_best = |f_i - f_j| at the accepted point
    int iterations = 0;        ///< accepted DeepFool steps; 0 for first-order records
    Termination terminated_by = Termination::first_order;
    bool clipped = false;  ///< some iterate left [L, U] before clipping
};

struct MarginConfig {
    double learning_rate = 0.25;  ///< gamma
    double tolerance = 0.01;      ///< delta, on the change of distance
    int max_iterations = 100;
    bool clip = true;
    std::size_t sample_budget = 5000;

    void validate() const;
};

/// Per-feature box [lower, upper] for the search.
struct BoxBounds {
    std::span<const double> lower;
    std::span<const double> upper;
};

/// One DeepFool iteration, recorded only when a trace is requested.
struct IterationTrace {
    double violation = 0.0;      ///< v = |o_l|
    double distance = 0.0;       ///< d = ||x - x_hat|| after clipping
    bool accepted = false;
    double step_residual = 0.0;  ///< norm of the step's component outside span(P); 0 when unconstrained
    std::optional<double> offset_residual;  ///< same for x_hat - x, while no clip has taken effect
    bool left_bounds = false;               ///< pre-clip iterate outside [L, U]
    bool within_bounds = true;              ///< post-clip iterate inside [L, U]
};

struct DeepFoolTrace {
    std::vector<IterationTrace> iterations;
};

/// Minimum gradient norm below which a direction is treated as degenerate.
inline constexpr double kDegenerateNorm = 1e-12;

/// (f_i - f_j) / ||grad f_i - grad f_j||. Requires i = argmax f(x), j != i.
double taylor_margin(const Network& net, std::span<const double> x, int i, int j);

/// (f_i - f_j) / ||(grad f_i - grad f_j) P^T||. Throws UnreachableError
/// when the projected gradient difference vanishes.
double constrained_taylor_margin(const Network& net, std::span<const double> x, int i, int j,
                                 const PrincipalBasis& basis);

/// Taylor margin with gradients taken at hidden boundary `layer`.
double hidden_taylor_margin(const Network& net, std::span<const double> x, int i, int j, std::size_t layer);

/// Iterative first-order boundary search. With `basis` the steps are taken
/// in span(P) and lifted back; without it the search is unconstrained.
/// When `config.clip` is set each iterate is clamped to `bounds`.
MarginRecord deepfool_margin(const Network& net, std::span<const double> x, const MarginConfig& config,
                             const PrincipalBasis* basis = nullptr, std::optional<BoxBounds> bounds = std::nullopt,
                             DeepFoolTrace* trace = nullptr);

enum class MarginMode { input_taylor, input_deepfool, constrained_taylor, constrained_deepfool, hidden_taylor };

const char* to_string(MarginMode mode) noexcept;
MarginMode parse_margin_mode(const std::string& name);
bool is_constrained(MarginMode mode) noexcept;

/// Nearest-competitor first-order margin over all j != i.
MarginRecord nearest_taylor(const Network& net, std::span<const double> x, const PrincipalBasis* basis,
                            const Representation& at = InputSpace{});

struct MarginRequest {
    MarginMode mode = MarginMode::constrained_deepfool;
    MarginConfig config;
    const PrincipalBasis* basis = nullptr;  ///< required for constrained modes
    std::size_t hidden_layer = 0;           ///< for hidden_taylor
    bool collect_traces = false;
};

struct MarginSummary {
    MarginMode mode = MarginMode::input_taylor;
    double mean = 0.0;
    double median = 0.0;
    std::size_t used = 0;
    std::size_t skipped_misclassified = 0;
    std::size_t skipped_unreachable = 0;
    double layer_variance = 1.0;  ///< hidden mode: divisor applied to every margin
    std::vector<MarginRecord> records;
    std::vector<DeepFoolTrace> traces;  ///< aligned with records when requested

    std::size_t skipped() const { return skipped_misclassified + skipped_unreachable; }
};

/// Fixed sample list for a dataset: the first `budget` entries of a seeded
/// permutation of the sample indices. Budgets are nested prefixes.
std::vector<std::size_t> shared_sample_indices(std::size_t num_samples, std::size_t budget, std::uint64_t seed);

/// Margin of every correctly classified sample in `indices`. Misclassified
/// and unreachable samples are counted and skipped. Hidden-mode margins are
/// divided by the layer's total feature variance over the same sample set.
/// Result is independent of `jobs`.
MarginSummary margin_distribution(const Network& net, const DatasetSplit& data, std::span<const std::size_t> indices,
                                  const MarginRequest& request, std::size_t jobs = 1);

/// Sum over units of the per-unit sample variance of hidden boundary
/// `layer`, across the given samples.
double total_feature_variance(const Network& net, const DatasetSplit& data, std::span<const std::size_t> indices,
                              std::size_t layer);

void write_margin_records(const MarginSummary& summary, const std::filesystem::path& path);

}  // namespace cmargin
