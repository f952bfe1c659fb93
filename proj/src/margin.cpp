#include "cmargin/margin.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "cmargin/csv.hpp"
#include "cmargin/error.hpp"
#include "cmargin/parallel.hpp"
#include "cmargin/rng.hpp"

namespace cmargin {
namespace {

double norm2(std::span<const double> v) {
    double s = 0.0;
    for (double e : v) s += e * e;
    return std::sqrt(s);
}

int argmax(const Tensor& logits) {
    return static_cast<int>(std::max_element(logits.values().begin(), logits.values().end()) - logits.values().begin());
}

void require_finite_logits(const LogitsAndJacobian& lj) {
    if (!lj.logits.all_finite() || !lj.jacobian.all_finite()) {
        throw NumericError("non-finite logits or gradients");
    }
}

void check_pair(const Tensor& logits, int i, int j) {
    const int n = static_cast<int>(logits.size());
    if (i < 0 || i >= n || j < 0 || j >= n) throw PreconditionError("class index out of range");
    if (i == j) throw PreconditionError("competitor class must differ from the true class");
    if (argmax(logits) != i) throw PreconditionError("sample is not classified as the given true class");
}

/// grad f_j - grad f_i, the direction in which f_j gains on f_i.
std::vector<double> gradient_difference(const Tensor& jac, int i, int j) {
    const auto gi = jac.row(static_cast<std::size_t>(i));
    const auto gj = jac.row(static_cast<std::size_t>(j));
    std::vector<double> g(gi.size());
    for (std::size_t k = 0; k < g.size(); ++k) g[k] = gj[k] - gi[k];
    return g;
}

/// Taylor margin for one pair given precomputed logits and Jacobian.
double pair_margin(const LogitsAndJacobian& lj, int i, int j, const PrincipalBasis* basis) {
    auto g = gradient_difference(lj.jacobian, i, j);
    if (basis) g = project_gradient(*basis, g);
    const double denom = norm2(g);
    if (!(denom >= kDegenerateNorm)) {
        throw UnreachableError(basis ? "boundary unreachable in subspace: projected gradient difference vanishes"
                                     : "degenerate direction: gradient difference vanishes");
    }
    return (lj.logits[static_cast<std::size_t>(i)] - lj.logits[static_cast<std::size_t>(j)]) / denom;
}

/// Norm of the component of v outside span(P).
double subspace_residual(const PrincipalBasis& basis, std::span<const double> v) {
    const auto back = lift_step(basis, project_gradient(basis, v));
    double s = 0.0;
    for (std::size_t k = 0; k < v.size(); ++k) s += (v[k] - back[k]) * (v[k] - back[k]);
    return std::sqrt(s);
}

}  // namespace

const char* to_string(Termination t) noexcept {
    switch (t) {
        case Termination::tolerance: return "tolerance";
        case Termination::violation_increase: return "violation_increase";
        case Termination::max_iterations: return "max_iterations";
        case Termination::first_order: return "first_order";
    }
    return "unknown";
}

void MarginConfig::validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning rate must be positive");
    if (!(tolerance > 0.0) || !std::isfinite(tolerance)) throw ConfigError("tolerance must be positive");
    if (max_iterations < 1) throw ConfigError("max iterations must be at least 1");
    if (sample_budget < 1) throw ConfigError("sample budget must be at least 1");
}

double taylor_margin(const Network& net, std::span<const double> x, int i, int j) {
    const auto lj = net.logits_and_jacobian(x);
    require_finite_logits(lj);
    check_pair(lj.logits, i, j);
    return pair_margin(lj, i, j, nullptr);
}

double constrained_taylor_margin(const Network& net, std::span<const double> x, int i, int j,
                                 const PrincipalBasis& basis) {
    const auto lj = net.logits_and_jacobian(x);
    require_finite_logits(lj);
    check_pair(lj.logits, i, j);
    return pair_margin(lj, i, j, &basis);
}

double hidden_taylor_margin(const Network& net, std::span<const double> x, int i, int j, std::size_t layer) {
    const auto lj = net.logits_and_jacobian(x, HiddenSpace{layer});
    require_finite_logits(lj);
    check_pair(lj.logits, i, j);
    return pair_margin(lj, i, j, nullptr);
}

MarginRecord nearest_taylor(const Network& net, std::span<const double> x, const PrincipalBasis* basis,
                            const Representation& at) {
    const auto lj = net.logits_and_jacobian(x, at);
    require_finite_logits(lj);
    const int i = argmax(lj.logits);
    MarginRecord best;
    best.true_class = i;
    best.distance = std::numeric_limits<double>::infinity();
    bool found = false;
    for (int j = 0; j < net.num_classes(); ++j) {
        if (j == i) continue;
        double d;
        try {
            d = pair_margin(lj, i, j, basis);
        } catch (const UnreachableError&) {
            continue;  // this pair contributes an infinite distance
        }
        if (d < best.distance) {
            best.distance = d;
            best.competitor_class = j;
            best.violation = std::abs(lj.logits[static_cast<std::size_t>(i)] - lj.logits[static_cast<std::size_t>(j)]);
            found = true;
        }
    }
    if (!found) throw UnreachableError("no competitor class is reachable");
    best.terminated_by = Termination::first_order;
    best.iterations = 0;
    return best;
}

MarginRecord deepfool_margin(const Network& net, std::span<const double> x, const MarginConfig& config,
                             const PrincipalBasis* basis, std::optional<BoxBounds> bounds, DeepFoolTrace* trace) {
    config.validate();
    const std::size_t dims = net.input_size();
    if (x.size() != dims) throw ShapeError("sample size does not match the network input");
    if (basis && basis->num_features() != dims) throw ShapeError("basis feature count does not match the input");
    if (config.clip && !bounds) throw PreconditionError("clipping requested without search bounds");
    if (bounds && (bounds->lower.size() != dims || bounds->upper.size() != dims)) {
        throw ShapeError("bounds do not match the input size");
    }

    const std::vector<double> origin(x.begin(), x.end());
    std::vector<double> current = origin;
    std::vector<double> candidate(dims);

    MarginRecord rec;
    double v_best = std::numeric_limits<double>::infinity();
    double d_best = 0.0;
    bool clip_took_effect = false;
    int i = -1;

    for (;;) {
        if (rec.iterations >= config.max_iterations) {
            rec.terminated_by = Termination::max_iterations;
            break;
        }
        const auto lj = net.logits_and_jacobian(current);
        require_finite_logits(lj);
        if (i < 0) i = argmax(lj.logits);

        // Nearest linearized boundary among j != i.
        int l = -1;
        double best_ratio = std::numeric_limits<double>::infinity();
        std::vector<double> w_l;
        double o_l = 0.0;
        for (int j = 0; j < net.num_classes(); ++j) {
            if (j == i) continue;
            auto w = gradient_difference(lj.jacobian, i, j);
            if (basis) w = project_gradient(*basis, w);
            const double wn = norm2(w);
            if (!(wn >= kDegenerateNorm)) continue;
            const double o = lj.logits[static_cast<std::size_t>(i)] - lj.logits[static_cast<std::size_t>(j)];
            const double ratio = std::abs(o) / wn;
            if (ratio < best_ratio) {
                best_ratio = ratio;
                l = j;
                w_l = std::move(w);
                o_l = o;
            }
        }
        if (l < 0) {
            throw UnreachableError(basis ? "boundary unreachable in subspace: every projected gradient difference "
                                           "vanishes"
                                         : "degenerate direction: every gradient difference vanishes");
        }

        // r = |o_l| / ||w_l||^2 * w_l (lifted by P when constrained); w_l points
        // from class i toward class l.
        const double wn = norm2(w_l);
        const double scale = config.learning_rate * std::abs(o_l) / (wn * wn);
        const std::vector<double> step = basis ? lift_step(*basis, w_l) : w_l;
        for (std::size_t k = 0; k < dims; ++k) candidate[k] = current[k] + scale * step[k];

        IterationTrace it;
        if (trace && basis) {
            std::vector<double> delta(dims), offset(dims);
            for (std::size_t k = 0; k < dims; ++k) {
                delta[k] = candidate[k] - current[k];
                offset[k] = candidate[k] - origin[k];
            }
            it.step_residual = subspace_residual(*basis, delta);
            if (!clip_took_effect) it.offset_residual = subspace_residual(*basis, offset);
        }

        if (bounds) {
            for (std::size_t k = 0; k < dims; ++k) {
                if (candidate[k] < bounds->lower[k] || candidate[k] > bounds->upper[k]) {
                    it.left_bounds = true;
                    break;
                }
            }
            if (it.left_bounds) rec.clipped = true;
            if (config.clip && it.left_bounds) {
                for (std::size_t k = 0; k < dims; ++k) {
                    candidate[k] = std::clamp(candidate[k], bounds->lower[k], bounds->upper[k]);
                }
                clip_took_effect = true;
            }
            if (trace) {
                for (std::size_t k = 0; k < dims; ++k) {
                    if (candidate[k] < bounds->lower[k] || candidate[k] > bounds->upper[k]) {
                        it.within_bounds = false;
                        break;
                    }
                }
            }
        }

        for (double c : candidate)
            if (!std::isfinite(c)) throw NumericError("non-finite DeepFool iterate");

        const double v = std::abs(o_l);
        double d = 0.0;
        for (std::size_t k = 0; k < dims; ++k) d += (origin[k] - candidate[k]) * (origin[k] - candidate[k]);
        d = std::sqrt(d);

        it.violation = v;
        it.distance = d;
        const bool violation_up = v >= v_best;
        const bool settled = std::abs(d - d_best) < config.tolerance;
        it.accepted = !(violation_up || settled);
        if (trace) trace->iterations.push_back(it);

        if (!it.accepted) {
            rec.terminated_by = violation_up ? Termination::violation_increase : Termination::tolerance;
            if (rec.iterations == 0) {
                // Nothing accepted yet: the distance stays at its initial 0 and
                // the violation reported is the one measured at x.
                rec.competitor_class = l;
                v_best = v;
            }
            break;
        }
        v_best = v;
        d_best = d;
        rec.competitor_class = l;
        current.swap(candidate);
        ++rec.iterations;
    }

    rec.true_class = i;
    rec.distance = d_best;
    rec.violation = v_best;
    return rec;
}

const char* to_string(MarginMode mode) noexcept {
    switch (mode) {
        case MarginMode::input_taylor: return "input-taylor";
        case MarginMode::input_deepfool: return "input-deepfool";
        case MarginMode::constrained_taylor: return "constrained-taylor";
        case MarginMode::constrained_deepfool: return "constrained-deepfool";
        case MarginMode::hidden_taylor: return "hidden-taylor";
    }
    return "unknown";
}

MarginMode parse_margin_mode(const std::string& name) {
    for (auto mode : {MarginMode::input_taylor, MarginMode::input_deepfool, MarginMode::constrained_taylor,
                      MarginMode::constrained_deepfool, MarginMode::hidden_taylor}) {
        if (name == to_string(mode)) return mode;
    }
    throw ConfigError("unknown margin mode '" + name + "'");
}

bool is_constrained(MarginMode mode) noexcept {
    return mode == MarginMode::constrained_taylor || mode == MarginMode::constrained_deepfool;
}

std::vector<std::size_t> shared_sample_indices(std::size_t num_samples, std::size_t budget, std::uint64_t seed) {
    CounterRng rng(seed, "margin-samples");
    auto order = rng.permutation(num_samples);
    order.resize(std::min(budget, num_samples));
    return order;
}

double total_feature_variance(const Network& net, const DatasetSplit& data, std::span<const std::size_t> indices,
                              std::size_t layer) {
    if (indices.size() < 2) throw PreconditionError("feature variance needs at least two samples");
    const std::size_t units = element_count(net.hidden_shape(layer));
    std::vector<double> mean(units, 0.0), sq(units, 0.0);
    // Two passes keep the result independent of sample magnitudes.
    std::vector<std::vector<double>> acts;
    acts.reserve(indices.size());
    for (auto s : indices) {
        auto fw = net.forward_with_activations(data.sample(s));
        acts.emplace_back(fw.hidden[layer].values().begin(), fw.hidden[layer].values().end());
        for (std::size_t u = 0; u < units; ++u) mean[u] += acts.back()[u];
    }
    for (auto& m : mean) m /= static_cast<double>(indices.size());
    for (const auto& a : acts)
        for (std::size_t u = 0; u < units; ++u) sq[u] += (a[u] - mean[u]) * (a[u] - mean[u]);
    double total = 0.0;
    for (double s : sq) total += s / static_cast<double>(indices.size() - 1);
    return total;
}

MarginSummary margin_distribution(const Network& net, const DatasetSplit& data, std::span<const std::size_t> indices,
                                  const MarginRequest& request, std::size_t jobs) {
    request.config.validate();
    if (is_constrained(request.mode) && !request.basis) throw PreconditionError("constrained mode needs a basis");
    if (data.num_features() != net.input_size()) throw ShapeError("dataset features do not match the network input");
    for (auto s : indices)
        if (s >= data.num_samples()) throw ShapeError("sample index out of range");

    enum class Outcome { used, misclassified, unreachable };
    struct Slot {
        Outcome outcome = Outcome::misclassified;
        MarginRecord record;
        DeepFoolTrace trace;
    };
    std::vector<Slot> slots(indices.size());
    const BoxBounds bounds{data.lower.values(), data.upper.values()};

    parallel_for(indices.size(), jobs, [&](std::size_t k) {
        const auto s = indices[k];
        const auto x = data.sample(s);
        Slot& slot = slots[k];
        if (argmax(net.forward(x)) != data.labels[s]) {
            slot.outcome = Outcome::misclassified;
            return;
        }
        try {
            switch (request.mode) {
                case MarginMode::input_taylor: slot.record = nearest_taylor(net, x, nullptr); break;
                case MarginMode::constrained_taylor: slot.record = nearest_taylor(net, x, request.basis); break;
                case MarginMode::hidden_taylor:
                    slot.record = nearest_taylor(net, x, nullptr, HiddenSpace{request.hidden_layer});
                    break;
                case MarginMode::input_deepfool:
                case MarginMode::constrained_deepfool: {
                    const PrincipalBasis* basis =
                        request.mode == MarginMode::constrained_deepfool ? request.basis : nullptr;
                    slot.record = deepfool_margin(net, x, request.config, basis, bounds,
                                                  request.collect_traces ? &slot.trace : nullptr);
                    break;
                }
            }
            slot.record.sample_index = s;
            slot.outcome = Outcome::used;
        } catch (const UnreachableError&) {
            slot.outcome = Outcome::unreachable;
        }
    });

    MarginSummary summary;
    summary.mode = request.mode;
    if (request.mode == MarginMode::hidden_taylor) {
        summary.layer_variance = total_feature_variance(net, data, indices, request.hidden_layer);
        if (!(summary.layer_variance > 0.0)) throw NumericError("hidden layer has zero total feature variance");
    }
    for (auto& slot : slots) {
        switch (slot.outcome) {
            case Outcome::misclassified: ++summary.skipped_misclassified; break;
            case Outcome::unreachable: ++summary.skipped_unreachable; break;
            case Outcome::used:
                slot.record.distance /= summary.layer_variance;
                summary.records.push_back(slot.record);
                if (request.collect_traces) summary.traces.push_back(std::move(slot.trace));
                break;
        }
    }
    summary.used = summary.records.size();
    if (summary.used == 0) throw DataError("no correctly classified, reachable samples in the margin budget");

    std::vector<double> d;
    d.reserve(summary.used);
    double total = 0.0;
    for (const auto& r : summary.records) {
        d.push_back(r.distance);
        total += r.distance;
    }
    summary.mean = total / static_cast<double>(d.size());
    std::sort(d.begin(), d.end());
    const auto mid = d.size() / 2;
    summary.median = d.size() % 2 ? d[mid] : 0.5 * (d[mid - 1] + d[mid]);
    return summary;
}

void write_margin_records(const MarginSummary& summary, const std::filesystem::path& path) {
    CsvTable table;
    table.header = {"sample_index", "mode",       "i",      "j", "distance", "violation",
                    "iterations",   "terminated_by", "clipped"};
    for (const auto& r : summary.records) {
        table.rows.push_back({std::to_string(r.sample_index), to_string(summary.mode), std::to_string(r.true_class),
                              std::to_string(r.competitor_class), format_double(r.distance),
                              format_double(r.violation), std::to_string(r.iterations), to_string(r.terminated_by),
                              r.clipped ? "1" : "0"});
    }
    write_csv(table, path);
}

}  // namespace cmargin
