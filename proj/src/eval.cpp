#include "cmargin/eval.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <utility>

#include "cmargin/csv.hpp"
#include "cmargin/error.hpp"
#include "cmargin/parallel.hpp"

namespace cmargin {
namespace {

/// Merge sort on `v` counting inversions (pairs out of order).
std::uint64_t count_inversions(std::vector<double>& v) {
    std::vector<double> buf(v.size());
    std::uint64_t swaps = 0;
    for (std::size_t width = 1; width < v.size(); width *= 2) {
        for (std::size_t lo = 0; lo < v.size(); lo += 2 * width) {
            const std::size_t mid = std::min(lo + width, v.size());
            const std::size_t hi = std::min(lo + 2 * width, v.size());
            std::size_t l = lo, r = mid, o = lo;
            while (l < mid && r < hi) {
                if (v[r] < v[l]) {
                    swaps += mid - l;
                    buf[o++] = v[r++];
                } else {
                    buf[o++] = v[l++];
                }
            }
            while (l < mid) buf[o++] = v[l++];
            while (r < hi) buf[o++] = v[r++];
        }
        v.swap(buf);
    }
    return swaps;
}

/// Sum over runs of equal values of t(t-1)/2, for a sorted range.
template <typename It, typename Eq>
std::uint64_t tied_pairs(It first, It last, Eq eq) {
    std::uint64_t total = 0;
    while (first != last) {
        auto run_end = first + 1;
        while (run_end != last && eq(*run_end, *first)) ++run_end;
        const auto t = static_cast<std::uint64_t>(run_end - first);
        total += t * (t - 1) / 2;
        first = run_end;
    }
    return total;
}

double entropy(std::span<const double> counts) {
    double total = 0.0;
    for (double c : counts) total += c;
    if (total <= 0.0) return 0.0;
    double h = 0.0;
    for (double c : counts)
        if (c > 0.0) h -= (c / total) * std::log2(c / total);
    return h;
}

int sign_of(double v) { return v > 0.0 ? 1 : (v < 0.0 ? -1 : 0); }

}  // namespace

double kendall_tau(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw PreconditionError("kendall_tau needs sequences of equal length");
    if (a.size() < 2) throw PreconditionError("kendall_tau needs at least two values");
    for (std::size_t k = 0; k < a.size(); ++k)
        if (!std::isfinite(a[k]) || !std::isfinite(b[k])) throw PreconditionError("kendall_tau needs finite values");

    const std::size_t n = a.size();
    std::vector<std::pair<double, double>> pairs(n);
    for (std::size_t k = 0; k < n; ++k) pairs[k] = {a[k], b[k]};
    std::sort(pairs.begin(), pairs.end());

    const std::uint64_t n0 = static_cast<std::uint64_t>(n) * (n - 1) / 2;
    const std::uint64_t ties_a =
        tied_pairs(pairs.begin(), pairs.end(), [](const auto& x, const auto& y) { return x.first == y.first; });
    const std::uint64_t ties_joint = tied_pairs(pairs.begin(), pairs.end(), [](const auto& x, const auto& y) { return x == y; });

    std::vector<double> second(n);
    for (std::size_t k = 0; k < n; ++k) second[k] = pairs[k].second;
    const std::uint64_t discordant = count_inversions(second);  // `second` is now sorted
    const std::uint64_t ties_b = tied_pairs(second.begin(), second.end(), std::equal_to<>{});

    if (ties_a == n0 || ties_b == n0) throw NumericError("kendall_tau is undefined when a sequence is entirely tied");
    const double s = static_cast<double>(n0) - static_cast<double>(ties_a) - static_cast<double>(ties_b) +
                     static_cast<double>(ties_joint) - 2.0 * static_cast<double>(discordant);
    return s / std::sqrt(static_cast<double>(n0 - ties_a) * static_cast<double>(n0 - ties_b));
}

void MeasureSeries::validate() const {
    const auto n = model_ids.size();
    if (values.size() != n || test_accuracy.size() != n || gap.size() != n || hyperparam_values.size() != n) {
        throw DataError("measure series columns have different lengths");
    }
    std::set<std::string> seen(model_ids.begin(), model_ids.end());
    if (seen.size() != n) throw DataError("measure series has duplicate model ids");
    for (double v : values)
        if (!std::isfinite(v)) throw DataError("measure series has non-finite values");
    for (const auto& row : hyperparam_values)
        if (row.size() != hyperparam_names.size()) throw DataError("hyperparameter table is ragged");
}

MeasureSeries make_series(const std::vector<ZooEntry>& entries, const std::vector<double>& values) {
    if (entries.size() != values.size()) throw DataError("one measure value per zoo entry required");
    MeasureSeries s;
    std::vector<std::vector<std::string>> all(entries.size());
    const std::vector<std::string> names = {"depth",        "width",      "learning_rate",     "batch_size",
                                            "weight_decay", "label_noise_fraction", "train_subset_size", "seed"};
    for (std::size_t k = 0; k < entries.size(); ++k) {
        const auto& hp = entries[k].hyperparams;
        all[k] = {std::to_string(hp.depth),        std::to_string(hp.width),
                  format_double(hp.learning_rate), std::to_string(hp.batch_size),
                  format_double(hp.weight_decay),  format_double(hp.label_noise_fraction),
                  std::to_string(hp.train_subset_size), std::to_string(hp.seed)};
        s.model_ids.push_back(entries[k].model_id);
        s.values.push_back(values[k]);
        s.test_accuracy.push_back(entries[k].test_accuracy);
        s.gap.push_back(entries[k].gap());
    }
    std::vector<std::size_t> varying;
    for (std::size_t c = 0; c < names.size(); ++c) {
        std::set<std::string> distinct;
        for (const auto& row : all) distinct.insert(row[c]);
        if (distinct.size() > 1) varying.push_back(c);
    }
    for (auto c : varying) s.hyperparam_names.push_back(names[c]);
    s.hyperparam_values.resize(entries.size());
    for (std::size_t k = 0; k < entries.size(); ++k)
        for (auto c : varying) s.hyperparam_values[k].push_back(all[k][c]);
    s.validate();
    return s;
}

double cmi_score(const MeasureSeries& series) {
    series.validate();
    const std::size_t types = series.hyperparam_names.size();
    if (types < 1) throw PreconditionError("CMI needs at least one recorded hyperparameter type");
    const std::size_t n = series.model_ids.size();

    std::vector<std::vector<std::size_t>> subsets = {{}};
    for (std::size_t a = 0; a < types; ++a) {
        subsets.push_back({a});
        for (std::size_t b = a + 1; b < types; ++b) subsets.push_back({a, b});
    }

    double best = std::numeric_limits<double>::infinity();
    bool any = false;
    for (const auto& subset : subsets) {
        // Joint counts of (measure sign in {-1,0,1}, gap sign in {-1,1}) per cell.
        std::map<std::vector<std::string>, std::array<double, 6>> cells;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = 0; q < n; ++q) {
                if (p == q) continue;
                std::vector<std::string> key, other;
                for (auto t : subset) {
                    key.push_back(series.hyperparam_values[p][t]);
                    other.push_back(series.hyperparam_values[q][t]);
                }
                if (key != other) continue;
                const int g = sign_of(series.gap[p] - series.gap[q]);
                if (g == 0) continue;  // tied gaps carry no ranking information
                const int m = sign_of(series.values[p] - series.values[q]);
                cells[key][static_cast<std::size_t>((m + 1) * 2 + (g > 0 ? 1 : 0))] += 1.0;
            }
        }
        double total_pairs = 0.0, mi = 0.0, cond_entropy = 0.0;
        for (const auto& [key, c] : cells) {
            double pairs = 0.0;
            for (double v : c) pairs += v;
            if (pairs < 2.0) continue;
            const double gm[3] = {c[0] + c[1], c[2] + c[3], c[4] + c[5]};
            const double gg[2] = {c[0] + c[2] + c[4], c[1] + c[3] + c[5]};
            const double h_g = entropy(gg);
            const double cell_mi = entropy(gm) + h_g - entropy(c);
            total_pairs += pairs;
            mi += pairs * cell_mi;
            cond_entropy += pairs * h_g;
        }
        if (total_pairs == 0.0 || cond_entropy <= 0.0) continue;
        any = true;
        best = std::min(best, std::max(0.0, mi / cond_entropy));
    }
    if (!any) throw PreconditionError("CMI has too few comparable model pairs in every conditioning cell");
    return 100.0 * best;
}

std::vector<const TrainedModel*> ZooContext::members() const {
    if (!zoo || !train) throw PreconditionError("zoo context is incomplete");
    std::vector<const TrainedModel*> out;
    for (const auto& m : *zoo)
        if (!m.entry.failed && m.network) out.push_back(&m);
    if (out.size() < 2) throw PreconditionError("zoo needs at least two trained models");
    return out;
}

std::vector<double> mean_margins(const ZooContext& ctx, const MarginRequest& request,
                                 std::vector<MarginSummary>* summaries) {
    const auto members = ctx.members();
    std::vector<MarginSummary> out(members.size());
    parallel_for(members.size(), ctx.jobs, [&](std::size_t k) {
        out[k] = margin_distribution(*members[k]->network, *ctx.train, ctx.sample_indices, request, 1);
    });
    std::vector<double> means;
    for (const auto& s : out) means.push_back(s.mean);
    if (summaries) *summaries = std::move(out);
    return means;
}

double tau_vs_test_accuracy(const ZooContext& ctx, const std::vector<double>& margins) {
    std::vector<double> acc;
    for (const auto* m : ctx.members()) acc.push_back(m->entry.test_accuracy);
    return kendall_tau(margins, acc);
}

namespace {

SweepPoint sweep_point(const ZooContext& ctx, const MarginRequest& request, double parameter) {
    std::vector<MarginSummary> summaries;
    SweepPoint point;
    point.parameter = parameter;
    point.mean_margins = mean_margins(ctx, request, &summaries);
    for (const auto& s : summaries) {
        point.unreachable += s.skipped_unreachable;
        point.attempted += s.used + s.skipped_unreachable;
    }
    point.flagged = 2 * point.unreachable > point.attempted;
    point.tau = tau_vs_test_accuracy(ctx, point.mean_margins);
    return point;
}

SweepCurve new_curve(const ZooContext& ctx, std::string label) {
    SweepCurve curve;
    curve.label = std::move(label);
    for (const auto* m : ctx.members()) curve.model_ids.push_back(m->entry.model_id);
    return curve;
}

}  // namespace

SweepCurve component_window_sweep(const ZooContext& ctx, const PrincipalBasis& full, std::size_t window,
                                  const std::vector<std::size_t>& starts) {
    auto curve = new_curve(ctx, "component_window");
    std::vector<std::size_t> sorted = starts;
    std::sort(sorted.begin(), sorted.end());
    for (auto start : sorted) {
        if (start + window > full.m()) throw ConfigError("component window start " + std::to_string(start) + " infeasible");
        const auto basis = full.window(start, window);
        MarginRequest req{MarginMode::constrained_deepfool, ctx.config, &basis};
        curve.points.push_back(sweep_point(ctx, req, static_cast<double>(start)));
    }
    return curve;
}

SweepCurve m_sweep(const ZooContext& ctx, const PrincipalBasis& full, const std::vector<std::size_t>& m_values,
                   std::optional<std::size_t> selected_m) {
    auto curve = new_curve(ctx, "m_sweep");
    std::vector<std::size_t> sorted = m_values;
    std::sort(sorted.begin(), sorted.end());
    for (auto m : sorted) {
        if (m < 1 || m > full.m()) throw ConfigError("m = " + std::to_string(m) + " outside [1, features]");
        const auto basis = full.truncated(m);
        MarginRequest req{MarginMode::constrained_taylor, ctx.config, &basis};
        curve.points.push_back(sweep_point(ctx, req, static_cast<double>(m)));
    }
    if (selected_m) curve.marked_parameter = static_cast<double>(*selected_m);
    return curve;
}

SweepCurve sample_count_sweep(const ZooContext& ctx, const PrincipalBasis& basis,
                              const std::vector<std::size_t>& counts) {
    auto curve = new_curve(ctx, "sample_count");
    std::vector<std::size_t> sorted = counts;
    std::sort(sorted.begin(), sorted.end());
    for (auto count : sorted) {
        if (count < 1 || count > ctx.sample_indices.size()) {
            throw ConfigError("sample count " + std::to_string(count) + " outside [1, " +
                              std::to_string(ctx.sample_indices.size()) + "]");
        }
        ZooContext prefix = ctx;
        prefix.sample_indices.resize(count);
        MarginRequest req{MarginMode::constrained_deepfool, ctx.config, &basis};
        curve.points.push_back(sweep_point(prefix, req, static_cast<double>(count)));
    }
    return curve;
}

ClippingAblation clipping_ablation(const ZooContext& ctx, const PrincipalBasis& basis) {
    ClippingAblation out;
    auto run = [&](MarginMode mode, bool clip) {
        MarginRequest req{mode, ctx.config, mode == MarginMode::constrained_deepfool ? &basis : nullptr};
        req.config.clip = clip;
        req.collect_traces = clip;
        std::vector<MarginSummary> summaries;
        const auto means = mean_margins(ctx, req, &summaries);
        for (const auto& s : summaries) {
            for (const auto& r : s.records)
                if (!clip && r.clipped) out.unclipped_left_bounds = true;
            for (const auto& t : s.traces)
                for (const auto& it : t.iterations)
                    if (!it.within_bounds) out.clipped_within_bounds = false;
        }
        return tau_vs_test_accuracy(ctx, means);
    };
    out.constrained_clipped = run(MarginMode::constrained_deepfool, true);
    out.constrained_unclipped = run(MarginMode::constrained_deepfool, false);
    out.input_clipped = run(MarginMode::input_deepfool, true);
    out.input_unclipped = run(MarginMode::input_deepfool, false);
    return out;
}

void write_sweep_csv(const SweepCurve& curve, const std::filesystem::path& path) {
    CsvTable table;
    table.header = {"parameter", "tau", "flagged", "marked"};
    for (const auto& id : curve.model_ids) table.header.push_back("mean_margin_" + id);
    for (const auto& p : curve.points) {
        std::vector<std::string> row = {format_double(p.parameter), format_double(p.tau), p.flagged ? "1" : "0",
                                        curve.marked_parameter && *curve.marked_parameter == p.parameter ? "1" : "0"};
        for (double m : p.mean_margins) row.push_back(format_double(m));
        table.rows.push_back(std::move(row));
    }
    write_csv(table, path);
}

}  // namespace cmargin
