#include "cmargin/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "cmargin/csv.hpp"
#include "cmargin/error.hpp"
#include "cmargin/parallel.hpp"
#include "cmargin/rng.hpp"

namespace cmargin {
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

/// Walks one JSON object, remembering which keys were consumed so unknown
/// keys (usually typos) can be rejected.
class Section {
  public:
    Section(const json& doc, std::string path) : doc_(doc), path_(std::move(path)) {
        if (!doc_.is_object()) throw ConfigError(where() + " must be an object");
    }

    const json* find(const std::string& key) {
        seen_.insert(key);
        const auto it = doc_.find(key);
        return it == doc_.end() || it->is_null() ? nullptr : &*it;
    }

    void uint(const std::string& key, std::uint64_t& out) {
        if (const auto* v = find(key)) out = as_uint(*v, key);
    }
    void size(const std::string& key, std::size_t& out) {
        if (const auto* v = find(key)) out = static_cast<std::size_t>(as_uint(*v, key));
    }
    void integer(const std::string& key, int& out) {
        if (const auto* v = find(key)) {
            if (!v->is_number_integer()) throw ConfigError(where(key) + " must be an integer");
            const auto x = v->get<std::int64_t>();
            if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max()) {
                throw ConfigError(where(key) + " is out of range");
            }
            out = static_cast<int>(x);
        }
    }
    void number(const std::string& key, double& out) {
        if (const auto* v = find(key)) out = as_number(*v, key);
    }
    void boolean(const std::string& key, bool& out) {
        if (const auto* v = find(key)) {
            if (!v->is_boolean()) throw ConfigError(where(key) + " must be true or false");
            out = v->get<bool>();
        }
    }
    void string(const std::string& key, std::string& out) {
        if (const auto* v = find(key)) {
            if (!v->is_string()) throw ConfigError(where(key) + " must be a string");
            out = v->get<std::string>();
        }
    }
    template <typename T, typename Convert>
    void list(const std::string& key, std::vector<T>& out, Convert convert) {
        if (const auto* v = find(key)) {
            if (!v->is_array()) throw ConfigError(where(key) + " must be a list");
            out.clear();
            for (const auto& item : *v) out.push_back(convert(item, key));
        }
    }
    std::optional<Section> child(const std::string& key) {
        if (const auto* v = find(key)) return Section(*v, where(key));
        return std::nullopt;
    }

    void finish() const {
        for (const auto& item : doc_.items()) {
            if (!seen_.count(item.key())) throw ConfigError("unknown config key " + where(item.key()));
        }
    }

    std::string where(const std::string& key = "") const {
        if (key.empty()) return path_.empty() ? "config" : path_;
        return path_.empty() ? key : path_ + "." + key;
    }

    std::uint64_t as_uint(const json& v, const std::string& key) const {
        if (!v.is_number_unsigned()) throw ConfigError(where(key) + " must be a nonnegative integer");
        return v.get<std::uint64_t>();
    }
    double as_number(const json& v, const std::string& key) const {
        if (!v.is_number()) throw ConfigError(where(key) + " must be a number");
        return v.get<double>();
    }

  private:
    const json& doc_;
    std::string path_;
    std::set<std::string> seen_;
};

std::string join(const std::vector<std::string>& items, const char* sep) {
    std::string out;
    for (std::size_t k = 0; k < items.size(); ++k) out += (k ? sep : "") + items[k];
    return out;
}

/// Config fields that can change results; output location and worker count
/// are left out so provenance is identical across --out and --jobs.
std::uint64_t config_checksum(const RunConfig& config) {
    auto doc = to_json(config);
    doc.erase("output_dir");
    doc.erase("jobs");
    const auto text = doc.dump();
    return fnv1a({reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

void write_json(const json& doc, const fs::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out << doc.dump(2) << '\n';
    if (!out) throw DataError("write failed for " + path.string());
}

void echo_config(const RunConfig& config) {
    fs::create_directories(config.output_dir);
    write_json(to_json(config), config.output_dir / "resolved_config.json");
}

/// `<stage_dir>/provenance.json`: config checksum plus checksums of every
/// input and output file, with paths relative to the run root.
void write_provenance(const RunConfig& config, const fs::path& stage_dir, const std::vector<fs::path>& inputs,
                      const std::vector<fs::path>& outputs) {
    auto table = [&](const std::vector<fs::path>& files) {
        json t = json::object();
        for (const auto& f : files) t[fs::relative(f, config.output_dir).generic_string()] = hex64(file_checksum(f));
        return t;
    };
    json doc;
    doc["config_checksum"] = hex64(config_checksum(config));
    doc["seed"] = config.seed;
    doc["inputs"] = table(inputs);
    doc["outputs"] = table(outputs);
    write_json(doc, stage_dir / "provenance.json");
}

std::vector<fs::path> dataset_files(const RunLayout& layout) {
    std::vector<fs::path> files;
    for (const char* name : {"train", "test"}) {
        files.push_back(layout.dataset_dir() / (std::string(name) + ".json"));
        for (const char* key : {"inputs", "labels", "mean", "stddev", "lower", "upper"}) {
            files.push_back(layout.dataset_dir() / (std::string(name) + "_" + key + ".mpt"));
        }
    }
    return files;
}

KneeSelection select_components(const RunConfig& config, const PrincipalBasis& basis) {
    if (config.basis_policy == BasisPolicy::fixed) {
        if (config.fixed_m < 1 || config.fixed_m > basis.m()) {
            throw ConfigError("basis.m = " + std::to_string(config.fixed_m) + " is outside [1, " +
                              std::to_string(basis.m()) + "]");
        }
        return KneeSelection{config.fixed_m, false, std::nullopt};
    }
    return select_m_kneedle(basis.explained_variance.values());
}

/// Loads the persisted basis when it was fitted on this training split,
/// otherwise fits and persists a new one.
BasisFile resolve_basis(const RunConfig& config, const RunLayout& layout, const DatasetSplit& train, bool& reused) {
    const auto wanted = hex64(train.checksum());
    reused = false;
    BasisFile file;
    if (fs::exists(layout.basis_dir() / "basis.json")) {
        try {
            file = read_basis(layout.basis_dir());
            reused = file.dataset_checksum == wanted && file.basis.num_features() == train.num_features();
        } catch (const DataError&) {
            reused = false;
        }
    }
    if (!reused) {
        file.basis = fit_pca(train.inputs);
        file.dataset_checksum = wanted;
    }
    const auto selection = select_components(config, file.basis);
    const bool changed = !reused || selection.m != file.selection.m || selection.fallback != file.selection.fallback ||
                         selection.knee_index != file.selection.knee_index;
    file.selection = selection;
    if (changed) write_basis(file, layout.basis_dir());
    return file;
}

/// Column label and variant of one measured quantity.
struct Column {
    MarginMode mode;
    std::optional<HiddenSelection> hidden;
    std::string label;
};

std::vector<Column> measure_columns(const RunConfig& config) {
    std::vector<Column> columns;
    for (const auto mode : config.modes) {
        if (mode == MarginMode::hidden_taylor) {
            for (const auto sel : config.hidden_layers) {
                columns.push_back({mode, sel, std::string(to_string(mode)) + "-" + to_string(sel)});
            }
        } else {
            columns.push_back({mode, std::nullopt, to_string(mode)});
        }
    }
    return columns;
}

std::size_t sample_budget(const RunConfig& config, const DatasetSplit& train) {
    return std::min(config.margin.sample_budget, train.num_samples());
}

ZooContext make_context(const RunConfig& config, const std::vector<TrainedModel>& zoo, const DatasetSplit& train) {
    ZooContext ctx;
    ctx.zoo = &zoo;
    ctx.train = &train;
    ctx.sample_indices = shared_sample_indices(train.num_samples(), config.margin.sample_budget, config.seed);
    ctx.config = config.margin;
    ctx.jobs = config.resolved_jobs();
    return ctx;
}

struct ColumnResult {
    double mean = 0.0;
    double median = 0.0;
    std::size_t used = 0;
    std::size_t skipped_misclassified = 0;
    std::size_t skipped_unreachable = 0;
    std::vector<std::size_t> layers;
    std::vector<MarginSummary> summaries;  ///< one per layer for hidden columns, else one
};

ColumnResult measure_model(const Network& net, const DatasetSplit& train, const std::vector<std::size_t>& indices,
                           const RunConfig& config, const Column& column, const PrincipalBasis* basis,
                           bool collect_traces, const std::string& model_id) {
    ColumnResult result;
    MarginRequest request{column.mode, config.margin, basis, 0, collect_traces};
    if (column.hidden) {
        if (net.num_hidden() == 0) {
            throw PreconditionError("hidden margins need a hidden layer, but " + model_id + " has none");
        }
        result.layers = select_hidden_layers(*column.hidden, net.num_hidden(), config.hidden_count);
    } else {
        result.layers = {0};
    }
    for (const auto layer : result.layers) {
        request.hidden_layer = layer;
        result.summaries.push_back(margin_distribution(net, train, indices, request, 1));
    }
    for (const auto& s : result.summaries) {
        result.mean += s.mean;
        result.median += s.median;
        result.used += s.used;
        result.skipped_misclassified += s.skipped_misclassified;
        result.skipped_unreachable += s.skipped_unreachable;
    }
    result.mean /= static_cast<double>(result.summaries.size());
    result.median /= static_cast<double>(result.summaries.size());
    return result;
}

void write_summary_table(const RunLayout& layout, const std::vector<std::string>& model_ids) {
    // Gathers every measured column present on disk, in canonical order.
    CsvTable table;
    table.header = {"model_id"};
    std::vector<std::vector<std::string>> values;
    std::vector<std::string> labels;
    for (const auto mode : {MarginMode::input_taylor, MarginMode::input_deepfool, MarginMode::constrained_taylor,
                            MarginMode::constrained_deepfool}) {
        labels.emplace_back(to_string(mode));
    }
    for (const auto sel : {HiddenSelection::first, HiddenSelection::last, HiddenSelection::all,
                           HiddenSelection::equally_spaced}) {
        labels.push_back(std::string(to_string(MarginMode::hidden_taylor)) + "-" + to_string(sel));
    }
    for (const auto& label : labels) {
        const auto path = layout.margins_dir() / (label + ".csv");
        if (!fs::exists(path)) continue;
        const auto t = read_csv(path);
        const auto id_col = t.column("model_id"), mean_col = t.column("mean_margin");
        if (t.rows.size() != model_ids.size()) continue;  // stale column from another zoo
        std::vector<std::string> col;
        bool aligned = true;
        for (std::size_t k = 0; k < t.rows.size(); ++k) {
            aligned = aligned && t.rows[k][id_col] == model_ids[k];
            col.push_back(t.rows[k][mean_col]);
        }
        if (!aligned) continue;
        table.header.push_back(label);
        values.push_back(std::move(col));
    }
    for (std::size_t k = 0; k < model_ids.size(); ++k) {
        std::vector<std::string> row{model_ids[k]};
        for (const auto& col : values) row.push_back(col[k]);
        table.rows.push_back(std::move(row));
    }
    write_csv(table, layout.margins_dir() / "summary.csv");
}

std::vector<std::size_t> default_counts(std::size_t budget) {
    std::vector<std::size_t> counts;
    for (const auto c : {budget / 4, budget / 2, budget})
        if (c >= 2 && (counts.empty() || counts.back() != c)) counts.push_back(c);
    return counts;
}

}  // namespace

std::vector<HyperParams> GridSpec::expand(std::uint64_t seed) const {
    std::vector<HyperParams> grid;
    for (const int depth : depths)
        for (const int width : widths)
            for (const double noise : label_noise_fractions)
                for (const std::size_t subset : train_subset_sizes) {
                    HyperParams hp;
                    hp.depth = depth;
                    hp.width = width;
                    hp.learning_rate = learning_rate;
                    hp.batch_size = batch_size;
                    hp.weight_decay = weight_decay;
                    hp.label_noise_fraction = noise;
                    hp.train_subset_size = subset;
                    // 53 bits keep the seed exact in JSON readers that use doubles.
                    hp.seed = CounterRng(seed, "zoo-grid", grid.size()).next_u64() >> 11;
                    grid.push_back(hp);
                }
    return grid;
}

const char* to_string(HiddenSelection selection) noexcept {
    switch (selection) {
        case HiddenSelection::first: return "first";
        case HiddenSelection::last: return "last";
        case HiddenSelection::all: return "all";
        case HiddenSelection::equally_spaced: return "equally-spaced";
    }
    return "?";
}

HiddenSelection parse_hidden_selection(const std::string& name) {
    for (const auto sel : {HiddenSelection::first, HiddenSelection::last, HiddenSelection::all,
                           HiddenSelection::equally_spaced}) {
        if (name == to_string(sel)) return sel;
    }
    throw ConfigError("unknown hidden layer selection '" + name + "' (expected first, last, all or equally-spaced)");
}

std::vector<std::size_t> select_hidden_layers(HiddenSelection selection, std::size_t num_hidden, std::size_t count) {
    if (num_hidden == 0) throw PreconditionError("model has no hidden layers");
    switch (selection) {
        case HiddenSelection::first: return {0};
        case HiddenSelection::last: return {num_hidden - 1};
        case HiddenSelection::all: {
            std::vector<std::size_t> all(num_hidden);
            for (std::size_t k = 0; k < num_hidden; ++k) all[k] = k;
            return all;
        }
        case HiddenSelection::equally_spaced: {
            if (count == 0) throw ConfigError("hidden_count must be positive");
            if (count >= num_hidden) return select_hidden_layers(HiddenSelection::all, num_hidden, count);
            if (count == 1) return {0};
            // Round k (n - 1) / (count - 1) to the nearest boundary; first and last included.
            std::vector<std::size_t> picked;
            for (std::size_t k = 0; k < count; ++k) {
                const std::size_t num = k * (num_hidden - 1) * 2 + (count - 1);
                picked.push_back(num / (2 * (count - 1)));
            }
            picked.erase(std::unique(picked.begin(), picked.end()), picked.end());
            return picked;
        }
    }
    return {0};
}

void RunConfig::validate() const {
    dataset.validate();
    margin.validate();
    if (grid.depths.empty() || grid.widths.empty() || grid.label_noise_fractions.empty() ||
        grid.train_subset_sizes.empty()) {
        throw ConfigError("zoo grid is empty: every zoo list needs at least one value");
    }
    for (const auto& hp : grid.expand(seed)) hp.validate();
    if (training.epoch_cap < 1) throw ConfigError("zoo.epoch_cap must be at least 1");
    if (!(training.target_loss >= 0.0)) throw ConfigError("zoo.target_loss must be nonnegative");
    if (modes.empty()) throw ConfigError("measure.modes is empty");
    for (const auto mode : modes) {
        if (mode == MarginMode::hidden_taylor && hidden_layers.empty()) {
            throw ConfigError("hidden-taylor requested but measure.hidden_layers is empty");
        }
    }
    if (basis_policy == BasisPolicy::fixed && fixed_m == 0) throw ConfigError("basis.m must be positive");
    if (basis_policy == BasisPolicy::fixed && fixed_m > dataset.ambient_dim) {
        throw ConfigError("basis.m exceeds the number of features");
    }
    if (hidden_count == 0) throw ConfigError("measure.hidden_count must be positive");
    if (sweeps.window == 0 || sweeps.window > dataset.ambient_dim) {
        throw ConfigError("sweeps.window.size must be in [1, ambient_dim]");
    }
    for (const auto s : sweeps.window_starts) {
        if (s + sweeps.window > dataset.ambient_dim) throw ConfigError("window start " + std::to_string(s) + " is infeasible");
    }
    for (const auto m : sweeps.m_values) {
        if (m < 1 || m > dataset.ambient_dim) throw ConfigError("m sweep value " + std::to_string(m) + " is infeasible");
    }
    for (const auto c : sweeps.sample_counts) {
        if (c < 2 || c > dataset.train_samples) {
            throw ConfigError("sample count " + std::to_string(c) + " must be in [2, train_samples]");
        }
    }
    if (output_dir.empty()) throw ConfigError("output_dir is empty");
}

std::size_t RunConfig::resolved_jobs() const { return jobs == 0 ? default_jobs() : jobs; }

std::vector<std::string> measure_labels(const RunConfig& config) {
    std::vector<std::string> labels;
    for (const auto& c : measure_columns(config)) labels.push_back(c.label);
    return labels;
}

void apply_mode_list(RunConfig& config, const std::string& list) {
    std::vector<MarginMode> modes;
    std::vector<HiddenSelection> hidden;
    bool bare_hidden = false;
    std::stringstream ss(list);
    std::string name;
    const std::string hidden_prefix = std::string(to_string(MarginMode::hidden_taylor)) + "-";
    while (std::getline(ss, name, ',')) {
        if (name.empty()) continue;
        if (name.rfind(hidden_prefix, 0) == 0) {
            hidden.push_back(parse_hidden_selection(name.substr(hidden_prefix.size())));
            name = to_string(MarginMode::hidden_taylor);
        } else if (name == to_string(MarginMode::hidden_taylor)) {
            bare_hidden = true;
        }
        const auto mode = parse_margin_mode(name);
        if (std::find(modes.begin(), modes.end(), mode) == modes.end()) modes.push_back(mode);
    }
    if (modes.empty()) throw ConfigError("--mode list is empty");
    config.modes = modes;
    if (!hidden.empty() && !bare_hidden) config.hidden_layers = hidden;
}

RunConfig parse_run_config(const json& doc) {
    RunConfig c;
    Section top(doc, "");
    top.uint("seed", c.seed);
    std::string out_dir = c.output_dir.string();
    top.string("output_dir", out_dir);
    c.output_dir = out_dir;
    top.size("jobs", c.jobs);

    if (auto d = top.child("dataset")) {
        d->string("generator", c.dataset.generator);
        d->integer("num_classes", c.dataset.num_classes);
        d->size("ambient_dim", c.dataset.ambient_dim);
        d->size("signal_dim", c.dataset.signal_dim);
        d->number("noise_std", c.dataset.noise_std);
        d->number("nuisance_std", c.dataset.nuisance_std);
        d->number("mixing", c.dataset.mixing);
        d->number("signal_decay", c.dataset.signal_decay);
        d->number("detail_shift", c.dataset.detail_shift);
        d->number("separation", c.dataset.separation);
        d->size("train_samples", c.dataset.train_samples);
        d->size("test_samples", c.dataset.test_samples);
        d->finish();
    }
    if (auto z = top.child("zoo")) {
        auto as_int = [&](const json& v, const std::string& key) {
            if (!v.is_number_integer()) throw ConfigError("zoo." + key + " entries must be integers");
            return v.get<int>();
        };
        auto as_size = [&](const json& v, const std::string& key) {
            if (!v.is_number_unsigned()) throw ConfigError("zoo." + key + " entries must be nonnegative integers");
            return v.get<std::size_t>();
        };
        auto as_double = [&](const json& v, const std::string& key) {
            if (!v.is_number()) throw ConfigError("zoo." + key + " entries must be numbers");
            return v.get<double>();
        };
        z->list("depths", c.grid.depths, as_int);
        z->list("widths", c.grid.widths, as_int);
        z->list("label_noise_fractions", c.grid.label_noise_fractions, as_double);
        z->list("train_subset_sizes", c.grid.train_subset_sizes, as_size);
        z->number("learning_rate", c.grid.learning_rate);
        z->integer("batch_size", c.grid.batch_size);
        z->number("weight_decay", c.grid.weight_decay);
        z->integer("epoch_cap", c.training.epoch_cap);
        z->number("target_loss", c.training.target_loss);
        z->finish();
    }
    if (auto m = top.child("margin")) {
        m->number("learning_rate", c.margin.learning_rate);
        m->number("tolerance", c.margin.tolerance);
        m->integer("max_iterations", c.margin.max_iterations);
        m->boolean("clip", c.margin.clip);
        m->size("sample_budget", c.margin.sample_budget);
        m->finish();
    }
    if (auto b = top.child("basis")) {
        std::string policy = "kneedle";
        b->string("policy", policy);
        if (policy == "kneedle") {
            c.basis_policy = BasisPolicy::kneedle;
        } else if (policy == "fixed") {
            c.basis_policy = BasisPolicy::fixed;
        } else {
            throw ConfigError("basis.policy must be kneedle or fixed, not '" + policy + "'");
        }
        b->size("m", c.fixed_m);
        b->finish();
    }
    if (auto m = top.child("measure")) {
        m->list("modes", c.modes, [&](const json& v, const std::string&) {
            if (!v.is_string()) throw ConfigError("measure.modes entries must be strings");
            return parse_margin_mode(v.get<std::string>());
        });
        m->list("hidden_layers", c.hidden_layers, [&](const json& v, const std::string&) {
            if (!v.is_string()) throw ConfigError("measure.hidden_layers entries must be strings");
            return parse_hidden_selection(v.get<std::string>());
        });
        m->size("hidden_count", c.hidden_count);
        m->finish();
    }
    if (auto s = top.child("sweeps")) {
        auto as_size = [&](const json& v, const std::string& key) {
            if (!v.is_number_unsigned()) throw ConfigError("sweeps " + key + " entries must be nonnegative integers");
            return v.get<std::size_t>();
        };
        if (auto w = s->child("window")) {
            w->boolean("enabled", c.sweeps.windows);
            w->size("size", c.sweeps.window);
            w->list("starts", c.sweeps.window_starts, as_size);
            w->finish();
        }
        if (auto w = s->child("m")) {
            w->boolean("enabled", c.sweeps.m_values_enabled);
            w->list("values", c.sweeps.m_values, as_size);
            w->finish();
        }
        if (auto w = s->child("sample_counts")) {
            w->boolean("enabled", c.sweeps.sample_counts_enabled);
            w->list("counts", c.sweeps.sample_counts, as_size);
            w->finish();
        }
        if (auto w = s->child("clipping")) {
            w->boolean("enabled", c.sweeps.clipping);
            w->finish();
        }
        s->finish();
    }
    top.finish();
    c.validate();
    return c;
}

RunConfig load_run_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    return parse_run_config(doc);
}

json to_json(const RunConfig& c) {
    json modes = json::array(), hidden = json::array();
    for (const auto m : c.modes) modes.push_back(to_string(m));
    for (const auto h : c.hidden_layers) hidden.push_back(to_string(h));
    return json{
        {"seed", c.seed},
        {"output_dir", c.output_dir.generic_string()},
        {"jobs", c.jobs},
        {"dataset",
         {{"generator", c.dataset.generator},
          {"num_classes", c.dataset.num_classes},
          {"ambient_dim", c.dataset.ambient_dim},
          {"signal_dim", c.dataset.signal_dim},
          {"noise_std", c.dataset.noise_std},
          {"nuisance_std", c.dataset.nuisance_std},
          {"mixing", c.dataset.mixing},
          {"signal_decay", c.dataset.signal_decay},
          {"detail_shift", c.dataset.detail_shift},
          {"separation", c.dataset.separation},
          {"train_samples", c.dataset.train_samples},
          {"test_samples", c.dataset.test_samples}}},
        {"zoo",
         {{"depths", c.grid.depths},
          {"widths", c.grid.widths},
          {"label_noise_fractions", c.grid.label_noise_fractions},
          {"train_subset_sizes", c.grid.train_subset_sizes},
          {"learning_rate", c.grid.learning_rate},
          {"batch_size", c.grid.batch_size},
          {"weight_decay", c.grid.weight_decay},
          {"epoch_cap", c.training.epoch_cap},
          {"target_loss", c.training.target_loss}}},
        {"margin",
         {{"learning_rate", c.margin.learning_rate},
          {"tolerance", c.margin.tolerance},
          {"max_iterations", c.margin.max_iterations},
          {"clip", c.margin.clip},
          {"sample_budget", c.margin.sample_budget}}},
        {"basis", {{"policy", c.basis_policy == BasisPolicy::kneedle ? "kneedle" : "fixed"}, {"m", c.fixed_m}}},
        {"measure", {{"modes", modes}, {"hidden_layers", hidden}, {"hidden_count", c.hidden_count}}},
        {"sweeps",
         {{"window", {{"enabled", c.sweeps.windows}, {"size", c.sweeps.window}, {"starts", c.sweeps.window_starts}}},
          {"m", {{"enabled", c.sweeps.m_values_enabled}, {"values", c.sweeps.m_values}}},
          {"sample_counts", {{"enabled", c.sweeps.sample_counts_enabled}, {"counts", c.sweeps.sample_counts}}},
          {"clipping", {{"enabled", c.sweeps.clipping}}}}},
    };
}

DatasetPair load_dataset(const RunLayout& layout) {
    const auto train = layout.dataset_dir() / "train.json";
    const auto test = layout.dataset_dir() / "test.json";
    if (!fs::exists(train) || !fs::exists(test)) {
        throw DataError("no dataset in " + layout.dataset_dir().string() + "; run `cmargin dataset` first");
    }
    return DatasetPair{read_dataset(train), read_dataset(test)};
}

std::vector<TrainedModel> load_zoo(const RunLayout& layout) {
    const auto table = layout.zoo_dir() / "zoo.csv";
    if (!fs::exists(table)) throw DataError("no zoo in " + layout.zoo_dir().string() + "; run `cmargin zoo` first");
    std::vector<TrainedModel> zoo;
    for (auto& entry : read_zoo_table(table)) {
        TrainedModel m;
        m.network = read_network(layout.zoo_dir() / entry.manifest);
        m.entry = std::move(entry);
        zoo.push_back(std::move(m));
    }
    if (zoo.empty()) throw DataError(table.string() + " lists no models");
    return zoo;
}

DatasetResult cmd_dataset(const RunConfig& config) {
    config.validate();
    const RunLayout layout{config.output_dir};
    echo_config(config);
    fs::create_directories(layout.dataset_dir());
    DatasetResult result;
    result.data = make_synthetic_dataset(config.dataset, config.seed);
    write_dataset(result.data.train, layout.dataset_dir(), "train");
    write_dataset(result.data.test, layout.dataset_dir(), "test");
    result.basis = fit_pca(result.data.train.inputs);
    result.selection = select_m_kneedle(result.basis.explained_variance.values());

    CsvTable spectrum;
    spectrum.header = {"component", "explained_variance", "log10_explained_variance"};
    const auto ev = result.basis.explained_variance.values();
    for (std::size_t k = 0; k < ev.size(); ++k) {
        spectrum.rows.push_back({std::to_string(k), format_double(ev[k]),
                                 ev[k] > 0.0 ? format_double(std::log10(ev[k])) : "-inf"});
    }
    const auto spectrum_path = layout.dataset_dir() / "spectrum.csv";
    write_csv(spectrum, spectrum_path);
    json knee;
    knee["kneedle_m"] = result.selection.m;
    knee["fallback"] = result.selection.fallback;
    knee["knee_index"] = result.selection.knee_index ? json(*result.selection.knee_index) : json(nullptr);
    knee["train_checksum"] = hex64(result.data.train.checksum());
    knee["test_checksum"] = hex64(result.data.test.checksum());
    const auto knee_path = layout.dataset_dir() / "summary.json";
    write_json(knee, knee_path);

    auto outputs = dataset_files(layout);
    outputs.push_back(spectrum_path);
    outputs.push_back(knee_path);
    write_provenance(config, layout.dataset_dir(), {}, outputs);
    return result;
}

std::vector<TrainedModel> cmd_zoo(const RunConfig& config) {
    config.validate();
    const RunLayout layout{config.output_dir};
    const auto data = load_dataset(layout);
    echo_config(config);
    auto zoo = build_zoo(config.grid.expand(config.seed), data.train, data.test, config.training, layout.zoo_dir(),
                         config.resolved_jobs());
    std::vector<fs::path> outputs{layout.zoo_dir() / "zoo.csv"};
    for (const auto& m : zoo) {
        outputs.push_back(layout.zoo_dir() / m.entry.model_id / "meta.json");
        if (!m.entry.failed) outputs.push_back(layout.zoo_dir() / m.entry.manifest);
    }
    write_provenance(config, layout.zoo_dir(), dataset_files(layout), outputs);
    return zoo;
}

MeasureResult cmd_measure(const RunConfig& config, const MeasureOptions& options) {
    config.validate();
    const RunLayout layout{config.output_dir};
    const auto data = load_dataset(layout);
    const auto zoo = load_zoo(layout);
    echo_config(config);

    MeasureResult result;
    const auto basis_file = resolve_basis(config, layout, data.train, result.basis_reused);
    result.selected_m = basis_file.selection.m;
    const auto basis = basis_file.basis.truncated(result.selected_m);
    const auto indices = shared_sample_indices(data.train.num_samples(), config.margin.sample_budget, config.seed);
    for (const auto& m : zoo) result.model_ids.push_back(m.entry.model_id);

    fs::create_directories(layout.margins_dir());
    std::vector<fs::path> outputs;
    for (const auto& column : measure_columns(config)) {
        std::vector<ColumnResult> per_model(zoo.size());
        parallel_for(zoo.size(), config.resolved_jobs(), [&](std::size_t k) {
            per_model[k] = measure_model(*zoo[k].network, data.train, indices, config, column,
                                         is_constrained(column.mode) ? &basis : nullptr, options.collect_traces,
                                         zoo[k].entry.model_id);
        });

        const auto record_dir = layout.margins_dir() / column.label;
        fs::create_directories(record_dir);
        CsvTable table;
        table.header = {"model_id",     "mean_margin",           "median_margin",      "used",
                        "skipped_misclassified", "skipped_unreachable", "hidden_layers"};
        auto& values = result.columns[column.label];
        for (std::size_t k = 0; k < zoo.size(); ++k) {
            const auto& r = per_model[k];
            const auto& id = zoo[k].entry.model_id;
            std::vector<std::string> layers;
            for (std::size_t l = 0; l < r.layers.size(); ++l) {
                const auto name = column.hidden ? id + "_layer" + std::to_string(r.layers[l]) : id;
                const auto path = record_dir / (name + ".csv");
                write_margin_records(r.summaries[l], path);
                outputs.push_back(path);
                if (options.observer) options.observer(id, column.label, r.summaries[l]);
                layers.push_back(std::to_string(r.layers[l]));
            }
            table.rows.push_back({id, format_double(r.mean), format_double(r.median), std::to_string(r.used),
                                  std::to_string(r.skipped_misclassified), std::to_string(r.skipped_unreachable),
                                  column.hidden ? join(layers, ";") : ""});
            values.push_back(r.mean);
        }
        const auto path = layout.margins_dir() / (column.label + ".csv");
        write_csv(table, path);
        outputs.push_back(path);
    }
    write_summary_table(layout, result.model_ids);
    outputs.push_back(layout.margins_dir() / "summary.csv");

    auto inputs = dataset_files(layout);
    inputs.push_back(layout.zoo_dir() / "zoo.csv");
    for (const auto& m : zoo) inputs.push_back(layout.zoo_dir() / m.entry.manifest);
    for (const char* f : {"basis.json", "components.mpt", "explained_variance.mpt"}) inputs.push_back(layout.basis_dir() / f);
    std::sort(outputs.begin(), outputs.end());
    write_provenance(config, layout.margins_dir(), inputs, outputs);
    return result;
}

EvaluationReport cmd_evaluate(const RunConfig& config) {
    config.validate();
    const RunLayout layout{config.output_dir};
    const auto table_path = layout.zoo_dir() / "zoo.csv";
    if (!fs::exists(table_path)) throw DataError("no zoo in " + layout.zoo_dir().string() + "; run `cmargin zoo` first");
    const auto entries = read_zoo_table(table_path);
    if (entries.size() < 2) throw DataError("evaluation needs at least two models");

    // Check every requested column before writing anything.
    std::vector<std::pair<std::string, std::vector<double>>> columns;
    std::vector<fs::path> inputs{table_path};
    for (const auto& label : measure_labels(config)) {
        const auto path = layout.margins_dir() / (label + ".csv");
        if (!fs::exists(path)) {
            throw DataError("no margins for mode '" + label + "' in " + layout.margins_dir().string() +
                            "; run `cmargin measure --mode " + label + "` first");
        }
        const auto t = read_csv(path);
        const auto id_col = t.column("model_id"), mean_col = t.column("mean_margin");
        if (t.rows.size() != entries.size()) throw DataError(path.string() + " does not match the zoo's model list");
        std::vector<double> values;
        for (std::size_t k = 0; k < entries.size(); ++k) {
            if (t.rows[k][id_col] != entries[k].model_id) {
                throw DataError(path.string() + " does not match the zoo's model list");
            }
            values.push_back(parse_double(t.rows[k][mean_col]));
        }
        columns.emplace_back(label, std::move(values));
        inputs.push_back(path);
    }
    echo_config(config);

    EvaluationReport report;
    double lo = entries.front().test_accuracy, hi = lo;
    std::vector<double> accuracy;
    for (const auto& e : entries) {
        accuracy.push_back(e.test_accuracy);
        lo = std::min(lo, e.test_accuracy);
        hi = std::max(hi, e.test_accuracy);
    }
    report.test_accuracy_spread = hi - lo;

    fs::create_directories(layout.report_dir());
    std::vector<fs::path> outputs;
    CsvTable correlations;
    correlations.header = {"mode", "kendall_tau", "cmi", "models"};
    json summary;
    summary["models"] = entries.size();
    summary["test_accuracy_spread"] = report.test_accuracy_spread;
    summary["modes"] = json::array();
    for (const auto& [label, values] : columns) {
        ModeReport mode;
        mode.mode = label;
        mode.models = values.size();
        mode.tau = kendall_tau(values, accuracy);
        try {
            mode.cmi = cmi_score(make_series(entries, values));
        } catch (const PreconditionError&) {
            mode.cmi.reset();
        }
        correlations.rows.push_back({label, format_double(mode.tau), mode.cmi ? format_double(*mode.cmi) : "",
                                     std::to_string(mode.models)});
        summary["modes"].push_back({{"mode", label},
                                    {"kendall_tau", mode.tau},
                                    {"cmi", mode.cmi ? json(*mode.cmi) : json(nullptr)},
                                    {"models", mode.models}});

        CsvTable scatter;
        scatter.header = {"model_id", "depth", "mean_margin", "test_accuracy"};
        for (std::size_t k = 0; k < entries.size(); ++k) {
            scatter.rows.push_back({entries[k].model_id, std::to_string(entries[k].hyperparams.depth),
                                    format_double(values[k]), format_double(entries[k].test_accuracy)});
        }
        const auto scatter_path = layout.report_dir() / ("scatter_" + label + ".csv");
        write_csv(scatter, scatter_path);
        outputs.push_back(scatter_path);
        report.modes.push_back(std::move(mode));
    }
    const auto corr_path = layout.report_dir() / "correlations.csv";
    write_csv(correlations, corr_path);
    const auto summary_path = layout.report_dir() / "summary.json";
    write_json(summary, summary_path);
    outputs.push_back(corr_path);
    outputs.push_back(summary_path);
    write_provenance(config, layout.report_dir(), inputs, outputs);
    return report;
}

SweepReport cmd_sweep(const RunConfig& config) {
    config.validate();
    const RunLayout layout{config.output_dir};
    const auto data = load_dataset(layout);
    const auto zoo = load_zoo(layout);
    echo_config(config);
    bool reused = false;
    const auto basis_file = resolve_basis(config, layout, data.train, reused);
    const auto& full = basis_file.basis;
    const auto ctx = make_context(config, zoo, data.train);
    const std::size_t features = data.train.num_features();

    fs::create_directories(layout.sweeps_dir());
    SweepReport report;
    std::vector<fs::path> outputs;
    auto emit = [&](SweepCurve curve, const char* file) {
        const auto path = layout.sweeps_dir() / file;
        write_sweep_csv(curve, path);
        outputs.push_back(path);
        report.curves.push_back(std::move(curve));
    };

    if (config.sweeps.windows) {
        auto starts = config.sweeps.window_starts;
        if (starts.empty())
            for (std::size_t s = 0; s + config.sweeps.window <= features; ++s) starts.push_back(s);
        emit(component_window_sweep(ctx, full, config.sweeps.window, starts), "window.csv");
    }
    if (config.sweeps.m_values_enabled) {
        auto values = config.sweeps.m_values;
        if (values.empty())
            for (std::size_t m = 1; m <= features; ++m) values.push_back(m);
        emit(m_sweep(ctx, full, values, basis_file.selection.m), "m.csv");
    }
    if (config.sweeps.sample_counts_enabled) {
        auto counts = config.sweeps.sample_counts;
        if (counts.empty()) counts = default_counts(sample_budget(config, data.train));
        emit(sample_count_sweep(ctx, full.truncated(basis_file.selection.m), counts), "sample_count.csv");
    }
    if (config.sweeps.clipping) {
        const auto ablation = clipping_ablation(ctx, full.truncated(basis_file.selection.m));
        CsvTable table;
        table.header = {"mode", "clip", "kendall_tau"};
        table.rows = {{"constrained-deepfool", "true", format_double(ablation.constrained_clipped)},
                      {"constrained-deepfool", "false", format_double(ablation.constrained_unclipped)},
                      {"input-deepfool", "true", format_double(ablation.input_clipped)},
                      {"input-deepfool", "false", format_double(ablation.input_unclipped)}};
        const auto path = layout.sweeps_dir() / "clipping.csv";
        write_csv(table, path);
        outputs.push_back(path);
        json flags{{"unclipped_left_bounds", ablation.unclipped_left_bounds},
                   {"clipped_within_bounds", ablation.clipped_within_bounds},
                   {"vacuous", !ablation.unclipped_left_bounds}};
        const auto flag_path = layout.sweeps_dir() / "clipping.json";
        write_json(flags, flag_path);
        outputs.push_back(flag_path);
        report.clipping = ablation;
    }

    auto inputs = dataset_files(layout);
    inputs.push_back(layout.zoo_dir() / "zoo.csv");
    for (const auto& m : zoo) inputs.push_back(layout.zoo_dir() / m.entry.manifest);
    write_provenance(config, layout.sweeps_dir(), inputs, outputs);
    return report;
}

}  // namespace cmargin
