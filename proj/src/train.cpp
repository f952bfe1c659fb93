#include "cmargin/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "cmargin/csv.hpp"
#include "cmargin/error.hpp"
#include "cmargin/parallel.hpp"
#include "cmargin/rng.hpp"

namespace cmargin {
namespace {

using Matrix = Eigen::MatrixXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Matrix to_matrix(const Tensor& t) {
    return Eigen::Map<const RowMatrix>(t.raw(), static_cast<Eigen::Index>(t.extent(0)),
                                       static_cast<Eigen::Index>(t.extent(1)));
}

Tensor to_tensor(const Matrix& m) {
    Tensor t(Shape{static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
    Eigen::Map<RowMatrix>(t.raw(), m.rows(), m.cols()) = m;
    return t;
}

/// Dense ReLU stack trained with plain minibatch SGD.
struct Mlp {
    std::vector<Matrix> weights;  // (out, in)
    std::vector<Eigen::VectorXd> biases;

    Mlp(std::size_t inputs, int depth, int width, int classes, std::uint64_t seed) {
        CounterRng rng(seed, "weight-init");
        std::size_t fan_in = inputs;
        for (int l = 0; l <= depth; ++l) {
            const bool last = l == depth;
            const auto out = static_cast<Eigen::Index>(last ? classes : width);
            const double scale = std::sqrt((last ? 1.0 : 2.0) / static_cast<double>(fan_in));
            Matrix w(out, static_cast<Eigen::Index>(fan_in));
            for (Eigen::Index r = 0; r < w.rows(); ++r)
                for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = scale * rng.normal();
            weights.push_back(std::move(w));
            biases.push_back(Eigen::VectorXd::Zero(out));
            fan_in = static_cast<std::size_t>(width);
        }
    }

    /// Returns pre-activations of every layer; the last entry holds logits.
    std::vector<Matrix> forward(const Matrix& x, std::vector<Matrix>& activations) const {
        std::vector<Matrix> pre;
        activations.clear();
        activations.push_back(x);
        for (std::size_t l = 0; l < weights.size(); ++l) {
            Matrix z = activations.back() * weights[l].transpose();
            z.rowwise() += biases[l].transpose();
            pre.push_back(z);
            if (l + 1 < weights.size()) activations.push_back(z.cwiseMax(0.0));
        }
        return pre;
    }

    Network to_network(std::size_t inputs, int classes) const {
        std::vector<Layer> layers;
        for (std::size_t l = 0; l < weights.size(); ++l) {
            layers.emplace_back(DenseLayer{to_tensor(weights[l]),
                                           Tensor::vector(std::vector<double>(biases[l].data(),
                                                                              biases[l].data() + biases[l].size()))});
            if (l + 1 < weights.size()) layers.emplace_back(ReluLayer{});
        }
        return Network(std::move(layers), Shape{inputs}, classes);
    }
};

/// Row-wise softmax cross-entropy; fills probabilities in place of logits.
double softmax_xent(Matrix& logits, const std::vector<int>& labels, std::size_t& correct) {
    double loss = 0.0;
    correct = 0;
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        Eigen::Index arg;
        const double top = logits.row(r).maxCoeff(&arg);
        if (arg == labels[static_cast<std::size_t>(r)]) ++correct;
        logits.row(r).array() -= top;
        logits.row(r) = logits.row(r).array().exp().matrix();
        const double z = logits.row(r).sum();
        logits.row(r) /= z;
        loss -= std::log(std::max(logits(r, labels[static_cast<std::size_t>(r)]), 1e-300));
    }
    return loss / static_cast<double>(logits.rows());
}

double accuracy(const Network& net, const DatasetSplit& data) {
    std::size_t ok = 0;
    for (std::size_t s = 0; s < data.num_samples(); ++s) {
        const auto logits = net.forward(data.sample(s));
        const auto arg = std::max_element(logits.values().begin(), logits.values().end()) - logits.values().begin();
        if (arg == data.labels[s]) ++ok;
    }
    return data.num_samples() ? static_cast<double>(ok) / static_cast<double>(data.num_samples()) : 0.0;
}

}  // namespace

void SyntheticSpec::validate() const {
    if (generator != "blobs" && generator != "annuli") {
        throw ConfigError("unknown dataset generator '" + generator + "' (expected blobs or annuli)");
    }
    if (num_classes < 2) throw ConfigError("dataset needs at least two classes");
    if (signal_dim < 1 || signal_dim > ambient_dim) throw ConfigError("signal_dim must be in [1, ambient_dim]");
    if (generator == "annuli" && signal_dim < 2) throw ConfigError("annuli need signal_dim >= 2");
    if (!(noise_std >= 0.0) || !(nuisance_std >= 0.0) || !(mixing >= 0.0) || !(detail_shift >= 0.0)) {
        throw ConfigError("noise levels and mixing must be nonnegative");
    }
    if (!(signal_decay > 0.0)) throw ConfigError("signal_decay must be positive");
    if (!(separation > 0.0)) throw ConfigError("separation must be positive");
    if (train_samples < 2 || test_samples < 1) throw ConfigError("need at least 2 train and 1 test sample");
}

Tensor synthetic_raw_inputs(const SyntheticSpec& spec, std::uint64_t seed, const std::string& split,
                            std::vector<int>& labels) {
    spec.validate();
    const std::size_t n = split == "train" ? spec.train_samples : spec.test_samples;
    const std::size_t sd = spec.signal_dim, rest = spec.ambient_dim - spec.signal_dim;

    // Shared across splits: class centres and the mixing matrix.
    CounterRng centre_rng(seed, "blob-centres");
    std::vector<double> centres(static_cast<std::size_t>(spec.num_classes) * sd);
    for (auto& c : centres) c = spec.separation * centre_rng.normal();
    CounterRng mix_rng(seed, "mixing");
    std::vector<double> mixing(rest * sd);
    for (std::size_t r = 0; r < rest; ++r) {
        double norm = 0.0;
        for (std::size_t d = 0; d < sd; ++d) {
            auto& m = mixing[r * sd + d];
            m = std::pow(spec.signal_decay, static_cast<double>(d)) * mix_rng.normal();
            norm += m * m;
        }
        norm = std::sqrt(norm);
        for (std::size_t d = 0; d < sd; ++d) mixing[r * sd + d] *= norm > 0.0 ? spec.mixing / norm : 0.0;
    }

    CounterRng detail_rng(seed, "detail");
    std::vector<double> detail(static_cast<std::size_t>(spec.num_classes) * rest);
    for (int c = 0; c < spec.num_classes; ++c) {
        double norm = 0.0;
        for (std::size_t r = 0; r < rest; ++r) {
            auto& v = detail[static_cast<std::size_t>(c) * rest + r];
            v = detail_rng.normal();
            norm += v * v;
        }
        norm = std::sqrt(norm);
        for (std::size_t r = 0; r < rest; ++r) {
            detail[static_cast<std::size_t>(c) * rest + r] *= norm > 0.0 ? spec.detail_shift / norm : 0.0;
        }
    }

    Tensor x(Shape{n, spec.ambient_dim});
    labels.assign(n, 0);
    std::vector<double> s(sd);
    for (std::size_t k = 0; k < n; ++k) {
        CounterRng rng(seed, split, k);
        const int cls = static_cast<int>(k % static_cast<std::size_t>(spec.num_classes));
        labels[k] = cls;
        if (spec.generator == "annuli") {
            double norm = 0.0;
            do {
                norm = 0.0;
                for (auto& v : s) {
                    v = rng.normal();
                    norm += v * v;
                }
                norm = std::sqrt(norm);
            } while (norm == 0.0);
            const double radius = spec.separation * (cls + 1) + spec.noise_std * rng.normal();
            for (auto& v : s) v *= radius / norm;
        } else {
            for (std::size_t d = 0; d < sd; ++d) {
                s[d] = centres[static_cast<std::size_t>(cls) * sd + d] + spec.noise_std * rng.normal();
            }
        }
        auto row = x.row(k);
        std::copy(s.begin(), s.end(), row.begin());
        for (std::size_t r = 0; r < rest; ++r) {
            double v = spec.nuisance_std * rng.normal() + detail[static_cast<std::size_t>(cls) * rest + r];
            for (std::size_t d = 0; d < sd; ++d) v += mixing[r * sd + d] * s[d];
            row[sd + r] = v;
        }
    }
    return x;
}

DatasetPair make_synthetic_dataset(const SyntheticSpec& spec, std::uint64_t seed) {
    spec.validate();
    std::vector<int> train_labels, test_labels;
    Tensor train_x = synthetic_raw_inputs(spec, seed, "train", train_labels);
    Tensor test_x = synthetic_raw_inputs(spec, seed, "test", test_labels);

    const std::size_t f = spec.ambient_dim, n = spec.train_samples;
    Tensor mean(Shape{f}), stddev(Shape{f});
    for (std::size_t c = 0; c < f; ++c) {
        double m = 0.0;
        for (std::size_t s = 0; s < n; ++s) m += train_x(s, c);
        m /= static_cast<double>(n);
        double v = 0.0;
        for (std::size_t s = 0; s < n; ++s) v += (train_x(s, c) - m) * (train_x(s, c) - m);
        const double sd = std::sqrt(v / static_cast<double>(n - 1));
        mean[c] = m;
        stddev[c] = sd > 0.0 ? sd : 1.0;
    }
    auto normalize = [&](Tensor& x) {
        for (std::size_t s = 0; s < x.extent(0); ++s)
            for (std::size_t c = 0; c < f; ++c) x(s, c) = (x(s, c) - mean[c]) / stddev[c];
    };
    normalize(train_x);
    normalize(test_x);

    auto extrema = [&](const Tensor& x, Tensor& lo, Tensor& hi) {
        for (std::size_t c = 0; c < f; ++c) {
            for (std::size_t s = 0; s < x.extent(0); ++s) {
                lo[c] = std::min(lo[c], x(s, c));
                hi[c] = std::max(hi[c], x(s, c));
            }
        }
    };
    const double inf = std::numeric_limits<double>::infinity();
    Tensor lower(Shape{f}, std::vector<double>(f, inf)), upper(Shape{f}, std::vector<double>(f, -inf));
    extrema(train_x, lower, upper);
    Tensor test_lower = lower, test_upper = upper;
    extrema(test_x, test_lower, test_upper);

    DatasetPair out{
        DatasetSplit{std::move(train_x), std::move(train_labels), spec.num_classes, mean, stddev, lower, upper},
        DatasetSplit{std::move(test_x), std::move(test_labels), spec.num_classes, mean, stddev, test_lower,
                     test_upper},
    };
    out.train.validate();
    out.test.validate();
    return out;
}

void HyperParams::validate() const {
    if (depth < 0) throw ConfigError("depth must be nonnegative");
    if (width < 1) throw ConfigError("width must be positive");
    if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
    if (batch_size < 1) throw ConfigError("batch size must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be nonnegative");
    if (!(label_noise_fraction >= 0.0 && label_noise_fraction <= 1.0)) {
        throw ConfigError("label noise fraction must be in [0, 1]");
    }
}

std::vector<int> noisy_labels(const std::vector<int>& labels, int num_classes, double fraction, std::uint64_t seed) {
    std::vector<int> out = labels;
    CounterRng rng(seed, "label-noise");
    const auto order = rng.permutation(labels.size());
    const auto flips = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(labels.size())));
    for (std::size_t k = 0; k < flips; ++k) {
        const auto s = order[k];
        const auto shift = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(num_classes - 1)));
        out[s] = (labels[s] + shift) % num_classes;
    }
    return out;
}

TrainedModel train_model(const DatasetSplit& train, const DatasetSplit& test, const HyperParams& hp,
                         const TrainSettings& settings, std::string model_id) {
    hp.validate();
    if (settings.epoch_cap < 1) throw ConfigError("epoch cap must be positive");
    if (train.num_features() != test.num_features()) throw DataError("train and test feature counts differ");

    TrainedModel result;
    result.entry.model_id = std::move(model_id);
    result.entry.hyperparams = hp;

    // Seeded training subset, then label noise on that subset only.
    CounterRng subset_rng(hp.seed, "train-subset");
    auto subset = subset_rng.permutation(train.num_samples());
    if (hp.train_subset_size > 0 && hp.train_subset_size < subset.size()) subset.resize(hp.train_subset_size);
    std::sort(subset.begin(), subset.end());
    std::vector<int> clean(subset.size());
    for (std::size_t k = 0; k < subset.size(); ++k) clean[k] = train.labels[subset[k]];
    const auto labels = noisy_labels(clean, train.num_classes, hp.label_noise_fraction, hp.seed);
    const Matrix x = to_matrix(train.inputs.gather_rows(subset));

    const auto features = train.num_features();
    Mlp mlp(features, hp.depth, hp.width, train.num_classes, hp.seed);
    const auto n = static_cast<Eigen::Index>(subset.size());
    std::vector<Matrix> acts;

    auto full_loss = [&](std::size_t& correct) {
        auto pre = mlp.forward(x, acts);
        return softmax_xent(pre.back(), labels, correct);
    };

    std::size_t correct = 0;
    double loss = full_loss(correct);
    int epoch = 0;
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    while (loss > settings.target_loss && epoch < settings.epoch_cap) {
        std::iota(order.begin(), order.end(), Eigen::Index{0});
        CounterRng(hp.seed, "epoch-order", static_cast<std::uint64_t>(epoch)).shuffle(order);
        for (Eigen::Index start = 0; start < n; start += hp.batch_size) {
            const auto stop = std::min<Eigen::Index>(n, start + hp.batch_size);
            const auto b = stop - start;
            Matrix xb(b, x.cols());
            std::vector<int> yb(static_cast<std::size_t>(b));
            for (Eigen::Index r = 0; r < b; ++r) {
                const auto src = order[static_cast<std::size_t>(start + r)];
                xb.row(r) = x.row(src);
                yb[static_cast<std::size_t>(r)] = labels[static_cast<std::size_t>(src)];
            }
            auto pre = mlp.forward(xb, acts);
            std::size_t unused = 0;
            softmax_xent(pre.back(), yb, unused);
            Matrix grad = pre.back();
            for (Eigen::Index r = 0; r < b; ++r) grad(r, yb[static_cast<std::size_t>(r)]) -= 1.0;
            grad /= static_cast<double>(b);
            for (std::size_t l = mlp.weights.size(); l-- > 0;) {
                const Matrix dw = grad.transpose() * acts[l];
                const Eigen::VectorXd db = grad.colwise().sum().transpose();
                if (l > 0) {
                    grad = (grad * mlp.weights[l]).cwiseProduct((pre[l - 1].array() > 0.0).cast<double>().matrix());
                }
                mlp.weights[l] -= hp.learning_rate * (dw + hp.weight_decay * mlp.weights[l]);
                mlp.biases[l] -= hp.learning_rate * db;
            }
        }
        ++epoch;
        loss = full_loss(correct);
        if (!std::isfinite(loss)) break;
    }

    result.entry.epochs = epoch;
    result.entry.train_loss = loss;
    if (!std::isfinite(loss)) {
        result.entry.failed = true;
        result.entry.failure = "training diverged (non-finite loss)";
        return result;
    }
    for (const auto& w : mlp.weights)
        if (!w.allFinite()) {
            result.entry.failed = true;
            result.entry.failure = "training diverged (non-finite weights)";
            return result;
        }
    result.entry.train_accuracy = static_cast<double>(correct) / static_cast<double>(n);
    result.network = mlp.to_network(features, train.num_classes);
    result.entry.test_accuracy = accuracy(*result.network, test);
    return result;
}

std::string zoo_model_id(std::size_t index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "m%03zu", index);
    return buf;
}

double test_accuracy_spread(const std::vector<TrainedModel>& zoo) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& m : zoo) {
        if (m.entry.failed) continue;
        lo = std::min(lo, m.entry.test_accuracy);
        hi = std::max(hi, m.entry.test_accuracy);
    }
    return hi >= lo ? hi - lo : 0.0;
}

namespace {

using nlohmann::json;

json to_json(const HyperParams& hp) {
    return json{{"depth", hp.depth},
                {"width", hp.width},
                {"learning_rate", hp.learning_rate},
                {"batch_size", hp.batch_size},
                {"weight_decay", hp.weight_decay},
                {"label_noise_fraction", hp.label_noise_fraction},
                {"train_subset_size", hp.train_subset_size},
                {"seed", hp.seed}};
}

HyperParams hyperparams_from_json(const json& j) {
    HyperParams hp;
    hp.depth = j.at("depth").get<int>();
    hp.width = j.at("width").get<int>();
    hp.learning_rate = j.at("learning_rate").get<double>();
    hp.batch_size = j.at("batch_size").get<int>();
    hp.weight_decay = j.at("weight_decay").get<double>();
    hp.label_noise_fraction = j.at("label_noise_fraction").get<double>();
    hp.train_subset_size = j.at("train_subset_size").get<std::size_t>();
    hp.seed = j.at("seed").get<std::uint64_t>();
    return hp;
}

void write_meta(const ZooEntry& e, const std::filesystem::path& path) {
    json meta{{"model_id", e.model_id},         {"hyperparams", to_json(e.hyperparams)},
              {"manifest", e.manifest},         {"train_loss", e.train_loss},
              {"train_accuracy", e.train_accuracy}, {"test_accuracy", e.test_accuracy},
              {"epochs", e.epochs},             {"failed", e.failed},
              {"failure", e.failure}};
    std::ofstream out(path);
    out << meta.dump(2) << '\n';
    if (!out) throw DataError("cannot write " + path.string());
}

ZooEntry read_meta(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    try {
        const auto meta = json::parse(in);
        ZooEntry e;
        e.model_id = meta.at("model_id").get<std::string>();
        e.hyperparams = hyperparams_from_json(meta.at("hyperparams"));
        e.manifest = meta.at("manifest").get<std::string>();
        e.train_loss = meta.at("train_loss").get<double>();
        e.train_accuracy = meta.at("train_accuracy").get<double>();
        e.test_accuracy = meta.at("test_accuracy").get<double>();
        e.epochs = meta.at("epochs").get<int>();
        e.failed = meta.at("failed").get<bool>();
        e.failure = meta.at("failure").get<std::string>();
        return e;
    } catch (const json::exception& ex) {
        throw DataError("malformed " + path.string() + ": " + ex.what());
    }
}

}  // namespace

std::vector<TrainedModel> build_zoo(const std::vector<HyperParams>& grid, const DatasetSplit& train,
                                    const DatasetSplit& test, const TrainSettings& settings,
                                    const std::optional<std::filesystem::path>& out_dir, std::size_t jobs) {
    if (grid.empty()) throw ConfigError("hyperparameter grid is empty");
    for (const auto& hp : grid) hp.validate();
    std::vector<TrainedModel> zoo(grid.size());
    if (out_dir) std::filesystem::create_directories(*out_dir);

    parallel_for(grid.size(), jobs, [&](std::size_t k) {
        const auto id = zoo_model_id(k);
        if (out_dir) {
            const auto dir = *out_dir / id;
            const auto meta = dir / "meta.json";
            if (std::filesystem::exists(meta)) {
                TrainedModel done;
                done.entry = read_meta(meta);
                if (!(done.entry.hyperparams == grid[k])) {
                    throw ConfigError(id + " in " + out_dir->string() +
                                      " was trained with different hyperparameters; use a fresh output directory");
                }
                if (!done.entry.failed) done.network = read_network(*out_dir / done.entry.manifest);
                zoo[k] = std::move(done);
                return;
            }
            zoo[k] = train_model(train, test, grid[k], settings, id);
            std::filesystem::create_directories(dir);
            if (zoo[k].network) {
                write_network(*zoo[k].network, dir);
                zoo[k].entry.manifest = id + "/model.json";
            }
            write_meta(zoo[k].entry, meta);  // written last: its presence marks completion
        } else {
            zoo[k] = train_model(train, test, grid[k], settings, id);
        }
    });

    if (std::all_of(zoo.begin(), zoo.end(), [](const TrainedModel& m) { return m.entry.failed; })) {
        throw NumericError("every zoo entry failed to train");
    }
    if (out_dir) {
        std::vector<ZooEntry> entries;
        for (const auto& m : zoo)
            if (!m.entry.failed) entries.push_back(m.entry);
        write_zoo_table(entries, *out_dir / "zoo.csv");
    }
    return zoo;
}

void write_zoo_table(const std::vector<ZooEntry>& entries, const std::filesystem::path& path) {
    CsvTable table;
    table.header = {"model_id",     "depth",         "width",          "learning_rate", "batch_size",
                    "weight_decay", "label_noise_fraction", "train_subset_size", "seed",
                    "train_loss",   "train_accuracy", "test_accuracy", "gap",          "epochs",
                    "manifest"};
    for (const auto& e : entries) {
        const auto& hp = e.hyperparams;
        table.rows.push_back({e.model_id, std::to_string(hp.depth), std::to_string(hp.width),
                              format_double(hp.learning_rate), std::to_string(hp.batch_size),
                              format_double(hp.weight_decay), format_double(hp.label_noise_fraction),
                              std::to_string(hp.train_subset_size), std::to_string(hp.seed),
                              format_double(e.train_loss), format_double(e.train_accuracy),
                              format_double(e.test_accuracy), format_double(e.gap()), std::to_string(e.epochs),
                              e.manifest});
    }
    write_csv(table, path);
}

std::vector<ZooEntry> read_zoo_table(const std::filesystem::path& path) {
    const auto table = read_csv(path);
    std::vector<ZooEntry> out;
    for (const auto& row : table.rows) {
        auto col = [&](const char* name) -> const std::string& { return row[table.column(name)]; };
        ZooEntry e;
        e.model_id = col("model_id");
        e.hyperparams.depth = std::stoi(col("depth"));
        e.hyperparams.width = std::stoi(col("width"));
        e.hyperparams.learning_rate = parse_double(col("learning_rate"));
        e.hyperparams.batch_size = std::stoi(col("batch_size"));
        e.hyperparams.weight_decay = parse_double(col("weight_decay"));
        e.hyperparams.label_noise_fraction = parse_double(col("label_noise_fraction"));
        e.hyperparams.train_subset_size = std::stoull(col("train_subset_size"));
        e.hyperparams.seed = std::stoull(col("seed"));
        e.train_loss = parse_double(col("train_loss"));
        e.train_accuracy = parse_double(col("train_accuracy"));
        e.test_accuracy = parse_double(col("test_accuracy"));
        e.epochs = std::stoi(col("epochs"));
        e.manifest = col("manifest");
        out.push_back(std::move(e));
    }
    return out;
}

}  // namespace cmargin
