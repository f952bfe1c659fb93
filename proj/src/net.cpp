#include "cmargin/net.hpp"

#include <cmath>
#include <fstream>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "cmargin/error.hpp"

namespace cmargin {
namespace {

template <class... Ts>
struct overloaded : Ts... {
    using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

using ConstVec = Eigen::Map<const Eigen::VectorXd>;
using Vec = Eigen::Map<Eigen::VectorXd>;
using ConstRowMat = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (std::size_t k = 0; k < s.size(); ++k) out += (k ? ", " : "") + std::to_string(s[k]);
    return out + ")";
}

Shape infer_output(const Layer& layer, const Shape& in, std::size_t position) {
    const auto where = "layer " + std::to_string(position) + " (" + layer_kind(layer) + "): ";
    return std::visit(
        overloaded{
            [&](const DenseLayer& d) -> Shape {
                if (d.weight.rank() != 2) throw ShapeError(where + "weight must be rank 2");
                if (in.size() != 1 || in[0] != d.weight.extent(1)) {
                    throw ShapeError(where + "input " + shape_str(in) + " incompatible with weight " +
                                     shape_str(d.weight.shape()));
                }
                if (d.bias.shape() != Shape{d.weight.extent(0)}) throw ShapeError(where + "bias length mismatch");
                return Shape{d.weight.extent(0)};
            },
            [&](const Conv2dLayer& c) -> Shape {
                if (c.weight.rank() != 4) throw ShapeError(where + "weight must be rank 4");
                if (in.size() != 3 || in[0] != c.weight.extent(1)) {
                    throw ShapeError(where + "input " + shape_str(in) + " incompatible with weight " +
                                     shape_str(c.weight.shape()));
                }
                if (c.bias.shape() != Shape{c.weight.extent(0)}) throw ShapeError(where + "bias length mismatch");
                if (c.stride == 0) throw ShapeError(where + "stride must be positive");
                const auto kh = c.weight.extent(2), kw = c.weight.extent(3);
                if (in[1] + 2 * c.padding < kh || in[2] + 2 * c.padding < kw) {
                    throw ShapeError(where + "kernel larger than padded input");
                }
                return Shape{c.weight.extent(0), (in[1] + 2 * c.padding - kh) / c.stride + 1,
                             (in[2] + 2 * c.padding - kw) / c.stride + 1};
            },
            [&](const ReluLayer&) -> Shape { return in; },
            [&](const MaxPool2x2Layer&) -> Shape {
                if (in.size() != 3 || in[1] < 2 || in[2] < 2) throw ShapeError(where + "needs (C, H>=2, W>=2) input");
                return Shape{in[0], in[1] / 2, in[2] / 2};
            },
            [&](const FlattenLayer&) -> Shape { return Shape{element_count(in)}; },
            [&](const BatchNormLayer& b) -> Shape {
                if (in.size() != 1 && in.size() != 3) throw ShapeError(where + "needs rank-1 or rank-3 input");
                const Shape channels{in[0]};
                for (const Tensor* t : {&b.scale, &b.shift, &b.running_mean, &b.running_var}) {
                    if (t->shape() != channels) throw ShapeError(where + "parameter length mismatch");
                }
                for (double v : b.running_var.values()) {
                    if (!(v > 0.0)) throw ShapeError(where + "running variance must be strictly positive");
                }
                if (!(b.epsilon >= 0.0)) throw ShapeError(where + "epsilon must be nonnegative");
                return in;
            },
        },
        layer);
}

Tensor layer_forward(const Layer& layer, const Tensor& in, const Shape& out_shape) {
    Tensor out(out_shape);
    std::visit(overloaded{
                   [&](const DenseLayer& d) {
                       ConstRowMat w(d.weight.raw(), d.weight.extent(0), d.weight.extent(1));
                       Vec(out.raw(), out.size()) =
                           w * ConstVec(in.raw(), in.size()) + ConstVec(d.bias.raw(), d.bias.size());
                   },
                   [&](const Conv2dLayer& c) {
                       const auto C = in.shape()[0], H = in.shape()[1], W = in.shape()[2];
                       const auto O = out_shape[0], Ho = out_shape[1], Wo = out_shape[2];
                       const auto kh = c.weight.extent(2), kw = c.weight.extent(3);
                       for (std::size_t o = 0; o < O; ++o)
                           for (std::size_t y = 0; y < Ho; ++y)
                               for (std::size_t x = 0; x < Wo; ++x) {
                                   double acc = c.bias[o];
                                   for (std::size_t ch = 0; ch < C; ++ch)
                                       for (std::size_t ky = 0; ky < kh; ++ky) {
                                           const auto iy = static_cast<std::ptrdiff_t>(y * c.stride + ky) -
                                                           static_cast<std::ptrdiff_t>(c.padding);
                                           if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                                           for (std::size_t kx = 0; kx < kw; ++kx) {
                                               const auto ix = static_cast<std::ptrdiff_t>(x * c.stride + kx) -
                                                               static_cast<std::ptrdiff_t>(c.padding);
                                               if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                                               acc += c.weight[((o * C + ch) * kh + ky) * kw + kx] *
                                                      in[(ch * H + static_cast<std::size_t>(iy)) * W +
                                                         static_cast<std::size_t>(ix)];
                                           }
                                       }
                                   out[(o * Ho + y) * Wo + x] = acc;
                               }
                   },
                   [&](const ReluLayer&) {
                       for (std::size_t k = 0; k < in.size(); ++k) out[k] = in[k] > 0.0 ? in[k] : 0.0;
                   },
                   [&](const MaxPool2x2Layer&) {
                       const auto H = in.shape()[1], W = in.shape()[2];
                       const auto Ho = out_shape[1], Wo = out_shape[2];
                       for (std::size_t ch = 0; ch < out_shape[0]; ++ch)
                           for (std::size_t y = 0; y < Ho; ++y)
                               for (std::size_t x = 0; x < Wo; ++x) {
                                   double best = in[(ch * H + 2 * y) * W + 2 * x];
                                   for (std::size_t d = 1; d < 4; ++d) {
                                       best = std::max(best, in[(ch * H + 2 * y + d / 2) * W + 2 * x + d % 2]);
                                   }
                                   out[(ch * Ho + y) * Wo + x] = best;
                               }
                   },
                   [&](const FlattenLayer&) { std::copy(in.values().begin(), in.values().end(), out.raw()); },
                   [&](const BatchNormLayer& b) {
                       const std::size_t per_channel = in.size() / b.scale.size();
                       for (std::size_t ch = 0; ch < b.scale.size(); ++ch) {
                           const double gain = b.scale[ch] / std::sqrt(b.running_var[ch] + b.epsilon);
                           for (std::size_t k = ch * per_channel; k < (ch + 1) * per_channel; ++k) {
                               out[k] = gain * (in[k] - b.running_mean[ch]) + b.shift[ch];
                           }
                       }
                   },
               },
               layer);
    return out;
}

/// Pulls a cotangent on the layer output back to its input.
std::vector<double> layer_backward(const Layer& layer, const Tensor& in, const Shape& out_shape,
                                   const std::vector<double>& g_out) {
    std::vector<double> g_in(in.size(), 0.0);
    std::visit(overloaded{
                   [&](const DenseLayer& d) {
                       ConstRowMat w(d.weight.raw(), d.weight.extent(0), d.weight.extent(1));
                       Vec(g_in.data(), g_in.size()) = w.transpose() * ConstVec(g_out.data(), g_out.size());
                   },
                   [&](const Conv2dLayer& c) {
                       const auto C = in.shape()[0], H = in.shape()[1], W = in.shape()[2];
                       const auto O = out_shape[0], Ho = out_shape[1], Wo = out_shape[2];
                       const auto kh = c.weight.extent(2), kw = c.weight.extent(3);
                       for (std::size_t o = 0; o < O; ++o)
                           for (std::size_t y = 0; y < Ho; ++y)
                               for (std::size_t x = 0; x < Wo; ++x) {
                                   const double g = g_out[(o * Ho + y) * Wo + x];
                                   if (g == 0.0) continue;
                                   for (std::size_t ch = 0; ch < C; ++ch)
                                       for (std::size_t ky = 0; ky < kh; ++ky) {
                                           const auto iy = static_cast<std::ptrdiff_t>(y * c.stride + ky) -
                                                           static_cast<std::ptrdiff_t>(c.padding);
                                           if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                                           for (std::size_t kx = 0; kx < kw; ++kx) {
                                               const auto ix = static_cast<std::ptrdiff_t>(x * c.stride + kx) -
                                                               static_cast<std::ptrdiff_t>(c.padding);
                                               if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                                               g_in[(ch * H + static_cast<std::size_t>(iy)) * W +
                                                    static_cast<std::size_t>(ix)] +=
                                                   c.weight[((o * C + ch) * kh + ky) * kw + kx] * g;
                                           }
                                       }
                               }
                   },
                   [&](const ReluLayer&) {
                       for (std::size_t k = 0; k < in.size(); ++k) g_in[k] = in[k] > 0.0 ? g_out[k] : 0.0;
                   },
                   [&](const MaxPool2x2Layer&) {
                       const auto H = in.shape()[1], W = in.shape()[2];
                       const auto Ho = out_shape[1], Wo = out_shape[2];
                       for (std::size_t ch = 0; ch < out_shape[0]; ++ch)
                           for (std::size_t y = 0; y < Ho; ++y)
                               for (std::size_t x = 0; x < Wo; ++x) {
                                   std::size_t arg = (ch * H + 2 * y) * W + 2 * x;
                                   for (std::size_t d = 1; d < 4; ++d) {
                                       const auto k = (ch * H + 2 * y + d / 2) * W + 2 * x + d % 2;
                                       if (in[k] > in[arg]) arg = k;
                                   }
                                   g_in[arg] += g_out[(ch * Ho + y) * Wo + x];
                               }
                   },
                   [&](const FlattenLayer&) { g_in = g_out; },
                   [&](const BatchNormLayer& b) {
                       const std::size_t per_channel = in.size() / b.scale.size();
                       for (std::size_t ch = 0; ch < b.scale.size(); ++ch) {
                           const double gain = b.scale[ch] / std::sqrt(b.running_var[ch] + b.epsilon);
                           for (std::size_t k = ch * per_channel; k < (ch + 1) * per_channel; ++k) {
                               g_in[k] = gain * g_out[k];
                           }
                       }
                   },
               },
               layer);
    return g_in;
}

}  // namespace

std::string layer_kind(const Layer& layer) {
    return std::visit(overloaded{
                          [](const DenseLayer&) { return std::string("dense"); },
                          [](const Conv2dLayer&) { return std::string("conv2d"); },
                          [](const ReluLayer&) { return std::string("relu"); },
                          [](const MaxPool2x2Layer&) { return std::string("maxpool2x2"); },
                          [](const FlattenLayer&) { return std::string("flatten"); },
                          [](const BatchNormLayer&) { return std::string("batchnorm"); },
                      },
                      layer);
}

Network::Network(std::vector<Layer> layers, Shape input_shape, int num_classes)
    : layers_(std::move(layers)), input_shape_(std::move(input_shape)), num_classes_(num_classes) {
    if (num_classes_ < 2) throw ShapeError("a classifier needs at least two classes");
    if (input_shape_.empty() || element_count(input_shape_) == 0) throw ShapeError("input shape must be nonempty");
    shapes_.push_back(input_shape_);
    for (std::size_t k = 0; k < layers_.size(); ++k) {
        shapes_.push_back(infer_output(layers_[k], shapes_.back(), k));
        if (std::holds_alternative<ReluLayer>(layers_[k])) hidden_layers_.push_back(k);
    }
    if (shapes_.back() != Shape{static_cast<std::size_t>(num_classes_)}) {
        throw ShapeError("network output " + shape_str(shapes_.back()) + " does not match " +
                         std::to_string(num_classes_) + " classes");
    }
}

const Shape& Network::hidden_shape(std::size_t k) const {
    if (k >= hidden_layers_.size()) throw ShapeError("hidden layer index " + std::to_string(k) + " out of range");
    return shapes_[hidden_layers_[k] + 1];
}

std::size_t Network::boundary_position(const Representation& at) const {
    if (const auto* h = std::get_if<HiddenSpace>(&at)) {
        if (h->index >= hidden_layers_.size()) {
            throw ShapeError("hidden layer index " + std::to_string(h->index) + " out of range (network has " +
                             std::to_string(hidden_layers_.size()) + ")");
        }
        return hidden_layers_[h->index] + 1;
    }
    return 0;
}

std::size_t Network::representation_size(const Representation& at) const {
    return element_count(shapes_[boundary_position(at)]);
}

std::vector<Tensor> Network::run(std::span<const double> x, std::size_t from_layer, Shape shape) const {
    if (x.size() != element_count(shape)) {
        throw ShapeError("input has " + std::to_string(x.size()) + " values, expected shape " + shape_str(shape));
    }
    std::vector<Tensor> tape;
    tape.reserve(layers_.size() - from_layer + 1);
    tape.emplace_back(std::move(shape), std::vector<double>(x.begin(), x.end()));
    for (std::size_t k = from_layer; k < layers_.size(); ++k) {
        tape.push_back(layer_forward(layers_[k], tape.back(), shapes_[k + 1]));
    }
    return tape;
}

Tensor Network::forward(std::span<const double> x) const { return run(x, 0, input_shape_).back(); }

ForwardResult Network::forward_with_activations(std::span<const double> x) const {
    auto tape = run(x, 0, input_shape_);
    ForwardResult result;
    result.hidden.reserve(hidden_layers_.size());
    for (auto k : hidden_layers_) result.hidden.push_back(tape[k + 1]);
    result.logits = std::move(tape.back());
    return result;
}

Tensor Network::forward_from_hidden(std::size_t k, std::span<const double> activation) const {
    const auto position = boundary_position(HiddenSpace{k});
    return run(activation, position, shapes_[position]).back();
}

Tensor Network::backward_rows(const std::vector<Tensor>& tape, std::size_t stop_position) const {
    const auto n = static_cast<std::size_t>(num_classes_);
    const std::size_t dims = element_count(shapes_[stop_position]);
    Tensor jac(Shape{n, dims});
    for (std::size_t cls = 0; cls < n; ++cls) {
        std::vector<double> cot(n, 0.0);
        cot[cls] = 1.0;
        for (std::size_t k = layers_.size(); k-- > stop_position;) {
            cot = layer_backward(layers_[k], tape[k], shapes_[k + 1], cot);
        }
        std::copy(cot.begin(), cot.end(), jac.row(cls).begin());
    }
    return jac;
}

Tensor Network::class_jacobian(std::span<const double> x, const Representation& at) const {
    return logits_and_jacobian(x, at).jacobian;
}

LogitsAndJacobian Network::logits_and_jacobian(std::span<const double> x, const Representation& at) const {
    const auto stop = boundary_position(at);
    const auto tape = run(x, 0, input_shape_);
    return {tape.back(), backward_rows(tape, stop)};
}

// ---------------------------------------------------------------------------
// Model manifests

using nlohmann::json;

void write_network(const Network& net, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    json manifest;
    manifest["format"] = "cmargin-model-v1";
    manifest["num_classes"] = net.num_classes();
    manifest["input_shape"] = net.input_shape();
    json layers = json::array();
    std::size_t position = 0;
    auto save = [&](const Tensor& t, const std::string& role) {
        const std::string file = "layer" + std::to_string(position) + "_" + role + ".mpt";
        write_tensor(t, dir / file);
        return file;
    };
    for (const auto& layer : net.layers()) {
        json entry;
        entry["kind"] = layer_kind(layer);
        std::visit(overloaded{
                       [&](const DenseLayer& d) {
                           entry["weight"] = save(d.weight, "weight");
                           entry["bias"] = save(d.bias, "bias");
                       },
                       [&](const Conv2dLayer& c) {
                           entry["weight"] = save(c.weight, "weight");
                           entry["bias"] = save(c.bias, "bias");
                           entry["stride"] = c.stride;
                           entry["padding"] = c.padding;
                       },
                       [&](const BatchNormLayer& b) {
                           entry["scale"] = save(b.scale, "scale");
                           entry["shift"] = save(b.shift, "shift");
                           entry["running_mean"] = save(b.running_mean, "running_mean");
                           entry["running_var"] = save(b.running_var, "running_var");
                           entry["epsilon"] = b.epsilon;
                       },
                       [](const auto&) {},
                   },
                   layer);
        layers.push_back(std::move(entry));
        ++position;
    }
    manifest["layers"] = std::move(layers);
    std::ofstream out(dir / "model.json");
    out << manifest.dump(2) << '\n';
    if (!out) throw DataError("cannot write model manifest in " + dir.string());
}

namespace {

json load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open model manifest " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw DataError("model manifest " + path.string() + ": " + e.what());
    }
}

Network build_network(const json& manifest, const std::filesystem::path& base) {
    try {
        auto tensor = [&](const json& entry, const char* key) {
            if (!entry.contains(key)) throw DataError(std::string("layer entry lacks '") + key + "'");
            Tensor t = read_tensor(base / entry[key].get<std::string>());
            require_finite(t, std::string("parameter '") + key + "'");
            return t;
        };
        std::vector<Layer> layers;
        for (const auto& entry : manifest.at("layers")) {
            const auto kind = entry.at("kind").get<std::string>();
            if (kind == "dense") {
                layers.emplace_back(DenseLayer{tensor(entry, "weight"), tensor(entry, "bias")});
            } else if (kind == "conv2d") {
                layers.emplace_back(Conv2dLayer{tensor(entry, "weight"), tensor(entry, "bias"),
                                                entry.value("stride", std::size_t{1}),
                                                entry.value("padding", std::size_t{0})});
            } else if (kind == "relu") {
                layers.emplace_back(ReluLayer{});
            } else if (kind == "maxpool2x2") {
                layers.emplace_back(MaxPool2x2Layer{});
            } else if (kind == "flatten") {
                layers.emplace_back(FlattenLayer{});
            } else if (kind == "batchnorm" || kind == "batchnorm-inference") {
                layers.emplace_back(BatchNormLayer{tensor(entry, "scale"), tensor(entry, "shift"),
                                                   tensor(entry, "running_mean"), tensor(entry, "running_var"),
                                                   entry.value("epsilon", 1e-5)});
            } else {
                throw DataError("unsupported layer kind '" + kind + "'");
            }
        }
        return Network(std::move(layers), manifest.at("input_shape").get<Shape>(), manifest.at("num_classes").get<int>());
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed model manifest: ") + e.what());
    }
}

}  // namespace

double check_bundle_deviation(const Network& net, const std::filesystem::path& manifest_path) {
    const auto manifest = load_manifest(manifest_path);
    if (!manifest.contains("check")) throw DataError("model manifest has no check bundle");
    const auto base = manifest_path.parent_path();
    const Tensor input = read_tensor(base / manifest["check"].at("input").get<std::string>());
    const Tensor expected = read_tensor(base / manifest["check"].at("expected_logits").get<std::string>());
    const auto n = static_cast<std::size_t>(net.num_classes());
    // Either a single sample or a batch of samples along the leading axis.
    const std::size_t per_sample = net.input_size();
    if (input.size() % per_sample != 0 || expected.size() != (input.size() / per_sample) * n) {
        throw ShapeError("check bundle shapes do not match the network");
    }
    double worst = 0.0;
    for (std::size_t s = 0; s < input.size() / per_sample; ++s) {
        const auto logits = net.forward(input.values().subspan(s * per_sample, per_sample));
        for (std::size_t k = 0; k < n; ++k) worst = std::max(worst, std::abs(logits[k] - expected[s * n + k]));
    }
    return worst;
}

Network read_network(const std::filesystem::path& manifest_path, double check_tolerance) {
    const auto manifest = load_manifest(manifest_path);
    Network net = build_network(manifest, manifest_path.parent_path());
    if (manifest.contains("check")) {
        const double dev = check_bundle_deviation(net, manifest_path);
        if (!(dev <= check_tolerance)) {
            throw DataError("check bundle mismatch for " + manifest_path.string() + ": max logit deviation " +
                            std::to_string(dev));
        }
    }
    return net;
}

}  // namespace cmargin
