#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "cmargin/tensor.hpp"

namespace cmargin {

/// y = W x + b with W of shape (out, in).
struct DenseLayer {
    Tensor weight;
    Tensor bias;
};

/// 2-D convolution over a (channels, height, width) input; weight is
/// (out_channels, in_channels, kernel_h, kernel_w).
struct Conv2dLayer {
    Tensor weight;
    Tensor bias;
    std::size_t stride = 1;
    std::size_t padding = 0;
};

struct ReluLayer {};

/// 2x2 max pooling with stride 2 over (channels, height, width); odd
/// trailing rows/columns are dropped.
struct MaxPool2x2Layer {};

struct FlattenLayer {};

/// Inference-mode batch normalization using stored running statistics.
/// Per feature for rank-1 inputs, per channel for (C, H, W) inputs.
struct BatchNormLayer {
    Tensor scale;
    Tensor shift;
    Tensor running_mean;
    Tensor running_var;
    double epsilon = 1e-5;
};

using Layer = std::variant<DenseLayer, Conv2dLayer, ReluLayer, MaxPool2x2Layer, FlattenLayer, BatchNormLayer>;

std::string layer_kind(const Layer& layer);

/// Which representation a Jacobian is taken with respect to.
struct InputSpace {};
struct HiddenSpace {
    std::size_t index;  ///< hidden boundary index, see Network::num_hidden()
};
using Representation = std::variant<InputSpace, HiddenSpace>;

struct ForwardResult {
    Tensor logits;
    std::vector<Tensor> hidden;  ///< post-ReLU activations, one per hidden boundary
};

struct LogitsAndJacobian {
    Tensor logits;    ///< (n)
    Tensor jacobian;  ///< (n, dims) with row k = gradient of logit k
};

/// Feedforward classifier producing raw logits.
///
/// Hidden boundaries are the outputs of the ReLU layers, in order. ReLU's
/// derivative at exactly zero is taken as 0. Weights are immutable after
/// construction; every method is const and safe to call concurrently.
class Network {
  public:
    Network(std::vector<Layer> layers, Shape input_shape, int num_classes);

    int num_classes() const noexcept { return num_classes_; }
    const Shape& input_shape() const noexcept { return input_shape_; }
    std::size_t input_size() const noexcept { return element_count(input_shape_); }
    const std::vector<Layer>& layers() const noexcept { return layers_; }

    std::size_t num_hidden() const noexcept { return hidden_layers_.size(); }
    const Shape& hidden_shape(std::size_t k) const;
    /// Dimension of the representation (input features or hidden units).
    std::size_t representation_size(const Representation& at) const;

    Tensor forward(std::span<const double> x) const;
    ForwardResult forward_with_activations(std::span<const double> x) const;

    /// Runs the layers after hidden boundary k on a captured activation.
    Tensor forward_from_hidden(std::size_t k, std::span<const double> activation) const;

    /// Row k is the gradient of logit k with respect to the chosen
    /// representation, one reverse pass per class.
    Tensor class_jacobian(std::span<const double> x, const Representation& at = InputSpace{}) const;

    LogitsAndJacobian logits_and_jacobian(std::span<const double> x, const Representation& at = InputSpace{}) const;

  private:
    std::vector<Tensor> run(std::span<const double> x, std::size_t from_layer, Shape shape) const;
    std::size_t boundary_position(const Representation& at) const;
    Tensor backward_rows(const std::vector<Tensor>& tape, std::size_t stop_position) const;

    std::vector<Layer> layers_;
    Shape input_shape_;
    int num_classes_;
    std::vector<Shape> shapes_;             ///< shapes_[k] = input shape of layer k; back() = output
    std::vector<std::size_t> hidden_layers_;  ///< indices of ReLU layers
};

/// Writes `<dir>/model.json` and one .mpt file per parameter tensor.
void write_network(const Network& net, const std::filesystem::path& dir);

/// Loads a model manifest, resolving tensor paths relative to it, and
/// validates shapes. When the manifest carries a "check" bundle (input and
/// expected logits), the forward pass is verified against it.
Network read_network(const std::filesystem::path& manifest, double check_tolerance = 1e-5);

/// Largest absolute logit deviation against the manifest's check bundle.
/// Throws DataError when the manifest has no bundle.
double check_bundle_deviation(const Network& net, const std::filesystem::path& manifest);

}  // namespace cmargin
