#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

#include "cmargin/tensor.hpp"

namespace cmargin {

/// One split of a classification dataset, already normalized.
struct DatasetSplit {
    Tensor inputs;               ///< (num_samples, num_features), post-normalization
    std::vector<int> labels;     ///< class indices in [0, num_classes)
    int num_classes = 0;
    Tensor mean;                 ///< (num_features) statistics applied before training
    Tensor stddev;               ///< (num_features)
    Tensor lower;                ///< (num_features) per-feature search bounds L
    Tensor upper;                ///< (num_features) per-feature search bounds U

    std::size_t num_samples() const { return inputs.rank() == 2 ? inputs.extent(0) : 0; }
    std::size_t num_features() const { return inputs.rank() == 2 ? inputs.extent(1) : 0; }
    std::span<const double> sample(std::size_t k) const { return inputs.row(k); }

    /// Checks shapes, label range, finiteness, L <= U and that every input
    /// lies inside [L, U]. Throws DataError.
    void validate() const;

    /// FNV-1a over inputs, labels and bounds.
    std::uint64_t checksum() const;
};

/// Writes `<dir>/<name>.json` plus its tensors as `<name>_*.mpt`.
void write_dataset(const DatasetSplit& split, const std::filesystem::path& dir, const std::string& name);

/// Loads a split from its manifest; tensor paths resolve relative to the
/// manifest's directory.
DatasetSplit read_dataset(const std::filesystem::path& manifest);

}  // namespace cmargin
