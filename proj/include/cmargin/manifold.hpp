#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "cmargin/tensor.hpp"

namespace cmargin {

/// Eigenpairs of a symmetric matrix, sorted by descending eigenvalue.
struct SymmetricEigen {
    Tensor values;   ///< (d)
    Tensor vectors;  ///< (d, d), row k is the unit eigenvector of values[k]
    int sweeps = 0;
};

/// Cyclic Jacobi rotations until the off-diagonal Frobenius norm is at most
/// 1e-12 times the diagonal norm. The first coordinate of each eigenvector
/// with magnitude above 1e-12 is made positive.
SymmetricEigen jacobi_eigen(const Tensor& symmetric);

/// Sample covariance (divisor samples - 1) of a (samples, features) matrix.
Tensor covariance(const Tensor& inputs);

/// Orthonormal principal directions of the training data.
///
/// Rows of `components` are unit-length, mutually orthogonal and ordered by
/// descending explained variance. Because the rows are orthonormal, the
/// pseudoinverse of the (m, features) component matrix is its transpose, so
/// project_gradient and lift_step are the only two maps needed.
struct PrincipalBasis {
    Tensor components;          ///< (m, features)
    Tensor explained_variance;  ///< (m)
    double total_variance = 0.0;

    std::size_t m() const { return components.rank() == 2 ? components.extent(0) : 0; }
    std::size_t num_features() const { return components.rank() == 2 ? components.extent(1) : 0; }

    /// First `m` components.
    PrincipalBasis truncated(std::size_t m) const;
    /// Components [start, start + count).
    PrincipalBasis window(std::size_t start, std::size_t count) const;
};

/// Full PCA (m = features) of already-normalized inputs.
PrincipalBasis fit_pca(const Tensor& inputs);

struct KneeSelection {
    std::size_t m = 0;
    bool fallback = false;                  ///< no knee was found; m is the fallback
    std::optional<std::size_t> knee_index;  ///< zero-based index of the knee
};

inline constexpr std::size_t kFallbackComponents = 5;

/// Kneedle (sensitivity 1, convex and decreasing, offline) on the curve
/// (index, log10 explained_variance). Returns knee index + 1, or the
/// fallback of 5 components when the curve has no knee.
KneeSelection select_m_kneedle(std::span<const double> explained_variance, double sensitivity = 1.0);

/// grad * components^T: the gradient in subspace coordinates.
std::vector<double> project_gradient(const PrincipalBasis& basis, std::span<const double> grad);

/// step * components: a subspace step expressed in input coordinates.
std::vector<double> lift_step(const PrincipalBasis& basis, std::span<const double> subspace_step);

/// Writes components/explained_variance tensors and a JSON sidecar with m,
/// the fallback flag and the dataset checksum.
struct BasisFile {
    PrincipalBasis basis;            ///< full basis as fitted
    KneeSelection selection;         ///< selected m under the run's policy
    std::string dataset_checksum;
};

void write_basis(const BasisFile& file, const std::filesystem::path& dir);
BasisFile read_basis(const std::filesystem::path& dir);

}  // namespace cmargin
