#include "cmargin/manifold.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "cmargin/error.hpp"

namespace cmargin {

SymmetricEigen jacobi_eigen(const Tensor& symmetric) {
    if (symmetric.rank() != 2 || symmetric.extent(0) != symmetric.extent(1)) {
        throw ShapeError("jacobi_eigen needs a square matrix");
    }
    require_finite(symmetric, "matrix");
    const std::size_t d = symmetric.extent(0);
    std::vector<double> a(symmetric.values().begin(), symmetric.values().end());
    std::vector<double> v(d * d, 0.0);
    for (std::size_t k = 0; k < d; ++k) v[k * d + k] = 1.0;
    auto A = [&](std::size_t r, std::size_t c) -> double& { return a[r * d + c]; };

    auto off_norm = [&] {
        double s = 0.0;
        for (std::size_t r = 0; r < d; ++r)
            for (std::size_t c = 0; c < d; ++c)
                if (r != c) s += A(r, c) * A(r, c);
        return std::sqrt(s);
    };
    auto diag_norm = [&] {
        double s = 0.0;
        for (std::size_t r = 0; r < d; ++r) s += A(r, r) * A(r, r);
        return std::sqrt(s);
    };

    int sweeps = 0;
    constexpr int kMaxSweeps = 100;
    while (off_norm() > 1e-12 * diag_norm()) {
        if (++sweeps > kMaxSweeps) throw NumericError("Jacobi eigensolver did not converge");
        for (std::size_t p = 0; p + 1 < d; ++p) {
            for (std::size_t q = p + 1; q < d; ++q) {
                const double apq = A(p, q);
                if (apq == 0.0) continue;
                // Symmetric Schur rotation zeroing A(p, q).
                const double tau = (A(q, q) - A(p, p)) / (2.0 * apq);
                const double t = (tau >= 0.0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = t * c;
                for (std::size_t k = 0; k < d; ++k) {
                    const double akp = A(k, p), akq = A(k, q);
                    A(k, p) = c * akp - s * akq;
                    A(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < d; ++k) {
                    const double apk = A(p, k), aqk = A(q, k);
                    A(p, k) = c * apk - s * aqk;
                    A(q, k) = s * apk + c * aqk;
                }
                // Columns of v accumulate the eigenvectors.
                for (std::size_t k = 0; k < d; ++k) {
                    const double vkp = v[k * d + p], vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    std::vector<std::size_t> order(d);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return A(x, x) > A(y, y); });

    SymmetricEigen out{Tensor(Shape{d}), Tensor(Shape{d, d}), sweeps};
    for (std::size_t r = 0; r < d; ++r) {
        const std::size_t src = order[r];
        out.values[r] = A(src, src);
        double sign = 1.0;
        for (std::size_t k = 0; k < d; ++k) {
            if (std::abs(v[k * d + src]) > 1e-12) {
                sign = v[k * d + src] > 0.0 ? 1.0 : -1.0;
                break;
            }
        }
        for (std::size_t k = 0; k < d; ++k) out.vectors(r, k) = sign * v[k * d + src];
    }
    return out;
}

Tensor covariance(const Tensor& inputs) {
    if (inputs.rank() != 2) throw ShapeError("covariance needs a (samples, features) matrix");
    const std::size_t n = inputs.extent(0), f = inputs.extent(1);
    if (n < 2) throw PreconditionError("covariance needs at least two samples");
    require_finite(inputs, "PCA inputs");
    std::vector<double> mean(f, 0.0);
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t c = 0; c < f; ++c) mean[c] += inputs(s, c);
    for (auto& m : mean) m /= static_cast<double>(n);
    Tensor cov(Shape{f, f});
    std::vector<double> centered(f);
    for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t c = 0; c < f; ++c) centered[c] = inputs(s, c) - mean[c];
        for (std::size_t r = 0; r < f; ++r)
            for (std::size_t c = r; c < f; ++c) cov(r, c) += centered[r] * centered[c];
    }
    for (std::size_t r = 0; r < f; ++r)
        for (std::size_t c = r; c < f; ++c) {
            cov(r, c) /= static_cast<double>(n - 1);
            cov(c, r) = cov(r, c);
        }
    return cov;
}

PrincipalBasis fit_pca(const Tensor& inputs) {
    const Tensor cov = covariance(inputs);
    auto eig = jacobi_eigen(cov);
    PrincipalBasis basis;
    basis.total_variance = 0.0;
    for (std::size_t k = 0; k < cov.extent(0); ++k) basis.total_variance += cov(k, k);
    for (auto& lambda : eig.values.values()) lambda = std::max(lambda, 0.0);
    basis.components = std::move(eig.vectors);
    basis.explained_variance = std::move(eig.values);
    return basis;
}

PrincipalBasis PrincipalBasis::truncated(std::size_t count) const { return window(0, count); }

PrincipalBasis PrincipalBasis::window(std::size_t start, std::size_t count) const {
    if (count == 0 || start + count > m()) {
        throw ShapeError("component window [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") exceeds " + std::to_string(m()) + " components");
    }
    std::vector<std::size_t> rows(count);
    std::iota(rows.begin(), rows.end(), start);
    PrincipalBasis out;
    out.components = components.gather_rows(rows);
    out.explained_variance = Tensor::vector(std::vector<double>(explained_variance.values().begin() + start,
                                                                explained_variance.values().begin() + start + count));
    out.total_variance = total_variance;
    return out;
}

KneeSelection select_m_kneedle(std::span<const double> explained_variance, double sensitivity) {
    const std::size_t n = explained_variance.size();
    if (n < 3) throw PreconditionError("Kneedle needs at least three explained-variance values");
    std::vector<double> y(n);
    for (std::size_t k = 0; k < n; ++k) {
        if (!(explained_variance[k] > 0.0) || !std::isfinite(explained_variance[k])) {
            throw PreconditionError("explained variance must be positive and finite for the log curve");
        }
        y[k] = std::log10(explained_variance[k]);
    }

    KneeSelection none{kFallbackComponents, true, std::nullopt};
    const auto [lo, hi] = std::minmax_element(y.begin(), y.end());
    const double y_min = *lo, y_range = *hi - *lo;
    if (!(y_range > 0.0)) return none;

    // Normalize both axes to [0, 1]; for a convex decreasing curve the y-axis
    // is flipped so the elbow becomes a knee of the difference curve.
    std::vector<double> xn(n), diff(n);
    for (std::size_t k = 0; k < n; ++k) {
        xn[k] = static_cast<double>(k) / static_cast<double>(n - 1);
        const double yn = 1.0 - (y[k] - y_min) / y_range;
        diff[k] = yn - xn[k];
    }

    // Local extrema with non-strict comparisons; the ends compare against
    // their single neighbour.
    auto is_max = [&](std::size_t k) {
        const double left = k > 0 ? diff[k - 1] : diff[k];
        const double right = k + 1 < n ? diff[k + 1] : diff[k];
        return diff[k] >= left && diff[k] >= right;
    };
    auto is_min = [&](std::size_t k) {
        const double left = k > 0 ? diff[k - 1] : diff[k];
        const double right = k + 1 < n ? diff[k + 1] : diff[k];
        return diff[k] <= left && diff[k] <= right;
    };

    const double step = 1.0 / static_cast<double>(n - 1);  // mean spacing of the normalized x-axis
    std::size_t first_max = n;
    for (std::size_t k = 0; k < n; ++k)
        if (is_max(k)) {
            first_max = k;
            break;
        }
    if (first_max == n) return none;

    double threshold = 0.0;
    std::size_t threshold_index = first_max;
    for (std::size_t k = first_max; k + 1 < n; ++k) {
        if (is_max(k)) {
            threshold = diff[k] - sensitivity * step;
            threshold_index = k;
        }
        if (is_min(k)) threshold = 0.0;
        if (diff[k + 1] < threshold) {
            return KneeSelection{threshold_index + 1, false, threshold_index};
        }
    }
    return none;
}

std::vector<double> project_gradient(const PrincipalBasis& basis, std::span<const double> grad) {
    const std::size_t m = basis.m(), f = basis.num_features();
    if (grad.size() != f) {
        throw ShapeError("gradient has " + std::to_string(grad.size()) + " entries, basis has " + std::to_string(f) +
                         " features");
    }
    std::vector<double> out(m, 0.0);
    for (std::size_t r = 0; r < m; ++r) {
        const auto p = basis.components.row(r);
        double acc = 0.0;
        for (std::size_t c = 0; c < f; ++c) acc += grad[c] * p[c];
        out[r] = acc;
    }
    return out;
}

std::vector<double> lift_step(const PrincipalBasis& basis, std::span<const double> subspace_step) {
    const std::size_t m = basis.m(), f = basis.num_features();
    if (subspace_step.size() != m) {
        throw ShapeError("subspace step has " + std::to_string(subspace_step.size()) + " entries, basis has m = " +
                         std::to_string(m));
    }
    std::vector<double> out(f, 0.0);
    for (std::size_t r = 0; r < m; ++r) {
        const auto p = basis.components.row(r);
        for (std::size_t c = 0; c < f; ++c) out[c] += subspace_step[r] * p[c];
    }
    return out;
}

using nlohmann::json;

void write_basis(const BasisFile& file, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    write_tensor(file.basis.components, dir / "components.mpt");
    write_tensor(file.basis.explained_variance, dir / "explained_variance.mpt");
    json sidecar;
    sidecar["format"] = "cmargin-basis-v1";
    sidecar["m"] = file.selection.m;
    sidecar["fallback"] = file.selection.fallback;
    sidecar["knee_index"] = file.selection.knee_index ? json(*file.selection.knee_index) : json(nullptr);
    sidecar["total_variance"] = file.basis.total_variance;
    sidecar["dataset_checksum"] = file.dataset_checksum;
    std::ofstream out(dir / "basis.json");
    out << sidecar.dump(2) << '\n';
    if (!out) throw DataError("cannot write basis sidecar in " + dir.string());
}

BasisFile read_basis(const std::filesystem::path& dir) {
    std::ifstream in(dir / "basis.json");
    if (!in) throw DataError("cannot open basis sidecar in " + dir.string());
    BasisFile file;
    try {
        const auto sidecar = json::parse(in);
        file.selection.m = sidecar.at("m").get<std::size_t>();
        file.selection.fallback = sidecar.at("fallback").get<bool>();
        if (!sidecar.at("knee_index").is_null()) file.selection.knee_index = sidecar["knee_index"].get<std::size_t>();
        file.basis.total_variance = sidecar.at("total_variance").get<double>();
        file.dataset_checksum = sidecar.at("dataset_checksum").get<std::string>();
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed basis sidecar: ") + e.what());
    }
    file.basis.components = read_tensor(dir / "components.mpt");
    file.basis.explained_variance = read_tensor(dir / "explained_variance.mpt");
    if (file.basis.components.rank() != 2 || file.basis.explained_variance.size() != file.basis.m()) {
        throw DataError("basis tensors have inconsistent shapes");
    }
    return file;
}

}  // namespace cmargin
