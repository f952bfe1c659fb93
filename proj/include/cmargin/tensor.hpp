#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace cmargin {

using Shape = std::vector<std::size_t>;

/// Number of elements described by a shape. The empty shape is a scalar (1).
std::size_t element_count(const Shape& shape);

/// Dense row-major array of f64 values.
///
/// Element (i, j) of an (r, c) tensor lives at offset i * c + j. Tensors are
/// values: copies are deep, and a const Tensor is safe to share across
/// threads.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double value);
    static Tensor vector(std::vector<double> values);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t extent(std::size_t axis) const;
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<const double> values() const noexcept { return data_; }
    std::span<double> values() noexcept { return data_; }
    const std::vector<double>& data() const noexcept { return data_; }
    const double* raw() const noexcept { return data_.data(); }
    double* raw() noexcept { return data_.data(); }

    double operator[](std::size_t offset) const { return data_[offset]; }
    double& operator[](std::size_t offset) { return data_[offset]; }

    /// Rank-2 element access.
    double operator()(std::size_t row, std::size_t col) const { return data_[row * shape_[1] + col]; }
    double& operator()(std::size_t row, std::size_t col) { return data_[row * shape_[1] + col]; }

    /// Row `row` of a rank-2 tensor.
    std::span<const double> row(std::size_t row) const;
    std::span<double> row(std::size_t row);

    /// Copy of a set of rows of a rank-2 tensor, in the given order.
    Tensor gather_rows(std::span<const std::size_t> rows) const;

    /// Same data, new shape with the same element count.
    Tensor reshaped(Shape shape) const;

    bool all_finite() const noexcept;

    /// Bitwise equality of shape and payload.
    friend bool operator==(const Tensor& a, const Tensor& b) noexcept;

  private:
    Shape shape_;
    std::vector<double> data_;
};

/// Throws DataError when any element is NaN or infinite.
void require_finite(const Tensor& t, const std::string& what);

/// Encodes `t` in the portable ".mpt" layout: "MPT1", u32 rank, rank x u64
/// extents, then the f64 payload, all little-endian.
std::vector<std::uint8_t> encode_tensor(const Tensor& t);

/// Decodes the ".mpt" layout. Throws FormatError distinguishing bad magic,
/// truncated payload, extent overflow and trailing bytes.
Tensor decode_tensor(std::span<const std::uint8_t> bytes);

Tensor read_tensor(const std::filesystem::path& path);
void write_tensor(const Tensor& t, const std::filesystem::path& path);

/// FNV-1a 64 over arbitrary bytes.
std::uint64_t fnv1a(std::span<const std::uint8_t> bytes, std::uint64_t seed = 14695981039346656037ULL);
std::uint64_t checksum(const Tensor& t);
std::uint64_t file_checksum(const std::filesystem::path& path);
std::string hex64(std::uint64_t value);

}  // namespace cmargin
