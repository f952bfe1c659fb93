#include "cmargin/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

#include "cmargin/error.hpp"

namespace cmargin {
namespace {

constexpr std::uint8_t kMagic[4] = {0x4D, 0x50, 0x54, 0x31};

static_assert(std::numeric_limits<double>::is_iec559, "f64 payload requires IEEE-754 doubles");

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
    std::uint64_t bits = 0;
    if constexpr (sizeof(T) == 8) {
        bits = std::bit_cast<std::uint64_t>(value);
    } else {
        bits = static_cast<std::uint64_t>(value);
    }
    for (std::size_t b = 0; b < sizeof(T); ++b) out.push_back(static_cast<std::uint8_t>(bits >> (8 * b)));
}

std::uint64_t get_le(std::span<const std::uint8_t> bytes, std::size_t offset, std::size_t width) {
    std::uint64_t v = 0;
    for (std::size_t b = 0; b < width; ++b) v |= static_cast<std::uint64_t>(bytes[offset + b]) << (8 * b);
    return v;
}

}  // namespace

std::size_t element_count(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(element_count(shape_), 0.0) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (element_count(shape_) != data_.size()) {
        throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape element count " +
                         std::to_string(element_count(shape_)));
    }
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, {value}); }

Tensor Tensor::vector(std::vector<double> values) {
    const auto n = values.size();
    return Tensor(Shape{n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return Tensor(Shape{rows, cols}, std::move(values));
}

std::size_t Tensor::extent(std::size_t axis) const {
    if (axis >= shape_.size()) throw ShapeError("axis out of range");
    return shape_[axis];
}

std::span<const double> Tensor::row(std::size_t r) const {
    if (rank() != 2 || r >= shape_[0]) throw ShapeError("row index out of range");
    return std::span<const double>(data_).subspan(r * shape_[1], shape_[1]);
}

std::span<double> Tensor::row(std::size_t r) {
    if (rank() != 2 || r >= shape_[0]) throw ShapeError("row index out of range");
    return std::span<double>(data_).subspan(r * shape_[1], shape_[1]);
}

Tensor Tensor::gather_rows(std::span<const std::size_t> rows) const {
    if (rank() != 2) throw ShapeError("gather_rows needs a rank-2 tensor");
    const std::size_t cols = shape_[1];
    std::vector<double> out;
    out.reserve(rows.size() * cols);
    for (auto r : rows) {
        auto src = row(r);
        out.insert(out.end(), src.begin(), src.end());
    }
    return Tensor(Shape{rows.size(), cols}, std::move(out));
}

Tensor Tensor::reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

bool Tensor::all_finite() const noexcept {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

bool operator==(const Tensor& a, const Tensor& b) noexcept {
    return a.shape_ == b.shape_ && a.data_.size() == b.data_.size() &&
           (a.data_.empty() || std::memcmp(a.data_.data(), b.data_.data(), a.data_.size() * sizeof(double)) == 0);
}

void require_finite(const Tensor& t, const std::string& what) {
    if (!t.all_finite()) throw DataError(what + " contains non-finite values");
}

std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
    std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
    out.reserve(8 + 8 * t.rank() + 8 * t.size());
    put_le(out, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) put_le(out, static_cast<std::uint64_t>(e));
    for (double v : t.values()) put_le(out, v);
    return out;
}

Tensor decode_tensor(std::span<const std::uint8_t> bytes) {
    using Kind = FormatError::Kind;
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw FormatError(Kind::bad_magic, "expected MPT1 header");
    }
    if (bytes.size() < 8) throw FormatError(Kind::truncated, "missing rank field");
    const auto rank = get_le(bytes, 4, 4);
    std::size_t offset = 8;
    if (rank > (bytes.size() - offset) / 8) throw FormatError(Kind::truncated, "missing extent fields");

    Shape shape;
    shape.reserve(rank);
    std::uint64_t count = 1;
    for (std::uint64_t k = 0; k < rank; ++k) {
        const auto extent = get_le(bytes, offset, 8);
        offset += 8;
        if (extent != 0 && count > std::numeric_limits<std::uint64_t>::max() / 8 / extent) {
            throw FormatError(Kind::extent_overflow, "element count overflows");
        }
        count *= extent;
        shape.push_back(static_cast<std::size_t>(extent));
    }
    const std::uint64_t payload = count * 8;
    const std::uint64_t available = bytes.size() - offset;
    if (payload > available) {
        throw FormatError(Kind::truncated, "payload has " + std::to_string(available) + " bytes, needs " +
                                               std::to_string(payload));
    }
    if (payload < available) throw FormatError(Kind::trailing_bytes, "unexpected bytes after payload");

    std::vector<double> data(static_cast<std::size_t>(count));
    for (std::size_t k = 0; k < data.size(); ++k) {
        data[k] = std::bit_cast<double>(get_le(bytes, offset + 8 * k, 8));
    }
    return Tensor(std::move(shape), std::move(data));
}

Tensor read_tensor(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError(FormatError::Kind::io, "cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return decode_tensor(bytes);
    } catch (const FormatError& e) {
        throw FormatError(e.kind(), path.string() + ": " + e.what());
    }
}

void write_tensor(const Tensor& t, const std::filesystem::path& path) {
    const auto bytes = encode_tensor(t);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError(FormatError::Kind::io, "cannot create " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError(FormatError::Kind::io, "write failed for " + path.string());
}

std::uint64_t fnv1a(std::span<const std::uint8_t> bytes, std::uint64_t seed) {
    std::uint64_t h = seed;
    for (auto b : bytes) {
        h ^= b;
        h *= 1099511628211ULL;
    }
    return h;
}

std::uint64_t checksum(const Tensor& t) { return fnv1a(encode_tensor(t)); }

std::uint64_t file_checksum(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return fnv1a(bytes);
}

std::string hex64(std::uint64_t value) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
    return buf;
}

}  // namespace cmargin
