#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include <doctest.h>

#include "cmargin/error.hpp"
#include "cmargin/tensor.hpp"
#include "testing.hpp"

using namespace cmargin;
using cmargin::testing::scratch_dir;

namespace {

// Byte-level encoder written independently of the library, the way a
// foreign exporter would lay the file out.
void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int k = 0; k < 4; ++k) out.push_back(static_cast<std::uint8_t>(v >> (8 * k)));
}
void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int k = 0; k < 8; ++k) out.push_back(static_cast<std::uint8_t>(v >> (8 * k)));
}
void put_f64(std::vector<std::uint8_t>& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    put_u64(out, bits);
}

std::vector<std::uint8_t> foreign_bytes(const std::vector<std::uint64_t>& shape, const std::vector<double>& values) {
    std::vector<std::uint8_t> out{'M', 'P', 'T', '1'};
    put_u32(out, static_cast<std::uint32_t>(shape.size()));
    for (const auto e : shape) put_u64(out, e);
    for (const double v : values) put_f64(out, v);
    return out;
}

FormatError::Kind decode_failure(const std::vector<std::uint8_t>& bytes) {
    try {
        decode_tensor(bytes);
    } catch (const FormatError& e) {
        return e.kind();
    }
    FAIL("decode succeeded on malformed bytes");
    return FormatError::Kind::io;
}

}  // namespace

TEST_CASE("zeros round-trip through a file") {
    const auto dir = scratch_dir("tensor");
    const Tensor t({2, 3});
    write_tensor(t, dir / "z.mpt");
    CHECK(read_tensor(dir / "z.mpt") == t);
}

TEST_CASE("exporter byte layout decodes to the same values") {
    const auto bytes = foreign_bytes({3}, {1.5, -2.0, 0.25});
    const Tensor t = decode_tensor(bytes);
    REQUIRE(t.shape() == Shape{3});
    CHECK(t[0] == 1.5);
    CHECK(t[1] == -2.0);
    CHECK(t[2] == 0.25);
    CHECK(encode_tensor(t) == bytes);

    const auto dir = scratch_dir("tensor");
    std::ofstream(dir / "x.mpt", std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()),
                                                         static_cast<std::streamsize>(bytes.size()));
    CHECK(read_tensor(dir / "x.mpt") == t);
}

TEST_CASE("header arithmetic") {
    SUBCASE("scalar carries one 8-byte value") {
        const auto bytes = encode_tensor(Tensor::scalar(7.0));
        CHECK(bytes.size() == 4 + 4 + 8);
        CHECK(decode_tensor(bytes).rank() == 0);
        CHECK(decode_tensor(bytes)[0] == 7.0);
    }
    SUBCASE("zero extent gives an empty payload") {
        const Tensor t({0, 4});
        const auto bytes = encode_tensor(t);
        CHECK(bytes.size() == 4 + 4 + 2 * 8);
        const Tensor back = decode_tensor(bytes);
        CHECK(back.shape() == Shape{0, 4});
        CHECK(back.size() == 0);
    }
    SUBCASE("rank and extents of a matrix") {
        const auto bytes = encode_tensor(Tensor({2, 3}));
        CHECK(bytes == foreign_bytes({2, 3}, std::vector<double>(6, 0.0)));
    }
}

TEST_CASE("random matrix round-trips bitwise") {
    CounterRng rng(5, "roundtrip");
    const Tensor t = cmargin::testing::random_tensor(rng, {100, 100}, 3.0);
    const auto dir = scratch_dir("tensor");
    write_tensor(t, dir / "r.mpt");
    const Tensor back = read_tensor(dir / "r.mpt");
    REQUIRE(back.shape() == t.shape());
    CHECK(std::memcmp(back.raw(), t.raw(), t.size() * sizeof(double)) == 0);
    CHECK(file_checksum(dir / "r.mpt") == fnv1a(encode_tensor(t)));
}

TEST_CASE("malformed files fail with distinct kinds") {
    const auto good = foreign_bytes({3}, {1.5, -2.0, 0.25});

    auto bad_magic = good;
    bad_magic[3] = '2';
    CHECK(decode_failure(bad_magic) == FormatError::Kind::bad_magic);

    auto short_payload = good;
    short_payload.pop_back();
    CHECK(decode_failure(short_payload) == FormatError::Kind::truncated);

    const std::vector<std::uint8_t> short_header{'M', 'P', 'T', '1', 2, 0};
    CHECK(decode_failure(short_header) == FormatError::Kind::truncated);

    const auto overflow = foreign_bytes({std::uint64_t{1} << 40, std::uint64_t{1} << 40}, {});
    CHECK(decode_failure(overflow) == FormatError::Kind::extent_overflow);

    auto trailing = good;
    trailing.push_back(0);
    CHECK(decode_failure(trailing) == FormatError::Kind::trailing_bytes);

    CHECK_THROWS_AS(read_tensor(scratch_dir("tensor") / "missing.mpt"), FormatError);
}

TEST_CASE("row-major layout and shape checks") {
    const Tensor m = Tensor::matrix(2, 3, {0, 1, 2, 3, 4, 5});
    CHECK(m(1, 2) == 5.0);
    CHECK(m[1 * 3 + 2] == 5.0);
    CHECK(m.row(1)[0] == 3.0);
    CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0, 3.0}), ShapeError);
    CHECK_THROWS_AS(m.reshaped({4}), ShapeError);
    CHECK(m.reshaped({3, 2})(2, 1) == 5.0);
}

TEST_CASE("non-finite values are rejected downstream") {
    Tensor t = Tensor::vector({1.0, NAN});
    CHECK_FALSE(t.all_finite());
    CHECK_THROWS_AS(require_finite(t, "probe"), DataError);
    t[1] = INFINITY;
    CHECK_THROWS_AS(require_finite(t, "probe"), DataError);
}
