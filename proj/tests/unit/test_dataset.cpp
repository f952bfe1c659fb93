#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <doctest.h>
#include <nlohmann/json.hpp>

#include "cmargin/dataset.hpp"
#include "cmargin/error.hpp"
#include "testing.hpp"

using namespace cmargin;
using cmargin::testing::scratch_dir;

namespace {

DatasetSplit toy_split() {
    DatasetSplit s;
    s.inputs = Tensor::matrix(4, 2, {0.5, -1.0, 1.5, 0.0, -0.5, 1.0, -1.5, 0.0});
    s.labels = {0, 1, 0, 1};
    s.num_classes = 2;
    s.mean = Tensor::vector({0.0, 0.0});
    s.stddev = Tensor::vector({1.0, 1.0});
    s.lower = Tensor::vector({-1.5, -1.0});
    s.upper = Tensor::vector({1.5, 1.0});
    return s;
}

// FNV-1a and the .mpt byte layout, written out independently so the
// checksum an exporter would compute can be reproduced.
std::uint64_t fnv(const std::vector<std::uint8_t>& bytes, std::uint64_t h) {
    for (const auto b : bytes) {
        h ^= b;
        h *= 1099511628211ULL;
    }
    return h;
}

std::vector<std::uint8_t> mpt_vector(const std::vector<double>& v) {
    std::vector<std::uint8_t> out{'M', 'P', 'T', '1', 1, 0, 0, 0};
    const std::uint64_t n = v.size();
    for (int k = 0; k < 8; ++k) out.push_back(static_cast<std::uint8_t>(n >> (8 * k)));
    for (const double x : v) {
        std::uint64_t bits;
        std::memcpy(&bits, &x, sizeof bits);
        for (int k = 0; k < 8; ++k) out.push_back(static_cast<std::uint8_t>(bits >> (8 * k)));
    }
    return out;
}

std::vector<std::uint8_t> mpt_matrix(std::uint64_t rows, std::uint64_t cols, const std::vector<double>& v) {
    std::vector<std::uint8_t> out{'M', 'P', 'T', '1', 2, 0, 0, 0};
    for (const std::uint64_t e : {rows, cols})
        for (int k = 0; k < 8; ++k) out.push_back(static_cast<std::uint8_t>(e >> (8 * k)));
    const auto payload = mpt_vector(v);
    out.insert(out.end(), payload.begin() + 16, payload.end());
    return out;
}

void dump(const std::filesystem::path& p, const std::vector<std::uint8_t>& bytes) {
    std::ofstream(p, std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()),
                                             static_cast<std::streamsize>(bytes.size()));
}

std::string hex(std::uint64_t v) {
    std::ostringstream s;
    s << std::hex << std::setw(16) << std::setfill('0') << v;
    return s.str();
}

}  // namespace

TEST_CASE("dataset manifest round-trip") {
    const auto dir = scratch_dir("dataset");
    const auto split = toy_split();
    write_dataset(split, dir, "train");
    const auto back = read_dataset(dir / "train.json");
    CHECK(back.inputs == split.inputs);
    CHECK(back.labels == split.labels);
    CHECK(back.lower == split.lower);
    CHECK(back.upper == split.upper);
    CHECK(back.checksum() == split.checksum());
}

TEST_CASE("exporter-style dataset loads with a matching checksum") {
    const auto dir = scratch_dir("dataset");
    const std::vector<double> x{0.5, -1.0, 1.5, 0.0, -0.5, 1.0, -1.5, 0.0};
    const std::vector<double> y{0, 1, 0, 1}, lo{-1.5, -1.0}, hi{1.5, 1.0};
    dump(dir / "d_inputs.mpt", mpt_matrix(4, 2, x));
    dump(dir / "d_labels.mpt", mpt_vector(y));
    dump(dir / "d_mean.mpt", mpt_vector({0.25, -3.0}));
    dump(dir / "d_stddev.mpt", mpt_vector({2.0, 0.5}));
    dump(dir / "d_lower.mpt", mpt_vector(lo));
    dump(dir / "d_upper.mpt", mpt_vector(hi));
    std::uint64_t h = fnv(mpt_matrix(4, 2, x), 14695981039346656037ULL);
    h = fnv(mpt_vector(y), h);
    h = fnv(mpt_vector(lo), h);
    h = fnv(mpt_vector(hi), h);
    const nlohmann::json manifest = {
        {"format", "cmargin-dataset-v1"}, {"num_classes", 2},          {"inputs", "d_inputs.mpt"},
        {"labels", "d_labels.mpt"},       {"mean", "d_mean.mpt"},      {"stddev", "d_stddev.mpt"},
        {"lower", "d_lower.mpt"},         {"upper", "d_upper.mpt"},    {"checksum", hex(h)},
    };
    std::ofstream(dir / "d.json") << manifest.dump();
    const auto split = read_dataset(dir / "d.json");
    CHECK(split.checksum() == h);
    CHECK(split.mean[0] == 0.25);
    CHECK(split.stddev[1] == 0.5);

    auto tampered = manifest;
    tampered["checksum"] = hex(h ^ 1);
    std::ofstream(dir / "d.json") << tampered.dump();
    CHECK_THROWS_AS(read_dataset(dir / "d.json"), DataError);
}

TEST_CASE("split validation") {
    SUBCASE("well formed") { CHECK_NOTHROW(toy_split().validate()); }
    SUBCASE("label out of range") {
        auto s = toy_split();
        s.labels[2] = 2;
        CHECK_THROWS_AS(s.validate(), DataError);
    }
    SUBCASE("sample outside the box") {
        auto s = toy_split();
        s.upper[0] = 1.0;
        CHECK_THROWS_AS(s.validate(), DataError);
    }
    SUBCASE("inverted bounds") {
        auto s = toy_split();
        s.lower[1] = 2.0;
        CHECK_THROWS_AS(s.validate(), DataError);
    }
    SUBCASE("non-finite input") {
        auto s = toy_split();
        s.inputs(1, 1) = NAN;
        CHECK_THROWS_AS(s.validate(), DataError);
    }
}
