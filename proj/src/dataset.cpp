#include "cmargin/dataset.hpp"

#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "cmargin/error.hpp"

namespace cmargin {

using nlohmann::json;

void DatasetSplit::validate() const {
    if (inputs.rank() != 2) throw DataError("dataset inputs must be rank 2");
    const auto n = num_samples();
    const auto f = num_features();
    if (labels.size() != n) throw DataError("label count does not match sample count");
    if (num_classes < 2) throw DataError("dataset needs at least two classes");
    for (int y : labels)
        if (y < 0 || y >= num_classes) throw DataError("label " + std::to_string(y) + " outside [0, num_classes)");
    for (const Tensor* t : {&mean, &stddev, &lower, &upper}) {
        if (t->shape() != Shape{f}) throw DataError("per-feature vector has wrong length");
        require_finite(*t, "dataset statistics");
    }
    require_finite(inputs, "dataset inputs");
    for (std::size_t c = 0; c < f; ++c) {
        if (lower[c] > upper[c]) throw DataError("lower bound exceeds upper bound at feature " + std::to_string(c));
    }
    for (std::size_t k = 0; k < n; ++k) {
        auto row = inputs.row(k);
        for (std::size_t c = 0; c < f; ++c) {
            if (row[c] < lower[c] || row[c] > upper[c]) {
                throw DataError("sample " + std::to_string(k) + " lies outside [L, U]");
            }
        }
    }
}

std::uint64_t DatasetSplit::checksum() const {
    std::vector<double> y(labels.begin(), labels.end());
    std::uint64_t h = cmargin::checksum(inputs);
    h = fnv1a(encode_tensor(Tensor::vector(std::move(y))), h);
    h = fnv1a(encode_tensor(lower), h);
    return fnv1a(encode_tensor(upper), h);
}

void write_dataset(const DatasetSplit& split, const std::filesystem::path& dir, const std::string& name) {
    std::filesystem::create_directories(dir);
    std::vector<double> y(split.labels.begin(), split.labels.end());
    const std::pair<const char*, Tensor> parts[] = {
        {"inputs", split.inputs},  {"labels", Tensor::vector(std::move(y))},
        {"mean", split.mean},      {"stddev", split.stddev},
        {"lower", split.lower},    {"upper", split.upper},
    };
    json manifest;
    manifest["format"] = "cmargin-dataset-v1";
    manifest["num_classes"] = split.num_classes;
    for (const auto& [key, tensor] : parts) {
        const std::string file = name + "_" + key + ".mpt";
        write_tensor(tensor, dir / file);
        manifest[key] = file;
    }
    manifest["checksum"] = hex64(split.checksum());
    std::ofstream out(dir / (name + ".json"));
    out << manifest.dump(2) << '\n';
    if (!out) throw DataError("cannot write dataset manifest in " + dir.string());
}

DatasetSplit read_dataset(const std::filesystem::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw DataError("cannot open dataset manifest " + manifest_path.string());
    json manifest;
    try {
        manifest = json::parse(in);
    } catch (const json::exception& e) {
        throw DataError("dataset manifest " + manifest_path.string() + ": " + e.what());
    }
    const auto base = manifest_path.parent_path();
    auto tensor_at = [&](const char* key) {
        if (!manifest.contains(key)) throw DataError(std::string("dataset manifest lacks '") + key + "'");
        return read_tensor(base / manifest[key].get<std::string>());
    };

    DatasetSplit split;
    split.num_classes = manifest.value("num_classes", 0);
    split.inputs = tensor_at("inputs");
    const Tensor y = tensor_at("labels");
    split.labels.reserve(y.size());
    for (double v : y.values()) {
        if (v != std::floor(v)) throw DataError("non-integral label in " + manifest_path.string());
        split.labels.push_back(static_cast<int>(v));
    }
    split.mean = tensor_at("mean");
    split.stddev = tensor_at("stddev");
    split.lower = tensor_at("lower");
    split.upper = tensor_at("upper");
    split.validate();
    if (manifest.contains("checksum") && manifest["checksum"].get<std::string>() != hex64(split.checksum())) {
        throw DataError("dataset checksum mismatch for " + manifest_path.string());
    }
    return split;
}

}  // namespace cmargin
