#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "cmargin/error.hpp"

namespace cmargin {

/// Shortest round-trip decimal form of a double.
inline std::string format_double(double value) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), value);
    return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& text) {
    double value = 0.0;
    const auto res = std::from_chars(text.data(), text.data() + text.size(), value);
    if (res.ec != std::errc{} || res.ptr != text.data() + text.size()) {
        throw DataError("cannot parse number '" + text + "'");
    }
    return value;
}

/// Minimal CSV: comma-separated, no quoting (fields never contain commas).
struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t column(const std::string& name) const {
        for (std::size_t k = 0; k < header.size(); ++k)
            if (header[k] == name) return k;
        throw DataError("CSV has no column '" + name + "'");
    }
};

inline void write_csv(const CsvTable& table, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    auto line = [&](const std::vector<std::string>& fields) {
        for (std::size_t k = 0; k < fields.size(); ++k) out << (k ? "," : "") << fields[k];
        out << '\n';
    };
    line(table.header);
    for (const auto& row : table.rows) line(row);
    if (!out) throw DataError("write failed for " + path.string());
}

inline CsvTable read_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    auto split = [](const std::string& text) {
        std::vector<std::string> fields;
        std::stringstream ss(text);
        std::string field;
        while (std::getline(ss, field, ',')) fields.push_back(field);
        if (!text.empty() && text.back() == ',') fields.emplace_back();
        return fields;
    };
    CsvTable table;
    std::string text;
    if (!std::getline(in, text)) throw DataError(path.string() + " is empty");
    table.header = split(text);
    while (std::getline(in, text)) {
        if (text.empty()) continue;
        auto fields = split(text);
        if (fields.size() != table.header.size()) throw DataError(path.string() + ": ragged row");
        table.rows.push_back(std::move(fields));
    }
    return table;
}

}  // namespace cmargin
