#pragma once

#include "sgplvm/errors.hpp"
#include "sgplvm/simdata.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

namespace sgplvm::harness {

namespace fs = std::filesystem;

/// Shortest-stable text for a double: %.17g round-trips exactly.
inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

/// Numeric table with named columns, stored row-major in an Eigen matrix.
struct Table {
    std::vector<std::string> header;
    Eigen::MatrixXd rows;

    [[nodiscard]] Eigen::Index column(const std::string& name) const {
        for (std::size_t c = 0; c < header.size(); ++c)
            if (header[c] == name) return static_cast<Eigen::Index>(c);
        throw ConfigError("table has no column '" + name + "'");
    }
};

inline void write_table(const fs::path& path, const Table& t) {
    if (static_cast<Eigen::Index>(t.header.size()) != t.rows.cols())
        throw InputError("write_table: header width differs from data");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write '" + path.string() + "'");
    for (std::size_t c = 0; c < t.header.size(); ++c) out << (c ? "," : "") << t.header[c];
    out << '\n';
    for (Eigen::Index r = 0; r < t.rows.rows(); ++r) {
        for (Eigen::Index c = 0; c < t.rows.cols(); ++c) out << (c ? "," : "") << format_double(t.rows(r, c));
        out << '\n';
    }
    if (!out) throw ConfigError("error writing '" + path.string() + "'");
}

inline Table read_table(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("missing artifact '" + path.string() + "'");
    std::string line;
    if (!std::getline(in, line)) throw ConfigError("empty artifact '" + path.string() + "'");
    Table t;
    t.header = sgplvm::detail::split_csv_line(line);
    std::vector<double> values;
    std::size_t n = 0;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto cells = sgplvm::detail::split_csv_line(line);
        if (cells.size() != t.header.size())
            throw ConfigError(path.string() + ": line " + std::to_string(line_no) + " has wrong cell count");
        for (const auto& c : cells) {
            std::size_t used = 0;
            double v = 0.0;
            try {
                v = std::stod(c, &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used != c.size() || c.empty())
                throw ConfigError(path.string() + ": line " + std::to_string(line_no) + " has non-numeric cell '" + c + "'");
            values.push_back(v);
        }
        ++n;
    }
    const auto w = static_cast<Eigen::Index>(t.header.size());
    t.rows.resize(static_cast<Eigen::Index>(n), w);
    for (std::size_t r = 0; r < n; ++r)
        for (Eigen::Index c = 0; c < w; ++c) t.rows(static_cast<Eigen::Index>(r), c) = values[r * w + c];
    return t;
}

inline void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write '" + path.string() + "'");
    out << text;
}

inline std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("missing artifact '" + path.string() + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// 64-bit FNV-1a of a file's bytes, as 16 hex digits.
inline std::string file_digest(const fs::path& path) {
    const std::string bytes = read_text(path);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

} // namespace sgplvm::harness
