#pragma once

#include "sgplvm/errors.hpp"
#include "sgplvm/model.hpp"
#include "sgplvm/random.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

namespace sgplvm {

enum class SinusoidalCase { WellSpecified, Mix08To12, Mix07To13 };

inline std::string to_string(SinusoidalCase c) {
    switch (c) {
    case SinusoidalCase::WellSpecified: return "well_specified";
    case SinusoidalCase::Mix08To12: return "mix_0.8_1.2";
    case SinusoidalCase::Mix07To13: return "mix_0.7_1.3";
    }
    return "unknown";
}

inline SinusoidalCase sinusoidal_case_from_string(const std::string& s) {
    if (s == "well_specified" || s == "case1" || s == "1") return SinusoidalCase::WellSpecified;
    if (s == "mix_0.8_1.2" || s == "case2" || s == "2") return SinusoidalCase::Mix08To12;
    if (s == "mix_0.7_1.3" || s == "case3" || s == "3") return SinusoidalCase::Mix07To13;
    throw InputError("unknown sinusoidal case '" + s + "'");
}

/// Six-feature sinusoidal benchmark: cos(F_i x) for i = 1..3, sin(F_i x) for
/// i = 4..6, scaled by ζ_i ~ U(0, 1), on N inputs spanning [0, 4π].
struct SinusoidalSpec {
    Eigen::Index n = 30;
    SinusoidalCase which = SinusoidalCase::WellSpecified;
    double noise_sd = 0.05;
    std::uint64_t seed = 1;

    static constexpr Eigen::Index kOutputs = 6;
    static constexpr double kUpper = 4.0 * std::numbers::pi;
};

/// Realised coefficients and noise-free values of a generated dataset.
struct SinusoidalTruth {
    Eigen::VectorXd zeta;
    Eigen::VectorXd frequency;
    Eigen::MatrixXd f;
    double noise_sd = 0.05;

    [[nodiscard]] double mean(double x, Eigen::Index feature) const {
        const double arg = frequency[feature] * x;
        return zeta[feature] * (feature < 3 ? std::cos(arg) : std::sin(arg));
    }
};

inline std::pair<double, double> frequency_interval(SinusoidalCase c) {
    switch (c) {
    case SinusoidalCase::WellSpecified: return {1.0, 1.0};
    case SinusoidalCase::Mix08To12: return {0.8, 1.2};
    case SinusoidalCase::Mix07To13: return {0.7, 1.3};
    }
    return {1.0, 1.0};
}

inline std::pair<Dataset, SinusoidalTruth> generate(const SinusoidalSpec& spec) {
    if (spec.n < 2) throw InputError("generate: need N >= 2");
    if (!(spec.noise_sd >= 0.0)) throw InputError("generate: noise sd must be >= 0");
    Rng rng(spec.seed);
    constexpr Eigen::Index ky = SinusoidalSpec::kOutputs;

    SinusoidalTruth truth;
    truth.noise_sd = spec.noise_sd;
    truth.zeta.resize(ky);
    truth.frequency.resize(ky);
    for (Eigen::Index i = 0; i < ky; ++i) {
        // U(0,1) open at zero.
        double z = 0.0;
        while (z <= 0.0) z = uniform01(rng);
        truth.zeta[i] = z;
    }
    const auto [lo, hi] = frequency_interval(spec.which);
    for (Eigen::Index i = 0; i < ky; ++i)
        truth.frequency[i] = (lo == hi) ? lo : uniform(rng, lo, hi);

    Dataset data;
    data.X = Eigen::VectorXd::LinSpaced(spec.n, 0.0, SinusoidalSpec::kUpper);
    truth.f.resize(spec.n, ky);
    for (Eigen::Index i = 0; i < ky; ++i)
        for (Eigen::Index k = 0; k < spec.n; ++k) truth.f(k, i) = truth.mean(data.X(k, 0), i);
    data.Y = truth.f + spec.noise_sd * standard_normal_matrix(spec.n, ky, rng);
    return {std::move(data), std::move(truth)};
}

/// N(y | f_i(x*), sd²) on a grid of y values.
inline Eigen::VectorXd true_density(const SinusoidalTruth& truth, double x_star, const Eigen::VectorXd& y_grid,
                                    Eigen::Index feature) {
    if (feature < 0 || feature >= truth.zeta.size()) throw InputError("true_density: bad feature index");
    const double m = truth.mean(x_star, feature);
    const double sd = truth.noise_sd;
    const double norm = 1.0 / (std::sqrt(kTwoPi) * sd);
    return (norm * (-0.5 * ((y_grid.array() - m) / sd).square()).exp()).matrix();
}

/// Maps each column to [0, 1]; constant columns map to 0.
inline Eigen::MatrixXd normalise_unit_interval(const Eigen::MatrixXd& m) {
    Eigen::MatrixXd out = m;
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
        const double lo = m.col(c).minCoeff();
        const double span = m.col(c).maxCoeff() - lo;
        if (span > 0.0) out.col(c) = ((m.col(c).array() - lo) / span).matrix();
        else out.col(c).setZero();
    }
    return out;
}

struct CsvSchema {
    Eigen::Index input_dim = 1;
    Eigen::Index output_dim = 1;
    bool normalise = false;
};

inline std::vector<std::string> dataset_header(Eigen::Index kx, Eigen::Index ky) {
    std::vector<std::string> h;
    for (Eigen::Index l = 0; l < kx; ++l) h.push_back("x_" + std::to_string(l + 1));
    for (Eigen::Index i = 0; i < ky; ++i) h.push_back("y_" + std::to_string(i + 1));
    return h;
}

inline void save_csv(const Dataset& data, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw InputError("save_csv: cannot open '" + path + "'");
    const auto header = dataset_header(data.input_dim(), data.output_dim());
    for (std::size_t c = 0; c < header.size(); ++c) out << (c ? "," : "") << header[c];
    out << '\n' << std::setprecision(17);
    for (Eigen::Index r = 0; r < data.size(); ++r) {
        for (Eigen::Index c = 0; c < data.input_dim(); ++c) out << (c ? "," : "") << data.X(r, c);
        for (Eigen::Index c = 0; c < data.output_dim(); ++c) out << ',' << data.Y(r, c);
        out << '\n';
    }
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) {
        while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
        while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
        cells.push_back(cell);
    }
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
}

} // namespace detail

/// Reads a CSV with header x_1..x_kx, y_1..y_ky.
inline Dataset load_csv(const std::string& path, const CsvSchema& schema) {
    std::ifstream in(path);
    if (!in) throw InputError("load_csv: cannot open '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) throw InputError("load_csv: empty file '" + path + "'");
    const auto header = detail::split_csv_line(line);
    const auto expected = dataset_header(schema.input_dim, schema.output_dim);
    if (header.size() != expected.size()) {
        std::ostringstream msg;
        msg << "load_csv: header has " << header.size() << " columns, schema expects " << expected.size();
        if (header.size() > expected.size()) msg << " (unexpected column '" << header[expected.size()] << "')";
        else msg << " (missing column '" << expected[header.size()] << "')";
        throw InputError(msg.str());
    }
    for (std::size_t c = 0; c < expected.size(); ++c)
        if (header[c] != expected[c])
            throw InputError("load_csv: column " + std::to_string(c + 1) + " is '" + header[c] +
                             "', expected '" + expected[c] + "'");

    std::vector<std::vector<double>> rows;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != expected.size())
            throw InputError("load_csv: line " + std::to_string(line_no) + " has " +
                             std::to_string(cells.size()) + " cells");
        std::vector<double> row;
        for (std::size_t c = 0; c < cells.size(); ++c) {
            std::size_t used = 0;
            double v = std::numeric_limits<double>::quiet_NaN();
            try {
                v = std::stod(cells[c], &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used != cells[c].size() || cells[c].empty() || !std::isfinite(v))
                throw InputError("load_csv: line " + std::to_string(line_no) + ", column '" + expected[c] +
                                 "' is not a finite number ('" + cells[c] + "')");
            row.push_back(v);
        }
        rows.push_back(std::move(row));
    }
    Dataset data;
    const auto n = static_cast<Eigen::Index>(rows.size());
    data.X.resize(n, schema.input_dim);
    data.Y.resize(n, schema.output_dim);
    for (Eigen::Index r = 0; r < n; ++r) {
        for (Eigen::Index c = 0; c < schema.input_dim; ++c) data.X(r, c) = rows[r][c];
        for (Eigen::Index c = 0; c < schema.output_dim; ++c) data.Y(r, c) = rows[r][schema.input_dim + c];
    }
    if (schema.normalise) {
        data.X = normalise_unit_interval(data.X);
        data.Y = normalise_unit_interval(data.Y);
    }
    data.validate();
    return data;
}

} // namespace sgplvm
