#pragma once

#include "sgplvm/errors.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace sgplvm::harness {

inline constexpr const char* kNmseFormula = "100 * mean_bins((p_est - p_true)^2) / mean_bins(p_true^2)";

/// Binned-density NMSE in percent. Both grids must have the same shape.
inline double nmse_binned(const Eigen::MatrixXd& p_est, const Eigen::MatrixXd& p_true) {
    if (p_est.rows() != p_true.rows() || p_est.cols() != p_true.cols())
        throw InputError("nmse_binned: grids are not aligned");
    if (p_true.size() == 0) throw InputError("nmse_binned: empty grid");
    const double den = p_true.squaredNorm();
    if (!(den > 0.0)) throw InputError("nmse_binned: true density is identically zero");
    return 100.0 * (p_est - p_true).squaredNorm() / den;
}

/// Linear-interpolation quantile (R type 7) of an unsorted sample.
inline double quantile(std::vector<double> v, double p) {
    if (v.empty()) throw InputError("quantile: empty sample");
    std::sort(v.begin(), v.end());
    const double h = (static_cast<double>(v.size()) - 1.0) * p;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

struct Summary {
    double mean = 0.0;
    double sd = 0.0;
    double q025 = 0.0;
    double q975 = 0.0;
};

inline Summary summarise(const std::vector<double>& v) {
    if (v.empty()) throw InputError("summarise: empty trace");
    Summary s;
    double sum = 0.0;
    for (double x : v) sum += x;
    s.mean = sum / static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
    s.q025 = quantile(v, 0.025);
    s.q975 = quantile(v, 0.975);
    return s;
}

/// Sample autocorrelation at lags 0..max_lag (biased normalisation).
/// A constant trace gives 1 at lag 0 and 0 elsewhere.
inline std::vector<double> autocorrelation(const std::vector<double>& v, std::size_t max_lag) {
    if (v.empty()) throw InputError("autocorrelation: empty trace");
    const auto n = v.size();
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(n);
    double c0 = 0.0;
    for (double x : v) c0 += (x - mean) * (x - mean);
    std::vector<double> out(std::min(max_lag, n - 1) + 1, 0.0);
    out[0] = 1.0;
    if (!(c0 > 0.0)) return out;
    for (std::size_t k = 1; k < out.size(); ++k) {
        double c = 0.0;
        for (std::size_t t = 0; t + k < n; ++t) c += (v[t] - mean) * (v[t + k] - mean);
        out[k] = c / c0;
    }
    return out;
}

/// Split-chain potential scale reduction: each chain is halved and the
/// usual between/within variance ratio is taken over the halves.
inline double split_rhat(const std::vector<std::vector<double>>& chains) {
    std::vector<std::vector<double>> halves;
    for (const auto& c : chains) {
        const auto h = c.size() / 2;
        if (h < 2) continue;
        halves.emplace_back(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(h));
        halves.emplace_back(c.end() - static_cast<std::ptrdiff_t>(h), c.end());
    }
    if (halves.size() < 2) throw InputError("split_rhat: need at least one chain of length >= 4");
    const auto n = static_cast<double>(halves.front().size());
    const auto m = static_cast<double>(halves.size());
    std::vector<double> means;
    double w = 0.0;
    for (const auto& h : halves) {
        const Summary s = summarise(h);
        means.push_back(s.mean);
        w += s.sd * s.sd;
    }
    w /= m;
    const Summary sm = summarise(means);
    const double b = n * sm.sd * sm.sd;
    if (!(w > 0.0)) return b > 0.0 ? std::numeric_limits<double>::infinity() : 1.0;
    const double var_plus = (n - 1.0) / n * w + b / n;
    return std::sqrt(var_plus / w);
}

/// Number of local maxima of a 2-D Gaussian KDE evaluated on a regular grid
/// spanning the sample range padded by three bandwidths.
inline int kde_mode_count_2d(const std::vector<double>& a, const std::vector<double>& b, double bandwidth,
                             int grid = 80, double min_relative_height = 0.05) {
    if (a.size() != b.size() || a.empty()) throw InputError("kde_mode_count_2d: bad sample");
    if (!(bandwidth > 0.0)) throw InputError("kde_mode_count_2d: bandwidth must be positive");
    const auto [amin, amax] = std::minmax_element(a.begin(), a.end());
    const auto [bmin, bmax] = std::minmax_element(b.begin(), b.end());
    const double a0 = *amin - 3 * bandwidth, a1 = *amax + 3 * bandwidth;
    const double b0 = *bmin - 3 * bandwidth, b1 = *bmax + 3 * bandwidth;
    Eigen::MatrixXd dens = Eigen::MatrixXd::Zero(grid, grid);
    for (int i = 0; i < grid; ++i) {
        const double ga = a0 + (a1 - a0) * i / (grid - 1);
        for (int j = 0; j < grid; ++j) {
            const double gb = b0 + (b1 - b0) * j / (grid - 1);
            double s = 0.0;
            for (std::size_t k = 0; k < a.size(); ++k) {
                const double da = (ga - a[k]) / bandwidth, db = (gb - b[k]) / bandwidth;
                s += std::exp(-0.5 * (da * da + db * db));
            }
            dens(i, j) = s;
        }
    }
    const double top = dens.maxCoeff();
    int modes = 0;
    for (int i = 0; i < grid; ++i)
        for (int j = 0; j < grid; ++j) {
            const double v = dens(i, j);
            if (v < min_relative_height * top) continue;
            bool peak = true;
            for (int di = -1; di <= 1 && peak; ++di)
                for (int dj = -1; dj <= 1; ++dj) {
                    if (di == 0 && dj == 0) continue;
                    const int ii = i + di, jj = j + dj;
                    if (ii < 0 || jj < 0 || ii >= grid || jj >= grid) continue;
                    // ties resolved towards the lexicographically first cell
                    const bool earlier = di < 0 || (di == 0 && dj < 0);
                    if (dens(ii, jj) > v || (earlier && dens(ii, jj) == v)) {
                        peak = false;
                        break;
                    }
                }
            if (peak) ++modes;
        }
    return modes;
}

} // namespace sgplvm::harness
