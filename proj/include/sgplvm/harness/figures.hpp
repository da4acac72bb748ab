#pragma once

#include "sgplvm/errors.hpp"
#include "sgplvm/harness/io.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace sgplvm::harness {

namespace svg {

inline std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

inline std::string label(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

/// Piecewise-linear approximation of the viridis colour map on [0, 1].
inline std::string colour(double t) {
    static constexpr std::array<std::array<double, 3>, 5> anchors{{{68, 1, 84},
                                                                     {59, 82, 139},
                                                                     {33, 145, 140},
                                                                     {94, 201, 98},
                                                                     {253, 231, 37}}};
    t = std::clamp(std::isfinite(t) ? t : 0.0, 0.0, 1.0);
    const double pos = t * (anchors.size() - 1);
    const auto k = std::min<std::size_t>(static_cast<std::size_t>(pos), anchors.size() - 2);
    const double w = pos - static_cast<double>(k);
    char buf[8];
    int rgb[3];
    for (int c = 0; c < 3; ++c)
        rgb[c] = static_cast<int>(std::lround(anchors[k][c] * (1 - w) + anchors[k + 1][c] * w));
    std::snprintf(buf, sizeof buf, "#%02x%02x%02x", rgb[0], rgb[1], rgb[2]);
    return buf;
}

struct Frame {
    double width = 480, height = 400;
    double left = 70, right = 20, top = 40, bottom = 55;
    double x0 = 0, x1 = 1, y0 = 0, y1 = 1;

    [[nodiscard]] double px(double x) const { return left + (x - x0) / (x1 - x0) * (width - left - right); }
    [[nodiscard]] double py(double y) const { return height - bottom - (y - y0) / (y1 - y0) * (height - top - bottom); }
};

inline void open(std::ostringstream& s, const Frame& f, const std::string& title) {
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(f.width) << "\" height=\"" << num(f.height)
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    s << "<text x=\"" << num(f.width / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << title
      << "</text>\n";
}

inline void axes(std::ostringstream& s, const Frame& f, const std::string& xlab, const std::string& ylab) {
    s << "<rect x=\"" << num(f.left) << "\" y=\"" << num(f.top) << "\" width=\"" << num(f.width - f.left - f.right)
      << "\" height=\"" << num(f.height - f.top - f.bottom) << "\" fill=\"none\" stroke=\"black\"/>\n";
    for (int k = 0; k <= 4; ++k) {
        const double xv = f.x0 + (f.x1 - f.x0) * k / 4.0;
        const double yv = f.y0 + (f.y1 - f.y0) * k / 4.0;
        s << "<text x=\"" << num(f.px(xv)) << "\" y=\"" << num(f.height - f.bottom + 16)
          << "\" text-anchor=\"middle\">" << label(xv) << "</text>\n";
        s << "<text x=\"" << num(f.left - 6) << "\" y=\"" << num(f.py(yv) + 4) << "\" text-anchor=\"end\">"
          << label(yv) << "</text>\n";
    }
    s << "<text x=\"" << num((f.left + f.width - f.right) / 2) << "\" y=\"" << num(f.height - 12)
      << "\" text-anchor=\"middle\">" << xlab << "</text>\n";
    s << "<text transform=\"translate(16," << num((f.top + f.height - f.bottom) / 2)
      << ") rotate(-90)\" text-anchor=\"middle\">" << ylab << "</text>\n";
}

inline std::pair<double, double> padded_range(const Eigen::VectorXd& v, std::optional<double> extra) {
    double lo = v.size() ? v.minCoeff() : 0.0;
    double hi = v.size() ? v.maxCoeff() : 1.0;
    if (extra) {
        lo = std::min(lo, *extra);
        hi = std::max(hi, *extra);
    }
    const double pad = hi > lo ? 0.05 * (hi - lo) : std::max(1e-3, 0.05 * std::abs(lo));
    return {lo - pad, hi + pad};
}

} // namespace svg

/// Scatter of posterior draws for one hyperparameter pair, with the ML
/// estimate drawn as a cross when it lies inside the plotted range.
inline std::string pair_plot_svg(const Eigen::VectorXd& a, const Eigen::VectorXd& b, const std::string& a_name,
                                 const std::string& b_name, std::optional<std::pair<double, double>> ml) {
    if (a.size() != b.size()) throw InputError("pair_plot_svg: series lengths differ");
    svg::Frame f;
    std::tie(f.x0, f.x1) = svg::padded_range(a, std::nullopt);
    std::tie(f.y0, f.y1) = svg::padded_range(b, std::nullopt);
    std::ostringstream s;
    svg::open(s, f, a_name + " vs " + b_name);
    svg::axes(s, f, a_name, b_name);
    for (Eigen::Index k = 0; k < a.size(); ++k)
        s << "<circle cx=\"" << svg::num(f.px(a[k])) << "\" cy=\"" << svg::num(f.py(b[k]))
          << "\" r=\"1.6\" fill=\"#3b528b\" fill-opacity=\"0.35\"/>\n";
    if (ml && ml->first >= f.x0 && ml->first <= f.x1 && ml->second >= f.y0 && ml->second <= f.y1) {
        const double cx = f.px(ml->first), cy = f.py(ml->second);
        s << "<path d=\"M" << svg::num(cx - 7) << ' ' << svg::num(cy - 7) << " L" << svg::num(cx + 7) << ' '
          << svg::num(cy + 7) << " M" << svg::num(cx - 7) << ' ' << svg::num(cy + 7) << " L" << svg::num(cx + 7) << ' '
          << svg::num(cy - 7) << "\" stroke=\"#d62728\" stroke-width=\"2.5\"/>\n";
    }
    s << "</svg>\n";
    return s.str();
}

/// Heat map of a density grid: rows index y bins, columns index x points.
inline std::string heatmap_svg(const Eigen::MatrixXd& dens, const Eigen::VectorXd& xs, const Eigen::VectorXd& ys,
                               double vmin, double vmax, const std::string& title) {
    if (dens.rows() != ys.size() || dens.cols() != xs.size()) throw InputError("heatmap_svg: grid shape mismatch");
    if (xs.size() < 1 || ys.size() < 2) throw InputError("heatmap_svg: grid too small");
    svg::Frame f;
    f.right = 30;
    const double dx = xs.size() > 1 ? (xs[xs.size() - 1] - xs[0]) / static_cast<double>(xs.size() - 1) : 1.0;
    const double dy = (ys[ys.size() - 1] - ys[0]) / static_cast<double>(ys.size() - 1);
    f.x0 = xs[0] - dx / 2;
    f.x1 = xs[xs.size() - 1] + dx / 2;
    f.y0 = ys[0] - dy / 2;
    f.y1 = ys[ys.size() - 1] + dy / 2;
    std::ostringstream s;
    svg::open(s, f, title);
    const double span = vmax > vmin ? vmax - vmin : 1.0;
    const double w = f.px(f.x0 + dx) - f.px(f.x0);
    const double h = f.py(f.y0) - f.py(f.y0 + dy);
    for (Eigen::Index c = 0; c < dens.cols(); ++c)
        for (Eigen::Index r = 0; r < dens.rows(); ++r)
            s << "<rect x=\"" << svg::num(f.px(xs[c] - dx / 2)) << "\" y=\"" << svg::num(f.py(ys[r] + dy / 2))
              << "\" width=\"" << svg::num(w + 0.05) << "\" height=\"" << svg::num(h + 0.05) << "\" fill=\""
              << svg::colour((dens(r, c) - vmin) / span) << "\"/>\n";
    svg::axes(s, f, "x", "y");
    s << "</svg>\n";
    return s.str();
}

} // namespace sgplvm::harness
