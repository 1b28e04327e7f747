#pragma once

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "mwnet/common.hpp"
#include "mwnet/stats.hpp"

namespace mwnet {

namespace detail {

struct SvgFrame {
    static constexpr double width = 640.0, height = 480.0;
    static constexpr double ml = 70.0, mr = 20.0, mt = 40.0, mb = 50.0;
    double x_lo = 0.0, x_hi = 1.0, y_lo = 0.0, y_hi = 1.0;

    double px(double x) const {
        return ml + (x - x_lo) / (x_hi - x_lo) * (width - ml - mr);
    }
    double py(double y) const {
        return height - mb - (y - y_lo) / (y_hi - y_lo) * (height - mt - mb);
    }
};

inline void svg_pad_range(double& lo, double& hi) {
    if (!(hi > lo)) {
        lo -= 0.5;
        hi += 0.5;
    }
    const double pad = 0.05 * (hi - lo);
    lo -= pad;
    hi += pad;
}

inline std::string svg_num(double v) {
    std::ostringstream os;
    os.precision(4);
    os << v;
    return os.str();
}

inline void svg_header(std::ostringstream& os, const std::string& title) {
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << SvgFrame::width
       << "\" height=\"" << SvgFrame::height << "\" viewBox=\"0 0 " << SvgFrame::width << " "
       << SvgFrame::height << "\">\n"
       << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
       << "<text x=\"" << SvgFrame::width / 2
       << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">"
       << title << "</text>\n";
}

inline void svg_axes(std::ostringstream& os, const SvgFrame& f, const std::string& xlabel,
                     const std::string& ylabel) {
    const double x0 = f.px(f.x_lo), x1 = f.px(f.x_hi);
    const double y0 = f.py(f.y_lo), y1 = f.py(f.y_hi);
    os << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x1 << "\" y2=\"" << y0
       << "\" stroke=\"black\"/>\n"
       << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x0 << "\" y2=\"" << y1
       << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << x0 << "\" y=\"" << y0 + 18
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">"
       << svg_num(f.x_lo) << "</text>\n"
       << "<text x=\"" << x1 << "\" y=\"" << y0 + 18
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">"
       << svg_num(f.x_hi) << "</text>\n"
       << "<text x=\"" << x0 - 6 << "\" y=\"" << y0 + 4
       << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << svg_num(f.y_lo)
       << "</text>\n"
       << "<text x=\"" << x0 - 6 << "\" y=\"" << y1 + 4
       << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << svg_num(f.y_hi)
       << "</text>\n";
    os << "<text x=\"" << (x0 + x1) / 2 << "\" y=\"" << SvgFrame::height - 12
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">" << xlabel
       << "</text>\n"
       << "<text x=\"18\" y=\"" << (y0 + y1) / 2
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" "
          "transform=\"rotate(-90 18 "
       << (y0 + y1) / 2 << ")\">" << ylabel << "</text>\n";
}

inline void svg_pairs(const std::vector<double>& a, const std::vector<double>& b,
                      std::vector<double>& xs, std::vector<double>& ys) {
    if (a.size() != b.size()) throw DimensionError("svg: unequal vector lengths");
    xs.clear();
    ys.clear();
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (!std::isfinite(a[i]) || !std::isfinite(b[i])) continue;
        xs.push_back(a[i]);
        ys.push_back(b[i]);
    }
    if (xs.empty()) throw ParameterError("svg: no finite points to plot");
}

} // namespace detail

// Scatter of paired values with the identity line.
inline std::string svg_scatter(const std::vector<double>& ref, const std::vector<double>& pred,
                               const std::string& title = "scatter",
                               const std::string& xlabel = "reference",
                               const std::string& ylabel = "prediction") {
    std::vector<double> xs, ys;
    detail::svg_pairs(ref, pred, xs, ys);
    detail::SvgFrame f;
    f.x_lo = *std::min_element(xs.begin(), xs.end());
    f.x_hi = *std::max_element(xs.begin(), xs.end());
    f.y_lo = *std::min_element(ys.begin(), ys.end());
    f.y_hi = *std::max_element(ys.begin(), ys.end());
    // shared range so the identity line is the diagonal
    f.x_lo = f.y_lo = std::min(f.x_lo, f.y_lo);
    f.x_hi = f.y_hi = std::max(f.x_hi, f.y_hi);
    detail::svg_pad_range(f.x_lo, f.x_hi);
    f.y_lo = f.x_lo;
    f.y_hi = f.x_hi;

    std::ostringstream os;
    detail::svg_header(os, title);
    detail::svg_axes(os, f, xlabel, ylabel);
    os << "<line x1=\"" << f.px(f.x_lo) << "\" y1=\"" << f.py(f.x_lo) << "\" x2=\""
       << f.px(f.x_hi) << "\" y2=\"" << f.py(f.x_hi)
       << "\" stroke=\"gray\" stroke-dasharray=\"6 4\"/>\n";
    for (std::size_t i = 0; i < xs.size(); ++i)
        os << "<circle cx=\"" << f.px(xs[i]) << "\" cy=\"" << f.py(ys[i])
           << "\" r=\"2\" fill=\"steelblue\" fill-opacity=\"0.5\"/>\n";
    os << "</svg>\n";
    return os.str();
}

// Mean-vs-difference plot with the mean line and 1.96-sigma limits.
inline std::string svg_bland_altman(const std::vector<double>& pred,
                                    const std::vector<double>& ref,
                                    const std::string& title = "agreement") {
    std::vector<double> p, r;
    detail::svg_pairs(pred, ref, p, r);
    std::vector<double> means(p.size()), diffs(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
        means[i] = 0.5 * (p[i] + r[i]);
        diffs[i] = p[i] - r[i];
    }
    const std::vector<std::uint8_t> all(p.size(), 1);
    const BlandAltman ba = p.size() >= 2 ? bland_altman(p, r, all)
                                         : BlandAltman{diffs[0], diffs[0], diffs[0]};

    detail::SvgFrame f;
    f.x_lo = *std::min_element(means.begin(), means.end());
    f.x_hi = *std::max_element(means.begin(), means.end());
    f.y_lo = std::min(*std::min_element(diffs.begin(), diffs.end()), ba.lower_limit);
    f.y_hi = std::max(*std::max_element(diffs.begin(), diffs.end()), ba.upper_limit);
    detail::svg_pad_range(f.x_lo, f.x_hi);
    detail::svg_pad_range(f.y_lo, f.y_hi);

    std::ostringstream os;
    detail::svg_header(os, title);
    detail::svg_axes(os, f, "mean of pair", "difference");
    for (double level : {ba.mean_difference, ba.lower_limit, ba.upper_limit}) {
        const bool is_mean = level == ba.mean_difference;
        os << "<line x1=\"" << f.px(f.x_lo) << "\" y1=\"" << f.py(level) << "\" x2=\""
           << f.px(f.x_hi) << "\" y2=\"" << f.py(level) << "\" stroke=\""
           << (is_mean ? "black" : "gray") << "\""
           << (is_mean ? "" : " stroke-dasharray=\"6 4\"") << "/>\n";
    }
    for (std::size_t i = 0; i < means.size(); ++i)
        os << "<circle cx=\"" << f.px(means[i]) << "\" cy=\"" << f.py(diffs[i])
           << "\" r=\"2\" fill=\"indianred\" fill-opacity=\"0.5\"/>\n";
    os << "</svg>\n";
    return os.str();
}

} // namespace mwnet
