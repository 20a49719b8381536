#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "rfd/models/condition.hpp"
#include "rfd/ndcore/error.hpp"
#include "rfd/ndcore/tensor.hpp"

namespace rfd::io {

inline const char* palette(std::size_t i) {
    static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                   "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
    return colors[i % 10];
}

inline std::string fmt(double v) {
    std::ostringstream s;
    s.precision(4);
    s << std::fixed << v;
    return s.str();
}

/// Scatter of 2D samples colored by condition, with mode centers as crosses.
/// Output depends only on the inputs, so repeated calls are byte-identical.
inline std::string scatter_svg(const Tensor& x, std::span<const Condition> c, const Tensor& centers,
                               const std::string& title, std::size_t max_points = 4000) {
    require(x.rank() == 2 && x.cols() == 2, ErrorCode::shape_mismatch, "scatter_svg expects [n, 2] samples");
    require(c.empty() || c.size() == x.rows(), ErrorCode::shape_mismatch, "scatter_svg: condition count");
    const double size = 480, pad = 20;
    double lim = 1.0;
    for (double v : x.storage())
        if (std::isfinite(v)) lim = std::max(lim, std::abs(v));
    for (double v : centers.storage()) lim = std::max(lim, std::abs(v));
    lim *= 1.05;
    auto px = [&](double v) { return pad + (v + lim) / (2 * lim) * (size - 2 * pad); };
    auto py = [&](double v) { return size - pad - (v + lim) / (2 * lim) * (size - 2 * pad); };

    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\"" << size + 20 << "\">\n";
    s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    s << "<text x=\"" << pad << "\" y=\"" << size + 12 << "\" font-size=\"12\" font-family=\"sans-serif\">" << title
      << "</text>\n";
    const std::size_t stride = std::max<std::size_t>(1, x.rows() / std::max<std::size_t>(1, max_points));
    for (std::size_t r = 0; r < x.rows(); r += stride) {
        if (!std::isfinite(x.at(r, 0)) || !std::isfinite(x.at(r, 1))) continue;
        const char* col = c.empty() || c[r].is_null() ? "#333333" : palette(c[r].class_id());
        s << "<circle cx=\"" << fmt(px(x.at(r, 0))) << "\" cy=\"" << fmt(py(x.at(r, 1))) << "\" r=\"1.2\" fill=\"" << col
          << "\" fill-opacity=\"0.5\"/>\n";
    }
    for (std::size_t k = 0; k < centers.rows(); ++k) {
        const double cx = px(centers.at(k, 0)), cy = py(centers.at(k, 1));
        s << "<path d=\"M" << fmt(cx - 5) << " " << fmt(cy) << "h10M" << fmt(cx) << " " << fmt(cy - 5)
          << "v10\" stroke=\"black\" stroke-width=\"1.5\"/>\n";
    }
    s << "</svg>\n";
    return s.str();
}

/// Horizontal bars, one per (label, value). Values must be finite and >= 0.
inline std::string bar_svg(std::span<const std::pair<std::string, double>> bars, const std::string& title) {
    require(!bars.empty(), ErrorCode::invalid_argument, "bar_svg: no bars");
    double vmax = 0;
    for (const auto& [label, v] : bars) {
        require(std::isfinite(v) && v >= 0, ErrorCode::invalid_argument, "bar_svg: bad value for " + label);
        vmax = std::max(vmax, v);
    }
    if (vmax == 0) vmax = 1;
    const double label_w = 170, bar_w = 300, row_h = 22, top = 28;
    const double height = top + row_h * static_cast<double>(bars.size()) + 10;
    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << label_w + bar_w + 110 << "\" height=\"" << height
      << "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    s << "<text x=\"8\" y=\"18\" font-size=\"13\" font-family=\"sans-serif\">" << title << "</text>\n";
    for (std::size_t i = 0; i < bars.size(); ++i) {
        const double y = top + row_h * static_cast<double>(i);
        const double w = bar_w * bars[i].second / vmax;
        s << "<text x=\"8\" y=\"" << fmt(y + 14) << "\" font-size=\"12\" font-family=\"sans-serif\">" << bars[i].first
          << "</text>\n";
        s << "<rect x=\"" << label_w << "\" y=\"" << fmt(y + 3) << "\" width=\"" << fmt(w) << "\" height=\""
          << row_h - 6 << "\" fill=\"" << palette(i) << "\"/>\n";
        std::ostringstream v;
        v.precision(3);
        v << std::scientific << bars[i].second;
        s << "<text x=\"" << fmt(label_w + w + 4) << "\" y=\"" << fmt(y + 14)
          << "\" font-size=\"11\" font-family=\"sans-serif\">" << v.str() << "</text>\n";
    }
    s << "</svg>\n";
    return s.str();
}

inline void save_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorCode::io, "cannot write " + path.string());
    out << text;
    require(static_cast<bool>(out), ErrorCode::io, "write failed for " + path.string());
}

} // namespace rfd::io
