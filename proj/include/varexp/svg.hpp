#pragma once

// Minimal SVG writers for scatter plots and heatmaps. Output bytes depend only
// on the inputs (fixed-precision coordinates, no timestamps).

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace varexp::svg {

struct Viewport {
    double lo_x = -2.0, hi_x = 2.0, lo_y = -2.0, hi_y = 2.0;
    int size_px = 640;

    double px(double x) const { return (x - lo_x) / (hi_x - lo_x) * size_px; }
    double py(double y) const { return (hi_y - y) / (hi_y - lo_y) * size_px; }  // y up
};

/// Bounding box of one or more point sets, padded by `pad` of the span and
/// made square.
inline Viewport fit(const std::vector<const Eigen::Matrix2Xd*>& sets, double pad = 0.05, int size_px = 640) {
    double lx = INFINITY, hx = -INFINITY, ly = INFINITY, hy = -INFINITY;
    for (const auto* s : sets) {
        if (!s || s->cols() == 0) continue;
        for (Eigen::Index j = 0; j < s->cols(); ++j) {
            const double x = (*s)(0, j), y = (*s)(1, j);
            if (!std::isfinite(x) || !std::isfinite(y)) continue;
            lx = std::min(lx, x), hx = std::max(hx, x), ly = std::min(ly, y), hy = std::max(hy, y);
        }
    }
    if (!(lx < hx)) lx = -1, hx = 1;
    if (!(ly < hy)) ly = -1, hy = 1;
    const double cx = 0.5 * (lx + hx), cy = 0.5 * (ly + hy);
    const double half = 0.5 * std::max(hx - lx, hy - ly) * (1.0 + 2.0 * pad);
    return {cx - half, cx + half, cy - half, cy + half, size_px};
}

class Document {
public:
    explicit Document(Viewport vp) : vp_(vp) {
        char buf[256];
        std::snprintf(buf, sizeof buf,
                      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%d\" height=\"%d\" viewBox=\"0 0 %d %d\">\n"
                      "<rect width=\"100%%\" height=\"100%%\" fill=\"white\"/>\n",
                      vp.size_px, vp.size_px, vp.size_px, vp.size_px);
        out_ << buf;
    }

    const Viewport& viewport() const { return vp_; }

    void points(const Eigen::Matrix2Xd& pts, const std::string& color, double radius = 0.8, double opacity = 1.0) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "<g fill=\"%s\" fill-opacity=\"%.3f\">\n", color.c_str(), opacity);
        out_ << buf;
        for (Eigen::Index j = 0; j < pts.cols(); ++j) {
            if (!std::isfinite(pts(0, j)) || !std::isfinite(pts(1, j))) continue;
            std::snprintf(buf, sizeof buf, "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"%.2f\"/>\n", vp_.px(pts(0, j)),
                          vp_.py(pts(1, j)), radius);
            out_ << buf;
        }
        out_ << "</g>\n";
    }

    /// Points colored individually, e.g. by a scalar through `ramp`.
    void colored_points(const Eigen::Matrix2Xd& pts, const std::vector<std::string>& colors, double radius = 1.0) {
        if (colors.size() != static_cast<std::size_t>(pts.cols()))
            throw std::invalid_argument("colored_points: one color per point");
        char buf[160];
        for (Eigen::Index j = 0; j < pts.cols(); ++j) {
            if (!std::isfinite(pts(0, j)) || !std::isfinite(pts(1, j))) continue;
            std::snprintf(buf, sizeof buf, "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"%.2f\" fill=\"%s\"/>\n",
                          vp_.px(pts(0, j)), vp_.py(pts(1, j)), radius, colors[j].c_str());
            out_ << buf;
        }
    }

    /// values(i, j): cell i along x, j along y, over the viewport.
    void heatmap(const Eigen::ArrayXXd& values, const std::vector<std::string>& colors) {
        const auto nx = values.rows(), ny = values.cols();
        if (colors.size() != static_cast<std::size_t>(nx * ny)) throw std::invalid_argument("heatmap: color count");
        const double w = static_cast<double>(vp_.size_px) / nx, h = static_cast<double>(vp_.size_px) / ny;
        char buf[200];
        for (Eigen::Index i = 0; i < nx; ++i)
            for (Eigen::Index j = 0; j < ny; ++j) {
                std::snprintf(buf, sizeof buf,
                              "<rect x=\"%.2f\" y=\"%.2f\" width=\"%.2f\" height=\"%.2f\" fill=\"%s\"/>\n", i * w,
                              (ny - 1 - j) * h, w + 0.05, h + 0.05, colors[i * ny + j].c_str());
                out_ << buf;
            }
    }

    void text(double x_px, double y_px, const std::string& s, int size = 14) {
        char buf[96];
        std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\" font-family=\"sans-serif\" font-size=\"%d\">",
                      x_px, y_px, size);
        out_ << buf << escape(s) << "</text>\n";
    }

    std::string str() const { return out_.str() + "</svg>\n"; }

    void save(const std::string& path) const {
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error("cannot write " + path);
        os << str();
    }

private:
    static std::string escape(const std::string& s) {
        std::string r;
        for (char c : s) {
            if (c == '<') r += "&lt;";
            else if (c == '>') r += "&gt;";
            else if (c == '&') r += "&amp;";
            else r += c;
        }
        return r;
    }

    Viewport vp_;
    std::ostringstream out_;
};

/// Blue-to-yellow ramp for u in [0, 1].
inline std::string ramp(double u) {
    u = std::clamp(std::isfinite(u) ? u : 0.0, 0.0, 1.0);
    const int r = static_cast<int>(std::lround(68 + u * (253 - 68)));
    const int g = static_cast<int>(std::lround(1 + u * (231 - 1)));
    const int b = static_cast<int>(std::lround(84 + u * (37 - 84)));
    char buf[8];
    std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
    return buf;
}

/// Map values to ramp colors on a log10 scale between their finite min and max.
inline std::vector<std::string> log_ramp(const Eigen::ArrayXd& v) {
    double lo = INFINITY, hi = -INFINITY;
    for (double x : v)
        if (x > 0 && std::isfinite(x)) lo = std::min(lo, std::log10(x)), hi = std::max(hi, std::log10(x));
    std::vector<std::string> out;
    out.reserve(v.size());
    for (double x : v) {
        const double l = x > 0 && std::isfinite(x) ? std::log10(x) : lo;
        out.push_back(ramp(hi > lo ? (l - lo) / (hi - lo) : 0.5));
    }
    return out;
}

/// Oracle samples in a light tone under generated points in a dark one.
inline Document overlay(const Eigen::Matrix2Xd& oracle, const Eigen::Matrix2Xd& generated, const std::string& title) {
    Document d(Viewport{-2.0, 2.0, -2.0, 2.0, 640});
    d.points(oracle, "#b8c8e0", 0.7, 0.6);
    d.points(generated, "#1a1a40", 0.7, 0.8);
    d.text(10, 20, title);
    return d;
}

}  // namespace varexp::svg
