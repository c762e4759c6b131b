#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "diffrecon/core.hpp"
#include "diffrecon/io.hpp"

namespace diffrecon {

// Minimal raster line-plot export for human inspection. One grayscale PNG,
// axes at the margins, one polyline per series (darker shades for later
// series). Not a plotting library; just enough to see curve shapes.
class LinePlot {
public:
    LinePlot(int width = 480, int height = 360) : w_(width), h_(height) {}

    void add_series(std::vector<double> xs, std::vector<double> ys) {
        if (xs.size() != ys.size() || xs.empty())
            throw ConfigError("LinePlot: series must be non-empty and aligned");
        series_.push_back({std::move(xs), std::move(ys)});
    }

    void save(const std::string& path) const {
        if (series_.empty()) throw ConfigError("LinePlot: nothing to plot");
        double x0 = series_[0].xs[0], x1 = x0, y0 = series_[0].ys[0], y1 = y0;
        for (const auto& s : series_)
            for (size_t i = 0; i < s.xs.size(); ++i) {
                x0 = std::min(x0, s.xs[i]);
                x1 = std::max(x1, s.xs[i]);
                y0 = std::min(y0, s.ys[i]);
                y1 = std::max(y1, s.ys[i]);
            }
        if (x1 == x0) x1 = x0 + 1;
        if (y1 == y0) y1 = y0 + 1;

        std::vector<uint8_t> px(static_cast<size_t>(w_) * h_, 255);
        const int ml = 40, mb = 30, mt = 10, mr = 10;
        auto put = [&](int x, int y, uint8_t v) {
            if (x >= 0 && y >= 0 && x < w_ && y < h_) px[static_cast<size_t>(y) * w_ + x] = v;
        };
        for (int x = ml; x < w_ - mr; ++x) put(x, h_ - mb, 80);
        for (int y = mt; y < h_ - mb; ++y) put(ml, y, 80);

        auto to_px = [&](double x, double y, int& ox, int& oy) {
            ox = ml + static_cast<int>((x - x0) / (x1 - x0) * (w_ - ml - mr - 1));
            oy = h_ - mb - 1 - static_cast<int>((y - y0) / (y1 - y0) * (h_ - mt - mb - 1));
        };
        for (size_t si = 0; si < series_.size(); ++si) {
            const uint8_t shade = static_cast<uint8_t>(series_.size() > 1
                                                           ? 160 * si / (series_.size() - 1)
                                                           : 0);
            const auto& s = series_[si];
            int px0, py0;
            to_px(s.xs[0], s.ys[0], px0, py0);
            for (size_t i = 1; i < s.xs.size(); ++i) {
                int px1, py1;
                to_px(s.xs[i], s.ys[i], px1, py1);
                draw_line(put, px0, py0, px1, py1, shade);
                px0 = px1;
                py0 = py1;
            }
            for (size_t i = 0; i < s.xs.size(); ++i) {
                int mx, my;
                to_px(s.xs[i], s.ys[i], mx, my);
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) put(mx + dx, my + dy, shade);
            }
        }
        save_png_gray(px, w_, h_, path);
    }

private:
    struct Series {
        std::vector<double> xs, ys;
    };

    template <typename Put>
    static void draw_line(Put&& put, int x0, int y0, int x1, int y1, uint8_t shade) {
        const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
        const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
        int err = dx + dy;
        while (true) {
            put(x0, y0, shade);
            if (x0 == x1 && y0 == y1) break;
            const int e2 = 2 * err;
            if (e2 >= dy) {
                err += dy;
                x0 += sx;
            }
            if (e2 <= dx) {
                err += dx;
                y0 += sy;
            }
        }
    }

    int w_, h_;
    std::vector<Series> series_;
};

}  // namespace diffrecon
