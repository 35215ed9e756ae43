#pragma once

// Spectrogram export (CSV, raw f32, PNG heat map) and a small ECDF line chart.

#include "terfs/binary_io.hpp"
#include "terfs/metrics.hpp"

#include <png.h>

#include <cstdio>
#include <fstream>

namespace terfs {

struct RgbImage {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

    RgbImage(int w, int h, std::uint8_t fill = 255) : width(w), height(h), rgb(3 * w * h, fill) {}

    void set(int x, int y, std::array<std::uint8_t, 3> c) {
        if (x < 0 || y < 0 || x >= width || y >= height) return;
        auto* p = &rgb[3 * (static_cast<std::size_t>(y) * width + x)];
        p[0] = c[0], p[1] = c[1], p[2] = c[2];
    }
};

inline void write_png(const std::string& path, const RgbImage& img) {
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw Error("cannot open " + path + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw Error("PNG encoding failed: " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < img.height; ++y)
        png_write_row(png, const_cast<png_bytep>(&img.rgb[3 * static_cast<std::size_t>(y) * img.width]));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

/// Piecewise-linear dark-blue to yellow ramp, u in [0, 1].
inline std::array<std::uint8_t, 3> heat_color(double u) {
    static constexpr std::array<std::array<double, 3>, 5> stops = {{
        {0.05, 0.03, 0.25}, {0.25, 0.15, 0.55}, {0.70, 0.20, 0.45}, {0.95, 0.55, 0.15}, {0.99, 0.95, 0.55}}};
    u = std::clamp(u, 0.0, 1.0) * (stops.size() - 1);
    const std::size_t i = std::min<std::size_t>(static_cast<std::size_t>(u), stops.size() - 2);
    const double f = u - static_cast<double>(i);
    std::array<std::uint8_t, 3> c{};
    for (int k = 0; k < 3; ++k)
        c[k] = static_cast<std::uint8_t>(std::lround(255.0 * (stops[i][k] + f * (stops[i + 1][k] - stops[i][k]))));
    return c;
}

/// Heat map with elevation increasing upwards, `zoom` pixels per bin.
inline void write_spectrogram_png(const std::string& path, const AngularGrid& grid, std::span<const double> dbm,
                                  int zoom = 2) {
    if (dbm.size() != grid.size()) throw Error("spectrogram size does not match grid");
    RgbImage img(grid.W * zoom, grid.H * zoom);
    for (int r = 0; r < grid.H; ++r)
        for (int c = 0; c < grid.W; ++c) {
            const auto col = heat_color(dbm_to_unit(dbm[static_cast<std::size_t>(r) * grid.W + c]));
            for (int dy = 0; dy < zoom; ++dy)
                for (int dx = 0; dx < zoom; ++dx) img.set(c * zoom + dx, (grid.H - 1 - r) * zoom + dy, col);
        }
    write_png(path, img);
}

/// H lines of W comma-separated dBm values, row 0 (lowest elevation) first.
inline void write_spectrogram_csv(std::ostream& out, const AngularGrid& grid, std::span<const double> dbm) {
    out.precision(10);
    for (int r = 0; r < grid.H; ++r) {
        for (int c = 0; c < grid.W; ++c) {
            if (c) out << ',';
            out << dbm[static_cast<std::size_t>(r) * grid.W + c];
        }
        out << '\n';
    }
}

/// Row-major little-endian f32 values.
inline void write_spectrogram_bin(const std::string& path, std::span<const double> dbm) {
    ByteWriter w;
    for (double v : dbm) w.f32(v);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open " + path + " for writing");
    f.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
}

/// Step plot of one or more ECDFs on a shared axis starting at zero.
inline void write_ecdf_png(const std::string& path, const std::vector<std::vector<EcdfPoint>>& curves,
                           int width = 480, int height = 320) {
    RgbImage img(width, height);
    const int m = 24;  // margin
    double x_max = 0.0;
    for (const auto& c : curves)
        for (const auto& p : c) x_max = std::max(x_max, p.value);
    if (!(x_max > 0.0)) x_max = 1.0;
    const std::array<std::uint8_t, 3> axis{0, 0, 0}, grid_c{220, 220, 220};
    static constexpr std::array<std::array<std::uint8_t, 3>, 4> palette = {
        {{31, 119, 180}, {214, 39, 40}, {44, 160, 44}, {148, 103, 189}}};
    auto px = [&](double x) { return m + static_cast<int>(std::lround(x / x_max * (width - 2 * m))); };
    auto py = [&](double y) { return height - m - static_cast<int>(std::lround(y * (height - 2 * m))); };
    for (int k = 1; k <= 4; ++k)
        for (int x = m; x <= width - m; ++x) img.set(x, py(k / 4.0), grid_c);
    for (int x = m; x <= width - m; ++x) img.set(x, height - m, axis);
    for (int y = m; y <= height - m; ++y) img.set(m, y, axis);
    auto hline = [&](int x0, int x1, int y, auto c) {
        for (int x = std::min(x0, x1); x <= std::max(x0, x1); ++x) img.set(x, y, c), img.set(x, y - 1, c);
    };
    auto vline = [&](int x, int y0, int y1, auto c) {
        for (int y = std::min(y0, y1); y <= std::max(y0, y1); ++y) img.set(x, y, c), img.set(x + 1, y, c);
    };
    for (std::size_t i = 0; i < curves.size(); ++i) {
        const auto c = palette[i % palette.size()];
        double prev_x = 0.0, prev_y = 0.0;
        for (const auto& p : curves[i]) {
            hline(px(prev_x), px(p.value), py(prev_y), c);
            vline(px(p.value), py(prev_y), py(p.cum_fraction), c);
            prev_x = p.value;
            prev_y = p.cum_fraction;
        }
        hline(px(prev_x), width - m, py(prev_y), c);
    }
    write_png(path, img);
}

}  // namespace terfs
