// Copyright (c) 2026 fbev contributors.
// SPDX-License-Identifier: Apache-2.0

#include "fbev/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace fbev {

const std::array<std::array<double, 3>, kNumClasses>& class_palette()
{
    static const std::array<std::array<double, 3>, kNumClasses> palette = {{
        {0.0, 0.0, 0.0},            // void
        {128 / 255.0, 64 / 255.0, 128 / 255.0},   // road
        {244 / 255.0, 35 / 255.0, 232 / 255.0},   // sidewalk
        {107 / 255.0, 142 / 255.0, 35 / 255.0},   // vegetation
        {0.0, 0.0, 142 / 255.0},    // vehicle
        {1.0, 0.0, 0.0},            // ego
    }};
    return palette;
}

namespace {

unsigned char to_byte(double v)
{
    const double c = std::clamp(std::round(v), 0.0, 255.0);
    return static_cast<unsigned char>(c);
}

std::ofstream open_binary(const std::filesystem::path& path)
{
    std::ofstream os(path, std::ios::binary);
    if (!os)
        throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    return os;
}

}  // namespace

void write_pgm(const Tensor& gray, const std::filesystem::path& path)
{
    if (gray.rank() != 2)
        throw std::invalid_argument("write_pgm expects [H,W], got " + gray.shape_str());
    auto os = open_binary(path);
    os << "P5\n" << gray.extent(1) << ' ' << gray.extent(0) << "\n255\n";
    for (std::size_t i = 0; i < gray.size(); ++i)
        os.put(static_cast<char>(to_byte(gray[i])));
}

void write_pgm_scaled(const Tensor& values, const std::filesystem::path& path, double lo,
                      double hi)
{
    if (values.rank() != 2)
        throw std::invalid_argument("write_pgm_scaled expects [H,W], got " + values.shape_str());
    Tensor bytes(values.shape());
    const double span = hi > lo ? hi - lo : 1.0;
    for (std::size_t i = 0; i < values.size(); ++i)
    {
        const double v = values[i];
        if (!std::isfinite(v))
            bytes[i] = 0.0;  // sentinel for NaN pixels
        else
            bytes[i] = 1.0 + 254.0 * std::clamp((v - lo) / span, 0.0, 1.0);
    }
    write_pgm(bytes, path);
}

void write_ppm(const Tensor& rgb, const std::filesystem::path& path)
{
    if (rgb.rank() != 3 || rgb.extent(0) != 3)
        throw std::invalid_argument("write_ppm expects [3,H,W], got " + rgb.shape_str());
    const std::size_t h = rgb.extent(1), w = rgb.extent(2);
    auto os = open_binary(path);
    os << "P6\n" << w << ' ' << h << "\n255\n";
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < 3; ++c)
                os.put(static_cast<char>(to_byte(rgb[(c * h + y) * w + x] * 255.0)));
}

void write_class_ppm(const Tensor& classes, const std::filesystem::path& path)
{
    if (classes.rank() != 2)
        throw std::invalid_argument("write_class_ppm expects [H,W], got " + classes.shape_str());
    const auto& palette = class_palette();
    const std::size_t h = classes.extent(0), w = classes.extent(1);
    auto os = open_binary(path);
    os << "P6\n" << w << ' ' << h << "\n255\n";
    for (std::size_t i = 0; i < classes.size(); ++i)
    {
        const auto cls = static_cast<std::size_t>(std::clamp(classes[i], 0.0, 5.0));
        for (std::size_t c = 0; c < 3; ++c)
            os.put(static_cast<char>(to_byte(palette[cls][c] * 255.0)));
    }
}

}  // namespace fbev
