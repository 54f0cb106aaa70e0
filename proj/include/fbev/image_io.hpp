// Copyright (c) 2026 fbev contributors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <filesystem>

#include "fbev/tensor.hpp"

namespace fbev {

inline constexpr std::size_t kNumClasses = 6;

/// Class palette (0..1 RGB): void, road, sidewalk, vegetation, vehicle, ego.
const std::array<std::array<double, 3>, kNumClasses>& class_palette();

/// Binary 8-bit PGM (P5) of raw byte values from a [H,W] tensor; values are
/// clamped to [0,255] and rounded.
void write_pgm(const Tensor& gray, const std::filesystem::path& path);

/// PGM with affine scaling: finite values map linearly from [lo,hi] to
/// [1,255]; non-finite values map to 0.
void write_pgm_scaled(const Tensor& values, const std::filesystem::path& path, double lo,
                      double hi);

/// Binary PPM (P6) from a [3,H,W] tensor of 0..1 reals.
void write_ppm(const Tensor& rgb, const std::filesystem::path& path);

/// PPM of a [H,W] class-index map rendered through the palette.
void write_class_ppm(const Tensor& classes, const std::filesystem::path& path);

}  // namespace fbev
