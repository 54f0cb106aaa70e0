// Copyright (c) 2026 fbev contributors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <string>
#include <vector>

namespace fbev {

enum class Dtype : std::uint8_t { Real32 = 0, Real64 = 1 };

/// Dense row-major n-dimensional real array. Values are held in double
/// precision regardless of dtype; the dtype tag controls on-disk width.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0, Dtype dtype = Dtype::Real64);

    static Tensor scalar(double v);
    static Tensor from_values(std::vector<std::size_t> shape, std::vector<double> values,
                              Dtype dtype = Dtype::Real64);

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t extent(std::size_t axis) const { return shape_[axis]; }
    std::size_t size() const { return data_.size(); }
    Dtype dtype() const { return dtype_; }
    void set_dtype(Dtype dt) { dtype_ = dt; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at(std::initializer_list<std::size_t> idx) { return data_[flat(idx)]; }
    double at(std::initializer_list<std::size_t> idx) const { return data_[flat(idx)]; }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const;
    void fill(double v);

    std::string shape_str() const;

  private:
    std::size_t flat(std::initializer_list<std::size_t> idx) const;

    std::vector<std::size_t> shape_;
    std::vector<double> data_;
    Dtype dtype_ = Dtype::Real64;
};

std::size_t shape_product(const std::vector<std::size_t>& shape);

// "FBT1" tensor file: magic 'F','B','T','1', u8 dtype code (0=real32,
// 1=real64), u8 ndim, ndim little-endian u64 extents, row-major
// little-endian payload.
void write_fbt(const Tensor& t, const std::filesystem::path& path);
Tensor read_fbt(const std::filesystem::path& path);

}  // namespace fbev
