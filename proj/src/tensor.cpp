// Copyright (c) 2026 fbev contributors.
// SPDX-License-Identifier: Apache-2.0

#include "fbev/tensor.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace fbev {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

}  // namespace

std::size_t shape_product(const std::vector<std::size_t>& shape)
{
    std::size_t n = 1;
    for (std::size_t e : shape)
        n *= e;
    return n;
}

Tensor::Tensor(std::vector<std::size_t> shape, double fill, Dtype dtype)
    : shape_(std::move(shape)), data_(shape_product(shape_), fill), dtype_(dtype)
{
}

Tensor Tensor::scalar(double v)
{
    Tensor t;
    t.data_.assign(1, v);
    return t;
}

Tensor Tensor::from_values(std::vector<std::size_t> shape, std::vector<double> values, Dtype dtype)
{
    if (shape_product(shape) != values.size())
        fail("Tensor::from_values: element count does not match shape");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(values);
    t.dtype_ = dtype;
    return t;
}

bool Tensor::all_finite() const
{
    for (double v : data_)
        if (!std::isfinite(v))
            return false;
    return true;
}

void Tensor::fill(double v)
{
    for (double& x : data_)
        x = v;
}

std::string Tensor::shape_str() const
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape_.size(); ++i)
        os << (i ? "," : "") << shape_[i];
    os << ']';
    return os.str();
}

std::size_t Tensor::flat(std::initializer_list<std::size_t> idx) const
{
    std::size_t off = 0;
    std::size_t axis = 0;
    for (std::size_t i : idx)
    {
        off = off * shape_[axis] + i;
        ++axis;
    }
    return off;
}

namespace {

void put_u64_le(std::ostream& os, std::uint64_t v)
{
    unsigned char b[8];
    for (int i = 0; i < 8; ++i)
        b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64_le(const unsigned char* b)
{
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i)
        v = (v << 8) | b[i];
    return v;
}

[[noreturn]] void io_fail(const std::filesystem::path& path, std::size_t offset, const std::string& what)
{
    fail("FBT1 error in '" + path.string() + "' at byte " + std::to_string(offset) + ": " + what);
}

}  // namespace

void write_fbt(const Tensor& t, const std::filesystem::path& path)
{
    std::ofstream os(path, std::ios::binary);
    if (!os)
        fail("cannot open '" + path.string() + "' for writing");
    os.write("FBT1", 4);
    const unsigned char dtype = static_cast<unsigned char>(t.dtype());
    const unsigned char ndim = static_cast<unsigned char>(t.rank());
    os.put(static_cast<char>(dtype));
    os.put(static_cast<char>(ndim));
    for (std::size_t e : t.shape())
        put_u64_le(os, e);
    if (t.dtype() == Dtype::Real64)
    {
        static_assert(sizeof(double) == 8);
        for (std::size_t i = 0; i < t.size(); ++i)
        {
            double v = t[i];
            unsigned char b[8];
            std::memcpy(b, &v, 8);
            os.write(reinterpret_cast<const char*>(b), 8);
        }
    }
    else
    {
        static_assert(sizeof(float) == 4);
        for (std::size_t i = 0; i < t.size(); ++i)
        {
            float v = static_cast<float>(t[i]);
            unsigned char b[4];
            std::memcpy(b, &v, 4);
            os.write(reinterpret_cast<const char*>(b), 4);
        }
    }
    if (!os)
        fail("short write to '" + path.string() + "'");
}

Tensor read_fbt(const std::filesystem::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is)
        fail("cannot open '" + path.string() + "' for reading");
    unsigned char header[6];
    if (!is.read(reinterpret_cast<char*>(header), 6))
        io_fail(path, 0, "truncated header");
    if (std::memcmp(header, "FBT1", 4) != 0)
        io_fail(path, 0, "bad magic");
    if (header[4] > 1)
        io_fail(path, 4, "unknown dtype code " + std::to_string(header[4]));
    const Dtype dtype = static_cast<Dtype>(header[4]);
    const std::size_t ndim = header[5];

    std::vector<std::size_t> shape(ndim);
    for (std::size_t i = 0; i < ndim; ++i)
    {
        unsigned char b[8];
        if (!is.read(reinterpret_cast<char*>(b), 8))
            io_fail(path, 6 + 8 * i, "truncated extent");
        shape[i] = static_cast<std::size_t>(get_u64_le(b));
    }
    const std::size_t count = shape_product(shape);
    const std::size_t payload_off = 6 + 8 * ndim;
    std::vector<double> values(count);
    if (dtype == Dtype::Real64)
    {
        for (std::size_t i = 0; i < count; ++i)
        {
            unsigned char b[8];
            if (!is.read(reinterpret_cast<char*>(b), 8))
                io_fail(path, payload_off + 8 * i, "truncated payload");
            double v;
            std::memcpy(&v, b, 8);
            values[i] = v;
        }
    }
    else
    {
        for (std::size_t i = 0; i < count; ++i)
        {
            unsigned char b[4];
            if (!is.read(reinterpret_cast<char*>(b), 4))
                io_fail(path, payload_off + 4 * i, "truncated payload");
            float v;
            std::memcpy(&v, b, 4);
            values[i] = v;
        }
    }
    char extra;
    if (is.read(&extra, 1))
        io_fail(path, payload_off + count * (dtype == Dtype::Real64 ? 8 : 4), "trailing bytes");
    return Tensor::from_values(std::move(shape), std::move(values), dtype);
}

}  // namespace fbev
