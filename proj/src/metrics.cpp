// Copyright (c) 2026 fbev contributors.
// SPDX-License-Identifier: Apache-2.0

#include "fbev/metrics.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace fbev {

ConfusionMatrix::ConfusionMatrix(std::size_t classes, int void_class)
    : classes_(classes), void_class_(void_class), counts_(classes * classes, 0)
{
}

void ConfusionMatrix::add(const Tensor& truth, const Tensor& prediction)
{
    if (!truth.same_shape(prediction))
        throw std::invalid_argument("ConfusionMatrix::add: shape mismatch");
    for (std::size_t i = 0; i < truth.size(); ++i)
        add_pair(static_cast<std::size_t>(truth[i]), static_cast<std::size_t>(prediction[i]));
}

void ConfusionMatrix::add_pair(std::size_t truth, std::size_t prediction)
{
    if (truth >= classes_ || prediction >= classes_)
        throw std::invalid_argument("ConfusionMatrix: class index out of range");
    if (static_cast<int>(truth) == void_class_)
        return;  // void truth is excluded from evaluation
    ++counts_[truth * classes_ + prediction];
}

std::uint64_t ConfusionMatrix::at(std::size_t truth, std::size_t prediction) const
{
    return counts_[truth * classes_ + prediction];
}

std::uint64_t ConfusionMatrix::total() const
{
    std::uint64_t n = 0;
    for (std::uint64_t c : counts_)
        n += c;
    return n;
}

double iou_per_class(const ConfusionMatrix& cm, std::size_t cls)
{
    if (static_cast<int>(cls) == cm.void_class())
        throw std::invalid_argument("iou_per_class: the void class is not scored");
    std::uint64_t tp = cm.at(cls, cls);
    std::uint64_t fp = 0, fn = 0;
    for (std::size_t other = 0; other < cm.classes(); ++other)
    {
        if (other == cls)
            continue;
        fp += cm.at(other, cls);
        fn += cm.at(cls, other);
    }
    const std::uint64_t denom = tp + fp + fn;
    if (denom == 0)
        return std::numeric_limits<double>::quiet_NaN();
    return static_cast<double>(tp) / static_cast<double>(denom);
}

std::vector<double> per_class_ious(const ConfusionMatrix& cm)
{
    std::vector<double> out;
    for (std::size_t cls = 0; cls < cm.classes(); ++cls)
    {
        if (static_cast<int>(cls) == cm.void_class())
            continue;
        out.push_back(iou_per_class(cm, cls));
    }
    return out;
}

double miou(const ConfusionMatrix& cm)
{
    double sum = 0.0;
    std::size_t valid = 0;
    for (double v : per_class_ious(cm))
        if (!std::isnan(v))
        {
            sum += v;
            ++valid;
        }
    if (valid == 0)
        throw std::runtime_error("miou: no valid classes to average");
    return sum / static_cast<double>(valid);
}

}  // namespace fbev
