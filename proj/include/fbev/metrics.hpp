// Copyright (c) 2026 fbev contributors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "fbev/image_io.hpp"
#include "fbev/tensor.hpp"

namespace fbev {

/// Pixel-pair counts over (truth, prediction). Pixels whose truth is the
/// void class are not scored, matching the evaluation protocol.
class ConfusionMatrix {
  public:
    explicit ConfusionMatrix(std::size_t classes = kNumClasses, int void_class = 0);

    void add(const Tensor& truth, const Tensor& prediction);
    void add_pair(std::size_t truth, std::size_t prediction);

    std::uint64_t at(std::size_t truth, std::size_t prediction) const;
    std::uint64_t total() const;
    std::size_t classes() const { return classes_; }
    int void_class() const { return void_class_; }

  private:
    std::size_t classes_;
    int void_class_;
    std::vector<std::uint64_t> counts_;
};

/// TP/(TP+FP+FN) for one class; NaN when the denominator is empty (class
/// absent from both truth and prediction).
double iou_per_class(const ConfusionMatrix& cm, std::size_t cls);

/// Mean of the valid (non-NaN) per-class IoUs over the non-void classes.
/// Throws when no class is valid.
double miou(const ConfusionMatrix& cm);

std::vector<double> per_class_ious(const ConfusionMatrix& cm);

}  // namespace fbev
