// Copyright (c) 2026 fbev contributors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <string>

#include "fbev/autodiff.hpp"

namespace fbev {

struct AdamWConfig {
    double lr = 3e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    double epoch_decay = 0.99;  // multiplicative lr decay per epoch
};

/// AdamW with decoupled weight decay: theta -= lr*(mhat/(sqrt(vhat)+eps) +
/// wd*theta). Zero gradients therefore shrink parameters by lr*wd exactly.
class AdamW {
  public:
    explicit AdamW(AdamWConfig cfg = {});

    void step(ParamStore& params);
    void end_epoch() { lr_scale_ *= cfg_.epoch_decay; }

    double current_lr() const { return cfg_.lr * lr_scale_; }
    std::size_t step_count() const { return step_; }
    const AdamWConfig& config() const { return cfg_; }

  private:
    AdamWConfig cfg_;
    std::size_t step_ = 0;
    double lr_scale_ = 1.0;
    std::map<std::string, Tensor> m_, v_;
};

}  // namespace fbev
