// Copyright (c) 2026 fbev contributors.
// SPDX-License-Identifier: Apache-2.0

#include "fbev/optim.hpp"

#include <cmath>

namespace fbev {

AdamW::AdamW(AdamWConfig cfg) : cfg_(cfg) {}

void AdamW::step(ParamStore& params)
{
    ++step_;
    const double lr = current_lr();
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (const std::string& name : params.names())
    {
        Tensor& theta = params.value(name);
        const Tensor& g = params.grad(name);
        Tensor& m = m_.try_emplace(name, Tensor(theta.shape())).first->second;
        Tensor& v = v_.try_emplace(name, Tensor(theta.shape())).first->second;
        for (std::size_t i = 0; i < theta.size(); ++i)
        {
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            theta[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * theta[i]);
        }
    }
}

}  // namespace fbev
