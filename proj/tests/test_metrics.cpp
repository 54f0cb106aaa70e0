// Copyright (c) 2026 fbev contributors.
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "fbev/metrics.hpp"
#include "fbev/rng.hpp"
#include "fbev/synth.hpp"

using namespace fbev;

namespace {

/// Brute-force pixel-set oracle: explicit intersection / union over pixel
/// index sets, independent of the confusion-matrix bookkeeping.
double set_oracle_miou(const Tensor& truth, const Tensor& pred, bool* any_valid = nullptr)
{
    double sum = 0.0;
    std::size_t valid = 0;
    for (std::size_t cls = 1; cls < kNumClasses; ++cls)
    {
        std::set<std::size_t> t_set, p_set;
        for (std::size_t i = 0; i < truth.size(); ++i)
        {
            if (truth[i] == kVoid)
                continue;  // void truth pixels are never scored
            if (truth[i] == static_cast<double>(cls))
                t_set.insert(i);
            if (pred[i] == static_cast<double>(cls))
                p_set.insert(i);
        }
        std::size_t inter = 0;
        for (std::size_t i : t_set)
            inter += p_set.count(i);
        const std::size_t uni = t_set.size() + p_set.size() - inter;
        if (uni == 0)
            continue;
        sum += static_cast<double>(inter) / static_cast<double>(uni);
        ++valid;
    }
    if (any_valid)
        *any_valid = valid > 0;
    return valid ? sum / static_cast<double>(valid) : 0.0;
}

}  // namespace

TEST_CASE("iou closed forms")
{
    // perfect prediction
    ConfusionMatrix cm;
    Tensor t({4, 4});
    for (std::size_t i = 0; i < 16; ++i)
        t[i] = static_cast<double>(1 + i % 5);
    cm.add(t, t);
    for (std::size_t cls = 1; cls < kNumClasses; ++cls)
        CHECK(iou_per_class(cm, cls) == 1.0);
    CHECK(miou(cm) == 1.0);

    // TP=5, FP=3, FN=2 -> 0.5
    ConfusionMatrix cm2;
    for (int i = 0; i < 5; ++i)
        cm2.add_pair(1, 1);
    for (int i = 0; i < 3; ++i)
        cm2.add_pair(2, 1);  // predicted 1, truth 2: FP for class 1
    for (int i = 0; i < 2; ++i)
        cm2.add_pair(1, 3);  // truth 1 predicted elsewhere: FN
    CHECK(iou_per_class(cm2, 1) == doctest::Approx(0.5).epsilon(1e-15));

    // class absent from truth and prediction: NaN sentinel, excluded
    CHECK(std::isnan(iou_per_class(cm2, 5)));
    const double m = miou(cm2);
    CHECK(std::isfinite(m));

    // the void class is never scored
    CHECK_THROWS_AS(iou_per_class(cm2, 0), std::invalid_argument);
    ConfusionMatrix empty;
    CHECK_THROWS_AS(miou(empty), std::runtime_error);
}

TEST_CASE("void exclusion")
{
    ConfusionMatrix cm;
    Tensor truth({2, 2});
    Tensor pred({2, 2});
    truth[0] = kVoid;
    pred[0] = kRoad;  // wrong only on a void pixel
    truth[1] = truth[2] = truth[3] = kRoad;
    pred[1] = pred[2] = pred[3] = kRoad;
    cm.add(truth, pred);
    CHECK(cm.total() == 3);  // the void pixel is not counted
    CHECK(iou_per_class(cm, kRoad) == 1.0);
    CHECK(miou(cm) == 1.0);
}

TEST_CASE("miou equals the set-arithmetic oracle exactly on random maps")
{
    Rng rng(17);
    for (int trial = 0; trial < 25; ++trial)
    {
        Tensor truth({64, 64});
        Tensor pred({64, 64});
        for (std::size_t i = 0; i < truth.size(); ++i)
        {
            truth[i] = static_cast<double>(rng.uniform_index(kNumClasses));
            // correlated prediction so IoUs are non-trivial
            pred[i] = rng.uniform() < 0.6 ? truth[i]
                                          : static_cast<double>(rng.uniform_index(kNumClasses));
        }
        ConfusionMatrix cm;
        cm.add(truth, pred);
        bool any = false;
        const double want = set_oracle_miou(truth, pred, &any);
        REQUIRE(any);
        CHECK(miou(cm) == want);  // integer counts: exact equality
    }
}
