// Copyright (c) 2026 fbev contributors.
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fbev/decoder.hpp"

using namespace fbev;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0)
{
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i)
        t[i] = rng.uniform(lo, hi);
    return t;
}

}  // namespace

TEST_CASE("mask head: zero params, identity upsample, shape contract")
{
    BEVGrid grid;
    grid.h = grid.w = 4;
    ParamStore store;
    Rng rng(1);
    init_decoder_params(store, 8, rng);

    // zero parameters give zero logits everywhere
    for (const char* n : {"dec.proj.w", "dec.proj.b", "dec.refine.w", "dec.refine.b"})
        store.value(n).fill(0.0);
    {
        Tape tape;
        Var q = tape.constant(random_tensor({16, 8}, rng));
        Var logits = mask_head_decode(tape, store, q, grid, 8, 8);
        CHECK(logits.value().shape() == std::vector<std::size_t>{kNumClasses, 8, 8});
        for (std::size_t i = 0; i < logits.value().size(); ++i)
            CHECK(logits.value()[i] == 0.0);
    }

    // target equal to the grid: the upsample stage is the identity
    ParamStore store2;
    Rng rng2(2);
    init_decoder_params(store2, 8, rng2);
    store2.value("dec.refine.w").fill(0.0);
    store2.value("dec.refine.b").fill(0.0);
    {
        Tape tape;
        Tensor qv = random_tensor({16, 8}, rng2);
        Var logits = mask_head_decode(tape, store2, tape.constant(qv), grid, 4, 4);
        Var proj = linear(tape.constant(qv), tape.param(store2, "dec.proj.w"),
                          tape.param(store2, "dec.proj.b"));
        Var want = reshape(transpose2d(proj), {kNumClasses, 4, 4});
        for (std::size_t i = 0; i < logits.value().size(); ++i)
            CHECK(logits.value()[i] == doctest::Approx(want.value()[i]).epsilon(1e-14));
    }

    // 50x50 queries to a 200x200 output hold the shape contract
    BEVGrid big;
    big.h = big.w = 50;
    ParamStore store3;
    Rng rng3(3);
    init_decoder_params(store3, 4, rng3);
    Tape tape;
    Var q = tape.constant(Tensor({2500, 4}, 0.1));
    CHECK(mask_head_decode(tape, store3, q, big, 200, 200).value().shape() ==
          std::vector<std::size_t>{kNumClasses, 200, 200});

    CHECK_THROWS_AS(mask_head_decode(tape, store3, q, big, 20, 20), std::invalid_argument);
}

TEST_CASE("focal loss closed forms")
{
    FocalConfig cfg;

    // p_t = 1 everywhere -> zero loss
    {
        Tape tape;
        Tensor logits({kNumClasses, 2, 2});
        for (std::size_t i = 0; i < 4; ++i)
            logits[1 * 4 + i] = 200.0;  // class 1 saturated
        Var loss = focal_loss(tape.constant(logits), Tensor({2, 2}, 1.0), cfg);
        CHECK(loss.value()[0] == 0.0);
    }

    // gamma=0, alpha=1 reduces to cross entropy: ln 2 at p_t = 0.5
    {
        FocalConfig ce = cfg;
        ce.alpha = 1.0;
        ce.gamma = 0.0;
        Tape tape;
        // two-way tie between classes 1 and 2 gives p_t = 0.5
        Tensor logits({kNumClasses, 1, 1}, -1000.0);
        logits[1] = 0.0;
        logits[2] = 0.0;
        Var loss = focal_loss(tape.constant(logits), Tensor({1, 1}, 1.0), ce);
        CHECK(loss.value()[0] == doctest::Approx(std::log(2.0)).epsilon(1e-9));
    }

    // alpha=.25, gamma=2, p_t=0.9: 0.25 * 0.01 * (-ln 0.9)
    {
        Tape tape;
        Tensor logits({kNumClasses, 1, 1}, -1000.0);
        logits[1] = std::log(0.9);
        logits[2] = std::log(0.1);
        Var loss = focal_loss(tape.constant(logits), Tensor({1, 1}, 1.0), cfg);
        CHECK(loss.value()[0] == doctest::Approx(2.63401e-4).epsilon(1e-5));
    }

    // void pixels are excluded from the mean
    {
        Tape tape;
        Tensor logits({kNumClasses, 1, 2}, 0.0);
        logits[1 * 2 + 0] = 50.0;  // pixel 0 perfectly classified as 1
        Tensor labels({1, 2});
        labels[0] = 1.0;
        labels[1] = 0.0;  // void pixel, would otherwise add loss
        Var loss = focal_loss(tape.constant(logits), labels, cfg);
        CHECK(loss.value()[0] == doctest::Approx(0.0).epsilon(1e-12));
    }

    // out-of-range labels are rejected
    {
        Tape tape;
        CHECK_THROWS_AS(
            focal_loss(tape.constant(Tensor({kNumClasses, 1, 1})), Tensor({1, 1}, 17.0), cfg),
            std::invalid_argument);
    }
}

TEST_CASE("focal loss is nonnegative and monotone in p_t")
{
    FocalConfig cfg;
    double prev = 1e9;
    for (double pt = 0.05; pt <= 0.96; pt += 0.05)
    {
        Tape tape;
        Tensor logits({kNumClasses, 1, 1}, -1000.0);
        logits[1] = std::log(pt);
        logits[2] = std::log(1.0 - pt);
        const double loss = focal_loss(tape.constant(logits), Tensor({1, 1}, 1.0), cfg).value()[0];
        CHECK(loss >= 0.0);
        CHECK(loss < prev);
        prev = loss;
    }
}

TEST_CASE("total loss arithmetic")
{
    Tape tape;
    Var focal = tape.constant(Tensor::scalar(0.5));
    Var kl = tape.constant(Tensor::scalar(1.0));
    CHECK(total_loss(focal, kl, 0.0).value()[0] == 0.5);
    CHECK(total_loss(focal, kl, 0.01).value()[0] == doctest::Approx(0.51).epsilon(1e-15));
    // kl >= 0 keeps total >= focal
    CHECK(total_loss(focal, kl, 0.01).value()[0] >= 0.5);
    CHECK_THROWS_AS(total_loss(focal, kl, -1.0), std::invalid_argument);
}

TEST_CASE("decoder gradient check through focal loss")
{
    BEVGrid grid;
    grid.h = grid.w = 4;
    ParamStore store;
    Rng rng(4);
    init_decoder_params(store, 8, rng);
    store.create_uniform("queries", {16, 8}, 8, rng);
    Tensor labels({4, 4});
    Rng lrng(5);
    for (std::size_t i = 0; i < 16; ++i)
        labels[i] = static_cast<double>(lrng.uniform_index(kNumClasses));

    FocalConfig cfg;
    auto build = [&](Tape& tape) {
        Var q = tape.param(store, "queries");
        Var logits = mask_head_decode(tape, store, q, grid, 8, 8);
        Tensor up_labels({8, 8});
        for (std::size_t y = 0; y < 8; ++y)
            for (std::size_t x = 0; x < 8; ++x)
                up_labels[y * 8 + x] = labels[(y / 2) * 4 + x / 2];
        return focal_loss(logits, up_labels, cfg);
    };
    CHECK(finite_diff_check(build, store, 1e-5, 8, 13).max_rel_err < 1e-4);
}

TEST_CASE("argmax class map")
{
    Tensor logits({3, 1, 2});
    logits[0 * 2 + 0] = 5.0;   // class 0 wins pixel 0
    logits[2 * 2 + 1] = 3.0;   // class 2 wins pixel 1
    const Tensor classes = argmax_classes(logits);
    CHECK(classes[0] == 0.0);
    CHECK(classes[1] == 2.0);
}
