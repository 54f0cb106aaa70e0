// Copyright (c) 2026 fbev contributors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fbev/rng.hpp"
#include "fbev/tensor.hpp"

namespace fbev {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    bool valid() const { return tape != nullptr; }
    const Tensor& value() const;
};

/// Named parameter tensors with matching gradient accumulators.
class ParamStore {
  public:
    explicit ParamStore(std::uint64_t seed = 0) : seed_(seed) {}

    Tensor& create(const std::string& name, std::vector<std::size_t> shape);
    Tensor& create_uniform(const std::string& name, std::vector<std::size_t> shape,
                           std::size_t fan_in, Rng& rng);

    bool has(const std::string& name) const { return entries_.count(name) != 0; }
    Tensor& value(const std::string& name);
    const Tensor& value(const std::string& name) const;
    Tensor& grad(const std::string& name);
    const Tensor& grad(const std::string& name) const;

    void zero_grads();
    void accumulate_grad(const std::string& name, const Tensor& g);

    std::vector<std::string> names() const;
    std::size_t total_elements() const;
    std::uint64_t seed() const { return seed_; }

    /// Checkpoint format: a directory of FBT1 tensors plus a manifest.txt
    /// with one line per parameter: name, file, dtype, rank, extents.
    void save(const std::filesystem::path& dir) const;
    static ParamStore load(const std::filesystem::path& dir);

  private:
    struct Entry {
        Tensor value;
        Tensor grad;
    };
    std::map<std::string, Entry> entries_;
    std::uint64_t seed_ = 0;
};

/// Ordered record of primitive applications supporting one reverse sweep.
/// All operations are deterministic; replaying the same program with the
/// same inputs reproduces values bit-for-bit.
class Tape {
  public:
    using BackFn = std::function<void(Tape&, std::size_t self)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor value);
    Var leaf(Tensor value, bool requires_grad);
    /// Leaf bound to a ParamStore entry; backward() accumulates into it.
    Var param(ParamStore& store, const std::string& name);

    /// Reverse sweep from a scalar loss. Visits each recorded node at most
    /// once; bound parameter gradients are pushed into their ParamStore.
    void backward(const Var& loss);

    const Tensor& value(std::size_t id) const { return nodes_[id].value; }
    const Tensor& grad(const Var& v) const;
    bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
    std::size_t size() const { return nodes_.size(); }

    /// Used by op implementations.
    Var emit(Tensor value, std::span<const std::size_t> inputs, BackFn back);
    void add_grad(std::size_t id, const Tensor& g);
    Tensor& grad_buffer(std::size_t id);
    bool grad_live(std::size_t id) const { return nodes_[id].grad_live; }

  private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool needs_grad = false;
        bool grad_live = false;
        BackFn back;
        ParamStore* bound_store = nullptr;
        std::string bound_name;
    };
    // deque keeps references returned by value() stable while nodes grow
    std::deque<Node> nodes_;
    bool swept_ = false;
};

// ---- primitive operations ------------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var reciprocal(Var a);
Var add_scalar(Var a, double s);
Var scale(Var a, double s);
Var exp(Var a);
Var log(Var a);
Var relu(Var a);
Var sigmoid(Var a);
Var tanh(Var a);
Var clamp(Var a, double lo, double hi);

/// Affine map over the last axis: x[..., Din] * W[Din, Dout] + b[Dout].
Var linear(Var x, Var w, std::optional<Var> b = std::nullopt);
Var softmax_lastdim(Var x);
Var layer_normalize(Var x, Var gain, Var bias, double eps = 1e-5);

/// Cross-correlation with zero padding; x[Cin,H,W], k[Cout,Cin,kh,kw].
Var conv2d(Var x, Var k, std::size_t stride, std::size_t pad,
           std::optional<Var> bias = std::nullopt);

/// Samples map[C,H,W] at fractional (u,v) pixel positions, pts[N,2] with
/// u along width and v along height. Out-of-range neighbors are zero;
/// points fully outside (-1, extent) produce zero rows. Gradients flow to
/// both the map and the points.
Var bilinear_sample(Var map, Var pts);

/// Bilinear resize of x[C,H,W], align-corners=false, replicated borders.
Var interp_resize(Var x, std::size_t out_h, std::size_t out_w);

Var dropout(Var x, double rate, bool training, Rng& rng);

Var transpose2d(Var x);
Var reshape(Var x, std::vector<std::size_t> shape);
Var concat_rows(Var a, Var b);
Var concat_lastdim(std::span<const Var> parts);
Var slice_rows(Var x, std::size_t start, std::size_t count);
Var slice_cols(Var x, std::size_t start, std::size_t count);
/// Replicates a [N,1] column across `cols` columns.
Var broadcast_col(Var x, std::size_t cols);

Var sum_all(Var x);
Var mean_all(Var x);

/// sum_k weights[:,k] (*) samples[k], one node for a whole deformable read.
/// weights is [N,K], each sample [N,C].
Var rows_weighted_sum(std::span<const Var> samples, Var weights);

/// sum_i a[i] (*) b[i] over pairs of equally shaped tensors.
Var sum_products(std::span<const Var> a, std::span<const Var> b);

/// a + b (*) c with a constant c (reparameterized draws: mu + sigma*eps).
Var add_mul_const(Var a, Var b, const Tensor& c);

/// Mean focal loss over rows of logits[N,C] whose label is not
/// ignore_class: -alpha * (1 - p_t)^gamma * log(p_t) with p = softmax(row).
Var focal_loss_rows(Var logits, const std::vector<int>& labels, double alpha, double gamma,
                    int ignore_class);

// ---- verification --------------------------------------------------------

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
};

/// Central-difference check of reverse-mode gradients. build_loss must
/// construct a scalar loss on the given tape from the same ParamStore every
/// call (fresh RNG streams per call so the function is deterministic).
GradCheckReport finite_diff_check(const std::function<Var(Tape&)>& build_loss, ParamStore& params,
                                  double h = 1e-5, std::size_t coords_per_param = 16,
                                  std::uint64_t seed = 0x51ab);

}  // namespace fbev
