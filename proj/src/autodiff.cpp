// Copyright (c) 2026 fbev contributors.
// SPDX-License-Identifier: Apache-2.0

#include "fbev/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace fbev {

namespace {

[[noreturn]] void op_fail(const std::string& op, const std::string& msg)
{
    throw std::invalid_argument(op + ": " + msg);
}

void require_same_tape(const char* op, Var a, Var b)
{
    if (a.tape != b.tape)
        op_fail(op, "operands live on different tapes");
}

std::size_t rows_of(const Tensor& t)
{
    if (t.rank() == 0)
        return 1;
    std::size_t r = 1;
    for (std::size_t i = 0; i + 1 < t.rank(); ++i)
        r *= t.extent(i);
    return r;
}

std::size_t last_extent(const Tensor& t) { return t.rank() == 0 ? 1 : t.extent(t.rank() - 1); }

}  // namespace

// ---- Var / ParamStore / Tape ----------------------------------------------

const Tensor& Var::value() const { return tape->value(id); }

Tensor& ParamStore::create(const std::string& name, std::vector<std::size_t> shape)
{
    if (entries_.count(name))
        throw std::invalid_argument("ParamStore::create: duplicate name '" + name + "'");
    Entry e;
    e.value = Tensor(shape);
    e.grad = Tensor(shape);
    auto [it, ok] = entries_.emplace(name, std::move(e));
    (void)ok;
    return it->second.value;
}

Tensor& ParamStore::create_uniform(const std::string& name, std::vector<std::size_t> shape,
                                   std::size_t fan_in, Rng& rng)
{
    Tensor& t = create(name, std::move(shape));
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in == 0 ? 1 : fan_in));
    for (std::size_t i = 0; i < t.size(); ++i)
        t[i] = rng.uniform(-bound, bound);
    return t;
}

Tensor& ParamStore::value(const std::string& name)
{
    auto it = entries_.find(name);
    if (it == entries_.end())
        throw std::invalid_argument("ParamStore: unknown parameter '" + name + "'");
    return it->second.value;
}

const Tensor& ParamStore::value(const std::string& name) const
{
    auto it = entries_.find(name);
    if (it == entries_.end())
        throw std::invalid_argument("ParamStore: unknown parameter '" + name + "'");
    return it->second.value;
}

Tensor& ParamStore::grad(const std::string& name)
{
    auto it = entries_.find(name);
    if (it == entries_.end())
        throw std::invalid_argument("ParamStore: unknown parameter '" + name + "'");
    return it->second.grad;
}

const Tensor& ParamStore::grad(const std::string& name) const
{
    auto it = entries_.find(name);
    if (it == entries_.end())
        throw std::invalid_argument("ParamStore: unknown parameter '" + name + "'");
    return it->second.grad;
}

void ParamStore::zero_grads()
{
    for (auto& [name, e] : entries_)
        e.grad.fill(0.0);
}

void ParamStore::accumulate_grad(const std::string& name, const Tensor& g)
{
    Tensor& acc = grad(name);
    if (!acc.same_shape(g))
        throw std::invalid_argument("ParamStore: gradient shape mismatch for '" + name + "'");
    for (std::size_t i = 0; i < acc.size(); ++i)
        acc[i] += g[i];
}

std::vector<std::string> ParamStore::names() const
{
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [name, e] : entries_)
        out.push_back(name);
    return out;
}

std::size_t ParamStore::total_elements() const
{
    std::size_t n = 0;
    for (const auto& [name, e] : entries_)
        n += e.value.size();
    return n;
}

void ParamStore::save(const std::filesystem::path& dir) const
{
    std::filesystem::create_directories(dir);
    std::ofstream manifest(dir / "manifest.txt");
    if (!manifest)
        throw std::runtime_error("cannot write checkpoint manifest in '" + dir.string() + "'");
    std::size_t idx = 0;
    for (const auto& [name, e] : entries_)
    {
        std::ostringstream file;
        file << "tensor_" << idx++ << ".fbt";
        write_fbt(e.value, dir / file.str());
        manifest << name << ' ' << file.str() << ' '
                 << (e.value.dtype() == Dtype::Real64 ? "real64" : "real32") << ' '
                 << e.value.rank();
        for (std::size_t d : e.value.shape())
            manifest << ' ' << d;
        manifest << '\n';
    }
}

ParamStore ParamStore::load(const std::filesystem::path& dir)
{
    std::ifstream manifest(dir / "manifest.txt");
    if (!manifest)
        throw std::runtime_error("cannot read checkpoint manifest in '" + dir.string() + "'");
    ParamStore store;
    std::string line;
    while (std::getline(manifest, line))
    {
        if (line.empty())
            continue;
        std::istringstream ls(line);
        std::string name, file, dtype;
        std::size_t rank = 0;
        if (!(ls >> name >> file >> dtype >> rank))
            throw std::runtime_error("malformed manifest line: '" + line + "'");
        std::vector<std::size_t> shape(rank);
        for (std::size_t i = 0; i < rank; ++i)
            if (!(ls >> shape[i]))
                throw std::runtime_error("malformed manifest line: '" + line + "'");
        Tensor t = read_fbt(dir / file);
        if (t.shape() != shape)
            throw std::runtime_error("checkpoint shape mismatch for '" + name + "': manifest " +
                                     Tensor(shape).shape_str() + " vs file " + t.shape_str());
        Entry e;
        e.value = std::move(t);
        e.grad = Tensor(shape);
        store.entries_.emplace(name, std::move(e));
    }
    return store;
}

Var Tape::constant(Tensor value) { return leaf(std::move(value), false); }

Var Tape::leaf(Tensor value, bool requires_grad)
{
    Node n;
    n.value = std::move(value);
    n.needs_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
}

Var Tape::param(ParamStore& store, const std::string& name)
{
    Node n;
    n.value = store.value(name);
    n.needs_grad = true;
    n.bound_store = &store;
    n.bound_name = name;
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
}

Var Tape::emit(Tensor value, std::span<const std::size_t> inputs, BackFn back)
{
    Node n;
    n.value = std::move(value);
    for (std::size_t in : inputs)
        n.needs_grad = n.needs_grad || nodes_[in].needs_grad;
    if (n.needs_grad)
        n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
}

Tensor& Tape::grad_buffer(std::size_t id)
{
    Node& n = nodes_[id];
    if (!n.grad_live)
    {
        n.grad = Tensor(n.value.shape());
        n.grad_live = true;
    }
    return n.grad;
}

void Tape::add_grad(std::size_t id, const Tensor& g)
{
    Node& n = nodes_[id];
    if (!n.needs_grad)
        return;
    Tensor& acc = grad_buffer(id);
    for (std::size_t i = 0; i < acc.size(); ++i)
        acc[i] += g[i];
}

const Tensor& Tape::grad(const Var& v) const { return nodes_[v.id].grad; }

void Tape::backward(const Var& loss)
{
    if (loss.tape != this)
        throw std::invalid_argument("Tape::backward: loss lives on a different tape");
    if (swept_)
        throw std::logic_error("Tape::backward: tape already swept");
    if (nodes_[loss.id].value.size() != 1)
        throw std::invalid_argument("Tape::backward: loss must be scalar, got shape " +
                                    nodes_[loss.id].value.shape_str());
    swept_ = true;
    grad_buffer(loss.id)[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;)
    {
        Node& n = nodes_[i];
        if (!n.grad_live)
            continue;
        if (n.bound_store)
            n.bound_store->accumulate_grad(n.bound_name, n.grad);
        if (n.back)
            n.back(*this, i);
        // A node's gradient is fully consumed once its pull ran; freeing it
        // keeps the peak footprint near the live frontier. Unbound leaves
        // keep theirs so callers can inspect them.
        if (n.back || n.bound_store)
        {
            n.grad = Tensor();
            n.grad_live = false;
        }
    }
}

// ---- elementwise ops -------------------------------------------------------

namespace {

// dfdx receives (x, y) and must be cheap; it is inlined into a single
// per-node closure rather than dispatched per element
template <typename F, typename D>
Var unary_op(Var a, F f, D dfdx)
{
    Tape& t = *a.tape;
    const Tensor& av = a.value();
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i)
        out[i] = f(av[i]);
    const std::size_t aid = a.id;
    std::size_t ins[] = {aid};
    return t.emit(std::move(out), ins, [aid, dfdx](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad_buffer(self);
        const Tensor& x = tp.value(aid);
        const Tensor& y = tp.value(self);
        Tensor gx(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i)
            gx[i] = g[i] * dfdx(x[i], y[i]);
        tp.add_grad(aid, gx);
    });
}

}  // namespace

Var add(Var a, Var b)
{
    require_same_tape("add", a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (!av.same_shape(bv))
        op_fail("add", "shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i)
        out[i] = av[i] + bv[i];
    const std::size_t aid = a.id, bid = b.id;
    std::size_t ins[] = {aid, bid};
    return a.tape->emit(std::move(out), ins, [aid, bid](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad_buffer(self);
        tp.add_grad(aid, g);
        tp.add_grad(bid, g);
    });
}

Var sub(Var a, Var b)
{
    require_same_tape("sub", a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (!av.same_shape(bv))
        op_fail("sub", "shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i)
        out[i] = av[i] - bv[i];
    const std::size_t aid = a.id, bid = b.id;
    std::size_t ins[] = {aid, bid};
    return a.tape->emit(std::move(out), ins, [aid, bid](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad_buffer(self);
        tp.add_grad(aid, g);
        Tensor gb(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i)
            gb[i] = -g[i];
        tp.add_grad(bid, gb);
    });
}

Var mul(Var a, Var b)
{
    require_same_tape("mul", a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (!av.same_shape(bv))
        op_fail("mul", "shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i)
        out[i] = av[i] * bv[i];
    const std::size_t aid = a.id, bid = b.id;
    std::size_t ins[] = {aid, bid};
    return a.tape->emit(std::move(out), ins, [aid, bid](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad_buffer(self);
        const Tensor& x = tp.value(aid);
        const Tensor& y = tp.value(bid);
        if (tp.needs_grad(aid))
        {
            Tensor ga(x.shape());
            for (std::size_t i = 0; i < x.size(); ++i)
                ga[i] = g[i] * y[i];
            tp.add_grad(aid, ga);
        }
        if (tp.needs_grad(bid))
        {
            Tensor gb(y.shape());
            for (std::size_t i = 0; i < y.size(); ++i)
                gb[i] = g[i] * x[i];
            tp.add_grad(bid, gb);
        }
    });
}

Var div(Var a, Var b)
{
    require_same_tape("div", a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (!av.same_shape(bv))
        op_fail("div", "shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i)
        out[i] = av[i] / bv[i];
    const std::size_t aid = a.id, bid = b.id;
    std::size_t ins[] = {aid, bid};
    return a.tape->emit(std::move(out), ins, [aid, bid](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad_buffer(self);
        const Tensor& y = tp.value(bid);
        const Tensor& q = tp.value(self);
        if (tp.needs_grad(aid))
        {
            Tensor ga(g.shape());
            for (std::size_t i = 0; i < g.size(); ++i)
                ga[i] = g[i] / y[i];
            tp.add_grad(aid, ga);
        }
        if (tp.needs_grad(bid))
        {
            Tensor gb(g.shape());
            for (std::size_t i = 0; i < g.size(); ++i)
                gb[i] = -g[i] * q[i] / y[i];
            tp.add_grad(bid, gb);
        }
    });
}

Var reciprocal(Var a)
{
    return unary_op(a, [](double x) { return 1.0 / x; },
                    [](double, double y) { return -y * y; });
}

Var add_scalar(Var a, double s)
{
    return unary_op(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var scale(Var a, double s)
{
    return unary_op(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var exp(Var a)
{
    return unary_op(a, [](double x) { return std::exp(x); },
                    [](double, double y) { return y; });
}

Var log(Var a)
{
    const Tensor& av = a.value();
    for (std::size_t i = 0; i < av.size(); ++i)
        if (!(av[i] > 0.0))
            op_fail("log", "non-positive input " + std::to_string(av[i]));
    return unary_op(a, [](double x) { return std::log(x); },
                    [](double x, double) { return 1.0 / x; });
}

Var relu(Var a)
{
    return unary_op(a, [](double x) { return x > 0.0 ? x : 0.0; },
                    [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(Var a)
{
    return unary_op(a,
                    [](double x) {
                        if (x >= 0.0)
                            return 1.0 / (1.0 + std::exp(-x));
                        const double e = std::exp(x);
                        return e / (1.0 + e);
                    },
                    [](double, double y) { return y * (1.0 - y); });
}

Var tanh(Var a)
{
    return unary_op(a, [](double x) { return std::tanh(x); },
                    [](double, double y) { return 1.0 - y * y; });
}

Var clamp(Var a, double lo, double hi)
{
    return unary_op(a, [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
                    [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// ---- linear algebra --------------------------------------------------------

Var linear(Var x, Var w, std::optional<Var> b)
{
    require_same_tape("linear", x, w);
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    if (wv.rank() != 2)
        op_fail("linear", "weight must be rank 2, got " + wv.shape_str());
    const std::size_t din = wv.extent(0);
    const std::size_t dout = wv.extent(1);
    if (xv.rank() < 1 || last_extent(xv) != din)
        op_fail("linear", "inner extents differ: x " + xv.shape_str() + " vs W " + wv.shape_str());
    const std::size_t rows = rows_of(xv);
    const double* bias = nullptr;
    std::size_t bid = 0;
    if (b)
    {
        require_same_tape("linear", x, *b);
        const Tensor& bv = b->value();
        if (bv.size() != dout)
            op_fail("linear", "bias extent " + bv.shape_str() + " does not match Dout");
        bias = bv.data();
        bid = b->id;
    }

    std::vector<std::size_t> out_shape(xv.shape());
    if (out_shape.empty())
        out_shape.push_back(dout);
    else
        out_shape.back() = dout;
    Tensor out(out_shape);
    {
        const double* xp = xv.data();
        const double* wp = wv.data();
        double* op = out.data();
        for (std::size_t r = 0; r < rows; ++r)
        {
            double* orow = op + r * dout;
            if (bias)
                std::memcpy(orow, bias, dout * sizeof(double));
            const double* xrow = xp + r * din;
            for (std::size_t i = 0; i < din; ++i)
            {
                const double a = xrow[i];
                if (a == 0.0)
                    continue;
                const double* wrow = wp + i * dout;
                for (std::size_t o = 0; o < dout; ++o)
                    orow[o] += a * wrow[o];
            }
        }
    }

    const std::size_t xid = x.id, wid = w.id;
    const bool has_bias = b.has_value();
    std::vector<std::size_t> ins = {xid, wid};
    if (has_bias)
        ins.push_back(bid);
    return x.tape->emit(std::move(out), ins,
                        [xid, wid, bid, has_bias, rows, din, dout](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad_buffer(self);
        const double* gp = g.data();
        if (tp.needs_grad(xid))
        {
            const Tensor& wv2 = tp.value(wid);
            const double* wp = wv2.data();
            Tensor gx(tp.value(xid).shape());
            double* gxp = gx.data();
            for (std::size_t r = 0; r < rows; ++r)
            {
                const double* grow = gp + r * dout;
                double* gxrow = gxp + r * din;
                for (std::size_t i = 0; i < din; ++i)
                {
                    const double* wrow = wp + i * dout;
                    double acc = 0.0;
                    for (std::size_t o = 0; o < dout; ++o)
                        acc += grow[o] * wrow[o];
                    gxrow[i] = acc;
                }
            }
            tp.add_grad(xid, gx);
        }
        if (tp.needs_grad(wid))
        {
            const Tensor& xv2 = tp.value(xid);
            const double* xp = xv2.data();
            Tensor gw(tp.value(wid).shape());
            double* gwp = gw.data();
            for (std::size_t r = 0; r < rows; ++r)
            {
                const double* xrow = xp + r * din;
                const double* grow = gp + r * dout;
                for (std::size_t i = 0; i < din; ++i)
                {
                    const double a = xrow[i];
                    if (a == 0.0)
                        continue;
                    double* gwrow = gwp + i * dout;
                    for (std::size_t o = 0; o < dout; ++o)
                        gwrow[o] += a * grow[o];
                }
            }
            tp.add_grad(wid, gw);
        }
        if (has_bias && tp.needs_grad(bid))
        {
            Tensor gb(tp.value(bid).shape());
            double* gbp = gb.data();
            for (std::size_t r = 0; r < rows; ++r)
            {
                const double* grow = gp + r * dout;
                for (std::size_t o = 0; o < dout; ++o)
                    gbp[o] += grow[o];
            }
            tp.add_grad(bid, gb);
        }
    });
}

Var softmax_lastdim(Var x)
{
    const Tensor& xv = x.value();
    if (last_extent(xv) < 1)
        op_fail("softmax_lastdim", "last extent must be >= 1");
    const std::size_t rows = rows_of(xv);
    const std::size_t cols = last_extent(xv);
    Tensor out(xv.shape());
    for (std::size_t r = 0; r < rows; ++r)
    {
        const double* xi = xv.data() + r * cols;
        double* yo = out.data() + r * cols;
        double mx = xi[0];
        for (std::size_t c = 1; c < cols; ++c)
            mx = std::max(mx, xi[c]);
        double denom = 0.0;
        for (std::size_t c = 0; c < cols; ++c)
        {
            yo[c] = std::exp(xi[c] - mx);
            denom += yo[c];
        }
        for (std::size_t c = 0; c < cols; ++c)
            yo[c] /= denom;
    }
    const std::size_t xid = x.id;
    std::size_t ins[] = {xid};
    return x.tape->emit(std::move(out), ins, [xid, rows, cols](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad_buffer(self);
        const Tensor& y = tp.value(self);
        Tensor gx(y.shape());
        for (std::size_t r = 0; r < rows; ++r)
        {
            const double* gr = g.data() + r * cols;
            const double* yr = y.data() + r * cols;
            double* gxr = gx.data() + r * cols;
            double dot = 0.0;
            for (std::size_t c = 0; c < cols; ++c)
                dot += gr[c] * yr[c];
            for (std::size_t c = 0; c < cols; ++c)
                gxr[c] = yr[c] * (gr[c] - dot);
        }
        tp.add_grad(xid, gx);
    });
}

Var layer_normalize(Var x, Var gain, Var bias, double eps)
{
    require_same_tape("layer_normalize", x, gain);
    require_same_tape("layer_normalize", x, bias);
    const Tensor& xv = x.value();
    const std::size_t cols = last_extent(xv);
    const std::size_t rows = rows_of(xv);
    if (gain.value().size() != cols || bias.value().size() != cols)
        op_fail("layer_normalize", "gain/bias extent must equal the last axis extent");
    if (!(eps > 0.0))
        op_fail("layer_normalize", "eps must be positive");

    Tensor out(xv.shape());
    Tensor xhat(xv.shape());
    std::vector<double> inv_std(rows);
    const double* gv = gain.value().data();
    const double* bv = bias.value().data();
    for (std::size_t r = 0; r < rows; ++r)
    {
        const double* xr = xv.data() + r * cols;
        double mean = 0.0;
        for (std::size_t c = 0; c < cols; ++c)
            mean += xr[c];
        mean /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c)
        {
            const double d = xr[c] - mean;
            var += d * d;
        }
        var /= static_cast<double>(cols);
        const double istd = 1.0 / std::sqrt(var + eps);
        inv_std[r] = istd;
        double* hr = xhat.data() + r * cols;
        double* yr = out.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c)
        {
            hr[c] = (xr[c] - mean) * istd;
            yr[c] = gv[c] * hr[c] + bv[c];
        }
    }

    const std::size_t xid = x.id, gid = gain.id, bid = bias.id;
    std::size_t ins[] = {xid, gid, bid};
    auto xhat_saved = std::make_shared<Tensor>(std::move(xhat));
    auto istd_saved = std::make_shared<std::vector<double>>(std::move(inv_std));
    return x.tape->emit(std::move(out), ins,
                        [xid, gid, bid, rows, cols, xhat_saved, istd_saved](Tape& tp,
                                                                            std::size_t self) {
        const Tensor& g = tp.grad_buffer(self);
        const Tensor& xh = *xhat_saved;
        const double* gainv = tp.value(gid).data();
        if (tp.needs_grad(gid))
        {
            Tensor gg(tp.value(gid).shape());
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c)
                    gg[c] += g[r * cols + c] * xh[r * cols + c];
            tp.add_grad(gid, gg);
        }
        if (tp.needs_grad(bid))
        {
            Tensor gb(tp.value(bid).shape());
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c)
                    gb[c] += g[r * cols + c];
            tp.add_grad(bid, gb);
        }
        if (tp.needs_grad(xid))
        {
            Tensor gx(tp.value(xid).shape());
            for (std::size_t r = 0; r < rows; ++r)
            {
                const double* gr = g.data() + r * cols;
                const double* hr = xh.data() + r * cols;
                double* gxr = gx.data() + r * cols;
                double mean_dh = 0.0, mean_dh_h = 0.0;
                for (std::size_t c = 0; c < cols; ++c)
                {
                    const double dh = gr[c] * gainv[c];
                    mean_dh += dh;
                    mean_dh_h += dh * hr[c];
                }
                mean_dh /= static_cast<double>(cols);
                mean_dh_h /= static_cast<double>(cols);
                const double istd = (*istd_saved)[r];
                for (std::size_t c = 0; c < cols; ++c)
                {
                    const double dh = gr[c] * gainv[c];
                    gxr[c] = istd * (dh - mean_dh - hr[c] * mean_dh_h);
                }
            }
            tp.add_grad(xid, gx);
        }
    });
}

Var conv2d(Var x, Var k, std::size_t stride, std::size_t pad, std::optional<Var> bias)
{
    require_same_tape("conv2d", x, k);
    const Tensor& xv = x.value();
    const Tensor& kv = k.value();
    if (xv.rank() != 3 || kv.rank() != 4)
        op_fail("conv2d", "expected x[C,H,W] and k[Cout,Cin,kh,kw]");
    const std::size_t cin = xv.extent(0), h = xv.extent(1), w = xv.extent(2);
    const std::size_t cout = kv.extent(0), kh = kv.extent(2), kw = kv.extent(3);
    if (kv.extent(1) != cin)
        op_fail("conv2d", "kernel Cin " + std::to_string(kv.extent(1)) + " does not match input " +
                              std::to_string(cin));
    if (stride == 0)
        op_fail("conv2d", "stride must be >= 1");
    if (h + 2 * pad < kh || w + 2 * pad < kw)
        op_fail("conv2d", "kernel larger than padded input");
    const std::size_t oh = (h + 2 * pad - kh) / stride + 1;
    const std::size_t ow = (w + 2 * pad - kw) / stride + 1;
    const double* bp = nullptr;
    std::size_t bid = 0;
    if (bias)
    {
        require_same_tape("conv2d", x, *bias);
        if (bias->value().size() != cout)
            op_fail("conv2d", "bias extent does not match Cout");
        bp = bias->value().data();
        bid = bias->id;
    }

    Tensor out({cout, oh, ow});
    for (std::size_t co = 0; co < cout; ++co)
    {
        double* oplane = out.data() + co * oh * ow;
        if (bp)
            for (std::size_t i = 0; i < oh * ow; ++i)
                oplane[i] = bp[co];
        for (std::size_t ci = 0; ci < cin; ++ci)
        {
            const double* xplane = xv.data() + ci * h * w;
            const double* kk = kv.data() + (co * cin + ci) * kh * kw;
            for (std::size_t oy = 0; oy < oh; ++oy)
            {
                for (std::size_t dy = 0; dy < kh; ++dy)
                {
                    const std::ptrdiff_t iy =
                        static_cast<std::ptrdiff_t>(oy * stride + dy) - static_cast<std::ptrdiff_t>(pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h))
                        continue;
                    const double* xrow = xplane + iy * w;
                    double* orow = oplane + oy * ow;
                    for (std::size_t dx = 0; dx < kw; ++dx)
                    {
                        const double kval = kk[dy * kw + dx];
                        if (kval == 0.0)
                            continue;
                        for (std::size_t ox = 0; ox < ow; ++ox)
                        {
                            const std::ptrdiff_t ix =
                                static_cast<std::ptrdiff_t>(ox * stride + dx) -
                                static_cast<std::ptrdiff_t>(pad);
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w))
                                continue;
                            orow[ox] += kval * xrow[ix];
                        }
                    }
                }
            }
        }
    }

    const std::size_t xid = x.id, kid = k.id;
    const bool has_bias = bias.has_value();
    std::vector<std::size_t> ins = {xid, kid};
    if (has_bias)
        ins.push_back(bid);
    return x.tape->emit(std::move(out), ins,
                        [=](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad_buffer(self);
        const Tensor& xv2 = tp.value(xid);
        const Tensor& kv2 = tp.value(kid);
        const bool need_x = tp.needs_grad(xid);
        const bool need_k = tp.needs_grad(kid);
        Tensor gx = need_x ? Tensor(xv2.shape()) : Tensor();
        Tensor gk = need_k ? Tensor(kv2.shape()) : Tensor();
        for (std::size_t co = 0; co < cout; ++co)
        {
            const double* gplane = g.data() + co * oh * ow;
            for (std::size_t ci = 0; ci < cin; ++ci)
            {
                const double* xplane = xv2.data() + ci * h * w;
                const double* kk = kv2.data() + (co * cin + ci) * kh * kw;
                double* gxplane = need_x ? gx.data() + ci * h * w : nullptr;
                double* gkk = need_k ? gk.data() + (co * cin + ci) * kh * kw : nullptr;
                for (std::size_t oy = 0; oy < oh; ++oy)
                {
                    const double* grow = gplane + oy * ow;
                    for (std::size_t dy = 0; dy < kh; ++dy)
                    {
                        const std::ptrdiff_t iy =
                            static_cast<std::ptrdiff_t>(oy * stride + dy) -
                            static_cast<std::ptrdiff_t>(pad);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h))
                            continue;
                        for (std::size_t dx = 0; dx < kw; ++dx)
                        {
                            const double kval = kk[dy * kw + dx];
                            double gkacc = 0.0;
                            for (std::size_t ox = 0; ox < ow; ++ox)
                            {
                                const std::ptrdiff_t ix =
                                    static_cast<std::ptrdiff_t>(ox * stride + dx) -
                                    static_cast<std::ptrdiff_t>(pad);
                                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w))
                                    continue;
                                const double gv = grow[ox];
                                if (need_x)
                                    gxplane[iy * w + ix] += gv * kval;
                                gkacc += gv * xplane[iy * w + ix];
                            }
                            if (need_k)
                                gkk[dy * kw + dx] += gkacc;
                        }
                    }
                }
            }
        }
        if (need_x)
            tp.add_grad(xid, gx);
        if (need_k)
            tp.add_grad(kid, gk);
        if (has_bias && tp.needs_grad(bid))
        {
            Tensor gb(tp.value(bid).shape());
            for (std::size_t co = 0; co < cout; ++co)
            {
                const double* gplane = g.data() + co * oh * ow;
                double acc = 0.0;
                for (std::size_t i = 0; i < oh * ow; ++i)
                    acc += gplane[i];
                gb[co] = acc;
            }
            tp.add_grad(bid, gb);
        }
    });
}

Var bilinear_sample(Var map, Var pts)
{
    require_same_tape("bilinear_sample", map, pts);
    const Tensor& mv = map.value();
    const Tensor& pv = pts.value();
    if (mv.rank() != 3)
        op_fail("bilinear_sample", "map must be [C,H,W], got " + mv.shape_str());
    if (pv.rank() != 2 || pv.extent(1) != 2)
        op_fail("bilinear_sample", "pts must be [N,2], got " + pv.shape_str());
    const std::size_t c = mv.extent(0), h = mv.extent(1), w = mv.extent(2);
    const std::size_t n = pv.extent(0);

    Tensor out({n, c});
    const auto at = [&](std::size_t ch, std::ptrdiff_t y, std::ptrdiff_t x) -> double {
        if (y < 0 || y >= static_cast<std::ptrdiff_t>(h) || x < 0 ||
            x >= static_cast<std::ptrdiff_t>(w))
            return 0.0;
        return mv[ch * h * w + static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)];
    };
    for (std::size_t i = 0; i < n; ++i)
    {
        const double u = pv[2 * i];
        const double v = pv[2 * i + 1];
        if (u <= -1.0 || u >= static_cast<double>(w) || v <= -1.0 || v >= static_cast<double>(h))
            continue;  // fully outside: zero row
        const double fu = std::floor(u), fv = std::floor(v);
        const auto x0 = static_cast<std::ptrdiff_t>(fu);
        const auto y0 = static_cast<std::ptrdiff_t>(fv);
        const double ax = u - fu, ay = v - fv;
        for (std::size_t ch = 0; ch < c; ++ch)
        {
            const double v00 = at(ch, y0, x0), v01 = at(ch, y0, x0 + 1);
            const double v10 = at(ch, y0 + 1, x0), v11 = at(ch, y0 + 1, x0 + 1);
            out[i * c + ch] = (1 - ay) * ((1 - ax) * v00 + ax * v01) +
                              ay * ((1 - ax) * v10 + ax * v11);
        }
    }

    const std::size_t mid = map.id, pid = pts.id;
    std::size_t ins[] = {mid, pid};
    return map.tape->emit(std::move(out), ins, [mid, pid, c, h, w, n](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad_buffer(self);
        const Tensor& mv2 = tp.value(mid);
        const Tensor& pv2 = tp.value(pid);
        const bool need_m = tp.needs_grad(mid);
        const bool need_p = tp.needs_grad(pid);
        Tensor gm = need_m ? Tensor(mv2.shape()) : Tensor();
        Tensor gp = need_p ? Tensor(pv2.shape()) : Tensor();
        const auto inside = [&](std::ptrdiff_t y, std::ptrdiff_t x) {
            return y >= 0 && y < static_cast<std::ptrdiff_t>(h) && x >= 0 &&
                   x < static_cast<std::ptrdiff_t>(w);
        };
        const auto at = [&](std::size_t ch, std::ptrdiff_t y, std::ptrdiff_t x) -> double {
            return inside(y, x)
                       ? mv2[ch * h * w + static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)]
                       : 0.0;
        };
        for (std::size_t i = 0; i < n; ++i)
        {
            const double u = pv2[2 * i];
            const double v = pv2[2 * i + 1];
            if (u <= -1.0 || u >= static_cast<double>(w) || v <= -1.0 ||
                v >= static_cast<double>(h))
                continue;
            const double fu = std::floor(u), fv = std::floor(v);
            const auto x0 = static_cast<std::ptrdiff_t>(fu);
            const auto y0 = static_cast<std::ptrdiff_t>(fv);
            const double ax = u - fu, ay = v - fv;
            double du = 0.0, dv = 0.0;
            for (std::size_t ch = 0; ch < c; ++ch)
            {
                const double go = g[i * c + ch];
                if (go == 0.0)
                    continue;
                if (need_m)
                {
                    const auto scatter = [&](std::ptrdiff_t y, std::ptrdiff_t x, double wgt) {
                        if (inside(y, x))
                            gm[ch * h * w + static_cast<std::size_t>(y) * w +
                               static_cast<std::size_t>(x)] += go * wgt;
                    };
                    scatter(y0, x0, (1 - ax) * (1 - ay));
                    scatter(y0, x0 + 1, ax * (1 - ay));
                    scatter(y0 + 1, x0, (1 - ax) * ay);
                    scatter(y0 + 1, x0 + 1, ax * ay);
                }
                if (need_p)
                {
                    const double v00 = at(ch, y0, x0), v01 = at(ch, y0, x0 + 1);
                    const double v10 = at(ch, y0 + 1, x0), v11 = at(ch, y0 + 1, x0 + 1);
                    du += go * ((1 - ay) * (v01 - v00) + ay * (v11 - v10));
                    dv += go * ((1 - ax) * (v10 - v00) + ax * (v11 - v01));
                }
            }
            if (need_p)
            {
                gp[ 2 * i] += du;
                gp[2 * i + 1] += dv;
            }
        }
        if (need_m)
            tp.add_grad(mid, gm);
        if (need_p)
            tp.add_grad(pid, gp);
    });
}

namespace {

struct ResizeTap {
    std::size_t lo;
    std::size_t hi;
    double frac;
};

std::vector<ResizeTap> resize_taps(std::size_t in, std::size_t out)
{
    std::vector<ResizeTap> taps(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o)
    {
        const double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
        const double f = std::floor(src);
        auto lo = static_cast<std::ptrdiff_t>(f);
        double frac = src - f;
        auto hi = lo + 1;
        if (lo < 0)
        {
            lo = 0;
            hi = 0;
            frac = 0.0;
        }
        if (hi >= static_cast<std::ptrdiff_t>(in))
        {
            hi = static_cast<std::ptrdiff_t>(in) - 1;
            if (lo > hi)
                lo = hi;
        }
        taps[o] = {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi), frac};
    }
    return taps;
}

}  // namespace

Var interp_resize(Var x, std::size_t out_h, std::size_t out_w)
{
    const Tensor& xv = x.value();
    if (xv.rank() != 3)
        op_fail("interp_resize", "expected [C,H,W], got " + xv.shape_str());
    if (out_h < 1 || out_w < 1)
        op_fail("interp_resize", "target extents must be >= 1");
    const std::size_t c = xv.extent(0), h = xv.extent(1), w = xv.extent(2);
    const auto ty = resize_taps(h, out_h);
    const auto tx = resize_taps(w, out_w);

    Tensor out({c, out_h, out_w});
    for (std::size_t ch = 0; ch < c; ++ch)
    {
        const double* xp = xv.data() + ch * h * w;
        double* op = out.data() + ch * out_h * out_w;
        for (std::size_t oy = 0; oy < out_h; ++oy)
        {
            const auto& ry = ty[oy];
            const double* r0 = xp + ry.lo * w;
            const double* r1 = xp + ry.hi * w;
            double* orow = op + oy * out_w;
            for (std::size_t ox = 0; ox < out_w; ++ox)
            {
                const auto& rx = tx[ox];
                const double top = (1 - rx.frac) * r0[rx.lo] + rx.frac * r0[rx.hi];
                const double bot = (1 - rx.frac) * r1[rx.lo] + rx.frac * r1[rx.hi];
                orow[ox] = (1 - ry.frac) * top + ry.frac * bot;
            }
        }
    }

    const std::size_t xid = x.id;
    std::size_t ins[] = {xid};
    return x.tape->emit(std::move(out), ins,
                        [xid, c, h, w, out_h, out_w, ty, tx](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad_buffer(self);
        Tensor gx(tp.value(xid).shape());
        for (std::size_t ch = 0; ch < c; ++ch)
        {
            double* gxp = gx.data() + ch * h * w;
            const double* gp = g.data() + ch * out_h * out_w;
            for (std::size_t oy = 0; oy < out_h; ++oy)
            {
                const auto& ry = ty[oy];
                const double* grow = gp + oy * out_w;
                for (std::size_t ox = 0; ox < out_w; ++ox)
                {
                    const auto& rx = tx[ox];
                    const double gv = grow[ox];
                    if (gv == 0.0)
                        continue;
                    gxp[ry.lo * w + rx.lo] += gv * (1 - ry.frac) * (1 - rx.frac);
                    gxp[ry.lo * w + rx.hi] += gv * (1 - ry.frac) * rx.frac;
                    gxp[ry.hi * w + rx.lo] += gv * ry.frac * (1 - rx.frac);
                    gxp[ry.hi * w + rx.hi] += gv * ry.frac * rx.frac;
                }
            }
        }
        tp.add_grad(xid, gx);
    });
}

Var dropout(Var x, double rate, bool training, Rng& rng)
{
    if (rate < 0.0 || rate >= 1.0)
        op_fail("dropout", "rate must be in [0, 1)");
    if (!training || rate == 0.0)
        return x;
    const Tensor& xv = x.value();
    auto mask = std::make_shared<std::vector<double>>(xv.size());
    const double keep_scale = 1.0 / (1.0 - rate);
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i)
    {
        const double m = rng.uniform() < rate ? 0.0 : keep_scale;
        (*mask)[i] = m;
        out[i] = xv[i] * m;
    }
    const std::size_t xid = x.id;
    std::size_t ins[] = {xid};
    return x.tape->emit(std::move(out), ins, [xid, mask](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad_buffer(self);
        Tensor gx(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i)
            gx[i] = g[i] * (*mask)[i];
        tp.add_grad(xid, gx);
    });
}

Var transpose2d(Var x)
{
    const Tensor& xv = x.value();
    if (xv.rank() != 2)
        op_fail("transpose2d", "expected rank 2, got " + xv.shape_str());
    const std::size_t a = xv.extent(0), b = xv.extent(1);
    Tensor out({b, a});
    for (std::size_t i = 0; i < a; ++i)
        for (std::size_t j = 0; j < b; ++j)
            out[j * a + i] = xv[i * b + j];
    const std::size_t xid = x.id;
    std::size_t ins[] = {xid};
    return x.tape->emit(std::move(out), ins, [xid, a, b](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad_buffer(self);
        Tensor gx({a, b});
        for (std::size_t i = 0; i < a; ++i)
            for (std::size_t j = 0; j < b; ++j)
                gx[i * b + j] = g[j * a + i];
        tp.add_grad(xid, gx);
    });
}

Var reshape(Var x, std::vector<std::size_t> shape)
{
    const Tensor& xv = x.value();
    if (shape_product(shape) != xv.size())
        op_fail("reshape", "element count mismatch: " + xv.shape_str());
    Tensor reshaped =
        Tensor::from_values(std::move(shape), std::vector<double>(xv.data(), xv.data() + xv.size()));
    const std::size_t xid = x.id;
    std::size_t ins[] = {xid};
    return x.tape->emit(std::move(reshaped), ins, [xid](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad_buffer(self);
        Tensor gx = Tensor::from_values(tp.value(xid).shape(),
                                        std::vector<double>(g.data(), g.data() + g.size()));
        tp.add_grad(xid, gx);
    });
}

Var concat_rows(Var a, Var b)
{
    require_same_tape("concat_rows", a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.rank() != 2 || bv.rank() != 2 || av.extent(1) != bv.extent(1))
        op_fail("concat_rows", "expected [A,D] and [B,D]");
    const std::size_t ra = av.extent(0), rb = bv.extent(0), d = av.extent(1);
    Tensor out({ra + rb, d});
    std::memcpy(out.data(), av.data(), ra * d * sizeof(double));
    std::memcpy(out.data() + ra * d, bv.data(), rb * d * sizeof(double));
    const std::size_t aid = a.id, bid = b.id;
    std::size_t ins[] = {aid, bid};
    return a.tape->emit(std::move(out), ins, [aid, bid, ra, rb, d](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad_buffer(self);
        if (tp.needs_grad(aid))
        {
            Tensor ga({ra, d});
            std::memcpy(ga.data(), g.data(), ra * d * sizeof(double));
            tp.add_grad(aid, ga);
        }
        if (tp.needs_grad(bid))
        {
            Tensor gb({rb, d});
            std::memcpy(gb.data(), g.data() + ra * d, rb * d * sizeof(double));
            tp.add_grad(bid, gb);
        }
    });
}

Var concat_lastdim(std::span<const Var> parts)
{
    if (parts.empty())
        op_fail("concat_lastdim", "no parts");
    Tape& tp = *parts[0].tape;
    const std::size_t rows = rows_of(parts[0].value());
    std::size_t total = 0;
    for (const Var& p : parts)
    {
        require_same_tape("concat_lastdim", parts[0], p);
        if (rows_of(p.value()) != rows)
            op_fail("concat_lastdim", "leading extents differ");
        total += last_extent(p.value());
    }
    Tensor out({rows, total});
    std::vector<std::size_t> ids, widths;
    std::size_t off = 0;
    for (const Var& p : parts)
    {
        const Tensor& pv = p.value();
        const std::size_t wc = last_extent(pv);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < wc; ++c)
                out[r * total + off + c] = pv[r * wc + c];
        ids.push_back(p.id);
        widths.push_back(wc);
        off += wc;
    }
    return tp.emit(std::move(out), ids, [ids, widths, rows, total](Tape& t2, std::size_t self) {
        const Tensor& g = t2.grad_buffer(self);
        std::size_t off2 = 0;
        for (std::size_t p = 0; p < ids.size(); ++p)
        {
            const std::size_t wc = widths[p];
            if (t2.needs_grad(ids[p]))
            {
                Tensor gp(t2.value(ids[p]).shape());
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < wc; ++c)
                        gp[r * wc + c] = g[r * total + off2 + c];
                t2.add_grad(ids[p], gp);
            }
            off2 += wc;
        }
    });
}

Var slice_rows(Var x, std::size_t start, std::size_t count)
{
    const Tensor& xv = x.value();
    if (xv.rank() != 2 || start + count > xv.extent(0))
        op_fail("slice_rows", "range out of bounds for " + xv.shape_str());
    const std::size_t d = xv.extent(1);
    Tensor out({count, d});
    std::memcpy(out.data(), xv.data() + start * d, count * d * sizeof(double));
    const std::size_t xid = x.id;
    std::size_t ins[] = {xid};
    return x.tape->emit(std::move(out), ins, [xid, start, count, d](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad_buffer(self);
        Tensor gx(tp.value(xid).shape());
        std::memcpy(gx.data() + start * d, g.data(), count * d * sizeof(double));
        tp.add_grad(xid, gx);
    });
}

Var slice_cols(Var x, std::size_t start, std::size_t count)
{
    const Tensor& xv = x.value();
    if (xv.rank() != 2 || start + count > xv.extent(1))
        op_fail("slice_cols", "range out of bounds for " + xv.shape_str());
    const std::size_t rows = xv.extent(0), cols = xv.extent(1);
    Tensor out({rows, count});
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < count; ++c)
            out[r * count + c] = xv[r * cols + start + c];
    const std::size_t xid = x.id;
    std::size_t ins[] = {xid};
    return x.tape->emit(std::move(out), ins, [xid, start, count, rows, cols](Tape& tp,
                                                                             std::size_t self) {
        const Tensor& g = tp.grad_buffer(self);
        Tensor gx({rows, cols});
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < count; ++c)
                gx[r * cols + start + c] = g[r * count + c];
        tp.add_grad(xid, gx);
    });
}

Var broadcast_col(Var x, std::size_t cols)
{
    const Tensor& xv = x.value();
    if (xv.rank() != 2 || xv.extent(1) != 1)
        op_fail("broadcast_col", "expected [N,1], got " + xv.shape_str());
    const std::size_t rows = xv.extent(0);
    Tensor out({rows, cols});
    for (std::size_t r = 0; r < rows; ++r)
    {
        const double v = xv[r];
        for (std::size_t c = 0; c < cols; ++c)
            out[r * cols + c] = v;
    }
    const std::size_t xid = x.id;
    std::size_t ins[] = {xid};
    return x.tape->emit(std::move(out), ins, [xid, rows, cols](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad_buffer(self);
        Tensor gx({rows, 1});
        for (std::size_t r = 0; r < rows; ++r)
        {
            double acc = 0.0;
            for (std::size_t c = 0; c < cols; ++c)
                acc += g[r * cols + c];
            gx[r] = acc;
        }
        tp.add_grad(xid, gx);
    });
}

Var sum_all(Var x)
{
    const Tensor& xv = x.value();
    double acc = 0.0;
    for (std::size_t i = 0; i < xv.size(); ++i)
        acc += xv[i];
    const std::size_t xid = x.id;
    std::size_t ins[] = {xid};
    return x.tape->emit(Tensor::scalar(acc), ins, [xid](Tape& tp, std::size_t self) {
        const double g = tp.grad_buffer(self)[0];
        Tensor gx(tp.value(xid).shape(), g);
        tp.add_grad(xid, gx);
    });
}

Var mean_all(Var x)
{
    const Tensor& xv = x.value();
    const double inv = 1.0 / static_cast<double>(xv.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < xv.size(); ++i)
        acc += xv[i];
    const std::size_t xid = x.id;
    std::size_t ins[] = {xid};
    return x.tape->emit(Tensor::scalar(acc * inv), ins, [xid, inv](Tape& tp, std::size_t self) {
        const double g = tp.grad_buffer(self)[0] * inv;
        Tensor gx(tp.value(xid).shape(), g);
        tp.add_grad(xid, gx);
    });
}

Var rows_weighted_sum(std::span<const Var> samples, Var weights)
{
    if (samples.empty())
        op_fail("rows_weighted_sum", "no samples");
    Tape& tape = *weights.tape;
    const Tensor& wv = weights.value();
    const std::size_t n = wv.extent(0);
    const std::size_t k = wv.extent(1);
    if (samples.size() != k)
        op_fail("rows_weighted_sum", "sample count does not match weight columns");
    const std::size_t c = samples[0].value().extent(1);
    std::vector<std::size_t> ids;
    ids.reserve(k + 1);
    for (const Var& s : samples)
    {
        require_same_tape("rows_weighted_sum", s, weights);
        if (s.value().extent(0) != n || s.value().extent(1) != c)
            op_fail("rows_weighted_sum", "sample shape mismatch");
        ids.push_back(s.id);
    }
    const std::size_t wid = weights.id;
    ids.push_back(wid);

    Tensor out({n, c});
    for (std::size_t i = 0; i < k; ++i)
    {
        const Tensor& sv = tape.value(ids[i]);
        for (std::size_t r = 0; r < n; ++r)
        {
            const double w = wv[r * k + i];
            if (w == 0.0)
                continue;
            const double* srow = sv.data() + r * c;
            double* orow = out.data() + r * c;
            for (std::size_t ch = 0; ch < c; ++ch)
                orow[ch] += w * srow[ch];
        }
    }
    return tape.emit(std::move(out), ids, [ids, wid, n, k, c](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad_buffer(self);
        const Tensor& wv2 = tp.value(wid);
        const bool need_w = tp.needs_grad(wid);
        Tensor gw = need_w ? Tensor({n, k}) : Tensor();
        for (std::size_t i = 0; i < k; ++i)
        {
            const Tensor& sv = tp.value(ids[i]);
            if (tp.needs_grad(ids[i]))
            {
                Tensor gs({n, c});
                for (std::size_t r = 0; r < n; ++r)
                {
                    const double w = wv2[r * k + i];
                    if (w == 0.0)
                        continue;
                    const double* grow = g.data() + r * c;
                    double* gsrow = gs.data() + r * c;
                    for (std::size_t ch = 0; ch < c; ++ch)
                        gsrow[ch] = w * grow[ch];
                }
                tp.add_grad(ids[i], gs);
            }
            if (need_w)
                for (std::size_t r = 0; r < n; ++r)
                {
                    const double* grow = g.data() + r * c;
                    const double* srow = sv.data() + r * c;
                    double acc = 0.0;
                    for (std::size_t ch = 0; ch < c; ++ch)
                        acc += grow[ch] * srow[ch];
                    gw[r * k + i] = acc;
                }
        }
        if (need_w)
            tp.add_grad(wid, gw);
    });
}

Var sum_products(std::span<const Var> a, std::span<const Var> b)
{
    if (a.empty() || a.size() != b.size())
        op_fail("sum_products", "need equally many left and right factors");
    Tape& tape = *a[0].tape;
    const std::vector<std::size_t> shape = a[0].value().shape();
    std::vector<std::size_t> ids;
    for (std::size_t i = 0; i < a.size(); ++i)
    {
        require_same_tape("sum_products", a[i], b[i]);
        if (a[i].value().shape() != shape || b[i].value().shape() != shape)
            op_fail("sum_products", "factor shape mismatch");
        ids.push_back(a[i].id);
        ids.push_back(b[i].id);
    }
    Tensor out(shape);
    const std::size_t count = out.size();
    for (std::size_t i = 0; i < a.size(); ++i)
    {
        const double* ap = a[i].value().data();
        const double* bp = b[i].value().data();
        for (std::size_t j = 0; j < count; ++j)
            out[j] += ap[j] * bp[j];
    }
    return tape.emit(std::move(out), ids, [ids, count](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad_buffer(self);
        for (std::size_t i = 0; i < ids.size(); i += 2)
        {
            const std::size_t aid = ids[i], bid = ids[i + 1];
            if (tp.needs_grad(aid))
            {
                const Tensor& bv = tp.value(bid);
                Tensor ga(bv.shape());
                for (std::size_t j = 0; j < count; ++j)
                    ga[j] = g[j] * bv[j];
                tp.add_grad(aid, ga);
            }
            if (tp.needs_grad(bid))
            {
                const Tensor& av = tp.value(aid);
                Tensor gb(av.shape());
                for (std::size_t j = 0; j < count; ++j)
                    gb[j] = g[j] * av[j];
                tp.add_grad(bid, gb);
            }
        }
    });
}

Var add_mul_const(Var a, Var b, const Tensor& c)
{
    require_same_tape("add_mul_const", a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (!av.same_shape(bv) || !av.same_shape(c))
        op_fail("add_mul_const", "shape mismatch");
    Tensor out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = av[i] + bv[i] * c[i];
    const std::size_t aid = a.id, bid = b.id;
    auto c_saved = std::make_shared<Tensor>(c);
    std::size_t ins[] = {aid, bid};
    return a.tape->emit(std::move(out), ins, [aid, bid, c_saved](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad_buffer(self);
        tp.add_grad(aid, g);
        if (tp.needs_grad(bid))
        {
            Tensor gb(g.shape());
            for (std::size_t i = 0; i < g.size(); ++i)
                gb[i] = g[i] * (*c_saved)[i];
            tp.add_grad(bid, gb);
        }
    });
}

Var focal_loss_rows(Var logits, const std::vector<int>& labels, double alpha, double gamma,
                    int ignore_class)
{
    const Tensor& lv = logits.value();
    if (lv.rank() != 2)
        op_fail("focal_loss_rows", "expected [N,C], got " + lv.shape_str());
    const std::size_t n = lv.extent(0), c = lv.extent(1);
    if (labels.size() != n)
        op_fail("focal_loss_rows", "label count does not match row count");
    for (int y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= c)
            op_fail("focal_loss_rows", "label out of range: " + std::to_string(y));
    if (!(alpha > 0.0) || gamma < 0.0)
        op_fail("focal_loss_rows", "alpha must be positive and gamma nonnegative");

    auto probs = std::make_shared<Tensor>(Tensor({n, c}));
    std::size_t scored = 0;
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r)
    {
        const double* x = lv.data() + r * c;
        double* p = probs->data() + r * c;
        double mx = x[0];
        for (std::size_t j = 1; j < c; ++j)
            mx = std::max(mx, x[j]);
        double denom = 0.0;
        for (std::size_t j = 0; j < c; ++j)
        {
            p[j] = std::exp(x[j] - mx);
            denom += p[j];
        }
        for (std::size_t j = 0; j < c; ++j)
            p[j] /= denom;
        if (labels[r] == ignore_class)
            continue;
        ++scored;
        const double q = p[labels[r]];
        total += -alpha * std::pow(1.0 - q, gamma) * std::log(q);
    }
    const double inv = scored ? 1.0 / static_cast<double>(scored) : 0.0;
    const double loss = scored ? total * inv : 0.0;

    const std::size_t lid = logits.id;
    std::size_t ins[] = {lid};
    auto labels_saved = std::make_shared<std::vector<int>>(labels);
    return logits.tape->emit(Tensor::scalar(loss), ins,
                             [lid, n, c, alpha, gamma, ignore_class, inv, probs,
                              labels_saved](Tape& tp, std::size_t self) {
        const double g = tp.grad_buffer(self)[0] * inv;
        if (g == 0.0)
            return;
        Tensor gx({n, c});
        for (std::size_t r = 0; r < n; ++r)
        {
            const int y = (*labels_saved)[r];
            if (y == ignore_class)
                continue;
            const double* p = probs->data() + r * c;
            const double q = p[y];
            const double one_minus = 1.0 - q;
            // d/dz_j of -a(1-q)^g log q  =  a[g(1-q)^(g-1) q log q - (1-q)^g](d_jy - p_j)
            double term;
            if (one_minus <= 0.0)
                term = 0.0;
            else if (gamma == 0.0)
                term = -1.0;
            else
                term = gamma * std::pow(one_minus, gamma - 1.0) * q * std::log(q) -
                       std::pow(one_minus, gamma);
            const double base = alpha * term;
            for (std::size_t j = 0; j < c; ++j)
            {
                const double delta = (static_cast<int>(j) == y) ? 1.0 : 0.0;
                gx[r * c + j] = g * base * (delta - p[j]);
            }
        }
        tp.add_grad(lid, gx);
    });
}

// ---- finite differences ----------------------------------------------------

GradCheckReport finite_diff_check(const std::function<Var(Tape&)>& build_loss, ParamStore& params,
                                  double h, std::size_t coords_per_param, std::uint64_t seed)
{
    for (const std::string& name : params.names())
        if (params.value(name).dtype() != Dtype::Real64)
            throw std::invalid_argument("finite_diff_check requires real64 parameters");

    params.zero_grads();
    {
        Tape tape;
        Var loss = build_loss(tape);
        if (loss.value().size() != 1)
            throw std::invalid_argument("finite_diff_check: loss must be scalar");
        if (!std::isfinite(loss.value()[0]))
            throw std::runtime_error("finite_diff_check: non-finite loss");
        tape.backward(loss);
    }

    const auto eval = [&]() -> double {
        Tape tape;
        Var loss = build_loss(tape);
        const double v = loss.value()[0];
        if (!std::isfinite(v))
            throw std::runtime_error("finite_diff_check: non-finite loss during probing");
        return v;
    };

    GradCheckReport report;
    Rng rng(seed);
    for (const std::string& name : params.names())
    {
        Tensor& value = params.value(name);
        const Tensor& analytic = params.grad(name);
        const std::size_t count = value.size();
        std::vector<std::size_t> coords;
        if (count <= coords_per_param)
        {
            coords.resize(count);
            for (std::size_t i = 0; i < count; ++i)
                coords[i] = i;
        }
        else
        {
            for (std::size_t i = 0; i < coords_per_param; ++i)
                coords.push_back(rng.uniform_index(count));
        }
        for (std::size_t idx : coords)
        {
            const double saved = value[idx];
            value[idx] = saved + h;
            const double fp = eval();
            value[idx] = saved - h;
            const double fm = eval();
            value[idx] = saved;
            const double numeric = (fp - fm) / (2.0 * h);
            const double rel =
                std::abs(analytic[idx] - numeric) / std::max(1.0, std::abs(numeric));
            if (rel > report.max_rel_err)
            {
                report.max_rel_err = rel;
                report.worst_param = name + "[" + std::to_string(idx) + "]";
            }
        }
    }
    return report;
}

}  // namespace fbev
