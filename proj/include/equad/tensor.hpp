#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "equad/errors.hpp"

namespace equad {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

namespace detail {

struct TensorImpl {
    Shape shape;
    std::vector<double> values;
    bool requires_grad = false;
    bool on_tape = false;           // produced by a recorded op
    std::vector<double> grad;       // persistent, leaves only
    std::vector<double> adjoint;    // transient buffer used during backward
    std::uint64_t adjoint_epoch = 0;
};

}  // namespace detail

// Dense row-major tensor of 64-bit floats. Value-semantics handle; the
// payload is shared, so copies alias the same storage (like the usual
// autograd engines). Rank 1 and 2 only; a scalar is shape (1).
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), 0.0, requires_grad);
    }

    static Tensor filled(Shape shape, double value, bool requires_grad = false) {
        Tensor t;
        t.impl_ = std::make_shared<detail::TensorImpl>();
        t.impl_->shape = std::move(shape);
        t.impl_->values.assign(shape_numel(t.impl_->shape), value);
        t.set_requires_grad(requires_grad);
        return t;
    }

    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
        if (shape_numel(shape) != values.size())
            throw ShapeError("tensor: " + shape_str(shape) + " does not hold " +
                             std::to_string(values.size()) + " values");
        Tensor t;
        t.impl_ = std::make_shared<detail::TensorImpl>();
        t.impl_->shape = std::move(shape);
        t.impl_->values = std::move(values);
        t.set_requires_grad(requires_grad);
        return t;
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t numel() const { return impl_->values.size(); }
    std::size_t rows() const { return impl_->shape.empty() ? 0 : impl_->shape[0]; }
    std::size_t cols() const { return impl_->shape.size() < 2 ? 1 : impl_->shape[1]; }

    std::vector<double>& values() { return impl_->values; }
    const std::vector<double>& values() const { return impl_->values; }

    double item() const {
        if (numel() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not scalar");
        return impl_->values[0];
    }

    double at(std::size_t r, std::size_t c) const { return impl_->values[r * cols() + c]; }

    bool requires_grad() const { return impl_->requires_grad; }

    void set_requires_grad(bool rg) {
        impl_->requires_grad = rg;
        if (rg && impl_->grad.size() != impl_->values.size())
            impl_->grad.assign(impl_->values.size(), 0.0);
    }

    std::vector<double>& grad() {
        if (!impl_->requires_grad) throw EquadError("grad: tensor does not require grad");
        return impl_->grad;
    }
    const std::vector<double>& grad() const {
        if (!impl_->requires_grad) throw EquadError("grad: tensor does not require grad");
        return impl_->grad;
    }

    void zero_grad() {
        if (impl_->requires_grad) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
    }

    detail::TensorImpl* impl() const { return impl_.get(); }
    std::shared_ptr<detail::TensorImpl> impl_ptr() const { return impl_; }

  private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<EMat>;
using ConstMatMap = Eigen::Map<const EMat>;

inline ConstMatMap as_mat(const TensorImpl* t) {
    return ConstMatMap(t->values.data(), static_cast<Eigen::Index>(t->shape[0]),
                       static_cast<Eigen::Index>(t->shape.size() < 2 ? 1 : t->shape[1]));
}

}  // namespace detail

// Constant block-diagonal matrix (one dense block per graph), used for the
// diffusion-view message passing. Blocks are row-major, sizes may differ.
struct BlockDiag {
    std::vector<std::vector<double>> blocks;  // each n_i * n_i row-major
    std::vector<std::size_t> sizes;
    std::size_t total = 0;

    void add_block(std::vector<double> data, std::size_t n) {
        if (data.size() != n * n) throw ShapeError("block_diag: block is not square");
        blocks.push_back(std::move(data));
        sizes.push_back(n);
        total += n;
    }
};

// Records forward ops and replays their backward rules in reverse order.
// Construction order is topological by definition, so a single reverse pass
// is a valid adjoint propagation. Gradient accumulation into leaf tensors is
// additive; only adam_step (or zero_grad) clears it.
class Tape {
  public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::size_t size() const { return ops_.size(); }

    void clear() {
        ops_.clear();
        leaves_.clear();
        consumed_.clear();
    }

    bool grad_enabled() const { return grad_enabled_; }
    void set_grad_enabled(bool on) { grad_enabled_ = on; }

    // ----- op set ------------------------------------------------------

    Tensor add(const Tensor& a, const Tensor& b) { return binary_rowbcast("add", a, b, false); }
    Tensor sub(const Tensor& a, const Tensor& b) { return binary_rowbcast("sub", a, b, true); }

    // elementwise product; b may be a row vector broadcast over a's rows
    Tensor mul(const Tensor& a, const Tensor& b) {
        const auto& sa = a.shape();
        const auto& sb = b.shape();
        if (sa == sb) {
            Tensor out = Tensor::zeros(sa);
            auto& o = out.values();
            const auto& va = a.values();
            const auto& vb = b.values();
            for (std::size_t i = 0; i < o.size(); ++i) o[i] = va[i] * vb[i];
            record2("mul", a, b, out, [a, b, out, this]() {
                const auto& g = adj(out);
                if (wants(a)) {
                    auto& ga = adj_mut(a);
                    const auto& vb = b.values();
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
                }
                if (wants(b)) {
                    auto& gb = adj_mut(b);
                    const auto& va = a.values();
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
                }
            });
            return out;
        }
        if (row_broadcastable(sa, sb)) {
            const std::size_t n = sa[0], f = sa[1];
            Tensor out = Tensor::zeros(sa);
            auto& o = out.values();
            const auto& va = a.values();
            const auto& vb = b.values();
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < f; ++c) o[r * f + c] = va[r * f + c] * vb[c];
            record2("mul", a, b, out, [a, b, out, n, f, this]() {
                const auto& g = adj(out);
                if (wants(a)) {
                    auto& ga = adj_mut(a);
                    const auto& vb = b.values();
                    for (std::size_t r = 0; r < n; ++r)
                        for (std::size_t c = 0; c < f; ++c) ga[r * f + c] += g[r * f + c] * vb[c];
                }
                if (wants(b)) {
                    auto& gb = adj_mut(b);
                    const auto& va = a.values();
                    for (std::size_t r = 0; r < n; ++r)
                        for (std::size_t c = 0; c < f; ++c) gb[c] += g[r * f + c] * va[r * f + c];
                }
            });
            return out;
        }
        throw ShapeError(std::string("mul: shapes ") + shape_str(sa) + " and " + shape_str(sb) +
                         " do not conform");
    }

    Tensor scale(const Tensor& a, double c) {
        Tensor out = Tensor::zeros(a.shape());
        auto& o = out.values();
        const auto& v = a.values();
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = v[i] * c;
        record1("scale", a, out, [a, out, c, this]() {
            if (!wants(a)) return;
            const auto& g = adj(out);
            auto& ga = adj_mut(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
        });
        return out;
    }

    // out = s[0] * a with a one-element tensor s (used for learnable scalars)
    Tensor scale_scalar(const Tensor& a, const Tensor& s) {
        if (s.numel() != 1) throw ShapeError("scale_scalar: scale must be one element");
        const double c = s.values()[0];
        Tensor out = Tensor::zeros(a.shape());
        auto& o = out.values();
        const auto& v = a.values();
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = v[i] * c;
        record2("scale_scalar", a, s, out, [a, s, out, this]() {
            const auto& g = adj(out);
            if (wants(a)) {
                auto& ga = adj_mut(a);
                const double c = s.values()[0];
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
            }
            if (wants(s)) {
                auto& gs = adj_mut(s);
                const auto& v = a.values();
                for (std::size_t i = 0; i < g.size(); ++i) gs[0] += g[i] * v[i];
            }
        });
        return out;
    }

    Tensor matmul(const Tensor& a, const Tensor& b) {
        if (a.shape().size() != 2 || b.shape().size() != 2)
            throw ShapeError("matmul: both operands must be rank 2, got " + shape_str(a.shape()) +
                             " and " + shape_str(b.shape()));
        if (a.shape()[1] != b.shape()[0])
            throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
        const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
        Tensor out = Tensor::zeros({n, m});
        {
            detail::MatMap o(out.values().data(), n, m);
            o.noalias() = detail::as_mat(a.impl()) * detail::as_mat(b.impl());
        }
        record2("matmul", a, b, out, [a, b, out, n, k, m, this]() {
            detail::ConstMatMap g(adj(out).data(), n, m);
            if (wants(a)) {
                detail::MatMap ga(adj_mut(a).data(), n, k);
                ga.noalias() += g * detail::as_mat(b.impl()).transpose();
            }
            if (wants(b)) {
                detail::MatMap gb(adj_mut(b).data(), k, m);
                gb.noalias() += detail::as_mat(a.impl()).transpose() * g;
            }
        });
        return out;
    }

    Tensor transpose(const Tensor& a) {
        if (a.shape().size() != 2) throw ShapeError("transpose: rank-2 tensor required");
        const std::size_t n = a.shape()[0], m = a.shape()[1];
        Tensor out = Tensor::zeros({m, n});
        const auto& v = a.values();
        auto& o = out.values();
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < m; ++c) o[c * n + r] = v[r * m + c];
        record1("transpose", a, out, [a, out, n, m, this]() {
            if (!wants(a)) return;
            const auto& g = adj(out);
            auto& ga = adj_mut(a);
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < m; ++c) ga[r * m + c] += g[c * n + r];
        });
        return out;
    }

    Tensor relu(const Tensor& a) {
        Tensor out = Tensor::zeros(a.shape());
        auto& o = out.values();
        const auto& v = a.values();
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = v[i] > 0.0 ? v[i] : 0.0;
        record1("relu", a, out, [a, out, this]() {
            if (!wants(a)) return;
            const auto& g = adj(out);
            auto& ga = adj_mut(a);
            const auto& v = a.values();
            for (std::size_t i = 0; i < g.size(); ++i)
                if (v[i] > 0.0) ga[i] += g[i];
        });
        return out;
    }

    Tensor sigmoid(const Tensor& a) {
        Tensor out = Tensor::zeros(a.shape());
        auto& o = out.values();
        const auto& v = a.values();
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = stable_sigmoid(v[i]);
        record1("sigmoid", a, out, [a, out, this]() {
            if (!wants(a)) return;
            const auto& g = adj(out);
            auto& ga = adj_mut(a);
            const auto& s = out.values();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s[i] * (1.0 - s[i]);
        });
        return out;
    }

    // log(1 + e^x), evaluated piecewise to stay finite for large |x|
    Tensor softplus(const Tensor& a) {
        Tensor out = Tensor::zeros(a.shape());
        auto& o = out.values();
        const auto& v = a.values();
        for (std::size_t i = 0; i < o.size(); ++i)
            o[i] = v[i] > 0.0 ? v[i] + std::log1p(std::exp(-v[i])) : std::log1p(std::exp(v[i]));
        record1("softplus", a, out, [a, out, this]() {
            if (!wants(a)) return;
            const auto& g = adj(out);
            auto& ga = adj_mut(a);
            const auto& v = a.values();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * stable_sigmoid(v[i]);
        });
        return out;
    }

    Tensor log(const Tensor& a) {
        Tensor out = Tensor::zeros(a.shape());
        auto& o = out.values();
        const auto& v = a.values();
        for (std::size_t i = 0; i < o.size(); ++i) {
            if (!(v[i] > 0.0))
                throw NumericError("log: non-positive input " + std::to_string(v[i]));
            o[i] = std::log(v[i]);
        }
        record1("log", a, out, [a, out, this]() {
            if (!wants(a)) return;
            const auto& g = adj(out);
            auto& ga = adj_mut(a);
            const auto& v = a.values();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / v[i];
        });
        return out;
    }

    Tensor exp(const Tensor& a) {
        Tensor out = Tensor::zeros(a.shape());
        auto& o = out.values();
        const auto& v = a.values();
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::exp(v[i]);
        record1("exp", a, out, [a, out, this]() {
            if (!wants(a)) return;
            const auto& g = adj(out);
            auto& ga = adj_mut(a);
            const auto& e = out.values();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * e[i];
        });
        return out;
    }

    Tensor softmax_rows(const Tensor& a) {
        if (a.shape().size() != 2) throw ShapeError("softmax_rows: rank-2 tensor required");
        const std::size_t n = a.shape()[0], m = a.shape()[1];
        Tensor out = Tensor::zeros(a.shape());
        auto& o = out.values();
        const auto& v = a.values();
        for (std::size_t r = 0; r < n; ++r) {
            const double mx = *std::max_element(v.begin() + r * m, v.begin() + (r + 1) * m);
            double z = 0.0;
            for (std::size_t c = 0; c < m; ++c) {
                o[r * m + c] = std::exp(v[r * m + c] - mx);
                z += o[r * m + c];
            }
            for (std::size_t c = 0; c < m; ++c) o[r * m + c] /= z;
        }
        record1("softmax_rows", a, out, [a, out, n, m, this]() {
            if (!wants(a)) return;
            const auto& g = adj(out);
            auto& ga = adj_mut(a);
            const auto& s = out.values();
            for (std::size_t r = 0; r < n; ++r) {
                double dot = 0.0;
                for (std::size_t c = 0; c < m; ++c) dot += g[r * m + c] * s[r * m + c];
                for (std::size_t c = 0; c < m; ++c)
                    ga[r * m + c] += s[r * m + c] * (g[r * m + c] - dot);
            }
        });
        return out;
    }

    // max-subtracted log-softmax; preferred over log(softmax(x)) once logits grow
    Tensor log_softmax_rows(const Tensor& a) {
        if (a.shape().size() != 2) throw ShapeError("log_softmax_rows: rank-2 tensor required");
        const std::size_t n = a.shape()[0], m = a.shape()[1];
        Tensor out = Tensor::zeros(a.shape());
        auto& o = out.values();
        const auto& v = a.values();
        for (std::size_t r = 0; r < n; ++r) {
            const double mx = *std::max_element(v.begin() + r * m, v.begin() + (r + 1) * m);
            double z = 0.0;
            for (std::size_t c = 0; c < m; ++c) z += std::exp(v[r * m + c] - mx);
            const double lz = mx + std::log(z);
            for (std::size_t c = 0; c < m; ++c) o[r * m + c] = v[r * m + c] - lz;
        }
        record1("log_softmax_rows", a, out, [a, out, n, m, this]() {
            if (!wants(a)) return;
            const auto& g = adj(out);
            auto& ga = adj_mut(a);
            const auto& lo = out.values();
            for (std::size_t r = 0; r < n; ++r) {
                double gsum = 0.0;
                for (std::size_t c = 0; c < m; ++c) gsum += g[r * m + c];
                for (std::size_t c = 0; c < m; ++c)
                    ga[r * m + c] += g[r * m + c] - std::exp(lo[r * m + c]) * gsum;
            }
        });
        return out;
    }

    Tensor sum(const Tensor& a) {
        Tensor out = Tensor::scalar(0.0);
        const auto& v = a.values();
        out.values()[0] = std::accumulate(v.begin(), v.end(), 0.0);
        record1("sum", a, out, [a, out, this]() {
            if (!wants(a)) return;
            const double g = adj(out)[0];
            auto& ga = adj_mut(a);
            for (auto& x : ga) x += g;
        });
        return out;
    }

    // column means: (n, f) -> (1, f)
    Tensor mean_rows(const Tensor& a) {
        if (a.shape().size() != 2) throw ShapeError("mean_rows: rank-2 tensor required");
        const std::size_t n = a.shape()[0], f = a.shape()[1];
        if (n == 0) throw ShapeError("mean_rows: empty tensor");
        Tensor out = Tensor::zeros({1, f});
        auto& o = out.values();
        const auto& v = a.values();
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < f; ++c) o[c] += v[r * f + c];
        for (std::size_t c = 0; c < f; ++c) o[c] /= static_cast<double>(n);
        record1("mean_rows", a, out, [a, out, n, f, this]() {
            if (!wants(a)) return;
            const auto& g = adj(out);
            auto& ga = adj_mut(a);
            const double inv = 1.0 / static_cast<double>(n);
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < f; ++c) ga[r * f + c] += g[c] * inv;
        });
        return out;
    }

    // vertical concatenation of rank-2 tensors with equal column counts
    Tensor concat_rows(const std::vector<Tensor>& parts) {
        if (parts.empty()) throw ShapeError("concat_rows: no inputs");
        const std::size_t f = parts[0].cols();
        std::size_t n = 0;
        for (const auto& p : parts) {
            if (p.shape().size() != 2 || p.cols() != f)
                throw ShapeError("concat_rows: column mismatch, expected " + std::to_string(f) +
                                 " got " + shape_str(p.shape()));
            n += p.rows();
        }
        Tensor out = Tensor::zeros({n, f});
        auto& o = out.values();
        std::size_t off = 0;
        for (const auto& p : parts) {
            const auto& v = p.values();
            std::copy(v.begin(), v.end(), o.begin() + off);
            off += v.size();
        }
        bool rg = false;
        for (const auto& p : parts) rg = rg || p.requires_grad();
        if (grad_enabled_ && rg) {
            for (const auto& p : parts) note_leaf(p);
            out.impl()->requires_grad = true;
            out.impl()->on_tape = true;
            auto parts_copy = parts;
            ops_.push_back({"concat_rows", [parts_copy, out, this]() {
                                const auto& g = adj(out);
                                std::size_t off = 0;
                                for (const auto& p : parts_copy) {
                                    if (wants(p)) {
                                        auto& gp = adj_mut(p);
                                        for (std::size_t i = 0; i < gp.size(); ++i)
                                            gp[i] += g[off + i];
                                    }
                                    off += p.numel();
                                }
                            },
                            out.impl_ptr()});
        }
        return out;
    }

    Tensor gather_rows(const Tensor& a, const std::vector<std::uint32_t>& idx) {
        if (a.shape().size() != 2) throw ShapeError("gather_rows: rank-2 tensor required");
        const std::size_t n = a.shape()[0], f = a.shape()[1];
        for (auto i : idx)
            if (i >= n)
                throw IndexError("gather_rows: index " + std::to_string(i) + " out of range " +
                                 std::to_string(n));
        Tensor out = Tensor::zeros({idx.size(), f});
        auto& o = out.values();
        const auto& v = a.values();
        for (std::size_t r = 0; r < idx.size(); ++r)
            std::copy(v.begin() + idx[r] * f, v.begin() + (idx[r] + 1) * f, o.begin() + r * f);
        record1("gather_rows", a, out, [a, out, idx, f, this]() {
            if (!wants(a)) return;
            const auto& g = adj(out);
            auto& ga = adj_mut(a);
            for (std::size_t r = 0; r < idx.size(); ++r)
                for (std::size_t c = 0; c < f; ++c) ga[idx[r] * f + c] += g[r * f + c];
        });
        return out;
    }

    // out[idx[r], :] += a[r, :]
    Tensor scatter_add_rows(const Tensor& a, const std::vector<std::uint32_t>& idx,
                            std::size_t out_rows) {
        if (a.shape().size() != 2) throw ShapeError("scatter_add_rows: rank-2 tensor required");
        if (idx.size() != a.shape()[0])
            throw ShapeError("scatter_add_rows: index count " + std::to_string(idx.size()) +
                             " != row count " + std::to_string(a.shape()[0]));
        const std::size_t f = a.shape()[1];
        for (auto i : idx)
            if (i >= out_rows)
                throw IndexError("scatter_add_rows: index " + std::to_string(i) +
                                 " out of range " + std::to_string(out_rows));
        Tensor out = Tensor::zeros({out_rows, f});
        auto& o = out.values();
        const auto& v = a.values();
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::size_t c = 0; c < f; ++c) o[idx[r] * f + c] += v[r * f + c];
        record1("scatter_add_rows", a, out, [a, out, idx, f, this]() {
            if (!wants(a)) return;
            const auto& g = adj(out);
            auto& ga = adj_mut(a);
            for (std::size_t r = 0; r < idx.size(); ++r)
                for (std::size_t c = 0; c < f; ++c) ga[r * f + c] += g[idx[r] * f + c];
        });
        return out;
    }

    // out[r, :] = w[r] * a[r, :] with a constant weight vector
    Tensor scale_rows(const Tensor& a, const std::vector<double>& w) {
        if (a.shape().size() != 2) throw ShapeError("scale_rows: rank-2 tensor required");
        if (w.size() != a.shape()[0])
            throw ShapeError("scale_rows: weight count " + std::to_string(w.size()) +
                             " != row count " + std::to_string(a.shape()[0]));
        const std::size_t f = a.shape()[1];
        Tensor out = Tensor::zeros(a.shape());
        auto& o = out.values();
        const auto& v = a.values();
        for (std::size_t r = 0; r < w.size(); ++r)
            for (std::size_t c = 0; c < f; ++c) o[r * f + c] = v[r * f + c] * w[r];
        record1("scale_rows", a, out, [a, out, w, f, this]() {
            if (!wants(a)) return;
            const auto& g = adj(out);
            auto& ga = adj_mut(a);
            for (std::size_t r = 0; r < w.size(); ++r)
                for (std::size_t c = 0; c < f; ++c) ga[r * f + c] += g[r * f + c] * w[r];
        });
        return out;
    }

    // block-diagonal constant matrix times tensor: out = diag(B_1..B_k) * a
    Tensor block_matmul(const std::shared_ptr<const BlockDiag>& bd, const Tensor& a) {
        if (a.shape().size() != 2) throw ShapeError("block_matmul: rank-2 tensor required");
        if (bd->total != a.shape()[0])
            throw ShapeError("block_matmul: block rows " + std::to_string(bd->total) +
                             " != tensor rows " + std::to_string(a.shape()[0]));
        const std::size_t f = a.shape()[1];
        Tensor out = Tensor::zeros(a.shape());
        {
            std::size_t off = 0;
            for (std::size_t b = 0; b < bd->sizes.size(); ++b) {
                const std::size_t n = bd->sizes[b];
                detail::ConstMatMap blk(bd->blocks[b].data(), n, n);
                detail::ConstMatMap in(a.values().data() + off * f, n, f);
                detail::MatMap o(out.values().data() + off * f, n, f);
                o.noalias() = blk * in;
                off += n;
            }
        }
        record1("block_matmul", a, out, [a, out, bd, f, this]() {
            if (!wants(a)) return;
            auto& ga = adj_mut(a);
            const auto& g = adj(out);
            std::size_t off = 0;
            for (std::size_t b = 0; b < bd->sizes.size(); ++b) {
                const std::size_t n = bd->sizes[b];
                detail::ConstMatMap blk(bd->blocks[b].data(), n, n);
                detail::ConstMatMap go(g.data() + off * f, n, f);
                detail::MatMap gi(ga.data() + off * f, n, f);
                gi.noalias() += blk.transpose() * go;
                off += n;
            }
        });
        return out;
    }

    // ----- backward ------------------------------------------------------

    // Replays the tape in reverse from a scalar loss, accumulating into the
    // grad of every reachable leaf. A second backward on the same scalar is
    // rejected; backward on a different scalar accumulates additively.
    void backward(const Tensor& loss) {
        if (loss.numel() != 1) throw EquadError("backward: loss must be scalar, got " +
                                                shape_str(loss.shape()));
        if (ops_.empty()) throw EquadError("backward: tape is empty");
        for (auto* p : consumed_)
            if (p == loss.impl()) throw EquadError("backward: already called for this loss");
        epoch_ = next_epoch();
        auto& la = loss.impl()->adjoint;
        la.assign(1, 1.0);
        loss.impl()->adjoint_epoch = epoch_;
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
            if (it->out->adjoint_epoch != epoch_) continue;  // not on the path to this loss
            it->backward();
        }
        for (auto& leaf : leaves_) {
            if (leaf->adjoint_epoch != epoch_) continue;
            auto& g = leaf->grad;
            const auto& a = leaf->adjoint;
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += a[i];
        }
        consumed_.push_back(loss.impl());
    }

  private:
    // adjoint buffers live on shared TensorImpls, so the validity stamp must
    // be unique across every Tape in the process
    static std::uint64_t next_epoch() {
        static std::atomic<std::uint64_t> counter{0};
        return ++counter;
    }

    static bool row_broadcastable(const Shape& a, const Shape& b) {
        if (a.size() != 2) return false;
        if (b.size() == 1) return b[0] == a[1];
        return b.size() == 2 && b[0] == 1 && b[1] == a[1];
    }

    static double stable_sigmoid(double x) {
        if (x >= 0.0) {
            const double e = std::exp(-x);
            return 1.0 / (1.0 + e);
        }
        const double e = std::exp(x);
        return e / (1.0 + e);
    }

    Tensor binary_rowbcast(const char* name, const Tensor& a, const Tensor& b, bool neg) {
        const auto& sa = a.shape();
        const auto& sb = b.shape();
        const double sgn = neg ? -1.0 : 1.0;
        if (sa == sb) {
            Tensor out = Tensor::zeros(sa);
            auto& o = out.values();
            const auto& va = a.values();
            const auto& vb = b.values();
            for (std::size_t i = 0; i < o.size(); ++i) o[i] = va[i] + sgn * vb[i];
            record2(name, a, b, out, [a, b, out, sgn, this]() {
                const auto& g = adj(out);
                if (wants(a)) {
                    auto& ga = adj_mut(a);
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                }
                if (wants(b)) {
                    auto& gb = adj_mut(b);
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] += sgn * g[i];
                }
            });
            return out;
        }
        if (row_broadcastable(sa, sb)) {
            const std::size_t n = sa[0], f = sa[1];
            Tensor out = Tensor::zeros(sa);
            auto& o = out.values();
            const auto& va = a.values();
            const auto& vb = b.values();
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < f; ++c) o[r * f + c] = va[r * f + c] + sgn * vb[c];
            record2(name, a, b, out, [a, b, out, sgn, n, f, this]() {
                const auto& g = adj(out);
                if (wants(a)) {
                    auto& ga = adj_mut(a);
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                }
                if (wants(b)) {
                    auto& gb = adj_mut(b);
                    for (std::size_t r = 0; r < n; ++r)
                        for (std::size_t c = 0; c < f; ++c) gb[c] += sgn * g[r * f + c];
                }
            });
            return out;
        }
        throw ShapeError(std::string(name) + ": shapes " + shape_str(sa) + " and " +
                         shape_str(sb) + " do not conform");
    }

    bool wants(const Tensor& t) const { return t.requires_grad() || t.impl()->on_tape; }

    // adjoint of a tensor for the current backward pass, zero-initialized lazily
    const std::vector<double>& adj(const Tensor& t) {
        ensure_adjoint(t.impl());
        return t.impl()->adjoint;
    }
    std::vector<double>& adj_mut(const Tensor& t) {
        ensure_adjoint(t.impl());
        return t.impl()->adjoint;
    }
    void ensure_adjoint(detail::TensorImpl* p) {
        if (p->adjoint_epoch != epoch_) {
            p->adjoint.assign(p->values.size(), 0.0);
            p->adjoint_epoch = epoch_;
        }
    }

    void note_leaf(const Tensor& t) {
        auto* p = t.impl();
        if (p->requires_grad && !p->on_tape) {
            if (std::find(leaves_.begin(), leaves_.end(), p) == leaves_.end()) {
                leaves_.push_back(p);
                leaf_keepalive_.push_back(t.impl_ptr());
            }
        }
    }

    void record1(const char* name, const Tensor& a, Tensor& out, std::function<void()> bw) {
        if (!grad_enabled_ || !(a.requires_grad() || a.impl()->on_tape)) return;
        note_leaf(a);
        out.impl()->requires_grad = true;
        out.impl()->on_tape = true;
        ops_.push_back({name, std::move(bw), out.impl_ptr()});
    }

    void record2(const char* name, const Tensor& a, const Tensor& b, Tensor& out,
                 std::function<void()> bw) {
        const bool track_a = a.requires_grad() || a.impl()->on_tape;
        const bool track_b = b.requires_grad() || b.impl()->on_tape;
        if (!grad_enabled_ || (!track_a && !track_b)) return;
        note_leaf(a);
        note_leaf(b);
        out.impl()->requires_grad = true;
        out.impl()->on_tape = true;
        ops_.push_back({name, std::move(bw), out.impl_ptr()});
    }

    struct Entry {
        const char* name;
        std::function<void()> backward;
        std::shared_ptr<detail::TensorImpl> out_keep;
        detail::TensorImpl* out;
        Entry(const char* n, std::function<void()> b, std::shared_ptr<detail::TensorImpl> o)
            : name(n), backward(std::move(b)), out_keep(std::move(o)), out(out_keep.get()) {}
    };

    std::vector<Entry> ops_;
    std::vector<detail::TensorImpl*> leaves_;
    std::vector<std::shared_ptr<detail::TensorImpl>> leaf_keepalive_;
    std::vector<detail::TensorImpl*> consumed_;
    std::uint64_t epoch_ = 0;
    bool grad_enabled_ = true;
};

// RAII guard disabling tape recording (forward evaluation only).
class NoGradGuard {
  public:
    explicit NoGradGuard(Tape& t) : tape_(t), prev_(t.grad_enabled()) {
        tape_.set_grad_enabled(false);
    }
    ~NoGradGuard() { tape_.set_grad_enabled(prev_); }

  private:
    Tape& tape_;
    bool prev_;
};

// ----- Adam ---------------------------------------------------------------

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam with bias correction. step() applies the update from the accumulated
// grads and then zeroes them; moments are keyed by parameter order.
class Adam {
  public:
    Adam(std::vector<Tensor> params, AdamConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
        for (const auto& p : params_) {
            if (!p.requires_grad()) throw EquadError("adam: parameter does not require grad");
            m_.emplace_back(p.numel(), 0.0);
            v_.emplace_back(p.numel(), 0.0);
        }
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t k = 0; k < params_.size(); ++k) {
            auto& p = params_[k].values();
            auto& g = params_[k].grad();
            if (g.size() != p.size()) throw EquadError("adam: missing or mis-sized grad");
            auto& m = m_[k];
            auto& v = v_[k];
            for (std::size_t i = 0; i < p.size(); ++i) {
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                p[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
            std::fill(g.begin(), g.end(), 0.0);
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    std::uint64_t step_count() const { return t_; }
    const AdamConfig& config() const { return cfg_; }

  private:
    std::vector<Tensor> params_;
    AdamConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    std::uint64_t t_ = 0;
};

// ----- gradient checking ----------------------------------------------------

// Max over coordinates of |analytic - central difference| / max(1, |analytic|)
// for a scalar-valued function of one tensor.
inline double grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f, Tensor x,
                         double h = 1e-5) {
    if (h < 1e-6 || h > 1e-4) throw ConfigError("grad_check: step must be in [1e-6, 1e-4]");
    x.set_requires_grad(true);
    x.zero_grad();
    {
        Tape tape;
        Tensor loss = f(tape, x);
        if (loss.numel() != 1) throw EquadError("grad_check: f must be scalar-valued");
        if (!std::isfinite(loss.item())) throw NumericError("grad_check: non-finite f(x)");
        tape.backward(loss);
    }
    const std::vector<double> analytic = x.grad();

    double worst = 0.0;
    auto eval = [&](const Tensor& t) {
        Tape tape;
        NoGradGuard ng(tape);
        const double v = f(tape, t).item();
        if (!std::isfinite(v)) throw NumericError("grad_check: non-finite f near x");
        return v;
    };
    Tensor probe = Tensor::from(x.shape(), x.values());
    for (std::size_t i = 0; i < probe.numel(); ++i) {
        const double orig = probe.values()[i];
        probe.values()[i] = orig + h;
        const double fp = eval(probe);
        probe.values()[i] = orig - h;
        const double fm = eval(probe);
        probe.values()[i] = orig;
        const double numeric = (fp - fm) / (2.0 * h);
        const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace equad
