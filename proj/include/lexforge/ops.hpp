#pragma once

// Differentiable operations over Tensor<T>. Each op computes its forward value
// eagerly and, when the tape is recording and an input requires grad, records
// a backward rule that accumulates into the inputs' grad buffers.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numbers>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "lexforge/error.hpp"
#include "lexforge/tensor.hpp"

namespace lexforge::ops {

namespace detail {

template <typename T>
using RowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// C[m,n] (+)= op(A) * op(B) with op(A) of shape [m,k] and op(B) of shape
/// [k,n]. A transposed operand is stored with its dimensions swapped.
template <typename T>
void gemm(const T* a, bool trans_a, const T* b, bool trans_b, T* c, std::size_t m, std::size_t k, std::size_t n,
          bool accumulate) {
    using M = RowMajor<T>;
    using Idx = Eigen::Index;
    Eigen::Map<M> cm(c, static_cast<Idx>(m), static_cast<Idx>(n));
    auto run = [&](const auto& lhs, const auto& rhs) {
        if (accumulate)
            cm.noalias() += lhs * rhs;
        else
            cm.noalias() = lhs * rhs;
    };
    const Eigen::Map<const M> am(a, static_cast<Idx>(trans_a ? k : m), static_cast<Idx>(trans_a ? m : k));
    const Eigen::Map<const M> bm(b, static_cast<Idx>(trans_b ? n : k), static_cast<Idx>(trans_b ? k : n));
    if (!trans_a && !trans_b) run(am, bm);
    if (!trans_a && trans_b) run(am, bm.transpose());
    if (trans_a && !trans_b) run(am.transpose(), bm);
    if (trans_a && trans_b) run(am.transpose(), bm.transpose());
}

/// x * 0 is 0 for finite x and NaN otherwise, and a sum of zeros cannot
/// overflow, so the vectorized sum is an exact test.
template <typename T>
bool all_finite(std::span<const T> v) {
    return (Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>(v.data(), static_cast<Eigen::Index>(v.size())) * T(0))
               .sum() == T(0);
}

template <typename T>
void ensure_finite(const char* op, const Tensor<T>& t) {
    if (!all_finite(t.data()))
        throw NumericError(std::string("non-finite value produced by ") + op + " (output shape " + shape_str(t.shape()) + ")");
}

template <typename T>
void accumulate(Buffer<T>& dst, std::span<const T> src) {
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

template <typename T>
using ArrayMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstArrayMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

/// Accumulator type: double, or T when T is wider.
template <typename T>
using Acc = std::conditional_t<(sizeof(T) > sizeof(double)), T, double>;

/// y = exp(scale * (x - shift)) over n entries; returns the sum accumulated in
/// Acc<T>.
template <typename T>
Acc<T> exp_shifted(const T* x, T* y, std::size_t n, T shift, T scale = T(1)) {
    const auto len = static_cast<Eigen::Index>(n);
    ArrayMap<T> out(y, len);
    if (scale == T(1))
        out = (ConstArrayMap<T>(x, len) - shift).exp();
    else
        out = ((ConstArrayMap<T>(x, len) - shift) * scale).exp();
    return out.template cast<Acc<T>>().sum();
}

/// Softmax of scale * x over the first `visible(r)` entries of each row.
template <typename T, typename Visible>
void softmax_rows(const T* x, T* y, std::size_t rows, std::size_t n, Visible visible, T scale = T(1)) {
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t v = visible(r);
        const T* row = x + r * n;
        T* o = y + r * n;
        const T mx = ConstArrayMap<T>(row, static_cast<Eigen::Index>(v)).maxCoeff();
        const T inv = static_cast<T>(1.0 / exp_shifted(row, o, v, mx, scale));
        ArrayMap<T>(o, static_cast<Eigen::Index>(v)) *= inv;
    }
}

inline void require_suffix(const Shape& big, const Shape& small, const char* op) {
    bool ok = small.size() <= big.size();
    for (std::size_t i = 0; ok && i < small.size(); ++i) ok = big[big.size() - small.size() + i] == small[i];
    if (!ok) throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(small) + " against " + shape_str(big));
}

} // namespace detail

/// Batched matrix product a[..., m, k] · b[..., k, n] with numpy-style
/// broadcasting of the leading axes.
template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() < 2 || b.rank() < 2)
        throw ShapeError("matmul needs rank >= 2 operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const std::size_t m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
    if (b.dim(-2) != k)
        throw ShapeError("matmul inner extents differ: " + shape_str(a.shape()) + " and " + shape_str(b.shape()));

    const Shape la(a.shape().begin(), a.shape().end() - 2);
    const Shape lb(b.shape().begin(), b.shape().end() - 2);
    const std::size_t r = std::max(la.size(), lb.size());
    Shape lead(r);
    for (std::size_t i = 0; i < r; ++i) {
        const std::size_t da = i + la.size() >= r ? la[i + la.size() - r] : 1;
        const std::size_t db = i + lb.size() >= r ? lb[i + lb.size() - r] : 1;
        if (da != db && da != 1 && db != 1)
            throw ShapeError("matmul cannot broadcast " + shape_str(a.shape()) + " with " + shape_str(b.shape()));
        lead[i] = std::max(da, db);
    }
    const std::size_t batches = numel(lead);
    // Per-batch matrix offsets into a and b (in units of whole matrices).
    std::vector<std::size_t> off_a(batches), off_b(batches);
    for (std::size_t flat = 0; flat < batches; ++flat) {
        std::size_t rem = flat, ia = 0, ib = 0, sa = 1, sb = 1;
        for (std::size_t i = r; i-- > 0;) {
            const std::size_t idx = rem % lead[i];
            rem /= lead[i];
            if (i + la.size() >= r) {
                const std::size_t d = la[i + la.size() - r];
                if (d != 1) ia += idx * sa;
                sa *= d;
            }
            if (i + lb.size() >= r) {
                const std::size_t d = lb[i + lb.size() - r];
                if (d != 1) ib += idx * sb;
                sb *= d;
            }
        }
        off_a[flat] = ia;
        off_b[flat] = ib;
    }

    Shape out_shape = lead;
    out_shape.push_back(m);
    out_shape.push_back(n);
    const bool needs = tape.needs_grad({&a, &b});
    Tensor<T> out = Tensor<T>::zeros(out_shape, needs);
    // A rank-2 right operand lets every leading row fold into one product.
    const bool fold = lb.empty();
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    T* pc = out.mutable_data().data();
    if (fold) {
        detail::gemm(pa, false, pb, false, pc, a.numel() / k, k, n, false);
    } else {
        for (std::size_t i = 0; i < batches; ++i)
            detail::gemm(pa + off_a[i] * m * k, false, pb + off_b[i] * k * n, false, pc + i * m * n, m, k, n, false);
    }
    detail::ensure_finite("matmul", out);

    if (needs) {
        tape.record([an = a.node_ptr(), bn = b.node_ptr(), on = out.node_ptr(), m, k, n, fold, batches,
                     off_a = std::move(off_a), off_b = std::move(off_b)] {
            if (on->grad.empty()) return;
            const T* g = on->grad.data();
            if (an->requires_grad) {
                an->ensure_grad();
                if (fold) {
                    detail::gemm(g, false, bn->value.data(), true, an->grad.data(), an->value.size() / k, n, k, true);
                } else {
                    for (std::size_t i = 0; i < batches; ++i)
                        detail::gemm(g + i * m * n, false, bn->value.data() + off_b[i] * k * n, true,
                                     an->grad.data() + off_a[i] * m * k, m, n, k, true);
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                if (fold) {
                    detail::gemm(an->value.data(), true, g, false, bn->grad.data(), k, an->value.size() / k, n, true);
                } else {
                    for (std::size_t i = 0; i < batches; ++i)
                        detail::gemm(an->value.data() + off_a[i] * m * k, true, g + i * m * n, false,
                                     bn->grad.data() + off_b[i] * k * n, k, m, n, true);
                }
            }
        });
    }
    return out;
}

/// Axis permutation: out.shape[i] = x.shape[perm[i]].
template <typename T>
Tensor<T> permute(Tape<T>& tape, const Tensor<T>& x, const std::vector<std::size_t>& perm) {
    const std::size_t r = x.rank();
    if (perm.size() != r) throw ShapeError("permute: " + std::to_string(perm.size()) + " axes for " + shape_str(x.shape()));
    std::vector<char> seen(r, 0);
    for (const auto p : perm) {
        if (p >= r || seen[p]) throw ShapeError("permute: invalid axis order for " + shape_str(x.shape()));
        seen[p] = 1;
    }
    Shape out_shape(r);
    std::vector<std::size_t> in_stride(r, 1);
    for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * x.shape()[i];
    std::vector<std::size_t> src_stride(r);
    for (std::size_t i = 0; i < r; ++i) {
        out_shape[i] = x.shape()[perm[i]];
        src_stride[i] = in_stride[perm[i]];
    }
    const bool needs = tape.needs_grad({&x});
    Tensor<T> out = Tensor<T>::zeros(out_shape, needs);

    // Maps each destination element (in row-major order) to its source index.
    auto walk = [out_shape, src_stride, r](auto&& visit) {
        const std::size_t total = numel(out_shape);
        std::vector<std::size_t> idx(r, 0);
        std::size_t src = 0;
        for (std::size_t dst = 0; dst < total; ++dst) {
            visit(dst, src);
            for (std::size_t i = r; i-- > 0;) {
                ++idx[i];
                src += src_stride[i];
                if (idx[i] < out_shape[i]) break;
                src -= src_stride[i] * idx[i];
                idx[i] = 0;
            }
        }
    };
    {
        const T* in = x.data().data();
        T* o = out.mutable_data().data();
        walk([&](std::size_t dst, std::size_t src) { o[dst] = in[src]; });
    }
    if (needs) {
        tape.record([xn = x.node_ptr(), on = out.node_ptr(), walk] {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            T* gx = xn->grad.data();
            const T* go = on->grad.data();
            walk([&](std::size_t dst, std::size_t src) { gx[src] += go[dst]; });
        });
    }
    return out;
}

/// Swaps the last two axes.
template <typename T>
Tensor<T> transpose(Tape<T>& tape, const Tensor<T>& x) {
    if (x.rank() < 2) throw ShapeError("transpose needs rank >= 2, got " + shape_str(x.shape()));
    std::vector<std::size_t> perm(x.rank());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
    return permute(tape, x, perm);
}

template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x, Shape shape) {
    if (numel(shape) != x.numel())
        throw ShapeError("reshape " + shape_str(x.shape()) + " to " + shape_str(shape) + " changes the element count");
    const bool needs = tape.needs_grad({&x});
    Tensor<T> out(std::move(shape), Buffer<T>(x.data().begin(), x.data().end()), needs);
    if (needs) {
        tape.record([xn = x.node_ptr(), on = out.node_ptr()] {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            detail::accumulate<T>(xn->grad, on->grad);
        });
    }
    return out;
}

namespace detail {

enum class Binary { Add, Mul };

template <typename T>
Tensor<T> binary(Tape<T>& tape, const Tensor<T>& a_in, const Tensor<T>& b_in, Binary kind) {
    // Arrange so that `b` is the (possibly) broadcast operand.
    const bool swap = a_in.rank() < b_in.rank() || (a_in.rank() == b_in.rank() && a_in.numel() < b_in.numel());
    const Tensor<T>& a = swap ? b_in : a_in;
    const Tensor<T>& b = swap ? a_in : b_in;
    require_suffix(a.shape(), b.shape(), kind == Binary::Add ? "add" : "mul");
    const std::size_t inner = b.numel();
    const std::size_t outer = a.numel() / inner;
    const bool needs = tape.needs_grad({&a, &b});
    Tensor<T> out = Tensor<T>::zeros(a.shape(), needs);
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    T* po = out.mutable_data().data();
    for (std::size_t o = 0; o < outer; ++o) {
        const T* ra = pa + o * inner;
        T* ro = po + o * inner;
        if (kind == Binary::Add)
            for (std::size_t i = 0; i < inner; ++i) ro[i] = ra[i] + pb[i];
        else
            for (std::size_t i = 0; i < inner; ++i) ro[i] = ra[i] * pb[i];
    }
    ensure_finite(kind == Binary::Add ? "add" : "mul", out);
    if (needs) {
        tape.record([an = a.node_ptr(), bn = b.node_ptr(), on = out.node_ptr(), inner, outer, kind] {
            if (on->grad.empty()) return;
            const T* g = on->grad.data();
            if (an->requires_grad) {
                an->ensure_grad();
                T* ga = an->grad.data();
                if (kind == Binary::Add) {
                    for (std::size_t i = 0; i < outer * inner; ++i) ga[i] += g[i];
                } else {
                    const T* vb = bn->value.data();
                    for (std::size_t o = 0; o < outer; ++o)
                        for (std::size_t i = 0; i < inner; ++i) ga[o * inner + i] += g[o * inner + i] * vb[i];
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                T* gb = bn->grad.data();
                const T* va = an->value.data();
                for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t i = 0; i < inner; ++i)
                        gb[i] += kind == Binary::Add ? g[o * inner + i] : g[o * inner + i] * va[o * inner + i];
            }
        });
    }
    return out;
}

} // namespace detail

/// a + b where one operand's shape is a trailing suffix of the other's.
template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary(tape, a, b, detail::Binary::Add);
}

/// Elementwise a * b with the same broadcasting rule as add().
template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary(tape, a, b, detail::Binary::Mul);
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T factor) {
    const bool needs = tape.needs_grad({&x});
    Tensor<T> out = Tensor<T>::zeros(x.shape(), needs);
    auto o = out.mutable_data();
    const auto in = x.data();
    for (std::size_t i = 0; i < in.size(); ++i) o[i] = in[i] * factor;
    detail::ensure_finite("scale", out);
    if (needs) {
        tape.record([xn = x.node_ptr(), on = out.node_ptr(), factor] {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i] * factor;
        });
    }
    return out;
}

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
    detail::Acc<T> acc = 0;
    for (const T v : x.data()) acc += v;
    const bool needs = tape.needs_grad({&x});
    Tensor<T> out(Shape{}, Buffer<T>{static_cast<T>(acc)}, needs);
    detail::ensure_finite("sum", out);
    if (needs) {
        tape.record([xn = x.node_ptr(), on = out.node_ptr()] {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            const T g = on->grad[0];
            for (auto& v : xn->grad) v += g;
        });
    }
    return out;
}

/// Per-row standardization over the last axis followed by gain and bias.
template <typename T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5)) {
    const std::size_t d = x.dim(-1);
    if (gain.shape() != Shape{d} || bias.shape() != Shape{d})
        throw ShapeError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " + shape_str(bias.shape()) +
                         " do not match rows of " + shape_str(x.shape()));
    const std::size_t rows = x.numel() / d;
    const bool needs = tape.needs_grad({&x, &gain, &bias});
    Tensor<T> out = Tensor<T>::zeros(x.shape(), needs);
    Buffer<T> xhat(needs ? x.numel() : 0);
    Buffer<T> rstd(needs ? rows : 0);
    const T* px = x.data().data();
    const T* pg = gain.data().data();
    const T* pb = bias.data().data();
    T* po = out.mutable_data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = px + r * d;
        using A = detail::Acc<T>;
        A mean = 0;
        for (std::size_t i = 0; i < d; ++i) mean += row[i];
        mean /= static_cast<A>(d);
        A var = 0;
        for (std::size_t i = 0; i < d; ++i) {
            const A c = row[i] - mean;
            var += c * c;
        }
        var /= static_cast<A>(d);
        const T rs = static_cast<T>(A(1) / std::sqrt(var + static_cast<A>(eps)));
        const T mu = static_cast<T>(mean);
        for (std::size_t i = 0; i < d; ++i) {
            const T h = (row[i] - mu) * rs;
            po[r * d + i] = h * pg[i] + pb[i];
            if (needs) xhat[r * d + i] = h;
        }
        if (needs) rstd[r] = rs;
    }
    detail::ensure_finite("layer_norm", out);
    if (needs) {
        tape.record([xn = x.node_ptr(), gn = gain.node_ptr(), bn = bias.node_ptr(), on = out.node_ptr(),
                     xhat = std::move(xhat), rstd = std::move(rstd), d, rows] {
            if (on->grad.empty()) return;
            const T* g = on->grad.data();
            if (gn->requires_grad || bn->requires_grad) {
                gn->ensure_grad();
                bn->ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t i = 0; i < d; ++i) {
                        gn->grad[i] += g[r * d + i] * xhat[r * d + i];
                        bn->grad[i] += g[r * d + i];
                    }
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                const T* gain_v = gn->value.data();
                Buffer<T> dh(d);
                for (std::size_t r = 0; r < rows; ++r) {
                    detail::Acc<T> mean_dh = 0, mean_dh_h = 0;
                    for (std::size_t i = 0; i < d; ++i) {
                        dh[i] = g[r * d + i] * gain_v[i];
                        mean_dh += dh[i];
                        mean_dh_h += static_cast<detail::Acc<T>>(dh[i]) * xhat[r * d + i];
                    }
                    mean_dh /= static_cast<detail::Acc<T>>(d);
                    mean_dh_h /= static_cast<detail::Acc<T>>(d);
                    for (std::size_t i = 0; i < d; ++i)
                        xn->grad[r * d + i] +=
                            rstd[r] * (dh[i] - static_cast<T>(mean_dh) - xhat[r * d + i] * static_cast<T>(mean_dh_h));
                }
            }
        });
    }
    return out;
}

namespace detail {

template <typename T>
void softmax_backward(const T* y, const T* gy, T* gx, std::size_t rows, std::size_t n, T scale = T(1)) {
    for (std::size_t r = 0; r < rows; ++r) {
        const T* yr = y + r * n;
        const T* gr = gy + r * n;
        Acc<T> dot = 0;
        for (std::size_t i = 0; i < n; ++i) dot += static_cast<Acc<T>>(yr[i]) * gr[i];
        const T dt = static_cast<T>(dot);
        for (std::size_t i = 0; i < n; ++i) gx[r * n + i] += scale * yr[i] * (gr[i] - dt);
    }
}

} // namespace detail

/// Softmax over the last axis, max-subtracted.
template <typename T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& x) {
    const std::size_t n = x.dim(-1);
    const std::size_t rows = x.numel() / n;
    const bool needs = tape.needs_grad({&x});
    Tensor<T> out = Tensor<T>::zeros(x.shape(), needs);
    detail::softmax_rows(x.data().data(), out.mutable_data().data(), rows, n, [n](std::size_t) { return n; });
    detail::ensure_finite("softmax", out);
    if (needs) {
        tape.record([xn = x.node_ptr(), on = out.node_ptr(), rows, n] {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            detail::softmax_backward(on->value.data(), on->grad.data(), xn->grad.data(), rows, n);
        });
    }
    return out;
}

/// Softmax of scale * x over the last axis of x[..., Tq, Tk] where query row i
/// may only see key columns j <= i + offset; hidden entries are exactly zero.
template <typename T>
Tensor<T> causal_softmax(Tape<T>& tape, const Tensor<T>& x, std::size_t offset = 0, T scale = T(1)) {
    if (x.rank() < 2) throw ShapeError("causal_softmax needs rank >= 2, got " + shape_str(x.shape()));
    const std::size_t tq = x.dim(-2), tk = x.dim(-1);
    if (tq + offset > tk)
        throw ShapeError("causal_softmax: " + std::to_string(tq) + " queries at offset " + std::to_string(offset) +
                         " exceed " + std::to_string(tk) + " keys");
    if (!(scale > T(0))) throw ConfigError("causal_softmax scale must be positive");
    const std::size_t rows = x.numel() / tk;
    const bool needs = tape.needs_grad({&x});
    Tensor<T> out = Tensor<T>::zeros(x.shape(), needs);
    detail::softmax_rows(x.data().data(), out.mutable_data().data(), rows, tk,
                         [tq, offset](std::size_t r) { return (r % tq) + offset + 1; }, scale);
    detail::ensure_finite("causal_softmax", out);
    if (needs) {
        tape.record([xn = x.node_ptr(), on = out.node_ptr(), rows, tk, scale] {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            // Hidden entries have y = 0, so the dense rule leaves them untouched.
            detail::softmax_backward(on->value.data(), on->grad.data(), xn->grad.data(), rows, tk, scale);
        });
    }
    return out;
}

/// GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <typename T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& x) {
    static constexpr T c = static_cast<T>(0.7978845608028654); // sqrt(2/pi)
    static constexpr T k = static_cast<T>(0.044715);
    const bool needs = tape.needs_grad({&x});
    Tensor<T> out = Tensor<T>::zeros(x.shape(), needs);
    const auto n = static_cast<Eigen::Index>(x.numel());
    const detail::ConstArrayMap<T> in(x.data().data(), n);
    // 0.5 (1 + tanh u) = sigmoid(2u), which keeps precision where tanh u is near -1.
    detail::ArrayMap<T>(out.mutable_data().data(), n) = in / (T(1) + (T(-2) * c * (in + k * in.cube())).exp());
    detail::ensure_finite("gelu", out);
    if (needs) {
        tape.record([xn = x.node_ptr(), on = out.node_ptr()] {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            const auto n = static_cast<Eigen::Index>(xn->value.size());
            const detail::ConstArrayMap<T> v(xn->value.data(), n);
            const Eigen::Array<T, Eigen::Dynamic, 1> u2 = T(2) * c * (v + k * v.cube());
            const Eigen::Array<T, Eigen::Dynamic, 1> s = T(1) / (T(1) + (-u2).exp());
            const Eigen::Array<T, Eigen::Dynamic, 1> s_neg = T(1) / (T(1) + u2.exp());
            detail::ArrayMap<T>(xn->grad.data(), n) +=
                detail::ConstArrayMap<T>(on->grad.data(), n) *
                (s + v * s * s_neg * T(2) * c * (T(1) + T(3) * k * v.square()));
        });
    }
    return out;
}

/// Row lookup: out[..., :] = table[ids[...], :].
template <typename T>
Tensor<T> embedding(Tape<T>& tape, const Tensor<T>& table, std::span<const std::int32_t> ids, const Shape& ids_shape) {
    if (table.rank() != 2) throw ShapeError("embedding table must be rank 2, got " + shape_str(table.shape()));
    if (numel(ids_shape) != ids.size())
        throw ShapeError("embedding: ids shape " + shape_str(ids_shape) + " does not match " + std::to_string(ids.size()) + " ids");
    const std::size_t vocab = table.dim(0), d = table.dim(1);
    for (std::size_t i = 0; i < ids.size(); ++i)
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab)
            throw InputError("embedding: id " + std::to_string(ids[i]) + " at position " + std::to_string(i) +
                             " outside vocabulary of size " + std::to_string(vocab));
    Shape out_shape = ids_shape;
    out_shape.push_back(d);
    const bool needs = tape.needs_grad({&table});
    Tensor<T> out = Tensor<T>::zeros(out_shape, needs);
    const T* pt = table.data().data();
    T* po = out.mutable_data().data();
    for (std::size_t i = 0; i < ids.size(); ++i)
        std::copy_n(pt + static_cast<std::size_t>(ids[i]) * d, d, po + i * d);
    if (needs) {
        tape.record([tn = table.node_ptr(), on = out.node_ptr(), ids = std::vector<std::int32_t>(ids.begin(), ids.end()), d] {
            if (on->grad.empty()) return;
            tn->ensure_grad();
            for (std::size_t i = 0; i < ids.size(); ++i) {
                T* row = tn->grad.data() + static_cast<std::size_t>(ids[i]) * d;
                const T* g = on->grad.data() + i * d;
                for (std::size_t j = 0; j < d; ++j) row[j] += g[j];
            }
        });
    }
    return out;
}

/// Mean negative log-softmax of the target entries over rows whose target is
/// not `ignore_id`.
template <typename T>
Tensor<T> cross_entropy(Tape<T>& tape, const Tensor<T>& logits, std::span<const std::int32_t> targets,
                        std::int32_t ignore_id = -1) {
    const std::size_t vocab = logits.dim(-1);
    const std::size_t rows = logits.numel() / vocab;
    if (targets.size() != rows)
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " + shape_str(logits.shape()));
    std::size_t count = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (targets[r] == ignore_id) continue;
        if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab)
            throw InputError("cross_entropy: target " + std::to_string(targets[r]) + " at row " + std::to_string(r) +
                             " outside vocabulary of size " + std::to_string(vocab));
        ++count;
    }
    if (count == 0) throw InputError("cross_entropy: every target is ignored");

    const T* pl = logits.data().data();
    Buffer<T> scratch(vocab);
    using A = detail::Acc<T>;
    A total = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (targets[r] == ignore_id) continue;
        const T* row = pl + r * vocab;
        const T mx = detail::ConstArrayMap<T>(row, static_cast<Eigen::Index>(vocab)).maxCoeff();
        const A s = detail::exp_shifted(row, scratch.data(), vocab, mx);
        total += static_cast<A>(mx) + std::log(s) - static_cast<A>(row[targets[r]]);
    }
    const bool needs = tape.needs_grad({&logits});
    Tensor<T> out(Shape{}, Buffer<T>{static_cast<T>(total / static_cast<A>(count))}, needs);
    detail::ensure_finite("cross_entropy", out);
    if (needs) {
        tape.record([ln = logits.node_ptr(), on = out.node_ptr(), tg = std::vector<std::int32_t>(targets.begin(), targets.end()),
                     ignore_id, vocab, count] {
            if (on->grad.empty()) return;
            ln->ensure_grad();
            const T scale = on->grad[0] / static_cast<T>(count);
            Buffer<T> p(vocab);
            for (std::size_t r = 0; r < tg.size(); ++r) {
                if (tg[r] == ignore_id) continue;
                const T* row = ln->value.data() + r * vocab;
                T* g = ln->grad.data() + r * vocab;
                const T mx = detail::ConstArrayMap<T>(row, static_cast<Eigen::Index>(vocab)).maxCoeff();
                const T factor = static_cast<T>(scale / detail::exp_shifted(row, p.data(), vocab, mx));
                detail::ArrayMap<T>(g, static_cast<Eigen::Index>(vocab)) +=
                    factor * detail::ConstArrayMap<T>(p.data(), static_cast<Eigen::Index>(vocab));
                g[tg[r]] -= scale;
            }
        });
    }
    return out;
}

/// Rotary position embedding on x[..., T, heads, d_head]: channel pairs
/// (2i, 2i+1) for 2i < rotary_dim are rotated by (pos_offset + t) * base^(-2i/rotary_dim);
/// remaining channels pass through.
template <typename T>
Tensor<T> rotary(Tape<T>& tape, const Tensor<T>& x, std::size_t rotary_dim, double base = 10000.0,
                 std::size_t pos_offset = 0) {
    if (x.rank() < 3) throw ShapeError("rotary expects [..., T, heads, d_head], got " + shape_str(x.shape()));
    const std::size_t seq = x.dim(-3), heads = x.dim(-2), dh = x.dim(-1);
    if (rotary_dim % 2 != 0) throw ConfigError("rotary_dim must be even, got " + std::to_string(rotary_dim));
    if (rotary_dim > dh)
        throw ConfigError("rotary_dim " + std::to_string(rotary_dim) + " exceeds d_head " + std::to_string(dh));
    const std::size_t half = rotary_dim / 2;
    Buffer<T> cos_t(seq * half), sin_t(seq * half);
    for (std::size_t t = 0; t < seq; ++t)
        for (std::size_t i = 0; i < half; ++i) {
            const double inv_freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(rotary_dim));
            const double angle = static_cast<double>(pos_offset + t) * inv_freq;
            cos_t[t * half + i] = static_cast<T>(std::cos(angle));
            sin_t[t * half + i] = static_cast<T>(std::sin(angle));
        }
    const std::size_t outer = x.numel() / (seq * heads * dh);
    auto apply = [=](const T* in, T* out, const Buffer<T>& c, const Buffer<T>& s, bool inverse) {
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t t = 0; t < seq; ++t)
                for (std::size_t h = 0; h < heads; ++h) {
                    const std::size_t base_idx = ((o * seq + t) * heads + h) * dh;
                    const T* xi = in + base_idx;
                    T* yi = out + base_idx;
                    for (std::size_t i = 0; i < half; ++i) {
                        const T cs = c[t * half + i];
                        const T sn = inverse ? -s[t * half + i] : s[t * half + i];
                        const T a = xi[2 * i], b = xi[2 * i + 1];
                        yi[2 * i] += a * cs - b * sn;
                        yi[2 * i + 1] += a * sn + b * cs;
                    }
                    for (std::size_t j = rotary_dim; j < dh; ++j) yi[j] += xi[j];
                }
    };
    const bool needs = tape.needs_grad({&x});
    Tensor<T> out = Tensor<T>::zeros(x.shape(), needs);
    apply(x.data().data(), out.mutable_data().data(), cos_t, sin_t, false);
    if (needs) {
        tape.record([xn = x.node_ptr(), on = out.node_ptr(), apply, cos_t = std::move(cos_t), sin_t = std::move(sin_t)] {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            apply(on->grad.data(), xn->grad.data(), cos_t, sin_t, true);
        });
    }
    return out;
}

} // namespace lexforge::ops
