#pragma once

// Differentiable primitives. Each op computes its forward value eagerly and,
// when tracking is on, attaches a closure that accumulates parent gradients.
//
// Parallel loops always assign each output element to exactly one thread and
// keep the per-element reduction order fixed, so results do not depend on the
// number of threads.

#include <cmath>
#include <cstdint>

#include "vfmtok/tensor.hpp"

namespace vfmtok {

// ---------------------------------------------------------------- broadcast

namespace detail {

// rhs must equal lhs shape, be a suffix of it, or be a single element.
template <typename S>
int64_t broadcast_extent(Tensor<S> a, Tensor<S> b, const char* op) {
    if (b.numel() == 1) return 1;
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    bool suffix = bs.size() <= as.size();
    if (suffix) {
        for (size_t i = 0; i < bs.size(); ++i)
            suffix = suffix && bs[bs.size() - 1 - i] == as[as.size() - 1 - i];
    }
    require(suffix, std::string(op) + ": shape " + shape_str(bs) +
                        " does not broadcast over " + shape_str(as));
    return b.numel();
}

// Reduce a full-size gradient onto a broadcast operand.
template <typename S>
void reduce_into(std::vector<S>& dst, const std::vector<S>& g, int64_t bn) {
    for (size_t i = 0; i < g.size(); ++i) dst[i % static_cast<size_t>(bn)] += g[i];
}

}  // namespace detail

template <typename S, typename FwdFn, typename BwdFn>
Tensor<S> binary_elementwise(Tensor<S> a, Tensor<S> b, const char* op, FwdFn fwd,
                             BwdFn bwd) {
    int64_t bn = detail::broadcast_extent(a, b, op);
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    const auto& ad = a.data();
    const auto& bd = b.data();
    auto& od = out.data();
    const int64_t n = a.numel();
#pragma omp parallel for schedule(static) if (n > detail::work_threshold())
    for (int64_t i = 0; i < n; ++i)
        od[static_cast<size_t>(i)] =
            fwd(ad[static_cast<size_t>(i)], bd[static_cast<size_t>(i % bn)]);
    detail::attach(out, {a, b}, op, [a, b, bn, bwd](Node<S>& self) mutable {
        const auto& g = self.grad;
        if (a.requires_grad()) {
            auto& da = a.grad();
            const int64_t n2 = static_cast<int64_t>(g.size());
#pragma omp parallel for schedule(static) if (n2 > detail::work_threshold())
            for (int64_t i = 0; i < n2; ++i) {
                size_t k = static_cast<size_t>(i);
                da[k] += bwd(g[k], a.data()[k], b.data()[static_cast<size_t>(i % bn)], true);
            }
        }
        if (b.requires_grad()) {
            auto& db = b.grad();
            for (size_t i = 0; i < g.size(); ++i)
                db[i % static_cast<size_t>(bn)] +=
                    bwd(g[i], a.data()[i], b.data()[i % static_cast<size_t>(bn)], false);
        }
    });
    return out;
}

template <typename S>
Tensor<S> add(Tensor<S> a, Tensor<S> b) {
    return binary_elementwise(
        a, b, "add", [](S x, S y) { return x + y; },
        [](S g, S, S, bool) { return g; });
}

template <typename S>
Tensor<S> sub(Tensor<S> a, Tensor<S> b) {
    return binary_elementwise(
        a, b, "sub", [](S x, S y) { return x - y; },
        [](S g, S, S, bool wrt_a) { return wrt_a ? g : -g; });
}

template <typename S>
Tensor<S> mul(Tensor<S> a, Tensor<S> b) {
    return binary_elementwise(
        a, b, "mul", [](S x, S y) { return x * y; },
        [](S g, S x, S y, bool wrt_a) { return wrt_a ? g * y : g * x; });
}

template <typename S, typename FwdFn, typename BwdFn>
Tensor<S> unary_elementwise(Tensor<S> a, const char* op, FwdFn fwd, BwdFn bwd) {
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    const auto& ad = a.data();
    auto& od = out.data();
    const int64_t n = a.numel();
#pragma omp parallel for schedule(static) if (n > detail::work_threshold())
    for (int64_t i = 0; i < n; ++i) od[static_cast<size_t>(i)] = fwd(ad[static_cast<size_t>(i)]);
    detail::attach(out, {a}, op, [a, bwd](Node<S>& self) mutable {
        if (!a.requires_grad()) return;
        auto& da = a.grad();
        const auto& g = self.grad;
        const int64_t n2 = static_cast<int64_t>(g.size());
#pragma omp parallel for schedule(static) if (n2 > detail::work_threshold())
        for (int64_t i = 0; i < n2; ++i) {
            size_t k = static_cast<size_t>(i);
            da[k] += bwd(g[k], a.data()[k], self.data[k]);
        }
    });
    return out;
}

template <typename S>
Tensor<S> scale(Tensor<S> a, S c) {
    return unary_elementwise(
        a, "scale", [c](S x) { return x * c; }, [c](S g, S, S) { return g * c; });
}

template <typename S>
Tensor<S> add_scalar(Tensor<S> a, S c) {
    return unary_elementwise(
        a, "add_scalar", [c](S x) { return x + c; }, [](S g, S, S) { return g; });
}

template <typename S>
Tensor<S> neg(Tensor<S> a) {
    return scale(a, S(-1));
}

template <typename S>
Tensor<S> gelu(Tensor<S> a) {
    // exact form: 0.5 x (1 + erf(x / sqrt(2)))
    const S inv_sqrt2 = S(0.7071067811865475244);
    const S inv_sqrt2pi = S(0.3989422804014326779);
    return unary_elementwise(
        a, "gelu",
        [=](S x) { return S(0.5) * x * (S(1) + std::erf(x * inv_sqrt2)); },
        [=](S g, S x, S) {
            S cdf = S(0.5) * (S(1) + std::erf(x * inv_sqrt2));
            S pdf = inv_sqrt2pi * std::exp(S(-0.5) * x * x);
            return g * (cdf + x * pdf);
        });
}

template <typename S>
Tensor<S> sigmoid(Tensor<S> a) {
    return unary_elementwise(
        a, "sigmoid",
        [](S x) { return x >= 0 ? S(1) / (S(1) + std::exp(-x)) : std::exp(x) / (S(1) + std::exp(x)); },
        [](S g, S, S y) { return g * y * (S(1) - y); });
}

template <typename S>
Tensor<S> sin_op(Tensor<S> a) {
    return unary_elementwise(
        a, "sin", [](S x) { return std::sin(x); }, [](S g, S x, S) { return g * std::cos(x); });
}

// --------------------------------------------------------------- reductions

template <typename S>
Tensor<S> sum_all(Tensor<S> a) {
    S acc = 0;
    for (S v : a.data()) acc += v;
    Tensor<S> out = Tensor<S>::scalar(acc);
    detail::attach(out, {a}, "sum", [a](Node<S>& self) mutable {
        if (!a.requires_grad()) return;
        S g = self.grad[0];
        for (auto& d : a.grad()) d += g;
    });
    return out;
}

template <typename S>
Tensor<S> mean_all(Tensor<S> a) {
    return scale(sum_all(a), S(1) / static_cast<S>(a.numel()));
}

// Sum over one axis (removed from the output shape).
template <typename S>
Tensor<S> sum_axis(Tensor<S> a, int axis) {
    const Shape& s = a.shape();
    if (axis < 0) axis += a.ndim();
    require(axis >= 0 && axis < a.ndim(), "sum_axis: bad axis");
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
    for (int i = axis + 1; i < a.ndim(); ++i) inner *= s[static_cast<size_t>(i)];
    const int64_t ax = s[static_cast<size_t>(axis)];
    Shape os;
    for (int i = 0; i < a.ndim(); ++i)
        if (i != axis) os.push_back(s[static_cast<size_t>(i)]);
    if (os.empty()) os.push_back(1);
    Tensor<S> out = Tensor<S>::zeros(os);
    const auto& ad = a.data();
    auto& od = out.data();
#pragma omp parallel for schedule(static) if (outer * inner > detail::work_threshold())
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t j = 0; j < ax; ++j) {
            const S* src = ad.data() + (o * ax + j) * inner;
            S* dst = od.data() + o * inner;
            for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    detail::attach(out, {a}, "sum_axis", [a, outer, inner, ax](Node<S>& self) mutable {
        if (!a.requires_grad()) return;
        auto& da = a.grad();
        const auto& g = self.grad;
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t j = 0; j < ax; ++j) {
                S* dst = da.data() + (o * ax + j) * inner;
                const S* src = g.data() + o * inner;
                for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
            }
    });
    return out;
}

// ------------------------------------------------------------------- matmul

namespace detail {

// c[M,N] += a[M,K] b[K,N], row-major, fixed k-then-j order per output row.
template <typename S>
void gemm_nn_acc(S* c, const S* a, const S* b, int64_t m_rows, int64_t k_dim, int64_t n_cols) {
    for (int64_t i = 0; i < m_rows; ++i) {
        S* crow = c + i * n_cols;
        const S* arow = a + i * k_dim;
        for (int64_t k = 0; k < k_dim; ++k) {
            const S av = arow[k];
            const S* brow = b + k * n_cols;
            for (int64_t j = 0; j < n_cols; ++j) crow[j] += av * brow[j];
        }
    }
}

// c[M,K] += g[M,N] b[K,N]^T
template <typename S>
void gemm_nt_acc(S* c, const S* g, const S* b, int64_t m_rows, int64_t n_cols, int64_t k_dim) {
    for (int64_t i = 0; i < m_rows; ++i) {
        S* crow = c + i * k_dim;
        const S* grow = g + i * n_cols;
        for (int64_t k = 0; k < k_dim; ++k) {
            const S* brow = b + k * n_cols;
            S acc = 0;
            for (int64_t j = 0; j < n_cols; ++j) acc += grow[j] * brow[j];
            crow[k] += acc;
        }
    }
}

}  // namespace detail

// Batched matrix product. Accepts a[..., M, K] with either b[K, N] (shared
// weight, broadcast over leading dims) or b[..., K, N] with identical leading
// dims. Backward: dA = dC B^T, dB = A^T dC (summed over the batch when shared).
template <typename S>
Tensor<S> matmul(Tensor<S> a, Tensor<S> b) {
    require(a.ndim() >= 2 && b.ndim() >= 2,
            "matmul: need >=2-d operands, got " + shape_str(a.shape()) + " and " +
                shape_str(b.shape()));
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    const int64_t M = as[as.size() - 2], K = as[as.size() - 1];
    const int64_t Kb = bs[bs.size() - 2], N = bs[bs.size() - 1];
    require(K == Kb, "matmul: inner extents disagree: " + shape_str(as) + " x " + shape_str(bs));
    int64_t batch = 1;
    for (size_t i = 0; i + 2 < as.size(); ++i) batch *= as[i];
    bool shared_b = bs.size() == 2;
    if (!shared_b) {
        require(bs.size() == as.size(), "matmul: rank mismatch: " + shape_str(as) + " x " +
                                            shape_str(bs));
        for (size_t i = 0; i + 2 < as.size(); ++i)
            require(as[i] == bs[i],
                    "matmul: leading dims disagree: " + shape_str(as) + " x " + shape_str(bs));
    }
    Shape os(as.begin(), as.end() - 2);
    os.push_back(static_cast<int>(M));
    os.push_back(static_cast<int>(N));
    Tensor<S> out = Tensor<S>::zeros(os);
    const S* ad = a.data().data();
    const S* bd = b.data().data();
    S* od = out.data().data();
#pragma omp parallel for schedule(static) if (batch * M * K * N > detail::work_threshold())
    for (int64_t t = 0; t < batch; ++t)
        detail::gemm_nn_acc(od + t * M * N, ad + t * M * K, bd + (shared_b ? 0 : t * K * N),
                            M, K, N);
    detail::attach(out, {a, b}, "matmul",
                   [a, b, M, K, N, batch, shared_b](Node<S>& self) mutable {
                       const S* g = self.grad.data();
                       if (a.requires_grad()) {
                           S* da = a.grad().data();
                           const S* bd2 = b.data().data();
#pragma omp parallel for schedule(static) if (batch * M * K * N > detail::work_threshold())
                           for (int64_t t = 0; t < batch; ++t)
                               detail::gemm_nt_acc(da + t * M * K, g + t * M * N,
                                                   bd2 + (shared_b ? 0 : t * K * N), M, N, K);
                       }
                       if (b.requires_grad()) {
                           S* db = b.grad().data();
                           const S* ad2 = a.data().data();
                           if (shared_b) {
                               // each dB row k owned by one thread; batch loop inside keeps
                               // the accumulation order fixed
#pragma omp parallel for schedule(static) if (batch * M * K * N > detail::work_threshold())
                               for (int64_t k = 0; k < K; ++k)
                                   for (int64_t t = 0; t < batch; ++t)
                                       for (int64_t i = 0; i < M; ++i) {
                                           const S av = ad2[t * M * K + i * K + k];
                                           const S* grow = g + t * M * N + i * N;
                                           S* drow = db + k * N;
                                           for (int64_t j = 0; j < N; ++j)
                                               drow[j] += av * grow[j];
                                       }
                           } else {
#pragma omp parallel for schedule(static) if (batch * M * K * N > detail::work_threshold())
                               for (int64_t t = 0; t < batch; ++t)
                                   for (int64_t i = 0; i < M; ++i) {
                                       const S* arow = ad2 + t * M * K + i * K;
                                       const S* grow = g + t * M * N + i * N;
                                       for (int64_t k = 0; k < K; ++k) {
                                           S* drow = db + t * K * N + k * N;
                                           const S av = arow[k];
                                           for (int64_t j = 0; j < N; ++j)
                                               drow[j] += av * grow[j];
                                       }
                                   }
                           }
                       }
                   });
    return out;
}

// ------------------------------------------------------- softmax / layernorm

// Numerically stable softmax along `axis` (max-subtraction).
template <typename S>
Tensor<S> softmax(Tensor<S> a, int axis = -1) {
    const Shape& s = a.shape();
    if (axis < 0) axis += a.ndim();
    require(axis >= 0 && axis < a.ndim(), "softmax: bad axis");
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
    for (int i = axis + 1; i < a.ndim(); ++i) inner *= s[static_cast<size_t>(i)];
    const int64_t ax = s[static_cast<size_t>(axis)];
    Tensor<S> out = Tensor<S>::zeros(s);
    const auto& ad = a.data();
    auto& od = out.data();
#pragma omp parallel for schedule(static) if (outer * inner * ax > detail::work_threshold())
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
            const int64_t base = o * ax * inner + i;
            S mx = ad[static_cast<size_t>(base)];
            for (int64_t j = 1; j < ax; ++j)
                mx = std::max(mx, ad[static_cast<size_t>(base + j * inner)]);
            S denom = 0;
            for (int64_t j = 0; j < ax; ++j) {
                S e = std::exp(ad[static_cast<size_t>(base + j * inner)] - mx);
                od[static_cast<size_t>(base + j * inner)] = e;
                denom += e;
            }
            const S inv = S(1) / denom;
            for (int64_t j = 0; j < ax; ++j) od[static_cast<size_t>(base + j * inner)] *= inv;
        }
    detail::attach(out, {a}, "softmax", [a, outer, inner, ax](Node<S>& self) mutable {
        if (!a.requires_grad()) return;
        auto& da = a.grad();
        const auto& y = self.data;
        const auto& g = self.grad;
#pragma omp parallel for schedule(static) if (outer * inner * ax > detail::work_threshold())
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t i = 0; i < inner; ++i) {
                const int64_t base = o * ax * inner + i;
                S dot = 0;
                for (int64_t j = 0; j < ax; ++j) {
                    size_t k = static_cast<size_t>(base + j * inner);
                    dot += g[k] * y[k];
                }
                for (int64_t j = 0; j < ax; ++j) {
                    size_t k = static_cast<size_t>(base + j * inner);
                    da[k] += y[k] * (g[k] - dot);
                }
            }
    });
    return out;
}

// Normalization over the last axis, then affine (gain, bias over that axis).
template <typename S>
Tensor<S> layernorm(Tensor<S> x, Tensor<S> gain, Tensor<S> bias,
                    S eps = S(1e-5)) {
    require(x.ndim() >= 1, "layernorm: rank-0 input");
    const int64_t C = x.dim(x.ndim() - 1);
    require(gain.numel() == C && bias.numel() == C,
            "layernorm: gain/bias extent must match last axis " + std::to_string(C));
    const int64_t rows = x.numel() / C;
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    std::vector<S> mean(static_cast<size_t>(rows)), rstd(static_cast<size_t>(rows));
    const auto& xd = x.data();
    const auto& gd = gain.data();
    const auto& bd = bias.data();
    auto& od = out.data();
#pragma omp parallel for schedule(static) if (rows * C > detail::work_threshold())
    for (int64_t r = 0; r < rows; ++r) {
        const S* row = xd.data() + r * C;
        S m = 0;
        for (int64_t j = 0; j < C; ++j) m += row[j];
        m /= static_cast<S>(C);
        S var = 0;
        for (int64_t j = 0; j < C; ++j) var += (row[j] - m) * (row[j] - m);
        var /= static_cast<S>(C);
        const S rs = S(1) / std::sqrt(var + eps);
        mean[static_cast<size_t>(r)] = m;
        rstd[static_cast<size_t>(r)] = rs;
        S* orow = od.data() + r * C;
        for (int64_t j = 0; j < C; ++j)
            orow[j] = (row[j] - m) * rs * gd[static_cast<size_t>(j)] + bd[static_cast<size_t>(j)];
    }
    detail::attach(out, {x, gain, bias}, "layernorm",
                   [x, gain, bias, rows, C, mean = std::move(mean),
                    rstd = std::move(rstd)](Node<S>& self) mutable {
                       const auto& g = self.grad;
                       const auto& xd2 = x.data();
                       const auto& gd2 = gain.data();
                       if (x.requires_grad()) {
                           auto& dx = x.grad();
#pragma omp parallel for schedule(static) if (rows * C > detail::work_threshold())
                           for (int64_t r = 0; r < rows; ++r) {
                               const S* row = xd2.data() + r * C;
                               const S* grow = g.data() + r * C;
                               const S m = mean[static_cast<size_t>(r)];
                               const S rs = rstd[static_cast<size_t>(r)];
                               S sum_gy = 0, sum_gyx = 0;
                               for (int64_t j = 0; j < C; ++j) {
                                   const S gy = grow[j] * gd2[static_cast<size_t>(j)];
                                   const S xh = (row[j] - m) * rs;
                                   sum_gy += gy;
                                   sum_gyx += gy * xh;
                               }
                               const S invC = S(1) / static_cast<S>(C);
                               S* drow = dx.data() + r * C;
                               for (int64_t j = 0; j < C; ++j) {
                                   const S gy = grow[j] * gd2[static_cast<size_t>(j)];
                                   const S xh = (row[j] - m) * rs;
                                   drow[j] += rs * (gy - invC * sum_gy - xh * invC * sum_gyx);
                               }
                           }
                       }
                       if (gain.requires_grad()) {
                           auto& dg = gain.grad();
                           for (int64_t r = 0; r < rows; ++r) {
                               const S* row = xd2.data() + r * C;
                               const S* grow = g.data() + r * C;
                               const S m = mean[static_cast<size_t>(r)];
                               const S rs = rstd[static_cast<size_t>(r)];
                               for (int64_t j = 0; j < C; ++j)
                                   dg[static_cast<size_t>(j)] += grow[j] * (row[j] - m) * rs;
                           }
                       }
                       if (bias.requires_grad()) {
                           auto& db = bias.grad();
                           for (int64_t r = 0; r < rows; ++r) {
                               const S* grow = g.data() + r * C;
                               for (int64_t j = 0; j < C; ++j) db[static_cast<size_t>(j)] += grow[j];
                           }
                       }
                   });
    return out;
}

// ------------------------------------------------------------ shape movement

template <typename S>
Tensor<S> reshape(Tensor<S> a, const Shape& shape) {
    require(numel(shape) == a.numel(), "reshape: " + shape_str(a.shape()) + " -> " +
                                           shape_str(shape) + " changes element count");
    Tensor<S> out = Tensor<S>::zeros(shape);
    out.data() = a.data();
    detail::attach(out, {a}, "reshape", [a](Node<S>& self) mutable {
        if (!a.requires_grad()) return;
        auto& da = a.grad();
        for (size_t i = 0; i < self.grad.size(); ++i) da[i] += self.grad[i];
    });
    return out;
}

template <typename S>
Tensor<S> transpose_last2(Tensor<S> a) {
    require(a.ndim() >= 2, "transpose_last2: need >=2-d");
    const Shape& s = a.shape();
    const int64_t R = s[s.size() - 2], C = s[s.size() - 1];
    int64_t batch = a.numel() / (R * C);
    Shape os = s;
    std::swap(os[os.size() - 2], os[os.size() - 1]);
    Tensor<S> out = Tensor<S>::zeros(os);
    const auto& ad = a.data();
    auto& od = out.data();
#pragma omp parallel for schedule(static) if (a.numel() > detail::work_threshold())
    for (int64_t t = 0; t < batch; ++t)
        for (int64_t i = 0; i < R; ++i)
            for (int64_t j = 0; j < C; ++j)
                od[static_cast<size_t>(t * R * C + j * R + i)] =
                    ad[static_cast<size_t>(t * R * C + i * C + j)];
    detail::attach(out, {a}, "transpose_last2", [a, batch, R, C](Node<S>& self) mutable {
        if (!a.requires_grad()) return;
        auto& da = a.grad();
        const auto& g = self.grad;
        for (int64_t t = 0; t < batch; ++t)
            for (int64_t i = 0; i < R; ++i)
                for (int64_t j = 0; j < C; ++j)
                    da[static_cast<size_t>(t * R * C + i * C + j)] +=
                        g[static_cast<size_t>(t * R * C + j * R + i)];
    });
    return out;
}

// [A,B,C,D] -> [A,C,B,D]; moves sequence/head axes around for attention.
template <typename S>
Tensor<S> permute0213(Tensor<S> a) {
    require(a.ndim() == 4, "permute0213: need 4-d, got " + shape_str(a.shape()));
    const int64_t A = a.dim(0), B = a.dim(1), C = a.dim(2), D = a.dim(3);
    Tensor<S> out = Tensor<S>::zeros({static_cast<int>(A), static_cast<int>(C),
                                      static_cast<int>(B), static_cast<int>(D)});
    const auto& ad = a.data();
    auto& od = out.data();
#pragma omp parallel for schedule(static) if (a.numel() > detail::work_threshold())
    for (int64_t x = 0; x < A; ++x)
        for (int64_t y = 0; y < B; ++y)
            for (int64_t z = 0; z < C; ++z)
                std::memcpy(od.data() + ((x * C + z) * B + y) * D,
                            ad.data() + ((x * B + y) * C + z) * D,
                            static_cast<size_t>(D) * sizeof(S));
    detail::attach(out, {a}, "permute0213", [a, A, B, C, D](Node<S>& self) mutable {
        if (!a.requires_grad()) return;
        auto& da = a.grad();
        const auto& g = self.grad;
        for (int64_t x = 0; x < A; ++x)
            for (int64_t y = 0; y < B; ++y)
                for (int64_t z = 0; z < C; ++z) {
                    S* dst = da.data() + ((x * B + y) * C + z) * D;
                    const S* src = g.data() + ((x * C + z) * B + y) * D;
                    for (int64_t w = 0; w < D; ++w) dst[w] += src[w];
                }
    });
    return out;
}

template <typename S>
Tensor<S> concat(std::vector<Tensor<S>> parts, int axis) {
    require(!parts.empty(), "concat: no inputs");
    const Shape& s0 = parts[0].shape();
    int nd = parts[0].ndim();
    if (axis < 0) axis += nd;
    require(axis >= 0 && axis < nd, "concat: bad axis");
    int total_ax = 0;
    for (const auto& p : parts) {
        require(p.ndim() == nd, "concat: rank mismatch");
        for (int i = 0; i < nd; ++i)
            require(i == axis || p.shape()[static_cast<size_t>(i)] == s0[static_cast<size_t>(i)],
                    "concat: shape mismatch at axis " + std::to_string(i) + ": " +
                        shape_str(p.shape()) + " vs " + shape_str(s0));
        total_ax += p.dim(axis);
    }
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s0[static_cast<size_t>(i)];
    for (int i = axis + 1; i < nd; ++i) inner *= s0[static_cast<size_t>(i)];
    Shape os = s0;
    os[static_cast<size_t>(axis)] = total_ax;
    Tensor<S> out = Tensor<S>::zeros(os);
    auto& od = out.data();
    int64_t offset = 0;
    for (const auto& p : parts) {
        const int64_t pax = p.dim(axis);
        const auto& pd = p.data();
        for (int64_t o = 0; o < outer; ++o)
            std::memcpy(od.data() + (o * total_ax + offset) * inner, pd.data() + o * pax * inner,
                        static_cast<size_t>(pax * inner) * sizeof(S));
        offset += pax;
    }
    detail::attach(out, parts, "concat", [parts, outer, inner, total_ax, axis](Node<S>& self) mutable {
        int64_t off = 0;
        for (auto& p : parts) {
            const int64_t pax = p.dim(axis);
            if (p.requires_grad()) {
                auto& dp = p.grad();
                for (int64_t o = 0; o < outer; ++o) {
                    const S* src = self.grad.data() + (o * total_ax + off) * inner;
                    S* dst = dp.data() + o * pax * inner;
                    for (int64_t i = 0; i < pax * inner; ++i) dst[i] += src[i];
                }
            }
            off += pax;
        }
    });
    return out;
}

template <typename S>
Tensor<S> slice(Tensor<S> a, int axis, int start, int len) {
    const Shape& s = a.shape();
    if (axis < 0) axis += a.ndim();
    require(axis >= 0 && axis < a.ndim(), "slice: bad axis");
    require(start >= 0 && len >= 1 && start + len <= s[static_cast<size_t>(axis)],
            "slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                ") out of extent " + std::to_string(s[static_cast<size_t>(axis)]));
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
    for (int i = axis + 1; i < a.ndim(); ++i) inner *= s[static_cast<size_t>(i)];
    const int64_t ax = s[static_cast<size_t>(axis)];
    Shape os = s;
    os[static_cast<size_t>(axis)] = len;
    Tensor<S> out = Tensor<S>::zeros(os);
    auto& od = out.data();
    const auto& ad = a.data();
    for (int64_t o = 0; o < outer; ++o)
        std::memcpy(od.data() + o * len * inner, ad.data() + (o * ax + start) * inner,
                    static_cast<size_t>(len * inner) * sizeof(S));
    detail::attach(out, {a}, "slice", [a, outer, inner, ax, start, len](Node<S>& self) mutable {
        if (!a.requires_grad()) return;
        auto& da = a.grad();
        for (int64_t o = 0; o < outer; ++o) {
            const S* src = self.grad.data() + o * len * inner;
            S* dst = da.data() + (o * ax + start) * inner;
            for (int64_t i = 0; i < static_cast<int64_t>(len) * inner; ++i) dst[i] += src[i];
        }
    });
    return out;
}

// Replicate a tensor across a new leading batch axis; backward sums over it.
template <typename S>
Tensor<S> tile_batch(Tensor<S> a, int batch) {
    Shape os;
    os.push_back(batch);
    for (int d : a.shape()) os.push_back(d);
    Tensor<S> out = Tensor<S>::zeros(os);
    const int64_t n = a.numel();
    for (int b = 0; b < batch; ++b)
        std::memcpy(out.data().data() + static_cast<int64_t>(b) * n, a.data().data(),
                    static_cast<size_t>(n) * sizeof(S));
    detail::attach(out, {a}, "tile_batch", [a, batch, n](Node<S>& self) mutable {
        if (!a.requires_grad()) return;
        auto& da = a.grad();
        for (int b = 0; b < batch; ++b) {
            const S* src = self.grad.data() + static_cast<int64_t>(b) * n;
            for (int64_t i = 0; i < n; ++i) da[static_cast<size_t>(i)] += src[i];
        }
    });
    return out;
}

// out[..., c] = x[..., c] * w[...]; w has x's shape minus the last axis.
template <typename S>
Tensor<S> mul_bcast_last(Tensor<S> x, Tensor<S> w) {
    require(x.ndim() == w.ndim() + 1, "mul_bcast_last: rank mismatch " + shape_str(x.shape()) +
                                          " vs " + shape_str(w.shape()));
    for (int i = 0; i < w.ndim(); ++i)
        require(x.shape()[static_cast<size_t>(i)] == w.shape()[static_cast<size_t>(i)],
                "mul_bcast_last: shapes " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
    const int64_t C = x.dim(x.ndim() - 1);
    const int64_t rows = x.numel() / C;
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    const auto& xd = x.data();
    const auto& wd = w.data();
    auto& od = out.data();
#pragma omp parallel for schedule(static) if (rows * C > detail::work_threshold())
    for (int64_t r = 0; r < rows; ++r) {
        const S wv = wd[static_cast<size_t>(r)];
        const S* xr = xd.data() + r * C;
        S* orow = od.data() + r * C;
        for (int64_t j = 0; j < C; ++j) orow[j] = xr[j] * wv;
    }
    detail::attach(out, {x, w}, "mul_bcast_last", [x, w, rows, C](Node<S>& self) mutable {
        const auto& g = self.grad;
        if (x.requires_grad()) {
            auto& dx = x.grad();
            const auto& wd2 = w.data();
#pragma omp parallel for schedule(static) if (rows * C > detail::work_threshold())
            for (int64_t r = 0; r < rows; ++r) {
                const S wv = wd2[static_cast<size_t>(r)];
                const S* grow = g.data() + r * C;
                S* drow = dx.data() + r * C;
                for (int64_t j = 0; j < C; ++j) drow[j] += grow[j] * wv;
            }
        }
        if (w.requires_grad()) {
            auto& dw = w.grad();
            const auto& xd2 = x.data();
#pragma omp parallel for schedule(static) if (rows * C > detail::work_threshold())
            for (int64_t r = 0; r < rows; ++r) {
                const S* grow = g.data() + r * C;
                const S* xr = xd2.data() + r * C;
                S acc = 0;
                for (int64_t j = 0; j < C; ++j) acc += grow[j] * xr[j];
                dw[static_cast<size_t>(r)] += acc;
            }
        }
    });
    return out;
}

// --------------------------------------------------------- lookups / gathers

// table[V, C] indexed by flat ids; out has shape ids_shape ++ [C].
template <typename S>
Tensor<S> embedding(Tensor<S> table, const std::vector<int>& ids, const Shape& ids_shape) {
    require(table.ndim() == 2, "embedding: table must be 2-d");
    require(numel(ids_shape) == static_cast<int64_t>(ids.size()), "embedding: ids shape mismatch");
    const int V = table.dim(0), C = table.dim(1);
    for (int id : ids)
        require(id >= 0 && id < V, "embedding: id " + std::to_string(id) + " outside vocab " +
                                       std::to_string(V));
    Shape os = ids_shape;
    os.push_back(C);
    Tensor<S> out = Tensor<S>::zeros(os);
    for (size_t r = 0; r < ids.size(); ++r)
        std::memcpy(out.data().data() + r * static_cast<size_t>(C),
                    table.data().data() + static_cast<size_t>(ids[r]) * C,
                    static_cast<size_t>(C) * sizeof(S));
    detail::attach(out, {table}, "embedding", [table, ids, C](Node<S>& self) mutable {
        if (!table.requires_grad()) return;
        auto& dt = table.grad();
        for (size_t r = 0; r < ids.size(); ++r) {
            const S* src = self.grad.data() + r * static_cast<size_t>(C);
            S* dst = dt.data() + static_cast<size_t>(ids[r]) * C;
            for (int j = 0; j < C; ++j) dst[j] += src[j];
        }
    });
    return out;
}

// x[B, R, C] gathered along the row axis by a shared index list.
template <typename S>
Tensor<S> gather_rows(Tensor<S> x, const std::vector<int>& idx) {
    require(x.ndim() == 3, "gather_rows: need [B,R,C], got " + shape_str(x.shape()));
    const int B = x.dim(0), R = x.dim(1), C = x.dim(2);
    for (int i : idx)
        require(i >= 0 && i < R, "gather_rows: index " + std::to_string(i) + " outside " +
                                     std::to_string(R));
    const int P = static_cast<int>(idx.size());
    Tensor<S> out = Tensor<S>::zeros({B, P, C});
    const auto& xd = x.data();
    auto& od = out.data();
    for (int b = 0; b < B; ++b)
        for (int p = 0; p < P; ++p)
            std::memcpy(od.data() + (static_cast<int64_t>(b) * P + p) * C,
                        xd.data() + (static_cast<int64_t>(b) * R + idx[static_cast<size_t>(p)]) * C,
                        static_cast<size_t>(C) * sizeof(S));
    detail::attach(out, {x}, "gather_rows", [x, idx, B, R, C, P](Node<S>& self) mutable {
        if (!x.requires_grad()) return;
        auto& dx = x.grad();
        for (int b = 0; b < B; ++b)
            for (int p = 0; p < P; ++p) {
                const S* src = self.grad.data() + (static_cast<int64_t>(b) * P + p) * C;
                S* dst = dx.data() +
                         (static_cast<int64_t>(b) * R + idx[static_cast<size_t>(p)]) * C;
                for (int j = 0; j < C; ++j) dst[j] += src[j];
            }
    });
    return out;
}

// ------------------------------------------------------------------ sampling

// Bilinear interpolation of feat at continuous pixel coordinates (row, col).
// Out-of-range points clamp to the valid box, which keeps coordinate gradients
// defined at borders (zero outside). Differentiable w.r.t. both feat values and
// point coordinates. feat [H,W,C] with points [P,2], or batched [B,H,W,C] with
// [B,P,2].
template <typename S>
Tensor<S> bilinear_sample(Tensor<S> feat, Tensor<S> points) {
    bool batched = feat.ndim() == 4;
    require(batched ? points.ndim() == 3 : (feat.ndim() == 3 && points.ndim() == 2),
            "bilinear_sample: want feat [H,W,C] + points [P,2] or batched forms, got " +
                shape_str(feat.shape()) + " and " + shape_str(points.shape()));
    const int B = batched ? feat.dim(0) : 1;
    const int H = feat.dim(batched ? 1 : 0);
    const int W = feat.dim(batched ? 2 : 1);
    const int C = feat.dim(batched ? 3 : 2);
    const int P = points.dim(batched ? 1 : 0);
    require(points.dim(points.ndim() - 1) == 2, "bilinear_sample: points last axis must be 2");
    if (batched)
        require(points.dim(0) == B, "bilinear_sample: batch mismatch");
    Shape os = batched ? Shape{B, P, C} : Shape{P, C};
    Tensor<S> out = Tensor<S>::zeros(os);
    const auto& fd = feat.data();
    const auto& pd = points.data();
    auto& od = out.data();
    auto corner = [&](int b, int r, int c, int ch) -> S {
        return fd[static_cast<size_t>(((static_cast<int64_t>(b) * H + r) * W + c) * C + ch)];
    };
    const int64_t total = static_cast<int64_t>(B) * P;
#pragma omp parallel for schedule(static) if (total * C > detail::work_threshold())
    for (int64_t t = 0; t < total; ++t) {
        const int b = static_cast<int>(t / P);
        S r = pd[static_cast<size_t>(t * 2)];
        S c = pd[static_cast<size_t>(t * 2 + 1)];
        r = std::min(std::max(r, S(0)), S(H - 1));
        c = std::min(std::max(c, S(0)), S(W - 1));
        const int r0 = std::min(static_cast<int>(std::floor(r)), H - 1);
        const int c0 = std::min(static_cast<int>(std::floor(c)), W - 1);
        const int r1 = std::min(r0 + 1, H - 1);
        const int c1 = std::min(c0 + 1, W - 1);
        const S fr = r - static_cast<S>(r0);
        const S fc = c - static_cast<S>(c0);
        S* orow = od.data() + t * C;
        for (int ch = 0; ch < C; ++ch) {
            const S v00 = corner(b, r0, c0, ch), v01 = corner(b, r0, c1, ch);
            const S v10 = corner(b, r1, c0, ch), v11 = corner(b, r1, c1, ch);
            orow[ch] = (S(1) - fr) * ((S(1) - fc) * v00 + fc * v01) +
                       fr * ((S(1) - fc) * v10 + fc * v11);
        }
    }
    detail::attach(out, {feat, points}, "bilinear_sample",
                   [feat, points, B, H, W, C, P](Node<S>& self) mutable {
                       const auto& fd2 = feat.data();
                       const auto& pd2 = points.data();
                       const auto& g = self.grad;
                       const bool need_f = feat.requires_grad();
                       const bool need_p = points.requires_grad();
                       auto fidx = [&](int b, int r, int c, int ch) {
                           return static_cast<size_t>(
                               ((static_cast<int64_t>(b) * H + r) * W + c) * C + ch);
                       };
                       std::vector<S>* df = need_f ? &feat.grad() : nullptr;
                       std::vector<S>* dp = need_p ? &points.grad() : nullptr;
                       const int64_t total = static_cast<int64_t>(B) * P;
                       for (int64_t t = 0; t < total; ++t) {
                           const int b = static_cast<int>(t / P);
                           S rraw = pd2[static_cast<size_t>(t * 2)];
                           S craw = pd2[static_cast<size_t>(t * 2 + 1)];
                           const bool r_in = rraw > S(0) && rraw < S(H - 1);
                           const bool c_in = craw > S(0) && craw < S(W - 1);
                           S r = std::min(std::max(rraw, S(0)), S(H - 1));
                           S c = std::min(std::max(craw, S(0)), S(W - 1));
                           const int r0 = std::min(static_cast<int>(std::floor(r)), H - 1);
                           const int c0 = std::min(static_cast<int>(std::floor(c)), W - 1);
                           const int r1 = std::min(r0 + 1, H - 1);
                           const int c1 = std::min(c0 + 1, W - 1);
                           const S fr = r - static_cast<S>(r0);
                           const S fc = c - static_cast<S>(c0);
                           const S* grow = g.data() + t * C;
                           S dr = 0, dc = 0;
                           for (int ch = 0; ch < C; ++ch) {
                               const S gv = grow[ch];
                               const S v00 = fd2[fidx(b, r0, c0, ch)];
                               const S v01 = fd2[fidx(b, r0, c1, ch)];
                               const S v10 = fd2[fidx(b, r1, c0, ch)];
                               const S v11 = fd2[fidx(b, r1, c1, ch)];
                               if (need_f) {
                                   (*df)[fidx(b, r0, c0, ch)] += gv * (S(1) - fr) * (S(1) - fc);
                                   (*df)[fidx(b, r0, c1, ch)] += gv * (S(1) - fr) * fc;
                                   (*df)[fidx(b, r1, c0, ch)] += gv * fr * (S(1) - fc);
                                   (*df)[fidx(b, r1, c1, ch)] += gv * fr * fc;
                               }
                               dr += gv * ((S(1) - fc) * (v10 - v00) + fc * (v11 - v01));
                               dc += gv * ((S(1) - fr) * (v01 - v00) + fr * (v11 - v10));
                           }
                           if (need_p) {
                               (*dp)[static_cast<size_t>(t * 2)] += r_in ? dr : S(0);
                               (*dp)[static_cast<size_t>(t * 2 + 1)] += c_in ? dc : S(0);
                           }
                       }
                   });
    return out;
}

// ----------------------------------------------------------- loss primitives

template <typename S>
Tensor<S> mse(Tensor<S> a, Tensor<S> b) {
    require(a.shape() == b.shape(), "mse: shapes disagree: " + shape_str(a.shape()) + " vs " +
                                        shape_str(b.shape()));
    Tensor<S> d = sub(a, b);
    return mean_all(mul(d, d));
}

// Per-row cosine similarity of two [R, C] tensors -> [R].
template <typename S>
Tensor<S> cosine_sim_rows(Tensor<S> a, Tensor<S> b, S eps = S(1e-8)) {
    require(a.shape() == b.shape() && a.ndim() == 2,
            "cosine_sim_rows: want matching 2-d shapes, got " + shape_str(a.shape()) + " vs " +
                shape_str(b.shape()));
    const int64_t R = a.dim(0), C = a.dim(1);
    Tensor<S> out = Tensor<S>::zeros({static_cast<int>(R)});
    const auto& ad = a.data();
    const auto& bd = b.data();
    auto& od = out.data();
    std::vector<S> na(static_cast<size_t>(R)), nb(static_cast<size_t>(R)),
        dots(static_cast<size_t>(R));
    for (int64_t r = 0; r < R; ++r) {
        const S* ar = ad.data() + r * C;
        const S* br = bd.data() + r * C;
        S dot = 0, qa = 0, qb = 0;
        for (int64_t j = 0; j < C; ++j) {
            dot += ar[j] * br[j];
            qa += ar[j] * ar[j];
            qb += br[j] * br[j];
        }
        const S na_r = std::sqrt(qa) + eps;
        const S nb_r = std::sqrt(qb) + eps;
        na[static_cast<size_t>(r)] = na_r;
        nb[static_cast<size_t>(r)] = nb_r;
        dots[static_cast<size_t>(r)] = dot;
        od[static_cast<size_t>(r)] = dot / (na_r * nb_r);
    }
    detail::attach(out, {a, b}, "cosine_sim_rows",
                   [a, b, R, C, eps, na = std::move(na), nb = std::move(nb),
                    dots = std::move(dots)](Node<S>& self) mutable {
                       const auto& g = self.grad;
                       const auto& ad2 = a.data();
                       const auto& bd2 = b.data();
                       for (int64_t r = 0; r < R; ++r) {
                           const S gr = g[static_cast<size_t>(r)];
                           if (gr == S(0)) continue;
                           const S* ar = ad2.data() + r * C;
                           const S* br = bd2.data() + r * C;
                           const S na_r = na[static_cast<size_t>(r)];
                           const S nb_r = nb[static_cast<size_t>(r)];
                           const S inv = S(1) / (na_r * nb_r);
                           const S dot = dots[static_cast<size_t>(r)];
                           // d cos / d a_j = b_j/(na nb) - dot a_j / (na^2 nb |a|)
                           if (a.requires_grad()) {
                               S* da = a.grad().data() + r * C;
                               const S norm_a = na_r - eps;
                               const S coef = norm_a > S(0) ? dot * inv / (na_r * norm_a) : S(0);
                               for (int64_t j = 0; j < C; ++j)
                                   da[j] += gr * (br[j] * inv - coef * ar[j]);
                           }
                           if (b.requires_grad()) {
                               S* db = b.grad().data() + r * C;
                               const S norm_b = nb_r - eps;
                               const S coef = norm_b > S(0) ? dot * inv / (nb_r * norm_b) : S(0);
                               for (int64_t j = 0; j < C; ++j)
                                   db[j] += gr * (ar[j] * inv - coef * br[j]);
                           }
                       }
                   });
    return out;
}

// Mean negative log-likelihood over rows of logits[R, V] against integer targets.
template <typename S>
Tensor<S> cross_entropy_logits(Tensor<S> logits, const std::vector<int>& targets) {
    require(logits.ndim() == 2, "cross_entropy: logits must be [rows, vocab]");
    const int64_t R = logits.dim(0), V = logits.dim(1);
    require(static_cast<int64_t>(targets.size()) == R, "cross_entropy: target count mismatch");
    for (int t : targets)
        require(t >= 0 && t < V, "cross_entropy: target " + std::to_string(t) + " outside vocab");
    const auto& ld = logits.data();
    S total = 0;
    std::vector<S> lse(static_cast<size_t>(R)), mx(static_cast<size_t>(R));
    for (int64_t r = 0; r < R; ++r) {
        const S* row = ld.data() + r * V;
        S m = row[0];
        for (int64_t j = 1; j < V; ++j) m = std::max(m, row[j]);
        S denom = 0;
        for (int64_t j = 0; j < V; ++j) denom += std::exp(row[j] - m);
        const S l = m + std::log(denom);
        mx[static_cast<size_t>(r)] = m;
        lse[static_cast<size_t>(r)] = l;
        total += l - row[targets[static_cast<size_t>(r)]];
    }
    Tensor<S> out = Tensor<S>::scalar(total / static_cast<S>(R));
    detail::attach(out, {logits}, "cross_entropy",
                   [logits, targets, R, V, lse = std::move(lse)](Node<S>& self) mutable {
                       if (!logits.requires_grad()) return;
                       const S g = self.grad[0] / static_cast<S>(R);
                       auto& dl = logits.grad();
                       const auto& ld2 = logits.data();
#pragma omp parallel for schedule(static) if (R * V > detail::work_threshold())
                       for (int64_t r = 0; r < R; ++r) {
                           const S* row = ld2.data() + r * V;
                           S* drow = dl.data() + r * V;
                           const S l = lse[static_cast<size_t>(r)];
                           for (int64_t j = 0; j < V; ++j) drow[j] += g * std::exp(row[j] - l);
                           drow[targets[static_cast<size_t>(r)]] -= g;
                       }
                   });
    return out;
}

// ------------------------------------------------------------- quantization

// Forward copies `codes`; backward passes the incoming gradient to `z`
// unchanged and sends nothing to `codes`.
template <typename S>
Tensor<S> straight_through(Tensor<S> z, Tensor<S> codes) {
    require(z.shape() == codes.shape(), "straight_through: shapes disagree: " +
                                            shape_str(z.shape()) + " vs " +
                                            shape_str(codes.shape()));
    Tensor<S> out = Tensor<S>::zeros(z.shape());
    out.data() = codes.data();
    detail::attach(out, {z}, "straight_through", [z](Node<S>& self) mutable {
        if (!z.requires_grad()) return;
        auto& dz = z.grad();
        for (size_t i = 0; i < self.grad.size(); ++i) dz[i] += self.grad[i];
    });
    return out;
}

template <typename S>
Tensor<S> stop_gradient(Tensor<S> a) {
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    out.data() = a.data();
    return out;
}

// Row-wise unit normalization over the last axis: y = x / sqrt(|x|^2 + eps).
template <typename S>
Tensor<S> l2_normalize(Tensor<S> x, S eps = S(1e-12)) {
    const int64_t C = x.dim(x.ndim() - 1);
    const int64_t R = x.numel() / C;
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    const auto& xd = x.data();
    auto& od = out.data();
    std::vector<S> inv_norm(static_cast<size_t>(R));
    for (int64_t r = 0; r < R; ++r) {
        const S* row = xd.data() + r * C;
        S q = 0;
        for (int64_t j = 0; j < C; ++j) q += row[j] * row[j];
        const S inv = S(1) / std::sqrt(q + eps);
        inv_norm[static_cast<size_t>(r)] = inv;
        S* orow = od.data() + r * C;
        for (int64_t j = 0; j < C; ++j) orow[j] = row[j] * inv;
    }
    detail::attach(out, {x}, "l2_normalize",
                   [x, R, C, inv_norm = std::move(inv_norm)](Node<S>& self) mutable {
                       if (!x.requires_grad()) return;
                       auto& dx = x.grad();
                       const auto& y = self.data;
                       const auto& g = self.grad;
                       for (int64_t r = 0; r < R; ++r) {
                           const S* yr = y.data() + r * C;
                           const S* gr = g.data() + r * C;
                           S dot = 0;
                           for (int64_t j = 0; j < C; ++j) dot += gr[j] * yr[j];
                           const S inv = inv_norm[static_cast<size_t>(r)];
                           S* dr = dx.data() + r * C;
                           for (int64_t j = 0; j < C; ++j) dr[j] += inv * (gr[j] - yr[j] * dot);
                       }
                   });
    return out;
}

// ------------------------------------------------------------- convolutions

// 3x3 same-padding convolution, NHWC: x[B,H,W,Cin] * w[3,3,Cin,Cout] + b[Cout].
template <typename S>
Tensor<S> conv2d_3x3(Tensor<S> x, Tensor<S> w, Tensor<S> b) {
    require(x.ndim() == 4, "conv2d: input must be [B,H,W,C], got " + shape_str(x.shape()));
    require(w.ndim() == 4 && w.dim(0) == 3 && w.dim(1) == 3,
            "conv2d: weight must be [3,3,Cin,Cout], got " + shape_str(w.shape()));
    const int B = x.dim(0), H = x.dim(1), W = x.dim(2), Ci = x.dim(3);
    const int Co = w.dim(3);
    require(w.dim(2) == Ci, "conv2d: channel mismatch " + shape_str(x.shape()) + " vs " +
                                shape_str(w.shape()));
    require(b.numel() == Co, "conv2d: bias extent mismatch");
    Tensor<S> out = Tensor<S>::zeros({B, H, W, Co});
    const auto& xd = x.data();
    const auto& wd = w.data();
    const auto& bd = b.data();
    auto& od = out.data();
    const int64_t rows = static_cast<int64_t>(B) * H;
#pragma omp parallel for schedule(static) if (rows * W * Ci * Co > detail::work_threshold())
    for (int64_t bh = 0; bh < rows; ++bh) {
        const int bb = static_cast<int>(bh / H);
        const int h = static_cast<int>(bh % H);
        for (int ww = 0; ww < W; ++ww) {
            S* orow = od.data() + ((static_cast<int64_t>(bb) * H + h) * W + ww) * Co;
            for (int co = 0; co < Co; ++co) orow[co] = bd[static_cast<size_t>(co)];
            for (int kh = 0; kh < 3; ++kh) {
                const int hh = h + kh - 1;
                if (hh < 0 || hh >= H) continue;
                for (int kw = 0; kw < 3; ++kw) {
                    const int cw = ww + kw - 1;
                    if (cw < 0 || cw >= W) continue;
                    const S* xrow = xd.data() + ((static_cast<int64_t>(bb) * H + hh) * W + cw) * Ci;
                    const S* wrow = wd.data() + (static_cast<int64_t>(kh) * 3 + kw) * Ci * Co;
                    for (int ci = 0; ci < Ci; ++ci) {
                        const S xv = xrow[ci];
                        const S* wv = wrow + static_cast<int64_t>(ci) * Co;
                        for (int co = 0; co < Co; ++co) orow[co] += xv * wv[co];
                    }
                }
            }
        }
    }
    detail::attach(out, {x, w, b}, "conv2d", [x, w, b, B, H, W, Ci, Co](Node<S>& self) mutable {
        const auto& g = self.grad;
        const auto& xd2 = x.data();
        const auto& wd2 = w.data();
        if (x.requires_grad()) {
            auto& dx = x.grad();
#pragma omp parallel for schedule(static) if (B > 1)
            for (int bb = 0; bb < B; ++bb)
                for (int h = 0; h < H; ++h)
                    for (int ww = 0; ww < W; ++ww) {
                        const S* grow = g.data() + ((static_cast<int64_t>(bb) * H + h) * W + ww) * Co;
                        for (int kh = 0; kh < 3; ++kh) {
                            const int hh = h + kh - 1;
                            if (hh < 0 || hh >= H) continue;
                            for (int kw = 0; kw < 3; ++kw) {
                                const int cw = ww + kw - 1;
                                if (cw < 0 || cw >= W) continue;
                                S* xrow = dx.data() +
                                          ((static_cast<int64_t>(bb) * H + hh) * W + cw) * Ci;
                                const S* wrow =
                                    wd2.data() + (static_cast<int64_t>(kh) * 3 + kw) * Ci * Co;
                                for (int ci = 0; ci < Ci; ++ci) {
                                    const S* wv = wrow + static_cast<int64_t>(ci) * Co;
                                    S acc = 0;
                                    for (int co = 0; co < Co; ++co) acc += grow[co] * wv[co];
                                    xrow[ci] += acc;
                                }
                            }
                        }
                    }
        }
        if (w.requires_grad()) {
            auto& dw = w.grad();
            for (int bb = 0; bb < B; ++bb)
                for (int h = 0; h < H; ++h)
                    for (int ww = 0; ww < W; ++ww) {
                        const S* grow = g.data() + ((static_cast<int64_t>(bb) * H + h) * W + ww) * Co;
                        for (int kh = 0; kh < 3; ++kh) {
                            const int hh = h + kh - 1;
                            if (hh < 0 || hh >= H) continue;
                            for (int kw = 0; kw < 3; ++kw) {
                                const int cw = ww + kw - 1;
                                if (cw < 0 || cw >= W) continue;
                                const S* xrow = xd2.data() +
                                                ((static_cast<int64_t>(bb) * H + hh) * W + cw) * Ci;
                                S* wrow = dw.data() + (static_cast<int64_t>(kh) * 3 + kw) * Ci * Co;
                                for (int ci = 0; ci < Ci; ++ci) {
                                    const S xv = xrow[ci];
                                    S* wv = wrow + static_cast<int64_t>(ci) * Co;
                                    for (int co = 0; co < Co; ++co) wv[co] += xv * grow[co];
                                }
                            }
                        }
                    }
        }
        if (b.requires_grad()) {
            auto& db = b.grad();
            const int64_t cells = static_cast<int64_t>(B) * H * W;
            for (int64_t i = 0; i < cells; ++i) {
                const S* grow = g.data() + i * Co;
                for (int co = 0; co < Co; ++co) db[static_cast<size_t>(co)] += grow[co];
            }
        }
    });
    return out;
}

// Nearest-neighbor 2x upsampling, NHWC.
template <typename S>
Tensor<S> upsample_nearest2x(Tensor<S> x) {
    require(x.ndim() == 4, "upsample2x: input must be [B,H,W,C]");
    const int B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
    Tensor<S> out = Tensor<S>::zeros({B, 2 * H, 2 * W, C});
    const auto& xd = x.data();
    auto& od = out.data();
    for (int b = 0; b < B; ++b)
        for (int h = 0; h < 2 * H; ++h)
            for (int w = 0; w < 2 * W; ++w)
                std::memcpy(
                    od.data() + ((static_cast<int64_t>(b) * 2 * H + h) * 2 * W + w) * C,
                    xd.data() + ((static_cast<int64_t>(b) * H + h / 2) * W + w / 2) * C,
                    static_cast<size_t>(C) * sizeof(S));
    detail::attach(out, {x}, "upsample2x", [x, B, H, W, C](Node<S>& self) mutable {
        if (!x.requires_grad()) return;
        auto& dx = x.grad();
        const auto& g = self.grad;
        for (int b = 0; b < B; ++b)
            for (int h = 0; h < 2 * H; ++h)
                for (int w = 0; w < 2 * W; ++w) {
                    const S* src = g.data() + ((static_cast<int64_t>(b) * 2 * H + h) * 2 * W + w) * C;
                    S* dst = dx.data() + ((static_cast<int64_t>(b) * H + h / 2) * W + w / 2) * C;
                    for (int c = 0; c < C; ++c) dst[c] += src[c];
                }
    });
    return out;
}

// ---------------------------------------------------------------------- rope

// Rotary embedding: x[..., S, D] rotated pairwise by precomputed per-position
// angle tables cos/sin of extent S * D/2. Rotations are isometries; backward
// applies the inverse rotation to the gradient.
template <typename S>
Tensor<S> rope_apply(Tensor<S> x, const std::vector<S>& cos_tab,
                     const std::vector<S>& sin_tab) {
    require(x.ndim() >= 2, "rope: need >=2-d");
    const int64_t D = x.dim(x.ndim() - 1);
    const int64_t T = x.dim(x.ndim() - 2);
    require(D % 2 == 0, "rope: head dim must be even");
    const int64_t pairs = D / 2;
    require(static_cast<int64_t>(cos_tab.size()) == T * pairs &&
                static_cast<int64_t>(sin_tab.size()) == T * pairs,
            "rope: angle table extent mismatch");
    const int64_t rows = x.numel() / D;
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    const auto& xd = x.data();
    auto& od = out.data();
#pragma omp parallel for schedule(static) if (rows * D > detail::work_threshold())
    for (int64_t r = 0; r < rows; ++r) {
        const int64_t t = r % T;
        const S* xr = xd.data() + r * D;
        S* orow = od.data() + r * D;
        const S* ct = cos_tab.data() + t * pairs;
        const S* st = sin_tab.data() + t * pairs;
        for (int64_t p = 0; p < pairs; ++p) {
            const S x0 = xr[2 * p], x1 = xr[2 * p + 1];
            orow[2 * p] = x0 * ct[p] - x1 * st[p];
            orow[2 * p + 1] = x0 * st[p] + x1 * ct[p];
        }
    }
    detail::attach(out, {x}, "rope", [x, rows, T, pairs, D, cos_tab, sin_tab](Node<S>& self) mutable {
        if (!x.requires_grad()) return;
        auto& dx = x.grad();
        const auto& g = self.grad;
        for (int64_t r = 0; r < rows; ++r) {
            const int64_t t = r % T;
            const S* grow = g.data() + r * D;
            S* dr = dx.data() + r * D;
            const S* ct = cos_tab.data() + t * pairs;
            const S* st = sin_tab.data() + t * pairs;
            for (int64_t p = 0; p < pairs; ++p) {
                const S g0 = grow[2 * p], g1 = grow[2 * p + 1];
                dr[2 * p] += g0 * ct[p] + g1 * st[p];
                dr[2 * p + 1] += -g0 * st[p] + g1 * ct[p];
            }
        }
    });
    return out;
}

// ------------------------------------------------------------------- dropout

template <typename S>
Tensor<S> dropout(Tensor<S> x, double p, RngState& rng) {
    if (p <= 0.0) return x;
    require(p < 1.0, "dropout: rate must be < 1");
    std::vector<uint8_t> keep(static_cast<size_t>(x.numel()));
    for (auto& k : keep) k = rng.next_double() >= p ? 1 : 0;
    const S inv = S(1) / static_cast<S>(1.0 - p);
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    const auto& xd = x.data();
    auto& od = out.data();
    for (size_t i = 0; i < xd.size(); ++i) od[i] = keep[i] ? xd[i] * inv : S(0);
    detail::attach(out, {x}, "dropout", [x, keep = std::move(keep), inv](Node<S>& self) mutable {
        if (!x.requires_grad()) return;
        auto& dx = x.grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
            if (keep[i]) dx[i] += self.grad[i] * inv;
    });
    return out;
}

}  // namespace vfmtok
