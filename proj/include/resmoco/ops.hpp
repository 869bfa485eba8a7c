#ifndef RESMOCO_OPS_HPP
#define RESMOCO_OPS_HPP

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "resmoco/tensor.hpp"

namespace resmoco::ops {

/// Guard below which a divisor counts as zero.
inline constexpr double domain_epsilon = 1e-12;

namespace detail {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;

template <typename T>
void check_finite(const char* op, const std::vector<T>& values) {
    for (T v : values) {
        if (!std::isfinite(v)) {
            throw Error(ErrorKind::non_finite, std::string("non-finite value produced by ") + op);
        }
    }
}

/// Wraps forward values into a tensor and, when a tape is active and some
/// input needs gradients, records the node with its backward rule.
template <typename T, typename Backward>
Tensor<T> make_op(const char* op, const Shape& shape, std::vector<T> values,
                  std::initializer_list<Tensor<T>> inputs, Backward&& backward) {
    check_finite(op, values);
    auto node = std::make_shared<Node<T>>();
    node->shape = shape;
    node->value = std::move(values);
    node->op = op;
    node->is_leaf = false;
    Tape<T>* tape = Tape<T>::active();
    bool needs_grad = false;
    for (const auto& in : inputs) {
        needs_grad = needs_grad || in.requires_grad();
    }
    if (tape != nullptr && needs_grad) {
        node->requires_grad = true;
        for (const auto& in : inputs) {
            node->inputs.push_back(in.node());
        }
        node->backward_fn = std::forward<Backward>(backward);
        tape->record(node);
    }
    return Tensor<T>(std::move(node));
}

inline std::size_t resolve_axis(const Shape& shape, int axis) {
    const int rank = static_cast<int>(shape.rank());
    const int a = axis < 0 ? axis + rank : axis;
    require(a >= 0 && a < rank, ErrorKind::axis_out_of_range,
            "axis " + std::to_string(axis) + " out of range for shape " + shape.to_string());
    return static_cast<std::size_t>(a);
}

/// (outer, extent, inner) split of a shape around one axis.
struct AxisSplit {
    std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
    AxisSplit s;
    for (std::size_t i = 0; i < shape.rank(); ++i) {
        if (i < axis) s.outer *= shape[i];
        else if (i == axis) s.extent = shape[i];
        else s.inner *= shape[i];
    }
    return s;
}

struct BroadcastPlan {
    Shape out;
    std::array<std::size_t, 4> dims{1, 1, 1, 1};
    std::array<std::size_t, 4> a_stride{}, b_stride{};
};

inline std::array<std::size_t, 4> padded_strides(const Shape& s, const std::array<std::size_t, 4>& out_dims) {
    std::array<std::size_t, 4> padded{1, 1, 1, 1};
    const std::size_t offset = 4 - s.rank();
    for (std::size_t i = 0; i < s.rank(); ++i) {
        padded[offset + i] = s[i];
    }
    std::array<std::size_t, 4> stride{};
    std::size_t running = 1;
    for (int i = 3; i >= 0; --i) {
        stride[i] = (padded[i] == 1 && out_dims[i] != 1) ? 0 : running;
        running *= padded[i];
    }
    return stride;
}

inline BroadcastPlan broadcast(const Shape& a, const Shape& b) {
    const std::size_t rank = std::max(a.rank(), b.rank());
    std::vector<std::size_t> out(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        const std::size_t da = i < rank - a.rank() ? 1 : a[i - (rank - a.rank())];
        const std::size_t db = i < rank - b.rank() ? 1 : b[i - (rank - b.rank())];
        if (da != db && da != 1 && db != 1) {
            throw Error(ErrorKind::shape_mismatch,
                        "cannot broadcast " + a.to_string() + " with " + b.to_string());
        }
        out[i] = std::max(da, db);
    }
    BroadcastPlan plan;
    plan.out = Shape(std::span<const std::size_t>(out));
    for (std::size_t i = 0; i < rank; ++i) {
        plan.dims[4 - rank + i] = out[i];
    }
    plan.a_stride = padded_strides(a, plan.dims);
    plan.b_stride = padded_strides(b, plan.dims);
    return plan;
}

template <typename F>
void for_each_broadcast(const BroadcastPlan& p, F&& f) {
    std::size_t o = 0;
    for (std::size_t i0 = 0; i0 < p.dims[0]; ++i0) {
        for (std::size_t i1 = 0; i1 < p.dims[1]; ++i1) {
            for (std::size_t i2 = 0; i2 < p.dims[2]; ++i2) {
                std::size_t ia = i0 * p.a_stride[0] + i1 * p.a_stride[1] + i2 * p.a_stride[2];
                std::size_t ib = i0 * p.b_stride[0] + i1 * p.b_stride[1] + i2 * p.b_stride[2];
                for (std::size_t i3 = 0; i3 < p.dims[3]; ++i3, ++o) {
                    f(o, ia + i3 * p.a_stride[3], ib + i3 * p.b_stride[3]);
                }
            }
        }
    }
}

enum class Arith { add, sub, mul, div };

inline const char* arith_name(Arith op) {
    switch (op) {
        case Arith::add: return "add";
        case Arith::sub: return "sub";
        case Arith::mul: return "mul";
        case Arith::div: return "div";
    }
    return "?";
}

}  // namespace detail

template <typename T>
Tensor<T> elementwise(detail::Arith op, const Tensor<T>& a, const Tensor<T>& b) {
    using detail::Arith;
    const auto plan = detail::broadcast(a.shape(), b.shape());
    const auto av = a.values();
    const auto bv = b.values();
    if (op == Arith::div) {
        std::size_t bad = 0;
        std::size_t first = 0;
        for (std::size_t i = 0; i < bv.size(); ++i) {
            if (std::abs(static_cast<double>(bv[i])) < domain_epsilon) {
                if (bad++ == 0) first = i;
            }
        }
        if (bad > 0) {
            throw Error(ErrorKind::numeric_domain, "division by |b| < 1e-12 at " + std::to_string(bad) +
                                                       " position(s), first flat index " + std::to_string(first));
        }
    }
    std::vector<T> out(plan.out.numel());
    detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
        switch (op) {
            case Arith::add: out[o] = av[ia] + bv[ib]; break;
            case Arith::sub: out[o] = av[ia] - bv[ib]; break;
            case Arith::mul: out[o] = av[ia] * bv[ib]; break;
            case Arith::div: out[o] = av[ia] / bv[ib]; break;
        }
    });
    return detail::make_op<T>(detail::arith_name(op), plan.out, std::move(out), {a, b}, [op, plan](Node<T>& self) {
        Node<T>& na = *self.inputs[0];
        Node<T>& nb = *self.inputs[1];
        const auto& g = self.grad;
        T* ga = na.requires_grad ? na.grad_buffer().data() : nullptr;
        T* gb = nb.requires_grad ? nb.grad_buffer().data() : nullptr;
        const T* va = na.value.data();
        const T* vb = nb.value.data();
        detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
            switch (op) {
                case Arith::add:
                    if (ga) ga[ia] += g[o];
                    if (gb) gb[ib] += g[o];
                    break;
                case Arith::sub:
                    if (ga) ga[ia] += g[o];
                    if (gb) gb[ib] -= g[o];
                    break;
                case Arith::mul:
                    if (ga) ga[ia] += g[o] * vb[ib];
                    if (gb) gb[ib] += g[o] * va[ia];
                    break;
                case Arith::div:
                    if (ga) ga[ia] += g[o] / vb[ib];
                    if (gb) gb[ib] -= g[o] * va[ia] / (vb[ib] * vb[ib]);
                    break;
            }
        });
    });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(detail::Arith::add, a, b); }
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(detail::Arith::sub, a, b); }
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(detail::Arith::mul, a, b); }
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(detail::Arith::div, a, b); }

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.shape().rank() == 2 && b.shape().rank() == 2, ErrorKind::shape_mismatch, "matmul needs rank-2 inputs");
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    require(b.shape()[0] == k, ErrorKind::shape_mismatch,
            "matmul inner dimensions differ: " + a.shape().to_string() + " x " + b.shape().to_string());
    std::vector<T> out(m * n);
    detail::MapR<T>(out.data(), m, n).noalias() =
        detail::CMapR<T>(a.values().data(), m, k) * detail::CMapR<T>(b.values().data(), k, n);
    return detail::make_op<T>("matmul", Shape{m, n}, std::move(out), {a, b}, [m, k, n](Node<T>& self) {
        Node<T>& na = *self.inputs[0];
        Node<T>& nb = *self.inputs[1];
        detail::CMapR<T> g(self.grad.data(), m, n);
        if (na.requires_grad) {
            detail::MapR<T>(na.grad_buffer().data(), m, k).noalias() +=
                g * detail::CMapR<T>(nb.value.data(), k, n).transpose();
        }
        if (nb.requires_grad) {
            detail::MapR<T>(nb.grad_buffer().data(), k, n).noalias() +=
                detail::CMapR<T>(na.value.data(), m, k).transpose() * g;
        }
    });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
    require(x.shape().rank() == 2, ErrorKind::shape_mismatch, "transpose needs a rank-2 input");
    const std::size_t r = x.shape()[0], c = x.shape()[1];
    std::vector<T> out(r * c);
    detail::MapR<T>(out.data(), c, r) = detail::CMapR<T>(x.values().data(), r, c).transpose();
    return detail::make_op<T>("transpose", Shape{c, r}, std::move(out), {x}, [r, c](Node<T>& self) {
        Node<T>& nx = *self.inputs[0];
        detail::MapR<T>(nx.grad_buffer().data(), r, c) += detail::CMapR<T>(self.grad.data(), c, r).transpose();
    });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, const Shape& shape) {
    require(shape.numel() == x.numel(), ErrorKind::shape_mismatch,
            "cannot reshape " + x.shape().to_string() + " to " + shape.to_string());
    std::vector<T> out(x.values().begin(), x.values().end());
    return detail::make_op<T>("reshape", shape, std::move(out), {x}, [](Node<T>& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

/// Cross-correlation of NCHW input with OIHW weights, zero padding.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride, std::size_t pad) {
    require(x.shape().rank() == 4 && w.shape().rank() == 4, ErrorKind::shape_mismatch,
            "conv2d needs NCHW input and OIHW weights");
    require(stride >= 1, ErrorKind::invalid_argument, "conv2d stride must be >= 1");
    const std::size_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], wd = x.shape()[3];
    const std::size_t o = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
    require(w.shape()[1] == c, ErrorKind::shape_mismatch,
            "conv2d channel mismatch: input " + x.shape().to_string() + ", weight " + w.shape().to_string());
    require(h + 2 * pad >= kh && wd + 2 * pad >= kw, ErrorKind::shape_mismatch, "conv2d kernel larger than input");
    const std::size_t oh = (h + 2 * pad - kh) / stride + 1;
    const std::size_t ow = (wd + 2 * pad - kw) / stride + 1;
    const std::size_t ck = c * kh * kw;
    const std::size_t l = oh * ow;
    const std::size_t cols_width = n * l;

    // cols: (C*KH*KW) x (N*OH*OW)
    auto cols = std::make_shared<std::vector<T>>(ck * cols_width, T(0));
    const T* xv = x.values().data();
    for (std::size_t ci = 0; ci < c; ++ci) {
        for (std::size_t ki = 0; ki < kh; ++ki) {
            for (std::size_t kj = 0; kj < kw; ++kj) {
                T* row = cols->data() + ((ci * kh + ki) * kw + kj) * cols_width;
                for (std::size_t b = 0; b < n; ++b) {
                    const T* plane = xv + (b * c + ci) * h * wd;
                    for (std::size_t oi = 0; oi < oh; ++oi) {
                        const std::ptrdiff_t yi = static_cast<std::ptrdiff_t>(oi * stride + ki) - static_cast<std::ptrdiff_t>(pad);
                        if (yi < 0 || yi >= static_cast<std::ptrdiff_t>(h)) continue;
                        for (std::size_t oj = 0; oj < ow; ++oj) {
                            const std::ptrdiff_t xj = static_cast<std::ptrdiff_t>(oj * stride + kj) - static_cast<std::ptrdiff_t>(pad);
                            if (xj < 0 || xj >= static_cast<std::ptrdiff_t>(wd)) continue;
                            row[b * l + oi * ow + oj] = plane[yi * wd + xj];
                        }
                    }
                }
            }
        }
    }
    detail::MatR<T> prod = detail::CMapR<T>(w.values().data(), o, ck) * detail::CMapR<T>(cols->data(), ck, cols_width);
    std::vector<T> out(n * o * l);
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t oc = 0; oc < o; ++oc) {
            std::copy_n(prod.data() + oc * cols_width + b * l, l, out.data() + (b * o + oc) * l);
        }
    }
    return detail::make_op<T>(
        "conv2d", Shape{n, o, oh, ow}, std::move(out), {x, w},
        [=](Node<T>& self) {
            Node<T>& nx = *self.inputs[0];
            Node<T>& nw = *self.inputs[1];
            detail::MatR<T> g(o, cols_width);
            for (std::size_t b = 0; b < n; ++b) {
                for (std::size_t oc = 0; oc < o; ++oc) {
                    std::copy_n(self.grad.data() + (b * o + oc) * l, l, g.data() + oc * cols_width + b * l);
                }
            }
            if (nw.requires_grad) {
                detail::MapR<T>(nw.grad_buffer().data(), o, ck).noalias() +=
                    g * detail::CMapR<T>(cols->data(), ck, cols_width).transpose();
            }
            if (nx.requires_grad) {
                detail::MatR<T> dcols = detail::CMapR<T>(nw.value.data(), o, ck).transpose() * g;
                T* gx = nx.grad_buffer().data();
                for (std::size_t ci = 0; ci < c; ++ci) {
                    for (std::size_t ki = 0; ki < kh; ++ki) {
                        for (std::size_t kj = 0; kj < kw; ++kj) {
                            const T* row = dcols.data() + ((ci * kh + ki) * kw + kj) * cols_width;
                            for (std::size_t b = 0; b < n; ++b) {
                                T* plane = gx + (b * c + ci) * h * wd;
                                for (std::size_t oi = 0; oi < oh; ++oi) {
                                    const std::ptrdiff_t yi = static_cast<std::ptrdiff_t>(oi * stride + ki) - static_cast<std::ptrdiff_t>(pad);
                                    if (yi < 0 || yi >= static_cast<std::ptrdiff_t>(h)) continue;
                                    for (std::size_t oj = 0; oj < ow; ++oj) {
                                        const std::ptrdiff_t xj = static_cast<std::ptrdiff_t>(oj * stride + kj) - static_cast<std::ptrdiff_t>(pad);
                                        if (xj < 0 || xj >= static_cast<std::ptrdiff_t>(wd)) continue;
                                        plane[yi * wd + xj] += row[b * l + oi * ow + oj];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    std::vector<T> out(x.numel());
    const auto xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
    return detail::make_op<T>("relu", x.shape(), std::move(out), {x}, [](Node<T>& self) {
        Node<T>& nx = *self.inputs[0];
        auto& g = nx.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (nx.value[i] > T(0)) g[i] += self.grad[i];
        }
    });
}

/// Temperature softmax P(x)_i = exp(x_i/t) / sum_k exp(x_k/t) along `axis`.
template <typename T>
Tensor<T> softmax_t(const Tensor<T>& x, int axis, T temperature) {
    require(temperature > T(0), ErrorKind::invalid_argument, "softmax temperature must be positive");
    const auto s = detail::split_at(x.shape(), detail::resolve_axis(x.shape(), axis));
    const auto xv = x.values();
    std::vector<T> out(x.numel());
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.extent * s.inner + i;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t k = 0; k < s.extent; ++k) mx = std::max(mx, xv[base + k * s.inner]);
            T total = 0;
            for (std::size_t k = 0; k < s.extent; ++k) {
                const T e = std::exp((xv[base + k * s.inner] - mx) / temperature);
                out[base + k * s.inner] = e;
                total += e;
            }
            for (std::size_t k = 0; k < s.extent; ++k) out[base + k * s.inner] /= total;
        }
    }
    return detail::make_op<T>("softmax_t", x.shape(), std::move(out), {x}, [s, temperature](Node<T>& self) {
        auto& gx = self.inputs[0]->grad_buffer();
        const auto& y = self.value;
        const auto& g = self.grad;
        for (std::size_t o = 0; o < s.outer; ++o) {
            for (std::size_t i = 0; i < s.inner; ++i) {
                const std::size_t base = o * s.extent * s.inner + i;
                T dot = 0;
                for (std::size_t k = 0; k < s.extent; ++k) dot += g[base + k * s.inner] * y[base + k * s.inner];
                for (std::size_t k = 0; k < s.extent; ++k) {
                    const std::size_t j = base + k * s.inner;
                    gx[j] += y[j] * (g[j] - dot) / temperature;
                }
            }
        }
    });
}

/// log of softmax_t, computed directly for stability.
template <typename T>
Tensor<T> log_softmax_t(const Tensor<T>& x, int axis, T temperature) {
    require(temperature > T(0), ErrorKind::invalid_argument, "softmax temperature must be positive");
    const auto s = detail::split_at(x.shape(), detail::resolve_axis(x.shape(), axis));
    const auto xv = x.values();
    std::vector<T> out(x.numel());
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.extent * s.inner + i;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t k = 0; k < s.extent; ++k) mx = std::max(mx, xv[base + k * s.inner]);
            T total = 0;
            for (std::size_t k = 0; k < s.extent; ++k) total += std::exp((xv[base + k * s.inner] - mx) / temperature);
            const T lse = std::log(total);
            for (std::size_t k = 0; k < s.extent; ++k) {
                out[base + k * s.inner] = (xv[base + k * s.inner] - mx) / temperature - lse;
            }
        }
    }
    return detail::make_op<T>("log_softmax_t", x.shape(), std::move(out), {x}, [s, temperature](Node<T>& self) {
        auto& gx = self.inputs[0]->grad_buffer();
        const auto& y = self.value;
        const auto& g = self.grad;
        for (std::size_t o = 0; o < s.outer; ++o) {
            for (std::size_t i = 0; i < s.inner; ++i) {
                const std::size_t base = o * s.extent * s.inner + i;
                T gsum = 0;
                for (std::size_t k = 0; k < s.extent; ++k) gsum += g[base + k * s.inner];
                for (std::size_t k = 0; k < s.extent; ++k) {
                    const std::size_t j = base + k * s.inner;
                    gx[j] += (g[j] - std::exp(y[j]) * gsum) / temperature;
                }
            }
        }
    });
}

/// x / max(||x||_2, eps) along `axis`.
template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x, int axis, T eps = T(1e-12)) {
    const auto s = detail::split_at(x.shape(), detail::resolve_axis(x.shape(), axis));
    const auto xv = x.values();
    std::vector<T> out(x.numel());
    auto denom = std::make_shared<std::vector<T>>(s.outer * s.inner);
    auto floored = std::make_shared<std::vector<char>>(s.outer * s.inner);
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.extent * s.inner + i;
            T sq = 0;
            for (std::size_t k = 0; k < s.extent; ++k) sq += xv[base + k * s.inner] * xv[base + k * s.inner];
            const T norm = std::sqrt(sq);
            const std::size_t r = o * s.inner + i;
            (*floored)[r] = norm <= eps;
            (*denom)[r] = norm <= eps ? eps : norm;
            for (std::size_t k = 0; k < s.extent; ++k) out[base + k * s.inner] = xv[base + k * s.inner] / (*denom)[r];
        }
    }
    return detail::make_op<T>("l2_normalize", x.shape(), std::move(out), {x}, [s, denom, floored](Node<T>& self) {
        auto& gx = self.inputs[0]->grad_buffer();
        const auto& y = self.value;
        const auto& g = self.grad;
        for (std::size_t o = 0; o < s.outer; ++o) {
            for (std::size_t i = 0; i < s.inner; ++i) {
                const std::size_t base = o * s.extent * s.inner + i;
                const std::size_t r = o * s.inner + i;
                const T d = (*denom)[r];
                T dot = 0;
                if (!(*floored)[r]) {
                    for (std::size_t k = 0; k < s.extent; ++k) dot += y[base + k * s.inner] * g[base + k * s.inner];
                }
                for (std::size_t k = 0; k < s.extent; ++k) {
                    const std::size_t j = base + k * s.inner;
                    gx[j] += (g[j] - y[j] * dot) / d;
                }
            }
        }
    });
}

enum class Reduction { sum, mean };

/// Sum or mean over `axis`, or over everything when no axis is given.
/// The reduced axis is dropped unless `keepdim`; a full reduction yields shape {1}.
template <typename T>
Tensor<T> reduce(Reduction kind, const Tensor<T>& x, std::optional<int> axis = std::nullopt, bool keepdim = false) {
    const auto xv = x.values();
    if (!axis) {
        T total = 0;
        for (T v : xv) total += v;
        const T scale = kind == Reduction::mean ? T(1) / static_cast<T>(xv.size()) : T(1);
        return detail::make_op<T>(kind == Reduction::sum ? "sum" : "mean", Shape{1}, {total * scale}, {x},
                                  [scale](Node<T>& self) {
                                      auto& gx = self.inputs[0]->grad_buffer();
                                      const T g = self.grad[0] * scale;
                                      for (auto& v : gx) v += g;
                                  });
    }
    const std::size_t a = detail::resolve_axis(x.shape(), *axis);
    const auto s = detail::split_at(x.shape(), a);
    std::vector<std::size_t> dims;
    for (std::size_t i = 0; i < x.shape().rank(); ++i) {
        if (i != a) dims.push_back(x.shape()[i]);
        else if (keepdim) dims.push_back(1);
    }
    if (dims.empty()) dims.push_back(1);
    const T scale = kind == Reduction::mean ? T(1) / static_cast<T>(s.extent) : T(1);
    std::vector<T> out(s.outer * s.inner, T(0));
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t k = 0; k < s.extent; ++k) {
            for (std::size_t i = 0; i < s.inner; ++i) {
                out[o * s.inner + i] += xv[(o * s.extent + k) * s.inner + i];
            }
        }
    }
    for (auto& v : out) v *= scale;
    return detail::make_op<T>(kind == Reduction::sum ? "sum" : "mean", Shape(std::span<const std::size_t>(dims)),
                              std::move(out), {x}, [s, scale](Node<T>& self) {
                                  auto& gx = self.inputs[0]->grad_buffer();
                                  for (std::size_t o = 0; o < s.outer; ++o) {
                                      for (std::size_t k = 0; k < s.extent; ++k) {
                                          for (std::size_t i = 0; i < s.inner; ++i) {
                                              gx[(o * s.extent + k) * s.inner + i] += self.grad[o * s.inner + i] * scale;
                                          }
                                      }
                                  }
                              });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x, std::optional<int> axis = std::nullopt, bool keepdim = false) {
    return reduce(Reduction::sum, x, axis, keepdim);
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, std::optional<int> axis = std::nullopt, bool keepdim = false) {
    return reduce(Reduction::mean, x, axis, keepdim);
}

/// Same values, cut off from the graph.
template <typename T>
Tensor<T> detach(const Tensor<T>& x) {
    return Tensor<T>::from(x.shape(), std::vector<T>(x.values().begin(), x.values().end()));
}

/// Main diagonal of a square matrix.
template <typename T>
Tensor<T> diagonal(const Tensor<T>& x) {
    require(x.shape().rank() == 2 && x.shape()[0] == x.shape()[1], ErrorKind::shape_mismatch,
            "diagonal needs a square matrix, got " + x.shape().to_string());
    const std::size_t n = x.shape()[0];
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = x.values()[i * n + i];
    return detail::make_op<T>("diagonal", Shape{n}, std::move(out), {x}, [n](Node<T>& self) {
        auto& gx = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) gx[i * n + i] += self.grad[i];
    });
}

/// (N,C,H,W) -> (N,C) spatial mean.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    require(x.shape().rank() == 4, ErrorKind::shape_mismatch, "global_avg_pool needs NCHW input");
    const std::size_t n = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
    std::vector<T> out(n * c, T(0));
    const auto xv = x.values();
    for (std::size_t p = 0; p < n * c; ++p) {
        T total = 0;
        for (std::size_t j = 0; j < hw; ++j) total += xv[p * hw + j];
        out[p] = total / static_cast<T>(hw);
    }
    return detail::make_op<T>("global_avg_pool", Shape{n, c}, std::move(out), {x}, [n, c, hw](Node<T>& self) {
        auto& gx = self.inputs[0]->grad_buffer();
        for (std::size_t p = 0; p < n * c; ++p) {
            const T g = self.grad[p] / static_cast<T>(hw);
            for (std::size_t j = 0; j < hw; ++j) gx[p * hw + j] += g;
        }
    });
}

/// Per-channel batch moments seen by a training-mode batch norm (biased variance).
template <typename T>
struct BatchMoments {
    std::vector<T> mean;
    std::vector<T> var;
    std::size_t count = 0;
};

namespace detail {

/// Channel axis is 1; statistics pool over every other axis. Works for (N,C) and (N,C,H,W).
struct ChannelLayout {
    std::size_t n = 0, c = 0, spatial = 1;
};

inline ChannelLayout channel_layout(const Shape& s) {
    require(s.rank() == 2 || s.rank() == 4, ErrorKind::shape_mismatch,
            "batch norm expects (N,C) or (N,C,H,W), got " + s.to_string());
    ChannelLayout l{s[0], s[1], 1};
    if (s.rank() == 4) l.spatial = s[2] * s[3];
    return l;
}

}  // namespace detail

/// Training-mode batch normalization with affine scale/shift.
template <typename T>
Tensor<T> batch_norm_train(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps,
                           BatchMoments<T>* moments = nullptr) {
    const auto l = detail::channel_layout(x.shape());
    require(l.n >= 2, ErrorKind::degenerate_batch, "training-mode batch norm needs batch size >= 2");
    require(gamma.numel() == l.c && beta.numel() == l.c, ErrorKind::shape_mismatch,
            "batch norm parameters do not match channel count " + std::to_string(l.c));
    const std::size_t m = l.n * l.spatial;
    const auto xv = x.values();
    std::vector<T> mu(l.c, T(0)), var(l.c, T(0));
    for (std::size_t b = 0; b < l.n; ++b) {
        for (std::size_t ch = 0; ch < l.c; ++ch) {
            const T* p = xv.data() + (b * l.c + ch) * l.spatial;
            for (std::size_t j = 0; j < l.spatial; ++j) mu[ch] += p[j];
        }
    }
    for (auto& v : mu) v /= static_cast<T>(m);
    for (std::size_t b = 0; b < l.n; ++b) {
        for (std::size_t ch = 0; ch < l.c; ++ch) {
            const T* p = xv.data() + (b * l.c + ch) * l.spatial;
            for (std::size_t j = 0; j < l.spatial; ++j) {
                const T d = p[j] - mu[ch];
                var[ch] += d * d;
            }
        }
    }
    for (auto& v : var) v /= static_cast<T>(m);
    auto inv_std = std::make_shared<std::vector<T>>(l.c);
    for (std::size_t ch = 0; ch < l.c; ++ch) (*inv_std)[ch] = T(1) / std::sqrt(var[ch] + eps);
    auto xhat = std::make_shared<std::vector<T>>(x.numel());
    std::vector<T> out(x.numel());
    const auto gv = gamma.values();
    const auto bv = beta.values();
    for (std::size_t b = 0; b < l.n; ++b) {
        for (std::size_t ch = 0; ch < l.c; ++ch) {
            const std::size_t off = (b * l.c + ch) * l.spatial;
            for (std::size_t j = 0; j < l.spatial; ++j) {
                const T h = (xv[off + j] - mu[ch]) * (*inv_std)[ch];
                (*xhat)[off + j] = h;
                out[off + j] = gv[ch] * h + bv[ch];
            }
        }
    }
    if (moments != nullptr) {
        moments->mean = mu;
        moments->var = var;
        moments->count = m;
    }
    return detail::make_op<T>(
        "batch_norm_train", x.shape(), std::move(out), {x, gamma, beta}, [l, m, inv_std, xhat](Node<T>& self) {
            Node<T>& nx = *self.inputs[0];
            Node<T>& ng = *self.inputs[1];
            Node<T>& nb = *self.inputs[2];
            const auto& g = self.grad;
            std::vector<T> sum_g(l.c, T(0)), sum_gx(l.c, T(0));
            for (std::size_t b = 0; b < l.n; ++b) {
                for (std::size_t ch = 0; ch < l.c; ++ch) {
                    const std::size_t off = (b * l.c + ch) * l.spatial;
                    for (std::size_t j = 0; j < l.spatial; ++j) {
                        sum_g[ch] += g[off + j];
                        sum_gx[ch] += g[off + j] * (*xhat)[off + j];
                    }
                }
            }
            if (ng.requires_grad) {
                auto& gg = ng.grad_buffer();
                for (std::size_t ch = 0; ch < l.c; ++ch) gg[ch] += sum_gx[ch];
            }
            if (nb.requires_grad) {
                auto& gb = nb.grad_buffer();
                for (std::size_t ch = 0; ch < l.c; ++ch) gb[ch] += sum_g[ch];
            }
            if (nx.requires_grad) {
                auto& gx = nx.grad_buffer();
                const T inv_m = T(1) / static_cast<T>(m);
                for (std::size_t b = 0; b < l.n; ++b) {
                    for (std::size_t ch = 0; ch < l.c; ++ch) {
                        const std::size_t off = (b * l.c + ch) * l.spatial;
                        const T k = ng.value[ch] * (*inv_std)[ch];
                        for (std::size_t j = 0; j < l.spatial; ++j) {
                            gx[off + j] += k * (g[off + j] - sum_g[ch] * inv_m - (*xhat)[off + j] * sum_gx[ch] * inv_m);
                        }
                    }
                }
            }
        });
}

/// Inference-mode batch normalization against fixed running statistics.
template <typename T>
Tensor<T> batch_norm_eval(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                          std::span<const T> running_mean, std::span<const T> running_var, T eps) {
    const auto l = detail::channel_layout(x.shape());
    require(gamma.numel() == l.c && beta.numel() == l.c && running_mean.size() == l.c && running_var.size() == l.c,
            ErrorKind::shape_mismatch, "batch norm state does not match channel count " + std::to_string(l.c));
    auto inv_std = std::make_shared<std::vector<T>>(l.c);
    for (std::size_t ch = 0; ch < l.c; ++ch) (*inv_std)[ch] = T(1) / std::sqrt(running_var[ch] + eps);
    std::vector<T> mu(running_mean.begin(), running_mean.end());
    const auto xv = x.values();
    const auto gv = gamma.values();
    const auto bv = beta.values();
    std::vector<T> out(x.numel());
    for (std::size_t b = 0; b < l.n; ++b) {
        for (std::size_t ch = 0; ch < l.c; ++ch) {
            const std::size_t off = (b * l.c + ch) * l.spatial;
            for (std::size_t j = 0; j < l.spatial; ++j) {
                out[off + j] = gv[ch] * (xv[off + j] - mu[ch]) * (*inv_std)[ch] + bv[ch];
            }
        }
    }
    return detail::make_op<T>(
        "batch_norm_eval", x.shape(), std::move(out), {x, gamma, beta}, [l, inv_std, mu](Node<T>& self) {
            Node<T>& nx = *self.inputs[0];
            Node<T>& ng = *self.inputs[1];
            Node<T>& nb = *self.inputs[2];
            const auto& g = self.grad;
            for (std::size_t b = 0; b < l.n; ++b) {
                for (std::size_t ch = 0; ch < l.c; ++ch) {
                    const std::size_t off = (b * l.c + ch) * l.spatial;
                    for (std::size_t j = 0; j < l.spatial; ++j) {
                        const T h = (nx.value[off + j] - mu[ch]) * (*inv_std)[ch];
                        if (ng.requires_grad) ng.grad_buffer()[ch] += g[off + j] * h;
                        if (nb.requires_grad) nb.grad_buffer()[ch] += g[off + j];
                        if (nx.requires_grad) nx.grad_buffer()[off + j] += g[off + j] * ng.value[ch] * (*inv_std)[ch];
                    }
                }
            }
        });
}

}  // namespace resmoco::ops

namespace resmoco {

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return ops::add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return ops::sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return ops::mul(a, b); }
template <typename T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return ops::div(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, std::type_identity_t<T> c) { return ops::mul(a, Tensor<T>::scalar(c)); }
template <typename T>
Tensor<T> operator*(std::type_identity_t<T> c, const Tensor<T>& a) { return ops::mul(a, Tensor<T>::scalar(c)); }
template <typename T>
Tensor<T> operator+(const Tensor<T>& a, std::type_identity_t<T> c) { return ops::add(a, Tensor<T>::scalar(c)); }
template <typename T>
Tensor<T> operator-(std::type_identity_t<T> c, const Tensor<T>& a) { return ops::sub(Tensor<T>::scalar(c), a); }

}  // namespace resmoco

#endif  // RESMOCO_OPS_HPP
