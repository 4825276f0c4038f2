#ifndef DIMR_OPS_HPP
#define DIMR_OPS_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "dimr/autodiff.hpp"
#include "dimr/tensor.hpp"

namespace dimr {

// Differentiable ops. Forward computes the value eagerly; the closure pushes
// the output gradient into the parents. No implicit broadcasting beyond the
// documented scalar and row cases.

/*----------------------------------- elementwise -----------------------------------*/

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a->value, b->value, "add");
    Tensor<T> out = a->value;
    for (size_t i = 0; i < out.size(); ++i) out.data[i] += b->value.data[i];
    return make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& self) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) a->grad.data[i] += self.grad.data[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) b->grad.data[i] += self.grad.data[i];
        }
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a->value, b->value, "sub");
    Tensor<T> out = a->value;
    for (size_t i = 0; i < out.size(); ++i) out.data[i] -= b->value.data[i];
    return make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& self) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) a->grad.data[i] += self.grad.data[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) b->grad.data[i] -= self.grad.data[i];
        }
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a->value, b->value, "mul");
    Tensor<T> out = a->value;
    for (size_t i = 0; i < out.size(); ++i) out.data[i] *= b->value.data[i];
    return make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& self) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) a->grad.data[i] += self.grad.data[i] * b->value.data[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) b->grad.data[i] += self.grad.data[i] * a->value.data[i];
        }
    });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, double c) {
    Tensor<T> out = a->value;
    for (T& v : out.data) v += T(c);
    return make_op<T>(std::move(out), {a}, [a](Node<T>& self) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) a->grad.data[i] += self.grad.data[i];
    });
}

template <typename T>
Var<T> mul_scalar(const Var<T>& a, double c) {
    Tensor<T> out = a->value;
    for (T& v : out.data) v *= T(c);
    return make_op<T>(std::move(out), {a}, [a, c](Node<T>& self) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) a->grad.data[i] += self.grad.data[i] * T(c);
    });
}

// multiply a tensor by a one-element node (the only tensor-with-scalar broadcast)
template <typename T>
Var<T> scale_by(const Var<T>& x, const Var<T>& s) {
    if (s->value.size() != 1) throw ShapeError("scale_by: scale must have one element, got " + shape_str(s->value.shape));
    Tensor<T> out = x->value;
    T sv = s->value.data[0];
    for (T& v : out.data) v *= sv;
    return make_op<T>(std::move(out), {x, s}, [x, s, sv](Node<T>& self) {
        if (x->requires_grad) {
            x->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) x->grad.data[i] += self.grad.data[i] * sv;
        }
        if (s->requires_grad) {
            s->ensure_grad();
            T acc = 0;
            for (size_t i = 0; i < self.grad.size(); ++i) acc += self.grad.data[i] * x->value.data[i];
            s->grad.data[0] += acc;
        }
    });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
    Tensor<T> out = x->value;
    for (T& v : out.data) v = T(1) / (T(1) + std::exp(-v));
    Tensor<T> y = out;
    return make_op<T>(std::move(out), {x}, [x, y](Node<T>& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            T s = y.data[i];
            x->grad.data[i] += self.grad.data[i] * s * (T(1) - s);
        }
    });
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
    static const double inv_sqrt2 = 0.70710678118654752440;
    static const double inv_sqrt2pi = 0.39894228040143267794;
    Tensor<T> out = x->value;
    for (T& v : out.data) v = T(0.5 * double(v) * (1.0 + std::erf(double(v) * inv_sqrt2)));
    return make_op<T>(std::move(out), {x}, [x](Node<T>& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            double v = double(x->value.data[i]);
            double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
            double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
            x->grad.data[i] += self.grad.data[i] * T(cdf + v * pdf);
        }
    });
}

template <typename T>
Var<T> silu(const Var<T>& x) {
    Tensor<T> out = x->value;
    for (T& v : out.data) v = v / (T(1) + std::exp(-v));
    return make_op<T>(std::move(out), {x}, [x](Node<T>& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            T v = x->value.data[i];
            T s = T(1) / (T(1) + std::exp(-v));
            x->grad.data[i] += self.grad.data[i] * s * (T(1) + v * (T(1) - s));
        }
    });
}

/*----------------------------------- reductions -----------------------------------*/

template <typename T>
Var<T> sum_all(const Var<T>& x) {
    T acc = 0;
    for (T v : x->value.data) acc += v;
    return make_op<T>(Tensor<T>::scalar(acc), {x}, [x](Node<T>& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        T g = self.grad.data[0];
        for (size_t i = 0; i < x->grad.size(); ++i) x->grad.data[i] += g;
    });
}

template <typename T>
Var<T> mean_all(const Var<T>& x) {
    if (x->value.size() == 0) throw ShapeError("mean_all: empty tensor");
    T acc = 0;
    for (T v : x->value.data) acc += v;
    T n = T(double(x->value.size()));
    return make_op<T>(Tensor<T>::scalar(acc / n), {x}, [x, n](Node<T>& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        T g = self.grad.data[0] / n;
        for (size_t i = 0; i < x->grad.size(); ++i) x->grad.data[i] += g;
    });
}

// mean squared error against another node (targets are usually const leaves)
template <typename T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a->value, b->value, "mse");
    size_t n = a->value.size();
    if (n == 0) throw ShapeError("mse: empty tensor");
    double acc = 0;
    for (size_t i = 0; i < n; ++i) {
        double d = double(a->value.data[i]) - double(b->value.data[i]);
        acc += d * d;
    }
    return make_op<T>(Tensor<T>::scalar(T(acc / double(n))), {a, b}, [a, b, n](Node<T>& self) {
        T g = self.grad.data[0] * T(2.0 / double(n));
        if (a->requires_grad) {
            a->ensure_grad();
            for (size_t i = 0; i < n; ++i) a->grad.data[i] += g * (a->value.data[i] - b->value.data[i]);
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (size_t i = 0; i < n; ++i) b->grad.data[i] -= g * (a->value.data[i] - b->value.data[i]);
        }
    });
}

/*----------------------------------- shape moves -----------------------------------*/

template <typename T>
Var<T> reshape(const Var<T>& x, Shape s) {
    Tensor<T> out = x->value.reshaped(s);
    return make_op<T>(std::move(out), {x}, [x](Node<T>& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) x->grad.data[i] += self.grad.data[i];
    });
}

namespace detail {
inline void unravel(size_t flat, const Shape& shape, size_t* idx) {
    for (size_t d = shape.size(); d-- > 0;) {
        idx[d] = flat % shape[d];
        flat /= shape[d];
    }
}
inline size_t ravel(const size_t* idx, const Shape& shape) {
    size_t flat = 0;
    for (size_t d = 0; d < shape.size(); ++d) flat = flat * shape[d] + idx[d];
    return flat;
}
} // namespace detail

// permutation of axes, rank <= 4 covers every layout move the model needs
template <typename T>
Var<T> permute(const Var<T>& x, std::vector<size_t> perm) {
    const Shape& in = x->value.shape;
    if (perm.size() != in.size() || in.size() > 4)
        throw ShapeError("permute: perm rank " + std::to_string(perm.size()) + " vs tensor " + shape_str(in));
    Shape out_shape(in.size());
    for (size_t i = 0; i < perm.size(); ++i) out_shape[i] = in.at(perm[i]);
    Tensor<T> out(out_shape);
    size_t oid[4], iid[4];
    for (size_t f = 0; f < out.size(); ++f) {
        detail::unravel(f, out_shape, oid);
        for (size_t d = 0; d < perm.size(); ++d) iid[perm[d]] = oid[d];
        out.data[f] = x->value.data[detail::ravel(iid, in)];
    }
    return make_op<T>(std::move(out), {x}, [x, perm, out_shape](Node<T>& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        size_t oid[4], iid[4];
        for (size_t f = 0; f < self.grad.size(); ++f) {
            detail::unravel(f, out_shape, oid);
            for (size_t d = 0; d < perm.size(); ++d) iid[perm[d]] = oid[d];
            x->grad.data[detail::ravel(iid, x->value.shape)] += self.grad.data[f];
        }
    });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, size_t axis) {
    if (xs.empty()) throw ShapeError("concat: no inputs");
    const Shape& ref = xs[0]->value.shape;
    if (axis >= ref.size()) throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for " + shape_str(ref));
    size_t total = 0;
    for (const auto& x : xs) {
        const Shape& s = x->value.shape;
        if (s.size() != ref.size()) throw ShapeError("concat: rank mismatch " + shape_str(s) + " vs " + shape_str(ref));
        for (size_t d = 0; d < s.size(); ++d)
            if (d != axis && s[d] != ref[d])
                throw ShapeError("concat: extent mismatch at axis " + std::to_string(d) + ": " + shape_str(s) + " vs " + shape_str(ref));
        total += s[axis];
    }
    Shape out_shape = ref;
    out_shape[axis] = total;

    // outer x axis x inner decomposition
    size_t outer = 1, inner = 1;
    for (size_t d = 0; d < axis; ++d) outer *= ref[d];
    for (size_t d = axis + 1; d < ref.size(); ++d) inner *= ref[d];

    Tensor<T> out(out_shape);
    size_t off = 0;
    for (const auto& x : xs) {
        size_t ext = x->value.shape[axis];
        for (size_t o = 0; o < outer; ++o)
            for (size_t a = 0; a < ext; ++a)
                std::copy_n(&x->value.data[(o * ext + a) * inner], inner, &out.data[(o * total + off + a) * inner]);
        off += ext;
    }
    return make_op<T>(std::move(out), xs, [xs, axis, outer, inner, total](Node<T>& self) {
        size_t off = 0;
        for (const auto& x : xs) {
            size_t ext = x->value.shape[axis];
            if (x->requires_grad) {
                x->ensure_grad();
                for (size_t o = 0; o < outer; ++o)
                    for (size_t a = 0; a < ext; ++a) {
                        const T* src = &self.grad.data[(o * total + off + a) * inner];
                        T* dst = &x->grad.data[(o * ext + a) * inner];
                        for (size_t i = 0; i < inner; ++i) dst[i] += src[i];
                    }
            }
            off += ext;
        }
    });
}

template <typename T>
Var<T> slice(const Var<T>& x, size_t axis, size_t start, size_t len) {
    const Shape& in = x->value.shape;
    if (axis >= in.size() || start + len > in[axis])
        throw ShapeError("slice: [" + std::to_string(start) + "," + std::to_string(start + len) + ") on axis " +
                         std::to_string(axis) + " of " + shape_str(in));
    Shape out_shape = in;
    out_shape[axis] = len;
    size_t outer = 1, inner = 1;
    for (size_t d = 0; d < axis; ++d) outer *= in[d];
    for (size_t d = axis + 1; d < in.size(); ++d) inner *= in[d];
    size_t ext = in[axis];

    Tensor<T> out(out_shape);
    for (size_t o = 0; o < outer; ++o)
        for (size_t a = 0; a < len; ++a)
            std::copy_n(&x->value.data[(o * ext + start + a) * inner], inner, &out.data[(o * len + a) * inner]);
    return make_op<T>(std::move(out), {x}, [x, start, len, outer, inner, ext](Node<T>& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (size_t o = 0; o < outer; ++o)
            for (size_t a = 0; a < len; ++a) {
                const T* src = &self.grad.data[(o * len + a) * inner];
                T* dst = &x->grad.data[(o * ext + start + a) * inner];
                for (size_t i = 0; i < inner; ++i) dst[i] += src[i];
            }
    });
}

// x[B, ...rest] + m[...rest], broadcast over the leading axis (positional embeddings)
template <typename T>
Var<T> rows_add(const Var<T>& x, const Var<T>& m) {
    if (x->value.rank() < 2) throw ShapeError("rows_add: need rank >= 2, got " + shape_str(x->value.shape));
    size_t batch = x->value.shape[0];
    size_t rest = x->value.size() / batch;
    if (m->value.size() != rest)
        throw ShapeError("rows_add: row tensor " + shape_str(m->value.shape) + " does not match " + shape_str(x->value.shape));
    Tensor<T> out = x->value;
    for (size_t b = 0; b < batch; ++b)
        for (size_t i = 0; i < rest; ++i) out.data[b * rest + i] += m->value.data[i];
    return make_op<T>(std::move(out), {x, m}, [x, m, batch, rest](Node<T>& self) {
        if (x->requires_grad) {
            x->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) x->grad.data[i] += self.grad.data[i];
        }
        if (m->requires_grad) {
            m->ensure_grad();
            for (size_t b = 0; b < batch; ++b)
                for (size_t i = 0; i < rest; ++i) m->grad.data[i] += self.grad.data[b * rest + i];
        }
    });
}

// gather rows of an embedding table; gradient scatter-adds back
template <typename T>
Var<T> embed_rows(const Var<T>& table, const std::vector<size_t>& ids) {
    if (table->value.rank() != 2) throw ShapeError("embed_rows: table must be rank 2, got " + shape_str(table->value.shape));
    size_t rows = table->value.shape[0], dim = table->value.shape[1];
    for (size_t id : ids)
        if (id >= rows) throw ShapeError("embed_rows: id " + std::to_string(id) + " out of " + std::to_string(rows) + " rows");
    Tensor<T> out(Shape{ids.size(), dim});
    for (size_t b = 0; b < ids.size(); ++b)
        std::copy_n(&table->value.data[ids[b] * dim], dim, &out.data[b * dim]);
    return make_op<T>(std::move(out), {table}, [table, ids, dim](Node<T>& self) {
        if (!table->requires_grad) return;
        table->ensure_grad();
        for (size_t b = 0; b < ids.size(); ++b)
            for (size_t d = 0; d < dim; ++d) table->grad.data[ids[b] * dim + d] += self.grad.data[b * dim + d];
    });
}

/*----------------------------------- linear algebra -----------------------------------*/

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    if (a->value.rank() != 2 || b->value.rank() != 2)
        throw ShapeError("matmul: need rank-2 operands, got " + shape_str(a->value.shape) + " x " + shape_str(b->value.shape));
    size_t m = a->value.shape[0], k = a->value.shape[1];
    size_t k2 = b->value.shape[0], n = b->value.shape[1];
    if (k != k2) throw ShapeError("matmul: inner extent " + std::to_string(k) + " vs " + std::to_string(k2));
    Tensor<T> out(Shape{m, n});
    for (size_t i = 0; i < m; ++i)
        for (size_t p = 0; p < k; ++p) {
            T av = a->value.data[i * k + p];
            if (av == T(0)) continue;
            const T* brow = &b->value.data[p * n];
            T* orow = &out.data[i * n];
            for (size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    return make_op<T>(std::move(out), {a, b}, [a, b, m, k, n](Node<T>& self) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (size_t i = 0; i < m; ++i)
                for (size_t j = 0; j < n; ++j) {
                    T g = self.grad.data[i * n + j];
                    if (g == T(0)) continue;
                    for (size_t p = 0; p < k; ++p) a->grad.data[i * k + p] += g * b->value.data[p * n + j];
                }
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (size_t i = 0; i < m; ++i)
                for (size_t p = 0; p < k; ++p) {
                    T av = a->value.data[i * k + p];
                    if (av == T(0)) continue;
                    for (size_t j = 0; j < n; ++j) b->grad.data[p * n + j] += av * self.grad.data[i * n + j];
                }
        }
    });
}

// batched matmul, [B,m,k] x [B,k,n] -> [B,m,n]
template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b) {
    if (a->value.rank() != 3 || b->value.rank() != 3 || a->value.shape[0] != b->value.shape[0] ||
        a->value.shape[2] != b->value.shape[1])
        throw ShapeError("bmm: incompatible " + shape_str(a->value.shape) + " x " + shape_str(b->value.shape));
    size_t B = a->value.shape[0], m = a->value.shape[1], k = a->value.shape[2], n = b->value.shape[2];
    Tensor<T> out(Shape{B, m, n});
    for (size_t bi = 0; bi < B; ++bi) {
        const T* A = &a->value.data[bi * m * k];
        const T* Bm = &b->value.data[bi * k * n];
        T* O = &out.data[bi * m * n];
        for (size_t i = 0; i < m; ++i)
            for (size_t p = 0; p < k; ++p) {
                T av = A[i * k + p];
                for (size_t j = 0; j < n; ++j) O[i * n + j] += av * Bm[p * n + j];
            }
    }
    return make_op<T>(std::move(out), {a, b}, [a, b, B, m, k, n](Node<T>& self) {
        for (size_t bi = 0; bi < B; ++bi) {
            const T* G = &self.grad.data[bi * m * n];
            if (a->requires_grad) {
                a->ensure_grad();
                const T* Bm = &b->value.data[bi * k * n];
                T* dA = &a->grad.data[bi * m * k];
                for (size_t i = 0; i < m; ++i)
                    for (size_t j = 0; j < n; ++j) {
                        T g = G[i * n + j];
                        for (size_t p = 0; p < k; ++p) dA[i * k + p] += g * Bm[p * n + j];
                    }
            }
            if (b->requires_grad) {
                b->ensure_grad();
                const T* A = &a->value.data[bi * m * k];
                T* dB = &b->grad.data[bi * k * n];
                for (size_t i = 0; i < m; ++i)
                    for (size_t p = 0; p < k; ++p) {
                        T av = A[i * k + p];
                        for (size_t j = 0; j < n; ++j) dB[p * n + j] += av * G[i * n + j];
                    }
            }
        }
    });
}

// y[..., O] = x[..., K] W^T + b, leading axes folded
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    if (w->value.rank() != 2) throw ShapeError("linear: weight must be rank 2, got " + shape_str(w->value.shape));
    size_t K = x->value.shape.back();
    size_t O = w->value.shape[0];
    if (w->value.shape[1] != K)
        throw ShapeError("linear: input width " + std::to_string(K) + " vs weight " + shape_str(w->value.shape));
    bool has_bias = b != nullptr;
    if (has_bias && (b->value.rank() != 1 || b->value.shape[0] != O))
        throw ShapeError("linear: bias " + shape_str(b->value.shape) + " vs out width " + std::to_string(O));
    size_t R = x->value.size() / K;
    Shape out_shape = x->value.shape;
    out_shape.back() = O;
    Tensor<T> out(out_shape);
    for (size_t r = 0; r < R; ++r) {
        const T* xr = &x->value.data[r * K];
        T* yr = &out.data[r * O];
        for (size_t o = 0; o < O; ++o) {
            const T* wrow = &w->value.data[o * K];
            T acc = has_bias ? b->value.data[o] : T(0);
            for (size_t k = 0; k < K; ++k) acc += xr[k] * wrow[k];
            yr[o] = acc;
        }
    }
    std::vector<Var<T>> parents = {x, w};
    if (has_bias) parents.push_back(b);
    return make_op<T>(std::move(out), std::move(parents), [x, w, b, has_bias, R, K, O](Node<T>& self) {
        if (x->requires_grad) {
            x->ensure_grad();
            for (size_t r = 0; r < R; ++r) {
                const T* g = &self.grad.data[r * O];
                T* dx = &x->grad.data[r * K];
                for (size_t o = 0; o < O; ++o) {
                    T gv = g[o];
                    if (gv == T(0)) continue;
                    const T* wrow = &w->value.data[o * K];
                    for (size_t k = 0; k < K; ++k) dx[k] += gv * wrow[k];
                }
            }
        }
        if (w->requires_grad) {
            w->ensure_grad();
            for (size_t r = 0; r < R; ++r) {
                const T* g = &self.grad.data[r * O];
                const T* xr = &x->value.data[r * K];
                for (size_t o = 0; o < O; ++o) {
                    T gv = g[o];
                    if (gv == T(0)) continue;
                    T* wrow = &w->grad.data[o * K];
                    for (size_t k = 0; k < K; ++k) wrow[k] += gv * xr[k];
                }
            }
        }
        if (has_bias && b->requires_grad) {
            b->ensure_grad();
            for (size_t r = 0; r < R; ++r)
                for (size_t o = 0; o < O; ++o) b->grad.data[o] += self.grad.data[r * O + o];
        }
    });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w) {
    return linear(x, w, Var<T>(nullptr));
}

/*----------------------------------- conv / pool / shuffle -----------------------------------*/

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, size_t stride, size_t padding, size_t groups = 1) {
    const Shape& xs = x->value.shape;
    const Shape& ws = w->value.shape;
    if (xs.size() != 4) throw ShapeError("conv2d: input must be [B,C,H,W], got " + shape_str(xs));
    if (ws.size() != 4) throw ShapeError("conv2d: kernel must be [O,C/g,k,k], got " + shape_str(ws));
    if (stride == 0) throw ShapeError("conv2d: stride must be positive");
    if (groups == 0) throw ShapeError("conv2d: groups must be positive");
    size_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    size_t O = ws[0], Cpg = ws[1], kh = ws[2], kw = ws[3];
    if (C % groups != 0)
        throw ShapeError("conv2d: input channels " + std::to_string(C) + " not divisible by groups " + std::to_string(groups));
    if (O % groups != 0)
        throw ShapeError("conv2d: output channels " + std::to_string(O) + " not divisible by groups " + std::to_string(groups));
    if (Cpg != C / groups)
        throw ShapeError("conv2d: kernel channel extent " + std::to_string(Cpg) + " vs C/groups " + std::to_string(C / groups));
    if (H + 2 * padding < kh || W + 2 * padding < kw)
        throw ShapeError("conv2d: padded spatial extent " + std::to_string(H + 2 * padding) + "x" +
                         std::to_string(W + 2 * padding) + " smaller than kernel " + std::to_string(kh));
    bool has_bias = b != nullptr;
    if (has_bias && (b->value.rank() != 1 || b->value.shape[0] != O))
        throw ShapeError("conv2d: bias " + shape_str(b->value.shape) + " vs out channels " + std::to_string(O));

    size_t Ho = (H + 2 * padding - kh) / stride + 1;
    size_t Wo = (W + 2 * padding - kw) / stride + 1;
    size_t opg = O / groups;
    Tensor<T> out(Shape{B, O, Ho, Wo});

    // bounds are hoisted out of the tap loops: for each output row the valid
    // kernel window [r0,r1) x [c0,c1) is known, so the inner loop runs over
    // contiguous input/kernel spans
    auto kh_range = [=](size_t oh, size_t& r0, size_t& r1) {
        long lo = long(padding) - long(oh * stride);
        r0 = lo > 0 ? size_t(lo) : 0;
        long hi = long(H) + long(padding) - long(oh * stride);
        r1 = hi < long(kh) ? size_t(hi) : kh;
    };
    auto kw_range = [=](size_t ow, size_t& c0, size_t& c1) {
        long lo = long(padding) - long(ow * stride);
        c0 = lo > 0 ? size_t(lo) : 0;
        long hi = long(W) + long(padding) - long(ow * stride);
        c1 = hi < long(kw) ? size_t(hi) : kw;
    };

    const T* xd = x->value.data.data();
    const T* wd = w->value.data.data();
    for (size_t bi = 0; bi < B; ++bi)
        for (size_t o = 0; o < O; ++o) {
            size_t cbase = (o / opg) * Cpg;
            T bias = has_bias ? b->value.data[o] : T(0);
            for (size_t oh = 0; oh < Ho; ++oh) {
                size_t r0, r1;
                kh_range(oh, r0, r1);
                for (size_t ow = 0; ow < Wo; ++ow) {
                    size_t c0, c1;
                    kw_range(ow, c0, c1);
                    long base_iw = long(ow * stride) - long(padding);
                    T acc = bias;
                    for (size_t ci = 0; ci < Cpg; ++ci) {
                        const T* xc = xd + ((bi * C + cbase + ci) * H) * W;
                        const T* wc = wd + ((o * Cpg + ci) * kh) * kw;
                        for (size_t r = r0; r < r1; ++r) {
                            const T* xrow = xc + (oh * stride + r - padding) * W;
                            const T* wrow = wc + r * kw;
                            for (size_t cc = c0; cc < c1; ++cc) acc += xrow[size_t(base_iw + long(cc))] * wrow[cc];
                        }
                    }
                    out.at4(bi, o, oh, ow) = acc;
                }
            }
        }

    std::vector<Var<T>> parents = {x, w};
    if (has_bias) parents.push_back(b);
    return make_op<T>(std::move(out), std::move(parents),
                      [x, w, b, has_bias, stride, padding, B, C, H, W, O, Cpg, kh, kw, Ho, Wo, opg, kh_range,
                       kw_range](Node<T>& self) {
                          bool gx = x->requires_grad, gw = w->requires_grad, gb = has_bias && b->requires_grad;
                          if (gx) x->ensure_grad();
                          if (gw) w->ensure_grad();
                          if (gb) b->ensure_grad();
                          if (!gx && !gw && !gb) return;
                          const T* xd = x->value.data.data();
                          const T* wd = w->value.data.data();
                          for (size_t bi = 0; bi < B; ++bi)
                              for (size_t o = 0; o < O; ++o) {
                                  size_t cbase = (o / opg) * Cpg;
                                  for (size_t oh = 0; oh < Ho; ++oh) {
                                      size_t r0, r1;
                                      kh_range(oh, r0, r1);
                                      for (size_t ow = 0; ow < Wo; ++ow) {
                                          T g = self.grad.at4(bi, o, oh, ow);
                                          if (g == T(0)) continue;
                                          if (gb) b->grad.data[o] += g;
                                          size_t c0, c1;
                                          kw_range(ow, c0, c1);
                                          long base_iw = long(ow * stride) - long(padding);
                                          for (size_t ci = 0; ci < Cpg; ++ci) {
                                              size_t xoff = ((bi * C + cbase + ci) * H) * W;
                                              size_t woff = ((o * Cpg + ci) * kh) * kw;
                                              for (size_t r = r0; r < r1; ++r) {
                                                  size_t xrow = xoff + (oh * stride + r - padding) * W;
                                                  size_t wrow = woff + r * kw;
                                                  if (gx && gw) {
                                                      T* dxr = &x->grad.data[xrow];
                                                      T* dwr = &w->grad.data[wrow];
                                                      for (size_t cc = c0; cc < c1; ++cc) {
                                                          size_t xi = size_t(base_iw + long(cc));
                                                          dxr[xi] += g * wd[wrow + cc];
                                                          dwr[cc] += g * xd[xrow + xi];
                                                      }
                                                  } else if (gx) {
                                                      T* dxr = &x->grad.data[xrow];
                                                      for (size_t cc = c0; cc < c1; ++cc)
                                                          dxr[size_t(base_iw + long(cc))] += g * wd[wrow + cc];
                                                  } else if (gw) {
                                                      T* dwr = &w->grad.data[wrow];
                                                      for (size_t cc = c0; cc < c1; ++cc)
                                                          dwr[cc] += g * xd[xrow + size_t(base_iw + long(cc))];
                                                  }
                                              }
                                          }
                                      }
                                  }
                              }
                      });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, size_t stride, size_t padding, size_t groups = 1) {
    return conv2d(x, w, Var<T>(nullptr), stride, padding, groups);
}

template <typename T>
Var<T> avg_pool2d(const Var<T>& x, size_t k) {
    const Shape& xs = x->value.shape;
    if (xs.size() != 4) throw ShapeError("avg_pool2d: input must be [B,C,H,W], got " + shape_str(xs));
    if (k == 0) throw ShapeError("avg_pool2d: kernel must be positive");
    size_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    if (H % k != 0 || W % k != 0)
        throw ShapeError("avg_pool2d: spatial extents " + std::to_string(H) + "x" + std::to_string(W) +
                         " not divisible by kernel " + std::to_string(k));
    size_t Ho = H / k, Wo = W / k;
    T inv = T(1.0 / double(k * k));
    Tensor<T> out(Shape{B, C, Ho, Wo});
    for (size_t b = 0; b < B; ++b)
        for (size_t c = 0; c < C; ++c)
            for (size_t oh = 0; oh < Ho; ++oh)
                for (size_t ow = 0; ow < Wo; ++ow) {
                    T acc = 0;
                    for (size_t r = 0; r < k; ++r)
                        for (size_t s = 0; s < k; ++s) acc += x->value.at4(b, c, oh * k + r, ow * k + s);
                    out.at4(b, c, oh, ow) = acc * inv;
                }
    return make_op<T>(std::move(out), {x}, [x, k, B, C, Ho, Wo, inv](Node<T>& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (size_t b = 0; b < B; ++b)
            for (size_t c = 0; c < C; ++c)
                for (size_t oh = 0; oh < Ho; ++oh)
                    for (size_t ow = 0; ow < Wo; ++ow) {
                        T g = self.grad.at4(b, c, oh, ow) * inv;
                        for (size_t r = 0; r < k; ++r)
                            for (size_t s = 0; s < k; ++s) x->grad.at4(b, c, oh * k + r, ow * k + s) += g;
                    }
    });
}

// out(b, c, s*h+i, s*w+j) = in(b, c*s^2 + i*s + j, h, w)
template <typename T>
Var<T> pixel_shuffle(const Var<T>& x, size_t s) {
    const Shape& xs = x->value.shape;
    if (xs.size() != 4) throw ShapeError("pixel_shuffle: input must be [B,C,H,W], got " + shape_str(xs));
    if (s == 0) throw ShapeError("pixel_shuffle: factor must be positive");
    size_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    if (C % (s * s) != 0)
        throw ShapeError("pixel_shuffle: channels " + std::to_string(C) + " not divisible by " + std::to_string(s * s));
    size_t Co = C / (s * s);
    Tensor<T> out(Shape{B, Co, s * H, s * W});
    for (size_t b = 0; b < B; ++b)
        for (size_t c = 0; c < Co; ++c)
            for (size_t i = 0; i < s; ++i)
                for (size_t j = 0; j < s; ++j)
                    for (size_t h = 0; h < H; ++h)
                        for (size_t w = 0; w < W; ++w)
                            out.at4(b, c, s * h + i, s * w + j) = x->value.at4(b, c * s * s + i * s + j, h, w);
    return make_op<T>(std::move(out), {x}, [x, s, B, Co, H, W](Node<T>& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (size_t b = 0; b < B; ++b)
            for (size_t c = 0; c < Co; ++c)
                for (size_t i = 0; i < s; ++i)
                    for (size_t j = 0; j < s; ++j)
                        for (size_t h = 0; h < H; ++h)
                            for (size_t w = 0; w < W; ++w)
                                x->grad.at4(b, c * s * s + i * s + j, h, w) += self.grad.at4(b, c, s * h + i, s * w + j);
    });
}

template <typename T>
Var<T> pixel_unshuffle(const Var<T>& x, size_t s) {
    const Shape& xs = x->value.shape;
    if (xs.size() != 4) throw ShapeError("pixel_unshuffle: input must be [B,C,H,W], got " + shape_str(xs));
    if (s == 0) throw ShapeError("pixel_unshuffle: factor must be positive");
    size_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    if (H % s != 0 || W % s != 0)
        throw ShapeError("pixel_unshuffle: spatial extents " + std::to_string(H) + "x" + std::to_string(W) +
                         " not divisible by " + std::to_string(s));
    size_t Ho = H / s, Wo = W / s;
    Tensor<T> out(Shape{B, C * s * s, Ho, Wo});
    for (size_t b = 0; b < B; ++b)
        for (size_t c = 0; c < C; ++c)
            for (size_t i = 0; i < s; ++i)
                for (size_t j = 0; j < s; ++j)
                    for (size_t h = 0; h < Ho; ++h)
                        for (size_t w = 0; w < Wo; ++w)
                            out.at4(b, c * s * s + i * s + j, h, w) = x->value.at4(b, c, s * h + i, s * w + j);
    return make_op<T>(std::move(out), {x}, [x, s, B, C, Ho, Wo](Node<T>& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (size_t b = 0; b < B; ++b)
            for (size_t c = 0; c < C; ++c)
                for (size_t i = 0; i < s; ++i)
                    for (size_t j = 0; j < s; ++j)
                        for (size_t h = 0; h < Ho; ++h)
                            for (size_t w = 0; w < Wo; ++w)
                                x->grad.at4(b, c, s * h + i, s * w + j) += self.grad.at4(b, c * s * s + i * s + j, h, w);
    });
}

/*----------------------------------- normalization / softmax -----------------------------------*/

// normalization over the last axis with a biased variance, then affine
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, double eps = 1e-5) {
    size_t C = x->value.shape.empty() ? 0 : x->value.shape.back();
    if (C == 0) throw ShapeError("layer_norm: empty channel axis");
    if (gamma->value.size() != C || beta->value.size() != C)
        throw ShapeError("layer_norm: affine extents " + shape_str(gamma->value.shape) + "/" + shape_str(beta->value.shape) +
                         " vs channels " + std::to_string(C));
    size_t R = x->value.size() / C;
    Tensor<T> xhat(x->value.shape);
    Tensor<T> inv_std(Shape{R});
    Tensor<T> out(x->value.shape);
    for (size_t r = 0; r < R; ++r) {
        const T* xr = &x->value.data[r * C];
        double mu = 0;
        for (size_t c = 0; c < C; ++c) mu += double(xr[c]);
        mu /= double(C);
        double var = 0;
        for (size_t c = 0; c < C; ++c) {
            double d = double(xr[c]) - mu;
            var += d * d;
        }
        var /= double(C);
        T inv = T(1.0 / std::sqrt(var + eps));
        inv_std.data[r] = inv;
        for (size_t c = 0; c < C; ++c) {
            T xh = (xr[c] - T(mu)) * inv;
            xhat.data[r * C + c] = xh;
            out.data[r * C + c] = gamma->value.data[c] * xh + beta->value.data[c];
        }
    }
    return make_op<T>(std::move(out), {x, gamma, beta}, [x, gamma, beta, xhat, inv_std, R, C](Node<T>& self) {
        if (gamma->requires_grad) {
            gamma->ensure_grad();
            for (size_t r = 0; r < R; ++r)
                for (size_t c = 0; c < C; ++c) gamma->grad.data[c] += self.grad.data[r * C + c] * xhat.data[r * C + c];
        }
        if (beta->requires_grad) {
            beta->ensure_grad();
            for (size_t r = 0; r < R; ++r)
                for (size_t c = 0; c < C; ++c) beta->grad.data[c] += self.grad.data[r * C + c];
        }
        if (x->requires_grad) {
            x->ensure_grad();
            for (size_t r = 0; r < R; ++r) {
                double mean_dxhat = 0, mean_dxhat_xhat = 0;
                for (size_t c = 0; c < C; ++c) {
                    double dxh = double(self.grad.data[r * C + c]) * double(gamma->value.data[c]);
                    mean_dxhat += dxh;
                    mean_dxhat_xhat += dxh * double(xhat.data[r * C + c]);
                }
                mean_dxhat /= double(C);
                mean_dxhat_xhat /= double(C);
                for (size_t c = 0; c < C; ++c) {
                    double dxh = double(self.grad.data[r * C + c]) * double(gamma->value.data[c]);
                    x->grad.data[r * C + c] +=
                        T(double(inv_std.data[r]) * (dxh - mean_dxhat - double(xhat.data[r * C + c]) * mean_dxhat_xhat));
                }
            }
        }
    });
}

template <typename T>
Var<T> softmax_lastdim(const Var<T>& x) {
    size_t C = x->value.shape.empty() ? 0 : x->value.shape.back();
    if (C == 0) throw ShapeError("softmax: empty axis");
    size_t R = x->value.size() / C;
    Tensor<T> out(x->value.shape);
    for (size_t r = 0; r < R; ++r) {
        const T* xr = &x->value.data[r * C];
        T mx = xr[0];
        for (size_t c = 1; c < C; ++c) mx = std::max(mx, xr[c]);
        double z = 0;
        for (size_t c = 0; c < C; ++c) z += std::exp(double(xr[c] - mx));
        for (size_t c = 0; c < C; ++c) out.data[r * C + c] = T(std::exp(double(xr[c] - mx)) / z);
    }
    Tensor<T> y = out;
    return make_op<T>(std::move(out), {x}, [x, y, R, C](Node<T>& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (size_t r = 0; r < R; ++r) {
            double dot = 0;
            for (size_t c = 0; c < C; ++c) dot += double(self.grad.data[r * C + c]) * double(y.data[r * C + c]);
            for (size_t c = 0; c < C; ++c)
                x->grad.data[r * C + c] += T(double(y.data[r * C + c]) * (double(self.grad.data[r * C + c]) - dot));
        }
    });
}

// x[B,L,D] scaled per-(batch,channel) by g[B,D]; used by adaptive norms
template <typename T>
Var<T> scale_tokens(const Var<T>& x, const Var<T>& g) {
    const Shape& xs = x->value.shape;
    if (xs.size() != 3 || g->value.rank() != 2 || g->value.shape[0] != xs[0] || g->value.shape[1] != xs[2])
        throw ShapeError("scale_tokens: " + shape_str(xs) + " vs " + shape_str(g->value.shape));
    size_t B = xs[0], L = xs[1], D = xs[2];
    Tensor<T> out = x->value;
    for (size_t b = 0; b < B; ++b)
        for (size_t l = 0; l < L; ++l)
            for (size_t d = 0; d < D; ++d) out.data[(b * L + l) * D + d] *= g->value.data[b * D + d];
    return make_op<T>(std::move(out), {x, g}, [x, g, B, L, D](Node<T>& self) {
        if (x->requires_grad) {
            x->ensure_grad();
            for (size_t b = 0; b < B; ++b)
                for (size_t l = 0; l < L; ++l)
                    for (size_t d = 0; d < D; ++d)
                        x->grad.data[(b * L + l) * D + d] += self.grad.data[(b * L + l) * D + d] * g->value.data[b * D + d];
        }
        if (g->requires_grad) {
            g->ensure_grad();
            for (size_t b = 0; b < B; ++b)
                for (size_t l = 0; l < L; ++l)
                    for (size_t d = 0; d < D; ++d)
                        g->grad.data[b * D + d] += self.grad.data[(b * L + l) * D + d] * x->value.data[(b * L + l) * D + d];
        }
    });
}

template <typename T>
Var<T> shift_tokens(const Var<T>& x, const Var<T>& g) {
    const Shape& xs = x->value.shape;
    if (xs.size() != 3 || g->value.rank() != 2 || g->value.shape[0] != xs[0] || g->value.shape[1] != xs[2])
        throw ShapeError("shift_tokens: " + shape_str(xs) + " vs " + shape_str(g->value.shape));
    size_t B = xs[0], L = xs[1], D = xs[2];
    Tensor<T> out = x->value;
    for (size_t b = 0; b < B; ++b)
        for (size_t l = 0; l < L; ++l)
            for (size_t d = 0; d < D; ++d) out.data[(b * L + l) * D + d] += g->value.data[b * D + d];
    return make_op<T>(std::move(out), {x, g}, [x, g, B, L, D](Node<T>& self) {
        if (x->requires_grad) {
            x->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) x->grad.data[i] += self.grad.data[i];
        }
        if (g->requires_grad) {
            g->ensure_grad();
            for (size_t b = 0; b < B; ++b)
                for (size_t l = 0; l < L; ++l)
                    for (size_t d = 0; d < D; ++d) g->grad.data[b * D + d] += self.grad.data[(b * L + l) * D + d];
        }
    });
}

/*----------------------------------- attention -----------------------------------*/

template <typename T>
struct AttentionWeights {
    Var<T> wq, bq, wk, bk, wv, bv, wo, bo; // each w is [D,D], b is [D]
};

// standard multi-head scaled dot-product self-attention over [B,L,D]
template <typename T>
Var<T> multi_head_self_attention(const Var<T>& x, const AttentionWeights<T>& w, size_t heads) {
    const Shape& xs = x->value.shape;
    if (xs.size() != 3) throw ShapeError("attention: input must be [B,L,D], got " + shape_str(xs));
    size_t B = xs[0], L = xs[1], D = xs[2];
    if (heads == 0 || D % heads != 0)
        throw ShapeError("attention: width " + std::to_string(D) + " not divisible by heads " + std::to_string(heads));
    size_t hd = D / heads;

    auto split = [&](const Var<T>& t) {
        // [B,L,D] -> [B*heads, L, hd]
        auto r = reshape(t, Shape{B, L, heads, hd});
        auto p = permute(r, {0, 2, 1, 3});
        return reshape(p, Shape{B * heads, L, hd});
    };
    auto q = split(linear(x, w.wq, w.bq));
    auto k = split(linear(x, w.wk, w.bk));
    auto v = split(linear(x, w.wv, w.bv));

    auto kt = permute(k, {0, 2, 1}); // [BH, hd, L]
    auto scores = mul_scalar(bmm(q, kt), 1.0 / std::sqrt(double(hd)));
    auto att = softmax_lastdim(scores);
    auto ctx = bmm(att, v); // [BH, L, hd]

    auto merged = reshape(permute(reshape(ctx, Shape{B, heads, L, hd}), {0, 2, 1, 3}), Shape{B, L, D});
    return linear(merged, w.wo, w.bo);
}

} // namespace dimr

#endif
