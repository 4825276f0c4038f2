#ifndef DIMR_TENSOR_HPP
#define DIMR_TENSOR_HPP

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dimr/rng.hpp"

namespace dimr {

using Shape = std::vector<size_t>;

// error taxonomy; the CLI maps these onto exit codes
class ShapeError : public std::runtime_error {
  public:
    explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};
class NumericError : public std::runtime_error {
  public:
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};
class ConfigError : public std::runtime_error {
  public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};
class IoError : public std::runtime_error {
  public:
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (size_t e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

// Dense row-major n-d array. The scalar type is chosen when the tensor is
// built: float for training/sampling, double for gradient checking.
template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)), data(shape_numel(shape), fill) {}
    Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != shape_numel(shape))
            throw ShapeError("tensor: " + std::to_string(data.size()) + " values do not fill shape " + shape_str(shape));
    }

    static Tensor zeros(Shape s) { return Tensor(std::move(s), T(0)); }
    static Tensor full(Shape s, T v) { return Tensor(std::move(s), v); }
    static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

    size_t size() const { return data.size(); }
    size_t rank() const { return shape.size(); }
    size_t extent(size_t axis) const { return shape.at(axis); }

    T& operator[](size_t i) { return data[i]; }
    const T& operator[](size_t i) const { return data[i]; }

    // flat index of a 4-d coordinate (tensors of lower rank use the helpers below)
    size_t idx4(size_t a, size_t b, size_t c, size_t d) const {
        return ((a * shape[1] + b) * shape[2] + c) * shape[3] + d;
    }
    size_t idx3(size_t a, size_t b, size_t c) const { return (a * shape[1] + b) * shape[2] + c; }
    size_t idx2(size_t a, size_t b) const { return a * shape[1] + b; }

    T& at4(size_t a, size_t b, size_t c, size_t d) { return data[idx4(a, b, c, d)]; }
    const T& at4(size_t a, size_t b, size_t c, size_t d) const { return data[idx4(a, b, c, d)]; }
    T& at3(size_t a, size_t b, size_t c) { return data[idx3(a, b, c)]; }
    const T& at3(size_t a, size_t b, size_t c) const { return data[idx3(a, b, c)]; }
    T& at2(size_t a, size_t b) { return data[idx2(a, b)]; }
    const T& at2(size_t a, size_t b) const { return data[idx2(a, b)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(double(v))) return false;
        return true;
    }

    void fill(T v) {
        for (T& x : data) x = v;
    }

    Tensor reshaped(Shape s) const {
        if (shape_numel(s) != size())
            throw ShapeError("reshape: " + shape_str(shape) + " has " + std::to_string(size()) +
                             " values, target " + shape_str(s) + " needs " + std::to_string(shape_numel(s)));
        Tensor out = *this;
        out.shape = std::move(s);
        return out;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = U(data[i]);
        return out;
    }
};

template <typename T>
Tensor<T> randn(Shape s, Rng& rng, double stddev = 1.0) {
    Tensor<T> t(std::move(s));
    for (T& v : t.data) v = T(rng.normal() * stddev);
    return t;
}

template <typename T>
Tensor<T> rand_uniform(Shape s, Rng& rng, double lo = 0.0, double hi = 1.0) {
    Tensor<T> t(std::move(s));
    for (T& v : t.data) v = T(rng.uniform(lo, hi));
    return t;
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
}

} // namespace dimr

#endif
