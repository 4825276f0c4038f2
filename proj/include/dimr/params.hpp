#ifndef DIMR_PARAMS_HPP
#define DIMR_PARAMS_HPP

#include <string>
#include <utility>
#include <vector>

#include "dimr/autodiff.hpp"
#include "dimr/rng.hpp"
#include "dimr/tensor.hpp"

namespace dimr {

// Named leaf parameters in registration order. The order is the layout
// contract for checkpoints and optimizer state, so construction must be
// deterministic.
template <typename T>
struct ParamStore {
    std::vector<std::pair<std::string, Var<T>>> params;

    Var<T> add(const std::string& path, Tensor<T> init) {
        auto v = make_leaf<T>(std::move(init), true);
        params.emplace_back(path, v);
        return v;
    }

    Var<T> find(const std::string& path) const {
        for (const auto& [p, v] : params)
            if (p == path) return v;
        throw ConfigError("no parameter named " + path);
    }

    size_t count_values() const {
        size_t n = 0;
        for (const auto& [p, v] : params) n += v->value.size();
        return n;
    }

    void zero_grads() {
        for (auto& [p, v] : params) v->zero_grad();
    }
};

namespace init {

template <typename T>
Tensor<T> normal(Shape s, Rng& rng, double stddev) {
    return randn<T>(std::move(s), rng, stddev);
}

// fan-based scaling for linear/conv weights
template <typename T>
Tensor<T> xavier(Shape s, Rng& rng, size_t fan_in, size_t fan_out) {
    double stddev = std::sqrt(2.0 / double(fan_in + fan_out));
    return randn<T>(std::move(s), rng, stddev);
}

template <typename T>
Tensor<T> zeros(Shape s) {
    return Tensor<T>::zeros(std::move(s));
}

template <typename T>
Tensor<T> ones(Shape s) {
    return Tensor<T>::full(std::move(s), T(1));
}

} // namespace init

} // namespace dimr

#endif
