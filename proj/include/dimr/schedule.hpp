#ifndef DIMR_SCHEDULE_HPP
#define DIMR_SCHEDULE_HPP

#include <cmath>
#include <cstddef>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "dimr/rng.hpp"
#include "dimr/tensor.hpp"

namespace dimr {

// Variance-preserving forward process. beta/alpha/alpha_bar are kept in
// double regardless of the model precision; they are tiny and feed every
// closed-form expression below.
struct NoiseSchedule {
    size_t T = 0;
    std::vector<double> beta;
    std::vector<double> alpha;     // alpha_t = 1 - beta_t
    std::vector<double> alpha_bar; // running product of alpha

    void validate() const {
        if (T == 0 || beta.size() != T) throw NumericError("schedule: empty or inconsistent");
        double prev = 1.0;
        for (size_t t = 0; t < T; ++t) {
            if (!(beta[t] > 0.0 && beta[t] < 1.0)) throw NumericError("schedule: beta out of (0,1) at t=" + std::to_string(t));
            if (alpha[t] + beta[t] != 1.0) throw NumericError("schedule: alpha+beta != 1 at t=" + std::to_string(t));
            if (!(alpha_bar[t] > 0.0 && alpha_bar[t] < 1.0 && alpha_bar[t] < prev))
                throw NumericError("schedule: alpha_bar not strictly decreasing in (0,1) at t=" + std::to_string(t));
            prev = alpha_bar[t];
        }
    }
};

inline NoiseSchedule linear_schedule(size_t T, double beta_start = 1e-4, double beta_end = 0.02) {
    if (T == 0) throw NumericError("linear_schedule: T must be positive");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw NumericError("linear_schedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.beta.resize(T);
    s.alpha.resize(T);
    s.alpha_bar.resize(T);
    double acc = 1.0;
    for (size_t t = 0; t < T; ++t) {
        s.beta[t] = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * double(t) / double(T - 1);
        s.alpha[t] = 1.0 - s.beta[t];
        acc *= s.alpha[t];
        s.alpha_bar[t] = acc;
    }
    s.validate();
    return s;
}

// closed-form noising: x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
template <typename T>
Tensor<T> q_sample(const Tensor<T>& x0, size_t t, const Tensor<T>& eps, const NoiseSchedule& sched) {
    require_same_shape(x0, eps, "q_sample");
    if (t >= sched.T) throw NumericError("q_sample: t=" + std::to_string(t) + " >= T=" + std::to_string(sched.T));
    T a = T(std::sqrt(sched.alpha_bar[t]));
    T b = T(std::sqrt(1.0 - sched.alpha_bar[t]));
    Tensor<T> out = x0;
    for (size_t i = 0; i < out.size(); ++i) out.data[i] = a * x0.data[i] + b * eps.data[i];
    return out;
}

// one ancestral step x_t -> x_{t-1}; sigma_t^2 = beta_t, no noise at t = 0
template <typename T>
Tensor<T> ddpm_step(const Tensor<T>& x_t, const Tensor<T>& eps_pred, size_t t, const NoiseSchedule& sched,
                    const Tensor<T>& noise) {
    require_same_shape(x_t, eps_pred, "ddpm_step");
    if (t >= sched.T) throw NumericError("ddpm_step: t=" + std::to_string(t) + " >= T=" + std::to_string(sched.T));
    if (t > 0) require_same_shape(x_t, noise, "ddpm_step noise");
    T inv_sqrt_alpha = T(1.0 / std::sqrt(sched.alpha[t]));
    T coef = T(sched.beta[t] / std::sqrt(1.0 - sched.alpha_bar[t]));
    T sigma = t == 0 ? T(0) : T(std::sqrt(sched.beta[t]));
    Tensor<T> out = x_t;
    for (size_t i = 0; i < out.size(); ++i) {
        T mu = inv_sqrt_alpha * (x_t.data[i] - coef * eps_pred.data[i]);
        out.data[i] = t == 0 ? mu : mu + sigma * noise.data[i];
    }
    return out;
}

// classifier-free guidance: eps_u + w (eps_c - eps_u)
template <typename T>
Tensor<T> cfg_combine(const Tensor<T>& eps_uncond, const Tensor<T>& eps_cond, double w) {
    require_same_shape(eps_uncond, eps_cond, "cfg_combine");
    if (w < 0.0) throw NumericError("cfg_combine: guidance scale must be non-negative");
    Tensor<T> out = eps_uncond;
    for (size_t i = 0; i < out.size(); ++i)
        out.data[i] = eps_uncond.data[i] + T(w) * (eps_cond.data[i] - eps_uncond.data[i]);
    return out;
}

struct GuidanceConfig {
    double scale = 1.0;      // w; 1 = pure conditional
    size_t null_class = 0;   // class id of the unconditional row
};

// the schedule-dump interface: columns t, beta, alpha, alpha_bar
template <typename FormatFn>
void write_schedule_csv(std::ostream& os, const NoiseSchedule& s, FormatFn format) {
    os << "t,beta,alpha,alpha_bar\n";
    for (size_t t = 0; t < s.T; ++t)
        os << t << "," << format(s.beta[t]) << "," << format(s.alpha[t]) << "," << format(s.alpha_bar[t]) << "\n";
}

// full reverse chain driven by an arbitrary denoiser
template <typename T>
Tensor<T> sample_chain(const std::function<Tensor<T>(const Tensor<T>&, size_t)>& denoise, Shape shape,
                       const NoiseSchedule& sched, Rng& rng) {
    Tensor<T> x = randn<T>(shape, rng);
    for (size_t step = sched.T; step-- > 0;) {
        Tensor<T> eps = denoise(x, step);
        Tensor<T> noise = step > 0 ? randn<T>(shape, rng) : Tensor<T>();
        x = ddpm_step(x, eps, step, sched, noise);
    }
    return x;
}

} // namespace dimr

#endif
