#ifndef DIMR_ANALYSIS_HPP
#define DIMR_ANALYSIS_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dimr/conditioning.hpp"
#include "dimr/network.hpp"
#include "dimr/schedule.hpp"

namespace dimr {

/*----------------------------------- PCA -----------------------------------*/

struct PcaResult {
    std::vector<double> eigenvalues; // descending, clamped at 0
    std::vector<double> ratios;      // eigenvalue / trace
    std::vector<std::vector<double>> directions; // row i = i-th principal direction
};

// cyclic Jacobi eigendecomposition of a symmetric matrix (row-major d x d);
// dimensions here are small so the O(d^3) sweeps are fine
inline void jacobi_eigen_sym(std::vector<double> a, size_t d, std::vector<double>& values,
                             std::vector<std::vector<double>>& vectors, double tol = 1e-10) {
    std::vector<double> v(d * d, 0.0);
    for (size_t i = 0; i < d; ++i) v[i * d + i] = 1.0;

    double scale = 0.0;
    for (size_t i = 0; i < d; ++i) scale = std::max(scale, std::fabs(a[i * d + i]));
    scale = std::max(scale, 1e-300);

    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (size_t p = 0; p < d; ++p)
            for (size_t q = p + 1; q < d; ++q) off += a[p * d + q] * a[p * d + q];
        if (std::sqrt(off) <= tol * scale) break;
        for (size_t p = 0; p < d; ++p)
            for (size_t q = p + 1; q < d; ++q) {
                double apq = a[p * d + q];
                if (std::fabs(apq) <= tol * scale * 1e-4) continue;
                double theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                double t = (theta >= 0 ? 1.0 : -1.0) / (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                double c = 1.0 / std::sqrt(t * t + 1.0);
                double s = t * c;
                for (size_t k = 0; k < d; ++k) {
                    double akp = a[k * d + p], akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for (size_t k = 0; k < d; ++k) {
                    double apk = a[p * d + k], aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for (size_t k = 0; k < d; ++k) {
                    double vkp = v[k * d + p], vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
    }

    std::vector<size_t> order(d);
    for (size_t i = 0; i < d; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](size_t x, size_t y) { return a[x * d + x] > a[y * d + y]; });
    values.resize(d);
    vectors.assign(d, std::vector<double>(d));
    for (size_t i = 0; i < d; ++i) {
        values[i] = a[order[i] * d + order[i]];
        for (size_t k = 0; k < d; ++k) vectors[i][k] = v[k * d + order[i]];
    }
}

// center columns, eigendecompose the covariance, ratios = eigenvalues / trace
inline PcaResult pca(const std::vector<double>& data, size_t n, size_t d) {
    if (n < 2) throw NumericError("pca: need at least 2 rows, got " + std::to_string(n));
    if (d == 0 || data.size() != n * d) throw ShapeError("pca: data is not an n x d matrix");

    std::vector<double> mean(d, 0.0);
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < d; ++j) mean[j] += data[i * d + j];
    for (size_t j = 0; j < d; ++j) mean[j] /= double(n);

    std::vector<double> cov(d * d, 0.0);
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < d; ++j) {
            double xj = data[i * d + j] - mean[j];
            for (size_t k = j; k < d; ++k) cov[j * d + k] += xj * (data[i * d + k] - mean[k]);
        }
    for (size_t j = 0; j < d; ++j)
        for (size_t k = j; k < d; ++k) {
            cov[j * d + k] /= double(n - 1);
            cov[k * d + j] = cov[j * d + k];
        }

    PcaResult r;
    jacobi_eigen_sym(cov, d, r.eigenvalues, r.directions);
    for (double& ev : r.eigenvalues) ev = std::max(ev, 0.0);
    double trace = 0.0;
    for (double ev : r.eigenvalues) trace += ev;
    r.ratios.resize(d);
    if (trace <= 1e-300) {
        // constant data: no variance to explain; report the rank-0 convention
        std::fill(r.ratios.begin(), r.ratios.end(), 0.0);
        r.ratios[0] = 1.0;
    } else {
        for (size_t i = 0; i < d; ++i) r.ratios[i] = r.eigenvalues[i] / trace;
    }
    return r;
}

/*----------------------------------- modulation traces -----------------------------------*/

// per (site, signal): one row per recorded sampling step
struct ModulationTrace {
    std::string site;
    std::string signal; // gamma/beta for TD-LN, gamma1..alpha2 for adaLN-Zero
    size_t rows = 0;
    size_t dim = 0;
    std::vector<double> data; // row-major rows x dim

    void append(const std::vector<double>& values) {
        if (rows == 0) dim = values.size();
        if (values.size() != dim) throw ShapeError("trace " + site + "." + signal + ": inconsistent width");
        data.insert(data.end(), values.begin(), values.end());
        ++rows;
    }
};

struct TraceRecorder : ModulationRecorder {
    std::vector<ModulationTrace> traces;

    void record(const std::string& site, const std::string& signal, const std::vector<double>& values) override {
        for (auto& t : traces)
            if (t.site == site && t.signal == signal) {
                t.append(values);
                return;
            }
        ModulationTrace t;
        t.site = site;
        t.signal = signal;
        t.append(values);
        traces.push_back(std::move(t));
    }
};

// Run one sampling chain and record every modulation site at every step.
// Each produced trace has sched.T rows.
template <typename T>
std::vector<ModulationTrace> collect_modulation(const DimrModel<T>& model, const NoiseSchedule& sched, size_t class_id,
                                                Rng& rng) {
    TraceRecorder rec;
    Shape shape{1, model.cfg.in_channels, model.cfg.input_size, model.cfg.input_size};
    std::vector<size_t> ids{class_id};
    Tensor<T> x = randn<T>(shape, rng);
    for (size_t step = sched.T; step-- > 0;) {
        Tensor<T> eps = model.predict_eps(x, step, ids, &rec);
        Tensor<T> noise = step > 0 ? randn<T>(shape, rng) : Tensor<T>();
        x = ddpm_step(x, eps, step, sched, noise);
    }
    if (rec.traces.empty()) throw NumericError("collect_modulation: model exposes no modulation sites");
    return rec.traces;
}

/*----------------------------------- rank property -----------------------------------*/

struct RankVerdict {
    size_t rank = 0;          // numerical rank of the centered trace
    double top2_ratio = 0.0;  // cumulative explained variance of the first two PCs
    bool pass = false;        // rank <= 2 and top2 >= 1 - 1e-6
};

// TD-LN's gamma(t)/beta(t) live on the segment [p2, p1] (resp. [p4, p3]), so
// a centered trace has rank <= 1 plus rounding; the asserted bound is 2.
inline RankVerdict tdln_trace_rank_property(const ModulationTrace& trace) {
    RankVerdict v;
    if (trace.rows < 2) throw NumericError("rank property: trace needs at least 2 rows");
    PcaResult r = pca(trace.data, trace.rows, trace.dim);
    double total = 0.0;
    for (double ev : r.eigenvalues) total += ev;
    double data_scale = 0.0;
    for (double x : trace.data) data_scale += x * x;
    data_scale /= double(trace.data.size());
    // variance at the rounding floor of the data is a constant trace
    if (total <= data_scale * 1e-20 + 1e-300) {
        v.rank = 0;
        v.top2_ratio = 1.0; // constant trace: vacuously explained
        v.pass = true;
        return v;
    }
    double thresh = 1e-10 * r.eigenvalues[0];
    for (double ev : r.eigenvalues)
        if (ev > thresh) ++v.rank;
    v.top2_ratio = r.ratios[0] + (r.ratios.size() > 1 ? r.ratios[1] : 0.0);
    v.pass = v.rank <= 2 && v.top2_ratio >= 1.0 - 1e-6;
    return v;
}

} // namespace dimr

#endif
