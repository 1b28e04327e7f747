#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <memory>
#include <vector>

#include "mwnet/common.hpp"

namespace mwnet {

// Logarithmically spaced relaxation-time grid (ms).
struct T2Grid {
    Eigen::VectorXd points;
    double t2_min = 0.0;
    double t2_max = 0.0;

    int size() const { return static_cast<int>(points.size()); }
};

inline T2Grid make_t2_grid(int n_basis = 120, double t2_min = 15.0, double t2_max = 2000.0) {
    if (n_basis < 2) throw ParameterError("make_t2_grid: n_basis must be >= 2");
    if (!(t2_min > 0.0) || !(t2_min < t2_max))
        throw ParameterError("make_t2_grid: require 0 < t2_min < t2_max");
    T2Grid g;
    g.t2_min = t2_min;
    g.t2_max = t2_max;
    g.points.resize(n_basis);
    const double log_ratio = std::log(t2_max / t2_min);
    for (int k = 0; k < n_basis; ++k)
        g.points[k] = t2_min * std::exp(log_ratio * static_cast<double>(k) / (n_basis - 1));
    g.points[0] = t2_min;
    g.points[n_basis - 1] = t2_max;
    return g;
}

// Non-negative amplitudes over a shared grid. Amplitudes are in raw signal
// units; the metric functions below are scale-invariant.
struct T2Distribution {
    std::shared_ptr<const T2Grid> grid;
    Eigen::VectorXd amplitudes;
};

struct MetricWindows {
    double myelin_lo = 15.0;
    double myelin_hi = 40.0;
    double iew_lo = 40.0;
    double iew_hi = 200.0;

    // The two windows are independent (the MWF threshold may exceed the IEW
    // lower edge, e.g. a 50 ms myelin cutoff); each must only be well-ordered.
    void validate() const {
        if (!(myelin_lo > 0.0) || !(myelin_lo < myelin_hi) || !(iew_lo > 0.0) ||
            !(iew_lo < iew_hi))
            throw ParameterError("MetricWindows: each window needs 0 < lo < hi");
    }
};

namespace detail {
inline void check_dist(const T2Distribution& dist) {
    if (!dist.grid) throw ParameterError("T2Distribution: null grid");
    if (dist.amplitudes.size() != dist.grid->points.size())
        throw DimensionError("T2Distribution: amplitude/grid length mismatch");
    if (!dist.amplitudes.allFinite())
        throw ParameterError("T2Distribution: non-finite amplitude");
    if ((dist.amplitudes.array() < 0.0).any())
        throw ParameterError("T2Distribution: negative amplitude");
}
} // namespace detail

// Myelin water fraction: window sum / total sum, bounds inclusive.
inline double mwf(const T2Distribution& dist, const MetricWindows& windows = {}) {
    detail::check_dist(dist);
    windows.validate();
    const double total = dist.amplitudes.sum();
    if (!(total > 0.0)) throw DegenerateDataError("mwf: all-zero distribution");
    double myelin = 0.0;
    for (int j = 0; j < dist.grid->size(); ++j) {
        const double t2 = dist.grid->points[j];
        if (t2 >= windows.myelin_lo && t2 <= windows.myelin_hi) myelin += dist.amplitudes[j];
    }
    return myelin / total;
}

// Geometric-mean T2 over the intra/extracellular window, bounds inclusive.
inline double gmt2_iew(const T2Distribution& dist, const MetricWindows& windows = {}) {
    detail::check_dist(dist);
    windows.validate();
    double mass = 0.0, log_sum = 0.0;
    for (int j = 0; j < dist.grid->size(); ++j) {
        const double t2 = dist.grid->points[j];
        if (t2 >= windows.iew_lo && t2 <= windows.iew_hi) {
            mass += dist.amplitudes[j];
            log_sum += dist.amplitudes[j] * std::log(t2);
        }
    }
    if (!(mass > 0.0)) throw DegenerateDataError("gmt2_iew: zero mass in IEW window");
    return std::exp(log_sum / mass);
}

// Keep voxels that are in mask_in and have a physically plausible fraction.
inline std::vector<std::uint8_t> refine_mask(const std::vector<double>& mwf_map,
                                             const std::vector<std::uint8_t>& mask_in) {
    if (mwf_map.size() != mask_in.size())
        throw ParameterError("refine_mask: map/mask size mismatch");
    std::vector<std::uint8_t> out(mask_in.size(), 0);
    for (std::size_t i = 0; i < mask_in.size(); ++i)
        out[i] = (mask_in[i] && mwf_map[i] > 0.0 && mwf_map[i] < 0.30) ? 1 : 0;
    return out;
}

} // namespace mwnet
