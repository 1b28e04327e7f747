#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mwnet/common.hpp"

namespace mwnet {

namespace detail {

// Paired masked values with non-finite entries dropped: map semantics use
// NaN for "no estimate", which must not poison the statistics.
inline void masked_pairs(const std::vector<double>& pred, const std::vector<double>& ref,
                         const std::vector<std::uint8_t>& mask, std::vector<double>& p,
                         std::vector<double>& r) {
    if (pred.size() != ref.size() || pred.size() != mask.size())
        throw DimensionError("masked_pairs: map/mask size mismatch");
    p.clear();
    r.clear();
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (!mask[i]) continue;
        if (!std::isfinite(pred[i]) || !std::isfinite(ref[i])) continue;
        p.push_back(pred[i]);
        r.push_back(ref[i]);
    }
}

} // namespace detail

enum class NrmseNorm { l2, mean };

// 100 * ||pred - ref|| / ||ref|| over masked voxels (default); the mean-of-
// reference normalization is available as an alternative.
inline double nrmse(const std::vector<double>& pred, const std::vector<double>& ref,
                    const std::vector<std::uint8_t>& mask, NrmseNorm norm = NrmseNorm::l2) {
    std::vector<double> p, r;
    detail::masked_pairs(pred, ref, mask, p, r);
    if (p.empty()) throw ParameterError("nrmse: no valid masked voxels");
    double err2 = 0.0, ref2 = 0.0, ref_sum = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double d = p[i] - r[i];
        err2 += d * d;
        ref2 += r[i] * r[i];
        ref_sum += r[i];
    }
    if (norm == NrmseNorm::l2) {
        if (!(ref2 > 0.0)) throw ParameterError("nrmse: reference is zero in mask");
        return 100.0 * std::sqrt(err2 / ref2);
    }
    const double mean = ref_sum / static_cast<double>(p.size());
    if (mean == 0.0) throw ParameterError("nrmse: reference mean is zero in mask");
    return 100.0 * std::sqrt(err2 / static_cast<double>(p.size())) / std::abs(mean);
}

// Squared Pearson correlation over masked voxels.
inline double r_squared(const std::vector<double>& pred, const std::vector<double>& ref,
                        const std::vector<std::uint8_t>& mask) {
    std::vector<double> p, r;
    detail::masked_pairs(pred, ref, mask, p, r);
    const std::size_t n = p.size();
    if (n < 3) throw ParameterError("r_squared: need at least 3 masked voxels");
    double mp = 0.0, mr = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mp += p[i];
        mr += r[i];
    }
    mp /= static_cast<double>(n);
    mr /= static_cast<double>(n);
    double spp = 0.0, srr = 0.0, spr = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dp = p[i] - mp, dr = r[i] - mr;
        spp += dp * dp;
        srr += dr * dr;
        spr += dp * dr;
    }
    if (!(spp > 0.0) || !(srr > 0.0)) throw ParameterError("r_squared: zero variance");
    return (spr * spr) / (spp * srr);
}

struct BlandAltman {
    double mean_difference = 0.0;
    double lower_limit = 0.0; // mean - 1.96 * population std of differences
    double upper_limit = 0.0;
};

inline BlandAltman bland_altman(const std::vector<double>& pred, const std::vector<double>& ref,
                                const std::vector<std::uint8_t>& mask) {
    std::vector<double> p, r;
    detail::masked_pairs(pred, ref, mask, p, r);
    const std::size_t n = p.size();
    if (n < 2) throw ParameterError("bland_altman: need at least 2 masked voxels");
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += p[i] - r[i];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = p[i] - r[i] - mean;
        var += d * d;
    }
    var /= static_cast<double>(n);
    const double sd = std::sqrt(var);
    return {mean, mean - 1.96 * sd, mean + 1.96 * sd};
}

namespace detail {

// Average ranks of |d|, doubled so ties stay exact integers.
inline std::vector<long long> doubled_ranks(const std::vector<double>& absd) {
    const std::size_t n = absd.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(),
              [&absd](std::size_t a, std::size_t b) { return absd[a] < absd[b]; });
    std::vector<long long> rank2(n, 0);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && absd[order[j + 1]] == absd[order[i]]) ++j;
        // positions i..j share the average rank (i+1 + ... + j+1)/(j-i+1)
        const long long sum2 = static_cast<long long>(i + 1 + j + 1); // doubled average
        for (std::size_t k = i; k <= j; ++k) rank2[order[k]] = sum2;
        i = j + 1;
    }
    return rank2;
}

} // namespace detail

// Two-sided Wilcoxon signed-rank p value. Zero differences are dropped;
// ties receive average ranks. n <= 12 uses exact enumeration of all sign
// assignments; larger n uses the normal approximation with continuity and
// tie corrections. All differences zero degenerates to p = 1.
inline double wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw DimensionError("wilcoxon: unequal sample lengths");
    std::vector<double> absd;
    std::vector<int> sign;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (!std::isfinite(a[i]) || !std::isfinite(b[i]))
            throw ParameterError("wilcoxon: non-finite sample");
        const double d = a[i] - b[i];
        if (d == 0.0) continue;
        absd.push_back(std::abs(d));
        sign.push_back(d > 0.0 ? 1 : -1);
    }
    const std::size_t n = absd.size();
    if (n == 0) return 1.0;
    if (n < 5) throw ParameterError("wilcoxon: need >= 5 nonzero differences");

    const std::vector<long long> rank2 = detail::doubled_ranks(absd);
    long long w2 = 0, total2 = 0;
    for (std::size_t i = 0; i < n; ++i) {
        total2 += rank2[i];
        if (sign[i] > 0) w2 += rank2[i];
    }

    if (n <= 12) {
        // exact two-sided tail over all 2^n sign assignments
        const std::uint64_t combos = std::uint64_t{1} << n;
        std::uint64_t le = 0, ge = 0;
        for (std::uint64_t m = 0; m < combos; ++m) {
            long long s2 = 0;
            for (std::size_t i = 0; i < n; ++i)
                if (m & (std::uint64_t{1} << i)) s2 += rank2[i];
            if (s2 <= w2) ++le;
            if (s2 >= w2) ++ge;
        }
        const double tail =
            static_cast<double>(std::min(le, ge)) / static_cast<double>(combos);
        return std::min(1.0, 2.0 * tail);
    }

    const double nd = static_cast<double>(n);
    const double mean = nd * (nd + 1.0) / 4.0;
    double var = nd * (nd + 1.0) * (2.0 * nd + 1.0) / 24.0;
    // tie correction: subtract sum(t^3 - t)/48 over tie groups
    std::vector<double> sorted(absd);
    std::sort(sorted.begin(), sorted.end());
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && sorted[j + 1] == sorted[i]) ++j;
        const double t = static_cast<double>(j - i + 1);
        var -= (t * t * t - t) / 48.0;
        i = j + 1;
    }
    if (!(var > 0.0)) return 1.0;
    const double w = static_cast<double>(w2) / 2.0;
    double z = w - mean;
    if (z > 0.5)
        z -= 0.5;
    else if (z < -0.5)
        z += 0.5;
    else
        z = 0.0;
    z /= std::sqrt(var);
    return std::erfc(std::abs(z) / std::sqrt(2.0));
}

struct ComparisonReport {
    std::string region = "all";
    double nrmse_percent = 0.0;
    double r_squared = 0.0;
    double mean_difference = 0.0;
    double loa_lower = 0.0;
    double loa_upper = 0.0;
    double wilcoxon_p = 1.0;
    std::size_t n_voxels = 0;
};

// Full agreement report for one map pair. Statistics whose preconditions
// the data cannot meet (tiny regions, zero variance) are reported as NaN
// rather than failing the whole report.
inline ComparisonReport compare_maps(const std::vector<double>& pred,
                                     const std::vector<double>& ref,
                                     const std::vector<std::uint8_t>& mask,
                                     const std::string& region = "all") {
    ComparisonReport rep;
    rep.region = region;
    std::vector<double> p, r;
    detail::masked_pairs(pred, ref, mask, p, r);
    rep.n_voxels = p.size();
    const double nan = std::numeric_limits<double>::quiet_NaN();
    rep.nrmse_percent = nrmse(pred, ref, mask);
    try {
        rep.r_squared = mwnet::r_squared(pred, ref, mask);
    } catch (const ParameterError&) {
        rep.r_squared = nan;
    }
    try {
        const BlandAltman ba = bland_altman(pred, ref, mask);
        rep.mean_difference = ba.mean_difference;
        rep.loa_lower = ba.lower_limit;
        rep.loa_upper = ba.upper_limit;
    } catch (const ParameterError&) {
        rep.mean_difference = rep.loa_lower = rep.loa_upper = nan;
    }
    try {
        rep.wilcoxon_p = wilcoxon_signed_rank(p, r);
    } catch (const ParameterError&) {
        rep.wilcoxon_p = nan;
    }
    return rep;
}

inline std::string comparison_csv_header() {
    return "region,n_voxels,nrmse_percent,r_squared,mean_difference,loa_lower,loa_upper,"
           "wilcoxon_p";
}

inline std::string comparison_csv_row(const ComparisonReport& r) {
    std::ostringstream os;
    os.precision(12);
    os << r.region << ',' << r.n_voxels << ',' << r.nrmse_percent << ',' << r.r_squared << ','
       << r.mean_difference << ',' << r.loa_lower << ',' << r.loa_upper << ',' << r.wilcoxon_p;
    return os.str();
}

} // namespace mwnet
