#pragma once

#include <Eigen/Dense>
#include <chrono>
#include <cmath>
#include <limits>
#include <memory>
#include <utility>
#include <vector>

#include "mwnet/common.hpp"
#include "mwnet/echo_cube.hpp"
#include "mwnet/epg.hpp"
#include "mwnet/nnls.hpp"
#include "mwnet/parallel.hpp"
#include "mwnet/t2grid.hpp"

namespace mwnet {

enum class FitStatus : std::uint8_t {
    converged = 0,
    boundary_fallback = 1,
    unregularized_degenerate = 2,
};

inline const char* to_string(FitStatus s) {
    switch (s) {
        case FitStatus::converged: return "converged";
        case FitStatus::boundary_fallback: return "boundary_fallback";
        case FitStatus::unregularized_degenerate: return "unregularized_degenerate";
    }
    return "unknown";
}

// Volume-level status codes sharing the byte with FitStatus values.
inline constexpr std::uint8_t kStatusOutsideMask = 255;
inline constexpr std::uint8_t kStatusInvalidInput = 254;

inline std::vector<double> default_flip_grid() {
    std::vector<double> g;
    for (int a = 90; a <= 180; ++a) g.push_back(static_cast<double>(a));
    return g;
}

struct FitConfig {
    std::shared_ptr<const T2Grid> grid;
    double te1 = 10.0;
    double echo_spacing = 10.0;
    int n_echoes = 32;
    double t1 = 1000.0;
    std::vector<double> flip_grid = default_flip_grid();
    double chi2_target_ratio = 1.0225; // midpoint of the acceptance band
    double chi2_band_lo = 1.020;
    double chi2_band_hi = 1.025;
    double mu_lo = 1e-14; // wide bracket: near-noiseless voxels need mu far below 1e-8
    double mu_hi = 1e4;
    double mu_rel_tol = 1e-6;
    int mu_max_iters = 50;
    double degenerate_ratio = 1e-12; // chi2_min below this * ||y||^2 skips regularization
    double kkt_tol_scale = 1e-10;
    bool refine_flip = true;           // parabolic refinement between grid angles
    bool rebuild_refined_basis = true; // rebuild basis at the refined angle per voxel
    MetricWindows windows{};

    static FitConfig defaults() {
        FitConfig c;
        c.grid = std::make_shared<T2Grid>(make_t2_grid());
        return c;
    }

    EpgParams epg_params(double flip) const {
        EpgParams p;
        p.flip_angle = flip;
        p.t1 = t1;
        p.te1 = te1;
        p.echo_spacing = echo_spacing;
        p.n_echoes = n_echoes;
        return p;
    }

    void validate() const {
        if (!grid) throw ParameterError("FitConfig: grid not set");
        if (flip_grid.empty()) throw ParameterError("FitConfig: empty flip grid");
        for (std::size_t i = 0; i < flip_grid.size(); ++i) {
            if (!(flip_grid[i] > 0.0) || !(flip_grid[i] <= 180.0))
                throw ParameterError("FitConfig: flip grid angle out of (0, 180]");
            if (i > 0 && !(flip_grid[i] > flip_grid[i - 1]))
                throw ParameterError("FitConfig: flip grid must be strictly increasing");
        }
        if (!(chi2_band_lo > 1.0) || !(chi2_band_hi >= chi2_band_lo))
            throw ParameterError("FitConfig: bad chi2 band");
        if (!(chi2_target_ratio >= chi2_band_lo) || !(chi2_target_ratio <= chi2_band_hi))
            throw ParameterError("FitConfig: chi2 target outside band");
        if (!(mu_lo > 0.0) || !(mu_hi > mu_lo)) throw ParameterError("FitConfig: bad mu bracket");
        if (!(mu_rel_tol > 0.0) || mu_max_iters < 1)
            throw ParameterError("FitConfig: bad mu search settings");
        if (!(degenerate_ratio >= 0.0)) throw ParameterError("FitConfig: bad degenerate ratio");
        epg_params(flip_grid.front()).validate();
        windows.validate();
    }
};

// All search-grid bases and their Gram matrices, built once and read-shared.
class BasisCache {
public:
    explicit BasisCache(const FitConfig& cfg) : grid_(cfg.grid), angles_(cfg.flip_grid) {
        cfg.validate();
        bases_.reserve(angles_.size());
        grams_.reserve(angles_.size());
        for (double a : angles_) {
            bases_.push_back(build_basis_fast(*grid_, cfg.epg_params(a)));
            grams_.push_back(bases_.back().transpose() * bases_.back());
        }
    }

    int n_angles() const { return static_cast<int>(angles_.size()); }
    double angle(int i) const { return angles_[static_cast<std::size_t>(i)]; }
    const Eigen::MatrixXd& basis(int i) const { return bases_[static_cast<std::size_t>(i)]; }
    const Eigen::MatrixXd& gram(int i) const { return grams_[static_cast<std::size_t>(i)]; }

    int nearest_index(double flip) const {
        int best = 0;
        double dist = std::abs(angles_[0] - flip);
        for (int i = 1; i < n_angles(); ++i) {
            const double d = std::abs(angles_[static_cast<std::size_t>(i)] - flip);
            if (d < dist) {
                dist = d;
                best = i;
            }
        }
        return best;
    }

private:
    std::shared_ptr<const T2Grid> grid_;
    std::vector<double> angles_;
    std::vector<Eigen::MatrixXd> bases_;
    std::vector<Eigen::MatrixXd> grams_;
};

namespace detail {

// ||y - Ax||^2 accumulated over the support of x only.
inline double direct_chi2(const Eigen::Ref<const Eigen::VectorXd>& y, const Eigen::MatrixXd& A,
                          const Eigen::VectorXd& x) {
    Eigen::VectorXd ax = Eigen::VectorXd::Zero(y.size());
    for (int j = 0; j < x.size(); ++j)
        if (x[j] != 0.0) ax.noalias() += x[j] * A.col(j);
    return (y - ax).squaredNorm();
}

struct FlipEstimate {
    double angle = 0.0;
    int grid_index = 0;
};

// Unregularized residual sweep over the angle grid, warm-starting the
// active set from one angle to the next, followed by parabolic refinement
// through the best grid point and its neighbours.
inline FlipEstimate estimate_flip_impl(const Eigen::Ref<const Eigen::VectorXd>& y,
                                       const FitConfig& cfg, const BasisCache& cache,
                                       GramNnls& ws) {
    const int na = cache.n_angles();
    Eigen::VectorXd res(na);
    Eigen::VectorXd b;
    int best = 0;
    double best_r = std::numeric_limits<double>::infinity();
    for (int i = 0; i < na; ++i) {
        const Eigen::MatrixXd& A = cache.basis(i);
        b.noalias() = A.transpose() * y;
        const double tol = cfg.kkt_tol_scale * b.cwiseAbs().maxCoeff();
        ws.set_problem(cache.gram(i), b, 0.0, tol);
        NnlsResult r = ws.solve(/*warm_start=*/i > 0);
        res[i] = direct_chi2(y, A, r.x);
        if (res[i] < best_r) {
            best_r = res[i];
            best = i;
        }
    }
    FlipEstimate fe;
    fe.grid_index = best;
    fe.angle = cache.angle(best);
    if (cfg.refine_flip && best > 0 && best < na - 1) {
        const double x0 = cache.angle(best - 1), x1 = cache.angle(best),
                     x2 = cache.angle(best + 1);
        const double r0 = res[best - 1], r1 = res[best], r2 = res[best + 1];
        const double d1 = x1 - x0, d2 = x2 - x1;
        const double curvature = d1 * (r2 - r1) + d2 * (r0 - r1);
        if (curvature > 0.0) {
            const double num = d1 * d1 * (r1 - r2) - d2 * d2 * (r1 - r0);
            double refined = x1 + 0.5 * num / curvature;
            refined = std::max(cache.angle(0), std::min(180.0, refined));
            fe.angle = refined;
        }
    }
    return fe;
}

struct RegResult {
    Eigen::VectorXd x;
    double chi2 = 0.0;
    double chi2_min = 0.0;
    double mu = 0.0;
    FitStatus status = FitStatus::converged;
};

// Bisection on log(mu) driving the direct residual to target_ratio*chi2_min.
// The configured bracket is validated at both ends first (either end already
// past the target short-circuits to the nearest-boundary fallback), then the
// bracket is narrowed by an ascending geometric sweep from mu_lo before
// bisecting: neighbouring mu values share most of their active set, so the
// warm-started interior solves stay cheap instead of thrashing the support
// across many decades. Every mu evaluation counts against the same budget.
inline RegResult regularized_core(const Eigen::Ref<const Eigen::VectorXd>& y,
                                  const Eigen::MatrixXd& A, const Eigen::MatrixXd& G,
                                  const Eigen::VectorXd& b, const FitConfig& cfg, GramNnls& ws) {
    const double tol = cfg.kkt_tol_scale * b.cwiseAbs().maxCoeff();
    RegResult out;

    ws.set_problem(G, b, 0.0, tol);
    NnlsResult r0 = ws.solve(/*warm_start=*/true);
    out.chi2_min = direct_chi2(y, A, r0.x);
    if (out.chi2_min < cfg.degenerate_ratio * y.squaredNorm()) {
        out.x = std::move(r0.x);
        out.chi2 = out.chi2_min;
        out.mu = 0.0;
        out.status = FitStatus::unregularized_degenerate;
        return out;
    }

    const double target = cfg.chi2_target_ratio * out.chi2_min;
    int evals = 0;
    Eigen::VectorXd best_x;
    double best_c = 0.0, best_mu = 0.0;
    double best_dev = std::numeric_limits<double>::infinity();
    auto solve_mu = [&](double mu, bool warm) {
        ++evals;
        ws.set_problem(G, b, mu, tol);
        NnlsResult r = ws.solve(warm);
        double c = direct_chi2(y, A, r.x);
        if (std::abs(c - target) < best_dev) {
            best_dev = std::abs(c - target);
            best_x = r.x;
            best_c = c;
            best_mu = mu;
        }
        return std::make_pair(c, std::move(r.x));
    };
    auto finish = [&](double c, Eigen::VectorXd&& x, double mu, FitStatus st) {
        out.x = std::move(x);
        out.chi2 = c;
        out.mu = mu;
        out.status = st;
        return out;
    };
    auto within_tol = [&](double c) { return std::abs(c - target) <= cfg.mu_rel_tol * target; };

    // Probe mu_lo warm straight after the unregularized solve: its support is
    // nearly identical, so the solve is cheap and, more importantly, lands on
    // the same KKT point when the Gram is near-singular. A cold probe here can
    // stall on a slightly different support and misreport the boundary.
    auto [c_lo, x_lo] = solve_mu(cfg.mu_lo, /*warm=*/true);
    if (within_tol(c_lo)) return finish(c_lo, std::move(x_lo), cfg.mu_lo, FitStatus::converged);
    if (c_lo > target)
        return finish(c_lo, std::move(x_lo), cfg.mu_lo, FitStatus::boundary_fallback);
    const std::vector<int> lo_support = ws.passive_set();

    auto [c_hi, x_hi] = solve_mu(cfg.mu_hi, /*warm=*/true);
    if (within_tol(c_hi)) return finish(c_hi, std::move(x_hi), cfg.mu_hi, FitStatus::converged);
    if (c_hi < target)
        return finish(c_hi, std::move(x_hi), cfg.mu_hi, FitStatus::boundary_fallback);

    // Dropping back down from the heavily regularized support would shed it
    // one column per refactorization; reseed the small mu_lo support instead.
    ws.seed_support(lo_support);

    // expansion: climb in decades until the target is straddled
    double lo = cfg.mu_lo, hi = cfg.mu_hi;
    bool bracketed = false;
    while (evals < cfg.mu_max_iters) {
        const double mu = std::min(lo * 10.0, cfg.mu_hi);
        auto [c, x] = solve_mu(mu, /*warm=*/true);
        if (within_tol(c)) return finish(c, std::move(x), mu, FitStatus::converged);
        if (c > target) {
            hi = mu;
            bracketed = true;
            break;
        }
        lo = mu;
        if (mu >= cfg.mu_hi) break; // numerically flat against the validated probe
    }

    if (bracketed) {
        double llo = std::log(lo), lhi = std::log(hi);
        while (evals < cfg.mu_max_iters) {
            const double mu = std::exp(0.5 * (llo + lhi));
            auto [c, x] = solve_mu(mu, /*warm=*/true);
            if (within_tol(c)) return finish(c, std::move(x), mu, FitStatus::converged);
            if (c < target)
                llo = std::log(mu);
            else
                lhi = std::log(mu);
        }
    }
    return finish(best_c, std::move(best_x), best_mu, FitStatus::boundary_fallback);
}

} // namespace detail

struct FitResult {
    T2Distribution distribution;
    double chi2 = 0.0;     // signal units^2
    double chi2_min = 0.0; // signal units^2
    double mu = 0.0;
    double flip_angle = std::numeric_limits<double>::quiet_NaN();
    double mwf = std::numeric_limits<double>::quiet_NaN();
    double gmt2 = std::numeric_limits<double>::quiet_NaN();
    FitStatus status = FitStatus::converged;
};

namespace detail {

// Metrics are computed on the normalized-amplitude solution (they are ratios,
// so this is exact) which keeps them bitwise stable under input scaling.
inline FitResult package_fit(detail::RegResult&& rr, double scale, double flip,
                             const FitConfig& cfg) {
    FitResult out;
    out.chi2 = rr.chi2 * scale * scale;
    out.chi2_min = rr.chi2_min * scale * scale;
    out.mu = rr.mu;
    out.flip_angle = flip;
    out.status = rr.status;
    T2Distribution dn{cfg.grid, std::move(rr.x)};
    try {
        out.mwf = mwf(dn, cfg.windows);
    } catch (const DegenerateDataError&) {
    }
    try {
        out.gmt2 = gmt2_iew(dn, cfg.windows);
    } catch (const DegenerateDataError&) {
    }
    out.distribution.grid = cfg.grid;
    out.distribution.amplitudes = scale * dn.amplitudes;
    return out;
}

inline void check_curve(const Eigen::Ref<const Eigen::VectorXd>& y, const FitConfig& cfg) {
    if (y.size() != cfg.n_echoes) throw DimensionError("fit: curve length != n_echoes");
    if (!y.allFinite()) throw ParameterError("fit: non-finite sample");
}

} // namespace detail

inline double estimate_flip_angle(const Eigen::Ref<const Eigen::VectorXd>& y,
                                  const FitConfig& cfg, const BasisCache& cache) {
    cfg.validate();
    detail::check_curve(y, cfg);
    if (!(y.cwiseAbs().maxCoeff() > 0.0))
        throw DegenerateDataError("estimate_flip_angle: all-zero curve");
    GramNnls ws;
    return detail::estimate_flip_impl(y, cfg, cache, ws).angle;
}

inline double estimate_flip_angle(const Eigen::Ref<const Eigen::VectorXd>& y,
                                  const FitConfig& cfg) {
    BasisCache cache(cfg);
    return estimate_flip_angle(y, cfg, cache);
}

// Regularized fit against a caller-supplied basis (flip angle already chosen).
inline FitResult regularized_fit(const Eigen::Ref<const Eigen::VectorXd>& y,
                                 const Eigen::MatrixXd& A, const FitConfig& cfg) {
    cfg.validate();
    detail::check_curve(y, cfg);
    if (A.rows() != y.size() || A.cols() != cfg.grid->points.size())
        throw DimensionError("regularized_fit: basis shape mismatch");
    if (!A.allFinite()) throw ParameterError("regularized_fit: non-finite basis");
    const double s = y.cwiseAbs().maxCoeff();
    if (!(s > 0.0)) throw DegenerateDataError("regularized_fit: all-zero curve");
    const Eigen::VectorXd yn = y / s;
    const Eigen::MatrixXd G = A.transpose() * A;
    const Eigen::VectorXd b = A.transpose() * yn;
    GramNnls ws;
    auto rr = detail::regularized_core(yn, A, G, b, cfg, ws);
    return detail::package_fit(std::move(rr), s, std::numeric_limits<double>::quiet_NaN(), cfg);
}

inline FitResult fit_voxel(const Eigen::Ref<const Eigen::VectorXd>& y, const FitConfig& cfg,
                           const BasisCache& cache) {
    cfg.validate();
    detail::check_curve(y, cfg);
    const double s = y.cwiseAbs().maxCoeff();
    if (!(s > 0.0)) throw DegenerateDataError("fit_voxel: all-zero curve");
    const Eigen::VectorXd yn = y / s;

    GramNnls ws;
    detail::FlipEstimate fe = detail::estimate_flip_impl(yn, cfg, cache, ws);

    double flip_used = fe.angle;
    Eigen::MatrixXd refined_basis, refined_gram;
    const Eigen::MatrixXd* A = nullptr;
    const Eigen::MatrixXd* G = nullptr;
    if (cfg.rebuild_refined_basis && fe.angle != cache.angle(fe.grid_index)) {
        refined_basis = build_basis_fast(*cfg.grid, cfg.epg_params(fe.angle));
        refined_gram = refined_basis.transpose() * refined_basis;
        A = &refined_basis;
        G = &refined_gram;
    } else {
        const int snap = cfg.rebuild_refined_basis ? fe.grid_index : cache.nearest_index(fe.angle);
        A = &cache.basis(snap);
        G = &cache.gram(snap);
        flip_used = cfg.rebuild_refined_basis ? fe.angle : cache.angle(snap);
    }
    const Eigen::VectorXd b = A->transpose() * yn;
    auto rr = detail::regularized_core(yn, *A, *G, b, cfg, ws);
    return detail::package_fit(std::move(rr), s, flip_used, cfg);
}

inline FitResult fit_voxel(const Eigen::Ref<const Eigen::VectorXd>& y, const FitConfig& cfg) {
    BasisCache cache(cfg);
    return fit_voxel(y, cfg, cache);
}

struct FitTiming {
    std::size_t voxel_count = 0;
    double wall_seconds = 0.0;
    double per_voxel_mean_us = 0.0;
    int workers = 1;
};

inline std::string timing_sidecar_json(const FitTiming& t) {
    nlohmann::json j{{"voxel_count", t.voxel_count},
                     {"wall_seconds", t.wall_seconds},
                     {"per_voxel_mean_us", t.per_voxel_mean_us},
                     {"workers", t.workers}};
    return j.dump(2) + "\n";
}

struct FitVolumeResult {
    std::array<int, 3> dims{0, 0, 0};
    int n_basis = 0;
    std::vector<double> mwf_map, gmt2_map, flip_map, chi2_map, chi2_min_map, mu_map;
    std::vector<std::uint8_t> status;
    std::vector<float> distributions; // n_voxels * n_basis, zero outside mask
    FitTiming timing;

    MapVolume to_maps(const std::vector<std::uint8_t>& mask) const {
        MapVolume m;
        m.dims = dims;
        m.fields = {{"mwf", mwf_map},   {"gmt2", gmt2_map},         {"flip", flip_map},
                    {"chi2", chi2_map}, {"chi2_min", chi2_min_map}, {"mu", mu_map}};
        m.mask = mask;
        m.status = status;
        return m;
    }
};

// Deterministic batch driver: results are identical to per-voxel fit_voxel
// calls for any worker count (each voxel starts from a fresh solver state;
// the basis cache is immutable after the warmup build).
inline FitVolumeResult fit_volume(const EchoCube& cube, const FitConfig& cfg, int workers = 1) {
    cfg.validate();
    cube.validate();
    if (cube.n_echoes != cfg.n_echoes)
        throw DimensionError("fit_volume: cube echo count != config n_echoes");
    const std::size_t nv = cube.n_voxels();
    std::vector<std::size_t> voxels;
    voxels.reserve(nv);
    for (std::size_t v = 0; v < nv; ++v)
        if (cube.mask[v]) voxels.push_back(v);
    if (voxels.empty()) throw ParameterError("fit_volume: empty mask");

    BasisCache cache(cfg); // warmup: all grid-angle bases before dispatch

    const int nb = cfg.grid->size();
    FitVolumeResult out;
    out.dims = cube.dims;
    out.n_basis = nb;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    out.mwf_map.assign(nv, nan);
    out.gmt2_map.assign(nv, nan);
    out.flip_map.assign(nv, nan);
    out.chi2_map.assign(nv, nan);
    out.chi2_min_map.assign(nv, nan);
    out.mu_map.assign(nv, nan);
    out.status.assign(nv, kStatusOutsideMask);
    out.distributions.assign(nv * static_cast<std::size_t>(nb), 0.0f);

    const auto t0 = std::chrono::steady_clock::now();
    parallel_for_ranges(voxels.size(), workers, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t k = lo; k < hi; ++k) {
            const std::size_t v = voxels[k];
            const auto y = cube.voxel_curve(v);
            try {
                FitResult r = fit_voxel(y, cfg, cache);
                out.mwf_map[v] = r.mwf;
                out.gmt2_map[v] = r.gmt2;
                out.flip_map[v] = r.flip_angle;
                out.chi2_map[v] = r.chi2;
                out.chi2_min_map[v] = r.chi2_min;
                out.mu_map[v] = r.mu;
                out.status[v] = static_cast<std::uint8_t>(r.status);
                float* row = out.distributions.data() + v * static_cast<std::size_t>(nb);
                for (int j = 0; j < nb; ++j)
                    row[j] = static_cast<float>(r.distribution.amplitudes[j]);
            } catch (const DegenerateDataError&) {
                out.status[v] = kStatusInvalidInput;
            }
        }
    });
    const auto t1 = std::chrono::steady_clock::now();
    out.timing.voxel_count = voxels.size();
    out.timing.wall_seconds = std::chrono::duration<double>(t1 - t0).count();
    out.timing.per_voxel_mean_us =
        out.timing.wall_seconds * 1e6 / static_cast<double>(voxels.size());
    out.timing.workers = std::max(1, workers);
    return out;
}

} // namespace mwnet
