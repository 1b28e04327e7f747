#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <complex>
#include <limits>

#include "mwnet/common.hpp"
#include "mwnet/t2grid.hpp"

namespace mwnet {

// CPMG sequence parameters for the extended-phase-graph forward model.
// te1 must equal echo_spacing; changing the echo timing means changing both.
struct EpgParams {
    double flip_angle = 180.0; // refocusing pulse, degrees
    double t1 = 1000.0;        // ms, may be infinite
    double te1 = 10.0;         // ms
    double echo_spacing = 10.0; // ms
    int n_echoes = 32;

    void validate() const {
        if (!(flip_angle > 0.0) || !(flip_angle <= 180.0))
            throw ParameterError("EpgParams: flip_angle must be in (0, 180]");
        if (!(t1 > 0.0)) throw ParameterError("EpgParams: t1 must be positive (or infinite)");
        if (!(echo_spacing > 0.0)) throw ParameterError("EpgParams: echo_spacing must be positive");
        if (te1 != echo_spacing)
            throw ParameterError("EpgParams: te1 must equal echo_spacing (CPMG timing)");
        if (n_echoes < 1) throw ParameterError("EpgParams: n_echoes must be >= 1");
    }
};

// Complex configuration-order state. Only used by the reference recursion;
// the production path below exploits that CPMG phase cycling keeps the
// transverse states real (and the longitudinal ones imaginary).
struct EpgStateVector {
    Eigen::VectorXcd f_plus;
    Eigen::VectorXcd f_minus;
    Eigen::VectorXcd z;
};

namespace detail {

inline double relax_factor(double dt, double tau) {
    return std::isinf(tau) ? 1.0 : std::exp(-dt / tau);
}

} // namespace detail

// One echo train for a single T2, real-valued recursion.
// Interval structure per echo: relax(esp/2), dephase shift, refocus, dephase
// shift, relax(esp/2); amplitude read from the zero-order transverse state.
inline Eigen::VectorXd epg_decay(double t2, const EpgParams& params) {
    params.validate();
    if (!(t2 > 0.0)) throw ParameterError("epg_decay: t2 must be positive");
    const int n = params.n_echoes;
    const int order = n + 2; // configuration orders 0 .. n+1
    Eigen::VectorXd fp = Eigen::VectorXd::Zero(order);
    Eigen::VectorXd fm = Eigen::VectorXd::Zero(order);
    Eigen::VectorXd z = Eigen::VectorXd::Zero(order);
    fp[0] = 1.0; // ideal 90 degree excitation
    fm[0] = 1.0;

    const double a = params.flip_angle * M_PI / 180.0;
    const double c2 = std::cos(a / 2) * std::cos(a / 2);
    const double s2 = std::sin(a / 2) * std::sin(a / 2);
    const double sa = std::sin(a);
    const double ca = std::cos(a);
    const double e2 = detail::relax_factor(params.echo_spacing / 2.0, t2);
    const double e1 = detail::relax_factor(params.echo_spacing / 2.0, params.t1);

    Eigen::VectorXd out(n);
    auto relax = [&] {
        fp *= e2;
        fm *= e2;
        z *= e1;
    };
    auto shift = [&] {
        for (int k = order - 1; k >= 1; --k) fp[k] = fp[k - 1];
        for (int k = 0; k < order - 1; ++k) fm[k] = fm[k + 1];
        fm[order - 1] = 0.0;
        fp[0] = fm[0];
    };
    Eigen::VectorXd nfp(order), nfm(order), nz(order);
    auto rotate = [&] {
        for (int k = 0; k < order; ++k) {
            nfp[k] = c2 * fp[k] + s2 * fm[k] + sa * z[k];
            nfm[k] = s2 * fp[k] + c2 * fm[k] - sa * z[k];
            nz[k] = -0.5 * sa * fp[k] + 0.5 * sa * fm[k] + ca * z[k];
        }
        fp.swap(nfp);
        fm.swap(nfm);
        z.swap(nz);
    };
    for (int echo = 0; echo < n; ++echo) {
        relax();
        shift();
        rotate();
        shift();
        relax();
        out[echo] = std::abs(fp[0]);
    }
    return out;
}

// Same recursion with explicit complex states; exists as an independent
// cross-check of the real reformulation and of the phase convention.
inline Eigen::VectorXd epg_decay_complex(double t2, const EpgParams& params) {
    params.validate();
    if (!(t2 > 0.0)) throw ParameterError("epg_decay_complex: t2 must be positive");
    using C = std::complex<double>;
    const C I(0.0, 1.0);
    const int n = params.n_echoes;
    const int order = n + 2;
    EpgStateVector s;
    s.f_plus = Eigen::VectorXcd::Zero(order);
    s.f_minus = Eigen::VectorXcd::Zero(order);
    s.z = Eigen::VectorXcd::Zero(order);
    s.f_plus[0] = C(1.0, 0.0); // 90 degree pulse about y: M = x, F0 = Mx + iMy = 1
    s.f_minus[0] = C(1.0, 0.0);

    const double a = params.flip_angle * M_PI / 180.0;
    const double c2 = std::cos(a / 2) * std::cos(a / 2);
    const double s2 = std::sin(a / 2) * std::sin(a / 2);
    const double sa = std::sin(a);
    const double ca = std::cos(a);
    const double e2 = detail::relax_factor(params.echo_spacing / 2.0, t2);
    const double e1 = detail::relax_factor(params.echo_spacing / 2.0, params.t1);

    Eigen::VectorXd out(n);
    auto relax = [&] {
        s.f_plus *= e2;
        s.f_minus *= e2;
        s.z *= e1;
    };
    auto shift = [&] {
        for (int k = order - 1; k >= 1; --k) s.f_plus[k] = s.f_plus[k - 1];
        for (int k = 0; k < order - 1; ++k) s.f_minus[k] = s.f_minus[k + 1];
        s.f_minus[order - 1] = C(0.0, 0.0);
        s.f_plus[0] = std::conj(s.f_minus[0]);
    };
    Eigen::VectorXcd nfp(order), nfm(order), nz(order);
    auto rotate = [&] {
        for (int k = 0; k < order; ++k) {
            nfp[k] = c2 * s.f_plus[k] + s2 * s.f_minus[k] - I * sa * s.z[k];
            nfm[k] = s2 * s.f_plus[k] + c2 * s.f_minus[k] + I * sa * s.z[k];
            nz[k] = -0.5 * I * sa * s.f_plus[k] + 0.5 * I * sa * s.f_minus[k] + ca * s.z[k];
        }
        s.f_plus.swap(nfp);
        s.f_minus.swap(nfm);
        s.z.swap(nz);
    };
    for (int echo = 0; echo < n; ++echo) {
        relax();
        shift();
        rotate();
        shift();
        relax();
        out[echo] = std::abs(s.f_plus[0]);
    }
    return out;
}

// Reference basis: column j is epg_decay(points[j]) verbatim.
inline Eigen::MatrixXd build_basis(const T2Grid& grid, const EpgParams& params) {
    params.validate();
    if (grid.size() < 1) throw ParameterError("build_basis: empty grid");
    Eigen::MatrixXd basis(params.n_echoes, grid.size());
    for (int j = 0; j < grid.size(); ++j) basis.col(j) = epg_decay(grid.points[j], params);
    return basis;
}

// Batched basis: the recursion runs on (order x n_basis) state matrices so a
// whole basis costs one pass of contiguous array arithmetic. Matches
// build_basis to floating-point roundoff; used where bases are built per
// voxel (flip-angle refinement, phantom synthesis).
inline Eigen::MatrixXd build_basis_fast(const T2Grid& grid, const EpgParams& params) {
    params.validate();
    const int m = grid.size();
    if (m < 1) throw ParameterError("build_basis_fast: empty grid");
    const int n = params.n_echoes;
    const int order = n + 2;

    Eigen::MatrixXd fp = Eigen::MatrixXd::Zero(order, m);
    Eigen::MatrixXd fm = Eigen::MatrixXd::Zero(order, m);
    Eigen::MatrixXd z = Eigen::MatrixXd::Zero(order, m);
    fp.row(0).setOnes();
    fm.row(0).setOnes();

    const double a = params.flip_angle * M_PI / 180.0;
    const double c2 = std::cos(a / 2) * std::cos(a / 2);
    const double s2 = std::sin(a / 2) * std::sin(a / 2);
    const double sa = std::sin(a);
    const double ca = std::cos(a);
    Eigen::ArrayXd e2(m);
    for (int j = 0; j < m; ++j) {
        if (!(grid.points[j] > 0.0)) throw ParameterError("build_basis_fast: t2 must be positive");
        e2[j] = detail::relax_factor(params.echo_spacing / 2.0, grid.points[j]);
    }
    const double e1 = detail::relax_factor(params.echo_spacing / 2.0, params.t1);

    Eigen::MatrixXd basis(n, m);
    Eigen::MatrixXd nfp(order, m), nfm(order, m), nz(order, m);
    auto relax = [&] {
        fp.array().rowwise() *= e2.transpose();
        fm.array().rowwise() *= e2.transpose();
        z *= e1;
    };
    auto shift = [&] {
        for (int k = order - 1; k >= 1; --k) fp.row(k) = fp.row(k - 1);
        for (int k = 0; k < order - 1; ++k) fm.row(k) = fm.row(k + 1);
        fm.row(order - 1).setZero();
        fp.row(0) = fm.row(0);
    };
    auto rotate = [&] {
        nfp = c2 * fp + s2 * fm + sa * z;
        nfm = s2 * fp + c2 * fm - sa * z;
        nz = -0.5 * sa * fp + 0.5 * sa * fm + ca * z;
        fp.swap(nfp);
        fm.swap(nfm);
        z.swap(nz);
    };
    for (int echo = 0; echo < n; ++echo) {
        relax();
        shift();
        rotate();
        shift();
        relax();
        basis.row(echo) = fp.row(0).cwiseAbs();
    }
    return basis;
}

// scale * basis * amplitudes, linear in both arguments.
inline Eigen::VectorXd synthesize(const T2Distribution& dist, const EpgParams& params,
                                  double scale) {
    detail::check_dist(dist);
    params.validate();
    if (!(scale > 0.0)) throw ParameterError("synthesize: scale must be positive");
    Eigen::MatrixXd basis = build_basis_fast(*dist.grid, params);
    return scale * (basis * dist.amplitudes);
}

} // namespace mwnet
