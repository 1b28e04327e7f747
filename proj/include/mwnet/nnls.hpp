#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "mwnet/common.hpp"

namespace mwnet {

struct NnlsResult {
    Eigen::VectorXd x;
    double rnorm2 = 0.0; // squared residual of the solved system
    int iterations = 0;  // least-squares subproblems solved
};

// Thrown when the active-set iteration cap is hit; carries the best iterate
// so callers can decide whether the partial answer is usable.
class NnlsConvergenceError : public std::runtime_error {
public:
    NnlsConvergenceError(const std::string& msg, Eigen::VectorXd best, double best_rnorm2)
        : std::runtime_error(msg), x(std::move(best)), rnorm2(best_rnorm2) {}
    Eigen::VectorXd x;
    double rnorm2;
};

// Lawson-Hanson active-set NNLS: min ||Ax - y||^2 subject to x >= 0.
// KKT tolerance is tol_scale * ||A'y||_inf; iteration cap defaults to 3n.
// Reference implementation (QR per subproblem); the Gram-form solver below is
// the production path and is equivalence-tested against this one.
inline NnlsResult nnls(const Eigen::MatrixXd& A, const Eigen::VectorXd& y,
                       double tol_scale = 1e-10, int max_iter = 0) {
    const int m = static_cast<int>(A.rows());
    const int n = static_cast<int>(A.cols());
    if (m < 1 || n < 1) throw ParameterError("nnls: empty system");
    if (y.size() != m) throw DimensionError("nnls: y length does not match A rows");
    if (!A.allFinite() || !y.allFinite()) throw ParameterError("nnls: non-finite input");
    if (max_iter <= 0) max_iter = 3 * n;

    const Eigen::VectorXd aty = A.transpose() * y;
    const double tol = tol_scale * aty.lpNorm<Eigen::Infinity>();

    Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
    std::vector<bool> passive(n, false);
    std::vector<int> p_idx;
    int solves = 0;

    auto residual2 = [&](const Eigen::VectorXd& v) { return (y - A * v).squaredNorm(); };

    while (true) {
        Eigen::VectorXd w = A.transpose() * (y - A * x);
        int jbest = -1;
        double wbest = tol;
        for (int j = 0; j < n; ++j)
            if (!passive[j] && w[j] > wbest) {
                wbest = w[j];
                jbest = j;
            }
        if (jbest < 0) break; // KKT satisfied
        passive[jbest] = true;
        p_idx.push_back(jbest);

        while (true) {
            if (++solves > max_iter)
                throw NnlsConvergenceError("nnls: iteration cap exceeded", x, residual2(x));
            const int p = static_cast<int>(p_idx.size());
            Eigen::MatrixXd Ap(m, p);
            for (int k = 0; k < p; ++k) Ap.col(k) = A.col(p_idx[k]);
            Eigen::VectorXd z = Ap.colPivHouseholderQr().solve(y);
            if ((z.array() > 0.0).all()) {
                x.setZero();
                for (int k = 0; k < p; ++k) x[p_idx[k]] = z[k];
                break;
            }
            // Step toward z until the first passive coordinate hits zero;
            // coordinates attaining the min ratio leave the passive set.
            Eigen::VectorXd ratio = Eigen::VectorXd::Constant(p, std::numeric_limits<double>::infinity());
            double alpha = std::numeric_limits<double>::infinity();
            for (int k = 0; k < p; ++k)
                if (z[k] <= 0.0) {
                    ratio[k] = x[p_idx[k]] / (x[p_idx[k]] - z[k]);
                    alpha = std::min(alpha, ratio[k]);
                }
            for (int k = 0; k < p; ++k) x[p_idx[k]] += alpha * (z[k] - x[p_idx[k]]);
            for (int k = p - 1; k >= 0; --k) {
                const int j = p_idx[k];
                if (ratio[k] == alpha || x[j] <= 0.0) {
                    x[j] = 0.0;
                    passive[j] = false;
                    p_idx.erase(p_idx.begin() + k);
                }
            }
        }
    }
    NnlsResult r;
    r.x = std::move(x);
    r.rnorm2 = residual2(r.x);
    r.iterations = solves;
    return r;
}

// Gram-form NNLS for repeated solves against the same design matrix:
// min x'(G + mu I)x - 2 b'x subject to x >= 0, with G = A'A and b = A'y.
// Ridge weight mu enters only through the diagonal, so a regularization
// search never rebuilds or refactors the full system. The passive set
// persists across solve() calls for warm starting (flip-angle sweeps and
// mu bisection visit nearly identical supports).
class GramNnls {
public:
    // G must outlive the solver; b is copied.
    void set_problem(const Eigen::MatrixXd& G, const Eigen::VectorXd& b, double mu, double tol) {
        if (G.rows() != G.cols()) throw DimensionError("GramNnls: G must be square");
        if (b.size() != G.rows()) throw DimensionError("GramNnls: b length does not match G");
        G_ = &G;
        b_ = b;
        mu_ = mu;
        tol_ = tol;
    }

    NnlsResult solve(bool warm_start = false) {
        if (!G_) throw ParameterError("GramNnls: set_problem not called");
        const int n = static_cast<int>(b_.size());
        const int max_iter = 3 * n;
        int solves = 0;

        if (!warm_start) p_.clear();
        if (!rebuild_cholesky()) { // stale support became singular
            p_.clear();
            L_.resize(0, 0);
        }

        Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
        if (!p_.empty()) {
            // Shrink the inherited support until its unconstrained solution
            // is strictly feasible, then adopt it.
            while (!p_.empty()) {
                ++solves;
                Eigen::VectorXd z = solve_passive();
                int worst = -1;
                double zmin = 0.0;
                for (int k = 0; k < static_cast<int>(p_.size()); ++k)
                    if (z[k] <= zmin) {
                        zmin = z[k];
                        worst = k;
                    }
                if (worst < 0) {
                    for (int k = 0; k < static_cast<int>(p_.size()); ++k) x[p_[k]] = z[k];
                    break;
                }
                remove_at(worst);
            }
        }

        std::vector<bool> passive(n, false);
        for (int j : p_) passive[j] = true;

        while (true) {
            // w = b - (G + mu I) x, with Gx accumulated over the support only
            Eigen::VectorXd gx = Eigen::VectorXd::Zero(n);
            for (int j : p_)
                if (x[j] != 0.0) gx += x[j] * G_->col(j);
            Eigen::VectorXd w = b_ - gx - mu_ * x;

            // Candidates in descending gradient order; skip directions whose
            // Schur pivot vanishes (numerically dependent on the support).
            int jbest = -1;
            while (true) {
                double wbest = tol_;
                int jcand = -1;
                for (int j = 0; j < n; ++j)
                    if (!passive[j] && w[j] > wbest) {
                        wbest = w[j];
                        jcand = j;
                    }
                if (jcand < 0) break;
                if (try_append(jcand)) {
                    jbest = jcand;
                    break;
                }
                w[jcand] = -std::numeric_limits<double>::infinity();
            }
            if (jbest < 0) break; // KKT satisfied (or only degenerate directions remain)
            passive[jbest] = true;

            while (true) {
                if (++solves > max_iter) {
                    NnlsResult best;
                    best.x = x;
                    best.rnorm2 = objective(x);
                    throw NnlsConvergenceError("GramNnls: iteration cap exceeded", best.x,
                                               best.rnorm2);
                }
                Eigen::VectorXd z = solve_passive();
                if ((z.array() > 0.0).all()) {
                    x.setZero();
                    for (int k = 0; k < static_cast<int>(p_.size()); ++k) x[p_[k]] = z[k];
                    break;
                }
                const int p = static_cast<int>(p_.size());
                Eigen::VectorXd ratio =
                    Eigen::VectorXd::Constant(p, std::numeric_limits<double>::infinity());
                double alpha = std::numeric_limits<double>::infinity();
                for (int k = 0; k < p; ++k)
                    if (z[k] <= 0.0) {
                        ratio[k] = x[p_[k]] / (x[p_[k]] - z[k]);
                        alpha = std::min(alpha, ratio[k]);
                    }
                for (int k = 0; k < p; ++k) x[p_[k]] += alpha * (z[k] - x[p_[k]]);
                for (int k = p - 1; k >= 0; --k) {
                    const int j = p_[k];
                    if (ratio[k] == alpha || x[j] <= 0.0) {
                        x[j] = 0.0;
                        passive[j] = false;
                        remove_at(k);
                    }
                }
            }
        }
        NnlsResult r;
        r.x = std::move(x);
        r.rnorm2 = objective(r.x); // Gram-form objective; see note below
        r.iterations = solves;
        return r;
    }

    const std::vector<int>& passive_set() const { return p_; }

    // Replace the warm-start support wholesale (used when the caller knows a
    // better starting set than the previous solve's, e.g. jumping back to a
    // small ridge after probing a large one). Falls back to empty when the
    // seeded support is singular under the current problem.
    void seed_support(const std::vector<int>& support) {
        if (!G_) throw ParameterError("GramNnls: set_problem not called");
        p_ = support;
        if (!rebuild_cholesky()) {
            p_.clear();
            L_.resize(0, 0);
        }
    }

    // ||y||^2 - 2 b'x + x'(G + mu I)x. Cancellation limits accuracy to about
    // 1e-16 * ||y||^2, fine for ranking candidates but not for near-zero
    // residual decisions; callers needing those compute ||y - Ax||^2 directly.
    double objective(const Eigen::VectorXd& x) const {
        double quad = mu_ * x.squaredNorm();
        for (int j : p_)
            if (x[j] != 0.0) quad += x[j] * G_->col(j).dot(x);
        return quad - 2.0 * b_.dot(x);
    }

private:
    bool rebuild_cholesky() {
        const int p = static_cast<int>(p_.size());
        L_.resize(p, p);
        for (int k = 0; k < p; ++k) {
            for (int i = 0; i < k; ++i) {
                double s = (*G_)(p_[k], p_[i]);
                for (int t = 0; t < i; ++t) s -= L_(k, t) * L_(i, t);
                L_(k, i) = s / L_(i, i);
            }
            double d = (*G_)(p_[k], p_[k]) + mu_;
            for (int t = 0; t < k; ++t) d -= L_(k, t) * L_(k, t);
            if (!(d > pivot_floor(p_[k]))) return false;
            L_(k, k) = std::sqrt(d);
        }
        return true;
    }

    double pivot_floor(int j) const { return 1e-12 * ((*G_)(j, j) + mu_); }

    // Append column j to the factorization; returns false (no change) when
    // the Schur pivot is below the floor.
    bool try_append(int j) {
        const int p = static_cast<int>(p_.size());
        Eigen::VectorXd g(p);
        for (int k = 0; k < p; ++k) g[k] = (*G_)(p_[k], j);
        Eigen::VectorXd l(p);
        for (int k = 0; k < p; ++k) {
            double s = g[k];
            for (int t = 0; t < k; ++t) s -= L_(k, t) * l[t];
            l[k] = s / L_(k, k);
        }
        const double d = (*G_)(j, j) + mu_ - l.squaredNorm();
        if (!(d > pivot_floor(j))) return false;
        L_.conservativeResize(p + 1, p + 1);
        for (int k = 0; k < p; ++k) L_(p, k) = l[k];
        L_(p, p) = std::sqrt(d);
        p_.push_back(j);
        return true;
    }

    void remove_at(int k) {
        p_.erase(p_.begin() + k);
        rebuild_cholesky();
    }

    // z = (G_PP + mu I)^{-1} b_P via the maintained factorization.
    Eigen::VectorXd solve_passive() {
        const int p = static_cast<int>(p_.size());
        Eigen::VectorXd z(p);
        for (int k = 0; k < p; ++k) {
            double s = b_[p_[k]];
            for (int t = 0; t < k; ++t) s -= L_(k, t) * z[t];
            z[k] = s / L_(k, k);
        }
        for (int k = p - 1; k >= 0; --k) {
            double s = z[k];
            for (int t = k + 1; t < p; ++t) s -= L_(t, k) * z[t];
            z[k] = s / L_(k, k);
        }
        return z;
    }

    const Eigen::MatrixXd* G_ = nullptr;
    Eigen::VectorXd b_;
    double mu_ = 0.0;
    double tol_ = 0.0;
    std::vector<int> p_;
    Eigen::MatrixXd L_;
};

} // namespace mwnet
