#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "mwnet/common.hpp"
#include "mwnet/echo_cube.hpp"
#include "mwnet/epg.hpp"
#include "mwnet/parallel.hpp"
#include "mwnet/t2grid.hpp"

namespace mwnet {

enum class NoiseModel { rician, gaussian };

inline NoiseModel noise_model_from_string(const std::string& s) {
    if (s == "rician") return NoiseModel::rician;
    if (s == "gaussian") return NoiseModel::gaussian;
    throw ParameterError("unknown noise model: " + s);
}

// Cohort composition: alternating hc/ms subjects (default), or all of one
// kind for the training-composition experiment.
enum class SubjectMix { mixed, hc_only, ms_only };

inline SubjectMix subject_mix_from_string(const std::string& s) {
    if (s == "mixed") return SubjectMix::mixed;
    if (s == "hc_only") return SubjectMix::hc_only;
    if (s == "ms_only") return SubjectMix::ms_only;
    throw ParameterError("unknown subject mix: " + s);
}

inline std::string to_string(SubjectMix m) {
    switch (m) {
        case SubjectMix::mixed: return "mixed";
        case SubjectMix::hc_only: return "hc_only";
        case SubjectMix::ms_only: return "ms_only";
    }
    return "?";
}

struct CohortConfig {
    int n_subjects = 8;
    int voxels_per_subject = 12500;
    int n_echoes = 32;
    double frac_healthy = 0.70;
    double frac_gm = 0.20;
    double frac_lesion = 0.10;
    double flip_lo = 130.0;
    double flip_hi = 180.0;
    double noise_sd = 5.0; // signal units; voxel scale ~1000
    NoiseModel noise_model = NoiseModel::rician;
    double te1 = 10.0; // echo spacing follows te1
    double t1 = 1000.0;
    SubjectMix subject_mix = SubjectMix::mixed;
    std::uint64_t seed = 1;

    void validate() const {
        if (n_subjects < 1) throw ParameterError("CohortConfig: need at least one subject");
        if (voxels_per_subject < 1) throw ParameterError("CohortConfig: need at least one voxel");
        if (n_echoes < 1) throw ParameterError("CohortConfig: need at least one echo");
        if (frac_healthy < 0.0 || frac_gm < 0.0 || frac_lesion < 0.0 ||
            std::abs(frac_healthy + frac_gm + frac_lesion - 1.0) > 1e-9)
            throw ParameterError("CohortConfig: class proportions must be nonnegative and sum to 1");
        // hc subjects get no lesions; ms subjects get 2x so the cohort average
        // matches the configured mix — requires frac_healthy >= frac_lesion.
        if (frac_healthy < frac_lesion)
            throw ParameterError("CohortConfig: healthy proportion must be >= lesion proportion");
        if (!(flip_lo > 0.0) || flip_hi > 180.0 || flip_lo > flip_hi)
            throw ParameterError("CohortConfig: flip range must lie in (0, 180]");
        if (noise_sd < 0.0) throw ParameterError("CohortConfig: negative noise sd");
        if (!(te1 > 0.0)) throw ParameterError("CohortConfig: te1 must be positive");
        if (!(t1 > 0.0)) throw ParameterError("CohortConfig: t1 must be positive");
    }
};

// Near-cubic factorization of the voxel budget (12500 -> 25 x 25 x 20).
inline std::array<int, 3> choose_dims(int n_voxels) {
    if (n_voxels < 1) throw ParameterError("choose_dims: need at least one voxel");
    for (int nz = static_cast<int>(std::cbrt(static_cast<double>(n_voxels)) + 1e-9); nz >= 1;
         --nz) {
        if (n_voxels % nz != 0) continue;
        const int rest = n_voxels / nz;
        for (int ny = static_cast<int>(std::sqrt(static_cast<double>(rest)) + 1e-9); ny >= 1;
             --ny) {
            if (rest % ny != 0) continue;
            return {rest / ny, ny, nz};
        }
    }
    return {n_voxels, 1, 1};
}

// Class ranges: healthy white matter draws myelin fraction in [0.05, 0.20]
// with the short pool centered 15-30 ms and the IEW pool 60-90 ms; lesions
// draw [0, 0.08] myelin with IEW 80-120 ms; gray-matter-like voxels draw
// [0.02, 0.06] myelin with IEW 70-100 ms. True MWF is the myelin fraction
// and true GMT2 the IEW center. Draw order is fixed (seven draws per voxel).
inline VoxelTruth make_voxel_truth(VoxelClass cls, std::mt19937_64& rng, double flip_lo = 130.0,
                                   double flip_hi = 180.0) {
    auto uni = [&rng](double lo, double hi) {
        return std::uniform_real_distribution<double>(lo, hi)(rng);
    };
    double mf = 0.0, iew_lo = 60.0, iew_hi = 90.0;
    switch (cls) {
        case VoxelClass::healthy_wm:
            mf = uni(0.05, 0.20);
            iew_lo = 60.0;
            iew_hi = 90.0;
            break;
        case VoxelClass::lesion:
            mf = uni(0.0, 0.08);
            iew_lo = 80.0;
            iew_hi = 120.0;
            break;
        case VoxelClass::gm_like:
            mf = uni(0.02, 0.06);
            iew_lo = 70.0;
            iew_hi = 100.0;
            break;
    }
    VoxelTruth t;
    t.cls = cls;
    t.myelin.fraction = mf;
    t.myelin.center_t2 = uni(15.0, 30.0);
    t.iew.fraction = 1.0 - mf;
    t.iew.center_t2 = uni(iew_lo, iew_hi);
    t.myelin.log_width = uni(0.05, 0.15);
    t.iew.log_width = uni(0.05, 0.15);
    t.scale = uni(800.0, 1200.0);
    t.flip_deg = uni(flip_lo, flip_hi);
    t.true_mwf = mf;
    t.true_gmt2 = t.iew.center_t2;
    return t;
}

// Gaussian-in-log-T2 pool mixture sampled on the grid, normalized to unit
// sum. Pool fractions weight normalized densities so each pool's share of
// the discrete mass matches its fraction (up to edge truncation).
inline Eigen::VectorXd truth_amplitudes(const VoxelTruth& t, const T2Grid& grid) {
    Eigen::VectorXd a = Eigen::VectorXd::Zero(grid.size());
    for (const PoolSpec* p : {&t.myelin, &t.iew}) {
        if (!(p->log_width > 0.0)) throw ParameterError("truth_amplitudes: nonpositive log width");
        const double mu = std::log(p->center_t2);
        const double inv2w2 = 1.0 / (2.0 * p->log_width * p->log_width);
        const double norm = p->fraction / (p->log_width * std::sqrt(2.0 * M_PI));
        for (int j = 0; j < grid.size(); ++j) {
            const double d = std::log(grid.points[j]) - mu;
            a[j] += norm * std::exp(-d * d * inv2w2);
        }
    }
    const double total = a.sum();
    if (!(total > 0.0)) throw DegenerateDataError("truth_amplitudes: zero mixture mass");
    return a / total;
}

namespace detail {

// Largest-remainder apportionment of n voxels over three class proportions.
inline std::array<int, 3> class_counts(int n, double fh, double fg, double fl) {
    const std::array<double, 3> quota{fh * n, fg * n, fl * n};
    std::array<int, 3> c{};
    int used = 0;
    for (int i = 0; i < 3; ++i) {
        c[i] = static_cast<int>(std::floor(quota[i]));
        used += c[i];
    }
    std::array<int, 3> order{0, 1, 2};
    std::sort(order.begin(), order.end(), [&](int i, int j) {
        const double ri = quota[i] - std::floor(quota[i]);
        const double rj = quota[j] - std::floor(quota[j]);
        return ri != rj ? ri > rj : i < j;
    });
    for (int k = 0; used < n; ++used, ++k) ++c[order[k % 3]];
    return c;
}

} // namespace detail

// One synthetic subject: smoothly varying flip-angle field, per-voxel truth
// draws, forward-simulated decay curves, then optional noise. Deterministic
// in (config seed, subject index) alone, so subjects can build in parallel.
inline EchoCube make_subject(const CohortConfig& cfg, int subject_index) {
    cfg.validate();
    if (subject_index < 0 || subject_index >= cfg.n_subjects)
        throw ParameterError("make_subject: subject index out of range");
    std::mt19937_64 rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(subject_index)));
    auto uni = [&rng](double lo, double hi) {
        return std::uniform_real_distribution<double>(lo, hi)(rng);
    };

    EchoCube cube;
    cube.dims = choose_dims(cfg.voxels_per_subject);
    cube.n_echoes = cfg.n_echoes;
    cube.te1_ms = cfg.te1;
    cube.esp_ms = cfg.te1;
    switch (cfg.subject_mix) {
        case SubjectMix::mixed: cube.subject_kind = subject_index % 2 == 0 ? "hc" : "ms"; break;
        case SubjectMix::hc_only: cube.subject_kind = "hc"; break;
        case SubjectMix::ms_only: cube.subject_kind = "ms"; break;
    }
    const std::size_t nv = cube.n_voxels();
    cube.signals.assign(nv * static_cast<std::size_t>(cfg.n_echoes), 0.0);
    cube.mask.assign(nv, 1);
    cube.truth.resize(nv);

    const bool ms = cube.subject_kind == "ms";
    const double fl = ms ? 2.0 * cfg.frac_lesion : 0.0;
    const double fh = ms ? cfg.frac_healthy - cfg.frac_lesion : cfg.frac_healthy + cfg.frac_lesion;
    const auto counts = detail::class_counts(cfg.voxels_per_subject, fh, cfg.frac_gm, fl);
    std::vector<VoxelClass> classes;
    classes.reserve(nv);
    classes.insert(classes.end(), counts[0], VoxelClass::healthy_wm);
    classes.insert(classes.end(), counts[1], VoxelClass::gm_like);
    classes.insert(classes.end(), counts[2], VoxelClass::lesion);
    std::shuffle(classes.begin(), classes.end(), rng);

    const double fa = uni(0.5, 1.5), fb = uni(0.5, 1.5), fc = uni(0.5, 1.5);
    const double phase = uni(0.0, 2.0 * M_PI);
    const auto flip_at = [&](int x, int y, int z) {
        const double arg = 2.0 * M_PI *
                               (fa * x / cube.dims[0] + fb * y / cube.dims[1] +
                                fc * z / cube.dims[2]) +
                           phase;
        return cfg.flip_lo + (cfg.flip_hi - cfg.flip_lo) * (0.5 + 0.5 * std::sin(arg));
    };

    const T2Grid grid = make_t2_grid();
    EpgParams params;
    params.t1 = cfg.t1;
    params.te1 = cfg.te1;
    params.echo_spacing = cfg.te1;
    params.n_echoes = cfg.n_echoes;
    std::size_t v = 0;
    for (int z = 0; z < cube.dims[2]; ++z)
        for (int y = 0; y < cube.dims[1]; ++y)
            for (int x = 0; x < cube.dims[0]; ++x, ++v) {
                VoxelTruth t = make_voxel_truth(classes[v], rng, cfg.flip_lo, cfg.flip_hi);
                t.flip_deg = flip_at(x, y, z);
                cube.truth[v] = t;
                params.flip_angle = t.flip_deg;
                const Eigen::MatrixXd basis = build_basis_fast(grid, params);
                const Eigen::VectorXd curve =
                    basis * (truth_amplitudes(t, grid) * t.scale);
                for (int e = 0; e < cfg.n_echoes; ++e)
                    cube.signals[v * static_cast<std::size_t>(cfg.n_echoes) +
                                 static_cast<std::size_t>(e)] = curve[e];
            }
    return cube;
}

// Per-sample noise; sd = 0 returns the cube unchanged without consuming
// random numbers.
inline EchoCube add_noise(const EchoCube& cube, double sd, NoiseModel model, std::uint64_t seed) {
    if (sd < 0.0) throw ParameterError("add_noise: negative sd");
    EchoCube out = cube;
    if (sd == 0.0) return out;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, sd);
    if (model == NoiseModel::rician) {
        for (double& s : out.signals) {
            const double n1 = noise(rng);
            const double n2 = noise(rng);
            s = std::sqrt((s + n1) * (s + n1) + n2 * n2);
        }
    } else {
        for (double& s : out.signals) s += noise(rng);
    }
    return out;
}

inline std::vector<EchoCube> make_cohort(const CohortConfig& cfg, int workers = 1) {
    cfg.validate();
    std::vector<EchoCube> cohort(static_cast<std::size_t>(cfg.n_subjects));
    parallel_for_ranges(cohort.size(), workers, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t s = lo; s < hi; ++s) {
            EchoCube cube = make_subject(cfg, static_cast<int>(s));
            if (cfg.noise_sd > 0.0)
                cube = add_noise(cube, cfg.noise_sd, cfg.noise_model,
                                 mix_seed(cfg.seed, 100000 + s));
            cohort[s] = std::move(cube);
        }
    });
    return cohort;
}

namespace detail {

// Symmetric Tukey window; taper fraction alpha per end pair. alpha = 0 is
// rectangular, alpha = 1 the Hann limit.
inline std::vector<double> tukey_window(int n, double alpha) {
    std::vector<double> w(static_cast<std::size_t>(n), 1.0);
    if (n <= 1 || alpha <= 0.0) return w;
    const double L = static_cast<double>(n - 1);
    const double edge = alpha * L / 2.0;
    for (int i = 0; i < n; ++i) {
        const double d = std::min(static_cast<double>(i), L - i);
        if (d < edge) w[static_cast<std::size_t>(i)] =
            0.5 * (1.0 + std::cos(M_PI * (d / edge - 1.0)));
    }
    return w;
}

inline Eigen::MatrixXcd dft_matrix(int n, bool inverse) {
    Eigen::MatrixXcd f(n, n);
    const double sign = inverse ? 1.0 : -1.0;
    for (int j = 0; j < n; ++j)
        for (int k = 0; k < n; ++k)
            f(j, k) = std::exp(std::complex<double>(0.0, sign * 2.0 * M_PI * j * k / n));
    if (inverse) f /= static_cast<double>(n);
    return f;
}

inline void transform_axis(std::vector<std::complex<double>>& vol, const std::array<int, 3>& dims,
                           int axis, const Eigen::MatrixXcd& f) {
    const int n = dims[static_cast<std::size_t>(axis)];
    const std::array<std::size_t, 3> stride{1, static_cast<std::size_t>(dims[0]),
                                            static_cast<std::size_t>(dims[0]) *
                                                static_cast<std::size_t>(dims[1])};
    const std::size_t step = stride[static_cast<std::size_t>(axis)];
    const int na = dims[(axis + 1) % 3], nb = dims[(axis + 2) % 3];
    const std::size_t sa = stride[static_cast<std::size_t>((axis + 1) % 3)];
    const std::size_t sb = stride[static_cast<std::size_t>((axis + 2) % 3)];
    Eigen::VectorXcd line(n);
    for (int b = 0; b < nb; ++b)
        for (int a = 0; a < na; ++a) {
            const std::size_t base = static_cast<std::size_t>(a) * sa +
                                     static_cast<std::size_t>(b) * sb;
            for (int k = 0; k < n; ++k) line[k] = vol[base + static_cast<std::size_t>(k) * step];
            line = (f * line).eval();
            for (int k = 0; k < n; ++k) vol[base + static_cast<std::size_t>(k) * step] = line[k];
        }
}

} // namespace detail

// K-space apodization of each echo image: DFT along every spatial axis,
// separable Tukey taper centered on DC, inverse DFT, magnitude.
inline EchoCube tukey_apodize(const EchoCube& cube, double coefficient) {
    if (coefficient < 0.0 || coefficient > 1.0)
        throw ParameterError("tukey_apodize: coefficient must lie in [0, 1]");
    cube.validate();
    EchoCube out = cube;
    const std::size_t nv = cube.n_voxels();

    std::array<std::vector<double>, 3> taper;
    std::array<Eigen::MatrixXcd, 3> fwd, inv;
    for (int ax = 0; ax < 3; ++ax) {
        const int n = cube.dims[static_cast<std::size_t>(ax)];
        // Taper as a function of |signed frequency|: exactly symmetric in k,
        // so the implied spatial kernel is real and the DC bin keeps weight 1.
        // (Index-shifting an even-length window would break the symmetry by
        // half a bin and leak signal into the imaginary channel.)
        const int half = n / 2;
        const std::vector<double> w = detail::tukey_window(2 * half + 1, coefficient);
        taper[static_cast<std::size_t>(ax)].resize(static_cast<std::size_t>(n));
        for (int k = 0; k < n; ++k) {
            const int f = k <= half ? k : k - n;
            taper[static_cast<std::size_t>(ax)][static_cast<std::size_t>(k)] =
                w[static_cast<std::size_t>(half + std::abs(f))];
        }
        fwd[static_cast<std::size_t>(ax)] = detail::dft_matrix(n, false);
        inv[static_cast<std::size_t>(ax)] = detail::dft_matrix(n, true);
    }

    std::vector<std::complex<double>> vol(nv);
    for (int e = 0; e < cube.n_echoes; ++e) {
        for (std::size_t v = 0; v < nv; ++v)
            vol[v] = cube.signals[v * static_cast<std::size_t>(cube.n_echoes) +
                                  static_cast<std::size_t>(e)];
        for (int ax = 0; ax < 3; ++ax)
            detail::transform_axis(vol, cube.dims, ax, fwd[static_cast<std::size_t>(ax)]);
        std::size_t v = 0;
        for (int z = 0; z < cube.dims[2]; ++z)
            for (int y = 0; y < cube.dims[1]; ++y)
                for (int x = 0; x < cube.dims[0]; ++x, ++v)
                    vol[v] *= taper[0][static_cast<std::size_t>(x)] *
                              taper[1][static_cast<std::size_t>(y)] *
                              taper[2][static_cast<std::size_t>(z)];
        for (int ax = 0; ax < 3; ++ax)
            detail::transform_axis(vol, cube.dims, ax, inv[static_cast<std::size_t>(ax)]);
        for (std::size_t v2 = 0; v2 < nv; ++v2)
            out.signals[v2 * static_cast<std::size_t>(cube.n_echoes) +
                        static_cast<std::size_t>(e)] = std::abs(vol[v2]);
    }
    return out;
}

struct SubjectSplit {
    std::vector<int> train, val, test;
};

namespace detail {

inline std::vector<std::vector<int>> group_by_kind(const std::vector<std::string>& kinds,
                                                   std::mt19937_64& rng) {
    std::vector<std::string> names;
    std::vector<std::vector<int>> groups;
    for (std::size_t i = 0; i < kinds.size(); ++i) {
        auto it = std::find(names.begin(), names.end(), kinds[i]);
        if (it == names.end()) {
            names.push_back(kinds[i]);
            groups.emplace_back();
            it = names.end() - 1;
        }
        groups[static_cast<std::size_t>(it - names.begin())].push_back(static_cast<int>(i));
    }
    for (auto& g : groups) std::shuffle(g.begin(), g.end(), rng);
    return groups;
}

} // namespace detail

// Subject-level 12:2:8 split, apportioned within each subject kind by
// largest remainder; buckets left globally empty are topped up from the
// largest bucket so train/val/test are all nonempty.
inline SubjectSplit split_subjects(const std::vector<std::string>& kinds, std::uint64_t seed) {
    const int n = static_cast<int>(kinds.size());
    if (n < 3) throw ParameterError("split_subjects: need at least 3 subjects");
    std::mt19937_64 rng(mix_seed(seed, 0xA11));
    SubjectSplit split;
    for (const auto& group : detail::group_by_kind(kinds, rng)) {
        const auto c =
            detail::class_counts(static_cast<int>(group.size()), 12.0 / 22, 2.0 / 22, 8.0 / 22);
        std::size_t i = 0;
        for (int k = 0; k < c[0]; ++k) split.train.push_back(group[i++]);
        for (int k = 0; k < c[1]; ++k) split.val.push_back(group[i++]);
        for (int k = 0; k < c[2]; ++k) split.test.push_back(group[i++]);
    }
    auto largest = [&split]() -> std::vector<int>* {
        std::vector<int>* big = &split.train;
        if (split.val.size() > big->size()) big = &split.val;
        if (split.test.size() > big->size()) big = &split.test;
        return big;
    };
    for (std::vector<int>* bucket : {&split.train, &split.val, &split.test})
        while (bucket->empty()) {
            std::vector<int>* big = largest();
            if (big == bucket || big->size() < 2)
                throw ParameterError("split_subjects: infeasible balance");
            bucket->push_back(big->back());
            big->pop_back();
        }
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.val.begin(), split.val.end());
    std::sort(split.test.begin(), split.test.end());
    return split;
}

inline SubjectSplit split_subjects(int n_subjects, std::uint64_t seed) {
    std::vector<std::string> kinds;
    for (int i = 0; i < n_subjects; ++i) kinds.push_back(i % 2 == 0 ? "hc" : "ms");
    return split_subjects(kinds, seed);
}

// K disjoint folds, round-robin within each subject kind.
inline std::vector<std::vector<int>> split_kfold(const std::vector<std::string>& kinds, int k,
                                                 std::uint64_t seed) {
    if (k < 2) throw ParameterError("split_kfold: k must be >= 2");
    if (static_cast<int>(kinds.size()) < k)
        throw ParameterError("split_kfold: fewer subjects than folds");
    std::mt19937_64 rng(mix_seed(seed, 0xF01D));
    std::vector<std::vector<int>> folds(static_cast<std::size_t>(k));
    std::size_t next = 0;
    for (const auto& group : detail::group_by_kind(kinds, rng))
        for (int idx : group) folds[next++ % static_cast<std::size_t>(k)].push_back(idx);
    for (auto& f : folds) std::sort(f.begin(), f.end());
    return folds;
}

// Executable leakage check: buckets disjoint and jointly covering 0..n-1.
inline void assert_partition(const SubjectSplit& split, int n_subjects) {
    std::vector<int> seen(static_cast<std::size_t>(n_subjects), 0);
    for (const std::vector<int>* bucket : {&split.train, &split.val, &split.test})
        for (int s : *bucket) {
            if (s < 0 || s >= n_subjects) throw ParameterError("split: subject index out of range");
            if (seen[static_cast<std::size_t>(s)]++)
                throw ParameterError("split: subject appears in two buckets");
        }
    for (int c : seen)
        if (!c) throw ParameterError("split: subject missing from all buckets");
}

} // namespace mwnet
