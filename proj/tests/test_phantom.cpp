#include <catch2/catch_amalgamated.hpp>

#include <mwnet/mwnet.hpp>

#include <cmath>
#include <complex>
#include <cstring>
#include <map>
#include <random>

using namespace mwnet;

namespace {

CohortConfig tiny_cohort_config() {
    CohortConfig cfg;
    cfg.n_subjects = 2;
    cfg.voxels_per_subject = 200;
    cfg.n_echoes = 8;
    cfg.noise_sd = 0.0;
    cfg.seed = 11;
    return cfg;
}

std::map<VoxelClass, int> class_histogram(const EchoCube& cube) {
    std::map<VoxelClass, int> h;
    for (const auto& t : cube.truth) ++h[t.cls];
    return h;
}

// per-axis circular smoothing kernel implied by the frequency-radius taper
std::vector<std::complex<double>> taper_kernel(int n, double coeff) {
    const int half = n / 2;
    const std::vector<double> w = detail::tukey_window(2 * half + 1, coeff);
    std::vector<std::complex<double>> kernel(static_cast<std::size_t>(n));
    for (int x = 0; x < n; ++x) {
        std::complex<double> acc(0.0, 0.0);
        for (int k = 0; k < n; ++k) {
            const int f = k <= half ? k : k - n;
            const double taper = w[static_cast<std::size_t>(half + std::abs(f))];
            acc += taper * std::exp(std::complex<double>(0.0, 2.0 * M_PI * k * x / n));
        }
        kernel[static_cast<std::size_t>(x)] = acc / static_cast<double>(n);
    }
    return kernel;
}

} // namespace

TEST_CASE("voxel budget factorization is near-cubic and exact") {
    REQUIRE(choose_dims(12500) == std::array<int, 3>{25, 25, 20});
    REQUIRE(choose_dims(2500) == std::array<int, 3>{25, 10, 10});
    REQUIRE(choose_dims(8) == std::array<int, 3>{2, 2, 2});
    REQUIRE(choose_dims(1) == std::array<int, 3>{1, 1, 1});
    REQUIRE(choose_dims(7) == std::array<int, 3>{7, 1, 1}); // prime
    for (int n : {6, 30, 100, 997, 12500}) {
        const auto d = choose_dims(n);
        REQUIRE(d[0] * d[1] * d[2] == n);
        REQUIRE(d[0] >= d[1]); // x never shorter than y; z is the coarsest probe
    }
    REQUIRE_THROWS_AS(choose_dims(0), ParameterError);
}

TEST_CASE("voxel truth draws stay inside the class ranges") {
    std::mt19937_64 rng(3);
    for (int i = 0; i < 300; ++i) {
        const VoxelTruth h = make_voxel_truth(VoxelClass::healthy_wm, rng);
        REQUIRE(h.true_mwf >= 0.05);
        REQUIRE(h.true_mwf <= 0.20);
        REQUIRE(h.iew.center_t2 >= 60.0);
        REQUIRE(h.iew.center_t2 <= 90.0);
        const VoxelTruth l = make_voxel_truth(VoxelClass::lesion, rng);
        REQUIRE(l.true_mwf >= 0.0);
        REQUIRE(l.true_mwf <= 0.08);
        REQUIRE(l.iew.center_t2 >= 80.0);
        REQUIRE(l.iew.center_t2 <= 120.0);
        const VoxelTruth g = make_voxel_truth(VoxelClass::gm_like, rng);
        REQUIRE(g.true_mwf >= 0.02);
        REQUIRE(g.true_mwf <= 0.06);
        for (const VoxelTruth* t : {&h, &l, &g}) {
            REQUIRE(t->myelin.fraction + t->iew.fraction == Catch::Approx(1.0));
            REQUIRE(t->myelin.center_t2 >= 15.0);
            REQUIRE(t->myelin.center_t2 <= 30.0);
            REQUIRE(t->true_gmt2 == t->iew.center_t2);
            REQUIRE(t->scale >= 800.0);
            REQUIRE(t->scale <= 1200.0);
        }
    }
}

TEST_CASE("truth amplitudes form a normalized two-pool mixture") {
    const T2Grid grid = make_t2_grid();
    std::mt19937_64 rng(9);
    const VoxelTruth t = make_voxel_truth(VoxelClass::healthy_wm, rng);
    const Eigen::VectorXd a = truth_amplitudes(t, grid);
    REQUIRE(a.sum() == Catch::Approx(1.0).epsilon(1e-12));
    REQUIRE(a.minCoeff() >= 0.0);
    // short-window mass approximates the drawn myelin fraction
    double short_mass = 0.0;
    for (int j = 0; j < grid.size(); ++j)
        if (grid.points[j] <= 45.0) short_mass += a[j];
    REQUIRE(short_mass == Catch::Approx(t.true_mwf).margin(0.02));

    VoxelTruth bad = t;
    bad.myelin.log_width = 0.0;
    REQUIRE_THROWS_AS(truth_amplitudes(bad, grid), ParameterError);
}

TEST_CASE("subjects carry the configured class mix") {
    const CohortConfig cfg = tiny_cohort_config();
    const EchoCube hc = make_subject(cfg, 0);
    const EchoCube ms = make_subject(cfg, 1);
    REQUIRE(hc.subject_kind == "hc");
    REQUIRE(ms.subject_kind == "ms");

    // hc: lesion share folded into healthy; ms: doubled lesion share
    auto hist_hc = class_histogram(hc);
    REQUIRE(hist_hc[VoxelClass::healthy_wm] == 160);
    REQUIRE(hist_hc[VoxelClass::gm_like] == 40);
    REQUIRE(hist_hc[VoxelClass::lesion] == 0);
    auto hist_ms = class_histogram(ms);
    REQUIRE(hist_ms[VoxelClass::healthy_wm] == 120);
    REQUIRE(hist_ms[VoxelClass::gm_like] == 40);
    REQUIRE(hist_ms[VoxelClass::lesion] == 40);

    CohortConfig hc_only = cfg;
    hc_only.subject_mix = SubjectMix::hc_only;
    REQUIRE(make_subject(hc_only, 1).subject_kind == "hc");
    CohortConfig ms_only = cfg;
    ms_only.subject_mix = SubjectMix::ms_only;
    REQUIRE(make_subject(ms_only, 0).subject_kind == "ms");
}

TEST_CASE("subject generation is deterministic and self-consistent") {
    const CohortConfig cfg = tiny_cohort_config();
    const EchoCube a = make_subject(cfg, 0);
    const EchoCube b = make_subject(cfg, 0);
    REQUIRE(a.signals == b.signals);
    REQUIRE(a.signals != make_subject(cfg, 1).signals);

    REQUIRE(a.dims == choose_dims(cfg.voxels_per_subject));
    REQUIRE(a.truth.size() == a.n_voxels());
    for (const auto& t : a.truth) {
        REQUIRE(t.flip_deg >= cfg.flip_lo);
        REQUIRE(t.flip_deg <= cfg.flip_hi);
    }
    for (double s : a.signals) REQUIRE(s > 0.0);

    // stored curve equals a forward simulation from the stored truth
    const T2Grid grid = make_t2_grid();
    EpgParams params;
    params.t1 = cfg.t1;
    params.te1 = cfg.te1;
    params.echo_spacing = cfg.te1;
    params.n_echoes = cfg.n_echoes;
    for (std::size_t v : {std::size_t{0}, std::size_t{57}, std::size_t{199}}) {
        params.flip_angle = a.truth[v].flip_deg;
        const Eigen::VectorXd curve =
            build_basis_fast(grid, params) * (truth_amplitudes(a.truth[v], grid) * a.truth[v].scale);
        for (int e = 0; e < cfg.n_echoes; ++e)
            REQUIRE(a.signals[v * static_cast<std::size_t>(cfg.n_echoes) + e] ==
                    Catch::Approx(curve[e]).epsilon(1e-13));
    }

    REQUIRE_THROWS_AS(make_subject(cfg, 2), ParameterError);
    REQUIRE_THROWS_AS(make_subject(cfg, -1), ParameterError);
}

TEST_CASE("cohort assembly is worker-invariant") {
    CohortConfig cfg = tiny_cohort_config();
    cfg.n_subjects = 3;
    cfg.noise_sd = 4.0;
    const std::vector<EchoCube> one = make_cohort(cfg, 1);
    const std::vector<EchoCube> four = make_cohort(cfg, 4);
    REQUIRE(one.size() == 3);
    for (std::size_t s = 0; s < 3; ++s) {
        REQUIRE(one[s].signals == four[s].signals);
        REQUIRE(one[s].subject_kind == four[s].subject_kind);
    }
}

TEST_CASE("cohort configuration validation") {
    CohortConfig cfg = tiny_cohort_config();
    cfg.frac_healthy = 0.5; // sums to 0.8
    REQUIRE_THROWS_AS(cfg.validate(), ParameterError);
    cfg = tiny_cohort_config();
    cfg.frac_healthy = 0.05;
    cfg.frac_gm = 0.85;
    REQUIRE_THROWS_AS(cfg.validate(), ParameterError); // healthy < lesion
    cfg = tiny_cohort_config();
    cfg.flip_hi = 190.0;
    REQUIRE_THROWS_AS(cfg.validate(), ParameterError);
    cfg = tiny_cohort_config();
    cfg.noise_sd = -1.0;
    REQUIRE_THROWS_AS(cfg.validate(), ParameterError);
    REQUIRE_THROWS_AS(noise_model_from_string("poisson"), ParameterError);
    REQUIRE_THROWS_AS(subject_mix_from_string("both"), ParameterError);
    REQUIRE(noise_model_from_string("rician") == NoiseModel::rician);
    REQUIRE(to_string(SubjectMix::ms_only) == "ms_only");
}

TEST_CASE("noise injection: zero sd is the identity") {
    const EchoCube cube = make_subject(tiny_cohort_config(), 0);
    const EchoCube same = add_noise(cube, 0.0, NoiseModel::rician, 77);
    REQUIRE(same.signals == cube.signals);
    REQUIRE_THROWS_AS(add_noise(cube, -0.5, NoiseModel::rician, 1), ParameterError);
}

TEST_CASE("rician noise on zero signal has the Rayleigh mean") {
    EchoCube zero;
    zero.dims = {50, 50, 10};
    zero.n_echoes = 40;
    zero.te1_ms = 10.0;
    zero.esp_ms = 10.0;
    zero.signals.assign(zero.n_voxels() * 40, 0.0);
    zero.mask.assign(zero.n_voxels(), 1);

    const EchoCube noisy = add_noise(zero, 1.0, NoiseModel::rician, 123);
    double mean = 0.0;
    for (double s : noisy.signals) {
        REQUIRE(s >= 0.0);
        mean += s;
    }
    mean /= static_cast<double>(noisy.signals.size()); // 1e6 draws
    REQUIRE(mean == Catch::Approx(std::sqrt(M_PI / 2.0)).margin(0.005));

    // determinism in the seed
    const EchoCube again = add_noise(zero, 1.0, NoiseModel::rician, 123);
    REQUIRE(again.signals == noisy.signals);
}

TEST_CASE("gaussian noise has the configured spread") {
    EchoCube flat;
    flat.dims = {40, 25, 10};
    flat.n_echoes = 10;
    flat.te1_ms = 10.0;
    flat.esp_ms = 10.0;
    flat.signals.assign(flat.n_voxels() * 10, 100.0);
    flat.mask.assign(flat.n_voxels(), 1);

    const EchoCube noisy = add_noise(flat, 3.0, NoiseModel::gaussian, 5);
    double mean = 0.0, var = 0.0;
    for (double s : noisy.signals) mean += s - 100.0;
    mean /= static_cast<double>(noisy.signals.size());
    for (double s : noisy.signals) var += (s - 100.0 - mean) * (s - 100.0 - mean);
    var /= static_cast<double>(noisy.signals.size() - 1);
    REQUIRE(mean == Catch::Approx(0.0).margin(0.02));
    REQUIRE(std::sqrt(var) == Catch::Approx(3.0).margin(0.02));
}

TEST_CASE("tukey window limits: rectangular and Hann") {
    const auto rect = detail::tukey_window(9, 0.0);
    for (double w : rect) REQUIRE(w == 1.0);
    const auto hann = detail::tukey_window(9, 1.0);
    for (int i = 0; i < 9; ++i)
        REQUIRE(hann[static_cast<std::size_t>(i)] ==
                Catch::Approx(0.5 * (1.0 - std::cos(2.0 * M_PI * i / 8.0))).margin(1e-12));
    const auto mid = detail::tukey_window(11, 0.5);
    REQUIRE(mid[5] == 1.0);                 // flat center
    REQUIRE(mid[0] == Catch::Approx(0.0).margin(1e-12)); // tapered ends
    REQUIRE(mid[2] < 1.0);
}

TEST_CASE("apodization with coefficient zero is the identity") {
    const EchoCube cube = make_subject(tiny_cohort_config(), 0);
    const EchoCube out = tukey_apodize(cube, 0.0);
    for (std::size_t i = 0; i < cube.signals.size(); ++i)
        REQUIRE(out.signals[i] == Catch::Approx(cube.signals[i]).epsilon(1e-10));
    REQUIRE_THROWS_AS(tukey_apodize(cube, -0.1), ParameterError);
    REQUIRE_THROWS_AS(tukey_apodize(cube, 1.2), ParameterError);
}

TEST_CASE("apodizing a delta image matches direct circular convolution") {
    EchoCube cube;
    cube.dims = {5, 4, 3};
    cube.n_echoes = 1;
    cube.te1_ms = 10.0;
    cube.esp_ms = 10.0;
    cube.signals.assign(cube.n_voxels(), 0.0);
    cube.mask.assign(cube.n_voxels(), 1);
    const int px = 1, py = 2, pz = 0;
    cube.signals[static_cast<std::size_t>(px + 5 * (py + 4 * pz))] = 1.0;

    const double coeff = 0.33;
    const EchoCube out = tukey_apodize(cube, coeff);

    const auto kx = taper_kernel(5, coeff);
    const auto ky = taper_kernel(4, coeff);
    const auto kz = taper_kernel(3, coeff);
    for (int z = 0; z < 3; ++z)
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 5; ++x) {
                const std::complex<double> expect =
                    kx[static_cast<std::size_t>(((x - px) % 5 + 5) % 5)] *
                    ky[static_cast<std::size_t>(((y - py) % 4 + 4) % 4)] *
                    kz[static_cast<std::size_t>(((z - pz) % 3 + 3) % 3)];
                REQUIRE(std::abs(expect.imag()) < 1e-12); // symmetric taper → real kernel
                const double got = out.signals[static_cast<std::size_t>(x + 5 * (y + 4 * z))];
                REQUIRE(got == Catch::Approx(std::abs(expect)).margin(1e-8));
            }
}

TEST_CASE("apodization preserves the image mean and smooths") {
    // noiseless: voxel-to-voxel truth variation is the spatial signal, and
    // the smoothed image stays positive so the magnitude step is a no-op
    const EchoCube cube = make_subject(tiny_cohort_config(), 0);
    const EchoCube out = tukey_apodize(cube, 0.33);

    for (int e = 0; e < cube.n_echoes; ++e) {
        double min = 0.0, mout = 0.0, vin = 0.0, vout = 0.0;
        const std::size_t nv = cube.n_voxels();
        for (std::size_t v = 0; v < nv; ++v) {
            REQUIRE(out.signals[v * cube.n_echoes + e] > 0.0);
            min += cube.signals[v * cube.n_echoes + e];
            mout += out.signals[v * cube.n_echoes + e];
        }
        min /= static_cast<double>(nv);
        mout /= static_cast<double>(nv);
        for (std::size_t v = 0; v < nv; ++v) {
            vin += std::pow(cube.signals[v * cube.n_echoes + e] - min, 2);
            vout += std::pow(out.signals[v * cube.n_echoes + e] - mout, 2);
        }
        // the DC bin carries full taper weight, so the mean passes through
        REQUIRE(mout == Catch::Approx(min).epsilon(1e-9));
        REQUIRE(vout < vin);
    }
}

TEST_CASE("paper split proportions at full cohort size") {
    const SubjectSplit split = split_subjects(22, 4);
    REQUIRE(split.train.size() == 12);
    REQUIRE(split.val.size() == 2);
    REQUIRE(split.test.size() == 8);
    REQUIRE_NOTHROW(assert_partition(split, 22));

    // class balance: alternating hc/ms yields 6+6 train, 1+1 val, 4+4 test
    int train_hc = 0;
    for (int s : split.train) train_hc += (s % 2 == 0) ? 1 : 0;
    REQUIRE(train_hc == 6);
    int test_hc = 0;
    for (int s : split.test) test_hc += (s % 2 == 0) ? 1 : 0;
    REQUIRE(test_hc == 4);

    // deterministic in the seed
    const SubjectSplit again = split_subjects(22, 4);
    REQUIRE(again.train == split.train);
    REQUIRE(again.test == split.test);
}

TEST_CASE("split stays feasible at small cohort sizes") {
    for (int n : {3, 4, 5, 8, 10}) {
        const SubjectSplit s = split_subjects(n, 9);
        REQUIRE_FALSE(s.train.empty());
        REQUIRE_FALSE(s.val.empty());
        REQUIRE_FALSE(s.test.empty());
        REQUIRE_NOTHROW(assert_partition(s, n));
    }
    REQUIRE_THROWS_AS(split_subjects(2, 1), ParameterError);

    SubjectSplit broken = split_subjects(8, 1);
    broken.val.push_back(broken.train[0]); // duplicate
    REQUIRE_THROWS_AS(assert_partition(broken, 8), ParameterError);
}

TEST_CASE("k-fold split is disjoint and balanced") {
    std::vector<std::string> kinds;
    for (int i = 0; i < 22; ++i) kinds.push_back(i % 2 == 0 ? "hc" : "ms");
    const auto folds = split_kfold(kinds, 4, 2);
    REQUIRE(folds.size() == 4);
    std::vector<int> seen(22, 0);
    for (const auto& f : folds) {
        REQUIRE(f.size() >= 5);
        REQUIRE(f.size() <= 6);
        for (int s : f) ++seen[static_cast<std::size_t>(s)];
    }
    for (int c : seen) REQUIRE(c == 1);
    REQUIRE_THROWS_AS(split_kfold(kinds, 1, 2), ParameterError);
    REQUIRE_THROWS_AS(split_kfold(std::vector<std::string>{"a", "b"}, 3, 2), ParameterError);
}
