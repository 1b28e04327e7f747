#include <catch2/catch_amalgamated.hpp>

#include <mwnet/mwnet.hpp>

#include <cmath>
#include <cstring>
#include <random>

using namespace mwnet;

namespace {

Dataset synthetic_dataset(int n, int in_dim, std::uint64_t seed) {
    Dataset d;
    d.inputs.resize(in_dim, n);
    d.labels.resize(1, n);
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> g(0.0f, 1.0f);
    for (int c = 0; c < n; ++c) {
        float s = 0.0f;
        for (int r = 0; r < in_dim; ++r) {
            d.inputs(r, c) = g(rng);
            if (r < 4) s += d.inputs(r, c);
        }
        d.labels(0, c) = 0.1f + 0.05f * s; // smooth learnable target
    }
    return d;
}

// 3x2x1 cube with simple positive decays; voxel 3 gets a zero first echo.
EchoCube small_cube(int n_echoes = 6) {
    EchoCube cube;
    cube.dims = {3, 2, 1};
    cube.n_echoes = n_echoes;
    cube.te1_ms = 10.0;
    cube.esp_ms = 10.0;
    cube.signals.assign(cube.n_voxels() * static_cast<std::size_t>(n_echoes), 0.0);
    cube.mask.assign(cube.n_voxels(), 1);
    for (std::size_t v = 0; v < cube.n_voxels(); ++v)
        for (int e = 0; e < n_echoes; ++e)
            cube.signals[v * n_echoes + e] =
                (100.0 + 10.0 * static_cast<double>(v)) * std::exp(-0.08 * (e + 1));
    cube.mask[1] = 0;
    for (int e = 0; e < n_echoes; ++e) cube.signals[3 * n_echoes + e] = 0.0;
    return cube;
}

bool same_doubles(const std::vector<double>& a, const std::vector<double>& b) {
    return a.size() == b.size() &&
           std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

} // namespace

TEST_CASE("learning rate staircase hits the published values") {
    const TrainConfig cfg = TrainConfig::paper_profile();
    REQUIRE(lr_at(0, cfg) == Catch::Approx(1e-3).epsilon(1e-12));
    REQUIRE(lr_at(899, cfg) == Catch::Approx(1e-3).epsilon(1e-12));
    REQUIRE(lr_at(900, cfg) == Catch::Approx(1e-4).epsilon(1e-12));
    REQUIRE(lr_at(1200, cfg) == Catch::Approx(1e-5).epsilon(1e-12));
    REQUIRE(lr_at(1500, cfg) == Catch::Approx(1e-6).epsilon(1e-12));
    REQUIRE(lr_at(1799, cfg) == Catch::Approx(1e-6).epsilon(1e-12));
    REQUIRE(lr_at(1800, cfg) == Catch::Approx(1e-7).epsilon(1e-12));
    for (int e = 1; e <= 2000; ++e) REQUIRE(lr_at(e, cfg) <= lr_at(e - 1, cfg));
    REQUIRE_THROWS_AS(lr_at(-1, cfg), ParameterError);

    const TrainConfig fast = TrainConfig::fast_profile();
    REQUIRE(fast.lr_drop_epochs == std::vector<int>{90, 120, 150, 180});
    REQUIRE(lr_at(90, fast) == Catch::Approx(1e-4).epsilon(1e-12));
    REQUIRE(lr_at(180, fast) == Catch::Approx(1e-7).epsilon(1e-12));
}

TEST_CASE("batch size grows by one per epoch up to the cap") {
    const TrainConfig cfg = TrainConfig::paper_profile();
    REQUIRE(batch_size_at(0, cfg) == 2);
    REQUIRE(batch_size_at(1, cfg) == 3);
    REQUIRE(batch_size_at(2000, cfg) == 2002);
    REQUIRE(batch_size_at(5000, cfg) == 2002);
    for (int e = 1; e <= 2100; ++e) {
        REQUIRE(batch_size_at(e, cfg) >= batch_size_at(e - 1, cfg));
        REQUIRE(batch_size_at(e, cfg) <= cfg.batch_cap);
    }
    REQUIRE_THROWS_AS(batch_size_at(-3, cfg), ParameterError);

    const TrainConfig fast = TrainConfig::fast_profile();
    REQUIRE(batch_size_at(200, fast) == 202);
    REQUIRE(batch_size_at(1000, fast) == 202);
}

TEST_CASE("training configuration validation") {
    TrainConfig cfg = TrainConfig::paper_profile();
    REQUIRE_NOTHROW(cfg.validate());
    cfg.base_lr = 0.0;
    REQUIRE_THROWS_AS(cfg.validate(), ParameterError);
    cfg = TrainConfig::paper_profile();
    cfg.lr_drop_epochs = {900, 900};
    REQUIRE_THROWS_AS(cfg.validate(), ParameterError);
    cfg = TrainConfig::paper_profile();
    cfg.lr_drop_factor = 1.5;
    REQUIRE_THROWS_AS(cfg.validate(), ParameterError);
    cfg = TrainConfig::paper_profile();
    cfg.batch_cap = 1; // below batch_start
    REQUIRE_THROWS_AS(cfg.validate(), ParameterError);
    cfg = TrainConfig::paper_profile();
    cfg.early_stop_patience = 0;
    REQUIRE_THROWS_AS(cfg.validate(), ParameterError);

    const std::string fp = TrainConfig::fast_profile(7).fingerprint();
    REQUIRE(fp.find("fast") != std::string::npos);
    REQUIRE(fp.find("seed=7") != std::string::npos);
}

TEST_CASE("input normalization pins the first echo to one") {
    Eigen::VectorXd y(5);
    y << 4.0, 3.0, 2.2, 1.5, 0.9;
    const Eigen::VectorXd n = normalize_input(y);
    REQUIRE(n[0] == 1.0);
    REQUIRE(n[2] == Catch::Approx(0.55).epsilon(1e-15));

    // power-of-two rescaling cannot move any quotient
    const Eigen::VectorXd n4 = normalize_input(Eigen::VectorXd(4.0 * y));
    REQUIRE(n4 == n);
    // arbitrary positive rescaling is exact to the float grid used downstream
    const Eigen::VectorXd n3 = normalize_input(Eigen::VectorXd(3.0 * y));
    REQUIRE(n3.cast<float>() == n.cast<float>());

    Eigen::VectorXd bad = y;
    bad[0] = 0.0;
    REQUIRE_THROWS_AS(normalize_input(bad), DegenerateDataError);
    bad[0] = -1.0;
    REQUIRE_THROWS_AS(normalize_input(bad), DegenerateDataError);
    bad[0] = std::numeric_limits<double>::quiet_NaN();
    REQUIRE_THROWS_AS(normalize_input(bad), ParameterError);
    REQUIRE_THROWS_AS(normalize_input(Eigen::VectorXd(0)), ParameterError);
}

TEST_CASE("label conventions per head") {
    auto grid = std::make_shared<T2Grid>(make_t2_grid(8));
    FitResult fit;
    fit.mwf = 0.12;
    fit.gmt2 = 85.0;
    fit.distribution = T2Distribution{grid, Eigen::VectorXd::Zero(8)};
    fit.distribution.amplitudes << 0.0, 1.0, 2.0, 3.0, 0.0, 0.0, 0.5, 0.0;

    REQUIRE(make_labels(fit, HeadKind::scalar_mwf)[0] == 0.12);
    REQUIRE(make_labels(fit, HeadKind::scalar_gmt2)[0] == Catch::Approx(0.85));
    const Eigen::VectorXd dist = make_labels(fit, HeadKind::distribution);
    REQUIRE(dist.size() == 8);
    REQUIRE(dist.sum() == Catch::Approx(15.0).epsilon(1e-13));
    REQUIRE(dist[3] / dist[1] == Catch::Approx(3.0).epsilon(1e-13));

    fit.mwf = std::numeric_limits<double>::quiet_NaN();
    REQUIRE_THROWS_AS(make_labels(fit, HeadKind::scalar_mwf), DegenerateDataError);
    fit.distribution.amplitudes.setZero();
    REQUIRE_THROWS_AS(make_labels(fit, HeadKind::distribution), DegenerateDataError);
}

TEST_CASE("dataset assembly skips unusable voxels") {
    const EchoCube cube = small_cube();
    const std::size_t nv = cube.n_voxels();

    FitVolumeResult fit;
    fit.dims = cube.dims;
    fit.n_basis = 5;
    fit.mwf_map.assign(nv, 0.10);
    fit.gmt2_map.assign(nv, 82.0);
    fit.flip_map.assign(nv, 160.0);
    fit.chi2_map.assign(nv, 1.0);
    fit.chi2_min_map.assign(nv, 0.9);
    fit.mu_map.assign(nv, 1e-3);
    fit.status.assign(nv, static_cast<std::uint8_t>(FitStatus::converged));
    fit.distributions.assign(nv * 5, 1.0f);
    fit.status[1] = kStatusOutsideMask;       // matches cube.mask[1] == 0
    fit.status[2] = kStatusInvalidInput;      // masked but unusable fit
    fit.status[3] = kStatusInvalidInput;      // zero first echo voxel
    fit.mwf_map[5] = std::numeric_limits<double>::quiet_NaN();
    fit.mwf_map[4] = 0.22;

    const DatasetBuild mwf_build = build_dataset(cube, fit, HeadKind::scalar_mwf);
    REQUIRE(mwf_build.used == 2); // voxels 0 and 4
    REQUIRE(mwf_build.skipped == 3);
    REQUIRE(mwf_build.data.inputs.rows() == cube.n_echoes);
    REQUIRE(mwf_build.data.inputs(0, 0) == 1.0f);
    REQUIRE(mwf_build.data.inputs(0, 1) == 1.0f);
    REQUIRE(mwf_build.data.labels(0, 0) == 0.10f);
    REQUIRE(mwf_build.data.labels(0, 1) == 0.22f);
    REQUIRE_NOTHROW(mwf_build.data.validate());

    const DatasetBuild gmt2_build = build_dataset(cube, fit, HeadKind::scalar_gmt2);
    REQUIRE(gmt2_build.used == 3); // NaN only hits the MWF head
    REQUIRE(gmt2_build.data.labels(0, 0) == 0.82f);

    fit.distributions[0 * 5 + 2] = 4.0f;
    for (int j = 0; j < 5; ++j) fit.distributions[5 * 5 + j] = 0.0f; // zero-total row
    const DatasetBuild dist_build = build_dataset(cube, fit, HeadKind::distribution);
    REQUIRE(dist_build.used == 2);
    REQUIRE(dist_build.data.labels.rows() == 5);
    float sum0 = 0.0f;
    for (int j = 0; j < 5; ++j) sum0 += dist_build.data.labels(j, 0);
    REQUIRE(sum0 == Catch::Approx(15.0).epsilon(1e-5));

    FitVolumeResult short_fit = fit;
    short_fit.status.pop_back();
    REQUIRE_THROWS_AS(build_dataset(cube, short_fit, HeadKind::scalar_mwf), DimensionError);
}

TEST_CASE("chunked evaluation matches the direct mean squared error") {
    const Dataset set = synthetic_dataset(37, 6, 21);
    const MlpNet<float> net = make_mlp<float>({6, 5, 1}, HeadKind::scalar_mwf, 3);
    const Eigen::MatrixXf out = forward_raw<float>(net, set.inputs);
    const double direct =
        (out - set.labels).cast<double>().squaredNorm() / (37.0 * 1.0);
    REQUIRE(eval_mse(net, set) == Catch::Approx(direct).epsilon(1e-12));
    // narrower chunks change the float GEMM panel shape, so agreement is at
    // single-precision level, while a repeated identical call is bitwise
    REQUIRE(eval_mse(net, set, 5) == Catch::Approx(direct).epsilon(1e-6));
    REQUIRE(eval_mse(net, set, 5) == eval_mse(net, set, 5));
    REQUIRE_THROWS_AS(eval_mse(net, Dataset{}), ParameterError);
}

TEST_CASE("training is bitwise deterministic in the seed") {
    const Dataset tr = synthetic_dataset(40, 32, 100);
    const Dataset va = synthetic_dataset(12, 32, 101);
    TrainConfig cfg = TrainConfig::fast_profile(5);
    cfg.max_epochs = 3;

    const TrainResult a = train(tr, va, cfg, HeadKind::scalar_mwf);
    const TrainResult b = train(tr, va, cfg, HeadKind::scalar_mwf);
    REQUIRE(a.log.size() == b.log.size());
    for (std::size_t e = 0; e < a.log.size(); ++e) {
        REQUIRE(a.log[e].train_mse == b.log[e].train_mse);
        REQUIRE(a.log[e].val_mse == b.log[e].val_mse);
        REQUIRE(a.log[e].lr == b.log[e].lr);
        REQUIRE(a.log[e].batch_size == b.log[e].batch_size);
    }
    for (int l = 0; l < a.model.n_layers(); ++l) {
        REQUIRE(a.model.weights[l] == b.model.weights[l]);
        REQUIRE(a.model.biases[l] == b.model.biases[l]);
    }
    REQUIRE(a.steps == b.steps);

    TrainConfig other = cfg;
    other.seed = 6;
    const TrainResult c = train(tr, va, other, HeadKind::scalar_mwf);
    REQUIRE(a.model.weights[0] != c.model.weights[0]);

    // schedule columns in the log match the closed-form schedules
    for (const auto& e : a.log) {
        REQUIRE(e.lr == lr_at(e.epoch, cfg));
        REQUIRE(e.batch_size == batch_size_at(e.epoch, cfg));
    }

    const std::string csv = training_log_csv(a.log);
    REQUIRE(csv.rfind("epoch,lr,batch,train_mse,val_mse\n", 0) == 0);
    REQUIRE(std::count(csv.begin(), csv.end(), '\n') == 1 + static_cast<long>(a.log.size()));
}

TEST_CASE("training loss decreases over twenty frozen-batch epochs") {
    const Dataset tr = synthetic_dataset(60, 32, 200);
    const Dataset va = synthetic_dataset(16, 32, 201);
    TrainConfig cfg = TrainConfig::fast_profile(9);
    cfg.batch_start = 2;
    cfg.batch_cap = 2; // freeze the batch so only learning moves the loss
    cfg.max_epochs = 21;

    const TrainResult r = train(tr, va, cfg, HeadKind::scalar_mwf);
    REQUIRE(r.log.size() == 21);
    REQUIRE(r.log[20].train_mse < r.log[0].train_mse);
    REQUIRE(r.best_epoch >= 0);
    REQUIRE(r.best_val_mse == eval_mse(r.model, va)); // best weights restored
    double min_val = std::numeric_limits<double>::infinity();
    for (const auto& e : r.log) min_val = std::min(min_val, e.val_mse);
    REQUIRE(r.best_val_mse == min_val);
    REQUIRE(r.model.profile_fingerprint == cfg.fingerprint());
}

TEST_CASE("training rejects malformed sets") {
    const Dataset tr = synthetic_dataset(10, 32, 1);
    const Dataset va = synthetic_dataset(4, 32, 2);
    TrainConfig cfg = TrainConfig::fast_profile();
    cfg.max_epochs = 1;
    REQUIRE_THROWS_AS(train(Dataset{}, va, cfg, HeadKind::scalar_mwf), ParameterError);
    REQUIRE_THROWS_AS(train(tr, Dataset{}, cfg, HeadKind::scalar_mwf), ParameterError);

    Dataset bad_dim = tr;
    bad_dim.inputs.conservativeResize(16, bad_dim.inputs.cols());
    REQUIRE_THROWS_AS(train(bad_dim, va, cfg, HeadKind::scalar_mwf), DimensionError);
    Dataset bad_label = tr;
    bad_label.labels.conservativeResize(3, bad_label.labels.cols());
    REQUIRE_THROWS_AS(train(bad_label, va, cfg, HeadKind::scalar_mwf), DimensionError);
    Dataset nonfinite = tr;
    nonfinite.inputs(0, 0) = std::numeric_limits<float>::quiet_NaN();
    REQUIRE_THROWS_AS(train(nonfinite, va, cfg, HeadKind::scalar_mwf), ParameterError);
}

TEST_CASE("volume inference honors mask, skips, and head conventions") {
    const EchoCube cube = small_cube();
    const MlpNet<float> net = make_mlp<float>({6, 8, 1}, HeadKind::scalar_mwf, 11);

    const InferResult r = infer_volume(net, cube);
    REQUIRE(r.dims == cube.dims);
    REQUIRE(r.skipped_nonpositive == 1); // the zeroed voxel
    REQUIRE(r.valid[0] == 1);
    REQUIRE(r.valid[1] == 0); // outside mask
    REQUIRE(r.valid[3] == 0); // zero first echo
    REQUIRE(std::isnan(r.mwf_map[1]));
    REQUIRE(std::isnan(r.mwf_map[3]));

    // scalar head output equals a hand-run forward pass on the float inputs
    Eigen::MatrixXf x(6, 1);
    const auto y = cube.voxel_curve(0);
    for (int e = 0; e < 6; ++e) x(e, 0) = static_cast<float>(y[e] / y[0]);
    const float expect = forward_raw<float>(net, x)(0, 0);
    REQUIRE(r.mwf_map[0] == static_cast<double>(expect));

    MlpNet<float> gnet = net;
    gnet.head_kind = HeadKind::scalar_gmt2;
    const InferResult g = infer_volume(gnet, cube);
    REQUIRE(g.gmt2_map[0] == static_cast<double>(expect) * 100.0);
    REQUIRE(std::isnan(g.mwf_map[0]));

    const MapVolume maps = r.to_maps(cube.mask);
    REQUIRE(maps.has_field("mwf"));
    REQUIRE_FALSE(maps.has_field("gmt2"));
    REQUIRE(g.to_maps(cube.mask).has_field("gmt2"));

    REQUIRE_THROWS_AS(infer_volume(net, small_cube(9)), DimensionError);
}

TEST_CASE("volume inference is chunk- and worker-invariant") {
    EchoCube cube = small_cube();
    cube.dims = {7, 1, 1};
    cube.signals.resize(7 * 6);
    cube.mask.assign(7, 1);
    for (std::size_t v = 0; v < 7; ++v)
        for (int e = 0; e < 6; ++e)
            cube.signals[v * 6 + e] = (50.0 + 3.0 * v) * std::exp(-0.1 * (e + 1) - 0.01 * v * e);

    const MlpNet<float> net = make_mlp<float>({6, 10, 1}, HeadKind::scalar_mwf, 4);
    InferConfig narrow;
    narrow.chunk = 3;
    const InferResult a = infer_volume(net, cube, 1);
    const InferResult a2 = infer_volume(net, cube, 1);
    const InferResult b = infer_volume(net, cube, 1, narrow);
    const InferResult c = infer_volume(net, cube, 4, narrow);
    // identical call → identical bytes; different chunk or worker split
    // changes the float GEMM panels, so agreement is single-precision level
    REQUIRE(same_doubles(a.mwf_map, a2.mwf_map));
    for (std::size_t v = 0; v < 7; ++v) {
        REQUIRE(b.mwf_map[v] == Catch::Approx(a.mwf_map[v]).epsilon(1e-5));
        REQUIRE(c.mwf_map[v] == Catch::Approx(a.mwf_map[v]).epsilon(1e-5));
    }
}

TEST_CASE("distribution head inference clamps and derives window metrics") {
    const EchoCube cube = small_cube();
    MlpNet<float> net = make_mlp<float>({6, 12, 10}, HeadKind::distribution, 8);
    auto grid = std::make_shared<T2Grid>(make_t2_grid(10));
    InferConfig icfg;
    icfg.grid = grid;

    const InferResult r = infer_volume(net, cube, 1, icfg);
    REQUIRE(r.n_basis == 10);
    for (std::size_t v = 0; v < cube.n_voxels(); ++v) {
        if (!r.valid[v]) continue;
        const float* row = r.distributions.data() + v * 10;
        double total = 0.0;
        for (int j = 0; j < 10; ++j) {
            REQUIRE(row[j] >= 0.0f);
            total += row[j];
        }
        if (total > 0.0) {
            REQUIRE(r.mwf_map[v] >= 0.0);
            REQUIRE(r.mwf_map[v] <= 1.0);
        }
    }

    // zeroed network: all outputs clamp to zero, metrics become degenerate
    for (auto& w : net.weights) w.setZero();
    for (auto& b : net.biases) b.setZero();
    const InferResult z = infer_volume(net, cube, 1, icfg);
    REQUIRE(z.degenerate_outputs == 4); // every processed voxel
    REQUIRE(std::isnan(z.mwf_map[0]));
    REQUIRE(z.valid[0] == 1);

    // grid incompatible with the head width
    InferConfig badgrid;
    badgrid.grid = std::make_shared<T2Grid>(make_t2_grid(12));
    REQUIRE_THROWS_AS(infer_volume(net, cube, 1, badgrid), DimensionError);
}
