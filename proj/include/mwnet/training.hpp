#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mwnet/common.hpp"
#include "mwnet/echo_cube.hpp"
#include "mwnet/fitting.hpp"
#include "mwnet/mlp.hpp"
#include "mwnet/parallel.hpp"
#include "mwnet/t2grid.hpp"

namespace mwnet {

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TrainConfig {
    double base_lr = 1e-3;
    std::vector<int> lr_drop_epochs{900, 1200, 1500, 1800};
    double lr_drop_factor = 0.1;
    int batch_start = 2;
    int batch_cap = 2002;
    int max_epochs = 2000;
    int early_stop_patience = 50;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;
    std::uint64_t seed = 1;
    std::string profile = "paper";

    static TrainConfig paper_profile(std::uint64_t seed = 1) {
        TrainConfig c;
        c.seed = seed;
        return c;
    }

    // Every epoch constant divided by ten; same shape, desk-scale runtime.
    static TrainConfig fast_profile(std::uint64_t seed = 1) {
        TrainConfig c;
        c.lr_drop_epochs = {90, 120, 150, 180};
        c.batch_cap = 202;
        c.max_epochs = 200;
        c.profile = "fast";
        c.seed = seed;
        return c;
    }

    void validate() const {
        if (!(base_lr > 0.0)) throw ParameterError("TrainConfig: base_lr must be positive");
        for (std::size_t i = 0; i < lr_drop_epochs.size(); ++i) {
            if (lr_drop_epochs[i] < 0) throw ParameterError("TrainConfig: negative drop epoch");
            if (i > 0 && lr_drop_epochs[i] <= lr_drop_epochs[i - 1])
                throw ParameterError("TrainConfig: drop epochs must be strictly increasing");
        }
        if (!(lr_drop_factor > 0.0) || !(lr_drop_factor <= 1.0))
            throw ParameterError("TrainConfig: bad lr drop factor");
        if (batch_start < 1 || batch_cap < batch_start)
            throw ParameterError("TrainConfig: bad batch bounds");
        if (max_epochs < 1) throw ParameterError("TrainConfig: max_epochs must be >= 1");
        if (early_stop_patience < 1) throw ParameterError("TrainConfig: patience must be >= 1");
        if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0) ||
            !(adam_epsilon > 0.0))
            throw ParameterError("TrainConfig: bad optimizer constants");
    }

    std::string fingerprint() const {
        std::ostringstream os;
        os << profile << "|lr=" << base_lr << "|drops=";
        for (std::size_t i = 0; i < lr_drop_epochs.size(); ++i)
            os << (i ? "," : "") << lr_drop_epochs[i];
        os << "|batch=" << batch_start << ".." << batch_cap << "|max=" << max_epochs
           << "|patience=" << early_stop_patience << "|seed=" << seed;
        return os.str();
    }
};

inline double lr_at(int epoch, const TrainConfig& cfg) {
    if (epoch < 0) throw ParameterError("lr_at: negative epoch");
    int drops = 0;
    for (int d : cfg.lr_drop_epochs)
        if (d <= epoch) ++drops;
    return cfg.base_lr * std::pow(cfg.lr_drop_factor, drops);
}

inline int batch_size_at(int epoch, const TrainConfig& cfg) {
    if (epoch < 0) throw ParameterError("batch_size_at: negative epoch");
    const long long b = static_cast<long long>(cfg.batch_start) + epoch;
    return static_cast<int>(std::min<long long>(b, cfg.batch_cap));
}

// First-echo normalization; out[0] == 1 exactly.
inline Eigen::VectorXd normalize_input(const Eigen::Ref<const Eigen::VectorXd>& y) {
    if (y.size() < 1) throw ParameterError("normalize_input: empty curve");
    if (!y.allFinite()) throw ParameterError("normalize_input: non-finite sample");
    if (!(y[0] > 0.0)) throw DegenerateDataError("normalize_input: nonpositive first echo");
    return y / y[0];
}

// Label conventions: MWF unchanged, GMT2 divided by 100, distributions
// rescaled to sum exactly 15 (in double, so the sum holds to ~1e-14).
inline Eigen::VectorXd make_labels(const FitResult& fit, HeadKind head) {
    switch (head) {
        case HeadKind::scalar_mwf: {
            if (!std::isfinite(fit.mwf)) throw DegenerateDataError("make_labels: no MWF value");
            Eigen::VectorXd l(1);
            l[0] = fit.mwf;
            return l;
        }
        case HeadKind::scalar_gmt2: {
            if (!std::isfinite(fit.gmt2)) throw DegenerateDataError("make_labels: no GMT2 value");
            Eigen::VectorXd l(1);
            l[0] = fit.gmt2 / 100.0;
            return l;
        }
        case HeadKind::distribution: {
            const double total = fit.distribution.amplitudes.sum();
            if (!(total > 0.0))
                throw DegenerateDataError("make_labels: zero-total distribution");
            return fit.distribution.amplitudes * (15.0 / total);
        }
    }
    throw ParameterError("make_labels: bad head kind");
}

struct Dataset {
    Eigen::MatrixXf inputs; // in_dim x n
    Eigen::MatrixXf labels; // out_dim x n

    int size() const { return static_cast<int>(inputs.cols()); }

    void validate() const {
        if (inputs.cols() != labels.cols()) throw DimensionError("Dataset: column count mismatch");
        if (!inputs.allFinite() || !labels.allFinite())
            throw ParameterError("Dataset: non-finite entries");
    }
};

struct DatasetBuild {
    Dataset data;
    std::size_t used = 0;
    std::size_t skipped = 0; // degenerate inputs or labels, counted not fatal
};

// Pairs normalized decay curves with labels taken from a finished
// conventional fit of the same cube. Voxels outside the mask, with
// nonpositive first echoes, or with degenerate labels are skipped.
inline DatasetBuild build_dataset(const EchoCube& cube, const FitVolumeResult& fit,
                                  HeadKind head) {
    cube.validate();
    const std::size_t nv = cube.n_voxels();
    if (fit.status.size() != nv) throw DimensionError("build_dataset: fit/cube size mismatch");
    const int in_dim = cube.n_echoes;
    const int out_dim = head == HeadKind::distribution ? fit.n_basis : 1;

    std::vector<std::size_t> keep;
    keep.reserve(nv);
    std::size_t skipped = 0;
    for (std::size_t v = 0; v < nv; ++v) {
        if (!cube.mask[v]) continue;
        if (fit.status[v] > static_cast<std::uint8_t>(FitStatus::unregularized_degenerate)) {
            ++skipped;
            continue;
        }
        const auto y = cube.voxel_curve(v);
        if (!(y[0] > 0.0)) {
            ++skipped;
            continue;
        }
        if (head == HeadKind::scalar_mwf && !std::isfinite(fit.mwf_map[v])) {
            ++skipped;
            continue;
        }
        if (head == HeadKind::scalar_gmt2 && !std::isfinite(fit.gmt2_map[v])) {
            ++skipped;
            continue;
        }
        if (head == HeadKind::distribution) {
            const float* row = fit.distributions.data() + v * static_cast<std::size_t>(fit.n_basis);
            double total = 0.0;
            for (int j = 0; j < fit.n_basis; ++j) total += row[j];
            if (!(total > 0.0)) {
                ++skipped;
                continue;
            }
        }
        keep.push_back(v);
    }

    DatasetBuild out;
    out.skipped = skipped;
    out.used = keep.size();
    out.data.inputs.resize(in_dim, static_cast<Eigen::Index>(keep.size()));
    out.data.labels.resize(out_dim, static_cast<Eigen::Index>(keep.size()));
    for (std::size_t k = 0; k < keep.size(); ++k) {
        const std::size_t v = keep[k];
        const Eigen::VectorXd xin = normalize_input(cube.voxel_curve(v));
        out.data.inputs.col(static_cast<Eigen::Index>(k)) = xin.cast<float>();
        if (head == HeadKind::scalar_mwf) {
            out.data.labels(0, static_cast<Eigen::Index>(k)) = static_cast<float>(fit.mwf_map[v]);
        } else if (head == HeadKind::scalar_gmt2) {
            out.data.labels(0, static_cast<Eigen::Index>(k)) =
                static_cast<float>(fit.gmt2_map[v] / 100.0);
        } else {
            const float* row = fit.distributions.data() + v * static_cast<std::size_t>(fit.n_basis);
            double total = 0.0;
            for (int j = 0; j < fit.n_basis; ++j) total += row[j];
            const double scale = 15.0 / total;
            for (int j = 0; j < fit.n_basis; ++j)
                out.data.labels(j, static_cast<Eigen::Index>(k)) =
                    static_cast<float>(row[j] * scale);
        }
    }
    return out;
}

// Same pairing, but labels come from previously written map/distribution
// files instead of an in-memory fit.
inline DatasetBuild build_dataset(const EchoCube& cube, const MapVolume* maps,
                                  const DistVolume* dists, HeadKind head) {
    FitVolumeResult fit;
    fit.dims = cube.dims;
    const std::size_t nv = cube.n_voxels();
    if (head == HeadKind::distribution) {
        if (!dists) throw ParameterError("build_dataset: distribution labels require MWDIST1 input");
        if (dists->n_voxels() != nv) throw DimensionError("build_dataset: dist/cube size mismatch");
        fit.n_basis = dists->n_basis;
        fit.distributions = dists->amplitudes;
        fit.status.assign(nv, 0);
        for (std::size_t v = 0; v < nv; ++v)
            if (!dists->mask[v]) fit.status[v] = kStatusOutsideMask;
        fit.mwf_map.assign(nv, 0.0);
        fit.gmt2_map.assign(nv, 0.0);
    } else {
        if (!maps) throw ParameterError("build_dataset: scalar labels require MWMAP1 input");
        if (maps->n_voxels() != nv) throw DimensionError("build_dataset: map/cube size mismatch");
        fit.n_basis = 1;
        fit.distributions.assign(nv, 0.0f);
        fit.status = maps->status;
        fit.mwf_map = maps->field("mwf");
        fit.gmt2_map = maps->field("gmt2");
    }
    return build_dataset(cube, fit, head);
}

struct EpochLog {
    int epoch = 0;
    double lr = 0.0;
    int batch_size = 0;
    double train_mse = 0.0;
    double val_mse = 0.0;
};

struct TrainResult {
    MlpNet<float> model;
    std::vector<EpochLog> log;
    int best_epoch = -1;
    double best_val_mse = std::numeric_limits<double>::infinity();
    std::size_t steps = 0;
    double wall_seconds = 0.0;
};

// Full-set MSE in fixed chunk order (deterministic double accumulation).
inline double eval_mse(const MlpNet<float>& net, const Dataset& set, int chunk = 2048) {
    if (set.size() == 0) throw ParameterError("eval_mse: empty set");
    double acc = 0.0;
    for (int start = 0; start < set.size(); start += chunk) {
        const int b = std::min(chunk, set.size() - start);
        const Eigen::MatrixXf out = forward_raw<float>(net, set.inputs.middleCols(start, b));
        acc += (out - set.labels.middleCols(start, b)).cast<double>().squaredNorm();
    }
    return acc / (static_cast<double>(set.size()) * static_cast<double>(set.labels.rows()));
}

// Sequential minibatch optimizer with the staircase lr and growing-batch
// schedules. Single deterministic stream: weight init and per-epoch shuffles
// both derive from cfg.seed. Returns the best-validation-epoch weights.
inline TrainResult train(const Dataset& train_set, const Dataset& val_set, const TrainConfig& cfg,
                         HeadKind head) {
    cfg.validate();
    train_set.validate();
    val_set.validate();
    if (train_set.size() == 0) throw ParameterError("train: empty training set");
    if (val_set.size() == 0) throw ParameterError("train: empty validation set");

    TrainResult result;
    result.model = make_paper_mlp<float>(head, cfg.seed);
    MlpNet<float>& net = result.model;
    net.profile_fingerprint = cfg.fingerprint();
    if (train_set.inputs.rows() != net.input_dim())
        throw DimensionError("train: input dim != model input dim");
    if (train_set.labels.rows() != net.output_dim())
        throw DimensionError("train: label dim != model output dim");
    if (val_set.inputs.rows() != net.input_dim() || val_set.labels.rows() != net.output_dim())
        throw DimensionError("train: validation set shape mismatch");

    const int L = net.n_layers();
    std::vector<Eigen::MatrixXf> m_w(L), v_w(L);
    std::vector<Eigen::VectorXf> m_b(L), v_b(L);
    for (int l = 0; l < L; ++l) {
        m_w[l] = Eigen::MatrixXf::Zero(net.weights[l].rows(), net.weights[l].cols());
        v_w[l] = m_w[l];
        m_b[l] = Eigen::VectorXf::Zero(net.biases[l].size());
        v_b[l] = m_b[l];
    }

    std::mt19937_64 shuffle_rng(mix_seed(cfg.seed, 1));
    std::vector<int> perm(static_cast<std::size_t>(train_set.size()));
    std::iota(perm.begin(), perm.end(), 0);

    std::vector<Eigen::MatrixXf> best_w = net.weights;
    std::vector<Eigen::VectorXf> best_b = net.biases;

    MlpWorkspace<float> ws;
    Eigen::MatrixXf batch_x, batch_y;
    std::size_t t = 0; // optimizer step counter
    const auto wall0 = std::chrono::steady_clock::now();

    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        const double lr = lr_at(epoch, cfg);
        const int bs = batch_size_at(epoch, cfg);
        std::shuffle(perm.begin(), perm.end(), shuffle_rng);
        const int n_batches = train_set.size() / bs; // incomplete tail dropped

        batch_x.resize(train_set.inputs.rows(), bs);
        batch_y.resize(train_set.labels.rows(), bs);
        double loss_sum = 0.0;
        for (int bidx = 0; bidx < n_batches; ++bidx) {
            for (int i = 0; i < bs; ++i) {
                const int s = perm[static_cast<std::size_t>(bidx) * bs + i];
                batch_x.col(i) = train_set.inputs.col(s);
                batch_y.col(i) = train_set.labels.col(s);
            }
            forward_train<float>(net, batch_x, ws);
            const double loss = mse_loss<float>(ws.out, batch_y);
            if (!std::isfinite(loss))
                throw TrainingError("train: non-finite loss at epoch " + std::to_string(epoch) +
                                    ", batch " + std::to_string(bidx));
            loss_sum += loss;
            backward<float>(net, batch_y, ws);

            ++t;
            const float c1 = static_cast<float>(1.0 - std::pow(cfg.adam_beta1, static_cast<double>(t)));
            const float c2 = static_cast<float>(1.0 - std::pow(cfg.adam_beta2, static_cast<double>(t)));
            const float b1 = static_cast<float>(cfg.adam_beta1);
            const float b2 = static_cast<float>(cfg.adam_beta2);
            const float eps = static_cast<float>(cfg.adam_epsilon);
            const float flr = static_cast<float>(lr);
            for (int l = 0; l < L; ++l) {
                m_w[l] = b1 * m_w[l] + (1.0f - b1) * ws.grad_w[l];
                v_w[l].array() = b2 * v_w[l].array() + (1.0f - b2) * ws.grad_w[l].array().square();
                net.weights[l].array() -=
                    flr * (m_w[l].array() / c1) / ((v_w[l].array() / c2).sqrt() + eps);
                m_b[l] = b1 * m_b[l] + (1.0f - b1) * ws.grad_b[l];
                v_b[l].array() = b2 * v_b[l].array() + (1.0f - b2) * ws.grad_b[l].array().square();
                net.biases[l].array() -=
                    flr * (m_b[l].array() / c1) / ((v_b[l].array() / c2).sqrt() + eps);
            }
        }
        result.steps += static_cast<std::size_t>(n_batches);

        const double train_mse =
            n_batches > 0 ? loss_sum / n_batches : std::numeric_limits<double>::quiet_NaN();
        const double val_mse = eval_mse(net, val_set);
        if (!std::isfinite(val_mse))
            throw TrainingError("train: non-finite validation loss at epoch " +
                                std::to_string(epoch));
        result.log.push_back({epoch, lr, bs, train_mse, val_mse});

        if (val_mse < result.best_val_mse) {
            result.best_val_mse = val_mse;
            result.best_epoch = epoch;
            best_w = net.weights;
            best_b = net.biases;
        } else if (epoch - result.best_epoch >= cfg.early_stop_patience) {
            break;
        }
    }
    net.weights = std::move(best_w);
    net.biases = std::move(best_b);
    result.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();
    return result;
}

inline std::string training_log_csv(const std::vector<EpochLog>& log) {
    std::ostringstream os;
    os.precision(10);
    os << "epoch,lr,batch,train_mse,val_mse\n";
    for (const auto& e : log)
        os << e.epoch << ',' << e.lr << ',' << e.batch_size << ',' << e.train_mse << ','
           << e.val_mse << '\n';
    return os.str();
}

// Central-difference check of backward() on randomly chosen parameters.
// The relative-error denominator is floored so parameters with near-zero
// gradients (where FD noise dominates) do not produce spurious failures;
// genuine sign or scale bugs still surface on the well-conditioned majority.
inline double gradient_check(const MlpNet<double>& net, const Eigen::VectorXd& input,
                             const Eigen::VectorXd& label, int n_params = 200, double step = 1e-5,
                             std::uint64_t seed = 99) {
    net.validate();
    if (input.size() != net.input_dim() || label.size() != net.output_dim())
        throw DimensionError("gradient_check: sample shape mismatch");
    MlpNet<double> work = net;
    MlpWorkspace<double> ws;
    Eigen::MatrixXd x = input, y = label;
    forward_train<double>(work, x, ws);
    backward<double>(work, y, ws);
    const std::vector<Eigen::MatrixXd> grad_w = ws.grad_w;
    const std::vector<Eigen::VectorXd> grad_b = ws.grad_b;

    std::size_t total = 0;
    for (int l = 0; l < net.n_layers(); ++l)
        total += static_cast<std::size_t>(net.weights[l].size()) +
                 static_cast<std::size_t>(net.biases[l].size());

    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, total - 1);
    double max_rel = 0.0;
    for (int k = 0; k < n_params; ++k) {
        std::size_t idx = pick(rng);
        double* param = nullptr;
        double analytic = 0.0;
        for (int l = 0; l < net.n_layers() && !param; ++l) {
            const std::size_t wsize = static_cast<std::size_t>(work.weights[l].size());
            if (idx < wsize) {
                param = work.weights[l].data() + idx;
                analytic = grad_w[l].data()[idx];
                break;
            }
            idx -= wsize;
            const std::size_t bsize = static_cast<std::size_t>(work.biases[l].size());
            if (idx < bsize) {
                param = work.biases[l].data() + idx;
                analytic = grad_b[l].data()[idx];
                break;
            }
            idx -= bsize;
        }
        const double saved = *param;
        *param = saved + step;
        const double lp = mse_loss<double>(forward_train<double>(work, x, ws), y);
        *param = saved - step;
        const double lm = mse_loss<double>(forward_train<double>(work, x, ws), y);
        *param = saved;
        const double numeric = (lp - lm) / (2.0 * step);
        const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-4});
        max_rel = std::max(max_rel, std::abs(analytic - numeric) / denom);
    }
    return max_rel;
}

struct InferConfig {
    std::shared_ptr<const T2Grid> grid; // defaults to log grid sized to the head
    MetricWindows windows{};
    // Voxels per forward pass. Wide enough to amortize streaming the weight
    // matrices, narrow enough that the widest activation panel stays in L2.
    int chunk = 192;
};

struct InferResult {
    std::array<int, 3> dims{0, 0, 0};
    HeadKind head = HeadKind::scalar_mwf;
    int n_basis = 0;
    std::vector<double> mwf_map, gmt2_map;
    std::vector<float> distributions; // distribution head only
    std::vector<std::uint8_t> valid;
    std::size_t skipped_nonpositive = 0;
    std::size_t degenerate_outputs = 0;
    FitTiming timing;

    MapVolume to_maps(const std::vector<std::uint8_t>& mask) const {
        MapVolume m;
        m.dims = dims;
        if (head != HeadKind::scalar_gmt2) m.fields.emplace_back("mwf", mwf_map);
        if (head != HeadKind::scalar_mwf) m.fields.emplace_back("gmt2", gmt2_map);
        m.mask = mask;
        m.status = valid;
        return m;
    }
};

// Batched inference: first-echo normalization, forward pass in chunks, and
// (for the distribution head) the same window metrics the conventional fit
// uses. Voxels with nonpositive first echoes are masked out and counted.
inline InferResult infer_volume(const MlpNet<float>& model, const EchoCube& cube, int workers = 1,
                                const InferConfig& icfg = {}) {
    model.validate();
    cube.validate();
    if (cube.n_echoes != model.input_dim())
        throw DimensionError("infer_volume: cube echoes != model input dim");
    const std::size_t nv = cube.n_voxels();
    const bool dist_head = model.head_kind == HeadKind::distribution;

    std::shared_ptr<const T2Grid> grid = icfg.grid;
    if (dist_head) {
        if (!grid) grid = std::make_shared<T2Grid>(make_t2_grid(model.output_dim()));
        if (grid->size() != model.output_dim())
            throw DimensionError("infer_volume: grid size != model output dim");
    }

    InferResult out;
    out.dims = cube.dims;
    out.head = model.head_kind;
    out.n_basis = dist_head ? model.output_dim() : 0;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    out.mwf_map.assign(nv, nan);
    out.gmt2_map.assign(nv, nan);
    out.valid.assign(nv, 0);
    if (dist_head) out.distributions.assign(nv * static_cast<std::size_t>(out.n_basis), 0.0f);

    std::vector<std::size_t> voxels;
    voxels.reserve(nv);
    std::size_t skipped = 0;
    for (std::size_t v = 0; v < nv; ++v) {
        if (!cube.mask[v]) continue;
        if (!(cube.voxel_curve(v)[0] > 0.0)) {
            ++skipped;
            continue;
        }
        voxels.push_back(v);
    }
    out.skipped_nonpositive = skipped;

    std::atomic<std::size_t> degenerate_count{0};
    const auto t0 = std::chrono::steady_clock::now();
    parallel_for_ranges(voxels.size(), workers, [&](std::size_t lo, std::size_t hi) {
        Eigen::MatrixXf batch(model.input_dim(), icfg.chunk);
        T2Distribution d{grid, Eigen::VectorXd(std::max(1, out.n_basis))};
        for (std::size_t start = lo; start < hi; start += static_cast<std::size_t>(icfg.chunk)) {
            const int b = static_cast<int>(
                std::min<std::size_t>(static_cast<std::size_t>(icfg.chunk), hi - start));
            for (int i = 0; i < b; ++i) {
                const auto y = cube.voxel_curve(voxels[start + static_cast<std::size_t>(i)]);
                const double y0 = y[0];
                for (int e = 0; e < model.input_dim(); ++e)
                    batch(e, i) = static_cast<float>(y[e] / y0);
            }
            Eigen::MatrixXf pred = forward_raw<float>(model, batch.leftCols(b));
            for (int i = 0; i < b; ++i) {
                const std::size_t v = voxels[start + static_cast<std::size_t>(i)];
                out.valid[v] = 1;
                if (model.head_kind == HeadKind::scalar_mwf) {
                    out.mwf_map[v] = static_cast<double>(pred(0, i));
                } else if (model.head_kind == HeadKind::scalar_gmt2) {
                    out.gmt2_map[v] = static_cast<double>(pred(0, i)) * 100.0;
                } else {
                    float* row = out.distributions.data() + v * static_cast<std::size_t>(out.n_basis);
                    for (int j = 0; j < out.n_basis; ++j) {
                        const float a = std::max(0.0f, pred(j, i)); // inference clamp
                        row[j] = a;
                        d.amplitudes[j] = static_cast<double>(a);
                    }
                    try {
                        out.mwf_map[v] = mwf(d, icfg.windows);
                    } catch (const DegenerateDataError&) {
                        degenerate_count.fetch_add(1, std::memory_order_relaxed);
                    }
                    try {
                        out.gmt2_map[v] = gmt2_iew(d, icfg.windows);
                    } catch (const DegenerateDataError&) {
                    }
                }
            }
        }
    });
    const auto t1 = std::chrono::steady_clock::now();
    out.degenerate_outputs = degenerate_count.load();
    out.timing.voxel_count = voxels.size();
    out.timing.wall_seconds = std::chrono::duration<double>(t1 - t0).count();
    out.timing.per_voxel_mean_us =
        voxels.empty() ? 0.0
                       : out.timing.wall_seconds * 1e6 / static_cast<double>(voxels.size());
    out.timing.workers = std::max(1, workers);
    return out;
}

} // namespace mwnet
