#pragma once

#include <algorithm>
#include <chrono>
#include <fstream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "mwnet/common.hpp"
#include "mwnet/echo_cube.hpp"
#include "mwnet/fitting.hpp"
#include "mwnet/mlp.hpp"
#include "mwnet/phantom.hpp"
#include "mwnet/stats.hpp"
#include "mwnet/training.hpp"

namespace mwnet {

struct ReportTable {
    std::vector<std::string> columns;
    std::vector<std::vector<std::string>> rows;

    std::string to_csv() const {
        std::ostringstream os;
        for (std::size_t c = 0; c < columns.size(); ++c) os << (c ? "," : "") << columns[c];
        os << '\n';
        for (const auto& row : rows) {
            for (std::size_t c = 0; c < row.size(); ++c) os << (c ? "," : "") << row[c];
            os << '\n';
        }
        return os.str();
    }
};

namespace detail {

inline std::string fmt(double v, int precision = 10) {
    std::ostringstream os;
    os.precision(precision);
    os << v;
    return os.str();
}

// Map pairs concatenated across subjects so NRMSE pools every test voxel.
struct MapPool {
    std::vector<double> pred, ref;
    std::vector<std::uint8_t> mask;

    void append(const std::vector<double>& p, const std::vector<double>& r,
                const std::vector<std::uint8_t>& m) {
        if (p.size() != r.size() || p.size() != m.size())
            throw DimensionError("MapPool: size mismatch");
        pred.insert(pred.end(), p.begin(), p.end());
        ref.insert(ref.end(), r.begin(), r.end());
        mask.insert(mask.end(), m.begin(), m.end());
    }
};

// MWF recomputed from stored distribution amplitudes under given windows.
inline std::vector<double> mwf_from_distributions(const std::vector<float>& amps,
                                                  std::size_t n_voxels, int n_basis,
                                                  const T2Grid& grid,
                                                  const MetricWindows& windows) {
    if (grid.size() != n_basis) throw DimensionError("mwf_from_distributions: grid/basis mismatch");
    windows.validate();
    std::vector<double> out(n_voxels, std::numeric_limits<double>::quiet_NaN());
    for (std::size_t v = 0; v < n_voxels; ++v) {
        const float* row = amps.data() + v * static_cast<std::size_t>(n_basis);
        double total = 0.0, myelin = 0.0;
        for (int j = 0; j < n_basis; ++j) {
            const double a = row[j];
            total += a;
            if (grid.points[j] >= windows.myelin_lo && grid.points[j] <= windows.myelin_hi)
                myelin += a;
        }
        if (total > 0.0) out[v] = myelin / total;
    }
    return out;
}

inline std::vector<std::uint8_t> class_mask(const EchoCube& cube, VoxelClass cls) {
    if (cube.truth.size() != cube.n_voxels())
        throw ParameterError("class_mask: cube carries no truth");
    std::vector<std::uint8_t> m(cube.n_voxels(), 0);
    for (std::size_t v = 0; v < cube.n_voxels(); ++v)
        m[v] = cube.mask[v] && cube.truth[v].cls == cls;
    return m;
}

// Head-appropriate surrogate map paired with the conventional map.
inline void append_head_maps(MapPool& pool, HeadKind head, const InferResult& ann,
                             const FitVolumeResult& conv, const std::vector<std::uint8_t>& mask,
                             bool use_gmt2) {
    const std::vector<double>& pred = use_gmt2 ? ann.gmt2_map : ann.mwf_map;
    const std::vector<double>& ref = use_gmt2 ? conv.gmt2_map : conv.mwf_map;
    (void)head;
    pool.append(pred, ref, mask);
}

} // namespace detail

// --- benchmark -------------------------------------------------------------

inline std::string hardware_fingerprint() {
    std::string model = "unknown-cpu";
    std::ifstream in("/proc/cpuinfo");
    std::string line;
    while (std::getline(in, line)) {
        const auto pos = line.find("model name");
        if (pos != std::string::npos) {
            const auto colon = line.find(':');
            if (colon != std::string::npos) {
                model = line.substr(colon + 1);
                while (!model.empty() && model.front() == ' ') model.erase(model.begin());
            }
            break;
        }
    }
    return model + " / " + std::to_string(std::thread::hardware_concurrency()) + " hw threads";
}

struct BenchEntry {
    std::string method; // "conventional" or "surrogate"
    int workers = 1;
    std::vector<double> rep_seconds;
    double median_seconds = 0.0;
    double mean_seconds = 0.0;
};

struct BenchReport {
    std::size_t voxel_count = 0;
    int reps = 0;
    std::string hardware;
    std::vector<int> worker_counts;
    std::vector<BenchEntry> entries;
    // headline numbers at the first worker count
    double conventional_seconds = 0.0;
    double surrogate_seconds = 0.0;
    double speedup = 0.0;

    const BenchEntry& entry(const std::string& method, int workers) const {
        for (const auto& e : entries)
            if (e.method == method && e.workers == workers) return e;
        throw ParameterError("BenchReport: no entry for " + method);
    }

    std::string to_json() const {
        nlohmann::json j;
        j["voxel_count"] = voxel_count;
        j["reps"] = reps;
        j["hardware"] = hardware;
        j["worker_counts"] = worker_counts;
        j["conventional_seconds"] = conventional_seconds;
        j["surrogate_seconds"] = surrogate_seconds;
        j["speedup"] = speedup;
        j["entries"] = nlohmann::json::array();
        for (const auto& e : entries) {
            nlohmann::json je;
            je["method"] = e.method;
            je["workers"] = e.workers;
            je["rep_seconds"] = e.rep_seconds;
            je["median_seconds"] = e.median_seconds;
            je["mean_seconds"] = e.mean_seconds;
            j["entries"].push_back(je);
        }
        return j.dump(2) + "\n";
    }
};

namespace detail {

inline double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

} // namespace detail

// Times the conventional fit against surrogate inference on the same cube at
// matched worker counts. Median is the headline (robust against scheduler
// spikes); the mean and every repetition are reported alongside.
inline BenchReport benchmark(const EchoCube& cube, const FitConfig& fit_cfg,
                             const MlpNet<float>& model, const std::vector<int>& worker_counts,
                             int reps = 10) {
    if (worker_counts.empty()) throw ParameterError("benchmark: no worker counts");
    if (reps < 1) throw ParameterError("benchmark: reps must be >= 1");
    BenchReport report;
    report.voxel_count = cube.n_voxels();
    report.reps = reps;
    report.hardware = hardware_fingerprint();
    report.worker_counts = worker_counts;

    for (int w : worker_counts) {
        BenchEntry conv{"conventional", w, {}, 0.0, 0.0};
        BenchEntry ann{"surrogate", w, {}, 0.0, 0.0};
        for (int rep = 0; rep < reps; ++rep) {
            const auto t0 = std::chrono::steady_clock::now();
            const FitVolumeResult fr = fit_volume(cube, fit_cfg, w);
            const auto t1 = std::chrono::steady_clock::now();
            const InferResult ir = infer_volume(model, cube, w);
            const auto t2 = std::chrono::steady_clock::now();
            (void)fr;
            (void)ir;
            conv.rep_seconds.push_back(std::chrono::duration<double>(t1 - t0).count());
            ann.rep_seconds.push_back(std::chrono::duration<double>(t2 - t1).count());
        }
        conv.median_seconds = detail::median(conv.rep_seconds);
        conv.mean_seconds = detail::mean(conv.rep_seconds);
        ann.median_seconds = detail::median(ann.rep_seconds);
        ann.mean_seconds = detail::mean(ann.rep_seconds);
        report.entries.push_back(conv);
        report.entries.push_back(ann);
    }
    report.conventional_seconds = report.entries[0].median_seconds;
    report.surrogate_seconds = report.entries[1].median_seconds;
    report.speedup = report.conventional_seconds / report.surrogate_seconds;
    return report;
}

// --- experiments -------------------------------------------------------------

struct ExperimentInputs {
    std::vector<EchoCube> cubes;        // test cubes (clean)
    std::vector<FitVolumeResult> conv;  // conventional fits of those cubes
    const MlpNet<float>* model = nullptr;
    FitConfig fit = FitConfig::defaults();
    CohortConfig cohort;       // generation template (te_mismatch / composition)
    TrainConfig training;      // retraining config (composition)
    double noise_sd = 5.0;     // base level for the noise ladder
    int workers = 1;
    std::uint64_t seed = 1;
};

// MWF recomputed from both pipelines' distributions at myelin cutoffs
// 30/40/50 ms, pooled over all test voxels.
inline ReportTable threshold_sweep(const ExperimentInputs& in) {
    if (!in.model) throw ParameterError("threshold_sweep: missing model");
    if (in.model->head_kind != HeadKind::distribution)
        throw ParameterError("threshold_sweep: needs a distribution-head model");
    if (in.cubes.empty() || in.conv.size() != in.cubes.size())
        throw ParameterError("threshold_sweep: missing cohort or conventional fits");

    const T2Grid grid = make_t2_grid();
    ReportTable table;
    table.columns = {"myelin_hi_ms", "n_voxels", "nrmse_percent", "r_squared"};
    for (double hi : {30.0, 40.0, 50.0}) {
        MetricWindows w;
        w.myelin_hi = hi;
        detail::MapPool pool;
        for (std::size_t i = 0; i < in.cubes.size(); ++i) {
            const EchoCube& cube = in.cubes[i];
            InferConfig icfg;
            icfg.windows = w;
            const InferResult ann = infer_volume(*in.model, cube, in.workers, icfg);
            const std::vector<double> ref = detail::mwf_from_distributions(
                in.conv[i].distributions, cube.n_voxels(), in.conv[i].n_basis, grid, w);
            pool.append(ann.mwf_map, ref, cube.mask);
        }
        const double e = nrmse(pool.pred, pool.ref, pool.mask);
        const double r2 = r_squared(pool.pred, pool.ref, pool.mask);
        table.rows.push_back({detail::fmt(hi), std::to_string(pool.pred.size()),
                              detail::fmt(e), detail::fmt(r2)});
    }
    return table;
}

// Cohorts regenerated from the same seed at te1 = 10.0 / 10.1 / 10.2 ms; the
// surrogate (trained at 10.0) is scored against a conventional fit whose
// timing matches each cohort.
inline ReportTable te_mismatch(const ExperimentInputs& in) {
    if (!in.model) throw ParameterError("te_mismatch: missing model");
    const bool gmt2_head = in.model->head_kind == HeadKind::scalar_gmt2;
    ReportTable table;
    table.columns = {"te1_ms", "metric", "n_voxels", "nrmse_percent"};
    for (double te : {10.0, 10.1, 10.2}) {
        CohortConfig ccfg = in.cohort;
        ccfg.te1 = te;
        const std::vector<EchoCube> cubes = make_cohort(ccfg, in.workers);
        FitConfig fcfg = in.fit;
        fcfg.te1 = te;
        fcfg.echo_spacing = te;
        detail::MapPool pool;
        for (const EchoCube& cube : cubes) {
            const FitVolumeResult conv = fit_volume(cube, fcfg, in.workers);
            const InferResult ann = infer_volume(*in.model, cube, in.workers);
            detail::append_head_maps(pool, in.model->head_kind, ann, conv, cube.mask, gmt2_head);
        }
        table.rows.push_back({detail::fmt(te), gmt2_head ? "gmt2" : "mwf",
                              std::to_string(pool.pred.size()),
                              detail::fmt(nrmse(pool.pred, pool.ref, pool.mask))});
    }
    return table;
}

// Both pipelines on noise at sd, 2sd, 3sd, each scored against the shared
// clean conventional reference.
inline ReportTable noise_ladder(const ExperimentInputs& in) {
    if (!in.model) throw ParameterError("noise_ladder: missing model");
    if (in.cubes.empty() || in.conv.size() != in.cubes.size())
        throw ParameterError("noise_ladder: missing cohort or conventional fits");
    if (!(in.noise_sd > 0.0)) throw ParameterError("noise_ladder: base sd must be positive");
    const bool gmt2_head = in.model->head_kind == HeadKind::scalar_gmt2;

    ReportTable table;
    table.columns = {"level", "sd", "method", "metric", "n_voxels", "nrmse_percent"};
    for (int level = 1; level <= 3; ++level) {
        const double sd = in.noise_sd * level;
        detail::MapPool conv_pool, ann_pool;
        for (std::size_t i = 0; i < in.cubes.size(); ++i) {
            const EchoCube noisy = add_noise(in.cubes[i], sd, NoiseModel::rician,
                                             mix_seed(in.seed, 1000 * level + i));
            const FitVolumeResult conv = fit_volume(noisy, in.fit, in.workers);
            const InferResult ann = infer_volume(*in.model, noisy, in.workers);
            const std::vector<double>& clean_ref =
                gmt2_head ? in.conv[i].gmt2_map : in.conv[i].mwf_map;
            conv_pool.append(gmt2_head ? conv.gmt2_map : conv.mwf_map, clean_ref,
                             in.cubes[i].mask);
            ann_pool.append(gmt2_head ? ann.gmt2_map : ann.mwf_map, clean_ref, in.cubes[i].mask);
        }
        const std::string metric = gmt2_head ? "gmt2" : "mwf";
        table.rows.push_back({std::to_string(level), detail::fmt(sd), "conventional", metric,
                              std::to_string(conv_pool.pred.size()),
                              detail::fmt(nrmse(conv_pool.pred, conv_pool.ref, conv_pool.mask))});
        table.rows.push_back({std::to_string(level), detail::fmt(sd), "surrogate", metric,
                              std::to_string(ann_pool.pred.size()),
                              detail::fmt(nrmse(ann_pool.pred, ann_pool.ref, ann_pool.mask))});
    }
    return table;
}

// Retrains the surrogate on healthy-only / lesion-heavy / mixed training
// cohorts and reports per-region NRMSE on a shared mixed test cohort.
inline ReportTable cohort_composition(const ExperimentInputs& in) {
    if (in.cubes.empty() || in.conv.size() != in.cubes.size())
        throw ParameterError("cohort_composition: missing test cohort or conventional fits");
    const HeadKind head = HeadKind::scalar_mwf;

    ReportTable table;
    table.columns = {"composition", "region", "n_voxels", "nrmse_percent"};
    for (SubjectMix mix : {SubjectMix::hc_only, SubjectMix::ms_only, SubjectMix::mixed}) {
        CohortConfig ccfg = in.cohort;
        ccfg.subject_mix = mix;
        const std::vector<EchoCube> train_cubes = make_cohort(ccfg, in.workers);

        Dataset train_all, val_all;
        for (std::size_t i = 0; i < train_cubes.size(); ++i) {
            const FitVolumeResult fit = fit_volume(train_cubes[i], in.fit, in.workers);
            const DatasetBuild b = build_dataset(train_cubes[i], fit, head);
            Dataset& dst = i + 1 == train_cubes.size() && train_cubes.size() > 1 ? val_all
                                                                                 : train_all;
            const Eigen::Index old = dst.inputs.cols();
            dst.inputs.conservativeResize(b.data.inputs.rows(), old + b.data.inputs.cols());
            dst.inputs.rightCols(b.data.inputs.cols()) = b.data.inputs;
            dst.labels.conservativeResize(b.data.labels.rows(), old + b.data.labels.cols());
            dst.labels.rightCols(b.data.labels.cols()) = b.data.labels;
        }
        if (val_all.inputs.cols() == 0) {
            // single-subject smoke config: carve validation off the tail
            const Eigen::Index n = train_all.inputs.cols();
            const Eigen::Index nv = std::max<Eigen::Index>(1, n / 10);
            val_all.inputs = train_all.inputs.rightCols(nv).eval();
            val_all.labels = train_all.labels.rightCols(nv).eval();
            train_all.inputs = train_all.inputs.leftCols(n - nv).eval();
            train_all.labels = train_all.labels.leftCols(n - nv).eval();
        }
        TrainConfig tcfg = in.training;
        tcfg.seed = mix_seed(in.seed, static_cast<std::uint64_t>(mix));
        const TrainResult tr = train(train_all, val_all, tcfg, head);

        std::vector<InferResult> preds;
        for (std::size_t i = 0; i < in.cubes.size(); ++i)
            preds.push_back(infer_volume(tr.model, in.cubes[i], in.workers));
        for (VoxelClass cls : {VoxelClass::healthy_wm, VoxelClass::gm_like, VoxelClass::lesion}) {
            detail::MapPool pool;
            for (std::size_t i = 0; i < in.cubes.size(); ++i)
                pool.append(preds[i].mwf_map, in.conv[i].mwf_map,
                            detail::class_mask(in.cubes[i], cls));
            std::size_t count = 0;
            for (std::uint8_t m : pool.mask) count += m;
            if (count == 0) continue;
            table.rows.push_back({to_string(mix), to_string(cls), std::to_string(count),
                                  detail::fmt(nrmse(pool.pred, pool.ref, pool.mask))});
        }
    }
    return table;
}

inline ReportTable run_experiment(const std::string& name, const ExperimentInputs& in) {
    if (name == "threshold_sweep") return threshold_sweep(in);
    if (name == "te_mismatch") return te_mismatch(in);
    if (name == "noise_ladder") return noise_ladder(in);
    if (name == "cohort_composition") return cohort_composition(in);
    throw ParameterError("unknown experiment: " + name);
}

} // namespace mwnet
