// mwnet: command-line front end for the myelin-water relaxometry toolkit.
// Subcommands: simulate, fit, train, infer, evaluate, bench, config-init.
// Exit codes: 0 success, 2 config error, 3 missing input, 4 dimension
// mismatch, 5 degenerate data.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include <mwnet/mwnet.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json load_json_file(const std::string& path) {
    if (!fs::exists(path)) throw mwnet::MissingInputError("config file not found: " + path);
    std::ifstream in(path);
    if (!in) throw mwnet::IoError("cannot open config file: " + path);
    return json::parse(in); // parse_error carries line/column in its message
}

void write_text_file(const fs::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw mwnet::IoError("cannot open for writing: " + path.string());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!os) throw mwnet::IoError("write failed: " + path.string());
}

// Strict section reader: every key must be consumed or finish() rejects it.
class Section {
public:
    Section(const json& root, std::string name) : name_(std::move(name)) {
        if (root.contains(name_)) {
            data_ = root.at(name_);
            if (!data_.is_object())
                throw mwnet::ParameterError("config section '" + name_ +
                                            "' must be a JSON object");
        } else {
            data_ = json::object();
        }
    }

    template <typename T>
    T get(const std::string& key, const T& dflt) {
        used_.insert(key);
        if (!data_.contains(key)) return dflt;
        try {
            return data_.at(key).get<T>();
        } catch (const json::exception& e) {
            throw mwnet::ParameterError("config key '" + name_ + "." + key + "': " + e.what());
        }
    }

    bool present(const std::string& key) {
        used_.insert(key);
        return data_.contains(key);
    }

    Section sub(const std::string& key) {
        used_.insert(key);
        json wrapper = json::object();
        if (data_.contains(key)) wrapper[key] = data_.at(key);
        Section s(wrapper, key);
        s.name_ = name_ + "." + key;
        return s;
    }

    void finish() const {
        for (auto it = data_.begin(); it != data_.end(); ++it)
            if (!used_.count(it.key()))
                throw mwnet::ParameterError("unknown config key '" + name_ + "." + it.key() +
                                            "'");
    }

private:
    std::string name_;
    json data_;
    std::set<std::string> used_;
};

// --- config records ----------------------------------------------------------

mwnet::CohortConfig cohort_from_section(Section& s, int default_subjects) {
    mwnet::CohortConfig c;
    c.n_subjects = s.get("n_subjects", default_subjects);
    c.voxels_per_subject = s.get("voxels_per_subject", c.voxels_per_subject);
    c.n_echoes = s.get("n_echoes", c.n_echoes);
    c.frac_healthy = s.get("frac_healthy", c.frac_healthy);
    c.frac_gm = s.get("frac_gm", c.frac_gm);
    c.frac_lesion = s.get("frac_lesion", c.frac_lesion);
    c.flip_lo = s.get("flip_lo", c.flip_lo);
    c.flip_hi = s.get("flip_hi", c.flip_hi);
    c.noise_sd = s.get("noise_sd", c.noise_sd);
    c.noise_model =
        mwnet::noise_model_from_string(s.get<std::string>("noise_model", "rician"));
    c.te1 = s.get("te1", c.te1);
    c.t1 = s.get("t1", c.t1);
    c.subject_mix = mwnet::subject_mix_from_string(s.get<std::string>("subject_mix", "mixed"));
    return c;
}

json cohort_to_json(const mwnet::CohortConfig& c) {
    return json{{"n_subjects", c.n_subjects},
                {"voxels_per_subject", c.voxels_per_subject},
                {"n_echoes", c.n_echoes},
                {"frac_healthy", c.frac_healthy},
                {"frac_gm", c.frac_gm},
                {"frac_lesion", c.frac_lesion},
                {"flip_lo", c.flip_lo},
                {"flip_hi", c.flip_hi},
                {"noise_sd", c.noise_sd},
                {"noise_model", c.noise_model == mwnet::NoiseModel::rician ? "rician" : "gaussian"},
                {"te1", c.te1},
                {"t1", c.t1},
                {"subject_mix", mwnet::to_string(c.subject_mix)},
                {"seed", c.seed}};
}

struct FitSettings {
    int n_basis = 120;
    double t2_min = 15.0, t2_max = 2000.0;
    double flip_lo = 90.0, flip_hi = 180.0, flip_step = 1.0;
    double te1 = 10.0, echo_spacing = 10.0;
    int n_echoes = 32;
    double t1 = 1000.0;
    double chi2_target_ratio = 1.0225, chi2_band_lo = 1.020, chi2_band_hi = 1.025;
    double mu_lo = 1e-14, mu_hi = 1e4, mu_rel_tol = 1e-6;
    int mu_max_iters = 50;
    double degenerate_ratio = 1e-12, kkt_tol_scale = 1e-10;
    bool refine_flip = true, rebuild_refined_basis = true;
    double myelin_lo = 15.0, myelin_hi = 40.0, iew_lo = 40.0, iew_hi = 200.0;

    mwnet::FitConfig build() const {
        mwnet::FitConfig f;
        f.grid = std::make_shared<mwnet::T2Grid>(mwnet::make_t2_grid(n_basis, t2_min, t2_max));
        if (!(flip_step > 0.0) || flip_lo > flip_hi)
            throw mwnet::ParameterError("fit config: bad flip grid");
        f.flip_grid.clear();
        for (double a = flip_lo; a <= flip_hi + 1e-9; a += flip_step) f.flip_grid.push_back(a);
        f.te1 = te1;
        f.echo_spacing = echo_spacing;
        f.n_echoes = n_echoes;
        f.t1 = t1;
        f.chi2_target_ratio = chi2_target_ratio;
        f.chi2_band_lo = chi2_band_lo;
        f.chi2_band_hi = chi2_band_hi;
        f.mu_lo = mu_lo;
        f.mu_hi = mu_hi;
        f.mu_rel_tol = mu_rel_tol;
        f.mu_max_iters = mu_max_iters;
        f.degenerate_ratio = degenerate_ratio;
        f.kkt_tol_scale = kkt_tol_scale;
        f.refine_flip = refine_flip;
        f.rebuild_refined_basis = rebuild_refined_basis;
        f.windows = {myelin_lo, myelin_hi, iew_lo, iew_hi};
        f.validate();
        return f;
    }

    json to_json() const {
        return json{{"n_basis", n_basis},
                    {"t2_min", t2_min},
                    {"t2_max", t2_max},
                    {"flip_lo", flip_lo},
                    {"flip_hi", flip_hi},
                    {"flip_step", flip_step},
                    {"te1", te1},
                    {"echo_spacing", echo_spacing},
                    {"n_echoes", n_echoes},
                    {"t1", t1},
                    {"chi2_target_ratio", chi2_target_ratio},
                    {"chi2_band_lo", chi2_band_lo},
                    {"chi2_band_hi", chi2_band_hi},
                    {"mu_lo", mu_lo},
                    {"mu_hi", mu_hi},
                    {"mu_rel_tol", mu_rel_tol},
                    {"mu_max_iters", mu_max_iters},
                    {"degenerate_ratio", degenerate_ratio},
                    {"kkt_tol_scale", kkt_tol_scale},
                    {"refine_flip", refine_flip},
                    {"rebuild_refined_basis", rebuild_refined_basis},
                    {"myelin_lo", myelin_lo},
                    {"myelin_hi", myelin_hi},
                    {"iew_lo", iew_lo},
                    {"iew_hi", iew_hi}};
    }
};

// Timing keys not set explicitly follow the cube's own metadata.
FitSettings fit_settings_from(Section& s, const mwnet::EchoCube* cube) {
    FitSettings f;
    f.n_basis = s.get("n_basis", f.n_basis);
    f.t2_min = s.get("t2_min", f.t2_min);
    f.t2_max = s.get("t2_max", f.t2_max);
    f.flip_lo = s.get("flip_lo", f.flip_lo);
    f.flip_hi = s.get("flip_hi", f.flip_hi);
    f.flip_step = s.get("flip_step", f.flip_step);
    f.te1 = s.get("te1", cube ? cube->te1_ms : f.te1);
    f.echo_spacing = s.get("echo_spacing", cube ? cube->esp_ms : f.echo_spacing);
    f.n_echoes = s.get("n_echoes", cube ? cube->n_echoes : f.n_echoes);
    f.t1 = s.get("t1", f.t1);
    f.chi2_target_ratio = s.get("chi2_target_ratio", f.chi2_target_ratio);
    f.chi2_band_lo = s.get("chi2_band_lo", f.chi2_band_lo);
    f.chi2_band_hi = s.get("chi2_band_hi", f.chi2_band_hi);
    f.mu_lo = s.get("mu_lo", f.mu_lo);
    f.mu_hi = s.get("mu_hi", f.mu_hi);
    f.mu_rel_tol = s.get("mu_rel_tol", f.mu_rel_tol);
    f.mu_max_iters = s.get("mu_max_iters", f.mu_max_iters);
    f.degenerate_ratio = s.get("degenerate_ratio", f.degenerate_ratio);
    f.kkt_tol_scale = s.get("kkt_tol_scale", f.kkt_tol_scale);
    f.refine_flip = s.get("refine_flip", f.refine_flip);
    f.rebuild_refined_basis = s.get("rebuild_refined_basis", f.rebuild_refined_basis);
    f.myelin_lo = s.get("myelin_lo", f.myelin_lo);
    f.myelin_hi = s.get("myelin_hi", f.myelin_hi);
    f.iew_lo = s.get("iew_lo", f.iew_lo);
    f.iew_hi = s.get("iew_hi", f.iew_hi);
    return f;
}

mwnet::TrainConfig train_from_section(Section& s, const std::string& profile_flag) {
    const std::string profile =
        !profile_flag.empty() ? profile_flag : s.get<std::string>("profile", "fast");
    mwnet::TrainConfig t;
    if (profile == "paper")
        t = mwnet::TrainConfig::paper_profile();
    else if (profile == "fast")
        t = mwnet::TrainConfig::fast_profile();
    else
        throw mwnet::ParameterError("unknown training profile: " + profile);
    t.base_lr = s.get("base_lr", t.base_lr);
    t.lr_drop_epochs = s.get("lr_drop_epochs", t.lr_drop_epochs);
    t.lr_drop_factor = s.get("lr_drop_factor", t.lr_drop_factor);
    t.batch_start = s.get("batch_start", t.batch_start);
    t.batch_cap = s.get("batch_cap", t.batch_cap);
    t.max_epochs = s.get("max_epochs", t.max_epochs);
    t.early_stop_patience = s.get("early_stop_patience", t.early_stop_patience);
    t.adam_beta1 = s.get("adam_beta1", t.adam_beta1);
    t.adam_beta2 = s.get("adam_beta2", t.adam_beta2);
    t.adam_epsilon = s.get("adam_epsilon", t.adam_epsilon);
    return t;
}

json train_to_json(const mwnet::TrainConfig& t) {
    return json{{"profile", t.profile},
                {"base_lr", t.base_lr},
                {"lr_drop_epochs", t.lr_drop_epochs},
                {"lr_drop_factor", t.lr_drop_factor},
                {"batch_start", t.batch_start},
                {"batch_cap", t.batch_cap},
                {"max_epochs", t.max_epochs},
                {"early_stop_patience", t.early_stop_patience},
                {"adam_beta1", t.adam_beta1},
                {"adam_beta2", t.adam_beta2},
                {"adam_epsilon", t.adam_epsilon},
                {"seed", t.seed}};
}

// --- shared option plumbing ---------------------------------------------------

struct CommonOpts {
    std::string config;
    std::string out;
    std::uint64_t seed = 0;
    bool seed_set = false;
    int workers = 0;
    bool workers_set = false;
};

void add_common(CLI::App* cmd, CommonOpts& o, bool needs_out = true) {
    cmd->add_option("--config", o.config, "JSON config file");
    auto* out = cmd->add_option("--out", o.out, "output directory");
    if (needs_out) out->required();
    cmd->add_option("--seed", o.seed, "seed (overrides MWNET_SEED and config)")
        ->each([&o](const std::string&) { o.seed_set = true; });
    cmd->add_option("--workers", o.workers, "worker thread count")
        ->each([&o](const std::string&) { o.workers_set = true; });
}

std::uint64_t resolve_seed(const CommonOpts& o, const json& root, std::uint64_t fallback) {
    if (o.seed_set) return o.seed;
    if (const char* env = std::getenv("MWNET_SEED")) {
        char* end = nullptr;
        const unsigned long long v = std::strtoull(env, &end, 10);
        if (end == env || *end != '\0')
            throw mwnet::ParameterError(std::string("MWNET_SEED is not an integer: ") + env);
        return static_cast<std::uint64_t>(v);
    }
    if (root.contains("seed")) {
        if (!root.at("seed").is_number_unsigned() && !root.at("seed").is_number_integer())
            throw mwnet::ParameterError("config seed must be an integer");
        return root.at("seed").get<std::uint64_t>();
    }
    return fallback;
}

int resolve_workers(const CommonOpts& o, const json& root) {
    int w = 1;
    if (root.contains("workers")) w = root.at("workers").get<int>();
    if (o.workers_set) w = o.workers;
    if (w < 1) throw mwnet::ParameterError("workers must be >= 1");
    return w;
}

json load_root(const CommonOpts& o) {
    return o.config.empty() ? json::object() : load_json_file(o.config);
}

void write_resolved(const CommonOpts& o, json resolved) {
    resolved["out"] = o.out;
    fs::create_directories(o.out);
    write_text_file(fs::path(o.out) / "resolved_config.json", resolved.dump(2) + "\n");
}

mwnet::MapVolume one_field_maps(const std::array<int, 3>& dims, const std::string& name,
                                const std::vector<double>& data,
                                const std::vector<std::uint8_t>& mask,
                                const std::vector<std::uint8_t>& status) {
    mwnet::MapVolume m;
    m.dims = dims;
    m.fields.emplace_back(name, data);
    m.mask = mask;
    m.status = status;
    return m;
}

// Reassembles the pieces of a conventional fit that experiments need from a
// fit output directory (mwf/gmt2 maps plus the distribution file).
mwnet::FitVolumeResult load_conv_results(const std::string& dir) {
    mwnet::FitVolumeResult r;
    const mwnet::MapVolume mwf = mwnet::load_map_volume((fs::path(dir) / "mwf.mwmap").string());
    const mwnet::MapVolume gmt2 = mwnet::load_map_volume((fs::path(dir) / "gmt2.mwmap").string());
    const mwnet::DistVolume dist =
        mwnet::load_dist_volume((fs::path(dir) / "dist.mwdist").string());
    r.dims = mwf.dims;
    r.n_basis = dist.n_basis;
    r.mwf_map = mwf.field("mwf");
    r.gmt2_map = gmt2.field("gmt2");
    r.distributions = dist.amplitudes;
    r.status = mwf.status;
    const std::size_t nv = r.mwf_map.size();
    r.flip_map.assign(nv, 0.0);
    r.chi2_map.assign(nv, 0.0);
    r.chi2_min_map.assign(nv, 0.0);
    r.mu_map.assign(nv, 0.0);
    return r;
}

mwnet::HeadKind head_from_cli(const std::string& head) {
    if (head == "mwf") return mwnet::HeadKind::scalar_mwf;
    if (head == "gmt2") return mwnet::HeadKind::scalar_gmt2;
    if (head == "dist") return mwnet::HeadKind::distribution;
    throw mwnet::ParameterError("unknown head: " + head + " (expected mwf, gmt2, or dist)");
}

void append_dataset(mwnet::Dataset& dst, const mwnet::Dataset& src) {
    if (src.inputs.cols() == 0) return;
    const Eigen::Index old = dst.inputs.cols();
    dst.inputs.conservativeResize(src.inputs.rows(), old + src.inputs.cols());
    dst.inputs.rightCols(src.inputs.cols()) = src.inputs;
    dst.labels.conservativeResize(src.labels.rows(), old + src.labels.cols());
    dst.labels.rightCols(src.labels.cols()) = src.labels;
}

// --- commands ----------------------------------------------------------------

int run_simulate(const CommonOpts& o) {
    const json root = load_root(o);
    Section s(root, "simulate");
    mwnet::CohortConfig cc = cohort_from_section(s, 10);
    const double tukey = s.get("tukey_coefficient", 0.0);
    s.finish();
    cc.seed = resolve_seed(o, root, cc.seed);
    const int workers = resolve_workers(o, root);
    cc.validate();

    std::vector<mwnet::EchoCube> cohort = mwnet::make_cohort(cc, workers);
    if (tukey > 0.0)
        for (auto& cube : cohort) cube = mwnet::tukey_apodize(cube, tukey);

    fs::create_directories(o.out);
    json files = json::array();
    for (std::size_t i = 0; i < cohort.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "subject_%03zu.ecube", i);
        mwnet::save_echo_cube(cohort[i], (fs::path(o.out) / name).string());
        files.push_back({{"file", name},
                         {"subject_kind", cohort[i].subject_kind},
                         {"dims", {cohort[i].dims[0], cohort[i].dims[1], cohort[i].dims[2]}}});
    }
    json manifest{{"n_subjects", cc.n_subjects}, {"seed", cc.seed}, {"files", files}};
    write_text_file(fs::path(o.out) / "cohort.json", manifest.dump(2) + "\n");

    json resolved{{"command", "simulate"},
                  {"seed", cc.seed},
                  {"workers", workers},
                  {"simulate", cohort_to_json(cc)}};
    resolved["simulate"]["tukey_coefficient"] = tukey;
    write_resolved(o, resolved);
    std::cout << "wrote " << cohort.size() << " subjects ("
              << cc.voxels_per_subject << " voxels each) to " << o.out << "\n";
    return 0;
}

int run_fit(const CommonOpts& o, const std::string& cube_path) {
    const json root = load_root(o);
    const mwnet::EchoCube cube = mwnet::load_echo_cube(cube_path);
    Section s(root, "fit");
    const FitSettings fset = fit_settings_from(s, &cube);
    s.finish();
    const int workers = resolve_workers(o, root);
    const mwnet::FitConfig cfg = fset.build();

    const mwnet::FitVolumeResult res = mwnet::fit_volume(cube, cfg, workers);

    fs::create_directories(o.out);
    mwnet::save_map_volume(one_field_maps(res.dims, "mwf", res.mwf_map, cube.mask, res.status),
                           (fs::path(o.out) / "mwf.mwmap").string());
    mwnet::save_map_volume(one_field_maps(res.dims, "gmt2", res.gmt2_map, cube.mask, res.status),
                           (fs::path(o.out) / "gmt2.mwmap").string());
    mwnet::save_map_volume(one_field_maps(res.dims, "flip", res.flip_map, cube.mask, res.status),
                           (fs::path(o.out) / "flip.mwmap").string());
    mwnet::MapVolume extras;
    extras.dims = res.dims;
    extras.fields = {{"chi2", res.chi2_map}, {"chi2_min", res.chi2_min_map}, {"mu", res.mu_map}};
    extras.mask = cube.mask;
    extras.status = res.status;
    mwnet::save_map_volume(extras, (fs::path(o.out) / "extras.mwmap").string());

    mwnet::DistVolume dist;
    dist.dims = res.dims;
    dist.n_basis = res.n_basis;
    dist.t2_min = fset.t2_min;
    dist.t2_max = fset.t2_max;
    dist.amplitudes = res.distributions;
    dist.mask = cube.mask;
    mwnet::save_dist_volume(dist, (fs::path(o.out) / "dist.mwdist").string());

    write_text_file(fs::path(o.out) / "timing.json", mwnet::timing_sidecar_json(res.timing));
    write_resolved(o, json{{"command", "fit"},
                           {"cube", cube_path},
                           {"workers", workers},
                           {"fit", fset.to_json()}});

    std::size_t converged = 0, fallback = 0, degenerate = 0, invalid = 0, outside = 0;
    for (std::uint8_t st : res.status) {
        if (st == static_cast<std::uint8_t>(mwnet::FitStatus::converged)) ++converged;
        else if (st == static_cast<std::uint8_t>(mwnet::FitStatus::boundary_fallback)) ++fallback;
        else if (st == static_cast<std::uint8_t>(mwnet::FitStatus::unregularized_degenerate))
            ++degenerate;
        else if (st == mwnet::kStatusInvalidInput) ++invalid;
        else ++outside;
    }
    std::cout << "fit " << res.timing.voxel_count << " voxels in " << res.timing.wall_seconds
              << " s (" << res.timing.per_voxel_mean_us << " us/voxel, " << workers
              << " workers): " << converged << " converged, " << fallback << " fallback, "
              << degenerate << " degenerate, " << invalid << " invalid, " << outside
              << " outside mask\n";
    return 0;
}

int run_train(const CommonOpts& o, const std::vector<std::string>& cube_paths,
              const std::vector<std::string>& val_paths,
              const std::vector<std::string>& label_dirs,
              const std::vector<std::string>& val_label_dirs, const std::string& head_str,
              const std::string& profile_flag) {
    const json root = load_root(o);
    const mwnet::HeadKind head = head_from_cli(head_str);
    Section st(root, "train");
    mwnet::TrainConfig tc = train_from_section(st, profile_flag);
    st.finish();
    tc.seed = resolve_seed(o, root, tc.seed);
    const int workers = resolve_workers(o, root);
    tc.validate();

    if (cube_paths.empty()) throw mwnet::ParameterError("train: no cubes given");
    if (!label_dirs.empty() && label_dirs.size() != cube_paths.size())
        throw mwnet::ParameterError("train: --labels count must match --cubes");
    if (!val_label_dirs.empty() && val_label_dirs.size() != val_paths.size())
        throw mwnet::ParameterError("train: --val-labels count must match --val-cubes");

    std::vector<mwnet::EchoCube> train_cubes, val_cubes;
    for (const auto& p : cube_paths) train_cubes.push_back(mwnet::load_echo_cube(p));
    for (const auto& p : val_paths) val_cubes.push_back(mwnet::load_echo_cube(p));

    std::vector<std::string> train_names(cube_paths), val_names(val_paths);
    std::vector<std::string> train_labels(label_dirs), val_labels(val_label_dirs);
    if (val_cubes.empty()) {
        // no explicit validation set: subject-level split of the given cubes
        std::vector<std::string> kinds;
        for (const auto& c : train_cubes)
            kinds.push_back(c.subject_kind.empty() ? "subject" : c.subject_kind);
        const mwnet::SubjectSplit split = mwnet::split_subjects(kinds, tc.seed);
        std::vector<mwnet::EchoCube> tr, va;
        std::vector<std::string> trn, van, trl, val;
        for (int i : split.train) {
            tr.push_back(std::move(train_cubes[static_cast<std::size_t>(i)]));
            trn.push_back(cube_paths[static_cast<std::size_t>(i)]);
            if (!label_dirs.empty()) trl.push_back(label_dirs[static_cast<std::size_t>(i)]);
        }
        for (int i : split.val) {
            va.push_back(std::move(train_cubes[static_cast<std::size_t>(i)]));
            van.push_back(cube_paths[static_cast<std::size_t>(i)]);
            if (!label_dirs.empty()) val.push_back(label_dirs[static_cast<std::size_t>(i)]);
        }
        std::cout << "auto split: " << tr.size() << " train / " << va.size()
                  << " val subjects (" << split.test.size() << " held out)\n";
        train_cubes = std::move(tr);
        val_cubes = std::move(va);
        train_names = std::move(trn);
        val_names = std::move(van);
        train_labels = std::move(trl);
        val_labels = std::move(val);
    }

    Section sf(root, "fit");
    const FitSettings fset = fit_settings_from(sf, nullptr);
    sf.finish();

    auto labels_for = [&](const mwnet::EchoCube& cube,
                          const std::vector<std::string>& dirs,
                          std::size_t i) -> mwnet::FitVolumeResult {
        if (!dirs.empty()) return load_conv_results(dirs[i]);
        FitSettings per = fset;
        per.te1 = cube.te1_ms;
        per.echo_spacing = cube.esp_ms;
        per.n_echoes = cube.n_echoes;
        return mwnet::fit_volume(cube, per.build(), workers);
    };

    mwnet::Dataset train_set, val_set;
    std::size_t skipped = 0;
    for (std::size_t i = 0; i < train_cubes.size(); ++i) {
        const mwnet::DatasetBuild b =
            mwnet::build_dataset(train_cubes[i], labels_for(train_cubes[i], train_labels, i), head);
        append_dataset(train_set, b.data);
        skipped += b.skipped;
    }
    for (std::size_t i = 0; i < val_cubes.size(); ++i) {
        const mwnet::DatasetBuild b =
            mwnet::build_dataset(val_cubes[i], labels_for(val_cubes[i], val_labels, i), head);
        append_dataset(val_set, b.data);
        skipped += b.skipped;
    }

    const mwnet::TrainResult tr = mwnet::train(train_set, val_set, tc, head);
    fs::create_directories(o.out);
    mwnet::save_model(tr.model, (fs::path(o.out) / "model.mwnet").string());
    write_text_file(fs::path(o.out) / "train_log.csv", mwnet::training_log_csv(tr.log));

    write_resolved(o, json{{"command", "train"},
                           {"head", head_str},
                           {"seed", tc.seed},
                           {"workers", workers},
                           {"train", train_to_json(tc)},
                           {"fit", fset.to_json()},
                           {"train_cubes", train_names},
                           {"val_cubes", val_names},
                           {"label_dirs", train_labels},
                           {"val_label_dirs", val_labels},
                           {"n_train_samples", train_set.size()},
                           {"n_val_samples", val_set.size()},
                           {"skipped_voxels", skipped}});
    std::cout << "trained " << mwnet::to_string(head) << " head on " << train_set.size()
              << " samples (" << val_set.size() << " validation): best epoch " << tr.best_epoch
              << ", val mse " << tr.best_val_mse << ", " << tr.log.size() << " epochs in "
              << tr.wall_seconds << " s\n";
    return 0;
}

int run_infer(const CommonOpts& o, const std::string& model_path, const std::string& cube_path) {
    const json root = load_root(o);
    const int workers = resolve_workers(o, root);
    if (!fs::exists(model_path)) throw mwnet::MissingInputError("model not found: " + model_path);
    const mwnet::MlpNet<float> model = mwnet::load_model(model_path);
    const mwnet::EchoCube cube = mwnet::load_echo_cube(cube_path);

    const mwnet::InferResult res = mwnet::infer_volume(model, cube, workers);

    fs::create_directories(o.out);
    if (model.head_kind != mwnet::HeadKind::scalar_gmt2)
        mwnet::save_map_volume(
            one_field_maps(res.dims, "mwf", res.mwf_map, cube.mask, res.valid),
            (fs::path(o.out) / "mwf.mwmap").string());
    if (model.head_kind != mwnet::HeadKind::scalar_mwf)
        mwnet::save_map_volume(
            one_field_maps(res.dims, "gmt2", res.gmt2_map, cube.mask, res.valid),
            (fs::path(o.out) / "gmt2.mwmap").string());
    if (model.head_kind == mwnet::HeadKind::distribution) {
        mwnet::DistVolume dist;
        dist.dims = res.dims;
        dist.n_basis = res.n_basis;
        dist.t2_min = 15.0;
        dist.t2_max = 2000.0;
        dist.amplitudes = res.distributions;
        dist.mask = cube.mask;
        mwnet::save_dist_volume(dist, (fs::path(o.out) / "dist.mwdist").string());
    }
    write_text_file(fs::path(o.out) / "timing.json", mwnet::timing_sidecar_json(res.timing));
    write_resolved(o, json{{"command", "infer"},
                           {"model", model_path},
                           {"cube", cube_path},
                           {"head", mwnet::to_string(model.head_kind)},
                           {"workers", workers}});
    std::cout << "inferred " << res.timing.voxel_count << " voxels in "
              << res.timing.wall_seconds << " s (" << res.timing.per_voxel_mean_us
              << " us/voxel); skipped " << res.skipped_nonpositive << " nonpositive\n";
    return 0;
}

int run_evaluate(const CommonOpts& o, const std::string& pred_path, const std::string& ref_path,
                 std::string field, bool svg, const std::string& experiment,
                 const std::string& model_path, const std::vector<std::string>& cube_paths,
                 const std::vector<std::string>& conv_dirs) {
    const json root = load_root(o);
    Section se(root, "evaluate");
    const int workers = resolve_workers(o, root);
    const std::uint64_t seed = resolve_seed(o, root, 1);

    if (!experiment.empty()) {
        mwnet::ExperimentInputs in;
        mwnet::MlpNet<float> model;
        if (!model_path.empty()) {
            if (!fs::exists(model_path))
                throw mwnet::MissingInputError("model not found: " + model_path);
            model = mwnet::load_model(model_path);
            in.model = &model;
        }
        for (const auto& p : cube_paths) in.cubes.push_back(mwnet::load_echo_cube(p));
        if (!conv_dirs.empty() && conv_dirs.size() != cube_paths.size())
            throw mwnet::ParameterError("evaluate: --conv count must match --cubes");
        for (const auto& d : conv_dirs) in.conv.push_back(load_conv_results(d));

        Section sf(root, "fit");
        const FitSettings fset =
            fit_settings_from(sf, in.cubes.empty() ? nullptr : &in.cubes.front());
        sf.finish();
        in.fit = fset.build();

        Section sc = se.sub("cohort");
        in.cohort = cohort_from_section(sc, 2);
        if (!sc.present("voxels_per_subject")) in.cohort.voxels_per_subject = 2500;
        sc.finish();
        in.cohort.seed = seed;

        Section str = se.sub("training");
        in.training = train_from_section(str, "");
        if (!str.present("max_epochs")) in.training.max_epochs = 10;
        str.finish();

        in.noise_sd = se.get("noise_sd", 5.0);
        se.get<std::string>("field", "");
        se.get("svg", false);
        se.finish();
        in.workers = workers;
        in.seed = seed;

        const mwnet::ReportTable table = mwnet::run_experiment(experiment, in);
        fs::create_directories(o.out);
        write_text_file(fs::path(o.out) / (experiment + ".csv"), table.to_csv());
        write_resolved(o, json{{"command", "evaluate"},
                               {"experiment", experiment},
                               {"seed", seed},
                               {"workers", workers},
                               {"model", model_path},
                               {"cubes", cube_paths},
                               {"conv_dirs", conv_dirs},
                               {"noise_sd", in.noise_sd},
                               {"cohort", cohort_to_json(in.cohort)},
                               {"training", train_to_json(in.training)},
                               {"fit", fset.to_json()}});
        std::cout << "experiment " << experiment << ": " << table.rows.size() << " rows -> "
                  << (fs::path(o.out) / (experiment + ".csv")).string() << "\n";
        return 0;
    }

    if (pred_path.empty() || ref_path.empty())
        throw mwnet::ParameterError("evaluate: --pred and --ref are required");
    const mwnet::MapVolume pm = mwnet::load_map_volume(pred_path);
    const mwnet::MapVolume rm = mwnet::load_map_volume(ref_path);
    if (pm.dims != rm.dims) throw mwnet::DimensionError("evaluate: map dimensions differ");
    if (field.empty()) field = se.get<std::string>("field", "");
    if (field.empty()) field = pm.fields.size() == 1 ? pm.fields.front().first : "mwf";
    if (!svg) svg = se.get("svg", false);
    se.get("noise_sd", 5.0);
    se.sub("cohort").finish();
    se.sub("training").finish();
    se.finish();

    std::vector<std::uint8_t> mask(pm.mask.size());
    std::size_t n_masked = 0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        mask[i] = pm.mask[i] && rm.mask[i];
        n_masked += mask[i];
    }
    if (n_masked == 0) throw mwnet::DegenerateDataError("evaluate: empty mask");

    const std::vector<double>& pred = pm.field(field);
    const std::vector<double>& ref = rm.field(field);
    const mwnet::ComparisonReport rep = mwnet::compare_maps(pred, ref, mask, field);

    fs::create_directories(o.out);
    write_text_file(fs::path(o.out) / "report.csv",
                    mwnet::comparison_csv_header() + "\n" + mwnet::comparison_csv_row(rep) +
                        "\n");
    if (svg) {
        std::vector<double> p, r;
        mwnet::detail::masked_pairs(pred, ref, mask, p, r);
        write_text_file(fs::path(o.out) / "scatter.svg",
                        mwnet::svg_scatter(r, p, field + " agreement", "conventional " + field,
                                           "surrogate " + field));
        write_text_file(fs::path(o.out) / "bland_altman.svg",
                        mwnet::svg_bland_altman(p, r, field + " differences"));
    }
    write_resolved(o, json{{"command", "evaluate"},
                           {"pred", pred_path},
                           {"ref", ref_path},
                           {"field", field},
                           {"svg", svg},
                           {"workers", workers}});
    std::cout << "evaluate " << field << ": nrmse " << rep.nrmse_percent << "%, r^2 "
              << rep.r_squared << ", bias " << rep.mean_difference << ", p " << rep.wilcoxon_p
              << " (" << rep.n_voxels << " voxels)\n";
    return 0;
}

int run_bench(const CommonOpts& o, const std::string& cube_path, const std::string& model_path,
              std::vector<int> worker_list, int reps_flag) {
    const json root = load_root(o);
    Section sb(root, "bench");
    int reps = sb.get("reps", 10);
    if (reps_flag > 0) reps = reps_flag;
    std::vector<int> workers_cfg = sb.get("worker_counts", std::vector<int>{1});
    sb.finish();
    if (!worker_list.empty()) workers_cfg = worker_list;

    const mwnet::EchoCube cube = mwnet::load_echo_cube(cube_path);
    if (!fs::exists(model_path)) throw mwnet::MissingInputError("model not found: " + model_path);
    const mwnet::MlpNet<float> model = mwnet::load_model(model_path);

    Section sf(root, "fit");
    const FitSettings fset = fit_settings_from(sf, &cube);
    sf.finish();

    const mwnet::BenchReport report =
        mwnet::benchmark(cube, fset.build(), model, workers_cfg, reps);
    fs::create_directories(o.out);
    write_text_file(fs::path(o.out) / "bench.json", report.to_json());
    write_resolved(o, json{{"command", "bench"},
                           {"cube", cube_path},
                           {"model", model_path},
                           {"reps", reps},
                           {"worker_counts", workers_cfg},
                           {"fit", fset.to_json()}});
    std::cout << "bench: conventional " << report.conventional_seconds << " s, surrogate "
              << report.surrogate_seconds << " s, speedup " << report.speedup << "x over "
              << report.voxel_count << " voxels (median of " << reps << ")\n";
    return 0;
}

int run_config_init(const std::string& out_path) {
    mwnet::CohortConfig cc;
    json root{{"seed", 1},
              {"workers", 1},
              {"simulate", cohort_to_json(cc)},
              {"fit", FitSettings{}.to_json()},
              {"train", json{{"profile", "fast"}}},
              {"evaluate", json{{"field", "mwf"}, {"svg", false}, {"noise_sd", 5.0}}},
              {"bench", json{{"reps", 10}, {"worker_counts", {1}}}}};
    root["simulate"]["n_subjects"] = 10; // command-line default cohort size
    root["simulate"]["tukey_coefficient"] = 0.0;
    root["simulate"].erase("seed");
    write_text_file(out_path, root.dump(2) + "\n");
    std::cout << "wrote default config to " << out_path << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"myelin water T2 relaxometry: simulate, fit, train, infer, evaluate, bench"};
    app.require_subcommand(1);
    int rc = 0;

    CommonOpts sim_o;
    auto* sim = app.add_subcommand("simulate", "generate a synthetic cohort (ECUBE1 + truth)");
    add_common(sim, sim_o);
    sim->callback([&]() { rc = run_simulate(sim_o); });

    CommonOpts fit_o;
    std::string fit_cube;
    auto* fit = app.add_subcommand("fit", "conventional regularized multi-echo T2 fit");
    add_common(fit, fit_o);
    fit->add_option("--cube", fit_cube, "input ECUBE1 file")->required();
    fit->callback([&]() { rc = run_fit(fit_o, fit_cube); });

    CommonOpts train_o;
    std::vector<std::string> train_cubes, train_val_cubes, train_labels, train_val_labels;
    std::string train_head = "mwf", train_profile;
    auto* train = app.add_subcommand("train", "train a surrogate on conventional-fit labels");
    add_common(train, train_o);
    train->add_option("--cubes", train_cubes, "training ECUBE1 files")->required();
    train->add_option("--val-cubes", train_val_cubes, "validation ECUBE1 files");
    train->add_option("--labels", train_labels,
                      "fit output dirs with labels, one per training cube");
    train->add_option("--val-labels", train_val_labels,
                      "fit output dirs with labels, one per validation cube");
    train->add_option("--head", train_head, "mwf | gmt2 | dist");
    train->add_option("--profile", train_profile, "paper | fast");
    train->callback([&]() {
        rc = run_train(train_o, train_cubes, train_val_cubes, train_labels, train_val_labels,
                       train_head, train_profile);
    });

    CommonOpts infer_o;
    std::string infer_model, infer_cube;
    auto* infer = app.add_subcommand("infer", "apply a trained surrogate to a cube");
    add_common(infer, infer_o);
    infer->add_option("--model", infer_model, "MWNET1 model file")->required();
    infer->add_option("--cube", infer_cube, "input ECUBE1 file")->required();
    infer->callback([&]() { rc = run_infer(infer_o, infer_model, infer_cube); });

    CommonOpts eval_o;
    std::string eval_pred, eval_ref, eval_field, eval_experiment, eval_model;
    std::vector<std::string> eval_cubes, eval_conv;
    bool eval_svg = false;
    auto* eval = app.add_subcommand("evaluate", "agreement report or named experiment");
    add_common(eval, eval_o);
    eval->add_option("--pred", eval_pred, "predicted map file (MWMAP1)");
    eval->add_option("--ref", eval_ref, "reference map file (MWMAP1)");
    eval->add_option("--field", eval_field, "map field to compare");
    eval->add_flag("--svg", eval_svg, "also write scatter + agreement SVGs");
    eval->add_option("--experiment", eval_experiment,
                     "threshold_sweep | te_mismatch | noise_ladder | cohort_composition");
    eval->add_option("--model", eval_model, "model for experiments");
    eval->add_option("--cubes", eval_cubes, "test cubes for experiments");
    eval->add_option("--conv", eval_conv, "fit output dirs matching --cubes");
    eval->callback([&]() {
        rc = run_evaluate(eval_o, eval_pred, eval_ref, eval_field, eval_svg, eval_experiment,
                          eval_model, eval_cubes, eval_conv);
    });

    CommonOpts bench_o;
    std::string bench_cube, bench_model;
    std::vector<int> bench_workers;
    int bench_reps = 0;
    auto* bench = app.add_subcommand("bench", "time conventional fit vs surrogate inference");
    add_common(bench, bench_o);
    bench->add_option("--cube", bench_cube, "input ECUBE1 file")->required();
    bench->add_option("--model", bench_model, "MWNET1 model file")->required();
    bench->add_option("--bench-workers", bench_workers, "worker counts to benchmark");
    bench->add_option("--reps", bench_reps, "repetitions per timing");
    bench->callback(
        [&]() { rc = run_bench(bench_o, bench_cube, bench_model, bench_workers, bench_reps); });

    std::string init_out = "mwnet.json";
    auto* init = app.add_subcommand("config-init", "write a config file with full defaults");
    init->add_option("--out", init_out, "output path");
    init->callback([&]() { rc = run_config_init(init_out); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const mwnet::MissingInputError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const mwnet::DimensionError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const mwnet::DegenerateDataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 5;
    } catch (const json::parse_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const mwnet::ParameterError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const mwnet::IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return rc;
}
