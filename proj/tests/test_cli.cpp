#include <catch2/catch_amalgamated.hpp>

#include <mwnet/mwnet.hpp>

#include <json.hpp>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <sys/wait.h>
#include <unistd.h>
#include <vector>

using namespace mwnet;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// The driver binary under test: MWNET_CLI when ctest provides it, otherwise
// the sibling tools/ binary next to this test executable.
const std::string& cli_path() {
    static const std::string path = [] {
        if (const char* env = std::getenv("MWNET_CLI")) return std::string(env);
        const fs::path self = fs::read_symlink("/proc/self/exe");
        return (self.parent_path().parent_path() / "tools" / "mwnet").string();
    }();
    REQUIRE(fs::exists(path));
    return path;
}

fs::path scratch_dir() {
    static std::atomic<int> counter{0};
    const fs::path p = fs::temp_directory_path() /
                       ("mwnet_cli_" + std::to_string(::getpid()) + "_" +
                        std::to_string(counter++));
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void spit(const fs::path& p, const std::string& text) {
    std::ofstream os(p, std::ios::binary);
    os << text;
    REQUIRE(os.good());
}

struct CliRun {
    int code = -1;
    std::string out;
    std::string err;
};

CliRun run_cli(const std::string& args, const std::string& env_prefix = "") {
    const fs::path dir = scratch_dir();
    const fs::path so = dir / "stdout.txt";
    const fs::path se = dir / "stderr.txt";
    const std::string cmd = env_prefix + "\"" + cli_path() + "\" " + args + " > \"" +
                            so.string() + "\" 2> \"" + se.string() + "\"";
    const int status = std::system(cmd.c_str());
    CliRun r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(so);
    r.err = slurp(se);
    return r;
}

// tiny cohort + light fit settings shared by the pipeline tests
json desk_config(int n_subjects, int n_echoes) {
    json cfg;
    cfg["simulate"] = {{"n_subjects", n_subjects},
                       {"voxels_per_subject", 24},
                       {"n_echoes", n_echoes},
                       {"noise_sd", 2.0}};
    cfg["fit"] = {{"flip_lo", 120.0}, {"flip_step", 10.0}, {"n_basis", 40}};
    return cfg;
}

fs::path write_config(const json& cfg) {
    const fs::path p = scratch_dir() / "config.json";
    spit(p, cfg.dump(2) + "\n");
    return p;
}

// one simulated cube reused across cases needing an input volume
const fs::path& tiny_cube_path() {
    static const fs::path path = [] {
        const fs::path out = scratch_dir() / "cohort";
        const fs::path cfg = write_config(desk_config(1, 8));
        const CliRun r = run_cli("simulate --config \"" + cfg.string() + "\" --out \"" +
                                 out.string() + "\" --seed 42");
        REQUIRE(r.code == 0);
        return out / "subject_000.ecube";
    }();
    return path;
}

} // namespace

TEST_CASE("config-init writes a complete default configuration") {
    const fs::path out = scratch_dir() / "mwnet.json";
    const CliRun r = run_cli("config-init --out \"" + out.string() + "\"");
    REQUIRE(r.code == 0);
    REQUIRE(r.out.find("wrote default config") != std::string::npos);

    const json cfg = json::parse(slurp(out));
    for (const char* key : {"seed", "workers", "simulate", "fit", "train", "evaluate", "bench"})
        REQUIRE(cfg.contains(key));
    REQUIRE(cfg["simulate"]["n_subjects"] == 10);
    REQUIRE(cfg["simulate"]["tukey_coefficient"] == 0.0);
    REQUIRE(cfg["fit"]["n_basis"] == 120);
    REQUIRE(cfg["fit"]["flip_step"] == 1.0);
    REQUIRE(cfg["train"]["profile"] == "fast");
    REQUIRE(cfg["bench"]["reps"] == 10);

    // the emitted file is itself a valid config
    const fs::path sim_out = scratch_dir() / "echo";
    json smaller = cfg;
    smaller["simulate"]["n_subjects"] = 1;
    smaller["simulate"]["voxels_per_subject"] = 8;
    smaller["simulate"]["n_echoes"] = 4;
    const fs::path cfg2 = write_config(smaller);
    REQUIRE(run_cli("simulate --config \"" + cfg2.string() + "\" --out \"" + sim_out.string() +
                    "\"")
                .code == 0);
}

TEST_CASE("simulate writes a loadable cohort with manifest and provenance") {
    const fs::path out = scratch_dir() / "cohort";
    const fs::path cfg = write_config(desk_config(2, 8));
    const CliRun r = run_cli("simulate --config \"" + cfg.string() + "\" --out \"" +
                             out.string() + "\" --seed 42");
    REQUIRE(r.code == 0);
    REQUIRE(r.out.find("wrote 2 subjects") != std::string::npos);

    const json manifest = json::parse(slurp(out / "cohort.json"));
    REQUIRE(manifest["n_subjects"] == 2);
    REQUIRE(manifest["seed"] == 42);
    REQUIRE(manifest["files"].size() == 2);
    for (const auto& f : manifest["files"]) {
        const EchoCube cube = load_echo_cube((out / f["file"].get<std::string>()).string());
        REQUIRE(cube.n_voxels() == 24);
        REQUIRE(cube.n_echoes == 8);
        REQUIRE(cube.truth.size() == 24); // truth sidecar rides along
        REQUIRE(cube.subject_kind == f["subject_kind"].get<std::string>());
    }

    const json resolved = json::parse(slurp(out / "resolved_config.json"));
    REQUIRE(resolved["command"] == "simulate");
    REQUIRE(resolved["seed"] == 42);
    REQUIRE(resolved["simulate"]["noise_sd"] == 2.0);
}

TEST_CASE("seeded simulate reruns are byte-identical") {
    const fs::path cfg = write_config(desk_config(1, 8));
    auto simulate = [&](const std::string& extra_args, const std::string& env) {
        const fs::path out = scratch_dir() / "run";
        const CliRun r = run_cli("simulate --config \"" + cfg.string() + "\" --out \"" +
                                     out.string() + "\" " + extra_args,
                                 env);
        REQUIRE(r.code == 0);
        return slurp(out / "subject_000.ecube");
    };

    const std::string a = simulate("--seed 7", "");
    const std::string b = simulate("--seed 7", "");
    REQUIRE(a == b);

    // MWNET_SEED supplies the seed; the --seed flag still wins over it
    REQUIRE(simulate("", "MWNET_SEED=7 ") == a);
    REQUIRE(simulate("--seed 7", "MWNET_SEED=9 ") == a);
    REQUIRE(simulate("--seed 8", "") != a);

    // worker fan-out must not change the cohort bytes
    REQUIRE(simulate("--seed 7 --workers 3", "") == a);
}

TEST_CASE("fit emits maps, distributions, timing, and a status summary") {
    const fs::path out = scratch_dir() / "fitdir";
    const fs::path cfg = write_config(desk_config(1, 8));
    const CliRun r = run_cli("fit --config \"" + cfg.string() + "\" --cube \"" +
                             tiny_cube_path().string() + "\" --out \"" + out.string() + "\"");
    REQUIRE(r.code == 0);
    REQUIRE(r.out.find("fit 24 voxels") != std::string::npos);
    REQUIRE(r.out.find("converged") != std::string::npos);

    for (const char* name : {"mwf.mwmap", "gmt2.mwmap", "flip.mwmap", "extras.mwmap",
                             "dist.mwdist", "timing.json", "resolved_config.json"})
        REQUIRE(fs::exists(out / name));

    const MapVolume mwf = load_map_volume((out / "mwf.mwmap").string());
    REQUIRE(mwf.field("mwf").size() == 24);
    for (double v : mwf.field("mwf")) REQUIRE((std::isfinite(v) || std::isnan(v)));

    const DistVolume dist = load_dist_volume((out / "dist.mwdist").string());
    REQUIRE(dist.n_basis == 40);
    REQUIRE(dist.amplitudes.size() == 24u * 40u);

    const MapVolume extras = load_map_volume((out / "extras.mwmap").string());
    REQUIRE(extras.has_field("chi2"));
    REQUIRE(extras.has_field("chi2_min"));
    REQUIRE(extras.has_field("mu"));

    const json timing = json::parse(slurp(out / "timing.json"));
    REQUIRE(timing["voxel_count"] == 24);
    REQUIRE(timing["wall_seconds"].get<double>() > 0.0);
}

TEST_CASE("infer writes head-appropriate maps that match the library") {
    const EchoCube cube = load_echo_cube(tiny_cube_path().string());

    const MlpNet<float> mwf_model = make_mlp<float>({8, 16, 1}, HeadKind::scalar_mwf, 5);
    const fs::path model_path = scratch_dir() / "model.mwnet";
    save_model(mwf_model, model_path.string());

    const fs::path out = scratch_dir() / "infer";
    const CliRun r = run_cli("infer --model \"" + model_path.string() + "\" --cube \"" +
                             tiny_cube_path().string() + "\" --out \"" + out.string() + "\"");
    REQUIRE(r.code == 0);
    REQUIRE(r.out.find("inferred 24 voxels") != std::string::npos);
    REQUIRE(fs::exists(out / "mwf.mwmap"));
    REQUIRE_FALSE(fs::exists(out / "gmt2.mwmap")); // scalar MWF head has no T2 output

    const MapVolume cli_map = load_map_volume((out / "mwf.mwmap").string());
    const InferResult lib = infer_volume(mwf_model, cube, 1);
    REQUIRE(cli_map.field("mwf").size() == lib.mwf_map.size());
    for (std::size_t v = 0; v < lib.mwf_map.size(); ++v)
        REQUIRE_THAT(cli_map.field("mwf")[v], Catch::Matchers::WithinRel(lib.mwf_map[v], 1e-9));

    // distribution head: both scalar maps plus the amplitude volume
    const MlpNet<float> dist_model = make_mlp<float>({8, 12, 120}, HeadKind::distribution, 6);
    const fs::path dist_path = scratch_dir() / "dist_model.mwnet";
    save_model(dist_model, dist_path.string());
    const fs::path out2 = scratch_dir() / "infer_dist";
    REQUIRE(run_cli("infer --model \"" + dist_path.string() + "\" --cube \"" +
                    tiny_cube_path().string() + "\" --out \"" + out2.string() + "\"")
                .code == 0);
    REQUIRE(fs::exists(out2 / "mwf.mwmap"));
    REQUIRE(fs::exists(out2 / "gmt2.mwmap"));
    REQUIRE(fs::exists(out2 / "dist.mwdist"));
}

TEST_CASE("train auto-splits subjects and saves a loadable model") {
    const fs::path cohort = scratch_dir() / "cohort32";
    json cfg = desk_config(3, 32);
    cfg["train"] = {{"max_epochs", 3}, {"early_stop_patience", 3}};
    const fs::path cfg_path = write_config(cfg);
    REQUIRE(run_cli("simulate --config \"" + cfg_path.string() + "\" --out \"" +
                    cohort.string() + "\" --seed 12")
                .code == 0);

    std::string cube_args;
    for (int i = 0; i < 3; ++i)
        cube_args += " \"" + (cohort / ("subject_00" + std::to_string(i) + ".ecube")).string() +
                     "\"";

    const fs::path out = scratch_dir() / "train";
    const CliRun r = run_cli("train --config \"" + cfg_path.string() + "\" --cubes" + cube_args +
                             " --head mwf --out \"" + out.string() + "\" --seed 12");
    INFO(r.err);
    REQUIRE(r.code == 0);
    REQUIRE(r.out.find("auto split:") != std::string::npos);
    REQUIRE(r.out.find("trained scalar_mwf head") != std::string::npos);

    const MlpNet<float> model = load_model((out / "model.mwnet").string());
    REQUIRE(model.head_kind == HeadKind::scalar_mwf);
    REQUIRE(model.input_dim() == 32);
    REQUIRE(model.layer_dims == paper_layer_dims(HeadKind::scalar_mwf));

    const std::string log = slurp(out / "train_log.csv");
    REQUIRE(log.rfind("epoch,", 0) == 0);
    REQUIRE(std::count(log.begin(), log.end(), '\n') == 4); // header + 3 epochs

    const json resolved = json::parse(slurp(out / "resolved_config.json"));
    REQUIRE(resolved["command"] == "train");
    REQUIRE(resolved["train"]["max_epochs"] == 3);
    REQUIRE(resolved["n_train_samples"].get<int>() > 0);
}

TEST_CASE("train reuses precomputed labels when label directories are given") {
    const fs::path cohort = scratch_dir() / "cohort32b";
    json cfg = desk_config(1, 32);
    cfg["train"] = {{"max_epochs", 2}, {"early_stop_patience", 2}};
    const fs::path cfg_path = write_config(cfg);
    REQUIRE(run_cli("simulate --config \"" + cfg_path.string() + "\" --out \"" +
                    cohort.string() + "\" --seed 13")
                .code == 0);
    const fs::path cube = cohort / "subject_000.ecube";

    const fs::path fitdir = scratch_dir() / "labels";
    REQUIRE(run_cli("fit --config \"" + cfg_path.string() + "\" --cube \"" + cube.string() +
                    "\" --out \"" + fitdir.string() + "\"")
                .code == 0);

    const fs::path out = scratch_dir() / "train_labels";
    const CliRun r = run_cli("train --config \"" + cfg_path.string() + "\" --cubes \"" +
                             cube.string() + "\" --val-cubes \"" + cube.string() +
                             "\" --labels \"" + fitdir.string() + "\" --val-labels \"" +
                             fitdir.string() + "\" --head gmt2 --out \"" + out.string() +
                             "\" --seed 13");
    INFO(r.err);
    REQUIRE(r.code == 0);
    REQUIRE(load_model((out / "model.mwnet").string()).head_kind == HeadKind::scalar_gmt2);

    // mismatched label list length is a config error
    const CliRun bad = run_cli("train --cubes \"" + cube.string() + "\" --val-cubes \"" +
                               cube.string() + "\" --labels \"" + fitdir.string() + "\" \"" +
                               fitdir.string() + "\" --head mwf --out \"" +
                               (scratch_dir() / "x").string() + "\"");
    REQUIRE(bad.code == 2);
}

TEST_CASE("evaluate compares maps and optionally renders svg plots") {
    const std::array<int, 3> dims{5, 4, 3};
    const std::size_t n = 60;
    MapVolume ref;
    ref.dims = dims;
    std::vector<double> rv(n), pv(n);
    for (std::size_t i = 0; i < n; ++i) {
        rv[i] = 0.05 + 0.002 * static_cast<double>(i);
        pv[i] = rv[i] * 1.02 + 1e-4;
    }
    ref.fields = {{"mwf", rv}};
    ref.mask.assign(n, 1);
    ref.status.assign(n, 0);
    MapVolume pred = ref;
    pred.fields = {{"mwf", pv}};
    const fs::path ref_path = scratch_dir() / "ref.mwmap";
    const fs::path pred_path = scratch_dir() / "pred.mwmap";
    save_map_volume(ref, ref_path.string());
    save_map_volume(pred, pred_path.string());

    const fs::path out = scratch_dir() / "eval";
    const CliRun r = run_cli("evaluate --pred \"" + pred_path.string() + "\" --ref \"" +
                             ref_path.string() + "\" --svg --out \"" + out.string() + "\"");
    REQUIRE(r.code == 0);
    REQUIRE(r.out.find("nrmse") != std::string::npos);

    const std::string csv = slurp(out / "report.csv");
    REQUIRE(csv.rfind(comparison_csv_header(), 0) == 0);
    REQUIRE(std::count(csv.begin(), csv.end(), '\n') == 2);
    REQUIRE(slurp(out / "scatter.svg").find("<svg") != std::string::npos);
    REQUIRE(slurp(out / "bland_altman.svg").find("<svg") != std::string::npos);

    // disjoint masks leave nothing to compare
    MapVolume other = ref;
    other.mask.assign(n, 0);
    const fs::path other_path = scratch_dir() / "other.mwmap";
    save_map_volume(other, other_path.string());
    const CliRun degen = run_cli("evaluate --pred \"" + pred_path.string() + "\" --ref \"" +
                                 other_path.string() + "\" --out \"" +
                                 (scratch_dir() / "x").string() + "\"");
    REQUIRE(degen.code == 5);
}

TEST_CASE("evaluate drives a named experiment from saved artifacts") {
    const fs::path fitdir = scratch_dir() / "conv";
    const fs::path cfg = write_config(desk_config(1, 8));
    REQUIRE(run_cli("fit --config \"" + cfg.string() + "\" --cube \"" +
                    tiny_cube_path().string() + "\" --out \"" + fitdir.string() + "\"")
                .code == 0);

    const MlpNet<float> model = make_mlp<float>({8, 16, 1}, HeadKind::scalar_mwf, 9);
    const fs::path model_path = scratch_dir() / "model.mwnet";
    save_model(model, model_path.string());

    const fs::path out = scratch_dir() / "ladder";
    const CliRun r = run_cli("evaluate --experiment noise_ladder --model \"" +
                             model_path.string() + "\" --cubes \"" + tiny_cube_path().string() +
                             "\" --conv \"" + fitdir.string() + "\" --config \"" + cfg.string() +
                             "\" --out \"" + out.string() + "\" --seed 3");
    INFO(r.err);
    REQUIRE(r.code == 0);
    REQUIRE(r.out.find("experiment noise_ladder: 6 rows") != std::string::npos);

    const std::string csv = slurp(out / "noise_ladder.csv");
    REQUIRE(csv.rfind("level,sd,method,metric,n_voxels,nrmse_percent", 0) == 0);
    REQUIRE(std::count(csv.begin(), csv.end(), '\n') == 7); // header + 6 rows

    const CliRun bad = run_cli("evaluate --experiment no_such_thing --model \"" +
                               model_path.string() + "\" --cubes \"" +
                               tiny_cube_path().string() + "\" --conv \"" + fitdir.string() +
                               "\" --out \"" + (scratch_dir() / "x").string() + "\"");
    REQUIRE(bad.code == 2);
    REQUIRE(bad.err.find("unknown experiment") != std::string::npos);
}

TEST_CASE("bench reports timings for both pipelines") {
    const MlpNet<float> model = make_mlp<float>({8, 16, 1}, HeadKind::scalar_mwf, 4);
    const fs::path model_path = scratch_dir() / "model.mwnet";
    save_model(model, model_path.string());

    const fs::path out = scratch_dir() / "bench";
    const fs::path cfg = write_config(desk_config(1, 8));
    const CliRun r = run_cli("bench --config \"" + cfg.string() + "\" --cube \"" +
                             tiny_cube_path().string() + "\" --model \"" + model_path.string() +
                             "\" --reps 1 --bench-workers 1 --out \"" + out.string() + "\"");
    INFO(r.err);
    REQUIRE(r.code == 0);
    REQUIRE(r.out.find("speedup") != std::string::npos);

    const json bench = json::parse(slurp(out / "bench.json"));
    REQUIRE(bench["voxel_count"] == 24);
    REQUIRE(bench["reps"] == 1);
    REQUIRE(bench["entries"].size() == 2);
    REQUIRE(bench["speedup"].get<double>() > 0.0);
    REQUIRE_FALSE(bench["hardware"].get<std::string>().empty());
}

TEST_CASE("failures map to the documented exit codes") {
    // 3: missing input file
    const CliRun missing = run_cli("fit --cube /nonexistent.ecube --out \"" +
                                   (scratch_dir() / "x").string() + "\"");
    REQUIRE(missing.code == 3);
    REQUIRE(missing.err.find("error:") != std::string::npos);

    // 2: malformed JSON, reported with the parse position
    const fs::path broken = scratch_dir() / "broken.json";
    spit(broken, "{\"fit\": {\n");
    const CliRun parse = run_cli("simulate --config \"" + broken.string() + "\" --out \"" +
                                 (scratch_dir() / "x").string() + "\"");
    REQUIRE(parse.code == 2);
    REQUIRE(parse.err.find("config error") != std::string::npos);
    REQUIRE(parse.err.find("line") != std::string::npos);
    REQUIRE(parse.err.find("column") != std::string::npos);

    // 2: unknown config key, named with its section
    const fs::path typo = write_config(json{{"simulate", {{"n_subject", 2}}}});
    const CliRun unknown = run_cli("simulate --config \"" + typo.string() + "\" --out \"" +
                                   (scratch_dir() / "x").string() + "\"");
    REQUIRE(unknown.code == 2);
    REQUIRE(unknown.err.find("unknown config key 'simulate.n_subject'") != std::string::npos);

    // 4: dimension mismatch between model and cube
    const MlpNet<float> wide = make_mlp<float>({16, 8, 1}, HeadKind::scalar_mwf, 2);
    const fs::path wide_path = scratch_dir() / "wide.mwnet";
    save_model(wide, wide_path.string());
    const CliRun dims = run_cli("infer --model \"" + wide_path.string() + "\" --cube \"" +
                                tiny_cube_path().string() + "\" --out \"" +
                                (scratch_dir() / "x").string() + "\"");
    REQUIRE(dims.code == 4);

    // 2: command-line parse errors; 0: --help
    REQUIRE(run_cli("frobnicate").code == 2);
    REQUIRE(run_cli("simulate").code == 2); // --out is required
    const CliRun help = run_cli("--help");
    REQUIRE(help.code == 0);
    REQUIRE(help.out.find("simulate") != std::string::npos);

    // 2: bad seed environment value
    const CliRun env = run_cli("simulate --out \"" + (scratch_dir() / "x").string() + "\"",
                               "MWNET_SEED=abc ");
    REQUIRE(env.code == 2);
    REQUIRE(env.err.find("MWNET_SEED") != std::string::npos);
}
