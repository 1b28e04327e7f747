#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mwnet/common.hpp"

namespace mwnet {

// One ground-truth water pool: a Gaussian in log-T2.
struct PoolSpec {
    double center_t2 = 0.0; // ms
    double log_width = 0.0; // std of the Gaussian in log-T2
    double fraction = 0.0;  // share of total voxel signal
};

enum class VoxelClass : std::uint8_t { healthy_wm = 0, lesion = 1, gm_like = 2 };

inline const char* to_string(VoxelClass c) {
    switch (c) {
        case VoxelClass::healthy_wm: return "healthy_wm";
        case VoxelClass::lesion: return "lesion";
        case VoxelClass::gm_like: return "gm_like";
    }
    return "unknown";
}

inline VoxelClass voxel_class_from_string(const std::string& s) {
    if (s == "healthy_wm") return VoxelClass::healthy_wm;
    if (s == "lesion") return VoxelClass::lesion;
    if (s == "gm_like") return VoxelClass::gm_like;
    throw ParameterError("unknown voxel class: " + s);
}

struct VoxelTruth {
    VoxelClass cls = VoxelClass::healthy_wm;
    PoolSpec myelin;
    PoolSpec iew;
    double scale = 0.0;    // signal units
    double flip_deg = 0.0; // true refocusing angle
    double true_mwf = 0.0;
    double true_gmt2 = 0.0; // ms
};

// Multi-echo volume. Signals are kept in double precision in memory so that
// scaling a cube by small constants is exact; on disk the payload is f32.
// Layout: voxel-major with the echo index innermost,
// signals[(x + nx*(y + ny*z)) * n_echoes + echo].
struct EchoCube {
    std::array<int, 3> dims{0, 0, 0};
    int n_echoes = 0;
    double te1_ms = 10.0;
    double esp_ms = 10.0;
    std::vector<double> signals;
    std::vector<std::uint8_t> mask;
    std::vector<VoxelTruth> truth; // empty, or one entry per voxel
    std::string subject_kind;      // "hc" / "ms" / "" for cohort bookkeeping

    std::size_t n_voxels() const {
        return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
    }

    Eigen::Map<const Eigen::VectorXd> voxel_curve(std::size_t v) const {
        return {signals.data() + v * static_cast<std::size_t>(n_echoes),
                static_cast<Eigen::Index>(n_echoes)};
    }

    void validate() const {
        if (dims[0] < 1 || dims[1] < 1 || dims[2] < 1)
            throw ParameterError("EchoCube: dims must be positive");
        if (n_echoes < 1) throw ParameterError("EchoCube: n_echoes must be >= 1");
        if (!(te1_ms > 0.0) || !(esp_ms > 0.0))
            throw ParameterError("EchoCube: te1 and echo spacing must be positive");
        if (signals.size() != n_voxels() * static_cast<std::size_t>(n_echoes))
            throw DimensionError("EchoCube: signal array size mismatch");
        if (mask.size() != n_voxels()) throw DimensionError("EchoCube: mask size mismatch");
        if (!truth.empty() && truth.size() != n_voxels())
            throw DimensionError("EchoCube: truth size mismatch");
        for (double s : signals)
            if (!std::isfinite(s)) throw ParameterError("EchoCube: non-finite signal");
    }
};

namespace detail {

inline void write_exact(std::ofstream& os, const void* data, std::size_t bytes) {
    os.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
    if (!os) throw IoError("write failed");
}

inline void read_exact(std::ifstream& is, void* data, std::size_t bytes, const char* what) {
    is.read(static_cast<char*>(data), static_cast<std::streamsize>(bytes));
    if (static_cast<std::size_t>(is.gcount()) != bytes)
        throw IoError(std::string("truncated payload reading ") + what);
}

inline std::string csv_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

} // namespace detail

// Truth sidecar CSV: voxel_index,class,true_mwf,true_gmt2,true_flip
inline void save_truth_csv(const EchoCube& cube, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open truth csv for writing: " + path);
    os << "voxel_index,class,true_mwf,true_gmt2,true_flip\n";
    for (std::size_t v = 0; v < cube.truth.size(); ++v) {
        const VoxelTruth& t = cube.truth[v];
        os << v << ',' << to_string(t.cls) << ',' << detail::csv_double(t.true_mwf) << ','
           << detail::csv_double(t.true_gmt2) << ',' << detail::csv_double(t.flip_deg) << '\n';
    }
    if (!os) throw IoError("write failed: " + path);
}

inline std::vector<VoxelTruth> load_truth_csv(const std::string& path, std::size_t n_voxels) {
    std::ifstream is(path);
    if (!is) throw MissingInputError("truth csv not found: " + path);
    std::string line;
    if (!std::getline(is, line)) throw IoError("empty truth csv: " + path);
    std::vector<VoxelTruth> truth(n_voxels);
    std::vector<bool> seen(n_voxels, false);
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string tok;
        VoxelTruth t;
        std::getline(ls, tok, ',');
        const std::size_t v = static_cast<std::size_t>(std::stoull(tok));
        if (v >= n_voxels) throw IoError("truth csv voxel index out of range: " + path);
        std::getline(ls, tok, ',');
        t.cls = voxel_class_from_string(tok);
        std::getline(ls, tok, ',');
        t.true_mwf = std::stod(tok);
        std::getline(ls, tok, ',');
        t.true_gmt2 = std::stod(tok);
        std::getline(ls, tok, ',');
        t.flip_deg = std::stod(tok);
        truth[v] = t;
        seen[v] = true;
    }
    for (std::size_t v = 0; v < n_voxels; ++v)
        if (!seen[v]) throw IoError("truth csv missing voxel " + std::to_string(v));
    return truth;
}

// ECUBE1 container: one-line JSON manifest, then the f32 little-endian signal
// payload (voxel-major, echo innermost), then the u8 mask. Truth, when
// present, lives in a sibling CSV referenced by the manifest.
inline void save_echo_cube(const EchoCube& cube, const std::string& path) {
    cube.validate();
    nlohmann::json manifest{
        {"magic", "ECUBE1"},
        {"dims", {cube.dims[0], cube.dims[1], cube.dims[2]}},
        {"n_echoes", cube.n_echoes},
        {"te1_ms", cube.te1_ms},
        {"esp_ms", cube.esp_ms},
        {"dtype", "f32le"},
        {"order", "voxel_major_echo_innermost"},
        {"mask", "u8"},
    };
    if (!cube.subject_kind.empty()) manifest["subject_kind"] = cube.subject_kind;
    std::string truth_name;
    if (!cube.truth.empty()) {
        truth_name = std::filesystem::path(path).filename().string() + ".truth.csv";
        manifest["truth_csv"] = truth_name;
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    const std::string header = manifest.dump() + "\n";
    detail::write_exact(os, header.data(), header.size());
    std::vector<float> payload(cube.signals.size());
    for (std::size_t i = 0; i < payload.size(); ++i)
        payload[i] = static_cast<float>(cube.signals[i]);
    detail::write_exact(os, payload.data(), payload.size() * sizeof(float));
    detail::write_exact(os, cube.mask.data(), cube.mask.size());
    if (!cube.truth.empty())
        save_truth_csv(cube, (std::filesystem::path(path).parent_path() / truth_name).string());
}

inline EchoCube load_echo_cube(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw MissingInputError("echo cube not found: " + path);
    std::string header;
    if (!std::getline(is, header)) throw IoError("missing manifest line: " + path);
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(header);
    } catch (const nlohmann::json::parse_error& e) {
        throw IoError("corrupt manifest in " + path + ": " + e.what());
    }
    if (manifest.value("magic", "") != std::string("ECUBE1"))
        throw IoError("bad magic in " + path);
    if (manifest.value("dtype", "") != std::string("f32le"))
        throw IoError("unsupported dtype in " + path);
    EchoCube cube;
    const auto dims = manifest.at("dims");
    if (!dims.is_array() || dims.size() != 3) throw IoError("bad dims in " + path);
    for (int i = 0; i < 3; ++i) cube.dims[i] = dims[static_cast<std::size_t>(i)].get<int>();
    cube.n_echoes = manifest.at("n_echoes").get<int>();
    cube.te1_ms = manifest.at("te1_ms").get<double>();
    cube.esp_ms = manifest.at("esp_ms").get<double>();
    cube.subject_kind = manifest.value("subject_kind", "");
    if (cube.dims[0] < 1 || cube.dims[1] < 1 || cube.dims[2] < 1 || cube.n_echoes < 1)
        throw IoError("bad geometry in " + path);
    const std::size_t nv = cube.n_voxels();
    std::vector<float> payload(nv * static_cast<std::size_t>(cube.n_echoes));
    detail::read_exact(is, payload.data(), payload.size() * sizeof(float), "signals");
    cube.signals.assign(payload.begin(), payload.end());
    cube.mask.resize(nv);
    detail::read_exact(is, cube.mask.data(), nv, "mask");
    if (manifest.contains("truth_csv")) {
        const auto truth_path = std::filesystem::path(path).parent_path() /
                                manifest["truth_csv"].get<std::string>();
        cube.truth = load_truth_csv(truth_path.string(), nv);
    }
    cube.validate();
    return cube;
}

// MWMAP1: named per-voxel scalar maps (f64le) plus mask and status bytes.
struct MapVolume {
    std::array<int, 3> dims{0, 0, 0};
    std::vector<std::pair<std::string, std::vector<double>>> fields;
    std::vector<std::uint8_t> mask;
    std::vector<std::uint8_t> status;

    std::size_t n_voxels() const {
        return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
    }

    const std::vector<double>& field(const std::string& name) const {
        for (const auto& f : fields)
            if (f.first == name) return f.second;
        throw ParameterError("MapVolume: no field named " + name);
    }

    bool has_field(const std::string& name) const {
        for (const auto& f : fields)
            if (f.first == name) return true;
        return false;
    }
};

inline void save_map_volume(const MapVolume& maps, const std::string& path) {
    const std::size_t nv = maps.n_voxels();
    if (nv == 0) throw ParameterError("save_map_volume: empty volume");
    for (const auto& f : maps.fields)
        if (f.second.size() != nv) throw DimensionError("save_map_volume: field size mismatch");
    if (maps.mask.size() != nv || maps.status.size() != nv)
        throw DimensionError("save_map_volume: mask/status size mismatch");
    nlohmann::json manifest{{"magic", "MWMAP1"},
                            {"dims", {maps.dims[0], maps.dims[1], maps.dims[2]}},
                            {"dtype", "f64le"},
                            {"mask", "u8"},
                            {"status", "u8"}};
    auto names = nlohmann::json::array();
    for (const auto& f : maps.fields) names.push_back(f.first);
    manifest["fields"] = names;
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    const std::string header = manifest.dump() + "\n";
    detail::write_exact(os, header.data(), header.size());
    for (const auto& f : maps.fields)
        detail::write_exact(os, f.second.data(), f.second.size() * sizeof(double));
    detail::write_exact(os, maps.mask.data(), nv);
    detail::write_exact(os, maps.status.data(), nv);
}

inline MapVolume load_map_volume(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw MissingInputError("map volume not found: " + path);
    std::string header;
    if (!std::getline(is, header)) throw IoError("missing manifest line: " + path);
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(header);
    } catch (const nlohmann::json::parse_error& e) {
        throw IoError("corrupt manifest in " + path + ": " + e.what());
    }
    if (manifest.value("magic", "") != std::string("MWMAP1"))
        throw IoError("bad magic in " + path);
    MapVolume maps;
    const auto dims = manifest.at("dims");
    for (int i = 0; i < 3; ++i) maps.dims[i] = dims[static_cast<std::size_t>(i)].get<int>();
    const std::size_t nv = maps.n_voxels();
    if (nv == 0) throw IoError("bad geometry in " + path);
    for (const auto& name : manifest.at("fields")) {
        std::vector<double> data(nv);
        detail::read_exact(is, data.data(), nv * sizeof(double), "map field");
        maps.fields.emplace_back(name.get<std::string>(), std::move(data));
    }
    maps.mask.resize(nv);
    detail::read_exact(is, maps.mask.data(), nv, "mask");
    maps.status.resize(nv);
    detail::read_exact(is, maps.status.data(), nv, "status");
    return maps;
}

// MWDIST1: per-voxel T2 distributions, f32le, voxel-major.
struct DistVolume {
    std::array<int, 3> dims{0, 0, 0};
    int n_basis = 0;
    double t2_min = 0.0, t2_max = 0.0;
    std::vector<float> amplitudes; // n_voxels * n_basis
    std::vector<std::uint8_t> mask;

    std::size_t n_voxels() const {
        return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
    }
};

inline void save_dist_volume(const DistVolume& dist, const std::string& path) {
    const std::size_t nv = dist.n_voxels();
    if (nv == 0 || dist.n_basis < 1) throw ParameterError("save_dist_volume: empty volume");
    if (dist.amplitudes.size() != nv * static_cast<std::size_t>(dist.n_basis))
        throw DimensionError("save_dist_volume: amplitude size mismatch");
    if (dist.mask.size() != nv) throw DimensionError("save_dist_volume: mask size mismatch");
    nlohmann::json manifest{{"magic", "MWDIST1"},
                            {"dims", {dist.dims[0], dist.dims[1], dist.dims[2]}},
                            {"n_basis", dist.n_basis},
                            {"t2_min", dist.t2_min},
                            {"t2_max", dist.t2_max},
                            {"dtype", "f32le"},
                            {"mask", "u8"}};
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    const std::string header = manifest.dump() + "\n";
    detail::write_exact(os, header.data(), header.size());
    detail::write_exact(os, dist.amplitudes.data(), dist.amplitudes.size() * sizeof(float));
    detail::write_exact(os, dist.mask.data(), nv);
}

inline DistVolume load_dist_volume(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw MissingInputError("distribution volume not found: " + path);
    std::string header;
    if (!std::getline(is, header)) throw IoError("missing manifest line: " + path);
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(header);
    } catch (const nlohmann::json::parse_error& e) {
        throw IoError("corrupt manifest in " + path + ": " + e.what());
    }
    if (manifest.value("magic", "") != std::string("MWDIST1"))
        throw IoError("bad magic in " + path);
    DistVolume dist;
    const auto dims = manifest.at("dims");
    for (int i = 0; i < 3; ++i) dist.dims[i] = dims[static_cast<std::size_t>(i)].get<int>();
    dist.n_basis = manifest.at("n_basis").get<int>();
    dist.t2_min = manifest.at("t2_min").get<double>();
    dist.t2_max = manifest.at("t2_max").get<double>();
    const std::size_t nv = dist.n_voxels();
    if (nv == 0 || dist.n_basis < 1) throw IoError("bad geometry in " + path);
    dist.amplitudes.resize(nv * static_cast<std::size_t>(dist.n_basis));
    detail::read_exact(is, dist.amplitudes.data(), dist.amplitudes.size() * sizeof(float),
                       "amplitudes");
    dist.mask.resize(nv);
    detail::read_exact(is, dist.mask.data(), nv, "mask");
    return dist;
}

} // namespace mwnet
