#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "mwnet/common.hpp"

namespace mwnet {

enum class HeadKind : std::uint8_t { scalar_mwf = 0, scalar_gmt2 = 1, distribution = 2 };

inline const char* to_string(HeadKind h) {
    switch (h) {
        case HeadKind::scalar_mwf: return "scalar_mwf";
        case HeadKind::scalar_gmt2: return "scalar_gmt2";
        case HeadKind::distribution: return "distribution";
    }
    return "unknown";
}

inline HeadKind head_kind_from_string(const std::string& s) {
    if (s == "scalar_mwf") return HeadKind::scalar_mwf;
    if (s == "scalar_gmt2") return HeadKind::scalar_gmt2;
    if (s == "distribution") return HeadKind::distribution;
    throw ParameterError("unknown head kind: " + s);
}

inline std::vector<int> paper_layer_dims(HeadKind head) {
    std::vector<int> dims{32, 160, 240, 320, 360, 480, 520, 600};
    dims.push_back(head == HeadKind::distribution ? 120 : 1);
    return dims;
}

// Dense feed-forward network, leaky-rectifier hidden layers, linear output.
// T is float in deployment; double instantiations back the gradient oracle.
template <typename T>
struct MlpNet {
    using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
    using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

    std::vector<int> layer_dims;
    std::vector<Matrix> weights; // [out x in] per layer
    std::vector<Vector> biases;
    T leaky_slope = T(0.2);
    HeadKind head_kind = HeadKind::scalar_mwf;
    std::uint64_t seed = 0;
    std::string profile_fingerprint;

    int n_layers() const { return static_cast<int>(weights.size()); }
    int input_dim() const { return layer_dims.empty() ? 0 : layer_dims.front(); }
    int output_dim() const { return layer_dims.empty() ? 0 : layer_dims.back(); }

    void validate() const {
        if (layer_dims.size() < 2) throw ParameterError("MlpNet: need at least two layer dims");
        if (weights.size() + 1 != layer_dims.size() || biases.size() != weights.size())
            throw DimensionError("MlpNet: layer count mismatch");
        for (std::size_t l = 0; l < weights.size(); ++l) {
            if (weights[l].rows() != layer_dims[l + 1] || weights[l].cols() != layer_dims[l])
                throw DimensionError("MlpNet: weight shape mismatch at layer " +
                                     std::to_string(l));
            if (biases[l].size() != layer_dims[l + 1])
                throw DimensionError("MlpNet: bias shape mismatch at layer " + std::to_string(l));
        }
        if (!(leaky_slope >= T(0))) throw ParameterError("MlpNet: negative leaky slope");
    }
};

// Zero-mean Gaussian init with variance 2/fan_in, zero biases. Draws come
// from one seeded stream in a fixed order (layer-major, row-major), so the
// same seed yields the same network in every precision.
template <typename T>
inline MlpNet<T> make_mlp(const std::vector<int>& layer_dims, HeadKind head, std::uint64_t seed,
                          T leaky_slope = T(0.2)) {
    if (layer_dims.size() < 2) throw ParameterError("make_mlp: need at least two layer dims");
    for (int d : layer_dims)
        if (d < 1) throw ParameterError("make_mlp: nonpositive layer dim");
    using Matrix = typename MlpNet<T>::Matrix;
    using Vector = typename MlpNet<T>::Vector;
    MlpNet<T> net;
    net.layer_dims = layer_dims;
    net.head_kind = head;
    net.seed = seed;
    net.leaky_slope = leaky_slope;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (std::size_t l = 0; l + 1 < layer_dims.size(); ++l) {
        const int fan_in = layer_dims[l], fan_out = layer_dims[l + 1];
        const double sd = std::sqrt(2.0 / fan_in);
        Matrix w(fan_out, fan_in);
        for (int r = 0; r < fan_out; ++r)
            for (int c = 0; c < fan_in; ++c) w(r, c) = static_cast<T>(sd * gauss(rng));
        net.weights.push_back(std::move(w));
        net.biases.push_back(Vector::Zero(fan_out));
    }
    return net;
}

template <typename T>
inline MlpNet<T> make_paper_mlp(HeadKind head, std::uint64_t seed) {
    return make_mlp<T>(paper_layer_dims(head), head, seed);
}

namespace detail {

template <typename T>
inline void leaky_inplace(Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>& z, T slope) {
    z = z.array().max(z.array() * slope).matrix();
}

} // namespace detail

// Raw forward pass: hidden leaky activations, linear output, no clamping.
// This is the training-time output; inference-time clamping for the
// distribution head is applied by forward() below.
template <typename T>
inline Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>
forward_raw(const MlpNet<T>& net, const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>& input) {
    if (input.rows() != net.input_dim())
        throw DimensionError("forward: input dim " + std::to_string(input.rows()) +
                             " != model input dim " + std::to_string(net.input_dim()));
    Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic> a = input;
    for (int l = 0; l < net.n_layers(); ++l) {
        Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic> z = net.weights[l] * a;
        z.colwise() += net.biases[l];
        if (l + 1 < net.n_layers()) detail::leaky_inplace(z, net.leaky_slope);
        a = std::move(z);
    }
    return a;
}

// Inference output: distribution heads clamp negative coefficients to zero;
// scalar heads pass through unchanged.
template <typename T>
inline Eigen::Matrix<T, Eigen::Dynamic, 1> forward(const MlpNet<T>& net,
                                                   const Eigen::Matrix<T, Eigen::Dynamic, 1>& x) {
    Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic> out = forward_raw<T>(net, x);
    if (net.head_kind == HeadKind::distribution)
        out = out.array().max(T(0)).matrix();
    return out.col(0);
}

// Forward pass retaining activations, plus backpropagation of the batch-mean
// squared error. Gradients are exact for the raw (unclamped) outputs.
template <typename T>
struct MlpWorkspace {
    using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
    std::vector<Matrix> acts;   // acts[0] = input, acts[l] = activation after layer l-1
    Matrix out;                 // raw network output
    std::vector<Matrix> grad_w; // same shapes as net.weights
    std::vector<Eigen::Matrix<T, Eigen::Dynamic, 1>> grad_b;
    Matrix delta, delta_prev;

    void ensure_shapes(const MlpNet<T>& net) {
        const int L = net.n_layers();
        acts.resize(static_cast<std::size_t>(L)); // acts[0..L-1]; out kept separately
        if (static_cast<int>(grad_w.size()) != L) {
            grad_w.assign(static_cast<std::size_t>(L), Matrix());
            grad_b.assign(static_cast<std::size_t>(L),
                          Eigen::Matrix<T, Eigen::Dynamic, 1>());
            for (int l = 0; l < L; ++l) {
                grad_w[static_cast<std::size_t>(l)].resizeLike(net.weights[static_cast<std::size_t>(l)]);
                grad_b[static_cast<std::size_t>(l)].resizeLike(net.biases[static_cast<std::size_t>(l)]);
            }
        }
    }
};

template <typename T>
inline const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>&
forward_train(const MlpNet<T>& net, const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>& input,
              MlpWorkspace<T>& ws) {
    if (input.rows() != net.input_dim()) throw DimensionError("forward_train: input dim mismatch");
    ws.ensure_shapes(net);
    const int L = net.n_layers();
    ws.acts[0] = input;
    for (int l = 0; l < L; ++l) {
        Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>& dst =
            (l + 1 < L) ? ws.acts[static_cast<std::size_t>(l + 1)] : ws.out;
        dst.noalias() = net.weights[static_cast<std::size_t>(l)] * ws.acts[static_cast<std::size_t>(l)];
        dst.colwise() += net.biases[static_cast<std::size_t>(l)];
        if (l + 1 < L) detail::leaky_inplace(dst, net.leaky_slope);
    }
    return ws.out;
}

// Mean squared error over all outputs and batch columns.
template <typename T>
inline double mse_loss(const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>& out,
                       const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>& labels) {
    if (out.rows() != labels.rows() || out.cols() != labels.cols())
        throw DimensionError("mse_loss: shape mismatch");
    const double n = static_cast<double>(out.size());
    return (out - labels).template cast<double>().squaredNorm() / n;
}

// Backprop of d(mse_loss)/d(params); call after forward_train on same batch.
template <typename T>
inline void backward(const MlpNet<T>& net,
                     const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>& labels,
                     MlpWorkspace<T>& ws) {
    const int L = net.n_layers();
    const T scale = T(2) / static_cast<T>(ws.out.size());
    ws.delta = scale * (ws.out - labels);
    for (int l = L - 1; l >= 0; --l) {
        const auto& a_prev = ws.acts[static_cast<std::size_t>(l)];
        ws.grad_w[static_cast<std::size_t>(l)].noalias() = ws.delta * a_prev.transpose();
        ws.grad_b[static_cast<std::size_t>(l)] = ws.delta.rowwise().sum();
        if (l > 0) {
            ws.delta_prev.noalias() = net.weights[static_cast<std::size_t>(l)].transpose() * ws.delta;
            // activation derivative from the stored activation's sign
            const auto& act = ws.acts[static_cast<std::size_t>(l)];
            ws.delta = (act.array() > T(0))
                           .select(ws.delta_prev.array(), ws.delta_prev.array() * net.leaky_slope)
                           .matrix();
        }
    }
}

// --- MWNET1 serialization ------------------------------------------------
// One UTF-8 JSON header line, then per layer the row-major f32 weight blob
// followed by the f32 bias blob. Round-trips byte-exactly for float models.

class ModelHeaderError : public IoError {
public:
    using IoError::IoError;
};
class ModelDimensionError : public IoError {
public:
    using IoError::IoError;
};
class ModelTruncatedError : public IoError {
public:
    using IoError::IoError;
};

inline void save_model(const MlpNet<float>& net, const std::string& path) {
    net.validate();
    nlohmann::json header{{"magic", "MWNET1"},
                          {"head_kind", to_string(net.head_kind)},
                          {"layer_dims", net.layer_dims},
                          {"leaky_slope", static_cast<double>(net.leaky_slope)},
                          {"seed", net.seed},
                          {"profile", net.profile_fingerprint}};
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    const std::string h = header.dump() + "\n";
    os.write(h.data(), static_cast<std::streamsize>(h.size()));
    std::vector<float> buf;
    for (std::size_t l = 0; l < net.weights.size(); ++l) {
        const auto& w = net.weights[l];
        buf.resize(static_cast<std::size_t>(w.size()));
        for (int r = 0; r < w.rows(); ++r) // row-major on disk
            for (int c = 0; c < w.cols(); ++c)
                buf[static_cast<std::size_t>(r) * static_cast<std::size_t>(w.cols()) +
                    static_cast<std::size_t>(c)] = w(r, c);
        os.write(reinterpret_cast<const char*>(buf.data()),
                 static_cast<std::streamsize>(buf.size() * sizeof(float)));
        os.write(reinterpret_cast<const char*>(net.biases[l].data()),
                 static_cast<std::streamsize>(static_cast<std::size_t>(net.biases[l].size()) *
                                              sizeof(float)));
    }
    if (!os) throw IoError("write failed: " + path);
}

inline MlpNet<float> load_model(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw MissingInputError("model not found: " + path);
    std::string header;
    if (!std::getline(is, header)) throw ModelHeaderError("missing header line: " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(header);
    } catch (const nlohmann::json::parse_error& e) {
        throw ModelHeaderError("corrupt header in " + path + ": " + e.what());
    }
    if (j.value("magic", "") != std::string("MWNET1"))
        throw ModelHeaderError("bad magic in " + path);
    MlpNet<float> net;
    try {
        net.layer_dims = j.at("layer_dims").get<std::vector<int>>();
        net.head_kind = head_kind_from_string(j.at("head_kind").get<std::string>());
        net.leaky_slope = static_cast<float>(j.at("leaky_slope").get<double>());
        net.seed = j.at("seed").get<std::uint64_t>();
        net.profile_fingerprint = j.value("profile", "");
    } catch (const nlohmann::json::exception& e) {
        throw ModelHeaderError("incomplete header in " + path + ": " + e.what());
    }
    if (net.layer_dims.size() < 2)
        throw ModelDimensionError("header declares fewer than two layers: " + path);
    for (int d : net.layer_dims)
        if (d < 1) throw ModelDimensionError("header declares nonpositive layer dim: " + path);
    std::vector<float> buf;
    for (std::size_t l = 0; l + 1 < net.layer_dims.size(); ++l) {
        const int rows = net.layer_dims[l + 1], cols = net.layer_dims[l];
        buf.resize(static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols));
        is.read(reinterpret_cast<char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(float)));
        if (static_cast<std::size_t>(is.gcount()) != buf.size() * sizeof(float))
            throw ModelTruncatedError("weight blob truncated at layer " + std::to_string(l) +
                                      ": " + path);
        MlpNet<float>::Matrix w(rows, cols);
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c)
                w(r, c) = buf[static_cast<std::size_t>(r) * static_cast<std::size_t>(cols) +
                              static_cast<std::size_t>(c)];
        MlpNet<float>::Vector b(rows);
        is.read(reinterpret_cast<char*>(b.data()),
                static_cast<std::streamsize>(static_cast<std::size_t>(rows) * sizeof(float)));
        if (static_cast<std::size_t>(is.gcount()) != static_cast<std::size_t>(rows) * sizeof(float))
            throw ModelTruncatedError("bias blob truncated at layer " + std::to_string(l) + ": " +
                                      path);
        net.weights.push_back(std::move(w));
        net.biases.push_back(std::move(b));
    }
    if (is.peek() != std::ifstream::traits_type::eof())
        throw ModelDimensionError("payload larger than declared dims: " + path);
    net.validate();
    return net;
}

} // namespace mwnet
