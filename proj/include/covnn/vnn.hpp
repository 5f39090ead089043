#pragma once

// Covariance neural network: stacked MIMO graph-perceptron layers where each
// layer applies a bank of polynomial covariance filters, sums over input
// channels, adds a per-output-channel bias, and passes through a pointwise
// 1-Lipschitz nonlinearity. The scalar readout averages the final layer over
// channels and regions, which makes trained taps reusable at any data
// dimension (transfer_eval).

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "covnn/covariance.hpp"
#include "covnn/errors.hpp"
#include "covnn/gsp.hpp"
#include "covnn/matrix.hpp"
#include "covnn/rng.hpp"
#include "covnn/sha256.hpp"

namespace covnn {

enum class Nonlinearity { relu, tanh };

inline const char* to_string(Nonlinearity nl) {
    return nl == Nonlinearity::relu ? "relu" : "tanh";
}

inline Nonlinearity nonlinearity_from_string(const std::string& s) {
    if (s == "relu") return Nonlinearity::relu;
    if (s == "tanh") return Nonlinearity::tanh;
    throw ConfigError("unknown nonlinearity '" + s + "' (expected relu or tanh)");
}

struct VnnConfig {
    std::size_t layers = 2;
    std::vector<std::size_t> taps_per_layer = {2, 6};  // taps, i.e. filter order + 1
    std::vector<std::size_t> widths = {1, 12, 12};     // channel counts, layers + 1 entries
    Nonlinearity nonlinearity = Nonlinearity::relu;
    bool final_linear = false;  // skip the nonlinearity on the last layer
};

inline void validate(const VnnConfig& cfg) {
    if (cfg.layers == 0) throw ConfigError("vnn: need at least one layer");
    if (cfg.taps_per_layer.size() != cfg.layers)
        throw ConfigError("vnn: taps_per_layer must have one entry per layer");
    if (cfg.widths.size() != cfg.layers + 1)
        throw ConfigError("vnn: widths must have layers + 1 entries");
    for (std::size_t t : cfg.taps_per_layer)
        if (t == 0) throw ConfigError("vnn: every layer needs at least one tap");
    for (std::size_t w : cfg.widths)
        if (w == 0) throw ConfigError("vnn: channel widths must be positive");
}

struct LayerParams {
    // w[f_out][f_in] holds the K+1 taps of one scalar filter.
    std::vector<std::vector<Vector>> w;
    Vector bias;  // one per output channel, added before the nonlinearity
};

struct VnnModel {
    VnnConfig config;
    std::vector<LayerParams> layers;
    std::uint64_t rng_seed = 0;
};

using VnnGradients = std::vector<LayerParams>;

inline std::size_t parameter_count(const VnnConfig& cfg) {
    validate(cfg);
    std::size_t count = 0;
    for (std::size_t l = 0; l < cfg.layers; ++l)
        count += cfg.taps_per_layer[l] * cfg.widths[l] * cfg.widths[l + 1] + cfg.widths[l + 1];
    return count;
}

// Uniform [-a, a] tap init with a = sqrt(6 / ((K+1) * (F_in + F_out))); biases
// start at zero. Draw order is fixed (layer, f_out, f_in, tap) so a seed pins
// every parameter.
inline VnnModel vnn_init(const VnnConfig& cfg, std::uint64_t seed) {
    validate(cfg);
    VnnModel model;
    model.config = cfg;
    model.rng_seed = seed;
    Rng rng(derive_seed(seed, {0x76696e69}));
    model.layers.resize(cfg.layers);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const std::size_t kp1 = cfg.taps_per_layer[l];
        const std::size_t fin = cfg.widths[l];
        const std::size_t fout = cfg.widths[l + 1];
        const double a = std::sqrt(6.0 / (static_cast<double>(kp1) * static_cast<double>(fin + fout)));
        auto& layer = model.layers[l];
        layer.w.assign(fout, std::vector<Vector>(fin, Vector(kp1, 0.0)));
        layer.bias.assign(fout, 0.0);
        for (std::size_t f = 0; f < fout; ++f)
            for (std::size_t g = 0; g < fin; ++g)
                for (std::size_t k = 0; k < kp1; ++k) layer.w[f][g][k] = rng.uniform(-a, a);
    }
    return model;
}

// Everything the backward pass needs: per-layer shift stacks C^k x for every
// input channel, pre-activations, and post-activation outputs.
struct VnnForwardTrace {
    std::size_t dim = 0;
    std::vector<std::vector<std::vector<Vector>>> shift_stacks;  // [layer][f_in][k] -> M
    std::vector<Matrix> preacts;                                 // [layer] M x F_out
    std::vector<Matrix> outputs;                                 // [layer] M x F_out
    Vector readout;                                              // p_x, length M
    double y_hat = 0.0;
};

namespace detail {

inline double activate(Nonlinearity nl, double z) {
    return nl == Nonlinearity::relu ? (z > 0.0 ? z : 0.0) : std::tanh(z);
}

// Derivative expressed through the stored output value (exact for both
// activations: relu' = 1[out > 0], tanh' = 1 - out^2).
inline double activate_grad(Nonlinearity nl, double out) {
    return nl == Nonlinearity::relu ? (out > 0.0 ? 1.0 : 0.0) : 1.0 - out * out;
}

inline bool layer_is_linear(const VnnConfig& cfg, std::size_t layer) {
    return cfg.final_linear && layer + 1 == cfg.layers;
}

}  // namespace detail

inline VnnForwardTrace vnn_forward(const VnnModel& model, const CovarianceGraph& cov,
                                   const Vector& x) {
    validate(model.config);
    check_signal(cov.op, x, "vnn_forward");
    const std::size_t m = cov.dim();
    const VnnConfig& cfg = model.config;

    VnnForwardTrace trace;
    trace.dim = m;
    trace.shift_stacks.resize(cfg.layers);
    trace.preacts.resize(cfg.layers);
    trace.outputs.resize(cfg.layers);

    std::vector<Vector> current = {x};  // channels of the running representation
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const std::size_t kp1 = cfg.taps_per_layer[l];
        const std::size_t fin = cfg.widths[l];
        const std::size_t fout = cfg.widths[l + 1];

        auto& stacks = trace.shift_stacks[l];
        stacks.assign(fin, std::vector<Vector>(kp1));
        for (std::size_t g = 0; g < fin; ++g) {
            stacks[g][0] = current[g];
            for (std::size_t k = 1; k < kp1; ++k)
                stacks[g][k] = matvec(cov.op.entries, stacks[g][k - 1]);
        }

        Matrix z(m, fout);
        for (std::size_t f = 0; f < fout; ++f) {
            Vector acc(m, model.layers[l].bias[f]);
            for (std::size_t g = 0; g < fin; ++g)
                for (std::size_t k = 0; k < kp1; ++k)
                    axpy(model.layers[l].w[f][g][k], stacks[g][k], acc);
            for (std::size_t i = 0; i < m; ++i) z(i, f) = acc[i];
        }
        trace.preacts[l] = z;

        Matrix out(m, fout);
        const bool linear = detail::layer_is_linear(cfg, l);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t f = 0; f < fout; ++f)
                out(i, f) = linear ? z(i, f) : detail::activate(cfg.nonlinearity, z(i, f));
        trace.outputs[l] = out;

        current.assign(fout, Vector(m, 0.0));
        for (std::size_t f = 0; f < fout; ++f)
            for (std::size_t i = 0; i < m; ++i) current[f][i] = out(i, f);
    }

    const std::size_t fl = cfg.widths.back();
    trace.readout.assign(m, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        double acc = 0.0;
        for (std::size_t f = 0; f < fl; ++f) acc += trace.outputs.back()(i, f);
        trace.readout[i] = acc / static_cast<double>(fl);
    }
    trace.y_hat = mean(trace.readout);
    return trace;
}

inline void check_trace(const VnnModel& model, const CovarianceGraph& cov,
                        const VnnForwardTrace& trace) {
    const VnnConfig& cfg = model.config;
    if (trace.dim != cov.dim())
        throw TraceMismatch("vnn_backward: trace dim " + std::to_string(trace.dim) +
                            " vs covariance dim " + std::to_string(cov.dim()));
    if (trace.shift_stacks.size() != cfg.layers || trace.outputs.size() != cfg.layers)
        throw TraceMismatch("vnn_backward: trace layer count disagrees with the model");
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        if (trace.shift_stacks[l].size() != cfg.widths[l] ||
            trace.shift_stacks[l][0].size() != cfg.taps_per_layer[l] ||
            trace.outputs[l].cols() != cfg.widths[l + 1] || trace.outputs[l].rows() != trace.dim)
            throw TraceMismatch("vnn_backward: trace shapes disagree with the model at layer " +
                                std::to_string(l));
    }
}

inline VnnGradients zero_gradients(const VnnConfig& cfg) {
    validate(cfg);
    VnnGradients grads(cfg.layers);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        grads[l].w.assign(cfg.widths[l + 1],
                          std::vector<Vector>(cfg.widths[l], Vector(cfg.taps_per_layer[l], 0.0)));
        grads[l].bias.assign(cfg.widths[l + 1], 0.0);
    }
    return grads;
}

// Exact reverse-mode gradients of dLoss_dy * y_hat with respect to every tap
// and bias, reusing the stored shift stacks. The covariance must be the one
// the trace was produced with.
inline VnnGradients vnn_backward(const VnnModel& model, const CovarianceGraph& cov,
                                 const VnnForwardTrace& trace, double dLoss_dy) {
    check_trace(model, cov, trace);
    const VnnConfig& cfg = model.config;
    const std::size_t m = trace.dim;

    VnnGradients grads = zero_gradients(cfg);

    // d y_hat / d outputs[L-1](i, f) = 1 / (M * F_L)
    const std::size_t fl = cfg.widths.back();
    Matrix g_out(m, fl, dLoss_dy / (static_cast<double>(m) * static_cast<double>(fl)));

    for (std::size_t l = cfg.layers; l-- > 0;) {
        const std::size_t kp1 = cfg.taps_per_layer[l];
        const std::size_t fin = cfg.widths[l];
        const std::size_t fout = cfg.widths[l + 1];
        const bool linear = detail::layer_is_linear(cfg, l);

        Matrix gz(m, fout);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t f = 0; f < fout; ++f)
                gz(i, f) = g_out(i, f) * (linear ? 1.0
                                                 : detail::activate_grad(cfg.nonlinearity,
                                                                         trace.outputs[l](i, f)));

        for (std::size_t f = 0; f < fout; ++f) {
            double bias_acc = 0.0;
            for (std::size_t i = 0; i < m; ++i) bias_acc += gz(i, f);
            grads[l].bias[f] = bias_acc;
        }

        for (std::size_t f = 0; f < fout; ++f) {
            Vector gzf(m);
            for (std::size_t i = 0; i < m; ++i) gzf[i] = gz(i, f);
            for (std::size_t g = 0; g < fin; ++g)
                for (std::size_t k = 0; k < kp1; ++k)
                    grads[l].w[f][g][k] = dot(gzf, trace.shift_stacks[l][g][k]);
        }

        if (l == 0) break;

        // Propagate to the previous layer's outputs using symmetry of C:
        // d/dx of <gz, C^k x> is C^k gz.
        Matrix g_prev(m, fin, 0.0);
        for (std::size_t f = 0; f < fout; ++f) {
            std::vector<Vector> gz_stack(kp1);
            gz_stack[0].resize(m);
            for (std::size_t i = 0; i < m; ++i) gz_stack[0][i] = gz(i, f);
            for (std::size_t k = 1; k < kp1; ++k)
                gz_stack[k] = matvec(cov.op.entries, gz_stack[k - 1]);
            for (std::size_t g = 0; g < fin; ++g)
                for (std::size_t k = 0; k < kp1; ++k) {
                    const double w = model.layers[l].w[f][g][k];
                    if (w == 0.0) continue;
                    for (std::size_t i = 0; i < m; ++i) g_prev(i, g) += w * gz_stack[k][i];
                }
        }
        g_out = g_prev;
    }
    return grads;
}

// Runs the trained taps against a different covariance graph (any dimension).
// The parameters are dimension-free, so this is exactly vnn_forward.
inline VnnForwardTrace transfer_eval(const VnnModel& model, const CovarianceGraph& cov2,
                                     const Vector& x2) {
    return vnn_forward(model, cov2, x2);
}

struct CovarianceFingerprint {
    std::size_t dimension = 0;
    std::string sha256;
    double scale = 1.0;
};

inline CovarianceFingerprint fingerprint(const CovarianceGraph& cov) {
    CovarianceFingerprint fp;
    fp.dimension = cov.dim();
    fp.sha256 = sha256_hex(cov.op.entries.data());
    fp.scale = cov.scale;
    return fp;
}

inline nlohmann::json model_to_json(const VnnModel& model, const CovarianceFingerprint& fp) {
    nlohmann::json taps = nlohmann::json::array();
    nlohmann::json biases = nlohmann::json::array();
    for (const auto& layer : model.layers) {
        taps.push_back(layer.w);
        biases.push_back(layer.bias);
    }
    return nlohmann::json{
        {"format", "covnn-model"},
        {"version", 1},
        {"config",
         {{"layers", model.config.layers},
          {"taps_per_layer", model.config.taps_per_layer},
          {"widths", model.config.widths},
          {"nonlinearity", to_string(model.config.nonlinearity)},
          {"final_linear", model.config.final_linear}}},
        {"taps", taps},
        {"biases", biases},
        {"seed", model.rng_seed},
        {"covariance",
         {{"dimension", fp.dimension}, {"sha256", fp.sha256}, {"scale", fp.scale}}}};
}

inline VnnModel model_from_json(const nlohmann::json& j, CovarianceFingerprint* fp_out = nullptr) {
    try {
        if (j.at("format").get<std::string>() != "covnn-model")
            throw ConfigError("model json: unexpected format tag");
        VnnModel model;
        const auto& cfg = j.at("config");
        model.config.layers = cfg.at("layers").get<std::size_t>();
        model.config.taps_per_layer = cfg.at("taps_per_layer").get<std::vector<std::size_t>>();
        model.config.widths = cfg.at("widths").get<std::vector<std::size_t>>();
        model.config.nonlinearity = nonlinearity_from_string(cfg.at("nonlinearity").get<std::string>());
        model.config.final_linear = cfg.at("final_linear").get<bool>();
        validate(model.config);
        model.rng_seed = j.at("seed").get<std::uint64_t>();
        const auto& taps = j.at("taps");
        const auto& biases = j.at("biases");
        if (taps.size() != model.config.layers || biases.size() != model.config.layers)
            throw ConfigError("model json: layer count disagrees with config");
        model.layers.resize(model.config.layers);
        for (std::size_t l = 0; l < model.config.layers; ++l) {
            model.layers[l].w = taps[l].get<std::vector<std::vector<Vector>>>();
            model.layers[l].bias = biases[l].get<Vector>();
            if (model.layers[l].w.size() != model.config.widths[l + 1] ||
                model.layers[l].bias.size() != model.config.widths[l + 1])
                throw ConfigError("model json: tap shapes disagree with config at layer " +
                                  std::to_string(l));
            for (const auto& per_in : model.layers[l].w) {
                if (per_in.size() != model.config.widths[l])
                    throw ConfigError("model json: tap shapes disagree with config at layer " +
                                      std::to_string(l));
                for (const auto& h : per_in)
                    if (h.size() != model.config.taps_per_layer[l])
                        throw ConfigError("model json: tap count disagrees with config at layer " +
                                          std::to_string(l));
            }
        }
        if (fp_out) {
            const auto& c = j.at("covariance");
            fp_out->dimension = c.at("dimension").get<std::size_t>();
            fp_out->sha256 = c.at("sha256").get<std::string>();
            fp_out->scale = c.at("scale").get<double>();
        }
        return model;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("model json: ") + e.what());
    }
}

// Flat parameter view in the canonical order (per layer: taps by (f_out,
// f_in, k), then biases). Used by the optimizer and finite-difference checks.
inline std::vector<double*> parameter_view(VnnModel& model) {
    std::vector<double*> view;
    view.reserve(parameter_count(model.config));
    for (auto& layer : model.layers) {
        for (auto& per_out : layer.w)
            for (auto& h : per_out)
                for (double& v : h) view.push_back(&v);
        for (double& b : layer.bias) view.push_back(&b);
    }
    return view;
}

inline std::vector<const double*> parameter_view(const VnnGradients& grads) {
    std::vector<const double*> view;
    for (const auto& layer : grads) {
        for (const auto& per_out : layer.w)
            for (const auto& h : per_out)
                for (const double& v : h) view.push_back(&v);
        for (const double& b : layer.bias) view.push_back(&b);
    }
    return view;
}

}  // namespace covnn
