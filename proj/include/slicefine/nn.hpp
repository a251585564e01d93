#pragma once

#include <cmath>
#include <cstddef>
#include <fstream>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "slicefine/matrix.hpp"
#include "slicefine/rng.hpp"

namespace slicefine {

enum class Activation { Identity, Relu, Tanh, Gelu };
enum class LossKind { CrossEntropy, Mse };

inline const char* to_string(Activation a) {
    switch (a) {
        case Activation::Identity: return "identity";
        case Activation::Relu: return "relu";
        case Activation::Tanh: return "tanh";
        case Activation::Gelu: return "gelu";
    }
    return "?";
}

inline Activation activation_from_string(const std::string& s) {
    if (s == "identity") return Activation::Identity;
    if (s == "relu") return Activation::Relu;
    if (s == "tanh") return Activation::Tanh;
    if (s == "gelu") return Activation::Gelu;
    throw std::invalid_argument("unknown activation: '" + s + "'");
}

inline const char* to_string(LossKind k) {
    return k == LossKind::CrossEntropy ? "cross_entropy" : "mse";
}

inline LossKind loss_from_string(const std::string& s) {
    if (s == "cross_entropy") return LossKind::CrossEntropy;
    if (s == "mse") return LossKind::Mse;
    throw std::invalid_argument("unknown loss: '" + s + "'");
}

// Gaussian-CDF form of GELU (the exact one, not the tanh approximation, so
// the analytic derivative below matches finite differences tightly).
inline double gelu(double x) {
    return x * 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
}
inline double gelu_grad(double x) {
    double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
    double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
}

inline double apply_activation(Activation a, double x) {
    switch (a) {
        case Activation::Identity: return x;
        case Activation::Relu: return x > 0.0 ? x : 0.0;
        case Activation::Tanh: return std::tanh(x);
        case Activation::Gelu: return gelu(x);
    }
    return x;
}

inline double activation_grad(Activation a, double x) {
    switch (a) {
        case Activation::Identity: return 1.0;
        case Activation::Relu: return x > 0.0 ? 1.0 : 0.0;
        case Activation::Tanh: {
            double t = std::tanh(x);
            return 1.0 - t * t;
        }
        case Activation::Gelu: return gelu_grad(x);
    }
    return 1.0;
}

struct Layer {
    Matrix W;  // out x in
    Vector b;  // out
    Activation act = Activation::Identity;

    std::size_t in_dim() const { return W.cols(); }
    std::size_t out_dim() const { return W.rows(); }
};

// Fully-connected stack. The last layer is the head (produces logits or
// regression outputs); everything before it is the backbone whose weight
// matrices the slice machinery operates on. Samples live in columns
// throughout: a batch is d x n.
struct Network {
    std::vector<Layer> layers;

    std::size_t depth() const { return layers.size(); }
    std::size_t in_dim() const { return layers.front().in_dim(); }
    std::size_t out_dim() const { return layers.back().out_dim(); }
    std::size_t hidden_count() const { return layers.size() - 1; }
    Layer& head() { return layers.back(); }
    const Layer& head() const { return layers.back(); }

    // dims = {d_in, h_1, ..., h_k, d_out}; acts has one entry per layer.
    // Weights start at N(0, 1/in_dim) per entry, biases at zero.
    static Network init(const std::vector<std::size_t>& dims,
                        const std::vector<Activation>& acts, Rng& rng) {
        if (dims.size() < 2) throw std::invalid_argument("Network::init: need >= 2 dims");
        if (acts.size() != dims.size() - 1)
            throw std::invalid_argument("Network::init: one activation per layer");
        for (std::size_t d : dims)
            if (d == 0) throw std::invalid_argument("Network::init: zero layer width");
        Network net;
        for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
            Layer layer;
            layer.W = Matrix(dims[l + 1], dims[l]);
            double s = 1.0 / std::sqrt(double(dims[l]));
            for (std::size_t i = 0; i < layer.W.rows(); ++i)
                for (std::size_t j = 0; j < layer.W.cols(); ++j)
                    layer.W(i, j) = s * rng.normal();
            layer.b = Vector(dims[l + 1], 0.0);
            layer.act = acts[l];
            net.layers.push_back(std::move(layer));
        }
        return net;
    }
};

// Per-layer records from one forward pass. activations[0] is the input
// batch; activations[l+1] is the output of layer l, so activations.back()
// holds the logits when the head activation is identity.
struct ForwardTrace {
    std::vector<Matrix> pre;          // pre[l] = W_l a_l + b_l
    std::vector<Matrix> activations;  // size depth()+1
    const Matrix& logits() const { return activations.back(); }
};

inline ForwardTrace forward(const Network& net, const Matrix& x) {
    if (x.rows() != net.in_dim())
        throw std::invalid_argument("forward: input rows != network input dim");
    ForwardTrace t;
    t.activations.push_back(x);
    for (const Layer& layer : net.layers) {
        Matrix z = matmul(layer.W, t.activations.back());
        for (std::size_t i = 0; i < z.rows(); ++i)
            for (std::size_t j = 0; j < z.cols(); ++j) z(i, j) += layer.b[i];
        Matrix a(z.rows(), z.cols());
        for (std::size_t i = 0; i < z.rows(); ++i)
            for (std::size_t j = 0; j < z.cols(); ++j)
                a(i, j) = apply_activation(layer.act, z(i, j));
        t.pre.push_back(std::move(z));
        t.activations.push_back(std::move(a));
    }
    return t;
}

// Column-wise stable softmax.
inline Matrix softmax(const Matrix& logits) {
    Matrix p(logits.rows(), logits.cols());
    for (std::size_t j = 0; j < logits.cols(); ++j) {
        double mx = logits(0, j);
        for (std::size_t i = 1; i < logits.rows(); ++i) mx = std::max(mx, logits(i, j));
        double sum = 0.0;
        for (std::size_t i = 0; i < logits.rows(); ++i) {
            double e = std::exp(logits(i, j) - mx);
            p(i, j) = e;
            sum += e;
        }
        for (std::size_t i = 0; i < logits.rows(); ++i) p(i, j) /= sum;
    }
    return p;
}

// Mean cross-entropy over the batch, via log-sum-exp.
inline double cross_entropy(const Matrix& logits, const std::vector<std::size_t>& labels) {
    if (labels.size() != logits.cols())
        throw std::invalid_argument("cross_entropy: one label per column");
    double total = 0.0;
    for (std::size_t j = 0; j < logits.cols(); ++j) {
        if (labels[j] >= logits.rows())
            throw std::invalid_argument("cross_entropy: label out of range at sample " +
                                        std::to_string(j));
        double mx = logits(0, j);
        for (std::size_t i = 1; i < logits.rows(); ++i) mx = std::max(mx, logits(i, j));
        double lse = 0.0;
        for (std::size_t i = 0; i < logits.rows(); ++i) lse += std::exp(logits(i, j) - mx);
        total += std::log(lse) + mx - logits(labels[j], j);
    }
    return total / double(logits.cols());
}

// Mean over samples of the squared error summed over output dims.
inline double mse(const Matrix& pred, const Matrix& target) {
    if (!pred.same_shape(target))
        throw std::invalid_argument("mse: prediction/target shape mismatch");
    double total = 0.0;
    for (std::size_t i = 0; i < pred.rows(); ++i)
        for (std::size_t j = 0; j < pred.cols(); ++j) {
            double d = pred(i, j) - target(i, j);
            total += d * d;
        }
    return total / double(pred.cols());
}

// Targets for either loss; exactly one side is used per batch.
struct Targets {
    LossKind kind = LossKind::CrossEntropy;
    std::vector<std::size_t> labels;  // CrossEntropy
    Matrix values;                    // Mse, out_dim x n

    static Targets classes(std::vector<std::size_t> y) {
        Targets t;
        t.kind = LossKind::CrossEntropy;
        t.labels = std::move(y);
        return t;
    }
    static Targets regression(Matrix y) {
        Targets t;
        t.kind = LossKind::Mse;
        t.values = std::move(y);
        return t;
    }
};

inline double loss_value(const Matrix& logits, const Targets& t) {
    return t.kind == LossKind::CrossEntropy ? cross_entropy(logits, t.labels)
                                            : mse(logits, t.values);
}

// Gradient of the mean loss at the logits; d/d logits, one column per sample.
inline Matrix loss_grad_logits(const Matrix& logits, const Targets& t) {
    const double n = double(logits.cols());
    if (t.kind == LossKind::CrossEntropy) {
        Matrix g = softmax(logits);
        for (std::size_t j = 0; j < logits.cols(); ++j) g(t.labels[j], j) -= 1.0;
        g *= 1.0 / n;
        return g;
    }
    Matrix g = logits;
    g -= t.values;
    g *= 2.0 / n;
    return g;
}

struct BackwardResult {
    std::vector<Matrix> dW;
    std::vector<Vector> db;
    // d_activation[l] = gradient of the mean loss w.r.t. the OUTPUT of layer
    // l (i.e. activations[l+1]); d_activation.back() is the logits gradient.
    std::vector<Matrix> d_activation;
};

inline BackwardResult backward(const Network& net, const ForwardTrace& t, const Targets& tg) {
    const std::size_t L = net.depth();
    BackwardResult out;
    out.dW.resize(L);
    out.db.resize(L);
    out.d_activation.resize(L);

    Matrix d_act = loss_grad_logits(t.logits(), tg);
    for (std::size_t li = L; li-- > 0;) {
        out.d_activation[li] = d_act;
        const Layer& layer = net.layers[li];
        // through the activation
        Matrix d_pre = d_act;
        for (std::size_t i = 0; i < d_pre.rows(); ++i)
            for (std::size_t j = 0; j < d_pre.cols(); ++j)
                d_pre(i, j) *= activation_grad(layer.act, t.pre[li](i, j));
        out.dW[li] = matmul(d_pre, t.activations[li].transposed());
        Vector db(layer.out_dim(), 0.0);
        for (std::size_t i = 0; i < d_pre.rows(); ++i)
            for (std::size_t j = 0; j < d_pre.cols(); ++j) db[i] += d_pre(i, j);
        out.db[li] = std::move(db);
        if (li > 0) d_act = matmul(layer.W.transposed(), d_pre);
    }
    return out;
}

inline double loss_on(const Network& net, const Matrix& x, const Targets& t) {
    return loss_value(forward(net, x).logits(), t);
}

// Jacobian of layer l's output features for a single input, taken w.r.t. the
// listed weight entries of that same layer. One column per entry, in the
// order given (callers pass slice entries in row-major order). Entry (i,j)
// contributes act'(z_i) * a_j on feature row i and zero elsewhere.
inline Matrix feature_jacobian_wrt_entries(
    const Network& net, const Vector& x, std::size_t layer,
    const std::vector<std::pair<std::size_t, std::size_t>>& entries) {
    if (layer >= net.depth())
        throw std::invalid_argument("feature_jacobian: layer index out of range");
    Matrix xm(x.size(), 1);
    for (std::size_t i = 0; i < x.size(); ++i) xm(i, 0) = x[i];
    ForwardTrace t = forward(net, xm);
    const Matrix& z = t.pre[layer];
    const Matrix& a_in = t.activations[layer];
    const std::size_t d = net.layers[layer].out_dim();
    Matrix J(d, entries.size());
    for (std::size_t c = 0; c < entries.size(); ++c) {
        auto [i, j] = entries[c];
        if (i >= d || j >= net.layers[layer].in_dim())
            throw std::invalid_argument("feature_jacobian: entry out of range");
        J(i, c) = activation_grad(net.layers[layer].act, z(i, 0)) * a_in(j, 0);
    }
    return J;
}

// Per-sample gradient of the mean batch loss w.r.t. layer `layer`'s output
// features; d_l x n.
inline Matrix feature_gradient(const Network& net, const Matrix& x, const Targets& tg,
                               std::size_t layer) {
    if (layer >= net.depth())
        throw std::invalid_argument("feature_gradient: layer index out of range");
    ForwardTrace t = forward(net, x);
    BackwardResult b = backward(net, t, tg);
    return b.d_activation[layer];
}

// ---- checkpoints ------------------------------------------------------------
// JSON with each weight matrix as decimal CSV rows; numbers go through the
// shortest-round-trip formatter so a save/load cycle reproduces every bit.

inline nlohmann::json network_to_json(const Network& net) {
    nlohmann::json j;
    j["layers"] = nlohmann::json::array();
    for (const Layer& layer : net.layers) {
        nlohmann::json lj;
        lj["in"] = layer.in_dim();
        lj["out"] = layer.out_dim();
        lj["activation"] = to_string(layer.act);
        nlohmann::json rows = nlohmann::json::array();
        for (std::size_t i = 0; i < layer.W.rows(); ++i) {
            std::string row;
            for (std::size_t c = 0; c < layer.W.cols(); ++c) {
                if (c) row += ',';
                row += format_double(layer.W(i, c));
            }
            rows.push_back(row);
        }
        lj["weights"] = rows;
        std::string bias;
        for (std::size_t i = 0; i < layer.b.size(); ++i) {
            if (i) bias += ',';
            bias += format_double(layer.b[i]);
        }
        lj["bias"] = bias;
        j["layers"].push_back(lj);
    }
    return j;
}

inline Network network_from_json(const nlohmann::json& j) {
    Network net;
    if (!j.contains("layers") || !j["layers"].is_array() || j["layers"].empty())
        throw std::invalid_argument("checkpoint: missing or empty 'layers'");
    for (const auto& lj : j["layers"]) {
        Layer layer;
        std::size_t in = lj.at("in").get<std::size_t>();
        std::size_t out = lj.at("out").get<std::size_t>();
        layer.act = activation_from_string(lj.at("activation").get<std::string>());
        layer.W = Matrix(out, in);
        const auto& rows = lj.at("weights");
        if (rows.size() != out) throw std::invalid_argument("checkpoint: weight row count");
        for (std::size_t i = 0; i < out; ++i) {
            Matrix row = from_csv(rows[i].get<std::string>() + "\n");
            if (row.cols() != in) throw std::invalid_argument("checkpoint: weight col count");
            for (std::size_t c = 0; c < in; ++c) layer.W(i, c) = row(0, c);
        }
        Matrix bias = from_csv(lj.at("bias").get<std::string>() + "\n");
        if (bias.cols() != out) throw std::invalid_argument("checkpoint: bias length");
        layer.b = bias.row(0);
        net.layers.push_back(std::move(layer));
    }
    if (!net.layers.empty()) {
        for (std::size_t l = 0; l + 1 < net.layers.size(); ++l)
            if (net.layers[l].out_dim() != net.layers[l + 1].in_dim())
                throw std::invalid_argument("checkpoint: layer dims do not chain");
    }
    return net;
}

inline void save_checkpoint(const Network& net, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
    f << network_to_json(net).dump(2) << '\n';
}

inline Network load_checkpoint(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument("load_checkpoint: bad JSON in " + path + ": " + e.what());
    }
    return network_from_json(j);
}

// Fraction of columns whose argmax logit equals the label.
inline double accuracy(const Matrix& logits, const std::vector<std::size_t>& labels) {
    if (labels.size() != logits.cols())
        throw std::invalid_argument("accuracy: one label per column");
    std::size_t hits = 0;
    for (std::size_t j = 0; j < logits.cols(); ++j) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < logits.rows(); ++i)
            if (logits(i, j) > logits(best, j)) best = i;
        if (best == labels[j]) ++hits;
    }
    return double(hits) / double(logits.cols());
}

}  // namespace slicefine
