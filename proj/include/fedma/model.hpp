#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedma/rng.hpp"
#include "fedma/tensor.hpp"

namespace fedma {

enum class LayerKind { FullyConnected, Conv2d, MaxPool, Lstm, Embedding, Dropout };
enum class Activation { ReLU, Tanh, Sigmoid, Identity, Softmax };

inline const char* kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::FullyConnected: return "fc";
        case LayerKind::Conv2d: return "conv";
        case LayerKind::MaxPool: return "pool";
        case LayerKind::Lstm: return "lstm";
        case LayerKind::Embedding: return "emb";
        case LayerKind::Dropout: return "dropout";
    }
    return "?";
}

struct LayerSpec {
    LayerKind kind = LayerKind::FullyConnected;
    Activation act = Activation::Identity;
    std::string name;

    // FullyConnected / Embedding: in -> out (Embedding: in = vocab size, out = embedding dim)
    // Conv2d: in = C_in, out = C_out; MaxPool: kernel/stride only
    // Lstm: in = input dim D, out = hidden states L, gates = cell-state count S
    std::int64_t in = 0, out = 0;
    std::int64_t kh = 0, kw = 0, stride = 1, pad = 0;
    std::int64_t gates = 4;
    double dropout_rate = 0.0;

    bool has_weights() const {
        return kind == LayerKind::FullyConnected || kind == LayerKind::Conv2d ||
               kind == LayerKind::Lstm || kind == LayerKind::Embedding;
    }

    static LayerSpec fc(std::int64_t in, std::int64_t out, Activation a, std::string name = "") {
        LayerSpec s;
        s.kind = LayerKind::FullyConnected;
        s.in = in; s.out = out; s.act = a; s.name = std::move(name);
        return s;
    }
    static LayerSpec conv(std::int64_t cin, std::int64_t cout, std::int64_t k, std::int64_t stride,
                          std::int64_t pad, Activation a, std::string name = "") {
        LayerSpec s;
        s.kind = LayerKind::Conv2d;
        s.in = cin; s.out = cout; s.kh = k; s.kw = k; s.stride = stride; s.pad = pad;
        s.act = a; s.name = std::move(name);
        return s;
    }
    static LayerSpec maxpool(std::int64_t k, std::int64_t stride) {
        LayerSpec s;
        s.kind = LayerKind::MaxPool;
        s.kh = k; s.kw = k; s.stride = stride;
        return s;
    }
    static LayerSpec lstm(std::int64_t input_dim, std::int64_t hidden, std::int64_t gates = 4,
                          std::string name = "") {
        LayerSpec s;
        s.kind = LayerKind::Lstm;
        s.in = input_dim; s.out = hidden; s.gates = gates; s.name = std::move(name);
        return s;
    }
    static LayerSpec embedding(std::int64_t vocab, std::int64_t dim, std::string name = "") {
        LayerSpec s;
        s.kind = LayerKind::Embedding;
        s.in = vocab; s.out = dim; s.name = std::move(name);
        return s;
    }
    static LayerSpec dropout(double rate) {
        LayerSpec s;
        s.kind = LayerKind::Dropout;
        s.dropout_rate = rate;
        return s;
    }
};

// Ordered layers plus their weight tensors. Weight layout per kind:
//   FullyConnected: { W (in x out), b (out) }          forward: y = x W + b
//   Conv2d:         { W (C_in, kh, kw, C_out), b (C_out) }
//   Lstm:           { W_ih (S*L x D), W_hh (S*L x L), b_ih (S*L), b_hh (S*L) }
//                   gate blocks stacked as (input, forget, cell, output)
//   Embedding:      { W (vocab x dim) }
struct NetworkModel {
    std::vector<std::int64_t> input_shape;  // per-example shape, e.g. {1,28,28} or {T}
    std::vector<LayerSpec> layers;
    std::vector<std::vector<Tensor>> weights;

    std::size_t layer_count() const { return layers.size(); }

    std::vector<std::size_t> weighted_layers() const {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < layers.size(); ++i)
            if (layers[i].has_weights()) idx.push_back(i);
        return idx;
    }

    // index of the n-th weighted layer
    std::size_t weighted_index(std::size_t n) const {
        auto wl = weighted_layers();
        if (n >= wl.size()) throw DimensionError("weighted layer index out of range");
        return wl[n];
    }

    std::size_t weighted_count() const { return weighted_layers().size(); }

    std::int64_t param_count() const {
        std::int64_t n = 0;
        for (const auto& lw : weights)
            for (const auto& t : lw) n += t.numel();
        return n;
    }

    std::int64_t layer_param_count(std::size_t layer) const {
        std::int64_t n = 0;
        for (const auto& t : weights.at(layer)) n += t.numel();
        return n;
    }

    bool same_architecture(const NetworkModel& o) const {
        if (layers.size() != o.layers.size()) return false;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            if (layers[i].kind != o.layers[i].kind) return false;
            if (layers[i].act != o.layers[i].act) return false;
        }
        return true;
    }
};

namespace detail {

inline std::vector<Tensor> alloc_layer_weights(const LayerSpec& s) {
    switch (s.kind) {
        case LayerKind::FullyConnected:
            return {Tensor({s.in, s.out}), Tensor({s.out})};
        case LayerKind::Conv2d:
            return {Tensor({s.in, s.kh, s.kw, s.out}), Tensor({s.out})};
        case LayerKind::Lstm:
            return {Tensor({s.gates * s.out, s.in}), Tensor({s.gates * s.out, s.out}),
                    Tensor({s.gates * s.out}), Tensor({s.gates * s.out})};
        case LayerKind::Embedding:
            return {Tensor({s.in, s.out})};
        default:
            return {};
    }
}

// (fan_in, fan_out) of a weight tensor in its 2-d reading
inline std::pair<std::int64_t, std::int64_t> fans(const LayerSpec& s, std::size_t t) {
    switch (s.kind) {
        case LayerKind::FullyConnected: return {s.in, s.out};
        case LayerKind::Conv2d: return {s.in * s.kh * s.kw, s.out * s.kh * s.kw};
        case LayerKind::Lstm: return t == 0 ? std::pair{s.in, s.gates * s.out}
                                            : std::pair{s.out, s.gates * s.out};
        case LayerKind::Embedding: return {s.in, s.out};
        default: return {1, 1};
    }
}

}  // namespace detail

// Propagates the per-example shape through every layer, validating adjacency.
// Returns the output shape of each layer (index-aligned with model.layers).
inline std::vector<std::vector<std::int64_t>> infer_shapes(const NetworkModel& m) {
    std::vector<std::vector<std::int64_t>> out;
    std::vector<std::int64_t> cur = m.input_shape;
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        const LayerSpec& s = m.layers[i];
        switch (s.kind) {
            case LayerKind::FullyConnected: {
                std::int64_t flat = 1;
                for (auto e : cur) flat *= e;
                if (flat != s.in)
                    throw DimensionError("fc layer '" + s.name + "' expects " + std::to_string(s.in) +
                                         " inputs, got " + std::to_string(flat));
                cur = {s.out};
                break;
            }
            case LayerKind::Conv2d: {
                if (cur.size() != 3 || cur[0] != s.in)
                    throw DimensionError("conv layer '" + s.name + "' input shape mismatch");
                const std::int64_t oh = (cur[1] + 2 * s.pad - s.kh) / s.stride + 1;
                const std::int64_t ow = (cur[2] + 2 * s.pad - s.kw) / s.stride + 1;
                if (oh <= 0 || ow <= 0) throw DimensionError("conv output collapses to zero");
                cur = {s.out, oh, ow};
                break;
            }
            case LayerKind::MaxPool: {
                if (cur.size() != 3) throw DimensionError("maxpool needs (C,H,W) input");
                cur = {cur[0], (cur[1] - s.kh) / s.stride + 1, (cur[2] - s.kw) / s.stride + 1};
                break;
            }
            case LayerKind::Lstm: {
                // input (T, D) or (T) of embedded ids handled by Embedding before
                if (cur.size() != 2 || cur[1] != s.in)
                    throw DimensionError("lstm layer '" + s.name + "' input shape mismatch");
                cur = {s.out};  // final hidden state
                break;
            }
            case LayerKind::Embedding: {
                if (cur.size() != 1) throw DimensionError("embedding expects (T) id sequence");
                cur = {cur[0], s.out};
                break;
            }
            case LayerKind::Dropout:
                break;
        }
        out.push_back(cur);
    }
    if (m.layers.size() < 2 && m.weighted_count() < 1)
        throw DimensionError("model needs at least one weighted layer");
    return out;
}

inline void validate_model(const NetworkModel& m) {
    if (m.layers.size() != m.weights.size()) throw DimensionError("layer/weight list mismatch");
    infer_shapes(m);
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        auto expect = detail::alloc_layer_weights(m.layers[i]);
        if (expect.size() != m.weights[i].size())
            throw DimensionError("layer '" + m.layers[i].name + "' weight tensor count mismatch");
        for (std::size_t t = 0; t < expect.size(); ++t)
            if (expect[t].shape != m.weights[i][t].shape)
                throw DimensionError("layer '" + m.layers[i].name + "' weight shape mismatch: got " +
                                     m.weights[i][t].shape_str() + ", want " + expect[t].shape_str());
    }
}

// uniform(-a, a), a = sqrt(6/(fan_in+fan_out)); biases start at zero
inline void init_weights(NetworkModel& m, std::uint64_t seed) {
    Rng rng(seed);
    m.weights.assign(m.layers.size(), {});
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        m.weights[i] = detail::alloc_layer_weights(m.layers[i]);
        for (std::size_t t = 0; t < m.weights[i].size(); ++t) {
            Tensor& w = m.weights[i][t];
            if (w.rank() == 1) continue;  // bias
            auto [fi, fo] = detail::fans(m.layers[i], t);
            const double a = std::sqrt(6.0 / static_cast<double>(fi + fo));
            for (auto& v : w.data) v = rng.uniform(-a, a);
        }
    }
}

// ---- model builders ----------------------------------------------------

inline NetworkModel make_lenet(std::int64_t in_channels = 1, std::int64_t image_hw = 28,
                               std::int64_t classes = 10) {
    NetworkModel m;
    m.input_shape = {in_channels, image_hw, image_hw};
    m.layers = {
        LayerSpec::conv(in_channels, 20, 5, 1, 0, Activation::ReLU, "conv1"),
        LayerSpec::maxpool(2, 2),
        LayerSpec::conv(20, 50, 5, 1, 0, Activation::ReLU, "conv2"),
        LayerSpec::maxpool(2, 2),
    };
    const std::int64_t side = ((image_hw - 4) / 2 - 4) / 2;
    m.layers.push_back(LayerSpec::fc(50 * side * side, 500, Activation::ReLU, "fc1"));
    m.layers.push_back(LayerSpec::fc(500, classes, Activation::Softmax, "fc2"));
    m.weights.assign(m.layers.size(), {});
    for (std::size_t i = 0; i < m.layers.size(); ++i) m.weights[i] = detail::alloc_layer_weights(m.layers[i]);
    return m;
}

inline NetworkModel make_mlp(std::int64_t in_dim, const std::vector<std::int64_t>& hidden,
                             std::int64_t classes) {
    NetworkModel m;
    m.input_shape = {in_dim};
    std::int64_t cur = in_dim;
    int k = 1;
    for (auto h : hidden) {
        m.layers.push_back(LayerSpec::fc(cur, h, Activation::ReLU, "fc" + std::to_string(k++)));
        cur = h;
    }
    m.layers.push_back(LayerSpec::fc(cur, classes, Activation::Softmax, "fc" + std::to_string(k)));
    m.weights.assign(m.layers.size(), {});
    for (std::size_t i = 0; i < m.layers.size(); ++i) m.weights[i] = detail::alloc_layer_weights(m.layers[i]);
    return m;
}

inline NetworkModel make_char_lstm(std::int64_t vocab, std::int64_t seq_len,
                                   std::int64_t embed_dim = 8, std::int64_t hidden = 32) {
    NetworkModel m;
    m.input_shape = {seq_len};
    m.layers = {
        LayerSpec::embedding(vocab, embed_dim, "encoder"),
        LayerSpec::lstm(embed_dim, hidden, 4, "lstm"),
        LayerSpec::fc(hidden, vocab, Activation::Softmax, "decoder"),
    };
    m.weights.assign(m.layers.size(), {});
    for (std::size_t i = 0; i < m.layers.size(); ++i) m.weights[i] = detail::alloc_layer_weights(m.layers[i]);
    return m;
}

}  // namespace fedma
