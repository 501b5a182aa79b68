#pragma once

// FMA1 checkpoint container: magic "FMA1", tensor count, then per tensor a
// UTF-8 name (u64 length + bytes), rank, extents and raw doubles, everything
// 64-bit little-endian. Round-trips bit-exactly.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "fedma/model.hpp"
#include "fedma/tensor.hpp"

namespace fedma {

struct CheckpointError : std::runtime_error {
    explicit CheckpointError(const std::string& what) : std::runtime_error(what) {}
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

namespace detail {

inline void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw CheckpointError("truncated checkpoint");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

inline void put_f64(std::ostream& os, double d) {
    std::uint64_t v;
    std::memcpy(&v, &d, 8);
    put_u64(os, v);
}

inline double get_f64(std::istream& is) {
    const std::uint64_t v = get_u64(is);
    double d;
    std::memcpy(&d, &v, 8);
    return d;
}

}  // namespace detail

inline void save_tensors(std::ostream& os, const NamedTensors& tensors) {
    os.write("FMA1", 4);
    detail::put_u64(os, tensors.size());
    for (const auto& [name, t] : tensors) {
        detail::put_u64(os, name.size());
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put_u64(os, t.rank());
        for (auto e : t.shape) detail::put_u64(os, static_cast<std::uint64_t>(e));
        for (double v : t.data) detail::put_f64(os, v);
    }
    if (!os) throw CheckpointError("checkpoint write failed");
}

inline NamedTensors load_tensors(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "FMA1", 4) != 0)
        throw CheckpointError("bad checkpoint magic (want FMA1)");
    const std::uint64_t count = detail::get_u64(is);
    NamedTensors out;
    out.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint64_t name_len = detail::get_u64(is);
        std::string name(name_len, '\0');
        is.read(name.data(), static_cast<std::streamsize>(name_len));
        if (!is) throw CheckpointError("truncated checkpoint");
        const std::uint64_t rank = detail::get_u64(is);
        std::vector<std::int64_t> shape(rank);
        for (auto& e : shape) e = static_cast<std::int64_t>(detail::get_u64(is));
        Tensor t(shape);
        for (auto& v : t.data) v = detail::get_f64(is);
        out.emplace_back(std::move(name), std::move(t));
    }
    return out;
}

inline void save_checkpoint(const std::string& path, const NamedTensors& tensors) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open for write: " + path);
    save_tensors(f, tensors);
}

inline NamedTensors load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open: " + path);
    return load_tensors(f);
}

// canonical tensor names: "layer<i>.<kind>.<role>"
inline NamedTensors model_to_tensors(const NetworkModel& m) {
    NamedTensors out;
    static const char* fc_roles[] = {"weight", "bias"};
    static const char* lstm_roles[] = {"weight_ih", "weight_hh", "bias_ih", "bias_hh"};
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        const LayerSpec& s = m.layers[i];
        if (!s.has_weights()) continue;
        const std::string base =
            "layer" + std::to_string(i) + "." + kind_name(s.kind) + ".";
        for (std::size_t t = 0; t < m.weights[i].size(); ++t) {
            const char* role = s.kind == LayerKind::Lstm ? lstm_roles[t] : fc_roles[t];
            out.emplace_back(base + role, m.weights[i][t]);
        }
    }
    return out;
}

// Rebuilds a model from an architecture template plus checkpoint tensors,
// adapting layer widths to the stored shapes (matched global models grow).
inline NetworkModel model_from_tensors(const NetworkModel& family, const NamedTensors& tensors) {
    NetworkModel m = family;
    std::map<std::string, const Tensor*> by_name;
    for (const auto& [n, t] : tensors) by_name[n] = &t;

    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        LayerSpec& s = m.layers[i];
        if (!s.has_weights()) continue;
        const std::string base = "layer" + std::to_string(i) + "." + kind_name(s.kind) + ".";
        auto need = [&](const std::string& role) -> const Tensor& {
            auto it = by_name.find(base + role);
            if (it == by_name.end()) throw CheckpointError("checkpoint is missing " + base + role);
            return *it->second;
        };
        switch (s.kind) {
            case LayerKind::FullyConnected: {
                const Tensor& w = need("weight");
                if (w.rank() != 2) throw CheckpointError("bad rank for " + base + "weight");
                s.in = w.shape[0];
                s.out = w.shape[1];
                m.weights[i] = {w, need("bias")};
                break;
            }
            case LayerKind::Conv2d: {
                const Tensor& w = need("weight");
                if (w.rank() != 4) throw CheckpointError("bad rank for " + base + "weight");
                s.in = w.shape[0];
                s.kh = w.shape[1];
                s.kw = w.shape[2];
                s.out = w.shape[3];
                m.weights[i] = {w, need("bias")};
                break;
            }
            case LayerKind::Lstm: {
                const Tensor& wih = need("weight_ih");
                const Tensor& whh = need("weight_hh");
                s.in = wih.shape[1];
                s.out = whh.shape[1];
                m.weights[i] = {wih, whh, need("bias_ih"), need("bias_hh")};
                break;
            }
            case LayerKind::Embedding: {
                const Tensor& w = need("weight");
                s.in = w.shape[0];
                s.out = w.shape[1];
                m.weights[i] = {w};
                break;
            }
            default:
                break;
        }
    }
    validate_model(m);
    return m;
}

}  // namespace fedma
