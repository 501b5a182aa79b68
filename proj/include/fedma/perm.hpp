#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedma/model.hpp"
#include "fedma/tensor.hpp"

namespace fedma {

struct PermError : std::runtime_error {
    explicit PermError(const std::string& what) : std::runtime_error(what) {}
};

// Rectangular assignment of L_j local slots into L global slots. map[l] is the
// global slot of local slot l; injective, so unmapped global slots are dummies.
struct AssignmentMatrix {
    std::int64_t local_size = 0;
    std::int64_t global_size = 0;
    std::vector<std::int64_t> map;

    static AssignmentMatrix identity(std::int64_t n) {
        AssignmentMatrix a;
        a.local_size = a.global_size = n;
        a.map.resize(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) a.map[static_cast<std::size_t>(i)] = i;
        return a;
    }

    bool is_identity() const {
        if (local_size != global_size) return false;
        for (std::int64_t i = 0; i < local_size; ++i)
            if (map[static_cast<std::size_t>(i)] != i) return false;
        return true;
    }

    void validate() const {
        if (static_cast<std::int64_t>(map.size()) != local_size)
            throw PermError("assignment map length mismatch");
        if (local_size > global_size) throw PermError("local size exceeds global size");
        std::vector<bool> seen(static_cast<std::size_t>(global_size), false);
        for (auto g : map) {
            if (g < 0 || g >= global_size) throw PermError("assignment target out of range");
            if (seen[static_cast<std::size_t>(g)]) throw PermError("assignment not injective");
            seen[static_cast<std::size_t>(g)] = true;
        }
    }

    // square case only
    AssignmentMatrix inverse() const {
        if (local_size != global_size) throw PermError("inverse of a rectangular assignment");
        AssignmentMatrix a = identity(local_size);
        for (std::int64_t l = 0; l < local_size; ++l)
            a.map[static_cast<std::size_t>(map[static_cast<std::size_t>(l)])] = l;
        return a;
    }
};

// One row per local neuron/channel/hidden state: the flattened feature
// extraction signature fed to the matcher, with layout metadata kept so global
// weights can be rebuilt from matched rows.
struct NeuronBundle {
    LayerKind kind = LayerKind::FullyConnected;
    std::int64_t client = -1;
    std::int64_t layer = -1;  // weighted-layer index

    std::int64_t rows = 0;  // L_j
    std::int64_t dim = 0;   // D'
    std::vector<double> vectors;

    std::int64_t in_groups = 0;  // global input groups after input_perm
    std::int64_t block = 1;      // input rows per group (spatial size for fc-after-conv)
    std::int64_t kh = 0, kw = 0;
    std::int64_t gates = 0;
    bool has_bias = false;

    double* row(std::int64_t r) { return vectors.data() + r * dim; }
    const double* row(std::int64_t r) const { return vectors.data() + r * dim; }
};

namespace detail {

// input group count of weighted layer n (i.e. the unit count of the upstream
// weighted layer, or the raw input grouping for the first one)
inline std::int64_t input_groups(const NetworkModel& m, std::size_t n) {
    const auto wl = m.weighted_layers();
    const LayerSpec& s = m.layers[wl[n]];
    if (n == 0) {
        if (s.kind == LayerKind::Embedding) return 0;  // token ids, nothing to permute
        return s.in;
    }
    return m.layers[wl[n - 1]].out;
}

}  // namespace detail

// Builds the neuron vectors of weighted layer n with input rows scattered into
// the global index space described by input_perm (identity for the first layer).
inline NeuronBundle extract_neurons(const NetworkModel& m, std::size_t n,
                                    const AssignmentMatrix& input_perm) {
    const auto wl = m.weighted_layers();
    if (n >= wl.size()) throw PermError("extract_neurons: weighted layer index out of range");
    const std::size_t li = wl[n];
    const LayerSpec& s = m.layers[li];
    const auto& w = m.weights[li];
    input_perm.validate();

    NeuronBundle b;
    b.kind = s.kind;
    b.layer = static_cast<std::int64_t>(n);
    const std::int64_t G = input_perm.global_size;

    switch (s.kind) {
        case LayerKind::FullyConnected: {
            if (s.in % input_perm.local_size != 0)
                throw PermError("extract_neurons: input grouping does not divide fc width");
            const std::int64_t block = s.in / input_perm.local_size;
            b.rows = s.out;
            b.in_groups = G;
            b.block = block;
            b.has_bias = true;
            b.dim = G * block + 1;
            b.vectors.assign(static_cast<std::size_t>(b.rows * b.dim), 0.0);
            for (std::int64_t o = 0; o < s.out; ++o) {
                double* r = b.row(o);
                for (std::int64_t l = 0; l < input_perm.local_size; ++l) {
                    const std::int64_t g = input_perm.map[static_cast<std::size_t>(l)];
                    for (std::int64_t k = 0; k < block; ++k)
                        r[g * block + k] = w[0].at2(l * block + k, o);
                }
                r[G * block] = w[1][o];
            }
            break;
        }
        case LayerKind::Conv2d: {
            if (input_perm.local_size != s.in)
                throw PermError("extract_neurons: input perm does not match conv channels");
            b.rows = s.out;
            b.in_groups = G;
            b.kh = s.kh;
            b.kw = s.kw;
            b.has_bias = true;
            b.dim = G * s.kh * s.kw + 1;
            b.vectors.assign(static_cast<std::size_t>(b.rows * b.dim), 0.0);
            const std::int64_t khw = s.kh * s.kw;
            for (std::int64_t o = 0; o < s.out; ++o) {
                double* r = b.row(o);
                for (std::int64_t c = 0; c < s.in; ++c) {
                    const std::int64_t g = input_perm.map[static_cast<std::size_t>(c)];
                    for (std::int64_t k = 0; k < khw; ++k)
                        r[g * khw + k] = w[0].data[(c * khw + k) * s.out + o];
                }
                r[G * khw] = w[1][o];
            }
            break;
        }
        case LayerKind::Lstm: {
            if (input_perm.local_size != s.in)
                throw PermError("extract_neurons: input perm does not match lstm input dim");
            const std::int64_t L = s.out, S = s.gates;
            b.rows = L;
            b.in_groups = G;
            b.gates = S;
            b.has_bias = true;
            b.dim = S * G + S;
            b.vectors.assign(static_cast<std::size_t>(b.rows * b.dim), 0.0);
            for (std::int64_t l = 0; l < L; ++l) {
                double* r = b.row(l);
                for (std::int64_t gate = 0; gate < S; ++gate) {
                    for (std::int64_t d = 0; d < s.in; ++d) {
                        const std::int64_t g = input_perm.map[static_cast<std::size_t>(d)];
                        r[gate * G + g] = w[0].at2(gate * L + l, d);
                    }
                    r[S * G + gate] = w[2][gate * L + l];
                }
            }
            break;
        }
        case LayerKind::Embedding: {
            // handled like a fully connected layer over the (fixed) vocabulary
            b.rows = s.out;
            b.in_groups = s.in;
            b.has_bias = false;
            b.dim = s.in;
            b.vectors.assign(static_cast<std::size_t>(b.rows * b.dim), 0.0);
            for (std::int64_t o = 0; o < s.out; ++o) {
                double* r = b.row(o);
                for (std::int64_t v = 0; v < s.in; ++v) r[v] = w[0].at2(v, o);
            }
            break;
        }
        default:
            throw PermError("layer carries no neurons to extract");
    }
    return b;
}

// Reorders/pads the output side of weighted layer n into perm.global_size
// slots. For LSTMs the hidden-to-hidden matrix is conjugated on both axes.
inline NetworkModel apply_perm_out(const NetworkModel& m, std::size_t n,
                                   const AssignmentMatrix& perm) {
    const auto wl = m.weighted_layers();
    if (n >= wl.size()) throw PermError("apply_perm_out: weighted layer index out of range");
    const std::size_t li = wl[n];
    NetworkModel out = m;
    LayerSpec& s = out.layers[li];
    auto& w = out.weights[li];
    perm.validate();
    if (perm.local_size != s.out)
        throw PermError("apply_perm_out: perm size " + std::to_string(perm.local_size) +
                        " != layer units " + std::to_string(s.out));
    const std::int64_t G = perm.global_size;

    switch (s.kind) {
        case LayerKind::FullyConnected:
        case LayerKind::Embedding: {
            Tensor nw({s.in, G});
            for (std::int64_t i = 0; i < s.in; ++i)
                for (std::int64_t o = 0; o < s.out; ++o)
                    nw.at2(i, perm.map[static_cast<std::size_t>(o)]) = w[0].at2(i, o);
            w[0] = std::move(nw);
            if (s.kind == LayerKind::FullyConnected) {
                Tensor nb({G});
                for (std::int64_t o = 0; o < s.out; ++o)
                    nb[static_cast<std::size_t>(perm.map[static_cast<std::size_t>(o)])] = w[1][o];
                w[1] = std::move(nb);
            }
            break;
        }
        case LayerKind::Conv2d: {
            const std::int64_t khw = s.kh * s.kw;
            Tensor nw({s.in, s.kh, s.kw, G});
            for (std::int64_t ck = 0; ck < s.in * khw; ++ck)
                for (std::int64_t o = 0; o < s.out; ++o)
                    nw.data[ck * G + perm.map[static_cast<std::size_t>(o)]] = w[0].data[ck * s.out + o];
            Tensor nb({G});
            for (std::int64_t o = 0; o < s.out; ++o)
                nb[static_cast<std::size_t>(perm.map[static_cast<std::size_t>(o)])] = w[1][o];
            w[0] = std::move(nw);
            w[1] = std::move(nb);
            break;
        }
        case LayerKind::Lstm: {
            const std::int64_t L = s.out, S = s.gates, D = s.in;
            Tensor nih({S * G, D}), nhh({S * G, G}), nbi({S * G}), nbh({S * G});
            for (std::int64_t gate = 0; gate < S; ++gate)
                for (std::int64_t l = 0; l < L; ++l) {
                    const std::int64_t gl = perm.map[static_cast<std::size_t>(l)];
                    for (std::int64_t d = 0; d < D; ++d)
                        nih.at2(gate * G + gl, d) = w[0].at2(gate * L + l, d);
                    for (std::int64_t mcol = 0; mcol < L; ++mcol)
                        nhh.at2(gate * G + gl, perm.map[static_cast<std::size_t>(mcol)]) =
                            w[1].at2(gate * L + l, mcol);
                    nbi[static_cast<std::size_t>(gate * G + gl)] = w[2][gate * L + l];
                    nbh[static_cast<std::size_t>(gate * G + gl)] = w[3][gate * L + l];
                }
            w[0] = std::move(nih);
            w[1] = std::move(nhh);
            w[2] = std::move(nbi);
            w[3] = std::move(nbh);
            break;
        }
        default:
            throw PermError("apply_perm_out: layer has no output units");
    }
    s.out = G;
    return out;
}

// Moves the input side of weighted layer n into the global index space; dummy
// inputs become zero rows.
inline NetworkModel apply_perm_in(const NetworkModel& m, std::size_t n,
                                  const AssignmentMatrix& perm) {
    const auto wl = m.weighted_layers();
    if (n >= wl.size()) throw PermError("apply_perm_in: weighted layer index out of range");
    const std::size_t li = wl[n];
    NetworkModel out = m;
    LayerSpec& s = out.layers[li];
    auto& w = out.weights[li];
    perm.validate();
    const std::int64_t G = perm.global_size;

    switch (s.kind) {
        case LayerKind::FullyConnected: {
            if (s.in % perm.local_size != 0)
                throw PermError("apply_perm_in: grouping does not divide fc width");
            const std::int64_t block = s.in / perm.local_size;
            Tensor nw({G * block, s.out});
            for (std::int64_t l = 0; l < perm.local_size; ++l) {
                const std::int64_t g = perm.map[static_cast<std::size_t>(l)];
                for (std::int64_t k = 0; k < block; ++k)
                    for (std::int64_t o = 0; o < s.out; ++o)
                        nw.at2(g * block + k, o) = w[0].at2(l * block + k, o);
            }
            w[0] = std::move(nw);
            s.in = G * block;
            break;
        }
        case LayerKind::Conv2d: {
            if (perm.local_size != s.in)
                throw PermError("apply_perm_in: perm does not match conv input channels");
            const std::int64_t khw = s.kh * s.kw;
            Tensor nw({G, s.kh, s.kw, s.out});
            for (std::int64_t c = 0; c < s.in; ++c) {
                const std::int64_t g = perm.map[static_cast<std::size_t>(c)];
                std::copy(w[0].data.begin() + c * khw * s.out, w[0].data.begin() + (c + 1) * khw * s.out,
                          nw.data.begin() + g * khw * s.out);
            }
            w[0] = std::move(nw);
            s.in = G;
            break;
        }
        case LayerKind::Lstm: {
            if (perm.local_size != s.in)
                throw PermError("apply_perm_in: perm does not match lstm input dim");
            const std::int64_t SL = s.gates * s.out;
            Tensor nih({SL, G});
            for (std::int64_t r = 0; r < SL; ++r)
                for (std::int64_t d = 0; d < s.in; ++d)
                    nih.at2(r, perm.map[static_cast<std::size_t>(d)]) = w[0].at2(r, d);
            w[0] = std::move(nih);
            s.in = G;
            break;
        }
        default:
            throw PermError("apply_perm_in: layer has no permutable input side");
    }
    return out;
}

// Applies one permutation per weighted layer coherently: layer n's outputs and
// layer n+1's inputs move together, so the forward pass is preserved. Accepts
// N-1 hidden-layer permutations or N with an identity for the output layer.
inline NetworkModel permute_network(const NetworkModel& m,
                                    const std::vector<AssignmentMatrix>& perms) {
    const std::size_t nw = m.weighted_count();
    if (perms.size() != nw && perms.size() + 1 != nw)
        throw PermError("permute_network: need a permutation per hidden weighted layer");
    if (perms.size() == nw && !perms.back().is_identity())
        throw PermError("permute_network: output-layer permutation must be identity");
    NetworkModel out = m;
    for (std::size_t n = 0; n + 1 < nw; ++n) {
        out = apply_perm_out(out, n, perms[n]);
        out = apply_perm_in(out, n + 1, perms[n]);
    }
    return out;
}

// Contributor-discounted average of hidden-to-hidden matrices: each client's H
// is conjugated into the global slot space and every (row, col) entry divides
// by the number of clients that actually populated it.
inline Tensor conjugate_average_hidden(const std::vector<const Tensor*>& hs,
                                       const std::vector<AssignmentMatrix>& assignments,
                                       std::int64_t gates, std::int64_t global_size) {
    Tensor sum({gates * global_size, global_size});
    std::vector<std::int64_t> count(static_cast<std::size_t>(global_size * global_size), 0);
    for (std::size_t j = 0; j < hs.size(); ++j) {
        const AssignmentMatrix& a = assignments[j];
        const std::int64_t L = a.local_size;
        for (std::int64_t l = 0; l < L; ++l)
            for (std::int64_t mcol = 0; mcol < L; ++mcol) {
                const std::int64_t gi = a.map[static_cast<std::size_t>(l)];
                const std::int64_t gk = a.map[static_cast<std::size_t>(mcol)];
                ++count[static_cast<std::size_t>(gi * global_size + gk)];
                for (std::int64_t gate = 0; gate < gates; ++gate)
                    sum.at2(gate * global_size + gi, gk) += hs[j]->at2(gate * L + l, mcol);
            }
    }
    for (std::int64_t gi = 0; gi < global_size; ++gi)
        for (std::int64_t gk = 0; gk < global_size; ++gk) {
            const auto c = count[static_cast<std::size_t>(gi * global_size + gk)];
            if (c > 1)
                for (std::int64_t gate = 0; gate < gates; ++gate)
                    sum.at2(gate * global_size + gi, gk) /= static_cast<double>(c);
        }
    return sum;
}

// Same discounting for per-hidden-state vectors (e.g. the hidden bias).
inline Tensor slotwise_average(const std::vector<const Tensor*>& vs,
                               const std::vector<AssignmentMatrix>& assignments,
                               std::int64_t gates, std::int64_t global_size) {
    Tensor sum({gates * global_size});
    std::vector<std::int64_t> count(static_cast<std::size_t>(global_size), 0);
    for (std::size_t j = 0; j < vs.size(); ++j) {
        const AssignmentMatrix& a = assignments[j];
        for (std::int64_t l = 0; l < a.local_size; ++l) {
            const std::int64_t gi = a.map[static_cast<std::size_t>(l)];
            ++count[static_cast<std::size_t>(gi)];
            for (std::int64_t gate = 0; gate < gates; ++gate)
                sum[static_cast<std::size_t>(gate * global_size + gi)] +=
                    (*vs[j])[static_cast<std::size_t>(gate * a.local_size + l)];
        }
    }
    for (std::int64_t gi = 0; gi < global_size; ++gi)
        if (count[static_cast<std::size_t>(gi)] > 1)
            for (std::int64_t gate = 0; gate < gates; ++gate)
                sum[static_cast<std::size_t>(gate * global_size + gi)] /=
                    static_cast<double>(count[static_cast<std::size_t>(gi)]);
    return sum;
}

}  // namespace fedma
