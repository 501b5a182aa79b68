#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include "fedma/dataset.hpp"
#include "fedma/model.hpp"
#include "fedma/rng.hpp"
#include "fedma/tensor.hpp"

namespace fedma {

struct TrainError : std::runtime_error {
    explicit TrainError(const std::string& what) : std::runtime_error(what) {}
};

struct DivergenceError : std::runtime_error {
    int epoch;
    explicit DivergenceError(int epoch_idx)
        : std::runtime_error("training diverged at epoch " + std::to_string(epoch_idx)),
          epoch(epoch_idx) {}
};

struct SgdConfig {
    double learning_rate = 0.01;
    double last_layer_lr = 0.001;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    int epochs = 1;
    int batch_size = 64;
    double prox_mu = 0.0;
    std::uint64_t seed = 0;
};

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

namespace detail {

inline ECMap as_mat(const Tensor& t, std::int64_t rows, std::int64_t cols) {
    return ECMap(t.data.data(), rows, cols);
}
inline EMap as_mat(Tensor& t, std::int64_t rows, std::int64_t cols) {
    return EMap(t.data.data(), rows, cols);
}

inline void apply_activation(Activation a, Tensor& t) {
    switch (a) {
        case Activation::ReLU:
            for (auto& v : t.data) v = v > 0.0 ? v : 0.0;
            break;
        case Activation::Tanh:
            for (auto& v : t.data) v = std::tanh(v);
            break;
        case Activation::Sigmoid:
            for (auto& v : t.data) v = 1.0 / (1.0 + std::exp(-v));
            break;
        case Activation::Identity:
            break;
        case Activation::Softmax: {
            const std::int64_t cols = t.shape.back();
            const std::int64_t rows = t.numel() / cols;
            for (std::int64_t r = 0; r < rows; ++r) {
                double* row = t.data.data() + r * cols;
                double mx = row[0];
                for (std::int64_t c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
                double sum = 0.0;
                for (std::int64_t c = 0; c < cols; ++c) {
                    row[c] = std::exp(row[c] - mx);
                    sum += row[c];
                }
                for (std::int64_t c = 0; c < cols; ++c) row[c] /= sum;
            }
            break;
        }
    }
}

// multiply upstream gradient by the activation jacobian, given post-activation y
inline void activation_backward(Activation a, const Tensor& y, Tensor& g) {
    switch (a) {
        case Activation::ReLU:
            for (std::size_t i = 0; i < g.data.size(); ++i)
                if (y.data[i] <= 0.0) g.data[i] = 0.0;
            break;
        case Activation::Tanh:
            for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] *= 1.0 - y.data[i] * y.data[i];
            break;
        case Activation::Sigmoid:
            for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] *= y.data[i] * (1.0 - y.data[i]);
            break;
        case Activation::Identity:
            break;
        case Activation::Softmax:
            // only valid as the head, where cross-entropy fusion bypasses this
            throw NumericError("softmax backward outside the cross-entropy head");
    }
}

struct ConvGeom {
    std::int64_t B, C, H, W, OH, OW, K;  // K = C*kh*kw
};

inline ConvGeom conv_geom(const LayerSpec& s, const std::vector<std::int64_t>& in_shape,
                          std::int64_t batch) {
    ConvGeom g;
    g.B = batch;
    g.C = in_shape[0];
    g.H = in_shape[1];
    g.W = in_shape[2];
    g.OH = (g.H + 2 * s.pad - s.kh) / s.stride + 1;
    g.OW = (g.W + 2 * s.pad - s.kw) / s.stride + 1;
    g.K = g.C * s.kh * s.kw;
    return g;
}

// rows: (b, oy, ox); cols: (c, ky, kx) — matches the (C_in, kh, kw, C_out) weight layout
inline Tensor im2col(const Tensor& x, const LayerSpec& s, const ConvGeom& g) {
    Tensor col({g.B * g.OH * g.OW, g.K});
    const double* xd = x.data.data();
    double* cd = col.data.data();
    for (std::int64_t b = 0; b < g.B; ++b) {
        const double* xb = xd + b * g.C * g.H * g.W;
        for (std::int64_t oy = 0; oy < g.OH; ++oy) {
            for (std::int64_t ox = 0; ox < g.OW; ++ox) {
                double* crow = cd + ((b * g.OH + oy) * g.OW + ox) * g.K;
                const std::int64_t iy0 = oy * s.stride - s.pad;
                const std::int64_t ix0 = ox * s.stride - s.pad;
                for (std::int64_t c = 0; c < g.C; ++c) {
                    const double* xc = xb + c * g.H * g.W;
                    for (std::int64_t ky = 0; ky < s.kh; ++ky) {
                        const std::int64_t iy = iy0 + ky;
                        for (std::int64_t kx = 0; kx < s.kw; ++kx) {
                            const std::int64_t ix = ix0 + kx;
                            *crow++ = (iy >= 0 && iy < g.H && ix >= 0 && ix < g.W)
                                          ? xc[iy * g.W + ix]
                                          : 0.0;
                        }
                    }
                }
            }
        }
    }
    return col;
}

inline void col2im_add(const Tensor& col, const LayerSpec& s, const ConvGeom& g, Tensor& dx) {
    const double* cd = col.data.data();
    double* xd = dx.data.data();
    for (std::int64_t b = 0; b < g.B; ++b) {
        double* xb = xd + b * g.C * g.H * g.W;
        for (std::int64_t oy = 0; oy < g.OH; ++oy) {
            for (std::int64_t ox = 0; ox < g.OW; ++ox) {
                const double* crow = cd + ((b * g.OH + oy) * g.OW + ox) * g.K;
                const std::int64_t iy0 = oy * s.stride - s.pad;
                const std::int64_t ix0 = ox * s.stride - s.pad;
                for (std::int64_t c = 0; c < g.C; ++c) {
                    double* xc = xb + c * g.H * g.W;
                    for (std::int64_t ky = 0; ky < s.kh; ++ky) {
                        const std::int64_t iy = iy0 + ky;
                        for (std::int64_t kx = 0; kx < s.kw; ++kx) {
                            const std::int64_t ix = ix0 + kx;
                            if (iy >= 0 && iy < g.H && ix >= 0 && ix < g.W)
                                xc[iy * g.W + ix] += *crow;
                            ++crow;
                        }
                    }
                }
            }
        }
    }
}

struct LstmCache {
    std::vector<Tensor> gate_i, gate_f, gate_g, gate_o, cell, tanh_cell, hidden;  // per t, each (B,L)
};

struct LayerTrace {
    Tensor output;               // post-activation
    Tensor col;                  // conv im2col cache
    std::vector<std::int64_t> pool_argmax;
    Tensor dropout_mask;
    LstmCache lstm;
};

}  // namespace detail

struct ForwardTrace {
    Tensor input;
    std::vector<detail::LayerTrace> layers;
};

namespace detail {

inline Tensor layer_forward(const NetworkModel& m, std::size_t li, const Tensor& x,
                            const std::vector<std::int64_t>& in_shape, LayerTrace* trace,
                            bool training, Rng* drop_rng) {
    const LayerSpec& s = m.layers[li];
    const auto& w = m.weights[li];
    const std::int64_t B = x.shape[0];
    Tensor y;
    switch (s.kind) {
        case LayerKind::FullyConnected: {
            const std::int64_t in = s.in;
            if (x.numel() / B != in)
                throw DimensionError("fc '" + s.name + "': input width " +
                                     std::to_string(x.numel() / B) + " != " + std::to_string(in));
            y = Tensor({B, s.out});
            as_mat(y, B, s.out).noalias() = as_mat(x, B, in) * as_mat(w[0], in, s.out);
            for (std::int64_t r = 0; r < B; ++r)
                for (std::int64_t c = 0; c < s.out; ++c) y.at2(r, c) += w[1][c];
            break;
        }
        case LayerKind::Conv2d: {
            const ConvGeom g = conv_geom(s, in_shape, B);
            Tensor col = im2col(x, s, g);
            y = Tensor({B, s.out, g.OH, g.OW});
            Tensor y2d({g.B * g.OH * g.OW, s.out});
            as_mat(y2d, g.B * g.OH * g.OW, s.out).noalias() =
                as_mat(col, g.B * g.OH * g.OW, g.K) * as_mat(w[0], g.K, s.out);
            // (b*oh*ow, cout) -> (b, cout, oh, ow), adding bias
            for (std::int64_t b = 0; b < g.B; ++b)
                for (std::int64_t p = 0; p < g.OH * g.OW; ++p)
                    for (std::int64_t c = 0; c < s.out; ++c)
                        y.data[(b * s.out + c) * g.OH * g.OW + p] =
                            y2d.data[(b * g.OH * g.OW + p) * s.out + c] + w[1][c];
            if (trace) trace->col = std::move(col);
            break;
        }
        case LayerKind::MaxPool: {
            const std::int64_t C = in_shape[0], H = in_shape[1], W = in_shape[2];
            const std::int64_t OH = (H - s.kh) / s.stride + 1, OW = (W - s.kw) / s.stride + 1;
            y = Tensor({B, C, OH, OW});
            if (trace) trace->pool_argmax.assign(static_cast<std::size_t>(B * C * OH * OW), 0);
            for (std::int64_t b = 0; b < B; ++b)
                for (std::int64_t c = 0; c < C; ++c) {
                    const double* xc = x.data.data() + (b * C + c) * H * W;
                    for (std::int64_t oy = 0; oy < OH; ++oy)
                        for (std::int64_t ox = 0; ox < OW; ++ox) {
                            double best = -std::numeric_limits<double>::infinity();
                            std::int64_t best_idx = 0;
                            for (std::int64_t ky = 0; ky < s.kh; ++ky)
                                for (std::int64_t kx = 0; kx < s.kw; ++kx) {
                                    const std::int64_t iy = oy * s.stride + ky;
                                    const std::int64_t ix = ox * s.stride + kx;
                                    const double v = xc[iy * W + ix];
                                    if (v > best) {  // first max wins on ties
                                        best = v;
                                        best_idx = iy * W + ix;
                                    }
                                }
                            const std::int64_t oi = ((b * C + c) * OH + oy) * OW + ox;
                            y.data[oi] = best;
                            if (trace) trace->pool_argmax[oi] = (b * C + c) * H * W + best_idx;
                        }
                }
            break;
        }
        case LayerKind::Lstm: {
            const std::int64_t T = in_shape[0], D = in_shape[1], L = s.out, S = s.gates;
            if (D != s.in) throw DimensionError("lstm '" + s.name + "': input dim mismatch");
            Tensor h({B, L}), c({B, L});
            LstmCache cache;
            for (std::int64_t t = 0; t < T; ++t) {
                // gates = x_t W_ih^T + h W_hh^T + b_ih + b_hh, blocks (i,f,g,o)
                Tensor z({B, S * L});
                ECMap xt(x.data.data() + 0, B, T * D);
                EMat xslice(B, D);
                for (std::int64_t b = 0; b < B; ++b)
                    for (std::int64_t d = 0; d < D; ++d) xslice(b, d) = x.data[(b * T + t) * D + d];
                as_mat(z, B, S * L).noalias() = xslice * as_mat(w[0], S * L, D).transpose();
                as_mat(z, B, S * L).noalias() += as_mat(h, B, L) * as_mat(w[1], S * L, L).transpose();
                for (std::int64_t b = 0; b < B; ++b)
                    for (std::int64_t k = 0; k < S * L; ++k) z.at2(b, k) += w[2][k] + w[3][k];
                Tensor gi({B, L}), gf({B, L}), gg({B, L}), go({B, L}), tc({B, L});
                Tensor c_new({B, L}), h_new({B, L});
                for (std::int64_t b = 0; b < B; ++b)
                    for (std::int64_t l = 0; l < L; ++l) {
                        const double zi = z.at2(b, 0 * L + l), zf = z.at2(b, 1 * L + l);
                        const double zg = z.at2(b, 2 * L + l), zo = z.at2(b, 3 * L + l);
                        const double iv = 1.0 / (1.0 + std::exp(-zi));
                        const double fv = 1.0 / (1.0 + std::exp(-zf));
                        const double gv = std::tanh(zg);
                        const double ov = 1.0 / (1.0 + std::exp(-zo));
                        const double cv = fv * c.at2(b, l) + iv * gv;
                        const double tcv = std::tanh(cv);
                        gi.at2(b, l) = iv; gf.at2(b, l) = fv; gg.at2(b, l) = gv; go.at2(b, l) = ov;
                        c_new.at2(b, l) = cv; tc.at2(b, l) = tcv;
                        h_new.at2(b, l) = ov * tcv;
                    }
                c = c_new;
                h = h_new;
                if (trace) {
                    cache.gate_i.push_back(std::move(gi));
                    cache.gate_f.push_back(std::move(gf));
                    cache.gate_g.push_back(std::move(gg));
                    cache.gate_o.push_back(std::move(go));
                    cache.cell.push_back(c);
                    cache.tanh_cell.push_back(std::move(tc));
                    cache.hidden.push_back(h);
                }
            }
            if (trace) trace->lstm = std::move(cache);
            y = h;  // final hidden state
            break;
        }
        case LayerKind::Embedding: {
            const std::int64_t T = in_shape[0];
            y = Tensor({B, T, s.out});
            for (std::int64_t b = 0; b < B; ++b)
                for (std::int64_t t = 0; t < T; ++t) {
                    const auto id = static_cast<std::int64_t>(x.data[b * T + t]);
                    if (id < 0 || id >= s.in)
                        throw DimensionError("embedding id out of range: " + std::to_string(id));
                    const double* row = w[0].data.data() + id * s.out;
                    std::copy(row, row + s.out, y.data.begin() + (b * T + t) * s.out);
                }
            break;
        }
        case LayerKind::Dropout: {
            y = x;
            if (training && s.dropout_rate > 0.0) {
                if (!drop_rng) throw TrainError("dropout requires an rng in training mode");
                Tensor mask(x.shape);
                const double keep = 1.0 - s.dropout_rate;
                for (std::size_t i = 0; i < y.data.size(); ++i) {
                    const double m = drop_rng->bernoulli(keep) ? 1.0 / keep : 0.0;
                    mask.data[i] = m;
                    y.data[i] *= m;
                }
                if (trace) trace->dropout_mask = std::move(mask);
            }
            break;
        }
    }
    apply_activation(s.act, y);
    return y;
}

}  // namespace detail

// Forward in training mode: keeps every intermediate needed by backward.
inline Tensor forward_train(const NetworkModel& m, const Tensor& batch, ForwardTrace& trace,
                            Rng* drop_rng = nullptr) {
    const auto shapes = infer_shapes(m);
    if (batch.shape.empty()) throw DimensionError("empty batch");
    {
        std::int64_t want = 1;
        for (auto e : m.input_shape) want *= e;
        if (batch.numel() / batch.shape[0] != want)
            throw DimensionError("batch width does not match model input " + batch.shape_str());
    }
    trace.input = batch;
    trace.layers.assign(m.layers.size(), {});
    const Tensor* cur = &trace.input;
    std::vector<std::int64_t> cur_shape = m.input_shape;
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        trace.layers[i].output =
            detail::layer_forward(m, i, *cur, cur_shape, &trace.layers[i], true, drop_rng);
        cur = &trace.layers[i].output;
        cur_shape = shapes[i];
    }
    return trace.layers.back().output;
}

// Deterministic evaluation-mode forward (dropout off), chunked to bound memory.
inline Tensor forward(const NetworkModel& m, const Tensor& batch) {
    const auto shapes = infer_shapes(m);
    const std::int64_t B = batch.shape.empty() ? 0 : batch.shape[0];
    if (B == 0) throw DimensionError("empty batch");
    const std::int64_t width = batch.numel() / B;
    {
        std::int64_t want = 1;
        for (auto e : m.input_shape) want *= e;
        if (width != want)
            throw DimensionError("batch width does not match model input " + batch.shape_str());
    }
    std::vector<std::int64_t> out_shape = shapes.back();
    std::int64_t out_width = 1;
    for (auto e : out_shape) out_width *= e;
    std::vector<std::int64_t> full_shape = {B};
    full_shape.insert(full_shape.end(), out_shape.begin(), out_shape.end());
    Tensor out(full_shape);

    const std::int64_t chunk = 256;
    for (std::int64_t start = 0; start < B; start += chunk) {
        const std::int64_t n = std::min(chunk, B - start);
        std::vector<std::int64_t> cshape = {n};
        cshape.insert(cshape.end(), m.input_shape.begin(), m.input_shape.end());
        Tensor cx(cshape);
        std::copy(batch.data.begin() + start * width, batch.data.begin() + (start + n) * width,
                  cx.data.begin());
        std::vector<std::int64_t> cur_shape = m.input_shape;
        Tensor cur = std::move(cx);
        for (std::size_t i = 0; i < m.layers.size(); ++i) {
            cur = detail::layer_forward(m, i, cur, cur_shape, nullptr, false, nullptr);
            cur_shape = shapes[i];
        }
        std::copy(cur.data.begin(), cur.data.end(), out.data.begin() + start * out_width);
    }
    return out;
}

struct Gradients {
    std::vector<std::vector<Tensor>> grads;  // aligned with model.weights
    double loss = 0.0;
};

namespace detail {

// mean cross-entropy of final outputs vs labels; fills dhead = dLoss/d(head output
// or logits, see below) and returns the loss
inline double ce_loss_and_grad(const NetworkModel& m, const Tensor& out,
                               const std::vector<std::int64_t>& labels, Tensor* dhead) {
    const std::int64_t classes = out.shape.back();
    const std::int64_t B = out.numel() / classes;
    if (static_cast<std::int64_t>(labels.size()) != B)
        throw DimensionError("label count does not match batch");
    const bool head_softmax = m.layers.back().act == Activation::Softmax;
    double loss = 0.0;
    if (dhead) *dhead = Tensor({B, classes});
    for (std::int64_t r = 0; r < B; ++r) {
        const double* row = out.data.data() + r * classes;
        const std::int64_t y = labels[static_cast<std::size_t>(r)];
        if (y < 0 || y >= classes) throw DataError("label out of range: " + std::to_string(y));
        std::vector<double> p(row, row + classes);
        if (!head_softmax) {
            double mx = p[0];
            for (double v : p) mx = std::max(mx, v);
            double sum = 0.0;
            for (auto& v : p) {
                v = std::exp(v - mx);
                sum += v;
            }
            for (auto& v : p) v /= sum;
        }
        loss -= std::log(std::max(p[static_cast<std::size_t>(y)], 1e-300));
        if (dhead)
            for (std::int64_t c = 0; c < classes; ++c)
                dhead->at2(r, c) = (p[static_cast<std::size_t>(c)] - (c == y ? 1.0 : 0.0)) /
                                   static_cast<double>(B);
    }
    loss /= static_cast<double>(B);
    if (!std::isfinite(loss)) throw NumericError("non-finite training loss");
    return loss;
}

inline Tensor layer_backward(const NetworkModel& m, std::size_t li, const Tensor& x,
                             const std::vector<std::int64_t>& in_shape, const LayerTrace& tr,
                             Tensor dy, std::vector<Tensor>& gw, bool head_ce_fused) {
    const LayerSpec& s = m.layers[li];
    const auto& w = m.weights[li];
    const std::int64_t B = x.shape[0];

    // For the cross-entropy head the incoming gradient is already w.r.t. the
    // pre-activation logits; every other layer folds its activation here.
    if (!head_ce_fused) activation_backward(s.act, tr.output, dy);

    switch (s.kind) {
        case LayerKind::FullyConnected: {
            gw.assign(2, Tensor());
            gw[0] = Tensor({s.in, s.out});
            gw[1] = Tensor({s.out});
            as_mat(gw[0], s.in, s.out).noalias() =
                as_mat(x, B, s.in).transpose() * as_mat(dy, B, s.out);
            for (std::int64_t r = 0; r < B; ++r)
                for (std::int64_t c = 0; c < s.out; ++c) gw[1][c] += dy.at2(r, c);
            Tensor dx({B, s.in});
            as_mat(dx, B, s.in).noalias() = as_mat(dy, B, s.out) * as_mat(w[0], s.in, s.out).transpose();
            // hand the caller a gradient shaped like the actual layer input
            std::vector<std::int64_t> xs = x.shape;
            return dx.reshaped(xs);
        }
        case LayerKind::Conv2d: {
            const ConvGeom g = conv_geom(s, in_shape, B);
            Tensor dy2d({g.B * g.OH * g.OW, s.out});
            for (std::int64_t b = 0; b < g.B; ++b)
                for (std::int64_t p = 0; p < g.OH * g.OW; ++p)
                    for (std::int64_t c = 0; c < s.out; ++c)
                        dy2d.data[(b * g.OH * g.OW + p) * s.out + c] =
                            dy.data[(b * s.out + c) * g.OH * g.OW + p];
            gw.assign(2, Tensor());
            gw[0] = Tensor({s.in, s.kh, s.kw, s.out});
            gw[1] = Tensor({s.out});
            as_mat(gw[0], g.K, s.out).noalias() =
                as_mat(tr.col, g.B * g.OH * g.OW, g.K).transpose() *
                as_mat(dy2d, g.B * g.OH * g.OW, s.out);
            for (std::int64_t r = 0; r < g.B * g.OH * g.OW; ++r)
                for (std::int64_t c = 0; c < s.out; ++c) gw[1][c] += dy2d.at2(r, c);
            Tensor dcol({g.B * g.OH * g.OW, g.K});
            as_mat(dcol, g.B * g.OH * g.OW, g.K).noalias() =
                as_mat(dy2d, g.B * g.OH * g.OW, s.out) * as_mat(w[0], g.K, s.out).transpose();
            Tensor dx({B, g.C, g.H, g.W});
            col2im_add(dcol, s, g, dx);
            return dx;
        }
        case LayerKind::MaxPool: {
            Tensor dx(x.shape);
            for (std::size_t i = 0; i < dy.data.size(); ++i)
                dx.data[static_cast<std::size_t>(tr.pool_argmax[i])] += dy.data[i];
            return dx;
        }
        case LayerKind::Lstm: {
            const std::int64_t T = in_shape[0], D = in_shape[1], L = s.out, S = s.gates;
            gw.assign(4, Tensor());
            gw[0] = Tensor({S * L, D});
            gw[1] = Tensor({S * L, L});
            gw[2] = Tensor({S * L});
            gw[3] = Tensor({S * L});
            Tensor dx({B, T, D});
            Tensor dh = dy;          // (B, L): gradient on the final hidden state
            Tensor dc({B, L});
            for (std::int64_t t = T - 1; t >= 0; --t) {
                const Tensor& iv = tr.lstm.gate_i[t];
                const Tensor& fv = tr.lstm.gate_f[t];
                const Tensor& gv = tr.lstm.gate_g[t];
                const Tensor& ov = tr.lstm.gate_o[t];
                const Tensor& tc = tr.lstm.tanh_cell[t];
                Tensor dz({B, S * L});
                Tensor dc_prev({B, L});
                for (std::int64_t b = 0; b < B; ++b)
                    for (std::int64_t l = 0; l < L; ++l) {
                        const double dhv = dh.at2(b, l);
                        double dcv = dc.at2(b, l) + dhv * ov.at2(b, l) * (1.0 - tc.at2(b, l) * tc.at2(b, l));
                        const double c_prev = t > 0 ? tr.lstm.cell[t - 1].at2(b, l) : 0.0;
                        const double di = dcv * gv.at2(b, l);
                        const double df = dcv * c_prev;
                        const double dg = dcv * iv.at2(b, l);
                        const double dov = dhv * tc.at2(b, l);
                        dz.at2(b, 0 * L + l) = di * iv.at2(b, l) * (1.0 - iv.at2(b, l));
                        dz.at2(b, 1 * L + l) = df * fv.at2(b, l) * (1.0 - fv.at2(b, l));
                        dz.at2(b, 2 * L + l) = dg * (1.0 - gv.at2(b, l) * gv.at2(b, l));
                        dz.at2(b, 3 * L + l) = dov * ov.at2(b, l) * (1.0 - ov.at2(b, l));
                        dc_prev.at2(b, l) = dcv * fv.at2(b, l);
                    }
                EMat xt(B, D);
                for (std::int64_t b = 0; b < B; ++b)
                    for (std::int64_t d = 0; d < D; ++d) xt(b, d) = x.data[(b * T + t) * D + d];
                as_mat(gw[0], S * L, D).noalias() += as_mat(dz, B, S * L).transpose() * xt;
                if (t > 0) {
                    const Tensor& h_prev = tr.lstm.hidden[t - 1];
                    as_mat(gw[1], S * L, L).noalias() +=
                        as_mat(dz, B, S * L).transpose() * as_mat(h_prev, B, L);
                }
                for (std::int64_t b = 0; b < B; ++b)
                    for (std::int64_t k = 0; k < S * L; ++k) {
                        gw[2][k] += dz.at2(b, k);
                        gw[3][k] += dz.at2(b, k);
                    }
                EMat dxt = as_mat(dz, B, S * L) * as_mat(w[0], S * L, D);
                for (std::int64_t b = 0; b < B; ++b)
                    for (std::int64_t d = 0; d < D; ++d) dx.data[(b * T + t) * D + d] = dxt(b, d);
                if (t > 0) {
                    Tensor dh_prev({B, L});
                    as_mat(dh_prev, B, L).noalias() = as_mat(dz, B, S * L) * as_mat(w[1], S * L, L);
                    dh = std::move(dh_prev);
                    dc = std::move(dc_prev);
                }
            }
            return dx;
        }
        case LayerKind::Embedding: {
            const std::int64_t T = in_shape[0];
            gw.assign(1, Tensor({s.in, s.out}));
            for (std::int64_t b = 0; b < B; ++b)
                for (std::int64_t t = 0; t < T; ++t) {
                    const auto id = static_cast<std::int64_t>(x.data[b * T + t]);
                    double* grow = gw[0].data.data() + id * s.out;
                    const double* drow = dy.data.data() + (b * T + t) * s.out;
                    for (std::int64_t d = 0; d < s.out; ++d) grow[d] += drow[d];
                }
            return Tensor(x.shape);  // ids carry no gradient
        }
        case LayerKind::Dropout: {
            gw.clear();
            if (tr.dropout_mask.numel() > 0)
                for (std::size_t i = 0; i < dy.data.size(); ++i) dy.data[i] *= tr.dropout_mask.data[i];
            return dy;
        }
    }
    return dy;
}

}  // namespace detail

// Mean cross-entropy backprop over the batch. Dropout is inactive unless an
// rng is supplied (training path supplies one when the model has dropout).
inline Gradients backward(const NetworkModel& m, const Tensor& batch,
                          const std::vector<std::int64_t>& labels, Rng* drop_rng = nullptr,
                          ForwardTrace* trace_out = nullptr) {
    ForwardTrace local_trace;
    ForwardTrace& trace = trace_out ? *trace_out : local_trace;
    const Tensor out = forward_train(m, batch, trace, drop_rng);
    Gradients g;
    g.grads.assign(m.layers.size(), {});
    Tensor dy;
    g.loss = detail::ce_loss_and_grad(m, out, labels, &dy);

    const auto shapes = infer_shapes(m);
    const bool head_softmax_or_identity = m.layers.back().act == Activation::Softmax ||
                                          m.layers.back().act == Activation::Identity;
    for (std::size_t i = m.layers.size(); i-- > 0;) {
        const Tensor& x = i == 0 ? trace.input : trace.layers[i - 1].output;
        std::vector<std::int64_t> in_shape = i == 0 ? m.input_shape : shapes[i - 1];
        const bool fused = (i + 1 == m.layers.size()) && head_softmax_or_identity;
        dy = detail::layer_backward(m, i, x, in_shape, trace.layers[i], std::move(dy), g.grads[i],
                                    fused);
    }
    return g;
}

inline double batch_loss(const NetworkModel& m, const Tensor& batch,
                         const std::vector<std::int64_t>& labels) {
    const Tensor out = forward(m, batch);
    return detail::ce_loss_and_grad(m, out, labels, nullptr);
}

inline double prox_penalty(const NetworkModel& m, const NetworkModel& anchor, double mu) {
    double s = 0.0;
    for (std::size_t i = 0; i < m.weights.size(); ++i)
        for (std::size_t t = 0; t < m.weights[i].size(); ++t)
            for (std::size_t k = 0; k < m.weights[i][t].data.size(); ++k) {
                const double d = m.weights[i][t].data[k] - anchor.weights[i][t].data[k];
                s += d * d;
            }
    return 0.5 * mu * s;
}

// argmax with lowest-index tie break
inline std::int64_t argmax_row(const double* row, std::int64_t n) {
    std::int64_t best = 0;
    for (std::int64_t c = 1; c < n; ++c)
        if (row[c] > row[best]) best = c;
    return best;
}

inline double evaluate(const NetworkModel& m, const Dataset& ds) {
    if (ds.size() == 0) throw DataError("evaluate on empty dataset");
    const Tensor out = forward(m, ds.features);
    const std::int64_t classes = out.shape.back();
    std::int64_t correct = 0;
    for (std::int64_t r = 0; r < ds.size(); ++r)
        if (argmax_row(out.data.data() + r * classes, classes) == ds.labels[static_cast<std::size_t>(r)])
            ++correct;
    return static_cast<double>(correct) / static_cast<double>(ds.size());
}

namespace detail {

inline Tensor gather_batch(const Tensor& features, const std::vector<std::int64_t>& order,
                           std::int64_t start, std::int64_t n, std::int64_t width,
                           const std::vector<std::int64_t>& example_shape) {
    std::vector<std::int64_t> shape = {n};
    shape.insert(shape.end(), example_shape.begin(), example_shape.end());
    Tensor b(shape);
    for (std::int64_t r = 0; r < n; ++r) {
        const std::int64_t src = order[static_cast<std::size_t>(start + r)];
        std::copy(features.data.begin() + src * width, features.data.begin() + (src + 1) * width,
                  b.data.begin() + r * width);
    }
    return b;
}

}  // namespace detail

// E epochs of mini-batch SGD with momentum and weight decay. The first
// `frozen_prefix` weighted layers are left bit-identical; their activations are
// precomputed once so frozen convolutions are not re-run every epoch. When only
// the last layer remains trainable the epoch count is tripled, and weight decay
// is off for all but the final fully connected layer whenever a prefix is frozen.
inline NetworkModel train_local(const NetworkModel& model, const Dataset& ds, const SgdConfig& cfg,
                                int frozen_prefix = 0, const NetworkModel* anchor = nullptr) {
    if (ds.size() == 0) throw DataError("train_local: empty dataset");
    if (cfg.epochs < 1) throw TrainError("train_local: epochs must be >= 1");
    if (cfg.batch_size < 1) throw TrainError("train_local: batch_size must be >= 1");
    if (cfg.learning_rate <= 0.0) throw TrainError("train_local: learning rate must be positive");
    if ((cfg.prox_mu > 0.0) != (anchor != nullptr))
        throw TrainError("train_local: anchor must be present iff prox_mu > 0");
    const int n_weighted = static_cast<int>(model.weighted_count());
    if (frozen_prefix < 0 || frozen_prefix >= n_weighted)
        throw TrainError("train_local: frozen_prefix out of range");
    validate_model(model);

    const auto shapes = infer_shapes(model);
    const std::size_t boundary =
        frozen_prefix == 0 ? 0 : model.weighted_index(static_cast<std::size_t>(frozen_prefix));

    // submodel covering the trainable suffix
    NetworkModel suffix;
    suffix.input_shape = boundary == 0 ? model.input_shape : shapes[boundary - 1];
    suffix.layers.assign(model.layers.begin() + boundary, model.layers.end());
    suffix.weights.assign(model.weights.begin() + boundary, model.weights.end());

    NetworkModel suffix_anchor;
    if (anchor) {
        suffix_anchor.input_shape = suffix.input_shape;
        suffix_anchor.layers = suffix.layers;
        suffix_anchor.weights.assign(anchor->weights.begin() + boundary, anchor->weights.end());
    }

    // features feeding the suffix: raw data, or frozen-prefix outputs computed once
    Tensor feats;
    if (boundary == 0) {
        feats = ds.features;
    } else {
        NetworkModel prefix;
        prefix.input_shape = model.input_shape;
        prefix.layers.assign(model.layers.begin(), model.layers.begin() + boundary);
        prefix.weights.assign(model.weights.begin(), model.weights.begin() + boundary);
        feats = forward(prefix, ds.features);
    }

    const bool last_only = frozen_prefix == n_weighted - 1;
    const int epochs = last_only ? 3 * cfg.epochs : cfg.epochs;

    const auto suffix_weighted = suffix.weighted_layers();
    const std::size_t last_weighted = suffix_weighted.back();

    bool has_dropout = false;
    for (const auto& l : suffix.layers)
        if (l.kind == LayerKind::Dropout && l.dropout_rate > 0.0) has_dropout = true;

    // momentum buffers
    std::vector<std::vector<Tensor>> vel(suffix.weights.size());
    for (std::size_t i = 0; i < suffix.weights.size(); ++i)
        for (const auto& t : suffix.weights[i]) vel[i].emplace_back(t.shape);

    Rng order_rng(derive_seed(cfg.seed, 0x5d1));
    Rng drop_rng(derive_seed(cfg.seed, 0xd70));

    const std::int64_t n = ds.size();
    const std::int64_t width = feats.numel() / n;
    std::vector<std::int64_t> example_shape(feats.shape.begin() + 1, feats.shape.end());
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

    for (int epoch = 0; epoch < epochs; ++epoch) {
        order_rng.shuffle(order);
        double epoch_loss = 0.0;
        for (std::int64_t start = 0; start < n; start += cfg.batch_size) {
            const std::int64_t bs = std::min<std::int64_t>(cfg.batch_size, n - start);
            Tensor batch = detail::gather_batch(feats, order, start, bs, width, example_shape);
            std::vector<std::int64_t> labels(static_cast<std::size_t>(bs));
            for (std::int64_t r = 0; r < bs; ++r)
                labels[static_cast<std::size_t>(r)] = ds.labels[static_cast<std::size_t>(order[start + r])];

            Gradients g = backward(suffix, batch, labels, has_dropout ? &drop_rng : nullptr);
            double loss = g.loss;
            if (anchor) {
                loss += prox_penalty(suffix, suffix_anchor, cfg.prox_mu);
                for (std::size_t i = 0; i < suffix.weights.size(); ++i)
                    for (std::size_t t = 0; t < suffix.weights[i].size(); ++t)
                        for (std::size_t k = 0; k < suffix.weights[i][t].data.size(); ++k)
                            g.grads[i][t].data[k] +=
                                cfg.prox_mu * (suffix.weights[i][t].data[k] -
                                               suffix_anchor.weights[i][t].data[k]);
            }
            if (!std::isfinite(loss) || loss > 1e6) throw DivergenceError(epoch);
            epoch_loss += loss * static_cast<double>(bs);

            for (std::size_t i = 0; i < suffix.weights.size(); ++i) {
                if (!suffix.layers[i].has_weights()) continue;
                const bool is_last = i == last_weighted;
                const double lr = is_last ? cfg.last_layer_lr : cfg.learning_rate;
                const bool decay_on =
                    frozen_prefix == 0 ||
                    (is_last && suffix.layers[i].kind == LayerKind::FullyConnected);
                const double wd = decay_on ? cfg.weight_decay : 0.0;
                for (std::size_t t = 0; t < suffix.weights[i].size(); ++t) {
                    Tensor& w = suffix.weights[i][t];
                    Tensor& v = vel[i][t];
                    const Tensor& gr = g.grads[i][t];
                    for (std::size_t k = 0; k < w.data.size(); ++k) {
                        v.data[k] = cfg.momentum * v.data[k] + gr.data[k] + wd * w.data[k];
                        w.data[k] -= lr * v.data[k];
                    }
                }
            }
        }
        if (epoch_loss / static_cast<double>(n) > 1e6) throw DivergenceError(epoch);
    }

    NetworkModel out = model;
    for (std::size_t i = boundary; i < model.layers.size(); ++i)
        out.weights[i] = suffix.weights[i - boundary];
    return out;
}

}  // namespace fedma
