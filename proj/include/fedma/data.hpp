#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "fedma/dataset.hpp"
#include "fedma/rng.hpp"
#include "fedma/tensor.hpp"

namespace fedma {

// ---- IDX (MNIST container) --------------------------------------------

namespace detail {

inline std::uint32_t read_be32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw DataError("truncated IDX header");
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
           std::uint32_t(b[3]);
}

inline void write_be32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    os.write(reinterpret_cast<char*>(b), 4);
}

}  // namespace detail

// Reads an IDX image/label pair; pixels are scaled to [0,1].
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    std::ifstream imgs(images_path, std::ios::binary);
    if (!imgs) throw DataError("cannot open " + images_path);
    if (detail::read_be32(imgs) != 0x00000803u)
        throw DataError("bad IDX image magic in " + images_path);
    const std::uint32_t n = detail::read_be32(imgs);
    const std::uint32_t rows = detail::read_be32(imgs);
    const std::uint32_t cols = detail::read_be32(imgs);

    std::ifstream labs(labels_path, std::ios::binary);
    if (!labs) throw DataError("cannot open " + labels_path);
    if (detail::read_be32(labs) != 0x00000801u)
        throw DataError("bad IDX label magic in " + labels_path);
    const std::uint32_t nl = detail::read_be32(labs);
    if (n != nl) throw DataError("IDX image/label count mismatch");

    Dataset ds;
    ds.classes = 10;
    ds.features = Tensor({static_cast<std::int64_t>(n), 1, static_cast<std::int64_t>(rows),
                          static_cast<std::int64_t>(cols)});
    std::vector<unsigned char> buf(static_cast<std::size_t>(rows) * cols);
    for (std::uint32_t i = 0; i < n; ++i) {
        imgs.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
        if (!imgs) throw DataError("truncated IDX image payload");
        for (std::size_t k = 0; k < buf.size(); ++k)
            ds.features.data[i * buf.size() + k] = buf[k] / 255.0;
        char l;
        labs.read(&l, 1);
        if (!labs) throw DataError("truncated IDX label payload");
        ds.labels.push_back(static_cast<unsigned char>(l));
    }
    ds.validate();
    return ds;
}

inline void save_idx(const Dataset& ds, const std::string& images_path,
                     const std::string& labels_path) {
    if (ds.features.rank() != 4) throw DataError("save_idx expects (N,1,H,W) features");
    std::ofstream imgs(images_path, std::ios::binary);
    std::ofstream labs(labels_path, std::ios::binary);
    if (!imgs || !labs) throw DataError("cannot open IDX output files");
    detail::write_be32(imgs, 0x00000803u);
    detail::write_be32(imgs, static_cast<std::uint32_t>(ds.size()));
    detail::write_be32(imgs, static_cast<std::uint32_t>(ds.features.shape[2]));
    detail::write_be32(imgs, static_cast<std::uint32_t>(ds.features.shape[3]));
    detail::write_be32(labs, 0x00000801u);
    detail::write_be32(labs, static_cast<std::uint32_t>(ds.size()));
    const std::int64_t w = ds.example_width();
    for (std::int64_t i = 0; i < ds.size(); ++i) {
        for (std::int64_t k = 0; k < w; ++k) {
            const double v = std::clamp(ds.features.data[i * w + k], 0.0, 1.0);
            const unsigned char b = static_cast<unsigned char>(std::lround(v * 255.0));
            imgs.write(reinterpret_cast<const char*>(&b), 1);
        }
        const unsigned char l = static_cast<unsigned char>(ds.labels[static_cast<std::size_t>(i)]);
        labs.write(reinterpret_cast<const char*>(&l), 1);
    }
}

// ---- CIFAR-10 binary -----------------------------------------------------

struct ChannelStats {
    std::array<double, 3> mean, stddev;
};

inline ChannelStats cifar_channel_stats() {
    return {{0.491372549, 0.482352941, 0.446666667}, {0.247058824, 0.243529412, 0.261568627}};
}

inline void normalize_channels(Tensor& features, const ChannelStats& st) {
    if (features.rank() != 4 || features.shape[1] != 3)
        throw DataError("channel normalization expects (N,3,H,W)");
    const std::int64_t hw = features.shape[2] * features.shape[3];
    for (std::int64_t i = 0; i < features.shape[0]; ++i)
        for (std::int64_t c = 0; c < 3; ++c) {
            double* p = features.data.data() + (i * 3 + c) * hw;
            for (std::int64_t k = 0; k < hw; ++k)
                p[k] = (p[k] - st.mean[static_cast<std::size_t>(c)]) / st.stddev[static_cast<std::size_t>(c)];
        }
}

inline void denormalize_channels(Tensor& features, const ChannelStats& st) {
    if (features.rank() != 4 || features.shape[1] != 3)
        throw DataError("channel denormalization expects (N,3,H,W)");
    const std::int64_t hw = features.shape[2] * features.shape[3];
    for (std::int64_t i = 0; i < features.shape[0]; ++i)
        for (std::int64_t c = 0; c < 3; ++c) {
            double* p = features.data.data() + (i * 3 + c) * hw;
            for (std::int64_t k = 0; k < hw; ++k)
                p[k] = p[k] * st.stddev[static_cast<std::size_t>(c)] + st.mean[static_cast<std::size_t>(c)];
        }
}

// 3073-byte records: 1 label byte + 3072 channel-major pixels.
inline Dataset load_cifar_bin(const std::vector<std::string>& paths, bool normalize = true) {
    Dataset ds;
    ds.classes = 10;
    std::vector<double> feats;
    for (const auto& path : paths) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw DataError("cannot open " + path);
        f.seekg(0, std::ios::end);
        const std::int64_t bytes = f.tellg();
        f.seekg(0);
        if (bytes % 3073 != 0) throw DataError("CIFAR file size is not a multiple of 3073: " + path);
        const std::int64_t records = bytes / 3073;
        std::vector<unsigned char> rec(3073);
        for (std::int64_t i = 0; i < records; ++i) {
            f.read(reinterpret_cast<char*>(rec.data()), 3073);
            if (!f) throw DataError("truncated CIFAR record");
            ds.labels.push_back(rec[0]);
            for (std::size_t k = 1; k < rec.size(); ++k) feats.push_back(rec[k] / 255.0);
        }
    }
    ds.features = Tensor({static_cast<std::int64_t>(ds.labels.size()), 3, 32, 32}, std::move(feats));
    if (normalize) normalize_channels(ds.features, cifar_channel_stats());
    ds.validate();
    return ds;
}

// ---- synthetic corpora ---------------------------------------------------

// Gaussian class blobs with exact class balance, deterministic by seed.
inline Dataset synth_classification(std::int64_t classes, std::int64_t n, std::int64_t dim,
                                    std::uint64_t seed, double separation = 4.0) {
    Rng rng(derive_seed(seed, 0xb10b));
    std::vector<std::vector<double>> centers(static_cast<std::size_t>(classes));
    for (auto& c : centers) {
        c.resize(static_cast<std::size_t>(dim));
        double norm = 0.0;
        for (auto& v : c) {
            v = rng.normal();
            norm += v * v;
        }
        norm = std::sqrt(std::max(norm, 1e-12));
        for (auto& v : c) v *= separation / norm;
    }
    Dataset ds;
    ds.classes = classes;
    ds.features = Tensor({n, dim});
    ds.labels.resize(static_cast<std::size_t>(n));
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i % classes;
    rng.shuffle(order);
    for (std::int64_t i = 0; i < n; ++i) {
        const std::int64_t k = order[static_cast<std::size_t>(i)];
        ds.labels[static_cast<std::size_t>(i)] = k;
        for (std::int64_t d = 0; d < dim; ++d)
            ds.features.data[i * dim + d] = centers[static_cast<std::size_t>(k)][static_cast<std::size_t>(d)] + rng.normal();
    }
    return ds;
}

namespace detail {

// digit stroke skeletons in the unit square (y grows downward)
inline const std::vector<std::vector<std::array<double, 2>>>& digit_strokes(int digit) {
    auto ellipse = [](double cx, double cy, double rx, double ry) {
        std::vector<std::array<double, 2>> p;
        for (int i = 0; i <= 16; ++i) {
            const double a = 2.0 * M_PI * i / 16.0;
            p.push_back({cx + rx * std::sin(a), cy - ry * std::cos(a)});
        }
        return p;
    };
    static const std::vector<std::vector<std::vector<std::array<double, 2>>>> glyphs = {
        /*0*/ {ellipse(0.5, 0.5, 0.26, 0.38)},
        /*1*/ {{{0.34, 0.26}, {0.54, 0.12}, {0.54, 0.88}}, {{0.34, 0.88}, {0.72, 0.88}}},
        /*2*/ {{{0.28, 0.28}, {0.34, 0.14}, {0.52, 0.10}, {0.70, 0.16}, {0.73, 0.32},
                {0.62, 0.50}, {0.28, 0.88}},
               {{0.28, 0.88}, {0.76, 0.88}}},
        /*3*/ {{{0.28, 0.16}, {0.56, 0.10}, {0.72, 0.24}, {0.58, 0.44}, {0.44, 0.48}},
               {{0.44, 0.48}, {0.62, 0.54}, {0.74, 0.70}, {0.56, 0.88}, {0.28, 0.84}}},
        /*4*/ {{{0.62, 0.10}, {0.26, 0.60}, {0.80, 0.60}}, {{0.64, 0.36}, {0.64, 0.92}}},
        /*5*/ {{{0.72, 0.12}, {0.32, 0.12}, {0.30, 0.48}, {0.56, 0.42}, {0.74, 0.58},
                {0.66, 0.84}, {0.30, 0.88}}},
        /*6*/ {{{0.64, 0.10}, {0.42, 0.28}, {0.32, 0.52}, {0.33, 0.76}, {0.50, 0.90},
                {0.68, 0.78}, {0.66, 0.58}, {0.48, 0.50}, {0.34, 0.60}}},
        /*7*/ {{{0.26, 0.12}, {0.76, 0.12}, {0.46, 0.90}}, {{0.36, 0.50}, {0.66, 0.50}}},
        /*8*/ {ellipse(0.5, 0.30, 0.18, 0.18), ellipse(0.5, 0.68, 0.23, 0.22)},
        /*9*/ {ellipse(0.52, 0.32, 0.20, 0.20), {{0.72, 0.34}, {0.68, 0.62}, {0.54, 0.90}}},
    };
    return glyphs[static_cast<std::size_t>(digit)];
}

inline double seg_dist(double px, double py, double ax, double ay, double bx, double by) {
    const double vx = bx - ax, vy = by - ay;
    const double wx = px - ax, wy = py - ay;
    const double vv = vx * vx + vy * vy;
    double t = vv > 0.0 ? (wx * vx + wy * vy) / vv : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double dx = px - (ax + t * vx), dy = py - (ay + t * vy);
    return std::sqrt(dx * dx + dy * dy);
}

}  // namespace detail

// Procedural handwritten-style digit corpus: stroke skeletons under random
// affine jitter, rasterized at 28x28. Self-contained stand-in for MNIST when
// no IDX files are available.
inline Dataset synth_digits(std::int64_t n, std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0xd161));
    const std::int64_t hw = 28;
    Dataset ds;
    ds.classes = 10;
    ds.features = Tensor({n, 1, hw, hw});
    ds.labels.resize(static_cast<std::size_t>(n));
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i % 10;
    rng.shuffle(order);

    for (std::int64_t i = 0; i < n; ++i) {
        const int digit = static_cast<int>(order[static_cast<std::size_t>(i)]);
        ds.labels[static_cast<std::size_t>(i)] = digit;
        const double rot = rng.uniform(-0.30, 0.30);
        const double scale_x = rng.uniform(0.75, 1.18), scale_y = rng.uniform(0.75, 1.18);
        const double shear = rng.uniform(-0.22, 0.22);
        const double tx = rng.uniform(-0.10, 0.10), ty = rng.uniform(-0.10, 0.10);
        const double thick = rng.uniform(0.9, 2.1);
        const double level = rng.uniform(0.55, 1.0);
        const double cr = std::cos(rot), sr = std::sin(rot);

        // transformed strokes in pixel coordinates
        std::vector<std::array<double, 4>> segs;
        for (const auto& stroke : detail::digit_strokes(digit)) {
            for (std::size_t p = 0; p + 1 < stroke.size(); ++p) {
                auto tf = [&](const std::array<double, 2>& q) {
                    double x = q[0] - 0.5, y = q[1] - 0.5;
                    x += shear * y;
                    x *= scale_x;
                    y *= scale_y;
                    const double xr = cr * x - sr * y, yr = sr * x + cr * y;
                    return std::array<double, 2>{(xr + 0.5 + tx) * (hw - 1), (yr + 0.5 + ty) * (hw - 1)};
                };
                const auto a = tf(stroke[p]), b = tf(stroke[p + 1]);
                segs.push_back({a[0], a[1], b[0], b[1]});
            }
        }
        double* img = ds.features.data.data() + i * hw * hw;
        for (std::int64_t y = 0; y < hw; ++y)
            for (std::int64_t x = 0; x < hw; ++x) {
                double d = 1e9;
                for (const auto& s : segs)
                    d = std::min(d, detail::seg_dist(static_cast<double>(x), static_cast<double>(y),
                                                     s[0], s[1], s[2], s[3]));
                double v = std::clamp(thick + 0.5 - d, 0.0, 1.0) * level;
                v += rng.normal(0.0, 0.10);
                img[y * hw + x] = std::clamp(v, 0.0, 1.0);
            }
    }
    return ds;
}

// 4-class color/shape corpus for the data-bias study: every class has a
// distinct blob position (the "real" feature, noisy) plus a saturated color
// tint that grayscale conversion destroys.
inline Dataset synth_color_shapes(std::int64_t n, std::uint64_t seed, std::int64_t hw = 8,
                                  double noise = 0.25) {
    static const double tint[4][3] = {
        {1.0, 0.35, 0.35}, {0.35, 1.0, 0.35}, {0.35, 0.35, 1.0}, {0.95, 0.95, 0.25}};
    static const std::int64_t pos[4][2] = {{1, 1}, {1, 5}, {5, 1}, {5, 5}};
    Rng rng(derive_seed(seed, 0xc01a));
    Dataset ds;
    ds.classes = 4;
    ds.features = Tensor({n, 3, hw, hw});
    ds.labels.resize(static_cast<std::size_t>(n));
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i % 4;
    rng.shuffle(order);
    for (std::int64_t i = 0; i < n; ++i) {
        const std::int64_t k = order[static_cast<std::size_t>(i)];
        ds.labels[static_cast<std::size_t>(i)] = k;
        const std::int64_t jy = pos[k][0] + rng.uniform_index(3) - 1;
        const std::int64_t jx = pos[k][1] + rng.uniform_index(3) - 1;
        for (std::int64_t c = 0; c < 3; ++c) {
            double* img = ds.features.data.data() + (i * 3 + c) * hw * hw;
            for (std::int64_t y = 0; y < hw; ++y)
                for (std::int64_t x = 0; x < hw; ++x) {
                    double v = 0.15;
                    if (std::llabs(y - jy) <= 1 && std::llabs(x - jx) <= 1) v = 0.85;
                    v = v * tint[k][c] + rng.normal(0.0, noise);
                    img[y * hw + x] = std::clamp(v, 0.0, 1.0);
                }
        }
    }
    return ds;
}

// ---- partitioners ----------------------------------------------------------

struct PartitionPlan {
    std::int64_t client_count = 0;
    std::vector<std::vector<std::int64_t>> shards;
    std::uint64_t seed = 0;
    std::string strategy;

    bool has_empty_clients() const {
        for (const auto& s : shards)
            if (s.empty()) return true;
        return false;
    }
};

inline void write_partition_csv(std::ostream& os, const PartitionPlan& plan) {
    os << "client,index\n";
    for (std::size_t j = 0; j < plan.shards.size(); ++j)
        for (auto i : plan.shards[j]) os << j << "," << i << "\n";
}

namespace detail {

inline std::vector<std::vector<std::int64_t>> indices_by_class(const std::vector<std::int64_t>& labels,
                                                               std::int64_t classes,
                                                               const std::vector<std::int64_t>* subset) {
    std::vector<std::vector<std::int64_t>> by_class(static_cast<std::size_t>(classes));
    if (subset) {
        for (auto i : *subset) by_class[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])].push_back(i);
    } else {
        for (std::size_t i = 0; i < labels.size(); ++i)
            by_class[static_cast<std::size_t>(labels[i])].push_back(static_cast<std::int64_t>(i));
    }
    return by_class;
}

inline std::vector<std::vector<std::int64_t>> homogeneous_shards(
    const std::vector<std::int64_t>& labels, std::int64_t classes, std::int64_t J, Rng& rng,
    const std::vector<std::int64_t>* subset) {
    auto by_class = indices_by_class(labels, classes, subset);
    std::vector<std::vector<std::int64_t>> shards(static_cast<std::size_t>(J));
    std::int64_t cursor = 0;  // rotates so per-class remainders spread evenly
    for (auto& cls : by_class) {
        rng.shuffle(cls);
        const std::int64_t base = static_cast<std::int64_t>(cls.size()) / J;
        const std::int64_t extra = static_cast<std::int64_t>(cls.size()) % J;
        std::size_t p = 0;
        for (std::int64_t j = 0; j < J; ++j) {
            std::int64_t take = base;
            if (((j - cursor) % J + J) % J < extra) ++take;
            for (std::int64_t t = 0; t < take; ++t) shards[static_cast<std::size_t>(j)].push_back(cls[p++]);
        }
        cursor = (cursor + extra) % J;
    }
    return shards;
}

inline std::vector<std::vector<std::int64_t>> dirichlet_shards(
    const std::vector<std::int64_t>& labels, std::int64_t classes, std::int64_t J, double alpha,
    Rng& rng, const std::vector<std::int64_t>* subset) {
    auto by_class = indices_by_class(labels, classes, subset);
    std::vector<std::vector<std::int64_t>> shards(static_cast<std::size_t>(J));
    for (auto& cls : by_class) {
        rng.shuffle(cls);
        const auto p = rng.dirichlet(alpha, static_cast<std::size_t>(J));
        const std::int64_t nk = static_cast<std::int64_t>(cls.size());
        // largest-remainder rounding conserves the class total exactly
        std::vector<std::int64_t> counts(static_cast<std::size_t>(J));
        std::vector<std::pair<double, std::int64_t>> frac;
        std::int64_t assigned = 0;
        for (std::int64_t j = 0; j < J; ++j) {
            const double exact = p[static_cast<std::size_t>(j)] * static_cast<double>(nk);
            counts[static_cast<std::size_t>(j)] = static_cast<std::int64_t>(std::floor(exact));
            assigned += counts[static_cast<std::size_t>(j)];
            frac.emplace_back(-(exact - std::floor(exact)), j);
        }
        std::sort(frac.begin(), frac.end());
        for (std::int64_t r = 0; r < nk - assigned; ++r) ++counts[static_cast<std::size_t>(frac[static_cast<std::size_t>(r)].second)];
        std::size_t q = 0;
        for (std::int64_t j = 0; j < J; ++j)
            for (std::int64_t t = 0; t < counts[static_cast<std::size_t>(j)]; ++t)
                shards[static_cast<std::size_t>(j)].push_back(cls[q++]);
    }
    return shards;
}

}  // namespace detail

// Each client receives an (up to +-1 per class) equal share of every class.
inline PartitionPlan partition_homogeneous(const Dataset& ds, std::int64_t J, std::uint64_t seed) {
    if (J < 1) throw DataError("partition needs J >= 1");
    Rng rng(derive_seed(seed, 0x401));
    PartitionPlan plan;
    plan.client_count = J;
    plan.seed = seed;
    plan.strategy = "homogeneous";
    plan.shards = detail::homogeneous_shards(ds.labels, ds.classes, J, rng, nullptr);
    return plan;
}

// Heterogeneous partition: per class, client proportions drawn from a
// symmetric Dirichlet(alpha); allocation by largest remainder. Clients may
// end up empty, which the plan exposes via has_empty_clients().
inline PartitionPlan partition_dirichlet(const Dataset& ds, std::int64_t J, double alpha,
                                         std::uint64_t seed) {
    if (J < 1) throw DataError("partition needs J >= 1");
    if (alpha <= 0.0) throw DataError("dirichlet alpha must be positive");
    Rng rng(derive_seed(seed, 0xd1c));
    PartitionPlan plan;
    plan.client_count = J;
    plan.seed = seed;
    plan.strategy = "dirichlet";
    plan.shards = detail::dirichlet_shards(ds.labels, ds.classes, J, alpha, rng, nullptr);
    return plan;
}

// Groups examples of the tagged domain (tag 1 = grayscale) vs the rest.
inline PartitionPlan partition_by_tag(const Dataset& ds) {
    if (ds.tags.empty()) throw DataError("partition_by_tag needs a tagged dataset");
    PartitionPlan plan;
    plan.client_count = 2;
    plan.strategy = "bias";
    plan.shards.assign(2, {});
    for (std::int64_t i = 0; i < ds.size(); ++i)
        plan.shards[ds.tags[static_cast<std::size_t>(i)] ? 1 : 0].push_back(i);
    return plan;
}

// Converts an exact per-class fraction of images to grayscale (luminance
// replicated into all three channels) and tags every example 1=gray, 0=color.
inline Dataset apply_grayscale_bias(const Dataset& ds, const std::vector<std::int64_t>& biased_classes,
                                    double heavy_frac, double light_frac, std::uint64_t seed) {
    if (ds.features.rank() != 4 || ds.features.shape[1] != 3)
        throw DataError("grayscale bias expects (N,3,H,W) features");
    Rng rng(derive_seed(seed, 0x9147));
    Dataset out = ds;
    out.tags.assign(static_cast<std::size_t>(ds.size()), 0);
    const std::int64_t hw = ds.features.shape[2] * ds.features.shape[3];
    auto by_class = detail::indices_by_class(ds.labels, ds.classes, nullptr);
    for (std::int64_t k = 0; k < ds.classes; ++k) {
        const bool biased =
            std::find(biased_classes.begin(), biased_classes.end(), k) != biased_classes.end();
        const double frac = biased ? heavy_frac : light_frac;
        auto& idx = by_class[static_cast<std::size_t>(k)];
        rng.shuffle(idx);
        const auto n_gray = static_cast<std::int64_t>(std::llround(frac * static_cast<double>(idx.size())));
        for (std::int64_t t = 0; t < n_gray; ++t) {
            const std::int64_t i = idx[static_cast<std::size_t>(t)];
            out.tags[static_cast<std::size_t>(i)] = 1;
            double* base = out.features.data.data() + i * 3 * hw;
            for (std::int64_t p = 0; p < hw; ++p) {
                const double lum = 0.299 * base[p] + 0.587 * base[hw + p] + 0.114 * base[2 * hw + p];
                base[p] = base[hw + p] = base[2 * hw + p] = lum;
            }
        }
    }
    return out;
}

// Random crop from 4-pixel zero padding plus a fair-coin horizontal flip.
inline Tensor augment(const Tensor& batch, std::uint64_t seed) {
    if (batch.rank() != 4) throw DataError("augment expects (N,C,H,W)");
    Rng rng(derive_seed(seed, 0xa26));
    const std::int64_t N = batch.shape[0], C = batch.shape[1], H = batch.shape[2], W = batch.shape[3];
    const std::int64_t padding = 4;
    Tensor out(batch.shape);
    for (std::int64_t i = 0; i < N; ++i) {
        const std::int64_t dy = static_cast<std::int64_t>(rng.uniform_index(2 * padding + 1)) - padding;
        const std::int64_t dx = static_cast<std::int64_t>(rng.uniform_index(2 * padding + 1)) - padding;
        const bool flip = rng.bernoulli(0.5);
        for (std::int64_t c = 0; c < C; ++c) {
            const double* src = batch.data.data() + (i * C + c) * H * W;
            double* dst = out.data.data() + (i * C + c) * H * W;
            for (std::int64_t y = 0; y < H; ++y)
                for (std::int64_t x = 0; x < W; ++x) {
                    const std::int64_t sx = flip ? W - 1 - x : x;
                    const std::int64_t iy = y + dy, ix = sx + dx;
                    dst[y * W + x] = (iy >= 0 && iy < H && ix >= 0 && ix < W) ? src[iy * W + ix] : 0.0;
                }
        }
    }
    return out;
}

// ---- character-level text -------------------------------------------------

// fixed 80-symbol vocabulary; the last symbol doubles as the out-of-vocabulary target
inline const std::string& char_vocab() {
    static const std::string v =
        "\n !\"&'(),-.0123456789:;>?ABCDEFGHIJKLMNOPQRSTUVWXYZ[]abcdefghijklmnopqrstuvwxyz}";
    return v;
}

inline std::int64_t char_to_id(char c) {
    const auto& v = char_vocab();
    const auto pos = v.find(c);
    return pos == std::string::npos ? static_cast<std::int64_t>(v.size()) - 1
                                    : static_cast<std::int64_t>(pos);
}

namespace detail {

// a speaking-role marker is a line beginning with "NAME." (all caps)
inline bool parse_role_line(const std::string& line, std::string* role, std::string* rest) {
    std::size_t i = 0;
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t start = i;
    while (i < line.size() &&
           (std::isupper(static_cast<unsigned char>(line[i])) || line[i] == ' '))
        ++i;
    if (i == start || i >= line.size() || line[i] != '.') return false;
    if (line.substr(start, i - start).find_first_not_of(' ') == std::string::npos) return false;
    *role = line.substr(start, i - start);
    *rest = line.substr(i + 1);
    return true;
}

}  // namespace detail

// Next-character prediction datasets, one per speaking role. Roles with fewer
// than min_points windows are dropped; at most J roles are kept (seeded pick).
inline std::vector<Dataset> char_text_dataset(const std::string& text, std::int64_t seq_len,
                                              std::int64_t J, std::int64_t min_points,
                                              std::uint64_t seed = 0) {
    std::map<std::string, std::string> role_text;
    std::string current;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const std::size_t eol = std::min(text.find('\n', pos), text.size());
        const std::string line = text.substr(pos, eol - pos);
        std::string role, rest;
        if (detail::parse_role_line(line, &role, &rest)) {
            current = role;
            role_text[current] += rest + "\n";
        } else if (!current.empty()) {
            role_text[current] += line + "\n";
        }
        pos = eol + 1;
    }

    std::vector<std::pair<std::string, std::vector<std::int64_t>>> roles;
    for (const auto& [name, body] : role_text) {
        std::vector<std::int64_t> ids;
        ids.reserve(body.size());
        for (char c : body) ids.push_back(char_to_id(c));
        if (static_cast<std::int64_t>(ids.size()) > seq_len &&
            static_cast<std::int64_t>(ids.size()) - seq_len >= min_points)
            roles.emplace_back(name, std::move(ids));
    }
    if (roles.empty()) throw DataError("no speaking role has enough text");

    if (static_cast<std::int64_t>(roles.size()) > J) {
        std::vector<std::size_t> pick(roles.size());
        for (std::size_t i = 0; i < pick.size(); ++i) pick[i] = i;
        Rng rng(derive_seed(seed, 0x7e47));
        rng.shuffle(pick);
        pick.resize(static_cast<std::size_t>(J));
        std::sort(pick.begin(), pick.end());
        std::vector<std::pair<std::string, std::vector<std::int64_t>>> kept;
        for (auto i : pick) kept.push_back(std::move(roles[i]));
        roles = std::move(kept);
    }

    const auto K = static_cast<std::int64_t>(char_vocab().size());
    std::vector<Dataset> out;
    for (auto& [name, ids] : roles) {
        const std::int64_t n = static_cast<std::int64_t>(ids.size()) - seq_len;
        Dataset ds;
        ds.classes = K;
        ds.features = Tensor({n, seq_len});
        ds.labels.resize(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) {
            for (std::int64_t t = 0; t < seq_len; ++t)
                ds.features.data[i * seq_len + t] = static_cast<double>(ids[static_cast<std::size_t>(i + t)]);
            ds.labels[static_cast<std::size_t>(i)] = ids[static_cast<std::size_t>(i + seq_len)];
        }
        out.push_back(std::move(ds));
    }
    return out;
}

// Staged growth study: the data splits into `groups` homogeneous pieces, each
// split further into `subgroups` Dirichlet shards; stage t exposes the first
// t groups' shards, i.e. subgroups*t clients.
inline std::vector<PartitionPlan> data_efficiency_plan(const Dataset& ds, std::int64_t groups,
                                                       std::int64_t subgroups, double alpha,
                                                       std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0xde55));
    auto group_shards = detail::homogeneous_shards(ds.labels, ds.classes, groups, rng, nullptr);
    std::vector<std::vector<std::int64_t>> all_subshards;
    for (auto& g : group_shards) {
        auto subs = detail::dirichlet_shards(ds.labels, ds.classes, subgroups, alpha, rng, &g);
        for (auto& s : subs) all_subshards.push_back(std::move(s));
    }
    std::vector<PartitionPlan> stages;
    for (std::int64_t t = 1; t <= groups; ++t) {
        PartitionPlan plan;
        plan.client_count = t * subgroups;
        plan.seed = seed;
        plan.strategy = "data-efficiency";
        plan.shards.assign(all_subshards.begin(), all_subshards.begin() + t * subgroups);
        stages.push_back(std::move(plan));
    }
    return stages;
}

}  // namespace fedma
