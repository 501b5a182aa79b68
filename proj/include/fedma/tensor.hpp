#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace fedma {

struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& what) : std::runtime_error(what) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// Shaped row-major array of 64-bit reals. All layer weights, activations and
// dataset features go through this one type.
struct Tensor {
    std::vector<std::int64_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::int64_t> s) : shape(std::move(s)) {
        data.assign(static_cast<std::size_t>(numel_of(shape)), 0.0);
    }
    Tensor(std::vector<std::int64_t> s, std::vector<double> d)
        : shape(std::move(s)), data(std::move(d)) {
        if (numel_of(shape) != static_cast<std::int64_t>(data.size()))
            throw DimensionError("tensor shape does not match payload size");
    }

    static std::int64_t numel_of(const std::vector<std::int64_t>& s) {
        std::int64_t n = 1;
        for (auto e : s) {
            if (e < 0) throw DimensionError("negative tensor extent");
            n *= e;
        }
        return n;
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    std::int64_t dim(std::size_t i) const { return shape.at(i); }
    std::size_t rank() const { return shape.size(); }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    // 2-d accessors for the frequent matrix case
    double& at2(std::int64_t r, std::int64_t c) { return data[static_cast<std::size_t>(r * shape[1] + c)]; }
    double at2(std::int64_t r, std::int64_t c) const { return data[static_cast<std::size_t>(r * shape[1] + c)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    Tensor reshaped(std::vector<std::int64_t> s) const {
        if (numel_of(s) != numel()) throw DimensionError("reshape changes element count");
        Tensor t;
        t.shape = std::move(s);
        t.data = data;
        return t;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "(";
        for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
        os << ")";
        return os.str();
    }
};

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double sq_norm(const Tensor& t) {
    double s = 0.0;
    for (double v : t.data) s += v * v;
    return s;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw DimensionError("max_abs_diff on mismatched shapes " + a.shape_str() + " vs " + b.shape_str());
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::fabs(a.data[i] - b.data[i]));
    return m;
}

}  // namespace fedma
