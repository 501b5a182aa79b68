#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "fedma/tensor.hpp"

namespace fedma {

struct DataError : std::runtime_error {
    explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

// Supervised dataset: features are (N, ...) row-major, labels in [0, classes).
struct Dataset {
    Tensor features;
    std::vector<std::int64_t> labels;
    std::int64_t classes = 0;
    // optional per-example tags (e.g. color/grayscale domain); empty if unused
    std::vector<std::int64_t> tags;

    std::int64_t size() const { return labels.empty() ? 0 : static_cast<std::int64_t>(labels.size()); }

    std::int64_t example_width() const {
        if (features.shape.empty()) return 0;
        std::int64_t w = 1;
        for (std::size_t i = 1; i < features.shape.size(); ++i) w *= features.shape[i];
        return w;
    }

    void validate() const {
        if (features.shape.empty() || features.shape[0] != size())
            throw DataError("feature row count does not match label count");
        for (auto l : labels)
            if (l < 0 || l >= classes) throw DataError("label out of range");
        if (!tags.empty() && static_cast<std::int64_t>(tags.size()) != size())
            throw DataError("tag count does not match label count");
    }

    Dataset subset(const std::vector<std::int64_t>& idx) const {
        Dataset out;
        out.classes = classes;
        const std::int64_t w = example_width();
        std::vector<std::int64_t> shape = features.shape;
        shape[0] = static_cast<std::int64_t>(idx.size());
        out.features = Tensor(shape);
        out.labels.reserve(idx.size());
        if (!tags.empty()) out.tags.reserve(idx.size());
        for (std::size_t r = 0; r < idx.size(); ++r) {
            const std::int64_t i = idx[r];
            if (i < 0 || i >= size()) throw DataError("subset index out of range");
            std::copy(features.data.begin() + i * w, features.data.begin() + (i + 1) * w,
                      out.features.data.begin() + static_cast<std::int64_t>(r) * w);
            out.labels.push_back(labels[static_cast<std::size_t>(i)]);
            if (!tags.empty()) out.tags.push_back(tags[static_cast<std::size_t>(i)]);
        }
        return out;
    }

    std::vector<std::int64_t> class_histogram() const {
        std::vector<std::int64_t> h(static_cast<std::size_t>(classes), 0);
        for (auto l : labels) ++h[static_cast<std::size_t>(l)];
        return h;
    }
};

}  // namespace fedma
