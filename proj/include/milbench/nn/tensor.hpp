#pragma once

#include <Eigen/Core>

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "milbench/core/errors.hpp"

namespace milbench::nn {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T>
using MatMap = Eigen::Map<Mat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const Mat<T>>;
// Eigen picks its vectorized reduction split from the pointer alignment, so
// buffers with allocator-dependent alignment make sums vary from run to run.
template <typename T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

// N x C x H x W; dense layers use C as the feature axis with H = W = 1.
struct Shape {
    int n = 0, c = 0, h = 1, w = 1;

    [[nodiscard]] std::size_t numel() const { return static_cast<std::size_t>(n) * c * h * w; }
    [[nodiscard]] std::size_t per_item() const { return static_cast<std::size_t>(c) * h * w; }
    bool operator==(const Shape&) const = default;
};

inline std::string to_string(const Shape& s) {
    return "[" + std::to_string(s.n) + "," + std::to_string(s.c) + "," + std::to_string(s.h) + "," +
           std::to_string(s.w) + "]";
}

template <typename T>
struct Tensor {
    Shape shape;
    Buffer<T> data;

    Tensor() = default;
    explicit Tensor(Shape s, T fill = T(0)) : shape(s), data(s.numel(), fill) {}

    [[nodiscard]] std::size_t numel() const { return data.size(); }
    T* item(int i) { return data.data() + static_cast<std::size_t>(i) * shape.per_item(); }
    [[nodiscard]] const T* item(int i) const { return data.data() + static_cast<std::size_t>(i) * shape.per_item(); }

    // Rows = batch items, columns = flattened features.
    MatMap<T> matrix() { return MatMap<T>(data.data(), shape.n, static_cast<Eigen::Index>(shape.per_item())); }
    [[nodiscard]] ConstMatMap<T> matrix() const {
        return ConstMatMap<T>(data.data(), shape.n, static_cast<Eigen::Index>(shape.per_item()));
    }
};

// A trainable tensor (or a persistent buffer such as batch-norm running stats).
template <typename T>
struct Param {
    std::string name;
    std::vector<int> dims;
    Buffer<T> value;
    Buffer<T> grad;
    bool trainable = true;

    Param() = default;
    Param(std::string n, std::vector<int> d, bool train = true) : name(std::move(n)), dims(std::move(d)), trainable(train) {
        std::size_t total = 1;
        for (int x : dims) total *= static_cast<std::size_t>(x);
        value.assign(total, T(0));
        grad.assign(trainable ? total : 0, T(0));
    }

    [[nodiscard]] std::size_t size() const { return value.size(); }
    void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

}  // namespace milbench::nn
