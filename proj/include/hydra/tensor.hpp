#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace hydra {

// Dense row-major tensor. Rank is dynamic but almost everything in this
// codebase is a matrix (rows x cols) or an image (h x w x c) viewed flat.
template <typename T>
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)), data(numel_of(shape), T(0)) {}
    Tensor(std::initializer_list<int64_t> s) : Tensor(std::vector<int64_t>(s)) {}

    static int64_t numel_of(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t d : s) n *= d;
        return n;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    bool empty() const { return data.empty(); }

    int64_t rows() const { return shape.empty() ? 0 : shape[0]; }
    int64_t cols() const {
        if (shape.size() < 2) return shape.size() == 1 ? 1 : 0;
        int64_t c = 1;
        for (size_t i = 1; i < shape.size(); ++i) c *= shape[i];
        return c;
    }

    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }
    T* row(int64_t r) { return data.data() + r * cols(); }
    const T* row(int64_t r) const { return data.data() + r * cols(); }

    T& at(int64_t r, int64_t c) { return data[r * cols() + c]; }
    const T& at(int64_t r, int64_t c) const { return data[r * cols() + c]; }

    // Ensures the buffer matches `s`; contents are unspecified afterwards
    // (freshly grown storage is zeroed, reused storage keeps old values).
    void resize(std::vector<int64_t> s) {
        if (shape == s && data.size() == size_t(numel_of(s))) return;
        shape = std::move(s);
        data.assign(numel_of(shape), T(0));
    }
    void zero() { std::fill(data.begin(), data.end(), T(0)); }
    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape);
        for (int64_t i = 0; i < numel(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

inline std::string shape_str(const std::vector<int64_t>& s) {
    std::string r = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) r += ",";
        r += std::to_string(s[i]);
    }
    return r + "]";
}

}  // namespace hydra
