#pragma once

#include <cassert>
#include <cstring>
#include <initializer_list>
#include <sstream>
#include <string>
#include <vector>

#include "ndftm/common.hpp"

namespace ndftm {

// Dense row-major matrix of `real`. Rank is at most 2; vectors are stored as
// 1 x n rows and scalars as 1 x 1.
struct Tensor {
    int r = 0;
    int c = 0;
    std::vector<real> d;

    Tensor() = default;
    Tensor(int rows, int cols) : r(rows), c(cols), d(static_cast<size_t>(rows) * cols, real(0)) {
        assert(rows > 0 && cols > 0);
    }
    Tensor(int rows, int cols, std::vector<real> data) : r(rows), c(cols), d(std::move(data)) {
        assert(d.size() == static_cast<size_t>(r) * c);
    }

    static Tensor zeros(int rows, int cols) { return Tensor(rows, cols); }
    static Tensor full(int rows, int cols, real v) {
        Tensor t(rows, cols);
        std::fill(t.d.begin(), t.d.end(), v);
        return t;
    }
    static Tensor scalar(real v) { return Tensor(1, 1, {v}); }
    static Tensor row(std::initializer_list<real> vs) {
        return Tensor(1, static_cast<int>(vs.size()), std::vector<real>(vs));
    }
    static Tensor row(std::vector<real> vs) {
        const int n = static_cast<int>(vs.size());
        return Tensor(1, n, std::move(vs));
    }
    static Tensor identity(int n) {
        Tensor t(n, n);
        for (int i = 0; i < n; ++i) t.at(i, i) = real(1);
        return t;
    }
    static Tensor randn(int rows, int cols, Rng& rng, real scale = real(1)) {
        Tensor t(rows, cols);
        for (auto& v : t.d) v = static_cast<real>(rng.normal()) * scale;
        return t;
    }

    int rows() const { return r; }
    int cols() const { return c; }
    size_t size() const { return d.size(); }
    std::vector<int> shape() const { return {r, c}; }

    real& at(int i, int j) { return d[static_cast<size_t>(i) * c + j]; }
    real at(int i, int j) const { return d[static_cast<size_t>(i) * c + j]; }
    real* row_ptr(int i) { return d.data() + static_cast<size_t>(i) * c; }
    const real* row_ptr(int i) const { return d.data() + static_cast<size_t>(i) * c; }

    real item() const {
        assert(size() == 1);
        return d[0];
    }

    bool same_shape(const Tensor& o) const { return r == o.r && c == o.c; }

    bool all_finite() const {
        for (real v : d) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[" << r << "x" << c << "]";
        return os.str();
    }
};

inline bool bit_equal(const Tensor& a, const Tensor& b) {
    return a.r == b.r && a.c == b.c &&
           std::memcmp(a.d.data(), b.d.data(), a.d.size() * sizeof(real)) == 0;
}

}  // namespace ndftm
