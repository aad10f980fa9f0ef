#pragma once

#include <algorithm>
#include <cmath>
#include <limits>

#include "ndftm/tensor.hpp"

// Forward math shared by the tape primitives and the tape-free evaluation
// paths, so both routes compute bit-identical values.

namespace ndftm::kernels {

inline real sigmoid(real x) {
    if (x >= real(0)) {
        return real(1) / (real(1) + std::exp(-x));
    }
    const real e = std::exp(x);
    return e / (real(1) + e);
}

inline real softplus(real x) {
    // log(1 + e^x), stable for large |x|
    if (x > real(30)) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

// out = a * b, a: m x k, b: k x n
inline void matmul(const Tensor& a, const Tensor& b, Tensor& out) {
    const int m = a.r, k = a.c, n = b.c;
    std::fill(out.d.begin(), out.d.end(), real(0));
    for (int i = 0; i < m; ++i) {
        const real* ai = a.row_ptr(i);
        real* oi = out.row_ptr(i);
        for (int p = 0; p < k; ++p) {
            const real av = ai[p];
            if (av == real(0)) continue;
            const real* bp = b.row_ptr(p);
            for (int j = 0; j < n; ++j) oi[j] += av * bp[j];
        }
    }
}

// out = a * b^T, a: m x k, b: n x k
inline void matmul_nt(const Tensor& a, const Tensor& b, Tensor& out) {
    const int m = a.r, k = a.c, n = b.r;
    for (int i = 0; i < m; ++i) {
        const real* ai = a.row_ptr(i);
        real* oi = out.row_ptr(i);
        for (int j = 0; j < n; ++j) {
            const real* bj = b.row_ptr(j);
            real acc = real(0);
            for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
            oi[j] = acc;
        }
    }
}

// out = a^T * b, a: k x m, b: k x n (used by matmul backward)
inline void matmul_tn_add(const Tensor& a, const Tensor& b, Tensor& out) {
    const int k = a.r, m = a.c, n = b.c;
    for (int p = 0; p < k; ++p) {
        const real* ap = a.row_ptr(p);
        const real* bp = b.row_ptr(p);
        for (int i = 0; i < m; ++i) {
            const real av = ap[i];
            if (av == real(0)) continue;
            real* oi = out.row_ptr(i);
            for (int j = 0; j < n; ++j) oi[j] += av * bp[j];
        }
    }
}

// out = x * W + bias (bias broadcast across rows); x: m x k, W: k x n, bias: 1 x n
inline void affine(const Tensor& x, const Tensor& w, const Tensor& bias, Tensor& out) {
    matmul(x, w, out);
    for (int i = 0; i < out.r; ++i) {
        real* oi = out.row_ptr(i);
        for (int j = 0; j < out.c; ++j) oi[j] += bias.d[j];
    }
}

inline void softmax_rows(const Tensor& x, Tensor& out) {
    for (int i = 0; i < x.r; ++i) {
        const real* xi = x.row_ptr(i);
        real* oi = out.row_ptr(i);
        real m = xi[0];
        for (int j = 1; j < x.c; ++j) m = std::max(m, xi[j]);
        real s = real(0);
        for (int j = 0; j < x.c; ++j) {
            oi[j] = std::exp(xi[j] - m);
            s += oi[j];
        }
        const real inv = real(1) / s;
        for (int j = 0; j < x.c; ++j) oi[j] *= inv;
    }
}

// Topic proportions from a hard {0,1} mask: softmax of zeta restricted to the
// mask's support. An all-zero mask falls back to the uniform distribution and
// bumps `degenerate_count` (callers log the incident).
inline void masked_theta_hard(const real* b, const real* zeta, int k, real* theta,
                              long* degenerate_count = nullptr) {
    real m = -std::numeric_limits<real>::infinity();
    for (int j = 0; j < k; ++j) {
        if (b[j] > real(0.5) && zeta[j] > m) m = zeta[j];
    }
    if (m == -std::numeric_limits<real>::infinity()) {
        if (degenerate_count) ++*degenerate_count;
        const real u = real(1) / static_cast<real>(k);
        for (int j = 0; j < k; ++j) theta[j] = u;
        return;
    }
    real s = real(0);
    for (int j = 0; j < k; ++j) {
        theta[j] = (b[j] > real(0.5)) ? std::exp(zeta[j] - m) : real(0);
        s += theta[j];
    }
    const real inv = real(1) / s;
    for (int j = 0; j < k; ++j) theta[j] *= inv;
}

struct LstmDims {
    int in = 0;
    int hidden = 0;
};

// Gate order in the fused weight matrices: input, forget, cell, output.
// wx: in x 4H, wh: H x 4H, bias: 1 x 4H.
inline void lstm_step(const Tensor& x, const Tensor& h_prev, const Tensor& c_prev,
                      const Tensor& wx, const Tensor& wh, const Tensor& bias,
                      Tensor& h_out, Tensor& c_out, Tensor* gates_out = nullptr) {
    const int batch = x.r;
    const int hid = h_prev.c;
    Tensor gates(batch, 4 * hid);
    affine(x, wx, bias, gates);
    Tensor hw(batch, 4 * hid);
    matmul(h_prev, wh, hw);
    for (size_t i = 0; i < gates.d.size(); ++i) gates.d[i] += hw.d[i];
    for (int i = 0; i < batch; ++i) {
        real* g = gates.row_ptr(i);
        const real* cp = c_prev.row_ptr(i);
        real* ho = h_out.row_ptr(i);
        real* co = c_out.row_ptr(i);
        for (int j = 0; j < hid; ++j) {
            const real ig = sigmoid(g[j]);
            const real fg = sigmoid(g[hid + j]);
            const real cg = std::tanh(g[2 * hid + j]);
            const real og = sigmoid(g[3 * hid + j]);
            co[j] = fg * cp[j] + ig * cg;
            ho[j] = og * std::tanh(co[j]);
            g[j] = ig;
            g[hid + j] = fg;
            g[2 * hid + j] = cg;
            g[3 * hid + j] = og;
        }
    }
    if (gates_out) *gates_out = std::move(gates);
}

// log(sum_k theta_k * beta[k][w]) with a log-sum-exp fallback when the direct
// sum underflows; mixture probabilities are floored at `floor_p` and the
// incident counted.
inline real log_mixture_prob(const real* theta, const Tensor& beta, int word, int k,
                             real floor_p, long* guard_count) {
    real p = real(0);
    for (int j = 0; j < k; ++j) p += theta[j] * beta.at(j, word);
    if (p >= floor_p) return std::log(p);
    real m = -std::numeric_limits<real>::infinity();
    for (int j = 0; j < k; ++j) {
        if (theta[j] > real(0)) {
            const real l = std::log(theta[j]) + std::log(beta.at(j, word));
            if (l > m) m = l;
        }
    }
    if (std::isfinite(m)) {
        real s = real(0);
        for (int j = 0; j < k; ++j) {
            if (theta[j] > real(0)) {
                s += std::exp(std::log(theta[j]) + std::log(beta.at(j, word)) - m);
            }
        }
        const real lp = m + std::log(s);
        if (lp >= std::log(floor_p)) return lp;
    }
    if (guard_count) ++*guard_count;
    return std::log(floor_p);
}

}  // namespace ndftm::kernels
