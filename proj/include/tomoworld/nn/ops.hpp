#pragma once

// Hand-rolled NN primitives templated on the scalar type: float for training
// speed, double for the finite-difference gradient oracles. GEMMs go through
// Eigen; parallelism lives at the batch/sample level outside these functions,
// so everything here is single-threaded and bit-deterministic.
//
// Models keep all weights in one flat vector (ParamStore); layers hold
// offsets. Gradients are a flat vector of the same length, which makes
// per-sample gradient buffers and finite-difference sweeps trivial.

#define EIGEN_DONT_PARALLELIZE
#include <Eigen/Core>

#include "tomoworld/common.hpp"

namespace tw::nn {

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using CMatMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// C(M,N) = A(M,K) * B(K,N), optionally accumulating.
template <typename T>
void mm_nn(T* c, const T* a, const T* b, int m, int k, int n, bool accum = false) {
    MatMap<T> C(c, m, n);
    CMatMap<T> A(a, m, k), B(b, k, n);
    if (accum)
        C.noalias() += A * B;
    else
        C.noalias() = A * B;
}

// C(M,N) = A(M,K) * B(N,K)^T
template <typename T>
void mm_nt(T* c, const T* a, const T* b, int m, int k, int n, bool accum = false) {
    MatMap<T> C(c, m, n);
    CMatMap<T> A(a, m, k), B(b, n, k);
    if (accum)
        C.noalias() += A * B.transpose();
    else
        C.noalias() = A * B.transpose();
}

// C(M,N) = A(K,M)^T * B(K,N)
template <typename T>
void mm_tn(T* c, const T* a, const T* b, int m, int k, int n, bool accum = false) {
    MatMap<T> C(c, m, n);
    CMatMap<T> A(a, k, m), B(b, k, n);
    if (accum)
        C.noalias() += A.transpose() * B;
    else
        C.noalias() = A.transpose() * B;
}

// ---------------------------------------------------------------------------
// Flat parameter storage with named slices.
// ---------------------------------------------------------------------------
template <typename T>
struct ParamStore {
    struct Entry {
        std::string name;
        size_t offset = 0;
        size_t count = 0;
        std::vector<int> dims;
        bool decay = false;  // weight-decay eligibility (matrix weights)
    };

    std::vector<T> theta;
    std::vector<Entry> entries;

    size_t add(const std::string& name, std::vector<int> dims, bool decay) {
        size_t count = 1;
        for (int d : dims) count *= size_t(d);
        Entry e{name, theta.size(), count, std::move(dims), decay};
        theta.resize(theta.size() + count, T(0));
        entries.push_back(e);
        return entries.size() - 1;
    }

    const Entry& find(const std::string& name) const {
        for (const auto& e : entries)
            if (e.name == name) return e;
        throw Error("no such parameter: " + name);
    }

    T* ptr(size_t entry_idx) { return theta.data() + entries[entry_idx].offset; }
    const T* ptr(size_t entry_idx) const { return theta.data() + entries[entry_idx].offset; }

    std::vector<uint8_t> decay_mask() const {
        std::vector<uint8_t> mask(theta.size(), 0);
        for (const auto& e : entries)
            if (e.decay) std::fill(mask.begin() + long(e.offset), mask.begin() + long(e.offset + e.count), 1);
        return mask;
    }
};

template <typename T>
T silu(T x) {
    T s = T(1) / (T(1) + std::exp(-x));
    return x * s;
}

template <typename T>
T silu_grad(T x) {
    T s = T(1) / (T(1) + std::exp(-x));
    return s * (T(1) + x * (T(1) - s));
}

// ---------------------------------------------------------------------------
// Conv2d on HWC feature maps: activations are (H*W) x C row-major, weights
// (cout) x (k*k*cin) with patch order (ky, kx, cin). im2col turns the
// convolution into one GEMM per image.
// ---------------------------------------------------------------------------
struct ConvShape {
    int h = 0, w = 0, c = 0;
    size_t numel() const { return size_t(h) * w * c; }
};

struct ConvGeom {
    int cin = 0, cout = 0, ksize = 3, stride = 1, pad = 1;

    ConvShape out_shape(ConvShape in) const {
        return {(in.h + 2 * pad - ksize) / stride + 1, (in.w + 2 * pad - ksize) / stride + 1, cout};
    }
    size_t weight_count() const { return size_t(cout) * ksize * ksize * cin; }
};

template <typename T>
void im2col(const T* x, ConvShape in, const ConvGeom& g, ConvShape out, std::vector<T>& cols) {
    int k = g.ksize, patch = k * k * in.c;
    cols.assign(size_t(out.h) * out.w * patch, T(0));
    for (int oy = 0; oy < out.h; ++oy) {
        for (int ox = 0; ox < out.w; ++ox) {
            T* row = cols.data() + (size_t(oy) * out.w + ox) * patch;
            for (int ky = 0; ky < k; ++ky) {
                int iy = oy * g.stride + ky - g.pad;
                if (iy < 0 || iy >= in.h) continue;
                for (int kx = 0; kx < k; ++kx) {
                    int ix = ox * g.stride + kx - g.pad;
                    if (ix < 0 || ix >= in.w) continue;
                    const T* src = x + (size_t(iy) * in.w + ix) * in.c;
                    std::copy(src, src + in.c, row + (size_t(ky) * k + kx) * in.c);
                }
            }
        }
    }
}

template <typename T>
void col2im(const std::vector<T>& cols, ConvShape in, const ConvGeom& g, ConvShape out, T* dx) {
    int k = g.ksize, patch = k * k * in.c;
    std::fill(dx, dx + in.numel(), T(0));
    for (int oy = 0; oy < out.h; ++oy) {
        for (int ox = 0; ox < out.w; ++ox) {
            const T* row = cols.data() + (size_t(oy) * out.w + ox) * patch;
            for (int ky = 0; ky < k; ++ky) {
                int iy = oy * g.stride + ky - g.pad;
                if (iy < 0 || iy >= in.h) continue;
                for (int kx = 0; kx < k; ++kx) {
                    int ix = ox * g.stride + kx - g.pad;
                    if (ix < 0 || ix >= in.w) continue;
                    T* dst = dx + (size_t(iy) * in.w + ix) * in.c;
                    const T* src = row + (size_t(ky) * k + kx) * in.c;
                    for (int c = 0; c < in.c; ++c) dst[c] += src[c];
                }
            }
        }
    }
}

// y ((out.h*out.w) x cout) = im2col(x) * W^T + b. Caller keeps cols for backward.
template <typename T>
void conv_forward(const T* x, ConvShape in, const ConvGeom& g, const T* w, const T* b,
                  ConvShape out, std::vector<T>& cols, std::vector<T>& y) {
    im2col(x, in, g, out, cols);
    int rows = out.h * out.w, patch = g.ksize * g.ksize * g.cin;
    y.resize(size_t(rows) * g.cout);
    mm_nt(y.data(), cols.data(), w, rows, patch, g.cout);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < g.cout; ++c) y[size_t(r) * g.cout + c] += b[c];
}

// Accumulates gw/gb; writes dx unless null.
template <typename T>
void conv_backward(const std::vector<T>& cols, ConvShape in, const ConvGeom& g, const T* w,
                   ConvShape out, const std::vector<T>& dy, T* gw, T* gb, T* dx,
                   std::vector<T>& dcols) {
    int rows = out.h * out.w, patch = g.ksize * g.ksize * g.cin;
    // gw (cout x patch) += dy(rows x cout)^T * cols(rows x patch)
    mm_tn(gw, dy.data(), cols.data(), g.cout, rows, patch, /*accum=*/true);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < g.cout; ++c) gb[c] += dy[size_t(r) * g.cout + c];
    if (dx) {
        dcols.resize(size_t(rows) * patch);
        mm_nn(dcols.data(), dy.data(), w, rows, g.cout, patch);
        col2im(dcols, in, g, out, dx);
    }
}

// Nearest-neighbor 2x upsample on HWC maps.
template <typename T>
void upsample2_forward(const std::vector<T>& x, ConvShape in, std::vector<T>& y) {
    y.resize(in.numel() * 4);
    for (int r = 0; r < in.h * 2; ++r)
        for (int c = 0; c < in.w * 2; ++c) {
            const T* src = x.data() + (size_t(r / 2) * in.w + c / 2) * in.c;
            std::copy(src, src + in.c, y.data() + (size_t(r) * in.w * 2 + c) * in.c);
        }
}

template <typename T>
void upsample2_backward(const std::vector<T>& dy, ConvShape in, std::vector<T>& dx) {
    dx.assign(in.numel(), T(0));
    for (int r = 0; r < in.h * 2; ++r)
        for (int c = 0; c < in.w * 2; ++c) {
            T* dst = dx.data() + (size_t(r / 2) * in.w + c / 2) * in.c;
            const T* src = dy.data() + (size_t(r) * in.w * 2 + c) * in.c;
            for (int ch = 0; ch < in.c; ++ch) dst[ch] += src[ch];
        }
}

// ---------------------------------------------------------------------------
// LayerNorm over the last dimension of (rows x dim) matrices.
// ---------------------------------------------------------------------------
template <typename T>
struct LayerNormCache {
    std::vector<T> x;
    std::vector<T> mean, rstd;
};

template <typename T>
void ln_forward(const std::vector<T>& x, int rows, int d, const T* gamma, const T* beta,
                LayerNormCache<T>& cache, std::vector<T>& y) {
    cache.x = x;
    cache.mean.resize(size_t(rows));
    cache.rstd.resize(size_t(rows));
    y.resize(size_t(rows) * d);
    const T eps = T(1e-5);
    for (int r = 0; r < rows; ++r) {
        const T* xr = x.data() + size_t(r) * d;
        T mu = T(0);
        for (int i = 0; i < d; ++i) mu += xr[i];
        mu /= T(d);
        T var = T(0);
        for (int i = 0; i < d; ++i) var += (xr[i] - mu) * (xr[i] - mu);
        var /= T(d);
        T rs = T(1) / std::sqrt(var + eps);
        cache.mean[size_t(r)] = mu;
        cache.rstd[size_t(r)] = rs;
        T* yr = y.data() + size_t(r) * d;
        for (int i = 0; i < d; ++i) yr[i] = (xr[i] - mu) * rs * gamma[i] + beta[i];
    }
}

template <typename T>
void ln_backward(const LayerNormCache<T>& cache, int rows, int d, const T* gamma,
                 const std::vector<T>& dy, T* ggamma, T* gbeta, std::vector<T>& dx) {
    dx.resize(size_t(rows) * d);
    for (int r = 0; r < rows; ++r) {
        const T* xr = cache.x.data() + size_t(r) * d;
        const T* dyr = dy.data() + size_t(r) * d;
        T mu = cache.mean[size_t(r)], rs = cache.rstd[size_t(r)];
        T sum_dyg = T(0), sum_dyg_xhat = T(0);
        for (int i = 0; i < d; ++i) {
            T xhat = (xr[i] - mu) * rs;
            T dyg = dyr[i] * gamma[i];
            sum_dyg += dyg;
            sum_dyg_xhat += dyg * xhat;
            ggamma[i] += dyr[i] * xhat;
            gbeta[i] += dyr[i];
        }
        T* dxr = dx.data() + size_t(r) * d;
        for (int i = 0; i < d; ++i) {
            T xhat = (xr[i] - mu) * rs;
            T dyg = dyr[i] * gamma[i];
            dxr[i] = rs * (dyg - sum_dyg / T(d) - xhat * sum_dyg_xhat / T(d));
        }
    }
}

// Numerically stable in-place softmax over rows of length n.
template <typename T>
void softmax_rows(T* x, int rows, int n) {
    for (int r = 0; r < rows; ++r) {
        T* xr = x + size_t(r) * n;
        T mx = xr[0];
        for (int i = 1; i < n; ++i) mx = std::max(mx, xr[i]);
        T sum = T(0);
        for (int i = 0; i < n; ++i) {
            xr[i] = std::exp(xr[i] - mx);
            sum += xr[i];
        }
        for (int i = 0; i < n; ++i) xr[i] /= sum;
    }
}

}  // namespace tw::nn
