#pragma once

// PSNR and SSIM. Doubles throughout; the formula-oracle tests pin these to
// 1e-9 against direct recomputation.

#include "tomoworld/volume.hpp"

namespace tw {

inline double mse(const std::vector<double>& a, const std::vector<double>& b) {
    check(a.size() == b.size() && !a.empty(), "mse: shape mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        acc += d * d;
    }
    return acc / double(a.size());
}

inline double psnr(const std::vector<double>& a, const std::vector<double>& b, double data_range) {
    check(data_range > 0, "psnr: data_range must be positive");
    double m = mse(a, b);
    if (m == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(data_range * data_range / m);
}

inline std::vector<double> to_double(const std::vector<float>& v) {
    return std::vector<double>(v.begin(), v.end());
}

inline std::vector<double> gaussian_window(int size, double sigma) {
    std::vector<double> w(size_t(size), 0.0);
    double sum = 0.0;
    for (int i = 0; i < size; ++i) {
        double x = i - 0.5 * (size - 1);
        w[size_t(i)] = std::exp(-x * x / (2.0 * sigma * sigma));
        sum += w[size_t(i)];
    }
    for (auto& v : w) v /= sum;
    return w;
}

namespace detail {

// Separable valid-mode Gaussian filter of an h x w image.
inline std::vector<double> gauss_valid(const std::vector<double>& img, int h, int w,
                                       const std::vector<double>& win) {
    int k = int(win.size());
    int oh = h - k + 1, ow = w - k + 1;
    check(oh >= 1 && ow >= 1, "image smaller than ssim window");
    std::vector<double> tmp(size_t(h) * ow);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < ow; ++c) {
            double acc = 0.0;
            for (int j = 0; j < k; ++j) acc += img[size_t(r) * w + c + j] * win[size_t(j)];
            tmp[size_t(r) * ow + c] = acc;
        }
    std::vector<double> out(size_t(oh) * ow);
    for (int r = 0; r < oh; ++r)
        for (int c = 0; c < ow; ++c) {
            double acc = 0.0;
            for (int j = 0; j < k; ++j) acc += tmp[size_t(r + j) * ow + c] * win[size_t(j)];
            out[size_t(r) * ow + c] = acc;
        }
    return out;
}

}  // namespace detail

// Mean local SSIM, Gaussian window (default 11, sigma 1.5), valid positions
// only, standard constants C1=(K1 R)^2, C2=(K2 R)^2.
inline double ssim(const std::vector<double>& a, const std::vector<double>& b, int h, int w,
                   double data_range, int window = 11, double k1 = 0.01, double k2 = 0.03,
                   double sigma = 1.5) {
    check(a.size() == b.size() && a.size() == size_t(h) * w, "ssim: shape mismatch");
    check(h >= window && w >= window, "ssim: image smaller than window");
    check(data_range > 0, "ssim: data_range must be positive");

    std::vector<double> win = gaussian_window(window, sigma);
    std::vector<double> aa(a.size()), bb(a.size()), ab(a.size());
    for (size_t i = 0; i < a.size(); ++i) {
        aa[i] = a[i] * a[i];
        bb[i] = b[i] * b[i];
        ab[i] = a[i] * b[i];
    }
    auto mu_a = detail::gauss_valid(a, h, w, win);
    auto mu_b = detail::gauss_valid(b, h, w, win);
    auto s_aa = detail::gauss_valid(aa, h, w, win);
    auto s_bb = detail::gauss_valid(bb, h, w, win);
    auto s_ab = detail::gauss_valid(ab, h, w, win);

    double c1 = (k1 * data_range) * (k1 * data_range);
    double c2 = (k2 * data_range) * (k2 * data_range);
    double acc = 0.0;
    for (size_t i = 0; i < mu_a.size(); ++i) {
        double ma = mu_a[i], mb = mu_b[i];
        double va = s_aa[i] - ma * ma;
        double vb = s_bb[i] - mb * mb;
        double cov = s_ab[i] - ma * mb;
        acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) /
               ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    return acc / double(mu_a.size());
}

inline double ssim(const std::vector<float>& a, const std::vector<float>& b, int h, int w,
                   double data_range) {
    return ssim(to_double(a), to_double(b), h, w, data_range);
}

inline double psnr(const std::vector<float>& a, const std::vector<float>& b, double data_range) {
    return psnr(to_double(a), to_double(b), data_range);
}

// Volume metrics: PSNR over all voxels; SSIM as the mean of per-axial-slice
// (fixed z) 2-D SSIM values.
inline double volume_psnr(const Volume& a, const Volume& b, double data_range) {
    check(a.nx == b.nx && a.ny == b.ny && a.nz == b.nz, "volume_psnr: shape mismatch");
    return psnr(to_double(a.data), to_double(b.data), data_range);
}

inline double volume_ssim(const Volume& a, const Volume& b, double data_range) {
    check(a.nx == b.nx && a.ny == b.ny && a.nz == b.nz, "volume_ssim: shape mismatch");
    size_t per = size_t(a.nx) * a.ny;
    double acc = 0.0;
    for (int z = 0; z < a.nz; ++z) {
        std::vector<double> sa(a.data.begin() + long(per * z), a.data.begin() + long(per * (z + 1)));
        std::vector<double> sb(b.data.begin() + long(per * z), b.data.begin() + long(per * (z + 1)));
        acc += ssim(sa, sb, a.ny, a.nx, data_range);
    }
    return acc / double(a.nz);
}

}  // namespace tw
