#pragma once

// Slice-wise ramp-filtered backprojection for the parallel-beam, z-rotation
// geometry, where every detector row is an independent axial sinogram row.

#include "tomoworld/fft.hpp"
#include "tomoworld/projector.hpp"

namespace tw {

struct Sinogram {
    std::vector<double> values;  // num_angles x width, row-major
    std::vector<double> angles_deg;
    int width = 0;
    double detector_spacing = 1.0;

    int num_angles() const { return int(angles_deg.size()); }
    double& at(int a, int i) { return values[size_t(a) * width + i]; }
    double at(int a, int i) const { return values[size_t(a) * width + i]; }

    void validate() const {
        check(width >= 2, "sinogram width must be >= 2");
        check(values.size() == size_t(num_angles()) * width, "sinogram payload mismatch");
        for (int a = 1; a < num_angles(); ++a)
            check(angles_deg[a] > angles_deg[a - 1], "sinogram angles must be strictly increasing");
    }
};

// Band-limited Ram-Lak kernel, Kak & Slaney closed form.
inline double ramlak_kernel(int n, double spacing) {
    if (n == 0) return 1.0 / (4.0 * spacing * spacing);
    if (n % 2 == 0) return 0.0;
    return -1.0 / (M_PI * M_PI * double(n) * double(n) * spacing * spacing);
}

// Filter one row against the full padded window and return all L samples.
// The frequency response is the DFT of the closed-form spatial kernel with
// the DC bin forced to zero, so constants are removed exactly. The pad floor
// keeps the DC correction's perturbation of the impulse response below 1e-6.
inline std::vector<double> ramp_filter_row_padded(const std::vector<double>& row, double spacing,
                                                  bool hann_window = false) {
    int w = int(row.size());
    check(w >= 2, "row width must be >= 2");
    size_t L = std::max(next_pow2(size_t(2 * w)), size_t(1024));

    std::vector<std::complex<double>> kern(L, 0.0);
    int half = int(L) / 2;
    for (int n = -half + 1; n <= half; ++n) kern[size_t((n + int(L)) % int(L))] = ramlak_kernel(n, spacing);
    fft_inplace(kern, false);
    kern[0] = 0.0;
    if (hann_window) {
        for (size_t k = 1; k < L; ++k) {
            double f = double(k <= L / 2 ? k : L - k) / double(L / 2);  // 0..1 of Nyquist
            kern[k] *= 0.5 * (1.0 + std::cos(M_PI * f));
        }
    }

    std::vector<std::complex<double>> x(L, 0.0);
    for (int i = 0; i < w; ++i) x[size_t(i)] = row[size_t(i)];
    fft_inplace(x, false);
    for (size_t k = 0; k < L; ++k) x[k] *= kern[k];
    fft_inplace(x, true);

    std::vector<double> out(L);
    for (size_t i = 0; i < L; ++i) out[i] = x[i].real() * spacing;  // quadrature factor
    return out;
}

inline Sinogram ramp_filter(const Sinogram& s, bool hann_window = false) {
    s.validate();
    Sinogram out = s;
    parallel_for(s.num_angles(), [&](int a) {
        std::vector<double> row(s.values.begin() + size_t(a) * s.width,
                                s.values.begin() + size_t(a + 1) * s.width);
        std::vector<double> filt = ramp_filter_row_padded(row, s.detector_spacing, hann_window);
        for (int i = 0; i < s.width; ++i) out.at(a, i) = filt[size_t(i)];
    });
    return out;
}

// Backproject filtered rows onto an out_size^2 grid centered on the rotation
// axis, pixel size = detector spacing. When the angle set spans exactly 180
// degrees the top endpoint is dropped (its rays duplicate the bottom view).
inline std::vector<double> fbp_slice(const Sinogram& s, int out_size, bool hann_window = false) {
    s.validate();
    check(out_size >= 1, "output size must be >= 1");
    double span = s.angles_deg.back() - s.angles_deg.front();
    check(span >= 175.0, "insufficient angular coverage for reconstruction: " +
                             std::to_string(span) + " deg");

    int used = s.num_angles();
    if (std::abs(span - 180.0) < 1e-9) used -= 1;
    check(used >= 1, "no usable views");

    Sinogram filt = ramp_filter(s, hann_window);

    std::vector<double> img(size_t(out_size) * out_size, 0.0);
    double scale = M_PI / double(used);
    double d = s.detector_spacing;

    std::vector<double> cos_t(used), sin_t(used);
    for (int a = 0; a < used; ++a) {
        double t = s.angles_deg[size_t(a)] * M_PI / 180.0;
        cos_t[size_t(a)] = std::cos(t);
        sin_t[size_t(a)] = std::sin(t);
    }

    parallel_for(out_size, [&](int r) {
        double y = (r - 0.5 * (out_size - 1)) * d;
        for (int c = 0; c < out_size; ++c) {
            double x = (c - 0.5 * (out_size - 1)) * d;
            double acc = 0.0;
            for (int a = 0; a < used; ++a) {
                double u = x * cos_t[size_t(a)] + y * sin_t[size_t(a)];
                double fi = u / d + 0.5 * (s.width - 1);
                if (fi <= -1.0 || fi >= double(s.width)) continue;
                int i0 = int(std::floor(fi));
                double frac = fi - i0;
                double v0 = (i0 >= 0 && i0 < s.width) ? filt.at(a, i0) : 0.0;
                double v1 = (i0 + 1 >= 0 && i0 + 1 < s.width) ? filt.at(a, i0 + 1) : 0.0;
                acc += v0 * (1.0 - frac) + v1 * frac;
            }
            img[size_t(r) * out_size + c] = acc * scale;
        }
    });
    return img;
}

// Full volume: one 2-D FBP per detector row (z slab). Output (W, W, H) in the
// image coordinate convention x = reconstruction column, y = row, z = slab.
inline Volume fbp_volume(const std::vector<ProjectionImage>& projections, bool hann_window = false) {
    check(!projections.empty(), "no projections");
    std::vector<const ProjectionImage*> views;
    for (const auto& p : projections) views.push_back(&p);
    std::sort(views.begin(), views.end(),
              [](const ProjectionImage* a, const ProjectionImage* b) { return a->angle_deg < b->angle_deg; });

    int h = views[0]->h, w = views[0]->w;
    double d = views[0]->detector_spacing;
    for (const auto* p : views)
        check(p->h == h && p->w == w, "projection shapes must agree");

    Volume out;
    out.nx = w;
    out.ny = w;
    out.nz = h;
    out.spacing = float(d);
    out.data.assign(out.numel(), 0.0f);

    parallel_for(h, [&](int row) {
        Sinogram s;
        s.width = w;
        s.detector_spacing = d;
        for (const auto* p : views) s.angles_deg.push_back(p->angle_deg);
        s.values.resize(size_t(views.size()) * w);
        for (size_t a = 0; a < views.size(); ++a)
            for (int i = 0; i < w; ++i) s.values[a * size_t(w) + size_t(i)] = views[a]->at(row, i);
        std::vector<double> slice = fbp_slice(s, w, hann_window);
        for (int y = 0; y < w; ++y)
            for (int x = 0; x < w; ++x) out.at(x, y, row) = float(slice[size_t(y) * w + x]);
    });
    return out;
}

}  // namespace tw
