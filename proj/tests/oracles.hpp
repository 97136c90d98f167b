#pragma once

// Independent reference implementations used only by tests. Each one is
// written against the underlying definition (brute force, direct formula,
// separate numerical route), not against the library code it checks.

#include <cmath>
#include <complex>
#include <vector>

namespace oracles {

// Exhaustive nearest-neighbor scan, smallest index on ties.
inline void nearest_code_scan(const float* f, int n, const float* codebook, int v, int c,
                              int32_t* tokens) {
    for (int i = 0; i < n; ++i) {
        int best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (int j = 0; j < v; ++j) {
            double d = 0;
            for (int k = 0; k < c; ++k) {
                double diff = double(f[size_t(i) * c + k]) - double(codebook[size_t(j) * c + k]);
                d += diff * diff;
            }
            if (d < best_d) {
                best_d = d;
                best = j;
            }
        }
        tokens[i] = best;
    }
}

// All-pairs AUROC with half credit for ties.
inline double pairwise_auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
    double wins = 0;
    long pairs = 0;
    for (size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] != 1) continue;
        for (size_t j = 0; j < scores.size(); ++j) {
            if (labels[j] != 0) continue;
            ++pairs;
            if (scores[i] > scores[j])
                wins += 1.0;
            else if (scores[i] == scores[j])
                wins += 0.5;
        }
    }
    return wins / double(pairs);
}

// DeLong structural components via direct indicator counts (O(n^2)).
struct SlowDelong {
    double auc = 0;
    std::vector<double> v10, v01;
};

inline SlowDelong slow_delong_components(const std::vector<double>& scores,
                                         const std::vector<int>& labels) {
    std::vector<double> pos, neg;
    for (size_t i = 0; i < scores.size(); ++i) (labels[i] == 1 ? pos : neg).push_back(scores[i]);
    auto psi = [](double x, double y) { return x > y ? 1.0 : (x == y ? 0.5 : 0.0); };
    SlowDelong r;
    r.v10.resize(pos.size());
    r.v01.resize(neg.size());
    for (size_t i = 0; i < pos.size(); ++i) {
        double acc = 0;
        for (size_t j = 0; j < neg.size(); ++j) acc += psi(pos[i], neg[j]);
        r.v10[i] = acc / double(neg.size());
        r.auc += acc;
    }
    r.auc /= double(pos.size()) * double(neg.size());
    for (size_t j = 0; j < neg.size(); ++j) {
        double acc = 0;
        for (size_t i = 0; i < pos.size(); ++i) acc += psi(pos[i], neg[j]);
        r.v01[j] = acc / double(pos.size());
    }
    return r;
}

// Direct window-by-window SSIM (Gaussian weights, valid positions).
inline double direct_ssim(const std::vector<double>& a, const std::vector<double>& b, int h, int w,
                          double data_range, int window = 11, double sigma = 1.5, double k1 = 0.01,
                          double k2 = 0.03) {
    std::vector<double> win(size_t(window) * window);
    double wsum = 0;
    for (int i = 0; i < window; ++i)
        for (int j = 0; j < window; ++j) {
            double dy = i - 0.5 * (window - 1), dx = j - 0.5 * (window - 1);
            win[size_t(i) * window + j] = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
            wsum += win[size_t(i) * window + j];
        }
    for (auto& v : win) v /= wsum;

    double c1 = (k1 * data_range) * (k1 * data_range);
    double c2 = (k2 * data_range) * (k2 * data_range);
    double acc = 0;
    int count = 0;
    for (int r = 0; r + window <= h; ++r) {
        for (int c = 0; c + window <= w; ++c) {
            double ma = 0, mb = 0;
            for (int i = 0; i < window; ++i)
                for (int j = 0; j < window; ++j) {
                    double wt = win[size_t(i) * window + j];
                    ma += wt * a[size_t(r + i) * w + (c + j)];
                    mb += wt * b[size_t(r + i) * w + (c + j)];
                }
            double va = 0, vb = 0, cov = 0;
            for (int i = 0; i < window; ++i)
                for (int j = 0; j < window; ++j) {
                    double wt = win[size_t(i) * window + j];
                    double da = a[size_t(r + i) * w + (c + j)] - ma;
                    double db = b[size_t(r + i) * w + (c + j)] - mb;
                    va += wt * da * da;
                    vb += wt * db * db;
                    cov += wt * da * db;
                }
            acc += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            ++count;
        }
    }
    return acc / count;
}

// Reference FBP, written independently of the library path: direct spatial
// ramp convolution (closed-form kernel truncated at the padded width) and
// nearest-neighbor backprojection.
inline std::vector<double> reference_fbp_slice(const std::vector<double>& sino,
                                               const std::vector<double>& angles_deg, int width,
                                               double spacing, int out_size) {
    int na = int(angles_deg.size());
    int used = na;
    if (std::abs((angles_deg.back() - angles_deg.front()) - 180.0) < 1e-9) used -= 1;

    // spatial Ram-Lak kernel values
    auto kern = [&](int n) {
        if (n == 0) return 1.0 / (4.0 * spacing * spacing);
        if (n % 2 == 0) return 0.0;
        return -1.0 / (M_PI * M_PI * double(n) * double(n) * spacing * spacing);
    };
    std::vector<std::vector<double>> filt(size_t(used), std::vector<double>(size_t(width), 0.0));
    for (int a = 0; a < used; ++a)
        for (int i = 0; i < width; ++i) {
            double acc = 0;
            for (int j = 0; j < width; ++j) acc += sino[size_t(a) * width + j] * kern(i - j);
            filt[size_t(a)][size_t(i)] = acc * spacing;
        }

    std::vector<double> img(size_t(out_size) * out_size, 0.0);
    for (int a = 0; a < used; ++a) {
        double t = angles_deg[size_t(a)] * M_PI / 180.0;
        double ct = std::cos(t), st = std::sin(t);
        for (int r = 0; r < out_size; ++r) {
            double y = (r - 0.5 * (out_size - 1)) * spacing;
            for (int c = 0; c < out_size; ++c) {
                double x = (c - 0.5 * (out_size - 1)) * spacing;
                double u = x * ct + y * st;
                int idx = int(std::lround(u / spacing + 0.5 * (width - 1)));
                if (idx >= 0 && idx < width) img[size_t(r) * out_size + c] += filt[size_t(a)][size_t(idx)];
            }
        }
    }
    for (auto& v : img) v *= M_PI / double(used);
    return img;
}

}  // namespace oracles
