#pragma once

// AdamW over a flat parameter vector. weight_decay = 0 recovers Adam; the
// decay mask keeps biases, norms and embeddings out of the decay term.

#include "tomoworld/nn/ops.hpp"

namespace tw::nn {

template <typename T>
class AdamW {
public:
    double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.0;

    void attach(size_t count, std::vector<uint8_t> decay_mask) {
        check(decay_mask.size() == count, "decay mask size mismatch");
        m_.assign(count, T(0));
        v_.assign(count, T(0));
        mask_ = std::move(decay_mask);
        t_ = 0;
    }

    // Global-norm clipping; returns the pre-clip norm.
    static double clip_grad_norm(std::vector<T>& grad, double max_norm) {
        double sq = 0.0;
        for (T g : grad) sq += double(g) * double(g);
        double norm = std::sqrt(sq);
        if (max_norm > 0 && norm > max_norm) {
            T scale = T(max_norm / (norm + 1e-12));
            for (T& g : grad) g *= scale;
        }
        return norm;
    }

    void step(std::vector<T>& theta, const std::vector<T>& grad) {
        check(theta.size() == m_.size() && grad.size() == m_.size(), "optimizer size mismatch");
        ++t_;
        double bc1 = 1.0 - std::pow(beta1, double(t_));
        double bc2 = 1.0 - std::pow(beta2, double(t_));
        for (size_t i = 0; i < theta.size(); ++i) {
            double gi = double(grad[i]);
            double mi = beta1 * double(m_[i]) + (1.0 - beta1) * gi;
            double vi = beta2 * double(v_[i]) + (1.0 - beta2) * gi * gi;
            m_[i] = T(mi);
            v_[i] = T(vi);
            double upd = (mi / bc1) / (std::sqrt(vi / bc2) + eps);
            if (mask_[i]) upd += weight_decay * double(theta[i]);
            theta[i] = T(double(theta[i]) - lr * upd);
        }
    }

    // Clears moments for a flat slice (dead-code reinit support).
    void reset_state(size_t offset, size_t count) {
        check(offset + count <= m_.size(), "reset_state out of range");
        std::fill(m_.begin() + long(offset), m_.begin() + long(offset + count), T(0));
        std::fill(v_.begin() + long(offset), v_.begin() + long(offset + count), T(0));
    }

    int64_t steps() const { return t_; }

private:
    std::vector<T> m_, v_;
    std::vector<uint8_t> mask_;
    int64_t t_ = 0;
};

}  // namespace tw::nn
