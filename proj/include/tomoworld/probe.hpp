#pragma once

// Downstream adaptation: a single-query attentional classifier over frozen
// class-token trajectories, exact tie-aware AUROC, and the fast-midrank
// paired DeLong test. Everything here runs in double precision.

#include <optional>

#include "tomoworld/nn/adamw.hpp"

namespace tw {

// ---------------------------------------------------------------------------
// AUROC: P(score_pos > score_neg) + 0.5 P(tie), computed with midranks.
// ---------------------------------------------------------------------------
struct AucResult {
    double auroc = 0.0;
    int n_pos = 0, n_neg = 0;
    std::optional<double> p_value;
};

namespace detail {

// 1-based midranks (ties share the average rank).
inline std::vector<double> midranks(const std::vector<double>& x) {
    size_t n = x.size();
    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
        return x[a] != x[b] ? x[a] < x[b] : a < b;
    });
    std::vector<double> rank(n);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && x[idx[j + 1]] == x[idx[i]]) ++j;
        double r = 0.5 * double(i + j) + 1.0;  // average of 1-based ranks i+1..j+1
        for (size_t k = i; k <= j; ++k) rank[idx[k]] = r;
        i = j + 1;
    }
    return rank;
}

}  // namespace detail

inline AucResult auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
    check(scores.size() == labels.size() && !scores.empty(), "auroc: shape mismatch");
    int n_pos = 0, n_neg = 0;
    for (int l : labels) (l == 1 ? n_pos : n_neg)++;
    check(n_pos > 0 && n_neg > 0, "auroc: labels must contain both classes");

    std::vector<double> ranks = detail::midranks(scores);
    double rank_sum_pos = 0;
    for (size_t i = 0; i < scores.size(); ++i)
        if (labels[i] == 1) rank_sum_pos += ranks[i];

    AucResult res;
    res.n_pos = n_pos;
    res.n_neg = n_neg;
    res.auroc = (rank_sum_pos - 0.5 * double(n_pos) * double(n_pos + 1)) / (double(n_pos) * double(n_neg));
    return res;
}

// ---------------------------------------------------------------------------
// Fast DeLong (midrank formulation). Structural components are exposed so a
// slow O(n^2) oracle can pin them exactly.
// ---------------------------------------------------------------------------
struct DelongComponents {
    double auc = 0.0;
    std::vector<double> v10;  // per positive
    std::vector<double> v01;  // per negative
};

inline DelongComponents delong_components(const std::vector<double>& scores,
                                          const std::vector<int>& labels) {
    check(scores.size() == labels.size() && !scores.empty(), "delong: shape mismatch");
    std::vector<double> pos, neg;
    for (size_t i = 0; i < scores.size(); ++i) (labels[i] == 1 ? pos : neg).push_back(scores[i]);
    check(!pos.empty() && !neg.empty(), "delong: labels must contain both classes");
    size_t m = pos.size(), n = neg.size();

    std::vector<double> all = pos;
    all.insert(all.end(), neg.begin(), neg.end());
    std::vector<double> tz = detail::midranks(all);
    std::vector<double> tx = detail::midranks(pos);
    std::vector<double> ty = detail::midranks(neg);

    DelongComponents c;
    c.v10.resize(m);
    c.v01.resize(n);
    double sum = 0;
    for (size_t i = 0; i < m; ++i) {
        c.v10[i] = (tz[i] - tx[i]) / double(n);
        sum += tz[i];
    }
    c.auc = (sum - 0.5 * double(m) * double(m + 1)) / (double(m) * double(n));
    for (size_t j = 0; j < n; ++j) c.v01[j] = 1.0 - (tz[m + j] - ty[j]) / double(m);
    return c;
}

inline double normal_sf_two_sided(double z) { return std::erfc(std::abs(z) / std::sqrt(2.0)); }

// Two-sided p-value for the paired AUROC difference of two score vectors on
// identical samples.
inline double delong_test(const std::vector<double>& scores_a, const std::vector<double>& scores_b,
                          const std::vector<int>& labels) {
    check(scores_a.size() == scores_b.size() && scores_a.size() == labels.size(),
          "delong: score vectors must cover identical samples");
    DelongComponents a = delong_components(scores_a, labels);
    DelongComponents b = delong_components(scores_b, labels);

    auto covar = [](const std::vector<double>& x, const std::vector<double>& y) {
        size_t n = x.size();
        if (n < 2) return 0.0;
        double mx = 0, my = 0;
        for (size_t i = 0; i < n; ++i) {
            mx += x[i];
            my += y[i];
        }
        mx /= double(n);
        my /= double(n);
        double acc = 0;
        for (size_t i = 0; i < n; ++i) acc += (x[i] - mx) * (y[i] - my);
        return acc / double(n - 1);
    };

    size_t m = a.v10.size(), n = a.v01.size();
    double var = (covar(a.v10, a.v10) + covar(b.v10, b.v10) - 2 * covar(a.v10, b.v10)) / double(m) +
                 (covar(a.v01, a.v01) + covar(b.v01, b.v01) - 2 * covar(a.v01, b.v01)) / double(n);
    double delta = a.auc - b.auc;
    if (var <= 1e-15) {
        if (std::abs(delta) < 1e-12) return 1.0;
        throw Error("delong: degenerate variance with nonzero AUC difference");
    }
    double z = delta / std::sqrt(var);
    return normal_sf_two_sided(z);
}

// ---------------------------------------------------------------------------
// Two-view fusion: row-wise concatenation of two latent trajectories.
// ---------------------------------------------------------------------------
inline std::vector<double> fuse_two_view(const std::vector<double>& lat_a,
                                         const std::vector<double>& lat_b, int positions, int d) {
    check(int(lat_a.size()) == positions * d && int(lat_b.size()) == positions * d,
          "fuse: position-count mismatch");
    std::vector<double> fused(size_t(positions) * 2 * d);
    for (int k = 0; k < positions; ++k) {
        std::copy(lat_a.begin() + long(size_t(k) * d), lat_a.begin() + long(size_t(k + 1) * d),
                  fused.begin() + long(size_t(k) * 2 * d));
        std::copy(lat_b.begin() + long(size_t(k) * d), lat_b.begin() + long(size_t(k + 1) * d),
                  fused.begin() + long(size_t(k) * 2 * d + d));
    }
    return fused;
}

// ---------------------------------------------------------------------------
// Attentional probe head
// ---------------------------------------------------------------------------
struct ProbeConfig {
    int d_in = 256;
    int d_att = 64;
    int num_classes = 2;
    int epochs = 10;
    int batch = 16;
    uint64_t seed = 1;

    // learning-rate grid searched on validation AUROC
    static const std::vector<double>& lr_grid() {
        static const std::vector<double> g{1e-5, 2e-5, 5e-5, 1e-4, 2e-4, 5e-4, 1e-3, 2e-3, 5e-3};
        return g;
    }
};

struct ProbeHead {
    ProbeConfig cfg;
    nn::ParamStore<double> store;
    size_t q = 0, wk = 0, bk = 0, wv = 0, bv = 0, wo = 0, bo = 0;

    void build(const ProbeConfig& c, uint64_t seed) {
        cfg = c;
        Rng rng(Rng::derive(seed, 0x9B0E));
        auto fill = [&](size_t entry, double std) {
            double* p = store.ptr(entry);
            for (size_t i = 0; i < store.entries[entry].count; ++i) p[i] = rng.normal(0.0, std);
        };
        q = store.add("q", {c.d_att}, false);
        wk = store.add("wk", {c.d_att, c.d_in}, true);
        bk = store.add("bk", {c.d_att}, false);
        wv = store.add("wv", {c.d_att, c.d_in}, true);
        bv = store.add("bv", {c.d_att}, false);
        wo = store.add("wo", {c.num_classes, c.d_att}, true);
        bo = store.add("bo", {c.num_classes}, false);
        fill(q, 0.1);
        fill(wk, std::sqrt(1.0 / c.d_in));
        fill(wv, std::sqrt(1.0 / c.d_in));
        fill(wo, std::sqrt(1.0 / c.d_att));
    }
};

struct ProbeCache {
    int positions = 0;
    std::vector<double> keys, values, alpha, pooled, lat;
};

// alpha = softmax_k(q . key_k / sqrt(d_att)); logits = wo (sum alpha value) + bo
inline std::vector<double> probe_forward(const ProbeHead& head, const std::vector<double>& lat,
                                         int positions, ProbeCache* cache = nullptr) {
    const ProbeConfig& c = head.cfg;
    check(int(lat.size()) == positions * c.d_in, "probe: dimension mismatch");
    std::vector<double> keys(size_t(positions) * c.d_att), values(size_t(positions) * c.d_att);
    nn::mm_nt(keys.data(), lat.data(), head.store.ptr(head.wk), positions, c.d_in, c.d_att);
    nn::mm_nt(values.data(), lat.data(), head.store.ptr(head.wv), positions, c.d_in, c.d_att);
    const double* bkp = head.store.ptr(head.bk);
    const double* bvp = head.store.ptr(head.bv);
    for (int k = 0; k < positions; ++k)
        for (int j = 0; j < c.d_att; ++j) {
            keys[size_t(k) * c.d_att + j] += bkp[j];
            values[size_t(k) * c.d_att + j] += bvp[j];
        }

    std::vector<double> alpha(size_t(positions));
    const double* qp = head.store.ptr(head.q);
    double scale = 1.0 / std::sqrt(double(c.d_att));
    for (int k = 0; k < positions; ++k) {
        double acc = 0;
        for (int j = 0; j < c.d_att; ++j) acc += qp[j] * keys[size_t(k) * c.d_att + j];
        alpha[size_t(k)] = acc * scale;
    }
    nn::softmax_rows(alpha.data(), 1, positions);

    std::vector<double> pooled(size_t(c.d_att), 0.0);
    for (int k = 0; k < positions; ++k)
        for (int j = 0; j < c.d_att; ++j) pooled[size_t(j)] += alpha[size_t(k)] * values[size_t(k) * c.d_att + j];

    std::vector<double> logits(size_t(c.num_classes));
    nn::mm_nt(logits.data(), pooled.data(), head.store.ptr(head.wo), 1, c.d_att, c.num_classes);
    const double* bop = head.store.ptr(head.bo);
    for (int j = 0; j < c.num_classes; ++j) logits[size_t(j)] += bop[j];

    if (cache) {
        cache->positions = positions;
        cache->keys = std::move(keys);
        cache->values = std::move(values);
        cache->alpha = std::move(alpha);
        cache->pooled = std::move(pooled);
        cache->lat = lat;
    }
    return logits;
}

// Cross-entropy backward for one sample; grads accumulate (scaled by weight).
inline double probe_backward(const ProbeHead& head, const ProbeCache& cache, int label,
                             double weight, std::vector<double>& grad) {
    const ProbeConfig& c = head.cfg;
    int P = cache.positions;
    std::vector<double> logits = probe_forward(head, cache.lat, P, nullptr);

    // softmax CE
    double mx = *std::max_element(logits.begin(), logits.end());
    double lse = 0;
    for (double v : logits) lse += std::exp(v - mx);
    lse = mx + std::log(lse);
    double loss = lse - logits[size_t(label)];
    std::vector<double> dlogits(logits.size());
    for (size_t j = 0; j < logits.size(); ++j) dlogits[j] = std::exp(logits[j] - lse) * weight;
    dlogits[size_t(label)] -= weight;

    // output map
    double* gwo = grad.data() + head.store.entries[head.wo].offset;
    double* gbo = grad.data() + head.store.entries[head.bo].offset;
    std::vector<double> dpooled(size_t(c.d_att), 0.0);
    for (int cls = 0; cls < c.num_classes; ++cls) {
        const double* worow = head.store.ptr(head.wo) + size_t(cls) * c.d_att;
        for (int j = 0; j < c.d_att; ++j) {
            gwo[size_t(cls) * c.d_att + j] += dlogits[size_t(cls)] * cache.pooled[size_t(j)];
            dpooled[size_t(j)] += dlogits[size_t(cls)] * worow[j];
        }
        gbo[cls] += dlogits[size_t(cls)];
    }

    // pooled = sum alpha_k value_k
    std::vector<double> dvalues(size_t(P) * c.d_att);
    std::vector<double> dalpha(size_t(P), 0.0);
    for (int k = 0; k < P; ++k)
        for (int j = 0; j < c.d_att; ++j) {
            dvalues[size_t(k) * c.d_att + j] = cache.alpha[size_t(k)] * dpooled[size_t(j)];
            dalpha[size_t(k)] += cache.values[size_t(k) * c.d_att + j] * dpooled[size_t(j)];
        }

    // softmax backward into attention scores
    double dot = 0;
    for (int k = 0; k < P; ++k) dot += dalpha[size_t(k)] * cache.alpha[size_t(k)];
    double scale = 1.0 / std::sqrt(double(c.d_att));
    std::vector<double> dscore(size_t(P));
    for (int k = 0; k < P; ++k) dscore[size_t(k)] = cache.alpha[size_t(k)] * (dalpha[size_t(k)] - dot) * scale;

    // score_k = q . key_k
    double* gq = grad.data() + head.store.entries[head.q].offset;
    const double* qp = head.store.ptr(head.q);
    std::vector<double> dkeys(size_t(P) * c.d_att);
    for (int k = 0; k < P; ++k)
        for (int j = 0; j < c.d_att; ++j) {
            gq[j] += dscore[size_t(k)] * cache.keys[size_t(k) * c.d_att + j];
            dkeys[size_t(k) * c.d_att + j] = dscore[size_t(k)] * qp[j];
        }

    // key/value maps
    nn::mm_tn(grad.data() + head.store.entries[head.wk].offset, dkeys.data(), cache.lat.data(),
              c.d_att, P, c.d_in, true);
    nn::mm_tn(grad.data() + head.store.entries[head.wv].offset, dvalues.data(), cache.lat.data(),
              c.d_att, P, c.d_in, true);
    double* gbk = grad.data() + head.store.entries[head.bk].offset;
    double* gbv = grad.data() + head.store.entries[head.bv].offset;
    for (int k = 0; k < P; ++k)
        for (int j = 0; j < c.d_att; ++j) {
            gbk[j] += dkeys[size_t(k) * c.d_att + j];
            gbv[j] += dvalues[size_t(k) * c.d_att + j];
        }
    return loss;
}

// ---------------------------------------------------------------------------
// Probe training with the learning-rate grid of the training recipe.
// ---------------------------------------------------------------------------
struct ProbeSample {
    std::string id;
    std::vector<double> lat;  // positions x d_in
    int positions = 0;
    int label = 0;
    std::string split;
};

struct ProbeTrainResult {
    ProbeHead head;
    double chosen_lr = 0;
    double val_auroc = 0;
    std::map<std::string, double> val_auroc_by_lr;  // key: lr formatted
    std::vector<double> test_scores;
    std::vector<int> test_labels;
    std::vector<std::string> test_ids;
};

inline double probe_score(const ProbeHead& head, const ProbeSample& s) {
    std::vector<double> logits = probe_forward(head, s.lat, s.positions);
    return logits[1] - logits[0];
}

inline ProbeTrainResult train_probe(const std::vector<ProbeSample>& samples, const ProbeConfig& cfg) {
    std::vector<const ProbeSample*> train, val, test;
    for (const auto& s : samples) {
        check(int(s.lat.size()) == s.positions * cfg.d_in, "probe sample dimension mismatch");
        (s.split == "train" ? train : s.split == "val" ? val : test).push_back(&s);
    }
    check(!train.empty() && !val.empty() && !test.empty(), "probe needs all three splits");
    {
        bool has0 = false, has1 = false;
        for (const auto* s : train) (s->label == 1 ? has1 : has0) = true;
        check(has0 && has1, "single-class probe training split");
    }

    auto eval_auroc = [&](const ProbeHead& head, const std::vector<const ProbeSample*>& set) {
        std::vector<double> scores;
        std::vector<int> labels;
        for (const auto* s : set) {
            scores.push_back(probe_score(head, *s));
            labels.push_back(s->label);
        }
        return auroc(scores, labels).auroc;
    };

    ProbeTrainResult best;
    bool first = true;
    for (double lr : ProbeConfig::lr_grid()) {
        ProbeHead head;
        head.build(cfg, cfg.seed);  // identical init for every grid point
        nn::AdamW<double> opt;
        opt.lr = lr;
        opt.attach(head.store.theta.size(), head.store.decay_mask());
        std::vector<double> grad(head.store.theta.size());

        std::vector<int> order(train.size());
        for (size_t i = 0; i < train.size(); ++i) order[i] = int(i);
        for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
            Rng rng(Rng::derive(cfg.seed, 0x5000 + uint64_t(epoch)));
            rng.shuffle(order);
            for (size_t start = 0; start < order.size(); start += size_t(cfg.batch)) {
                size_t bsz = std::min(size_t(cfg.batch), order.size() - start);
                std::fill(grad.begin(), grad.end(), 0.0);
                for (size_t s = 0; s < bsz; ++s) {
                    const ProbeSample& smp = *train[size_t(order[start + s])];
                    ProbeCache cache;
                    probe_forward(head, smp.lat, smp.positions, &cache);
                    probe_backward(head, cache, smp.label, 1.0 / double(bsz), grad);
                }
                opt.step(head.store.theta, grad);
            }
        }

        double va = eval_auroc(head, val);
        best.val_auroc_by_lr[fmt_double(lr)] = va;
        if (first || va > best.val_auroc) {
            first = false;
            best.val_auroc = va;
            best.chosen_lr = lr;
            best.head = head;
        }
    }

    for (const auto* s : test) {
        best.test_scores.push_back(probe_score(best.head, *s));
        best.test_labels.push_back(s->label);
        best.test_ids.push_back(s->id);
    }
    return best;
}

}  // namespace tw
