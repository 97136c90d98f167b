#pragma once

// Vision model: strided conv encoder -> nearest-code vector quantization
// against a learnable codebook -> mirrored conv decoder. Trained with
// L1 reconstruction + codebook + commitment terms; gradients reach the
// encoder through the straight-through pass. An optional hinge adversarial
// term (patch discriminator) is available behind lambda_adv.

#include "tomoworld/nn/adamw.hpp"
#include "tomoworld/nn/serialize.hpp"
#include "tomoworld/projector.hpp"

namespace tw {

struct TokenizerConfig {
    int input_size = 64;    // square input, [0,1] normalized
    int downsample = 8;     // power of two; 224/16 -> 14x14 at paper scale
    int codebook_size = 512;  // V
    int code_dim = 64;        // C
    int base_channels = 16;
    double beta = 0.25;       // commitment weight
    double lambda_adv = 0.0;  // hinge adversarial weight (off by default)
    // training
    int epochs = 10;
    int batch = 16;
    double lr = 3e-4;
    int subset_per_epoch = 0;  // 0 = full training split every epoch
    uint64_t seed = 1;

    int grid() const { return input_size / downsample; }
    int num_tokens() const { return grid() * grid(); }

    KvMap to_kv() const {
        KvMap m;
        m["input_size"] = std::to_string(input_size);
        m["downsample"] = std::to_string(downsample);
        m["codebook_size"] = std::to_string(codebook_size);
        m["code_dim"] = std::to_string(code_dim);
        m["base_channels"] = std::to_string(base_channels);
        m["beta"] = fmt_double(beta);
        m["lambda_adv"] = fmt_double(lambda_adv);
        m["epochs"] = std::to_string(epochs);
        m["batch"] = std::to_string(batch);
        m["lr"] = fmt_double(lr);
        m["subset_per_epoch"] = std::to_string(subset_per_epoch);
        m["seed"] = std::to_string(seed);
        return m;
    }

    static TokenizerConfig from_kv(const KvMap& m) {
        TokenizerConfig c;
        c.input_size = int(parse_long(kv_get(m, "input_size")));
        c.downsample = int(parse_long(kv_get(m, "downsample")));
        c.codebook_size = int(parse_long(kv_get(m, "codebook_size")));
        c.code_dim = int(parse_long(kv_get(m, "code_dim")));
        c.base_channels = int(parse_long(kv_get(m, "base_channels")));
        c.beta = parse_double(kv_get(m, "beta"));
        c.lambda_adv = parse_double(kv_get(m, "lambda_adv"));
        c.epochs = int(parse_long(kv_get(m, "epochs")));
        c.batch = int(parse_long(kv_get(m, "batch")));
        c.lr = parse_double(kv_get(m, "lr"));
        c.subset_per_epoch = int(parse_long(kv_get(m, "subset_per_epoch")));
        c.seed = uint64_t(parse_long(kv_get(m, "seed")));
        return c;
    }
};

struct TokenGrid {
    std::vector<int32_t> tokens;
    int h = 0, w = 0;

    int n() const { return h * w; }
    void validate(int vocab) const {
        check(int(tokens.size()) == n(), "token grid payload mismatch");
        for (int32_t t : tokens) check(t >= 0 && t < vocab, "token out of vocabulary: " + std::to_string(t));
    }
};

// ---------------------------------------------------------------------------
// Nearest-code quantization: token i = argmin_j ||f_i - Z_j||_2, ties to the
// smallest index. Distances accumulate in double so the oracle test is exact.
// ---------------------------------------------------------------------------
template <typename T>
void quantize_raw(const T* f, int n, const T* codebook, int v, int c, int32_t* tokens, T* qhat) {
    check(v >= 1, "empty codebook");
    for (int i = 0; i < n; ++i) {
        const T* fi = f + size_t(i) * c;
        int best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (int j = 0; j < v; ++j) {
            const T* zj = codebook + size_t(j) * c;
            double d = 0.0;
            for (int k = 0; k < c; ++k) {
                double diff = double(fi[k]) - double(zj[k]);
                d += diff * diff;
            }
            if (d < best_d) {
                best_d = d;
                best = j;
            }
        }
        tokens[i] = best;
        if (qhat) std::copy(codebook + size_t(best) * c, codebook + size_t(best + 1) * c, qhat + size_t(i) * c);
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------
struct ConvLayerDesc {
    nn::ConvGeom geom;
    size_t w_entry = 0, b_entry = 0;
    bool act = true;        // SiLU after the conv
    bool up_before = false; // nearest 2x upsample before the conv
};

template <typename T>
struct TokenizerModel {
    TokenizerConfig cfg;
    nn::ParamStore<T> store;
    std::vector<ConvLayerDesc> enc, dec;
    size_t codebook_entry = 0;

    const T* codebook() const { return store.ptr(codebook_entry); }
    T* codebook_mut() { return store.ptr(codebook_entry); }
    size_t codebook_offset() const { return store.entries[codebook_entry].offset; }

    void build(const TokenizerConfig& c, uint64_t init_seed) {
        cfg = c;
        check(c.input_size % c.downsample == 0, "input size must be divisible by downsample");
        int m = 0;
        for (int d = c.downsample; d > 1; d /= 2) {
            check(d % 2 == 0, "downsample must be a power of two");
            ++m;
        }
        check(m >= 1, "downsample must be >= 2");
        std::vector<int> ch(size_t(m));
        for (int i = 0; i < m; ++i) ch[size_t(i)] = c.base_channels << std::min(i, 3);

        Rng rng(Rng::derive(init_seed, 0x70C3));
        auto add_conv = [&](std::vector<ConvLayerDesc>& stack, const std::string& name, int cin,
                            int cout, int k, int stride, bool act, bool up_before) {
            ConvLayerDesc l;
            l.geom = {cin, cout, k, stride, k / 2};
            l.act = act;
            l.up_before = up_before;
            l.w_entry = store.add(name + ".w", {cout, k * k * cin}, true);
            l.b_entry = store.add(name + ".b", {cout}, false);
            double std = std::sqrt(2.0 / double(k * k * cin));
            T* w = store.ptr(l.w_entry);
            for (size_t i = 0; i < store.entries[l.w_entry].count; ++i) w[i] = T(rng.normal(0.0, std));
            stack.push_back(l);
        };

        int prev = 1;
        for (int i = 0; i < m; ++i) {
            add_conv(enc, "enc" + std::to_string(enc.size()), prev, ch[size_t(i)], 3, 2, true, false);
            prev = ch[size_t(i)];
            if (i >= 1) add_conv(enc, "enc" + std::to_string(enc.size()), prev, prev, 3, 1, true, false);
        }
        add_conv(enc, "enc" + std::to_string(enc.size()), prev, c.code_dim, 1, 1, false, false);

        add_conv(dec, "dec" + std::to_string(dec.size()), c.code_dim, ch[size_t(m - 1)], 1, 1, true, false);
        add_conv(dec, "dec" + std::to_string(dec.size()), ch[size_t(m - 1)], ch[size_t(m - 1)], 3, 1, true, false);
        for (int i = m - 1; i >= 1; --i) {
            add_conv(dec, "dec" + std::to_string(dec.size()), ch[size_t(i)], ch[size_t(i - 1)], 3, 1, true, true);
            add_conv(dec, "dec" + std::to_string(dec.size()), ch[size_t(i - 1)], ch[size_t(i - 1)], 3, 1, true, false);
        }
        add_conv(dec, "dec" + std::to_string(dec.size()), ch[0], ch[0], 3, 1, true, true);
        add_conv(dec, "dec" + std::to_string(dec.size()), ch[0], 1, 3, 1, false, false);

        codebook_entry = store.add("codebook", {c.codebook_size, c.code_dim}, false);
        T* cb = store.ptr(codebook_entry);
        for (size_t i = 0; i < store.entries[codebook_entry].count; ++i) cb[i] = T(rng.normal(0.0, 0.5));
    }
};

template <typename T>
struct StackCache {
    std::vector<std::vector<T>> cols, preact;
    std::vector<nn::ConvShape> in_shape, out_shape, up_in_shape;
    std::vector<T> scratch;
};

template <typename T>
void stack_forward(const TokenizerModel<T>& model, const std::vector<ConvLayerDesc>& layers,
                   const std::vector<T>& input, nn::ConvShape in_shape, StackCache<T>& cache,
                   std::vector<T>& out, nn::ConvShape& out_shape) {
    size_t L = layers.size();
    cache.cols.resize(L);
    cache.preact.resize(L);
    cache.in_shape.resize(L);
    cache.out_shape.resize(L);
    cache.up_in_shape.resize(L);

    std::vector<T> cur = input;
    nn::ConvShape shape = in_shape;
    for (size_t i = 0; i < L; ++i) {
        const ConvLayerDesc& l = layers[i];
        if (l.up_before) {
            cache.up_in_shape[i] = shape;
            std::vector<T> up;
            nn::upsample2_forward(cur, shape, up);
            cur = std::move(up);
            shape = {shape.h * 2, shape.w * 2, shape.c};
        }
        cache.in_shape[i] = shape;
        nn::ConvShape os = l.geom.out_shape(shape);
        cache.out_shape[i] = os;
        std::vector<T> y;
        nn::conv_forward(cur.data(), shape, l.geom, model.store.ptr(l.w_entry),
                         model.store.ptr(l.b_entry), os, cache.cols[i], y);
        if (l.act) {
            cache.preact[i] = y;
            for (auto& v : y) v = nn::silu(v);
        } else {
            cache.preact[i].clear();
        }
        cur = std::move(y);
        shape = os;
    }
    out = std::move(cur);
    out_shape = shape;
}

// dy is consumed. Parameter grads accumulate into `grad` (flat, aligned with
// store.theta); d(input) lands in dx_input when non-null.
template <typename T>
void stack_backward(const TokenizerModel<T>& model, const std::vector<ConvLayerDesc>& layers,
                    const StackCache<T>& cache, std::vector<T> dy, std::vector<T>* dx_input,
                    std::vector<T>& grad) {
    std::vector<T> dcols;
    for (size_t ii = layers.size(); ii-- > 0;) {
        const ConvLayerDesc& l = layers[ii];
        if (l.act) {
            const auto& pre = cache.preact[ii];
            for (size_t j = 0; j < dy.size(); ++j) dy[j] *= nn::silu_grad(pre[j]);
        }
        bool need_dx = ii > 0 || dx_input != nullptr;
        std::vector<T> dx(need_dx ? cache.in_shape[ii].numel() : 0);
        nn::conv_backward(cache.cols[ii], cache.in_shape[ii], l.geom, model.store.ptr(l.w_entry),
                          cache.out_shape[ii], dy, grad.data() + model.store.entries[l.w_entry].offset,
                          grad.data() + model.store.entries[l.b_entry].offset,
                          need_dx ? dx.data() : nullptr, dcols);
        if (!need_dx) return;
        if (l.up_before) {
            std::vector<T> dprev;
            nn::upsample2_backward(dx, cache.up_in_shape[ii], dprev);
            dy = std::move(dprev);
        } else {
            dy = std::move(dx);
        }
    }
    if (dx_input) *dx_input = std::move(dy);
}

// ---------------------------------------------------------------------------
// Public encode/decode surface
// ---------------------------------------------------------------------------
template <typename T>
void encode_features(const TokenizerModel<T>& model, const std::vector<T>& image,
                     StackCache<T>& cache, std::vector<T>& features) {
    int side = model.cfg.input_size;
    check(int(image.size()) == side * side,
          "wrong input resolution: expected " + std::to_string(side) + "x" + std::to_string(side));
    nn::ConvShape shape{side, side, 1};
    nn::ConvShape out;
    stack_forward(model, model.enc, image, shape, cache, features, out);
    check(out.h == model.cfg.grid() && out.w == model.cfg.grid() && out.c == model.cfg.code_dim,
          "encoder output shape mismatch");
}

template <typename T>
std::pair<TokenGrid, std::vector<T>> quantize(const std::vector<T>& features,
                                              const TokenizerModel<T>& model) {
    int n = model.cfg.num_tokens(), c = model.cfg.code_dim, v = model.cfg.codebook_size;
    check(int(features.size()) == n * c, "feature/codebook dimension mismatch");
    TokenGrid tg;
    tg.h = tg.w = model.cfg.grid();
    tg.tokens.resize(size_t(n));
    std::vector<T> qhat(size_t(n) * c);
    quantize_raw(features.data(), n, model.codebook(), v, c, tg.tokens.data(), qhat.data());
    return {tg, qhat};
}

template <typename T>
TokenGrid encode_tokens(const TokenizerModel<T>& model, const std::vector<T>& image) {
    StackCache<T> cache;
    std::vector<T> f;
    encode_features(model, image, cache, f);
    return quantize(f, model).first;
}

// Linear decoder output (training path; no clamp).
template <typename T>
void decode_feature_map(const TokenizerModel<T>& model, const std::vector<T>& featmap,
                        StackCache<T>& cache, std::vector<T>& image) {
    int g = model.cfg.grid();
    check(int(featmap.size()) == g * g * model.cfg.code_dim, "feature map shape mismatch");
    nn::ConvShape shape{g, g, model.cfg.code_dim};
    nn::ConvShape out;
    stack_forward(model, model.dec, featmap, shape, cache, image, out);
    check(out.h == model.cfg.input_size && out.w == model.cfg.input_size && out.c == 1,
          "decoder output shape mismatch");
}

// Evaluation path: gather codes, decode, clamp to [0,1].
template <typename T>
std::vector<T> decode_tokens(const TokenizerModel<T>& model, const TokenGrid& grid) {
    grid.validate(model.cfg.codebook_size);
    check(grid.h == model.cfg.grid() && grid.w == model.cfg.grid(), "token grid shape mismatch");
    int n = grid.n(), c = model.cfg.code_dim;
    std::vector<T> featmap(size_t(n) * c);
    const T* cb = model.codebook();
    for (int i = 0; i < n; ++i)
        std::copy(cb + size_t(grid.tokens[size_t(i)]) * c, cb + size_t(grid.tokens[size_t(i)] + 1) * c,
                  featmap.begin() + long(size_t(i) * c));
    StackCache<T> cache;
    std::vector<T> img;
    decode_feature_map(model, featmap, cache, img);
    for (auto& v : img) v = std::clamp(v, T(0), T(1));
    return img;
}

template <typename T>
std::vector<T> reconstruct_image(const TokenizerModel<T>& model, const std::vector<T>& image) {
    return decode_tokens(model, encode_tokens(model, image));
}

// ---------------------------------------------------------------------------
// Loss: total = mean|x - xhat| + mean(sg(f) - qhat)^2 + beta * mean(f - sg(qhat))^2
//       + lambda_adv * adversarial_term
// ---------------------------------------------------------------------------
struct TokenizerLossParts {
    double total = 0, recon = 0, codebook = 0, commit = 0, adversarial = 0;
};

template <typename T>
TokenizerLossParts tokenizer_loss(const std::vector<T>& x, const std::vector<T>& xhat,
                                  const std::vector<T>& f, const std::vector<T>& qhat, double beta,
                                  double lambda_adv = 0.0, double adv_term = 0.0) {
    check(x.size() == xhat.size() && f.size() == qhat.size() && !x.empty() && !f.empty(),
          "tokenizer_loss shape mismatch");
    TokenizerLossParts parts;
    for (size_t i = 0; i < x.size(); ++i) parts.recon += std::abs(double(x[i]) - double(xhat[i]));
    parts.recon /= double(x.size());
    for (size_t i = 0; i < f.size(); ++i) {
        double d = double(f[i]) - double(qhat[i]);
        parts.codebook += d * d;
    }
    parts.codebook /= double(f.size());
    parts.commit = beta * parts.codebook;
    parts.adversarial = lambda_adv * adv_term;
    parts.total = parts.recon + parts.codebook + parts.commit + parts.adversarial;
    return parts;
}

// Forward + backward for one sample. Gradients accumulate into `grad`
// (flat, scaled by `weight` so batch means are formed by simple summation).
// Returns loss parts and the token assignment.
template <typename T>
struct SampleWork {
    StackCache<T> enc_cache, dec_cache;
    std::vector<T> f, qhat, xhat, dxhat, dqhat, df;
};

template <typename T>
TokenizerLossParts tokenizer_train_sample(const TokenizerModel<T>& model, const std::vector<T>& x,
                                          T weight, SampleWork<T>& w, std::vector<T>& grad,
                                          TokenGrid& tokens_out) {
    const double beta = model.cfg.beta;
    encode_features(model, x, w.enc_cache, w.f);
    auto [tg, qhat] = quantize(w.f, model);
    w.qhat = std::move(qhat);
    tokens_out = tg;
    decode_feature_map(model, w.qhat, w.dec_cache, w.xhat);

    TokenizerLossParts parts = tokenizer_loss(x, w.xhat, w.f, w.qhat, beta);

    // recon: d mean|x - xhat| / dxhat = sign(xhat - x)/P
    size_t np = x.size();
    w.dxhat.resize(np);
    for (size_t i = 0; i < np; ++i) {
        double d = double(w.xhat[i]) - double(x[i]);
        w.dxhat[i] = T(weight * T(d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0)) / T(np));
    }
    stack_backward(model, model.dec, w.dec_cache, w.dxhat, &w.dqhat, grad);

    // straight-through into the encoder: recon grad passes the quantizer as
    // identity; the commitment term adds 2*beta*(f - qhat)/Nf.
    size_t nf = w.f.size();
    w.df.resize(nf);
    for (size_t i = 0; i < nf; ++i)
        w.df[i] = w.dqhat[i] + T(weight) * T(2.0 * beta) * (w.f[i] - w.qhat[i]) / T(nf);
    stack_backward(model, model.enc, w.enc_cache, w.df, nullptr, grad);

    // codebook term pulls selected codes toward features: d/dz = 2(qhat - f)/Nf
    int c = model.cfg.code_dim;
    T* gcb = grad.data() + model.codebook_offset();
    for (int i = 0; i < model.cfg.num_tokens(); ++i) {
        int code = tg.tokens[size_t(i)];
        for (int k = 0; k < c; ++k) {
            size_t fi = size_t(i) * c + k;
            gcb[size_t(code) * c + k] += T(weight) * T(2.0) * (w.qhat[fi] - w.f[fi]) / T(nf);
        }
    }
    return parts;
}

// ---------------------------------------------------------------------------
// Optional hinge patch discriminator (lambda_adv > 0).
// ---------------------------------------------------------------------------
template <typename T>
struct Discriminator {
    nn::ParamStore<T> store;
    std::vector<ConvLayerDesc> layers;

    void build(int input_size, int base, uint64_t seed) {
        Rng rng(Rng::derive(seed, 0xD15C));
        auto add = [&](int cin, int cout, int k, int stride, bool act) {
            ConvLayerDesc l;
            l.geom = {cin, cout, k, stride, k / 2};
            l.act = act;
            l.w_entry = store.add("disc" + std::to_string(layers.size()) + ".w", {cout, k * k * cin}, true);
            l.b_entry = store.add("disc" + std::to_string(layers.size()) + ".b", {cout}, false);
            double std = std::sqrt(2.0 / double(k * k * cin));
            T* w = store.ptr(l.w_entry);
            for (size_t i = 0; i < store.entries[l.w_entry].count; ++i) w[i] = T(rng.normal(0.0, std));
            layers.push_back(l);
        };
        (void)input_size;
        add(1, base, 3, 2, true);
        add(base, base * 2, 3, 2, true);
        add(base * 2, base * 2, 3, 2, true);
        add(base * 2, 1, 1, 1, false);
    }
};

// Mean patch logit; dx_input gets d(mean logit)/d(image) when requested.
template <typename T>
double disc_forward(const Discriminator<T>& d, const std::vector<T>& image, int side,
                    StackCache<T>& cache, std::vector<T>& logits) {
    nn::ConvShape shape{side, side, 1};
    nn::ConvShape out;
    std::vector<T> cur = image;
    size_t L = d.layers.size();
    cache.cols.resize(L);
    cache.preact.resize(L);
    cache.in_shape.resize(L);
    cache.out_shape.resize(L);
    cache.up_in_shape.resize(L);
    for (size_t i = 0; i < L; ++i) {
        const ConvLayerDesc& l = d.layers[i];
        cache.in_shape[i] = shape;
        nn::ConvShape os = l.geom.out_shape(shape);
        cache.out_shape[i] = os;
        std::vector<T> y;
        nn::conv_forward(cur.data(), shape, l.geom, d.store.ptr(l.w_entry), d.store.ptr(l.b_entry),
                         os, cache.cols[i], y);
        if (l.act) {
            cache.preact[i] = y;
            for (auto& v : y) v = nn::silu(v);
        }
        cur = std::move(y);
        shape = os;
        out = os;
    }
    logits = std::move(cur);
    double mean = 0.0;
    for (T v : logits) mean += double(v);
    return mean / double(logits.size());
}

template <typename T>
void disc_backward(const Discriminator<T>& d, const StackCache<T>& cache, std::vector<T> dy,
                   std::vector<T>* dx_input, std::vector<T>& grad) {
    std::vector<T> dcols;
    for (size_t ii = d.layers.size(); ii-- > 0;) {
        const ConvLayerDesc& l = d.layers[ii];
        if (l.act) {
            const auto& pre = cache.preact[ii];
            for (size_t j = 0; j < dy.size(); ++j) dy[j] *= nn::silu_grad(pre[j]);
        }
        bool need_dx = ii > 0 || dx_input != nullptr;
        std::vector<T> dx(need_dx ? cache.in_shape[ii].numel() : 0);
        nn::conv_backward(cache.cols[ii], cache.in_shape[ii], l.geom, d.store.ptr(l.w_entry),
                          cache.out_shape[ii], dy, grad.data() + d.store.entries[l.w_entry].offset,
                          grad.data() + d.store.entries[l.b_entry].offset,
                          need_dx ? dx.data() : nullptr, dcols);
        if (!need_dx) return;
        dy = std::move(dx);
    }
    if (dx_input) *dx_input = std::move(dy);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------
struct TokenizerEpochStats {
    int epoch = 0;
    double train_total = 0, train_recon = 0, train_codebook = 0, train_adv = 0;
    double val_recon = 0;
    int codes_used = 0, codes_reset = 0;
};

template <typename T = float>
struct TokenizerTrainer {
    TokenizerModel<T> model;
    nn::AdamW<T> opt;
    Discriminator<T> disc;
    nn::AdamW<T> disc_opt;
    std::vector<TokenizerEpochStats> history;

    void init(const TokenizerConfig& cfg) {
        model.build(cfg, cfg.seed);
        opt.lr = cfg.lr;
        opt.weight_decay = 0.0;  // Adam, per the training recipe
        opt.attach(model.store.theta.size(), model.store.decay_mask());
        if (cfg.lambda_adv > 0) {
            disc.build(cfg.input_size, 16, cfg.seed + 1);
            disc_opt.lr = cfg.lr;
            disc_opt.attach(disc.store.theta.size(), disc.store.decay_mask());
        }
    }

    // Data-dependent codebook init: sample V encoder outputs from the first
    // images so every code starts inside the feature distribution.
    void warm_start_codebook(const std::vector<std::vector<T>>& images) {
        int v = model.cfg.codebook_size, c = model.cfg.code_dim, n = model.cfg.num_tokens();
        int need_imgs = std::min<int>(int(images.size()), std::max(1, v / n + 1));
        std::vector<T> pool;
        StackCache<T> cache;
        std::vector<T> f;
        for (int i = 0; i < need_imgs; ++i) {
            encode_features(model, images[size_t(i)], cache, f);
            pool.insert(pool.end(), f.begin(), f.end());
        }
        int rows = int(pool.size()) / c;
        Rng rng(Rng::derive(model.cfg.seed, 0xC0DE));
        T* cb = model.codebook_mut();
        for (int j = 0; j < v; ++j) {
            int r = rng.uniform_int(rows);
            for (int k = 0; k < c; ++k)
                cb[size_t(j) * c + k] = pool[size_t(r) * c + k] + T(rng.normal(0.0, 0.01));
        }
    }

    // images: normalized [0,1] inputs, input_size^2 each.
    void train(const std::vector<std::vector<T>>& train_images,
               const std::vector<std::vector<T>>& val_images) {
        check(!train_images.empty(), "empty tokenizer training set");
        const TokenizerConfig& cfg = model.cfg;
        warm_start_codebook(train_images);

        int n = int(train_images.size());
        std::vector<int> order(size_t(n));
        std::vector<SampleWork<T>> work(size_t(cfg.batch));
        std::vector<std::vector<T>> grads(size_t(cfg.batch));
        std::vector<TokenGrid> toks(size_t(cfg.batch));
        std::vector<TokenizerLossParts> parts(size_t(cfg.batch));
        std::vector<T> grad_total(model.store.theta.size());

        for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
            for (int i = 0; i < n; ++i) order[size_t(i)] = i;
            Rng shuffle_rng(Rng::derive(cfg.seed, 0xE000 + uint64_t(epoch)));
            shuffle_rng.shuffle(order);
            int use = cfg.subset_per_epoch > 0 ? std::min(cfg.subset_per_epoch, n) : n;

            std::vector<int64_t> usage(size_t(cfg.codebook_size), 0);
            std::vector<T> reservoir;
            double ep_total = 0, ep_recon = 0, ep_code = 0, ep_adv = 0;
            int steps = 0;

            for (int start = 0; start < use; start += cfg.batch) {
                int bsz = std::min(cfg.batch, use - start);
                for (int s = 0; s < bsz; ++s) grads[size_t(s)].assign(model.store.theta.size(), T(0));

                parallel_for(bsz, [&](int s) {
                    const auto& img = train_images[size_t(order[size_t(start + s)])];
                    parts[size_t(s)] = tokenizer_train_sample(model, img, T(1.0 / bsz), work[size_t(s)],
                                                              grads[size_t(s)], toks[size_t(s)]);
                });

                std::fill(grad_total.begin(), grad_total.end(), T(0));
                for (int s = 0; s < bsz; ++s) {
                    const auto& g = grads[size_t(s)];
                    for (size_t i = 0; i < g.size(); ++i) grad_total[i] += g[i];
                }

                double batch_total = 0;
                for (int s = 0; s < bsz; ++s) {
                    batch_total += parts[size_t(s)].total / bsz;
                    ep_recon += parts[size_t(s)].recon;
                    ep_code += parts[size_t(s)].codebook;
                    for (int32_t t : toks[size_t(s)].tokens) ++usage[size_t(t)];
                }
                if (cfg.lambda_adv > 0) batch_total += adversarial_round(train_images, order, start, bsz, work, grad_total, ep_adv);
                ep_total += batch_total * bsz;
                ++steps;

                check(std::isfinite(batch_total),
                      "non-finite tokenizer loss at epoch " + std::to_string(epoch) + " step " +
                          std::to_string(steps));
                nn::AdamW<T>::clip_grad_norm(grad_total, 5.0);
                opt.step(model.store.theta, grad_total);

                if (int(reservoir.size()) < 4096 * model.cfg.code_dim)
                    reservoir.insert(reservoir.end(), work[0].f.begin(), work[0].f.end());
            }

            TokenizerEpochStats st;
            st.epoch = epoch;
            st.train_total = ep_total / use;
            st.train_recon = ep_recon / use;
            st.train_codebook = ep_code / use;
            st.train_adv = ep_adv / std::max(1, steps);
            st.codes_used = int(std::count_if(usage.begin(), usage.end(), [](int64_t u) { return u > 0; }));

            // dead-code reinit (skipped after the final epoch so the shipped
            // codebook is the one the decoder was trained against)
            if (epoch + 1 < cfg.epochs && !reservoir.empty()) {
                Rng rr(Rng::derive(cfg.seed, 0xDEAD + uint64_t(epoch)));
                int c = cfg.code_dim;
                int rows = int(reservoir.size()) / c;
                T* cb = model.codebook_mut();
                for (int j = 0; j < cfg.codebook_size; ++j) {
                    if (usage[size_t(j)] > 0) continue;
                    int r = rr.uniform_int(rows);
                    for (int k = 0; k < c; ++k)
                        cb[size_t(j) * c + k] = reservoir[size_t(r) * c + k] + T(rr.normal(0.0, 0.01));
                    opt.reset_state(model.codebook_offset() + size_t(j) * c, size_t(c));
                    ++st.codes_reset;
                }
            }

            st.val_recon = mean_val_recon(val_images);
            history.push_back(st);
        }
    }

    double mean_val_recon(const std::vector<std::vector<T>>& val_images) const {
        if (val_images.empty()) return 0.0;
        int m = std::min<int>(256, int(val_images.size()));
        std::vector<double> errs(size_t(m));
        parallel_for(m, [&](int i) {
            std::vector<T> rec = reconstruct_image(model, val_images[size_t(i)]);
            double e = 0;
            for (size_t j = 0; j < rec.size(); ++j)
                e += std::abs(double(rec[j]) - double(val_images[size_t(i)][j]));
            errs[size_t(i)] = e / double(rec.size());
        });
        double acc = 0;
        for (double e : errs) acc += e;
        return acc / m;
    }

private:
    // One hinge round: generator term -mean D(xhat) added to grad_total, then
    // a discriminator update on the same batch.
    double adversarial_round(const std::vector<std::vector<T>>& images, const std::vector<int>& order,
                             int start, int bsz, std::vector<SampleWork<T>>& work,
                             std::vector<T>& grad_total, double& ep_adv) {
        const double lam = model.cfg.lambda_adv;
        double g_term = 0;
        std::vector<T> dgrad(disc.store.theta.size(), T(0));
        for (int s = 0; s < bsz; ++s) {
            StackCache<T> dc;
            std::vector<T> logits, dimg;
            double mfake = disc_forward(disc, work[size_t(s)].xhat, model.cfg.input_size, dc, logits);
            g_term += -mfake / bsz;
            // d(-mean D)/dlogits = -1/P; push through to the image, then the decoder
            std::vector<T> dl(logits.size(), T(-lam / (double(logits.size()) * bsz)));
            std::vector<T> disc_scratch(disc.store.theta.size(), T(0));
            disc_backward(disc, dc, dl, &dimg, disc_scratch);
            std::vector<T> dq;
            stack_backward(model, model.dec, work[size_t(s)].dec_cache, dimg, &dq, grad_total);
            // ST into encoder as well
            stack_backward(model, model.enc, work[size_t(s)].enc_cache, dq, nullptr, grad_total);

            // discriminator hinge update terms
            const auto& real = images[size_t(order[size_t(start + s)])];
            StackCache<T> dcr;
            std::vector<T> lr_, lf_;
            double mreal = disc_forward(disc, real, model.cfg.input_size, dcr, lr_);
            double hinge_real = std::max(0.0, 1.0 - mreal);
            double hinge_fake = std::max(0.0, 1.0 + mfake);
            if (hinge_real > 0) {
                std::vector<T> d(lr_.size(), T(-1.0 / (double(lr_.size()) * bsz)));
                disc_backward(disc, dcr, d, nullptr, dgrad);
            }
            StackCache<T> dcf;
            double mfake2 = disc_forward(disc, work[size_t(s)].xhat, model.cfg.input_size, dcf, lf_);
            (void)mfake2;
            if (hinge_fake > 0) {
                std::vector<T> d(lf_.size(), T(1.0 / (double(lf_.size()) * bsz)));
                disc_backward(disc, dcf, d, nullptr, dgrad);
            }
            ep_adv += hinge_real + hinge_fake;
        }
        disc_opt.step(disc.store.theta, dgrad);
        return lam * g_term;
    }
};

// ---------------------------------------------------------------------------
// Checkpoint I/O
// ---------------------------------------------------------------------------
template <typename T>
void save_tokenizer(const TokenizerModel<T>& model, const std::vector<TokenizerEpochStats>& history,
                    const fs::path& path) {
    KvMap header;
    header["kind"] = "tokenizer";
    header["version"] = "1";
    for (const auto& [k, v] : model.cfg.to_kv()) header["config." + k] = v;
    std::string hist;
    for (const auto& h : history) {
        hist += std::to_string(h.epoch) + ":" + fmt_double(h.train_total) + ":" +
                fmt_double(h.train_recon) + ":" + fmt_double(h.val_recon) + ":" +
                std::to_string(h.codes_used) + ";";
    }
    header["history"] = hist;

    nn::NamedTensors tensors;
    for (const auto& e : model.store.entries) {
        std::vector<T> slice(model.store.theta.begin() + long(e.offset),
                             model.store.theta.begin() + long(e.offset + e.count));
        tensors.add(e.name, e.dims, slice);
    }
    nn::save_checkpoint(path, header, tensors);
}

template <typename T>
TokenizerModel<T> load_tokenizer(const fs::path& path) {
    auto [header, tensors] = nn::load_checkpoint(path);
    check(kv_get(header, "kind") == "tokenizer", "not a tokenizer checkpoint: " + path.string());
    KvMap cfg_kv;
    for (const auto& [k, v] : header)
        if (k.rfind("config.", 0) == 0) cfg_kv[k.substr(7)] = v;
    TokenizerModel<T> model;
    model.build(TokenizerConfig::from_kv(cfg_kv), /*init_seed=*/0);
    for (const auto& e : model.store.entries) {
        std::vector<T> data = tensors.get<T>(e.name);
        check(data.size() == e.count, "checkpoint tensor size mismatch: " + e.name);
        std::copy(data.begin(), data.end(), model.store.theta.begin() + long(e.offset));
    }
    return model;
}

}  // namespace tw
