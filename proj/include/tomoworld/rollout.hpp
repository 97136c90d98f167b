#pragma once

// Inference: from one conditioning view, sweep CCW to position 0 and CW to
// position K, feeding generated token grids back as conditioning, and collect
// the class-token hidden state (middle layer by default) at every canonical
// position. Generation uses an append-only KV cache; a unit test pins it to
// the full re-forward path.

#include "tomoworld/transition.hpp"

namespace tw {

enum class SampleMode { Greedy, Temperature, TopK };

struct SamplerConfig {
    SampleMode mode = SampleMode::Greedy;
    double temperature = 1.0;
    int k = 1;
    uint64_t seed = 0;

    void validate() const {
        check(temperature > 0, "temperature must be positive");
        check(k >= 1, "top-k must be >= 1");
    }

    std::string to_string() const {
        switch (mode) {
            case SampleMode::Greedy: return "greedy";
            case SampleMode::Temperature: return "temperature:" + fmt_double(temperature);
            default: return "top_k:" + std::to_string(k) + ":" + fmt_double(temperature);
        }
    }
};

template <typename T>
int sample_token(const T* logits, int vocab, const SamplerConfig& sampler, Rng& rng) {
    if (sampler.mode == SampleMode::Greedy) {
        int best = 0;
        for (int j = 1; j < vocab; ++j)
            if (logits[j] > logits[best]) best = j;
        return best;
    }
    std::vector<std::pair<double, int>> order;
    int kk = sampler.mode == SampleMode::TopK ? std::min(sampler.k, vocab) : vocab;
    order.reserve(size_t(vocab));
    for (int j = 0; j < vocab; ++j) order.push_back({double(logits[j]), j});
    std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
        return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    order.resize(size_t(kk));
    double mx = order[0].first;
    double sum = 0;
    std::vector<double> p(size_t(kk));
    for (int j = 0; j < kk; ++j) {
        p[size_t(j)] = std::exp((order[size_t(j)].first - mx) / sampler.temperature);
        sum += p[size_t(j)];
    }
    double u = rng.uniform() * sum;
    double acc = 0;
    for (int j = 0; j < kk; ++j) {
        acc += p[size_t(j)];
        if (u < acc) return order[size_t(j)].second;
    }
    return order[size_t(kk - 1)].second;
}

// ---------------------------------------------------------------------------
// KV cache
// ---------------------------------------------------------------------------
template <typename T>
struct KvCache {
    int len = 0, cap = 0;
    std::vector<std::vector<T>> k, v;  // per block, cap x D

    void reset(const TransitionConfig& cfg) {
        cap = cfg.seq_cap();
        len = 0;
        k.assign(size_t(cfg.depth), std::vector<T>(size_t(cap) * cfg.embed_dim));
        v.assign(size_t(cfg.depth), std::vector<T>(size_t(cap) * cfg.embed_dim));
    }
};

// Prefill from a batch forward over the prefix rows.
template <typename T>
void kv_prefill(const TransitionModel<T>& model, const ForwardCache<T>& cache, KvCache<T>& kv) {
    const TransitionConfig& cfg = model.cfg;
    int d = cfg.embed_dim, L = cache.L;
    kv.reset(cfg);
    kv.len = L;
    for (int b = 0; b < cfg.depth; ++b) {
        const auto& qkv = cache.blocks[size_t(b)].qkv;
        for (int i = 0; i < L; ++i) {
            std::copy(qkv.begin() + long(size_t(i) * 3 * d + d), qkv.begin() + long(size_t(i) * 3 * d + 2 * d),
                      kv.k[size_t(b)].begin() + long(size_t(i) * d));
            std::copy(qkv.begin() + long(size_t(i) * 3 * d + 2 * d),
                      qkv.begin() + long(size_t(i) * 3 * d + 3 * d),
                      kv.v[size_t(b)].begin() + long(size_t(i) * d));
        }
    }
}

// One incremental row; returns logits over V for the appended position.
template <typename T>
std::vector<T> incremental_step(const TransitionModel<T>& model, KvCache<T>& kv,
                                const StepItem& item, int layout_index) {
    const TransitionConfig& cfg = model.cfg;
    int d = cfg.embed_dim, nh = cfg.heads, dh = cfg.head_dim(), hd = cfg.mlp_ratio * d;
    check(layout_index < cfg.seq_cap(), "sequence exceeds positional table");
    check(kv.len < kv.cap, "kv cache full");
    T scale = T(1.0 / std::sqrt(double(dh)));

    std::vector<T> x(size_t(d));
    {
        const T* row = model.embedding_row(item);
        const T* pe = model.store.ptr(model.pos_emb) + size_t(layout_index) * d;
        for (int j = 0; j < d; ++j) x[size_t(j)] = row[j] + pe[j];
    }

    auto ln_row = [&](const std::vector<T>& in, const T* g, const T* b, std::vector<T>& out) {
        T mu = T(0);
        for (int j = 0; j < int(in.size()); ++j) mu += in[size_t(j)];
        mu /= T(in.size());
        T var = T(0);
        for (int j = 0; j < int(in.size()); ++j) var += (in[size_t(j)] - mu) * (in[size_t(j)] - mu);
        var /= T(in.size());
        T rs = T(1) / std::sqrt(var + T(1e-5));
        out.resize(in.size());
        for (int j = 0; j < int(in.size()); ++j) out[size_t(j)] = (in[size_t(j)] - mu) * rs * g[j] + b[j];
    };

    int pos = kv.len;  // this row's index in the attention window
    for (int b = 0; b < cfg.depth; ++b) {
        const auto& bl = model.blocks[size_t(b)];
        std::vector<T> xln;
        ln_row(x, model.store.ptr(bl.ln1_g), model.store.ptr(bl.ln1_b), xln);
        std::vector<T> qkv(size_t(3) * d);
        nn::mm_nt(qkv.data(), xln.data(), model.store.ptr(bl.wqkv), 1, d, 3 * d);
        {
            const T* bq = model.store.ptr(bl.bqkv);
            for (int j = 0; j < 3 * d; ++j) qkv[size_t(j)] += bq[j];
        }
        std::copy(qkv.begin() + d, qkv.begin() + 2 * d, kv.k[size_t(b)].begin() + long(size_t(pos) * d));
        std::copy(qkv.begin() + 2 * d, qkv.begin() + 3 * d, kv.v[size_t(b)].begin() + long(size_t(pos) * d));

        std::vector<T> ctx(size_t(d), T(0));
        std::vector<T> att(size_t(pos) + 1);
        for (int h = 0; h < nh; ++h) {
            const T* q = qkv.data() + size_t(h) * dh;
            for (int j = 0; j <= pos; ++j) {
                const T* kj = kv.k[size_t(b)].data() + size_t(j) * d + size_t(h) * dh;
                T acc = T(0);
                for (int kc = 0; kc < dh; ++kc) acc += q[kc] * kj[kc];
                att[size_t(j)] = acc * scale;
            }
            T mx = att[0];
            for (int j = 1; j <= pos; ++j) mx = std::max(mx, att[size_t(j)]);
            T sum = T(0);
            for (int j = 0; j <= pos; ++j) {
                att[size_t(j)] = std::exp(att[size_t(j)] - mx);
                sum += att[size_t(j)];
            }
            T* ctx_h = ctx.data() + size_t(h) * dh;
            for (int j = 0; j <= pos; ++j) {
                const T* vj = kv.v[size_t(b)].data() + size_t(j) * d + size_t(h) * dh;
                T a = att[size_t(j)] / sum;
                for (int kc = 0; kc < dh; ++kc) ctx_h[kc] += a * vj[kc];
            }
        }
        std::vector<T> att_out(size_t(d));
        nn::mm_nt(att_out.data(), ctx.data(), model.store.ptr(bl.wo), 1, d, d);
        {
            const T* bo = model.store.ptr(bl.bo);
            for (int j = 0; j < d; ++j) x[size_t(j)] += att_out[size_t(j)] + bo[j];
        }

        std::vector<T> x2ln;
        ln_row(x, model.store.ptr(bl.ln2_g), model.store.ptr(bl.ln2_b), x2ln);
        std::vector<T> fc1(size_t(hd));
        nn::mm_nt(fc1.data(), x2ln.data(), model.store.ptr(bl.wfc1), 1, d, hd);
        {
            const T* b1 = model.store.ptr(bl.bfc1);
            for (int j = 0; j < hd; ++j) fc1[size_t(j)] = nn::silu(fc1[size_t(j)] + b1[j]);
        }
        std::vector<T> fc2(size_t(d));
        nn::mm_nt(fc2.data(), fc1.data(), model.store.ptr(bl.wfc2), 1, hd, d);
        {
            const T* b2 = model.store.ptr(bl.bfc2);
            for (int j = 0; j < d; ++j) x[size_t(j)] += fc2[size_t(j)] + b2[j];
        }
    }
    kv.len += 1;

    std::vector<T> xf;
    ln_row(x, model.store.ptr(model.lnf_g), model.store.ptr(model.lnf_b), xf);
    std::vector<T> logits(size_t(cfg.vocab));
    nn::mm_nt(logits.data(), xf.data(), model.store.ptr(model.head_w), 1, d, cfg.vocab);
    const T* hb = model.store.ptr(model.head_b);
    for (int j = 0; j < cfg.vocab; ++j) logits[size_t(j)] += hb[j];
    return logits;
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

// Hidden state at the class-token position (layout N+1) after block `layer`
// for the conditioning pass (a, r at pos_idx); no generation consumed.
template <typename T>
std::vector<T> extract_class_latent(const TransitionModel<T>& model, Action a, const TokenGrid& r,
                                    int pos_idx, int layer) {
    const TransitionConfig& cfg = model.cfg;
    check(layer >= 1 && layer <= cfg.depth, "layer out of range");
    StepSequence seq = build_step_sequence(a, r, pos_idx, nullptr, cfg);
    std::vector<T> x0 = embed_sequence(model, seq);
    ForwardCache<T> cache;
    transition_forward(model, x0, seq.length(), cache);
    const std::vector<T>& h = cache.hidden_after(layer, cfg.depth);
    int d = cfg.embed_dim;
    return std::vector<T>(h.begin() + long(size_t(seq.class_pos()) * d),
                          h.begin() + long(size_t(seq.class_pos() + 1) * d));
}

// One generation step; optionally extracts the conditioning class latent.
template <typename T>
TokenGrid predict_next(const TransitionModel<T>& model, Action a, const TokenGrid& r_prev,
                       int pos_idx, const SamplerConfig& sampler, Rng& rng,
                       std::vector<T>* class_latent = nullptr, int latent_layer = 0) {
    const TransitionConfig& cfg = model.cfg;
    sampler.validate();
    int n = cfg.tokens_per_view, d = cfg.embed_dim;
    if (latent_layer == 0) latent_layer = cfg.depth / 2;

    StepSequence prefix = build_step_sequence(a, r_prev, pos_idx, nullptr, cfg);
    std::vector<T> x0 = embed_sequence(model, prefix);
    ForwardCache<T> cache;
    transition_forward(model, x0, prefix.length(), cache);
    if (class_latent) {
        const std::vector<T>& h = cache.hidden_after(latent_layer, cfg.depth);
        class_latent->assign(h.begin() + long(size_t(prefix.class_pos()) * d),
                             h.begin() + long(size_t(prefix.class_pos() + 1) * d));
    }

    KvCache<T> kv;
    kv_prefill(model, cache, kv);

    HeadCache<T> hc;
    std::vector<T> logits = head_forward(model, cache, {prefix.class_pos()}, hc);

    TokenGrid out;
    out.h = r_prev.h;
    out.w = r_prev.w;
    out.tokens.resize(size_t(n));
    for (int i = 0; i < n; ++i) {
        int tok = sample_token(logits.data(), cfg.vocab, sampler, rng);
        out.tokens[size_t(i)] = tok;
        if (i + 1 < n)
            logits = incremental_step(model, kv, {StepItem::ImageTok, tok}, prefix.length() + i);
    }
    return out;
}

struct LatentTrajectoryMeta {
    int layer_index = 0;
    int source_pos = 0;
};

template <typename T>
struct RolloutResult {
    std::vector<TokenGrid> tokens;  // K+1 grids in canonical order, source untouched
    std::vector<T> latents;         // (K+1) x D class-token hidden states
    LatentTrajectoryMeta meta;
};

// Two sweeps from the source view; latents for positions below the source
// come from the CCW sweep, above (and the source itself, when a CW sweep
// exists) from the CW sweep; terminal positions use outward-action
// conditioning passes with no generation consumed.
template <typename T>
RolloutResult<T> rollout_trajectory(const TransitionModel<T>& model, const TokenGrid& r_source,
                                    int source_pos, const SamplerConfig& sampler,
                                    int latent_layer = 0) {
    const TransitionConfig& cfg = model.cfg;
    int kp = cfg.num_positions, d = cfg.embed_dim;
    check(source_pos >= 0 && source_pos < kp, "source position out of trajectory");
    if (latent_layer == 0) latent_layer = cfg.depth / 2;

    RolloutResult<T> res;
    res.meta.layer_index = latent_layer;
    res.meta.source_pos = source_pos;
    res.tokens.assign(size_t(kp), TokenGrid{});
    res.latents.assign(size_t(kp) * d, T(0));
    res.tokens[size_t(source_pos)] = r_source;

    auto store_latent = [&](int pos, const std::vector<T>& lat) {
        std::copy(lat.begin(), lat.end(), res.latents.begin() + long(size_t(pos) * d));
    };

    Rng rng_cw(Rng::derive(sampler.seed, 0xC3));
    std::vector<T> lat;
    for (int pos = source_pos; pos + 1 < kp; ++pos) {
        res.tokens[size_t(pos + 1)] = predict_next(model, Action::CW, res.tokens[size_t(pos)], pos,
                                                   sampler, rng_cw, &lat, latent_layer);
        store_latent(pos, lat);
    }
    if (source_pos < kp - 1) {
        // terminal +90: outward (CW) conditioning pass
        store_latent(kp - 1, extract_class_latent(model, Action::CW, res.tokens[size_t(kp - 1)],
                                                  kp - 1, latent_layer));
    }

    Rng rng_ccw(Rng::derive(sampler.seed, 0xCC));
    for (int pos = source_pos; pos - 1 >= 0; --pos) {
        res.tokens[size_t(pos - 1)] = predict_next(model, Action::CCW, res.tokens[size_t(pos)], pos,
                                                   sampler, rng_ccw, &lat, latent_layer);
        if (pos < source_pos || source_pos == kp - 1) store_latent(pos, lat);
    }
    if (source_pos > 0) {
        // terminal -90: outward (CCW) conditioning pass
        store_latent(0, extract_class_latent(model, Action::CCW, res.tokens[0], 0, latent_layer));
    }
    return res;
}

// Decode generated grids back to line-integral images in canonical order.
template <typename T>
std::vector<ProjectionImage> decode_rollout(const TokenizerModel<T>& tok,
                                            const std::vector<TokenGrid>& tokens,
                                            const Trajectory& traj, const Detector& det,
                                            float norm_scale, float norm_offset) {
    check(int(tokens.size()) == traj.positions(), "rollout/trajectory size mismatch");
    std::vector<ProjectionImage> out(tokens.size());
    parallel_for(int(tokens.size()), [&](int k) {
        std::vector<T> img = decode_tokens(tok, tokens[size_t(k)]);
        ProjectionImage& p = out[size_t(k)];
        p.h = det.h;
        p.w = det.w;
        p.angle_deg = traj.angles_deg[size_t(k)];
        p.detector_spacing = det.pixel_spacing;
        p.norm_scale = norm_scale;
        p.norm_offset = norm_offset;
        p.pixels.resize(img.size());
        for (size_t i = 0; i < img.size(); ++i)
            p.pixels[i] = std::max(0.0f, float((double(img[i]) + norm_offset) * norm_scale));
    });
    return out;
}

// ---------------------------------------------------------------------------
// Rollout artifact I/O
// ---------------------------------------------------------------------------
template <typename T>
void save_rollout(const RolloutResult<T>& res, int tokens_h, int tokens_w,
                  const std::string& world_hash, const std::string& tokenizer_hash,
                  const SamplerConfig& sampler, const fs::path& dir) {
    fs::create_directories(dir);
    int kp = int(res.tokens.size());
    int n = tokens_h * tokens_w;
    int d = kp > 0 ? int(res.latents.size()) / kp : 0;
    std::vector<int32_t> flat;
    flat.reserve(size_t(kp) * n);
    for (const auto& tg : res.tokens) flat.insert(flat.end(), tg.tokens.begin(), tg.tokens.end());
    write_binary(dir / "tokens.raw", flat);
    std::vector<float> lat(res.latents.begin(), res.latents.end());
    write_binary(dir / "latents.raw", lat);

    KvMap m;
    m["positions"] = std::to_string(kp);
    m["tokens_h"] = std::to_string(tokens_h);
    m["tokens_w"] = std::to_string(tokens_w);
    m["embed_dim"] = std::to_string(d);
    m["layer_index"] = std::to_string(res.meta.layer_index);
    m["source_pos"] = std::to_string(res.meta.source_pos);
    m["sampler"] = sampler.to_string();
    m["world_hash"] = world_hash;
    m["tokenizer_hash"] = tokenizer_hash;
    write_kv_file(dir / "meta.txt", m);
}

template <typename T>
RolloutResult<T> load_rollout(const fs::path& dir, int* tokens_h = nullptr, int* tokens_w = nullptr) {
    KvMap m = parse_kv_file(dir / "meta.txt");
    int kp = int(parse_long(kv_get(m, "positions")));
    int th = int(parse_long(kv_get(m, "tokens_h")));
    int tww = int(parse_long(kv_get(m, "tokens_w")));
    int d = int(parse_long(kv_get(m, "embed_dim")));
    RolloutResult<T> res;
    res.meta.layer_index = int(parse_long(kv_get(m, "layer_index")));
    res.meta.source_pos = int(parse_long(kv_get(m, "source_pos")));
    std::vector<int32_t> flat = read_binary<int32_t>(dir / "tokens.raw", size_t(kp) * th * tww);
    res.tokens.assign(size_t(kp), TokenGrid{});
    for (int k = 0; k < kp; ++k) {
        res.tokens[size_t(k)].h = th;
        res.tokens[size_t(k)].w = tww;
        res.tokens[size_t(k)].tokens.assign(flat.begin() + long(size_t(k) * th * tww),
                                            flat.begin() + long(size_t(k + 1) * th * tww));
    }
    std::vector<float> lat = read_binary<float>(dir / "latents.raw", size_t(kp) * d);
    res.latents.assign(lat.begin(), lat.end());
    if (tokens_h) *tokens_h = th;
    if (tokens_w) *tokens_w = tww;
    return res;
}

}  // namespace tw
