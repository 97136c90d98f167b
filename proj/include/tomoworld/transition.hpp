#pragma once

// World-model core: a decoder-only autoregressive attention model over the
// step layout [a_{t-1}] ++ r_{t-1} ++ [c_{t-1}] ++ r_t (length 2N+2). The
// class token sits at index N+1; rows N+1..2N each predict the next element
// of r_t. Forward/backward are hand-written and templated so the tiny-config
// gradient oracle runs in 64-bit precision.

#include "tomoworld/nn/adamw.hpp"
#include "tomoworld/nn/serialize.hpp"
#include "tomoworld/tokenizer.hpp"

namespace tw {

struct TransitionConfig {
    int embed_dim = 128;  // D (paper 1024)
    int depth = 4;        // paper 12 or 24
    int heads = 4;
    int vocab = 512;           // V
    int tokens_per_view = 64;  // N
    int num_positions = 37;    // K+1 canonical angular positions
    int mlp_ratio = 4;
    double dropout = 0.0;
    // training
    int epochs = 3;
    int batch = 16;
    double lr = 3e-4;
    double weight_decay = 0.01;
    double grad_clip = 1.0;
    double pair_fraction = 1.0;  // fraction of the pair pool sampled per epoch
    int warmup_steps = 50;
    uint64_t seed = 1;

    int seq_cap() const { return 2 * tokens_per_view + 2; }
    int head_dim() const { return embed_dim / heads; }

    void validate() const {
        check(embed_dim % heads == 0, "embed_dim must be divisible by heads");
        check(depth >= 2, "depth must be >= 2 (a middle layer must exist)");
        check(vocab >= 2 && tokens_per_view >= 1 && num_positions >= 2, "bad transition config");
        check(dropout >= 0.0 && dropout < 1.0, "dropout must be in [0,1)");
    }

    KvMap to_kv() const {
        KvMap m;
        m["embed_dim"] = std::to_string(embed_dim);
        m["depth"] = std::to_string(depth);
        m["heads"] = std::to_string(heads);
        m["vocab"] = std::to_string(vocab);
        m["tokens_per_view"] = std::to_string(tokens_per_view);
        m["num_positions"] = std::to_string(num_positions);
        m["mlp_ratio"] = std::to_string(mlp_ratio);
        m["dropout"] = fmt_double(dropout);
        m["epochs"] = std::to_string(epochs);
        m["batch"] = std::to_string(batch);
        m["lr"] = fmt_double(lr);
        m["weight_decay"] = fmt_double(weight_decay);
        m["grad_clip"] = fmt_double(grad_clip);
        m["pair_fraction"] = fmt_double(pair_fraction);
        m["warmup_steps"] = std::to_string(warmup_steps);
        m["seed"] = std::to_string(seed);
        return m;
    }

    static TransitionConfig from_kv(const KvMap& m) {
        TransitionConfig c;
        c.embed_dim = int(parse_long(kv_get(m, "embed_dim")));
        c.depth = int(parse_long(kv_get(m, "depth")));
        c.heads = int(parse_long(kv_get(m, "heads")));
        c.vocab = int(parse_long(kv_get(m, "vocab")));
        c.tokens_per_view = int(parse_long(kv_get(m, "tokens_per_view")));
        c.num_positions = int(parse_long(kv_get(m, "num_positions")));
        c.mlp_ratio = int(parse_long(kv_get(m, "mlp_ratio")));
        c.dropout = parse_double(kv_get(m, "dropout"));
        c.epochs = int(parse_long(kv_get(m, "epochs")));
        c.batch = int(parse_long(kv_get(m, "batch")));
        c.lr = parse_double(kv_get(m, "lr"));
        c.weight_decay = parse_double(kv_get(m, "weight_decay"));
        c.grad_clip = parse_double(kv_get(m, "grad_clip"));
        c.pair_fraction = parse_double(kv_get(m, "pair_fraction"));
        c.warmup_steps = int(parse_long(kv_get(m, "warmup_steps")));
        c.seed = uint64_t(parse_long(kv_get(m, "seed")));
        return c;
    }
};

// ---------------------------------------------------------------------------
// Step layout
// ---------------------------------------------------------------------------
struct StepItem {
    enum Kind { ActionTok, ImageTok, ClassTok } kind = ImageTok;
    int index = 0;  // action id / vocab token / canonical position
};

struct StepSequence {
    std::vector<StepItem> items;
    int n_tokens = 0;  // N
    int pos_idx = 0;
    bool has_next = false;

    int length() const { return int(items.size()); }
    int class_pos() const { return n_tokens + 1; }
    int first_target_row() const { return n_tokens + 1; }  // predicts r_t[0]
};

inline StepSequence build_step_sequence(Action a, const TokenGrid& r_prev, int pos_idx,
                                        const TokenGrid* r_next, const TransitionConfig& cfg) {
    check(pos_idx >= 0 && pos_idx < cfg.num_positions,
          "invalid position index: " + std::to_string(pos_idx));
    check(int(a) == 0 || int(a) == 1, "invalid action");
    r_prev.validate(cfg.vocab);
    check(r_prev.n() == cfg.tokens_per_view, "r_prev token count mismatch");

    StepSequence s;
    s.n_tokens = cfg.tokens_per_view;
    s.pos_idx = pos_idx;
    s.items.push_back({StepItem::ActionTok, int(a)});
    for (int32_t tkn : r_prev.tokens) s.items.push_back({StepItem::ImageTok, int(tkn)});
    s.items.push_back({StepItem::ClassTok, pos_idx});
    if (r_next) {
        r_next->validate(cfg.vocab);
        check(r_next->n() == cfg.tokens_per_view, "r_next token count mismatch");
        s.has_next = true;
        for (int32_t tkn : r_next->tokens) s.items.push_back({StepItem::ImageTok, int(tkn)});
    }
    return s;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------
template <typename T>
struct TransitionModel {
    TransitionConfig cfg;
    nn::ParamStore<T> store;
    size_t tok_emb = 0, act_emb = 0, cls_emb = 0, pos_emb = 0;
    struct BlockRefs {
        size_t ln1_g, ln1_b, wqkv, bqkv, wo, bo, ln2_g, ln2_b, wfc1, bfc1, wfc2, bfc2;
    };
    std::vector<BlockRefs> blocks;
    size_t lnf_g = 0, lnf_b = 0, head_w = 0, head_b = 0;

    void build(const TransitionConfig& c, uint64_t init_seed) {
        c.validate();
        cfg = c;
        int d = c.embed_dim, hd = c.mlp_ratio * d;
        Rng rng(Rng::derive(init_seed, 0x7F0A));
        auto fill_normal = [&](size_t entry, double std) {
            T* p = store.ptr(entry);
            for (size_t i = 0; i < store.entries[entry].count; ++i) p[i] = T(rng.normal(0.0, std));
        };
        auto fill_const = [&](size_t entry, double v) {
            T* p = store.ptr(entry);
            std::fill(p, p + store.entries[entry].count, T(v));
        };

        tok_emb = store.add("tok_emb", {c.vocab, d}, false);
        act_emb = store.add("act_emb", {2, d}, false);
        cls_emb = store.add("cls_emb", {c.num_positions, d}, false);
        pos_emb = store.add("pos_emb", {c.seq_cap(), d}, false);
        fill_normal(tok_emb, 0.02);
        fill_normal(act_emb, 0.02);
        fill_normal(cls_emb, 0.02);
        fill_normal(pos_emb, 0.02);

        double resid_std = 0.02 / std::sqrt(2.0 * c.depth);
        for (int b = 0; b < c.depth; ++b) {
            std::string p = "block" + std::to_string(b) + ".";
            BlockRefs r{};
            r.ln1_g = store.add(p + "ln1.g", {d}, false);
            r.ln1_b = store.add(p + "ln1.b", {d}, false);
            r.wqkv = store.add(p + "wqkv", {3 * d, d}, true);
            r.bqkv = store.add(p + "bqkv", {3 * d}, false);
            r.wo = store.add(p + "wo", {d, d}, true);
            r.bo = store.add(p + "bo", {d}, false);
            r.ln2_g = store.add(p + "ln2.g", {d}, false);
            r.ln2_b = store.add(p + "ln2.b", {d}, false);
            r.wfc1 = store.add(p + "wfc1", {hd, d}, true);
            r.bfc1 = store.add(p + "bfc1", {hd}, false);
            r.wfc2 = store.add(p + "wfc2", {d, hd}, true);
            r.bfc2 = store.add(p + "bfc2", {d}, false);
            fill_const(r.ln1_g, 1.0);
            fill_normal(r.wqkv, 0.02);
            fill_normal(r.wo, resid_std);
            fill_const(r.ln2_g, 1.0);
            fill_normal(r.wfc1, 0.02);
            fill_normal(r.wfc2, resid_std);
            blocks.push_back(r);
        }
        lnf_g = store.add("lnf.g", {d}, false);
        lnf_b = store.add("lnf.b", {d}, false);
        fill_const(lnf_g, 1.0);
        // zero-init output head: a fresh model scores exactly ln V on any input
        head_w = store.add("head.w", {c.vocab, d}, true);
        head_b = store.add("head.b", {c.vocab}, false);
    }

    const T* embedding_row(const StepItem& it) const {
        int d = cfg.embed_dim;
        switch (it.kind) {
            case StepItem::ActionTok: return store.ptr(act_emb) + size_t(it.index) * d;
            case StepItem::ImageTok: return store.ptr(tok_emb) + size_t(it.index) * d;
            default: return store.ptr(cls_emb) + size_t(it.index) * d;
        }
    }

    size_t grad_offset_of(const StepItem& it) const {
        int d = cfg.embed_dim;
        switch (it.kind) {
            case StepItem::ActionTok: return store.entries[act_emb].offset + size_t(it.index) * d;
            case StepItem::ImageTok: return store.entries[tok_emb].offset + size_t(it.index) * d;
            default: return store.entries[cls_emb].offset + size_t(it.index) * d;
        }
    }
};

// Embedded input rows: table row + positional row, layout order.
template <typename T>
std::vector<T> embed_sequence(const TransitionModel<T>& model, const StepSequence& seq) {
    int d = model.cfg.embed_dim, L = seq.length();
    check(L <= model.cfg.seq_cap(), "sequence exceeds positional table");
    std::vector<T> x(size_t(L) * d);
    const T* pe = model.store.ptr(model.pos_emb);
    for (int i = 0; i < L; ++i) {
        const T* row = model.embedding_row(seq.items[size_t(i)]);
        T* xi = x.data() + size_t(i) * d;
        for (int j = 0; j < d; ++j) xi[j] = row[j] + pe[size_t(i) * d + j];
    }
    return x;
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------
template <typename T>
struct BlockCache {
    nn::LayerNormCache<T> ln1c, ln2c;
    std::vector<T> x_in, ln1_out, qkv, att, ctx, x_mid, ln2_out, fc1_pre, fc1_act;
    std::vector<T> att_drop, mlp_drop;  // inverted-dropout masks (dropout > 0 only)
};

template <typename T>
struct ForwardCache {
    int L = 0;
    std::vector<T> x0;
    std::vector<BlockCache<T>> blocks;
    std::vector<T> x_final;  // residual stream after the last block (pre ln_f)

    // hidden state after 1-based block `layer`
    const std::vector<T>& hidden_after(int layer, int depth) const {
        check(layer >= 1 && layer <= depth, "layer out of range");
        return layer == depth ? x_final : blocks[size_t(layer)].x_in;
    }
};

template <typename T>
void transition_forward(const TransitionModel<T>& model, const std::vector<T>& x0, int L,
                        ForwardCache<T>& cache, Rng* dropout_rng = nullptr) {
    const TransitionConfig& cfg = model.cfg;
    int d = cfg.embed_dim, nh = cfg.heads, dh = cfg.head_dim(), hd = cfg.mlp_ratio * d;
    T scale = T(1.0 / std::sqrt(double(dh)));
    bool use_drop = dropout_rng != nullptr && cfg.dropout > 0.0;
    T keep = T(1.0 - cfg.dropout);

    cache.L = L;
    cache.x0 = x0;
    cache.blocks.assign(size_t(cfg.depth), {});
    std::vector<T> x = x0;

    for (int b = 0; b < cfg.depth; ++b) {
        const auto& bl = model.blocks[size_t(b)];
        BlockCache<T>& bc = cache.blocks[size_t(b)];
        bc.x_in = x;

        nn::ln_forward(x, L, d, model.store.ptr(bl.ln1_g), model.store.ptr(bl.ln1_b), bc.ln1c,
                       bc.ln1_out);
        bc.qkv.resize(size_t(L) * 3 * d);
        nn::mm_nt(bc.qkv.data(), bc.ln1_out.data(), model.store.ptr(bl.wqkv), L, d, 3 * d);
        {
            const T* bq = model.store.ptr(bl.bqkv);
            for (int r = 0; r < L; ++r)
                for (int j = 0; j < 3 * d; ++j) bc.qkv[size_t(r) * 3 * d + j] += bq[j];
        }

        bc.att.assign(size_t(nh) * L * L, T(0));
        bc.ctx.assign(size_t(L) * d, T(0));
        for (int h = 0; h < nh; ++h) {
            T* att = bc.att.data() + size_t(h) * L * L;
            for (int i = 0; i < L; ++i) {
                const T* qi = bc.qkv.data() + size_t(i) * 3 * d + size_t(h) * dh;
                T* arow = att + size_t(i) * L;
                for (int j = 0; j <= i; ++j) {
                    const T* kj = bc.qkv.data() + size_t(j) * 3 * d + d + size_t(h) * dh;
                    T acc = T(0);
                    for (int k = 0; k < dh; ++k) acc += qi[k] * kj[k];
                    arow[j] = acc * scale;
                }
                // causal softmax over j <= i
                T mx = arow[0];
                for (int j = 1; j <= i; ++j) mx = std::max(mx, arow[j]);
                T sum = T(0);
                for (int j = 0; j <= i; ++j) {
                    arow[j] = std::exp(arow[j] - mx);
                    sum += arow[j];
                }
                for (int j = 0; j <= i; ++j) arow[j] /= sum;
                for (int j = i + 1; j < L; ++j) arow[j] = T(0);

                T* ctx = bc.ctx.data() + size_t(i) * d + size_t(h) * dh;
                for (int j = 0; j <= i; ++j) {
                    const T* vj = bc.qkv.data() + size_t(j) * 3 * d + 2 * d + size_t(h) * dh;
                    T a = arow[j];
                    for (int k = 0; k < dh; ++k) ctx[k] += a * vj[k];
                }
            }
        }

        std::vector<T> att_out(size_t(L) * d);
        nn::mm_nt(att_out.data(), bc.ctx.data(), model.store.ptr(bl.wo), L, d, d);
        {
            const T* bo = model.store.ptr(bl.bo);
            for (int r = 0; r < L; ++r)
                for (int j = 0; j < d; ++j) att_out[size_t(r) * d + j] += bo[j];
        }
        if (use_drop) {
            bc.att_drop.resize(att_out.size());
            for (size_t i = 0; i < att_out.size(); ++i) {
                bc.att_drop[i] = dropout_rng->uniform() < cfg.dropout ? T(0) : T(1) / keep;
                att_out[i] *= bc.att_drop[i];
            }
        }
        bc.x_mid.resize(size_t(L) * d);
        for (size_t i = 0; i < bc.x_mid.size(); ++i) bc.x_mid[i] = x[i] + att_out[i];

        nn::ln_forward(bc.x_mid, L, d, model.store.ptr(bl.ln2_g), model.store.ptr(bl.ln2_b), bc.ln2c,
                       bc.ln2_out);
        bc.fc1_pre.resize(size_t(L) * hd);
        nn::mm_nt(bc.fc1_pre.data(), bc.ln2_out.data(), model.store.ptr(bl.wfc1), L, d, hd);
        {
            const T* b1 = model.store.ptr(bl.bfc1);
            for (int r = 0; r < L; ++r)
                for (int j = 0; j < hd; ++j) bc.fc1_pre[size_t(r) * hd + j] += b1[j];
        }
        bc.fc1_act.resize(bc.fc1_pre.size());
        for (size_t i = 0; i < bc.fc1_pre.size(); ++i) bc.fc1_act[i] = nn::silu(bc.fc1_pre[i]);

        std::vector<T> mlp_out(size_t(L) * d);
        nn::mm_nt(mlp_out.data(), bc.fc1_act.data(), model.store.ptr(bl.wfc2), L, hd, d);
        {
            const T* b2 = model.store.ptr(bl.bfc2);
            for (int r = 0; r < L; ++r)
                for (int j = 0; j < d; ++j) mlp_out[size_t(r) * d + j] += b2[j];
        }
        if (use_drop) {
            bc.mlp_drop.resize(mlp_out.size());
            for (size_t i = 0; i < mlp_out.size(); ++i) {
                bc.mlp_drop[i] = dropout_rng->uniform() < cfg.dropout ? T(0) : T(1) / keep;
                mlp_out[i] *= bc.mlp_drop[i];
            }
        }
        x.resize(size_t(L) * d);
        for (size_t i = 0; i < x.size(); ++i) x[i] = bc.x_mid[i] + mlp_out[i];
    }
    cache.x_final = std::move(x);
}

// ln_f + output head over selected sequence rows. Returns logits (rows x V).
template <typename T>
struct HeadCache {
    std::vector<int> rows;
    std::vector<T> gathered;
    nn::LayerNormCache<T> lnfc;
    std::vector<T> lnf_out;
};

template <typename T>
std::vector<T> head_forward(const TransitionModel<T>& model, const ForwardCache<T>& cache,
                            const std::vector<int>& rows, HeadCache<T>& hc) {
    int d = model.cfg.embed_dim, v = model.cfg.vocab, n = int(rows.size());
    hc.rows = rows;
    hc.gathered.resize(size_t(n) * d);
    for (int i = 0; i < n; ++i)
        std::copy(cache.x_final.begin() + long(size_t(rows[size_t(i)]) * d),
                  cache.x_final.begin() + long(size_t(rows[size_t(i)] + 1) * d),
                  hc.gathered.begin() + long(size_t(i) * d));
    nn::ln_forward(hc.gathered, n, d, model.store.ptr(model.lnf_g), model.store.ptr(model.lnf_b),
                   hc.lnfc, hc.lnf_out);
    std::vector<T> logits(size_t(n) * v);
    nn::mm_nt(logits.data(), hc.lnf_out.data(), model.store.ptr(model.head_w), n, d, v);
    const T* hb = model.store.ptr(model.head_b);
    for (int r = 0; r < n; ++r)
        for (int j = 0; j < v; ++j) logits[size_t(r) * v + j] += hb[j];
    return logits;
}

// Mean over token positions of -log softmax(logits)[target].
template <typename T>
double nll_loss(const std::vector<T>& logits, const std::vector<int32_t>& targets, int vocab) {
    int n = int(targets.size());
    check(int(logits.size()) == n * vocab, "nll: shape mismatch");
    double total = 0;
    for (int r = 0; r < n; ++r) {
        const T* lr = logits.data() + size_t(r) * vocab;
        int32_t t = targets[size_t(r)];
        check(t >= 0 && t < vocab, "nll: target out of vocabulary");
        double mx = double(lr[0]);
        for (int j = 1; j < vocab; ++j) mx = std::max(mx, double(lr[j]));
        double lse = 0;
        for (int j = 0; j < vocab; ++j) lse += std::exp(double(lr[j]) - mx);
        total += mx + std::log(lse) - double(lr[t]);
    }
    return total / n;
}

// dlogits = (softmax - onehot)/n, scaled by `weight`.
template <typename T>
std::vector<T> nll_grad(const std::vector<T>& logits, const std::vector<int32_t>& targets, int vocab,
                        T weight) {
    int n = int(targets.size());
    std::vector<T> dl(logits.size());
    for (int r = 0; r < n; ++r) {
        const T* lr = logits.data() + size_t(r) * vocab;
        T* dr = dl.data() + size_t(r) * vocab;
        T mx = lr[0];
        for (int j = 1; j < vocab; ++j) mx = std::max(mx, lr[j]);
        T sum = T(0);
        for (int j = 0; j < vocab; ++j) {
            dr[j] = std::exp(lr[j] - mx);
            sum += dr[j];
        }
        for (int j = 0; j < vocab; ++j) dr[j] = dr[j] / sum * weight / T(n);
        dr[targets[size_t(r)]] -= weight / T(n);
    }
    return dl;
}

template <typename T>
void head_backward(const TransitionModel<T>& model, const ForwardCache<T>& cache, HeadCache<T>& hc,
                   const std::vector<T>& dlogits, std::vector<T>& dx_final, std::vector<T>& grad) {
    int d = model.cfg.embed_dim, v = model.cfg.vocab, n = int(hc.rows.size());
    // head params
    nn::mm_tn(grad.data() + model.store.entries[model.head_w].offset, dlogits.data(),
              hc.lnf_out.data(), v, n, d, true);
    T* ghb = grad.data() + model.store.entries[model.head_b].offset;
    for (int r = 0; r < n; ++r)
        for (int j = 0; j < v; ++j) ghb[j] += dlogits[size_t(r) * v + j];
    // into ln_f
    std::vector<T> dlnf(size_t(n) * d);
    nn::mm_nn(dlnf.data(), dlogits.data(), model.store.ptr(model.head_w), n, v, d);
    std::vector<T> dgathered;
    nn::ln_backward(hc.lnfc, n, d, model.store.ptr(model.lnf_g), dlnf,
                    grad.data() + model.store.entries[model.lnf_g].offset,
                    grad.data() + model.store.entries[model.lnf_b].offset, dgathered);
    // scatter to the residual stream
    dx_final.assign(cache.x_final.size(), T(0));
    for (int i = 0; i < n; ++i) {
        T* dst = dx_final.data() + size_t(hc.rows[size_t(i)]) * d;
        const T* src = dgathered.data() + size_t(i) * d;
        for (int j = 0; j < d; ++j) dst[j] += src[j];
    }
}

template <typename T>
void transition_backward(const TransitionModel<T>& model, const ForwardCache<T>& cache,
                         std::vector<T> dx, std::vector<T>& dx0, std::vector<T>& grad) {
    const TransitionConfig& cfg = model.cfg;
    int L = cache.L, d = cfg.embed_dim, nh = cfg.heads, dh = cfg.head_dim(), hd = cfg.mlp_ratio * d;
    T scale = T(1.0 / std::sqrt(double(dh)));

    for (int b = cfg.depth - 1; b >= 0; --b) {
        const auto& bl = model.blocks[size_t(b)];
        const BlockCache<T>& bc = cache.blocks[size_t(b)];

        // ---- MLP path: x = x_mid + drop(fc2(silu(fc1(ln2(x_mid)))))
        std::vector<T> dmlp_out = dx;  // residual branch copy
        if (!bc.mlp_drop.empty())
            for (size_t i = 0; i < dmlp_out.size(); ++i) dmlp_out[i] *= bc.mlp_drop[i];

        std::vector<T> dfc1_act(size_t(L) * hd);
        nn::mm_nn(dfc1_act.data(), dmlp_out.data(), model.store.ptr(bl.wfc2), L, d, hd);
        nn::mm_tn(grad.data() + model.store.entries[bl.wfc2].offset, dmlp_out.data(),
                  bc.fc1_act.data(), d, L, hd, true);
        {
            T* gb = grad.data() + model.store.entries[bl.bfc2].offset;
            for (int r = 0; r < L; ++r)
                for (int j = 0; j < d; ++j) gb[j] += dmlp_out[size_t(r) * d + j];
        }
        for (size_t i = 0; i < dfc1_act.size(); ++i) dfc1_act[i] *= nn::silu_grad(bc.fc1_pre[i]);
        std::vector<T> dln2(size_t(L) * d);
        nn::mm_nn(dln2.data(), dfc1_act.data(), model.store.ptr(bl.wfc1), L, hd, d);
        nn::mm_tn(grad.data() + model.store.entries[bl.wfc1].offset, dfc1_act.data(),
                  bc.ln2_out.data(), hd, L, d, true);
        {
            T* gb = grad.data() + model.store.entries[bl.bfc1].offset;
            for (int r = 0; r < L; ++r)
                for (int j = 0; j < hd; ++j) gb[j] += dfc1_act[size_t(r) * hd + j];
        }
        std::vector<T> dx_mid_ln;
        nn::ln_backward(bc.ln2c, L, d, model.store.ptr(bl.ln2_g), dln2,
                        grad.data() + model.store.entries[bl.ln2_g].offset,
                        grad.data() + model.store.entries[bl.ln2_b].offset, dx_mid_ln);
        std::vector<T> dx_mid = dx;  // residual passthrough
        for (size_t i = 0; i < dx_mid.size(); ++i) dx_mid[i] += dx_mid_ln[i];

        // ---- attention path: x_mid = x_in + drop(wo(ctx))
        std::vector<T> datt_out = dx_mid;
        if (!bc.att_drop.empty())
            for (size_t i = 0; i < datt_out.size(); ++i) datt_out[i] *= bc.att_drop[i];

        std::vector<T> dctx(size_t(L) * d);
        nn::mm_nn(dctx.data(), datt_out.data(), model.store.ptr(bl.wo), L, d, d);
        nn::mm_tn(grad.data() + model.store.entries[bl.wo].offset, datt_out.data(), bc.ctx.data(), d,
                  L, d, true);
        {
            T* gb = grad.data() + model.store.entries[bl.bo].offset;
            for (int r = 0; r < L; ++r)
                for (int j = 0; j < d; ++j) gb[j] += datt_out[size_t(r) * d + j];
        }

        std::vector<T> dqkv(size_t(L) * 3 * d, T(0));
        for (int h = 0; h < nh; ++h) {
            const T* att = bc.att.data() + size_t(h) * L * L;
            for (int i = 0; i < L; ++i) {
                const T* arow = att + size_t(i) * L;
                const T* dctx_i = dctx.data() + size_t(i) * d + size_t(h) * dh;
                // dp_j = dctx_i . v_j ; dv_j += a_j * dctx_i
                T dot = T(0);
                std::vector<T> dp(size_t(i) + 1);
                for (int j = 0; j <= i; ++j) {
                    const T* vj = bc.qkv.data() + size_t(j) * 3 * d + 2 * d + size_t(h) * dh;
                    T* dvj = dqkv.data() + size_t(j) * 3 * d + 2 * d + size_t(h) * dh;
                    T acc = T(0);
                    for (int k = 0; k < dh; ++k) {
                        acc += dctx_i[k] * vj[k];
                        dvj[k] += arow[j] * dctx_i[k];
                    }
                    dp[size_t(j)] = acc;
                    dot += acc * arow[j];
                }
                // softmax backward then q/k grads
                const T* qi = bc.qkv.data() + size_t(i) * 3 * d + size_t(h) * dh;
                T* dqi = dqkv.data() + size_t(i) * 3 * d + size_t(h) * dh;
                for (int j = 0; j <= i; ++j) {
                    T ds = arow[j] * (dp[size_t(j)] - dot) * scale;
                    const T* kj = bc.qkv.data() + size_t(j) * 3 * d + d + size_t(h) * dh;
                    T* dkj = dqkv.data() + size_t(j) * 3 * d + d + size_t(h) * dh;
                    for (int k = 0; k < dh; ++k) {
                        dqi[k] += ds * kj[k];
                        dkj[k] += ds * qi[k];
                    }
                }
            }
        }

        std::vector<T> dln1(size_t(L) * d);
        nn::mm_nn(dln1.data(), dqkv.data(), model.store.ptr(bl.wqkv), L, 3 * d, d);
        nn::mm_tn(grad.data() + model.store.entries[bl.wqkv].offset, dqkv.data(), bc.ln1_out.data(),
                  3 * d, L, d, true);
        {
            T* gb = grad.data() + model.store.entries[bl.bqkv].offset;
            for (int r = 0; r < L; ++r)
                for (int j = 0; j < 3 * d; ++j) gb[j] += dqkv[size_t(r) * 3 * d + j];
        }
        std::vector<T> dx_in_ln;
        nn::ln_backward(bc.ln1c, L, d, model.store.ptr(bl.ln1_g), dln1,
                        grad.data() + model.store.entries[bl.ln1_g].offset,
                        grad.data() + model.store.entries[bl.ln1_b].offset, dx_in_ln);
        dx = std::move(dx_mid);
        for (size_t i = 0; i < dx.size(); ++i) dx[i] += dx_in_ln[i];
    }
    dx0 = std::move(dx);
}

// Scatter dx0 into the embedding tables (token/action/class + positional).
template <typename T>
void embedding_backward(const TransitionModel<T>& model, const StepSequence& seq,
                        const std::vector<T>& dx0, std::vector<T>& grad) {
    int d = model.cfg.embed_dim;
    size_t pe_off = model.store.entries[model.pos_emb].offset;
    for (int i = 0; i < seq.length(); ++i) {
        const T* src = dx0.data() + size_t(i) * d;
        T* gtab = grad.data() + model.grad_offset_of(seq.items[size_t(i)]);
        T* gpos = grad.data() + pe_off + size_t(i) * d;
        for (int j = 0; j < d; ++j) {
            gtab[j] += src[j];
            gpos[j] += src[j];
        }
    }
}

// Teacher-forced logits over all N target rows of a full step sequence.
template <typename T>
std::vector<T> forward_logits(const TransitionModel<T>& model, const StepSequence& seq,
                              ForwardCache<T>& cache, HeadCache<T>& hc) {
    check(seq.has_next, "forward_logits needs a full step sequence");
    std::vector<T> x0 = embed_sequence(model, seq);
    transition_forward(model, x0, seq.length(), cache);
    std::vector<int> rows(size_t(seq.n_tokens));
    for (int i = 0; i < seq.n_tokens; ++i) rows[size_t(i)] = seq.first_target_row() + i;
    return head_forward(model, cache, rows, hc);
}

// Loss + full gradient for one training pair; grad scaled by `weight`.
template <typename T>
double transition_train_sample(const TransitionModel<T>& model, const StepSequence& seq,
                               const std::vector<int32_t>& targets, T weight, std::vector<T>& grad,
                               Rng* dropout_rng = nullptr) {
    ForwardCache<T> cache;
    HeadCache<T> hc;
    std::vector<T> x0 = embed_sequence(model, seq);
    transition_forward(model, x0, seq.length(), cache, dropout_rng);
    std::vector<int> rows(size_t(seq.n_tokens));
    for (int i = 0; i < seq.n_tokens; ++i) rows[size_t(i)] = seq.first_target_row() + i;
    std::vector<T> logits = head_forward(model, cache, rows, hc);
    double loss = nll_loss(logits, targets, model.cfg.vocab);
    std::vector<T> dlogits = nll_grad(logits, targets, model.cfg.vocab, weight);
    std::vector<T> dx_final, dx0;
    head_backward(model, cache, hc, dlogits, dx_final, grad);
    transition_backward(model, cache, std::move(dx_final), dx0, grad);
    embedding_backward(model, seq, dx0, grad);
    return loss;
}

// ---------------------------------------------------------------------------
// Training pairs: both sweep directions over tokenized trajectories.
// ---------------------------------------------------------------------------
struct TrainingPair {
    int volume = 0;
    int pos = 0;  // canonical index of r_prev
    Action action = Action::CW;

    int next_pos() const { return action == Action::CW ? pos + 1 : pos - 1; }
};

inline std::vector<TrainingPair> make_training_pairs(int num_volumes, int num_positions) {
    std::vector<TrainingPair> pairs;
    for (int v = 0; v < num_volumes; ++v) {
        for (int k = 0; k + 1 < num_positions; ++k) pairs.push_back({v, k, Action::CW});
        for (int k = 1; k < num_positions; ++k) pairs.push_back({v, k, Action::CCW});
    }
    return pairs;
}

struct TransitionEpochStats {
    int epoch = 0;
    double train_nll = 0, val_nll = 0;
};

template <typename T = float>
struct TransitionTrainer {
    TransitionModel<T> model;
    nn::AdamW<T> opt;
    std::vector<TransitionEpochStats> history;
    int64_t total_steps_planned = 0;

    void init(const TransitionConfig& cfg) {
        model.build(cfg, cfg.seed);
        opt.lr = cfg.lr;
        opt.weight_decay = cfg.weight_decay;
        opt.attach(model.store.theta.size(), model.store.decay_mask());
    }

    double lr_at(int64_t step) const {
        const TransitionConfig& cfg = model.cfg;
        if (step < cfg.warmup_steps) return cfg.lr * double(step + 1) / double(cfg.warmup_steps);
        if (total_steps_planned <= cfg.warmup_steps) return cfg.lr;
        double t = double(step - cfg.warmup_steps) / double(total_steps_planned - cfg.warmup_steps);
        t = std::min(1.0, std::max(0.0, t));
        double min_frac = 0.1;
        return cfg.lr * (min_frac + (1.0 - min_frac) * 0.5 * (1.0 + std::cos(M_PI * t)));
    }

    // tokens[v][k] = TokenGrid of volume v at canonical position k.
    void train(const std::vector<std::vector<TokenGrid>>& train_tokens,
               const std::vector<std::vector<TokenGrid>>& val_tokens) {
        const TransitionConfig& cfg = model.cfg;
        check(!train_tokens.empty(), "empty transition training set");
        for (const auto& vt : train_tokens)
            check(int(vt.size()) == cfg.num_positions, "missing views in a training trajectory");

        std::vector<TrainingPair> pool = make_training_pairs(int(train_tokens.size()), cfg.num_positions);
        int per_epoch = int(std::llround(cfg.pair_fraction * double(pool.size())));
        per_epoch = std::max(cfg.batch, std::min<int>(per_epoch, int(pool.size())));
        total_steps_planned = int64_t(cfg.epochs) * ((per_epoch + cfg.batch - 1) / cfg.batch);

        std::vector<std::vector<T>> grads(size_t(cfg.batch));
        std::vector<double> losses(size_t(cfg.batch));
        std::vector<T> grad_total(model.store.theta.size());

        for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
            Rng shuffle_rng(Rng::derive(cfg.seed, 0xA000 + uint64_t(epoch)));
            std::vector<TrainingPair> epoch_pairs = pool;
            shuffle_rng.shuffle(epoch_pairs);
            epoch_pairs.resize(size_t(per_epoch));

            double ep_loss = 0;
            for (int start = 0; start < per_epoch; start += cfg.batch) {
                int bsz = std::min(cfg.batch, per_epoch - start);
                for (int s = 0; s < bsz; ++s) grads[size_t(s)].assign(model.store.theta.size(), T(0));

                uint64_t step_id = uint64_t(epoch) * 1000003ULL + uint64_t(start);
                parallel_for(bsz, [&](int s) {
                    const TrainingPair& p = epoch_pairs[size_t(start + s)];
                    const TokenGrid& prev = train_tokens[size_t(p.volume)][size_t(p.pos)];
                    const TokenGrid& next = train_tokens[size_t(p.volume)][size_t(p.next_pos())];
                    StepSequence seq = build_step_sequence(p.action, prev, p.pos, &next, cfg);
                    Rng drng(Rng::derive(cfg.seed, step_id * 131 + uint64_t(s)));
                    losses[size_t(s)] = transition_train_sample(
                        model, seq, next.tokens, T(1.0 / bsz), grads[size_t(s)],
                        cfg.dropout > 0 ? &drng : nullptr);
                });

                std::fill(grad_total.begin(), grad_total.end(), T(0));
                for (int s = 0; s < bsz; ++s) {
                    const auto& g = grads[size_t(s)];
                    for (size_t i = 0; i < g.size(); ++i) grad_total[i] += g[i];
                }
                double batch_loss = 0;
                for (int s = 0; s < bsz; ++s) batch_loss += losses[size_t(s)] / bsz;
                ep_loss += batch_loss * bsz;
                check(std::isfinite(batch_loss), "non-finite transition loss at epoch " +
                                                     std::to_string(epoch) + " step " +
                                                     std::to_string(start / cfg.batch));
                nn::AdamW<T>::clip_grad_norm(grad_total, cfg.grad_clip);
                opt.lr = lr_at(opt.steps());
                opt.step(model.store.theta, grad_total);
            }

            TransitionEpochStats st;
            st.epoch = epoch;
            st.train_nll = ep_loss / per_epoch;
            st.val_nll = evaluate_nll(val_tokens, 512);
            history.push_back(st);
        }
    }

    double evaluate_nll(const std::vector<std::vector<TokenGrid>>& tokens, int max_pairs) const {
        if (tokens.empty()) return 0.0;
        std::vector<TrainingPair> pairs = make_training_pairs(int(tokens.size()), model.cfg.num_positions);
        Rng rng(Rng::derive(model.cfg.seed, 0xEA77));
        rng.shuffle(pairs);
        if (int(pairs.size()) > max_pairs) pairs.resize(size_t(max_pairs));
        std::vector<double> nll(pairs.size());
        parallel_for(int(pairs.size()), [&](int i) {
            const TrainingPair& p = pairs[size_t(i)];
            const TokenGrid& prev = tokens[size_t(p.volume)][size_t(p.pos)];
            const TokenGrid& next = tokens[size_t(p.volume)][size_t(p.next_pos())];
            StepSequence seq = build_step_sequence(p.action, prev, p.pos, &next, model.cfg);
            ForwardCache<T> cache;
            HeadCache<T> hc;
            std::vector<T> logits = forward_logits(model, seq, cache, hc);
            nll[size_t(i)] = nll_loss(logits, next.tokens, model.cfg.vocab);
        });
        double acc = 0;
        for (double v : nll) acc += v;
        return acc / double(nll.size());
    }
};

// Mean teacher-forced NLL per canonical target position, both directions.
template <typename T>
std::vector<double> per_position_nll(const TransitionModel<T>& model,
                                     const std::vector<std::vector<TokenGrid>>& tokens) {
    int kp = model.cfg.num_positions;
    std::vector<double> sum(size_t(kp), 0.0);
    std::vector<int> count(size_t(kp), 0);
    std::vector<TrainingPair> pairs = make_training_pairs(int(tokens.size()), kp);
    std::vector<double> nll(pairs.size());
    parallel_for(int(pairs.size()), [&](int i) {
        const TrainingPair& p = pairs[size_t(i)];
        const TokenGrid& prev = tokens[size_t(p.volume)][size_t(p.pos)];
        const TokenGrid& next = tokens[size_t(p.volume)][size_t(p.next_pos())];
        StepSequence seq = build_step_sequence(p.action, prev, p.pos, &next, model.cfg);
        ForwardCache<T> cache;
        HeadCache<T> hc;
        std::vector<T> logits = forward_logits(model, seq, cache, hc);
        nll[size_t(i)] = nll_loss(logits, next.tokens, model.cfg.vocab);
    });
    for (size_t i = 0; i < pairs.size(); ++i) {
        sum[size_t(pairs[i].next_pos())] += nll[i];
        count[size_t(pairs[i].next_pos())] += 1;
    }
    std::vector<double> out(size_t(kp), 0.0);
    for (int k = 0; k < kp; ++k) out[size_t(k)] = count[size_t(k)] > 0 ? sum[size_t(k)] / count[size_t(k)] : 0.0;
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoint I/O (records the tokenizer checkpoint hash it was trained on).
// ---------------------------------------------------------------------------
template <typename T>
void save_transition(const TransitionModel<T>& model, const std::vector<TransitionEpochStats>& history,
                     const std::string& tokenizer_hash, const fs::path& path) {
    KvMap header;
    header["kind"] = "transition";
    header["version"] = "1";
    header["tokenizer_hash"] = tokenizer_hash;
    for (const auto& [k, v] : model.cfg.to_kv()) header["config." + k] = v;
    std::string hist;
    for (const auto& h : history)
        hist += std::to_string(h.epoch) + ":" + fmt_double(h.train_nll) + ":" + fmt_double(h.val_nll) + ";";
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
std::pair<TransitionModel<T>, std::string> load_transition(const fs::path& path) {
    auto [header, tensors] = nn::load_checkpoint(path);
    check(kv_get(header, "kind") == "transition", "not a transition checkpoint: " + path.string());
    KvMap cfg_kv;
    for (const auto& [k, v] : header)
        if (k.rfind("config.", 0) == 0) cfg_kv[k.substr(7)] = v;
    TransitionModel<T> model;
    model.build(TransitionConfig::from_kv(cfg_kv), 0);
    for (const auto& e : model.store.entries) {
        std::vector<T> data = tensors.get<T>(e.name);
        check(data.size() == e.count, "checkpoint tensor size mismatch: " + e.name);
        std::copy(data.begin(), data.end(), model.store.theta.begin() + long(e.offset));
    }
    return {std::move(model), kv_get(header, "tokenizer_hash")};
}

}  // namespace tw
