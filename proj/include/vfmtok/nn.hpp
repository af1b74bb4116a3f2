#pragma once

// Transformer building blocks on top of the tensor ops. Blocks are pre-norm:
// x + Attn(LN(x)), x + MLP(LN(x)).

#include <optional>
#include <string>

#include "vfmtok/ops.hpp"

namespace vfmtok {

template <typename S>
using NamedParams = std::vector<std::pair<std::string, Tensor<S>>>;

template <typename S>
struct Linear {
    Tensor<S> w;  // [in, out]
    Tensor<S> b;  // [out]

    static Linear init(int in, int out, RngState& rng, S wstd = S(0.02)) {
        Linear l;
        l.w = Tensor<S>::randn({in, out}, rng, wstd).set_requires_grad(true);
        l.b = Tensor<S>::zeros({out}).set_requires_grad(true);
        return l;
    }

    Tensor<S> operator()(const Tensor<S>& x) const { return add(matmul(x, w), b); }

    void collect(const std::string& prefix, NamedParams<S>& out) const {
        out.push_back({prefix + ".w", w});
        out.push_back({prefix + ".b", b});
    }

    void freeze() {
        w.set_requires_grad(false);
        b.set_requires_grad(false);
    }
};

template <typename S>
struct LayerNormParams {
    Tensor<S> gain;
    Tensor<S> bias;

    static LayerNormParams init(int dim) {
        LayerNormParams ln;
        ln.gain = Tensor<S>::full({dim}, S(1)).set_requires_grad(true);
        ln.bias = Tensor<S>::zeros({dim}).set_requires_grad(true);
        return ln;
    }

    Tensor<S> operator()(const Tensor<S>& x) const { return layernorm(x, gain, bias); }

    void collect(const std::string& prefix, NamedParams<S>& out) const {
        out.push_back({prefix + ".gain", gain});
        out.push_back({prefix + ".bias", bias});
    }

    void freeze() {
        gain.set_requires_grad(false);
        bias.set_requires_grad(false);
    }
};

template <typename S>
struct Mlp {
    Linear<S> fc1, fc2;

    static Mlp init(int dim, int hidden, RngState& rng) {
        Mlp m;
        m.fc1 = Linear<S>::init(dim, hidden, rng);
        m.fc2 = Linear<S>::init(hidden, dim, rng);
        return m;
    }

    Tensor<S> operator()(const Tensor<S>& x) const { return fc2(gelu(fc1(x))); }

    void collect(const std::string& prefix, NamedParams<S>& out) const {
        fc1.collect(prefix + ".fc1", out);
        fc2.collect(prefix + ".fc2", out);
    }

    void freeze() {
        fc1.freeze();
        fc2.freeze();
    }
};

// Additive causal mask: 0 on/below the diagonal, large negative above.
// q_offset shifts the query rows relative to the key columns (KV-cache decode).
template <typename S>
Tensor<S> causal_mask(int q_len, int k_len, int q_offset) {
    Tensor<S> m = Tensor<S>::zeros({q_len, k_len});
    auto& d = m.data();
    for (int i = 0; i < q_len; ++i)
        for (int j = 0; j < k_len; ++j)
            if (j > i + q_offset) d[static_cast<size_t>(i) * k_len + j] = S(-1e30);
    return m;
}

// Pre-rotated per-position rope tables (empty when rope is unused).
template <typename S>
struct RopeTables {
    std::vector<S> cos_tab;
    std::vector<S> sin_tab;
    bool active() const { return !cos_tab.empty(); }
};

// Inference-time key/value memory for one attention layer, kept flat in
// [B, heads, len, hd] layout and rebuilt on every append.
template <typename S>
struct KvSlot {
    std::vector<S> k, v;
    int len = 0;

    void append(const std::vector<S>& kc, const std::vector<S>& vc, int B, int heads, int chunk,
                int hd) {
        const int nl = len + chunk;
        std::vector<S> nk(static_cast<size_t>(B) * heads * nl * hd);
        std::vector<S> nv(nk.size());
        for (int b = 0; b < B; ++b)
            for (int h = 0; h < heads; ++h) {
                const int64_t row = static_cast<int64_t>(b) * heads + h;
                S* dk = nk.data() + row * nl * hd;
                S* dv = nv.data() + row * nl * hd;
                if (len > 0) {
                    std::memcpy(dk, k.data() + row * len * hd,
                                static_cast<size_t>(len) * hd * sizeof(S));
                    std::memcpy(dv, v.data() + row * len * hd,
                                static_cast<size_t>(len) * hd * sizeof(S));
                }
                std::memcpy(dk + static_cast<int64_t>(len) * hd, kc.data() + row * chunk * hd,
                            static_cast<size_t>(chunk) * hd * sizeof(S));
                std::memcpy(dv + static_cast<int64_t>(len) * hd, vc.data() + row * chunk * hd,
                            static_cast<size_t>(chunk) * hd * sizeof(S));
            }
        k = std::move(nk);
        v = std::move(nv);
        len = nl;
    }
};

template <typename S>
struct MultiHeadAttention {
    Linear<S> wq, wk, wv, wo;
    int heads = 1;

    static MultiHeadAttention init(int dim, int heads, RngState& rng) {
        require(dim % heads == 0, "attention: width " + std::to_string(dim) +
                                      " not divisible by " + std::to_string(heads) + " heads");
        MultiHeadAttention a;
        a.heads = heads;
        a.wq = Linear<S>::init(dim, dim, rng);
        a.wk = Linear<S>::init(dim, dim, rng);
        a.wv = Linear<S>::init(dim, dim, rng);
        a.wo = Linear<S>::init(dim, dim, rng);
        return a;
    }

    // x [B, Sq, W]. With a cache, keys/values of previous positions are
    // prepended and the new ones appended; rope tables when present must cover
    // absolute positions (cache offset + Sq).
    Tensor<S> operator()(const Tensor<S>& x, bool causal,
                         const RopeTables<S>* rope = nullptr, KvSlot<S>* cache = nullptr) const {
        const int B = x.dim(0), Sq = x.dim(1), W = x.dim(2);
        const int hd = W / heads;
        auto split = [&](const Tensor<S>& t, int len) {
            return permute0213(reshape(t, {B, len, heads, hd}));  // [B,h,len,hd]
        };
        Tensor<S> q = split(wq(x), Sq);
        Tensor<S> k = split(wk(x), Sq);
        Tensor<S> v = split(wv(x), Sq);
        int offset = cache ? cache->len : 0;
        if (rope && rope->active()) {
            const int pairs = hd / 2;
            auto window = [&](const std::vector<S>& tab) {
                return std::vector<S>(tab.begin() + static_cast<int64_t>(offset) * pairs,
                                      tab.begin() + static_cast<int64_t>(offset + Sq) * pairs);
            };
            std::vector<S> ct = window(rope->cos_tab), st = window(rope->sin_tab);
            q = rope_apply(q, ct, st);
            k = rope_apply(k, ct, st);
        }
        int Sk = Sq;
        if (cache) {
            cache->append(k.data(), v.data(), B, heads, Sq, hd);
            Sk = cache->len;
            Tensor<S> kf = Tensor<S>::zeros({B, heads, Sk, hd});
            Tensor<S> vf = Tensor<S>::zeros({B, heads, Sk, hd});
            kf.data() = cache->k;
            vf.data() = cache->v;
            k = kf;
            v = vf;
        }
        Tensor<S> scores = scale(matmul(q, transpose_last2(k)), S(1) / std::sqrt(static_cast<S>(hd)));
        if (causal) scores = add(scores, causal_mask<S>(Sq, Sk, offset));
        Tensor<S> probs = softmax(scores, -1);
        Tensor<S> ctx = matmul(probs, v);                       // [B,h,Sq,hd]
        Tensor<S> merged = reshape(permute0213(ctx), {B, Sq, W});
        return wo(merged);
    }

    void collect(const std::string& prefix, NamedParams<S>& out) const {
        wq.collect(prefix + ".wq", out);
        wk.collect(prefix + ".wk", out);
        wv.collect(prefix + ".wv", out);
        wo.collect(prefix + ".wo", out);
    }

    void freeze() {
        wq.freeze();
        wk.freeze();
        wv.freeze();
        wo.freeze();
    }
};

template <typename S>
struct TransformerBlock {
    LayerNormParams<S> ln1, ln2;
    MultiHeadAttention<S> attn;
    Mlp<S> mlp;

    static TransformerBlock init(int dim, int heads, int mlp_hidden, RngState& rng) {
        TransformerBlock b;
        b.ln1 = LayerNormParams<S>::init(dim);
        b.ln2 = LayerNormParams<S>::init(dim);
        b.attn = MultiHeadAttention<S>::init(dim, heads, rng);
        b.mlp = Mlp<S>::init(dim, mlp_hidden, rng);
        return b;
    }

    Tensor<S> operator()(const Tensor<S>& x, bool causal, const RopeTables<S>* rope = nullptr,
                         KvSlot<S>* cache = nullptr) const {
        Tensor<S> h = add(x, attn(ln1(x), causal, rope, cache));
        return add(h, mlp(ln2(h)));
    }

    void collect(const std::string& prefix, NamedParams<S>& out) const {
        ln1.collect(prefix + ".ln1", out);
        ln2.collect(prefix + ".ln2", out);
        attn.collect(prefix + ".attn", out);
        mlp.collect(prefix + ".mlp", out);
    }

    void freeze() {
        ln1.freeze();
        ln2.freeze();
        attn.freeze();
        mlp.freeze();
    }
};

}  // namespace vfmtok
