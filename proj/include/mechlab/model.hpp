#pragma once

// Decoder-only causal transformer, implemented directly on Eigen.
//
// Architecture: learned token + absolute positional embeddings; per block
// pre-LN attention (biasless Q/K/V/O projections, scaling 1/sqrt(d_head))
// then pre-LN MLP (d_mlp wide, exact GELU, biasless in/out); final LN and
// an untied, biasless unembedding. No dropout.
//
// Residual-site naming used by every analysis and report:
//   resid_post(0)  = embedding output (token + positional)
//   resid_mid(l)   = resid_post(l-1) + attention output of block l,  l=1..L
//   resid_post(l)  = resid_mid(l) + MLP output of block l
//   head_out(l,h)  = per-head slice of the attention output (z_h W_o[h])
//   attn_probs(l,h), mlp_post_act(l) as usual.
//
// Forward is templated on the scalar so the float64 shadow path used by the
// finite-difference gradient check shares every line with production float32.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mechlab/errors.hpp"
#include "mechlab/linalg.hpp"
#include "mechlab/rng.hpp"
#include "mechlab/trace.hpp"

namespace mechlab {

struct ModelConfig {
    int n_layers = 4;
    int n_heads = 4;
    int d_model = 128;
    int d_mlp = 768;
    int vocab = kVocabSize;
    int max_seq = 250;
    std::uint64_t seed = 0;
    double ln_eps = 1e-5;

    int head_dim() const { return d_model / n_heads; }

    void validate() const {
        if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_mlp < 1 || max_seq < 1 || vocab < 1)
            throw ConfigError("model dimensions must be positive");
        if (d_model % n_heads != 0)
            throw ConfigError("d_model (" + std::to_string(d_model) + ") not divisible by n_heads (" +
                              std::to_string(n_heads) + ")");
    }

    // The run the analyses were designed around.
    static ModelConfig paper() {
        ModelConfig c;
        c.n_layers = 8;
        c.n_heads = 8;
        c.d_model = 576;
        c.d_mlp = 3456;
        return c;
    }
    // CPU-sized default: same shape family, hours not weeks.
    static ModelConfig desk() { return ModelConfig{}; }
};

template <class S>
struct LayerParams {
    Vec<S> ln1_g, ln1_b;
    Mat<S> w_q, w_k, w_v, w_o;  // d_model x d_model
    Vec<S> ln2_g, ln2_b;
    Mat<S> w_in;   // d_model x d_mlp
    Mat<S> w_out;  // d_mlp x d_model
};

template <class S>
struct Params {
    ModelConfig config;
    Mat<S> tok_emb;  // vocab x d_model
    Mat<S> pos_emb;  // max_seq x d_model
    std::vector<LayerParams<S>> layers;
    Vec<S> lnf_g, lnf_b;
    Mat<S> unembed;  // d_model x vocab
};

// Uniform tensor traversal (checkpointing, optimizer state, gradients).
// The visitor receives (name, tensor&, decayable); matrices participate in
// weight decay, LayerNorm vectors do not.
template <class S, class F>
void visit_tensors(Params<S>& p, F&& f) {
    f("tok_emb", p.tok_emb, true);
    f("pos_emb", p.pos_emb, true);
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const std::string base = "layer" + std::to_string(l) + "/";
        auto& lp = p.layers[l];
        f(base + "ln1_g", lp.ln1_g, false);
        f(base + "ln1_b", lp.ln1_b, false);
        f(base + "w_q", lp.w_q, true);
        f(base + "w_k", lp.w_k, true);
        f(base + "w_v", lp.w_v, true);
        f(base + "w_o", lp.w_o, true);
        f(base + "ln2_g", lp.ln2_g, false);
        f(base + "ln2_b", lp.ln2_b, false);
        f(base + "w_in", lp.w_in, true);
        f(base + "w_out", lp.w_out, true);
    }
    f("lnf_g", p.lnf_g, false);
    f("lnf_b", p.lnf_b, false);
    f("unembed", p.unembed, true);
}

template <class S, class F>
void visit_tensors(const Params<S>& p, F&& f) {
    visit_tensors(const_cast<Params<S>&>(p), [&](const std::string& name, auto& t, bool decay) {
        f(name, static_cast<const std::remove_reference_t<decltype(t)>&>(t), decay);
    });
}

template <class S>
std::size_t parameter_count(const Params<S>& p) {
    std::size_t n = 0;
    visit_tensors(p, [&](const std::string&, const auto& t, bool) {
        n += static_cast<std::size_t>(t.size());
    });
    return n;
}

// Allocates every tensor at its configured shape, contents unspecified.
template <class S>
Params<S> alloc_params(const ModelConfig& config) {
    config.validate();
    Params<S> p;
    p.config = config;
    const int d = config.d_model;
    p.tok_emb.resize(config.vocab, d);
    p.pos_emb.resize(config.max_seq, d);
    p.layers.resize(static_cast<std::size_t>(config.n_layers));
    for (auto& lp : p.layers) {
        lp.ln1_g.resize(d);
        lp.ln1_b.resize(d);
        lp.w_q.resize(d, d);
        lp.w_k.resize(d, d);
        lp.w_v.resize(d, d);
        lp.w_o.resize(d, d);
        lp.ln2_g.resize(d);
        lp.ln2_b.resize(d);
        lp.w_in.resize(d, config.d_mlp);
        lp.w_out.resize(config.d_mlp, d);
    }
    p.lnf_g.resize(d);
    p.lnf_b.resize(d);
    p.unembed.resize(d, config.vocab);
    return p;
}

// Deterministic init: N(0, 0.02) for embeddings and inner projections,
// the residual-writing matrices (W_o, W_out) scaled down by 1/sqrt(2L),
// LN scales one / offsets zero. Small init keeps the untrained loss at the
// uniform baseline ln(vocab).
template <class S>
Params<S> init_params(const ModelConfig& config) {
    Params<S> p = alloc_params<S>(config);
    Rng rng(derive_seed(config.seed, 0xC0DEBA5Eu));
    const double base_std = 0.02;
    const double resid_std = base_std / std::sqrt(2.0 * config.n_layers);
    visit_tensors(p, [&](const std::string& name, auto& t, bool decayable) {
        if (!decayable) {  // LayerNorm vectors
            if (name.ends_with("_g")) t.setOnes();
            else t.setZero();
            return;
        }
        const bool residual_writer = name.ends_with("w_o") || name.ends_with("w_out");
        const double std_dev = residual_writer ? resid_std : base_std;
        for (Eigen::Index i = 0; i < t.rows(); ++i)
            for (Eigen::Index j = 0; j < t.cols(); ++j)
                t(i, j) = static_cast<S>(rng.gaussian() * std_dev);
    });
    return p;
}

template <class T, class S>
Params<T> cast_params(const Params<S>& p) {
    Params<T> out;
    out.config = p.config;
    out.tok_emb = p.tok_emb.template cast<T>();
    out.pos_emb = p.pos_emb.template cast<T>();
    out.layers.resize(p.layers.size());
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const auto& a = p.layers[l];
        auto& b = out.layers[l];
        b.ln1_g = a.ln1_g.template cast<T>();
        b.ln1_b = a.ln1_b.template cast<T>();
        b.w_q = a.w_q.template cast<T>();
        b.w_k = a.w_k.template cast<T>();
        b.w_v = a.w_v.template cast<T>();
        b.w_o = a.w_o.template cast<T>();
        b.ln2_g = a.ln2_g.template cast<T>();
        b.ln2_b = a.ln2_b.template cast<T>();
        b.w_in = a.w_in.template cast<T>();
        b.w_out = a.w_out.template cast<T>();
    }
    out.lnf_g = p.lnf_g.template cast<T>();
    out.lnf_b = p.lnf_b.template cast<T>();
    out.unembed = p.unembed.template cast<T>();
    return out;
}

// ---------------------------------------------------------------------------
// Capture & intervention

struct CaptureSpec {
    bool resid_post = false;    // layers 0..L
    bool resid_mid = false;     // layers 1..L
    bool attn_probs = false;    // (layer, head), T x T lower-triangular
    bool head_out = false;      // (layer, head), T x d_model
    bool mlp_post_act = false;  // layers 1..L, T x d_mlp
    bool mlp_out = false;       // layers 1..L, T x d_model

    static CaptureSpec none() { return {}; }
    static CaptureSpec all() {
        CaptureSpec c;
        c.resid_post = c.resid_mid = c.attn_probs = c.head_out = c.mlp_post_act = c.mlp_out = true;
        return c;
    }
};

template <class S>
struct ActivationSet {
    // resid_post[l], l in 0..L; others indexed by 1-based layer via helpers.
    std::vector<Mat<S>> resid_post_;
    std::vector<Mat<S>> resid_mid_;        // [l-1]
    std::vector<std::vector<Mat<S>>> attn_probs_;  // [l-1][h]
    std::vector<std::vector<Mat<S>>> head_out_;    // [l-1][h]
    std::vector<Mat<S>> mlp_post_act_;     // [l-1]
    std::vector<Mat<S>> mlp_out_;          // [l-1]

    const Mat<S>& resid_post(int l) const { return resid_post_[static_cast<std::size_t>(l)]; }
    const Mat<S>& resid_mid(int l) const { return resid_mid_[static_cast<std::size_t>(l - 1)]; }
    const Mat<S>& attn_probs(int l, int h) const {
        return attn_probs_[static_cast<std::size_t>(l - 1)][static_cast<std::size_t>(h)];
    }
    const Mat<S>& head_out(int l, int h) const {
        return head_out_[static_cast<std::size_t>(l - 1)][static_cast<std::size_t>(h)];
    }
    const Mat<S>& mlp_post_act(int l) const { return mlp_post_act_[static_cast<std::size_t>(l - 1)]; }
    const Mat<S>& mlp_out(int l) const { return mlp_out_[static_cast<std::size_t>(l - 1)]; }
};

// Surgical edits applied inside a forward pass. All layer indices follow the
// site naming above (residual patches address resid_post(l), l in 0..L-1
// for "resume from l+1"; head/neuron patches address block l in 1..L).
template <class S>
struct Intervention {
    struct ResidualPatch {
        int layer = 0;  // resid_post(layer) is overwritten at pos
        int pos = 0;
        Vec<S> value;  // d_model
    };
    struct HeadPatch {
        int layer = 1;  // block whose head output is replaced at pos
        int head = 0;
        int pos = 0;
        Vec<S> value;  // d_model, replaces head_out(layer,head) row
    };
    struct NeuronPatch {
        int layer = 1;  // block whose mlp_post_act entries are overwritten
        int pos = 0;
        std::vector<std::pair<int, S>> values;  // (neuron, replacement)
    };
    std::vector<ResidualPatch> residual;
    std::vector<HeadPatch> heads;
    std::vector<NeuronPatch> neurons;

    bool empty() const { return residual.empty() && heads.empty() && neurons.empty(); }
};

// ---------------------------------------------------------------------------
// Forward

namespace detail {

template <class S>
struct LnCache {
    Mat<S> x_hat;     // T x d, normalized pre-scale
    Vec<S> inv_std;   // T
};

template <class S>
void layer_norm(const Mat<S>& x, const Vec<S>& g, const Vec<S>& b, S eps, Mat<S>& y, LnCache<S>* cache) {
    const Eigen::Index t_len = x.rows(), d = x.cols();
    y.resize(t_len, d);
    if (cache) {
        cache->x_hat.resize(t_len, d);
        cache->inv_std.resize(t_len);
    }
    for (Eigen::Index t = 0; t < t_len; ++t) {
        const S mu = x.row(t).mean();
        const auto centered = (x.row(t).array() - mu).eval();
        const S var = centered.square().mean();
        const S inv_std = S(1) / std::sqrt(var + eps);
        const auto x_hat = (centered * inv_std).eval();
        y.row(t) = ((x_hat * g.transpose().array()) + b.transpose().array()).matrix();
        if (cache) {
            cache->x_hat.row(t) = x_hat.matrix();
            cache->inv_std(t) = inv_std;
        }
    }
}

template <class S>
void layer_norm_backward(const Mat<S>& dy, const LnCache<S>& cache, const Vec<S>& g, Mat<S>& dx,
                         Vec<S>& dg, Vec<S>& db) {
    const Eigen::Index t_len = dy.rows(), d = dy.cols();
    dx.resize(t_len, d);
    for (Eigen::Index t = 0; t < t_len; ++t) {
        const auto dyg = (dy.row(t).array() * g.transpose().array()).eval();
        const S m1 = dyg.mean();
        const S m2 = (dyg * cache.x_hat.row(t).array()).mean();
        dx.row(t) =
            (cache.inv_std(t) * (dyg - m1 - cache.x_hat.row(t).array() * m2)).matrix();
        dg.array() += (dy.row(t).array() * cache.x_hat.row(t).array()).transpose();
        db.array() += dy.row(t).array().transpose();
    }
}

}  // namespace detail

template <class S>
struct LayerCache {
    detail::LnCache<S> ln1;
    Mat<S> ln1_out;                 // T x d
    Mat<S> q, k, v;                 // T x d
    std::vector<Mat<S>> probs;      // per head, T x T
    Mat<S> z;                       // T x d (heads concatenated, pre-W_o)
    Mat<S> resid_mid;               // T x d
    detail::LnCache<S> ln2;
    Mat<S> ln2_out;                 // T x d
    Mat<S> mlp_pre;                 // T x d_mlp
    Mat<S> mlp_act;                 // T x d_mlp
    Mat<S> resid_post;              // T x d
};

template <class S>
struct ForwardResult {
    Mat<S> logits;  // T x vocab
    ActivationSet<S> acts;
    // retained for backward and for analyses that need LN internals
    Mat<S> x0;  // embedding output
    std::vector<LayerCache<S>> layer_cache;
    detail::LnCache<S> lnf;
    Mat<S> lnf_out;
};

// Runs the model over one sequence. `keep_cache` retains per-layer buffers
// (needed by backward); capture copies the requested sites into `acts`.
template <class S>
ForwardResult<S> forward(const Params<S>& p, const std::vector<TokenId>& tokens,
                         const CaptureSpec& capture = CaptureSpec::none(),
                         const Intervention<S>& intervention = {}, bool keep_cache = false) {
    const ModelConfig& cfg = p.config;
    const int t_len = static_cast<int>(tokens.size());
    if (t_len == 0) throw ConfigError("empty token sequence");
    if (t_len > cfg.max_seq)
        throw ConfigError("sequence length " + std::to_string(t_len) + " exceeds max_seq " +
                          std::to_string(cfg.max_seq));
    for (TokenId t : tokens)
        if (t >= cfg.vocab) throw ConfigError("token id " + std::to_string(t) + " out of range");

    const int d = cfg.d_model, heads = cfg.n_heads, dh = cfg.head_dim();
    const S scale = S(1) / std::sqrt(static_cast<S>(dh));

    ForwardResult<S> res;
    if (capture.resid_post) res.acts.resid_post_.reserve(static_cast<std::size_t>(cfg.n_layers) + 1);
    if (capture.resid_mid) res.acts.resid_mid_.resize(static_cast<std::size_t>(cfg.n_layers));
    if (capture.attn_probs) res.acts.attn_probs_.resize(static_cast<std::size_t>(cfg.n_layers));
    if (capture.head_out) res.acts.head_out_.resize(static_cast<std::size_t>(cfg.n_layers));
    if (capture.mlp_post_act) res.acts.mlp_post_act_.resize(static_cast<std::size_t>(cfg.n_layers));
    if (capture.mlp_out) res.acts.mlp_out_.resize(static_cast<std::size_t>(cfg.n_layers));

    Mat<S> x(t_len, d);
    for (int t = 0; t < t_len; ++t)
        x.row(t) = p.tok_emb.row(tokens[static_cast<std::size_t>(t)]) + p.pos_emb.row(t);

    auto apply_residual_patches = [&](int layer_idx, Mat<S>& resid) {
        for (const auto& rp : intervention.residual)
            if (rp.layer == layer_idx) resid.row(rp.pos) = rp.value.transpose();
    };
    apply_residual_patches(0, x);
    res.x0 = x;
    if (capture.resid_post) res.acts.resid_post_.push_back(x);

    res.layer_cache.resize(keep_cache ? static_cast<std::size_t>(cfg.n_layers) : 0);
    for (int l = 0; l < cfg.n_layers; ++l) {
        const auto& lp = p.layers[static_cast<std::size_t>(l)];
        LayerCache<S> local;
        LayerCache<S>& cache = keep_cache ? res.layer_cache[static_cast<std::size_t>(l)] : local;

        detail::layer_norm(x, lp.ln1_g, lp.ln1_b, static_cast<S>(cfg.ln_eps), cache.ln1_out,
                           keep_cache ? &cache.ln1 : nullptr);
        cache.q = cache.ln1_out * lp.w_q;
        cache.k = cache.ln1_out * lp.w_k;
        cache.v = cache.ln1_out * lp.w_v;

        cache.z.resize(t_len, d);
        if (keep_cache) cache.probs.resize(static_cast<std::size_t>(heads));
        if (capture.attn_probs)
            res.acts.attn_probs_[static_cast<std::size_t>(l)].resize(static_cast<std::size_t>(heads));
        if (capture.head_out)
            res.acts.head_out_[static_cast<std::size_t>(l)].resize(static_cast<std::size_t>(heads));

        for (int h = 0; h < heads; ++h) {
            const auto qh = cache.q.middleCols(h * dh, dh);
            const auto kh = cache.k.middleCols(h * dh, dh);
            const auto vh = cache.v.middleCols(h * dh, dh);
            Mat<S> probs(t_len, t_len);
            probs.setZero();
            for (int ti = 0; ti < t_len; ++ti) {
                // causal row: keys 0..ti only
                Eigen::Matrix<S, 1, Eigen::Dynamic> row =
                    (qh.row(ti) * kh.topRows(ti + 1).transpose()) * scale;
                const S mx = row.maxCoeff();
                row = (row.array() - mx).exp().matrix();
                row /= row.sum();
                probs.row(ti).head(ti + 1) = row;
            }
            cache.z.middleCols(h * dh, dh) = probs * vh;
            if (keep_cache) cache.probs[static_cast<std::size_t>(h)] = probs;
            if (capture.attn_probs)
                res.acts.attn_probs_[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)] =
                    std::move(probs);
        }

        Mat<S> attn_out = cache.z * lp.w_o;
        if (capture.head_out) {
            for (int h = 0; h < heads; ++h)
                res.acts.head_out_[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)] =
                    cache.z.middleCols(h * dh, dh) * lp.w_o.middleRows(h * dh, dh);
        }
        for (const auto& hp : intervention.heads) {
            if (hp.layer != l + 1) continue;
            // the capture path evaluates this product through assignment, and
            // construct- vs assign-form products can differ in the last ulp;
            // mirror the form so a head patched with its own captured output
            // cancels bit-exactly
            Mat<S> slice;
            slice = cache.z.middleCols(hp.head * dh, dh) * lp.w_o.middleRows(hp.head * dh, dh);
            attn_out.row(hp.pos) += hp.value.transpose() - slice.row(hp.pos);
            if (capture.head_out)
                res.acts.head_out_[static_cast<std::size_t>(l)][static_cast<std::size_t>(hp.head)]
                    .row(hp.pos) = hp.value.transpose();
        }

        cache.resid_mid = x + attn_out;
        if (capture.resid_mid) res.acts.resid_mid_[static_cast<std::size_t>(l)] = cache.resid_mid;

        detail::layer_norm(cache.resid_mid, lp.ln2_g, lp.ln2_b, static_cast<S>(cfg.ln_eps),
                           cache.ln2_out, keep_cache ? &cache.ln2 : nullptr);
        cache.mlp_pre = cache.ln2_out * lp.w_in;
        cache.mlp_act = cache.mlp_pre.unaryExpr([](S v) { return gelu(v); });
        for (const auto& np : intervention.neurons) {
            if (np.layer != l + 1) continue;
            for (const auto& [neuron, value] : np.values) cache.mlp_act(np.pos, neuron) = value;
        }
        if (capture.mlp_post_act)
            res.acts.mlp_post_act_[static_cast<std::size_t>(l)] = cache.mlp_act;

        Mat<S> mlp_out = cache.mlp_act * lp.w_out;
        if (capture.mlp_out) res.acts.mlp_out_[static_cast<std::size_t>(l)] = mlp_out;

        cache.resid_post = cache.resid_mid + mlp_out;
        apply_residual_patches(l + 1, cache.resid_post);
        if (capture.resid_post) res.acts.resid_post_.push_back(cache.resid_post);
        x = cache.resid_post;
    }

    detail::layer_norm(x, p.lnf_g, p.lnf_b, static_cast<S>(cfg.ln_eps), res.lnf_out,
                       keep_cache ? &res.lnf : nullptr);
    res.logits = res.lnf_out * p.unembed;
    if (!keep_cache) res.layer_cache.clear();
    return res;
}

// ---------------------------------------------------------------------------
// Backward (next-token cross-entropy on masked positions)

template <class S>
struct Grads {
    Params<S> p;  // same shapes, gradient values

    explicit Grads(const ModelConfig& cfg) : p(alloc_params<S>(cfg)) { zero(); }
    void zero() {
        visit_tensors(p, [](const std::string&, auto& t, bool) { t.setZero(); });
    }
};

// Positions carrying supervision for one sequence: predict tokens strictly
// after CluesEnd. Position t is supervised iff target t+1 exists, is not
// Pad, and t+1 > clues_end index (clue tokens and CluesEnd itself are
// unsupervised inputs). A sequence without CluesEnd yields no supervision.
inline std::vector<int> supervised_positions(const std::vector<TokenId>& tokens) {
    int clues_end = -1;
    for (std::size_t i = 0; i < tokens.size(); ++i)
        if (tokens[i] == kTokCluesEnd) {
            clues_end = static_cast<int>(i);
            break;
        }
    std::vector<int> out;
    if (clues_end < 0) return out;
    for (int t = clues_end; t + 1 < static_cast<int>(tokens.size()); ++t)
        if (tokens[static_cast<std::size_t>(t + 1)] != kTokPad) out.push_back(t);
    return out;
}

// Cross-entropy over the given positions; returns summed loss and the count,
// and accumulates parameter gradients of the *sum* into `grads` (caller
// normalizes by the global supervised count for batch-mean loss).
template <class S>
S backward(const Params<S>& p, const std::vector<TokenId>& tokens, const ForwardResult<S>& fwd,
           const std::vector<int>& positions, Grads<S>& grads) {
    const ModelConfig& cfg = p.config;
    const int t_len = static_cast<int>(tokens.size());
    const int d = cfg.d_model, heads = cfg.n_heads, dh = cfg.head_dim();
    const S scale = S(1) / std::sqrt(static_cast<S>(dh));

    // dlogits: softmax - onehot at supervised positions
    Mat<S> dlogits(t_len, cfg.vocab);
    dlogits.setZero();
    S loss_sum = 0;
    for (int pos : positions) {
        const auto row = fwd.logits.row(pos);
        const S mx = row.maxCoeff();
        Eigen::Matrix<S, 1, Eigen::Dynamic> e = (row.array() - mx).exp();
        const S z = e.sum();
        const TokenId target = tokens[static_cast<std::size_t>(pos) + 1];
        loss_sum += std::log(z) - (row(target) - mx);
        dlogits.row(pos) = e / z;
        dlogits(pos, target) -= S(1);
    }

    // unembedding and final LN
    grads.p.unembed.noalias() += fwd.lnf_out.transpose() * dlogits;
    Mat<S> d_lnf_out = dlogits * p.unembed.transpose();
    Mat<S> dx;
    detail::layer_norm_backward(d_lnf_out, fwd.lnf, p.lnf_g, dx, grads.p.lnf_g, grads.p.lnf_b);

    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        const auto& lp = p.layers[static_cast<std::size_t>(l)];
        auto& gl = grads.p.layers[static_cast<std::size_t>(l)];
        const auto& cache = fwd.layer_cache[static_cast<std::size_t>(l)];

        // MLP branch: resid_post = resid_mid + gelu(ln2(resid_mid) W_in) W_out
        Mat<S> d_mlp_out = dx;  // gradient flows into both branch and skip
        gl.w_out.noalias() += cache.mlp_act.transpose() * d_mlp_out;
        Mat<S> d_act = d_mlp_out * lp.w_out.transpose();
        Mat<S> d_pre =
            (d_act.array() * cache.mlp_pre.unaryExpr([](S v) { return gelu_grad(v); }).array())
                .matrix();
        gl.w_in.noalias() += cache.ln2_out.transpose() * d_pre;
        Mat<S> d_ln2_out = d_pre * lp.w_in.transpose();
        Mat<S> d_resid_mid;
        detail::layer_norm_backward(d_ln2_out, cache.ln2, lp.ln2_g, d_resid_mid, gl.ln2_g, gl.ln2_b);
        d_resid_mid += dx;  // skip connection

        // Attention branch: resid_mid = x + z W_o
        Mat<S> d_attn_out = d_resid_mid;
        gl.w_o.noalias() += cache.z.transpose() * d_attn_out;
        Mat<S> dz = d_attn_out * lp.w_o.transpose();

        Mat<S> dq(t_len, d), dk(t_len, d), dv(t_len, d);
        dq.setZero();
        dk.setZero();
        dv.setZero();
        for (int h = 0; h < heads; ++h) {
            const auto qh = cache.q.middleCols(h * dh, dh);
            const auto kh = cache.k.middleCols(h * dh, dh);
            const auto vh = cache.v.middleCols(h * dh, dh);
            const auto& probs = cache.probs[static_cast<std::size_t>(h)];
            const auto dzh = dz.middleCols(h * dh, dh);

            dv.middleCols(h * dh, dh).noalias() = probs.transpose() * dzh;
            Mat<S> dprobs = dzh * vh.transpose();  // T x T
            // softmax backward per causal row, then score gradient; rows are
            // zeroed beyond the causal width (the product above fills them)
            for (int ti = 0; ti < t_len; ++ti) {
                const int n = ti + 1;
                const auto prow = probs.row(ti).head(n).eval();
                const auto draw = dprobs.row(ti).head(n).eval();
                const S dot = (draw.array() * prow.array()).sum();
                dprobs.row(ti).head(n) =
                    ((prow.array() * (draw.array() - dot)) * scale).matrix();
                if (n < t_len) dprobs.row(ti).tail(t_len - n).setZero();
            }
            for (int ti = 0; ti < t_len; ++ti) {
                const int n = ti + 1;
                dq.row(ti).segment(h * dh, dh).noalias() +=
                    dprobs.row(ti).head(n) * kh.topRows(n);
            }
            dk.middleCols(h * dh, dh).noalias() += dprobs.transpose() * qh;
            // rows of dprobs beyond causal width are zero, so the full
            // product only picks up the masked-in entries
        }

        gl.w_q.noalias() += cache.ln1_out.transpose() * dq;
        gl.w_k.noalias() += cache.ln1_out.transpose() * dk;
        gl.w_v.noalias() += cache.ln1_out.transpose() * dv;
        Mat<S> d_ln1_out = dq * lp.w_q.transpose() + dk * lp.w_k.transpose() + dv * lp.w_v.transpose();
        Mat<S> d_x_pre;
        detail::layer_norm_backward(d_ln1_out, cache.ln1, lp.ln1_g, d_x_pre, gl.ln1_g, gl.ln1_b);
        dx = d_resid_mid + d_x_pre;
    }

    // embeddings
    for (int t = 0; t < t_len; ++t) {
        grads.p.tok_emb.row(tokens[static_cast<std::size_t>(t)]) += dx.row(t);
        grads.p.pos_emb.row(t) += dx.row(t);
    }
    return loss_sum;
}

}  // namespace mechlab
