#pragma once

// AdamW training loop over solving traces. Sequences run through the model
// one at a time with gradient accumulation (a batch never materializes a
// B x T x T attention tensor), and everything is sequential and seeded, so
// two runs with the same config are bit-identical.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <ostream>
#include <vector>

#include "mechlab/dataset.hpp"
#include "mechlab/errors.hpp"
#include "mechlab/model.hpp"
#include "mechlab/rng.hpp"

namespace mechlab {

struct TrainConfig {
    int batch_size = 16;
    int max_steps = 200;
    double lr = 1e-3;
    double weight_decay = 0.1;  // decoupled, matrices only
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t warmup_tokens = 100000;  // linear warmup, measured in tokens fed
    std::uint64_t total_tokens = 0;        // cosine horizon; 0 = estimate from max_steps
    std::uint64_t seed = 0;
    int log_every = 10;
    double target_loss = 0.0;  // >0: stop once the step loss drops below

    void validate() const {
        if (batch_size < 1 || max_steps < 1) throw ConfigError("batch_size and max_steps must be >= 1");
        if (lr <= 0) throw ConfigError("learning rate must be positive");
        if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
            throw ConfigError("adam betas must lie in [0, 1)");
    }
};

struct StepMetrics {
    int step = 0;
    std::uint64_t tokens_seen = 0;
    double lr = 0.0;
    double loss = 0.0;
};

struct TrainResult {
    std::vector<StepMetrics> metrics;  // every log_every steps plus the last
    int steps = 0;
    std::uint64_t tokens_seen = 0;
    double final_loss = 0.0;
    bool stopped_early = false;
};

// Linear warmup to lr_max over `warmup` tokens, then cosine decay to zero at
// `total` tokens (flat if no horizon extends past warmup).
inline double lr_schedule(double lr_max, std::uint64_t tokens, std::uint64_t warmup,
                          std::uint64_t total) {
    if (warmup > 0 && tokens < warmup)
        return lr_max * static_cast<double>(tokens) / static_cast<double>(warmup);
    if (total <= warmup) return lr_max;
    double frac = static_cast<double>(tokens - warmup) / static_cast<double>(total - warmup);
    if (frac > 1.0) frac = 1.0;
    return lr_max * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

class AdamW {
public:
    AdamW(const ModelConfig& cfg, const TrainConfig& tc)
        : m_(cfg), v_(cfg), beta1_(tc.beta1), beta2_(tc.beta2), eps_(tc.adam_eps),
          weight_decay_(tc.weight_decay) {}

    // One decoupled-decay update; `grads` holds the batch-mean gradient.
    void step(Params<float>& params, const Grads<float>& grads, double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        const auto pv = views(params), gv = views(const_cast<Params<float>&>(grads.p));
        const auto mv = views(m_.p), vv = views(v_.p);
        for (std::size_t ti = 0; ti < pv.size(); ++ti) {
            float* w = pv[ti].data;
            const float* g = gv[ti].data;
            float* m = mv[ti].data;
            float* v = vv[ti].data;
            const double wd = pv[ti].decay ? weight_decay_ : 0.0;
            for (std::size_t i = 0; i < pv[ti].n; ++i) {
                const double gi = g[i];
                const double mi = beta1_ * m[i] + (1.0 - beta1_) * gi;
                const double vi = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
                m[i] = static_cast<float>(mi);
                v[i] = static_cast<float>(vi);
                const double update = (mi / bc1) / (std::sqrt(vi / bc2) + eps_) + wd * w[i];
                w[i] = static_cast<float>(w[i] - lr * update);
            }
        }
    }

    long steps_taken() const { return t_; }

private:
    struct View {
        float* data;
        std::size_t n;
        bool decay;
    };
    static std::vector<View> views(Params<float>& p) {
        std::vector<View> out;
        visit_tensors(p, [&](const std::string&, auto& t, bool decay) {
            out.push_back({t.data(), static_cast<std::size_t>(t.size()), decay});
        });
        return out;
    }

    Grads<float> m_, v_;
    double beta1_, beta2_, eps_, weight_decay_;
    long t_ = 0;
};

inline TrainResult train(Params<float>& params, const std::vector<TraceRecord>& records,
                         const TrainConfig& cfg, std::ostream* log = nullptr) {
    cfg.validate();
    if (records.empty()) throw ConfigError("training set is empty");
    const std::size_t max_seq = static_cast<std::size_t>(params.config.max_seq);

    std::uint64_t total_tokens = cfg.total_tokens;
    if (total_tokens == 0) {
        double mean_len = 0.0;
        for (const auto& r : records) mean_len += static_cast<double>(std::min(r.tokens.size(), max_seq));
        mean_len /= static_cast<double>(records.size());
        total_tokens =
            static_cast<std::uint64_t>(mean_len * cfg.batch_size * cfg.max_steps);
    }

    AdamW opt(params.config, cfg);
    Grads<float> grads(params.config);
    Rng order_rng(derive_seed(cfg.seed, 0x7261114eu));
    std::vector<std::uint32_t> order(records.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<std::uint32_t>(i);
    std::size_t cursor = order.size();  // forces a shuffle before the first batch

    TrainResult res;
    std::uint64_t tokens_seen = 0;
    std::vector<TokenId> seq;
    for (int step = 1; step <= cfg.max_steps; ++step) {
        grads.zero();
        double loss_sum = 0.0;
        long supervised = 0;
        std::uint64_t batch_tokens = 0;
        for (int b = 0; b < cfg.batch_size; ++b) {
            if (cursor >= order.size()) {
                order_rng.shuffle(order);
                cursor = 0;
            }
            const TraceRecord& rec = records[order[cursor++]];
            const std::size_t len = std::min(rec.tokens.size(), max_seq);
            seq.assign(rec.tokens.begin(), rec.tokens.begin() + static_cast<std::ptrdiff_t>(len));
            const auto positions = supervised_positions(seq);
            if (positions.empty()) continue;  // clue-only record, nothing to predict
            const auto fwd = forward(params, seq, CaptureSpec::none(), {}, /*keep_cache=*/true);
            loss_sum += backward(params, seq, fwd, positions, grads);
            supervised += static_cast<long>(positions.size());
            batch_tokens += len;
        }
        if (supervised == 0)
            throw ConfigError("training batch carries no supervised positions");
        const double loss = loss_sum / static_cast<double>(supervised);
        if (!std::isfinite(loss))
            throw NumericError("training loss diverged at step " + std::to_string(step));
        const float inv = 1.0f / static_cast<float>(supervised);
        visit_tensors(grads.p, [&](const std::string&, auto& t, bool) { t *= inv; });

        tokens_seen += batch_tokens;
        const double lr = lr_schedule(cfg.lr, tokens_seen, cfg.warmup_tokens, total_tokens);
        opt.step(params, grads, lr);

        res.steps = step;
        res.tokens_seen = tokens_seen;
        res.final_loss = loss;
        const bool hit_target = cfg.target_loss > 0 && loss < cfg.target_loss;
        if (step % cfg.log_every == 0 || step == cfg.max_steps || step == 1 || hit_target) {
            res.metrics.push_back({step, tokens_seen, lr, loss});
            if (log)
                (*log) << "step " << step << "  tokens " << tokens_seen << "  lr " << lr
                       << "  loss " << loss << "\n";
        }
        if (hit_target) {
            res.stopped_early = true;
            break;
        }
    }
    return res;
}

}  // namespace mechlab
