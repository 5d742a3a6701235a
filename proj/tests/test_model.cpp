#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <string>
#include <vector>

#include "mechlab/model.hpp"
#include "mechlab/rng.hpp"
#include "mechlab/tracegen.hpp"
#include "support/fixtures.hpp"

using namespace mechlab;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_model = 16;
    cfg.d_mlp = 32;
    cfg.max_seq = 16;
    cfg.seed = 11;
    return cfg;
}

// Clue section, CluesEnd, then body-ish tokens; content is arbitrary for the
// numerics tests, only positions/ids matter.
std::vector<TokenId> tiny_sequence() {
    return {5,        100,      kTokCluesEnd, 200,        kTokPush,
            300,      kTokPop,  400,          kTokSuccess};
}

// Summed next-token cross-entropy at the supervised positions, computed from
// logits alone (independent of backward()).
template <class S>
double loss_of(const Params<S>& p, const std::vector<TokenId>& tokens) {
    const auto fwd = forward(p, tokens);
    const auto positions = supervised_positions(tokens);
    double loss = 0;
    for (int pos : positions) {
        const auto row = fwd.logits.row(pos);
        const S mx = row.maxCoeff();
        double z = 0;
        for (Eigen::Index v = 0; v < row.size(); ++v) z += std::exp(double(row(v) - mx));
        loss += std::log(z) - double(row(tokens[std::size_t(pos) + 1]) - mx);
    }
    return loss;
}

}  // namespace

TEST_CASE("config validation rejects bad shapes") {
    ModelConfig cfg = tiny_config();
    cfg.d_model = 18;
    cfg.n_heads = 4;  // 18 % 4 != 0
    REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_config();
    cfg.n_layers = 0;
    REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
    REQUIRE_NOTHROW(tiny_config().validate());
    REQUIRE(ModelConfig::paper().head_dim() == 72);
    REQUIRE(ModelConfig::desk().head_dim() == 32);
}

TEST_CASE("parameter counts match hand computation") {
    // vocab*d + max_seq*d + L*(2d + 4d^2 + 2d + 2*d*d_mlp) + 2d + d*vocab
    const auto paper = init_params<float>(ModelConfig::paper());
    REQUIRE(parameter_count(paper) == 43476480u);
    const auto desk = init_params<float>(ModelConfig::desk());
    REQUIRE(parameter_count(desk) == 1270784u);
}

TEST_CASE("init is deterministic in the seed") {
    const auto a = init_params<float>(tiny_config());
    const auto b = init_params<float>(tiny_config());
    ModelConfig other = tiny_config();
    other.seed = 12;
    const auto c = init_params<float>(other);

    auto flatten = [](const Params<float>& p) {
        std::vector<float> out;
        visit_tensors(p, [&](const std::string&, const auto& t, bool) {
            out.insert(out.end(), t.data(), t.data() + t.size());
        });
        return out;
    };
    REQUIRE(flatten(a) == flatten(b));
    REQUIRE(flatten(a) != flatten(c));

    // LayerNorm starts as identity, biases at zero
    REQUIRE(a.layers[0].ln1_g.minCoeff() == 1.0f);
    REQUIRE(a.layers[0].ln1_g.maxCoeff() == 1.0f);
    REQUIRE(a.lnf_b.cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("forward rejects malformed input") {
    const auto p = init_params<float>(tiny_config());
    REQUIRE_THROWS_AS(forward(p, {}), ConfigError);
    REQUIRE_THROWS_AS(forward(p, std::vector<TokenId>(17, 3)), ConfigError);
    REQUIRE_THROWS_AS(forward(p, {static_cast<TokenId>(kVocabSize)}), ConfigError);
}

TEST_CASE("attention rows are causal probability distributions") {
    const auto p = init_params<float>(tiny_config());
    const auto tokens = tiny_sequence();
    CaptureSpec cap;
    cap.attn_probs = true;
    const auto fwd = forward(p, tokens, cap);
    const int t_len = static_cast<int>(tokens.size());
    for (int l = 1; l <= p.config.n_layers; ++l) {
        for (int h = 0; h < p.config.n_heads; ++h) {
            const auto& probs = fwd.acts.attn_probs(l, h);
            REQUIRE(probs.rows() == t_len);
            for (int t = 0; t < t_len; ++t) {
                REQUIRE_THAT(double(probs.row(t).head(t + 1).sum()),
                             Catch::Matchers::WithinAbs(1.0, 1e-5));
                REQUIRE(double(probs.row(t).minCoeff()) >= 0.0);
                for (int u = t + 1; u < t_len; ++u) REQUIRE(probs(t, u) == 0.0f);
            }
        }
    }
}

TEST_CASE("captured sites satisfy the residual stream identities") {
    const auto p = init_params<float>(tiny_config());
    const auto tokens = tiny_sequence();
    const auto fwd = forward(p, tokens, CaptureSpec::all());

    for (int l = 1; l <= p.config.n_layers; ++l) {
        // resid_mid(l) = resid_post(l-1) + sum_h head_out(l,h)
        MatF attn = fwd.acts.head_out(l, 0);
        for (int h = 1; h < p.config.n_heads; ++h) attn += fwd.acts.head_out(l, h);
        const MatF mid = fwd.acts.resid_post(l - 1) + attn;
        REQUIRE(double((mid - fwd.acts.resid_mid(l)).cwiseAbs().maxCoeff()) < 1e-5);

        // resid_post(l) = resid_mid(l) + mlp_out(l)
        const MatF post = fwd.acts.resid_mid(l) + fwd.acts.mlp_out(l);
        REQUIRE(double((post - fwd.acts.resid_post(l)).cwiseAbs().maxCoeff()) < 1e-5);
    }
    // resid_post(0) is the embedding output
    REQUIRE((fwd.acts.resid_post(0) - fwd.x0).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("capture does not perturb the computation") {
    const auto p = init_params<float>(tiny_config());
    const auto tokens = tiny_sequence();
    const auto plain = forward(p, tokens);
    const auto full = forward(p, tokens, CaptureSpec::all(), {}, true);
    REQUIRE((plain.logits - full.logits).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("logits are causal in the input tokens") {
    const auto p = init_params<float>(tiny_config());
    auto tokens = tiny_sequence();
    const auto base = forward(p, tokens);
    const int j = 5;
    tokens[j] = 600;  // perturb one position
    const auto mod = forward(p, tokens);
    for (int t = 0; t < j; ++t)
        REQUIRE((base.logits.row(t) - mod.logits.row(t)).cwiseAbs().maxCoeff() == 0.0f);
    REQUIRE((base.logits.row(j) - mod.logits.row(j)).cwiseAbs().maxCoeff() > 0.0f);
}

TEST_CASE("supervised positions start at CluesEnd and skip pad targets") {
    std::vector<TokenId> toks = {5, 100, kTokCluesEnd, 200, 300, kTokSuccess, kTokPad, kTokPad};
    // predictable positions: 2 -> 200, 3 -> 300, 4 -> Success; 5..6 target Pad
    REQUIRE(supervised_positions(toks) == std::vector<int>{2, 3, 4});
    REQUIRE(supervised_positions({5, 100, 200}).empty());  // no CluesEnd
    REQUIRE(supervised_positions({kTokCluesEnd}).empty());
}

TEST_CASE("untrained loss sits at the uniform baseline") {
    auto corpus = fixtures::make_corpus({.count = 2, .seed = 404, .hard_fraction = 0.0});
    Rng rng(7);
    const auto trace = generate_trace(parse_grid(corpus[0].puzzle), rng);
    REQUIRE(trace.size() <= 250);

    const auto p = init_params<float>(ModelConfig::desk());
    const auto positions = supervised_positions(trace);
    REQUIRE(positions.size() > 10);
    const double mean_loss = loss_of(p, trace) / double(positions.size());
    REQUIRE_THAT(mean_loss, Catch::Matchers::WithinAbs(std::log(double(kVocabSize)), 0.1));
}

TEST_CASE("analytic gradients match central finite differences") {
    const ModelConfig cfg = tiny_config();
    auto p = init_params<double>(cfg);
    const auto tokens = tiny_sequence();
    const auto positions = supervised_positions(tokens);
    REQUIRE(positions.size() == 6);

    Grads<double> grads(cfg);
    const auto fwd = forward(p, tokens, CaptureSpec::none(), {}, true);
    const double loss0 = backward(p, tokens, fwd, positions, grads);
    REQUIRE_THAT(loss_of(p, tokens), Catch::Matchers::WithinRel(loss0, 1e-10));

    const double eps = 1e-3;
    Rng pick(2026);

    // walk params and grads in lockstep; sample entries per tensor
    struct Slot {
        std::string name;
        double* pw;
        const double* gw;
        Eigen::Index n;
    };
    std::vector<Slot> slots;
    {
        std::vector<std::pair<std::string, double*>> ps;
        visit_tensors(p, [&](const std::string& name, auto& t, bool) {
            ps.emplace_back(name, t.data());
        });
        std::size_t i = 0;
        visit_tensors(grads.p, [&](const std::string& name, auto& t, bool) {
            REQUIRE(ps[i].first == name);
            slots.push_back({name, ps[i].second, t.data(), t.size()});
            ++i;
        });
    }

    for (const auto& slot : slots) {
        double worst = 0;
        const int samples = slot.n < 8 ? static_cast<int>(slot.n) : 8;
        for (int s = 0; s < samples; ++s) {
            const auto i = static_cast<Eigen::Index>(pick.bounded(std::uint64_t(slot.n)));
            const double keep = slot.pw[i];
            slot.pw[i] = keep + eps;
            const double lp = loss_of(p, tokens);
            slot.pw[i] = keep - eps;
            const double lm = loss_of(p, tokens);
            slot.pw[i] = keep;
            const double fd = (lp - lm) / (2 * eps);
            const double a = slot.gw[i];
            const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-4});
            worst = std::max(worst, rel);
        }
        INFO(slot.name << " worst relative error " << worst);
        REQUIRE(worst < 1e-4);
    }

    // embeddings of tokens actually used must carry nonzero gradient
    double used_norm = 0;
    for (TokenId t : tokens) used_norm += grads.p.tok_emb.row(t).cwiseAbs().sum();
    REQUIRE(used_norm > 0);
}

TEST_CASE("self-valued interventions are no-ops") {
    const auto p = init_params<float>(tiny_config());
    const auto tokens = tiny_sequence();
    const auto clean = forward(p, tokens, CaptureSpec::all());

    SECTION("residual patch with the clean row") {
        Intervention<float> iv;
        iv.residual.push_back({1, 4, clean.acts.resid_post(1).row(4).transpose()});
        const auto patched = forward(p, tokens, CaptureSpec::none(), iv);
        REQUIRE((patched.logits - clean.logits).cwiseAbs().maxCoeff() == 0.0f);
    }
    SECTION("head patch with the clean head output") {
        Intervention<float> iv;
        iv.heads.push_back({2, 1, 5, clean.acts.head_out(2, 1).row(5).transpose()});
        const auto patched = forward(p, tokens, CaptureSpec::none(), iv);
        REQUIRE(double((patched.logits - clean.logits).cwiseAbs().maxCoeff()) < 1e-4);
    }
    SECTION("neuron patch with the clean activations") {
        Intervention<float> iv;
        typename Intervention<float>::NeuronPatch np;
        np.layer = 1;
        np.pos = 3;
        for (int n = 0; n < 5; ++n) np.values.emplace_back(n, clean.acts.mlp_post_act(1)(3, n));
        iv.neurons.push_back(np);
        const auto patched = forward(p, tokens, CaptureSpec::none(), iv);
        REQUIRE((patched.logits - clean.logits).cwiseAbs().maxCoeff() == 0.0f);
    }
}

TEST_CASE("interventions change only causally downstream logits") {
    const auto p = init_params<float>(tiny_config());
    const auto tokens = tiny_sequence();
    const auto clean = forward(p, tokens);

    Intervention<float> iv;
    VecF v(p.config.d_model);
    v.setConstant(0.5f);
    iv.residual.push_back({1, 4, v});
    const auto patched = forward(p, tokens, CaptureSpec::none(), iv);

    for (int t = 0; t < 4; ++t)
        REQUIRE((patched.logits.row(t) - clean.logits.row(t)).cwiseAbs().maxCoeff() == 0.0f);
    REQUIRE((patched.logits.row(4) - clean.logits.row(4)).cwiseAbs().maxCoeff() > 0.0f);

    SECTION("embedding-level patch addresses layer 0") {
        Intervention<float> iv0;
        iv0.residual.push_back({0, 2, v});
        const auto p0 = forward(p, tokens, CaptureSpec::none(), iv0);
        REQUIRE((p0.logits.row(1) - clean.logits.row(1)).cwiseAbs().maxCoeff() == 0.0f);
        REQUIRE((p0.logits.row(2) - clean.logits.row(2)).cwiseAbs().maxCoeff() > 0.0f);
    }
}
