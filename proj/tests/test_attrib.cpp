#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "mechlab/attrib.hpp"
#include "mechlab/decode.hpp"
#include "mechlab/tracegen.hpp"
#include "support/fixtures.hpp"

using namespace mechlab;

namespace {

ModelConfig attrib_config() {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_model = 32;
    cfg.d_mlp = 64;
    cfg.max_seq = 160;
    cfg.seed = 402;
    return cfg;
}

struct AttribFixture {
    Params<float> params;
    Board board;
    std::vector<TokenId> seq;
    int pos;
    AttribFixture() : params(init_params<float>(attrib_config())) {
        const auto corpus = fixtures::make_corpus({.count = 1, .seed = 77});
        board = parse_grid(corpus[0].puzzle);
        Rng rng(4);
        seq = clue_prefix(board, rng);
        pos = static_cast<int>(seq.size()) - 1;
    }
};

struct TempDir {
    std::filesystem::path path;
    TempDir() {
        path = std::filesystem::temp_directory_path() /
               ("mechlab-attrib-" + std::to_string(std::rand()) + std::to_string(std::rand()));
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

}  // namespace

TEST_CASE("logit lens of the zero vector is the layer-norm bias path") {
    AttribFixture fx;
    fx.params.lnf_b = VecF::Constant(fx.params.config.d_model, 0.25f);
    const VecD lens = logit_lens(fx.params, VecD::Zero(fx.params.config.d_model));
    const VecD expect =
        fx.params.unembed.cast<double>().transpose() * fx.params.lnf_b.cast<double>();
    REQUIRE((lens - expect).cwiseAbs().maxCoeff() < 1e-12);
    REQUIRE_THROWS_AS(logit_lens(fx.params, VecD::Zero(3)), ConfigError);
}

TEST_CASE("logit lens at the final residual reproduces the model output") {
    AttribFixture fx;
    CaptureSpec cap;
    cap.resid_post = true;
    const auto run = forward(fx.params, fx.seq, cap);
    const VecD lens = logit_lens(
        fx.params,
        run.acts.resid_post(fx.params.config.n_layers).row(fx.pos).transpose().cast<double>());
    const VecD model = run.logits.row(fx.pos).transpose().cast<double>();
    REQUIRE((lens - model).cwiseAbs().maxCoeff() < 1e-5);
}

TEST_CASE("direct logit attribution sums to the lens of the final residual") {
    AttribFixture fx;
    const auto dla = dla_decompose(fx.params, fx.seq, fx.pos);
    const VecD total = dla.total();

    CaptureSpec cap;
    cap.resid_post = true;
    const auto run = forward(fx.params, fx.seq, cap);
    const VecD lens = logit_lens(
        fx.params,
        run.acts.resid_post(fx.params.config.n_layers).row(fx.pos).transpose().cast<double>());
    // mean removal is linear and 1/std is shared, so the split is exact in
    // double; only the float captures separate the two sides
    REQUIRE((total - lens).cwiseAbs().maxCoeff() < 1e-4);
    const VecD model = run.logits.row(fx.pos).transpose().cast<double>();
    REQUIRE((total - model).cwiseAbs().maxCoeff() < 2e-4);

    REQUIRE(dla.heads.size() == 2);
    REQUIRE(dla.heads[0].size() == 2);
    REQUIRE(dla.mlps.size() == 2);
}

TEST_CASE("frozen-norm projection recovers a planted orthogonal write") {
    AttribFixture fx;
    const int d = fx.params.config.d_model;
    fx.params.unembed.setZero();
    VecF u1 = VecF::Zero(d), u2 = VecF::Zero(d);
    u1(0) = 1.0f / std::sqrt(2.0f);
    u1(1) = -1.0f / std::sqrt(2.0f);  // zero-mean, unit norm
    u2(2) = 1.0f / std::sqrt(2.0f);
    u2(3) = -1.0f / std::sqrt(2.0f);
    const TokenId t1 = 100, t2 = 200;
    fx.params.unembed.col(t1) = u1;
    fx.params.unembed.col(t2) = u2;
    fx.params.lnf_g.setOnes();

    const double alpha = 3.5;
    const VecD component = alpha * u1.cast<double>();
    const VecD contrib = mechlab::detail::dla_project(fx.params, component, 1.0);
    REQUIRE_THAT(contrib(t1), Catch::Matchers::WithinAbs(alpha, 1e-6));
    REQUIRE_THAT(contrib(t2), Catch::Matchers::WithinAbs(0.0, 1e-9));
}

TEST_CASE("lens trace walks every residual site of the cell's digit tokens") {
    AttribFixture fx;
    const int cell = [&] {
        for (int c = 0; c < kGridCells; ++c)
            if (fx.board.empty_at(c)) return c;
        return 0;
    }();
    const MatD trace = logit_lens_trace(fx.params, fx.seq, fx.pos, cell);
    REQUIRE(trace.rows() == 2 * fx.params.config.n_layers + 1);
    REQUIRE(trace.cols() == 9);
    REQUIRE(lens_site_name(0) == "resid_post0");
    REQUIRE(lens_site_name(1) == "resid_mid1");
    REQUIRE(lens_site_name(2) == "resid_post1");
    REQUIRE(lens_site_name(4) == "resid_post2");

    // last row is the model's own output restricted to the cell's tokens
    const auto run = forward(fx.params, fx.seq);
    const int r = cell / 9 + 1, c = cell % 9 + 1;
    for (int d = 1; d <= 9; ++d)
        REQUIRE_THAT(trace(trace.rows() - 1, d - 1),
                     Catch::Matchers::WithinAbs(
                         static_cast<double>(run.logits(fx.pos, encode_placement(r, c, d))), 1e-5));
    REQUIRE(trace.allFinite());
}

TEST_CASE("attention grid conserves probability mass") {
    AttribFixture fx;
    const auto corpus = fixtures::make_corpus({.count = 3, .seed = 15});
    std::vector<std::vector<TokenId>> seqs;
    Rng rng(8);
    for (const auto& rec : corpus) seqs.push_back(clue_prefix(parse_grid(rec.puzzle), rng));

    for (int layer = 1; layer <= 2; ++layer)
        for (int head = 0; head < 2; ++head) {
            const auto ag = attention_grid(fx.params, seqs, layer, head);
            double total = ag.non_placement_mass;
            for (double x : ag.grid.v) {
                REQUIRE(x >= 0.0);
                REQUIRE(x <= 1.0);
                total += x;
            }
            REQUIRE_THAT(total, Catch::Matchers::WithinAbs(1.0, 1e-5));
            REQUIRE(ag.n == 3);
        }
}

TEST_CASE("attention grid puts a single clue's mass on its cell") {
    AttribFixture fx;
    const std::vector<TokenId> seq{encode_placement(5, 5, 7), kTokCluesEnd};
    const auto ag = attention_grid(fx.params, {seq}, 1, 0);
    double placed = 0.0;
    for (double x : ag.grid.v) placed += x;
    REQUIRE_THAT(ag.grid.at(5, 5), Catch::Matchers::WithinAbs(placed, 1e-12));
    REQUIRE_THAT(placed + ag.non_placement_mass, Catch::Matchers::WithinAbs(1.0, 1e-6));
}

TEST_CASE("a zeroed query matrix yields a flat attention pattern") {
    AttribFixture fx;
    Params<float> params = fx.params;
    params.layers[0].w_q.setZero();  // scores vanish, softmax is uniform
    const auto ag = attention_grid(params, {fx.seq}, 1, 1);
    const double w = 1.0 / static_cast<double>(fx.seq.size());
    for (std::size_t i = 0; i + 1 < fx.seq.size(); ++i) {
        const Placement pl = decode_placement(fx.seq[i]);
        REQUIRE_THAT(ag.grid.at(pl.r, pl.c), Catch::Matchers::WithinAbs(w, 1e-6));
    }
    REQUIRE_THAT(ag.non_placement_mass, Catch::Matchers::WithinAbs(w, 1e-6));
}

TEST_CASE("a silenced head contributes nothing to any logit") {
    AttribFixture fx;
    Params<float> params = fx.params;
    const int hd = params.config.head_dim();
    params.layers[0].w_o.middleRows(hd, hd).setZero();  // head 1 of block 1

    const auto res = head_dla(params, {fx.seq}, {fx.board}, 1, 1, LineKind::Col, {9, 10, 11});
    for (double x : res.present.v) REQUIRE(std::abs(x) < 1e-9);
    for (double x : res.absent.v) REQUIRE(std::abs(x) < 1e-9);
    for (const auto& ld : res.lines) {
        REQUIRE(std::abs(ld.present_mean) < 1e-9);
        REQUIRE(std::abs(ld.absent_mean) < 1e-9);
    }
}

TEST_CASE("head dla splits samples by digit presence in the cell's line") {
    AttribFixture fx;
    const auto corpus = fixtures::make_corpus({.count = 4, .seed = 29});
    std::vector<std::vector<TokenId>> seqs;
    std::vector<Board> boards;
    Rng rng(3);
    for (const auto& rec : corpus) {
        boards.push_back(parse_grid(rec.puzzle));
        seqs.push_back(clue_prefix(boards.back(), rng));
    }
    const std::vector<int> target{0, 1, 2};  // rows 1-3
    const auto res = head_dla(fx.params, seqs, boards, 2, 0, LineKind::Row, target);

    REQUIRE(res.lines.size() == target.size() * 9);
    for (const auto& ld : res.lines) {
        // each example contributes one sample per cell of the line
        REQUIRE(ld.present_n + ld.absent_n == static_cast<long>(seqs.size()) * 9);
        // split must match the presence map census
        long expect_present = 0;
        for (const auto& b : boards)
            if (presence_map(b).test(
                    static_cast<std::size_t>(ld.substructure * 9 + ld.digit - 1)))
                expect_present += 9;
        REQUIRE(ld.present_n == expect_present);
    }
}

TEST_CASE("margin analysis agrees with a hand lens computation") {
    AttribFixture fx;
    // harvest a couple of naked-single states from generated traces
    const auto corpus = fixtures::make_corpus({.count = 3, .seed = 91});
    std::vector<TraceRecord> traces;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        Rng rng(derive_seed(500, i));
        traces.push_back(
            TraceRecord{corpus[i].id, generate_trace(parse_grid(corpus[i].puzzle), rng)});
    }
    auto states = mine_ns_states(traces, false, 6);
    REQUIRE_FALSE(states.empty());
    // keep sequences inside the toy model's context window
    std::vector<NsState> usable;
    for (auto& st : states)
        if (static_cast<int>(st.tokens.size()) <= fx.params.config.max_seq)
            usable.push_back(std::move(st));
    REQUIRE_FALSE(usable.empty());

    const auto res = ns_margin_analysis(fx.params, usable);
    REQUIRE(res.points.size() == usable.size());

    CaptureSpec cap;
    cap.resid_mid = true;
    for (std::size_t i = 0; i < usable.size(); ++i) {
        const auto& st = usable[i];
        const auto run = forward(fx.params, st.tokens, cap);
        const VecD lens = logit_lens(
            fx.params,
            run.acts.resid_mid(fx.params.config.n_layers).row(st.pos).transpose().cast<double>());
        const int r = st.cell / 9 + 1, c = st.cell % 9 + 1;
        const double correct = lens(encode_placement(r, c, st.digit));
        double best = -1e300;
        int rank = 1;
        for (int d = 1; d <= 9; ++d) {
            if (d == st.digit) continue;
            const double x = lens(encode_placement(r, c, d));
            best = std::max(best, x);
            rank += x > correct;
        }
        REQUIRE_THAT(res.points[i].margin, Catch::Matchers::WithinAbs(correct - best, 1e-12));
        REQUIRE(res.points[i].rank == rank);
    }
}

TEST_CASE("a zeroed unembedding ties every digit at margin zero") {
    AttribFixture fx;
    Params<float> params = fx.params;
    params.unembed.setZero();
    NsState st;
    st.tokens = fx.seq;
    st.pos = fx.pos;
    st.board = fx.board;
    st.cell = 0;
    st.digit = 5;
    const auto res = ns_margin_analysis(params, {st});
    REQUIRE(res.points[0].margin == 0.0);
    REQUIRE(res.points[0].rank == 1);
    REQUIRE(res.frac_rank1 == 1.0);
}

TEST_CASE("mined states replay to boards whose next move is a naked single") {
    const auto corpus = fixtures::make_corpus({.count = 4, .seed = 55, .hard_fraction = 0.5});
    std::vector<TraceRecord> traces;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        Rng rng(derive_seed(81, i));
        traces.push_back(
            TraceRecord{corpus[i].id, generate_trace(parse_grid(corpus[i].puzzle), rng)});
    }
    const auto states = mine_ns_states(traces);
    REQUIRE_FALSE(states.empty());
    for (const auto& st : states) {
        // the stored board must be the replay of the stored prefix
        Board replay;
        std::vector<Board> stack;
        for (const TokenId tok : st.tokens) {
            if (tok < kNumPlacementTokens) {
                const Placement pl = decode_placement(tok);
                replay.set(pl.r, pl.c, pl.d);
            } else if (tok == kTokPush) {
                stack.push_back(replay);
            } else if (tok == kTokPop) {
                replay = stack.back();
                stack.pop_back();
            }
        }
        REQUIRE(replay == st.board);
        bool found = false;
        for (const auto& s : find_naked_singles(st.board))
            found = found || ((s.r - 1) * 9 + s.c - 1 == st.cell && s.d == st.digit);
        REQUIRE(found);
    }

    const auto unique_states = mine_ns_states(traces, true);
    for (const auto& st : unique_states) REQUIRE(find_naked_singles(st.board).size() == 1);
    REQUIRE(unique_states.size() <= states.size());
    REQUIRE(mine_ns_states(traces, false, 3).size() == 3);
}

TEST_CASE("activation gaps single out a planted detector neuron") {
    const auto corpus = fixtures::make_corpus({.count = 1, .seed = 33});
    const Board solved = parse_grid(corpus[0].solution);
    const int x = 40;  // r5c5, centre of the middle box
    Board one_left = solved;
    one_left.set_index(x, 0);  // cell x: exactly 1 candidate
    REQUIRE(compute_candidates(one_left).count(x) == 1);

    // to give x a second candidate a, digit a must vanish from x's row, box
    // and column at once: clear its row-and-box neighbour plus its column cell
    int y = -1, w = -1;
    for (int cand : {39, 41}) {
        const int a = solved.at_index(cand);
        for (int rr = 0; rr < 9 && w < 0; ++rr) {
            const int cc = rr * 9 + x % 9;
            if (cc != x && solved.at_index(cc) == a) w = cc;
        }
        if (w >= 0) {
            y = cand;
            break;
        }
    }
    REQUIRE(y >= 0);
    Board two_left = solved;
    two_left.set_index(x, 0);
    two_left.set_index(y, 0);
    two_left.set_index(w, 0);
    REQUIRE(compute_candidates(two_left).count(x) == 2);

    NeuronScanAccumulator acc(4);
    VecF fire(4), quiet(4);
    fire << 5.0f, 0.1f, 1.0f, 0.0f;
    quiet << 0.1f, 0.1f, 1.0f, 0.0f;
    acc.add(one_left, fire);
    acc.add(two_left, quiet);

    REQUIRE(acc.bucket_count(x, 1) == 1);
    REQUIRE(acc.bucket_count(x, 2) == 1);
    REQUIRE_THAT(acc.bucket_mean(x, 1, 0), Catch::Matchers::WithinAbs(5.0, 1e-12));

    const auto rep = neuron_scan(acc, 3.0);
    REQUIRE_THAT(rep.gap(x, 0), Catch::Matchers::WithinAbs(4.9, 1e-6));
    REQUIRE_THAT(rep.gap(x, 1), Catch::Matchers::WithinAbs(0.0, 1e-9));  // constant neuron
    REQUIRE(rep.detectors.size() == 1);
    REQUIRE(rep.detectors[0].cell == x);
    REQUIRE(rep.detectors[0].neuron == 0);
    // coverage: cell x has one detector, the rest have none
    REQUIRE(rep.coverage[1] == 1);
    REQUIRE(rep.coverage[0] == 80);
    // cell y only ever appears with one candidate count: its gap is undefined
    REQUIRE(std::isnan(rep.gap(y, 0)));
}

TEST_CASE("the scan is invariant to the order states arrive in") {
    const auto corpus = fixtures::make_corpus({.count = 2, .seed = 47});
    std::vector<Board> boards;
    for (const auto& rec : corpus) boards.push_back(parse_grid(rec.puzzle));
    Rng rng(6);
    std::vector<VecF> rows;
    for (std::size_t i = 0; i < boards.size(); ++i) {
        VecF r(8);
        for (int j = 0; j < 8; ++j) r(j) = static_cast<float>(rng.gaussian());
        rows.push_back(r);
    }
    NeuronScanAccumulator fwd(8), rev(8);
    for (std::size_t i = 0; i < boards.size(); ++i) fwd.add(boards[i], rows[i]);
    for (std::size_t i = boards.size(); i-- > 0;) rev.add(boards[i], rows[i]);
    const auto a = neuron_scan(fwd, 3.0);
    const auto b = neuron_scan(rev, 3.0);
    for (int cell = 0; cell < 81; ++cell)
        for (int j = 0; j < 8; ++j) {
            const double ga = a.gap(cell, j), gb = b.gap(cell, j);
            if (std::isnan(ga)) {
                REQUIRE(std::isnan(gb));
            } else {
                REQUIRE_THAT(ga, Catch::Matchers::WithinAbs(gb, 1e-12));
            }
        }
}

TEST_CASE("scan over model states matches a manual accumulation") {
    AttribFixture fx;
    const auto corpus = fixtures::make_corpus({.count = 2, .seed = 13});
    std::vector<TraceRecord> traces;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        Rng rng(derive_seed(7, i));
        traces.push_back(
            TraceRecord{corpus[i].id, generate_trace(parse_grid(corpus[i].puzzle), rng)});
    }
    auto states = mine_ns_states(traces, false, 5);
    std::vector<NsState> usable;
    for (auto& st : states)
        if (static_cast<int>(st.tokens.size()) <= fx.params.config.max_seq)
            usable.push_back(std::move(st));
    REQUIRE_FALSE(usable.empty());

    const auto acc = scan_states(fx.params, usable);

    NeuronScanAccumulator manual(fx.params.config.d_mlp);
    CaptureSpec cap;
    cap.mlp_post_act = true;
    for (const auto& st : usable) {
        const auto run = forward(fx.params, st.tokens, cap);
        manual.add(st.board,
                   run.acts.mlp_post_act(fx.params.config.n_layers).row(st.pos).transpose());
    }
    for (int cell = 0; cell < 81; ++cell)
        for (int k = 1; k <= 9; ++k) {
            REQUIRE(acc.bucket_count(cell, k) == manual.bucket_count(cell, k));
            if (acc.bucket_count(cell, k) == 0) continue;
            for (int j = 0; j < fx.params.config.d_mlp; ++j)
                REQUIRE(acc.bucket_mean(cell, k, j) == manual.bucket_mean(cell, k, j));
        }
}

TEST_CASE("neuron weight attribution recovers a planted unembedding row") {
    AttribFixture fx;
    Params<float> params = fx.params;
    const int d = params.config.d_model;
    params.unembed.setZero();
    VecF u1 = VecF::Zero(d), u2 = VecF::Zero(d);
    u1(0) = std::sqrt(0.5f);
    u1(1) = -std::sqrt(0.5f);
    u2(2) = std::sqrt(0.5f);
    u2(3) = -std::sqrt(0.5f);
    params.unembed.col(50) = u1;
    params.unembed.col(60) = u2;
    params.lnf_g.setOnes();
    const int neuron = 11;
    params.layers.back().w_out.setZero();
    params.layers.back().w_out.row(neuron) = u1.transpose();

    const VecD contrib = neuron_weight_dla(params, neuron);
    REQUIRE_THAT(contrib(50), Catch::Matchers::WithinAbs(1.0, 1e-6));
    REQUIRE_THAT(contrib(60), Catch::Matchers::WithinAbs(0.0, 1e-9));

    params.layers.back().w_out.row(neuron).setZero();
    const VecD zero = neuron_weight_dla(params, neuron);
    REQUIRE(zero.cwiseAbs().maxCoeff() == 0.0);
    REQUIRE_THROWS_AS(neuron_weight_dla(params, params.config.d_mlp), ConfigError);
}

TEST_CASE("neuron summary separates the cell's tokens from the rest") {
    VecD contrib = VecD::Constant(kVocabSize, -0.02);
    const int cell = 13;
    const int r = cell / 9 + 1, c = cell % 9 + 1;
    for (int d = 1; d <= 9; ++d) contrib(encode_placement(r, c, d)) = 3.0;
    contrib(encode_placement(r, c, 1)) = 3.9;  // one digit sticks out

    const auto s = neuron_dla_summary(contrib, cell);
    REQUIRE_THAT(s.target_mean, Catch::Matchers::WithinAbs(3.1, 1e-12));
    // population sigma of {3.9, 3.0 x8}: sqrt(0.08)
    REQUIRE_THAT(s.target_std, Catch::Matchers::WithinAbs(std::sqrt(0.08), 1e-12));
    REQUIRE_THAT(s.other_mean, Catch::Matchers::WithinAbs(-0.02, 1e-12));
    REQUIRE_THAT(s.other_std, Catch::Matchers::WithinAbs(0.0, 1e-12));
}

TEST_CASE("percentiles follow the linear interpolation convention") {
    const std::vector<double> xs{4.0, 1.0, 3.0, 2.0};
    REQUIRE_THAT(percentile(xs, 0.0), Catch::Matchers::WithinAbs(1.0, 1e-12));
    REQUIRE_THAT(percentile(xs, 25.0), Catch::Matchers::WithinAbs(1.75, 1e-12));
    REQUIRE_THAT(percentile(xs, 50.0), Catch::Matchers::WithinAbs(2.5, 1e-12));
    REQUIRE_THAT(percentile(xs, 75.0), Catch::Matchers::WithinAbs(3.25, 1e-12));
    REQUIRE_THAT(percentile(xs, 100.0), Catch::Matchers::WithinAbs(4.0, 1e-12));
    REQUIRE_THROWS_AS(percentile({}, 50.0), ConfigError);
}

TEST_CASE("unembedding cosine groups follow the placement-pair census") {
    AttribFixture fx;
    const auto groups = unembedding_cosine_analysis(fx.params);
    long total = 0;
    long same_cell = 0, row_box_digit = 0, row_digit = 0, nothing = 0;
    double nothing_mean = 1.0;
    for (const auto& g : groups) {
        total += g.count;
        if (g.row && g.col && g.box && !g.digit) same_cell = g.count;
        if (g.row && !g.col && g.box && g.digit) row_box_digit = g.count;
        if (g.row && !g.col && !g.box && g.digit) row_digit = g.count;
        if (!g.row && !g.col && !g.box && !g.digit) {
            nothing = g.count;
            nothing_mean = g.mean;
        }
    }
    REQUIRE(total == 729L * 728L / 2L);
    REQUIRE(same_cell == 2916);       // 81 cells x C(9,2) digit pairs
    REQUIRE(row_box_digit == 729);    // 81 same-row-and-box cell pairs x 9 digits
    REQUIRE(row_digit == 2187);       // 243 same-row-not-box cell pairs x 9 digits
    REQUIRE(nothing == 174960);       // 2430 unrelated cell pairs x 72 digit pairs
    // fresh random init carries no structure
    REQUIRE(std::abs(nothing_mean) < 0.05);

    SECTION("identical unembedding vectors give cosine one everywhere") {
        Params<float> params = fx.params;
        VecF v = VecF::Zero(params.config.d_model);
        v(0) = 2.0f;
        for (int t = 0; t < kNumPlacementTokens; ++t) params.unembed.col(t) = v;
        const auto ones = unembedding_cosine_analysis(params);
        for (const auto& g : ones) {
            REQUIRE_THAT(g.mean, Catch::Matchers::WithinAbs(1.0, 1e-9));
            REQUIRE(g.stddev < 1e-9);
        }
    }
}

TEST_CASE("heatmaps serialize to csv and svg deterministically") {
    TempDir tmp;
    GridHeatmap g;
    g.layer = 4;
    g.head = 6;
    g.statistic = "mean_attention";
    Rng rng(10);
    for (auto& x : g.v) x = rng.gaussian();

    write_heatmap_csv(g, tmp.file("grid.csv"));
    std::ifstream in(tmp.file("grid.csv"));
    std::vector<std::vector<double>> parsed;
    std::string line;
    while (std::getline(in, line)) {
        std::vector<double> row;
        std::stringstream ss(line);
        std::string tok;
        while (std::getline(ss, tok, ',')) row.push_back(std::stod(tok));
        parsed.push_back(row);
    }
    REQUIRE(parsed.size() == 9);
    for (int r = 1; r <= 9; ++r) {
        REQUIRE(parsed[static_cast<std::size_t>(r - 1)].size() == 9);
        for (int c = 1; c <= 9; ++c)
            REQUIRE_THAT(parsed[static_cast<std::size_t>(r - 1)][static_cast<std::size_t>(c - 1)],
                         Catch::Matchers::WithinAbs(g.at(r, c), 1e-8));
    }

    write_heatmap_svg(g, tmp.file("a.svg"));
    write_heatmap_svg(g, tmp.file("b.svg"));
    const auto slurp = [](const std::string& p) {
        std::ifstream f(p);
        std::stringstream ss;
        ss << f.rdbuf();
        return ss.str();
    };
    const std::string a = slurp(tmp.file("a.svg"));
    REQUIRE(a == slurp(tmp.file("b.svg")));
    REQUIRE(a.rfind("<svg", 0) == 0);
    std::size_t rects = 0, from = 0;
    while ((from = a.find("<rect", from)) != std::string::npos) {
        ++rects;
        from += 5;
    }
    REQUIRE(rects == 81);
}
