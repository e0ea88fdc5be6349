#include "oracles.hpp"

#include "ia/error.hpp"
#include "ia/probes.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace ia;
using namespace ia::probes;

namespace {

ModelConfig config_of(std::uint32_t L, std::uint32_t d, std::uint32_t di, std::uint32_t H, std::uint32_t vocab) {
    ModelConfig c;
    c.num_layers = L;
    c.d_model = d;
    c.d_mid = d;
    c.d_inter = di;
    c.num_heads = H;
    c.vocab_size = vocab;
    c.max_seq_len = 16;
    return c;
}

ActivationTrace blank(const ModelConfig &c, std::size_t seq, std::string id = "t") {
    ActivationTrace t;
    t.config = c;
    t.prompt_id = std::move(id);
    t.token_ids.assign(seq, 0);
    t.probe_position = static_cast<std::uint32_t>(seq - 1);
    t.initial_hidden.assign(c.d_model, 0.0f);
    for (std::uint32_t l = 1; l <= c.num_layers; ++l) {
        LayerRecord r;
        r.layer_index = l;
        r.hidden.assign(c.d_model, 0.0f);
        r.attention_rows.assign(c.num_heads, std::vector<float>(seq, 1.0f / static_cast<float>(seq)));
        r.up_projection.assign(c.d_inter, 0.0f);
        t.layers.push_back(r);
    }
    return t;
}

LensMatrix identity_lens(std::uint32_t n) {
    LensMatrix lens;
    lens.vocab_size = n;
    lens.d_model = n;
    lens.data.assign(n * n, 0.0f);
    for (std::uint32_t i = 0; i < n; ++i) lens.data[i * n + i] = 1.0f;
    return lens;
}

std::vector<float> random_vec(std::mt19937_64 &rng, std::size_t n) {
    std::normal_distribution<float> d(0, 1);
    std::vector<float> v(n);
    for (auto &x : v) x = d(rng);
    return v;
}

} // namespace

TEST_CASE("attention score examples") {
    auto t = blank(config_of(1, 2, 2, 2, 4), 4);
    t.constraint_positions = {1, 2};
    t.layers[0].attention_rows = {{0.1f, 0.3f, 0.1f, 0.5f}, {0.1f, 0.1f, 0.3f, 0.5f}};
    CHECK(std::fabs(attention_score(t, 1) - 0.2) < 1e-7);
    t.layers[0].attention_rows = {{0.1f, 0.6f, 0.1f, 0.2f}, {0.1f, 0.6f, 0.2f, 0.1f}};
    CHECK(std::fabs(attention_score(t, 1) - 0.6) < 1e-7);
    CHECK_THROWS_AS(attention_score(t, 0), ShapeError);
    CHECK_THROWS_AS(attention_score(t, 2), ShapeError);
    t.constraint_positions.clear();
    CHECK_THROWS_AS(attention_score(t, 1), ValidationError);
}

TEST_CASE("attention score matches enumeration") {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<float> u(0.01f, 1.0f);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t seq = 3 + trial % 6;
        auto t = blank(config_of(2, 2, 2, 1 + trial % 3, 4), seq);
        t.constraint_positions = {0, static_cast<std::uint32_t>(seq / 2)};
        for (auto &layer : t.layers)
            for (auto &row : layer.attention_rows) {
                float s = 0;
                for (auto &x : row) s += (x = u(rng));
                for (auto &x : row) x /= s;
            }
        for (std::size_t l = 1; l <= 2; ++l) {
            std::vector<std::vector<double>> rows;
            for (const auto &r : t.layers[l - 1].attention_rows) rows.emplace_back(r.begin(), r.end());
            CHECK(std::fabs(attention_score(t, l) - oracle::attention_score(rows, t.constraint_positions)) < 1e-12);
        }
    }
}

TEST_CASE("attention_constraint_score curve covers layers 1..L") {
    const auto c = config_of(3, 2, 2, 1, 4);
    auto a = blank(c, 4, "a"), b = blank(c, 4, "b");
    a.constraint_positions = b.constraint_positions = {1};
    a.layers[1].attention_rows[0] = {0.1f, 0.5f, 0.2f, 0.2f};
    b.layers[1].attention_rows[0] = {0.1f, 0.1f, 0.4f, 0.4f};
    BatchTraces batch{{"q", {&a, &b}}};
    const auto curve = attention_constraint_score(batch);
    CHECK(curve.layers == std::vector<std::uint32_t>{1, 2, 3});
    CHECK(curve.mean[0] == doctest::Approx(0.25));
    CHECK(curve.mean[1] == doctest::Approx(0.3));
    CHECK(curve.spread[1] == doctest::Approx(0.2));
}

TEST_CASE("aggregate reduces paraphrases then questions") {
    const auto c = aggregate({"a", "b"}, {0, 1}, {{{1, 2}, {3, 4}}, {{5, 6}, {5, 6}}});
    CHECK(c.question_mean[0] == std::vector<double>{2, 3});
    CHECK(c.question_spread[0] == std::vector<double>{1, 1});
    CHECK(c.mean == std::vector<double>{3.5, 4.5});
    CHECK(c.spread == std::vector<double>{0.5, 0.5});
    CHECK_THROWS_AS(aggregate({"a", "b"}, {0}, {{{1}}, {{1}, {2}}}), ValidationError);
}

TEST_CASE("kl convergence examples") {
    const auto c = config_of(2, 4, 2, 1, 4);
    auto t = blank(c, 2);
    t.answer_first_token = 2;
    // layer 1 puts all mass on the answer, layer 2 on a wrong token
    t.layers[0].hidden = {0, 0, 60, 0};
    t.layers[1].hidden = {0, 60, 0, 0};
    BatchTraces batch{{"q", {&t}}};
    const auto curve = kl_convergence(batch, identity_lens(4));
    CHECK(curve.layers == std::vector<std::uint32_t>{0, 1, 2});
    CHECK(std::fabs(curve.mean[0] - std::log(4.0)) < 1e-12);
    CHECK(curve.mean[1] < 1e-20);
    CHECK(curve.mean[2] == doctest::Approx(-std::log(1e-12)));
    CHECK(curve.floored_events == 1);
    CHECK(std::fabs(kl_convergence(batch, identity_lens(4), 1e-30).mean[2] - 60.0) < 1e-9);
    CHECK_THROWS_AS(kl_convergence(batch, identity_lens(5)), ShapeError);
    CHECK_THROWS_AS(kl_convergence(batch, identity_lens(4), 0.0), ValidationError);
}

TEST_CASE("kl convergence equals the full KL against a point mass") {
    std::mt19937_64 rng(21);
    const auto c = config_of(1, 5, 2, 1, 7);
    LensMatrix lens;
    lens.vocab_size = 7;
    lens.d_model = 5;
    lens.data = random_vec(rng, 35);
    for (int trial = 0; trial < 40; ++trial) {
        auto t = blank(c, 1);
        t.answer_first_token = static_cast<std::uint32_t>(trial % 7);
        t.initial_hidden = random_vec(rng, 5);
        t.layers[0].hidden = random_vec(rng, 5);
        BatchTraces batch{{"q", {&t}}};
        const auto curve = kl_convergence(batch, lens);
        for (std::size_t l = 0; l <= 1; ++l) {
            const auto h = t.hidden_at(l);
            std::vector<double> logits(7, 0.0);
            for (int v = 0; v < 7; ++v)
                for (int k = 0; k < 5; ++k) logits[v] += static_cast<double>(lens.data[v * 5 + k]) * h[k];
            std::vector<double> golden(7, 0.0);
            golden[t.answer_first_token] = 1.0;
            CHECK(std::fabs(curve.mean[l] - oracle::kl(golden, oracle::softmax(logits), 1e-12)) < 1e-9);
        }
    }
}

TEST_CASE("golden distribution") {
    const Tokenizer tok(Vocabulary({"<unk>", "Dub", "##lin", "City"}));
    const auto g = golden_distribution("Dublin City", tok);
    CHECK(g.probs == std::vector<double>{0, 1, 0, 0});
    CHECK_THROWS_AS(golden_distribution("", tok), ValidationError);
}

TEST_CASE("set similarity examples") {
    const std::vector<float> a{1, 0}, b{0, 1}, z{0, 0};
    std::vector<std::span<const float>> orth{a, b};
    CHECK(set_similarity(orth, PairMode::verbatim) == 0.5);
    CHECK(set_similarity(orth, PairMode::distinct) == 0.0);
    std::vector<std::span<const float>> same{a, a, a};
    CHECK(set_similarity(same, PairMode::verbatim) == doctest::Approx(1.0));
    std::vector<std::span<const float>> single{a};
    CHECK(set_similarity(single, PairMode::verbatim) == 1.0);
    CHECK_THROWS_AS(set_similarity(single, PairMode::distinct), ValidationError);
    std::size_t zeros = 0;
    std::vector<std::span<const float>> with_zero{a, z};
    CHECK(set_similarity(with_zero, PairMode::verbatim, &zeros) == 0.25);
    CHECK(zeros == 1);
}

TEST_CASE("set similarity matches enumeration") {
    std::mt19937_64 rng(33);
    for (int trial = 0; trial < 40; ++trial) {
        const std::size_t p = 2 + trial % 9;
        std::vector<std::vector<float>> vs;
        for (std::size_t i = 0; i < p; ++i) vs.push_back(random_vec(rng, 6));
        std::vector<std::span<const float>> spans(vs.begin(), vs.end());
        CHECK(std::fabs(set_similarity(spans, PairMode::verbatim) - oracle::set_similarity(vs)) < 1e-9);
        const double distinct = (oracle::set_similarity(vs) * p * p - p) / (p * (p - 1.0));
        CHECK(std::fabs(set_similarity(spans, PairMode::distinct) - distinct) < 1e-9);
    }
}

TEST_CASE("ffn paraphrase similarity curve") {
    const auto c = config_of(2, 2, 2, 1, 2);
    auto a = blank(c, 1, "a"), b = blank(c, 1, "b");
    a.layers[0].up_projection = {1, 0};
    b.layers[0].up_projection = {0, 1};
    a.layers[1].up_projection = {1, 1};
    b.layers[1].up_projection = {2, 2};
    BatchTraces batch{{"q", {&a, &b}}};
    auto curve = ffn_paraphrase_similarity(batch);
    CHECK(curve.sim_layers == std::vector<std::uint32_t>{1, 2});
    CHECK(curve.sim[0] == 0.5);
    CHECK(curve.sim[1] == doctest::Approx(1.0));
    CHECK(curve.zero_vector_events == 0);

    a.answer_first_token = b.answer_first_token = 1;
    target_probability_curve(batch, identity_lens(2), curve);
    CHECK(curve.prob_layers == std::vector<std::uint32_t>{0, 1, 2});
    CHECK(curve.target_prob[0] == doctest::Approx(0.5));
}

TEST_CASE("cross similarity divisors") {
    const std::vector<float> a{1, 0}, b{0, 1};
    std::vector<std::span<const float>> xs{a, b}, ys{a, a};
    CHECK(cross_similarity(xs, ys, RelationDivisor::mean) == 0.5);
    CHECK(cross_similarity(xs, ys, RelationDivisor::pairs) == 2.0);
    std::vector<std::span<const float>> one{a};
    CHECK_THROWS_AS(cross_similarity(xs, one, RelationDivisor::mean), ValidationError);
    CHECK_THROWS_AS(cross_similarity(one, one, RelationDivisor::pairs), ValidationError);
    CHECK(cross_similarity(one, one, RelationDivisor::mean) == 1.0);
}

TEST_CASE("relation similarity heatmap") {
    std::mt19937_64 rng(50);
    const auto c = config_of(2, 2, 5, 1, 4);
    std::vector<ActivationTrace> store;
    store.reserve(8);
    std::map<std::string, std::vector<const ActivationTrace *>> per;
    for (const char *r : {"capital", "genre", "sport", "religion"}) {
        for (int q = 0; q < 2; ++q) {
            auto t = blank(c, 1);
            for (auto &layer : t.layers) layer.up_projection = random_vec(rng, 5);
            store.push_back(t);
            per[r].push_back(&store.back());
        }
    }
    for (auto divisor : {RelationDivisor::mean, RelationDivisor::pairs}) {
        const auto hm = relation_similarity(per, 1, divisor);
        CHECK(hm.relations.size() == 4);
        CHECK(hm.layers == std::vector<std::uint32_t>{1, 2});
        for (std::size_t s = 0; s < 2; ++s)
            for (std::size_t x = 0; x < 4; ++x)
                for (std::size_t y = 0; y < 4; ++y) {
                    CHECK(hm.values[s][x][y] == hm.values[s][y][x]);
                    std::vector<std::vector<float>> xs, ys;
                    for (const auto *t : per[hm.relations[x]]) xs.push_back(t->layers[s].up_projection);
                    for (const auto *t : per[hm.relations[y]]) ys.push_back(t->layers[s].up_projection);
                    const double div = divisor == RelationDivisor::mean ? 4.0 : 1.0;
                    CHECK(std::fabs(hm.values[s][x][y] - oracle::cross_similarity(xs, ys, div)) < 1e-9);
                }
        CHECK(off_diagonal(hm, 0).size() == 6);
        CHECK(off_diagonal(hm, 0)[0] == hm.values[0][0][1]);
    }
    per["sport"].pop_back();
    CHECK_THROWS_AS(relation_similarity(per, 1), ValidationError);
}

TEST_CASE("heatmap welch uses the upper triangle") {
    RelationHeatmap a, b;
    a.layers = b.layers = {1};
    a.values = {{{1, 0.31, 0.42, 0.35}, {0.31, 1, 0.5, 0.47}, {0.42, 0.5, 1, 0.39}, {0.35, 0.47, 0.39, 1}}};
    b.values = {{{1, 0.28, 0.33, 0.30}, {0.28, 1, 0.36, 0.25}, {0.33, 0.36, 1, 0.25}, {0.30, 0.25, 0.25, 1}}};
    const auto r = heatmap_welch(a, b, 1);
    const auto o = oracle::welch(off_diagonal(a, 0), off_diagonal(b, 0));
    CHECK(std::fabs(r.t_statistic - o.t) < 1e-12);
    CHECK(std::fabs(r.p_value_one_sided - o.p_greater) < 1e-8);
    CHECK_THROWS_AS(heatmap_welch(a, b, 2), ValidationError);
    RelationHeatmap two;
    two.layers = {1};
    two.values = {{{1, 0.5}, {0.5, 1}}};
    CHECK_THROWS_AS(heatmap_welch(two, two, 1), ValidationError);
}

TEST_CASE("response variety examples") {
    const auto r = response_variety({{"q1", 100, "Dublin", {"Dublin", "Paris"}},
                                     {"q2", 5, "Dublin", {"Dublin", "dublin.", "Dublin City"}}});
    REQUIRE(r.size() == 2);
    CHECK(r[0].variety == 0.5);
    CHECK(r[0].f1 == std::vector<double>{1, 0});
    CHECK(std::fabs(r[1].variety - 0.15713484026367724) < 1e-15);
    CHECK(r[1].popularity == 5);
    const auto same = response_variety({{"q", 1, "x", {"x", "x", "x"}}});
    CHECK(same[0].variety == 0.0);
    CHECK_THROWS_AS(response_variety({{"q", 1, "x", {}}}), ValidationError);
}
