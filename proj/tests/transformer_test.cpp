#include "pit/transformer.hpp"

#include "oracles.hpp"
#include "pit/errors.hpp"
#include "reference_model.hpp"

#include "doctest.h"

#include <cmath>
#include <random>

using namespace pit;

namespace {

TransformerConfig small_config(int layers = 2, int heads = 2, int d_model = 8, int d_ff = 16) {
    TransformerConfig cfg;
    cfg.n_layers = layers;
    cfg.n_heads = heads;
    cfg.d_model = d_model;
    cfg.d_ff = d_ff;
    return cfg;
}

} // namespace

TEST_CASE("rotary at position zero is the identity") {
    std::mt19937_64 rng(101);
    auto q = oracle::random_tensor({1, 8}, rng);
    auto rotated = rotate_positions(q);
    for (std::size_t i = 0; i < q.values().size(); ++i) {
        CHECK(rotated.values()[i] == doctest::Approx(q.values()[i]).epsilon(1e-15));
    }
}

TEST_CASE("rotary preserves norms at every position") {
    std::mt19937_64 rng(103);
    auto q = oracle::random_tensor({12, 8}, rng);
    auto rotated = rotate_positions(q);
    for (int m = 0; m < 12; ++m) {
        double before = 0.0;
        double after = 0.0;
        for (int j = 0; j < 8; ++j) {
            before += q.values()[m * 8 + j] * q.values()[m * 8 + j];
            after += rotated.values()[m * 8 + j] * rotated.values()[m * 8 + j];
        }
        CHECK(std::abs(std::sqrt(before) - std::sqrt(after)) < 1e-12);
    }
}

TEST_CASE("rotary scores depend only on relative offsets") {
    std::mt19937_64 rng(107);
    for (int d_qk : {4, 8, 16}) {
        const auto q = oracle::random_vector(static_cast<std::size_t>(d_qk), rng);
        const auto k = oracle::random_vector(static_cast<std::size_t>(d_qk), rng);
        for (int m = 0; m < 6; ++m) {
            for (int n = 0; n < 6; ++n) {
                for (int s = 0; s < 5; ++s) {
                    auto dot = [&](int pm, int pn) {
                        const auto qm = refimpl::rotate_ref(q, pm);
                        const auto kn = refimpl::rotate_ref(k, pn);
                        double acc = 0.0;
                        for (int j = 0; j < d_qk; ++j) {
                            acc += qm[static_cast<std::size_t>(j)] * kn[static_cast<std::size_t>(j)];
                        }
                        return acc;
                    };
                    CHECK(std::abs(dot(m, n) - dot(m + s, n + s)) < 1e-9);
                }
            }
        }
    }
}

TEST_CASE("rotary tensor path agrees with scalar rotation") {
    std::mt19937_64 rng(109);
    auto q = oracle::random_tensor({2, 5, 6}, rng);
    auto rotated = rotate_positions(q);
    for (int b = 0; b < 2; ++b) {
        for (int m = 0; m < 5; ++m) {
            refimpl::Vec row(6);
            for (int j = 0; j < 6; ++j) {
                row[static_cast<std::size_t>(j)] = q.values()[(b * 5 + m) * 6 + j];
            }
            const auto expect = refimpl::rotate_ref(row, m);
            for (int j = 0; j < 6; ++j) {
                CHECK(rotated.values()[(b * 5 + m) * 6 + j] ==
                      doctest::Approx(expect[static_cast<std::size_t>(j)]).epsilon(1e-13));
            }
        }
    }
}

TEST_CASE("rotary rejects odd head width") {
    auto q = Tensor::ones({4, 5});
    CHECK_THROWS_AS(rotate_positions(q), ConfigError);
    TransformerConfig cfg = small_config(1, 3, 9, 8); // d_qk = 3
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("sinusoidal table values") {
    auto table = sinusoidal_table(4, 6);
    // row 0: sin(0)=0 at even columns, cos(0)=1 at odd columns
    for (int j = 0; j < 6; ++j) {
        CHECK(table.values()[j] == (j % 2 == 0 ? 0.0 : 1.0));
    }
    for (double v : table.values()) {
        CHECK(v >= -1.0);
        CHECK(v <= 1.0);
    }
    CHECK(table.values()[1 * 6 + 0] == doctest::Approx(std::sin(1.0)).epsilon(1e-9));
    CHECK(std::abs(table.values()[1 * 6 + 0] - 0.84147) < 1e-5);
}

TEST_CASE("attention on a single position is V projected by W_O") {
    std::mt19937_64 rng(113);
    auto cfg = small_config(1, 2, 8, 16);
    auto params = TransformerParams::init(cfg, rng);
    auto x = oracle::random_tensor({1, 1, 8}, rng);
    auto out = causal_self_attention(x, params.layers[0], cfg);

    // expected: concat_h(x W_v[h]) W_o for the single position
    refimpl::Vec row(x.values().begin(), x.values().end());
    refimpl::Vec cat;
    for (int h = 0; h < 2; ++h) {
        auto v = refimpl::mat_vec_left(row, refimpl::to_mat(params.layers[0].w_v[h]));
        cat.insert(cat.end(), v.begin(), v.end());
    }
    auto expect = refimpl::mat_vec_left(cat, refimpl::to_mat(params.layers[0].w_o));
    REQUIRE(out.size() == 8);
    for (int j = 0; j < 8; ++j) {
        CHECK(out.values()[j] == doctest::Approx(expect[static_cast<std::size_t>(j)]).epsilon(1e-12));
    }
}

TEST_CASE("masked scores equal brute-force per-pair dot products") {
    std::mt19937_64 rng(127);
    auto cfg = small_config(1, 2, 8, 16);
    auto params = TransformerParams::init(cfg, rng);
    const int len = 6;
    auto x = oracle::random_tensor({1, len, 8}, rng);
    auto ref = refimpl::extract(cfg, params);

    for (int head = 0; head < 2; ++head) {
        auto scores = masked_attention_scores(x, params.layers[0], cfg, head);
        REQUIRE(scores.shape() == Shape{1, len, len});
        refimpl::Mat xm(len, refimpl::Vec(8));
        for (int t = 0; t < len; ++t) {
            for (int j = 0; j < 8; ++j) {
                xm[t][j] = x.values()[t * 8 + j];
            }
        }
        for (int t = 0; t < len; ++t) {
            auto q = refimpl::rotate_ref(refimpl::mat_vec_left(xm[t], ref.layers[0].wq[head]), t);
            for (int s = 0; s < len; ++s) {
                auto k = refimpl::rotate_ref(refimpl::mat_vec_left(xm[s], ref.layers[0].wk[head]), s);
                double dot = 0.0;
                for (int j = 0; j < 4; ++j) {
                    dot += q[j] * k[j];
                }
                dot /= std::sqrt(4.0);
                if (s > t) {
                    dot -= 1e9;
                }
                CHECK(scores.values()[t * len + s] == doctest::Approx(dot).epsilon(1e-10));
            }
        }
    }
}

TEST_CASE("attention output is causal under perturbation") {
    std::mt19937_64 rng(131);
    auto cfg = small_config(1, 2, 8, 16);
    auto params = TransformerParams::init(cfg, rng);
    const int len = 7;
    auto base_values = oracle::random_vector(static_cast<std::size_t>(len * 8), rng);

    auto x = Tensor::from_values({1, len, 8}, base_values);
    auto out = causal_self_attention(x, params.layers[0], cfg);

    const int t = 3;
    auto perturbed = base_values;
    for (int pos = t + 1; pos < len; ++pos) {
        for (int j = 0; j < 8; ++j) {
            perturbed[static_cast<std::size_t>(pos * 8 + j)] += 100.0;
        }
    }
    auto x2 = Tensor::from_values({1, len, 8}, perturbed);
    auto out2 = causal_self_attention(x2, params.layers[0], cfg);
    for (int pos = 0; pos <= t; ++pos) {
        for (int j = 0; j < 8; ++j) {
            CHECK(out.values()[pos * 8 + j] == out2.values()[pos * 8 + j]);
        }
    }
}

TEST_CASE("feed forward with zero weights is zero") {
    auto cfg = small_config(1, 2, 8, 16);
    LayerParams layer;
    layer.ff_w1 = Tensor::zeros({8, 16}, true);
    layer.ff_b1 = Tensor::zeros({16}, true);
    layer.ff_w2 = Tensor::zeros({16, 8}, true);
    layer.ff_b2 = Tensor::zeros({8}, true);
    std::mt19937_64 rng(137);
    auto x = oracle::random_tensor({1, 4, 8}, rng);
    auto out = feed_forward(x, layer);
    for (double v : out.values()) {
        CHECK(v == 0.0);
    }
}

TEST_CASE("feed forward is position-wise") {
    std::mt19937_64 rng(139);
    auto cfg = small_config(1, 2, 8, 16);
    auto params = TransformerParams::init(cfg, rng);
    const int len = 5;
    auto values = oracle::random_vector(static_cast<std::size_t>(len * 8), rng);
    auto x = Tensor::from_values({1, len, 8}, values);
    auto out = feed_forward(x, params.layers[0]);

    // reverse the sequence; outputs must be reversed identically
    std::vector<double> reversed(values.size());
    for (int t = 0; t < len; ++t) {
        std::copy_n(values.begin() + t * 8, 8, reversed.begin() + (len - 1 - t) * 8);
    }
    auto out_rev = feed_forward(Tensor::from_values({1, len, 8}, reversed), params.layers[0]);
    for (int t = 0; t < len; ++t) {
        for (int j = 0; j < 8; ++j) {
            CHECK(out.values()[t * 8 + j] == out_rev.values()[(len - 1 - t) * 8 + j]);
        }
    }
}

TEST_CASE("feed forward gradient matches finite differences") {
    std::mt19937_64 rng(149);
    auto cfg = small_config(1, 2, 8, 16);
    auto params = TransformerParams::init(cfg, rng);
    auto& layer = params.layers[0];
    auto x = oracle::random_tensor({1, 3, 8}, rng, true);
    auto weights = oracle::random_tensor({1, 3, 8}, rng);
    auto loss_fn = [&]() { return sum(mul(feed_forward(x, layer), weights)).value(); };
    for (Tensor t : {layer.ff_w1, layer.ff_b1, layer.ff_w2, layer.ff_b2, x}) {
        t.zero_grad();
    }
    sum(mul(feed_forward(x, layer), weights)).backward();
    CHECK(oracle::grad_rel_err(x.grad(), oracle::finite_diff_grad(loss_fn, x)) < 1e-6);
    CHECK(oracle::grad_rel_err(layer.ff_w1.grad(), oracle::finite_diff_grad(loss_fn, layer.ff_w1)) <
          1e-6);
    CHECK(oracle::grad_rel_err(layer.ff_b1.grad(), oracle::finite_diff_grad(loss_fn, layer.ff_b1)) <
          1e-6);
    CHECK(oracle::grad_rel_err(layer.ff_w2.grad(), oracle::finite_diff_grad(loss_fn, layer.ff_w2)) <
          1e-6);
}

TEST_CASE("connector variants") {
    std::mt19937_64 rng(151);
    auto x = oracle::random_tensor({2, 3, 4}, rng);
    auto zero_sublayer = [](const Tensor& in) { return Tensor::zeros(in.shape()); };
    auto noisy_sublayer = [&](const Tensor& in) { return scalar_mul(in, 2.5); };

    SUBCASE("rezero with zero gate is the identity, bitwise") {
        ConnectorParams params{Tensor::zeros({1}, true), {}, {}};
        auto out = connector_apply(x, noisy_sublayer, Connector::rezero, params);
        for (std::size_t i = 0; i < x.values().size(); ++i) {
            CHECK(out.values()[i] == x.values()[i]);
        }
    }
    SUBCASE("pre_ln with zero sublayer is the identity") {
        ConnectorParams params{{}, Tensor::full({4}, 1.0, true), Tensor::zeros({4}, true)};
        auto out = connector_apply(x, zero_sublayer, Connector::pre_ln, params);
        for (std::size_t i = 0; i < x.values().size(); ++i) {
            CHECK(out.values()[i] == x.values()[i]);
        }
    }
    SUBCASE("post_ln with zero sublayer equals layer_norm directly") {
        auto gain = oracle::random_tensor({4}, rng, false, 0.5, 1.5);
        auto bias = oracle::random_tensor({4}, rng);
        ConnectorParams params{{}, gain, bias};
        auto out = connector_apply(x, zero_sublayer, Connector::post_ln, params);
        auto expect = layer_norm(x, gain, bias);
        for (std::size_t i = 0; i < x.values().size(); ++i) {
            CHECK(out.values()[i] == doctest::Approx(expect.values()[i]).epsilon(1e-14));
        }
    }
}

TEST_CASE("rezero stack at initialization is the identity map") {
    std::mt19937_64 rng(157);
    for (auto encoding : {PosEncoding::rotary, PosEncoding::sinusoidal}) {
        auto cfg = small_config(3, 2, 8, 16);
        cfg.pos_encoding = encoding;
        auto params = TransformerParams::init(cfg, rng);
        auto x = oracle::random_tensor({2, 5, 8}, rng);
        auto out = transformer_forward(x, cfg, params);
        for (std::size_t i = 0; i < x.values().size(); ++i) {
            CHECK(out.values()[i] == x.values()[i]); // bitwise
        }
    }
}

TEST_CASE("stack output is causal end to end") {
    std::mt19937_64 rng(163);
    for (auto connector : {Connector::rezero, Connector::pre_ln, Connector::post_ln}) {
        for (auto encoding : {PosEncoding::rotary, PosEncoding::sinusoidal}) {
            auto cfg = small_config(2, 2, 8, 16);
            cfg.connector = connector;
            cfg.pos_encoding = encoding;
            auto params = TransformerParams::init(cfg, rng);
            if (connector == Connector::rezero) {
                for (auto& layer : params.layers) {
                    layer.alpha.raw()[0] = 0.37; // nonzero so sublayers matter
                }
            }
            const int len = 6;
            const int t = 2;
            auto values = oracle::random_vector(static_cast<std::size_t>(len * 8), rng);
            auto out = transformer_forward(Tensor::from_values({1, len, 8}, values), cfg, params);
            auto perturbed = values;
            for (std::size_t i = static_cast<std::size_t>((t + 1) * 8); i < perturbed.size(); ++i) {
                perturbed[i] = -perturbed[i] + 3.0;
            }
            auto out2 = transformer_forward(Tensor::from_values({1, len, 8}, perturbed), cfg, params);
            for (int pos = 0; pos <= t; ++pos) {
                for (int j = 0; j < 8; ++j) {
                    CHECK(out.values()[pos * 8 + j] == out2.values()[pos * 8 + j]);
                }
            }
        }
    }
}

TEST_CASE("one-layer one-head stack matches the scalar reference") {
    std::mt19937_64 rng(167);
    auto cfg = small_config(1, 1, 4, 8);
    auto params = TransformerParams::init(cfg, rng);
    params.layers[0].alpha.raw()[0] = 0.8; // exercise the sublayers

    const int len = 5;
    auto values = oracle::random_vector(static_cast<std::size_t>(len * 4), rng);
    auto out = transformer_forward(Tensor::from_values({1, len, 4}, values), cfg, params);

    auto ref_model = refimpl::extract(cfg, params);
    refimpl::Mat x(len, refimpl::Vec(4));
    for (int t = 0; t < len; ++t) {
        for (int j = 0; j < 4; ++j) {
            x[t][j] = values[static_cast<std::size_t>(t * 4 + j)];
        }
    }
    auto expect = refimpl::ref_forward(ref_model, x);
    for (int t = 0; t < len; ++t) {
        for (int j = 0; j < 4; ++j) {
            CHECK(out.values()[t * 4 + j] == doctest::Approx(expect[t][j]).epsilon(1e-9));
        }
    }
}

TEST_CASE("multi-layer multi-head stack matches the scalar reference") {
    std::mt19937_64 rng(173);
    auto cfg = small_config(2, 2, 8, 16);
    auto params = TransformerParams::init(cfg, rng);
    for (auto& layer : params.layers) {
        layer.alpha.raw()[0] = 0.31;
    }
    const int len = 6;
    auto values = oracle::random_vector(static_cast<std::size_t>(len * 8), rng);
    auto out = transformer_forward(Tensor::from_values({1, len, 8}, values), cfg, params);

    auto ref_model = refimpl::extract(cfg, params);
    refimpl::Mat x(len, refimpl::Vec(8));
    for (int t = 0; t < len; ++t) {
        for (int j = 0; j < 8; ++j) {
            x[t][j] = values[static_cast<std::size_t>(t * 8 + j)];
        }
    }
    auto expect = refimpl::ref_forward(ref_model, x);
    for (int t = 0; t < len; ++t) {
        for (int j = 0; j < 8; ++j) {
            CHECK(out.values()[t * 8 + j] == doctest::Approx(expect[t][j]).epsilon(1e-9));
        }
    }
}

TEST_CASE("parameter count matches the closed form") {
    TransformerConfig paper;
    paper.n_layers = 4;
    paper.n_heads = 4;
    paper.d_model = 512;
    paper.d_ff = 2048;
    // 4 * (3*4*512*128 + 512*512 + 512*2048 + 2048 + 2048*512 + 512 + 1)
    CHECK(transformer_parameter_count(paper) == 12593156);

    std::mt19937_64 rng(179);
    for (auto connector : {Connector::rezero, Connector::pre_ln, Connector::post_ln}) {
        auto cfg = small_config(2, 2, 8, 16);
        cfg.connector = connector;
        auto params = TransformerParams::init(cfg, rng);
        std::vector<Tensor> all;
        params.collect(all);
        std::int64_t total = 0;
        for (const auto& t : all) {
            total += t.size();
        }
        CHECK(total == transformer_parameter_count(cfg));
    }
}

TEST_CASE("non-finite activations carry the layer index") {
    std::mt19937_64 rng(181);
    auto cfg = small_config(2, 2, 8, 16);
    auto params = TransformerParams::init(cfg, rng);
    params.layers[1].alpha.raw()[0] = 1.0;
    for (auto& v : params.layers[1].ff_w2.raw()) {
        v = 1e308;
    }
    for (auto& v : params.layers[1].ff_w1.raw()) {
        v = 1e308;
    }
    auto x = oracle::random_tensor({1, 3, 8}, rng);
    try {
        transformer_forward(x, cfg, params);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("layer 1") != std::string::npos);
    }
}

TEST_CASE("initialization is deterministic under a fixed seed") {
    auto cfg = small_config(2, 2, 8, 16);
    std::mt19937_64 rng_a(42);
    std::mt19937_64 rng_b(42);
    auto a = TransformerParams::init(cfg, rng_a);
    auto b = TransformerParams::init(cfg, rng_b);
    std::vector<Tensor> ta;
    std::vector<Tensor> tb;
    a.collect(ta);
    b.collect(tb);
    REQUIRE(ta.size() == tb.size());
    for (std::size_t i = 0; i < ta.size(); ++i) {
        REQUIRE(ta[i].size() == tb[i].size());
        for (std::int64_t j = 0; j < ta[i].size(); ++j) {
            CHECK(ta[i].values()[j] == tb[i].values()[j]);
        }
    }
}
