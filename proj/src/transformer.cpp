#include "pit/transformer.hpp"

#include "pit/errors.hpp"

#include <cmath>
#include <sstream>

namespace pit {

std::string to_string(Connector c) {
    switch (c) {
    case Connector::rezero: return "rezero";
    case Connector::pre_ln: return "pre_ln";
    default: return "post_ln";
    }
}

std::string to_string(PosEncoding p) {
    return p == PosEncoding::rotary ? "rotary" : "sinusoidal";
}

Connector connector_from_string(const std::string& name) {
    if (name == "rezero") return Connector::rezero;
    if (name == "pre_ln") return Connector::pre_ln;
    if (name == "post_ln") return Connector::post_ln;
    throw ConfigError("unknown connector '" + name + "' (rezero|pre_ln|post_ln)");
}

PosEncoding pos_encoding_from_string(const std::string& name) {
    if (name == "rotary") return PosEncoding::rotary;
    if (name == "sinusoidal") return PosEncoding::sinusoidal;
    throw ConfigError("unknown positional encoding '" + name + "' (rotary|sinusoidal)");
}

void TransformerConfig::validate() const {
    if (n_layers <= 0 || n_heads <= 0 || d_model <= 0 || d_ff <= 0) {
        throw ConfigError("transformer config: sizes must be positive");
    }
    if (d_model % n_heads != 0) {
        throw ConfigError("transformer config: d_model " + std::to_string(d_model) +
                          " not divisible by n_heads " + std::to_string(n_heads));
    }
    if (pos_encoding == PosEncoding::rotary && d_qk() % 2 != 0) {
        throw ConfigError("rotary encoding requires even d_qk, got " + std::to_string(d_qk()));
    }
}

Tensor init_weight(std::int64_t fan_in, std::int64_t fan_out, std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> values(static_cast<std::size_t>(fan_in * fan_out));
    for (auto& v : values) {
        v = dist(rng);
    }
    return Tensor::from_values({fan_in, fan_out}, std::move(values), true);
}

TransformerParams TransformerParams::init(const TransformerConfig& config, std::mt19937_64& rng) {
    config.validate();
    const std::int64_t d = config.d_model;
    const std::int64_t dqk = config.d_qk();
    const std::int64_t dff = config.d_ff;
    const bool uses_ln = config.connector != Connector::rezero;

    TransformerParams params;
    params.layers.resize(static_cast<std::size_t>(config.n_layers));
    for (int l = 0; l < config.n_layers; ++l) {
        auto& layer = params.layers[static_cast<std::size_t>(l)];
        const std::string prefix = "layer" + std::to_string(l) + ".";
        for (int h = 0; h < config.n_heads; ++h) {
            const std::string head = "head" + std::to_string(h) + ".";
            layer.w_q.push_back(init_weight(d, dqk, rng).set_label(prefix + head + "w_q"));
            layer.w_k.push_back(init_weight(d, dqk, rng).set_label(prefix + head + "w_k"));
            layer.w_v.push_back(init_weight(d, dqk, rng).set_label(prefix + head + "w_v"));
        }
        layer.w_o = init_weight(d, d, rng).set_label(prefix + "w_o");
        layer.ff_w1 = init_weight(d, dff, rng).set_label(prefix + "ff_w1");
        layer.ff_b1 = Tensor::zeros({dff}, true).set_label(prefix + "ff_b1");
        layer.ff_w2 = init_weight(dff, d, rng).set_label(prefix + "ff_w2");
        layer.ff_b2 = Tensor::zeros({d}, true).set_label(prefix + "ff_b2");
        if (config.connector == Connector::rezero) {
            layer.alpha = Tensor::zeros({1}, true).set_label(prefix + "alpha");
        }
        if (uses_ln) {
            layer.attn_gain = Tensor::full({d}, 1.0, true).set_label(prefix + "attn_gain");
            layer.attn_bias = Tensor::zeros({d}, true).set_label(prefix + "attn_bias");
            layer.ff_gain = Tensor::full({d}, 1.0, true).set_label(prefix + "ff_gain");
            layer.ff_bias = Tensor::zeros({d}, true).set_label(prefix + "ff_bias");
        }
    }
    if (config.connector == Connector::pre_ln) {
        params.final_gain = Tensor::full({d}, 1.0, true).set_label("final_gain");
        params.final_bias = Tensor::zeros({d}, true).set_label("final_bias");
    }
    return params;
}

void TransformerParams::collect(std::vector<Tensor>& out) const {
    for (const auto& layer : layers) {
        for (const auto& t : layer.w_q) out.push_back(t);
        for (const auto& t : layer.w_k) out.push_back(t);
        for (const auto& t : layer.w_v) out.push_back(t);
        out.push_back(layer.w_o);
        out.push_back(layer.ff_w1);
        out.push_back(layer.ff_b1);
        out.push_back(layer.ff_w2);
        out.push_back(layer.ff_b2);
        if (layer.alpha.defined()) out.push_back(layer.alpha);
        if (layer.attn_gain.defined()) {
            out.push_back(layer.attn_gain);
            out.push_back(layer.attn_bias);
            out.push_back(layer.ff_gain);
            out.push_back(layer.ff_bias);
        }
    }
    if (final_gain.defined()) {
        out.push_back(final_gain);
        out.push_back(final_bias);
    }
}

std::int64_t transformer_parameter_count(const TransformerConfig& config) {
    const std::int64_t d = config.d_model;
    const std::int64_t dqk = config.d_qk();
    const std::int64_t dff = config.d_ff;
    std::int64_t per_layer = 3 * config.n_heads * d * dqk // per-head projections
                             + d * d                      // output projection
                             + d * dff + dff + dff * d + d; // feed forward
    if (config.connector == Connector::rezero) {
        per_layer += 1;
    } else {
        per_layer += 4 * d; // two gain/bias pairs
    }
    std::int64_t total = per_layer * config.n_layers;
    if (config.connector == Connector::pre_ln) {
        total += 2 * d;
    }
    return total;
}

namespace {

// (x_{2i}, x_{2i+1}) -> (-x_{2i+1}, x_{2i}) along the last axis.
Tensor swap_pairs_negate(const Tensor& x) {
    const std::int64_t d = x.dim(-1);
    Shape paired = x.shape();
    paired.back() = d / 2;
    paired.push_back(2);
    Tensor p = reshape(x, paired);
    Tensor even = slice(p, -1, 0, 1);
    Tensor odd = slice(p, -1, 1, 1);
    Tensor rotated = concat({scalar_mul(odd, -1.0), even}, -1);
    return reshape(rotated, x.shape());
}

// cos/sin tables shaped [len, d_qk]: column 2i and 2i+1 carry the angle
// m * theta_i of position m.
std::pair<Tensor, Tensor> rotary_tables(std::int64_t len, std::int64_t d_qk) {
    std::vector<double> cos_v(static_cast<std::size_t>(len * d_qk));
    std::vector<double> sin_v(static_cast<std::size_t>(len * d_qk));
    for (std::int64_t m = 0; m < len; ++m) {
        for (std::int64_t i = 0; i < d_qk / 2; ++i) {
            const double theta =
                std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(d_qk));
            const double angle = static_cast<double>(m) * theta;
            cos_v[m * d_qk + 2 * i] = std::cos(angle);
            cos_v[m * d_qk + 2 * i + 1] = std::cos(angle);
            sin_v[m * d_qk + 2 * i] = std::sin(angle);
            sin_v[m * d_qk + 2 * i + 1] = std::sin(angle);
        }
    }
    return {Tensor::from_values({len, d_qk}, std::move(cos_v)),
            Tensor::from_values({len, d_qk}, std::move(sin_v))};
}

} // namespace

Tensor rotate_positions(const Tensor& x) {
    if (x.rank() < 2) {
        throw ShapeError("rotary: input must be [..., len, d_qk], got " + shape_str(x.shape()));
    }
    const std::int64_t d_qk = x.dim(-1);
    if (d_qk % 2 != 0) {
        throw ConfigError("rotary: d_qk must be even, got " + std::to_string(d_qk));
    }
    const std::int64_t len = x.dim(-2);
    auto [cos_t, sin_t] = rotary_tables(len, d_qk);
    return add(mul(x, cos_t), mul(swap_pairs_negate(x), sin_t));
}

std::pair<Tensor, Tensor> apply_rotary(const Tensor& q, const Tensor& k) {
    return {rotate_positions(q), rotate_positions(k)};
}

Tensor sinusoidal_table(std::int64_t len, std::int64_t d_model) {
    std::vector<double> values(static_cast<std::size_t>(len * d_model));
    for (std::int64_t i = 0; i < len; ++i) {
        for (std::int64_t j = 0; j < d_model; ++j) {
            const double exponent =
                static_cast<double>(j % 2 == 0 ? j : j - 1) / static_cast<double>(d_model);
            const double arg = static_cast<double>(i) / std::pow(10000.0, exponent);
            values[i * d_model + j] = j % 2 == 0 ? std::sin(arg) : std::cos(arg);
        }
    }
    return Tensor::from_values({len, d_model}, std::move(values));
}

Tensor causal_mask(std::int64_t len) {
    std::vector<double> values(static_cast<std::size_t>(len * len), 0.0);
    for (std::int64_t i = 0; i < len; ++i) {
        for (std::int64_t j = i + 1; j < len; ++j) {
            values[i * len + j] = -1e9;
        }
    }
    return Tensor::from_values({len, len}, std::move(values));
}

Tensor feed_forward(const Tensor& x, const LayerParams& params) {
    Tensor hidden = relu(add(matmul(x, params.ff_w1), params.ff_b1));
    return add(matmul(hidden, params.ff_w2), params.ff_b2);
}

namespace {

Tensor head_scores(const Tensor& x, const LayerParams& params, const TransformerConfig& config,
                   int head) {
    const std::int64_t len = x.dim(-2);
    Tensor q = matmul(x, params.w_q[static_cast<std::size_t>(head)]);
    Tensor k = matmul(x, params.w_k[static_cast<std::size_t>(head)]);
    if (config.pos_encoding == PosEncoding::rotary) {
        std::tie(q, k) = apply_rotary(q, k);
    }
    Tensor scores = scalar_mul(matmul(q, transpose(k, -2, -1)),
                               1.0 / std::sqrt(static_cast<double>(config.d_qk())));
    return add(scores, causal_mask(len));
}

} // namespace

Tensor masked_attention_scores(const Tensor& x, const LayerParams& params,
                               const TransformerConfig& config, int head) {
    return head_scores(x, params, config, head);
}

Tensor causal_self_attention(const Tensor& x, const LayerParams& params,
                             const TransformerConfig& config) {
    if (x.rank() < 2 || x.dim(-1) != config.d_model) {
        throw ShapeError("attention: expected [..., len, d_model=" +
                         std::to_string(config.d_model) + "], got " + shape_str(x.shape()));
    }
    std::vector<Tensor> heads;
    heads.reserve(static_cast<std::size_t>(config.n_heads));
    for (int h = 0; h < config.n_heads; ++h) {
        Tensor attn = softmax(head_scores(x, params, config, h), -1);
        Tensor v = matmul(x, params.w_v[static_cast<std::size_t>(h)]);
        heads.push_back(matmul(attn, v));
    }
    return matmul(concat(heads, -1), params.w_o);
}

Tensor connector_apply(const Tensor& x, const std::function<Tensor(const Tensor&)>& sublayer,
                       Connector mode, const ConnectorParams& params) {
    switch (mode) {
    case Connector::rezero:
        return add(x, mul(sublayer(x), params.alpha));
    case Connector::post_ln:
        return layer_norm(add(x, sublayer(x)), params.gain, params.bias);
    default:
        return add(x, sublayer(layer_norm(x, params.gain, params.bias)));
    }
}

Tensor transformer_forward(const Tensor& x, const TransformerConfig& config,
                           const TransformerParams& params) {
    config.validate();
    if (params.layers.size() != static_cast<std::size_t>(config.n_layers)) {
        throw ConfigError("transformer: params carry " + std::to_string(params.layers.size()) +
                          " layers, config expects " + std::to_string(config.n_layers));
    }
    Tensor state = x;
    for (int l = 0; l < config.n_layers; ++l) {
        const auto& layer = params.layers[static_cast<std::size_t>(l)];
        const ConnectorParams attn_conn{layer.alpha, layer.attn_gain, layer.attn_bias};
        const ConnectorParams ff_conn{layer.alpha, layer.ff_gain, layer.ff_bias};
        try {
            state = connector_apply(
                state, [&](const Tensor& in) { return causal_self_attention(in, layer, config); },
                config.connector, attn_conn);
            state = connector_apply(
                state, [&](const Tensor& in) { return feed_forward(in, layer); },
                config.connector, ff_conn);
        } catch (const NumericError& e) {
            throw NumericError("layer " + std::to_string(l) + ": " + e.what());
        }
        if (!all_finite(state.values())) {
            throw NumericError("layer " + std::to_string(l) + ": non-finite activations");
        }
    }
    if (config.connector == Connector::pre_ln) {
        state = layer_norm(state, params.final_gain, params.final_bias);
    }
    return state;
}

} // namespace pit
