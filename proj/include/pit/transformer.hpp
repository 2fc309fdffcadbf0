#pragma once

#include "pit/tensor.hpp"

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace pit {

// Residual connector around each sublayer.
enum class Connector { rezero, pre_ln, post_ln };
// How position information enters attention.
enum class PosEncoding { rotary, sinusoidal };

std::string to_string(Connector c);
std::string to_string(PosEncoding p);
Connector connector_from_string(const std::string& name);
PosEncoding pos_encoding_from_string(const std::string& name);

struct TransformerConfig {
    int n_layers = 4;
    int n_heads = 4;
    int d_model = 32;
    int d_ff = 128;
    Connector connector = Connector::rezero;
    PosEncoding pos_encoding = PosEncoding::rotary;

    int d_qk() const { return d_model / n_heads; }
    void validate() const;
};

// Per-layer weights. One ReZero gate per layer, shared by that layer's
// attention and feed-forward sublayers; the LayerNorm gain/bias pairs exist
// only for the pre_ln / post_ln connectors.
struct LayerParams {
    std::vector<Tensor> w_q; // per head, [d_model x d_qk]
    std::vector<Tensor> w_k;
    std::vector<Tensor> w_v;
    Tensor w_o; // [d_model x d_model]
    Tensor ff_w1;
    Tensor ff_b1;
    Tensor ff_w2;
    Tensor ff_b2;
    Tensor alpha; // [1], initialized to exactly 0
    Tensor attn_gain;
    Tensor attn_bias;
    Tensor ff_gain;
    Tensor ff_bias;
};

struct TransformerParams {
    std::vector<LayerParams> layers;
    // Closing LayerNorm, pre_ln convention only.
    Tensor final_gain;
    Tensor final_bias;

    static TransformerParams init(const TransformerConfig& config, std::mt19937_64& rng);
    // Appends every parameter tensor in a fixed, documented order.
    void collect(std::vector<Tensor>& out) const;
};

// Uniform fan-in initialization U(-1/sqrt(fan_in), +1/sqrt(fan_in)).
Tensor init_weight(std::int64_t fan_in, std::int64_t fan_out, std::mt19937_64& rng);

// Rotates consecutive coordinate pairs (2i, 2i+1) of each position m by the
// angle m * theta_i, theta_i = 10000^(-2i/d_qk). Applied to queries and keys
// only; preserves norms, and makes attention scores depend on relative
// offsets. Inputs are [..., len, d_qk] with even d_qk.
std::pair<Tensor, Tensor> apply_rotary(const Tensor& q, const Tensor& k);
Tensor rotate_positions(const Tensor& x);

// E[i][j] = sin(i / 10000^(j/d_model)) for even j, cos with (j-1) for odd j.
Tensor sinusoidal_table(std::int64_t len, std::int64_t d_model);

// Additive causal mask: 0 on and below the diagonal, -1e9 above. The large
// negative constant underflows to exact zero attention weight after softmax.
Tensor causal_mask(std::int64_t len);

// Position-wise ReLU(x W1 + b1) W2 + b2.
Tensor feed_forward(const Tensor& x, const LayerParams& params);

// Masked multi-head self-attention over [batch, len, d_model]; position t
// attends only to positions <= t.
Tensor causal_self_attention(const Tensor& x, const LayerParams& params,
                             const TransformerConfig& config);

// Score matrix of one head after scaling and masking (pre-softmax), exposed
// so tests can compare against per-pair brute force.
Tensor masked_attention_scores(const Tensor& x, const LayerParams& params,
                               const TransformerConfig& config, int head);

struct ConnectorParams {
    Tensor alpha;
    Tensor gain;
    Tensor bias;
};

// rezero:  x + alpha * sublayer(x)
// post_ln: LayerNorm(x + sublayer(x))
// pre_ln:  x + sublayer(LayerNorm(x))
Tensor connector_apply(const Tensor& x, const std::function<Tensor(const Tensor&)>& sublayer,
                       Connector mode, const ConnectorParams& params);

// n_layers of connector-wrapped attention then connector-wrapped feed
// forward; pre_ln closes with a final LayerNorm.
Tensor transformer_forward(const Tensor& x, const TransformerConfig& config,
                           const TransformerParams& params);

// Closed-form trainable parameter count for a config.
std::int64_t transformer_parameter_count(const TransformerConfig& config);

} // namespace pit
