#pragma once

#include "pit/tensor.hpp"
#include "pit/transformer.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace pit {

// Forecast head variants: h(z) = g(z), z + g(z), or z + alpha * g(z).
enum class SkipMode { none, skip_only, skip_gate };

std::string to_string(SkipMode m);
SkipMode skip_mode_from_string(const std::string& name);

struct PIConfig {
    int horizon = 48;        // H
    int window_multiple = 4; // n
    SkipMode skip_mode = SkipMode::skip_gate;
    TransformerConfig transformer;

    int input_len() const { return window_multiple * horizon; } // nH
    int subseq_len() const { return input_len() + horizon; }    // nH + H
    void validate() const;
};

// The forecasting model: bias-free univariate projections around the decoder
// stack, plus the global skip/gate wrapper. With skip_gate the gate starts at
// exactly 0, so the untrained model is the naive persistence forecaster.
struct PIModel {
    PIConfig config;
    Tensor w_in;  // [1 x d_model]
    Tensor w_out; // [d_model x 1]
    Tensor alpha; // [1]; defined only for skip_gate, initialized to exactly 0
    TransformerParams transformer;

    static PIModel init(const PIConfig& config, std::uint64_t seed);
    // All trainable tensors in a fixed, documented order (w_in, w_out,
    // [alpha], transformer layer by layer).
    std::vector<Tensor> parameters() const;
    std::int64_t parameter_count() const;
};

// Per-window normalization constant: mean of the H most recent values of the
// window's input portion. Positive by construction (M4 values are positive).
struct NormalizationState {
    double mu = 0.0;
};

// z = ln(x / mu). `input_len` marks the input portion within the window; mu
// averages its last `horizon` values (unmasked ones when a pad mask is
// given). Rejects non-positive values.
std::pair<std::vector<double>, NormalizationState>
normalize(std::span<const double> window, int input_len, int horizon,
          std::span<const std::uint8_t> mask = {}, const std::string& series_id = {});

// x = mu * exp(z), the inverse transform in plain data space.
std::vector<double> denormalize(std::span<const double> z, const NormalizationState& state);

// Differentiable inverse transform: mu_col is [batch, 1], z is [batch, ...].
// Gradients propagate through to z.
Tensor denormalize(const Tensor& z, const Tensor& mu_col);

// Normalized windows stacked for a batched forward pass.
struct NormalizedBatch {
    Tensor z;  // [batch, len]
    Tensor mu; // [batch, 1]
    std::vector<NormalizationState> states;
};

NormalizedBatch normalize_batch(const std::vector<std::vector<double>>& windows,
                                const std::vector<std::vector<std::uint8_t>>& masks, int input_len,
                                int horizon);

// One-step-ahead predictions in normalized space: output at position t is the
// prediction for position t+1. z is [batch, len].
Tensor pi_forward(const Tensor& z, const PIModel& model);

// Autoregressive decoding: normalizes the raw window once, generates H steps
// by feeding each prediction back in, and denormalizes with the same mu.
std::vector<double> forecast(std::span<const double> window, const PIModel& model,
                             std::span<const std::uint8_t> mask = {});

// Teacher-forced predictions for a raw sub-sequence of length nH + H: the
// model conditions on ground truth everywhere and the last H one-step
// outputs, denormalized, are the predictions.
std::vector<double> teacher_forced_predictions(std::span<const double> subseq,
                                               const PIModel& model);

// Batched, differentiable teacher forcing used by the training loop; returns
// raw-space predictions [batch, H].
Tensor teacher_forced_predictions(const Tensor& z, const Tensor& mu, const PIModel& model);

struct TrainingMeta {
    int epoch = 0;
    double validation_loss = 0.0;
    std::uint64_t seed = 0;
};

struct Checkpoint {
    PIModel model;
    TrainingMeta meta;
};

// Binary container: magic, JSON header (config, metadata, tensor manifest),
// then raw little-endian doubles per tensor. Round trips bit-exactly.
void save_checkpoint(const std::string& path, const PIModel& model, const TrainingMeta& meta);
Checkpoint load_checkpoint(const std::string& path);

} // namespace pit
