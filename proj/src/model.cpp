#include "pit/model.hpp"

#include "pit/errors.hpp"
#include "pit/serialize.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

namespace pit {

std::string to_string(SkipMode m) {
    switch (m) {
    case SkipMode::none: return "none";
    case SkipMode::skip_only: return "skip_only";
    default: return "skip_gate";
    }
}

SkipMode skip_mode_from_string(const std::string& name) {
    if (name == "none") return SkipMode::none;
    if (name == "skip_only") return SkipMode::skip_only;
    if (name == "skip_gate") return SkipMode::skip_gate;
    throw ConfigError("unknown skip mode '" + name + "' (none|skip_only|skip_gate)");
}

void PIConfig::validate() const {
    if (horizon <= 0 || window_multiple <= 0) {
        throw ConfigError("pi config: horizon and window_multiple must be positive");
    }
    transformer.validate();
}

PIModel PIModel::init(const PIConfig& config, std::uint64_t seed) {
    config.validate();
    std::mt19937_64 rng(seed);
    PIModel model;
    model.config = config;
    const std::int64_t d = config.transformer.d_model;
    model.w_in = init_weight(1, d, rng);
    model.w_in.set_label("w_in");
    model.w_out = init_weight(d, 1, rng);
    model.w_out.set_label("w_out");
    if (config.skip_mode == SkipMode::skip_gate) {
        model.alpha = Tensor::zeros({1}, true);
        model.alpha.set_label("alpha");
    }
    model.transformer = TransformerParams::init(config.transformer, rng);
    return model;
}

std::vector<Tensor> PIModel::parameters() const {
    std::vector<Tensor> out;
    out.push_back(w_in);
    out.push_back(w_out);
    if (alpha.defined()) {
        out.push_back(alpha);
    }
    transformer.collect(out);
    return out;
}

std::int64_t PIModel::parameter_count() const {
    return 2 * config.transformer.d_model + (alpha.defined() ? 1 : 0) +
           transformer_parameter_count(config.transformer);
}

std::pair<std::vector<double>, NormalizationState>
normalize(std::span<const double> window, int input_len, int horizon,
          std::span<const std::uint8_t> mask, const std::string& series_id) {
    if (static_cast<int>(window.size()) < input_len || input_len < horizon || horizon <= 0) {
        throw DataError("normalize: window of length " + std::to_string(window.size()) +
                        " cannot hold input portion " + std::to_string(input_len) +
                        " with horizon " + std::to_string(horizon));
    }
    const std::string where = series_id.empty() ? std::string{} : " in series " + series_id;
    for (const double v : window) {
        if (!(v > 0.0) || !std::isfinite(v)) {
            throw DataError("normalize: non-positive value " + std::to_string(v) + where);
        }
    }

    double total = 0.0;
    int count = 0;
    for (int i = input_len - horizon; i < input_len; ++i) {
        if (mask.empty() || mask[static_cast<std::size_t>(i)]) {
            total += window[static_cast<std::size_t>(i)];
            ++count;
        }
    }
    if (count == 0) {
        // fully padded tail of the input portion; fall back to whatever is observed
        for (int i = 0; i < input_len; ++i) {
            if (mask[static_cast<std::size_t>(i)]) {
                total += window[static_cast<std::size_t>(i)];
                ++count;
            }
        }
    }
    if (count == 0) {
        throw DataError("normalize: window has no observed values" + where);
    }

    NormalizationState state{total / static_cast<double>(count)};
    std::vector<double> z(window.size());
    for (std::size_t i = 0; i < window.size(); ++i) {
        z[i] = std::log(window[i] / state.mu);
    }
    return {std::move(z), state};
}

std::vector<double> denormalize(std::span<const double> z, const NormalizationState& state) {
    std::vector<double> out(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
        out[i] = state.mu * std::exp(z[i]);
    }
    return out;
}

Tensor denormalize(const Tensor& z, const Tensor& mu_col) {
    return mul(exp(z), mu_col);
}

NormalizedBatch normalize_batch(const std::vector<std::vector<double>>& windows,
                                const std::vector<std::vector<std::uint8_t>>& masks, int input_len,
                                int horizon) {
    if (windows.empty()) {
        throw DataError("normalize_batch: empty batch");
    }
    const std::size_t len = windows.front().size();
    NormalizedBatch batch;
    std::vector<double> z_values;
    z_values.reserve(windows.size() * len);
    std::vector<double> mu_values;
    mu_values.reserve(windows.size());
    for (std::size_t i = 0; i < windows.size(); ++i) {
        if (windows[i].size() != len) {
            throw ShapeError("normalize_batch: ragged window lengths");
        }
        std::span<const std::uint8_t> mask;
        if (i < masks.size() && !masks[i].empty()) {
            mask = masks[i];
        }
        auto [z, state] = normalize(windows[i], input_len, horizon, mask);
        z_values.insert(z_values.end(), z.begin(), z.end());
        mu_values.push_back(state.mu);
        batch.states.push_back(state);
    }
    const auto rows = static_cast<std::int64_t>(windows.size());
    batch.z = Tensor::from_values({rows, static_cast<std::int64_t>(len)}, std::move(z_values));
    batch.mu = Tensor::from_values({rows, 1}, std::move(mu_values));
    return batch;
}

Tensor pi_forward(const Tensor& z, const PIModel& model) {
    if (z.rank() != 2) {
        throw ShapeError("pi_forward: expected [batch, len], got " + shape_str(z.shape()));
    }
    const auto& config = model.config;
    const std::int64_t batch = z.dim(0);
    const std::int64_t len = z.dim(1);

    Tensor x = matmul(reshape(z, {batch, len, 1}), model.w_in);
    if (config.transformer.pos_encoding == PosEncoding::sinusoidal) {
        x = add(x, sinusoidal_table(len, config.transformer.d_model));
    }
    x = transformer_forward(x, config.transformer, model.transformer);
    Tensor g = reshape(matmul(x, model.w_out), {batch, len});

    switch (config.skip_mode) {
    case SkipMode::none: return g;
    case SkipMode::skip_only: return add(z, g);
    default: return add(z, mul(g, model.alpha));
    }
}

std::vector<double> forecast(std::span<const double> window, const PIModel& model,
                             std::span<const std::uint8_t> mask) {
    const auto& config = model.config;
    if (static_cast<int>(window.size()) != config.input_len()) {
        throw DataError("forecast: window length " + std::to_string(window.size()) +
                        ", expected nH = " + std::to_string(config.input_len()));
    }
    auto [z, state] = normalize(window, config.input_len(), config.horizon, mask);

    NoGradGuard guard;
    std::vector<double> sequence = std::move(z);
    std::vector<double> generated(static_cast<std::size_t>(config.horizon));
    for (int step = 0; step < config.horizon; ++step) {
        Tensor zt = Tensor::from_values({1, static_cast<std::int64_t>(sequence.size())},
                                        std::vector<double>(sequence));
        Tensor out = pi_forward(zt, model);
        const double next = out.values()[static_cast<std::size_t>(out.size() - 1)];
        if (!std::isfinite(next)) {
            throw NumericError("forecast: non-finite prediction at step " + std::to_string(step));
        }
        generated[static_cast<std::size_t>(step)] = next;
        if (step + 1 < config.horizon) {
            sequence.push_back(next);
        }
    }
    return denormalize(generated, state);
}

std::vector<double> teacher_forced_predictions(std::span<const double> subseq,
                                               const PIModel& model) {
    const auto& config = model.config;
    if (static_cast<int>(subseq.size()) != config.subseq_len()) {
        throw DataError("teacher forcing: sub-sequence length " + std::to_string(subseq.size()) +
                        ", expected nH + H = " + std::to_string(config.subseq_len()));
    }
    auto [z, state] = normalize(subseq, config.input_len(), config.horizon);

    NoGradGuard guard;
    const std::int64_t fed_len = config.subseq_len() - 1;
    Tensor zt = Tensor::from_values({1, fed_len},
                                    std::vector<double>(z.begin(), z.begin() + fed_len));
    Tensor out = pi_forward(zt, model);
    std::vector<double> predictions(static_cast<std::size_t>(config.horizon));
    for (int j = 0; j < config.horizon; ++j) {
        predictions[static_cast<std::size_t>(j)] =
            out.values()[static_cast<std::size_t>(config.input_len() - 1 + j)];
    }
    return denormalize(predictions, state);
}

Tensor teacher_forced_predictions(const Tensor& z, const Tensor& mu, const PIModel& model) {
    const auto& config = model.config;
    if (z.rank() != 2 || z.dim(1) != config.subseq_len()) {
        throw ShapeError("teacher forcing: expected [batch, " +
                         std::to_string(config.subseq_len()) + "], got " + shape_str(z.shape()));
    }
    Tensor fed = slice(z, 1, 0, config.subseq_len() - 1);
    Tensor out = pi_forward(fed, model);
    Tensor pz = slice(out, 1, config.input_len() - 1, config.horizon);
    return denormalize(pz, mu);
}

// ---- config serialization ----

nlohmann::json to_json(const TransformerConfig& config) {
    return {
        {"n_layers", config.n_layers},   {"n_heads", config.n_heads},
        {"d_model", config.d_model},     {"d_ff", config.d_ff},
        {"connector", to_string(config.connector)},
        {"pos_encoding", to_string(config.pos_encoding)},
    };
}

TransformerConfig transformer_config_from_json(const nlohmann::json& j) {
    TransformerConfig config;
    config.n_layers = j.at("n_layers").get<int>();
    config.n_heads = j.at("n_heads").get<int>();
    config.d_model = j.at("d_model").get<int>();
    config.d_ff = j.at("d_ff").get<int>();
    config.connector = connector_from_string(j.at("connector").get<std::string>());
    config.pos_encoding = pos_encoding_from_string(j.at("pos_encoding").get<std::string>());
    return config;
}

nlohmann::json to_json(const PIConfig& config) {
    return {
        {"horizon", config.horizon},
        {"window_multiple", config.window_multiple},
        {"skip_mode", to_string(config.skip_mode)},
        {"transformer", to_json(config.transformer)},
    };
}

PIConfig pi_config_from_json(const nlohmann::json& j) {
    PIConfig config;
    config.horizon = j.at("horizon").get<int>();
    config.window_multiple = j.at("window_multiple").get<int>();
    config.skip_mode = skip_mode_from_string(j.at("skip_mode").get<std::string>());
    config.transformer = transformer_config_from_json(j.at("transformer"));
    return config;
}

// ---- checkpoints ----

namespace {

constexpr char kMagic[8] = {'P', 'I', 'T', 'C', 'K', 'P', 'T', '1'};

void write_u64(std::ostream& out, std::uint64_t value) {
    unsigned char bytes[8];
    for (int i = 0; i < 8; ++i) {
        bytes[i] = static_cast<unsigned char>((value >> (8 * i)) & 0xff);
    }
    out.write(reinterpret_cast<const char*>(bytes), 8);
}

std::uint64_t read_u64(std::istream& in) {
    unsigned char bytes[8];
    in.read(reinterpret_cast<char*>(bytes), 8);
    std::uint64_t value = 0;
    for (int i = 0; i < 8; ++i) {
        value |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    }
    return value;
}

} // namespace

void save_checkpoint(const std::string& path, const PIModel& model, const TrainingMeta& meta) {
    nlohmann::json header;
    header["format_version"] = 1;
    header["config"] = to_json(model.config);
    header["meta"] = {{"epoch", meta.epoch}, {"seed", meta.seed}};
    if (std::isfinite(meta.validation_loss)) {
        header["meta"]["validation_loss"] = meta.validation_loss;
    } else {
        header["meta"]["validation_loss"] = nullptr;
    }
    auto params = model.parameters();
    nlohmann::json manifest = nlohmann::json::array();
    for (const auto& p : params) {
        manifest.push_back({{"name", p.label()}, {"shape", p.shape()}});
    }
    header["tensors"] = manifest;

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw DataError("checkpoint: cannot open '" + path + "' for writing");
    }
    out.write(kMagic, sizeof(kMagic));
    const std::string header_text = header.dump();
    write_u64(out, header_text.size());
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    for (auto& p : params) {
        const auto values = p.values();
        out.write(reinterpret_cast<const char*>(values.data()),
                  static_cast<std::streamsize>(values.size() * sizeof(double)));
    }
    if (!out) {
        throw DataError("checkpoint: write to '" + path + "' failed");
    }
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("checkpoint: cannot open '" + path + "'");
    }
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0) {
        throw DataError("checkpoint: '" + path + "' is not a checkpoint file");
    }
    const std::uint64_t header_len = read_u64(in);
    std::string header_text(header_len, '\0');
    in.read(header_text.data(), static_cast<std::streamsize>(header_len));
    if (!in) {
        throw DataError("checkpoint: truncated header in '" + path + "'");
    }
    nlohmann::json header = nlohmann::json::parse(header_text);
    if (header.at("format_version").get<int>() != 1) {
        throw DataError("checkpoint: unsupported format version");
    }

    Checkpoint result;
    result.meta.epoch = header.at("meta").at("epoch").get<int>();
    result.meta.seed = header.at("meta").at("seed").get<std::uint64_t>();
    const auto& vl = header.at("meta").at("validation_loss");
    result.meta.validation_loss =
        vl.is_null() ? std::numeric_limits<double>::quiet_NaN() : vl.get<double>();

    const PIConfig config = pi_config_from_json(header.at("config"));
    result.model = PIModel::init(config, result.meta.seed);

    auto params = result.model.parameters();
    const auto& manifest = header.at("tensors");
    if (manifest.size() != params.size()) {
        throw DataError("checkpoint: tensor manifest size mismatch");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto name = manifest[i].at("name").get<std::string>();
        const auto shape = manifest[i].at("shape").get<Shape>();
        if (name != params[i].label() || shape != params[i].shape()) {
            throw DataError("checkpoint: tensor " + std::to_string(i) + " ('" + name +
                            "') does not match model layout ('" + params[i].label() + "')");
        }
        auto raw = params[i].raw();
        in.read(reinterpret_cast<char*>(raw.data()),
                static_cast<std::streamsize>(raw.size() * sizeof(double)));
    }
    if (!in) {
        throw DataError("checkpoint: truncated tensor data in '" + path + "'");
    }
    return result;
}

} // namespace pit
