#pragma once

// Instrumented miniature decoder-only transformer: gated SiLU FFN, causal
// multi-head self-attention, residual stream, tied embedding lens.

#include "ia/trace.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

namespace ia {

// Dense row-major matrix used for weights and hidden streams.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    double &operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
};

// x (n x k) times w (k x m).
Matrix matmul(const Matrix &x, const Matrix &w);

struct LayerWeights {
    Matrix w_gate; // d_model x d_inter
    Matrix w_up;   // d_model x d_inter
    Matrix w_down; // d_inter x d_model
    Matrix w_q;    // d_model x d_mid
    Matrix w_k;    // d_model x d_mid
    Matrix w_v;    // d_model x d_mid
};

struct DecoderWeights {
    ModelConfig config;
    Matrix embedding; // vocab_size x d_model
    std::vector<LayerWeights> layers;

    // Throws ShapeError / ValidationError on mismatched shapes, non-finite
    // entries, or d_mid != d_model.
    void check() const;
};

// All-zero weights of the right shapes.
DecoderWeights zero_weights(const ModelConfig &config);

// Every entry uniform in [-scale, scale], rounded to f32 so the weights
// survive a file round trip unchanged. Deterministic for a given seed.
// Throws like DecoderWeights::check on an invalid config.
DecoderWeights random_weights(const ModelConfig &config, std::uint64_t seed, double scale = 0.1);

// Hidden state stream: one row per sequence position.
using HiddenStream = Matrix;

struct Distribution {
    std::vector<double> probs;
};

double silu(double y);

// Numerically safe softmax (max subtraction). Throws ShapeError on empty input.
std::vector<double> softmax(std::span<const double> v);

// log(softmax(v)) without forming the probabilities.
std::vector<double> log_softmax(std::span<const double> v);

struct FfnResult {
    HiddenStream output;
    Matrix up_projection; // x W_up, seq_len x d_inter
};

FfnResult ffn_forward(const HiddenStream &x, const LayerWeights &w);

struct MhsaResult {
    HiddenStream output; // seq_len x d_mid, heads concatenated
    // attention[h] is seq_len x seq_len; row t holds the probabilities query t
    // assigns to keys 0..seq_len-1 (zero for keys after t when causal).
    std::vector<Matrix> attention;
};

MhsaResult mhsa_forward(const HiddenStream &x, const LayerWeights &w, std::uint32_t num_heads,
                        bool causal = true);

struct DecoderOptions {
    bool residual = true;
    // Defaults to the last prompt position.
    std::optional<std::uint32_t> probe_position;
};

// Runs the prompt and records probe-position activations for every layer.
// The returned trace has empty prompt_id/constraints and answer token 0; the
// caller fills those in.
ActivationTrace decoder_forward(std::span<const std::uint32_t> token_ids, const DecoderWeights &weights,
                                const DecoderOptions &options = {});

// Final hidden state at the last position, for generation.
std::vector<double> final_hidden(std::span<const std::uint32_t> token_ids, const DecoderWeights &weights,
                                 const DecoderOptions &options = {});

LensMatrix lens_from_weights(const DecoderWeights &weights);

// softmax(E h): logits are the inner products of h with every embedding row.
Distribution logit_lens(std::span<const double> h, const LensMatrix &lens);
Distribution logit_lens(std::span<const float> h, const LensMatrix &lens);

// Natural-log probabilities from the lens, exact in the tails.
std::vector<double> logit_lens_log(std::span<const float> h, const LensMatrix &lens);

// Argmax with lowest-index tie-break.
std::uint32_t greedy_decode(const Distribution &p);

// Greedy generation of up to max_tokens tokens, stopping early when the
// predicate accepts a produced token (the stop token is not returned).
template <typename StopFn>
std::vector<std::uint32_t> greedy_generate(std::vector<std::uint32_t> prompt, const DecoderWeights &weights,
                                           const LensMatrix &lens, std::size_t max_tokens, StopFn &&stop,
                                           const DecoderOptions &options = {}) {
    std::vector<std::uint32_t> out;
    DecoderOptions opts = options;
    opts.probe_position.reset();
    for (std::size_t i = 0; i < max_tokens && prompt.size() < weights.config.max_seq_len; ++i) {
        const auto h = final_hidden(prompt, weights, opts);
        const std::uint32_t next = greedy_decode(logit_lens(h, lens));
        if (stop(next)) break;
        out.push_back(next);
        prompt.push_back(next);
    }
    return out;
}

// IAWT weight file: "IAWT" u16 version, seven u32 config fields, embedding,
// then per layer W_gate, W_up, W_down, W_Q, W_K, W_V; row-major f32 LE.
std::size_t write_weights(const DecoderWeights &weights, std::ostream &sink);
DecoderWeights read_weights(std::istream &source);
DecoderWeights read_weights(const std::filesystem::path &path);

} // namespace ia
