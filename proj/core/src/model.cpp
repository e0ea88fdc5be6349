#include "ia/model.hpp"

#include "binary_io.hpp"
#include "ia/error.hpp"
#include "ia/random.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

namespace ia {

namespace {

constexpr char kWeightMagic[4] = {'I', 'A', 'W', 'T'};
constexpr std::uint16_t kWeightFormatVersion = 1;

void expect_shape(const Matrix &m, std::size_t rows, std::size_t cols, const char *name) {
    if (m.rows != rows || m.cols != cols || m.data.size() != rows * cols) {
        throw ShapeError(std::string(name) + " has shape " + std::to_string(m.rows) + "x" +
                         std::to_string(m.cols) + ", expected " + std::to_string(rows) + "x" +
                         std::to_string(cols));
    }
}

void expect_finite(const Matrix &m, const char *name) {
    for (double x : m.data) {
        if (!std::isfinite(x)) throw ValidationError(std::string(name) + " holds a non-finite entry");
    }
}

void fill_uniform(Matrix &m, Rng &rng, double scale) {
    for (double &x : m.data) {
        x = static_cast<double>(static_cast<float>(rng.uniform(-scale, scale)));
    }
}

void write_matrix(detail::ByteWriter &w, const Matrix &m) {
    for (double x : m.data) w.f32(static_cast<float>(x));
}

bool read_matrix(detail::ByteReader &r, Matrix &m, std::size_t rows, std::size_t cols) {
    std::vector<float> buf;
    if (!r.f32s(buf, rows * cols)) return false;
    m = Matrix(rows, cols);
    std::copy(buf.begin(), buf.end(), m.data.begin());
    return true;
}

} // namespace

Matrix matmul(const Matrix &x, const Matrix &w) {
    if (x.cols != w.rows) {
        throw ShapeError("matmul: " + std::to_string(x.rows) + "x" + std::to_string(x.cols) + " times " +
                         std::to_string(w.rows) + "x" + std::to_string(w.cols));
    }
    Matrix out(x.rows, w.cols);
    for (std::size_t i = 0; i < x.rows; ++i) {
        auto dst = out.row(i);
        for (std::size_t k = 0; k < x.cols; ++k) {
            const double a = x(i, k);
            if (a == 0.0) continue;
            const auto src = w.row(k);
            for (std::size_t j = 0; j < w.cols; ++j) dst[j] += a * src[j];
        }
    }
    return out;
}

void DecoderWeights::check() const {
    if (auto err = config.check()) throw ValidationError("invalid config: " + *err);
    if (config.d_mid != config.d_model) {
        throw ShapeError("mini decoder needs d_mid == d_model (no attention output projection); got d_mid=" +
                         std::to_string(config.d_mid) + " d_model=" + std::to_string(config.d_model));
    }
    expect_shape(embedding, config.vocab_size, config.d_model, "embedding");
    expect_finite(embedding, "embedding");
    if (layers.size() != config.num_layers) {
        throw ShapeError("weights hold " + std::to_string(layers.size()) + " layers, config says " +
                         std::to_string(config.num_layers));
    }
    for (const auto &l : layers) {
        expect_shape(l.w_gate, config.d_model, config.d_inter, "W_gate");
        expect_shape(l.w_up, config.d_model, config.d_inter, "W_up");
        expect_shape(l.w_down, config.d_inter, config.d_model, "W_down");
        expect_shape(l.w_q, config.d_model, config.d_mid, "W_Q");
        expect_shape(l.w_k, config.d_model, config.d_mid, "W_K");
        expect_shape(l.w_v, config.d_model, config.d_mid, "W_V");
        for (const auto *m : {&l.w_gate, &l.w_up, &l.w_down, &l.w_q, &l.w_k, &l.w_v}) {
            expect_finite(*m, "layer weight");
        }
    }
}

DecoderWeights zero_weights(const ModelConfig &c) {
    DecoderWeights w;
    w.config = c;
    w.embedding = Matrix(c.vocab_size, c.d_model);
    w.layers.resize(c.num_layers);
    for (auto &l : w.layers) {
        l.w_gate = Matrix(c.d_model, c.d_inter);
        l.w_up = Matrix(c.d_model, c.d_inter);
        l.w_down = Matrix(c.d_inter, c.d_model);
        l.w_q = Matrix(c.d_model, c.d_mid);
        l.w_k = Matrix(c.d_model, c.d_mid);
        l.w_v = Matrix(c.d_model, c.d_mid);
    }
    return w;
}

DecoderWeights random_weights(const ModelConfig &c, std::uint64_t seed, double scale) {
    DecoderWeights w = zero_weights(c);
    Rng rng(seed);
    fill_uniform(w.embedding, rng, scale);
    for (auto &l : w.layers) {
        for (auto *m : {&l.w_gate, &l.w_up, &l.w_down, &l.w_q, &l.w_k, &l.w_v}) fill_uniform(*m, rng, scale);
    }
    w.check();
    return w;
}

double silu(double y) {
    // split by sign so exp never overflows
    if (y >= 0.0) return y / (1.0 + std::exp(-y));
    const double e = std::exp(y);
    return y * e / (1.0 + e);
}

std::vector<double> softmax(std::span<const double> v) {
    if (v.empty()) throw ShapeError("softmax of an empty vector");
    const double m = *std::max_element(v.begin(), v.end());
    std::vector<double> out(v.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = std::exp(v[i] - m);
        sum += out[i];
    }
    for (double &x : out) x /= sum;
    return out;
}

std::vector<double> log_softmax(std::span<const double> v) {
    if (v.empty()) throw ShapeError("log_softmax of an empty vector");
    const double m = *std::max_element(v.begin(), v.end());
    double sum = 0.0;
    for (double x : v) sum += std::exp(x - m);
    const double lse = m + std::log(sum);
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] - lse;
    return out;
}

FfnResult ffn_forward(const HiddenStream &x, const LayerWeights &w) {
    if (w.w_gate.rows != x.cols || w.w_up.rows != x.cols || w.w_gate.cols != w.w_up.cols ||
        w.w_down.rows != w.w_up.cols) {
        throw ShapeError("ffn_forward: weight shapes do not match input width " + std::to_string(x.cols));
    }
    const Matrix gate = matmul(x, w.w_gate);
    FfnResult r;
    r.up_projection = matmul(x, w.w_up);
    Matrix act(gate.rows, gate.cols);
    for (std::size_t i = 0; i < act.data.size(); ++i) {
        act.data[i] = silu(gate.data[i]) * r.up_projection.data[i];
    }
    r.output = matmul(act, w.w_down);
    return r;
}

MhsaResult mhsa_forward(const HiddenStream &x, const LayerWeights &w, std::uint32_t num_heads, bool causal) {
    const std::size_t d_mid = w.w_q.cols;
    if (w.w_q.rows != x.cols || w.w_k.rows != x.cols || w.w_v.rows != x.cols || w.w_k.cols != d_mid ||
        w.w_v.cols != d_mid) {
        throw ShapeError("mhsa_forward: weight shapes do not match input width " + std::to_string(x.cols));
    }
    if (num_heads == 0 || d_mid % num_heads != 0) {
        throw ShapeError("mhsa_forward: d_mid " + std::to_string(d_mid) + " not divisible by " +
                         std::to_string(num_heads) + " heads");
    }
    const std::size_t seq = x.rows;
    const std::size_t hd = d_mid / num_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    const Matrix q = matmul(x, w.w_q);
    const Matrix k = matmul(x, w.w_k);
    const Matrix v = matmul(x, w.w_v);

    MhsaResult r;
    r.output = Matrix(seq, d_mid);
    r.attention.assign(num_heads, Matrix(seq, seq));
    std::vector<double> scores;
    for (std::size_t h = 0; h < num_heads; ++h) {
        const std::size_t off = h * hd;
        for (std::size_t t = 0; t < seq; ++t) {
            const std::size_t n_keys = causal ? t + 1 : seq;
            scores.assign(n_keys, 0.0);
            for (std::size_t j = 0; j < n_keys; ++j) {
                double s = 0.0;
                for (std::size_t d = 0; d < hd; ++d) s += q(t, off + d) * k(j, off + d);
                scores[j] = s * scale;
            }
            const auto probs = softmax(scores);
            for (std::size_t j = 0; j < n_keys; ++j) {
                r.attention[h](t, j) = probs[j];
                for (std::size_t d = 0; d < hd; ++d) r.output(t, off + d) += probs[j] * v(j, off + d);
            }
        }
    }
    return r;
}

namespace {

HiddenStream embed(std::span<const std::uint32_t> tokens, const DecoderWeights &weights) {
    const auto &c = weights.config;
    if (tokens.empty()) throw ShapeError("decoder_forward: empty prompt");
    if (tokens.size() > c.max_seq_len) {
        throw ShapeError("prompt of " + std::to_string(tokens.size()) + " tokens exceeds max_seq_len " +
                         std::to_string(c.max_seq_len));
    }
    HiddenStream h(tokens.size(), c.d_model);
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        if (tokens[t] >= c.vocab_size) {
            throw ShapeError("token " + std::to_string(tokens[t]) + " at position " + std::to_string(t) +
                             " outside vocabulary of " + std::to_string(c.vocab_size));
        }
        const auto src = weights.embedding.row(tokens[t]);
        std::copy(src.begin(), src.end(), h.row(t).begin());
    }
    return h;
}

void add_in_place(Matrix &a, const Matrix &b) {
    for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

std::vector<float> to_float(std::span<const double> v) {
    return {v.begin(), v.end()};
}

template <typename Visitor>
HiddenStream run_layers(HiddenStream h, const DecoderWeights &weights, bool residual, Visitor &&visit) {
    for (std::size_t l = 0; l < weights.layers.size(); ++l) {
        const auto &lw = weights.layers[l];
        auto att = mhsa_forward(h, lw, weights.config.num_heads, true);
        if (residual) {
            add_in_place(att.output, h);
        }
        auto ffn = ffn_forward(att.output, lw);
        if (residual) {
            add_in_place(ffn.output, att.output);
        }
        h = std::move(ffn.output);
        visit(l, h, att, ffn);
    }
    return h;
}

} // namespace

ActivationTrace decoder_forward(std::span<const std::uint32_t> token_ids, const DecoderWeights &weights,
                                const DecoderOptions &options) {
    weights.check();
    HiddenStream h = embed(token_ids, weights);
    const std::uint32_t probe = options.probe_position.value_or(static_cast<std::uint32_t>(token_ids.size() - 1));
    if (probe >= token_ids.size()) {
        throw ShapeError("probe position " + std::to_string(probe) + " outside prompt of " +
                         std::to_string(token_ids.size()) + " tokens");
    }

    ActivationTrace trace;
    trace.config = weights.config;
    trace.token_ids.assign(token_ids.begin(), token_ids.end());
    trace.probe_position = probe;
    trace.initial_hidden = to_float(h.row(probe));
    trace.layers.reserve(weights.layers.size());

    run_layers(std::move(h), weights, options.residual,
               [&](std::size_t l, const HiddenStream &out, const MhsaResult &att, const FfnResult &ffn) {
                   LayerRecord rec;
                   rec.layer_index = static_cast<std::uint32_t>(l + 1);
                   rec.hidden = to_float(out.row(probe));
                   for (const auto &a : att.attention) rec.attention_rows.push_back(to_float(a.row(probe)));
                   rec.up_projection = to_float(ffn.up_projection.row(probe));
                   trace.layers.push_back(std::move(rec));
               });
    return trace;
}

std::vector<double> final_hidden(std::span<const std::uint32_t> token_ids, const DecoderWeights &weights,
                                 const DecoderOptions &options) {
    weights.check();
    const HiddenStream out = run_layers(embed(token_ids, weights), weights, options.residual,
                                        [](std::size_t, const auto &, const auto &, const auto &) {});
    const std::size_t pos = options.probe_position.value_or(static_cast<std::uint32_t>(token_ids.size() - 1));
    const auto row = out.row(pos);
    return {row.begin(), row.end()};
}

LensMatrix lens_from_weights(const DecoderWeights &weights) {
    LensMatrix lens;
    lens.vocab_size = weights.config.vocab_size;
    lens.d_model = weights.config.d_model;
    lens.data.assign(weights.embedding.data.begin(), weights.embedding.data.end());
    return lens;
}

namespace {

template <typename T>
std::vector<double> lens_logits(std::span<const T> h, const LensMatrix &lens) {
    if (h.size() != lens.d_model) {
        throw ShapeError("logit_lens: hidden of length " + std::to_string(h.size()) + ", lens d_model " +
                         std::to_string(lens.d_model));
    }
    std::vector<double> logits(lens.vocab_size);
    for (std::size_t v = 0; v < lens.vocab_size; ++v) {
        const auto e = lens.row(v);
        double s = 0.0;
        for (std::size_t d = 0; d < h.size(); ++d) s += static_cast<double>(e[d]) * static_cast<double>(h[d]);
        logits[v] = s;
    }
    return logits;
}

} // namespace

Distribution logit_lens(std::span<const double> h, const LensMatrix &lens) {
    return {softmax(lens_logits(h, lens))};
}

Distribution logit_lens(std::span<const float> h, const LensMatrix &lens) {
    return {softmax(lens_logits(h, lens))};
}

std::vector<double> logit_lens_log(std::span<const float> h, const LensMatrix &lens) {
    return log_softmax(lens_logits(h, lens));
}

std::uint32_t greedy_decode(const Distribution &p) {
    if (p.probs.empty()) throw ShapeError("greedy_decode of an empty distribution");
    // max_element returns the first maximum, which is the lowest index
    return static_cast<std::uint32_t>(std::max_element(p.probs.begin(), p.probs.end()) - p.probs.begin());
}

std::size_t write_weights(const DecoderWeights &weights, std::ostream &sink) {
    weights.check();
    const auto &c = weights.config;
    detail::ByteWriter w;
    w.bytes(kWeightMagic, 4);
    w.u16(kWeightFormatVersion);
    for (auto f : {c.num_layers, c.d_model, c.d_inter, c.d_mid, c.num_heads, c.vocab_size, c.max_seq_len}) {
        w.u32(f);
    }
    write_matrix(w, weights.embedding);
    for (const auto &l : weights.layers) {
        for (const auto *m : {&l.w_gate, &l.w_up, &l.w_down, &l.w_q, &l.w_k, &l.w_v}) write_matrix(w, *m);
    }
    sink.write(w.buffer().data(), static_cast<std::streamsize>(w.size()));
    sink.flush();
    if (!sink) throw IoError("weight sink rejected write");
    return w.size();
}

DecoderWeights read_weights(std::istream &source) {
    detail::ByteReader r(source);
    char magic[4];
    if (!r.bytes(magic, 4)) throw CorruptionError("truncated weight header", std::nullopt);
    if (std::memcmp(magic, kWeightMagic, 4) != 0) {
        throw FormatError("bad magic: expected IAWT, found '" + std::string(magic, 4) + "'");
    }
    std::uint16_t version = 0;
    if (!r.u16(version)) throw CorruptionError("truncated weight header", std::nullopt);
    if (version != kWeightFormatVersion) {
        throw FormatError("unsupported weight format version " + std::to_string(version));
    }
    DecoderWeights w;
    auto &c = w.config;
    for (auto *f : {&c.num_layers, &c.d_model, &c.d_inter, &c.d_mid, &c.num_heads, &c.vocab_size,
                    &c.max_seq_len}) {
        if (!r.u32(*f)) throw CorruptionError("truncated weight header", std::nullopt);
    }
    if (auto err = c.check()) throw FormatError("weight header holds invalid config: " + *err);
    if (!read_matrix(r, w.embedding, c.vocab_size, c.d_model)) {
        throw CorruptionError("truncated embedding matrix", std::nullopt);
    }
    w.layers.resize(c.num_layers);
    for (std::size_t l = 0; l < c.num_layers; ++l) {
        auto &lw = w.layers[l];
        const bool ok = read_matrix(r, lw.w_gate, c.d_model, c.d_inter) &&
                        read_matrix(r, lw.w_up, c.d_model, c.d_inter) &&
                        read_matrix(r, lw.w_down, c.d_inter, c.d_model) &&
                        read_matrix(r, lw.w_q, c.d_model, c.d_mid) && read_matrix(r, lw.w_k, c.d_model, c.d_mid) &&
                        read_matrix(r, lw.w_v, c.d_model, c.d_mid);
        if (!ok) throw CorruptionError("truncated weights for layer " + std::to_string(l + 1), std::nullopt, l + 1);
    }
    w.check();
    return w;
}

DecoderWeights read_weights(const std::filesystem::path &path) {
    if (std::filesystem::is_directory(path)) throw IoError(path.string() + " is a directory");
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open weight file " + path.string());
    return read_weights(in);
}

} // namespace ia
