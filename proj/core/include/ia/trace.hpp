#pragma once

// Activation trace data model and the IATR / IALN binary formats.
//
// Trace file layout (all integers little-endian, floats IEEE-754 f32 LE):
//
//   header   "IATR" u16 version=1
//            u32 L, d_model, d_inter, d_mid, H, vocab_size, max_seq_len
//            u32 record_count
//   record   u16 id_len, id bytes (UTF-8)
//            u32 seq_len, u32 token_ids[seq_len]
//            u32 probe_position
//            u16 constraint_count, u32 constraint_positions[count]
//            u32 answer_first_token
//            f32 h0[d_model]
//            L x { f32 hidden[d_model], H x f32 attention[seq_len], f32 up[d_inter] }
//
// Lens file layout: "IALN" u16 version=1, u32 vocab_size, u32 d_model,
// f32 E[vocab_size * d_model] row-major.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ia {

inline constexpr std::uint16_t kTraceFormatVersion = 1;
inline constexpr std::uint16_t kLensFormatVersion = 1;
inline constexpr std::size_t kTraceHeaderBytes = 4 + 2 + 7 * 4 + 4;

// Tolerance on |sum(attention row) - 1| accepted by validation.
inline constexpr double kAttentionRowTolerance = 1e-5;

struct ModelConfig {
    std::uint32_t num_layers = 1;
    std::uint32_t d_model = 1;
    std::uint32_t d_inter = 1;
    std::uint32_t d_mid = 1;
    std::uint32_t num_heads = 1;
    std::uint32_t vocab_size = 2;
    std::uint32_t max_seq_len = 1;

    std::uint32_t head_dim() const { return d_mid / num_heads; }

    // Empty when the config satisfies every invariant, otherwise a description
    // of the first violation.
    std::optional<std::string> check() const;

    bool operator==(const ModelConfig &) const = default;
};

std::string describe(const ModelConfig &config);

struct LayerRecord {
    std::uint32_t layer_index = 0; // 1-based
    std::vector<float> hidden;
    std::vector<std::vector<float>> attention_rows; // [head][key position]
    std::vector<float> up_projection;

    bool operator==(const LayerRecord &) const = default;
};

struct ActivationTrace {
    ModelConfig config;
    std::string prompt_id;
    std::vector<std::uint32_t> token_ids;
    std::uint32_t probe_position = 0;
    std::vector<std::uint32_t> constraint_positions;
    std::uint32_t answer_first_token = 0;
    std::vector<float> initial_hidden;
    std::vector<LayerRecord> layers;

    std::size_t seq_len() const { return token_ids.size(); }

    // Hidden state at depth l, where l = 0 is the embedding stream.
    std::span<const float> hidden_at(std::size_t l) const;
};

// Bitwise equality of every field, including float payloads (so NaN == NaN
// when the bit patterns agree).
bool bitwise_equal(const ActivationTrace &a, const ActivationTrace &b);

struct LensMatrix {
    std::uint32_t vocab_size = 0;
    std::uint32_t d_model = 0;
    std::vector<float> data; // row-major [vocab_size][d_model]

    std::span<const float> row(std::size_t token) const {
        return {data.data() + token * d_model, d_model};
    }
};

struct Violation {
    std::optional<std::size_t> layer;
    std::optional<std::size_t> head;
    std::optional<std::size_t> position;
    std::string message;
};

using ValidationReport = std::vector<Violation>;

std::string format_violation(const Violation &v);
std::string format_report(const ValidationReport &report);

ValidationReport validate_trace(const ActivationTrace &trace, const ModelConfig &config);

// Size in bytes of one encoded record.
std::size_t encoded_record_size(const ActivationTrace &trace);

// Writes a complete single-record trace file. Throws ValidationError before
// touching the sink if the trace is invalid, IoError if the sink fails.
std::size_t write_trace(const ActivationTrace &trace, std::ostream &sink);

// Decoded records are validated by default; `raw` skips that step so a
// validator can report on files that decode but violate invariants.
enum class ReadMode { validate, raw };

// Reads a single-record trace file. Throws FormatError (magic, version),
// CorruptionError (short read, impossible sizes) or ValidationError.
ActivationTrace read_trace(std::istream &source, ReadMode mode = ReadMode::validate);

struct TraceFile {
    ModelConfig config;
    std::vector<ActivationTrace> records;
};

TraceFile read_trace_file(std::istream &source, ReadMode mode = ReadMode::validate);
TraceFile read_trace_file(const std::filesystem::path &path, ReadMode mode = ReadMode::validate);

// Append-only writer for multi-record trace files. The header's record count
// is patched when the writer is closed.
class TraceFileWriter {
public:
    TraceFileWriter(const std::filesystem::path &path, const ModelConfig &config);
    ~TraceFileWriter();

    TraceFileWriter(const TraceFileWriter &) = delete;
    TraceFileWriter &operator=(const TraceFileWriter &) = delete;

    std::size_t append(const ActivationTrace &trace);
    void close();

    std::size_t record_count() const { return count_; }
    std::size_t bytes_written() const { return bytes_; }

private:
    std::filesystem::path path_;
    ModelConfig config_;
    std::ofstream out_;
    std::size_t count_ = 0;
    std::size_t bytes_ = 0;
    bool closed_ = false;
};

std::size_t write_lens(const LensMatrix &lens, std::ostream &sink);
LensMatrix read_lens(std::istream &source);
LensMatrix read_lens(const std::filesystem::path &path);

} // namespace ia
