#include "ia/trace.hpp"

#include "binary_io.hpp"
#include "ia/error.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

namespace ia {

namespace {

constexpr char kTraceMagic[4] = {'I', 'A', 'T', 'R'};
constexpr char kLensMagic[4] = {'I', 'A', 'L', 'N'};

bool bits_equal(const std::vector<float> &a, const std::vector<float> &b) {
    return a.size() == b.size() &&
           (a.empty() || std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
}

void encode_config(detail::ByteWriter &w, const ModelConfig &c) {
    w.u32(c.num_layers);
    w.u32(c.d_model);
    w.u32(c.d_inter);
    w.u32(c.d_mid);
    w.u32(c.num_heads);
    w.u32(c.vocab_size);
    w.u32(c.max_seq_len);
}

void encode_header(detail::ByteWriter &w, const ModelConfig &c, std::uint32_t count) {
    w.bytes(kTraceMagic, 4);
    w.u16(kTraceFormatVersion);
    encode_config(w, c);
    w.u32(count);
}

void encode_record(detail::ByteWriter &w, const ActivationTrace &t) {
    w.u16(static_cast<std::uint16_t>(t.prompt_id.size()));
    w.bytes(t.prompt_id.data(), t.prompt_id.size());
    w.u32(static_cast<std::uint32_t>(t.token_ids.size()));
    w.u32s(t.token_ids);
    w.u32(t.probe_position);
    w.u16(static_cast<std::uint16_t>(t.constraint_positions.size()));
    w.u32s(t.constraint_positions);
    w.u32(t.answer_first_token);
    w.f32s(t.initial_hidden);
    for (const auto &layer : t.layers) {
        w.f32s(layer.hidden);
        for (const auto &row : layer.attention_rows) w.f32s(row);
        w.f32s(layer.up_projection);
    }
}

void write_all(std::ostream &sink, const std::string &bytes, std::size_t already) {
    sink.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    sink.flush();
    if (!sink) {
        throw IoError("trace sink rejected write", already);
    }
}

ModelConfig decode_config(detail::ByteReader &r) {
    ModelConfig c;
    std::uint32_t *fields[] = {&c.num_layers, &c.d_model,    &c.d_inter,    &c.d_mid,
                               &c.num_heads,  &c.vocab_size, &c.max_seq_len};
    for (auto *f : fields) {
        if (!r.u32(*f)) throw CorruptionError("truncated trace header", std::nullopt);
    }
    if (auto err = c.check()) throw FormatError("trace header holds invalid config: " + *err);
    return c;
}

ModelConfig decode_header(detail::ByteReader &r, std::uint32_t &count) {
    char magic[4];
    if (!r.bytes(magic, 4)) throw CorruptionError("truncated trace header", std::nullopt);
    if (std::memcmp(magic, kTraceMagic, 4) != 0) {
        throw FormatError("bad magic: expected IATR, found '" + std::string(magic, 4) + "'");
    }
    std::uint16_t version = 0;
    if (!r.u16(version)) throw CorruptionError("truncated trace header", std::nullopt);
    if (version != kTraceFormatVersion) {
        throw FormatError("unsupported trace format version " + std::to_string(version));
    }
    ModelConfig c = decode_config(r);
    if (!r.u32(count)) throw CorruptionError("truncated trace header", std::nullopt);
    return c;
}

ActivationTrace decode_record(detail::ByteReader &r, const ModelConfig &c, std::size_t index) {
    auto fail = [index](const std::string &what, std::optional<std::size_t> layer = std::nullopt) {
        std::string msg = "record " + std::to_string(index);
        if (layer) msg += ", layer " + std::to_string(*layer);
        throw CorruptionError(msg + ": " + what, index, layer);
    };

    ActivationTrace t;
    t.config = c;

    std::uint16_t id_len = 0;
    if (!r.u16(id_len)) fail("truncated before prompt id");
    t.prompt_id.resize(id_len);
    if (!r.bytes(t.prompt_id.data(), id_len)) fail("truncated prompt id");

    std::uint32_t seq_len = 0;
    if (!r.u32(seq_len)) fail("truncated before seq_len");
    if (seq_len == 0 || seq_len > c.max_seq_len) {
        fail("seq_len " + std::to_string(seq_len) + " outside [1, " + std::to_string(c.max_seq_len) +
             "]");
    }
    if (!r.u32s(t.token_ids, seq_len)) fail("truncated token ids");
    if (!r.u32(t.probe_position)) fail("truncated before probe position");

    std::uint16_t n_constraints = 0;
    if (!r.u16(n_constraints)) fail("truncated before constraint count");
    if (!r.u32s(t.constraint_positions, n_constraints)) fail("truncated constraint positions");
    if (!r.u32(t.answer_first_token)) fail("truncated before answer token");
    if (!r.f32s(t.initial_hidden, c.d_model)) fail("truncated initial hidden state");

    t.layers.resize(c.num_layers);
    for (std::uint32_t l = 0; l < c.num_layers; ++l) {
        auto &layer = t.layers[l];
        layer.layer_index = l + 1;
        if (!r.f32s(layer.hidden, c.d_model)) fail("truncated hidden state", l + 1);
        layer.attention_rows.resize(c.num_heads);
        for (auto &row : layer.attention_rows) {
            if (!r.f32s(row, seq_len)) fail("truncated attention rows", l + 1);
        }
        if (!r.f32s(layer.up_projection, c.d_inter)) fail("truncated up-projection", l + 1);
    }
    return t;
}

void throw_if_invalid(const ActivationTrace &t, const ModelConfig &c, std::size_t index) {
    auto report = validate_trace(t, c);
    if (!report.empty()) {
        throw ValidationError("record " + std::to_string(index) + " (" + t.prompt_id +
                              ") failed validation:\n" + format_report(report));
    }
}

void check_not_finite(const std::vector<float> &v, std::optional<std::size_t> layer,
                      const char *what, ValidationReport &out) {
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (!std::isfinite(v[i])) {
            Violation viol;
            viol.layer = layer;
            viol.position = i;
            viol.message = std::string("non-finite value in ") + what;
            out.push_back(std::move(viol));
        }
    }
}

} // namespace

std::optional<std::string> ModelConfig::check() const {
    if (num_layers < 1) return "num_layers must be >= 1";
    if (d_model < 1) return "d_model must be >= 1";
    if (d_inter < 1) return "d_inter must be >= 1";
    if (d_mid < 1) return "d_mid must be >= 1";
    if (num_heads < 1) return "num_heads must be >= 1";
    if (max_seq_len < 1) return "max_seq_len must be >= 1";
    if (vocab_size < 2) return "vocab_size must be >= 2";
    if (d_mid % num_heads != 0) {
        return "d_mid (" + std::to_string(d_mid) + ") not divisible by num_heads (" +
               std::to_string(num_heads) + ")";
    }
    return std::nullopt;
}

std::string describe(const ModelConfig &c) {
    std::ostringstream os;
    os << "L=" << c.num_layers << " d_model=" << c.d_model << " d_inter=" << c.d_inter
       << " d_mid=" << c.d_mid << " H=" << c.num_heads << " |V|=" << c.vocab_size
       << " max_seq_len=" << c.max_seq_len;
    return os.str();
}

std::span<const float> ActivationTrace::hidden_at(std::size_t l) const {
    if (l == 0) return initial_hidden;
    if (l > layers.size()) throw ShapeError("layer " + std::to_string(l) + " out of range");
    return layers[l - 1].hidden;
}

bool bitwise_equal(const ActivationTrace &a, const ActivationTrace &b) {
    if (!(a.config == b.config) || a.prompt_id != b.prompt_id || a.token_ids != b.token_ids ||
        a.probe_position != b.probe_position || a.constraint_positions != b.constraint_positions ||
        a.answer_first_token != b.answer_first_token || !bits_equal(a.initial_hidden, b.initial_hidden) ||
        a.layers.size() != b.layers.size()) {
        return false;
    }
    for (std::size_t l = 0; l < a.layers.size(); ++l) {
        const auto &x = a.layers[l];
        const auto &y = b.layers[l];
        if (x.layer_index != y.layer_index || !bits_equal(x.hidden, y.hidden) ||
            !bits_equal(x.up_projection, y.up_projection) ||
            x.attention_rows.size() != y.attention_rows.size()) {
            return false;
        }
        for (std::size_t h = 0; h < x.attention_rows.size(); ++h) {
            if (!bits_equal(x.attention_rows[h], y.attention_rows[h])) return false;
        }
    }
    return true;
}

std::string format_violation(const Violation &v) {
    std::ostringstream os;
    if (v.layer) os << "layer " << *v.layer << ": ";
    if (v.head) os << "head " << *v.head << ": ";
    if (v.position) os << "position " << *v.position << ": ";
    os << v.message;
    return os.str();
}

std::string format_report(const ValidationReport &report) {
    std::string out;
    for (const auto &v : report) {
        out += "  - " + format_violation(v) + "\n";
    }
    return out;
}

ValidationReport validate_trace(const ActivationTrace &t, const ModelConfig &c) {
    ValidationReport out;
    auto add = [&out](std::string msg) {
        Violation v;
        v.message = std::move(msg);
        out.push_back(std::move(v));
    };

    if (auto err = c.check()) add("config: " + *err);
    if (!(t.config == c)) {
        add("trace config (" + describe(t.config) + ") does not match expected (" + describe(c) + ")");
    }
    if (t.prompt_id.size() > std::numeric_limits<std::uint16_t>::max()) {
        add("prompt_id longer than 65535 bytes");
    }

    const std::size_t seq = t.token_ids.size();
    if (seq == 0) add("token_ids is empty");
    if (seq > c.max_seq_len) {
        add("seq_len " + std::to_string(seq) + " exceeds max_seq_len " + std::to_string(c.max_seq_len));
    }
    for (std::size_t i = 0; i < seq; ++i) {
        if (t.token_ids[i] >= c.vocab_size) {
            Violation v;
            v.position = i;
            v.message = "token id " + std::to_string(t.token_ids[i]) + " outside vocabulary";
            out.push_back(std::move(v));
        }
    }
    if (t.probe_position >= seq) {
        add("probe_position " + std::to_string(t.probe_position) + " >= seq_len " + std::to_string(seq));
    }
    if (t.constraint_positions.size() > std::numeric_limits<std::uint16_t>::max()) {
        add("more than 65535 constraint positions");
    }
    for (auto pos : t.constraint_positions) {
        if (pos >= t.probe_position) {
            add("constraint position " + std::to_string(pos) + " not before probe position " +
                std::to_string(t.probe_position));
        }
    }
    if (t.answer_first_token >= c.vocab_size) {
        add("answer_first_token " + std::to_string(t.answer_first_token) + " outside vocabulary");
    }

    if (t.initial_hidden.size() != c.d_model) {
        add("initial hidden has length " + std::to_string(t.initial_hidden.size()) + ", expected " +
            std::to_string(c.d_model));
    }
    check_not_finite(t.initial_hidden, 0, "initial hidden state", out);

    if (t.layers.size() != c.num_layers) {
        add("trace has " + std::to_string(t.layers.size()) + " layers, expected " +
            std::to_string(c.num_layers));
    }
    for (std::size_t l = 0; l < t.layers.size(); ++l) {
        const auto &layer = t.layers[l];
        const std::size_t li = l + 1;
        auto add_layer = [&out, li](std::string msg, std::optional<std::size_t> head = std::nullopt) {
            Violation v;
            v.layer = li;
            v.head = head;
            v.message = std::move(msg);
            out.push_back(std::move(v));
        };
        if (layer.layer_index != li) {
            add_layer("layer index " + std::to_string(layer.layer_index) + " out of order");
        }
        if (layer.hidden.size() != c.d_model) {
            add_layer("hidden has length " + std::to_string(layer.hidden.size()) + ", expected " +
                      std::to_string(c.d_model));
        }
        check_not_finite(layer.hidden, li, "hidden state", out);
        if (layer.up_projection.size() != c.d_inter) {
            add_layer("up-projection has length " + std::to_string(layer.up_projection.size()) +
                      ", expected " + std::to_string(c.d_inter));
        }
        check_not_finite(layer.up_projection, li, "up-projection", out);
        if (layer.attention_rows.size() != c.num_heads) {
            add_layer("has " + std::to_string(layer.attention_rows.size()) + " attention rows, expected " +
                      std::to_string(c.num_heads));
        }
        for (std::size_t h = 0; h < layer.attention_rows.size(); ++h) {
            const auto &row = layer.attention_rows[h];
            if (row.size() != seq) {
                add_layer("attention row has length " + std::to_string(row.size()) + ", expected " +
                              std::to_string(seq),
                          h);
                continue;
            }
            double sum = 0.0;
            bool finite = true;
            for (std::size_t k = 0; k < row.size(); ++k) {
                if (!std::isfinite(row[k])) {
                    finite = false;
                    Violation v;
                    v.layer = li;
                    v.head = h;
                    v.position = k;
                    v.message = "non-finite attention weight";
                    out.push_back(std::move(v));
                } else if (row[k] < 0.0f) {
                    Violation v;
                    v.layer = li;
                    v.head = h;
                    v.position = k;
                    v.message = "negative attention weight " + std::to_string(row[k]);
                    out.push_back(std::move(v));
                }
                sum += row[k];
            }
            if (finite && std::abs(sum - 1.0) > kAttentionRowTolerance) {
                std::ostringstream os;
                os.precision(9);
                os << "attention row sums to " << sum << " (deviation " << (sum - 1.0) << ")";
                add_layer(os.str(), h);
            }
        }
    }
    return out;
}

std::size_t encoded_record_size(const ActivationTrace &t) {
    const ModelConfig &c = t.config;
    const std::size_t seq = t.token_ids.size();
    const std::size_t per_layer = 4 * (c.d_model + c.num_heads * seq + c.d_inter);
    return 2 + t.prompt_id.size() + 4 + 4 * seq + 4 + 2 + 4 * t.constraint_positions.size() + 4 +
           4 * c.d_model + c.num_layers * per_layer;
}

std::size_t write_trace(const ActivationTrace &trace, std::ostream &sink) {
    throw_if_invalid(trace, trace.config, 0);
    detail::ByteWriter w;
    encode_header(w, trace.config, 1);
    encode_record(w, trace);
    write_all(sink, w.buffer(), 0);
    return w.size();
}

TraceFile read_trace_file(std::istream &source, ReadMode mode) {
    detail::ByteReader r(source);
    TraceFile file;
    std::uint32_t count = 0;
    file.config = decode_header(r, count);
    file.records.reserve(std::min<std::uint32_t>(count, 4096));
    for (std::uint32_t i = 0; i < count; ++i) {
        file.records.push_back(decode_record(r, file.config, i));
        if (mode == ReadMode::validate) throw_if_invalid(file.records.back(), file.config, i);
    }
    char extra;
    if (source.read(&extra, 1); source.gcount() != 0) {
        throw CorruptionError("trailing bytes after " + std::to_string(count) + " records", std::nullopt);
    }
    return file;
}

TraceFile read_trace_file(const std::filesystem::path &path, ReadMode mode) {
    if (std::filesystem::is_directory(path)) {
        throw IoError(path.string() + " is a directory, expected a trace file");
    }
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open trace file " + path.string());
    return read_trace_file(in, mode);
}

ActivationTrace read_trace(std::istream &source, ReadMode mode) {
    TraceFile file = read_trace_file(source, mode);
    if (file.records.size() != 1) {
        throw FormatError("expected a single-record trace, found " + std::to_string(file.records.size()) +
                          " records");
    }
    return std::move(file.records.front());
}

TraceFileWriter::TraceFileWriter(const std::filesystem::path &path, const ModelConfig &config)
    : path_(path), config_(config) {
    if (auto err = config.check()) throw ValidationError("invalid config: " + *err);
    out_.open(path, std::ios::binary | std::ios::trunc);
    if (!out_) throw IoError("cannot open " + path.string() + " for writing");
    detail::ByteWriter w;
    encode_header(w, config_, 0);
    write_all(out_, w.buffer(), 0);
    bytes_ = w.size();
}

TraceFileWriter::~TraceFileWriter() {
    if (!closed_) {
        try {
            close();
        } catch (...) {
        }
    }
}

std::size_t TraceFileWriter::append(const ActivationTrace &trace) {
    if (closed_) throw IoError("append on closed trace writer", bytes_);
    throw_if_invalid(trace, config_, count_);
    if (count_ == std::numeric_limits<std::uint32_t>::max()) {
        throw IoError("trace file record count overflow", bytes_);
    }
    detail::ByteWriter w;
    encode_record(w, trace);
    write_all(out_, w.buffer(), bytes_);
    bytes_ += w.size();
    ++count_;
    return w.size();
}

void TraceFileWriter::close() {
    if (closed_) return;
    closed_ = true;
    // record count lives right before the first record
    out_.seekp(static_cast<std::streamoff>(kTraceHeaderBytes - 4));
    detail::ByteWriter w;
    w.u32(static_cast<std::uint32_t>(count_));
    write_all(out_, w.buffer(), bytes_);
    out_.close();
    if (!out_) throw IoError("failed to close " + path_.string(), bytes_);
}

std::size_t write_lens(const LensMatrix &lens, std::ostream &sink) {
    if (lens.data.size() != static_cast<std::size_t>(lens.vocab_size) * lens.d_model) {
        throw ShapeError("lens data size does not match vocab_size x d_model");
    }
    detail::ByteWriter w;
    w.bytes(kLensMagic, 4);
    w.u16(kLensFormatVersion);
    w.u32(lens.vocab_size);
    w.u32(lens.d_model);
    w.f32s(lens.data);
    write_all(sink, w.buffer(), 0);
    return w.size();
}

LensMatrix read_lens(std::istream &source) {
    detail::ByteReader r(source);
    char magic[4];
    if (!r.bytes(magic, 4)) throw CorruptionError("truncated lens header", std::nullopt);
    if (std::memcmp(magic, kLensMagic, 4) != 0) {
        throw FormatError("bad magic: expected IALN, found '" + std::string(magic, 4) + "'");
    }
    std::uint16_t version = 0;
    if (!r.u16(version)) throw CorruptionError("truncated lens header", std::nullopt);
    if (version != kLensFormatVersion) {
        throw FormatError("unsupported lens format version " + std::to_string(version));
    }
    LensMatrix lens;
    if (!r.u32(lens.vocab_size) || !r.u32(lens.d_model)) {
        throw CorruptionError("truncated lens header", std::nullopt);
    }
    if (lens.vocab_size < 2 || lens.d_model < 1) throw FormatError("lens has degenerate shape");
    if (!r.f32s(lens.data, static_cast<std::size_t>(lens.vocab_size) * lens.d_model)) {
        throw CorruptionError("truncated lens matrix", std::nullopt);
    }
    for (float x : lens.data) {
        if (!std::isfinite(x)) throw ValidationError("lens matrix holds a non-finite entry");
    }
    return lens;
}

LensMatrix read_lens(const std::filesystem::path &path) {
    if (std::filesystem::is_directory(path)) throw IoError(path.string() + " is a directory");
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open lens file " + path.string());
    return read_lens(in);
}

} // namespace ia
