#include "ia/tokenizer.hpp"

#include "ia/error.hpp"

#include <fstream>
#include <istream>
#include <ostream>

namespace ia {

namespace {

bool is_word_byte(unsigned char c) {
    return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '_' || c >= 0x80;
}

bool is_space(unsigned char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

template <typename Emit> void scan(std::string_view text, Emit &&emit) {
    std::size_t i = 0;
    while (i < text.size()) {
        const auto c = static_cast<unsigned char>(text[i]);
        if (is_space(c)) {
            ++i;
        } else if (is_word_byte(c)) {
            std::size_t j = i;
            while (j < text.size() && is_word_byte(static_cast<unsigned char>(text[j]))) ++j;
            emit(i, j);
            i = j;
        } else {
            emit(i, i + 1);
            ++i;
        }
    }
}

} // namespace

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        auto [it, inserted] = index_.emplace(tokens_[i], static_cast<std::uint32_t>(i));
        if (!inserted) throw FormatError("duplicate vocabulary entry '" + tokens_[i] + "'");
    }
    auto unk = index_.find(std::string(kUnknownToken));
    if (unk == index_.end()) throw FormatError("vocabulary lacks the <unk> token");
    unk_ = unk->second;
}

Vocabulary Vocabulary::load(std::istream &in) {
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        tokens.push_back(line);
    }
    return Vocabulary(std::move(tokens));
}

Vocabulary Vocabulary::load(const std::filesystem::path &path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open vocabulary " + path.string());
    return load(in);
}

void Vocabulary::save(std::ostream &out) const {
    for (const auto &t : tokens_) out << t << '\n';
}

std::optional<std::uint32_t> Vocabulary::find(std::string_view token) const {
    auto it = index_.find(std::string(token));
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

void Tokenizer::encode_word(std::string_view text, std::size_t begin, std::size_t end,
                            std::vector<Token> &out) const {
    const std::string_view word = text.substr(begin, end - begin);
    if (auto id = vocab_.find(word)) {
        out.push_back({*id, begin, end});
        return;
    }
    std::vector<Token> pieces;
    std::size_t pos = 0;
    while (pos < word.size()) {
        std::optional<std::uint32_t> hit;
        std::size_t len = word.size() - pos;
        for (; len > 0; --len) {
            std::string candidate = pos == 0 ? std::string(word.substr(0, len))
                                             : std::string(kContinuationPrefix) + std::string(word.substr(pos, len));
            if ((hit = vocab_.find(candidate))) break;
        }
        if (!hit) {
            out.push_back({vocab_.unk_id(), begin, end});
            return;
        }
        pieces.push_back({*hit, begin + pos, begin + pos + len});
        pos += len;
    }
    out.insert(out.end(), pieces.begin(), pieces.end());
}

std::vector<Token> Tokenizer::encode(std::string_view text) const {
    std::vector<Token> out;
    scan(text, [&](std::size_t b, std::size_t e) { encode_word(text, b, e, out); });
    return out;
}

std::vector<std::uint32_t> Tokenizer::encode_ids(std::string_view text) const {
    std::vector<std::uint32_t> ids;
    for (const auto &t : encode(text)) ids.push_back(t.id);
    return ids;
}

std::string Tokenizer::decode(std::span<const std::uint32_t> ids) const {
    std::string out;
    for (auto id : ids) {
        const std::string &tok = vocab_.token(id);
        if (tok.starts_with(kContinuationPrefix)) {
            out += tok.substr(kContinuationPrefix.size());
        } else {
            if (!out.empty()) out += ' ';
            out += tok;
        }
    }
    return out;
}

std::vector<std::string> pre_tokenize(std::string_view text) {
    std::vector<std::string> out;
    scan(text, [&](std::size_t b, std::size_t e) { out.emplace_back(text.substr(b, e - b)); });
    return out;
}

} // namespace ia
