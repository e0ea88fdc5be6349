#pragma once

// Fixed toy vocabulary and a word-level tokenizer with "##" sub-word
// continuation, enough to give constraint spans and answers a token mapping.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace ia {

inline constexpr std::string_view kUnknownToken = "<unk>";
inline constexpr std::string_view kContinuationPrefix = "##";

class Vocabulary {
public:
    Vocabulary() = default;
    // Token id is the position in the list. Must contain "<unk>" and no
    // duplicates.
    explicit Vocabulary(std::vector<std::string> tokens);

    // One token per line.
    static Vocabulary load(std::istream &in);
    static Vocabulary load(const std::filesystem::path &path);
    void save(std::ostream &out) const;

    std::optional<std::uint32_t> find(std::string_view token) const;
    const std::string &token(std::uint32_t id) const { return tokens_.at(id); }
    std::uint32_t unk_id() const { return unk_; }
    std::size_t size() const { return tokens_.size(); }
    const std::vector<std::string> &tokens() const { return tokens_; }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, std::uint32_t> index_;
    std::uint32_t unk_ = 0;
};

struct Token {
    std::uint32_t id = 0;
    std::size_t begin = 0; // byte offsets into the encoded text
    std::size_t end = 0;
};

class Tokenizer {
public:
    explicit Tokenizer(Vocabulary vocab) : vocab_(std::move(vocab)) {}

    // Words are runs of ASCII alphanumerics, '_' and non-ASCII bytes; every
    // other non-space character is a token on its own. A word missing from
    // the vocabulary is split greedily into the longest matching prefix plus
    // "##" continuations, falling back to <unk> for the whole word.
    std::vector<Token> encode(std::string_view text) const;
    std::vector<std::uint32_t> encode_ids(std::string_view text) const;

    std::string decode(std::span<const std::uint32_t> ids) const;

    const Vocabulary &vocabulary() const { return vocab_; }

private:
    void encode_word(std::string_view text, std::size_t begin, std::size_t end, std::vector<Token> &out) const;

    Vocabulary vocab_;
};

// Splits text into the pre-tokenizer's words and punctuation marks, ignoring
// the vocabulary. Used to build vocabularies that cover a corpus.
std::vector<std::string> pre_tokenize(std::string_view text);

} // namespace ia
