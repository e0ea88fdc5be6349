#pragma once

// Entity-centric QA records, popularity batching, paraphrase templates with
// constraint-token markup, and few-shot prompt construction.

#include "ia/tokenizer.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace ia {

struct QuestionRecord {
    std::string id;
    std::string subject;
    std::string relation;
    std::string object; // the answer A_i
    double p_subj = 0.0;
    double p_obj = 0.0;
    std::string question;
};

// (p_subj + p_obj) / 2
double popularity(const QuestionRecord &q);

// Tab-separated with a header row. Recognised column names: id, subject|subj,
// relation|prop, object|obj, s_pop, o_pop, question. Extra columns are ignored.
std::vector<QuestionRecord> read_corpus(std::istream &in);
std::vector<QuestionRecord> read_corpus(const std::filesystem::path &path);
void write_corpus(std::ostream &out, const std::vector<QuestionRecord> &records);

// Popularity descending, ties by id ascending.
void sort_by_popularity(std::vector<QuestionRecord> &records);

enum class BatchScheme { head_torso_tail, head_tail };

// Head = B_1, Tail = B_N, Torso = B_{(N+1)/2} for head-torso-tail with N >= 3;
// any other batch is "B<i>".
std::string batch_label(std::size_t index, std::size_t n_batches, BatchScheme scheme);

struct PopularityBatch {
    std::string label;
    std::size_t index = 0; // 1-based, B_1 most popular
    std::vector<QuestionRecord> questions;

    std::size_t batch_size() const { return questions.size(); }
};

std::vector<PopularityBatch> sort_into_batches(const std::vector<QuestionRecord> &records,
                                               const std::string &relation, std::size_t n_batches,
                                               std::size_t batch_size, BatchScheme scheme);

// Global popularity batches restricted to relations that have at least
// per_relation_min questions in every batch.
struct RelationBatches {
    std::vector<std::string> relations; // kept relations, sorted
    // batches[i][relation] holds exactly per_relation_min records, most popular first
    std::vector<std::map<std::string, std::vector<QuestionRecord>>> batches;
};

RelationBatches equispaced_relation_batches(const std::vector<QuestionRecord> &records, std::size_t n_batches,
                                            std::size_t batch_size, std::size_t per_relation_min);

// Character range [begin, end) into a paraphrase text.
struct Span {
    std::size_t begin = 0;
    std::size_t end = 0;
    bool operator==(const Span &) const = default;
};

inline constexpr std::string_view kSubjectPlaceholder = "<SUBJECT>";

// One template line, e.g. "What is the {{capital}} of {{<SUBJECT>}}?".
class ParaphraseTemplate {
public:
    static ParaphraseTemplate parse(std::string_view line);

    struct Rendered {
        std::string text;
        std::vector<Span> constraints; // marked spans plus the subject span
    };
    // Substitutes the subject once at the slot; text inside the subject is
    // never re-scanned.
    Rendered render(std::string_view subject) const;

    const std::string &source() const { return source_; }

private:
    struct Segment {
        std::string text;
        bool subject = false;
        bool constraint = false;
    };
    std::string source_;
    std::vector<Segment> segments_;
};

// Sections "[relation]" followed by one template per line; '#' starts a comment.
class TemplateTable {
public:
    static TemplateTable load(std::istream &in);
    static TemplateTable load(const std::filesystem::path &path);

    void add(const std::string &relation, ParaphraseTemplate t);
    bool contains(const std::string &relation) const { return table_.count(relation) != 0; }
    const std::vector<ParaphraseTemplate> &templates(const std::string &relation) const;
    std::vector<std::string> relations() const;

private:
    std::map<std::string, std::vector<ParaphraseTemplate>> table_;
};

inline constexpr std::size_t kDefaultParaphrases = 10;

struct ParaphraseInstance {
    std::string question_id;
    std::string relation;
    std::size_t variant_index = 1; // 1-based; variant 1 is the original template
    std::string text;
    std::vector<Span> constraint_spans;
};

std::vector<ParaphraseInstance> expand_paraphrases(const QuestionRecord &q, const TemplateTable &table,
                                                   std::size_t p = kDefaultParaphrases);

inline constexpr std::string_view kTaskDescriptor = "Answer the following questions in one word or phrase:";
inline constexpr std::size_t kDefaultDemos = 16;

struct PromptSpec {
    std::string task_descriptor{kTaskDescriptor};
    std::vector<std::pair<std::string, std::string>> demonstrations;
    std::string target_question;
    std::size_t demo_count = 0;

    struct Rendered {
        std::string text;
        std::size_t target_offset = 0; // where target_question starts in text
    };
    // descriptor, then "Q: ..\nA: .." per demonstration, then "Q: target\nA:".
    Rendered render() const;
};

PromptSpec build_prompt(const ParaphraseInstance &target, const std::vector<QuestionRecord> &pool, std::size_t k,
                        std::uint64_t seed);

struct EncodedPrompt {
    std::vector<std::uint32_t> token_ids;
    std::vector<std::uint32_t> constraint_positions; // ascending, unique
};

// Tokenises the rendered prompt and maps the target's constraint spans to
// every token overlapping them (all sub-word pieces of a constraint word).
EncodedPrompt encode_prompt(const PromptSpec &spec, const ParaphraseInstance &target, const Tokenizer &tok);

// First sub-word token of the answer; throws on an empty answer.
std::uint32_t answer_first_token(const std::string &answer, const Tokenizer &tok);

} // namespace ia
