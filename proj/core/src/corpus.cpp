#include "ia/corpus.hpp"

#include "ia/error.hpp"
#include "ia/random.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>

namespace ia {

namespace {

std::vector<std::string> split_tabs(const std::string &line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find('\t', start);
        if (pos == std::string::npos) {
            out.push_back(line.substr(start));
            return out;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
}

double parse_popularity(const std::string &field, std::size_t line_no, const char *column) {
    double v = 0.0;
    const char *first = field.data();
    const char *last = field.data() + field.size();
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || ptr != last) {
        throw ValidationError("corpus line " + std::to_string(line_no) + ": " + column + " '" + field +
                              "' is not a number");
    }
    if (!std::isfinite(v) || v < 0.0) {
        throw ValidationError("corpus line " + std::to_string(line_no) + ": " + column +
                              " must be finite and >= 0");
    }
    return v;
}

std::string format_number(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

void check_field(const std::string &value, const char *name) {
    if (value.find_first_of("\t\n\r") != std::string::npos) {
        throw ValidationError(std::string("corpus field ") + name + " contains a tab or newline: '" + value + "'");
    }
}

bool more_popular(const QuestionRecord &a, const QuestionRecord &b) {
    const double pa = popularity(a);
    const double pb = popularity(b);
    if (pa != pb) return pa > pb;
    return a.id < b.id;
}

} // namespace

double popularity(const QuestionRecord &q) { return (q.p_subj + q.p_obj) / 2.0; }

std::vector<QuestionRecord> read_corpus(std::istream &in) {
    std::string line;
    if (!std::getline(in, line)) throw FormatError("corpus is empty (missing header row)");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    // tolerate a UTF-8 byte order mark
    if (line.starts_with("\xEF\xBB\xBF")) line.erase(0, 3);

    const auto header = split_tabs(line);
    auto column = [&header](std::initializer_list<const char *> names) -> std::size_t {
        for (const char *n : names) {
            auto it = std::find(header.begin(), header.end(), n);
            if (it != header.end()) return static_cast<std::size_t>(it - header.begin());
        }
        throw FormatError(std::string("corpus header lacks column '") + *names.begin() + "'");
    };
    const std::size_t c_id = column({"id"});
    const std::size_t c_subj = column({"subject", "subj"});
    const std::size_t c_rel = column({"relation", "prop"});
    const std::size_t c_obj = column({"object", "obj"});
    const std::size_t c_spop = column({"s_pop"});
    const std::size_t c_opop = column({"o_pop"});
    const std::size_t c_q = column({"question"});
    const std::size_t needed = std::max({c_id, c_subj, c_rel, c_obj, c_spop, c_opop, c_q}) + 1;

    std::vector<QuestionRecord> records;
    std::set<std::string> seen;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto f = split_tabs(line);
        if (f.size() < needed) {
            throw FormatError("corpus line " + std::to_string(line_no) + " has " + std::to_string(f.size()) +
                              " fields, expected at least " + std::to_string(needed));
        }
        QuestionRecord q;
        q.id = f[c_id];
        q.subject = f[c_subj];
        q.relation = f[c_rel];
        q.object = f[c_obj];
        q.p_subj = parse_popularity(f[c_spop], line_no, "s_pop");
        q.p_obj = parse_popularity(f[c_opop], line_no, "o_pop");
        q.question = f[c_q];
        if (q.id.empty() || q.subject.empty() || q.relation.empty() || q.object.empty()) {
            throw ValidationError("corpus line " + std::to_string(line_no) +
                                  ": id, subject, relation and answer must be nonempty");
        }
        if (!seen.insert(q.id).second) {
            throw ValidationError("corpus line " + std::to_string(line_no) + ": duplicate id '" + q.id + "'");
        }
        records.push_back(std::move(q));
    }
    return records;
}

std::vector<QuestionRecord> read_corpus(const std::filesystem::path &path) {
    if (std::filesystem::is_directory(path)) throw IoError(path.string() + " is a directory");
    std::ifstream in(path);
    if (!in) throw IoError("cannot open corpus " + path.string());
    return read_corpus(in);
}

void write_corpus(std::ostream &out, const std::vector<QuestionRecord> &records) {
    out << "id\tsubject\trelation\tobject\ts_pop\to_pop\tquestion\n";
    for (const auto &q : records) {
        for (const auto *f : {&q.id, &q.subject, &q.relation, &q.object, &q.question}) check_field(*f, "value");
        out << q.id << '\t' << q.subject << '\t' << q.relation << '\t' << q.object << '\t'
            << format_number(q.p_subj) << '\t' << format_number(q.p_obj) << '\t' << q.question << '\n';
    }
}

void sort_by_popularity(std::vector<QuestionRecord> &records) {
    std::sort(records.begin(), records.end(), more_popular);
}

std::string batch_label(std::size_t index, std::size_t n_batches, BatchScheme scheme) {
    if (index == 1) return "Head";
    if (index == n_batches) return "Tail";
    if (scheme == BatchScheme::head_torso_tail && n_batches >= 3 && index == (n_batches + 1) / 2) return "Torso";
    return "B" + std::to_string(index);
}

std::vector<PopularityBatch> sort_into_batches(const std::vector<QuestionRecord> &records,
                                               const std::string &relation, std::size_t n_batches,
                                               std::size_t batch_size, BatchScheme scheme) {
    if (n_batches == 0 || batch_size == 0) throw ValidationError("batch count and batch size must be positive");
    std::vector<QuestionRecord> pool;
    for (const auto &q : records) {
        if (q.relation == relation) pool.push_back(q);
    }
    const std::size_t need = n_batches * batch_size;
    if (pool.size() < need) {
        throw ValidationError("relation '" + relation + "': need " + std::to_string(need) + ", have " +
                              std::to_string(pool.size()));
    }
    sort_by_popularity(pool);

    std::vector<PopularityBatch> out(n_batches);
    for (std::size_t i = 0; i < n_batches; ++i) {
        out[i].index = i + 1;
        out[i].label = batch_label(i + 1, n_batches, scheme);
        const auto first = pool.begin() + static_cast<std::ptrdiff_t>(i * batch_size);
        out[i].questions.assign(first, first + static_cast<std::ptrdiff_t>(batch_size));
    }
    return out;
}

RelationBatches equispaced_relation_batches(const std::vector<QuestionRecord> &records, std::size_t n_batches,
                                            std::size_t batch_size, std::size_t per_relation_min) {
    if (n_batches == 0 || batch_size == 0 || per_relation_min == 0) {
        throw ValidationError("batch count, batch size and per-relation minimum must be positive");
    }
    const std::size_t need = n_batches * batch_size;
    if (records.size() < need) {
        throw ValidationError("need " + std::to_string(need) + " records, have " + std::to_string(records.size()));
    }
    std::vector<QuestionRecord> sorted = records;
    sort_by_popularity(sorted);

    std::vector<std::map<std::string, std::vector<QuestionRecord>>> grouped(n_batches);
    std::set<std::string> all_relations;
    for (std::size_t i = 0; i < need; ++i) {
        grouped[i / batch_size][sorted[i].relation].push_back(sorted[i]);
        all_relations.insert(sorted[i].relation);
    }

    RelationBatches out;
    for (const auto &r : all_relations) {
        const bool everywhere = std::all_of(grouped.begin(), grouped.end(), [&](const auto &batch) {
            auto it = batch.find(r);
            return it != batch.end() && it->second.size() >= per_relation_min;
        });
        if (everywhere) out.relations.push_back(r);
    }
    if (out.relations.empty()) {
        throw ValidationError("no relation has at least " + std::to_string(per_relation_min) +
                              " questions in every one of " + std::to_string(n_batches) + " batches");
    }
    out.batches.resize(n_batches);
    for (std::size_t i = 0; i < n_batches; ++i) {
        for (const auto &r : out.relations) {
            auto &src = grouped[i][r];
            // already popularity-sorted, so truncation keeps the most popular
            out.batches[i][r].assign(src.begin(), src.begin() + static_cast<std::ptrdiff_t>(per_relation_min));
        }
    }
    return out;
}

ParaphraseTemplate ParaphraseTemplate::parse(std::string_view line) {
    ParaphraseTemplate t;
    t.source_ = std::string(line);
    bool in_mark = false;
    std::string literal;
    std::size_t subjects = 0;

    auto flush = [&]() {
        if (!literal.empty()) {
            t.segments_.push_back({literal, false, in_mark});
            literal.clear();
        }
    };

    std::size_t i = 0;
    while (i < line.size()) {
        if (line.substr(i, 2) == "{{") {
            if (in_mark) throw FormatError("nested '{{' in template: " + t.source_);
            flush();
            in_mark = true;
            i += 2;
        } else if (line.substr(i, 2) == "}}") {
            if (!in_mark) throw FormatError("unbalanced '}}' in template: " + t.source_);
            flush();
            in_mark = false;
            i += 2;
        } else if (line.substr(i, kSubjectPlaceholder.size()) == kSubjectPlaceholder) {
            flush();
            t.segments_.push_back({std::string(kSubjectPlaceholder), true, true});
            ++subjects;
            i += kSubjectPlaceholder.size();
        } else {
            literal.push_back(line[i]);
            ++i;
        }
    }
    if (in_mark) throw FormatError("unterminated '{{' in template: " + t.source_);
    flush();
    if (subjects != 1) {
        throw FormatError("template must contain exactly one " + std::string(kSubjectPlaceholder) + ": " + t.source_);
    }
    return t;
}

ParaphraseTemplate::Rendered ParaphraseTemplate::render(std::string_view subject) const {
    Rendered r;
    for (const auto &seg : segments_) {
        const std::size_t begin = r.text.size();
        if (seg.subject) {
            r.text.append(subject);
        } else {
            r.text += seg.text;
        }
        if (seg.constraint && r.text.size() > begin) r.constraints.push_back({begin, r.text.size()});
    }
    return r;
}

TemplateTable TemplateTable::load(std::istream &in) {
    TemplateTable table;
    std::string line;
    std::string relation;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const auto first = line.find_first_not_of(" \t");
        if (first == std::string::npos || line[first] == '#') continue;
        const auto last = line.find_last_not_of(" \t");
        const std::string trimmed = line.substr(first, last - first + 1);
        if (trimmed.front() == '[' && trimmed.back() == ']') {
            relation = trimmed.substr(1, trimmed.size() - 2);
            if (relation.empty()) throw FormatError("template line " + std::to_string(line_no) + ": empty relation");
            continue;
        }
        if (relation.empty()) {
            throw FormatError("template line " + std::to_string(line_no) + " appears before any [relation] section");
        }
        table.add(relation, ParaphraseTemplate::parse(trimmed));
    }
    return table;
}

TemplateTable TemplateTable::load(const std::filesystem::path &path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open template file " + path.string());
    return load(in);
}

void TemplateTable::add(const std::string &relation, ParaphraseTemplate t) {
    table_[relation].push_back(std::move(t));
}

const std::vector<ParaphraseTemplate> &TemplateTable::templates(const std::string &relation) const {
    auto it = table_.find(relation);
    if (it == table_.end()) {
        std::string known;
        for (const auto &[r, _] : table_) known += (known.empty() ? "" : ", ") + r;
        throw ValidationError("no paraphrase templates for relation '" + relation + "'; known relations: " + known);
    }
    return it->second;
}

std::vector<std::string> TemplateTable::relations() const {
    std::vector<std::string> out;
    for (const auto &[r, _] : table_) out.push_back(r);
    return out;
}

std::vector<ParaphraseInstance> expand_paraphrases(const QuestionRecord &q, const TemplateTable &table,
                                                   std::size_t p) {
    const auto &templates = table.templates(q.relation);
    if (p == 0 || p > templates.size()) {
        throw ValidationError("relation '" + q.relation + "' has " + std::to_string(templates.size()) +
                              " templates, " + std::to_string(p) + " paraphrases requested");
    }
    if (q.subject.empty()) throw ValidationError("question " + q.id + " has an empty subject");
    std::vector<ParaphraseInstance> out;
    out.reserve(p);
    for (std::size_t j = 0; j < p; ++j) {
        auto rendered = templates[j].render(q.subject);
        ParaphraseInstance inst;
        inst.question_id = q.id;
        inst.relation = q.relation;
        inst.variant_index = j + 1;
        inst.text = std::move(rendered.text);
        inst.constraint_spans = std::move(rendered.constraints);
        out.push_back(std::move(inst));
    }
    return out;
}

PromptSpec::Rendered PromptSpec::render() const {
    Rendered r;
    r.text = task_descriptor;
    r.text += '\n';
    for (const auto &[q, a] : demonstrations) {
        r.text += "Q: " + q + "\nA: " + a + "\n";
    }
    r.text += "Q: ";
    r.target_offset = r.text.size();
    r.text += target_question;
    r.text += "\nA:";
    return r;
}

PromptSpec build_prompt(const ParaphraseInstance &target, const std::vector<QuestionRecord> &pool, std::size_t k,
                        std::uint64_t seed) {
    std::vector<const QuestionRecord *> candidates;
    for (const auto &q : pool) {
        if (q.relation == target.relation && q.id != target.question_id) candidates.push_back(&q);
    }
    if (candidates.size() < k) {
        throw ValidationError("prompt for " + target.question_id + ": need " + std::to_string(k) +
                              " demonstrations of relation '" + target.relation + "', pool has " +
                              std::to_string(candidates.size()));
    }
    // partial Fisher-Yates; the seed is mixed with the question id so every
    // paraphrase of a question sees the same demonstrations
    Rng rng(mix_seed(seed, target.question_id));
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.below(candidates.size() - i));
        std::swap(candidates[i], candidates[j]);
    }
    PromptSpec spec;
    spec.demo_count = k;
    spec.target_question = target.text;
    for (std::size_t i = 0; i < k; ++i) {
        spec.demonstrations.emplace_back(candidates[i]->question, candidates[i]->object);
    }
    return spec;
}

EncodedPrompt encode_prompt(const PromptSpec &spec, const ParaphraseInstance &target, const Tokenizer &tok) {
    const auto rendered = spec.render();
    const auto tokens = tok.encode(rendered.text);
    EncodedPrompt out;
    out.token_ids.reserve(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        out.token_ids.push_back(tokens[i].id);
        for (const auto &span : target.constraint_spans) {
            const std::size_t b = span.begin + rendered.target_offset;
            const std::size_t e = span.end + rendered.target_offset;
            if (tokens[i].begin < e && tokens[i].end > b) {
                out.constraint_positions.push_back(static_cast<std::uint32_t>(i));
                break;
            }
        }
    }
    if (out.constraint_positions.empty()) {
        throw ValidationError("paraphrase " + target.question_id + "/" + std::to_string(target.variant_index) +
                              " has no constraint tokens after tokenisation");
    }
    return out;
}

std::uint32_t answer_first_token(const std::string &answer, const Tokenizer &tok) {
    const auto ids = tok.encode_ids(answer);
    if (ids.empty()) throw ValidationError("answer '" + answer + "' has no tokens");
    return ids.front();
}

} // namespace ia
