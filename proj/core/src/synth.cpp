#include "ia/synth.hpp"

#include "ia/error.hpp"
#include "ia/random.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <unordered_map>
#include <unordered_set>

namespace ia::synth {

namespace {

constexpr const char *kOnsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "kr", "st", "tr", "sh"};
constexpr const char *kNuclei[] = {"a", "e", "i", "o", "u", "ai", "ei", "ou"};
constexpr const char *kCodas[] = {"", "", "", "n", "r", "s", "l", "th"};

std::string pseudo_word(Rng &rng) {
    const std::size_t syllables = 2 + static_cast<std::size_t>(rng.below(2));
    std::string w;
    for (std::size_t i = 0; i < syllables; ++i) {
        w += kOnsets[rng.below(std::size(kOnsets))];
        w += kNuclei[rng.below(std::size(kNuclei))];
    }
    w += kCodas[rng.below(std::size(kCodas))];
    w.front() = static_cast<char>(w.front() - 'a' + 'A');
    return w;
}

std::string fresh_word(Rng &rng, std::unordered_set<std::string> &used) {
    for (int attempt = 0; attempt < 10000; ++attempt) {
        std::string w = pseudo_word(rng);
        if (used.insert(w).second) return w;
    }
    throw ValidationError("synthetic corpus: ran out of distinct pseudo-words");
}

std::string pad_id(std::size_t i, std::size_t width) {
    std::string s = std::to_string(i);
    return std::string(width > s.size() ? width - s.size() : 0, '0') + s;
}

} // namespace

std::vector<QuestionRecord> synthetic_corpus(const CorpusSpec &spec, const TemplateTable *table) {
    if (spec.relations.empty()) throw ValidationError("synthetic corpus needs at least one relation");
    if (!(spec.min_views > 0.0 && spec.max_views >= spec.min_views)) {
        throw ValidationError("synthetic corpus: need 0 < min_views <= max_views");
    }
    std::unordered_set<std::string> used;
    if (table) {
        for (const auto &r : spec.relations) {
            for (const auto &t : table->templates(r)) {
                for (auto &w : pre_tokenize(t.render("").text)) used.insert(std::move(w));
            }
        }
    }
    for (auto &w : pre_tokenize(kTaskDescriptor)) used.insert(std::move(w));
    used.insert("Q");
    used.insert("A");

    const std::size_t total = spec.relations.size() * spec.questions_per_relation;
    const std::size_t width = std::to_string(total).size();
    const double lo = std::log(spec.min_views);
    const double hi = std::log(spec.max_views);

    std::vector<QuestionRecord> out;
    out.reserve(total);
    std::size_t next_id = 0;
    for (const auto &relation : spec.relations) {
        Rng rng(mix_seed(spec.seed, relation));
        const std::size_t n_obj =
            spec.objects_per_relation == 0 ? spec.questions_per_relation : spec.objects_per_relation;
        std::vector<std::string> objects;
        for (std::size_t i = 0; i < n_obj; ++i) objects.push_back(fresh_word(rng, used));
        for (std::size_t i = 0; i < spec.questions_per_relation; ++i) {
            QuestionRecord q;
            q.id = "q" + pad_id(next_id++, width);
            q.relation = relation;
            q.subject = fresh_word(rng, used);
            q.object = spec.objects_per_relation == 0 ? objects[i] : objects[rng.below(n_obj)];
            q.p_subj = std::round(std::exp(rng.uniform(lo, hi)));
            q.p_obj = std::round(std::exp(rng.uniform(lo, hi)));
            if (table) {
                q.question = table->templates(relation).front().render(q.subject).text;
            } else {
                q.question = relation + " of " + q.subject + "?";
            }
            out.push_back(std::move(q));
        }
    }
    return out;
}

Vocabulary build_vocabulary(const std::vector<QuestionRecord> &records, const TemplateTable &table,
                            std::size_t target_size) {
    std::vector<std::string> tokens{std::string(kUnknownToken)};
    std::unordered_set<std::string> seen{tokens.front()};
    auto add = [&](std::string_view text) {
        for (auto &w : pre_tokenize(text)) {
            if (seen.insert(w).second) tokens.push_back(std::move(w));
        }
    };
    add(kTaskDescriptor);
    add("Q: A:");
    std::set<std::string> relations;
    for (const auto &q : records) relations.insert(q.relation);
    for (const auto &r : relations) {
        for (const auto &t : table.templates(r)) add(t.render("").text);
    }
    for (const auto &q : records) {
        add(q.subject);
        add(q.object);
        add(q.question);
    }
    if (target_size != 0) {
        if (tokens.size() > target_size) {
            throw ValidationError("vocabulary needs " + std::to_string(tokens.size()) + " tokens, target size is " +
                                  std::to_string(target_size));
        }
        for (std::size_t i = 0; tokens.size() < target_size; ++i) {
            std::string fill = "<fill_" + std::to_string(i) + ">";
            if (seen.insert(fill).second) tokens.push_back(std::move(fill));
        }
    }
    return Vocabulary(std::move(tokens));
}

double planted_logit(const PlantedSpec &spec, bool fast, std::uint32_t layer) {
    const double L = spec.num_layers;
    if (fast) {
        const double k = std::ceil(L / 3.0);
        return spec.final_logit * std::min(1.0, layer / k);
    }
    return spec.final_logit * layer / L;
}

DecoderWeights planted_weights(const PlantedSpec &spec, const Vocabulary &vocab,
                               const std::vector<PlantedFact> &facts) {
    const std::size_t n = facts.size();
    if (n == 0) throw ValidationError("planted weights need at least one fact");
    if (spec.d_model < 3 * n + 3) {
        throw ShapeError("planted weights need d_model >= " + std::to_string(3 * n + 3) + " for " +
                         std::to_string(n) + " facts");
    }
    if (spec.d_inter < n) throw ShapeError("planted weights need d_inter >= " + std::to_string(n));

    ModelConfig cfg;
    cfg.num_layers = spec.num_layers;
    cfg.d_model = spec.d_model;
    cfg.d_inter = spec.d_inter;
    cfg.d_mid = spec.d_model;
    cfg.num_heads = 1;
    cfg.vocab_size = static_cast<std::uint32_t>(vocab.size());
    cfg.max_seq_len = spec.max_seq_len;
    DecoderWeights w = zero_weights(cfg);

    const std::size_t answer0 = 0, ident0 = n, copy0 = 2 * n, query_flag = 3 * n, subject_flag = 3 * n + 1,
                      answer_flag = 3 * n + 2;
    auto token_of = [&](const std::string &word, const char *what) {
        auto id = vocab.find(word);
        if (!id) throw ValidationError(std::string("planted ") + what + " '" + word + "' is not a vocabulary token");
        return *id;
    };

    std::unordered_map<std::uint32_t, std::string> claimed;
    auto claim = [&](std::uint32_t id, const std::string &word) {
        if (!claimed.emplace(id, word).second) {
            throw ValidationError("planted token '" + word + "' is used by more than one fact role");
        }
    };
    const std::uint32_t colon = token_of(":", "query mark");
    claim(colon, ":");
    w.embedding(colon, query_flag) = 1.0;
    // after an answer token the lens prefers "Q", which ends greedy decoding
    const std::uint32_t next_q = token_of("Q", "stop mark");
    claim(next_q, "Q");
    w.embedding(next_q, answer_flag) = spec.stop_logit;
    for (std::size_t i = 0; i < n; ++i) {
        const auto s = token_of(facts[i].subject, "subject");
        const auto a = token_of(facts[i].object, "object");
        claim(s, facts[i].subject);
        claim(a, facts[i].object);
        w.embedding(s, ident0 + i) = 1.0;
        w.embedding(s, subject_flag) = 1.0;
        w.embedding(a, answer0 + i) = 1.0;
        w.embedding(a, answer_flag) = 1.0;
    }

    // the attention logit on subject keys is query_gain after the 1/sqrt(d) scale
    auto &first = w.layers.front();
    first.w_q(query_flag, 0) = static_cast<float>(spec.query_gain * std::sqrt(static_cast<double>(cfg.d_mid)));
    first.w_k(subject_flag, 0) = 1.0;
    for (std::size_t i = 0; i < n; ++i) first.w_v(ident0 + i, copy0 + i) = 1.0;

    const double gate = 4.0;
    const double unit = silu(gate);
    for (std::uint32_t l = 1; l <= cfg.num_layers; ++l) {
        auto &lw = w.layers[l - 1];
        for (std::size_t i = 0; i < n; ++i) {
            const double step = planted_logit(spec, facts[i].fast, l) - planted_logit(spec, facts[i].fast, l - 1);
            lw.w_gate(copy0 + i, i) = gate;
            lw.w_up(copy0 + i, i) = 1.0;
            lw.w_down(i, answer0 + i) = static_cast<float>(step / unit);
        }
    }
    w.check();
    return w;
}

} // namespace ia::synth
