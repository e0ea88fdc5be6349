#pragma once

// Seeded desk-scale stand-ins: synthetic corpora, vocabularies that cover a
// corpus plus its templates, and planted decoder weights whose logit-lens
// convergence depth is known by construction.

#include "ia/corpus.hpp"
#include "ia/model.hpp"
#include "ia/tokenizer.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace ia::synth {

struct CorpusSpec {
    std::vector<std::string> relations{"capital"};
    std::size_t questions_per_relation = 50;
    // Answers are drawn from a pool of this size per relation; 0 gives every
    // question its own answer.
    std::size_t objects_per_relation = 0;
    // Page views are log-uniform in [min_views, max_views].
    double min_views = 10.0;
    double max_views = 1e6;
    std::uint64_t seed = 0;
};

// Subjects and objects are unique capitalised pseudo-words (one token each
// under a vocabulary built by build_vocabulary). The question text is the
// relation's first template when `table` is given, else "<relation> of <s>?".
std::vector<QuestionRecord> synthetic_corpus(const CorpusSpec &spec, const TemplateTable *table = nullptr);

// Every word and mark appearing in the prompt descriptor, the "Q:"/"A:" frame,
// the templates of the corpus relations, subjects and objects, in first-seen
// order after "<unk>". Padded with "<fill_N>" tokens up to `target_size`
// (0 = no padding). Throws ValidationError when the coverage exceeds it.
Vocabulary build_vocabulary(const std::vector<QuestionRecord> &records, const TemplateTable &table,
                            std::size_t target_size = 0);

// A question whose answer the planted model should produce, and how fast.
struct PlantedFact {
    std::string subject;
    std::string object;
    bool fast = false; // converges by layer ceil(L/3) instead of L
};

struct PlantedSpec {
    std::uint32_t num_layers = 8;
    std::uint32_t d_model = 64;
    std::uint32_t d_inter = 32;
    std::uint32_t max_seq_len = 512;
    double final_logit = 10.0;   // answer logit reached at full convergence
    double query_gain = 30.0;    // probe-to-subject attention logit
    double stop_logit = 10.0;    // lens logit of "Q" right after an answer token
};

// Per-fact answer logit after layer l: final_logit * min(1, l / ceil(L/3))
// for fast facts and final_logit * l / L otherwise.
double planted_logit(const PlantedSpec &spec, bool fast, std::uint32_t layer);

// Builds single-head weights over `vocab` for prompts without
// demonstrations. Layer 1 attention moves the subject's identity from its
// position to the final ':' token; each layer's FFN then adds the scheduled
// increment of the answer's embedding row. The lens is the tied embedding.
// Requires d_model >= 3 * |facts| + 3 and d_inter >= |facts|; every subject
// and object must be a single vocabulary token, subjects and objects must be
// distinct, and the vocabulary must hold ":" and "Q".
DecoderWeights planted_weights(const PlantedSpec &spec, const Vocabulary &vocab, const std::vector<PlantedFact> &facts);

} // namespace ia::synth
