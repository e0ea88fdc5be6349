#pragma once

// Internal-state analyses over activation traces: logit-lens KL convergence,
// constraint-token attention, FFN up-projection similarity across paraphrases,
// cross-relation fact similarity, and response variety.

#include "ia/model.hpp"
#include "ia/stats.hpp"
#include "ia/tokenizer.hpp"
#include "ia/trace.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace ia::probes {

// All paraphrase traces of one question.
struct QuestionTraces {
    std::string question_id;
    std::vector<const ActivationTrace *> paraphrases;
};

using BatchTraces = std::vector<QuestionTraces>;

// Per-layer statistics of a batch: values[q][j][slot] per paraphrase,
// reduced to per-question mean/std over paraphrases (population divisor) and
// then to unweighted batch means over questions.
struct LayerCurve {
    std::vector<std::uint32_t> layers; // layer index of each slot
    std::vector<double> mean;
    std::vector<double> spread;
    std::vector<std::string> question_ids;
    std::vector<std::vector<double>> question_mean;   // [q][slot]
    std::vector<std::vector<double>> question_spread; // [q][slot]
    std::vector<std::vector<std::vector<double>>> values;
};

// Reduces per-paraphrase values into a LayerCurve. Every question must have
// the same number of paraphrases.
LayerCurve aggregate(std::vector<std::string> question_ids, std::vector<std::uint32_t> layers,
                     std::vector<std::vector<std::vector<double>>> values);

// Point mass on the first sub-word token of the answer.
Distribution golden_distribution(const std::string &answer, const Tokenizer &tok);

struct ConvergenceCurve : LayerCurve {
    double floor = stats::kDefaultKlFloor;
    std::size_t floored_events = 0; // lens probability of the target fell below the floor
};

// Layers 0..L. D = KL(golden || lens(h_l)) with the golden taken from each
// trace's answer_first_token, which reduces to -ln max(p[a], floor).
ConvergenceCurve kl_convergence(const BatchTraces &batch, const LensMatrix &lens,
                                double floor = stats::kDefaultKlFloor);

// Layers 1..L. Per paraphrase: max over constraint tokens of the head-averaged
// attention the probe position pays to that token.
LayerCurve attention_constraint_score(const BatchTraces &batch);

// Attention score of one paraphrase at layer index l (1-based).
double attention_score(const ActivationTrace &trace, std::size_t layer);

enum class PairMode {
    verbatim, // all ordered pairs including self-pairs, divided by p^2
    distinct, // mean over unordered pairs j < k
};

enum class RelationDivisor {
    mean,  // divide by the m*m summed pairs
    pairs, // divide by C(m, 2), the unordered pair count
};

struct SimilarityCurve {
    std::vector<std::string> question_ids;

    std::vector<std::uint32_t> sim_layers; // 1..L
    std::vector<double> sim;               // Sim_l
    std::vector<std::vector<double>> question_sim;

    std::vector<std::uint32_t> prob_layers; // 0..L
    std::vector<double> target_prob;        // p_l
    std::vector<std::vector<double>> question_target_prob;

    std::size_t zero_vector_events = 0;
};

// Similarity of a set of vectors; adds the number of zero-norm vectors to
// `zero_events` (their cosine terms count as 0). Instantiated for float and
// double.
template <typename T>
double set_similarity(const std::vector<std::span<const T>> &vectors, PairMode mode,
                      std::size_t *zero_events = nullptr);

// Sum of cosine similarities over all |xs| * |ys| cross pairs divided by the
// divisor's pair count. Requires |xs| == |ys| == m.
template <typename T>
double cross_similarity(const std::vector<std::span<const T>> &xs, const std::vector<std::span<const T>> &ys,
                        RelationDivisor divisor);

// Fills the similarity part (question_ids, sim_layers, sim, question_sim).
SimilarityCurve ffn_paraphrase_similarity(const BatchTraces &batch, PairMode mode = PairMode::verbatim);

// Fills the probability part of `curve` (prob_layers, target_prob, question_target_prob).
void target_probability_curve(const BatchTraces &batch, const LensMatrix &lens, SimilarityCurve &curve);

struct RelationHeatmap {
    std::size_t batch_level = 1;
    std::vector<std::string> relations;
    std::vector<std::uint32_t> layers;             // 1..L
    std::vector<std::vector<std::vector<double>>> values; // [slot][x][y]
};

// `per_relation` maps each relation to the traces of its m questions (original
// wording only). All relations must contribute the same m.
RelationHeatmap relation_similarity(const std::map<std::string, std::vector<const ActivationTrace *>> &per_relation,
                                    std::size_t batch_level, RelationDivisor divisor = RelationDivisor::mean);

// Upper-triangle (x < y) entries of the heatmap at one layer slot.
std::vector<double> off_diagonal(const RelationHeatmap &heatmap, std::size_t slot);

// Welch test of off-diagonal entries, `a` against `b`, at the given layer index.
stats::WelchResult heatmap_welch(const RelationHeatmap &a, const RelationHeatmap &b, std::uint32_t layer,
                                 stats::Direction direction = stats::Direction::greater);

struct VarietyInput {
    std::string question_id;
    double popularity = 0.0;
    std::string gold;
    std::vector<std::string> answers; // one per paraphrase
};

struct VarietyEntry {
    std::string question_id;
    double popularity = 0.0;
    std::vector<double> f1;
    double variety = 0.0; // population std of f1
};

using VarietyReport = std::vector<VarietyEntry>;

VarietyReport response_variety(const std::vector<VarietyInput> &inputs, const stats::F1Normalizer &norm = {});

} // namespace ia::probes
