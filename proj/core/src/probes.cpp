#include "ia/probes.hpp"

#include "ia/error.hpp"

#include <cmath>

namespace ia::probes {

namespace {

void check_batch(const BatchTraces &batch) {
    if (batch.empty()) throw ValidationError("probe batch holds no questions");
    const std::size_t p = batch.front().paraphrases.size();
    for (const auto &q : batch) {
        if (q.paraphrases.empty()) throw ValidationError("question " + q.question_id + " has no traces");
        if (q.paraphrases.size() != p) {
            throw ValidationError("question " + q.question_id + " has " + std::to_string(q.paraphrases.size()) +
                                  " paraphrases, expected " + std::to_string(p));
        }
        for (const auto *t : q.paraphrases) {
            if (!(t->config == batch.front().paraphrases.front()->config)) {
                throw ValidationError("traces in one batch must share a model config");
            }
        }
    }
}

void check_lens(const ModelConfig &c, const LensMatrix &lens) {
    if (lens.vocab_size != c.vocab_size || lens.d_model != c.d_model) {
        throw ShapeError("lens is " + std::to_string(lens.vocab_size) + "x" + std::to_string(lens.d_model) +
                         " but traces have |V|=" + std::to_string(c.vocab_size) +
                         " d_model=" + std::to_string(c.d_model));
    }
}

std::vector<std::string> ids_of(const BatchTraces &batch) {
    std::vector<std::string> ids;
    for (const auto &q : batch) ids.push_back(q.question_id);
    return ids;
}

std::vector<std::uint32_t> layer_range(std::uint32_t first, std::uint32_t last) {
    std::vector<std::uint32_t> out;
    for (std::uint32_t l = first; l <= last; ++l) out.push_back(l);
    return out;
}

template <typename T>
double cross_sum(const std::vector<std::span<const T>> &xs, const std::vector<std::span<const T>> &ys) {
    double s = 0.0;
    for (const auto &x : xs) {
        for (const auto &y : ys) s += stats::cosine_similarity(x, y);
    }
    return s;
}

} // namespace

LayerCurve aggregate(std::vector<std::string> question_ids, std::vector<std::uint32_t> layers,
                     std::vector<std::vector<std::vector<double>>> values) {
    if (values.empty()) throw ValidationError("aggregate: no questions");
    const std::size_t n_slots = layers.size();
    const std::size_t p = values.front().size();
    LayerCurve c;
    c.layers = std::move(layers);
    c.question_ids = std::move(question_ids);
    c.mean.assign(n_slots, 0.0);
    c.spread.assign(n_slots, 0.0);
    std::vector<double> column;
    for (const auto &q : values) {
        if (q.size() != p) throw ValidationError("aggregate: mismatched paraphrase counts");
        std::vector<double> qm(n_slots), qs(n_slots);
        for (std::size_t s = 0; s < n_slots; ++s) {
            column.clear();
            for (const auto &para : q) column.push_back(para.at(s));
            const auto ms = stats::mean_std(column);
            qm[s] = ms.mean;
            qs[s] = ms.std;
        }
        c.question_mean.push_back(std::move(qm));
        c.question_spread.push_back(std::move(qs));
    }
    const double n = static_cast<double>(values.size());
    for (std::size_t s = 0; s < n_slots; ++s) {
        double m = 0.0, v = 0.0;
        for (std::size_t q = 0; q < values.size(); ++q) {
            m += c.question_mean[q][s];
            v += c.question_spread[q][s];
        }
        c.mean[s] = m / n;
        c.spread[s] = v / n;
    }
    c.values = std::move(values);
    return c;
}

Distribution golden_distribution(const std::string &answer, const Tokenizer &tok) {
    const auto ids = tok.encode_ids(answer);
    if (ids.empty()) throw ValidationError("golden distribution of an empty answer");
    Distribution d;
    d.probs.assign(tok.vocabulary().size(), 0.0);
    d.probs[ids.front()] = 1.0;
    return d;
}

ConvergenceCurve kl_convergence(const BatchTraces &batch, const LensMatrix &lens, double floor) {
    check_batch(batch);
    if (!(floor > 0.0 && floor < 1.0)) throw ValidationError("KL floor must lie in (0, 1)");
    const ModelConfig &cfg = batch.front().paraphrases.front()->config;
    check_lens(cfg, lens);
    const double cap = -std::log(floor);

    std::size_t floored = 0;
    std::vector<std::vector<std::vector<double>>> values;
    for (const auto &q : batch) {
        auto &per_q = values.emplace_back();
        for (const auto *t : q.paraphrases) {
            auto &d = per_q.emplace_back(cfg.num_layers + 1);
            for (std::size_t l = 0; l <= cfg.num_layers; ++l) {
                const auto logp = logit_lens_log(t->hidden_at(l), lens);
                const double nll = -logp[t->answer_first_token];
                if (nll > cap) {
                    ++floored;
                    d[l] = cap;
                } else {
                    d[l] = std::max(nll, 0.0);
                }
            }
        }
    }
    ConvergenceCurve curve;
    static_cast<LayerCurve &>(curve) = aggregate(ids_of(batch), layer_range(0, cfg.num_layers), std::move(values));
    curve.floor = floor;
    curve.floored_events = floored;
    return curve;
}

double attention_score(const ActivationTrace &t, std::size_t layer) {
    if (t.constraint_positions.empty()) {
        throw ValidationError("trace " + t.prompt_id + " has no constraint positions");
    }
    if (layer < 1 || layer > t.layers.size()) throw ShapeError("attention_score: layer out of range");
    const auto &rows = t.layers[layer - 1].attention_rows;
    if (rows.empty()) throw ShapeError("trace " + t.prompt_id + " has no attention rows");
    double best = 0.0;
    bool first = true;
    for (auto c : t.constraint_positions) {
        if (c >= t.probe_position) {
            throw ValidationError("trace " + t.prompt_id + ": constraint position " + std::to_string(c) +
                                  " is not before probe position " + std::to_string(t.probe_position) +
                                  " (future token)");
        }
        double sum = 0.0;
        for (const auto &row : rows) sum += row.at(c);
        const double avg = sum / static_cast<double>(rows.size());
        if (first || avg > best) best = avg;
        first = false;
    }
    return best;
}

LayerCurve attention_constraint_score(const BatchTraces &batch) {
    check_batch(batch);
    const std::uint32_t L = batch.front().paraphrases.front()->config.num_layers;
    std::vector<std::vector<std::vector<double>>> values;
    for (const auto &q : batch) {
        auto &per_q = values.emplace_back();
        for (const auto *t : q.paraphrases) {
            auto &s = per_q.emplace_back(L);
            for (std::size_t l = 1; l <= L; ++l) s[l - 1] = attention_score(*t, l);
        }
    }
    return aggregate(ids_of(batch), layer_range(1, L), std::move(values));
}

template <typename T>
double set_similarity(const std::vector<std::span<const T>> &vectors, PairMode mode, std::size_t *zero_events) {
    const std::size_t p = vectors.size();
    if (p == 0) throw ValidationError("set_similarity of an empty set");
    if (mode == PairMode::distinct && p < 2) throw ValidationError("distinct-pairs similarity needs p >= 2");
    std::size_t zeros = 0;
    double diag = 0.0;
    for (const auto &v : vectors) {
        if (auto c = stats::cosine_similarity_checked(v, v)) {
            diag += *c;
        } else {
            ++zeros;
        }
    }
    double off = 0.0; // sum over j < k
    for (std::size_t j = 0; j < p; ++j) {
        for (std::size_t k = j + 1; k < p; ++k) off += stats::cosine_similarity(vectors[j], vectors[k]);
    }
    if (zero_events) *zero_events += zeros;
    const double pd = static_cast<double>(p);
    if (mode == PairMode::verbatim) return (diag + 2.0 * off) / (pd * pd);
    return off / (pd * (pd - 1.0) / 2.0);
}

template double set_similarity<float>(const std::vector<std::span<const float>> &, PairMode, std::size_t *);
template double set_similarity<double>(const std::vector<std::span<const double>> &, PairMode, std::size_t *);

template <typename T>
double cross_similarity(const std::vector<std::span<const T>> &xs, const std::vector<std::span<const T>> &ys,
                        RelationDivisor divisor) {
    const std::size_t m = xs.size();
    if (m == 0 || ys.size() != m) throw ValidationError("cross_similarity needs equal, nonzero set sizes");
    if (divisor == RelationDivisor::pairs && m < 2) throw ValidationError("pairs divisor C(m, 2) needs m >= 2");
    const double md = static_cast<double>(m);
    const double denom = divisor == RelationDivisor::mean ? md * md : md * (md - 1.0) / 2.0;
    return cross_sum(xs, ys) / denom;
}

template double cross_similarity<float>(const std::vector<std::span<const float>> &,
                                        const std::vector<std::span<const float>> &, RelationDivisor);
template double cross_similarity<double>(const std::vector<std::span<const double>> &,
                                         const std::vector<std::span<const double>> &, RelationDivisor);

SimilarityCurve ffn_paraphrase_similarity(const BatchTraces &batch, PairMode mode) {
    check_batch(batch);
    const std::uint32_t L = batch.front().paraphrases.front()->config.num_layers;
    SimilarityCurve curve;
    curve.question_ids = ids_of(batch);
    curve.sim_layers = layer_range(1, L);
    curve.sim.assign(L, 0.0);
    std::vector<std::span<const float>> ups;
    for (const auto &q : batch) {
        auto &qs = curve.question_sim.emplace_back(L);
        for (std::size_t l = 1; l <= L; ++l) {
            ups.clear();
            for (const auto *t : q.paraphrases) ups.emplace_back(t->layers.at(l - 1).up_projection);
            qs[l - 1] = set_similarity(ups, mode, &curve.zero_vector_events);
        }
    }
    const double n = static_cast<double>(batch.size());
    for (std::size_t s = 0; s < L; ++s) {
        double sum = 0.0;
        for (const auto &qs : curve.question_sim) sum += qs[s];
        curve.sim[s] = sum / n;
    }
    return curve;
}

void target_probability_curve(const BatchTraces &batch, const LensMatrix &lens, SimilarityCurve &curve) {
    check_batch(batch);
    const ModelConfig &cfg = batch.front().paraphrases.front()->config;
    check_lens(cfg, lens);
    const std::uint32_t L = cfg.num_layers;
    curve.prob_layers = layer_range(0, L);
    curve.target_prob.assign(L + 1, 0.0);
    curve.question_target_prob.clear();
    if (curve.question_ids.empty()) curve.question_ids = ids_of(batch);
    for (const auto &q : batch) {
        auto &qp = curve.question_target_prob.emplace_back(L + 1, 0.0);
        for (const auto *t : q.paraphrases) {
            for (std::size_t l = 0; l <= L; ++l) {
                qp[l] += std::exp(logit_lens_log(t->hidden_at(l), lens)[t->answer_first_token]);
            }
        }
        for (double &x : qp) x /= static_cast<double>(q.paraphrases.size());
    }
    const double n = static_cast<double>(batch.size());
    for (std::size_t l = 0; l <= L; ++l) {
        double sum = 0.0;
        for (const auto &qp : curve.question_target_prob) sum += qp[l];
        curve.target_prob[l] = sum / n;
    }
}

RelationHeatmap relation_similarity(const std::map<std::string, std::vector<const ActivationTrace *>> &per_relation,
                                    std::size_t batch_level, RelationDivisor divisor) {
    if (per_relation.empty()) throw ValidationError("relation_similarity needs at least one relation");
    const std::size_t m = per_relation.begin()->second.size();
    if (m == 0) throw ValidationError("relation_similarity: relation with no questions");
    const ActivationTrace *first = per_relation.begin()->second.front();
    for (const auto &[r, traces] : per_relation) {
        if (traces.size() != m) {
            throw ValidationError("relation '" + r + "' has " + std::to_string(traces.size()) +
                                  " questions, expected " + std::to_string(m));
        }
        for (const auto *t : traces) {
            if (!(t->config == first->config)) throw ValidationError("relation traces must share a model config");
        }
    }
    if (divisor == RelationDivisor::pairs && m < 2) {
        throw ValidationError("pairs divisor C(m, 2) needs m >= 2");
    }
    const std::uint32_t L = first->config.num_layers;

    RelationHeatmap hm;
    hm.batch_level = batch_level;
    for (const auto &[r, _] : per_relation) hm.relations.push_back(r);
    hm.layers = layer_range(1, L);
    const std::size_t R = hm.relations.size();
    hm.values.assign(L, std::vector<std::vector<double>>(R, std::vector<double>(R, 0.0)));

    std::vector<std::vector<std::span<const float>>> ups(R);
    for (std::uint32_t l = 1; l <= L; ++l) {
        std::size_t x = 0;
        for (const auto &[r, traces] : per_relation) {
            ups[x].clear();
            for (const auto *t : traces) ups[x].emplace_back(t->layers.at(l - 1).up_projection);
            ++x;
        }
        auto &mat = hm.values[l - 1];
        for (std::size_t i = 0; i < R; ++i) {
            for (std::size_t j = i; j < R; ++j) {
                // computed once and mirrored so the matrix is exactly symmetric
                const double v = cross_similarity(ups[i], ups[j], divisor);
                mat[i][j] = v;
                mat[j][i] = v;
            }
        }
    }
    return hm;
}

std::vector<double> off_diagonal(const RelationHeatmap &heatmap, std::size_t slot) {
    const auto &mat = heatmap.values.at(slot);
    std::vector<double> out;
    for (std::size_t i = 0; i < mat.size(); ++i) {
        for (std::size_t j = i + 1; j < mat.size(); ++j) out.push_back(mat[i][j]);
    }
    return out;
}

stats::WelchResult heatmap_welch(const RelationHeatmap &a, const RelationHeatmap &b, std::uint32_t layer,
                                 stats::Direction direction) {
    auto slot_of = [layer](const RelationHeatmap &h) {
        for (std::size_t s = 0; s < h.layers.size(); ++s) {
            if (h.layers[s] == layer) return s;
        }
        throw ValidationError("heatmap has no layer " + std::to_string(layer));
    };
    const auto xa = off_diagonal(a, slot_of(a));
    const auto xb = off_diagonal(b, slot_of(b));
    if (xa.size() < 2 || xb.size() < 2) {
        throw ValidationError("Welch test on heatmaps needs at least 3 relations (2 off-diagonal entries)");
    }
    return stats::welch_one_sided(xa, xb, direction);
}

VarietyReport response_variety(const std::vector<VarietyInput> &inputs, const stats::F1Normalizer &norm) {
    VarietyReport out;
    for (const auto &in : inputs) {
        if (in.answers.empty()) throw ValidationError("question " + in.question_id + " has no decoded answers");
        VarietyEntry e;
        e.question_id = in.question_id;
        e.popularity = in.popularity;
        for (const auto &a : in.answers) e.f1.push_back(stats::token_f1(a, in.gold, norm));
        e.variety = stats::mean_std(e.f1).std;
        out.push_back(std::move(e));
    }
    return out;
}

} // namespace ia::probes
