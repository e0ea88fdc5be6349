#include "commands.hpp"

#include "report.hpp"

#include "ia/error.hpp"
#include "ia/model.hpp"
#include "ia/random.hpp"
#include "ia/synth.hpp"
#include "ia/tokenizer.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>
#include <unordered_map>
#include <unordered_set>

namespace ia::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

// Bad command-line input or an unusable input path; exit code 2.
class UsageError : public Error {
public:
    using Error::Error;
};

int guarded(std::ostream &log, const std::function<int()> &body) {
    try {
        return body();
    } catch (const UsageError &e) {
        log << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const IoError &e) {
        log << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception &e) {
        log << "error: " << e.what() << '\n';
        return kExitInvalid;
    }
}

void require_file(const fs::path &p, std::string_view what) {
    if (p.empty()) throw UsageError(std::string(what) + " path not given");
    std::error_code ec;
    if (fs::is_directory(p, ec)) throw UsageError(std::string(what) + " " + p.string() + " is a directory");
    if (!fs::exists(p, ec)) throw UsageError(std::string(what) + " " + p.string() + " does not exist");
}

std::string selection_name(Selection s) { return s == Selection::relation ? "relation" : "global"; }
std::string scheme_name(BatchScheme s) { return s == BatchScheme::head_torso_tail ? "head-torso-tail" : "head-tail"; }
std::string pair_name(probes::PairMode p) { return p == probes::PairMode::verbatim ? "verbatim" : "distinct"; }
std::string divisor_name(probes::RelationDivisor d) { return d == probes::RelationDivisor::mean ? "mean" : "pairs"; }

template <typename E>
E enum_from(const std::map<std::string, E> &names, const std::string &s, const char *field) {
    auto it = names.find(s);
    if (it == names.end()) throw FormatError(std::string("manifest: unknown ") + field + " '" + s + "'");
    return it->second;
}

const std::map<std::string, Selection> kSelections{{"relation", Selection::relation}, {"global", Selection::global}};
const std::map<std::string, BatchScheme> kSchemes{{"head-torso-tail", BatchScheme::head_torso_tail},
                                                  {"head-tail", BatchScheme::head_tail}};
const std::map<std::string, probes::PairMode> kPairModes{{"verbatim", probes::PairMode::verbatim},
                                                         {"distinct", probes::PairMode::distinct}};
const std::map<std::string, probes::RelationDivisor> kDivisors{{"mean", probes::RelationDivisor::mean},
                                                               {"pairs", probes::RelationDivisor::pairs}};

json config_json(const ModelConfig &c) {
    return json{{"num_layers", c.num_layers}, {"d_model", c.d_model},       {"d_inter", c.d_inter},
                {"d_mid", c.d_mid},           {"num_heads", c.num_heads},   {"vocab_size", c.vocab_size},
                {"max_seq_len", c.max_seq_len}};
}

json manifest_json(const RunManifest &m) {
    json j;
    j["tool"] = "ia-probe";
    j["version"] = std::string(kToolVersion);
    j["seed"] = m.seed;
    j["corpus"] = m.corpus;
    j["weights"] = m.weights;
    j["vocab"] = m.vocab;
    j["templates"] = m.templates;
    j["selection"] = selection_name(m.selection);
    j["relation"] = m.relation;
    j["scheme"] = scheme_name(m.scheme);
    j["batches"] = m.batches;
    j["batch_size"] = m.batch_size;
    j["per_relation_min"] = m.per_relation_min;
    j["paraphrases"] = m.paraphrases;
    j["demos"] = m.demos;
    j["answer_tokens"] = m.answer_tokens;
    j["kl_floor"] = m.kl_floor;
    j["kl_log_base"] = "e";
    j["pair_divisor"] = pair_name(m.pair_divisor);
    j["relation_divisor"] = divisor_name(m.relation_divisor);
    if (m.model) j["model"] = config_json(*m.model);
    json groups = json::array();
    for (const auto &g : m.groups) {
        groups.push_back(
            json{{"relation", g.relation}, {"label", g.label}, {"index", g.index}, {"questions", g.question_ids}});
    }
    j["groups"] = groups;
    return j;
}

std::string read_text(const fs::path &p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("cannot open " + p.string());
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

void write_text(const fs::path &p, const std::string &text) {
    std::ofstream out(p, std::ios::binary);
    out << text;
    out.close();
    if (!out) throw IoError("cannot write " + p.string());
}

std::vector<BatchGroup> select_groups(const std::vector<QuestionRecord> &records, const RunManifest &m) {
    std::vector<BatchGroup> groups;
    if (m.selection == Selection::relation) {
        std::vector<std::string> relations;
        if (!m.relation.empty()) {
            relations.push_back(m.relation);
        } else {
            std::set<std::string> seen;
            for (const auto &q : records) seen.insert(q.relation);
            relations.assign(seen.begin(), seen.end());
        }
        for (const auto &r : relations) {
            for (auto &b : sort_into_batches(records, r, m.batches, m.batch_size, m.scheme)) {
                BatchGroup g{r, b.label, b.index, {}};
                for (const auto &q : b.questions) g.question_ids.push_back(q.id);
                groups.push_back(std::move(g));
            }
        }
    } else {
        const auto rb = equispaced_relation_batches(records, m.batches, m.batch_size, m.per_relation_min);
        for (std::size_t i = 0; i < rb.batches.size(); ++i) {
            for (const auto &[r, qs] : rb.batches[i]) {
                BatchGroup g{r, batch_label(i + 1, m.batches, m.scheme), i + 1, {}};
                for (const auto &q : qs) g.question_ids.push_back(q.id);
                groups.push_back(std::move(g));
            }
        }
    }
    return groups;
}

// Tokens that end a greedy answer: the next "Q" line or a lone punctuation mark.
std::vector<bool> stop_tokens(const Vocabulary &v) {
    std::vector<bool> stop(v.size(), false);
    for (std::uint32_t i = 0; i < v.size(); ++i) {
        const auto &t = v.token(i);
        if (t == "Q" || (t.size() == 1 && std::ispunct(static_cast<unsigned char>(t[0])))) stop[i] = true;
    }
    return stop;
}

struct Job {
    const QuestionRecord *question = nullptr;
    ParaphraseInstance paraphrase;
};

std::string prompt_id(const std::string &qid, std::size_t variant) { return qid + "/" + std::to_string(variant); }

int simulate_impl(const SimulateOptions &opts, std::ostream &log) {
    RunManifest m = opts.manifest;
    require_file(m.corpus, "corpus");
    require_file(m.weights, "weights");
    require_file(m.vocab, "vocabulary");
    require_file(m.templates, "templates");
    if (opts.out.empty()) throw UsageError("output trace path not given");

    const auto records = read_corpus(fs::path(m.corpus));
    const Tokenizer tok(Vocabulary::load(fs::path(m.vocab)));
    const auto table = TemplateTable::load(fs::path(m.templates));
    const auto weights = read_weights(fs::path(m.weights));
    if (weights.config.vocab_size != tok.vocabulary().size()) {
        throw FormatError("weights " + m.weights + " have |V|=" + std::to_string(weights.config.vocab_size) +
                          " but vocabulary " + m.vocab + " has " + std::to_string(tok.vocabulary().size()) +
                          " tokens");
    }
    m.model = weights.config;
    m.groups = select_groups(records, m);

    std::unordered_map<std::string, const QuestionRecord *> by_id;
    for (const auto &q : records) by_id.emplace(q.id, &q);
    std::vector<Job> jobs;
    for (const auto &g : m.groups) {
        for (const auto &qid : g.question_ids) {
            const QuestionRecord *q = by_id.at(qid);
            for (auto &inst : expand_paraphrases(*q, table, m.paraphrases)) jobs.push_back({q, std::move(inst)});
        }
    }

    const LensMatrix lens = lens_from_weights(weights);
    const auto stop = stop_tokens(tok.vocabulary());
    std::vector<std::string> answers(jobs.size());

    TraceFileWriter writer(opts.out, weights.config);
    constexpr std::size_t kChunk = 256;
    for (std::size_t start = 0; start < jobs.size(); start += kChunk) {
        const std::size_t n = std::min(kChunk, jobs.size() - start);
        std::vector<ActivationTrace> traces(n);
        parallel_for(n, [&](std::size_t i) {
            const Job &job = jobs[start + i];
            const std::string id = prompt_id(job.question->id, job.paraphrase.variant_index);
            try {
                const auto spec = build_prompt(job.paraphrase, records, m.demos, m.seed);
                const auto enc = encode_prompt(spec, job.paraphrase, tok);
                if (enc.token_ids.size() > weights.config.max_seq_len) {
                    throw ValidationError("prompt has " + std::to_string(enc.token_ids.size()) +
                                          " tokens, model max_seq_len is " +
                                          std::to_string(weights.config.max_seq_len));
                }
                auto t = decoder_forward(enc.token_ids, weights);
                t.prompt_id = id;
                t.constraint_positions = enc.constraint_positions;
                t.answer_first_token = answer_first_token(job.question->object, tok);
                traces[i] = std::move(t);
                if (m.answer_tokens > 0) {
                    const auto out = greedy_generate(enc.token_ids, weights, lens, m.answer_tokens,
                                                     [&](std::uint32_t id) { return stop[id]; });
                    answers[start + i] = tok.decode(out);
                }
            } catch (const Error &e) {
                throw ValidationError("prompt " + id + ": " + e.what());
            }
        });
        for (const auto &t : traces) writer.append(t);
    }
    writer.close();

    write_text(manifest_path_for(opts.out), manifest_json(m).dump(2) + "\n");
    if (m.answer_tokens > 0) {
        std::string tsv = "prompt_id\tanswer\n";
        for (std::size_t i = 0; i < jobs.size(); ++i) {
            tsv += prompt_id(jobs[i].question->id, jobs[i].paraphrase.variant_index) + "\t" + answers[i] + "\n";
        }
        write_text(answers_path_for(opts.out), tsv);
    }
    log << "wrote " << writer.record_count() << " records (" << writer.bytes_written() << " bytes) to "
        << opts.out.string() << '\n';
    return kExitOk;
}

// ---- analysis -------------------------------------------------------------

struct LoadedRun {
    TraceFile file;
    RunManifest manifest;
    bool has_manifest = false;
    // question id -> traces ordered by variant
    std::unordered_map<std::string, std::vector<std::pair<std::size_t, const ActivationTrace *>>> by_question;
    bool multi_relation = false;

    std::string batch_name(const BatchGroup &g) const {
        return multi_relation ? g.relation + "/" + g.label : g.label;
    }

    probes::BatchTraces batch(const BatchGroup &g) const {
        probes::BatchTraces b;
        for (const auto &qid : g.question_ids) {
            auto it = by_question.find(qid);
            if (it == by_question.end()) {
                throw ValidationError("question " + qid + " of batch " + batch_name(g) + " has no trace records");
            }
            probes::QuestionTraces qt{qid, {}};
            for (const auto &[v, t] : it->second) qt.paraphrases.push_back(t);
            b.push_back(std::move(qt));
        }
        return b;
    }
};

std::pair<std::string, std::size_t> split_prompt_id(const std::string &id) {
    const auto slash = id.rfind('/');
    if (slash == std::string::npos) return {id, 1};
    const std::string tail = id.substr(slash + 1);
    if (tail.empty() || !std::all_of(tail.begin(), tail.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
        return {id, 1};
    }
    return {id.substr(0, slash), static_cast<std::size_t>(std::stoul(tail))};
}

// Reads, validates and indexes a trace; returns an exit code when the trace
// is unusable.
std::optional<int> load_run(const fs::path &trace, LoadedRun &run, std::ostream &log) {
    require_file(trace, "trace");
    run.file = read_trace_file(trace, ReadMode::raw);
    std::size_t bad = 0;
    for (std::size_t i = 0; i < run.file.records.size(); ++i) {
        const auto &r = run.file.records[i];
        for (const auto &v : validate_trace(r, run.file.config)) {
            log << "record " << i << " (" << r.prompt_id << "): " << format_violation(v) << '\n';
            ++bad;
        }
    }
    if (bad > 0) {
        log << "error: trace " << trace.string() << " failed validation with " << bad << " violations\n";
        return kExitInvalid;
    }
    if (run.file.records.empty()) throw ValidationError("trace " + trace.string() + " holds no records");

    std::vector<std::string> order;
    for (const auto &r : run.file.records) {
        auto [qid, variant] = split_prompt_id(r.prompt_id);
        auto &list = run.by_question[qid];
        if (list.empty()) order.push_back(qid);
        list.emplace_back(variant, &r);
    }
    for (auto &[qid, list] : run.by_question) {
        std::stable_sort(list.begin(), list.end(), [](const auto &a, const auto &b) { return a.first < b.first; });
    }

    const fs::path mp = manifest_path_for(trace);
    if (fs::exists(mp)) {
        run.manifest = load_manifest(mp);
        run.has_manifest = true;
    } else {
        run.manifest.groups.push_back(BatchGroup{"", "all", 1, order});
    }
    std::set<std::string> relations;
    for (const auto &g : run.manifest.groups) relations.insert(g.relation);
    run.multi_relation = relations.size() > 1;
    return std::nullopt;
}

std::vector<double> column(const std::vector<std::vector<double>> &rows, std::size_t slot) {
    std::vector<double> out;
    for (const auto &r : rows) out.push_back(r.at(slot));
    return out;
}

void write_curve_rows(CsvWriter &csv, CsvWriter &qcsv, const std::string &batch, const probes::LayerCurve &c) {
    for (std::size_t s = 0; s < c.layers.size(); ++s) {
        csv.cell(std::size_t{c.layers[s]}).cell(batch).cell("mean").cell(c.mean[s]).end_row();
        csv.cell(std::size_t{c.layers[s]}).cell(batch).cell("spread").cell(c.spread[s]).end_row();
    }
    for (std::size_t q = 0; q < c.question_ids.size(); ++q) {
        for (std::size_t s = 0; s < c.layers.size(); ++s) {
            qcsv.cell(std::size_t{c.layers[s]}).cell(batch).cell(c.question_ids[q]).cell("mean");
            qcsv.cell(c.question_mean[q][s]).end_row();
            qcsv.cell(std::size_t{c.layers[s]}).cell(batch).cell(c.question_ids[q]).cell("spread");
            qcsv.cell(c.question_spread[q][s]).end_row();
        }
    }
}

PlotSeries curve_series(const std::string &name, const probes::LayerCurve &c) {
    PlotSeries s{name, {}, c.mean, c.spread};
    for (auto l : c.layers) s.x.push_back(l);
    return s;
}

void analyze_kl(const LoadedRun &run, const AnalyzeOptions &opts, double floor, std::ostream &log) {
    if (!opts.lens) throw UsageError("kl analysis needs --lens");
    require_file(*opts.lens, "lens");
    const LensMatrix lens = read_lens(*opts.lens);
    CsvWriter csv(opts.out_dir / "kl.csv", "layer,batch,stat,value");
    CsvWriter qcsv(opts.out_dir / "kl_questions.csv", "layer,batch,question,stat,value");
    CsvWriter summary(opts.out_dir / "kl_summary.csv", "batch,first_layer_below,threshold,floored_events");
    std::vector<PlotSeries> series;
    for (const auto &g : run.manifest.groups) {
        const auto name = run.batch_name(g);
        const auto curve = probes::kl_convergence(run.batch(g), lens, floor);
        write_curve_rows(csv, qcsv, name, curve);
        std::string first;
        for (std::size_t s = 0; s < curve.layers.size(); ++s) {
            if (curve.mean[s] < opts.kl_threshold) {
                first = std::to_string(curve.layers[s]);
                break;
            }
        }
        summary.cell(name).cell(first).cell(opts.kl_threshold).cell(curve.floored_events).end_row();
        log << "kl " << name << ": first layer with mean < " << opts.kl_threshold << ": "
            << (first.empty() ? "none" : first) << '\n';
        if (curve.floored_events > 0) {
            log << "kl " << name << ": " << curve.floored_events << " lens probabilities floored at "
                << format_number(floor) << '\n';
        }
        series.push_back(curve_series(name, curve));
    }
    csv.close();
    qcsv.close();
    summary.close();
    if (opts.plot) {
        write_line_plot(opts.out_dir / "kl.svg", "KL(golden || lens) per layer", "layer", "KL divergence (nats)",
                        series);
    }
}

void analyze_attn(const LoadedRun &run, const AnalyzeOptions &opts, std::ostream &log) {
    CsvWriter csv(opts.out_dir / "attn.csv", "layer,batch,stat,value");
    CsvWriter qcsv(opts.out_dir / "attn_questions.csv", "layer,batch,question,stat,value");
    std::vector<PlotSeries> series;
    for (const auto &g : run.manifest.groups) {
        const auto name = run.batch_name(g);
        const auto curve = probes::attention_constraint_score(run.batch(g));
        write_curve_rows(csv, qcsv, name, curve);
        series.push_back(curve_series(name, curve));
        log << "attn " << name << ": " << curve.question_ids.size() << " questions\n";
    }
    csv.close();
    qcsv.close();
    if (opts.plot) {
        write_line_plot(opts.out_dir / "attn.svg", "Constraint-token attention score", "layer", "attention score",
                        series);
    }
}

void analyze_ffn(const LoadedRun &run, const AnalyzeOptions &opts, probes::PairMode mode, std::ostream &log) {
    std::optional<LensMatrix> lens;
    if (opts.lens) {
        require_file(*opts.lens, "lens");
        lens = read_lens(*opts.lens);
    }
    CsvWriter csv(opts.out_dir / "ffn.csv", "layer,batch,stat,value");
    CsvWriter qcsv(opts.out_dir / "ffn_questions.csv", "layer,batch,question,stat,value");
    std::vector<PlotSeries> sim_series, prob_series;
    for (const auto &g : run.manifest.groups) {
        const auto name = run.batch_name(g);
        const auto batch = run.batch(g);
        auto curve = probes::ffn_paraphrase_similarity(batch, mode);
        if (lens) probes::target_probability_curve(batch, *lens, curve);
        for (std::size_t s = 0; s < curve.sim_layers.size(); ++s) {
            csv.cell(std::size_t{curve.sim_layers[s]}).cell(name).cell("mean").cell(curve.sim[s]).end_row();
        }
        for (std::size_t s = 0; s < curve.prob_layers.size(); ++s) {
            csv.cell(std::size_t{curve.prob_layers[s]}).cell(name).cell("target_prob").cell(curve.target_prob[s]).end_row();
        }
        for (std::size_t q = 0; q < curve.question_ids.size(); ++q) {
            for (std::size_t s = 0; s < curve.sim_layers.size(); ++s) {
                qcsv.cell(std::size_t{curve.sim_layers[s]}).cell(name).cell(curve.question_ids[q]).cell("mean");
                qcsv.cell(curve.question_sim[q][s]).end_row();
            }
            for (std::size_t s = 0; s < curve.prob_layers.size(); ++s) {
                qcsv.cell(std::size_t{curve.prob_layers[s]}).cell(name).cell(curve.question_ids[q]).cell("target_prob");
                qcsv.cell(curve.question_target_prob[q][s]).end_row();
            }
        }
        if (curve.zero_vector_events > 0) {
            log << "ffn " << name << ": " << curve.zero_vector_events
                << " zero up-projection vectors (cosine terms set to 0)\n";
        }
        PlotSeries s{name, {}, curve.sim, {}};
        for (auto l : curve.sim_layers) s.x.push_back(l);
        sim_series.push_back(std::move(s));
        if (lens) {
            PlotSeries p{name, {}, curve.target_prob, {}};
            for (auto l : curve.prob_layers) p.x.push_back(l);
            prob_series.push_back(std::move(p));
        }
    }
    csv.close();
    qcsv.close();
    if (opts.plot) {
        write_line_plot(opts.out_dir / "ffn.svg", "Up-projection similarity across paraphrases", "layer",
                        "similarity", sim_series);
        if (lens) {
            write_line_plot(opts.out_dir / "ffn_target_prob.svg", "Lens probability of the target token", "layer",
                            "probability", prob_series);
        }
    }
}

void analyze_relations(const LoadedRun &run, const AnalyzeOptions &opts, probes::RelationDivisor divisor,
                       std::ostream &log) {
    std::map<std::size_t, std::map<std::string, std::vector<const ActivationTrace *>>> levels;
    std::map<std::size_t, std::string> level_label;
    for (const auto &g : run.manifest.groups) {
        auto &per_rel = levels[g.index][g.relation];
        level_label[g.index] = g.label;
        for (const auto &qid : g.question_ids) {
            auto it = run.by_question.find(qid);
            if (it == run.by_question.end() || it->second.front().first != 1) {
                throw ValidationError("question " + qid + " has no original-wording (variant 1) record");
            }
            per_rel.push_back(it->second.front().second);
        }
    }
    const std::uint32_t L = run.file.config.num_layers;
    const std::uint32_t welch_layer = opts.welch_layer.value_or(L > 1 ? L - 1 : L);
    if (welch_layer < 1 || welch_layer > L) {
        throw UsageError("--welch-layer must lie in [1, " + std::to_string(L) + "]");
    }

    CsvWriter csv(opts.out_dir / "relations.csv", "layer,batch_level,relation_x,relation_y,value");
    std::map<std::size_t, probes::RelationHeatmap> maps;
    for (const auto &[level, per_rel] : levels) {
        auto hm = probes::relation_similarity(per_rel, level, divisor);
        for (std::size_t s = 0; s < hm.layers.size(); ++s) {
            for (std::size_t x = 0; x < hm.relations.size(); ++x) {
                for (std::size_t y = 0; y < hm.relations.size(); ++y) {
                    csv.cell(std::size_t{hm.layers[s]}).cell(level_label[level]).cell(hm.relations[x]);
                    csv.cell(hm.relations[y]).cell(hm.values[s][x][y]).end_row();
                }
            }
        }
        if (opts.plot) {
            write_heatmap(opts.out_dir / ("relations_" + level_label[level] + ".svg"),
                          "Fact similarity across relations, " + level_label[level] + ", layer " +
                              std::to_string(welch_layer),
                          hm.relations, hm.values[welch_layer - 1]);
        }
        maps.emplace(level, std::move(hm));
    }
    csv.close();

    if (maps.size() < 2) {
        log << "relations: one batch level only, Welch test skipped\n";
        return;
    }
    const auto &head = maps.begin()->second;
    const auto &tail = maps.rbegin()->second;
    if (head.relations.size() < 3) {
        log << "relations: fewer than 3 relations, Welch test skipped\n";
        return;
    }
    const auto w = probes::heatmap_welch(head, tail, welch_layer, stats::Direction::greater);
    CsvWriter wcsv(opts.out_dir / "relations_welch.csv",
                   "layer,batch_a,batch_b,direction,t,dof,p_value,alpha,reject_null,mean_a,mean_b,degenerate");
    wcsv.cell(std::size_t{welch_layer}).cell(level_label[maps.begin()->first]).cell(level_label[maps.rbegin()->first]);
    wcsv.cell(stats::to_string(w.direction)).cell(w.t_statistic).cell(w.degrees_of_freedom).cell(w.p_value_one_sided);
    wcsv.cell(opts.welch_alpha).cell(w.rejects_null(opts.welch_alpha) ? "true" : "false");
    wcsv.cell(w.mean_a).cell(w.mean_b).cell(w.degenerate ? "true" : "false").end_row();
    wcsv.close();
    log << "relations: Welch " << level_label[maps.begin()->first] << " > " << level_label[maps.rbegin()->first]
        << " at layer " << welch_layer << ": t=" << format_number(w.t_statistic)
        << " p=" << format_number(w.p_value_one_sided) << '\n';
}

std::unordered_map<std::string, std::string> read_answers(const fs::path &p) {
    require_file(p, "answers file");
    std::ifstream in(p);
    if (!in) throw IoError("cannot open " + p.string());
    std::unordered_map<std::string, std::string> out;
    std::string line;
    std::getline(in, line); // header
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) throw FormatError("answers file " + p.string() + ": missing tab in '" + line + "'");
        out[line.substr(0, tab)] = line.substr(tab + 1);
    }
    return out;
}

void analyze_variety(const LoadedRun &run, const AnalyzeOptions &opts, std::ostream &log) {
    const fs::path corpus_path = opts.corpus ? *opts.corpus : fs::path(run.manifest.corpus);
    require_file(corpus_path, "corpus");
    const auto records = read_corpus(corpus_path);
    std::unordered_map<std::string, const QuestionRecord *> by_id;
    for (const auto &q : records) by_id.emplace(q.id, &q);
    const auto answers = read_answers(answers_path_for(opts.trace));

    CsvWriter csv(opts.out_dir / "variety.csv", "batch,question,popularity,variant,answer,f1");
    CsvWriter summary(opts.out_dir / "variety_summary.csv", "batch,question,popularity,variety");
    std::vector<PlotSeries> series;
    for (const auto &g : run.manifest.groups) {
        const auto name = run.batch_name(g);
        std::vector<probes::VarietyInput> inputs;
        std::vector<std::vector<std::size_t>> variants;
        for (const auto &qid : g.question_ids) {
            auto qit = by_id.find(qid);
            if (qit == by_id.end()) throw ValidationError("question " + qid + " is not in corpus " + corpus_path.string());
            auto tit = run.by_question.find(qid);
            if (tit == run.by_question.end()) throw ValidationError("question " + qid + " has no trace records");
            probes::VarietyInput in{qid, popularity(*qit->second), qit->second->object, {}};
            auto &vs = variants.emplace_back();
            for (const auto &[v, t] : tit->second) {
                auto ait = answers.find(t->prompt_id);
                if (ait == answers.end()) throw ValidationError("no decoded answer for prompt " + t->prompt_id);
                in.answers.push_back(ait->second);
                vs.push_back(v);
            }
            inputs.push_back(std::move(in));
        }
        const auto report = probes::response_variety(inputs);
        PlotSeries s{name, {}, {}, {}};
        for (std::size_t i = 0; i < report.size(); ++i) {
            const auto &e = report[i];
            for (std::size_t j = 0; j < e.f1.size(); ++j) {
                csv.cell(name).cell(e.question_id).cell(e.popularity).cell(variants[i][j]);
                csv.cell(inputs[i].answers[j]).cell(e.f1[j]).end_row();
            }
            summary.cell(name).cell(e.question_id).cell(e.popularity).cell(e.variety).end_row();
            s.x.push_back(e.popularity);
            s.y.push_back(e.variety);
        }
        double mean = 0.0;
        for (double v : s.y) mean += v;
        log << "variety " << name << ": mean Var = " << format_number(s.y.empty() ? 0.0 : mean / s.y.size()) << '\n';
        series.push_back(std::move(s));
    }
    csv.close();
    summary.close();
    if (opts.plot) {
        write_scatter(opts.out_dir / "variety.svg", "Response variety against popularity", "popularity",
                      "std of F1 across paraphrases", series, true);
    }
}

int analyze_impl(const AnalyzeOptions &opts, std::ostream &log) {
    if (opts.out_dir.empty()) throw UsageError("output directory not given");
    LoadedRun run;
    if (auto code = load_run(opts.trace, run, log)) return *code;
    std::error_code ec;
    fs::create_directories(opts.out_dir, ec);
    if (ec || !fs::is_directory(opts.out_dir)) throw UsageError("cannot create output directory " + opts.out_dir.string());

    const double floor = opts.kl_floor.value_or(run.manifest.kl_floor);
    const auto pair = opts.pair_divisor.value_or(run.manifest.pair_divisor);
    const auto divisor = opts.relation_divisor.value_or(run.manifest.relation_divisor);
    switch (opts.kind) {
    case AnalysisKind::kl: analyze_kl(run, opts, floor, log); break;
    case AnalysisKind::attn: analyze_attn(run, opts, log); break;
    case AnalysisKind::ffn: analyze_ffn(run, opts, pair, log); break;
    case AnalysisKind::relations: analyze_relations(run, opts, divisor, log); break;
    case AnalysisKind::variety: analyze_variety(run, opts, log); break;
    }

    json j = manifest_json(run.manifest);
    json a;
    a["kind"] = to_string(opts.kind);
    a["trace"] = opts.trace.string();
    a["manifest_found"] = run.has_manifest;
    if (opts.lens) a["lens"] = opts.lens->string();
    if (opts.corpus) a["corpus"] = opts.corpus->string();
    a["kl_floor"] = floor;
    a["kl_log_base"] = "e";
    a["kl_threshold"] = opts.kl_threshold;
    a["pair_divisor"] = pair_name(pair);
    a["relation_divisor"] = divisor_name(divisor);
    const std::uint32_t L = run.file.config.num_layers;
    a["welch_layer"] = opts.welch_layer.value_or(L > 1 ? L - 1 : L);
    a["welch_alpha"] = opts.welch_alpha;
    a["trace_model"] = config_json(run.file.config);
    j["analysis"] = a;
    write_text(opts.out_dir / "manifest.json", j.dump(2) + "\n");
    return kExitOk;
}

} // namespace

// ---- manifest -------------------------------------------------------------

std::string to_json(const RunManifest &m) { return manifest_json(m).dump(2); }

RunManifest manifest_from_json(const std::string &text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception &e) {
        throw FormatError(std::string("manifest is not valid JSON: ") + e.what());
    }
    try {
        RunManifest m;
        m.seed = j.value("seed", m.seed);
        m.corpus = j.value("corpus", m.corpus);
        m.weights = j.value("weights", m.weights);
        m.vocab = j.value("vocab", m.vocab);
        m.templates = j.value("templates", m.templates);
        m.selection = enum_from(kSelections, j.value("selection", selection_name(m.selection)), "selection");
        m.relation = j.value("relation", m.relation);
        m.scheme = enum_from(kSchemes, j.value("scheme", scheme_name(m.scheme)), "scheme");
        m.batches = j.value("batches", m.batches);
        m.batch_size = j.value("batch_size", m.batch_size);
        m.per_relation_min = j.value("per_relation_min", m.per_relation_min);
        m.paraphrases = j.value("paraphrases", m.paraphrases);
        m.demos = j.value("demos", m.demos);
        m.answer_tokens = j.value("answer_tokens", m.answer_tokens);
        m.kl_floor = j.value("kl_floor", m.kl_floor);
        m.pair_divisor = enum_from(kPairModes, j.value("pair_divisor", pair_name(m.pair_divisor)), "pair_divisor");
        m.relation_divisor =
            enum_from(kDivisors, j.value("relation_divisor", divisor_name(m.relation_divisor)), "relation_divisor");
        if (j.contains("model")) {
            const auto &c = j["model"];
            ModelConfig cfg;
            cfg.num_layers = c.at("num_layers");
            cfg.d_model = c.at("d_model");
            cfg.d_inter = c.at("d_inter");
            cfg.d_mid = c.at("d_mid");
            cfg.num_heads = c.at("num_heads");
            cfg.vocab_size = c.at("vocab_size");
            cfg.max_seq_len = c.at("max_seq_len");
            m.model = cfg;
        }
        if (j.contains("groups")) {
            for (const auto &g : j["groups"]) {
                m.groups.push_back(BatchGroup{g.at("relation").get<std::string>(), g.at("label").get<std::string>(),
                                              g.at("index").get<std::size_t>(),
                                              g.at("questions").get<std::vector<std::string>>()});
            }
        }
        return m;
    } catch (const json::exception &e) {
        throw FormatError(std::string("manifest has a malformed field: ") + e.what());
    }
}

RunManifest load_manifest(const fs::path &path) {
    require_file(path, "manifest");
    return manifest_from_json(read_text(path));
}

fs::path manifest_path_for(const fs::path &trace) { return fs::path(trace.string() + ".manifest.json"); }
fs::path answers_path_for(const fs::path &trace) { return fs::path(trace.string() + ".answers.tsv"); }

// ---- threading ------------------------------------------------------------

unsigned thread_count() {
    unsigned n = std::max(1u, std::thread::hardware_concurrency());
    if (const char *env = std::getenv("IA_PROBE_THREADS")) {
        char *end = nullptr;
        const long cap = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && cap >= 1) n = std::min<unsigned>(n, static_cast<unsigned>(cap));
    }
    return n;
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)> &fn) {
    const std::size_t workers = std::min<std::size_t>(thread_count(), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::exception_ptr error;
    std::mutex error_mutex;
    auto work = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= n || failed.load()) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!error) error = std::current_exception();
                failed = true;
            }
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < workers; ++t) pool.emplace_back(work);
    for (auto &t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

// ---- commands -------------------------------------------------------------

int cmd_simulate(const SimulateOptions &opts, std::ostream &log) {
    return guarded(log, [&] { return simulate_impl(opts, log); });
}

std::optional<AnalysisKind> parse_kind(std::string_view s) {
    if (s == "kl") return AnalysisKind::kl;
    if (s == "attn") return AnalysisKind::attn;
    if (s == "ffn") return AnalysisKind::ffn;
    if (s == "relations") return AnalysisKind::relations;
    if (s == "variety") return AnalysisKind::variety;
    return std::nullopt;
}

std::string to_string(AnalysisKind k) {
    switch (k) {
    case AnalysisKind::kl: return "kl";
    case AnalysisKind::attn: return "attn";
    case AnalysisKind::ffn: return "ffn";
    case AnalysisKind::relations: return "relations";
    case AnalysisKind::variety: return "variety";
    }
    return "?";
}

int cmd_analyze(const AnalyzeOptions &opts, std::ostream &log) {
    return guarded(log, [&] { return analyze_impl(opts, log); });
}

int cmd_validate(const fs::path &trace, std::ostream &out) {
    std::error_code ec;
    if (fs::is_directory(trace, ec)) {
        out << "error: " << trace.string() << " is a directory, expected a trace file\n";
        return kExitUsage;
    }
    if (!fs::exists(trace, ec)) {
        out << "error: " << trace.string() << " does not exist\n";
        return kExitUsage;
    }
    TraceFile file;
    try {
        file = read_trace_file(trace, ReadMode::raw);
    } catch (const IoError &e) {
        out << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const Error &e) {
        out << "invalid: " << e.what() << '\n';
        return kExitInvalid;
    }
    std::size_t violations = 0, bad_records = 0;
    for (std::size_t i = 0; i < file.records.size(); ++i) {
        const auto report = validate_trace(file.records[i], file.config);
        if (!report.empty()) ++bad_records;
        for (const auto &v : report) {
            out << "record " << i << " (" << file.records[i].prompt_id << "): " << format_violation(v) << '\n';
            ++violations;
        }
    }
    if (violations > 0) {
        out << "invalid: " << violations << " violations in " << bad_records << " of " << file.records.size()
            << " records\n";
        return kExitInvalid;
    }
    out << "ok: " << file.records.size() << " records, " << describe(file.config) << '\n';
    return kExitOk;
}

int cmd_init_weights(const InitWeightsOptions &opts, std::ostream &log) {
    return guarded(log, [&] {
        if (opts.out.empty()) throw UsageError("output weights path not given");
        ModelConfig c = opts.config;
        c.d_mid = c.d_model;
        if (auto problem = c.check()) throw UsageError("invalid model config: " + *problem);
        const auto w = random_weights(c, opts.seed, opts.scale);
        std::ofstream out(opts.out, std::ios::binary);
        if (!out) throw IoError("cannot write " + opts.out.string());
        const auto bytes = write_weights(w, out);
        out.close();
        if (!out) throw IoError("cannot write " + opts.out.string());
        log << "wrote " << bytes << " bytes of weights (" << describe(c) << ", seed " << opts.seed << ") to "
            << opts.out.string() << '\n';
        return kExitOk;
    });
}

int cmd_export_lens(const fs::path &weights, const fs::path &out_path, std::ostream &log) {
    return guarded(log, [&] {
        require_file(weights, "weights");
        if (out_path.empty()) throw UsageError("output lens path not given");
        const auto w = read_weights(weights);
        std::ofstream out(out_path, std::ios::binary);
        if (!out) throw IoError("cannot write " + out_path.string());
        const auto bytes = write_lens(lens_from_weights(w), out);
        out.close();
        if (!out) throw IoError("cannot write " + out_path.string());
        log << "wrote " << bytes << " bytes of lens to " << out_path.string() << '\n';
        return kExitOk;
    });
}

int cmd_synth(const SynthOptions &opts, std::ostream &log) {
    return guarded(log, [&] {
        if (opts.out_dir.empty()) throw UsageError("output directory not given");
        require_file(opts.templates, "templates");
        std::error_code ec;
        fs::create_directories(opts.out_dir, ec);
        if (ec || !fs::is_directory(opts.out_dir)) {
            throw UsageError("cannot create output directory " + opts.out_dir.string());
        }
        const auto table = TemplateTable::load(opts.templates);
        synth::CorpusSpec spec;
        spec.relations = opts.relations;
        spec.questions_per_relation = opts.questions;
        spec.objects_per_relation = opts.objects;
        spec.seed = mix_seed(opts.seed, "corpus");
        const auto records = synth::synthetic_corpus(spec, &table);
        const auto vocab = synth::build_vocabulary(records, table, opts.vocab_size);

        DecoderWeights weights;
        if (opts.planted) {
            std::unordered_set<std::string> head;
            for (const auto &r : opts.relations) {
                const auto batches = sort_into_batches(records, r, opts.batches, opts.batch_size, BatchScheme::head_tail);
                for (const auto &q : batches.front().questions) head.insert(q.id);
            }
            std::vector<synth::PlantedFact> facts;
            for (const auto &q : records) facts.push_back({q.subject, q.object, head.count(q.id) != 0});
            synth::PlantedSpec ps;
            ps.num_layers = opts.layers;
            ps.d_model = opts.d_model;
            ps.d_inter = opts.d_inter;
            ps.max_seq_len = opts.max_seq_len;
            weights = synth::planted_weights(ps, vocab, facts);
        } else {
            ModelConfig c;
            c.num_layers = opts.layers;
            c.d_model = opts.d_model;
            c.d_inter = opts.d_inter;
            c.d_mid = opts.d_model;
            c.num_heads = opts.heads;
            c.vocab_size = static_cast<std::uint32_t>(vocab.size());
            c.max_seq_len = opts.max_seq_len;
            if (auto problem = c.check()) throw UsageError("invalid model config: " + *problem);
            weights = random_weights(c, mix_seed(opts.seed, "weights"), opts.scale);
        }

        {
            std::ofstream out(opts.out_dir / "corpus.tsv", std::ios::binary);
            write_corpus(out, records);
            if (!out) throw IoError("cannot write corpus.tsv");
        }
        {
            std::ofstream out(opts.out_dir / "vocab.txt", std::ios::binary);
            vocab.save(out);
            if (!out) throw IoError("cannot write vocab.txt");
        }
        {
            std::ofstream out(opts.out_dir / "weights.iawt", std::ios::binary);
            write_weights(weights, out);
            if (!out) throw IoError("cannot write weights.iawt");
        }
        {
            std::ofstream out(opts.out_dir / "lens.ialn", std::ios::binary);
            write_lens(lens_from_weights(weights), out);
            if (!out) throw IoError("cannot write lens.ialn");
        }
        log << "wrote " << records.size() << " questions, " << vocab.size() << " tokens and "
            << (opts.planted ? "planted" : "random") << " weights (" << describe(weights.config) << ") to "
            << opts.out_dir.string() << '\n';
        return kExitOk;
    });
}

} // namespace ia::cli
