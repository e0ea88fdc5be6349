#include "commands.hpp"

#include "ia/error.hpp"

#include <CLI11.hpp>

#include <functional>
#include <ostream>

namespace ia::cli {

namespace {

const std::map<std::string, Selection> kSelectionNames{{"relation", Selection::relation},
                                                       {"global", Selection::global}};
const std::map<std::string, BatchScheme> kSchemeNames{{"head-torso-tail", BatchScheme::head_torso_tail},
                                                      {"head-tail", BatchScheme::head_tail}};
const std::map<std::string, probes::PairMode> kPairNames{{"verbatim", probes::PairMode::verbatim},
                                                         {"distinct", probes::PairMode::distinct}};
const std::map<std::string, probes::RelationDivisor> kDivisorNames{{"mean", probes::RelationDivisor::mean},
                                                                   {"pairs", probes::RelationDivisor::pairs}};
const std::map<std::string, AnalysisKind> kKindNames{{"kl", AnalysisKind::kl},
                                                     {"attn", AnalysisKind::attn},
                                                     {"ffn", AnalysisKind::ffn},
                                                     {"relations", AnalysisKind::relations},
                                                     {"variety", AnalysisKind::variety}};

void add_config_options(CLI::App *cmd, std::uint32_t &layers, std::uint32_t &d_model, std::uint32_t &d_inter,
                        std::uint32_t &heads, std::uint32_t &max_seq_len) {
    cmd->add_option("--layers", layers, "Decoder layers L")->capture_default_str();
    cmd->add_option("--d-model", d_model, "Residual width (also the attention width)")->capture_default_str();
    cmd->add_option("--d-inter", d_inter, "FFN inner width")->capture_default_str();
    cmd->add_option("--heads", heads, "Attention heads H")->capture_default_str();
    cmd->add_option("--max-seq-len", max_seq_len, "Longest accepted prompt")->capture_default_str();
}

} // namespace

int run(int argc, const char *const *argv, std::ostream &out, std::ostream &err) {
    CLI::App app{"ia-probe: instrumented mini-decoder runs and internal-state probes"};
    app.set_version_flag("--version", std::string(kToolVersion));
    app.require_subcommand(1);

    // simulate
    SimulateOptions sim;
    std::string sim_manifest;
    auto *simulate = app.add_subcommand("simulate", "Run every (question, paraphrase) prompt and write a trace");
    {
        auto &m = sim.manifest;
        simulate->add_option("--manifest", sim_manifest, "Start from a saved run manifest; flags override it");
        simulate->add_option("--corpus", m.corpus, "Question corpus (TSV)");
        simulate->add_option("--weights", m.weights, "Weight file (IAWT)");
        simulate->add_option("--vocab", m.vocab, "Vocabulary file, one token per line");
        simulate->add_option("--templates", m.templates, "Paraphrase template table");
        simulate->add_option("--out", sim.out, "Output trace path")->required();
        simulate->add_option("--seed", m.seed, "Demonstration sampling seed")->capture_default_str();
        simulate->add_option("--selection", m.selection, "Batching: per relation or global equispaced")
            ->transform(CLI::CheckedTransformer(kSelectionNames))
            ->capture_default_str();
        simulate->add_option("--relation", m.relation, "Only this relation (relation selection)");
        simulate->add_option("--scheme", m.scheme, "Batch labels")
            ->transform(CLI::CheckedTransformer(kSchemeNames))
            ->capture_default_str();
        simulate->add_option("--batches", m.batches, "Number of popularity batches N")->capture_default_str();
        simulate->add_option("--batch-size", m.batch_size, "Questions per batch")->capture_default_str();
        simulate->add_option("--per-relation-min", m.per_relation_min,
                             "Questions each relation needs in every global batch")
            ->capture_default_str();
        simulate->add_option("--paraphrases", m.paraphrases, "Paraphrases p per question")->capture_default_str();
        simulate->add_option("--demos", m.demos, "Few-shot demonstrations k")->capture_default_str();
        simulate->add_option("--answer-tokens", m.answer_tokens, "Greedy answer tokens to decode (0 = none)")
            ->capture_default_str();
        simulate->add_option("--kl-floor", m.kl_floor, "Lens probability floor recorded for analysis")
            ->capture_default_str();
        simulate->add_option("--pair-divisor", m.pair_divisor, "Paraphrase similarity pairs")
            ->transform(CLI::CheckedTransformer(kPairNames))
            ->capture_default_str();
        simulate->add_option("--relation-divisor", m.relation_divisor, "Relation similarity divisor")
            ->transform(CLI::CheckedTransformer(kDivisorNames))
            ->capture_default_str();
    }

    // analyze
    AnalyzeOptions an;
    std::string an_lens, an_corpus;
    double an_floor = 0;
    probes::PairMode an_pair{};
    probes::RelationDivisor an_div{};
    std::uint32_t an_welch = 0;
    auto *analyze = app.add_subcommand("analyze", "Compute a probe report from a trace");
    analyze->add_option("kind", an.kind, "kl | attn | ffn | relations | variety")
        ->required()
        ->transform(CLI::CheckedTransformer(kKindNames));
    analyze->add_option("--trace", an.trace, "Trace file")->required();
    analyze->add_option("--out-dir", an.out_dir, "Report directory")->required();
    analyze->add_option("--lens", an_lens, "Lens file (IALN)");
    analyze->add_option("--corpus", an_corpus, "Corpus for gold answers (default: the run manifest's)");
    auto *floor_opt = analyze->add_option("--kl-floor", an_floor, "Lens probability floor");
    auto *pair_opt = analyze->add_option("--pair-divisor", an_pair, "verbatim | distinct")
                         ->transform(CLI::CheckedTransformer(kPairNames));
    auto *div_opt = analyze->add_option("--relation-divisor", an_div, "mean | pairs")
                        ->transform(CLI::CheckedTransformer(kDivisorNames));
    auto *welch_opt = analyze->add_option("--welch-layer", an_welch, "Layer of the Head vs Tail Welch test");
    analyze->add_option("--welch-alpha", an.welch_alpha, "Significance threshold")->capture_default_str();
    analyze->add_option("--kl-threshold", an.kl_threshold, "KL level for the first-layer summary")
        ->capture_default_str();
    analyze->add_flag("--plot", an.plot, "Also write SVG figures");

    // validate
    std::string val_path;
    auto *validate = app.add_subcommand("validate", "Check every record of a trace file");
    validate->add_option("trace", val_path, "Trace file")->required();

    // init-weights
    InitWeightsOptions iw;
    iw.config.num_layers = 4;
    iw.config.d_model = 32;
    iw.config.d_inter = 64;
    iw.config.num_heads = 2;
    iw.config.max_seq_len = 1024;
    auto *init = app.add_subcommand("init-weights", "Write seeded uniform random weights");
    add_config_options(init, iw.config.num_layers, iw.config.d_model, iw.config.d_inter, iw.config.num_heads,
                       iw.config.max_seq_len);
    init->add_option("--vocab-size", iw.config.vocab_size, "Vocabulary size |V|")->required();
    init->add_option("--seed", iw.seed, "Generator seed")->capture_default_str();
    init->add_option("--scale", iw.scale, "Entries are uniform in [-scale, scale]")->capture_default_str();
    init->add_option("--out", iw.out, "Output weight file")->required();

    // export-lens
    std::string el_weights, el_out;
    auto *export_lens = app.add_subcommand("export-lens", "Write the embedding matrix of a weight file as a lens");
    export_lens->add_option("--weights", el_weights, "Weight file")->required();
    export_lens->add_option("--out", el_out, "Output lens file")->required();

    // synth
    SynthOptions sy;
    std::string sy_out, sy_templates;
    auto *synth = app.add_subcommand("synth", "Generate a synthetic corpus, vocabulary, weights and lens");
    synth->add_option("--out-dir", sy_out, "Output directory")->required();
    synth->add_option("--templates", sy_templates, "Paraphrase template table")->required();
    synth->add_option("--seed", sy.seed, "Generator seed")->capture_default_str();
    synth->add_option("--relations", sy.relations, "Relations to generate")->delimiter(',')->capture_default_str();
    synth->add_option("--questions", sy.questions, "Questions per relation")->capture_default_str();
    synth->add_option("--objects", sy.objects, "Answer pool per relation (0 = one per question)")
        ->capture_default_str();
    synth->add_option("--vocab-size", sy.vocab_size, "Pad the vocabulary to this size (0 = no padding)")
        ->capture_default_str();
    add_config_options(synth, sy.layers, sy.d_model, sy.d_inter, sy.heads, sy.max_seq_len);
    synth->add_option("--scale", sy.scale, "Random weight scale")->capture_default_str();
    synth->add_flag("--planted", sy.planted, "Planted weights: the Head batch converges by layer ceil(L/3)");
    synth->add_option("--batches", sy.batches, "Popularity batches used to pick the Head batch")
        ->capture_default_str();
    synth->add_option("--batch-size", sy.batch_size, "Questions per batch")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp &e) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp &e) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::CallForVersion &e) {
        out << kToolVersion << '\n';
        return kExitOk;
    } catch (const CLI::ParseError &e) {
        err << "error: " << e.what() << '\n';
        for (auto *sub : app.get_subcommands()) err << sub->help();
        if (app.get_subcommands().empty()) err << app.help();
        return kExitUsage;
    }

    if (simulate->parsed()) {
        if (!sim_manifest.empty()) {
            RunManifest base;
            try {
                base = load_manifest(sim_manifest);
            } catch (const Error &e) {
                err << "error: " << e.what() << '\n';
                return kExitUsage;
            }
            const RunManifest &f = sim.manifest;
            const std::pair<const char *, std::function<void()>> overrides[] = {
                {"--corpus", [&] { base.corpus = f.corpus; }},
                {"--weights", [&] { base.weights = f.weights; }},
                {"--vocab", [&] { base.vocab = f.vocab; }},
                {"--templates", [&] { base.templates = f.templates; }},
                {"--seed", [&] { base.seed = f.seed; }},
                {"--selection", [&] { base.selection = f.selection; }},
                {"--relation", [&] { base.relation = f.relation; }},
                {"--scheme", [&] { base.scheme = f.scheme; }},
                {"--batches", [&] { base.batches = f.batches; }},
                {"--batch-size", [&] { base.batch_size = f.batch_size; }},
                {"--per-relation-min", [&] { base.per_relation_min = f.per_relation_min; }},
                {"--paraphrases", [&] { base.paraphrases = f.paraphrases; }},
                {"--demos", [&] { base.demos = f.demos; }},
                {"--answer-tokens", [&] { base.answer_tokens = f.answer_tokens; }},
                {"--kl-floor", [&] { base.kl_floor = f.kl_floor; }},
                {"--pair-divisor", [&] { base.pair_divisor = f.pair_divisor; }},
                {"--relation-divisor", [&] { base.relation_divisor = f.relation_divisor; }},
            };
            for (const auto &[flag, apply] : overrides) {
                if (simulate->count(flag) > 0) apply();
            }
            base.model.reset();
            base.groups.clear();
            sim.manifest = base;
        }
        return cmd_simulate(sim, err);
    }
    if (analyze->parsed()) {
        if (!an_lens.empty()) an.lens = an_lens;
        if (!an_corpus.empty()) an.corpus = an_corpus;
        if (floor_opt->count() > 0) an.kl_floor = an_floor;
        if (pair_opt->count() > 0) an.pair_divisor = an_pair;
        if (div_opt->count() > 0) an.relation_divisor = an_div;
        if (welch_opt->count() > 0) an.welch_layer = an_welch;
        return cmd_analyze(an, err);
    }
    if (validate->parsed()) return cmd_validate(val_path, out);
    if (init->parsed()) return cmd_init_weights(iw, err);
    if (export_lens->parsed()) return cmd_export_lens(el_weights, el_out, err);
    if (synth->parsed()) {
        sy.out_dir = sy_out;
        sy.templates = sy_templates;
        return cmd_synth(sy, err);
    }
    return kExitUsage;
}

} // namespace ia::cli
