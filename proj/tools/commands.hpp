#pragma once

// ia-probe command implementations. Each cmd_* returns a process exit code
// and never throws for input or analysis problems.

#include "ia/corpus.hpp"
#include "ia/probes.hpp"
#include "ia/trace.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace ia::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitInvalid = 3;

inline constexpr std::string_view kToolVersion = "0.1.0";

enum class Selection {
    relation, // per-relation popularity batches (sort_into_batches)
    global,   // equispaced global batches filtered to common relations
};

// One batch of questions, in batch order.
struct BatchGroup {
    std::string relation;
    std::string label;
    std::size_t index = 0; // 1-based batch level
    std::vector<std::string> question_ids;
};

// Everything that determines a simulate run. Serialised next to every trace
// and report as manifest.json.
struct RunManifest {
    std::uint64_t seed = 0;
    std::string corpus;
    std::string weights;
    std::string vocab;
    std::string templates;

    Selection selection = Selection::relation;
    std::string relation; // empty: every relation in the corpus
    BatchScheme scheme = BatchScheme::head_torso_tail;
    std::size_t batches = 5;
    std::size_t batch_size = 50;
    std::size_t per_relation_min = 50;
    std::size_t paraphrases = kDefaultParaphrases;
    std::size_t demos = kDefaultDemos;
    std::size_t answer_tokens = 4; // greedy tokens decoded per prompt; 0 disables

    double kl_floor = 1e-12;
    probes::PairMode pair_divisor = probes::PairMode::verbatim;
    probes::RelationDivisor relation_divisor = probes::RelationDivisor::mean;

    // Filled in by simulate.
    std::optional<ModelConfig> model;
    std::vector<BatchGroup> groups;
};

std::string to_json(const RunManifest &m);
RunManifest manifest_from_json(const std::string &text);
RunManifest load_manifest(const std::filesystem::path &path);

std::filesystem::path manifest_path_for(const std::filesystem::path &trace);
std::filesystem::path answers_path_for(const std::filesystem::path &trace);

// Worker count: hardware concurrency capped by IA_PROBE_THREADS when set.
unsigned thread_count();

// Runs fn(i) for i in [0, n) on up to thread_count() threads. Results must go
// to per-index slots; the first exception is rethrown after all workers stop.
void parallel_for(std::size_t n, const std::function<void(std::size_t)> &fn);

struct SimulateOptions {
    RunManifest manifest;
    std::filesystem::path out;
};

// Writes <out>, <out>.manifest.json and (when answer_tokens > 0)
// <out>.answers.tsv. One record per (question, paraphrase) in batch order.
int cmd_simulate(const SimulateOptions &opts, std::ostream &log);

enum class AnalysisKind { kl, attn, ffn, relations, variety };

std::optional<AnalysisKind> parse_kind(std::string_view s);
std::string to_string(AnalysisKind k);

struct AnalyzeOptions {
    AnalysisKind kind = AnalysisKind::kl;
    std::filesystem::path trace;
    std::filesystem::path out_dir;
    std::optional<std::filesystem::path> lens;   // required for kl, optional for ffn
    std::optional<std::filesystem::path> corpus; // variety; defaults to the manifest's
    std::optional<double> kl_floor;
    std::optional<probes::PairMode> pair_divisor;
    std::optional<probes::RelationDivisor> relation_divisor;
    std::optional<std::uint32_t> welch_layer; // defaults to L - 1 (or L when L = 1)
    double welch_alpha = 0.10;
    double kl_threshold = 0.1; // for the first-layer-below summary
    bool plot = false;
};

int cmd_analyze(const AnalyzeOptions &opts, std::ostream &log);

// 0 when every record validates, 3 with a report otherwise, 2 when the path
// cannot be read as a file.
int cmd_validate(const std::filesystem::path &trace, std::ostream &out);

struct InitWeightsOptions {
    ModelConfig config;
    std::uint64_t seed = 0;
    double scale = 0.1;
    std::filesystem::path out;
};

int cmd_init_weights(const InitWeightsOptions &opts, std::ostream &log);

int cmd_export_lens(const std::filesystem::path &weights, const std::filesystem::path &out, std::ostream &log);

struct SynthOptions {
    std::filesystem::path out_dir;
    std::filesystem::path templates;
    std::uint64_t seed = 0;
    std::vector<std::string> relations{"capital"};
    std::size_t questions = 50;
    std::size_t objects = 0;
    std::size_t vocab_size = 0;
    // random weights
    std::uint32_t layers = 4;
    std::uint32_t d_model = 32;
    std::uint32_t d_inter = 64;
    std::uint32_t heads = 2;
    std::uint32_t max_seq_len = 1024;
    double scale = 0.1;
    // planted weights: Head batch (B_1 of each relation) converges early
    bool planted = false;
    std::size_t batches = 2;
    std::size_t batch_size = 10;
};

// Writes corpus.tsv, vocab.txt, weights.iawt and lens.ialn into out_dir.
int cmd_synth(const SynthOptions &opts, std::ostream &log);

// Command-line front end.
int run(int argc, const char *const *argv, std::ostream &out, std::ostream &err);

} // namespace ia::cli
