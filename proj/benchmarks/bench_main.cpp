#include "ia/model.hpp"
#include "ia/probes.hpp"
#include "ia/trace.hpp"

#include <benchmark/benchmark.h>

#include <sstream>
#include <vector>

namespace {

ia::ModelConfig bench_config(std::uint32_t layers, std::uint32_t d_model, std::uint32_t seq) {
    ia::ModelConfig c;
    c.num_layers = layers;
    c.d_model = d_model;
    c.d_mid = d_model;
    c.d_inter = 2 * d_model;
    c.num_heads = 4;
    c.vocab_size = 256;
    c.max_seq_len = seq;
    return c;
}

std::vector<std::uint32_t> prompt(std::uint32_t seq) {
    std::vector<std::uint32_t> t(seq);
    for (std::uint32_t i = 0; i < seq; ++i) t[i] = (i * 37 + 11) % 256;
    return t;
}

void BM_DecoderForward(benchmark::State &state) {
    const auto seq = static_cast<std::uint32_t>(state.range(0));
    const auto w = ia::random_weights(bench_config(8, 64, seq), 1);
    const auto tokens = prompt(seq);
    for (auto _ : state) benchmark::DoNotOptimize(ia::decoder_forward(tokens, w));
    state.SetItemsProcessed(state.iterations() * seq);
}
BENCHMARK(BM_DecoderForward)->Arg(16)->Arg(64)->Arg(256);

void BM_TraceRead(benchmark::State &state) {
    const auto w = ia::random_weights(bench_config(8, 64, 64), 2);
    auto t = ia::decoder_forward(prompt(64), w);
    t.prompt_id = "q/1";
    t.constraint_positions = {3, 9};
    std::ostringstream out;
    ia::write_trace(t, out);
    const std::string bytes = out.str();
    for (auto _ : state) {
        std::istringstream in(bytes);
        benchmark::DoNotOptimize(ia::read_trace(in));
    }
    state.SetBytesProcessed(state.iterations() * static_cast<std::int64_t>(bytes.size()));
}
BENCHMARK(BM_TraceRead);

void BM_KlConvergence(benchmark::State &state) {
    const auto w = ia::random_weights(bench_config(8, 64, 32), 3);
    const auto lens = ia::lens_from_weights(w);
    std::vector<ia::ActivationTrace> traces;
    for (int i = 0; i < 10; ++i) {
        auto tokens = prompt(32);
        tokens[0] = static_cast<std::uint32_t>(i);
        traces.push_back(ia::decoder_forward(tokens, w));
        traces.back().answer_first_token = static_cast<std::uint32_t>(i * 7);
    }
    ia::probes::BatchTraces batch;
    for (int q = 0; q < 5; ++q) batch.push_back({"q" + std::to_string(q), {&traces[2 * q], &traces[2 * q + 1]}});
    for (auto _ : state) benchmark::DoNotOptimize(ia::probes::kl_convergence(batch, lens));
}
BENCHMARK(BM_KlConvergence);

} // namespace

BENCHMARK_MAIN();
