// Serial reference vs OpenMP kernels. The reference recomputes column sums
// per row and evaluates the rate term densely, so the first pair mixes
// algorithmic and threading gains; the threads/N runs isolate the latter.

#include <benchmark/benchmark.h>
#include <omp.h>

#include "fixtures.hpp"
#include "lenskit/hpmf.hpp"
#include "lenskit/lda.hpp"

using namespace lenskit;

namespace {

const BehaviorMatrix& matrix() {
  static const BehaviorMatrix m = fixtures::to_matrix(fixtures::planted_blocks(2000, 500, 0.3, 0.02, 7));
  return m;
}

hpmf::HpmfConfig hpmf_config() {
  hpmf::HpmfConfig c;
  c.k = 20;
  return c;
}

template <void (*Step)(hpmf::HpmfState&, const BehaviorMatrix&, const hpmf::HpmfConfig&)>
void BM_CaviIteration(benchmark::State& st) {
  const auto cfg = hpmf_config();
  auto s = hpmf::init_hpmf(matrix(), cfg);
  for (auto _ : st) {
    Step(s, matrix(), cfg);
    benchmark::DoNotOptimize(s.elbo_trace.back());
  }
}
BENCHMARK(BM_CaviIteration<hpmf::reference::cavi_iteration>)->Name("hpmf_cavi/serial")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_CaviIteration<hpmf::cavi_iteration>)->Name("hpmf_cavi/openmp")->Unit(benchmark::kMillisecond);

void BM_CaviThreads(benchmark::State& st) {
  const int saved = omp_get_max_threads();
  omp_set_num_threads(static_cast<int>(st.range(0)));
  BM_CaviIteration<hpmf::cavi_iteration>(st);
  omp_set_num_threads(saved);
}
BENCHMARK(BM_CaviThreads)->Name("hpmf_cavi/openmp/threads")->RangeMultiplier(2)->Range(1, 8)
    ->UseRealTime()->Unit(benchmark::kMillisecond);

template <double (*Score)(const hpmf::HpmfState&, const BehaviorMatrix&)>
void BM_HpmfHeldout(benchmark::State& st) {
  const auto cfg = hpmf_config();
  auto s = hpmf::init_hpmf(matrix(), cfg);
  for (int i = 0; i < 5; ++i) hpmf::cavi_iteration(s, matrix(), cfg);
  for (auto _ : st) benchmark::DoNotOptimize(Score(s, matrix()));
}
BENCHMARK(BM_HpmfHeldout<hpmf::reference::heldout_loglik>)->Name("hpmf_heldout/serial")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_HpmfHeldout<hpmf::heldout_loglik>)->Name("hpmf_heldout/openmp")->Unit(benchmark::kMillisecond);

struct LdaSetup {
  Corpus train, heldout;
  lda::TopicModelState state;
  LdaSetup() {
    const auto planted = fixtures::planted_corpus(600, 400, 8, 80, 11);
    fixtures::Records head(planted.records.begin(), planted.records.begin() + 400);
    fixtures::Records tail(planted.records.begin() + 400, planted.records.end());
    train = corpus_from_texts(head, {});
    heldout = corpus_from_texts(tail, {});
    lda::LdaConfig cfg;
    cfg.k = 8;
    cfg.sweeps = 50;
    cfg.burn_in = 10;
    state = lda::train(train, cfg);
  }
};

const LdaSetup& lda_setup() {
  static const LdaSetup s;
  return s;
}

template <lda::HeldoutResult (*Score)(const lda::TopicModelState&, const Vocabulary&, const Corpus&,
                                      const lda::HeldoutOptions&)>
void BM_LdaHeldout(benchmark::State& st) {
  const auto& s = lda_setup();
  lda::HeldoutOptions opts;
  for (auto _ : st) benchmark::DoNotOptimize(Score(s.state, s.train.vocab, s.heldout, opts).total_loglik);
}
BENCHMARK(BM_LdaHeldout<lda::heldout_loglik_serial>)->Name("lda_heldout/serial")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_LdaHeldout<lda::heldout_loglik>)->Name("lda_heldout/openmp")->Unit(benchmark::kMillisecond);

void BM_LdaHeldoutThreads(benchmark::State& st) {
  const int saved = omp_get_max_threads();
  omp_set_num_threads(static_cast<int>(st.range(0)));
  BM_LdaHeldout<lda::heldout_loglik>(st);
  omp_set_num_threads(saved);
}
BENCHMARK(BM_LdaHeldoutThreads)->Name("lda_heldout/openmp/threads")->RangeMultiplier(2)->Range(1, 8)
    ->UseRealTime()->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
