#pragma once

#include <map>
#include <string>
#include <vector>

#include "ndftm/corpus.hpp"
#include "ndftm/inference.hpp"
#include "ndftm/model.hpp"

namespace ndftm {

struct MetricOptions {
    int posterior_samples = 16;  // S draws for document-level inference
    int tc_top_n = 10;
    int td_top_n = 25;
    int pnll_particles = 16;
    int pnll_horizon = 1;  // predict this many slices past the encoder prefix
    uint64_t seed = 0;
    Split doc_split = Split::Test;
    int threads = 1;
};

struct MetricSelection {
    bool ppl = true;
    bool pnll = true;
    bool tc = true;
    bool td = true;
    bool series = true;
    bool topwords = true;

    static MetricSelection parse(const std::string& csv);  // "all" or e.g. "tc,td"
};

struct SeriesPoint {
    real mean = 0;
    real std_dev = 0;
    long docs = 0;
};

struct MetricReport {
    real ppl_dc = 0;
    real p_nll = 0;
    real tc = 0;
    real td = 0;
    std::vector<SeriesPoint> entropy_series;  // one per time slice
    Tensor activity_series;                   // T x K
    std::vector<std::vector<std::pair<std::string, real>>> top_words;
    long completion_excluded = 0;
    long degenerate_masks = 0;
    long guard_events = 0;
    MetricSelection computed;
};

// Document-completion perplexity: global states from the training slice_bow,
// document posteriors from each test document's first half, likelihood pooled
// over second-half tokens, log-likelihoods averaged over S posterior draws.
struct PplResult {
    real ppl = 0;
    long excluded = 0;
    long degenerate_masks = 0;
    long guard_events = 0;
};
PplResult ppl_document_completion(const ParameterStore& store, const ModelHyperParams& hyper,
                                  const CorpusSequence& corpus, const SplitSpec& split,
                                  const MetricOptions& opt);

// Predictive negative log-likelihood per token of the last slice's held-out
// documents: posterior particles over the prefix are pushed through the prior
// transitions, then document likelihoods are combined by log-mean-exp.
real predictive_nll(const ParameterStore& store, const ModelHyperParams& hyper,
                    const CorpusSequence& corpus, const SplitSpec& split,
                    const MetricOptions& opt);

struct CooccurrenceStats {
    long D = 0;                                // training document count
    std::map<int, long> df;                    // document frequency per word
    std::map<std::pair<int, int>, long> joint; // keys are (min id, max id)
};
CooccurrenceStats build_cooccurrence(const CorpusSequence& corpus, const SplitSpec& split,
                                     const std::vector<int>& words);

// NPMI with add-eps smoothing (eps = 1/D) on the document frequencies; pairs
// that never co-occur score -1 by convention.
real npmi(const CooccurrenceStats& stats, int w1, int w2);

std::vector<std::vector<int>> top_word_ids(const Tensor& beta, int n);

real topic_coherence(const Tensor& beta, const CooccurrenceStats& stats, int top_n = 10);
real topic_diversity(const Tensor& beta, int top_n = 25);

std::vector<std::vector<std::pair<std::string, real>>> top_words(const Tensor& beta,
                                                                 const Vocabulary& vocab, int n);

// Shannon entropy of theta with 0 log 0 = 0.
real topic_entropy(const Tensor& theta_row);

struct SeriesResult {
    std::vector<SeriesPoint> entropy;  // per slice, over the chosen split's docs
    Tensor activity;                   // T x K mean of hard masks
    long degenerate_masks = 0;
    real mean_entropy = 0;             // pooled over all documents
};
SeriesResult infer_series(const ParameterStore& store, const ModelHyperParams& hyper,
                          const CorpusSequence& corpus, const SplitSpec& split,
                          const MetricOptions& opt);

MetricReport compute_metrics(const ParameterStore& store, const ModelHyperParams& hyper,
                             const CorpusSequence& corpus, const SplitSpec& split,
                             const MetricOptions& opt, const MetricSelection& sel);

std::string report_to_json(const MetricReport& report);
std::string entropy_series_csv(const MetricReport& report);
std::string activity_series_csv(const MetricReport& report);

}  // namespace ndftm
