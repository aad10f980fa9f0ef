#pragma once

#include <string>
#include <vector>

#include "ndftm/corpus.hpp"
#include "ndftm/param_store.hpp"
#include "ndftm/tensor.hpp"

namespace ndftm {

struct ModelHyperParams {
    int K = 20;               // topic count
    int V = 0;                // vocabulary size (set from the corpus)
    int E = 32;               // embedding dimension
    int dim_xi = 16;          // activity state dimension
    int dim_eta = 16;         // proportion state dimension
    real delta = real(0.05);  // prior transition variance
    real alpha0 = real(0.5);  // activity ceiling in (0, 1]
    real tau = real(1.0);     // default relaxation temperature
    int transition_hidden = 32;
    int lstm_hidden = 64;
    int posterior_hidden = 64;
    bool linear_transition = false;   // identity prior transitions
    bool coupled = false;             // b fixed to all-ones
    bool bidirectional_encoder = false;

    void validate() const;  // throws ConfigError
    int encoder_width() const { return bidirectional_encoder ? 2 * lstm_hidden : lstm_hidden; }
};

// Slot names of the generative half of the model. Weight matrices mapping a
// state to K logits are stored K x dim, matching their role as per-topic
// read-out rows.
struct GenerativeParams {
    ModelHyperParams hyper;

    static constexpr const char* kWxi = "gen.w_xi";        // K x dim_xi
    static constexpr const char* kCxi = "gen.c_xi";        // 1 x K
    static constexpr const char* kWzeta = "gen.w_zeta";    // K x dim_eta
    static constexpr const char* kCzeta = "gen.c_zeta";    // 1 x K
    static constexpr const char* kAlpha = "gen.alpha";     // K x E
    static constexpr const char* kRho = "gen.rho";         // V x E

    void create(ParameterStore& store, Rng& rng) const;
};

// Residual one-hidden-layer transition nets; in linear mode the mean is the
// identity and no transition slots exist.
std::string transition_slot(const char* stream, const char* part);

Tensor transition_mean(const ParameterStore& store, const ModelHyperParams& hyper,
                       const char* stream /* "xi" | "eta" */, const Tensor& prev);

// pi = alpha0 * sigmoid(W_xi xi + c_xi), strictly inside (0, alpha0).
Tensor activity_probs(const ParameterStore& store, const ModelHyperParams& hyper,
                      const Tensor& xi);

// Mean of the unit-variance local prior over zeta: W_zeta eta + c_zeta.
Tensor zeta_prior_mean(const ParameterStore& store, const ModelHyperParams& hyper,
                       const Tensor& eta);

// theta = (b o exp zeta) normalized over the mask's support; equivalently a
// softmax of zeta restricted to active topics. Hard all-zero masks fall back
// to the uniform distribution and count as degenerate events.
Tensor topic_proportions_hard(const Tensor& b01, const Tensor& zeta, long* degenerate_count = nullptr);
Tensor topic_proportions_relaxed(const Tensor& b_soft, const Tensor& zeta);

// beta = row-softmax(alpha rho^T), K x V; each row sums to 1.
Tensor topic_word_matrix(const ParameterStore& store, const ModelHyperParams& hyper);

// sum_w counts[w] * log(sum_k theta_k beta[k][w]); mixture probabilities are
// floored at kMixtureFloor with the incident counted.
inline constexpr real kMixtureFloor = real(1e-12);
real doc_loglikelihood(const Tensor& theta, const Tensor& beta,
                       const std::vector<std::pair<int, int>>& counts,
                       long* guard_count = nullptr);

// Ancestral ground truth of one sampled corpus.
struct LatentTrajectory {
    std::vector<Tensor> xi;                         // T x (1 x dim_xi)
    std::vector<Tensor> eta;                        // T x (1 x dim_eta)
    Tensor pi;                                      // T x K
    std::vector<std::vector<Tensor>> zeta;          // [t][d] -> 1 x K
    std::vector<std::vector<std::vector<uint8_t>>> b;  // [t][d][k]
    std::vector<std::vector<Tensor>> theta;         // [t][d] -> 1 x K
    long forced_masks = 0;  // all-zero draws resolved by forcing the argmax-pi topic
};

struct SampleCorpusResult {
    CorpusSequence corpus;
    LatentTrajectory truth;
};

// Full ancestral roll-out with hard Bernoulli masks; reproducible by seed.
// All-zero masks are resampled up to 100 times, then the argmax-pi topic is
// forced active and the incident counted.
SampleCorpusResult sample_corpus(const ModelHyperParams& hyper, const ParameterStore& store,
                                 int T, int docs_per_slice, int tokens_per_doc, uint64_t seed);

// Ground-truth parameter construction for synthetic corpora. Topics are
// anchored at spread-out vocabulary words so they are well separated, and the
// per-topic activity baselines are spread by `activity_skew` so some topics
// are rare and others common.
struct SynthDesign {
    real beta_sharpness = real(7.0);
    real activity_skew = real(2.0);
    real activity_scale = real(1.5);
    real zeta_scale = real(1.2);
    real drift_scale = real(0.6);
};

ParameterStore make_synth_params(const ModelHyperParams& hyper, const SynthDesign& design,
                                 uint64_t seed);

std::string ground_truth_to_json(const LatentTrajectory& truth);
void save_ground_truth(const std::string& path, const LatentTrajectory& truth);
LatentTrajectory load_ground_truth(const std::string& path);

}  // namespace ndftm
