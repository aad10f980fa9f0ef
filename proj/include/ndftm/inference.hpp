#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ndftm/model.hpp"
#include "ndftm/param_store.hpp"
#include "ndftm/tensor.hpp"

namespace ndftm {

// Posterior stabilization bounds.
inline constexpr real kLogVarClamp = real(10);   // log-variances in [-10, 10]
inline constexpr real kLogitClamp = real(15);    // Bernoulli logits in [-15, 15]

// Slot names of the variational half. Each posterior head is a tanh MLP with
// one hidden layer emitting (mean, log-variance) or logits.
struct EncoderParams {
    ModelHyperParams hyper;

    void create(ParameterStore& store, Rng& rng) const;

    static std::string lstm_slot(const char* stream, bool backward, const char* part);
    static std::string head_slot(const char* head, const char* part);
};

struct GaussianParams {
    Tensor mean;
    Tensor log_var;  // clamped to [-kLogVarClamp, kLogVarClamp]

    Tensor variance() const {
        Tensor v = log_var;
        for (auto& x : v.d) x = std::exp(x);
        return v;
    }
};

// Forward LSTM summaries of the slice-level BoW sequence, one row per time
// step. With the bidirectional flag a reverse pass is concatenated and the
// causality property no longer holds.
struct EncoderStates {
    std::vector<Tensor> h_xi;   // each 1 x encoder_width
    std::vector<Tensor> h_eta;
};
EncoderStates encode_sequence(const ParameterStore& store, const ModelHyperParams& hyper,
                              const Tensor& slice_bow /* T x V */);

GaussianParams posterior_xi(const ParameterStore& store, const ModelHyperParams& hyper,
                            const Tensor& xi_prev, const Tensor& h_t);
GaussianParams posterior_eta(const ParameterStore& store, const ModelHyperParams& hyper,
                             const Tensor& eta_prev, const Tensor& h_t);
// Batched over documents: w_norm rows are per-document relative frequencies.
GaussianParams posterior_zeta(const ParameterStore& store, const ModelHyperParams& hyper,
                              const Tensor& w_norm, const Tensor& eta_t);
struct BernoulliPosterior {
    Tensor q;       // strictly inside (0, 1)
    Tensor logits;  // clamped to [-kLogitClamp, kLogitClamp]
};
BernoulliPosterior posterior_b(const ParameterStore& store, const ModelHyperParams& hyper,
                               const Tensor& w_norm, const Tensor& xi_t);

// sample = mean + sqrt(variance) * noise
Tensor reparam_gaussian(const Tensor& mean, const Tensor& variance, const Tensor& noise);

// Binary-concrete relaxation: sigmoid((logit(q) + logit(u)) / tau).
Tensor relaxed_bernoulli(const Tensor& q, real tau, const Tensor& uniform_noise);
Tensor relaxed_bernoulli_from_logits(const Tensor& logits, real tau, const Tensor& uniform_noise);
// Exact Bernoulli draw thresholded against uniform noise; entries in {0, 1}.
Tensor hard_bernoulli(const Tensor& q, const Tensor& uniform_noise);

}  // namespace ndftm
