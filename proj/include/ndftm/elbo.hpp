#pragma once

#include <vector>

#include "ndftm/corpus.hpp"
#include "ndftm/inference.hpp"
#include "ndftm/model.hpp"
#include "ndftm/tape.hpp"

namespace ndftm {

// The seven additive pieces of the objective. total = recon - sum of KLs.
struct ElboBreakdown {
    real recon = 0;
    real kl_eta1 = 0;
    real kl_xi1 = 0;
    real kl_eta_seq = 0;
    real kl_xi_seq = 0;
    real kl_zeta = 0;
    real kl_b = 0;
    real total = 0;

    real kl_sum() const { return kl_eta1 + kl_xi1 + kl_eta_seq + kl_xi_seq + kl_zeta + kl_b; }
};

// Closed-form diagonal-Gaussian KL, summed over every coordinate.
real kl_gaussian_diag(const Tensor& mean_q, const Tensor& var_q, const Tensor& mean_p,
                      const Tensor& var_p);
// Sum over coordinates of q log(q/p) + (1-q) log((1-q)/(1-p)); q, p strictly
// inside (0, 1).
real kl_bernoulli(const Tensor& q, const Tensor& p);

// Deterministic noise keyed by (kind, draw, time, document); the same key
// yields the same draw regardless of batch composition or evaluation order.
class NoiseSource {
public:
    enum Kind : uint64_t { kXi = 1, kEta = 2, kZeta = 3, kMask = 4 };

    NoiseSource(uint64_t seed, uint64_t tag) : base_(hash_mix(hash_mix(seed, 0xa11ce), tag)) {}

    // Deterministic center of each distribution (normals 0, uniforms 1/2);
    // the zero-noise limit used by degenerate-case tests.
    static NoiseSource centered() {
        NoiseSource n(0, 0);
        n.centered_ = true;
        return n;
    }

    Tensor normal_row(uint64_t kind, uint64_t draw, uint64_t t, uint64_t d, int n) const;
    Tensor uniform_row(uint64_t kind, uint64_t draw, uint64_t t, uint64_t d, int n) const;

private:
    Rng stream(uint64_t kind, uint64_t draw, uint64_t t, uint64_t d) const;
    uint64_t base_;
    bool centered_ = false;
};

// One batch entry: a time slice and the indices of its documents.
struct SliceBatch {
    int t = 0;
    std::vector<int> docs;
};

// Gradient estimator for the Bernoulli masks. BinaryConcrete keeps the
// relaxed sample in the forward pass (the objective is then exactly
// differentiable, which the gradient checks rely on). StraightThrough uses
// the hard thresholded mask in the forward pass -- the same semantics
// evaluation uses -- and routes gradients through the concrete surrogate;
// it is the training default because the relaxed forward lets the mask
// level collapse while only relative logits carry signal.
enum class MaskEstimator { BinaryConcrete, StraightThrough };

struct ElboOptions {
    real tau = real(1);
    real kl_scale = real(1);
    int mc_samples = 1;
    MaskEstimator estimator = MaskEstimator::BinaryConcrete;
};

struct ElboResult {
    Value loss;   // scalar tape node: -(recon - kl_scale * sum of KLs)
    ElboBreakdown breakdown;
    long guard_events = 0;
};

// Assembles the objective on `tape` for the given documents. Global KL terms
// cover the whole chain; local terms are re-weighted by N_t / batch_count_t
// using `slice_doc_totals` (the per-slice document counts of the split being
// estimated). Reconstruction uses topic proportions built from relaxed masks.
ElboResult build_elbo(Tape& tape, const ParameterStore& store, const ModelHyperParams& hyper,
                      const CorpusSequence& corpus, const std::vector<SliceBatch>& batch,
                      const std::vector<long>& slice_doc_totals, const NoiseSource& noise,
                      const ElboOptions& opt);

// Forward-only convenience: builds a throwaway tape and returns the breakdown.
ElboBreakdown elbo_value(const ParameterStore& store, const ModelHyperParams& hyper,
                         const CorpusSequence& corpus, const std::vector<SliceBatch>& batch,
                         const std::vector<long>& slice_doc_totals, const NoiseSource& noise,
                         const ElboOptions& opt, long* guard_events = nullptr);

}  // namespace ndftm
