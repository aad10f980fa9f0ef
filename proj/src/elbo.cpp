#include "ndftm/elbo.hpp"

#include <cmath>

#include "ndftm/gradcheck.hpp"

namespace ndftm {

real kl_gaussian_diag(const Tensor& mean_q, const Tensor& var_q, const Tensor& mean_p,
                      const Tensor& var_p) {
    if (!mean_q.same_shape(var_q) || !mean_q.same_shape(mean_p) || !mean_q.same_shape(var_p)) {
        throw ShapeError("kl_gaussian_diag: shape mismatch");
    }
    real kl = real(0);
    for (size_t i = 0; i < mean_q.d.size(); ++i) {
        const real vq = var_q.d[i];
        const real vp = var_p.d[i];
        if (!(vq > real(0)) || !(vp > real(0))) {
            throw ConfigError("kl_gaussian_diag: variances must be positive");
        }
        const real diff = mean_q.d[i] - mean_p.d[i];
        kl += real(0.5) * (std::log(vp / vq) + (vq + diff * diff) / vp - real(1));
    }
    return kl;
}

real kl_bernoulli(const Tensor& q, const Tensor& p) {
    if (!q.same_shape(p)) throw ShapeError("kl_bernoulli: shape mismatch");
    real kl = real(0);
    for (size_t i = 0; i < q.d.size(); ++i) {
        const real qi = q.d[i];
        const real pi = p.d[i];
        if (!(qi > real(0)) || !(qi < real(1)) || !(pi > real(0)) || !(pi < real(1))) {
            throw ConfigError("kl_bernoulli: probabilities must be strictly inside (0, 1)");
        }
        kl += qi * std::log(qi / pi) + (real(1) - qi) * std::log((real(1) - qi) / (real(1) - pi));
    }
    return kl;
}

Rng NoiseSource::stream(uint64_t kind, uint64_t draw, uint64_t t, uint64_t d) const {
    return Rng(hash_mix(hash_mix(hash_mix(hash_mix(base_, kind), draw), t), d));
}

Tensor NoiseSource::normal_row(uint64_t kind, uint64_t draw, uint64_t t, uint64_t d, int n) const {
    if (centered_) return Tensor::zeros(1, n);
    Rng rng = stream(kind, draw, t, d);
    Tensor out(1, n);
    for (auto& v : out.d) v = static_cast<real>(rng.normal());
    return out;
}

Tensor NoiseSource::uniform_row(uint64_t kind, uint64_t draw, uint64_t t, uint64_t d, int n) const {
    if (centered_) return Tensor::full(1, n, real(0.5));
    Rng rng = stream(kind, draw, t, d);
    Tensor out(1, n);
    for (auto& v : out.d) v = static_cast<real>(rng.uniform());
    return out;
}

namespace {

struct TapeMlpHead {
    Value w1, b1, w2, b2;

    static TapeMlpHead lookup(Tape& tape, const ParameterStore& store, const char* head) {
        return {tape.parameter(store, EncoderParams::head_slot(head, "w1")),
                tape.parameter(store, EncoderParams::head_slot(head, "b1")),
                tape.parameter(store, EncoderParams::head_slot(head, "w2")),
                tape.parameter(store, EncoderParams::head_slot(head, "b2"))};
    }

    Value apply(Tape& tape, Value input) const {
        return tape.affine(tape.tanh(tape.affine(input, w1, b1)), w2, b2);
    }
};

struct TapeGaussian {
    Value mean;
    Value log_var;
};

TapeGaussian split_gaussian(Tape& tape, Value raw, int dim) {
    TapeGaussian g;
    g.mean = tape.slice_cols(raw, 0, dim);
    g.log_var = tape.clamp(tape.slice_cols(raw, dim, 2 * dim), -kLogVarClamp, kLogVarClamp);
    return g;
}

Value reparam(Tape& tape, const TapeGaussian& g, Value noise) {
    Value std_dev = tape.exp(tape.scale(g.log_var, real(0.5)));
    return tape.add(g.mean, tape.mul(std_dev, noise));
}

// KL(N(mean, e^logvar) || N(prior_mean, prior_var I)) summed over coordinates.
Value kl_gaussian_node(Tape& tape, const TapeGaussian& q, Value prior_mean, real prior_var) {
    Value var = tape.exp(q.log_var);
    Value diff = tape.sub(q.mean, prior_mean);
    Value quad = tape.scale(tape.add(var, tape.mul(diff, diff)), real(1) / prior_var);
    Value inner = tape.add_scalar(tape.sub(quad, q.log_var),
                                  std::log(prior_var) - real(1));
    return tape.scale(tape.sum_all(inner), real(0.5));
}

// Same prior mean for every coordinate being zero with unit variance.
Value kl_standard_normal_node(Tape& tape, const TapeGaussian& q) {
    Value var = tape.exp(q.log_var);
    Value inner = tape.sub(tape.add(var, tape.mul(q.mean, q.mean)),
                           tape.add_scalar(q.log_var, real(1)));
    return tape.scale(tape.sum_all(inner), real(0.5));
}

// KL between Bernoulli posteriors with clamped logits and the prior
// alpha0 * sigmoid(prior_logits), composed from softplus for stability.
Value kl_bernoulli_node(Tape& tape, Value q, Value q_logits, Value prior_logits, real alpha0) {
    Value log_q = tape.scale(tape.softplus(tape.scale(q_logits, real(-1))), real(-1));
    Value log_1mq = tape.scale(tape.softplus(q_logits), real(-1));
    Value log_p = tape.add_scalar(tape.scale(tape.softplus(tape.scale(prior_logits, real(-1))), real(-1)),
                                  std::log(alpha0));
    Value one_minus_p = tape.add_scalar(
        tape.scale(tape.sigmoid(tape.scale(prior_logits, real(-1))), alpha0), real(1) - alpha0);
    Value log_1mp = tape.log(one_minus_p);
    Value one_minus_q = tape.add_scalar(tape.scale(q, real(-1)), real(1));
    Value term = tape.add(tape.mul(q, tape.sub(log_q, log_p)),
                          tape.mul(one_minus_q, tape.sub(log_1mq, log_1mp)));
    return tape.sum_all(term);
}

struct TapeLstm {
    Value wx, wh, b;
    static TapeLstm lookup(Tape& tape, const ParameterStore& store, const char* stream,
                           bool backward) {
        return {tape.parameter(store, EncoderParams::lstm_slot(stream, backward, "wx")),
                tape.parameter(store, EncoderParams::lstm_slot(stream, backward, "wh")),
                tape.parameter(store, EncoderParams::lstm_slot(stream, backward, "b"))};
    }
};

std::vector<Value> encode_stream(Tape& tape, const ParameterStore& store,
                                 const ModelHyperParams& hyper, const char* stream,
                                 const std::vector<Value>& bow_rows) {
    const int T = static_cast<int>(bow_rows.size());
    TapeLstm fwd = TapeLstm::lookup(tape, store, stream, false);
    Value h = tape.constant(Tensor::zeros(1, hyper.lstm_hidden));
    Value c = tape.constant(Tensor::zeros(1, hyper.lstm_hidden));
    std::vector<Value> states(static_cast<size_t>(T));
    for (int t = 0; t < T; ++t) {
        LstmState s = lstm_cell(tape, bow_rows[static_cast<size_t>(t)], h, c, fwd.wx, fwd.wh, fwd.b);
        h = s.h;
        c = s.c;
        states[static_cast<size_t>(t)] = h;
    }
    if (!hyper.bidirectional_encoder) return states;
    TapeLstm bwd = TapeLstm::lookup(tape, store, stream, true);
    Value hb = tape.constant(Tensor::zeros(1, hyper.lstm_hidden));
    Value cb = tape.constant(Tensor::zeros(1, hyper.lstm_hidden));
    std::vector<Value> back(static_cast<size_t>(T));
    for (int t = T - 1; t >= 0; --t) {
        LstmState s = lstm_cell(tape, bow_rows[static_cast<size_t>(t)], hb, cb, bwd.wx, bwd.wh, bwd.b);
        hb = s.h;
        cb = s.c;
        back[static_cast<size_t>(t)] = hb;
    }
    for (int t = 0; t < T; ++t) {
        states[static_cast<size_t>(t)] = tape.concat_cols(states[static_cast<size_t>(t)], back[static_cast<size_t>(t)]);
    }
    return states;
}

Value transition_mean_node(Tape& tape, const ParameterStore& store, const ModelHyperParams& hyper,
                           const char* stream, Value prev) {
    if (hyper.linear_transition) return prev;
    Value w1 = tape.parameter(store, transition_slot(stream, "w1"));
    Value b1 = tape.parameter(store, transition_slot(stream, "b1"));
    Value w2 = tape.parameter(store, transition_slot(stream, "w2"));
    Value b2 = tape.parameter(store, transition_slot(stream, "b2"));
    return tape.add(prev, tape.affine(tape.tanh(tape.affine(prev, w1, b1)), w2, b2));
}

struct Accum {
    Tape& tape;
    Value v;
    explicit Accum(Tape& t) : tape(t), v(t.constant(Tensor::scalar(real(0)))) {}
    void add(Value x) { v = tape.add(v, x); }
    void add_scaled(Value x, real s) { v = tape.add(v, tape.scale(x, s)); }
};

}  // namespace

ElboResult build_elbo(Tape& tape, const ParameterStore& store, const ModelHyperParams& hyper,
                      const CorpusSequence& corpus, const std::vector<SliceBatch>& batch,
                      const std::vector<long>& slice_doc_totals, const NoiseSource& noise,
                      const ElboOptions& opt) {
    if (batch.empty()) throw ConfigError("elbo: batch must be non-empty");
    if (opt.mc_samples < 1) throw ConfigError("elbo: mc_samples must be >= 1");
    if (!(opt.tau > real(0))) throw ConfigError("elbo: tau must be > 0");
    const int T = corpus.num_slices();
    const int K = hyper.K;

    ElboResult result;

    Value beta = tape.softmax_rows(tape.matmul_nt(tape.parameter(store, GenerativeParams::kAlpha),
                                                  tape.parameter(store, GenerativeParams::kRho)));
    std::vector<Value> bow_rows;
    bow_rows.reserve(static_cast<size_t>(T));
    for (int t = 0; t < T; ++t) bow_rows.push_back(tape.constant(corpus.slice_bow[static_cast<size_t>(t)]));

    std::vector<Value> h_xi = encode_stream(tape, store, hyper, "xi", bow_rows);
    std::vector<Value> h_eta = encode_stream(tape, store, hyper, "eta", bow_rows);

    TapeMlpHead head_xi = TapeMlpHead::lookup(tape, store, "xi");
    TapeMlpHead head_eta = TapeMlpHead::lookup(tape, store, "eta");
    TapeMlpHead head_zeta = TapeMlpHead::lookup(tape, store, "zeta");
    TapeMlpHead head_b = hyper.coupled ? TapeMlpHead{} : TapeMlpHead::lookup(tape, store, "b");

    Value w_zeta = tape.parameter(store, GenerativeParams::kWzeta);
    Value c_zeta = tape.parameter(store, GenerativeParams::kCzeta);
    Value w_xi_read = hyper.coupled ? Value{} : tape.parameter(store, GenerativeParams::kWxi);
    Value c_xi_read = hyper.coupled ? Value{} : tape.parameter(store, GenerativeParams::kCxi);

    Accum recon(tape), kl_eta1(tape), kl_xi1(tape), kl_eta_seq(tape), kl_xi_seq(tape),
        kl_zeta(tape), kl_b(tape);

    const real draw_w = real(1) / static_cast<real>(opt.mc_samples);

    for (int s = 0; s < opt.mc_samples; ++s) {
        const auto su = static_cast<uint64_t>(s);

        // Global chains: sample xi_t, eta_t and accumulate chain KLs over all t.
        std::vector<Value> xi_t(static_cast<size_t>(T)), eta_t(static_cast<size_t>(T));
        Value xi_prev = tape.constant(Tensor::zeros(1, hyper.dim_xi));
        Value eta_prev = tape.constant(Tensor::zeros(1, hyper.dim_eta));
        for (int t = 0; t < T; ++t) {
            const auto tu = static_cast<uint64_t>(t);
            TapeGaussian qxi = split_gaussian(
                tape, head_xi.apply(tape, tape.concat_cols(xi_prev, h_xi[static_cast<size_t>(t)])), hyper.dim_xi);
            Value xi_noise = tape.constant(noise.normal_row(NoiseSource::kXi, su, tu, 0, hyper.dim_xi));
            Value xi = reparam(tape, qxi, xi_noise);
            TapeGaussian qeta = split_gaussian(
                tape, head_eta.apply(tape, tape.concat_cols(eta_prev, h_eta[static_cast<size_t>(t)])), hyper.dim_eta);
            Value eta_noise = tape.constant(noise.normal_row(NoiseSource::kEta, su, tu, 0, hyper.dim_eta));
            Value eta = reparam(tape, qeta, eta_noise);

            if (t == 0) {
                kl_xi1.add_scaled(kl_standard_normal_node(tape, qxi), draw_w);
                kl_eta1.add_scaled(kl_standard_normal_node(tape, qeta), draw_w);
            } else {
                Value prior_xi = transition_mean_node(tape, store, hyper, "xi", xi_prev);
                Value prior_eta = transition_mean_node(tape, store, hyper, "eta", eta_prev);
                kl_xi_seq.add_scaled(kl_gaussian_node(tape, qxi, prior_xi, hyper.delta), draw_w);
                kl_eta_seq.add_scaled(kl_gaussian_node(tape, qeta, prior_eta, hyper.delta), draw_w);
            }
            xi_t[static_cast<size_t>(t)] = xi;
            eta_t[static_cast<size_t>(t)] = eta;
            xi_prev = xi;
            eta_prev = eta;
        }

        // Local terms per slice sub-batch, re-weighted to full-split scale.
        for (const auto& sb : batch) {
            if (sb.docs.empty()) continue;
            const auto tu = static_cast<uint64_t>(sb.t);
            const int B = static_cast<int>(sb.docs.size());
            const real weight = static_cast<real>(slice_doc_totals[static_cast<size_t>(sb.t)]) /
                                static_cast<real>(B);

            Tensor w_norm(B, hyper.V);
            auto counts = std::make_shared<SparseCounts>();
            counts->rows = B;
            counts->cols = hyper.V;
            Tensor zeta_noise(B, K), mask_u(B, K);
            for (int i = 0; i < B; ++i) {
                const auto& doc = corpus.slices[static_cast<size_t>(sb.t)][static_cast<size_t>(sb.docs[static_cast<size_t>(i)])];
                const real inv = real(1) / static_cast<real>(doc.token_total);
                for (const auto& [id, c] : doc.counts) {
                    w_norm.at(i, id) = static_cast<real>(c) * inv;
                    counts->entries.emplace_back(i, id, static_cast<real>(c));
                }
                const auto du = static_cast<uint64_t>(sb.docs[static_cast<size_t>(i)]);
                Tensor zn = noise.normal_row(NoiseSource::kZeta, su, tu, du, K);
                std::copy(zn.d.begin(), zn.d.end(), zeta_noise.row_ptr(i));
                Tensor un = noise.uniform_row(NoiseSource::kMask, su, tu, du, K);
                std::copy(un.d.begin(), un.d.end(), mask_u.row_ptr(i));
            }

            Value w_norm_v = tape.constant(std::move(w_norm));
            Value eta_b = tape.broadcast_rows(eta_t[static_cast<size_t>(sb.t)], B);

            TapeGaussian qz = split_gaussian(
                tape, head_zeta.apply(tape, tape.concat_cols(w_norm_v, eta_b)), K);
            Value zeta = reparam(tape, qz, tape.constant(std::move(zeta_noise)));
            Value zeta_prior = tape.broadcast_rows(
                tape.add(tape.matmul_nt(eta_t[static_cast<size_t>(sb.t)], w_zeta), c_zeta), B);
            kl_zeta.add_scaled(kl_gaussian_node(tape, qz, zeta_prior, real(1)), draw_w * weight);

            Value theta;
            if (hyper.coupled) {
                theta = tape.softmax_rows(zeta);
            } else {
                Value xi_b = tape.broadcast_rows(xi_t[static_cast<size_t>(sb.t)], B);
                Value q_logits = tape.clamp(head_b.apply(tape, tape.concat_cols(w_norm_v, xi_b)),
                                            -kLogitClamp, kLogitClamp);
                Value q = tape.sigmoid(q_logits);
                Tensor logit_u(B, K);
                for (size_t i = 0; i < logit_u.d.size(); ++i) {
                    const real u = mask_u.d[i];
                    logit_u.d[i] = std::log(u) - std::log1p(-u);
                }
                Value b_soft = tape.sigmoid(
                    tape.scale(tape.add(q_logits, tape.constant(std::move(logit_u))), real(1) / opt.tau));
                Value log_mask = tape.log(b_soft);
                if (opt.estimator == MaskEstimator::StraightThrough) {
                    // Forward value snaps to the hard mask's log (0 on, -30
                    // off). Thresholding the concrete sample at 1/2 is an
                    // exact Bernoulli(q) draw and keeps the surrogate
                    // gradient pointing the same way as the forward mask.
                    const Tensor& soft = tape.val(b_soft);
                    const Tensor& soft_log = tape.val(log_mask);
                    Tensor shift(B, K);
                    for (size_t i = 0; i < shift.d.size(); ++i) {
                        shift.d[i] = (soft.d[i] > real(0.5) ? real(0) : real(-30)) - soft_log.d[i];
                    }
                    log_mask = tape.add(log_mask, tape.constant(std::move(shift)));
                }
                theta = tape.softmax_rows(tape.add(log_mask, zeta));

                Value prior_logits = tape.broadcast_rows(
                    tape.add(tape.matmul_nt(xi_t[static_cast<size_t>(sb.t)], w_xi_read), c_xi_read), B);
                kl_b.add_scaled(kl_bernoulli_node(tape, q, q_logits, prior_logits, hyper.alpha0),
                                draw_w * weight);
            }

            Value mix = tape.matmul(theta, beta);
            Value ll = tape.weighted_log_sum(mix, counts, kMixtureFloor, &result.guard_events);
            recon.add_scaled(ll, draw_w * weight);
        }
    }

    Value kl_total = tape.add(tape.add(tape.add(kl_eta1.v, kl_xi1.v),
                                       tape.add(kl_eta_seq.v, kl_xi_seq.v)),
                              tape.add(kl_zeta.v, kl_b.v));
    result.loss = tape.sub(tape.scale(kl_total, opt.kl_scale), recon.v);

    result.breakdown.recon = tape.val(recon.v).item();
    result.breakdown.kl_eta1 = tape.val(kl_eta1.v).item();
    result.breakdown.kl_xi1 = tape.val(kl_xi1.v).item();
    result.breakdown.kl_eta_seq = tape.val(kl_eta_seq.v).item();
    result.breakdown.kl_xi_seq = tape.val(kl_xi_seq.v).item();
    result.breakdown.kl_zeta = tape.val(kl_zeta.v).item();
    result.breakdown.kl_b = tape.val(kl_b.v).item();
    result.breakdown.total = result.breakdown.recon - tape.val(kl_total).item();
    return result;
}

ElboBreakdown elbo_value(const ParameterStore& store, const ModelHyperParams& hyper,
                         const CorpusSequence& corpus, const std::vector<SliceBatch>& batch,
                         const std::vector<long>& slice_doc_totals, const NoiseSource& noise,
                         const ElboOptions& opt, long* guard_events) {
    Tape tape;
    ElboResult res = build_elbo(tape, store, hyper, corpus, batch, slice_doc_totals, noise, opt);
    if (guard_events) *guard_events += res.guard_events;
    return res.breakdown;
}

}  // namespace ndftm
