#include "ndftm/inference.hpp"

#include <cmath>

#include "ndftm/kernels.hpp"

namespace ndftm {

std::string EncoderParams::lstm_slot(const char* stream, bool backward, const char* part) {
    return std::string("enc.lstm_") + stream + (backward ? "_bwd." : ".") + part;
}

std::string EncoderParams::head_slot(const char* head, const char* part) {
    return std::string("enc.post_") + head + "." + part;
}

void EncoderParams::create(ParameterStore& store, Rng& rng) const {
    const auto& h = hyper;
    auto lstm = [&](const char* stream, bool backward) {
        const real sx = real(1) / std::sqrt(static_cast<real>(h.V));
        const real sh = real(1) / std::sqrt(static_cast<real>(h.lstm_hidden));
        store.create_randn(lstm_slot(stream, backward, "wx"), h.V, 4 * h.lstm_hidden, rng, sx);
        store.create_randn(lstm_slot(stream, backward, "wh"), h.lstm_hidden, 4 * h.lstm_hidden, rng, sh);
        store.create(lstm_slot(stream, backward, "b"), 1, 4 * h.lstm_hidden);
    };
    auto head = [&](const char* name, int in, int out) {
        const real s1 = real(1) / std::sqrt(static_cast<real>(in));
        const real s2 = real(1) / std::sqrt(static_cast<real>(h.posterior_hidden));
        store.create_randn(head_slot(name, "w1"), in, h.posterior_hidden, rng, s1);
        store.create(head_slot(name, "b1"), 1, h.posterior_hidden);
        store.create_randn(head_slot(name, "w2"), h.posterior_hidden, out, rng, s2);
        store.create(head_slot(name, "b2"), 1, out);
    };
    lstm("xi", false);
    lstm("eta", false);
    if (h.bidirectional_encoder) {
        lstm("xi", true);
        lstm("eta", true);
    }
    const int enc = h.encoder_width();
    head("xi", h.dim_xi + enc, 2 * h.dim_xi);
    head("eta", h.dim_eta + enc, 2 * h.dim_eta);
    head("zeta", h.V + h.dim_eta, 2 * h.K);
    head("b", h.V + h.dim_xi, h.K);
    // Masks start almost-on so early training matches the coupled regime;
    // the KL against the sparse prior then prunes inactive topics from
    // above, instead of the all-off state where saturated logits stop
    // receiving gradient.
    Tensor& b_bias = store.mutate(head_slot("b", "b2"));
    std::fill(b_bias.d.begin(), b_bias.d.end(), real(3));
}

namespace {

Tensor mlp_head(const ParameterStore& store, const char* head, const Tensor& input) {
    const Tensor& w1 = store.at(EncoderParams::head_slot(head, "w1"));
    const Tensor& b1 = store.at(EncoderParams::head_slot(head, "b1"));
    const Tensor& w2 = store.at(EncoderParams::head_slot(head, "w2"));
    const Tensor& b2 = store.at(EncoderParams::head_slot(head, "b2"));
    Tensor hid(input.r, w1.c);
    kernels::affine(input, w1, b1, hid);
    for (auto& v : hid.d) v = std::tanh(v);
    Tensor out(input.r, w2.c);
    kernels::affine(hid, w2, b2, out);
    return out;
}

Tensor concat_rows(const Tensor& a, const Tensor& b_row) {
    // b_row broadcast to a's rows
    Tensor out(a.r, a.c + b_row.c);
    for (int i = 0; i < a.r; ++i) {
        std::copy(a.row_ptr(i), a.row_ptr(i) + a.c, out.row_ptr(i));
        std::copy(b_row.d.begin(), b_row.d.end(), out.row_ptr(i) + a.c);
    }
    return out;
}

GaussianParams split_gaussian(Tensor raw) {
    const int dim = raw.c / 2;
    GaussianParams g;
    g.mean = Tensor(raw.r, dim);
    g.log_var = Tensor(raw.r, dim);
    for (int i = 0; i < raw.r; ++i) {
        const real* ri = raw.row_ptr(i);
        for (int j = 0; j < dim; ++j) {
            g.mean.at(i, j) = ri[j];
            g.log_var.at(i, j) = std::min(kLogVarClamp, std::max(-kLogVarClamp, ri[dim + j]));
        }
    }
    return g;
}

void run_lstm(const ParameterStore& store, const ModelHyperParams& hyper, const char* stream,
              bool backward, const Tensor& slice_bow, std::vector<Tensor>& states) {
    const Tensor& wx = store.at(EncoderParams::lstm_slot(stream, backward, "wx"));
    const Tensor& wh = store.at(EncoderParams::lstm_slot(stream, backward, "wh"));
    const Tensor& b = store.at(EncoderParams::lstm_slot(stream, backward, "b"));
    const int T = slice_bow.r;
    Tensor h = Tensor::zeros(1, hyper.lstm_hidden);
    Tensor c = Tensor::zeros(1, hyper.lstm_hidden);
    states.assign(static_cast<size_t>(T), Tensor{});
    for (int step = 0; step < T; ++step) {
        const int t = backward ? T - 1 - step : step;
        Tensor x(1, slice_bow.c);
        std::copy(slice_bow.row_ptr(t), slice_bow.row_ptr(t) + slice_bow.c, x.d.begin());
        Tensor h_next(1, hyper.lstm_hidden), c_next(1, hyper.lstm_hidden);
        kernels::lstm_step(x, h, c, wx, wh, b, h_next, c_next);
        h = std::move(h_next);
        c = std::move(c_next);
        states[static_cast<size_t>(t)] = h;
    }
}

}  // namespace

EncoderStates encode_sequence(const ParameterStore& store, const ModelHyperParams& hyper,
                              const Tensor& slice_bow) {
    EncoderStates out;
    std::vector<Tensor> fwd;
    run_lstm(store, hyper, "xi", false, slice_bow, fwd);
    if (hyper.bidirectional_encoder) {
        std::vector<Tensor> bwd;
        run_lstm(store, hyper, "xi", true, slice_bow, bwd);
        for (size_t t = 0; t < fwd.size(); ++t) out.h_xi.push_back(concat_rows(fwd[t], bwd[t]));
    } else {
        out.h_xi = std::move(fwd);
    }
    std::vector<Tensor> fwd2;
    run_lstm(store, hyper, "eta", false, slice_bow, fwd2);
    if (hyper.bidirectional_encoder) {
        std::vector<Tensor> bwd;
        run_lstm(store, hyper, "eta", true, slice_bow, bwd);
        for (size_t t = 0; t < fwd2.size(); ++t) out.h_eta.push_back(concat_rows(fwd2[t], bwd[t]));
    } else {
        out.h_eta = std::move(fwd2);
    }
    return out;
}

GaussianParams posterior_xi(const ParameterStore& store, const ModelHyperParams& hyper,
                            const Tensor& xi_prev, const Tensor& h_t) {
    (void)hyper;
    return split_gaussian(mlp_head(store, "xi", concat_rows(xi_prev, h_t)));
}

GaussianParams posterior_eta(const ParameterStore& store, const ModelHyperParams& hyper,
                             const Tensor& eta_prev, const Tensor& h_t) {
    (void)hyper;
    return split_gaussian(mlp_head(store, "eta", concat_rows(eta_prev, h_t)));
}

GaussianParams posterior_zeta(const ParameterStore& store, const ModelHyperParams& hyper,
                              const Tensor& w_norm, const Tensor& eta_t) {
    (void)hyper;
    return split_gaussian(mlp_head(store, "zeta", concat_rows(w_norm, eta_t)));
}

BernoulliPosterior posterior_b(const ParameterStore& store, const ModelHyperParams& hyper,
                               const Tensor& w_norm, const Tensor& xi_t) {
    (void)hyper;
    BernoulliPosterior out;
    out.logits = mlp_head(store, "b", concat_rows(w_norm, xi_t));
    for (auto& v : out.logits.d) v = std::min(kLogitClamp, std::max(-kLogitClamp, v));
    out.q = out.logits;
    for (auto& v : out.q.d) v = kernels::sigmoid(v);
    return out;
}

Tensor reparam_gaussian(const Tensor& mean, const Tensor& variance, const Tensor& noise) {
    if (!mean.same_shape(variance) || !mean.same_shape(noise)) {
        throw ShapeError("reparam_gaussian: shape mismatch");
    }
    Tensor out = mean;
    for (size_t i = 0; i < out.d.size(); ++i) {
        out.d[i] += std::sqrt(variance.d[i]) * noise.d[i];
    }
    return out;
}

Tensor relaxed_bernoulli_from_logits(const Tensor& logits, real tau, const Tensor& uniform_noise) {
    if (!logits.same_shape(uniform_noise)) throw ShapeError("relaxed_bernoulli: shape mismatch");
    if (!(tau > real(0))) throw ConfigError("relaxed_bernoulli: tau must be > 0");
    Tensor out = logits;
    for (size_t i = 0; i < out.d.size(); ++i) {
        const real u = uniform_noise.d[i];
        out.d[i] = kernels::sigmoid((out.d[i] + std::log(u) - std::log1p(-u)) / tau);
    }
    return out;
}

Tensor relaxed_bernoulli(const Tensor& q, real tau, const Tensor& uniform_noise) {
    Tensor logits = q;
    for (auto& v : logits.d) v = std::log(v) - std::log1p(-v);
    return relaxed_bernoulli_from_logits(logits, tau, uniform_noise);
}

Tensor hard_bernoulli(const Tensor& q, const Tensor& uniform_noise) {
    if (!q.same_shape(uniform_noise)) throw ShapeError("hard_bernoulli: shape mismatch");
    Tensor out = q;
    for (size_t i = 0; i < out.d.size(); ++i) {
        out.d[i] = uniform_noise.d[i] < q.d[i] ? real(1) : real(0);
    }
    return out;
}

}  // namespace ndftm
