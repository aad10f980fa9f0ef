#include "ndftm/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"
#include "ndftm/kernels.hpp"

namespace ndftm {

using nlohmann::json;

void ModelHyperParams::validate() const {
    if (K < 2) throw ConfigError("hyper: K must be >= 2");
    if (V < 2) throw ConfigError("hyper: V must be >= 2");
    if (E < 1) throw ConfigError("hyper: E must be >= 1");
    if (dim_xi < 1 || dim_eta < 1) throw ConfigError("hyper: state dimensions must be >= 1");
    if (!(delta > real(0))) throw ConfigError("hyper: delta must be > 0");
    if (!(alpha0 > real(0)) || alpha0 > real(1)) throw ConfigError("hyper: alpha0 must be in (0, 1]");
    if (!(tau > real(0))) throw ConfigError("hyper: tau must be > 0");
    if (transition_hidden < 1 || lstm_hidden < 1 || posterior_hidden < 1) {
        throw ConfigError("hyper: hidden widths must be >= 1");
    }
}

std::string transition_slot(const char* stream, const char* part) {
    return std::string("gen.trans_") + stream + "." + part;
}

void GenerativeParams::create(ParameterStore& store, Rng& rng) const {
    const auto& h = hyper;
    auto scaled = [&](const std::string& name, int r, int c, real scale) {
        store.create_randn(name, r, c, rng, scale);
    };
    if (!h.linear_transition) {
        for (const char* stream : {"xi", "eta"}) {
            const int dim = stream[0] == 'x' ? h.dim_xi : h.dim_eta;
            scaled(transition_slot(stream, "w1"), dim, h.transition_hidden,
                   real(1) / std::sqrt(static_cast<real>(dim)));
            store.create(transition_slot(stream, "b1"), 1, h.transition_hidden);
            scaled(transition_slot(stream, "w2"), h.transition_hidden, dim,
                   real(0.1) / std::sqrt(static_cast<real>(h.transition_hidden)));
            store.create(transition_slot(stream, "b2"), 1, dim);
        }
    }
    scaled(kWxi, h.K, h.dim_xi, real(1) / std::sqrt(static_cast<real>(h.dim_xi)));
    store.create(kCxi, 1, h.K);
    scaled(kWzeta, h.K, h.dim_eta, real(1) / std::sqrt(static_cast<real>(h.dim_eta)));
    store.create(kCzeta, 1, h.K);
    // Embeddings start at a scale where the topic-word rows already differ
    // (inner-product logits at unit variance); near-identical rows make the
    // topics collapse onto a single survivor before the documents can sort
    // themselves.
    const real embed_scale = std::pow(static_cast<real>(h.E), real(-0.25));
    scaled(kAlpha, h.K, h.E, embed_scale);
    scaled(kRho, h.V, h.E, embed_scale);
}

Tensor transition_mean(const ParameterStore& store, const ModelHyperParams& hyper,
                       const char* stream, const Tensor& prev) {
    if (hyper.linear_transition) return prev;
    const Tensor& w1 = store.at(transition_slot(stream, "w1"));
    const Tensor& b1 = store.at(transition_slot(stream, "b1"));
    const Tensor& w2 = store.at(transition_slot(stream, "w2"));
    const Tensor& b2 = store.at(transition_slot(stream, "b2"));
    Tensor hid(prev.r, w1.c);
    kernels::affine(prev, w1, b1, hid);
    for (auto& v : hid.d) v = std::tanh(v);
    Tensor out(prev.r, w2.c);
    kernels::affine(hid, w2, b2, out);
    for (size_t i = 0; i < out.d.size(); ++i) out.d[i] += prev.d[i];  // residual
    return out;
}

Tensor activity_probs(const ParameterStore& store, const ModelHyperParams& hyper,
                      const Tensor& xi) {
    const Tensor& w = store.at(GenerativeParams::kWxi);
    const Tensor& c = store.at(GenerativeParams::kCxi);
    Tensor logits(xi.r, w.r);
    kernels::matmul_nt(xi, w, logits);
    Tensor pi(xi.r, w.r);
    for (int i = 0; i < logits.r; ++i) {
        for (int j = 0; j < logits.c; ++j) {
            pi.at(i, j) = hyper.alpha0 * kernels::sigmoid(logits.at(i, j) + c.d[static_cast<size_t>(j)]);
        }
    }
    return pi;
}

Tensor zeta_prior_mean(const ParameterStore& store, const ModelHyperParams& hyper,
                       const Tensor& eta) {
    (void)hyper;
    const Tensor& w = store.at(GenerativeParams::kWzeta);
    const Tensor& c = store.at(GenerativeParams::kCzeta);
    Tensor mean(eta.r, w.r);
    kernels::matmul_nt(eta, w, mean);
    for (int i = 0; i < mean.r; ++i) {
        for (int j = 0; j < mean.c; ++j) mean.at(i, j) += c.d[static_cast<size_t>(j)];
    }
    return mean;
}

Tensor topic_proportions_hard(const Tensor& b01, const Tensor& zeta, long* degenerate_count) {
    if (!b01.same_shape(zeta)) throw ShapeError("topic_proportions: mask/zeta shape mismatch");
    Tensor theta(b01.r, b01.c);
    for (int i = 0; i < b01.r; ++i) {
        kernels::masked_theta_hard(b01.row_ptr(i), zeta.row_ptr(i), b01.c, theta.row_ptr(i),
                                   degenerate_count);
    }
    return theta;
}

Tensor topic_proportions_relaxed(const Tensor& b_soft, const Tensor& zeta) {
    if (!b_soft.same_shape(zeta)) throw ShapeError("topic_proportions: mask/zeta shape mismatch");
    Tensor s(b_soft.r, b_soft.c);
    for (size_t i = 0; i < s.d.size(); ++i) s.d[i] = std::log(b_soft.d[i]) + zeta.d[i];
    Tensor theta(s.r, s.c);
    kernels::softmax_rows(s, theta);
    return theta;
}

Tensor topic_word_matrix(const ParameterStore& store, const ModelHyperParams& hyper) {
    (void)hyper;
    const Tensor& alpha = store.at(GenerativeParams::kAlpha);
    const Tensor& rho = store.at(GenerativeParams::kRho);
    Tensor logits(alpha.r, rho.r);
    kernels::matmul_nt(alpha, rho, logits);
    Tensor beta(alpha.r, rho.r);
    kernels::softmax_rows(logits, beta);
    return beta;
}

real doc_loglikelihood(const Tensor& theta, const Tensor& beta,
                       const std::vector<std::pair<int, int>>& counts, long* guard_count) {
    real ll = real(0);
    for (const auto& [word, c] : counts) {
        ll += static_cast<real>(c) *
              kernels::log_mixture_prob(theta.d.data(), beta, word, theta.c, kMixtureFloor,
                                        guard_count);
    }
    return ll;
}

namespace {

int sample_categorical(const real* probs, int n, Rng& rng) {
    const double u = rng.uniform();
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        acc += static_cast<double>(probs[i]);
        if (u <= acc) return i;
    }
    return n - 1;
}

Tensor gaussian_row(int n, Rng& rng, const Tensor* mean = nullptr, real stddev = real(1)) {
    Tensor t(1, n);
    for (int i = 0; i < n; ++i) {
        t.d[static_cast<size_t>(i)] = (mean ? mean->d[static_cast<size_t>(i)] : real(0)) +
                                      stddev * static_cast<real>(rng.normal());
    }
    return t;
}

}  // namespace

SampleCorpusResult sample_corpus(const ModelHyperParams& hyper, const ParameterStore& store,
                                 int T, int docs_per_slice, int tokens_per_doc, uint64_t seed) {
    hyper.validate();
    if (T < 2) throw ConfigError("sample_corpus: T must be >= 2");
    if (docs_per_slice < 1 || tokens_per_doc < 1) {
        throw ConfigError("sample_corpus: docs and tokens per slice must be >= 1");
    }

    Rng rng(hash_mix(seed, 0xc0de));
    const Tensor beta = topic_word_matrix(store, hyper);
    const real sqrt_delta = std::sqrt(hyper.delta);

    SampleCorpusResult out;
    LatentTrajectory& truth = out.truth;
    truth.pi = Tensor(T, hyper.K);

    // Vocabulary w000..w(V-1); zero padding keeps lexicographic order equal to
    // id order.
    int width = 1;
    for (int v = hyper.V - 1; v >= 10; v /= 10) ++width;
    std::vector<std::string> tokens;
    tokens.reserve(static_cast<size_t>(hyper.V));
    for (int v = 0; v < hyper.V; ++v) {
        std::string s = std::to_string(v);
        tokens.push_back("w" + std::string(static_cast<size_t>(width) - s.size(), '0') + s);
    }
    out.corpus.vocabulary = Vocabulary::from_tokens(std::move(tokens));
    out.corpus.slices.resize(static_cast<size_t>(T));

    for (int t = 0; t < T; ++t) {
        Tensor xi = t == 0 ? gaussian_row(hyper.dim_xi, rng)
                           : [&] {
                                 Tensor mean = transition_mean(store, hyper, "xi", truth.xi.back());
                                 return gaussian_row(hyper.dim_xi, rng, &mean, sqrt_delta);
                             }();
        Tensor eta = t == 0 ? gaussian_row(hyper.dim_eta, rng)
                            : [&] {
                                  Tensor mean = transition_mean(store, hyper, "eta", truth.eta.back());
                                  return gaussian_row(hyper.dim_eta, rng, &mean, sqrt_delta);
                              }();
        const Tensor pi = activity_probs(store, hyper, xi);
        std::copy(pi.d.begin(), pi.d.end(), truth.pi.row_ptr(t));
        const Tensor zeta_mean = zeta_prior_mean(store, hyper, eta);

        truth.xi.push_back(std::move(xi));
        truth.eta.push_back(std::move(eta));
        truth.zeta.emplace_back();
        truth.b.emplace_back();
        truth.theta.emplace_back();

        for (int d = 0; d < docs_per_slice; ++d) {
            Tensor zeta = gaussian_row(hyper.K, rng, &zeta_mean, real(1));

            std::vector<uint8_t> mask(static_cast<size_t>(hyper.K), 1);
            if (!hyper.coupled) {
                bool any = false;
                for (int attempt = 0; attempt < 100 && !any; ++attempt) {
                    for (int k = 0; k < hyper.K; ++k) {
                        mask[static_cast<size_t>(k)] =
                            rng.uniform() < static_cast<double>(pi.d[static_cast<size_t>(k)]) ? 1 : 0;
                        any = any || mask[static_cast<size_t>(k)];
                    }
                }
                if (!any) {
                    int best = 0;
                    for (int k = 1; k < hyper.K; ++k) {
                        if (pi.d[static_cast<size_t>(k)] > pi.d[static_cast<size_t>(best)]) best = k;
                    }
                    mask[static_cast<size_t>(best)] = 1;
                    ++truth.forced_masks;
                }
            }

            Tensor b(1, hyper.K);
            for (int k = 0; k < hyper.K; ++k) b.d[static_cast<size_t>(k)] = mask[static_cast<size_t>(k)];
            Tensor theta = topic_proportions_hard(b, zeta, nullptr);

            std::map<int, int> counts;
            for (int n = 0; n < tokens_per_doc; ++n) {
                const int z = sample_categorical(theta.d.data(), hyper.K, rng);
                const int w = sample_categorical(beta.row_ptr(z), hyper.V, rng);
                ++counts[w];
            }
            TimeStampedDocument doc;
            doc.slice_index = t;
            for (const auto& [id, c] : counts) {
                doc.counts.emplace_back(id, c);
                doc.token_total += c;
            }
            out.corpus.slices[static_cast<size_t>(t)].push_back(std::move(doc));

            truth.zeta.back().push_back(std::move(zeta));
            truth.b.back().push_back(mask);
            truth.theta.back().push_back(std::move(theta));
        }
    }

    SplitSpec all_train;
    all_train.assignment.resize(out.corpus.slices.size());
    for (size_t t = 0; t < out.corpus.slices.size(); ++t) {
        all_train.assignment[t].assign(out.corpus.slices[t].size(), Split::Train);
    }
    recompute_slice_bow(out.corpus, all_train);
    return out;
}

ParameterStore make_synth_params(const ModelHyperParams& hyper, const SynthDesign& design,
                                 uint64_t seed) {
    hyper.validate();
    ParameterStore store;
    Rng rng(hash_mix(seed, 0x5e3d));
    GenerativeParams gen{hyper};
    gen.create(store, rng);

    // Word embeddings at unit scale; each topic embedding points at a
    // spread-out anchor word so rows of beta concentrate on distinct words.
    Tensor& rho = store.mutate(GenerativeParams::kRho);
    Rng rho_rng = rng.fork(1);
    for (auto& v : rho.d) v = static_cast<real>(rho_rng.normal());
    Tensor& alpha = store.mutate(GenerativeParams::kAlpha);
    Rng alpha_rng = rng.fork(2);
    for (int k = 0; k < hyper.K; ++k) {
        const int anchor = static_cast<int>((static_cast<long>(k) * hyper.V) / hyper.K);
        real norm_sq = real(0);
        for (int e = 0; e < hyper.E; ++e) {
            const real w = rho.at(anchor, e);
            norm_sq += w * w;
        }
        const real gain = design.beta_sharpness / std::max(norm_sq, real(1e-6));
        for (int e = 0; e < hyper.E; ++e) {
            alpha.at(k, e) = gain * rho.at(anchor, e) +
                             real(0.05) * static_cast<real>(alpha_rng.normal());
        }
    }

    // Activity read-out: per-topic baselines spread from rare to common, and
    // enough state gain that pi moves with xi over time. Row norms are fixed
    // so the state cannot swamp a topic's baseline; every topic keeps a
    // learnable minimum presence.
    Tensor& w_xi = store.mutate(GenerativeParams::kWxi);
    Rng wxi_rng = rng.fork(3);
    for (int k = 0; k < hyper.K; ++k) {
        real norm_sq = real(0);
        for (int e = 0; e < hyper.dim_xi; ++e) {
            const real g = static_cast<real>(wxi_rng.normal());
            w_xi.at(k, e) = g;
            norm_sq += g * g;
        }
        const real gain = design.activity_scale / std::sqrt(std::max(norm_sq, real(1e-12)));
        for (int e = 0; e < hyper.dim_xi; ++e) w_xi.at(k, e) *= gain;
    }
    Tensor& c_xi = store.mutate(GenerativeParams::kCxi);
    for (int k = 0; k < hyper.K; ++k) {
        const real pos = hyper.K > 1 ? real(2) * static_cast<real>(k) / static_cast<real>(hyper.K - 1) - real(1)
                                     : real(0);
        c_xi.d[static_cast<size_t>(k)] = design.activity_skew * pos;
    }

    Tensor& w_zeta = store.mutate(GenerativeParams::kWzeta);
    Rng wz_rng = rng.fork(4);
    const real wz_scale = design.zeta_scale / std::sqrt(static_cast<real>(hyper.dim_eta));
    for (auto& v : w_zeta.d) v = wz_scale * static_cast<real>(wz_rng.normal());

    if (!hyper.linear_transition) {
        Rng tr_rng = rng.fork(5);
        for (const char* stream : {"xi", "eta"}) {
            const int dim = stream[0] == 'x' ? hyper.dim_xi : hyper.dim_eta;
            Tensor& w1 = store.mutate(transition_slot(stream, "w1"));
            for (auto& v : w1.d) {
                v = design.drift_scale / std::sqrt(static_cast<real>(dim)) *
                    static_cast<real>(tr_rng.normal());
            }
            Tensor& w2 = store.mutate(transition_slot(stream, "w2"));
            for (auto& v : w2.d) {
                v = design.drift_scale / std::sqrt(static_cast<real>(hyper.transition_hidden)) *
                    static_cast<real>(tr_rng.normal());
            }
        }
    }
    return store;
}

std::string ground_truth_to_json(const LatentTrajectory& truth) {
    json j;
    j["format"] = "ndftm-ground-truth";
    j["version"] = 1;
    json pi = json::array();
    for (int t = 0; t < truth.pi.r; ++t) {
        pi.push_back(std::vector<real>(truth.pi.row_ptr(t), truth.pi.row_ptr(t) + truth.pi.c));
    }
    j["pi"] = std::move(pi);
    json jb = json::array();
    for (const auto& slice : truth.b) {
        json js = json::array();
        for (const auto& mask : slice) js.push_back(mask);
        jb.push_back(std::move(js));
    }
    j["b"] = std::move(jb);
    json jtheta = json::array();
    for (const auto& slice : truth.theta) {
        json js = json::array();
        for (const auto& th : slice) js.push_back(th.d);
        jtheta.push_back(std::move(js));
    }
    j["theta"] = std::move(jtheta);
    j["forced_masks"] = truth.forced_masks;
    return j.dump();
}

void save_ground_truth(const std::string& path, const LatentTrajectory& truth) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw InputError("cannot write ground truth: " + path);
    f << ground_truth_to_json(truth);
}

LatentTrajectory load_ground_truth(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw InputError("cannot open ground truth: " + path);
    json j;
    try {
        j = json::parse(f);
    } catch (const json::exception& e) {
        throw InputError("ground truth " + path + ": " + e.what());
    }
    if (j.value("format", "") != "ndftm-ground-truth") {
        throw InputError("ground truth " + path + ": unrecognized format");
    }
    LatentTrajectory truth;
    const auto pi_rows = j["pi"].get<std::vector<std::vector<real>>>();
    truth.pi = Tensor(static_cast<int>(pi_rows.size()), static_cast<int>(pi_rows.front().size()));
    for (size_t t = 0; t < pi_rows.size(); ++t) {
        std::copy(pi_rows[t].begin(), pi_rows[t].end(), truth.pi.row_ptr(static_cast<int>(t)));
    }
    truth.b = j["b"].get<std::vector<std::vector<std::vector<uint8_t>>>>();
    for (const auto& slice : j["theta"]) {
        truth.theta.emplace_back();
        for (const auto& th : slice) {
            truth.theta.back().push_back(Tensor::row(th.get<std::vector<real>>()));
        }
    }
    truth.forced_masks = j.value("forced_masks", 0L);
    return truth;
}

}  // namespace ndftm
