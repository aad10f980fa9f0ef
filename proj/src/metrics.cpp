#include "ndftm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "ndftm/elbo.hpp"
#include "ndftm/kernels.hpp"

namespace ndftm {

using nlohmann::json;

MetricSelection MetricSelection::parse(const std::string& csv) {
    if (csv.empty() || csv == "all") return {};
    MetricSelection sel;
    sel.ppl = sel.pnll = sel.tc = sel.td = sel.series = sel.topwords = false;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item == "ppl") sel.ppl = true;
        else if (item == "pnll") sel.pnll = true;
        else if (item == "tc") sel.tc = true;
        else if (item == "td") sel.td = true;
        else if (item == "entropy" || item == "activity" || item == "series") sel.series = true;
        else if (item == "topwords") sel.topwords = true;
        else throw ConfigError("unknown metric '" + item + "' (expect ppl,pnll,tc,td,series,topwords)");
    }
    return sel;
}

namespace {

struct ChainSample {
    std::vector<Tensor> xi;
    std::vector<Tensor> eta;
};

// One posterior draw of the global chains given precomputed encoder states.
ChainSample sample_chain(const ParameterStore& store, const ModelHyperParams& hyper,
                         const EncoderStates& enc, const NoiseSource& noise, uint64_t draw) {
    ChainSample out;
    const int T = static_cast<int>(enc.h_xi.size());
    Tensor xi_prev = Tensor::zeros(1, hyper.dim_xi);
    Tensor eta_prev = Tensor::zeros(1, hyper.dim_eta);
    for (int t = 0; t < T; ++t) {
        const auto tu = static_cast<uint64_t>(t);
        GaussianParams qx = posterior_xi(store, hyper, xi_prev, enc.h_xi[static_cast<size_t>(t)]);
        Tensor xi = reparam_gaussian(qx.mean, qx.variance(),
                                     noise.normal_row(NoiseSource::kXi, draw, tu, 0, hyper.dim_xi));
        GaussianParams qe = posterior_eta(store, hyper, eta_prev, enc.h_eta[static_cast<size_t>(t)]);
        Tensor eta = reparam_gaussian(qe.mean, qe.variance(),
                                      noise.normal_row(NoiseSource::kEta, draw, tu, 0, hyper.dim_eta));
        out.xi.push_back(xi);
        out.eta.push_back(eta);
        xi_prev = std::move(xi);
        eta_prev = std::move(eta);
    }
    return out;
}

// Hard mask + proportions for one document under one chain draw.
struct DocDraw {
    Tensor b;
    Tensor theta;
};
DocDraw infer_doc_draw(const ParameterStore& store, const ModelHyperParams& hyper,
                       const Tensor& w_norm, const Tensor& xi_t, const Tensor& eta_t,
                       const NoiseSource& noise, uint64_t draw, uint64_t t, uint64_t d,
                       long* degenerate) {
    DocDraw out;
    GaussianParams qz = posterior_zeta(store, hyper, w_norm, eta_t);
    Tensor zeta = reparam_gaussian(qz.mean, qz.variance(),
                                   noise.normal_row(NoiseSource::kZeta, draw, t, d, hyper.K));
    if (hyper.coupled) {
        out.b = Tensor::full(1, hyper.K, real(1));
    } else {
        BernoulliPosterior qb = posterior_b(store, hyper, w_norm, xi_t);
        out.b = hard_bernoulli(qb.q, noise.uniform_row(NoiseSource::kMask, draw, t, d, hyper.K));
    }
    out.theta = topic_proportions_hard(out.b, zeta, degenerate);
    return out;
}

real log_mean_exp(const std::vector<real>& xs) {
    real m = -std::numeric_limits<real>::infinity();
    for (real x : xs) m = std::max(m, x);
    if (!std::isfinite(m)) return m;
    real s = real(0);
    for (real x : xs) s += std::exp(x - m);
    return m + std::log(s / static_cast<real>(xs.size()));
}

}  // namespace

PplResult ppl_document_completion(const ParameterStore& store, const ModelHyperParams& hyper,
                                  const CorpusSequence& corpus, const SplitSpec& split,
                                  const MetricOptions& opt) {
    if (opt.posterior_samples < 1) throw ConfigError("ppl: posterior_samples must be >= 1");
    PplResult res;
    const Tensor beta = topic_word_matrix(store, hyper);
    const EncoderStates enc = encode_sequence(store, hyper, corpus.slice_bow_matrix());
    NoiseSource noise(opt.seed, 0xdc01);

    struct Prepared {
        int t, d;
        Tensor w1_norm;
        std::vector<std::pair<int, int>> second;
        long second_total;
    };
    std::vector<Prepared> docs;
    for (int t = 0; t < corpus.num_slices(); ++t) {
        for (size_t d = 0; d < corpus.slices[static_cast<size_t>(t)].size(); ++d) {
            if (split.assignment[static_cast<size_t>(t)][d] != opt.doc_split) continue;
            const auto& doc = corpus.slices[static_cast<size_t>(t)][d];
            auto halves = completion_halves(doc, split.completion_seed);
            if (!halves) {
                ++res.excluded;
                continue;
            }
            Prepared p;
            p.t = t;
            p.d = static_cast<int>(d);
            Tensor w(1, corpus.vocab_size());
            const real inv = real(1) / static_cast<real>(halves->first_total);
            for (const auto& [id, c] : halves->first) w.d[static_cast<size_t>(id)] = static_cast<real>(c) * inv;
            p.w1_norm = std::move(w);
            p.second = std::move(halves->second);
            p.second_total = halves->second_total;
            docs.push_back(std::move(p));
        }
    }
    if (docs.empty()) throw InputError("ppl: no evaluable documents in the requested split");

    std::vector<real> ll_sum(docs.size(), real(0));
    for (int s = 0; s < opt.posterior_samples; ++s) {
        const ChainSample chain = sample_chain(store, hyper, enc, noise, static_cast<uint64_t>(s));
        for (size_t i = 0; i < docs.size(); ++i) {
            const auto& p = docs[i];
            DocDraw dd = infer_doc_draw(store, hyper, p.w1_norm, chain.xi[static_cast<size_t>(p.t)],
                                        chain.eta[static_cast<size_t>(p.t)], noise,
                                        static_cast<uint64_t>(s), static_cast<uint64_t>(p.t),
                                        static_cast<uint64_t>(p.d), &res.degenerate_masks);
            ll_sum[i] += doc_loglikelihood(dd.theta, beta, p.second, &res.guard_events);
        }
    }

    real total_ll = real(0);
    long total_tokens = 0;
    for (size_t i = 0; i < docs.size(); ++i) {
        total_ll += ll_sum[i] / static_cast<real>(opt.posterior_samples);
        total_tokens += docs[i].second_total;
    }
    res.ppl = std::exp(-total_ll / static_cast<real>(total_tokens));
    return res;
}

real predictive_nll(const ParameterStore& store, const ModelHyperParams& hyper,
                    const CorpusSequence& corpus, const SplitSpec& split,
                    const MetricOptions& opt) {
    if (opt.pnll_particles < 1) throw ConfigError("pnll: particle count must be >= 1");
    if (opt.pnll_horizon < 1) throw ConfigError("pnll: horizon must be >= 1");
    const int T = corpus.num_slices();
    const int prefix_T = T - opt.pnll_horizon;
    if (prefix_T < 1) throw ConfigError("pnll: horizon leaves no encoder prefix");
    const int target = T - 1;

    std::vector<const TimeStampedDocument*> targets;
    std::vector<uint64_t> target_ids;
    for (size_t d = 0; d < corpus.slices[static_cast<size_t>(target)].size(); ++d) {
        if (split.assignment[static_cast<size_t>(target)][d] == opt.doc_split) {
            targets.push_back(&corpus.slices[static_cast<size_t>(target)][d]);
            target_ids.push_back(static_cast<uint64_t>(d));
        }
    }
    if (targets.empty()) throw InputError("pnll: no held-out documents in the target slice");

    Tensor prefix_bow(prefix_T, corpus.vocab_size());
    for (int t = 0; t < prefix_T; ++t) {
        std::copy(corpus.slice_bow[static_cast<size_t>(t)].d.begin(),
                  corpus.slice_bow[static_cast<size_t>(t)].d.end(), prefix_bow.row_ptr(t));
    }
    const EncoderStates enc = encode_sequence(store, hyper, prefix_bow);
    const Tensor beta = topic_word_matrix(store, hyper);
    NoiseSource noise(opt.seed, 0xf0fe);
    const real sqrt_delta = std::sqrt(hyper.delta);

    std::vector<std::vector<real>> doc_lls(targets.size());
    for (int s = 0; s < opt.pnll_particles; ++s) {
        const auto su = static_cast<uint64_t>(s);
        const ChainSample chain = sample_chain(store, hyper, enc, noise, su);
        Tensor xi = chain.xi.back();
        Tensor eta = chain.eta.back();
        for (int j = 0; j < opt.pnll_horizon; ++j) {
            const auto tu = static_cast<uint64_t>(prefix_T + j);
            Tensor xi_mean = transition_mean(store, hyper, "xi", xi);
            Tensor xi_noise = noise.normal_row(NoiseSource::kXi, su, tu, 1, hyper.dim_xi);
            for (int i = 0; i < hyper.dim_xi; ++i) {
                xi.d[static_cast<size_t>(i)] = xi_mean.d[static_cast<size_t>(i)] +
                                               sqrt_delta * xi_noise.d[static_cast<size_t>(i)];
            }
            Tensor eta_mean = transition_mean(store, hyper, "eta", eta);
            Tensor eta_noise = noise.normal_row(NoiseSource::kEta, su, tu, 1, hyper.dim_eta);
            for (int i = 0; i < hyper.dim_eta; ++i) {
                eta.d[static_cast<size_t>(i)] = eta_mean.d[static_cast<size_t>(i)] +
                                                sqrt_delta * eta_noise.d[static_cast<size_t>(i)];
            }
        }
        const Tensor pi = activity_probs(store, hyper, xi);
        const Tensor zeta_mean = zeta_prior_mean(store, hyper, eta);
        for (size_t i = 0; i < targets.size(); ++i) {
            const auto tu = static_cast<uint64_t>(target);
            Tensor b = hyper.coupled
                           ? Tensor::full(1, hyper.K, real(1))
                           : hard_bernoulli(pi, noise.uniform_row(NoiseSource::kMask, su, tu,
                                                                  target_ids[i], hyper.K));
            Tensor zn = noise.normal_row(NoiseSource::kZeta, su, tu, target_ids[i], hyper.K);
            Tensor zeta = zeta_mean;
            for (size_t k = 0; k < zeta.d.size(); ++k) zeta.d[k] += zn.d[k];
            Tensor theta = topic_proportions_hard(b, zeta, nullptr);
            doc_lls[i].push_back(doc_loglikelihood(theta, beta, targets[i]->counts, nullptr));
        }
    }

    real total = real(0);
    long tokens = 0;
    for (size_t i = 0; i < targets.size(); ++i) {
        total += log_mean_exp(doc_lls[i]);
        tokens += targets[i]->token_total;
    }
    return -total / static_cast<real>(tokens);
}

CooccurrenceStats build_cooccurrence(const CorpusSequence& corpus, const SplitSpec& split,
                                     const std::vector<int>& words) {
    CooccurrenceStats stats;
    std::vector<int> sorted = words;
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
    for (int t = 0; t < corpus.num_slices(); ++t) {
        for (size_t d = 0; d < corpus.slices[static_cast<size_t>(t)].size(); ++d) {
            if (split.assignment[static_cast<size_t>(t)][d] != Split::Train) continue;
            ++stats.D;
            const auto& counts = corpus.slices[static_cast<size_t>(t)][d].counts;
            std::vector<int> present;
            for (int w : sorted) {
                const auto it = std::lower_bound(
                    counts.begin(), counts.end(), w,
                    [](const std::pair<int, int>& p, int key) { return p.first < key; });
                if (it != counts.end() && it->first == w) present.push_back(w);
            }
            for (size_t i = 0; i < present.size(); ++i) {
                ++stats.df[present[i]];
                for (size_t j = i + 1; j < present.size(); ++j) {
                    ++stats.joint[{present[i], present[j]}];
                }
            }
        }
    }
    return stats;
}

real npmi(const CooccurrenceStats& stats, int w1, int w2) {
    if (stats.D <= 0) throw InputError("npmi: empty co-occurrence statistics");
    const auto key = std::make_pair(std::min(w1, w2), std::max(w1, w2));
    const auto it = stats.joint.find(key);
    const long joint = it == stats.joint.end() ? 0 : it->second;
    if (joint == 0) return real(-1);  // never co-occurring
    const real D = static_cast<real>(stats.D);
    const real eps = real(1) / D;
    const real denom = D + real(2) * eps;
    auto df_of = [&](int w) {
        const auto f = stats.df.find(w);
        return f == stats.df.end() ? 0L : f->second;
    };
    const real pj = (static_cast<real>(joint) + eps) / denom;
    const real p1 = (static_cast<real>(df_of(w1)) + eps) / denom;
    const real p2 = (static_cast<real>(df_of(w2)) + eps) / denom;
    return std::log(pj / (p1 * p2)) / (-std::log(pj));
}

std::vector<std::vector<int>> top_word_ids(const Tensor& beta, int n) {
    if (n > beta.c) throw ConfigError("top words: n exceeds vocabulary size");
    std::vector<std::vector<int>> out;
    out.reserve(static_cast<size_t>(beta.r));
    for (int k = 0; k < beta.r; ++k) {
        std::vector<int> ids(static_cast<size_t>(beta.c));
        std::iota(ids.begin(), ids.end(), 0);
        const real* row = beta.row_ptr(k);
        std::sort(ids.begin(), ids.end(), [row](int a, int b) {
            if (row[a] != row[b]) return row[a] > row[b];
            return a < b;  // ties broken by word id ascending
        });
        ids.resize(static_cast<size_t>(n));
        out.push_back(std::move(ids));
    }
    return out;
}

real topic_coherence(const Tensor& beta, const CooccurrenceStats& stats, int top_n) {
    const auto tops = top_word_ids(beta, top_n);
    real topic_sum = real(0);
    for (const auto& words : tops) {
        real pair_sum = real(0);
        long pairs = 0;
        for (size_t i = 0; i < words.size(); ++i) {
            for (size_t j = i + 1; j < words.size(); ++j) {
                pair_sum += npmi(stats, words[i], words[j]);
                ++pairs;
            }
        }
        topic_sum += pairs > 0 ? pair_sum / static_cast<real>(pairs) : real(0);
    }
    return topic_sum / static_cast<real>(tops.size());
}

real topic_diversity(const Tensor& beta, int top_n) {
    if (beta.c < top_n) throw ConfigError("topic_diversity: vocabulary smaller than top_n");
    const auto tops = top_word_ids(beta, top_n);
    std::set<int> unique;
    for (const auto& words : tops) unique.insert(words.begin(), words.end());
    return static_cast<real>(unique.size()) /
           (static_cast<real>(top_n) * static_cast<real>(beta.r));
}

std::vector<std::vector<std::pair<std::string, real>>> top_words(const Tensor& beta,
                                                                 const Vocabulary& vocab, int n) {
    const auto tops = top_word_ids(beta, n);
    std::vector<std::vector<std::pair<std::string, real>>> out;
    for (int k = 0; k < beta.r; ++k) {
        std::vector<std::pair<std::string, real>> list;
        for (int id : tops[static_cast<size_t>(k)]) {
            list.emplace_back(vocab.token_of(id), beta.at(k, id));
        }
        out.push_back(std::move(list));
    }
    return out;
}

real topic_entropy(const Tensor& theta_row) {
    real h = real(0);
    for (real p : theta_row.d) {
        if (p > real(0)) h -= p * std::log(p);
    }
    return h;
}

SeriesResult infer_series(const ParameterStore& store, const ModelHyperParams& hyper,
                          const CorpusSequence& corpus, const SplitSpec& split,
                          const MetricOptions& opt) {
    if (opt.posterior_samples < 1) throw ConfigError("series: posterior_samples must be >= 1");
    SeriesResult res;
    const int T = corpus.num_slices();
    res.activity = Tensor::zeros(T, hyper.K);
    res.entropy.assign(static_cast<size_t>(T), SeriesPoint{});

    const EncoderStates enc = encode_sequence(store, hyper, corpus.slice_bow_matrix());
    NoiseSource noise(opt.seed, 0x5e71);

    std::vector<ChainSample> chains;
    for (int s = 0; s < opt.posterior_samples; ++s) {
        chains.push_back(sample_chain(store, hyper, enc, noise, static_cast<uint64_t>(s)));
    }

    real pooled_entropy = real(0);
    long pooled_docs = 0;
    for (int t = 0; t < T; ++t) {
        std::vector<real> doc_entropy;
        Tensor act_sum(1, hyper.K);
        long draws = 0;
        for (size_t d = 0; d < corpus.slices[static_cast<size_t>(t)].size(); ++d) {
            if (split.assignment[static_cast<size_t>(t)][d] != opt.doc_split) continue;
            const auto& doc = corpus.slices[static_cast<size_t>(t)][d];
            const Tensor w_norm = doc.normalized_bow(corpus.vocab_size());
            real h_sum = real(0);
            for (int s = 0; s < opt.posterior_samples; ++s) {
                DocDraw dd = infer_doc_draw(store, hyper, w_norm,
                                            chains[static_cast<size_t>(s)].xi[static_cast<size_t>(t)],
                                            chains[static_cast<size_t>(s)].eta[static_cast<size_t>(t)],
                                            noise, static_cast<uint64_t>(s), static_cast<uint64_t>(t),
                                            static_cast<uint64_t>(d), &res.degenerate_masks);
                h_sum += topic_entropy(dd.theta);
                for (int k = 0; k < hyper.K; ++k) act_sum.d[static_cast<size_t>(k)] += dd.b.d[static_cast<size_t>(k)];
                ++draws;
            }
            doc_entropy.push_back(h_sum / static_cast<real>(opt.posterior_samples));
        }
        if (!doc_entropy.empty()) {
            real mean = real(0);
            for (real h : doc_entropy) mean += h;
            mean /= static_cast<real>(doc_entropy.size());
            real var = real(0);
            for (real h : doc_entropy) var += (h - mean) * (h - mean);
            var /= static_cast<real>(doc_entropy.size());
            res.entropy[static_cast<size_t>(t)] = {mean, std::sqrt(var),
                                                   static_cast<long>(doc_entropy.size())};
            for (real h : doc_entropy) pooled_entropy += h;
            pooled_docs += static_cast<long>(doc_entropy.size());
            for (int k = 0; k < hyper.K; ++k) {
                res.activity.at(t, k) = act_sum.d[static_cast<size_t>(k)] / static_cast<real>(draws);
            }
        }
    }
    res.mean_entropy = pooled_docs > 0 ? pooled_entropy / static_cast<real>(pooled_docs) : real(0);
    return res;
}

MetricReport compute_metrics(const ParameterStore& store, const ModelHyperParams& hyper,
                             const CorpusSequence& corpus, const SplitSpec& split,
                             const MetricOptions& opt, const MetricSelection& sel) {
    MetricReport report;
    report.computed = sel;
    const Tensor beta = topic_word_matrix(store, hyper);

    if (sel.ppl) {
        PplResult ppl = ppl_document_completion(store, hyper, corpus, split, opt);
        report.ppl_dc = ppl.ppl;
        report.completion_excluded = ppl.excluded;
        report.degenerate_masks += ppl.degenerate_masks;
        report.guard_events += ppl.guard_events;
    }
    if (sel.pnll) report.p_nll = predictive_nll(store, hyper, corpus, split, opt);
    if (sel.tc) {
        std::vector<int> words;
        for (const auto& topic : top_word_ids(beta, std::min(opt.tc_top_n, beta.c))) {
            words.insert(words.end(), topic.begin(), topic.end());
        }
        const CooccurrenceStats stats = build_cooccurrence(corpus, split, words);
        report.tc = topic_coherence(beta, stats, std::min(opt.tc_top_n, beta.c));
    }
    if (sel.td) report.td = topic_diversity(beta, std::min(opt.td_top_n, beta.c));
    if (sel.series) {
        SeriesResult series = infer_series(store, hyper, corpus, split, opt);
        report.entropy_series = std::move(series.entropy);
        report.activity_series = std::move(series.activity);
        report.degenerate_masks += series.degenerate_masks;
    }
    if (sel.topwords) {
        report.top_words = top_words(beta, corpus.vocabulary, std::min(opt.td_top_n, beta.c));
    }
    return report;
}

std::string report_to_json(const MetricReport& report) {
    json j;
    j["format"] = "ndftm-metric-report";
    j["version"] = 1;
    if (report.computed.ppl) j["ppl_dc"] = report.ppl_dc;
    if (report.computed.pnll) j["p_nll"] = report.p_nll;
    if (report.computed.tc) j["tc"] = report.tc;
    if (report.computed.td) j["td"] = report.td;
    if (report.computed.series) {
        json ent = json::array();
        for (size_t t = 0; t < report.entropy_series.size(); ++t) {
            const auto& p = report.entropy_series[t];
            ent.push_back({{"t", t}, {"mean", p.mean}, {"std", p.std_dev}, {"docs", p.docs}});
        }
        j["entropy_series"] = std::move(ent);
        json act = json::array();
        for (int t = 0; t < report.activity_series.r; ++t) {
            act.push_back(std::vector<real>(report.activity_series.row_ptr(t),
                                            report.activity_series.row_ptr(t) +
                                                report.activity_series.c));
        }
        j["activity_series"] = std::move(act);
    }
    if (report.computed.topwords) {
        json tw = json::array();
        for (const auto& topic : report.top_words) {
            json list = json::array();
            for (const auto& [word, weight] : topic) {
                list.push_back({{"word", word}, {"weight", weight}});
            }
            tw.push_back(std::move(list));
        }
        j["top_words"] = std::move(tw);
    }
    j["completion_excluded"] = report.completion_excluded;
    j["degenerate_masks"] = report.degenerate_masks;
    j["guard_events"] = report.guard_events;
    return j.dump(2);
}

std::string entropy_series_csv(const MetricReport& report) {
    std::ostringstream os;
    os << "t,statistic,value\n";
    for (size_t t = 0; t < report.entropy_series.size(); ++t) {
        os << t << ",mean," << report.entropy_series[t].mean << "\n";
        os << t << ",std," << report.entropy_series[t].std_dev << "\n";
    }
    return os.str();
}

std::string activity_series_csv(const MetricReport& report) {
    std::ostringstream os;
    os << "t,topic,value\n";
    for (int t = 0; t < report.activity_series.r; ++t) {
        for (int k = 0; k < report.activity_series.c; ++k) {
            os << t << "," << k << "," << report.activity_series.at(t, k) << "\n";
        }
    }
    return os.str();
}

}  // namespace ndftm
