#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "ndftm/kernels.hpp"
#include "ndftm/model.hpp"

using namespace ndftm;

namespace {

ModelHyperParams small_hyper(int k = 4, int v = 10) {
    ModelHyperParams h;
    h.K = k;
    h.V = v;
    h.E = 6;
    h.dim_xi = 3;
    h.dim_eta = 3;
    h.transition_hidden = 5;
    h.lstm_hidden = 8;
    h.posterior_hidden = 8;
    return h;
}

ParameterStore make_store(const ModelHyperParams& hyper, uint64_t seed = 1) {
    ParameterStore store;
    Rng rng(seed);
    GenerativeParams{hyper}.create(store, rng);
    return store;
}

}  // namespace

TEST_CASE("prior transition mean") {
    SUBCASE("linear mode is the identity") {
        ModelHyperParams hyper = small_hyper();
        hyper.linear_transition = true;
        ParameterStore store = make_store(hyper);
        Rng rng(5);
        Tensor v = Tensor::randn(1, hyper.dim_xi, rng);
        CHECK(bit_equal(transition_mean(store, hyper, "xi", v), v));
        CHECK(bit_equal(transition_mean(store, hyper, "eta", v), v));
    }
    SUBCASE("zero weights and zero input degenerate to the output bias") {
        ModelHyperParams hyper = small_hyper();
        ParameterStore store = make_store(hyper);
        for (const char* part : {"w1", "w2", "b1"}) {
            Tensor& t = store.mutate(transition_slot("xi", part));
            std::fill(t.d.begin(), t.d.end(), real(0));
        }
        Tensor& b2 = store.mutate(transition_slot("xi", "b2"));
        b2.d = {real(0.3), real(-0.2), real(0.7)};
        Tensor mean = transition_mean(store, hyper, "xi", Tensor::zeros(1, hyper.dim_xi));
        for (int i = 0; i < 3; ++i) CHECK(mean.d[static_cast<size_t>(i)] == doctest::Approx(b2.d[static_cast<size_t>(i)]));
    }
}

TEST_CASE("activity probabilities") {
    ModelHyperParams hyper = small_hyper();
    hyper.alpha0 = real(0.5);
    ParameterStore store = make_store(hyper);

    SUBCASE("zero logits give alpha0/2 everywhere") {
        Tensor& w = store.mutate(GenerativeParams::kWxi);
        std::fill(w.d.begin(), w.d.end(), real(0));
        Tensor pi = activity_probs(store, hyper, Tensor::zeros(1, hyper.dim_xi));
        for (real p : pi.d) CHECK(p == doctest::Approx(0.25).epsilon(1e-12));
    }
    SUBCASE("strictly inside (0, alpha0) for random states") {
        Rng rng(3);
        for (int it = 0; it < 20; ++it) {
            Tensor xi = Tensor::randn(1, hyper.dim_xi, rng, real(3));
            Tensor pi = activity_probs(store, hyper, xi);
            for (real p : pi.d) {
                CHECK(p > real(0));
                CHECK(p < hyper.alpha0);
            }
        }
    }
    SUBCASE("saturation towards alpha0 at logit 30") {
        Tensor& w = store.mutate(GenerativeParams::kWxi);
        std::fill(w.d.begin(), w.d.end(), real(0));
        Tensor& c = store.mutate(GenerativeParams::kCxi);
        std::fill(c.d.begin(), c.d.end(), real(30));
        Tensor pi = activity_probs(store, hyper, Tensor::zeros(1, hyper.dim_xi));
        for (real p : pi.d) CHECK(std::abs(p - hyper.alpha0) < real(1e-9));
    }
}

TEST_CASE("local zeta prior") {
    ModelHyperParams hyper = small_hyper();
    ParameterStore store = make_store(hyper);
    SUBCASE("zero state gives the bias") {
        Tensor& c = store.mutate(GenerativeParams::kCzeta);
        Rng rng(9);
        c = Tensor::randn(1, hyper.K, rng);
        Tensor mean = zeta_prior_mean(store, hyper, Tensor::zeros(1, hyper.dim_eta));
        CHECK(bit_equal(mean, c));
    }
    SUBCASE("zero read-out makes the prior independent of eta") {
        Tensor& w = store.mutate(GenerativeParams::kWzeta);
        std::fill(w.d.begin(), w.d.end(), real(0));
        Rng rng(11);
        Tensor m1 = zeta_prior_mean(store, hyper, Tensor::randn(1, hyper.dim_eta, rng));
        Tensor m2 = zeta_prior_mean(store, hyper, Tensor::randn(1, hyper.dim_eta, rng));
        CHECK(bit_equal(m1, m2));
    }
}

TEST_CASE("topic proportions") {
    SUBCASE("all-ones mask with constant zeta is uniform") {
        const int k = 5;
        Tensor b = Tensor::full(1, k, real(1));
        Tensor zeta = Tensor::full(1, k, real(1.7));
        Tensor theta = topic_proportions_hard(b, zeta);
        for (real p : theta.d) CHECK(p == doctest::Approx(0.2).epsilon(1e-12));
    }
    SUBCASE("one-hot mask concentrates all mass") {
        Rng rng(1);
        Tensor b = Tensor::zeros(1, 6);
        b.d[2] = real(1);
        Tensor zeta = Tensor::randn(1, 6, rng, real(5));
        Tensor theta = topic_proportions_hard(b, zeta);
        CHECK(theta.d[2] == doctest::Approx(1.0).epsilon(1e-12));
        for (int j = 0; j < 6; ++j) {
            if (j != 2) CHECK(theta.d[static_cast<size_t>(j)] == real(0));
        }
    }
    SUBCASE("closed form with a large masked-out component") {
        Tensor b = Tensor::row({1, 0, 1});
        Tensor zeta = Tensor::row({0, 99, std::log(real(3))});
        Tensor theta = topic_proportions_hard(b, zeta);
        CHECK(theta.d[0] == doctest::Approx(0.25).epsilon(1e-12));
        CHECK(theta.d[1] == real(0));
        CHECK(theta.d[2] == doctest::Approx(0.75).epsilon(1e-12));
    }
    SUBCASE("shifting zeta by a constant leaves theta unchanged") {
        Rng rng(17);
        for (int it = 0; it < 30; ++it) {
            const int k = 8;
            Tensor b(1, k);
            for (auto& v : b.d) v = rng.uniform() < 0.5 ? real(0) : real(1);
            Tensor zeta = Tensor::randn(1, k, rng, real(2));
            const real c = real(-4) + real(8) * static_cast<real>(rng.uniform());
            Tensor shifted = zeta;
            for (auto& v : shifted.d) v += c;
            Tensor t1 = topic_proportions_hard(b, zeta);
            Tensor t2 = topic_proportions_hard(b, shifted);
            for (int j = 0; j < k; ++j) {
                CHECK(std::abs(t1.d[static_cast<size_t>(j)] - t2.d[static_cast<size_t>(j)]) < real(1e-9));
            }
        }
    }
    SUBCASE("hard support never exceeds the mask support; simplex sum holds") {
        Rng rng(23);
        for (int it = 0; it < 50; ++it) {
            const int k = 7;
            Tensor b(1, k);
            for (auto& v : b.d) v = rng.uniform() < 0.4 ? real(1) : real(0);
            Tensor zeta = Tensor::randn(1, k, rng, real(3));
            long degenerate = 0;
            Tensor theta = topic_proportions_hard(b, zeta, &degenerate);
            real sum = 0;
            for (int j = 0; j < k; ++j) {
                sum += theta.d[static_cast<size_t>(j)];
                if (b.d[static_cast<size_t>(j)] == real(0) && degenerate == 0) {
                    CHECK(theta.d[static_cast<size_t>(j)] == real(0));
                }
            }
            CHECK(std::abs(sum - real(1)) < real(1e-6));
        }
    }
    SUBCASE("relaxed masks keep theta on the simplex") {
        Rng rng(29);
        for (int it = 0; it < 30; ++it) {
            const int k = 9;
            Tensor b(1, k);
            for (auto& v : b.d) v = static_cast<real>(rng.uniform());
            Tensor zeta = Tensor::randn(1, k, rng, real(2));
            Tensor theta = topic_proportions_relaxed(b, zeta);
            real sum = 0;
            for (real p : theta.d) {
                CHECK(p >= real(0));
                sum += p;
            }
            CHECK(std::abs(sum - real(1)) < real(1e-6));
        }
    }
    SUBCASE("an all-ones mask reproduces the plain softmax") {
        Rng rng(31);
        Tensor b = Tensor::full(1, 10, real(1));
        Tensor zeta = Tensor::randn(1, 10, rng, real(4));
        Tensor theta = topic_proportions_hard(b, zeta);
        Tensor sm(1, 10);
        kernels::softmax_rows(zeta, sm);
        for (int j = 0; j < 10; ++j) {
            CHECK(std::abs(theta.d[static_cast<size_t>(j)] - sm.d[static_cast<size_t>(j)]) < real(1e-12));
        }
    }
    SUBCASE("all-zero mask falls back to uniform and is counted") {
        Tensor b = Tensor::zeros(1, 4);
        Tensor zeta = Tensor::row({1, 2, 3, 4});
        long degenerate = 0;
        Tensor theta = topic_proportions_hard(b, zeta, &degenerate);
        CHECK(degenerate == 1);
        for (real p : theta.d) CHECK(p == doctest::Approx(0.25));
    }
}

TEST_CASE("topic-word matrix") {
    ModelHyperParams hyper = small_hyper(5, 12);
    ParameterStore store = make_store(hyper);
    SUBCASE("zero embeddings give uniform rows") {
        Tensor& alpha = store.mutate(GenerativeParams::kAlpha);
        std::fill(alpha.d.begin(), alpha.d.end(), real(0));
        Tensor beta = topic_word_matrix(store, hyper);
        for (real p : beta.d) CHECK(p == doctest::Approx(1.0 / 12).epsilon(1e-12));
    }
    SUBCASE("rows sum to one for random embeddings") {
        Tensor beta = topic_word_matrix(store, hyper);
        for (int k = 0; k < beta.r; ++k) {
            real sum = 0;
            for (int v = 0; v < beta.c; ++v) sum += beta.at(k, v);
            CHECK(std::abs(sum - real(1)) < real(1e-12));
        }
    }
}

TEST_CASE("document log-likelihood") {
    SUBCASE("uniform mixture gives n log(1/V)") {
        const int k = 3, v = 10;
        Tensor theta = Tensor::full(1, k, real(1) / k);
        Tensor beta = Tensor::full(k, v, real(1) / v);
        std::vector<std::pair<int, int>> counts{{0, 2}, {4, 3}, {9, 1}};
        long guard = 0;
        const real ll = doc_loglikelihood(theta, beta, counts, &guard);
        CHECK(ll == doctest::Approx(6.0 * std::log(real(1) / v)).epsilon(1e-12));
        CHECK(guard == 0);
    }
    SUBCASE("one-hot proportions reduce to a single topic's row") {
        Rng rng(5);
        const int k = 4, v = 8;
        ModelHyperParams hyper = small_hyper(k, v);
        Tensor beta = topic_word_matrix(make_store(hyper, 3), hyper);
        Tensor theta = Tensor::zeros(1, k);
        theta.d[1] = real(1);
        std::vector<std::pair<int, int>> counts{{0, 1}, {3, 2}, {7, 4}};
        real expected = 0;
        for (const auto& [w, c] : counts) expected += c * std::log(beta.at(1, w));
        CHECK(doc_loglikelihood(theta, beta, counts) == doctest::Approx(expected).epsilon(1e-12));
        (void)rng;
    }
    SUBCASE("matches the z-marginalization Monte Carlo oracle within 3 standard errors") {
        const int k = 3, v = 10;
        ModelHyperParams hyper = small_hyper(k, v);
        ParameterStore store = make_store(hyper, 77);
        Tensor beta = topic_word_matrix(store, hyper);
        Tensor theta = Tensor::row({real(0.2), real(0.5), real(0.3)});
        std::vector<std::pair<int, int>> counts{{1, 3}, {4, 1}, {6, 2}, {9, 5}};

        const long m = 100000;
        Rng rng(4242);
        real mc_ll = 0;
        real mc_var = 0;
        for (const auto& [word, c] : counts) {
            // independent z draws per distinct word
            real mean = 0, m2 = 0;
            for (long i = 1; i <= m; ++i) {
                const double u = rng.uniform();
                int z = k - 1;
                double acc = 0;
                for (int j = 0; j < k; ++j) {
                    acc += static_cast<double>(theta.d[static_cast<size_t>(j)]);
                    if (u <= acc) {
                        z = j;
                        break;
                    }
                }
                const real x = beta.at(z, word);
                const real delta = x - mean;
                mean += delta / static_cast<real>(i);
                m2 += delta * (x - mean);
            }
            const real se = std::sqrt(m2 / static_cast<real>(m - 1) / static_cast<real>(m));
            mc_ll += c * std::log(mean);
            const real log_se = c * se / mean;  // delta method
            mc_var += log_se * log_se;
        }
        const real exact = doc_loglikelihood(theta, beta, counts);
        CHECK(std::abs(exact - mc_ll) < 3 * std::sqrt(mc_var));
    }
    SUBCASE("the mixture floor never fires on well-formed inputs") {
        Rng rng(6);
        const int k = 5, v = 20;
        ModelHyperParams hyper = small_hyper(k, v);
        Tensor beta = topic_word_matrix(make_store(hyper, 8), hyper);
        long guard = 0;
        for (int it = 0; it < 100; ++it) {
            Tensor mask(1, k);
            bool any = false;
            for (auto& b : mask.d) {
                b = rng.uniform() < 0.5 ? real(1) : real(0);
                any = any || b > 0;
            }
            if (!any) mask.d[0] = real(1);
            Tensor theta = topic_proportions_hard(mask, Tensor::randn(1, k, rng, real(2)));
            std::vector<std::pair<int, int>> counts{{static_cast<int>(rng.below(v)), 2}};
            doc_loglikelihood(theta, beta, counts, &guard);
        }
        CHECK(guard == 0);
    }
}

TEST_CASE("sample_corpus") {
    ModelHyperParams hyper = small_hyper(8, 30);
    hyper.alpha0 = real(0.9);

    SUBCASE("same seed gives identical corpora and ground truth") {
        ParameterStore store = make_synth_params(hyper, {}, 5);
        auto a = sample_corpus(hyper, store, 4, 20, 25, 99);
        auto b = sample_corpus(hyper, store, 4, 20, 25, 99);
        SplitSpec all;
        all.assignment.resize(a.corpus.slices.size());
        for (size_t t = 0; t < a.corpus.slices.size(); ++t) {
            all.assignment[t].assign(a.corpus.slices[t].size(), Split::Train);
        }
        CHECK(bundle_to_json(a.corpus, all) == bundle_to_json(b.corpus, all));
        CHECK(ground_truth_to_json(a.truth) == ground_truth_to_json(b.truth));
        auto c = sample_corpus(hyper, store, 4, 20, 25, 100);
        CHECK(bundle_to_json(a.corpus, all) != bundle_to_json(c.corpus, all));
    }

    SUBCASE("empirical mask frequency matches pi within 3 sigma") {
        // High activity keeps the all-zero-resample bias negligible.
        ParameterStore store;
        Rng rng(21);
        GenerativeParams{hyper}.create(store, rng);
        Tensor& w = store.mutate(GenerativeParams::kWxi);
        std::fill(w.d.begin(), w.d.end(), real(0));
        Tensor& c = store.mutate(GenerativeParams::kCxi);
        std::fill(c.d.begin(), c.d.end(), real(1));  // pi = 0.9 * sigmoid(1) everywhere
        const int docs = 400, T = 3;
        auto sampled = sample_corpus(hyper, store, T, docs, 20, 7);
        const real pi = hyper.alpha0 * kernels::sigmoid(real(1));
        const real sigma = std::sqrt(pi * (1 - pi) / static_cast<real>(docs));
        for (int t = 0; t < T; ++t) {
            for (int k = 0; k < hyper.K; ++k) {
                real freq = 0;
                for (int d = 0; d < docs; ++d) {
                    freq += sampled.truth.b[static_cast<size_t>(t)][static_cast<size_t>(d)][static_cast<size_t>(k)];
                }
                freq /= static_cast<real>(docs);
                CHECK(std::abs(freq - pi) < 3 * sigma + real(1e-3));
            }
        }
    }

    SUBCASE("saturated activity reduces to the coupled model") {
        ParameterStore store;
        Rng rng(31);
        ModelHyperParams full = hyper;
        full.alpha0 = real(1);
        GenerativeParams{full}.create(store, rng);
        Tensor& w = store.mutate(GenerativeParams::kWxi);
        std::fill(w.d.begin(), w.d.end(), real(0));
        Tensor& c = store.mutate(GenerativeParams::kCxi);
        std::fill(c.d.begin(), c.d.end(), real(30));
        auto sampled = sample_corpus(full, store, 3, 50, 15, 3);
        for (const auto& slice : sampled.truth.b) {
            for (const auto& mask : slice) {
                for (uint8_t b : mask) CHECK(b == 1);
            }
        }
    }

    SUBCASE("ground-truth sidecar round-trips") {
        ParameterStore store = make_synth_params(hyper, {}, 5);
        auto sampled = sample_corpus(hyper, store, 3, 5, 12, 1);
        const auto path = std::filesystem::temp_directory_path() / "ndftm_truth_test.json";
        save_ground_truth(path.string(), sampled.truth);
        LatentTrajectory loaded = load_ground_truth(path.string());
        CHECK(loaded.b == sampled.truth.b);
        CHECK(bit_equal(loaded.pi, sampled.truth.pi));
        std::filesystem::remove(path);
    }
}

TEST_CASE("hyperparameter validation") {
    ModelHyperParams h = small_hyper();
    h.validate();
    ModelHyperParams bad = h;
    bad.K = 1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = h;
    bad.alpha0 = real(0);
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = h;
    bad.alpha0 = real(1.2);
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = h;
    bad.delta = real(0);
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = h;
    bad.tau = real(-1);
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}
