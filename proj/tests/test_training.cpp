#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "ndftm/trainer.hpp"

using namespace ndftm;

namespace {

ModelHyperParams learn_hyper() {
    ModelHyperParams h;
    h.K = 4;
    h.V = 40;
    h.E = 8;
    h.dim_xi = 4;
    h.dim_eta = 4;
    h.transition_hidden = 8;
    h.lstm_hidden = 12;
    h.posterior_hidden = 24;
    h.alpha0 = real(0.5);
    h.delta = real(0.05);
    return h;
}

struct SynthFixture {
    CorpusSequence corpus;
    SplitSpec split;
    LatentTrajectory truth;
};

SynthFixture make_fixture(const ModelHyperParams& hyper, int T, int docs, int tokens,
                          uint64_t seed) {
    SynthFixture f;
    SynthDesign design;
    ParameterStore truth_params = make_synth_params(hyper, design, seed);
    auto sampled = sample_corpus(hyper, truth_params, T, docs, tokens, seed);
    f.corpus = std::move(sampled.corpus);
    f.truth = std::move(sampled.truth);
    f.split = make_split(f.corpus, {0.8, 0.1, 0.1}, seed);
    recompute_slice_bow(f.corpus, f.split);
    return f;
}

}  // namespace

TEST_CASE("anneal schedule") {
    TrainConfig cfg;
    cfg.tau_start = real(1);
    cfg.tau_end = real(0.3);
    cfg.tau_decay = real(0.1);
    cfg.kl_warmup_epochs = 10;
    SUBCASE("step zero") {
        AnnealState s = anneal(0, cfg);
        CHECK(s.tau == doctest::Approx(1.0));
        CHECK(s.kl_scale == real(0));
    }
    SUBCASE("kl scale saturates after warmup") {
        CHECK(anneal(10, cfg).kl_scale == real(1));
        CHECK(anneal(50, cfg).kl_scale == real(1));
        CHECK(anneal(5, cfg).kl_scale == doctest::Approx(0.5));
    }
    SUBCASE("tau is monotone non-increasing and floored") {
        real prev = std::numeric_limits<real>::infinity();
        for (int e = 0; e < 100; ++e) {
            const real tau = anneal(e, cfg).tau;
            CHECK(tau <= prev + real(1e-12));
            CHECK(tau >= cfg.tau_end);
            prev = tau;
        }
        CHECK(anneal(99, cfg).tau == doctest::Approx(cfg.tau_end));
    }
    SUBCASE("no warmup means full KL weight immediately") {
        TrainConfig c2 = cfg;
        c2.kl_warmup_epochs = 0;
        CHECK(anneal(0, c2).kl_scale == real(1));
    }
    SUBCASE("negative epochs are rejected") {
        CHECK_THROWS_AS(anneal(-1, cfg), ConfigError);
    }
}

TEST_CASE("divergence monitor trips after three consecutive non-finite losses") {
    DivergenceMonitor m;
    CHECK(!m.record(false));
    CHECK(!m.record(false));
    CHECK(m.record(false));
    DivergenceMonitor m2;
    CHECK(!m2.record(false));
    CHECK(!m2.record(true));  // a finite loss resets the counter
    CHECK(!m2.record(false));
    CHECK(!m2.record(false));
    CHECK(m2.record(false));
}

TEST_CASE("train config validation") {
    TrainConfig cfg;
    cfg.validate();
    TrainConfig bad = cfg;
    bad.epochs = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.tau_end = bad.tau_start + real(0.1);
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.learning_rate = real(0);
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("seeded training is bit-reproducible") {
    ModelHyperParams hyper = learn_hyper();
    SynthFixture f = make_fixture(hyper, 3, 12, 30, 5);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 8;
    cfg.seed = 7;
    cfg.checkpoint_every = 0;

    TrainResult a = train(f.corpus, f.split, hyper, cfg);
    TrainResult b = train(f.corpus, f.split, hyper, cfg);
    REQUIRE(a.step_losses.size() == b.step_losses.size());
    REQUIRE(a.step_losses.size() >= 10);
    for (size_t i = 0; i < a.step_losses.size(); ++i) {
        CHECK(std::memcmp(&a.step_losses[i], &b.step_losses[i], sizeof(real)) == 0);
    }
    CHECK(a.store.content_hash() == b.store.content_hash());

    TrainConfig other = cfg;
    other.seed = 8;
    TrainResult c = train(f.corpus, f.split, hyper, other);
    CHECK(a.store.content_hash() != c.store.content_hash());
}

TEST_CASE("validation ELBO improves markedly on self-generated data") {
    ModelHyperParams hyper = learn_hyper();
    SynthFixture f = make_fixture(hyper, 4, 30, 40, 11);
    TrainConfig cfg;
    cfg.epochs = 50;
    cfg.batch_size = 32;
    cfg.learning_rate = real(0.01);
    cfg.kl_warmup_epochs = 8;
    cfg.seed = 3;
    cfg.checkpoint_every = 0;

    TrainResult res = train(f.corpus, f.split, hyper, cfg);
    real first_val = 0;
    bool found = false;
    for (const auto& rec : res.epoch_log) {
        if (rec.split == "valid") {
            first_val = rec.breakdown.total;
            found = true;
            break;
        }
    }
    REQUIRE(found);
    // negative validation ELBO must drop by at least 20% within 50 epochs
    const real neg_first = -first_val;
    const real neg_best = -res.best_val_elbo;
    REQUIRE(neg_first > 0);
    CHECK(neg_best < real(0.8) * neg_first);
}

TEST_CASE("training writes logs, checkpoints and manifests") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "ndftm_train_logs";
    fs::remove_all(dir);
    fs::create_directories(dir);

    ModelHyperParams hyper = learn_hyper();
    SynthFixture f = make_fixture(hyper, 3, 10, 25, 21);
    TrainConfig cfg;
    cfg.epochs = 4;
    cfg.batch_size = 16;
    cfg.checkpoint_every = 2;
    cfg.seed = 9;

    TrainResult res = train(f.corpus, f.split, hyper, cfg, dir.string(),
                            /*config_hash=*/0xabcd);
    CHECK(fs::exists(dir / "metrics.jsonl"));
    CHECK(fs::exists(dir / "steps.jsonl"));
    CHECK(fs::exists(dir / "best.ckpt"));
    CHECK(fs::exists(dir / "best.ckpt.manifest.json"));
    CHECK(fs::exists(dir / "final.ckpt"));
    CHECK(fs::exists(dir / "epoch_1.ckpt"));
    CHECK(fs::exists(dir / "epoch_3.ckpt"));

    CheckpointManifest m = load_manifest((dir / "best.ckpt.manifest.json").string());
    CHECK(m.corpus_hash == corpus_hash(f.corpus, f.split));
    CHECK(m.config_hash == 0xabcd);
    ParameterStore best = ParameterStore::load_checkpoint((dir / "best.ckpt").string());
    CHECK(m.param_hash == best.content_hash());
    CHECK(m.hyper.K == hyper.K);
    CHECK(m.epoch == res.best_epoch);

    // metrics log has one train and one valid record per epoch
    std::ifstream metrics(dir / "metrics.jsonl");
    int lines = 0;
    std::string line;
    while (std::getline(metrics, line)) {
        ++lines;
        CHECK(line.find("\"recon\"") != std::string::npos);
        CHECK(line.find("\"wall_ms\"") != std::string::npos);
    }
    CHECK(lines == 2 * cfg.epochs);
    fs::remove_all(dir);
}

TEST_CASE("manifest json round-trips") {
    CheckpointManifest m;
    m.hyper = learn_hyper();
    m.hyper.coupled = true;
    m.epoch = 17;
    m.corpus_hash = 0x1234567890abcdefull;
    m.config_hash = 42;
    m.param_hash = 0xffeeddcc;
    CheckpointManifest back = manifest_from_json(manifest_to_json(m));
    CHECK(back.epoch == m.epoch);
    CHECK(back.corpus_hash == m.corpus_hash);
    CHECK(back.config_hash == m.config_hash);
    CHECK(back.param_hash == m.param_hash);
    CHECK(back.hyper.coupled == true);
    CHECK(back.hyper.K == m.hyper.K);
}
