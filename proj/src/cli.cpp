#include "ndftm/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "ndftm/config.hpp"
#include "ndftm/corpus.hpp"
#include "ndftm/elbo.hpp"
#include "ndftm/metrics.hpp"
#include "ndftm/model.hpp"
#include "ndftm/trainer.hpp"

namespace ndftm {

namespace {

namespace fs = std::filesystem;

struct CommandContext {
    RunConfig cfg;
    std::string command;

    // Creates <outdir>/<run-id>/ and drops the resolved config there so any
    // run can be reproduced from its own artifacts.
    fs::path ensure_run_dir() {
        if (cfg.run_id.empty()) {
            char buf[13];
            std::snprintf(buf, sizeof(buf), "%012llx",
                          static_cast<unsigned long long>(
                              hash_mix(fnv1a(command), cfg.config_hash()) & 0xffffffffffffull));
            cfg.run_id = command + "-" + buf;
        }
        const fs::path dir = fs::path(cfg.outdir) / cfg.run_id;
        fs::create_directories(dir);
        std::ofstream f(dir / "config.resolved.ini", std::ios::trunc);
        if (!f) throw InputError("cannot write resolved config in " + dir.string());
        f << cfg.resolved_ini();
        return dir;
    }
};

std::set<std::string> load_stopwords(const std::string& path) {
    std::set<std::string> out;
    if (path.empty()) return out;
    std::ifstream f(path);
    if (!f) throw InputError("cannot open stopword list: " + path);
    std::string word;
    while (f >> word) out.insert(word);
    return out;
}

std::vector<IngestRecord> read_input(const RunConfig& cfg) {
    if (cfg.input.empty()) throw ConfigError("corpus.input is required");
    if (cfg.input_format == "tsv") return read_records_tsv(cfg.input);
    if (cfg.input_format == "jsonl") return read_records_jsonl(cfg.input);
    if (cfg.input_format == "auto") return read_records_auto(cfg.input);
    throw ConfigError("corpus.input_format must be auto, tsv or jsonl");
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw InputError("cannot write " + path.string());
    f << text;
}

void print_corpus_summary(const CorpusSequence& corpus, const SplitSpec& spec) {
    std::cerr << "[ndftm] corpus: T=" << corpus.num_slices() << " V=" << corpus.vocab_size()
              << " docs=" << corpus.num_docs() << " N_t=[";
    for (int t = 0; t < corpus.num_slices(); ++t) {
        std::cerr << (t ? "," : "") << corpus.slices[static_cast<size_t>(t)].size();
    }
    std::cerr << "]";
    long tr = 0, va = 0, te = 0;
    for (const auto& slice : spec.assignment) {
        for (Split s : slice) {
            if (s == Split::Train) ++tr;
            else if (s == Split::Valid) ++va;
            else ++te;
        }
    }
    std::cerr << " split=" << tr << "/" << va << "/" << te << "\n";
}

int cmd_ingest(CommandContext& ctx) {
    auto records = read_input(ctx.cfg);
    SliceSpec slicing{ctx.cfg.slice_width, ctx.cfg.slice_origin};
    VocabOptions vopts;
    vopts.min_count = ctx.cfg.min_count;
    vopts.max_fraction = ctx.cfg.max_fraction;
    vopts.stopwords = load_stopwords(ctx.cfg.stopwords);
    CorpusSequence corpus = ingest(records, slicing, vopts);
    std::vector<std::string> warnings;
    SplitSpec spec = make_split(corpus, {ctx.cfg.train_frac, ctx.cfg.valid_frac, ctx.cfg.test_frac},
                                ctx.cfg.seed, &warnings);
    for (const auto& w : warnings) std::cerr << "[ndftm] warning: " << w << "\n";
    recompute_slice_bow(corpus, spec);
    validate_corpus(corpus, &spec);

    const fs::path dir = ctx.ensure_run_dir();
    save_bundle((dir / "corpus.json").string(), corpus, spec);
    print_corpus_summary(corpus, spec);
    std::cerr << "[ndftm] bundle: " << (dir / "corpus.json").string() << "\n";
    return 0;
}

int cmd_synth(CommandContext& ctx) {
    ModelHyperParams hyper = ctx.cfg.model;
    if (hyper.V < 2) throw ConfigError("synth: model.V must be set (>= 2)");
    hyper.validate();
    ParameterStore truth_params = make_synth_params(hyper, ctx.cfg.synth, ctx.cfg.seed);
    SampleCorpusResult sampled = sample_corpus(hyper, truth_params, ctx.cfg.synth_T,
                                               ctx.cfg.synth_docs, ctx.cfg.synth_tokens,
                                               ctx.cfg.seed);
    std::vector<std::string> warnings;
    SplitSpec spec = make_split(sampled.corpus,
                                {ctx.cfg.train_frac, ctx.cfg.valid_frac, ctx.cfg.test_frac},
                                ctx.cfg.seed, &warnings);
    for (const auto& w : warnings) std::cerr << "[ndftm] warning: " << w << "\n";
    recompute_slice_bow(sampled.corpus, spec);
    validate_corpus(sampled.corpus, &spec);

    const fs::path dir = ctx.ensure_run_dir();
    save_bundle((dir / "corpus.json").string(), sampled.corpus, spec);
    save_ground_truth((dir / "ground_truth.json").string(), sampled.truth);
    print_corpus_summary(sampled.corpus, spec);
    if (sampled.truth.forced_masks > 0) {
        std::cerr << "[ndftm] forced " << sampled.truth.forced_masks
                  << " all-zero mask(s) to the argmax-pi topic\n";
    }
    std::cerr << "[ndftm] bundle: " << (dir / "corpus.json").string() << "\n";
    return 0;
}

int cmd_train(CommandContext& ctx) {
    if (ctx.cfg.bundle.empty()) throw ConfigError("train: run.bundle is required");
    auto [corpus, spec] = load_bundle(ctx.cfg.bundle);
    ModelHyperParams hyper = ctx.cfg.model;
    hyper.V = corpus.vocab_size();
    ctx.cfg.model.V = hyper.V;  // resolved config records the actual vocabulary
    hyper.validate();

    const fs::path dir = ctx.ensure_run_dir();
    TrainResult result =
        train(corpus, spec, hyper, ctx.cfg.train, dir.string(), ctx.cfg.config_hash());
    std::cerr << "[ndftm] training done: best epoch " << result.best_epoch << " val ELBO "
              << result.best_val_elbo << " checkpoint " << result.best_checkpoint_path << "\n";
    if (result.skipped_batches > 0) {
        std::cerr << "[ndftm] skipped " << result.skipped_batches << " non-finite batch(es)\n";
    }
    return 0;
}

struct LoadedCheckpoint {
    ParameterStore store;
    CheckpointManifest manifest;
};

LoadedCheckpoint load_checkpoint_checked(const RunConfig& cfg, const CorpusSequence& corpus,
                                         const SplitSpec& spec) {
    if (cfg.checkpoint.empty()) throw ConfigError("run.checkpoint is required");
    LoadedCheckpoint out{ParameterStore::load_checkpoint(cfg.checkpoint),
                         load_manifest(cfg.checkpoint + ".manifest.json")};
    if (out.manifest.corpus_hash != corpus_hash(corpus, spec)) {
        throw CompatError("checkpoint was trained on a different corpus bundle");
    }
    if (out.manifest.param_hash != out.store.content_hash()) {
        throw CompatError("checkpoint content does not match its manifest");
    }
    return out;
}

int cmd_eval(CommandContext& ctx) {
    if (ctx.cfg.bundle.empty()) throw ConfigError("eval: run.bundle is required");
    auto [corpus, spec] = load_bundle(ctx.cfg.bundle);
    LoadedCheckpoint ckpt = load_checkpoint_checked(ctx.cfg, corpus, spec);
    MetricSelection sel = MetricSelection::parse(ctx.cfg.metrics);
    MetricOptions opt = ctx.cfg.eval;
    opt.seed = ctx.cfg.seed;

    MetricReport report = compute_metrics(ckpt.store, ckpt.manifest.hyper, corpus, spec, opt, sel);
    const fs::path dir = ctx.ensure_run_dir();
    write_text(dir / "report.json", report_to_json(report));
    if (sel.series) {
        write_text(dir / "entropy.csv", entropy_series_csv(report));
        write_text(dir / "activity.csv", activity_series_csv(report));
    }
    std::cout << "ppl_dc=" << (sel.ppl ? report.ppl_dc : std::nan(""))
              << " p_nll=" << (sel.pnll ? report.p_nll : std::nan(""))
              << " tc=" << (sel.tc ? report.tc : std::nan(""))
              << " td=" << (sel.td ? report.td : std::nan("")) << "\n";
    std::cerr << "[ndftm] report: " << (dir / "report.json").string() << "\n";
    return 0;
}

int cmd_predict(CommandContext& ctx) {
    if (ctx.cfg.bundle.empty()) throw ConfigError("predict: run.bundle is required");
    auto [corpus, spec] = load_bundle(ctx.cfg.bundle);
    LoadedCheckpoint ckpt = load_checkpoint_checked(ctx.cfg, corpus, spec);
    MetricOptions opt = ctx.cfg.eval;
    opt.seed = ctx.cfg.seed;
    const real pnll = predictive_nll(ckpt.store, ckpt.manifest.hyper, corpus, spec, opt);
    const fs::path dir = ctx.ensure_run_dir();
    write_text(dir / "predict.json",
               std::string("{\"p_nll\": ") + std::to_string(pnll) +
                   ", \"horizon\": " + std::to_string(opt.pnll_horizon) +
                   ", \"particles\": " + std::to_string(opt.pnll_particles) + "}\n");
    std::cout << "p_nll=" << pnll << "\n";
    return 0;
}

int cmd_diagnose(CommandContext& ctx) {
    if (ctx.cfg.bundle.empty()) throw ConfigError("diagnose: run.bundle is required");
    auto [corpus, spec] = load_bundle(ctx.cfg.bundle);
    LoadedCheckpoint ckpt = load_checkpoint_checked(ctx.cfg, corpus, spec);
    MetricOptions opt = ctx.cfg.eval;
    opt.seed = ctx.cfg.seed;
    MetricSelection sel;
    sel.ppl = sel.pnll = sel.tc = sel.td = sel.topwords = false;
    sel.series = true;
    MetricReport report = compute_metrics(ckpt.store, ckpt.manifest.hyper, corpus, spec, opt, sel);
    const fs::path dir = ctx.ensure_run_dir();
    write_text(dir / "entropy.csv", entropy_series_csv(report));
    write_text(dir / "activity.csv", activity_series_csv(report));
    real pooled = real(0);
    long docs = 0;
    for (const auto& p : report.entropy_series) {
        pooled += p.mean * static_cast<real>(p.docs);
        docs += p.docs;
    }
    std::cout << "mean_entropy=" << (docs > 0 ? pooled / static_cast<real>(docs) : real(0))
              << " degenerate_masks=" << report.degenerate_masks << "\n";
    return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"neural dynamic focused topic model"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<Override> overrides;
    std::vector<std::string> sets;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "config file (INI sections)");
        cmd->add_option("--set", sets, "override any key: section.key=value")->take_all();
        auto opt = [&overrides, cmd](const char* flag, const char* section, const char* key,
                                     const char* desc) {
            cmd->add_option_function<std::string>(
                   flag,
                   [&overrides, section, key](const std::string& v) {
                       overrides.push_back({section, key, v});
                   },
                   desc);
        };
        opt("--outdir", "run", "outdir", "output root directory");
        opt("--run-id", "run", "run_id", "run directory name (default: derived from config)");
        opt("--seed", "run", "seed", "master seed");
        return opt;
    };
    auto add_flag = [&](CLI::App* cmd, const char* flag, const char* section, const char* key,
                        const char* desc) {
        cmd->add_flag_callback(
            flag, [&overrides, section, key] { overrides.push_back({section, key, "true"}); },
            desc);
    };

    CLI::App* ingest = app.add_subcommand("ingest", "build a corpus bundle from raw records");
    {
        auto opt = add_common(ingest);
        opt("--input", "corpus", "input", "records file (TSV or JSONL)");
        opt("--format", "corpus", "input_format", "auto | tsv | jsonl");
        opt("--slice-width", "corpus", "slice_width", "time-slice width");
        opt("--slice-origin", "corpus", "slice_origin", "slice origin timestamp or 'auto'");
        opt("--min-count", "corpus", "min_count", "minimum total token count");
        opt("--max-fraction", "corpus", "max_fraction", "maximum document fraction per token");
        opt("--stopwords", "corpus", "stopwords", "stopword list path");
        opt("--train-frac", "corpus", "train_frac", "training fraction");
        opt("--valid-frac", "corpus", "valid_frac", "validation fraction");
        opt("--test-frac", "corpus", "test_frac", "test fraction");
    }

    CLI::App* synth = app.add_subcommand("synth", "sample a synthetic corpus with ground truth");
    {
        auto opt = add_common(synth);
        opt("--K", "model", "K", "topic count");
        opt("--V", "model", "V", "vocabulary size");
        opt("--E", "model", "E", "embedding dimension");
        opt("--alpha0", "model", "alpha0", "activity ceiling");
        opt("--delta", "model", "delta", "prior transition variance");
        opt("--T", "synth", "T", "number of time slices");
        opt("--docs", "synth", "docs_per_slice", "documents per slice");
        opt("--tokens", "synth", "tokens_per_doc", "tokens per document");
        opt("--beta-sharpness", "synth", "beta_sharpness", "topic-word concentration");
        opt("--activity-skew", "synth", "activity_skew", "per-topic activity spread");
        opt("--train-frac", "corpus", "train_frac", "training fraction");
        opt("--valid-frac", "corpus", "valid_frac", "validation fraction");
        opt("--test-frac", "corpus", "test_frac", "test fraction");
        add_flag(synth, "--linear-transition", "model", "linear_transition",
                 "identity prior transitions");
        add_flag(synth, "--coupled", "model", "coupled", "all-ones masks");
    }

    CLI::App* train_cmd = app.add_subcommand("train", "fit the model on a corpus bundle");
    {
        auto opt = add_common(train_cmd);
        opt("--bundle", "run", "bundle", "corpus bundle path");
        opt("--K", "model", "K", "topic count");
        opt("--E", "model", "E", "embedding dimension");
        opt("--alpha0", "model", "alpha0", "activity ceiling");
        opt("--delta", "model", "delta", "prior transition variance");
        opt("--lstm-hidden", "model", "lstm_hidden", "encoder LSTM width");
        opt("--epochs", "train", "epochs", "training epochs");
        opt("--batch-size", "train", "batch_size", "documents per minibatch");
        opt("--lr", "train", "learning_rate", "learning rate");
        opt("--clip-norm", "train", "clip_norm", "global gradient-norm clip");
        opt("--tau-start", "train", "tau_start", "relaxation temperature start");
        opt("--tau-end", "train", "tau_end", "relaxation temperature floor");
        opt("--kl-warmup", "train", "kl_warmup_epochs", "KL warmup epochs");
        opt("--coupled-warmup", "train", "coupled_warmup_epochs",
            "epochs with masks forced on before the Bernoulli stream engages");
        opt("--mc-samples", "train", "mc_samples", "Monte Carlo draws per step");
        opt("--checkpoint-every", "train", "checkpoint_every", "checkpoint cadence (epochs)");
        opt("--threads", "train", "threads", "worker cap");
        opt("--mask-estimator", "train", "mask_estimator",
            "mask gradient estimator: straight-through | concrete");
        add_flag(train_cmd, "--linear-transition", "model", "linear_transition",
                 "identity prior transitions");
        add_flag(train_cmd, "--coupled", "model", "coupled", "all-ones masks");
        add_flag(train_cmd, "--bidirectional-encoder", "model", "bidirectional_encoder",
                 "smoothing encoder");
    }

    CLI::App* eval_cmd = app.add_subcommand("eval", "compute metrics for a checkpoint");
    {
        auto opt = add_common(eval_cmd);
        opt("--bundle", "run", "bundle", "corpus bundle path");
        opt("--checkpoint", "run", "checkpoint", "checkpoint path");
        opt("--metrics", "eval", "metrics", "all or csv of ppl,pnll,tc,td,series,topwords");
        opt("-S,--posterior-samples", "eval", "posterior_samples", "posterior draws");
        opt("--pnll-particles", "eval", "pnll_particles", "prediction particles");
        opt("--pnll-horizon", "eval", "pnll_horizon", "prediction horizon");
        opt("--split", "eval", "split", "document split: train | valid | test");
        opt("--tc-top-n", "eval", "tc_top_n", "coherence top words");
        opt("--td-top-n", "eval", "td_top_n", "diversity top words");
    }

    CLI::App* predict = app.add_subcommand("predict", "predictive NLL of the held-out slice");
    {
        auto opt = add_common(predict);
        opt("--bundle", "run", "bundle", "corpus bundle path");
        opt("--checkpoint", "run", "checkpoint", "checkpoint path");
        opt("--pnll-particles", "eval", "pnll_particles", "prediction particles");
        opt("--pnll-horizon", "eval", "pnll_horizon", "prediction horizon");
        opt("--split", "eval", "split", "document split: train | valid | test");
    }

    CLI::App* diagnose = app.add_subcommand("diagnose", "entropy and activity time series");
    {
        auto opt = add_common(diagnose);
        opt("--bundle", "run", "bundle", "corpus bundle path");
        opt("--checkpoint", "run", "checkpoint", "checkpoint path");
        opt("-S,--posterior-samples", "eval", "posterior_samples", "posterior draws");
        opt("--split", "eval", "split", "document split: train | valid | test");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        CommandContext ctx;
        if (!config_path.empty()) load_config_file(ctx.cfg, config_path);
        apply_overrides(ctx.cfg, overrides);
        for (const auto& s : sets) {
            const auto dot = s.find('.');
            const auto eq = s.find('=');
            if (dot == std::string::npos || eq == std::string::npos || dot > eq) {
                throw ConfigError("--set expects section.key=value, got '" + s + "'");
            }
            ctx.cfg.apply(s.substr(0, dot), s.substr(dot + 1, eq - dot - 1), s.substr(eq + 1));
        }

        if (ingest->parsed()) {
            ctx.command = "ingest";
            return cmd_ingest(ctx);
        }
        if (synth->parsed()) {
            ctx.command = "synth";
            return cmd_synth(ctx);
        }
        if (train_cmd->parsed()) {
            ctx.command = "train";
            return cmd_train(ctx);
        }
        if (eval_cmd->parsed()) {
            ctx.command = "eval";
            return cmd_eval(ctx);
        }
        if (predict->parsed()) {
            ctx.command = "predict";
            return cmd_predict(ctx);
        }
        if (diagnose->parsed()) {
            ctx.command = "diagnose";
            return cmd_diagnose(ctx);
        }
        throw ConfigError("no command given");
    } catch (const ConfigError& e) {
        std::cerr << "[ndftm] config error: " << e.what() << "\n";
        return 1;
    } catch (const InputError& e) {
        std::cerr << "[ndftm] input error: " << e.what() << "\n";
        return 2;
    } catch (const DivergenceError& e) {
        std::cerr << "[ndftm] " << e.what() << "\n";
        return 3;
    } catch (const CompatError& e) {
        std::cerr << "[ndftm] compatibility error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "[ndftm] error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace ndftm
