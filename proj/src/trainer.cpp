#include "ndftm/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>

#include "json.hpp"

namespace ndftm {

using nlohmann::json;

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (!(learning_rate > real(0))) throw ConfigError("train: learning_rate must be > 0");
    if (!(tau_start > real(0)) || !(tau_end > real(0))) {
        throw ConfigError("train: tau schedule must be positive");
    }
    if (tau_end > tau_start) throw ConfigError("train: tau schedule must be non-increasing");
    if (tau_decay < real(0)) throw ConfigError("train: tau_decay must be >= 0");
    if (kl_warmup_epochs < 0) throw ConfigError("train: kl_warmup_epochs must be >= 0");
    if (coupled_warmup_epochs < 0) throw ConfigError("train: coupled_warmup_epochs must be >= 0");
    if (mc_samples < 1) throw ConfigError("train: mc_samples must be >= 1");
    if (threads < 1) throw ConfigError("train: threads must be >= 1");
}

const char* mask_estimator_name(MaskEstimator e) {
    return e == MaskEstimator::StraightThrough ? "straight-through" : "concrete";
}

MaskEstimator mask_estimator_from_name(const std::string& name) {
    if (name == "straight-through" || name == "st") return MaskEstimator::StraightThrough;
    if (name == "concrete" || name == "binary-concrete") return MaskEstimator::BinaryConcrete;
    throw ConfigError("unknown mask estimator '" + name + "' (expect straight-through or concrete)");
}

AnnealState anneal(int epoch, const TrainConfig& cfg) {
    if (epoch < 0) throw ConfigError("anneal: epoch must be >= 0");
    AnnealState s;
    s.tau = std::max(cfg.tau_end,
                     cfg.tau_start * std::exp(-cfg.tau_decay * static_cast<real>(epoch)));
    s.kl_scale = cfg.kl_warmup_epochs > 0
                     ? std::min(real(1), static_cast<real>(epoch) /
                                             static_cast<real>(cfg.kl_warmup_epochs))
                     : real(1);
    return s;
}

namespace {

json hyper_to_json(const ModelHyperParams& h) {
    json j;
    j["K"] = h.K;
    j["V"] = h.V;
    j["E"] = h.E;
    j["dim_xi"] = h.dim_xi;
    j["dim_eta"] = h.dim_eta;
    j["delta"] = h.delta;
    j["alpha0"] = h.alpha0;
    j["tau"] = h.tau;
    j["transition_hidden"] = h.transition_hidden;
    j["lstm_hidden"] = h.lstm_hidden;
    j["posterior_hidden"] = h.posterior_hidden;
    j["linear_transition"] = h.linear_transition;
    j["coupled"] = h.coupled;
    j["bidirectional_encoder"] = h.bidirectional_encoder;
    return j;
}

ModelHyperParams hyper_from_json(const json& j) {
    ModelHyperParams h;
    h.K = j.at("K").get<int>();
    h.V = j.at("V").get<int>();
    h.E = j.at("E").get<int>();
    h.dim_xi = j.at("dim_xi").get<int>();
    h.dim_eta = j.at("dim_eta").get<int>();
    h.delta = j.at("delta").get<real>();
    h.alpha0 = j.at("alpha0").get<real>();
    h.tau = j.at("tau").get<real>();
    h.transition_hidden = j.at("transition_hidden").get<int>();
    h.lstm_hidden = j.at("lstm_hidden").get<int>();
    h.posterior_hidden = j.at("posterior_hidden").get<int>();
    h.linear_transition = j.at("linear_transition").get<bool>();
    h.coupled = j.at("coupled").get<bool>();
    h.bidirectional_encoder = j.at("bidirectional_encoder").get<bool>();
    return h;
}

std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

uint64_t from_hex64(const std::string& s) {
    return std::stoull(s, nullptr, 16);
}

json breakdown_to_json(const ElboBreakdown& b) {
    json j;
    j["recon"] = b.recon;
    j["kl_eta1"] = b.kl_eta1;
    j["kl_xi1"] = b.kl_xi1;
    j["kl_eta_seq"] = b.kl_eta_seq;
    j["kl_xi_seq"] = b.kl_xi_seq;
    j["kl_zeta"] = b.kl_zeta;
    j["kl_b"] = b.kl_b;
    j["total"] = b.total;
    return j;
}

// Even stratified partition: per slice, chunk i of `num_batches` gets the
// i-th contiguous span of that slice's shuffled documents.
std::vector<std::vector<SliceBatch>> make_batches(const std::vector<std::vector<int>>& per_slice,
                                                  int num_batches) {
    std::vector<std::vector<SliceBatch>> batches(static_cast<size_t>(num_batches));
    for (size_t t = 0; t < per_slice.size(); ++t) {
        const auto& docs = per_slice[t];
        const long n = static_cast<long>(docs.size());
        if (n == 0) continue;
        long start = 0;
        for (int i = 0; i < num_batches; ++i) {
            const long end = (n * (i + 1)) / num_batches;
            if (end > start) {
                SliceBatch sb;
                sb.t = static_cast<int>(t);
                sb.docs.assign(docs.begin() + start, docs.begin() + end);
                batches[static_cast<size_t>(i)].push_back(std::move(sb));
            }
            start = end;
        }
    }
    std::erase_if(batches, [](const auto& b) { return b.empty(); });
    return batches;
}

ElboBreakdown accumulate(const ElboBreakdown& a, const ElboBreakdown& b, real wb) {
    ElboBreakdown out = a;
    out.recon += wb * b.recon;
    out.kl_eta1 += wb * b.kl_eta1;
    out.kl_xi1 += wb * b.kl_xi1;
    out.kl_eta_seq += wb * b.kl_eta_seq;
    out.kl_xi_seq += wb * b.kl_xi_seq;
    out.kl_zeta += wb * b.kl_zeta;
    out.kl_b += wb * b.kl_b;
    out.total += wb * b.total;
    return out;
}

}  // namespace

std::string manifest_to_json(const CheckpointManifest& m) {
    json j;
    j["format"] = "ndftm-manifest";
    j["version"] = 1;
    j["hyper"] = hyper_to_json(m.hyper);
    j["epoch"] = m.epoch;
    j["corpus_hash"] = hex64(m.corpus_hash);
    j["config_hash"] = hex64(m.config_hash);
    j["param_hash"] = hex64(m.param_hash);
    return j.dump(2);
}

CheckpointManifest manifest_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw InputError(std::string("manifest: ") + e.what());
    }
    if (j.value("format", "") != "ndftm-manifest") throw InputError("manifest: bad format tag");
    CheckpointManifest m;
    m.hyper = hyper_from_json(j.at("hyper"));
    m.epoch = j.at("epoch").get<int>();
    m.corpus_hash = from_hex64(j.at("corpus_hash").get<std::string>());
    m.config_hash = from_hex64(j.at("config_hash").get<std::string>());
    m.param_hash = from_hex64(j.at("param_hash").get<std::string>());
    return m;
}

void save_manifest(const std::string& path, const CheckpointManifest& m) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw InputError("cannot write manifest: " + path);
    f << manifest_to_json(m);
}

CheckpointManifest load_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw InputError("cannot open manifest: " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return manifest_from_json(text);
}

TrainResult train(const CorpusSequence& corpus, const SplitSpec& split,
                  const ModelHyperParams& hyper, const TrainConfig& cfg,
                  const std::string& outdir, uint64_t config_hash) {
    hyper.validate();
    cfg.validate();
    validate_corpus(corpus, &split);

    const int T = corpus.num_slices();
    std::vector<std::vector<int>> train_docs(static_cast<size_t>(T));
    std::vector<std::vector<int>> valid_docs(static_cast<size_t>(T));
    std::vector<long> train_totals(static_cast<size_t>(T), 0);
    std::vector<long> valid_totals(static_cast<size_t>(T), 0);
    long n_train = 0;
    for (int t = 0; t < T; ++t) {
        for (size_t d = 0; d < corpus.slices[static_cast<size_t>(t)].size(); ++d) {
            const Split s = split.assignment[static_cast<size_t>(t)][d];
            if (s == Split::Train) {
                train_docs[static_cast<size_t>(t)].push_back(static_cast<int>(d));
                ++train_totals[static_cast<size_t>(t)];
                ++n_train;
            } else if (s == Split::Valid) {
                valid_docs[static_cast<size_t>(t)].push_back(static_cast<int>(d));
                ++valid_totals[static_cast<size_t>(t)];
            }
        }
    }
    if (n_train == 0) throw InputError("train: corpus has no training documents");

    TrainResult result;
    Rng init_rng(hash_mix(cfg.seed, 0x1417));
    GenerativeParams{hyper}.create(result.store, init_rng);
    EncoderParams{hyper}.create(result.store, init_rng);

    // Anchor-word initialization: each topic embedding starts pointed at a
    // distinct frequent training word, chosen greedily so anchors do not
    // co-occur heavily with one another. Without it the topic-word rows are
    // born interchangeable and most topics starve before documents sort
    // themselves.
    {
        std::vector<long> freq(static_cast<size_t>(hyper.V), 0);
        std::vector<std::vector<int>> doc_sets(static_cast<size_t>(hyper.V));
        int doc_id = 0;
        for (int t = 0; t < T; ++t) {
            for (size_t d = 0; d < corpus.slices[static_cast<size_t>(t)].size(); ++d) {
                if (split.assignment[static_cast<size_t>(t)][d] != Split::Train) continue;
                for (const auto& [id, c] : corpus.slices[static_cast<size_t>(t)][d].counts) {
                    freq[static_cast<size_t>(id)] += c;
                    doc_sets[static_cast<size_t>(id)].push_back(doc_id);
                }
                ++doc_id;
            }
        }
        std::vector<int> order(static_cast<size_t>(hyper.V));
        for (int w = 0; w < hyper.V; ++w) order[static_cast<size_t>(w)] = w;
        std::sort(order.begin(), order.end(), [&](int a, int b) {
            if (freq[static_cast<size_t>(a)] != freq[static_cast<size_t>(b)]) {
                return freq[static_cast<size_t>(a)] > freq[static_cast<size_t>(b)];
            }
            return a < b;
        });
        auto overlap = [&](int a, int b) {
            const auto& da = doc_sets[static_cast<size_t>(a)];
            const auto& db = doc_sets[static_cast<size_t>(b)];
            if (da.empty() || db.empty()) return 0.0;
            size_t i = 0, j = 0;
            long both = 0;
            while (i < da.size() && j < db.size()) {
                if (da[i] == db[j]) { ++both; ++i; ++j; }
                else if (da[i] < db[j]) ++i;
                else ++j;
            }
            return static_cast<double>(both) /
                   static_cast<double>(std::min(da.size(), db.size()));
        };
        std::vector<int> anchors;
        for (double cap = 0.5; static_cast<int>(anchors.size()) < hyper.K && cap <= 1.01;
             cap += 0.25) {
            for (int w : order) {
                if (static_cast<int>(anchors.size()) >= hyper.K) break;
                if (freq[static_cast<size_t>(w)] == 0) continue;
                bool taken = false, close = false;
                for (int a : anchors) {
                    if (a == w) taken = true;
                    else if (overlap(w, a) > cap) close = true;
                }
                if (!taken && !close) anchors.push_back(w);
            }
        }
        const Tensor& rho = result.store.at(GenerativeParams::kRho);
        Tensor& alpha = result.store.mutate(GenerativeParams::kAlpha);
        for (int k = 0; k < hyper.K && k < static_cast<int>(anchors.size()); ++k) {
            const int anchor = anchors[static_cast<size_t>(k)];
            real norm_sq = real(0);
            for (int e = 0; e < hyper.E; ++e) norm_sq += rho.at(anchor, e) * rho.at(anchor, e);
            const real gain = real(4) / std::max(norm_sq, real(1e-6));
            for (int e = 0; e < hyper.E; ++e) {
                alpha.at(k, e) = gain * rho.at(anchor, e) +
                                 real(0.1) * static_cast<real>(init_rng.normal());
            }
        }
    }

    AdamConfig adam;
    adam.learning_rate = cfg.learning_rate;
    adam.clip_norm = cfg.clip_norm;

    const uint64_t chash = corpus_hash(corpus, split);
    std::ofstream metrics_out, steps_out;
    if (!outdir.empty()) {
        metrics_out.open(outdir + "/metrics.jsonl", std::ios::trunc);
        steps_out.open(outdir + "/steps.jsonl", std::ios::trunc);
        if (!metrics_out || !steps_out) throw InputError("train: cannot write logs in " + outdir);
    }

    auto save_ckpt = [&](const ParameterStore& store, const std::string& stem, int epoch) {
        if (outdir.empty()) return std::string();
        const std::string path = outdir + "/" + stem + ".ckpt";
        store.save_checkpoint(path);
        CheckpointManifest m;
        m.hyper = hyper;
        m.epoch = epoch;
        m.corpus_hash = chash;
        m.config_hash = config_hash;
        m.param_hash = store.content_hash();
        save_manifest(path + ".manifest.json", m);
        return path;
    };

    DivergenceMonitor monitor;
    Rng shuffle_rng(hash_mix(cfg.seed, 0x500f));
    const int num_batches =
        static_cast<int>((n_train + cfg.batch_size - 1) / cfg.batch_size);
    long global_step = 0;
    result.best_val_elbo = -std::numeric_limits<real>::infinity();

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const AnnealState sched = anneal(epoch, cfg);
        ModelHyperParams step_hyper = hyper;
        if (epoch < cfg.coupled_warmup_epochs) step_hyper.coupled = true;
        const auto epoch_start = std::chrono::steady_clock::now();

        auto shuffled = train_docs;
        for (auto& docs : shuffled) shuffle_inplace(docs.begin(), docs.end(), shuffle_rng);
        auto batches = make_batches(shuffled, num_batches);

        ElboBreakdown train_sum;
        int train_batches = 0;
        for (size_t bi = 0; bi < batches.size(); ++bi) {
            NoiseSource noise(cfg.seed, hash_mix(static_cast<uint64_t>(epoch), bi));
            ElboOptions opt{sched.tau, sched.kl_scale, cfg.mc_samples, cfg.mask_estimator};
            Tape tape;
            ElboResult res = build_elbo(tape, result.store, step_hyper, corpus, batches[bi],
                                        train_totals, noise, opt);
            result.guard_events += res.guard_events;
            const real loss = tape.val(res.loss).item();
            result.step_losses.push_back(loss);
            if (steps_out.is_open()) {
                json j;
                j["step"] = global_step;
                j["epoch"] = epoch;
                j["loss"] = loss;
                steps_out << j.dump() << "\n";
            }
            ++global_step;

            const bool finite = std::isfinite(loss);
            if (monitor.record(finite)) {
                json dump;
                dump["epoch"] = epoch;
                dump["step"] = global_step;
                dump["breakdown"] = breakdown_to_json(res.breakdown);
                std::cerr << "[ndftm] divergence: " << dump.dump() << "\n";
                throw DivergenceError("training diverged: 3 consecutive non-finite losses");
            }
            if (!finite) {
                ++result.skipped_batches;
                std::cerr << "[ndftm] skipping non-finite batch at epoch " << epoch << "\n";
                continue;
            }
            auto grads = tape.backward(res.loss, result.store);
            result.store.optimizer_step(grads, adam);
            train_sum = accumulate(train_sum, res.breakdown, real(1));
            ++train_batches;
        }

        const auto train_end = std::chrono::steady_clock::now();
        EpochRecord train_rec;
        train_rec.epoch = epoch;
        train_rec.split = "train";
        train_rec.breakdown =
            accumulate(ElboBreakdown{}, train_sum,
                       train_batches > 0 ? real(1) / static_cast<real>(train_batches) : real(0));
        train_rec.tau = sched.tau;
        train_rec.kl_scale = sched.kl_scale;
        train_rec.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(train_end - epoch_start).count();
        result.epoch_log.push_back(train_rec);

        // Validation pass: even partition, fresh per-epoch eval noise,
        // kl_scale pinned at 1 so epochs stay comparable.
        EpochRecord val_rec;
        val_rec.epoch = epoch;
        val_rec.split = "valid";
        val_rec.tau = sched.tau;
        val_rec.kl_scale = real(1);
        long n_valid = 0;
        for (long v : valid_totals) n_valid += v;
        if (n_valid > 0) {
            const int val_chunks =
                static_cast<int>((n_valid + cfg.batch_size - 1) / cfg.batch_size);
            auto val_batches = make_batches(valid_docs, val_chunks);
            NoiseSource noise(cfg.seed, hash_mix(0xe7a1, static_cast<uint64_t>(epoch)));
            ElboBreakdown val_sum;
            for (const auto& vb : val_batches) {
                ElboOptions opt{sched.tau, real(1), cfg.mc_samples, cfg.mask_estimator};
                val_sum = accumulate(val_sum,
                                     elbo_value(result.store, hyper, corpus, vb, valid_totals,
                                                noise, opt, &result.guard_events),
                                     real(1) / static_cast<real>(val_batches.size()));
            }
            val_rec.breakdown = val_sum;
            // Model selection starts once the masks are live; warmup epochs
            // optimize a different objective.
            if (epoch >= cfg.coupled_warmup_epochs && val_sum.total > result.best_val_elbo) {
                result.best_val_elbo = val_sum.total;
                result.best_epoch = epoch;
                result.best_store = result.store.clone();
                result.best_checkpoint_path = save_ckpt(result.best_store, "best", epoch);
            }
        }
        const auto val_end = std::chrono::steady_clock::now();
        val_rec.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(val_end - train_end).count();
        result.epoch_log.push_back(val_rec);

        if (metrics_out.is_open()) {
            for (const EpochRecord* rec : {&train_rec, &val_rec}) {
                json j;
                j["epoch"] = rec->epoch;
                j["split"] = rec->split;
                const json parts = breakdown_to_json(rec->breakdown);
                for (const auto& [k, v] : parts.items()) j[k] = v;
                j["tau"] = rec->tau;
                j["kl_scale"] = rec->kl_scale;
                j["wall_ms"] = rec->wall_ms;
                metrics_out << j.dump() << "\n";
            }
            metrics_out.flush();
        }
        if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) {
            save_ckpt(result.store, "epoch_" + std::to_string(epoch), epoch);
        }
    }

    if (result.best_epoch < 0) {
        // No validation split: fall back to the final parameters.
        result.best_store = result.store.clone();
        result.best_epoch = cfg.epochs - 1;
        result.best_checkpoint_path = save_ckpt(result.best_store, "best", result.best_epoch);
    }
    save_ckpt(result.store, "final", cfg.epochs - 1);
    return result;
}

}  // namespace ndftm
