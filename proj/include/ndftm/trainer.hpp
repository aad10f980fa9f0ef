#pragma once

#include <string>
#include <vector>

#include "ndftm/elbo.hpp"

namespace ndftm {

struct TrainConfig {
    int epochs = 100;
    int batch_size = 256;
    real learning_rate = real(0.002);
    real clip_norm = real(2.0);
    real tau_start = real(1.0);
    real tau_end = real(0.3);
    real tau_decay = real(0.05);  // per-epoch exponential rate
    int kl_warmup_epochs = 10;
    // Epochs trained with masks forced all-on before the Bernoulli stream
    // engages; keeps every topic receiving reconstruction gradient while the
    // topic-word rows take shape.
    int coupled_warmup_epochs = 0;
    int mc_samples = 1;
    uint64_t seed = 1;
    int checkpoint_every = 10;  // <= 0 disables cadence checkpoints
    int threads = 1;
    MaskEstimator mask_estimator = MaskEstimator::StraightThrough;

    void validate() const;
};

const char* mask_estimator_name(MaskEstimator e);
MaskEstimator mask_estimator_from_name(const std::string& name);

struct AnnealState {
    real tau;
    real kl_scale;
};
// tau decays exponentially from tau_start towards tau_end; kl_scale ramps
// linearly from 0 to 1 across the warmup epochs and stays at 1 afterwards.
AnnealState anneal(int epoch, const TrainConfig& cfg);

// Trips after three consecutive non-finite losses.
class DivergenceMonitor {
public:
    bool record(bool finite) {
        consecutive_ = finite ? 0 : consecutive_ + 1;
        return consecutive_ >= 3;
    }
    int consecutive() const { return consecutive_; }

private:
    int consecutive_ = 0;
};

struct EpochRecord {
    int epoch = 0;
    std::string split;
    ElboBreakdown breakdown;
    real tau = real(1);
    real kl_scale = real(1);
    long wall_ms = 0;
};

struct CheckpointManifest {
    ModelHyperParams hyper;
    int epoch = -1;
    uint64_t corpus_hash = 0;
    uint64_t config_hash = 0;
    uint64_t param_hash = 0;
};
std::string manifest_to_json(const CheckpointManifest& m);
CheckpointManifest manifest_from_json(const std::string& text);
void save_manifest(const std::string& path, const CheckpointManifest& m);
CheckpointManifest load_manifest(const std::string& path);

struct TrainResult {
    ParameterStore store;       // final parameters
    ParameterStore best_store;  // parameters at the best validation epoch
    int best_epoch = -1;
    real best_val_elbo = real(0);
    std::vector<real> step_losses;
    std::vector<EpochRecord> epoch_log;
    std::string best_checkpoint_path;  // empty when outdir is empty
    long guard_events = 0;
    long skipped_batches = 0;
};

// Minibatch optimization of the objective over the training split, with
// per-epoch train/validation logging and best-validation checkpointing.
// When `outdir` is non-empty, writes metrics.jsonl, steps.jsonl and
// checkpoint files there. Aborts with DivergenceError after three
// consecutive non-finite losses.
TrainResult train(const CorpusSequence& corpus, const SplitSpec& split,
                  const ModelHyperParams& hyper, const TrainConfig& cfg,
                  const std::string& outdir = "", uint64_t config_hash = 0);

}  // namespace ndftm
