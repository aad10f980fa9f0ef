#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ndftm/metrics.hpp"
#include "ndftm/model.hpp"
#include "ndftm/trainer.hpp"

namespace ndftm {

// Declarative run configuration: flat key = value entries under [sections].
// Every field has a default except input paths; unknown keys are rejected.
// Command-line flags override file values.
struct RunConfig {
    // [run]
    uint64_t seed = 1;
    std::string outdir = "runs";
    std::string run_id;       // default: derived from the resolved config
    std::string bundle;       // corpus bundle path (train/eval/predict/diagnose)
    std::string checkpoint;   // checkpoint path (eval/predict/diagnose)

    // [corpus]
    std::string input;            // raw records path (ingest)
    std::string input_format = "auto";  // auto | tsv | jsonl
    double slice_width = 1.0;
    std::optional<double> slice_origin;
    int min_count = 1;
    double max_fraction = 1.0;
    std::string stopwords;        // optional path, one token per line
    double train_frac = 0.8;
    double valid_frac = 0.1;
    double test_frac = 0.1;

    // [model]
    ModelHyperParams model;

    // [train]
    TrainConfig train;

    // [eval]
    MetricOptions eval;
    std::string metrics = "all";

    // [synth]
    int synth_T = 12;
    int synth_docs = 100;
    int synth_tokens = 60;
    SynthDesign synth;

    void apply(const std::string& section, const std::string& key, const std::string& value);
    std::string resolved_ini() const;
    uint64_t config_hash() const { return fnv1a(resolved_ini()); }
};

// Parses an INI-style config file ('#' and ';' comments) into `cfg`,
// rejecting unknown sections and keys.
void load_config_file(RunConfig& cfg, const std::string& path);

struct Override {
    std::string section;
    std::string key;
    std::string value;
};
void apply_overrides(RunConfig& cfg, const std::vector<Override>& overrides);

}  // namespace ndftm
