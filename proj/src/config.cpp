#include "ndftm/config.hpp"

#include <fstream>
#include <sstream>

namespace ndftm {

namespace {

int to_int(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const int r = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("config: bad integer for " + key + ": '" + v + "'");
    }
}

double to_double(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const double r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("config: bad number for " + key + ": '" + v + "'");
    }
}

uint64_t to_u64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const uint64_t r = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("config: bad unsigned integer for " + key + ": '" + v + "'");
    }
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("config: bad boolean for " + key + ": '" + v + "'");
}

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

}  // namespace

void RunConfig::apply(const std::string& section, const std::string& key,
                      const std::string& value) {
    const std::string where = "[" + section + "] " + key;
    if (section == "run") {
        if (key == "seed") seed = to_u64(where, value);
        else if (key == "outdir") outdir = value;
        else if (key == "run_id") run_id = value;
        else if (key == "bundle") bundle = value;
        else if (key == "checkpoint") checkpoint = value;
        else throw ConfigError("config: unknown key " + where);
    } else if (section == "corpus") {
        if (key == "input") input = value;
        else if (key == "input_format") input_format = value;
        else if (key == "slice_width") slice_width = to_double(where, value);
        else if (key == "slice_origin") {
            if (value == "auto") slice_origin.reset();
            else slice_origin = to_double(where, value);
        }
        else if (key == "min_count") min_count = to_int(where, value);
        else if (key == "max_fraction") max_fraction = to_double(where, value);
        else if (key == "stopwords") stopwords = value;
        else if (key == "train_frac") train_frac = to_double(where, value);
        else if (key == "valid_frac") valid_frac = to_double(where, value);
        else if (key == "test_frac") test_frac = to_double(where, value);
        else throw ConfigError("config: unknown key " + where);
    } else if (section == "model") {
        if (key == "K") model.K = to_int(where, value);
        else if (key == "V") model.V = to_int(where, value);
        else if (key == "E") model.E = to_int(where, value);
        else if (key == "dim_xi") model.dim_xi = to_int(where, value);
        else if (key == "dim_eta") model.dim_eta = to_int(where, value);
        else if (key == "delta") model.delta = static_cast<real>(to_double(where, value));
        else if (key == "alpha0") model.alpha0 = static_cast<real>(to_double(where, value));
        else if (key == "tau") model.tau = static_cast<real>(to_double(where, value));
        else if (key == "transition_hidden") model.transition_hidden = to_int(where, value);
        else if (key == "lstm_hidden") model.lstm_hidden = to_int(where, value);
        else if (key == "posterior_hidden") model.posterior_hidden = to_int(where, value);
        else if (key == "linear_transition") model.linear_transition = to_bool(where, value);
        else if (key == "coupled") model.coupled = to_bool(where, value);
        else if (key == "bidirectional_encoder") model.bidirectional_encoder = to_bool(where, value);
        else throw ConfigError("config: unknown key " + where);
    } else if (section == "train") {
        if (key == "epochs") train.epochs = to_int(where, value);
        else if (key == "batch_size") train.batch_size = to_int(where, value);
        else if (key == "learning_rate") train.learning_rate = static_cast<real>(to_double(where, value));
        else if (key == "clip_norm") train.clip_norm = static_cast<real>(to_double(where, value));
        else if (key == "tau_start") train.tau_start = static_cast<real>(to_double(where, value));
        else if (key == "tau_end") train.tau_end = static_cast<real>(to_double(where, value));
        else if (key == "tau_decay") train.tau_decay = static_cast<real>(to_double(where, value));
        else if (key == "kl_warmup_epochs") train.kl_warmup_epochs = to_int(where, value);
        else if (key == "coupled_warmup_epochs") train.coupled_warmup_epochs = to_int(where, value);
        else if (key == "mc_samples") train.mc_samples = to_int(where, value);
        else if (key == "checkpoint_every") train.checkpoint_every = to_int(where, value);
        else if (key == "threads") train.threads = to_int(where, value);
        else if (key == "mask_estimator") train.mask_estimator = mask_estimator_from_name(value);
        else throw ConfigError("config: unknown key " + where);
    } else if (section == "eval") {
        if (key == "posterior_samples") eval.posterior_samples = to_int(where, value);
        else if (key == "tc_top_n") eval.tc_top_n = to_int(where, value);
        else if (key == "td_top_n") eval.td_top_n = to_int(where, value);
        else if (key == "pnll_particles") eval.pnll_particles = to_int(where, value);
        else if (key == "pnll_horizon") eval.pnll_horizon = to_int(where, value);
        else if (key == "split") eval.doc_split = split_from_name(value);
        else if (key == "threads") eval.threads = to_int(where, value);
        else if (key == "metrics") metrics = value;
        else throw ConfigError("config: unknown key " + where);
    } else if (section == "synth") {
        if (key == "T") synth_T = to_int(where, value);
        else if (key == "docs_per_slice") synth_docs = to_int(where, value);
        else if (key == "tokens_per_doc") synth_tokens = to_int(where, value);
        else if (key == "beta_sharpness") synth.beta_sharpness = static_cast<real>(to_double(where, value));
        else if (key == "activity_skew") synth.activity_skew = static_cast<real>(to_double(where, value));
        else if (key == "activity_scale") synth.activity_scale = static_cast<real>(to_double(where, value));
        else if (key == "zeta_scale") synth.zeta_scale = static_cast<real>(to_double(where, value));
        else if (key == "drift_scale") synth.drift_scale = static_cast<real>(to_double(where, value));
        else throw ConfigError("config: unknown key " + where);
    } else {
        throw ConfigError("config: unknown section [" + section + "]");
    }
}

std::string RunConfig::resolved_ini() const {
    std::ostringstream os;
    os.precision(17);
    os << "[run]\n";
    os << "seed = " << seed << "\n";
    os << "outdir = " << outdir << "\n";
    os << "run_id = " << run_id << "\n";
    os << "bundle = " << bundle << "\n";
    os << "checkpoint = " << checkpoint << "\n";
    os << "\n[corpus]\n";
    os << "input = " << input << "\n";
    os << "input_format = " << input_format << "\n";
    os << "slice_width = " << slice_width << "\n";
    os << "slice_origin = ";
    if (slice_origin) os << *slice_origin;
    else os << "auto";
    os << "\n";
    os << "min_count = " << min_count << "\n";
    os << "max_fraction = " << max_fraction << "\n";
    os << "stopwords = " << stopwords << "\n";
    os << "train_frac = " << train_frac << "\n";
    os << "valid_frac = " << valid_frac << "\n";
    os << "test_frac = " << test_frac << "\n";
    os << "\n[model]\n";
    os << "K = " << model.K << "\n";
    os << "V = " << model.V << "\n";
    os << "E = " << model.E << "\n";
    os << "dim_xi = " << model.dim_xi << "\n";
    os << "dim_eta = " << model.dim_eta << "\n";
    os << "delta = " << model.delta << "\n";
    os << "alpha0 = " << model.alpha0 << "\n";
    os << "tau = " << model.tau << "\n";
    os << "transition_hidden = " << model.transition_hidden << "\n";
    os << "lstm_hidden = " << model.lstm_hidden << "\n";
    os << "posterior_hidden = " << model.posterior_hidden << "\n";
    os << "linear_transition = " << (model.linear_transition ? "true" : "false") << "\n";
    os << "coupled = " << (model.coupled ? "true" : "false") << "\n";
    os << "bidirectional_encoder = " << (model.bidirectional_encoder ? "true" : "false") << "\n";
    os << "\n[train]\n";
    os << "epochs = " << train.epochs << "\n";
    os << "batch_size = " << train.batch_size << "\n";
    os << "learning_rate = " << train.learning_rate << "\n";
    os << "clip_norm = " << train.clip_norm << "\n";
    os << "tau_start = " << train.tau_start << "\n";
    os << "tau_end = " << train.tau_end << "\n";
    os << "tau_decay = " << train.tau_decay << "\n";
    os << "kl_warmup_epochs = " << train.kl_warmup_epochs << "\n";
    os << "coupled_warmup_epochs = " << train.coupled_warmup_epochs << "\n";
    os << "mc_samples = " << train.mc_samples << "\n";
    os << "checkpoint_every = " << train.checkpoint_every << "\n";
    os << "threads = " << train.threads << "\n";
    os << "mask_estimator = " << mask_estimator_name(train.mask_estimator) << "\n";
    os << "\n[eval]\n";
    os << "posterior_samples = " << eval.posterior_samples << "\n";
    os << "tc_top_n = " << eval.tc_top_n << "\n";
    os << "td_top_n = " << eval.td_top_n << "\n";
    os << "pnll_particles = " << eval.pnll_particles << "\n";
    os << "pnll_horizon = " << eval.pnll_horizon << "\n";
    os << "split = " << split_name(eval.doc_split) << "\n";
    os << "threads = " << eval.threads << "\n";
    os << "metrics = " << metrics << "\n";
    os << "\n[synth]\n";
    os << "T = " << synth_T << "\n";
    os << "docs_per_slice = " << synth_docs << "\n";
    os << "tokens_per_doc = " << synth_tokens << "\n";
    os << "beta_sharpness = " << synth.beta_sharpness << "\n";
    os << "activity_skew = " << synth.activity_skew << "\n";
    os << "activity_scale = " << synth.activity_scale << "\n";
    os << "zeta_scale = " << synth.zeta_scale << "\n";
    os << "drift_scale = " << synth.drift_scale << "\n";
    return os.str();
}

void load_config_file(RunConfig& cfg, const std::string& path) {
    std::ifstream f(path);
    if (!f) throw InputError("cannot open config file: " + path);
    std::string line;
    std::string section;
    long lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        std::string s = trim(line);
        if (s.empty() || s.front() == '#' || s.front() == ';') continue;
        if (s.front() == '[') {
            if (s.back() != ']') {
                throw ConfigError(path + ":" + std::to_string(lineno) + ": malformed section");
            }
            section = trim(s.substr(1, s.size() - 2));
            continue;
        }
        const auto eq = s.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
        }
        const std::string key = trim(s.substr(0, eq));
        const std::string value = trim(s.substr(eq + 1));
        if (section.empty()) {
            throw ConfigError(path + ":" + std::to_string(lineno) + ": key outside any section");
        }
        cfg.apply(section, key, value);
    }
}

void apply_overrides(RunConfig& cfg, const std::vector<Override>& overrides) {
    for (const auto& o : overrides) cfg.apply(o.section, o.key, o.value);
}

}  // namespace ndftm
