#include "ndftm/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"

namespace ndftm {

using nlohmann::json;

Vocabulary Vocabulary::from_tokens(std::vector<std::string> sorted_unique) {
    Vocabulary v;
    v.tokens = std::move(sorted_unique);
    for (size_t i = 0; i < v.tokens.size(); ++i) {
        auto [it, inserted] = v.index.emplace(v.tokens[i], static_cast<int>(i));
        if (!inserted) throw InputError("vocabulary: duplicate token '" + v.tokens[i] + "'");
    }
    if (v.size() < 2) throw InputError("vocabulary: need at least 2 tokens, have " +
                                       std::to_string(v.size()));
    return v;
}

Tensor TimeStampedDocument::normalized_bow(int vocab_size) const {
    Tensor w(1, vocab_size);
    const real inv = token_total > 0 ? real(1) / static_cast<real>(token_total) : real(0);
    for (const auto& [id, c] : counts) w.d[id] = static_cast<real>(c) * inv;
    return w;
}

const char* split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Valid: return "valid";
        case Split::Test: return "test";
    }
    return "?";
}

Split split_from_name(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "valid") return Split::Valid;
    if (s == "test") return Split::Test;
    throw InputError("unknown split name: " + s);
}

long CorpusSequence::num_docs() const {
    long n = 0;
    for (const auto& s : slices) n += static_cast<long>(s.size());
    return n;
}

long CorpusSequence::num_docs_in(int t, Split s, const SplitSpec& spec) const {
    long n = 0;
    const auto& asg = spec.assignment[static_cast<size_t>(t)];
    for (Split a : asg) {
        if (a == s) ++n;
    }
    return n;
}

Tensor CorpusSequence::slice_bow_matrix() const {
    Tensor m(num_slices(), vocab_size());
    for (int t = 0; t < num_slices(); ++t) {
        std::copy(slice_bow[t].d.begin(), slice_bow[t].d.end(), m.row_ptr(t));
    }
    return m;
}

CorpusSequence ingest(const std::vector<IngestRecord>& records, const SliceSpec& slicing,
                      const VocabOptions& vocab_opts) {
    if (slicing.width <= 0.0) {
        throw ConfigError("slice spec: width must be positive, got " +
                          std::to_string(slicing.width));
    }
    if (records.empty()) throw InputError("ingest: no input records");

    double origin = slicing.origin.value_or(records.front().timestamp);
    if (!slicing.origin) {
        for (const auto& r : records) origin = std::min(origin, r.timestamp);
    }
    auto slice_of = [&](double ts) {
        const double rel = (ts - origin) / slicing.width;
        if (rel < 0.0) {
            throw InputError("ingest: timestamp " + std::to_string(ts) +
                             " precedes slice origin " + std::to_string(origin));
        }
        return static_cast<int>(std::floor(rel));
    };

    // Pass 1: token totals and document frequencies after stopword removal.
    std::unordered_map<std::string, long> total_count;
    std::unordered_map<std::string, long> doc_freq;
    long raw_docs = 0;
    for (const auto& r : records) {
        std::unordered_set<std::string> seen;
        bool any = false;
        for (const auto& tok : r.tokens) {
            if (vocab_opts.stopwords.count(tok)) continue;
            any = true;
            ++total_count[tok];
            if (seen.insert(tok).second) ++doc_freq[tok];
        }
        if (any) ++raw_docs;
    }
    if (raw_docs == 0) throw InputError("ingest: corpus empty after stopword filtering");

    std::vector<std::string> kept;
    for (const auto& [tok, cnt] : total_count) {
        if (cnt < vocab_opts.min_count) continue;
        const double frac = static_cast<double>(doc_freq[tok]) / static_cast<double>(raw_docs);
        if (frac > vocab_opts.max_fraction) continue;
        kept.push_back(tok);
    }
    std::sort(kept.begin(), kept.end());
    if (kept.size() < 2) {
        throw InputError("ingest: vocabulary has " + std::to_string(kept.size()) +
                         " tokens after filtering; need at least 2");
    }

    CorpusSequence corpus;
    corpus.vocabulary = Vocabulary::from_tokens(std::move(kept));

    int max_slice = 0;
    std::vector<std::pair<int, TimeStampedDocument>> docs;
    for (const auto& r : records) {
        std::map<int, int> counts;
        for (const auto& tok : r.tokens) {
            const int id = corpus.vocabulary.id_of(tok);
            if (id >= 0) ++counts[id];
        }
        if (counts.empty()) continue;  // emptied by filtering
        TimeStampedDocument doc;
        doc.slice_index = slice_of(r.timestamp);
        for (const auto& [id, c] : counts) {
            doc.counts.emplace_back(id, c);
            doc.token_total += c;
        }
        max_slice = std::max(max_slice, doc.slice_index);
        docs.emplace_back(doc.slice_index, std::move(doc));
    }
    if (docs.empty()) throw InputError("ingest: corpus empty after vocabulary filtering");

    corpus.slices.resize(static_cast<size_t>(max_slice) + 1);
    for (auto& [t, doc] : docs) corpus.slices[static_cast<size_t>(t)].push_back(std::move(doc));

    int distinct = 0;
    for (const auto& s : corpus.slices) {
        if (!s.empty()) ++distinct;
    }
    if (distinct < 2) {
        throw InputError("ingest: need at least 2 distinct time slices, have " +
                         std::to_string(distinct));
    }

    // Pre-split aggregate treats every document as training.
    SplitSpec all_train;
    all_train.assignment.resize(corpus.slices.size());
    for (size_t t = 0; t < corpus.slices.size(); ++t) {
        all_train.assignment[t].assign(corpus.slices[t].size(), Split::Train);
    }
    recompute_slice_bow(corpus, all_train);
    return corpus;
}

SplitSpec make_split(const CorpusSequence& corpus, std::array<double, 3> fractions, uint64_t seed,
                     std::vector<std::string>* warnings) {
    double sum = 0.0;
    for (double f : fractions) {
        if (f <= 0.0) throw ConfigError("split fractions must be positive");
        sum += f;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
        throw ConfigError("split fractions must sum to 1, got " + std::to_string(sum));
    }

    SplitSpec spec;
    spec.split_seed = seed;
    spec.completion_seed = seed;
    spec.assignment.resize(corpus.slices.size());
    Rng base(seed);
    for (size_t t = 0; t < corpus.slices.size(); ++t) {
        const int n = static_cast<int>(corpus.slices[t].size());
        auto& asg = spec.assignment[t];
        asg.assign(static_cast<size_t>(n), Split::Train);
        if (n == 0) continue;
        if (n < 3) {
            if (warnings) {
                warnings->push_back("slice " + std::to_string(t) + " has " + std::to_string(n) +
                                    " document(s); assigning all to train");
            }
            continue;
        }
        // Largest-remainder apportionment; remainder ties resolved in
        // (train, valid, test) order.
        std::array<int, 3> take{};
        std::array<double, 3> frac_part{};
        int assigned = 0;
        for (int i = 0; i < 3; ++i) {
            const double q = fractions[static_cast<size_t>(i)] * n;
            take[static_cast<size_t>(i)] = static_cast<int>(std::floor(q));
            frac_part[static_cast<size_t>(i)] = q - std::floor(q);
            assigned += take[static_cast<size_t>(i)];
        }
        while (assigned < n) {
            int best = 0;
            for (int i = 1; i < 3; ++i) {
                if (frac_part[static_cast<size_t>(i)] > frac_part[static_cast<size_t>(best)] + 1e-12) best = i;
            }
            ++take[static_cast<size_t>(best)];
            frac_part[static_cast<size_t>(best)] = -1.0;
            ++assigned;
        }
        if (take[0] == 0) {  // every slice keeps at least one training document
            int donor = take[1] >= take[2] ? 1 : 2;
            --take[static_cast<size_t>(donor)];
            ++take[0];
        }
        std::vector<int> order(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
        Rng slice_rng = base.fork(hash_mix(0x5f17ce, t));
        shuffle_inplace(order.begin(), order.end(), slice_rng);
        int pos = 0;
        for (int i = 0; i < take[0]; ++i) asg[static_cast<size_t>(order[static_cast<size_t>(pos++)])] = Split::Train;
        for (int i = 0; i < take[1]; ++i) asg[static_cast<size_t>(order[static_cast<size_t>(pos++)])] = Split::Valid;
        for (int i = 0; i < take[2]; ++i) asg[static_cast<size_t>(order[static_cast<size_t>(pos++)])] = Split::Test;
    }
    return spec;
}

void recompute_slice_bow(CorpusSequence& corpus, const SplitSpec& spec) {
    if (spec.assignment.size() != corpus.slices.size()) {
        throw InputError("split assignment does not match corpus slice count");
    }
    corpus.slice_bow.assign(static_cast<size_t>(corpus.num_slices()),
                            Tensor::zeros(1, corpus.vocab_size()));
    for (size_t t = 0; t < corpus.slices.size(); ++t) {
        Tensor& bow = corpus.slice_bow[t];
        real total = real(0);
        for (size_t d = 0; d < corpus.slices[t].size(); ++d) {
            if (spec.assignment[t][d] != Split::Train) continue;
            for (const auto& [id, c] : corpus.slices[t][d].counts) {
                bow.d[static_cast<size_t>(id)] += static_cast<real>(c);
                total += static_cast<real>(c);
            }
        }
        if (total > real(0)) {
            const real inv = real(1) / total;
            for (auto& v : bow.d) v *= inv;
        }
    }
}

std::optional<CompletionHalves> completion_halves(const TimeStampedDocument& doc, uint64_t seed) {
    if (doc.token_total < 2) return std::nullopt;
    std::vector<int> occurrences;
    occurrences.reserve(static_cast<size_t>(doc.token_total));
    uint64_t h = hash_mix(seed, static_cast<uint64_t>(doc.slice_index));
    for (const auto& [id, c] : doc.counts) {
        h = hash_mix(h, (static_cast<uint64_t>(id) << 20) ^ static_cast<uint64_t>(c));
        for (int i = 0; i < c; ++i) occurrences.push_back(id);
    }
    Rng rng(h);
    shuffle_inplace(occurrences.begin(), occurrences.end(), rng);

    const size_t n_first = (occurrences.size() + 1) / 2;
    std::map<int, int> first, second;
    for (size_t i = 0; i < occurrences.size(); ++i) {
        (i < n_first ? first : second)[occurrences[i]] += 1;
    }
    CompletionHalves out;
    for (const auto& [id, c] : first) {
        out.first.emplace_back(id, c);
        out.first_total += c;
    }
    for (const auto& [id, c] : second) {
        out.second.emplace_back(id, c);
        out.second_total += c;
    }
    return out;
}

namespace {

std::vector<std::string> whitespace_tokens(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream is(text);
    std::string tok;
    while (is >> tok) out.push_back(tok);
    return out;
}

}  // namespace

std::vector<IngestRecord> read_records_tsv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw InputError("cannot open input file: " + path);
    std::vector<IngestRecord> out;
    std::string line;
    long lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) {
            throw InputError(path + ":" + std::to_string(lineno) + ": expected TAB separator");
        }
        IngestRecord rec;
        try {
            rec.timestamp = std::stod(line.substr(0, tab));
        } catch (const std::exception&) {
            throw InputError(path + ":" + std::to_string(lineno) + ": bad timestamp '" +
                             line.substr(0, tab) + "'");
        }
        rec.tokens = whitespace_tokens(line.substr(tab + 1));
        out.push_back(std::move(rec));
    }
    return out;
}

std::vector<IngestRecord> read_records_jsonl(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw InputError("cannot open input file: " + path);
    std::vector<IngestRecord> out;
    std::string line;
    long lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw InputError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
        if (!j.contains("t") || !j.contains("tokens") || !j["tokens"].is_array()) {
            throw InputError(path + ":" + std::to_string(lineno) +
                             ": expected {\"t\": number, \"tokens\": [...]}");
        }
        IngestRecord rec;
        rec.timestamp = j["t"].get<double>();
        for (const auto& tok : j["tokens"]) rec.tokens.push_back(tok.get<std::string>());
        out.push_back(std::move(rec));
    }
    return out;
}

std::vector<IngestRecord> read_records_auto(const std::string& path) {
    if (path.size() >= 6 && path.substr(path.size() - 6) == ".jsonl") {
        return read_records_jsonl(path);
    }
    std::ifstream f(path);
    if (!f) throw InputError("cannot open input file: " + path);
    std::string first;
    std::getline(f, first);
    f.close();
    if (!first.empty() && first.front() == '{') return read_records_jsonl(path);
    return read_records_tsv(path);
}

std::string bundle_to_json(const CorpusSequence& corpus, const SplitSpec& spec) {
    json j;
    j["format"] = "ndftm-corpus";
    j["version"] = 1;
    j["vocabulary"] = corpus.vocabulary.tokens;
    json slices = json::array();
    for (size_t t = 0; t < corpus.slices.size(); ++t) {
        json slice = json::array();
        for (size_t d = 0; d < corpus.slices[t].size(); ++d) {
            const auto& doc = corpus.slices[t][d];
            json counts = json::array();
            for (const auto& [id, c] : doc.counts) counts.push_back(json::array({id, c}));
            json jd;
            jd["c"] = std::move(counts);
            jd["s"] = split_name(spec.assignment[t][d]);
            slice.push_back(std::move(jd));
        }
        slices.push_back(std::move(slice));
    }
    j["slices"] = std::move(slices);
    json bows = json::array();
    for (const auto& bow : corpus.slice_bow) bows.push_back(bow.d);
    j["slice_bow"] = std::move(bows);
    j["split_seed"] = spec.split_seed;
    j["completion_seed"] = spec.completion_seed;
    return j.dump();
}

void save_bundle(const std::string& path, const CorpusSequence& corpus, const SplitSpec& spec) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw InputError("cannot write corpus bundle: " + path);
    f << bundle_to_json(corpus, spec);
}

std::pair<CorpusSequence, SplitSpec> load_bundle(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw InputError("cannot open corpus bundle: " + path);
    json j;
    try {
        j = json::parse(f);
    } catch (const json::exception& e) {
        throw InputError("corpus bundle " + path + ": " + e.what());
    }
    if (j.value("format", "") != "ndftm-corpus" || j.value("version", 0) != 1) {
        throw InputError("corpus bundle " + path + ": unrecognized format");
    }
    CorpusSequence corpus;
    corpus.vocabulary = Vocabulary::from_tokens(j["vocabulary"].get<std::vector<std::string>>());
    SplitSpec spec;
    spec.split_seed = j["split_seed"].get<uint64_t>();
    spec.completion_seed = j["completion_seed"].get<uint64_t>();
    for (const auto& slice : j["slices"]) {
        corpus.slices.emplace_back();
        spec.assignment.emplace_back();
        int t = static_cast<int>(corpus.slices.size()) - 1;
        for (const auto& jd : slice) {
            TimeStampedDocument doc;
            doc.slice_index = t;
            for (const auto& pair : jd["c"]) {
                const int id = pair[0].get<int>();
                const int c = pair[1].get<int>();
                doc.counts.emplace_back(id, c);
                doc.token_total += c;
            }
            corpus.slices.back().push_back(std::move(doc));
            spec.assignment.back().push_back(split_from_name(jd["s"].get<std::string>()));
        }
    }
    for (const auto& bow : j["slice_bow"]) {
        corpus.slice_bow.push_back(Tensor::row(bow.get<std::vector<real>>()));
        if (corpus.slice_bow.back().c != corpus.vocab_size()) {
            throw InputError("corpus bundle " + path + ": slice_bow width mismatch");
        }
    }
    validate_corpus(corpus, &spec);
    return {std::move(corpus), std::move(spec)};
}

uint64_t corpus_hash(const CorpusSequence& corpus, const SplitSpec& spec) {
    return fnv1a(bundle_to_json(corpus, spec));
}

void validate_corpus(const CorpusSequence& corpus, const SplitSpec* spec) {
    if (corpus.num_slices() < 2) throw InputError("corpus: need at least 2 time slices");
    if (corpus.vocab_size() < 2) throw InputError("corpus: vocabulary too small");
    const int v = corpus.vocab_size();
    for (int t = 0; t < corpus.num_slices(); ++t) {
        for (const auto& doc : corpus.slices[static_cast<size_t>(t)]) {
            if (doc.slice_index != t) throw InputError("corpus: document slice index mismatch");
            if (doc.token_total < 1) throw InputError("corpus: empty document");
            long total = 0;
            int prev = -1;
            for (const auto& [id, c] : doc.counts) {
                if (id <= prev || id >= v) throw InputError("corpus: bad token id ordering");
                if (c < 1) throw InputError("corpus: non-positive count");
                prev = id;
                total += c;
            }
            if (total != doc.token_total) throw InputError("corpus: token_total mismatch");
        }
    }
    if (static_cast<int>(corpus.slice_bow.size()) != corpus.num_slices()) {
        throw InputError("corpus: slice_bow length mismatch");
    }
    for (int t = 0; t < corpus.num_slices(); ++t) {
        const auto& bow = corpus.slice_bow[static_cast<size_t>(t)];
        real sum = real(0);
        for (real x : bow.d) sum += x;
        const bool empty_slice = corpus.slices[static_cast<size_t>(t)].empty();
        if (empty_slice) {
            if (sum != real(0)) throw InputError("corpus: empty slice has nonzero slice_bow");
        } else if (spec) {
            bool has_train = false;
            for (Split s : spec->assignment[static_cast<size_t>(t)]) {
                if (s == Split::Train) has_train = true;
            }
            if (has_train && std::abs(sum - real(1)) > real(1e-9)) {
                throw InputError("corpus: slice_bow of slice " + std::to_string(t) +
                                 " sums to " + std::to_string(sum));
            }
        }
    }
    if (spec) {
        if (spec->assignment.size() != corpus.slices.size()) {
            throw InputError("split: assignment shape mismatch");
        }
        for (size_t t = 0; t < corpus.slices.size(); ++t) {
            if (spec->assignment[t].size() != corpus.slices[t].size()) {
                throw InputError("split: assignment shape mismatch at slice " + std::to_string(t));
            }
            if (!corpus.slices[t].empty()) {
                bool has_train = false;
                for (Split s : spec->assignment[t]) {
                    if (s == Split::Train) has_train = true;
                }
                if (!has_train) {
                    throw InputError("split: slice " + std::to_string(t) +
                                     " has no training documents");
                }
            }
        }
    }
}

}  // namespace ndftm
