#pragma once

#include <array>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ndftm/tensor.hpp"

namespace ndftm {

// Token ids are indices into the lexicographically sorted token list, so a
// corpus re-serialized and re-ingested maps to identical ids.
struct Vocabulary {
    std::vector<std::string> tokens;
    std::map<std::string, int> index;

    int size() const { return static_cast<int>(tokens.size()); }
    int id_of(const std::string& tok) const {
        auto it = index.find(tok);
        return it == index.end() ? -1 : it->second;
    }
    const std::string& token_of(int id) const { return tokens.at(static_cast<size_t>(id)); }

    static Vocabulary from_tokens(std::vector<std::string> sorted_unique);
};

struct TimeStampedDocument {
    int slice_index = 0;
    // (token id, count), sorted by id, counts >= 1
    std::vector<std::pair<int, int>> counts;
    long token_total = 0;

    // Relative-frequency vector over the vocabulary (1 x V).
    Tensor normalized_bow(int vocab_size) const;
};

enum class Split : uint8_t { Train = 0, Valid = 1, Test = 2 };
const char* split_name(Split s);
Split split_from_name(const std::string& s);

struct SplitSpec {
    // assignment[t][d] parallels CorpusSequence::slices
    std::vector<std::vector<Split>> assignment;
    uint64_t split_seed = 0;
    uint64_t completion_seed = 0;

    Split of(int t, int d) const { return assignment[static_cast<size_t>(t)][static_cast<size_t>(d)]; }
};

struct CorpusSequence {
    Vocabulary vocabulary;
    std::vector<std::vector<TimeStampedDocument>> slices;
    // Per-slice aggregate of training-document counts, normalized to sum 1
    // (all zero for slices without training documents). Each row is 1 x V.
    std::vector<Tensor> slice_bow;

    int num_slices() const { return static_cast<int>(slices.size()); }
    int vocab_size() const { return vocabulary.size(); }
    long num_docs() const;
    long num_docs_in(int t, Split s, const SplitSpec& spec) const;

    Tensor slice_bow_matrix() const;  // T x V
};

struct IngestRecord {
    double timestamp = 0.0;
    std::vector<std::string> tokens;
};

struct SliceSpec {
    double width = 1.0;                  // must be > 0
    std::optional<double> origin;        // default: minimum timestamp seen
};

struct VocabOptions {
    int min_count = 1;          // minimum total occurrences across the corpus
    double max_fraction = 1.0;  // drop tokens present in more than this fraction of documents
    std::set<std::string> stopwords;
};

// Deterministic for identical inputs. slice_bow of the result treats every
// document as training; call recompute_slice_bow once a split exists.
CorpusSequence ingest(const std::vector<IngestRecord>& records, const SliceSpec& slicing,
                      const VocabOptions& vocab_opts);

// Per-slice stratified assignment, reproducible by seed. Slices with fewer
// than 3 documents go entirely to train; a warning is recorded per incident.
SplitSpec make_split(const CorpusSequence& corpus, std::array<double, 3> fractions, uint64_t seed,
                     std::vector<std::string>* warnings = nullptr);

void recompute_slice_bow(CorpusSequence& corpus, const SplitSpec& spec);

struct CompletionHalves {
    std::vector<std::pair<int, int>> first;
    std::vector<std::pair<int, int>> second;
    long first_total = 0;
    long second_total = 0;
};

// Seeded uniform shuffle of the token-occurrence list; the two halves
// partition the document's token multiset and differ in size by at most one.
// Documents with fewer than two tokens cannot be halved and yield nullopt.
std::optional<CompletionHalves> completion_halves(const TimeStampedDocument& doc, uint64_t seed);

// Input readers. TSV lines are `timestamp<TAB>whitespace-tokenized text`;
// JSONL lines are {"t": <number>, "tokens": [<str>...]}.
std::vector<IngestRecord> read_records_tsv(const std::string& path);
std::vector<IngestRecord> read_records_jsonl(const std::string& path);
std::vector<IngestRecord> read_records_auto(const std::string& path);

// Corpus bundle: a single canonical-JSON file holding vocabulary, slices,
// slice_bow and the split. Serialization is byte-deterministic.
std::string bundle_to_json(const CorpusSequence& corpus, const SplitSpec& spec);
void save_bundle(const std::string& path, const CorpusSequence& corpus, const SplitSpec& spec);
std::pair<CorpusSequence, SplitSpec> load_bundle(const std::string& path);
uint64_t corpus_hash(const CorpusSequence& corpus, const SplitSpec& spec);

// Structural invariant checks; throws InputError with a description.
void validate_corpus(const CorpusSequence& corpus, const SplitSpec* spec = nullptr);

}  // namespace ndftm
