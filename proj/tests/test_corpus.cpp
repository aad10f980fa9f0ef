#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "ndftm/corpus.hpp"

using namespace ndftm;

namespace {

IngestRecord rec(double ts, std::vector<std::string> tokens) {
    return IngestRecord{ts, std::move(tokens)};
}

std::map<int, int> count_map(const TimeStampedDocument& doc) {
    return {doc.counts.begin(), doc.counts.end()};
}

}  // namespace

TEST_CASE("ingest basics") {
    SUBCASE("one document per yearly slice") {
        auto corpus = ingest({rec(1970, {"a", "b"}), rec(1971, {"a", "b"})}, {1.0, {}}, {});
        CHECK(corpus.num_slices() == 2);
        CHECK(corpus.slices[0].size() == 1);
        CHECK(corpus.slices[1].size() == 1);
    }
    SUBCASE("token counting") {
        auto corpus = ingest({rec(0, {"a", "a", "b"}), rec(1, {"b"})}, {1.0, {}}, {});
        const auto& doc = corpus.slices[0][0];
        CHECK(doc.token_total == 3);
        const int a = corpus.vocabulary.id_of("a");
        const int b = corpus.vocabulary.id_of("b");
        auto counts = count_map(doc);
        CHECK(counts.at(a) == 2);
        CHECK(counts.at(b) == 1);
    }
    SUBCASE("min-count filter removes rare tokens everywhere") {
        VocabOptions opts;
        opts.min_count = 2;
        auto corpus = ingest({rec(0, {"a", "a", "b", "b", "c"}), rec(1, {"a", "b"})}, {1.0, {}}, opts);
        CHECK(corpus.vocabulary.id_of("c") == -1);
        CHECK(corpus.vocabulary.size() == 2);
        for (const auto& slice : corpus.slices) {
            for (const auto& doc : slice) {
                for (const auto& [id, c] : doc.counts) CHECK(id < corpus.vocab_size());
            }
        }
    }
    SUBCASE("max-fraction filter drops ubiquitous tokens") {
        VocabOptions opts;
        opts.max_fraction = 0.5;
        auto corpus = ingest({rec(0, {"the", "a", "b"}), rec(1, {"the", "c", "d"}),
                              rec(2, {"the", "a", "c"}), rec(3, {"b", "d"})},
                             {1.0, {}}, opts);
        CHECK(corpus.vocabulary.id_of("the") == -1);  // in 3/4 docs
        CHECK(corpus.vocabulary.id_of("a") >= 0);     // in 2/4 docs
        CHECK(corpus.vocabulary.size() == 4);
    }
    SUBCASE("stopwords are dropped before counting") {
        VocabOptions opts;
        opts.stopwords = {"the"};
        auto corpus = ingest({rec(0, {"the", "a", "b"}), rec(1, {"a", "b"})}, {1.0, {}}, opts);
        CHECK(corpus.vocabulary.id_of("the") == -1);
    }
    SUBCASE("documents emptied by filtering are dropped") {
        VocabOptions opts;
        opts.min_count = 2;
        auto corpus = ingest({rec(0, {"a", "b"}), rec(1, {"a", "b"}), rec(2, {"zzz"})}, {1.0, {}}, opts);
        CHECK(corpus.num_slices() == 2);  // the zzz-only doc vanished along with slice 2
    }
    SUBCASE("deterministic output for identical inputs") {
        std::vector<IngestRecord> records{rec(0, {"b", "a", "a"}), rec(2, {"c", "a"}),
                                          rec(1, {"b", "c"})};
        auto c1 = ingest(records, {1.0, {}}, {});
        auto c2 = ingest(records, {1.0, {}}, {});
        SplitSpec all1;
        all1.assignment.resize(c1.slices.size());
        for (size_t t = 0; t < c1.slices.size(); ++t) {
            all1.assignment[t].assign(c1.slices[t].size(), Split::Train);
        }
        CHECK(bundle_to_json(c1, all1) == bundle_to_json(c2, all1));
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(ingest({rec(0, {"a", "b"})}, {0.0, {}}, {}), ConfigError);   // bad width
        CHECK_THROWS_AS(ingest({rec(0, {"a", "b"}), rec(0.5, {"a", "b"})}, {1.0, {}}, {}),
                        InputError);  // one slice only
        VocabOptions harsh;
        harsh.min_count = 100;
        CHECK_THROWS_AS(ingest({rec(0, {"a"}), rec(1, {"b"})}, {1.0, {}}, harsh), InputError);
    }
    SUBCASE("empty slices are retained with zero slice_bow") {
        auto corpus = ingest({rec(0, {"a", "b"}), rec(2, {"a", "b"})}, {1.0, {}}, {});
        CHECK(corpus.num_slices() == 3);
        CHECK(corpus.slices[1].empty());
        for (real v : corpus.slice_bow[1].d) CHECK(v == real(0));
        validate_corpus(corpus);
    }
}

TEST_CASE("split") {
    auto make_corpus = [](int docs_per_slice, int slices) {
        std::vector<IngestRecord> records;
        for (int t = 0; t < slices; ++t) {
            for (int d = 0; d < docs_per_slice; ++d) {
                records.push_back(rec(t, {"a", "b", d % 2 ? "c" : "d"}));
            }
        }
        return ingest(records, {1.0, {}}, {});
    };

    SUBCASE("exact fractions 8/1/1 per slice of 10") {
        auto corpus = make_corpus(10, 3);
        SplitSpec spec = make_split(corpus, {0.8, 0.1, 0.1}, 5);
        for (int t = 0; t < 3; ++t) {
            int n_train = 0, n_valid = 0, n_test = 0;
            for (Split s : spec.assignment[static_cast<size_t>(t)]) {
                if (s == Split::Train) ++n_train;
                else if (s == Split::Valid) ++n_valid;
                else ++n_test;
            }
            CHECK(n_train == 8);
            CHECK(n_valid == 1);
            CHECK(n_test == 1);
        }
    }
    SUBCASE("same seed twice gives an identical assignment") {
        auto corpus = make_corpus(13, 4);
        SplitSpec a = make_split(corpus, {0.8, 0.1, 0.1}, 99);
        SplitSpec b = make_split(corpus, {0.8, 0.1, 0.1}, 99);
        CHECK(a.assignment == b.assignment);
        SplitSpec c = make_split(corpus, {0.8, 0.1, 0.1}, 100);
        CHECK(a.assignment != c.assignment);
    }
    SUBCASE("fractions must sum to one") {
        auto corpus = make_corpus(4, 2);
        CHECK_THROWS_AS(make_split(corpus, {0.5, 0.5, 0.2}, 1), ConfigError);
        CHECK_THROWS_AS(make_split(corpus, {0.8, 0.3, -0.1}, 1), ConfigError);
    }
    SUBCASE("slices with fewer than 3 documents fall back to all-train with a warning") {
        auto corpus = make_corpus(2, 2);
        std::vector<std::string> warnings;
        SplitSpec spec = make_split(corpus, {0.4, 0.3, 0.3}, 1, &warnings);
        CHECK(warnings.size() == 2);
        for (const auto& slice : spec.assignment) {
            for (Split s : slice) CHECK(s == Split::Train);
        }
    }
    SUBCASE("every slice keeps at least one training document") {
        auto corpus = make_corpus(3, 5);
        SplitSpec spec = make_split(corpus, {0.34, 0.33, 0.33}, 7);
        recompute_slice_bow(corpus, spec);
        validate_corpus(corpus, &spec);
    }
}

TEST_CASE("completion halves") {
    SUBCASE("a double token splits symmetrically") {
        TimeStampedDocument doc;
        doc.counts = {{0, 2}};
        doc.token_total = 2;
        auto halves = completion_halves(doc, 1);
        REQUIRE(halves.has_value());
        CHECK(halves->first == std::vector<std::pair<int, int>>{{0, 1}});
        CHECK(halves->second == std::vector<std::pair<int, int>>{{0, 1}});
    }
    SUBCASE("odd totals differ by one") {
        TimeStampedDocument doc;
        doc.counts = {{0, 1}, {1, 1}, {2, 1}};
        doc.token_total = 3;
        auto halves = completion_halves(doc, 2);
        REQUIRE(halves.has_value());
        CHECK(halves->first_total == 2);
        CHECK(halves->second_total == 1);
    }
    SUBCASE("documents with fewer than two tokens are excluded") {
        TimeStampedDocument doc;
        doc.counts = {{3, 1}};
        doc.token_total = 1;
        CHECK(!completion_halves(doc, 1).has_value());
    }
    SUBCASE("partition property on random documents") {
        Rng rng(123);
        for (int it = 0; it < 50; ++it) {
            TimeStampedDocument doc;
            const int n_words = 1 + static_cast<int>(rng.below(8));
            int id = 0;
            for (int w = 0; w < n_words; ++w) {
                id += 1 + static_cast<int>(rng.below(4));
                const int c = 1 + static_cast<int>(rng.below(5));
                doc.counts.emplace_back(id, c);
                doc.token_total += c;
            }
            if (doc.token_total < 2) continue;
            auto halves = completion_halves(doc, static_cast<uint64_t>(it));
            REQUIRE(halves.has_value());
            CHECK(std::abs(halves->first_total - halves->second_total) <= 1);
            std::map<int, int> merged;
            for (const auto& [w, c] : halves->first) merged[w] += c;
            for (const auto& [w, c] : halves->second) merged[w] += c;
            CHECK(merged == count_map(doc));
        }
    }
    SUBCASE("deterministic given document and seed") {
        TimeStampedDocument doc;
        doc.counts = {{0, 3}, {2, 2}, {5, 4}};
        doc.token_total = 9;
        auto a = completion_halves(doc, 7);
        auto b = completion_halves(doc, 7);
        CHECK(a->first == b->first);
        CHECK(a->second == b->second);
    }
}

TEST_CASE("slice aggregate uses training documents only") {
    auto corpus = ingest({rec(0, {"a", "a", "b"}), rec(0, {"b", "c"}), rec(0, {"c", "c"}),
                          rec(1, {"a", "b", "c"}), rec(1, {"a"}), rec(1, {"b"})},
                         {1.0, {}}, {});
    SplitSpec spec;
    spec.assignment = {{Split::Train, Split::Train, Split::Test},
                       {Split::Train, Split::Valid, Split::Test}};
    recompute_slice_bow(corpus, spec);
    // slice 0 training mass: a:2 b:2 c:1 over 5 tokens
    const int a = corpus.vocabulary.id_of("a");
    const int b = corpus.vocabulary.id_of("b");
    const int c = corpus.vocabulary.id_of("c");
    CHECK(corpus.slice_bow[0].d[static_cast<size_t>(a)] == doctest::Approx(0.4).epsilon(1e-9));
    CHECK(corpus.slice_bow[0].d[static_cast<size_t>(b)] == doctest::Approx(0.4).epsilon(1e-9));
    CHECK(corpus.slice_bow[0].d[static_cast<size_t>(c)] == doctest::Approx(0.2).epsilon(1e-9));
    real sum1 = 0;
    for (real v : corpus.slice_bow[1].d) sum1 += v;
    CHECK(sum1 == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("ingestion is idempotent on its own output") {
    std::vector<IngestRecord> records{rec(1970, {"war", "peace", "war"}),
                                      rec(1971, {"trade", "peace"}),
                                      rec(1972, {"war", "trade", "climate"}),
                                      rec(1972, {"climate", "climate"})};
    VocabOptions opts;
    opts.min_count = 2;
    auto first = ingest(records, {1.0, {}}, opts);

    std::vector<IngestRecord> reserialized;
    for (int t = 0; t < first.num_slices(); ++t) {
        for (const auto& doc : first.slices[static_cast<size_t>(t)]) {
            IngestRecord r;
            r.timestamp = t;
            for (const auto& [id, c] : doc.counts) {
                for (int i = 0; i < c; ++i) r.tokens.push_back(first.vocabulary.token_of(id));
            }
            reserialized.push_back(std::move(r));
        }
    }
    auto second = ingest(reserialized, {1.0, {}}, opts);
    SplitSpec all;
    all.assignment.resize(first.slices.size());
    for (size_t t = 0; t < first.slices.size(); ++t) {
        all.assignment[t].assign(first.slices[t].size(), Split::Train);
    }
    CHECK(bundle_to_json(first, all) == bundle_to_json(second, all));
}

TEST_CASE("bundle round-trip is byte-identical") {
    auto corpus = ingest({rec(0, {"a", "b", "b"}), rec(1, {"b", "c"}), rec(1, {"a", "c", "c"}),
                          rec(2, {"a", "b", "c"})},
                         {1.0, {}}, {});
    SplitSpec spec = make_split(corpus, {0.8, 0.1, 0.1}, 3);
    recompute_slice_bow(corpus, spec);
    const std::string json1 = bundle_to_json(corpus, spec);

    const auto path = std::filesystem::temp_directory_path() / "ndftm_bundle_test.json";
    save_bundle(path.string(), corpus, spec);
    auto [loaded, loaded_spec] = load_bundle(path.string());
    CHECK(bundle_to_json(loaded, loaded_spec) == json1);
    CHECK(corpus_hash(loaded, loaded_spec) == corpus_hash(corpus, spec));
    std::filesystem::remove(path);
}

TEST_CASE("record readers") {
    const auto dir = std::filesystem::temp_directory_path();
    SUBCASE("tsv") {
        const auto path = dir / "ndftm_recs.tsv";
        std::ofstream(path) << "1970\thello world hello\n1971\tfoo bar\n";
        auto records = read_records_tsv(path.string());
        REQUIRE(records.size() == 2);
        CHECK(records[0].timestamp == 1970);
        CHECK(records[0].tokens == std::vector<std::string>{"hello", "world", "hello"});
        std::filesystem::remove(path);
    }
    SUBCASE("jsonl") {
        const auto path = dir / "ndftm_recs.jsonl";
        std::ofstream(path) << R"({"t": 3, "tokens": ["x", "y"]})" << "\n"
                            << R"({"t": 4, "tokens": ["z"]})" << "\n";
        auto records = read_records_jsonl(path.string());
        REQUIRE(records.size() == 2);
        CHECK(records[1].timestamp == 4);
        CHECK(records[1].tokens == std::vector<std::string>{"z"});
        auto auto_records = read_records_auto(path.string());
        CHECK(auto_records.size() == 2);
        std::filesystem::remove(path);
    }
    SUBCASE("missing file") {
        CHECK_THROWS_AS(read_records_tsv("/nonexistent/file.tsv"), InputError);
    }
    SUBCASE("malformed lines") {
        const auto path = dir / "ndftm_bad.tsv";
        std::ofstream(path) << "not_a_number\ttext here\n";
        CHECK_THROWS_AS(read_records_tsv(path.string()), InputError);
        std::filesystem::remove(path);
    }
}
