#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>

#include "evolq/data.hpp"

using namespace evolq;

namespace {

std::string temp_path(const char* name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

} // namespace

TEST_CASE("synth dataset is deterministic per seed") {
    Dataset a = synth_dataset(32, 4, 8, 5, 123);
    Dataset b = synth_dataset(32, 4, 8, 5, 123);
    Dataset c = synth_dataset(32, 4, 8, 5, 124);
    REQUIRE(serialize_dataset(a) == serialize_dataset(b));
    REQUIRE(serialize_dataset(a) != serialize_dataset(c));
}

TEST_CASE("synth dataset labels round-robin and class means distinct") {
    const uint32_t classes = 6;
    Dataset ds = synth_dataset(60, 2, 16, classes, 7, 8.0);
    REQUIRE(ds.has_labels());
    for (uint32_t i = 0; i < ds.count; ++i) REQUIRE(ds.labels[i] == i % classes);

    // per-class mean embeddings: pairwise cosine < 1
    std::vector<std::vector<double>> means(classes,
                                           std::vector<double>(ds.sample_size(), 0.0));
    std::vector<int> counts(classes, 0);
    for (uint32_t i = 0; i < ds.count; ++i) {
        ++counts[ds.labels[i]];
        for (size_t j = 0; j < ds.sample_size(); ++j)
            means[ds.labels[i]][j] += ds.sample(i)[j];
    }
    for (uint32_t c = 0; c < classes; ++c)
        for (auto& v : means[c]) v /= counts[c];
    for (uint32_t a = 0; a < classes; ++a)
        for (uint32_t b = a + 1; b < classes; ++b) {
            double dot = 0, na = 0, nb = 0;
            for (size_t j = 0; j < ds.sample_size(); ++j) {
                dot += means[a][j] * means[b][j];
                na += means[a][j] * means[a][j];
                nb += means[b][j] * means[b][j];
            }
            REQUIRE(dot / std::sqrt(na * nb) < 0.999);
        }
}

TEST_CASE("nearest-class-mean classifier beats 90% at separation 4") {
    const uint32_t classes = 10;
    Dataset ds = synth_dataset(512, 4, 32, classes, 99, 4.0);
    std::vector<std::vector<double>> means(classes,
                                           std::vector<double>(ds.sample_size(), 0.0));
    std::vector<int> counts(classes, 0);
    for (uint32_t i = 0; i < ds.count; ++i) {
        ++counts[ds.labels[i]];
        for (size_t j = 0; j < ds.sample_size(); ++j)
            means[ds.labels[i]][j] += ds.sample(i)[j];
    }
    for (uint32_t c = 0; c < classes; ++c)
        for (auto& v : means[c]) v /= counts[c];
    int correct = 0;
    for (uint32_t i = 0; i < ds.count; ++i) {
        double best = 1e300;
        uint16_t arg = 0;
        for (uint16_t c = 0; c < classes; ++c) {
            double d2 = 0;
            for (size_t j = 0; j < ds.sample_size(); ++j) {
                double d = ds.sample(i)[j] - means[c][j];
                d2 += d * d;
            }
            if (d2 < best) {
                best = d2;
                arg = c;
            }
        }
        if (arg == ds.labels[i]) ++correct;
    }
    REQUIRE(double(correct) / ds.count > 0.90);
}

TEST_CASE("dataset file round-trip is byte-identical") {
    Dataset ds = synth_dataset(17, 3, 5, 4, 42);
    std::string path = temp_path("evq_test_roundtrip.evqd");
    save_dataset(ds, path);
    Dataset loaded = load_dataset(path);
    std::string again = temp_path("evq_test_roundtrip2.evqd");
    save_dataset(loaded, again);
    REQUIRE(read_file(path) == read_file(again));
    REQUIRE(loaded.count == ds.count);
    REQUIRE(loaded.labels == ds.labels);
    std::remove(path.c_str());
    std::remove(again.c_str());
}

TEST_CASE("bad magic and truncation are format errors with offsets") {
    Dataset ds = synth_dataset(4, 2, 3, 2, 1);
    std::string buf = serialize_dataset(ds);

    std::string bad = buf;
    bad[0] = 'X';
    REQUIRE_THROWS_AS(parse_dataset(bad, "bad"), FormatError);
    REQUIRE_THROWS_WITH(parse_dataset(bad, "bad"),
                        Catch::Matchers::ContainsSubstring("offset"));

    std::string trunc = buf.substr(0, buf.size() / 2);
    REQUIRE_THROWS_AS(parse_dataset(trunc, "trunc"), FormatError);

    std::string extra = buf + "zz";
    REQUIRE_THROWS_AS(parse_dataset(extra, "extra"), FormatError);
}

TEST_CASE("iterate is deterministic and drops ragged tails") {
    BatchPlan plan{32, 5, true};
    auto a = iterate(100, plan);
    auto b = iterate(100, plan);
    REQUIRE(a == b);
    REQUIRE(a.size() == 3);
    for (const auto& batch : a) REQUIRE(batch.size() == 32);

    // all indices distinct across batches
    std::set<uint32_t> seen;
    for (const auto& batch : a)
        for (uint32_t i : batch) REQUIRE(seen.insert(i).second);

    BatchPlan keep{32, 5, false};
    auto c = iterate(100, keep);
    REQUIRE(c.size() == 4);
    REQUIRE(c.back().size() == 4);

    BatchPlan other{32, 6, true};
    REQUIRE(iterate(100, other) != a);
}

TEST_CASE("iterate rejects zero batch size") {
    BatchPlan plan{0, 0, true};
    REQUIRE_THROWS_AS(iterate(10, plan), std::invalid_argument);
}
