#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "heapr/corpus.hpp"

using namespace heapr;

TEST(Corpus, Deterministic) {
    CorpusSpec s;
    s.num_sequences = 200;
    const Corpus a = generate_corpus(s), b = generate_corpus(s);
    EXPECT_EQ(a.train, b.train);
    EXPECT_EQ(a.calib, b.calib);
    EXPECT_EQ(a.test, b.test);
    s.seed = 1;
    EXPECT_NE(generate_corpus(s).train, a.train);
}

TEST(Corpus, SkewedChainHasLowUnigramEntropy) {
    const Corpus c = generate_corpus(CorpusSpec{});
    const double h = unigram_entropy(c.train, 64);
    EXPECT_GT(h, 0.0);
    EXPECT_LT(h, std::log(64.0));
}

TEST(Corpus, UnigramEntropyHandValues) {
    EXPECT_NEAR(unigram_entropy(Batch{{0, 1, 2, 3}}, 4), std::log(4.0), 1e-15);
    EXPECT_EQ(unigram_entropy(Batch{{2, 2, 2}}, 4), 0.0);
    EXPECT_THROW(unigram_entropy(Batch{{5}}, 4), DataError);
}

TEST(Corpus, SplitSizesFollowFractions) {
    for (std::size_t n : {100u, 1024u, 333u}) {
        CorpusSpec s;
        s.num_sequences = n;
        s.train_fraction = 0.6;
        s.calib_fraction = 0.25;
        s.test_fraction = 0.15;
        const Corpus c = generate_corpus(s);
        EXPECT_NEAR(static_cast<double>(c.train.size()), 0.6 * n, 1.0);
        EXPECT_NEAR(static_cast<double>(c.calib.size()), 0.25 * n, 1.0);
        EXPECT_NEAR(static_cast<double>(c.test.size() + c.dropped_duplicates), 0.15 * n, 1.0);
        EXPECT_EQ(c.train.size() + c.calib.size() + c.test.size() + c.dropped_duplicates, n);
    }
}

TEST(Corpus, CalibAndTestDisjoint) {
    // short sequences over a tiny vocabulary collide often
    CorpusSpec s;
    s.vocab = 2;
    s.seq_len = 4;
    s.num_sequences = 400;
    const Corpus c = generate_corpus(s);
    EXPECT_GT(c.dropped_duplicates, 0u);
    const std::set<Sequence> calib(c.calib.begin(), c.calib.end());
    for (const auto& t : c.test) EXPECT_FALSE(calib.contains(t));
}

TEST(Corpus, TokensInRange) {
    CorpusSpec s;
    s.vocab = 7;
    s.num_sequences = 50;
    const Corpus c = generate_corpus(s);
    for (const Batch* b : {&c.train, &c.calib, &c.test})
        for (const auto& seq : *b) {
            EXPECT_EQ(seq.size(), s.seq_len);
            for (TokenId t : seq) EXPECT_LT(t, 7u);
        }
}

TEST(Corpus, InvalidSpec) {
    CorpusSpec s;
    s.train_fraction = 0.5;
    EXPECT_THROW(generate_corpus(s), ArgumentError);
    s = CorpusSpec{};
    s.vocab = 1;
    EXPECT_THROW(generate_corpus(s), ArgumentError);
    s = CorpusSpec{};
    s.num_sequences = 0;
    EXPECT_THROW(generate_corpus(s), ArgumentError);
}

TEST(Corpus, JsonRoundTrip) {
    CorpusSpec s;
    s.num_sequences = 40;
    const Corpus c = generate_corpus(s);
    const auto path = std::filesystem::temp_directory_path() / "heapr_corpus_test.json";
    save_corpus(c, path);
    const Corpus back = load_corpus(path);
    std::filesystem::remove(path);
    EXPECT_EQ(back.train, c.train);
    EXPECT_EQ(back.calib, c.calib);
    EXPECT_EQ(back.test, c.test);
    EXPECT_EQ(back.spec.seed, c.spec.seed);
}
