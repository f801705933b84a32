#include <gtest/gtest.h>

#include <map>

#include "udr/random.hpp"
#include "udr/text.hpp"

using namespace udr;

TEST(Tokenize, LowercasesAndStripsSurroundingPunctuation) {
    EXPECT_EQ(tokenize("Hello, World!"), (std::vector<std::string>{"hello", "world"}));
    EXPECT_EQ(tokenize("  \"quoted\"  (x) "), (std::vector<std::string>{"quoted", "x"}));
}

TEST(Tokenize, KeepsInnerPunctuation) {
    EXPECT_EQ(tokenize("don't e-mail a.b"), (std::vector<std::string>{"don't", "e-mail", "a.b"}));
}

TEST(Tokenize, DropsPunctuationOnlyTokens) {
    EXPECT_EQ(tokenize("a -- b ... c"), (std::vector<std::string>{"a", "b", "c"}));
    EXPECT_TRUE(tokenize("").empty());
    EXPECT_TRUE(tokenize("  \t\n ").empty());
}

TEST(Tokenize, SplitsOnUnicodeWhitespace) {
    // U+00A0 no-break space, U+3000 ideographic space, U+2009 thin space.
    EXPECT_EQ(tokenize("a b　c d"), (std::vector<std::string>{"a", "b", "c", "d"}));
}

TEST(Tokenize, LowercasesOnlyAsciiLetters) {
    EXPECT_EQ(tokenize("Ünïcode ÉTÉ"), (std::vector<std::string>{"Ünïcode", "ÉtÉ"}));
}

TEST(Tokenize, CountMatchesTokens) {
    EXPECT_EQ(token_count("one two, three."), 3u);
}

TEST(NormalizeWhitespace, CollapsesRuns) {
    EXPECT_EQ(normalize_whitespace("  a \n\t b  c "), "a b c");
    EXPECT_EQ(normalize_whitespace(""), "");
}

TEST(Fnv1a, KnownVectors) {
    // Published FNV-1a 64-bit test vectors.
    EXPECT_EQ(Fnv1a().digest(), 0xcbf29ce484222325ULL);
    EXPECT_EQ(Fnv1a().update("a", 1).digest(), 0xaf63dc4c8601ec8cULL);
    EXPECT_EQ(Fnv1a().update("foobar", 6).digest(), 0x85944171f73967e8ULL);
}

TEST(Fnv1a, StringUpdatesAreLengthDelimited) {
    EXPECT_NE(Fnv1a().update("ab").update("c").digest(), Fnv1a().update("a").update("bc").digest());
}

TEST(Random, UniformIndexIsRoughlyUniform) {
    Rng rng(3);
    std::map<std::size_t, int> counts;
    const int n = 70000;
    for (int i = 0; i < n; ++i) ++counts[uniform_index(rng, 7)];
    ASSERT_EQ(counts.size(), 7u);
    for (auto [k, c] : counts) EXPECT_NEAR(c / double(n), 1.0 / 7, 0.01) << k;
}

TEST(Random, SampleWithoutReplacementIsDistinct) {
    Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        auto s = sample_without_replacement(rng, 20, 8);
        ASSERT_EQ(s.size(), 8u);
        std::sort(s.begin(), s.end());
        EXPECT_EQ(std::unique(s.begin(), s.end()), s.end());
        EXPECT_LT(s.back(), 20u);
    }
    EXPECT_EQ(sample_without_replacement(rng, 3, 10).size(), 3u);
}

TEST(Random, DerivedStreamsAreReproducibleAndDistinct) {
    EXPECT_EQ(derive_rng(1, 2)(), derive_rng(1, 2)());
    EXPECT_NE(derive_rng(1, 2)(), derive_rng(1, 3)());
    EXPECT_NE(derive_rng(1, 2)(), derive_rng(2, 2)());
}
