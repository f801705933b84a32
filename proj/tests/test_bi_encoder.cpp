#include <gtest/gtest.h>

#include <bit>

#include "support.hpp"

using namespace udr;
using udr::testing::TempDir;

namespace {

TaskSpec spec() {
    TaskSpec s;
    s.task_id = "t";
    s.instruction = "label the text";
    s.verbalizers = {"yes", "no"};
    s.templ = {"{input} => {target}", "{input} =>", "\n"};
    return s;
}

BiEncoder<double> tiny_identity_model() {
    BiEncoder<double> m;
    m.vocab = Vocabulary({"x", "y", "z"});
    m.params.dim = 2;
    Matrix<double> emb(4, 2);
    emb(1, 0) = 1;  // x
    emb(2, 1) = 2;  // y
    emb(3, 0) = 3;  // z
    emb(3, 1) = -1;
    Matrix<double> eye(2, 2);
    eye(0, 0) = eye(1, 1) = 1;
    m.params.query = {emb, eye};
    m.params.demo = {emb, eye};
    return m;
}

}  // namespace

TEST(Vocabulary, UnknownIsZeroAndTermsAreDense) {
    Vocabulary v({"b", "a", "b", "<unk>"});
    EXPECT_EQ(v.size(), 3u);
    EXPECT_EQ(v.terms()[0], "<unk>");
    EXPECT_EQ(v.lookup("b"), 1u);
    EXPECT_EQ(v.lookup("a"), 2u);
    EXPECT_EQ(v.lookup("never"), 0u);
    EXPECT_EQ(v.encode("", ""), (std::vector<std::uint32_t>{0}));
}

TEST(Vocabulary, BuiltFromInstructionsAndRenderedTrainDemos) {
    DatasetRegistry r;
    r.add_task(spec());
    r.add_example({"t", "1", "Hello world", "yes", {}}, Split::train);
    r.add_example({"t", "2", "unseen", "no", {}}, Split::test);
    auto v = Vocabulary::build(r);
    for (const char* t : {"label", "the", "text", "hello", "world", "yes"}) EXPECT_NE(v.lookup(t), 0u) << t;
    EXPECT_EQ(v.lookup("=>"), 0u) << "pure punctuation never becomes a token";
    EXPECT_EQ(v.lookup("unseen"), 0u);
    EXPECT_TRUE(std::is_sorted(v.terms().begin() + 1, v.terms().end()));
}

TEST(Encode, SingleTokenWithIdentityProjection) {
    auto m = tiny_identity_model();
    auto v = encode(m.params.query, m.vocab, "y", "");
    EXPECT_EQ(v, (std::vector<double>{0, 2}));
}

TEST(Encode, MeanPoolsTwoTokens) {
    auto m = tiny_identity_model();
    auto v = encode(m.params.query, m.vocab, "x z", "");
    EXPECT_DOUBLE_EQ(v[0], (1 + 3) / 2.0);
    EXPECT_DOUBLE_EQ(v[1], (0 - 1) / 2.0);
}

TEST(Encode, InstructionChangesEncoding) {
    auto m = tiny_identity_model();
    EXPECT_NE(encode(m.params.query, m.vocab, "x", "y"), encode(m.params.query, m.vocab, "x", "z"));
}

TEST(Encode, PermutationInvariantOverTokens) {
    std::mt19937_64 rng(2);
    auto reg = udr::testing::random_registry(rng, 20);
    auto m = udr::testing::random_model<double>(rng, Vocabulary::build(reg).size(), 6, Vocabulary::build(reg));
    for (const auto& e : reg.examples("t", Split::train)) {
        auto toks = tokenize(e.input);
        std::shuffle(toks.begin(), toks.end(), rng);
        std::string shuffled;
        for (auto& t : toks) shuffled += t + " ";
        auto a = encode(m.params.demo, m.vocab, e.input, "i");
        auto b = encode(m.params.demo, m.vocab, shuffled, "i");
        for (std::size_t k = 0; k < a.size(); ++k) EXPECT_NEAR(a[k], b[k], 1e-12);
    }
}

TEST(Encode, TapeReplayIsBitIdentical) {
    std::mt19937_64 rng(5);
    auto m = udr::testing::random_model<float>(rng, 10, 4);
    std::vector<std::uint32_t> toks{1, 3, 3, 7};
    auto a = encode_tokens(m.params.query, toks);
    auto b = encode_tokens(m.params.query, a.tokens);
    EXPECT_EQ(a.output, b.output);
    EXPECT_EQ(a.pooled, b.pooled);
}

TEST(Similarity, OrthogonalOutputsAndZeroProjection) {
    auto m = tiny_identity_model();
    Example q{"t", "q", "x", "yes", {}}, z{"t", "z", "y", "yes", {}};
    auto s = spec();
    s.instruction = "";
    s.templ = {"{input} {target}", "{input}", "\n"};
    m.vocab = Vocabulary({"x", "y", "z", "yes"});
    for (auto* tower : {&m.params.query, &m.params.demo}) {
        Matrix<double> emb(5, 2);
        emb(1, 0) = 1;  // x
        emb(2, 1) = 2;  // y
        tower->embeddings = emb;
    }
    // "y yes" pools to (0, 1), "x" to (1, 0).
    EXPECT_DOUBLE_EQ(similarity(m, q, z, s), 0.0);
    m.params.demo.projection = Matrix<double>(2, 2);
    EXPECT_DOUBLE_EQ(similarity(m, q, q, s), 0.0);
}

TEST(Similarity, ScalingOneProjectionScalesSimilarity) {
    std::mt19937_64 rng(8);
    auto reg = udr::testing::random_registry(rng, 10);
    auto vocab = Vocabulary::build(reg);
    auto m = udr::testing::random_model<double>(rng, vocab.size(), 5, vocab);
    auto scaled = m;
    for (auto& v : scaled.params.query.projection.data) v *= 2.5;
    const auto& xs = reg.examples("t", Split::train);
    for (std::size_t i = 0; i + 1 < xs.size(); ++i)
        EXPECT_NEAR(similarity(scaled, xs[i], xs[i + 1], spec()), 2.5 * similarity(m, xs[i], xs[i + 1], spec()), 1e-12);
}

TEST(Similarity, TowersAreAsymmetric) {
    std::mt19937_64 rng(8);
    auto reg = udr::testing::random_registry(rng, 10);
    auto vocab = Vocabulary::build(reg);
    auto m = udr::testing::random_model<double>(rng, vocab.size(), 5, vocab);
    auto swapped = m;
    std::swap(swapped.params.query, swapped.params.demo);
    const auto& xs = reg.examples("t", Split::train);
    EXPECT_NE(similarity(m, xs[0], xs[1], spec()), similarity(swapped, xs[0], xs[1], spec()));
}

TEST(Similarity, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 10; ++trial) {
        auto reg = udr::testing::random_registry(rng, 4, 30);
        auto vocab = Vocabulary::build(reg);
        auto m = udr::testing::random_model<double>(rng, vocab.size(), 1 + rng() % 8, vocab);
        const auto& xs = reg.examples("t", Split::train);
        auto qt = m.encode_query(xs[0].input, spec());
        auto dt = m.encode_demo(xs[1], spec());
        BiEncoderParams<double> grads{zero_like(m.params.query), zero_like(m.params.demo), m.params.dim};
        backward(m.params.query, qt, dt.output, grads.query);
        backward(m.params.demo, dt, qt.output, grads.demo);
        auto analytic = udr::testing::flatten(grads);
        auto numeric = udr::testing::numeric_gradient(udr::testing::flatten(m.params), [&](const std::vector<double>& x) {
            auto copy = m;
            udr::testing::unflatten(copy.params, x);
            return similarity(copy, xs[0], xs[1], spec());
        });
        for (std::size_t i = 0; i < analytic.size(); ++i)
            ASSERT_LT(udr::testing::relative_error(analytic[i], numeric[i]), 1e-4) << "param " << i;
    }
}

TEST(EncodeCorpus, RowsMatchDemoEncodings) {
    std::mt19937_64 rng(3);
    auto reg = udr::testing::random_registry(rng, 12);
    auto vocab = Vocabulary::build(reg);
    auto m = udr::testing::random_model<float>(rng, vocab.size(), 4, vocab);
    auto xs = reg.examples("t", Split::train);
    xs.push_back(xs.front());
    auto mat = encode_corpus(m, std::span<const Example>(xs), spec());
    ASSERT_EQ(mat.rows, xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
        auto v = encode(m.params.demo, m.vocab, render_demo(xs[i], spec()), spec().instruction);
        for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(mat(i, k), static_cast<float>(v[k]));
    }
    EXPECT_EQ(std::vector<float>(mat.row(0).begin(), mat.row(0).end()),
              std::vector<float>(mat.row(xs.size() - 1).begin(), mat.row(xs.size() - 1).end()));
    EXPECT_EQ(encode_corpus(m, std::span<const Example>(), spec()).rows, 0u);
}

TEST(InitParams, ShapesRangesAndDeterminism) {
    auto a = init_params<float>(10, 4, 7), b = init_params<float>(10, 4, 7), c = init_params<float>(10, 4, 8);
    EXPECT_EQ(a, b);
    EXPECT_NE(a, c);
    for (const auto* t : {&a.query, &a.demo}) {
        EXPECT_EQ(t->embeddings.rows, 10u);
        EXPECT_EQ(t->embeddings.cols, 4u);
        EXPECT_EQ(t->projection.rows, 4u);
        EXPECT_EQ(t->projection.cols, 4u);
        for (float v : t->embeddings.data) EXPECT_LE(std::abs(v), 0.05f);
        for (std::size_t r = 0; r < 4; ++r)
            for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(t->projection(r, k), r == k ? 1.0 : 0.0, 0.01 + 1e-7);
    }
    EXPECT_THROW(init_params<float>(10, 0, 1), ConfigError);
}

TEST(InitParams, SelfSimilarityPositiveOnAverage) {
    std::mt19937_64 rng(1);
    auto reg = udr::testing::random_registry(rng, 20);
    auto vocab = Vocabulary::build(reg);
    const auto& xs = reg.examples("t", Split::train);
    double total = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        BiEncoder<float> m{vocab, init_params<float>(vocab.size(), 8, seed)};
        for (const auto& x : xs) total += similarity(m, x, x, spec());
    }
    EXPECT_GT(total / (100.0 * xs.size()), 0.0);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    std::mt19937_64 rng(4);
    auto reg = udr::testing::random_registry(rng, 15);
    auto vocab = Vocabulary::build(reg);
    auto m = udr::testing::random_model<float>(rng, vocab.size(), 6, vocab);
    TempDir dir;
    save_checkpoint(m, dir.file("m.udr"));
    auto back = load_checkpoint(dir.file("m.udr"));
    EXPECT_EQ(back, m);
    EXPECT_EQ(serialize_checkpoint(back), serialize_checkpoint(m));
    EXPECT_EQ(fingerprint(back), fingerprint(m));
}

TEST(Checkpoint, LayoutHeader) {
    BiEncoder<float> m{Vocabulary({"a"}), init_params<float>(2, 3, 0)};
    auto bytes = serialize_checkpoint(m);
    EXPECT_EQ(bytes.substr(0, 4), "UDR1");
    ByteReader in(bytes, "t");
    in.take(4);
    EXPECT_EQ(in.u32(), 1u);
    EXPECT_EQ(in.u32(), 2u);
    EXPECT_EQ(in.u32(), 3u);
    EXPECT_EQ(bytes.size(), 16 + 4 * (2 * (2 * 3 + 3 * 3)) + (4 + 5) + (4 + 1));
    EXPECT_EQ(in.f32(), m.params.query.embeddings.data[0]);
}

TEST(Checkpoint, CorruptFilesAreFormatErrors) {
    BiEncoder<float> m{Vocabulary({"a"}), init_params<float>(2, 3, 0)};
    auto bytes = serialize_checkpoint(m);
    EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 1)), FormatError);
    EXPECT_THROW(deserialize_checkpoint(bytes + "x"), FormatError);
    auto wrong = bytes;
    wrong[0] = 'X';
    EXPECT_THROW(deserialize_checkpoint(wrong), FormatError);
    EXPECT_THROW(deserialize_checkpoint(""), FormatError);
}

TEST(Fingerprint, ChangesWithParameters) {
    BiEncoder<float> m{Vocabulary({"a"}), init_params<float>(2, 3, 0)};
    auto before = fingerprint(m);
    m.params.demo.projection(0, 0) += 1e-3f;
    EXPECT_NE(fingerprint(m), before);
}
