#pragma once

#include <cmath>
#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "udr/binary_io.hpp"
#include "udr/corpus.hpp"
#include "udr/error.hpp"
#include "udr/random.hpp"
#include "udr/text.hpp"

namespace udr {

/// Dense row-major matrix.
template <typename T>
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<T> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, T fill = T{}) : rows(r), cols(c), data(r * c, fill) {}

    T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<T> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const T> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    friend bool operator==(const Matrix&, const Matrix&) = default;
};

template <typename To, typename From>
Matrix<To> matrix_cast(const Matrix<From>& m) {
    Matrix<To> out(m.rows, m.cols);
    for (std::size_t i = 0; i < m.data.size(); ++i) out.data[i] = static_cast<To>(m.data[i]);
    return out;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

/// Term-to-index map shared by both towers. Index 0 is the unknown term.
class Vocabulary {
  public:
    static constexpr std::uint32_t kUnknown = 0;
    static constexpr std::string_view kUnknownTerm = "<unk>";

    Vocabulary() : terms_{std::string(kUnknownTerm)} {}

    /// Sorted terms; "<unk>" is prepended when absent.
    explicit Vocabulary(std::vector<std::string> terms) : Vocabulary() {
        for (auto& t : terms)
            if (t != kUnknownTerm && !index_.count(t)) {
                index_.emplace(t, static_cast<std::uint32_t>(terms_.size()));
                terms_.push_back(std::move(t));
            }
    }

    /// Union of instruction tokens and rendered train-demonstration tokens over
    /// every task, sorted for determinism.
    static Vocabulary build(const DatasetRegistry& registry) {
        std::set<std::string> terms;
        for (const auto& [id, spec] : registry.tasks()) {
            for (auto& t : tokenize(spec.instruction)) terms.insert(std::move(t));
            for (const auto& e : registry.examples(id, Split::train))
                for (auto& t : tokenize(render_demo(e, spec))) terms.insert(std::move(t));
        }
        return Vocabulary(std::vector<std::string>(terms.begin(), terms.end()));
    }

    std::size_t size() const { return terms_.size(); }
    const std::vector<std::string>& terms() const { return terms_; }

    std::uint32_t lookup(const std::string& term) const {
        auto it = index_.find(term);
        return it == index_.end() ? kUnknown : it->second;
    }

    /// Token ids of instruction ⊕ " " ⊕ text; a lone unknown id when empty.
    std::vector<std::uint32_t> encode(std::string_view instruction, std::string_view text) const {
        std::string joined;
        joined.reserve(instruction.size() + text.size() + 1);
        joined.append(instruction).append(" ").append(text);
        std::vector<std::uint32_t> ids;
        for (const auto& t : tokenize(joined)) ids.push_back(lookup(t));
        if (ids.empty()) ids.push_back(kUnknown);
        return ids;
    }

    friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.terms_ == b.terms_; }

  private:
    std::vector<std::string> terms_;
    std::unordered_map<std::string, std::uint32_t> index_;
};

/// One encoder: token embeddings (V x d) mean-pooled, then a d x d projection.
template <typename T>
struct TowerParams {
    Matrix<T> embeddings;
    Matrix<T> projection;

    friend bool operator==(const TowerParams&, const TowerParams&) = default;
};

template <typename T>
struct BiEncoderParams {
    TowerParams<T> query;
    TowerParams<T> demo;
    std::size_t dim = 0;

    std::size_t vocab_size() const { return query.embeddings.rows; }

    friend bool operator==(const BiEncoderParams&, const BiEncoderParams&) = default;
};

/// Forward intermediates of one encoding, enough to backpropagate exactly.
struct EncodingTape {
    std::vector<std::uint32_t> tokens;
    std::vector<double> pooled;
    std::vector<double> output;
};

template <typename T>
EncodingTape encode_tokens(const TowerParams<T>& tower, std::vector<std::uint32_t> tokens) {
    const std::size_t d = tower.projection.rows;
    EncodingTape tape{std::move(tokens), std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
    for (auto t : tape.tokens) {
        auto row = tower.embeddings.row(t);
        for (std::size_t k = 0; k < d; ++k) tape.pooled[k] += static_cast<double>(row[k]);
    }
    const double inv = 1.0 / static_cast<double>(tape.tokens.size());
    for (auto& v : tape.pooled) v *= inv;
    for (std::size_t r = 0; r < d; ++r) {
        double s = 0;
        for (std::size_t c = 0; c < d; ++c) s += static_cast<double>(tower.projection(r, c)) * tape.pooled[c];
        tape.output[r] = s;
    }
    return tape;
}

/// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(output).
template <typename T>
void backward(const TowerParams<T>& tower, const EncodingTape& tape, std::span<const double> grad_output,
              TowerParams<double>& grads) {
    const std::size_t d = tower.projection.rows;
    std::vector<double> grad_pooled(d, 0.0);
    for (std::size_t r = 0; r < d; ++r) {
        if (grad_output[r] == 0.0) continue;
        for (std::size_t c = 0; c < d; ++c) {
            grads.projection(r, c) += grad_output[r] * tape.pooled[c];
            grad_pooled[c] += grad_output[r] * static_cast<double>(tower.projection(r, c));
        }
    }
    const double inv = 1.0 / static_cast<double>(tape.tokens.size());
    for (auto t : tape.tokens) {
        auto row = grads.embeddings.row(t);
        for (std::size_t k = 0; k < d; ++k) row[k] += grad_pooled[k] * inv;
    }
}

template <typename T>
TowerParams<double> zero_like(const TowerParams<T>& t) {
    return {Matrix<double>(t.embeddings.rows, t.embeddings.cols), Matrix<double>(t.projection.rows, t.projection.cols)};
}

/// Embeddings ~ U(-0.05, 0.05), drawn once and copied into both towers (the
/// towers start from the same weights and diverge in training); each
/// projection is identity plus independent U(-0.01, 0.01) noise.
template <typename T = float>
BiEncoderParams<T> init_params(std::size_t vocab_size, std::size_t dim, std::uint64_t seed) {
    if (dim < 1) throw ConfigError("encoder dimension must be >= 1");
    if (vocab_size < 1) throw ConfigError("vocabulary must hold at least the unknown term");
    Rng rng(seed);
    BiEncoderParams<T> p;
    p.dim = dim;
    Matrix<T> emb(vocab_size, dim);
    for (auto& v : emb.data) v = static_cast<T>(uniform(rng, -0.05, 0.05));
    auto projection = [&] {
        Matrix<T> m(dim, dim);
        for (std::size_t r = 0; r < dim; ++r)
            for (std::size_t c = 0; c < dim; ++c) m(r, c) = static_cast<T>((r == c ? 1.0 : 0.0) + uniform(rng, -0.01, 0.01));
        return m;
    };
    p.query = {emb, projection()};
    p.demo = {emb, projection()};
    return p;
}

/// The retriever: shared vocabulary plus the two towers.
/// sim(x, z) = E_q(I ⊕ x) · E_d(I ⊕ render(z)).
template <typename T = float>
struct BiEncoder {
    Vocabulary vocab;
    BiEncoderParams<T> params;

    std::vector<std::uint32_t> query_tokens(std::string_view input, const TaskSpec& spec) const {
        return vocab.encode(spec.instruction, input);
    }

    std::vector<std::uint32_t> demo_tokens(const Example& demo, const TaskSpec& spec) const {
        return vocab.encode(spec.instruction, render_demo(demo, spec));
    }

    EncodingTape encode_query(std::string_view input, const TaskSpec& spec) const {
        return encode_tokens(params.query, query_tokens(input, spec));
    }

    EncodingTape encode_demo(const Example& demo, const TaskSpec& spec) const {
        return encode_tokens(params.demo, demo_tokens(demo, spec));
    }

    friend bool operator==(const BiEncoder&, const BiEncoder&) = default;
};

/// Encodes `instruction ⊕ text` with one tower.
template <typename T>
std::vector<double> encode(const TowerParams<T>& tower, const Vocabulary& vocab, std::string_view text,
                           std::string_view instruction) {
    return encode_tokens(tower, vocab.encode(instruction, text)).output;
}

template <typename T>
double similarity(const BiEncoder<T>& model, const Example& query, const Example& demo, const TaskSpec& spec) {
    return dot(model.encode_query(query.input, spec).output, model.encode_demo(demo, spec).output);
}

/// Demo-tower encodings, one row per example, in input order.
template <typename T>
Matrix<float> encode_corpus(const BiEncoder<T>& model, std::span<const Example> examples, const TaskSpec& spec) {
    Matrix<float> out(examples.size(), model.params.dim);
    for (std::size_t i = 0; i < examples.size(); ++i) {
        auto v = model.encode_demo(examples[i], spec).output;
        for (std::size_t k = 0; k < v.size(); ++k) out(i, k) = static_cast<float>(v[k]);
    }
    return out;
}

template <typename To, typename From>
BiEncoder<To> model_cast(const BiEncoder<From>& m) {
    BiEncoder<To> out;
    out.vocab = m.vocab;
    out.params.dim = m.params.dim;
    out.params.query = {matrix_cast<To>(m.params.query.embeddings), matrix_cast<To>(m.params.query.projection)};
    out.params.demo = {matrix_cast<To>(m.params.demo.embeddings), matrix_cast<To>(m.params.demo.projection)};
    return out;
}

inline constexpr std::string_view kCheckpointMagic = "UDR1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Checkpoint bytes: magic, version, V, d, then query embeddings, query
/// projection, demo embeddings, demo projection as little-endian float32,
/// then V length-prefixed terms.
inline std::string serialize_checkpoint(const BiEncoder<float>& model) {
    const auto& p = model.params;
    if (model.vocab.size() != p.vocab_size()) throw ContractError("vocabulary and embedding rows disagree");
    std::string out(kCheckpointMagic);
    put_u32(out, kCheckpointVersion);
    put_u32(out, static_cast<std::uint32_t>(p.vocab_size()));
    put_u32(out, static_cast<std::uint32_t>(p.dim));
    for (const auto* m : {&p.query.embeddings, &p.query.projection, &p.demo.embeddings, &p.demo.projection})
        for (float v : m->data) put_f32(out, v);
    for (const auto& t : model.vocab.terms()) put_str(out, t);
    return out;
}

inline BiEncoder<float> deserialize_checkpoint(std::string_view bytes) {
    ByteReader in(bytes, "checkpoint");
    in.expect_magic(kCheckpointMagic);
    if (auto v = in.u32(); v != kCheckpointVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(v));
    std::size_t vocab_size = in.u32(), dim = in.u32();
    if (dim == 0 || vocab_size == 0) throw FormatError("checkpoint: empty shape");
    BiEncoder<float> model;
    model.params.dim = dim;
    auto read = [&](std::size_t r, std::size_t c) {
        Matrix<float> m(r, c);
        for (auto& v : m.data) v = in.f32();
        return m;
    };
    model.params.query.embeddings = read(vocab_size, dim);
    model.params.query.projection = read(dim, dim);
    model.params.demo.embeddings = read(vocab_size, dim);
    model.params.demo.projection = read(dim, dim);
    std::vector<std::string> terms;
    for (std::size_t i = 0; i < vocab_size; ++i) terms.push_back(in.str());
    if (terms.empty() || terms[0] != Vocabulary::kUnknownTerm) throw FormatError("checkpoint: first term must be <unk>");
    model.vocab = Vocabulary(std::vector<std::string>(terms.begin() + 1, terms.end()));
    if (model.vocab.terms() != terms) throw FormatError("checkpoint: vocabulary has duplicate terms");
    if (!in.at_end()) throw FormatError("checkpoint: trailing bytes");
    return model;
}

inline void save_checkpoint(const BiEncoder<float>& model, const std::string& path) {
    write_file(path, serialize_checkpoint(model));
}

inline BiEncoder<float> load_checkpoint(const std::string& path) { return deserialize_checkpoint(read_file(path)); }

/// Identity of a parameter state; ties dense indexes to the encoder that built them.
inline std::uint64_t fingerprint(const BiEncoder<float>& model) {
    auto bytes = serialize_checkpoint(model);
    return Fnv1a().update(bytes.data(), bytes.size()).digest();
}

}  // namespace udr
