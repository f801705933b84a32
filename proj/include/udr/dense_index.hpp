#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "udr/bi_encoder.hpp"
#include "udr/binary_io.hpp"
#include "udr/bm25.hpp"
#include "udr/corpus.hpp"
#include "udr/error.hpp"

namespace udr {

inline constexpr std::string_view kIndexMagic = "UDX1";
inline constexpr std::uint32_t kIndexVersion = 1;

/// Exact maximum-inner-product index over one task's encoded train split.
/// Vectors are stored as float32; dot products accumulate in double.
struct DenseIndex {
    std::string task_id;
    std::uint64_t checkpoint_fingerprint = 0;
    std::vector<std::string> ids;
    Matrix<float> vectors;

    std::size_t size() const { return ids.size(); }
    std::size_t dim() const { return vectors.cols; }

    double inner_product(std::size_t row, std::span<const double> query) const {
        auto v = vectors.row(row);
        double s = 0;
        for (std::size_t k = 0; k < v.size(); ++k) s += static_cast<double>(v[k]) * query[k];
        return s;
    }

    /// Top-k rows by inner product, descending, ties by ascending ordinal.
    std::vector<ScoredId> search(std::span<const double> query, std::size_t k) const {
        if (k < 1) throw ContractError("dense search: k must be >= 1");
        if (query.size() != dim())
            throw ContractError("dense search: query has dimension " + std::to_string(query.size()) + ", index has " +
                                std::to_string(dim()));
        std::vector<double> scores(size());
        for (std::size_t i = 0; i < size(); ++i) scores[i] = inner_product(i, query);
        std::vector<std::size_t> order(size());
        std::iota(order.begin(), order.end(), 0);
        k = std::min(k, order.size());
        auto cmp = [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); };
        std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), cmp);
        std::vector<ScoredId> out;
        out.reserve(k);
        for (std::size_t r = 0; r < k; ++r) out.push_back({ids[order[r]], scores[order[r]], order[r]});
        return out;
    }

    std::vector<ScoredId> search(std::span<const float> query, std::size_t k) const {
        std::vector<double> q(query.begin(), query.end());
        return search(std::span<const double>(q), k);
    }
};

/// Encodes the task's train split with the demo tower.
inline DenseIndex build_dense_index(const BiEncoder<float>& model, const DatasetRegistry& registry,
                                    const std::string& task_id) {
    const auto& split = registry.examples(task_id, Split::train);
    if (split.empty()) throw BuildError("task '" + task_id + "' has an empty train split");
    DenseIndex index;
    index.task_id = task_id;
    index.checkpoint_fingerprint = fingerprint(model);
    for (const auto& e : split) index.ids.push_back(e.example_id);
    index.vectors = encode_corpus(model, std::span<const Example>(split), registry.task(task_id));
    return index;
}

/// Index bytes: magic "UDX1", version u32, task id, fingerprint u64, N u64,
/// d u32, N length-prefixed ids, then the N x d float32 matrix row-major.
/// Integers little-endian; strings are u32 length + UTF-8 bytes.
inline std::string serialize_index(const DenseIndex& index) {
    std::string out(kIndexMagic);
    put_u32(out, kIndexVersion);
    put_str(out, index.task_id);
    put_u64(out, index.checkpoint_fingerprint);
    put_u64(out, index.size());
    put_u32(out, static_cast<std::uint32_t>(index.dim()));
    for (const auto& id : index.ids) put_str(out, id);
    for (float v : index.vectors.data) put_f32(out, v);
    return out;
}

inline DenseIndex deserialize_index(std::string_view bytes) {
    ByteReader in(bytes, "dense index");
    in.expect_magic(kIndexMagic);
    if (auto v = in.u32(); v != kIndexVersion) throw FormatError("dense index: unsupported version " + std::to_string(v));
    DenseIndex index;
    index.task_id = in.str();
    index.checkpoint_fingerprint = in.u64();
    auto n = in.u64();
    std::size_t d = in.u32();
    if (n > bytes.size() || (n > 0 && d * n * 4 > bytes.size())) throw FormatError("dense index: truncated file");
    for (std::uint64_t i = 0; i < n; ++i) index.ids.push_back(in.str());
    index.vectors = Matrix<float>(static_cast<std::size_t>(n), d);
    for (auto& v : index.vectors.data) {
        v = in.f32();
        if (!std::isfinite(v)) throw FormatError("dense index: non-finite vector entry");
    }
    if (!in.at_end()) throw FormatError("dense index: trailing bytes");
    return index;
}

inline void save_index(const DenseIndex& index, const std::string& path) { write_file(path, serialize_index(index)); }

inline DenseIndex load_index(const std::string& path) { return deserialize_index(read_file(path)); }

}  // namespace udr
