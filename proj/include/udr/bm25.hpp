#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "udr/corpus.hpp"
#include "udr/error.hpp"
#include "udr/text.hpp"

namespace udr {

struct Bm25Params {
    double k1 = 1.2;
    double b = 0.75;
};

struct Posting {
    std::uint32_t doc;
    std::uint32_t tf;

    friend bool operator==(const Posting&, const Posting&) = default;
};

struct ScoredId {
    std::string id;
    double score;
    std::size_t ordinal;
};

/// Okapi BM25 over toolkit tokens. Documents are addressed by ordinal
/// (insertion order) and carry a distinct string id.
class InvertedIndex {
  public:
    InvertedIndex() = default;

    InvertedIndex(const std::vector<std::pair<std::string, std::string>>& docs, Bm25Params params = {})
        : params_(params) {
        if (docs.empty()) throw BuildError("cannot build a BM25 index over an empty corpus");
        if (!(params.k1 > 0)) throw BuildError("BM25 k1 must be > 0");
        if (!(params.b >= 0 && params.b <= 1)) throw BuildError("BM25 b must be in [0, 1]");
        std::set<std::string> seen;
        double total = 0;
        for (std::uint32_t ord = 0; ord < docs.size(); ++ord) {
            const auto& [id, text] = docs[ord];
            if (!seen.insert(id).second) throw BuildError("duplicate document id '" + id + "'");
            auto tokens = tokenize(text);
            std::map<std::string, std::uint32_t> tf;
            for (auto& t : tokens) ++tf[t];
            for (auto& [term, f] : tf) postings_[term].push_back({ord, f});
            doc_ids_.push_back(id);
            doc_lengths_.push_back(static_cast<std::uint32_t>(tokens.size()));
            total += static_cast<double>(tokens.size());
        }
        avg_doc_len_ = total / static_cast<double>(docs.size());
    }

    std::size_t size() const { return doc_ids_.size(); }
    const std::vector<std::string>& doc_ids() const { return doc_ids_; }
    const std::vector<std::uint32_t>& doc_lengths() const { return doc_lengths_; }
    double avg_doc_len() const { return avg_doc_len_; }
    const Bm25Params& params() const { return params_; }
    const std::map<std::string, std::vector<Posting>>& postings() const { return postings_; }

    const std::vector<Posting>& postings(const std::string& term) const {
        static const std::vector<Posting> none;
        auto it = postings_.find(term);
        return it == postings_.end() ? none : it->second;
    }

    // ln(1 + (N - df + 0.5) / (df + 0.5)); never negative.
    double idf(std::size_t df) const {
        double n = static_cast<double>(size()), d = static_cast<double>(df);
        return std::log1p((n - d + 0.5) / (d + 0.5));
    }

    double term_weight(std::uint32_t tf, std::uint32_t doc_len) const {
        double norm = avg_doc_len_ > 0 ? doc_len / avg_doc_len_ : 1.0;
        double f = tf;
        return f * (params_.k1 + 1) / (f + params_.k1 * (1 - params_.b + params_.b * norm));
    }

    /// Accumulated BM25 score of every document for `query` (distinct query
    /// terms), plus a mask of documents that matched at least one term.
    std::pair<std::vector<double>, std::vector<bool>> score_all(std::string_view query) const {
        std::vector<double> scores(size(), 0.0);
        std::vector<bool> matched(size(), false);
        auto terms = tokenize(query);
        std::sort(terms.begin(), terms.end());
        terms.erase(std::unique(terms.begin(), terms.end()), terms.end());
        for (const auto& term : terms) {
            const auto& plist = postings(term);
            if (plist.empty()) continue;
            double w = idf(plist.size());
            for (const auto& p : plist) {
                scores[p.doc] += w * term_weight(p.tf, doc_lengths_[p.doc]);
                matched[p.doc] = true;
            }
        }
        return {std::move(scores), std::move(matched)};
    }

    nlohmann::json to_json() const {
        nlohmann::json post = nlohmann::json::object();
        for (const auto& [term, plist] : postings_) {
            auto arr = nlohmann::json::array();
            for (const auto& p : plist) arr.push_back({p.doc, p.tf});
            post[term] = arr;
        }
        return {{"params", {{"k1", params_.k1}, {"b", params_.b}}},
                {"doc_ids", doc_ids_},
                {"doc_lengths", doc_lengths_},
                {"postings", post}};
    }

    static InvertedIndex from_json(const nlohmann::json& j) {
        InvertedIndex idx;
        try {
            idx.params_.k1 = j.at("params").at("k1").get<double>();
            idx.params_.b = j.at("params").at("b").get<double>();
            idx.doc_ids_ = j.at("doc_ids").get<std::vector<std::string>>();
            idx.doc_lengths_ = j.at("doc_lengths").get<std::vector<std::uint32_t>>();
            for (const auto& [term, arr] : j.at("postings").items())
                for (const auto& p : arr) idx.postings_[term].push_back({p.at(0).get<std::uint32_t>(), p.at(1).get<std::uint32_t>()});
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(std::string("bad BM25 index JSON: ") + e.what());
        }
        if (idx.doc_ids_.size() != idx.doc_lengths_.size()) throw FormatError("BM25 index: ids/lengths size mismatch");
        double total = std::accumulate(idx.doc_lengths_.begin(), idx.doc_lengths_.end(), 0.0);
        idx.avg_doc_len_ = idx.doc_ids_.empty() ? 0 : total / static_cast<double>(idx.doc_ids_.size());
        return idx;
    }

  private:
    Bm25Params params_;
    std::map<std::string, std::vector<Posting>> postings_;
    std::vector<std::uint32_t> doc_lengths_;
    std::vector<std::string> doc_ids_;
    double avg_doc_len_ = 0;
};

namespace detail {

inline std::vector<ScoredId> rank_scores(const InvertedIndex& index, const std::vector<double>& scores,
                                         const std::vector<bool>* keep) {
    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < scores.size(); ++i)
        if (!keep || (*keep)[i]) order.push_back(i);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    std::vector<ScoredId> out;
    out.reserve(order.size());
    for (auto i : order) out.push_back({index.doc_ids()[i], scores[i], i});
    return out;
}

}  // namespace detail

/// Top-k matching documents, descending score, ties by ascending ordinal.
/// Documents sharing no term with the query are never returned.
inline std::vector<ScoredId> bm25_top_k(const InvertedIndex& index, std::string_view query, std::size_t k) {
    if (k < 1) throw ContractError("bm25_top_k: k must be >= 1");
    auto [scores, matched] = index.score_all(query);
    auto ranked = detail::rank_scores(index, scores, &matched);
    if (ranked.size() > k) ranked.resize(k);
    return ranked;
}

enum class CandidateMode { by_input, by_target };

/// Surface-similarity field used to seed a task's candidates: inputs for
/// classification and multi-choice, targets for generation.
inline CandidateMode candidate_mode_for(TaskKind kind) {
    return kind == TaskKind::generation ? CandidateMode::by_target : CandidateMode::by_input;
}

/// Per-task BM25 indexes over train splits, used to initialize candidates
/// before the retriever has been trained.
class LexicalCandidateIndex {
  public:
    explicit LexicalCandidateIndex(const DatasetRegistry& registry, Bm25Params params = {})
        : registry_(&registry), params_(params) {}

    void index_task(const std::string& task_id, CandidateMode mode) {
        const auto& split = registry_->examples(task_id, Split::train);
        std::vector<std::pair<std::string, std::string>> docs;
        docs.reserve(split.size());
        for (const auto& e : split) docs.emplace_back(e.example_id, mode == CandidateMode::by_input ? e.input : e.target);
        indexes_.insert_or_assign({task_id, mode}, InvertedIndex(docs, params_));
    }

    void index_all() {
        for (const auto& id : registry_->trainable_tasks()) index_task(id, candidate_mode_for(registry_->task(id).kind));
    }

    const InvertedIndex& index(const std::string& task_id, CandidateMode mode) const {
        auto it = indexes_.find({task_id, mode});
        if (it == indexes_.end()) throw StateError("task '" + task_id + "' has no lexical index for this mode");
        return it->second;
    }

    /// Top-k train examples of the query's task by BM25 over the selected
    /// field, never including the query itself. Examples with no lexical
    /// overlap fill the tail in ordinal order, so k >= |split| - 1 returns
    /// every other example.
    std::vector<std::string> init_candidates(const Example& query, std::size_t k, CandidateMode mode) const {
        if (k < 1) throw ContractError("init_candidates: k must be >= 1");
        const auto& idx = index(query.task_id, mode);
        auto [scores, matched] = idx.score_all(mode == CandidateMode::by_input ? query.input : query.target);
        std::vector<std::string> out;
        for (auto& hit : detail::rank_scores(idx, scores, nullptr)) {
            if (hit.id == query.example_id) continue;
            out.push_back(std::move(hit.id));
            if (out.size() == k) break;
        }
        return out;
    }

    std::vector<std::string> init_candidates(const Example& query, std::size_t k) const {
        return init_candidates(query, k, candidate_mode_for(registry_->task(query.task_id).kind));
    }

  private:
    const DatasetRegistry* registry_;
    Bm25Params params_;
    std::map<std::pair<std::string, CandidateMode>, InvertedIndex> indexes_;
};

}  // namespace udr
