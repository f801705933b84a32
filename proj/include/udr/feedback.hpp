#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "udr/corpus.hpp"
#include "udr/error.hpp"
#include "udr/scorer.hpp"

namespace udr {

struct ScoredCandidate {
    std::string candidate_id;
    double score = 0;      // s(z), a probability
    double log_score = 0;  // log s(z); ranks are computed from this
    int rank = 0;
};

struct CandidateSet {
    std::string task_id;
    std::string query_id;
    int iteration = 0;
    std::vector<ScoredCandidate> entries;

    std::vector<std::string> ids() const {
        std::vector<std::string> out;
        out.reserve(entries.size());
        for (const auto& e : entries) out.push_back(e.candidate_id);
        return out;
    }
};

/// Ranks scores in descending order: rank 1 is the largest score, equal
/// scores keep ascending index order. NaN is rejected.
inline std::vector<int> rank_candidates(std::span<const double> scores) {
    if (scores.empty()) throw ContractError("rank_candidates: empty score list");
    for (std::size_t i = 0; i < scores.size(); ++i)
        if (std::isnan(scores[i])) throw ScoringError("NaN score at position " + std::to_string(i));
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    std::vector<int> ranks(scores.size());
    for (std::size_t r = 0; r < order.size(); ++r) ranks[order[r]] = static_cast<int>(r + 1);
    return ranks;
}

inline double log_sum_exp(std::span<const double> xs) {
    double m = -std::numeric_limits<double>::infinity();
    for (double x : xs) m = std::max(m, x);
    if (!std::isfinite(m)) return m;
    double s = 0;
    for (double x : xs) s += std::exp(x - m);
    return m + std::log(s);
}

namespace detail {

inline void check_log_likelihood(double lp, const std::string& candidate_id) {
    if (std::isnan(lp) || lp > 0) throw ScoringError("scorer returned an invalid log-likelihood", candidate_id);
}

inline std::string scoring_context(const Example& query, const Example& candidate, const TaskSpec& spec) {
    return render_demo(candidate, spec) + spec.templ.joiner + render_query(query.input, spec);
}

inline void check_distinct(const Example& query, const Example& candidate) {
    if (query.task_id == candidate.task_id && query.example_id == candidate.example_id)
        throw ContractError("candidate '" + candidate.example_id + "' is the query itself");
}

// The scorer requests one candidate contributes: the gold target for
// generation, every label for classification and multi-choice.
inline std::vector<ScorePair> scoring_requests(const Example& query, const Example& candidate, const TaskSpec& spec) {
    check_distinct(query, candidate);
    auto context = scoring_context(query, candidate, spec);
    if (spec.kind == TaskKind::generation) return {{context, query.target}};
    const auto& labels = label_space(query, spec);
    if (std::find(labels.begin(), labels.end(), query.target) == labels.end())
        throw DataError("gold target '" + query.target + "' of '" + query.example_id + "' is not in the label space");
    std::vector<ScorePair> out;
    out.reserve(labels.size());
    for (const auto& y : labels) out.push_back({context, y});
    return out;
}

// log s(z) from the scorer's answers to scoring_requests().
inline double reduce_log_score(const Example& query, const TaskSpec& spec, std::span<const double> lls,
                               const std::string& candidate_id) {
    for (double lp : lls) check_log_likelihood(lp, candidate_id);
    if (spec.kind == TaskKind::generation) return lls[0];
    const auto& labels = label_space(query, spec);
    auto gold = static_cast<std::size_t>(std::find(labels.begin(), labels.end(), query.target) - labels.begin());
    double norm = log_sum_exp(lls);
    if (!std::isfinite(norm)) throw ScoringError("label likelihoods sum to zero", candidate_id);
    return lls[gold] - norm;
}

inline double guarded_score(const Scorer& scorer, const Example& query, const Example& candidate,
                            const TaskSpec& spec) {
    auto requests = scoring_requests(query, candidate, spec);
    std::vector<double> lls;
    try {
        lls = scorer.log_likelihoods(requests);
    } catch (const ScoringError&) {
        throw;
    } catch (const std::exception& e) {
        throw ScoringError(std::string("scorer failed: ") + e.what(), candidate.example_id);
    }
    if (lls.size() != requests.size()) throw ScoringError("scorer returned the wrong number of values", candidate.example_id);
    return reduce_log_score(query, spec, lls, candidate.example_id);
}

}  // namespace detail

/// log p_G(y | z, x) for a generation query.
inline double log_score_gen(const Scorer& scorer, const Example& query, const Example& candidate, const TaskSpec& spec) {
    if (spec.kind != TaskKind::generation) throw ContractError("score_gen called on a non-generation task");
    return detail::guarded_score(scorer, query, candidate, spec);
}

/// s_gen(z) = p_G(y | z, x).
inline double score_gen(const Scorer& scorer, const Example& query, const Example& candidate, const TaskSpec& spec) {
    return std::exp(log_score_gen(scorer, query, candidate, spec));
}

/// log of the gold label's likelihood normalized over the label space.
inline double log_score_cls(const Scorer& scorer, const Example& query, const Example& candidate, const TaskSpec& spec) {
    if (spec.kind == TaskKind::generation) throw ContractError("score_cls called on a generation task");
    return detail::guarded_score(scorer, query, candidate, spec);
}

/// s_cls(z) = p_G(y | z, x) / sum over y' in Y of p_G(y' | z, x).
inline double score_cls(const Scorer& scorer, const Example& query, const Example& candidate, const TaskSpec& spec) {
    return std::exp(log_score_cls(scorer, query, candidate, spec));
}

/// Thread-safe map from (task, query, candidate, scorer fingerprint) to log s(z).
/// Concurrent readers, serialized writers.
class ScoreCache {
  public:
    using Key = std::tuple<std::string, std::string, std::string, std::string>;

    std::optional<double> get(const Key& key) const {
        std::shared_lock lock(mu_);
        auto it = map_.find(key);
        if (it == map_.end()) return std::nullopt;
        return it->second;
    }

    void put(const Key& key, double log_score) {
        std::unique_lock lock(mu_);
        map_.insert_or_assign(key, log_score);
    }

    std::size_t size() const {
        std::shared_lock lock(mu_);
        return map_.size();
    }

  private:
    mutable std::shared_mutex mu_;
    std::map<Key, double> map_;
};

/// Scores every candidate of one query (cache first), then ranks them.
/// All-or-nothing: any failure leaves both the result and the cache untouched.
inline CandidateSet score_candidate_set(const Scorer& scorer, const Example& query, const std::vector<std::string>& ids,
                                        const DatasetRegistry& registry, ScoreCache& cache, int iteration = 0,
                                        std::size_t* scorer_calls = nullptr) {
    const auto& spec = registry.task(query.task_id);
    const auto fp = scorer.fingerprint();
    std::vector<const Example*> candidates;
    candidates.reserve(ids.size());
    for (const auto& id : ids) {
        const Example* c = registry.find(query.task_id, id);
        if (!c) throw DataError("candidate '" + id + "' of query '" + query.example_id + "' does not resolve");
        detail::check_distinct(query, *c);
        candidates.push_back(c);
    }

    std::vector<std::optional<double>> log_scores(ids.size());
    std::vector<ScorePair> requests;
    std::vector<std::pair<std::size_t, std::size_t>> spans;  // (candidate, request count)
    for (std::size_t i = 0; i < ids.size(); ++i) {
        log_scores[i] = cache.get({query.task_id, query.example_id, ids[i], fp});
        if (log_scores[i]) continue;
        auto r = detail::scoring_requests(query, *candidates[i], spec);
        spans.emplace_back(i, r.size());
        for (auto& p : r) requests.push_back(std::move(p));
    }
    if (!requests.empty()) {
        std::vector<double> lls;
        try {
            lls = scorer.log_likelihoods(requests);
        } catch (const ScoringError&) {
            throw;
        } catch (const std::exception& e) {
            throw ScoringError(std::string("scorer failed: ") + e.what(), ids[spans.front().first]);
        }
        if (lls.size() != requests.size()) throw ScoringError("scorer returned the wrong number of values");
        if (scorer_calls) *scorer_calls += requests.size();
        std::size_t offset = 0;
        for (auto [i, n] : spans) {
            log_scores[i] = detail::reduce_log_score(query, spec, std::span<const double>(lls).subspan(offset, n), ids[i]);
            offset += n;
        }
        for (auto [i, n] : spans) cache.put({query.task_id, query.example_id, ids[i], fp}, *log_scores[i]);
    }

    CandidateSet set{query.task_id, query.example_id, iteration, {}};
    std::vector<double> ls;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        ls.push_back(*log_scores[i]);
        set.entries.push_back({ids[i], std::exp(*log_scores[i]), *log_scores[i], 0});
    }
    if (!ls.empty()) {
        auto ranks = rank_candidates(ls);
        for (std::size_t i = 0; i < ranks.size(); ++i) set.entries[i].rank = ranks[i];
    }
    return set;
}

/// Candidate sets keyed by (task, query id), in deterministic order.
using CandidateStore = std::map<std::pair<std::string, std::string>, CandidateSet>;

inline nlohmann::ordered_json candidate_set_to_json(const CandidateSet& set) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& e : set.entries) {
        nlohmann::ordered_json c{{"id", e.candidate_id}, {"score", e.score}, {"rank", e.rank}};
        // JSON has no infinities; a zero score round-trips through log(score).
        if (std::isfinite(e.log_score)) c["log_score"] = e.log_score;
        arr.push_back(std::move(c));
    }
    return {{"query_id", set.query_id}, {"iteration", set.iteration}, {"candidates", arr}, {"task", set.task_id}};
}

inline void write_candidate_store(std::ostream& out, const CandidateStore& store) {
    for (const auto& [key, set] : store) out << candidate_set_to_json(set).dump() << '\n';
}

inline CandidateStore read_candidate_store(std::istream& in) {
    CandidateStore store;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            auto j = nlohmann::json::parse(line);
            CandidateSet set;
            set.task_id = j.value("task", std::string());
            set.query_id = j.at("query_id").get<std::string>();
            set.iteration = j.at("iteration").get<int>();
            for (const auto& c : j.at("candidates")) {
                ScoredCandidate sc;
                sc.candidate_id = c.at("id").get<std::string>();
                sc.score = c.at("score").get<double>();
                sc.log_score = c.contains("log_score") ? c.at("log_score").get<double>() : std::log(sc.score);
                sc.rank = c.at("rank").get<int>();
                set.entries.push_back(std::move(sc));
            }
            auto key = std::make_pair(set.task_id, set.query_id);
            store.insert_or_assign(key, std::move(set));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("bad candidate record: ") + e.what(), line_no);
        }
    }
    return store;
}

}  // namespace udr
