#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <regex>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "udr/corpus.hpp"
#include "udr/error.hpp"
#include "udr/text.hpp"

namespace udr {

struct ScorePair {
    std::string context;
    std::string continuation;
};

/// A language model seen only through its conditional likelihood
/// p(continuation | context). Implementations work in log space and must be
/// deterministic for fixed inputs; log_likelihood() <= 0.
class Scorer {
  public:
    virtual ~Scorer() = default;

    virtual double log_likelihood(std::string_view context, std::string_view continuation) const = 0;

    virtual std::vector<double> log_likelihoods(std::span<const ScorePair> pairs) const {
        std::vector<double> out;
        out.reserve(pairs.size());
        for (const auto& p : pairs) out.push_back(log_likelihood(p.context, p.continuation));
        return out;
    }

    double cond_likelihood(std::string_view context, std::string_view continuation) const {
        return std::exp(log_likelihood(context, continuation));
    }

    /// Stable identity of the scorer kind and configuration; part of every
    /// score-cache key.
    virtual std::string fingerprint() const = 0;
};

/// Resolves the scorer to use for a task. Lets a single training run mix a
/// shared remote model with per-task fitted n-gram models.
using ScorerProvider = std::function<const Scorer&(const std::string& task_id)>;

inline ScorerProvider shared_scorer(const Scorer& scorer) {
    return [&scorer](const std::string&) -> const Scorer& { return scorer; };
}

/// Synthetic LM whose likelihood is a declared function of latent keys.
///
/// Keys are read from tokens matching `key_pattern` (first capture group).
/// The context is cut into segments, each starting at a key token; the last
/// segment is the query and every earlier one a demonstration. The
/// continuation then receives
///   p_match   if it occurs inside a demonstration sharing the query's key,
///   p_present if it occurs inside any other demonstration,
///   p_absent  otherwise.
/// An empty continuation has likelihood 1.
class OracleScorer final : public Scorer {
  public:
    struct Config {
        std::string key_pattern = "^zk(\\d+)[a-z]$";
        double p_match = 0.9;
        double p_present = 0.2;
        double p_absent = 0.05;
    };

    OracleScorer() : OracleScorer(Config{}) {}

    explicit OracleScorer(Config config) : config_(std::move(config)), re_(config_.key_pattern) {
        for (double p : {config_.p_match, config_.p_present, config_.p_absent})
            if (!(p > 0 && p <= 1)) throw ConfigError("oracle probabilities must lie in (0, 1]");
    }

    /// Latent key of the first key token in `text`, if any.
    std::optional<std::string> key_of(std::string_view text) const {
        for (const auto& t : tokenize(text))
            if (auto k = token_key(t)) return k;
        return std::nullopt;
    }

    double log_likelihood(std::string_view context, std::string_view continuation) const override {
        auto cont = tokenize(continuation);
        if (cont.empty()) return 0.0;
        struct Segment {
            std::string key;
            std::vector<std::string> tokens;
        };
        std::vector<Segment> segments;
        for (auto& t : tokenize(context)) {
            if (auto k = token_key(t)) segments.push_back({*k, {}});
            if (!segments.empty()) segments.back().tokens.push_back(std::move(t));
        }
        if (segments.empty()) return std::log(config_.p_absent);
        const auto& query_key = segments.back().key;
        bool present = false;
        for (std::size_t s = 0; s + 1 < segments.size(); ++s) {
            if (!contains(segments[s].tokens, cont)) continue;
            if (segments[s].key == query_key) return std::log(config_.p_match);
            present = true;
        }
        return std::log(present ? config_.p_present : config_.p_absent);
    }

    std::string fingerprint() const override {
        Fnv1a h;
        h.update("oracle").update(config_.key_pattern);
        for (double p : {config_.p_match, config_.p_present, config_.p_absent}) h.update(&p, sizeof p);
        return "oracle:" + hex64(h.digest());
    }

    const Config& config() const { return config_; }

  private:
    std::optional<std::string> token_key(const std::string& token) const {
        std::smatch m;
        if (std::regex_match(token, m, re_) && m.size() > 1) return m[1].str();
        return std::nullopt;
    }

    static bool contains(const std::vector<std::string>& hay, const std::vector<std::string>& needle) {
        return std::search(hay.begin(), hay.end(), needle.begin(), needle.end()) != hay.end();
    }

    Config config_;
    std::regex re_;
};

/// Word-level n-gram LM with additive smoothing:
///   p(w | h) = (c(h, w) + delta) / (c(h) + delta * (|V| + 1))
/// where h is the previous n-1 tokens (padded with a start marker) and
/// unseen words map to a single unknown symbol.
class NGramScorer final : public Scorer {
  public:
    NGramScorer(const std::vector<std::string>& documents, int order = 2, double smoothing = 0.1)
        : order_(order), smoothing_(smoothing) {
        if (order < 1) throw ConfigError("n-gram order must be >= 1");
        if (!(smoothing > 0)) throw ConfigError("n-gram smoothing must be > 0");
        Fnv1a h;
        h.update("ngram").update(&order_, sizeof order_).update(&smoothing_, sizeof smoothing_);
        for (const auto& doc : documents) {
            h.update(doc);
            auto tokens = tokenize(doc);
            for (const auto& t : tokens) vocab_.emplace(t, 0);
            std::vector<std::string> seq(static_cast<std::size_t>(order_ - 1), kStart);
            seq.insert(seq.end(), tokens.begin(), tokens.end());
            for (std::size_t i = static_cast<std::size_t>(order_ - 1); i < seq.size(); ++i) {
                auto key = history_key(seq, i);
                ++history_counts_[key];
                ++ngram_counts_[key][seq[i]];
            }
        }
        digest_ = h.digest();
    }

    /// Fits on the rendered train demonstrations of one task.
    static NGramScorer fit_task(const DatasetRegistry& registry, const std::string& task_id, int order = 2,
                                double smoothing = 0.1) {
        const auto& spec = registry.task(task_id);
        std::vector<std::string> docs;
        for (const auto& e : registry.examples(task_id, Split::train)) docs.push_back(render_demo(e, spec));
        return NGramScorer(docs, order, smoothing);
    }

    double log_likelihood(std::string_view context, std::string_view continuation) const override {
        auto ctx = tokenize(context);
        auto cont = tokenize(continuation);
        std::vector<std::string> seq(static_cast<std::size_t>(order_ - 1), kStart);
        seq.insert(seq.end(), ctx.begin(), ctx.end());
        std::size_t first = seq.size();
        for (auto& t : cont) seq.push_back(vocab_.count(t) ? t : kUnknown);
        // History tokens also collapse to the unknown symbol when unseen.
        for (std::size_t i = static_cast<std::size_t>(order_ - 1); i < first; ++i)
            if (!vocab_.count(seq[i])) seq[i] = kUnknown;
        double total = 0;
        double denom_extra = smoothing_ * static_cast<double>(vocab_.size() + 1);
        for (std::size_t i = first; i < seq.size(); ++i) {
            auto key = history_key(seq, i);
            double hc = 0, c = 0;
            if (auto it = history_counts_.find(key); it != history_counts_.end()) {
                hc = static_cast<double>(it->second);
                const auto& row = ngram_counts_.at(key);
                if (auto jt = row.find(seq[i]); jt != row.end()) c = static_cast<double>(jt->second);
            }
            total += std::log((c + smoothing_) / (hc + denom_extra));
        }
        return total;
    }

    std::string fingerprint() const override { return "ngram:" + hex64(digest_); }

    /// Known words, sorted. The unknown symbol is not included.
    std::vector<std::string> vocabulary() const {
        std::vector<std::string> out;
        for (const auto& [w, _] : vocab_) out.push_back(w);
        return out;
    }

  private:
    static constexpr const char* kStart = "\x02<s>";
    static constexpr const char* kUnknown = "\x02<unk>";

    std::string history_key(const std::vector<std::string>& seq, std::size_t i) const {
        std::string key;
        for (std::size_t j = i - static_cast<std::size_t>(order_ - 1); j < i; ++j) {
            key += seq[j];
            key += '\x1f';
        }
        return key;
    }

    int order_;
    double smoothing_;
    std::map<std::string, int> vocab_;
    std::unordered_map<std::string, std::size_t> history_counts_;
    std::unordered_map<std::string, std::unordered_map<std::string, std::size_t>> ngram_counts_;
    std::uint64_t digest_ = 0;
};

/// Owns one fitted n-gram scorer per trainable task.
class NGramScorerBank {
  public:
    NGramScorerBank(const DatasetRegistry& registry, int order = 2, double smoothing = 0.1) {
        for (const auto& id : registry.trainable_tasks())
            scorers_.emplace(id, std::make_unique<NGramScorer>(NGramScorer::fit_task(registry, id, order, smoothing)));
    }

    const Scorer& at(const std::string& task_id) const {
        auto it = scorers_.find(task_id);
        if (it == scorers_.end()) throw StateError("no n-gram scorer fitted for task '" + task_id + "'");
        return *it->second;
    }

    ScorerProvider provider() const {
        return [this](const std::string& id) -> const Scorer& { return at(id); };
    }

  private:
    std::map<std::string, std::unique_ptr<NGramScorer>> scorers_;
};

}  // namespace udr
