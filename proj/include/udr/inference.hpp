#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "udr/bi_encoder.hpp"
#include "udr/bm25.hpp"
#include "udr/corpus.hpp"
#include "udr/dense_index.hpp"
#include "udr/error.hpp"
#include "udr/random.hpp"
#include "udr/scorer.hpp"
#include "udr/text.hpp"

namespace udr {

/// Demonstration count for classification and multi-choice tasks.
inline constexpr std::size_t kClassificationDemos = 8;

enum class OrderStrategy { ascending, descending, random };

struct OrderSpec {
    OrderStrategy strategy = OrderStrategy::ascending;
    std::uint64_t seed = 0;
};

inline std::string_view to_string(OrderStrategy s) {
    switch (s) {
        case OrderStrategy::ascending: return "ascending";
        case OrderStrategy::descending: return "descending";
        case OrderStrategy::random: return "random";
    }
    return "unknown";
}

inline OrderStrategy parse_order(std::string_view s) {
    if (s == "ascending") return OrderStrategy::ascending;
    if (s == "descending") return OrderStrategy::descending;
    if (s == "random") return OrderStrategy::random;
    throw ConfigError("unknown order strategy '" + std::string(s) + "'");
}

/// Query-tower encoding of I ⊕ x_test searched against a task index. The
/// index must have been built by this exact encoder.
inline std::vector<ScoredId> retrieve(const BiEncoder<float>& model, std::uint64_t model_fingerprint,
                                      const DenseIndex& index, std::string_view x_test, const TaskSpec& spec,
                                      std::size_t k) {
    if (index.checkpoint_fingerprint != model_fingerprint)
        throw StateError("dense index for task '" + index.task_id + "' was built by a different checkpoint (stale index)");
    return index.search(std::span<const double>(model.encode_query(x_test, spec).output), k);
}

inline std::vector<ScoredId> retrieve(const BiEncoder<float>& model, const DenseIndex& index, std::string_view x_test,
                                      const TaskSpec& spec, std::size_t k) {
    return retrieve(model, fingerprint(model), index, x_test, spec, k);
}

/// Tokens held back for the answer: max_target_len for generation; for
/// classification-style tasks the longer of max_target_len and the longest
/// verbalizer.
inline std::size_t target_reserve(const TaskSpec& spec) {
    std::size_t reserve = static_cast<std::size_t>(spec.max_target_len);
    if (spec.kind != TaskKind::generation)
        for (const auto& v : spec.verbalizers) reserve = std::max(reserve, token_count(v));
    return reserve;
}

/// Prompt text: rendered demonstrations joined by the task joiner, then the
/// joiner and the rendered query. No demonstrations gives the query alone.
inline std::string render_prompt(std::span<const Example> demos, std::string_view x_test, const TaskSpec& spec) {
    std::string out;
    for (const auto& d : demos) {
        out += render_demo(d, spec);
        out += spec.templ.joiner;
    }
    out += render_query(x_test, spec);
    return out;
}

/// Additive token accounting used for selection: every rendered piece is
/// counted separately. Tokenizing the concatenated prompt never yields more
/// tokens than this, so a selection within budget stays within budget under
/// any ordering.
inline std::size_t piecewise_cost(std::span<const Example> demos, std::string_view x_test, const TaskSpec& spec) {
    std::size_t cost = token_count(render_query(x_test, spec)) + target_reserve(spec);
    const std::size_t joiner = token_count(spec.templ.joiner);
    for (const auto& d : demos) cost += token_count(render_demo(d, spec)) + joiner;
    return cost;
}

struct Selection {
    std::vector<std::size_t> chosen;  // positions into the ranked list, a prefix
    bool budget_limited = false;      // the budget, not the pool or cap, ended selection
};

/// Greedy prefix of `ranked` (most similar first) under the task's context
/// budget. Classification-style tasks additionally cap at `max_demos`
/// (default 8); generation tasks take as many as fit.
inline Selection select_demonstrations(std::span<const Example> ranked, const TaskSpec& spec, std::string_view x_test,
                                       std::optional<std::size_t> max_demos = std::nullopt) {
    const auto budget = static_cast<std::size_t>(spec.context_budget);
    std::size_t cost = piecewise_cost({}, x_test, spec);
    if (cost > budget)
        throw BudgetError("test input needs " + std::to_string(cost) + " tokens, over the budget of " + std::to_string(budget));
    std::size_t cap = max_demos.value_or(spec.kind == TaskKind::generation ? ranked.size() : kClassificationDemos);
    const std::size_t joiner = token_count(spec.templ.joiner);
    Selection sel;
    for (std::size_t i = 0; i < ranked.size() && sel.chosen.size() < cap; ++i) {
        std::size_t next = cost + token_count(render_demo(ranked[i], spec)) + joiner;
        if (next > budget) {
            sel.budget_limited = true;
            break;
        }
        cost = next;
        sel.chosen.push_back(i);
    }
    return sel;
}

/// Reorders selected demonstrations. `scores` are their similarities to the
/// test input. descending puts the most similar first; ascending is its exact
/// reverse (most similar adjacent to the test input); random is a seeded shuffle.
template <typename T>
std::vector<T> order_demonstrations(std::vector<T> demos, std::span<const double> scores, OrderSpec order = {}) {
    if (scores.size() != demos.size()) throw ContractError("order_demonstrations: one score per demonstration required");
    std::vector<std::size_t> idx(demos.size());
    std::iota(idx.begin(), idx.end(), 0);
    if (order.strategy == OrderStrategy::random) {
        Rng rng(order.seed);
        shuffle(idx, rng);
    } else {
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
        if (order.strategy == OrderStrategy::ascending) std::reverse(idx.begin(), idx.end());
    }
    std::vector<T> out;
    out.reserve(demos.size());
    for (auto i : idx) out.push_back(std::move(demos[i]));
    return out;
}

struct PromptPlan {
    std::string task_id;
    std::vector<std::string> demonstrations;
    OrderStrategy order = OrderStrategy::ascending;
    std::string rendered_prompt;
    std::size_t token_cost = 0;
    std::size_t budget = 0;
    bool budget_limited = false;
};

/// Renders the final prompt. token_cost is the token count of the rendered
/// prompt plus the target reserve and must fit the task budget.
inline PromptPlan assemble_prompt(std::span<const Example> demos, std::string_view x_test, const TaskSpec& spec,
                                  OrderStrategy order = OrderStrategy::ascending) {
    PromptPlan plan;
    plan.task_id = spec.task_id;
    plan.order = order;
    std::set<std::string> seen;
    for (const auto& d : demos) {
        if (!seen.insert(d.example_id).second) throw ContractError("duplicate demonstration '" + d.example_id + "'");
        plan.demonstrations.push_back(d.example_id);
    }
    plan.rendered_prompt = render_prompt(demos, x_test, spec);
    plan.token_cost = token_count(plan.rendered_prompt) + target_reserve(spec);
    plan.budget = static_cast<std::size_t>(spec.context_budget);
    if (plan.token_cost > plan.budget)
        throw ContractError("prompt needs " + std::to_string(plan.token_cost) + " tokens, over the budget of " +
                            std::to_string(plan.budget));
    return plan;
}

inline nlohmann::ordered_json plan_to_json(const PromptPlan& plan, const std::string& query_id) {
    return {{"query", query_id},
            {"demos", plan.demonstrations},
            {"order", to_string(plan.order)},
            {"prompt", plan.rendered_prompt},
            {"token_cost", plan.token_cost}};
}

enum class Metric { accuracy, exact_match };

inline std::string_view to_string(Metric m) { return m == Metric::accuracy ? "accuracy" : "exact_match"; }

inline Metric metric_for(TaskKind kind) { return kind == TaskKind::generation ? Metric::exact_match : Metric::accuracy; }

struct EvalResult {
    Metric metric = Metric::accuracy;
    double value = 0;
    std::size_t n = 0;
    std::size_t correct = 0;
};

/// Accuracy: exact string match against the gold target. Exact match: equal
/// after whitespace normalization.
inline EvalResult evaluate(std::span<const std::string> predictions, std::span<const Example> golds, Metric metric) {
    if (predictions.size() != golds.size()) throw ContractError("evaluate: predictions and golds differ in length");
    if (golds.empty()) throw ContractError("evaluate: nothing to evaluate");
    EvalResult r{metric, 0, golds.size(), 0};
    for (std::size_t i = 0; i < golds.size(); ++i) {
        bool ok = metric == Metric::accuracy ? predictions[i] == golds[i].target
                                             : normalize_whitespace(predictions[i]) == normalize_whitespace(golds[i].target);
        r.correct += ok ? 1 : 0;
    }
    r.value = static_cast<double>(r.correct) / static_cast<double>(r.n);
    return r;
}

/// Anything that can propose demonstrations for a test example, most
/// relevant first. Results hold train-split example ids of the same task.
class DemoRetriever {
  public:
    virtual ~DemoRetriever() = default;
    virtual std::vector<ScoredId> retrieve(const Example& query, std::size_t k) const = 0;
    virtual std::string name() const = 0;
};

/// Uniform sampling from the train split, seeded per (seed, task, query).
class RandomRetriever final : public DemoRetriever {
  public:
    RandomRetriever(const DatasetRegistry& registry, std::uint64_t seed) : registry_(&registry), seed_(seed) {}

    std::vector<ScoredId> retrieve(const Example& query, std::size_t k) const override {
        const auto& split = registry_->examples(query.task_id, Split::train);
        std::vector<std::size_t> pool;
        for (std::size_t i = 0; i < split.size(); ++i)
            if (split[i].example_id != query.example_id) pool.push_back(i);
        Rng rng = derive_rng(seed_, Fnv1a().update(query.task_id).update(query.example_id).digest());
        std::vector<ScoredId> out;
        for (auto i : sample_without_replacement(rng, pool.size(), k))
            out.push_back({split[pool[i]].example_id, static_cast<double>(k - out.size()), pool[i]});
        return out;
    }

    std::string name() const override { return "random"; }

  private:
    const DatasetRegistry* registry_;
    std::uint64_t seed_;
};

/// BM25 over train inputs. Examples without lexical overlap follow the
/// matches in ordinal order so that k demonstrations are always available.
class Bm25Retriever final : public DemoRetriever {
  public:
    explicit Bm25Retriever(const DatasetRegistry& registry, Bm25Params params = {}) : lexical_(registry, params) {
        for (const auto& id : registry.trainable_tasks()) lexical_.index_task(id, CandidateMode::by_input);
    }

    std::vector<ScoredId> retrieve(const Example& query, std::size_t k) const override {
        const auto& idx = lexical_.index(query.task_id, CandidateMode::by_input);
        auto [scores, matched] = idx.score_all(query.input);
        std::vector<ScoredId> out;
        for (auto& hit : detail::rank_scores(idx, scores, nullptr)) {
            if (hit.id == query.example_id) continue;
            out.push_back(std::move(hit));
            if (out.size() == k) break;
        }
        return out;
    }

    std::string name() const override { return "bm25"; }

  private:
    LexicalCandidateIndex lexical_;
};

/// Trained bi-encoder over prebuilt per-task indexes.
class DenseRetriever final : public DemoRetriever {
  public:
    DenseRetriever(const DatasetRegistry& registry, BiEncoder<float> model, std::map<std::string, DenseIndex> indexes)
        : registry_(&registry), model_(std::move(model)), fingerprint_(fingerprint(model_)), indexes_(std::move(indexes)) {
        for (const auto& [task, index] : indexes_)
            if (index.checkpoint_fingerprint != fingerprint_)
                throw StateError("dense index for task '" + task + "' was built by a different checkpoint (stale index)");
    }

    /// Builds an index for every trainable task.
    static DenseRetriever build(const DatasetRegistry& registry, BiEncoder<float> model) {
        std::map<std::string, DenseIndex> indexes;
        for (const auto& id : registry.trainable_tasks()) indexes.emplace(id, build_dense_index(model, registry, id));
        return DenseRetriever(registry, std::move(model), std::move(indexes));
    }

    std::vector<ScoredId> retrieve(const Example& query, std::size_t k) const override {
        auto it = indexes_.find(query.task_id);
        if (it == indexes_.end()) throw StateError("no dense index for task '" + query.task_id + "'");
        auto hits = udr::retrieve(model_, fingerprint_, it->second, query.input, registry_->task(query.task_id), k + 1);
        std::erase_if(hits, [&](const ScoredId& h) { return h.id == query.example_id; });
        if (hits.size() > k) hits.resize(k);
        return hits;
    }

    std::string name() const override { return "dense"; }
    const BiEncoder<float>& model() const { return model_; }

  private:
    const DatasetRegistry* registry_;
    BiEncoder<float> model_;
    std::uint64_t fingerprint_;
    std::map<std::string, DenseIndex> indexes_;
};

/// Closed-set readout with the configured scorer: the label (or choice) with
/// the highest likelihood after the prompt. Generation tasks choose among the
/// task's distinct train targets. Ties keep the first candidate.
inline std::string predict(const Scorer& scorer, const PromptPlan& plan, const Example& query, const TaskSpec& spec,
                           const DatasetRegistry& registry) {
    std::vector<std::string> options;
    if (spec.kind == TaskKind::generation) {
        std::set<std::string> seen;
        for (const auto& e : registry.examples(spec.task_id, Split::train))
            if (seen.insert(e.target).second) options.push_back(e.target);
    } else {
        options = label_space(query, spec);
    }
    if (options.empty()) throw DataError("no answer options for task '" + spec.task_id + "'");
    std::vector<ScorePair> pairs;
    for (const auto& o : options) pairs.push_back({plan.rendered_prompt, o});
    auto lls = scorer.log_likelihoods(pairs);
    auto best = static_cast<std::size_t>(std::max_element(lls.begin(), lls.end()) - lls.begin());
    return options[best];
}

struct IclOptions {
    OrderSpec order;
    /// Candidates pulled from the retriever before budget selection.
    std::size_t pool = 64;
    /// Demonstration cap; unset means 8 for classification, budget-only for generation.
    std::optional<std::size_t> max_demos;
};

struct IclRun {
    EvalResult result;
    std::vector<PromptPlan> plans;
    std::vector<std::string> predictions;
};

/// Retrieve, select, order, assemble, predict and score every example of one
/// task split.
inline IclRun run_icl(const DatasetRegistry& registry, const DemoRetriever& retriever, const Scorer& scorer,
                      const std::string& task_id, Split split, const IclOptions& options = {}) {
    const auto& spec = registry.task(task_id);
    const auto& queries = registry.examples(task_id, split);
    IclRun run;
    for (const auto& q : queries) {
        auto hits = retriever.retrieve(q, options.pool);
        std::vector<Example> ranked;
        for (const auto& h : hits) ranked.push_back(registry.at(task_id, h.id));
        auto sel = select_demonstrations(ranked, spec, q.input, options.max_demos);
        std::vector<Example> chosen;
        std::vector<double> scores;
        for (auto i : sel.chosen) {
            chosen.push_back(ranked[i]);
            scores.push_back(hits[i].score);
        }
        OrderSpec order = options.order;
        order.seed = derive_rng(options.order.seed, Fnv1a().update(q.example_id).digest())();
        auto ordered = order_demonstrations(std::move(chosen), scores, order);
        auto plan = assemble_prompt(ordered, q.input, spec, order.strategy);
        plan.budget_limited = sel.budget_limited;
        run.predictions.push_back(predict(scorer, plan, q, spec, registry));
        run.plans.push_back(std::move(plan));
    }
    run.result = evaluate(run.predictions, queries, metric_for(spec.kind));
    return run;
}

/// Accuracy or exact match as a function of the demonstration count.
inline std::vector<std::pair<std::size_t, EvalResult>> sweep_demo_counts(const DatasetRegistry& registry,
                                                                         const DemoRetriever& retriever,
                                                                         const Scorer& scorer, const std::string& task_id,
                                                                         Split split, std::span<const std::size_t> counts,
                                                                         IclOptions options = {}) {
    std::vector<std::pair<std::size_t, EvalResult>> out;
    for (auto n : counts) {
        options.max_demos = n;
        out.emplace_back(n, run_icl(registry, retriever, scorer, task_id, split, options).result);
    }
    return out;
}

}  // namespace udr
