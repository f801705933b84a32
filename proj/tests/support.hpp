#pragma once

// Independent oracles and fixtures shared by the unit tests and the
// acceptance binary. Nothing here calls the code paths it is used to check.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "udr/synthetic.hpp"
#include "udr/udr.hpp"

namespace udr::testing {

namespace fs = std::filesystem;

/// Removes itself on destruction.
class TempDir {
  public:
    TempDir() {
        static std::mt19937_64 rng(std::random_device{}());
        path_ = fs::temp_directory_path() / ("udr-test-" + std::to_string(rng()));
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }
    std::string file(const std::string& name) const { return (path_ / name).string(); }

  private:
    fs::path path_;
};

inline double relative_error(double analytic, double numeric) {
    double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    return std::abs(analytic - numeric) / scale;
}

/// Central difference (f(x+eps) - f(x-eps)) / 2eps of `f` at every entry of `x`.
inline std::vector<double> numeric_gradient(std::vector<double> x, const std::function<double(const std::vector<double>&)>& f,
                                            double eps = 1e-4) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        double keep = x[i];
        x[i] = keep + eps;
        double plus = f(x);
        x[i] = keep - eps;
        double minus = f(x);
        x[i] = keep;
        g[i] = (plus - minus) / (2 * eps);
    }
    return g;
}

/// Direct transcription of the pairwise ranking loss, no gradient.
inline double reference_rank_loss(const std::vector<double>& sims, const std::vector<int>& ranks) {
    double total = 0;
    for (std::size_t i = 0; i < sims.size(); ++i)
        for (std::size_t j = 0; j < sims.size(); ++j) {
            double w = std::max(0.0, 1.0 / ranks[i] - 1.0 / ranks[j]);
            total += w * std::log(1 + std::exp(sims[j] - sims[i]));
        }
    return total;
}

/// Direct transcription of the in-batch softmax loss, no gradient.
inline double reference_inbatch_loss(const std::vector<double>& sims, std::size_t cols,
                                     const std::vector<std::size_t>& positives) {
    double total = 0;
    for (std::size_t r = 0; r < positives.size(); ++r) {
        double z = 0;
        for (std::size_t c = 0; c < cols; ++c) z += std::exp(sims[r * cols + c]);
        total += -std::log(std::exp(sims[r * cols + positives[r]]) / z);
    }
    return total / static_cast<double>(positives.size());
}

/// Exhaustive Okapi BM25: recounts every term frequency from raw text.
inline std::vector<double> brute_force_bm25(const std::vector<std::string>& docs, const std::string& query, double k1 = 1.2,
                                            double b = 0.75) {
    std::vector<std::vector<std::string>> toks;
    double total = 0;
    for (const auto& d : docs) {
        toks.push_back(tokenize(d));
        total += static_cast<double>(toks.back().size());
    }
    const double n = static_cast<double>(docs.size());
    const double avg = total / n;
    auto q = tokenize(query);
    std::set<std::string> terms(q.begin(), q.end());
    std::vector<double> scores(docs.size(), 0.0);
    for (const auto& term : terms) {
        double df = 0;
        for (const auto& t : toks) df += std::count(t.begin(), t.end(), term) > 0 ? 1 : 0;
        if (df == 0) continue;
        double idf = std::log(1 + (n - df + 0.5) / (df + 0.5));
        for (std::size_t i = 0; i < docs.size(); ++i) {
            double tf = static_cast<double>(std::count(toks[i].begin(), toks[i].end(), term));
            if (tf == 0) continue;
            double len = static_cast<double>(toks[i].size());
            scores[i] += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len / avg));
        }
    }
    return scores;
}

/// Indices sorted by descending score with ascending-index ties (full sort).
inline std::vector<std::size_t> argsort_desc(const std::vector<double>& scores) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    return idx;
}

/// Like argsort_desc, but scores within `rel` of their neighbour count as
/// tied and fall back to ascending index. Sums of the same terms in another
/// order can differ in the last bit; this keeps such ties exact.
inline std::vector<std::size_t> argsort_desc_near_ties(const std::vector<double>& scores, double rel = 1e-12) {
    auto idx = argsort_desc(scores);
    std::size_t start = 0;
    for (std::size_t i = 1; i <= idx.size(); ++i) {
        bool same = i < idx.size() &&
                    std::abs(scores[idx[i]] - scores[idx[i - 1]]) <= rel * std::max(1.0, std::abs(scores[idx[i]]));
        if (!same) {
            std::sort(idx.begin() + static_cast<std::ptrdiff_t>(start), idx.begin() + static_cast<std::ptrdiff_t>(i));
            start = i;
        }
    }
    return idx;
}

/// A one-task registry whose inputs are random words from a small vocabulary.
inline DatasetRegistry random_registry(std::mt19937_64& rng, std::size_t n_train, std::size_t vocab = 40,
                                       TaskKind kind = TaskKind::classification, std::size_t n_test = 0) {
    TaskSpec spec;
    spec.task_id = "t";
    spec.kind = kind;
    spec.instruction = "label the text";
    if (kind == TaskKind::classification) spec.verbalizers = {"yes", "no"};
    spec.templ = {"{input} => {target}", "{input} =>", "\n"};
    spec.max_target_len = 2;
    spec.context_budget = 512;
    DatasetRegistry reg;
    reg.add_task(spec);
    auto make = [&](std::size_t i, const std::string& prefix, Split split) {
        std::uniform_int_distribution<std::size_t> word(0, vocab - 1), len(2, 7);
        std::string input;
        for (std::size_t w = 0, L = len(rng); w < L; ++w) input += (w ? " v" : "v") + std::to_string(word(rng));
        std::string target = kind == TaskKind::classification ? (rng() % 2 ? "yes" : "no") : "v" + std::to_string(word(rng));
        reg.add_example({"t", prefix + std::to_string(i), input, target, std::nullopt}, split);
    };
    for (std::size_t i = 0; i < n_train; ++i) make(i, "d", Split::train);
    for (std::size_t i = 0; i < n_test; ++i) make(i, "q", Split::test);
    return reg;
}

/// Random float parameters drawn wider than the initializer so gradients are
/// not dominated by the identity projection.
template <typename T>
BiEncoder<T> random_model(std::mt19937_64& rng, std::size_t vocab_size, std::size_t dim, Vocabulary vocab = {}) {
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    BiEncoder<T> m;
    m.vocab = std::move(vocab);
    m.params.dim = dim;
    auto fill = [&](std::size_t r, std::size_t c) {
        Matrix<T> x(r, c);
        for (auto& v : x.data) v = static_cast<T>(u(rng));
        return x;
    };
    m.params.query = {fill(vocab_size, dim), fill(dim, dim)};
    m.params.demo = {fill(vocab_size, dim), fill(dim, dim)};
    return m;
}

/// Flattens the four parameter matrices (query emb, query proj, demo emb, demo proj).
template <typename T>
std::vector<double> flatten(const BiEncoderParams<T>& p) {
    std::vector<double> out;
    for (const auto* m : {&p.query.embeddings, &p.query.projection, &p.demo.embeddings, &p.demo.projection})
        out.insert(out.end(), m->data.begin(), m->data.end());
    return out;
}

template <typename T>
void unflatten(BiEncoderParams<T>& p, const std::vector<double>& flat) {
    std::size_t k = 0;
    for (auto* m : {&p.query.embeddings, &p.query.projection, &p.demo.embeddings, &p.demo.projection})
        for (auto& v : m->data) v = static_cast<T>(flat[k++]);
}

/// Words "w0 w1 ..." of length n; each word is exactly one token.
inline std::string words(std::size_t n, const std::string& stem = "w") {
    std::string out;
    for (std::size_t i = 0; i < n; ++i) out += (i ? " " : "") + stem + std::to_string(i);
    return out;
}

/// One randomized budget case. Templates separate every slot by whitespace so
/// the token count of the concatenated prompt is the oracle. Returns an empty
/// string on success, otherwise what went wrong.
inline std::string budget_property_case(std::mt19937_64& rng) {
    auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
    TaskSpec spec;
    spec.task_id = "t";
    spec.kind = rng() % 2 ? TaskKind::generation : TaskKind::classification;
    if (spec.kind == TaskKind::classification) spec.verbalizers = {"yes", words(pick(1, 3), "lab")};
    spec.templ = {"Q: {input} A: {target}", "Q: {input} A:", rng() % 2 ? "\n" : "\n--\n"};
    spec.max_target_len = static_cast<int>(pick(1, 6));
    spec.context_budget = static_cast<int>(pick(10, 200));
    const std::size_t reserve = std::max<std::size_t>(
        static_cast<std::size_t>(spec.max_target_len),
        spec.kind == TaskKind::classification ? token_count(spec.verbalizers[1]) : 0);
    const std::string x = words(pick(1, 40), "x");
    std::vector<Example> ranked;
    for (std::size_t i = 0, n = pick(0, 30); i < n; ++i)
        ranked.push_back({"t", "d" + std::to_string(i), words(pick(1, 30), "z"), words(pick(1, 3), "y"), std::nullopt});
    std::optional<std::size_t> max_demos;
    if (rng() % 4 == 0) max_demos = pick(0, 12);
    const std::size_t cap = max_demos.value_or(spec.kind == TaskKind::generation ? ranked.size() : 8);
    const auto budget = static_cast<std::size_t>(spec.context_budget);
    auto actual = [&](const std::vector<Example>& demos) {
        std::string prompt;
        for (const auto& d : demos) prompt += "Q: " + d.input + " A: " + d.target + spec.templ.joiner;
        prompt += "Q: " + x + " A:";
        return token_count(prompt) + reserve;
    };
    if (actual({}) > budget) {
        try {
            select_demonstrations(ranked, spec, x, max_demos);
            return "query over budget was accepted";
        } catch (const BudgetError&) {
            return {};
        }
    }
    auto sel = select_demonstrations(ranked, spec, x, max_demos);
    std::vector<Example> chosen;
    for (std::size_t i = 0; i < sel.chosen.size(); ++i) {
        if (sel.chosen[i] != i) return "selection is not a prefix";
        chosen.push_back(ranked[i]);
    }
    if (chosen.size() > cap) return "selection exceeds the cap";
    if (actual(chosen) > budget) return "selection exceeds the budget";
    bool room_left = chosen.size() < std::min(cap, ranked.size());
    if (room_left) {
        auto more = chosen;
        more.push_back(ranked[chosen.size()]);
        if (actual(more) <= budget) return "selection is not maximal";
        if (!sel.budget_limited) return "budget stop not flagged";
    } else if (sel.budget_limited) {
        return "budget flag set without a budget stop";
    }
    std::vector<double> scores(chosen.size());
    for (auto& s : scores) s = std::uniform_real_distribution<double>(-1, 1)(rng);
    for (auto strategy : {OrderStrategy::ascending, OrderStrategy::descending, OrderStrategy::random}) {
        auto ordered = order_demonstrations(chosen, scores, {strategy, rng()});
        auto plan = assemble_prompt(ordered, x, spec, strategy);
        if (plan.token_cost > budget) return "assembled prompt exceeds the budget";
        if (plan.token_cost != token_count(plan.rendered_prompt) + reserve) return "token_cost disagrees with the prompt";
    }
    return {};
}

/// One randomized ordering case over n demonstrations with tied scores.
inline std::string ordering_property_case(std::mt19937_64& rng) {
    std::size_t n = std::uniform_int_distribution<std::size_t>(0, 20)(rng);
    std::vector<int> items(n);
    std::iota(items.begin(), items.end(), 0);
    std::vector<double> scores(n);
    for (auto& s : scores) s = static_cast<double>(rng() % 5);
    auto oracle = argsort_desc(scores);
    std::vector<int> expect_desc(oracle.begin(), oracle.end());
    auto desc = order_demonstrations(items, scores, {OrderStrategy::descending, 0});
    auto asc = order_demonstrations(items, scores, {OrderStrategy::ascending, 0});
    if (desc != expect_desc) return "descending is not the stable score sort";
    if (!std::equal(asc.begin(), asc.end(), desc.rbegin())) return "ascending is not the reverse of descending";
    std::uint64_t seed = rng();
    auto r1 = order_demonstrations(items, scores, {OrderStrategy::random, seed});
    auto r2 = order_demonstrations(items, scores, {OrderStrategy::random, seed});
    if (r1 != r2) return "random order is not reproducible";
    for (auto* v : {&desc, &asc, &r1}) {
        auto sorted = *v;
        std::sort(sorted.begin(), sorted.end());
        if (sorted != items) return "ordering is not a permutation";
    }
    return {};
}

/// Loads the shipped synthetic fixture from `dir` (registry.json, train.jsonl,
/// test.jsonl) and recovers each example's latent key from its key token.
inline synthetic::Fixture load_synthetic_fixture(const std::string& dir) {
    synthetic::Fixture fx;
    fx.registry = load_registry(dir + "/registry.json");
    load_jsonl(dir + "/train.jsonl", fx.registry, Split::train);
    load_jsonl(dir + "/test.jsonl", fx.registry, Split::test);
    OracleScorer oracle;
    for (const auto& [task, spec] : fx.registry.tasks())
        for (auto split : {Split::train, Split::test})
            for (const auto& e : fx.registry.examples(task, split)) fx.keys[{task, e.example_id}] = std::stoi(*oracle.key_of(e.input));
    return fx;
}

}  // namespace udr::testing
