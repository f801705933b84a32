#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "udr/error.hpp"
#include "udr/random.hpp"
#include "udr/text.hpp"

namespace udr {

using json = nlohmann::ordered_json;

enum class TaskKind { classification, multi_choice, generation };

inline std::string_view to_string(TaskKind k) {
    switch (k) {
        case TaskKind::classification: return "classification";
        case TaskKind::multi_choice: return "multi_choice";
        case TaskKind::generation: return "generation";
    }
    return "unknown";
}

inline TaskKind parse_task_kind(std::string_view s) {
    if (s == "classification") return TaskKind::classification;
    if (s == "multi_choice") return TaskKind::multi_choice;
    if (s == "generation") return TaskKind::generation;
    throw RegistryError("unknown task kind '" + std::string(s) + "'");
}

enum class Split { train, dev, test };

inline std::string_view to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::dev: return "dev";
        case Split::test: return "test";
    }
    return "unknown";
}

inline Split parse_split(std::string_view s) {
    if (s == "train") return Split::train;
    if (s == "dev") return Split::dev;
    if (s == "test") return Split::test;
    throw ConfigError("unknown split '" + std::string(s) + "'");
}

inline constexpr std::string_view kInputSlot = "{input}";
inline constexpr std::string_view kTargetSlot = "{target}";

namespace detail {

inline std::size_t count_occurrences(std::string_view haystack, std::string_view needle) {
    std::size_t n = 0;
    for (auto pos = haystack.find(needle); pos != std::string_view::npos; pos = haystack.find(needle, pos + needle.size()))
        ++n;
    return n;
}

// Single left-to-right pass: substituted text is never rescanned.
inline std::string substitute(std::string_view pattern, std::string_view input, std::string_view target) {
    std::string out;
    out.reserve(pattern.size() + input.size() + target.size());
    std::size_t i = 0;
    while (i < pattern.size()) {
        if (pattern.compare(i, kInputSlot.size(), kInputSlot) == 0) {
            out.append(input);
            i += kInputSlot.size();
        } else if (pattern.compare(i, kTargetSlot.size(), kTargetSlot) == 0) {
            out.append(target);
            i += kTargetSlot.size();
        } else {
            out.push_back(pattern[i++]);
        }
    }
    return out;
}

}  // namespace detail

struct TemplateSpec {
    std::string demo_pattern = "{input}\n{target}";
    std::string query_pattern = "{input}\n";
    std::string joiner = "\n";

    void validate() const {
        if (detail::count_occurrences(demo_pattern, kInputSlot) != 1 ||
            detail::count_occurrences(demo_pattern, kTargetSlot) != 1)
            throw TemplateError("demo_pattern must contain {input} and {target} exactly once: '" + demo_pattern + "'");
        if (detail::count_occurrences(query_pattern, kInputSlot) != 1 ||
            detail::count_occurrences(query_pattern, kTargetSlot) != 0)
            throw TemplateError("query_pattern must contain {input} exactly once and no {target}: '" + query_pattern +
                                "'");
    }
};

struct TaskSpec {
    std::string task_id;
    std::string name;
    TaskKind kind = TaskKind::classification;
    std::string instruction;
    std::vector<std::string> verbalizers;
    TemplateSpec templ;
    int max_target_len = 1;
    int context_budget = 1024;

    void validate() const {
        if (task_id.empty()) throw RegistryError("task_id must be non-empty");
        if (kind == TaskKind::classification) {
            if (verbalizers.empty()) throw RegistryError("classification task '" + task_id + "' has no verbalizers");
            std::set<std::string> seen(verbalizers.begin(), verbalizers.end());
            if (seen.size() != verbalizers.size())
                throw RegistryError("classification task '" + task_id + "' has duplicate verbalizers");
        }
        if (max_target_len < 1) throw RegistryError("task '" + task_id + "': max_target_len must be >= 1");
        if (context_budget < max_target_len + 1)
            throw RegistryError("task '" + task_id + "': context_budget must be >= max_target_len + 1");
        templ.validate();
    }
};

struct Example {
    std::string task_id;
    std::string example_id;
    std::string input;
    std::string target;
    std::optional<std::vector<std::string>> choices;

    friend bool operator==(const Example&, const Example&) = default;
};

/// Demonstration text: demo_pattern with {input} and {target} substituted.
inline std::string render_demo(const Example& example, const TaskSpec& spec) {
    spec.templ.validate();
    return detail::substitute(spec.templ.demo_pattern, example.input, example.target);
}

/// Query text: query_pattern with {input} substituted.
inline std::string render_query(std::string_view input, const TaskSpec& spec) {
    spec.templ.validate();
    return detail::substitute(spec.templ.query_pattern, input, {});
}

/// Label space a classification-style example is scored against: the task's
/// verbalizers, or the example's own choices for multi-choice tasks.
inline const std::vector<std::string>& label_space(const Example& example, const TaskSpec& spec) {
    if (spec.kind == TaskKind::multi_choice) {
        if (!example.choices || example.choices->empty())
            throw DataError("multi-choice example '" + example.example_id + "' has no choices");
        return *example.choices;
    }
    return spec.verbalizers;
}

inline TaskSpec task_from_json(const json& j) {
    TaskSpec t;
    try {
        t.task_id = j.at("task_id").get<std::string>();
        t.name = j.value("name", t.task_id);
        t.kind = parse_task_kind(j.at("kind").get<std::string>());
        t.instruction = j.at("instruction").get<std::string>();
        t.verbalizers = j.value("verbalizers", std::vector<std::string>{});
        if (j.contains("template")) {
            const auto& tj = j.at("template");
            t.templ.demo_pattern = tj.at("demo_pattern").get<std::string>();
            t.templ.query_pattern = tj.at("query_pattern").get<std::string>();
            t.templ.joiner = tj.value("joiner", std::string("\n"));
        }
        t.max_target_len = j.value("max_target_len", 1);
        t.context_budget = j.value("context_budget", 1024);
    } catch (const json::exception& e) {
        throw RegistryError(std::string("bad task record: ") + e.what());
    }
    t.validate();
    return t;
}

inline json task_to_json(const TaskSpec& t) {
    return json{{"task_id", t.task_id},
                {"name", t.name},
                {"kind", to_string(t.kind)},
                {"instruction", t.instruction},
                {"verbalizers", t.verbalizers},
                {"template",
                 {{"demo_pattern", t.templ.demo_pattern},
                  {"query_pattern", t.templ.query_pattern},
                  {"joiner", t.templ.joiner}}},
                {"max_target_len", t.max_target_len},
                {"context_budget", t.context_budget}};
}

inline json example_to_json(const Example& e) {
    json j{{"task", e.task_id}, {"id", e.example_id}, {"input", e.input}, {"target", e.target}};
    if (e.choices) j["choices"] = *e.choices;
    return j;
}

/// Tasks and their split data. Immutable once loading is finished; the
/// ordered maps make every iteration over tasks deterministic.
class DatasetRegistry {
  public:
    void add_task(TaskSpec spec) {
        spec.validate();
        if (tasks_.count(spec.task_id)) throw RegistryError("duplicate task_id '" + spec.task_id + "'");
        auto id = spec.task_id;
        tasks_.emplace(std::move(id), std::move(spec));
    }

    bool has_task(const std::string& task_id) const { return tasks_.count(task_id) != 0; }

    const TaskSpec& task(const std::string& task_id) const {
        auto it = tasks_.find(task_id);
        if (it == tasks_.end()) throw RegistryError("unknown task_id '" + task_id + "'");
        return it->second;
    }

    const std::map<std::string, TaskSpec>& tasks() const { return tasks_; }

    /// Checks an example against its task without inserting it.
    void check_example(const Example& e, Split split) const {
        const auto& spec = task(e.task_id);
        if (e.example_id.empty()) throw DataError("example in task '" + e.task_id + "' has an empty id");
        if (e.input.empty()) throw DataError("example '" + e.example_id + "' has an empty input");
        if (spec.kind == TaskKind::multi_choice) {
            if (!e.choices || std::find(e.choices->begin(), e.choices->end(), e.target) == e.choices->end())
                throw DataError("multi-choice example '" + e.example_id + "' target is not among its choices");
        }
        if (index_.count({e.task_id, e.example_id}))
            throw RegistryError("duplicate example id '" + e.example_id + "' in task '" + e.task_id + "'");
        (void)split;
    }

    void add_example(Example e, Split split) {
        check_example(e, split);
        auto& bucket = splits_[{e.task_id, split}];
        index_.emplace(std::make_pair(e.task_id, e.example_id), std::make_pair(split, bucket.size()));
        bucket.push_back(std::move(e));
    }

    const std::vector<Example>& examples(const std::string& task_id, Split split) const {
        static const std::vector<Example> empty;
        auto it = splits_.find({task_id, split});
        return it == splits_.end() ? empty : it->second;
    }

    const Example* find(const std::string& task_id, const std::string& example_id) const {
        auto it = index_.find({task_id, example_id});
        if (it == index_.end()) return nullptr;
        return &splits_.at({task_id, it->second.first})[it->second.second];
    }

    const Example& at(const std::string& task_id, const std::string& example_id) const {
        const Example* e = find(task_id, example_id);
        if (!e) throw DataError("unknown example '" + example_id + "' in task '" + task_id + "'");
        return *e;
    }

    /// Task ids with a non-empty train split, in registry order.
    std::vector<std::string> trainable_tasks() const {
        std::vector<std::string> out;
        for (const auto& [id, spec] : tasks_)
            if (!examples(id, Split::train).empty()) out.push_back(id);
        return out;
    }

    /// Keeps a fixed, seeded subset of at most `cap` train examples per task.
    /// The subset is chosen once; sampling never sees the dropped examples.
    void cap_train_split(std::size_t cap, std::uint64_t seed) {
        for (auto& [key, bucket] : splits_) {
            if (key.second != Split::train || bucket.size() <= cap) continue;
            Rng rng = derive_rng(seed, Fnv1a().update(key.first).digest());
            auto keep = sample_without_replacement(rng, bucket.size(), cap);
            std::sort(keep.begin(), keep.end());
            std::vector<Example> kept;
            for (auto i : keep) kept.push_back(std::move(bucket[i]));
            bucket = std::move(kept);
        }
        reindex();
    }

    static DatasetRegistry from_json(const json& j) {
        DatasetRegistry r;
        if (!j.contains("tasks") || !j.at("tasks").is_array()) throw RegistryError("registry must hold a 'tasks' array");
        for (const auto& t : j.at("tasks")) r.add_task(task_from_json(t));
        return r;
    }

    json tasks_json() const {
        json arr = json::array();
        for (const auto& [id, t] : tasks_) arr.push_back(task_to_json(t));
        return json{{"tasks", arr}};
    }

  private:
    void reindex() {
        index_.clear();
        for (const auto& [key, bucket] : splits_)
            for (std::size_t i = 0; i < bucket.size(); ++i)
                index_.emplace(std::make_pair(key.first, bucket[i].example_id), std::make_pair(key.second, i));
    }

    std::map<std::string, TaskSpec> tasks_;
    std::map<std::pair<std::string, Split>, std::vector<Example>> splits_;
    std::map<std::pair<std::string, std::string>, std::pair<Split, std::size_t>> index_;
};

inline DatasetRegistry load_registry(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open registry file '" + path + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ParseError("registry '" + path + "' is not valid JSON: " + e.what());
    }
    return DatasetRegistry::from_json(j);
}

inline Example example_from_json_line(std::string_view line, std::size_t line_no) {
    json j;
    try {
        j = json::parse(line);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("malformed JSON: ") + e.what(), line_no);
    }
    try {
        Example e;
        e.task_id = j.at("task").get<std::string>();
        e.example_id = j.at("id").get<std::string>();
        e.input = j.at("input").get<std::string>();
        e.target = j.at("target").get<std::string>();
        if (j.contains("choices") && !j.at("choices").is_null())
            e.choices = j.at("choices").get<std::vector<std::string>>();
        return e;
    } catch (const json::exception& e) {
        throw ParseError(std::string("bad example record: ") + e.what(), line_no);
    }
}

/// Parses an example JSONL stream into `split`. The stream is validated in
/// full before anything is inserted, so a failed load leaves the registry
/// unchanged. Blank lines are skipped.
inline std::size_t load_jsonl(std::istream& in, DatasetRegistry& registry, Split split = Split::train) {
    std::vector<Example> parsed;
    std::set<std::pair<std::string, std::string>> seen;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        Example e = example_from_json_line(line, line_no);
        try {
            registry.check_example(e, split);
        } catch (const RegistryError& err) {
            throw RegistryError(std::string(err.what()) + " (line " + std::to_string(line_no) + ")");
        } catch (const DataError& err) {
            throw DataError(std::string(err.what()) + " (line " + std::to_string(line_no) + ")");
        }
        if (!seen.insert({e.task_id, e.example_id}).second)
            throw RegistryError("duplicate example id '" + e.example_id + "' in task '" + e.task_id + "' (line " +
                                std::to_string(line_no) + ")");
        parsed.push_back(std::move(e));
    }
    for (auto& e : parsed) registry.add_example(std::move(e), split);
    return parsed.size();
}

inline std::size_t load_jsonl(const std::string& path, DatasetRegistry& registry, Split split = Split::train) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open data file '" + path + "'");
    return load_jsonl(in, registry, split);
}

/// Canonical serialization: one compact record per line, keys in the order
/// task, id, input, target, choices.
inline void write_jsonl(std::ostream& out, const std::vector<Example>& examples) {
    for (const auto& e : examples) out << example_to_json(e).dump() << '\n';
}

/// Multinomial task distribution p_i = q_i^alpha / sum_j q_j^alpha, with q_i
/// the task's share of all training examples.
struct TaskSampler {
    std::vector<std::string> task_ids;
    std::vector<double> probabilities;
    double alpha = 0.5;

    double probability(const std::string& task_id) const {
        for (std::size_t i = 0; i < task_ids.size(); ++i)
            if (task_ids[i] == task_id) return probabilities[i];
        return 0.0;
    }

    /// Inverse-CDF draw of a task index.
    std::size_t draw(Rng& rng) const {
        double u = uniform01(rng), acc = 0.0;
        for (std::size_t i = 0; i < probabilities.size(); ++i) {
            acc += probabilities[i];
            if (u < acc) return i;
        }
        return probabilities.size() - 1;
    }
};

inline TaskSampler build_sampler(const std::map<std::string, std::size_t>& sizes, double alpha) {
    if (alpha < 0 || !std::isfinite(alpha)) throw ConfigError("sampler alpha must be finite and >= 0");
    TaskSampler s;
    s.alpha = alpha;
    double total = 0;
    for (const auto& [id, n] : sizes)
        if (n > 0) total += static_cast<double>(n);
    if (total == 0) throw ConfigError("no task has training data");
    double norm = 0;
    for (const auto& [id, n] : sizes) {
        if (n == 0) continue;
        double w = std::pow(static_cast<double>(n) / total, alpha);
        s.task_ids.push_back(id);
        s.probabilities.push_back(w);
        norm += w;
    }
    for (auto& p : s.probabilities) p /= norm;
    return s;
}

inline TaskSampler build_sampler(const DatasetRegistry& registry, double alpha) {
    std::map<std::string, std::size_t> sizes;
    for (const auto& id : registry.trainable_tasks()) sizes[id] = registry.examples(id, Split::train).size();
    return build_sampler(sizes, alpha);
}

/// One single-task batch: a task drawn from the sampler, then `batch_size`
/// train examples drawn without replacement (with replacement when the split
/// is smaller than the batch).
inline std::vector<Example> sample_batch(const TaskSampler& sampler, const DatasetRegistry& registry,
                                         std::size_t batch_size, Rng& rng) {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    const auto& task_id = sampler.task_ids.at(sampler.draw(rng));
    const auto& pool = registry.examples(task_id, Split::train);
    std::vector<Example> batch;
    batch.reserve(batch_size);
    if (pool.size() >= batch_size) {
        for (auto i : sample_without_replacement(rng, pool.size(), batch_size)) batch.push_back(pool[i]);
    } else {
        for (std::size_t i = 0; i < batch_size; ++i) batch.push_back(pool[uniform_index(rng, pool.size())]);
    }
    return batch;
}

}  // namespace udr
