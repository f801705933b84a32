#pragma once

#include <cmath>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "udr/error.hpp"
#include "udr/scorer.hpp"

namespace udr {

/// Client for an HTTP likelihood service.
///
///   POST /v1/score  {"pairs": [{"context": str, "continuation": str}, ...]}
///                -> {"log_likelihoods": [float, ...], "model_fingerprint": str}
///   GET  /v1/health -> {"status": str, "model_fingerprint": str}
///
/// Requests are batched up to `max_batch` pairs. Any transport error, non-200
/// status, length mismatch or value outside (-inf, 0] is a ScoringError.
class RemoteScorer final : public Scorer {
  public:
    explicit RemoteScorer(std::string base_url, std::size_t max_batch = 64, int timeout_seconds = 60)
        : base_url_(std::move(base_url)), max_batch_(max_batch == 0 ? 1 : max_batch), timeout_(timeout_seconds) {}

    double log_likelihood(std::string_view context, std::string_view continuation) const override {
        ScorePair p{std::string(context), std::string(continuation)};
        return log_likelihoods(std::span<const ScorePair>(&p, 1)).front();
    }

    std::vector<double> log_likelihoods(std::span<const ScorePair> pairs) const override {
        std::vector<double> out;
        out.reserve(pairs.size());
        for (std::size_t start = 0; start < pairs.size(); start += max_batch_) {
            auto chunk = pairs.subspan(start, std::min(max_batch_, pairs.size() - start));
            auto values = post_batch(chunk);
            out.insert(out.end(), values.begin(), values.end());
        }
        return out;
    }

    /// "remote:" + the service's model fingerprint, fetched once from /v1/health.
    std::string fingerprint() const override {
        std::lock_guard lock(mu_);
        if (model_fingerprint_.empty()) {
            auto cli = client();
            auto res = cli.Get("/v1/health");
            if (!res) throw ScoringError("scorer service unreachable at " + base_url_ + ": " + httplib::to_string(res.error()));
            if (res->status != 200) throw ScoringError("scorer service not ready (HTTP " + std::to_string(res->status) + ")");
            try {
                model_fingerprint_ = nlohmann::json::parse(res->body).at("model_fingerprint").get<std::string>();
            } catch (const nlohmann::json::exception& e) {
                throw ScoringError(std::string("bad health response: ") + e.what());
            }
        }
        return "remote:" + model_fingerprint_;
    }

    static nlohmann::json request_body(std::span<const ScorePair> pairs) {
        auto arr = nlohmann::json::array();
        for (const auto& p : pairs) arr.push_back({{"context", p.context}, {"continuation", p.continuation}});
        return {{"pairs", arr}};
    }

  private:
    httplib::Client client() const {
        httplib::Client cli(base_url_);
        cli.set_connection_timeout(timeout_, 0);
        cli.set_read_timeout(timeout_, 0);
        return cli;
    }

    std::vector<double> post_batch(std::span<const ScorePair> pairs) const {
        auto cli = client();
        auto res = cli.Post("/v1/score", request_body(pairs).dump(), "application/json");
        if (!res) throw ScoringError("scorer service unreachable at " + base_url_ + ": " + httplib::to_string(res.error()));
        if (res->status != 200)
            throw ScoringError("scorer service returned HTTP " + std::to_string(res->status) + ": " + res->body);
        std::vector<double> values;
        try {
            auto j = nlohmann::json::parse(res->body);
            for (const auto& v : j.at("log_likelihoods")) values.push_back(v.is_null() ? NAN : v.get<double>());
        } catch (const nlohmann::json::exception& e) {
            throw ScoringError(std::string("bad score response: ") + e.what());
        }
        if (values.size() != pairs.size())
            throw ScoringError("score response has " + std::to_string(values.size()) + " values for " +
                               std::to_string(pairs.size()) + " pairs");
        for (double v : values)
            if (!std::isfinite(v) || v > 0) throw ScoringError("score response holds a log-likelihood outside (-inf, 0]");
        return values;
    }

    std::string base_url_;
    std::size_t max_batch_;
    int timeout_;
    mutable std::mutex mu_;
    mutable std::string model_fingerprint_;
};

}  // namespace udr
