#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "udr/error.hpp"

namespace udr {

struct LossWithGrad {
    double value = 0;
    std::vector<double> grad;
};

/// log(1 + e^x) without overflow.
inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

/// Pair weight max(0, 1/r_i - 1/r_j): positive only when i outranks j.
inline double pair_weight(int rank_i, int rank_j) { return std::max(0.0, 1.0 / rank_i - 1.0 / rank_j); }

/// List-wise ranking loss over one query's candidates:
///   sum over ordered pairs (i, j) of w_ij * log(1 + exp(sim_j - sim_i)).
/// `ranks` must be a permutation of 1..n.
inline LossWithGrad loss_rank(std::span<const double> sims, std::span<const int> ranks) {
    const std::size_t n = sims.size();
    if (n == 0 || ranks.size() != n) throw ContractError("loss_rank: sims and ranks must be equal-length and non-empty");
    std::vector<bool> seen(n + 1, false);
    for (int r : ranks) {
        if (r < 1 || static_cast<std::size_t>(r) > n || seen[static_cast<std::size_t>(r)])
            throw ContractError("loss_rank: ranks must be a permutation of 1..n");
        seen[static_cast<std::size_t>(r)] = true;
    }
    LossWithGrad out{0.0, std::vector<double>(n, 0.0)};
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double w = pair_weight(ranks[i], ranks[j]);
            if (w == 0) continue;
            double margin = sims[j] - sims[i];
            out.value += w * softplus(margin);
            double g = w * sigmoid(margin);
            out.grad[j] += g;
            out.grad[i] -= g;
        }
    return out;
}

/// In-batch negative loss: mean over rows of -log softmax(row)[positive].
/// `sims` is row-major, rows = queries, `cols` = every sampled candidate in
/// the batch.
inline LossWithGrad loss_inbatch(std::span<const double> sims, std::size_t cols, std::span<const std::size_t> positives) {
    if (cols == 0 || sims.size() != cols * positives.size() || positives.empty())
        throw ContractError("loss_inbatch: similarity matrix shape does not match the positives");
    const std::size_t rows = positives.size();
    LossWithGrad out{0.0, std::vector<double>(sims.size(), 0.0)};
    for (std::size_t r = 0; r < rows; ++r) {
        if (positives[r] >= cols) throw ContractError("loss_inbatch: positive index out of range");
        auto row = sims.subspan(r * cols, cols);
        double m = *std::max_element(row.begin(), row.end());
        double z = 0;
        for (double s : row) z += std::exp(s - m);
        double lse = m + std::log(z);
        out.value += lse - row[positives[r]];
        for (std::size_t c = 0; c < cols; ++c) out.grad[r * cols + c] = std::exp(row[c] - lse) / static_cast<double>(rows);
        out.grad[r * cols + positives[r]] -= 1.0 / static_cast<double>(rows);
    }
    out.value /= static_cast<double>(rows);
    return out;
}

/// lambda * L_rank + (1 - lambda) * L_ib.
inline double loss_total(double rank_value, double inbatch_value, double lambda) {
    if (!(lambda >= 0 && lambda <= 1)) throw ContractError("loss weight lambda must lie in [0, 1]");
    return lambda * rank_value + (1 - lambda) * inbatch_value;
}

}  // namespace udr
