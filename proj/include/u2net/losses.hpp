#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "ops.hpp"

namespace u2net {

using Labels = std::vector<std::int32_t>;

struct LossConfig {
    double focal_gamma = 2.0;
    std::vector<double> focal_alpha;  // per class; empty means 1.0 everywhere

    double alpha(std::size_t cls) const { return focal_alpha.empty() ? 1.0 : focal_alpha.at(cls); }
    void validate() const {
        if (focal_gamma < 0) throw Error("focal gamma must be non-negative");
        for (double a : focal_alpha)
            if (!(a > 0)) throw Error("focal alpha entries must be positive");
    }
};

/// Gradient of the Lovasz extension of the Jaccard loss with respect to errors
/// sorted in descending order. gt_sorted is the foreground indicator in that order.
/// Entries are the first differences of the running Jaccard loss.
template <class T = double>
std::vector<T> lovasz_grad(std::span<const std::uint8_t> gt_sorted) {
    const std::size_t n = gt_sorted.size();
    std::vector<T> g(n, T(0));
    const std::size_t positives = std::count(gt_sorted.begin(), gt_sorted.end(), std::uint8_t{1});
    if (n == 0 || positives == 0) return g;
    std::size_t cum_fg = 0, cum_bg = 0;
    T prev = T(0);
    for (std::size_t k = 0; k < n; ++k) {
        if (gt_sorted[k]) ++cum_fg; else ++cum_bg;
        const T inter = T(positives - cum_fg);
        const T uni = T(positives + cum_bg);
        const T jac = T(1) - inter / uni;
        g[k] = jac - prev;
        prev = jac;
    }
    return g;
}

namespace detail {

template <class T>
void check_labels(const Tensor<T>& probs, const Labels& labels, const char* op) {
    check(probs.rank() >= 2, std::string(op) + ": probabilities must be K x N, got " + to_string(probs.shape()));
    const std::size_t K = probs.shape()[0];
    const std::size_t N = probs.size() / K;
    check(labels.size() == N, std::string(op) + ": " + std::to_string(labels.size()) + " labels for " +
                                  std::to_string(N) + " voxels");
    for (auto y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= K)
            throw Error(std::string(op) + ": label " + std::to_string(y) + " outside [0, " + std::to_string(K) + ")");
}

}  // namespace detail

/// Lovasz-Softmax loss averaged over the classes that occur in labels.
/// probs is K x (voxels) with every column on the simplex.
template <class T>
Var<T> lovasz_softmax(Tape<T>& tape, const Var<T>& probs, const Labels& labels) {
    const auto& P = probs.value();
    detail::check_labels(P, labels, "lovasz_softmax");
    const std::size_t K = P.shape()[0], N = labels.size();

    std::vector<std::size_t> present;
    {
        std::vector<bool> seen(K, false);
        for (auto y : labels) seen[y] = true;
        for (std::size_t c = 0; c < K; ++c)
            if (seen[c]) present.push_back(c);
    }

    // d(loss)/d(probs), filled while evaluating.
    std::vector<T> dprobs(P.size(), T(0));
    T loss = T(0);
    std::vector<T> err(N);
    std::vector<std::size_t> order(N);
    std::vector<std::uint8_t> gt_sorted(N);
    const T inv_classes = present.empty() ? T(0) : T(1) / T(present.size());
    for (std::size_t c : present) {
        const T* pc = P.data() + c * N;
        for (std::size_t i = 0; i < N; ++i) err[i] = labels[i] == static_cast<std::int32_t>(c) ? T(1) - pc[i] : pc[i];
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return err[a] > err[b]; });
        for (std::size_t k = 0; k < N; ++k) gt_sorted[k] = labels[order[k]] == static_cast<std::int32_t>(c);
        const auto g = lovasz_grad<T>(gt_sorted);
        T lc = T(0);
        for (std::size_t k = 0; k < N; ++k) {
            const std::size_t i = order[k];
            lc += err[i] * g[k];
            dprobs[c * N + i] = (gt_sorted[k] ? -g[k] : g[k]) * inv_classes;
        }
        loss += lc;
    }
    loss *= inv_classes;

    return tape.emit(Tensor<T>({1}, std::vector<T>{loss}), {&probs}, [probs, dprobs = std::move(dprobs)](Node<T>& o) {
        kernels::axpy(o.grad[0], dprobs.data(), grad_of(probs), dprobs.size());
    });
}

/// Focal loss, mean over voxels of -alpha_y (1 - p_y)^gamma log p_y with p_y
/// clamped to [1e-7, 1 - 1e-7].
template <class T>
Var<T> focal_loss(Tape<T>& tape, const Var<T>& probs, const Labels& labels, const LossConfig& cfg = {}) {
    cfg.validate();
    const auto& P = probs.value();
    detail::check_labels(P, labels, "focal_loss");
    const std::size_t N = labels.size();
    const double lo = 1e-7, hi = 1.0 - 1e-7;
    const double gamma = cfg.focal_gamma;

    std::vector<T> dprobs(P.size(), T(0));
    double loss = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
        const std::size_t y = static_cast<std::size_t>(labels[i]);
        const double raw = static_cast<double>(P[y * N + i]);
        const double p = std::clamp(raw, lo, hi);
        const double a = cfg.alpha(y);
        const double q = 1.0 - p;
        const double mod = std::pow(q, gamma);
        loss += -a * mod * std::log(p);
        if (raw > lo && raw < hi) {
            const double dmod = gamma == 0.0 ? 0.0 : gamma * std::pow(q, gamma - 1.0);
            const double d = -a * (mod / p - dmod * std::log(p));
            dprobs[y * N + i] = static_cast<T>(d / double(N));
        }
    }
    loss /= double(N);

    return tape.emit(Tensor<T>({1}, std::vector<T>{static_cast<T>(loss)}), {&probs},
                     [probs, dprobs = std::move(dprobs)](Node<T>& o) {
                         kernels::axpy(o.grad[0], dprobs.data(), grad_of(probs), dprobs.size());
                     });
}

/// Sum of Lovasz-Softmax and focal loss on softmax(logits). logits is K x (voxels).
template <class T>
Var<T> hybrid_loss(Tape<T>& tape, const Var<T>& logits, const Labels& labels, const LossConfig& cfg = {}) {
    auto probs = softmax_channels(tape, logits);
    auto lovasz = lovasz_softmax(tape, probs, labels);
    auto focal = focal_loss(tape, probs, labels, cfg);
    return add(tape, lovasz, focal);
}

}  // namespace u2net
