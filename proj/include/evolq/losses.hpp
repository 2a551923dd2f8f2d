#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "evolq/data.hpp"
#include "evolq/model.hpp"

namespace evolq {

enum class LossKind { InfoNce, Mse, Cosine, Kl };

inline LossKind loss_kind_from_string(const std::string& s) {
    if (s == "infonce") return LossKind::InfoNce;
    if (s == "mse") return LossKind::Mse;
    if (s == "cosine") return LossKind::Cosine;
    if (s == "kl") return LossKind::Kl;
    throw std::invalid_argument("unknown loss kind: " + s);
}

inline std::string to_string(LossKind k) {
    switch (k) {
        case LossKind::InfoNce: return "infonce";
        case LossKind::Mse: return "mse";
        case LossKind::Cosine: return "cosine";
        case LossKind::Kl: return "kl";
    }
    return "?";
}

// Quantized-model predictions p and index-aligned full-precision
// predictions o for one batch.
struct PredictionPair {
    std::vector<std::vector<float>> p;
    std::vector<std::vector<float>> o;
    double tau = 0.1;

    void validate() const {
        if (p.size() != o.size())
            throw std::invalid_argument("PredictionPair: batch sizes differ");
        if (!(tau > 0.0)) throw std::invalid_argument("PredictionPair: tau <= 0");
        for (size_t i = 0; i < p.size(); ++i)
            if (p[i].size() != o[i].size())
                throw std::invalid_argument("PredictionPair: dimension mismatch");
    }
};

namespace detail {

inline std::vector<double> l2_normalize(const std::vector<float>& v) {
    double norm = 0.0;
    for (float x : v) norm += double(x) * double(x);
    norm = std::sqrt(norm);
    if (norm == 0.0)
        throw std::invalid_argument("info_nce: zero-norm prediction vector");
    std::vector<double> out(v.size());
    for (size_t i = 0; i < v.size(); ++i) out[i] = double(v[i]) / norm;
    return out;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

} // namespace detail

// Contrastive loss: sample i's positive is o_i, negatives are the other
// o_j in the batch. Predictions are L2-normalized before dot products;
// the per-sample term is computed via log-sum-exp.
inline double info_nce(const PredictionPair& pair) {
    pair.validate();
    const size_t n = pair.p.size();
    if (n == 0) throw std::invalid_argument("info_nce: empty batch");
    if (n == 1) return 0.0; // no negatives, ratio is exactly 1
    std::vector<std::vector<double>> pn(n), on(n);
    for (size_t i = 0; i < n; ++i) {
        pn[i] = detail::l2_normalize(pair.p[i]);
        on[i] = detail::l2_normalize(pair.o[i]);
    }
    double total = 0.0;
    std::vector<double> sims(n);
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = 0; j < n; ++j)
            sims[j] = detail::dot(pn[i], on[j]) / pair.tau;
        double mx = sims[0];
        for (double s : sims) mx = std::max(mx, s);
        double lse = 0.0;
        for (double s : sims) lse += std::exp(s - mx);
        total += (mx + std::log(lse)) - sims[i];
    }
    return total / double(n);
}

inline double mse(const PredictionPair& pair) {
    pair.validate();
    double total = 0.0;
    size_t count = 0;
    for (size_t i = 0; i < pair.p.size(); ++i)
        for (size_t j = 0; j < pair.p[i].size(); ++j) {
            double d = double(pair.p[i][j]) - double(pair.o[i][j]);
            total += d * d;
            ++count;
        }
    return total / double(count);
}

// 1 - mean cosine similarity
inline double cosine(const PredictionPair& pair) {
    pair.validate();
    double total = 0.0;
    for (size_t i = 0; i < pair.p.size(); ++i) {
        auto pn = detail::l2_normalize(pair.p[i]);
        auto on = detail::l2_normalize(pair.o[i]);
        total += detail::dot(pn, on);
    }
    return 1.0 - total / double(pair.p.size());
}

// mean KL(softmax(o) || softmax(p)) with a 1e-12 probability floor
inline double kl(const PredictionPair& pair) {
    pair.validate();
    auto to_probs = [](const std::vector<float>& v) {
        double mx = v[0];
        for (float x : v) mx = std::max(mx, double(x));
        std::vector<double> e(v.size());
        double sum = 0.0;
        for (size_t i = 0; i < v.size(); ++i) {
            e[i] = std::exp(double(v[i]) - mx);
            sum += e[i];
        }
        for (double& x : e) x = std::max(x / sum, 1e-12);
        return e;
    };
    double total = 0.0;
    for (size_t i = 0; i < pair.p.size(); ++i) {
        auto po = to_probs(pair.o[i]);
        auto pp = to_probs(pair.p[i]);
        double d = 0.0;
        for (size_t j = 0; j < po.size(); ++j) d += po[j] * std::log(po[j] / pp[j]);
        total += d;
    }
    return total / double(pair.p.size());
}

inline double loss_of(const PredictionPair& pair, LossKind kind) {
    switch (kind) {
        case LossKind::InfoNce: return info_nce(pair);
        case LossKind::Mse: return mse(pair);
        case LossKind::Cosine: return cosine(pair);
        case LossKind::Kl: return kl(pair);
    }
    throw std::logic_error("loss_of: bad kind");
}

// Batch-averaged fitness score over a calibration set: iterate batches in
// the plan's fixed order, accumulate the chosen loss, return the mean per
// batch. Lower is better; the search negates this internally.
inline double fitness(const Model& quant_model, const Model& fp_model,
                      const Dataset& calib, const BatchPlan& plan, LossKind kind,
                      double tau = 0.1) {
    if (calib.count == 0) throw std::invalid_argument("fitness: empty calibration set");
    if (!(quant_model.config == fp_model.config))
        throw std::invalid_argument("fitness: model configs differ");
    auto batches = iterate(calib.count, plan);
    if (batches.empty()) throw std::invalid_argument("fitness: no full batches");
    detail::Scratch ws;
    const size_t t = calib.tokens, d = calib.dim;
    double total = 0.0;
    for (const auto& batch : batches) {
        Tensor x({batch.size() * t, d});
        for (size_t j = 0; j < batch.size(); ++j)
            std::copy_n(calib.sample(batch[j]), t * d, x.data.data() + j * t * d);
        PredictionPair pair;
        pair.tau = tau;
        pair.p = forward_batch_from(quant_model, x, 0, true, ws);
        pair.o = forward_batch_from(fp_model, std::move(x), 0, false, ws);
        total += loss_of(pair, kind);
    }
    return total / double(batches.size());
}

} // namespace evolq
