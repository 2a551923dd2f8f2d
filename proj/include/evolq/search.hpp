#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

#include "evolq/losses.hpp"
#include "evolq/model.hpp"
#include "evolq/rng.hpp"

namespace evolq {

// Scales stay strictly positive; perturbation output is clamped here.
constexpr float kMinScale = 1e-8f;

struct SearchSettings {
    uint32_t passes = 10;     // P
    uint32_t population = 15; // K
    uint32_t cycles = 3;      // C
    uint32_t samples = 10;    // S
    double epsilon = 1e-4;    // uniform-ball radius; 1e-3 for 8-bit weights
    uint64_t seed = 0;

    // passes == 0 and cycles == 0 are permitted as degenerate no-ops
    void validate() const {
        if (population < 1 || samples < 1)
            throw std::invalid_argument("SearchSettings: K and S must be >= 1");
        if (samples > population)
            throw std::invalid_argument("SearchSettings: S > K");
        if (!(epsilon > 0.0))
            throw std::invalid_argument("SearchSettings: epsilon <= 0");
    }

    // 1e-3 for 8-bit weights, 1e-4 below
    static double default_epsilon(int weight_bits) {
        return weight_bits >= 8 ? 1e-3 : 1e-4;
    }
};

struct Candidate {
    std::vector<float> scales;
    double fitness = 0.0; // negated loss, higher = better
    uint32_t birth = 0;   // insertion counter, used to break removal ties
};

struct CycleRecord {
    int pass = 0;
    int block = 0;
    int cycle = 0; // -1 for initial-population evaluations
    int candidate_id = 0;
    double fitness = 0.0;
    double best_fitness = 0.0;
    double wall_ms = 0.0;
};

// each element drawn independently from [v - eps, v + eps], clamped positive
inline std::vector<float> perturb(const std::vector<float>& values, double eps,
                                  Rng& rng) {
    if (!(eps > 0.0)) throw std::invalid_argument("perturb: epsilon <= 0");
    std::vector<float> out(values.size());
    for (size_t i = 0; i < values.size(); ++i) {
        double v = double(values[i]) + rng.uniform(-eps, eps);
        out[i] = std::max(float(v), kMinScale);
    }
    return out;
}

namespace detail {

inline size_t best_index(const std::vector<Candidate>& pop) {
    size_t best = 0;
    for (size_t i = 1; i < pop.size(); ++i)
        if (pop[i].fitness > pop[best].fitness) best = i;
    return best;
}

// worst fitness; among ties the youngest goes, so an incumbent that ties
// is never the one removed
inline size_t worst_index(const std::vector<Candidate>& pop) {
    size_t worst = 0;
    for (size_t i = 1; i < pop.size(); ++i)
        if (pop[i].fitness < pop[worst].fitness ||
            (pop[i].fitness == pop[worst].fitness && pop[i].birth > pop[worst].birth))
            worst = i;
    return worst;
}

} // namespace detail

// One block visit of Alg. 1, generic over the fitness functional (higher =
// better). Population is seeded with the incumbent (fitness supplied by the
// caller, no re-evaluation) plus K-1 perturbations. Each cycle: tournament
// of S uniform draws with replacement, child = perturb(parent), insert,
// remove worst. Returns the best member and its fitness.
template <class FitnessFn>
std::pair<std::vector<float>, double>
evolve(const std::vector<float>& incumbent, double incumbent_fitness,
       FitnessFn&& fit, const SearchSettings& s, Rng& rng,
       std::vector<CycleRecord>* trace = nullptr, int pass = 0, int block = 0) {
    s.validate();
    if (s.cycles == 0) return {incumbent, incumbent_fitness}; // no-op visit
    using clock = std::chrono::steady_clock;
    std::vector<Candidate> pop;
    pop.reserve(s.population + 1);
    uint32_t births = 0;
    int candidate_id = 0;
    pop.push_back({incumbent, incumbent_fitness, births++});
    while (pop.size() < s.population) {
        auto t0 = clock::now();
        Candidate c;
        c.scales = perturb(incumbent, s.epsilon, rng);
        c.fitness = fit(c.scales);
        c.birth = births++;
        double best = std::max(pop[detail::best_index(pop)].fitness, c.fitness);
        if (trace) {
            double ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
            trace->push_back({pass, block, -1, candidate_id++, c.fitness, best, ms});
        }
        pop.push_back(std::move(c));
    }
    for (uint32_t cycle = 0; cycle < s.cycles; ++cycle) {
        auto t0 = clock::now();
        size_t parent = rng.below(pop.size());
        for (uint32_t k = 1; k < s.samples; ++k) {
            size_t pick = rng.below(pop.size());
            if (pop[pick].fitness > pop[parent].fitness) parent = pick;
        }
        Candidate child;
        child.scales = perturb(pop[parent].scales, s.epsilon, rng);
        child.fitness = fit(child.scales);
        child.birth = births++;
        pop.push_back(std::move(child));
        pop.erase(pop.begin() + std::ptrdiff_t(detail::worst_index(pop)));
        double best = pop[detail::best_index(pop)].fitness;
        if (trace) {
            double ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
            trace->push_back({pass, block, int(cycle), candidate_id++,
                              pop.back().fitness, best, ms});
        }
    }
    size_t best = detail::best_index(pop);
    return {pop[best].scales, pop[best].fitness};
}

// ---- model-backed fitness ---------------------------------------------------

// Evaluates candidate scale vectors for one block: full-precision
// predictions are computed once, and activations entering the block are
// cached per calibration sample (blocks before it never change during the
// visit), so each evaluation only runs the suffix of the network.
class BlockFitness {
public:
    BlockFitness(Model& quant_model, const Model& fp_model, const Dataset& calib,
                 const BatchPlan& plan, LossKind kind, double tau)
        : model_(quant_model), calib_(calib), kind_(kind), tau_(tau) {
        batches_ = iterate(calib.count, plan);
        if (batches_.empty())
            throw std::invalid_argument("BlockFitness: no full batches");
        detail::Scratch ws;
        fp_preds_ = predict_all(fp_model, calib, false);
    }

    // cache activations entering `block` under the current quantized scales,
    // stacked per batch so each evaluation runs whole-batch suffix passes
    void focus_block(size_t block) {
        block_ = block;
        detail::Scratch ws;
        const size_t t = model_.config.tokens, d = model_.config.embed_dim;
        prefix_.resize(batches_.size());
        for (size_t bi = 0; bi < batches_.size(); ++bi) {
            const auto& batch = batches_[bi];
            Tensor x({batch.size() * t, d});
            for (size_t j = 0; j < batch.size(); ++j)
                std::copy_n(calib_.sample(batch[j]), t * d,
                            x.data.data() + j * t * d);
            run_blocks(model_, x, 0, block, true, ws, t);
            prefix_[bi] = std::move(x);
        }
    }

    // negated batch-mean loss of the model with `scales` installed at the
    // focused block; the scales stay installed afterwards
    double operator()(const std::vector<float>& scales) {
        set_block_scales(model_, block_, scales);
        ++evals_;
        detail::Scratch ws;
        double total = 0.0;
        for (size_t bi = 0; bi < batches_.size(); ++bi) {
            PredictionPair pair;
            pair.tau = tau_;
            pair.p = forward_batch_from(model_, prefix_[bi], block_, true, ws);
            for (uint32_t idx : batches_[bi]) pair.o.push_back(fp_preds_[idx]);
            total += loss_of(pair, kind_);
        }
        return -total / double(batches_.size());
    }

    size_t evals() const { return evals_; }

private:
    Model& model_;
    const Dataset& calib_;
    LossKind kind_;
    double tau_;
    std::vector<std::vector<uint32_t>> batches_;
    std::vector<std::vector<float>> fp_preds_;
    std::vector<Tensor> prefix_;
    size_t block_ = 0;
    size_t evals_ = 0;
};

// Alg. 1 for one block: evolve the block's scale vector and install the
// winner. `incumbent_fitness` is the current model's (cached) fitness;
// returns the new best fitness.
inline double search_block(Model& quant_model, BlockFitness& fit, size_t block_index,
                           double incumbent_fitness, const SearchSettings& settings,
                           Rng& rng, std::vector<CycleRecord>* trace = nullptr,
                           int pass = 0) {
    fit.focus_block(block_index);
    BlockScales incumbent = get_block_scales(quant_model, block_index);
    auto [best, best_fitness] =
        evolve(incumbent.values, incumbent_fitness, std::ref(fit), settings, rng,
               trace, pass, int(block_index));
    set_block_scales(quant_model, block_index, best);
    return best_fitness;
}

struct SearchResult {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    std::vector<CycleRecord> trace;
    size_t fitness_evals = 0; // includes the one bootstrap evaluation
};

// Full block-wise evolutionary search: P sequential passes over blocks
// 0..B-1. The incumbent's fitness is carried from visit to visit (the
// global score after installing a block's winner is exactly that winner's
// evaluated fitness), so each visit spends K-1+C fresh evaluations.
inline SearchResult run_search(Model& quant_model, const Model& fp_model,
                               const Dataset& calib, const BatchPlan& plan,
                               const SearchSettings& settings,
                               LossKind kind = LossKind::InfoNce, double tau = 0.1) {
    settings.validate();
    BlockFitness fit(quant_model, fp_model, calib, plan, kind, tau);
    Rng rng(settings.seed);
    SearchResult res;
    BlockScales bootstrap = get_block_scales(quant_model, 0);
    fit.focus_block(0);
    double current = fit(bootstrap.values);
    res.initial_loss = -current;
    for (uint32_t pass = 0; pass < settings.passes; ++pass)
        for (size_t b = 0; b < quant_model.blocks.size(); ++b)
            current = search_block(quant_model, fit, b, current, settings, rng,
                                   &res.trace, int(pass));
    res.final_loss = -current;
    res.fitness_evals = fit.evals();
    return res;
}

// ---- gradient-descent baseline ----------------------------------------------

enum class OptKind { Sgd, Adam, AdamW };

inline OptKind opt_kind_from_string(const std::string& s) {
    if (s == "sgd") return OptKind::Sgd;
    if (s == "adam") return OptKind::Adam;
    if (s == "adamw") return OptKind::AdamW;
    throw std::invalid_argument("unknown optimizer: " + s);
}

inline std::string to_string(OptKind k) {
    switch (k) {
        case OptKind::Sgd: return "sgd";
        case OptKind::Adam: return "adam";
        case OptKind::AdamW: return "adamw";
    }
    return "?";
}

struct GradientSettings {
    OptKind optimizer = OptKind::Sgd;
    uint32_t steps = 100;
    double lr = 0.01;
    double fd_step = 1e-6;      // central-difference step
    uint32_t coords_per_step = 0; // 0 = all coordinates, else random subset
    uint64_t seed = 0;
    bool clamp_positive = true;
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8, weight_decay = 0.01;
};

struct GradientResult {
    std::vector<float> x;
    std::vector<double> loss_trace; // loss after each step
    size_t loss_evals = 0;          // finite-difference probes
};

// Finite-difference gradient descent over a loss functional (minimized).
// Gradients come from central differences; with coords_per_step set, a
// random coordinate subset is probed each step and the rest keep gradient 0.
template <class LossFn>
GradientResult gradient_descent(const std::vector<float>& init, LossFn&& loss,
                                const GradientSettings& gs) {
    if (gs.steps < 1) throw std::invalid_argument("gradient_descent: steps < 1");
    if (!(gs.lr > 0.0)) throw std::invalid_argument("gradient_descent: lr <= 0");
    const size_t dim = init.size();
    GradientResult res;
    res.x = init;
    Rng rng(gs.seed);
    std::vector<double> m(dim, 0.0), v(dim, 0.0), grad(dim, 0.0);
    std::vector<size_t> coords(dim);
    for (size_t i = 0; i < dim; ++i) coords[i] = i;
    for (uint32_t step = 1; step <= gs.steps; ++step) {
        std::fill(grad.begin(), grad.end(), 0.0);
        size_t n_probe = dim;
        if (gs.coords_per_step > 0 && gs.coords_per_step < dim) {
            // deterministic partial Fisher-Yates for the probe subset
            n_probe = gs.coords_per_step;
            for (size_t i = 0; i < n_probe; ++i)
                std::swap(coords[i], coords[i + rng.below(dim - i)]);
        }
        for (size_t k = 0; k < n_probe; ++k) {
            size_t i = coords[k];
            std::vector<float> xp = res.x, xm = res.x;
            xp[i] = float(double(xp[i]) + gs.fd_step);
            xm[i] = float(double(xm[i]) - gs.fd_step);
            double lp = loss(xp), lm = loss(xm);
            res.loss_evals += 2;
            grad[i] = (lp - lm) / (2.0 * gs.fd_step);
        }
        for (size_t i = 0; i < dim; ++i) {
            double g = grad[i];
            double upd;
            if (gs.optimizer == OptKind::Sgd) {
                upd = gs.lr * g;
            } else {
                if (gs.optimizer == OptKind::AdamW) {
                    // decoupled weight decay
                    res.x[i] = float(double(res.x[i]) * (1.0 - gs.lr * gs.weight_decay));
                }
                m[i] = gs.beta1 * m[i] + (1.0 - gs.beta1) * g;
                v[i] = gs.beta2 * v[i] + (1.0 - gs.beta2) * g * g;
                double mh = m[i] / (1.0 - std::pow(gs.beta1, double(step)));
                double vh = v[i] / (1.0 - std::pow(gs.beta2, double(step)));
                upd = gs.lr * mh / (std::sqrt(vh) + gs.adam_eps);
            }
            double nx = double(res.x[i]) - upd;
            if (gs.clamp_positive) nx = std::max(nx, double(kMinScale));
            res.x[i] = float(nx);
        }
        res.loss_trace.push_back(loss(res.x));
    }
    return res;
}

// Gradient baseline for one model block, sharing the block-fitness
// evaluator's caching. Returns the reached scales and per-step losses.
inline GradientResult gradient_baseline(Model& quant_model, BlockFitness& fit,
                                        size_t block_index,
                                        const GradientSettings& gs) {
    fit.focus_block(block_index);
    BlockScales start = get_block_scales(quant_model, block_index);
    auto loss = [&](const std::vector<float>& x) { return -fit(x); };
    GradientResult res = gradient_descent(start.values, loss, gs);
    set_block_scales(quant_model, block_index, res.x);
    return res;
}

} // namespace evolq
