#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "evolq/model.hpp"
#include "evolq/model_io.hpp"
#include "evolq/rng.hpp"
#include "evolq/search.hpp"

namespace evolq {

struct ProbeSpec {
    size_t block_index = 0;
    // coordinate indices into the block's flattened scale vector; -1 picks
    // the default directions (highest-variance weight-scale coordinates)
    long direction_a = -1;
    long direction_b = -1;
    double half_range = 1e-3; // r
    uint32_t grid_steps = 21; // n, odd so the center is the incumbent
    LossKind loss_kind = LossKind::InfoNce;
    double tau = 0.1;

    void validate() const {
        if (grid_steps < 3 || grid_steps % 2 == 0)
            throw std::invalid_argument("ProbeSpec: grid_steps must be odd and >= 3");
        if (!(half_range > 0.0))
            throw std::invalid_argument("ProbeSpec: half_range <= 0");
        if (direction_a >= 0 && direction_a == direction_b)
            throw std::invalid_argument("ProbeSpec: directions must be distinct");
    }
};

struct LandscapeGrid {
    uint32_t n = 0;
    std::vector<double> losses;  // n*n, row = a-axis, col = b-axis
    std::vector<double> offsets; // n offsets, shared by both axes
    size_t direction_a = 0, direction_b = 0;
    size_t block_index = 0;
    uint64_t model_hash = 0;

    double at(size_t i, size_t j) const { return losses[i * n + j]; }
    double& at(size_t i, size_t j) { return losses[i * n + j]; }
    double center() const { return at(n / 2, n / 2); }
};

// Default probe directions: the two weight-scale coordinates whose
// underlying weight channels have the highest variance.
inline std::pair<size_t, size_t> default_directions(const Model& m, size_t block) {
    const ViTBlock& blk = m.blocks.at(block);
    BlockScales bs = get_block_scales(m, block);
    auto channel_variance = [&](uint32_t point, uint32_t channel) {
        const Tensor* w = nullptr;
        for (uint32_t i = 0; i < blk.n_heads(); ++i) {
            if (point == ViTBlock::pt_wq(i)) w = &blk.wq[i];
            else if (point == ViTBlock::pt_wk(i)) w = &blk.wk[i];
            else if (point == ViTBlock::pt_wv(i)) w = &blk.wv[i];
        }
        if (point == blk.pt_wo()) w = &blk.wo;
        if (point == blk.pt_fc1w()) w = &blk.fc1_w;
        if (point == blk.pt_fc2w()) w = &blk.fc2_w;
        if (!w) return -1.0; // activation point
        // channel = output column
        double mean = 0.0;
        const size_t rows = w->rows();
        for (size_t r = 0; r < rows; ++r) mean += w->at(r, channel);
        mean /= double(rows);
        double var = 0.0;
        for (size_t r = 0; r < rows; ++r) {
            double d = w->at(r, channel) - mean;
            var += d * d;
        }
        return var / double(rows);
    };
    size_t best = 0, second = 1;
    double best_v = -1.0, second_v = -1.0;
    for (size_t i = 0; i < bs.index.size(); ++i) {
        double v = channel_variance(bs.index[i].point, bs.index[i].channel);
        if (v > best_v) {
            second = best;
            second_v = best_v;
            best = i;
            best_v = v;
        } else if (v > second_v) {
            second = i;
            second_v = v;
        }
    }
    return {best, second};
}

// Evaluates the chosen loss on an (n x n) grid of two-coordinate scale
// perturbations around the incumbent. The model's scales are restored
// exactly afterwards; callers can verify via model_hash.
inline LandscapeGrid probe(Model& model, const Model& fp_model,
                           const Dataset& eval_set, const BatchPlan& plan,
                           const ProbeSpec& spec) {
    spec.validate();
    BlockScales original = get_block_scales(model, spec.block_index);
    size_t dir_a, dir_b;
    if (spec.direction_a >= 0 && spec.direction_b >= 0) {
        dir_a = size_t(spec.direction_a);
        dir_b = size_t(spec.direction_b);
    } else {
        std::tie(dir_a, dir_b) = default_directions(model, spec.block_index);
    }
    if (dir_a >= original.values.size() || dir_b >= original.values.size())
        throw std::invalid_argument("probe: direction index out of range");

    BlockFitness fit(model, fp_model, eval_set, plan, spec.loss_kind, spec.tau);
    fit.focus_block(spec.block_index);

    LandscapeGrid grid;
    grid.n = spec.grid_steps;
    grid.direction_a = dir_a;
    grid.direction_b = dir_b;
    grid.block_index = spec.block_index;
    grid.losses.assign(size_t(grid.n) * grid.n, 0.0);
    grid.offsets.resize(grid.n);
    const int half = int(grid.n) / 2;
    for (uint32_t i = 0; i < grid.n; ++i)
        grid.offsets[i] = spec.half_range * double(int(i) - half) / double(half);

    std::vector<float> scales = original.values;
    for (uint32_t i = 0; i < grid.n; ++i) {
        for (uint32_t j = 0; j < grid.n; ++j) {
            scales[dir_a] = std::max(
                float(double(original.values[dir_a]) + grid.offsets[i]), kMinScale);
            scales[dir_b] = std::max(
                float(double(original.values[dir_b]) + grid.offsets[j]), kMinScale);
            grid.at(i, j) = -fit(scales);
        }
    }
    set_block_scales(model, spec.block_index, original.values);
    grid.model_hash = model_hash(model);
    return grid;
}

// Fraction of interior cells that are strict local extrema among their 8
// neighbors. 0 for monotone and constant surfaces.
inline double roughness(const LandscapeGrid& grid) {
    if (grid.n < 3) throw std::invalid_argument("roughness: grid too small");
    size_t extrema = 0, interior = 0;
    for (uint32_t i = 1; i + 1 < grid.n; ++i)
        for (uint32_t j = 1; j + 1 < grid.n; ++j) {
            ++interior;
            bool strict_max = true, strict_min = true;
            const double c = grid.at(i, j);
            for (int di = -1; di <= 1; ++di)
                for (int dj = -1; dj <= 1; ++dj) {
                    if (di == 0 && dj == 0) continue;
                    double nb = grid.at(i + uint32_t(di), j + uint32_t(dj));
                    if (c <= nb) strict_max = false;
                    if (c >= nb) strict_min = false;
                }
            if (strict_max || strict_min) ++extrema;
        }
    return double(extrema) / double(interior);
}

// Synthetic fitness surface with a tunable density of local extrema:
//   f(x) = q * ||x - x*||^2 + a * sum_i sin^2(w * x_i)
// x* is drawn uniformly in [0,1]^dim from the seed; the exact global
// optimum is exposed when a = 0 or x* sits on the sin^2 zero lattice.
struct EggCarton {
    uint32_t dim;
    double omega;
    double amplitude;
    double quad_weight;
    std::vector<float> optimum; // x*

    EggCarton(uint32_t dim_, double omega_, double amplitude_, double quad_weight_,
              uint64_t seed)
        : dim(dim_), omega(omega_), amplitude(amplitude_), quad_weight(quad_weight_) {
        if (dim < 1) throw std::invalid_argument("EggCarton: dim < 1");
        if (!(omega > 0.0)) throw std::invalid_argument("EggCarton: omega <= 0");
        Rng rng(seed);
        optimum.resize(dim);
        for (float& v : optimum) v = float(rng.uniform());
    }

    double operator()(const std::vector<float>& x) const {
        if (x.size() != dim) throw std::invalid_argument("EggCarton: dim mismatch");
        double f = 0.0;
        for (uint32_t i = 0; i < dim; ++i) {
            double d = double(x[i]) - double(optimum[i]);
            double s = std::sin(omega * double(x[i]));
            f += quad_weight * d * d + amplitude * s * s;
        }
        return f;
    }
};

// ---- grid artifacts ---------------------------------------------------------

// CSV: '#'-prefixed metadata lines, then a header row of b-axis offsets and
// one row per a-axis offset.
inline std::string grid_to_csv(const LandscapeGrid& grid,
                               const std::vector<std::string>& metadata = {}) {
    std::ostringstream out;
    out.precision(9);
    for (const std::string& m : metadata) out << "# " << m << "\n";
    out << "# block=" << grid.block_index << " dir_a=" << grid.direction_a
        << " dir_b=" << grid.direction_b << "\n";
    out << "offset";
    for (uint32_t j = 0; j < grid.n; ++j) out << "," << grid.offsets[j];
    out << "\n";
    for (uint32_t i = 0; i < grid.n; ++i) {
        out << grid.offsets[i];
        for (uint32_t j = 0; j < grid.n; ++j) out << "," << grid.at(i, j);
        out << "\n";
    }
    return out.str();
}

// 8-bit min-max normalized PGM heatmap
inline std::string grid_to_pgm(const LandscapeGrid& grid) {
    double lo = grid.losses[0], hi = grid.losses[0];
    for (double v : grid.losses) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double span = hi > lo ? hi - lo : 1.0;
    std::ostringstream out;
    out << "P2\n" << grid.n << " " << grid.n << "\n255\n";
    for (uint32_t i = 0; i < grid.n; ++i) {
        for (uint32_t j = 0; j < grid.n; ++j) {
            int v = int(std::lround(255.0 * (grid.at(i, j) - lo) / span));
            out << v << (j + 1 < grid.n ? " " : "\n");
        }
    }
    return out.str();
}

} // namespace evolq
