#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "evolq/data.hpp"
#include "evolq/quantizer.hpp"
#include "evolq/rng.hpp"
#include "evolq/tensor.hpp"

namespace evolq {

// The tanh-form GELU is bounded below by -0.1700408 (at x ~ -0.7525); this
// shift makes the post-GELU activation nonnegative so the log2 scheme applies.
constexpr float kGeluShift = 0.171f;

struct ViTConfig {
    uint32_t embed_dim = 32;
    uint32_t heads = 4;
    uint32_t blocks = 4;
    uint32_t tokens = 16;
    uint32_t classes = 10;
    uint32_t mlp_ratio = 2; // hidden = mlp_ratio * embed_dim
    int weight_bits = 8;
    int activation_bits = 8;

    uint32_t head_dim() const { return embed_dim / heads; }
    uint32_t hidden() const { return mlp_ratio * embed_dim; }

    void validate() const {
        if (embed_dim == 0 || heads == 0 || blocks == 0 || tokens == 0 ||
            classes == 0 || mlp_ratio == 0)
            throw std::invalid_argument("ViTConfig: all dimensions must be positive");
        if (embed_dim % heads != 0)
            throw std::invalid_argument("ViTConfig: embed_dim not divisible by heads");
        if (weight_bits < 2 || activation_bits < 2)
            throw std::invalid_argument("ViTConfig: bitwidth < 2");
    }

    bool operator==(const ViTConfig&) const = default;
};

// One named quantization point: a weight tensor or an intermediary
// activation, with its scale parameters.
struct QuantPoint {
    std::string name;
    bool is_weight = false;
    QuantParams params;
};

// Flattened view of every scale element in one block, with an index map
// back to (point, channel).
struct BlockScales {
    std::vector<float> values;
    struct Entry {
        uint32_t point;
        uint32_t channel;
    };
    std::vector<Entry> index;
};

struct ViTBlock {
    // fp master weights
    std::vector<Tensor> wq, wk, wv; // heads x [d x d_k]
    Tensor wo;                      // [d x d]
    Tensor fc1_w;                   // [d x hidden]
    Tensor fc2_w;                   // [hidden x d]
    std::vector<float> fc1_b, fc2_b;
    std::vector<float> ln1_g, ln1_b, ln2_g, ln2_b; // unquantized

    // quantization-point table; fixed order, see make_points()
    std::vector<QuantPoint> points;

    // fake-quantized weight cache, invalidated whenever scales change
    mutable std::vector<Tensor> cq_wq, cq_wk, cq_wv;
    mutable Tensor cq_wo, cq_fc1, cq_fc2;
    mutable bool cache_dirty = true;

    // point-table indices
    static uint32_t pt_wq(uint32_t i) { return 3 * i; }
    static uint32_t pt_wk(uint32_t i) { return 3 * i + 1; }
    static uint32_t pt_wv(uint32_t i) { return 3 * i + 2; }
    uint32_t n_heads() const { return uint32_t(wq.size()); }
    uint32_t pt_wo() const { return 3 * n_heads(); }
    uint32_t pt_fc1w() const { return 3 * n_heads() + 1; }
    uint32_t pt_fc2w() const { return 3 * n_heads() + 2; }
    uint32_t pt_act_base() const { return 3 * n_heads() + 3; }
    uint32_t pt_act_q(uint32_t i) const { return pt_act_base() + 6 * i; }
    uint32_t pt_act_k(uint32_t i) const { return pt_act_base() + 6 * i + 1; }
    uint32_t pt_act_v(uint32_t i) const { return pt_act_base() + 6 * i + 2; }
    uint32_t pt_act_scores(uint32_t i) const { return pt_act_base() + 6 * i + 3; }
    uint32_t pt_act_probs(uint32_t i) const { return pt_act_base() + 6 * i + 4; }
    uint32_t pt_act_head(uint32_t i) const { return pt_act_base() + 6 * i + 5; }
    uint32_t pt_act_proj() const { return pt_act_base() + 6 * n_heads(); }
    uint32_t pt_act_gelu() const { return pt_act_base() + 6 * n_heads() + 1; }
    uint32_t pt_act_fc2() const { return pt_act_base() + 6 * n_heads() + 2; }
};

struct Model {
    ViTConfig config;
    std::vector<ViTBlock> blocks;
    Tensor head_w; // [d x classes], unquantized
    std::vector<float> head_b;
};

// Fixed quantization-point layout for one block:
//   weights:   wq0 wk0 wv0 ... wq{N-1} wk{N-1} wv{N-1} wo fc1_w fc2_w
//   acts:      per head {q k v scores probs head}, then proj, gelu, fc2
// probs and gelu points use the log2 scheme, everything else uniform.
inline std::vector<QuantPoint> make_points(const ViTConfig& cfg) {
    std::vector<QuantPoint> pts;
    auto weight_pt = [&](const std::string& name, size_t channels) {
        QuantPoint p;
        p.name = name;
        p.is_weight = true;
        p.params.bitwidth = cfg.weight_bits;
        p.params.granularity = Granularity::PerChannel;
        p.params.channel_axis = 1; // output channels = columns
        p.params.scale.assign(channels, 1.0f);
        pts.push_back(std::move(p));
    };
    auto act_pt = [&](const std::string& name, QuantScheme scheme) {
        QuantPoint p;
        p.name = name;
        p.params.bitwidth = cfg.activation_bits;
        p.params.scheme = scheme;
        p.params.scale = {1.0f};
        pts.push_back(std::move(p));
    };
    for (uint32_t i = 0; i < cfg.heads; ++i) {
        weight_pt("wq" + std::to_string(i), cfg.head_dim());
        weight_pt("wk" + std::to_string(i), cfg.head_dim());
        weight_pt("wv" + std::to_string(i), cfg.head_dim());
    }
    weight_pt("wo", cfg.embed_dim);
    weight_pt("fc1_w", cfg.hidden());
    weight_pt("fc2_w", cfg.embed_dim);
    for (uint32_t i = 0; i < cfg.heads; ++i) {
        const std::string s = std::to_string(i);
        act_pt("act_q" + s, QuantScheme::Uniform);
        act_pt("act_k" + s, QuantScheme::Uniform);
        act_pt("act_v" + s, QuantScheme::Uniform);
        act_pt("act_scores" + s, QuantScheme::Uniform);
        act_pt("act_probs" + s, QuantScheme::Log2);
        act_pt("act_head" + s, QuantScheme::Uniform);
    }
    act_pt("act_proj", QuantScheme::Uniform);
    act_pt("act_gelu", QuantScheme::Log2);
    act_pt("act_fc2", QuantScheme::Uniform);
    return pts;
}

inline void rebuild_weight_cache(const ViTBlock& b) {
    const uint32_t n = b.n_heads();
    b.cq_wq.resize(n);
    b.cq_wk.resize(n);
    b.cq_wv.resize(n);
    for (uint32_t i = 0; i < n; ++i) {
        b.cq_wq[i] = fake_quant(b.wq[i], b.points[ViTBlock::pt_wq(i)].params);
        b.cq_wk[i] = fake_quant(b.wk[i], b.points[ViTBlock::pt_wk(i)].params);
        b.cq_wv[i] = fake_quant(b.wv[i], b.points[ViTBlock::pt_wv(i)].params);
    }
    b.cq_wo = fake_quant(b.wo, b.points[b.pt_wo()].params);
    b.cq_fc1 = fake_quant(b.fc1_w, b.points[b.pt_fc1w()].params);
    b.cq_fc2 = fake_quant(b.fc2_w, b.points[b.pt_fc2w()].params);
    b.cache_dirty = false;
}

// ---- forward pass ----------------------------------------------------------

namespace detail {

// scratch tensors reused across samples to keep the hot path allocation-free
struct Scratch {
    Tensor h, q, k, v, probs, head_out, concat, proj, h2, mlp1, mlp2, bt;
};

inline void fq_act(Tensor& t, const QuantPoint& p, bool quantized) {
    if (!quantized) return;
    fake_quant_inplace(t.data.data(), t.data.size(), p.params);
}

// gelu output is shifted nonnegative before log2 fake quant, then unshifted
inline void fq_gelu_act(Tensor& t, const QuantPoint& p, bool quantized) {
    if (!quantized || p.params.bitwidth >= kPassthroughBits) return;
    for (float& v : t.data) v += kGeluShift;
    fake_quant_inplace(t.data.data(), t.data.size(), p.params);
    for (float& v : t.data) v -= kGeluShift;
}

} // namespace detail

// Pre-LN transformer block: x += MHSA(LN1(x)); x += MLP(LN2(x)).
// When `quantized`, fake quantization is applied to every declared point.
// `x` may stack several samples: rows = samples * tokens, and attention is
// confined to each sample's own `tokens` rows. Row-wise math is unaffected,
// so a stacked pass is bit-identical to per-sample passes.
inline void block_forward(const ViTBlock& b, Tensor& x, bool quantized,
                          detail::Scratch& ws, size_t tokens) {
    if (quantized && b.cache_dirty) rebuild_weight_cache(b);
    const uint32_t n_heads = b.n_heads();
    const float inv_sqrt_dk = 1.0f / std::sqrt(float(b.wq[0].cols()));
    const auto& wq = quantized ? b.cq_wq : b.wq;
    const auto& wk = quantized ? b.cq_wk : b.wk;
    const auto& wv = quantized ? b.cq_wv : b.wv;
    const Tensor& wo = quantized ? b.cq_wo : b.wo;
    const Tensor& fc1 = quantized ? b.cq_fc1 : b.fc1_w;
    const Tensor& fc2 = quantized ? b.cq_fc2 : b.fc2_w;

    const size_t rows = x.rows(), d = x.cols();
    if (tokens == 0 || rows % tokens != 0)
        throw std::invalid_argument("block_forward: rows not a multiple of tokens");
    const size_t samples = rows / tokens;

    layernorm_into(x, b.ln1_g, b.ln1_b, ws.h);

    ws.concat.shape = {rows, d};
    ws.concat.data.assign(rows * d, 0.0f);
    const size_t d_k = b.wq[0].cols();
    ws.bt.data.resize(d_k * tokens);
    for (uint32_t i = 0; i < n_heads; ++i) {
        matmul_into(ws.h, wq[i], ws.q);
        detail::fq_act(ws.q, b.points[b.pt_act_q(i)], quantized);
        matmul_into(ws.h, wk[i], ws.k);
        detail::fq_act(ws.k, b.points[b.pt_act_k(i)], quantized);
        matmul_into(ws.h, wv[i], ws.v);
        detail::fq_act(ws.v, b.points[b.pt_act_v(i)], quantized);
        ws.probs.shape = {rows, tokens};
        ws.probs.data.resize(rows * tokens);
        for (size_t sm = 0; sm < samples; ++sm)
            matmul_nt_raw(ws.q.data.data() + sm * tokens * d_k, tokens, d_k,
                          ws.k.data.data() + sm * tokens * d_k, tokens,
                          ws.probs.data.data() + sm * tokens * tokens,
                          ws.bt.data.data());
        for (float& sc : ws.probs.data) sc *= inv_sqrt_dk;
        detail::fq_act(ws.probs, b.points[b.pt_act_scores(i)], quantized);
        softmax_lastdim_inplace(ws.probs);
        detail::fq_act(ws.probs, b.points[b.pt_act_probs(i)], quantized);
        ws.head_out.shape = {rows, d_k};
        ws.head_out.data.resize(rows * d_k);
        for (size_t sm = 0; sm < samples; ++sm)
            matmul_raw(ws.probs.data.data() + sm * tokens * tokens, tokens,
                       tokens, ws.v.data.data() + sm * tokens * d_k, d_k,
                       ws.head_out.data.data() + sm * tokens * d_k);
        detail::fq_act(ws.head_out, b.points[b.pt_act_head(i)], quantized);
        // place head output into its column slice of the concat buffer
        for (size_t r = 0; r < rows; ++r)
            std::copy_n(ws.head_out.data.data() + r * d_k, d_k,
                        ws.concat.data.data() + r * d + i * d_k);
    }
    matmul_into(ws.concat, wo, ws.proj);
    detail::fq_act(ws.proj, b.points[b.pt_act_proj()], quantized);
    for (size_t i = 0; i < x.data.size(); ++i) x.data[i] += ws.proj.data[i];

    layernorm_into(x, b.ln2_g, b.ln2_b, ws.h2);
    matmul_into(ws.h2, fc1, ws.mlp1);
    const size_t hid = fc1.cols();
    for (size_t r = 0; r < rows; ++r) {
        float* row = ws.mlp1.data.data() + r * hid;
        size_t j = 0;
#if defined(__AVX2__)
        for (; j + 8 <= hid; j += 8)
            _mm256_storeu_ps(row + j,
                             gelu256(_mm256_add_ps(_mm256_loadu_ps(row + j),
                                                   _mm256_loadu_ps(b.fc1_b.data() + j))));
#endif
        for (; j < hid; ++j) row[j] = gelu_scalar(row[j] + b.fc1_b[j]);
    }
    detail::fq_gelu_act(ws.mlp1, b.points[b.pt_act_gelu()], quantized);
    matmul_into(ws.mlp1, fc2, ws.mlp2);
    for (size_t r = 0; r < rows; ++r)
        for (size_t j = 0; j < d; ++j) ws.mlp2.data[r * d + j] += b.fc2_b[j];
    detail::fq_act(ws.mlp2, b.points[b.pt_act_fc2()], quantized);
    for (size_t i = 0; i < x.data.size(); ++i) x.data[i] += ws.mlp2.data[i];
}

// Runs blocks [from_block, B) on token activations x, then the classifier
// head (mean-pooled tokens x unquantized linear map). Exposing `from_block`
// lets callers cache prefix activations when only one block's scales move.
inline std::vector<float> forward_from(const Model& m, Tensor x, size_t from_block,
                                       bool quantized, detail::Scratch& ws) {
    for (size_t b = from_block; b < m.blocks.size(); ++b)
        block_forward(m.blocks[b], x, quantized, ws, x.rows());
    const size_t t = x.rows(), d = x.cols();
    std::vector<float> pooled(d, 0.0f);
    for (size_t r = 0; r < t; ++r)
        for (size_t j = 0; j < d; ++j) pooled[j] += x.at(r, j);
    for (float& v : pooled) v /= float(t);
    std::vector<float> logits(m.config.classes, 0.0f);
    for (size_t j = 0; j < d; ++j) {
        const float pj = pooled[j];
        for (size_t c = 0; c < m.config.classes; ++c)
            logits[c] += pj * m.head_w.at(j, c);
    }
    for (size_t c = 0; c < m.config.classes; ++c) logits[c] += m.head_b[c];
    return logits;
}

// Runs blocks [from_block, to_block) only, in place.
inline void run_blocks(const Model& m, Tensor& x, size_t from_block, size_t to_block,
                       bool quantized, detail::Scratch& ws, size_t tokens) {
    for (size_t b = from_block; b < to_block; ++b)
        block_forward(m.blocks[b], x, quantized, ws, tokens);
}

// Stacked forward over `samples` = x.rows() / tokens samples; returns one
// logits row per sample. Bit-identical to per-sample forward_from calls.
inline std::vector<std::vector<float>> forward_batch_from(
    const Model& m, Tensor x, size_t from_block, bool quantized,
    detail::Scratch& ws) {
    const size_t t = m.config.tokens, d = m.config.embed_dim;
    const size_t samples = x.rows() / t;
    for (size_t b = from_block; b < m.blocks.size(); ++b)
        block_forward(m.blocks[b], x, quantized, ws, t);
    std::vector<std::vector<float>> out(samples);
    std::vector<float> pooled(d);
    for (size_t sm = 0; sm < samples; ++sm) {
        std::fill(pooled.begin(), pooled.end(), 0.0f);
        for (size_t r = 0; r < t; ++r)
            for (size_t j = 0; j < d; ++j) pooled[j] += x.at(sm * t + r, j);
        for (float& v : pooled) v /= float(t);
        std::vector<float> logits(m.config.classes, 0.0f);
        for (size_t j = 0; j < d; ++j) {
            const float pj = pooled[j];
            for (size_t c = 0; c < m.config.classes; ++c)
                logits[c] += pj * m.head_w.at(j, c);
        }
        for (size_t c = 0; c < m.config.classes; ++c) logits[c] += m.head_b[c];
        out[sm] = std::move(logits);
    }
    return out;
}

inline Tensor sample_to_tensor(const Dataset& ds, size_t i) {
    Tensor x({ds.tokens, ds.dim});
    std::copy_n(ds.sample(i), ds.sample_size(), x.data.data());
    return x;
}

inline std::vector<float> forward(const Model& m, const Tensor& input,
                                  bool quantized) {
    if (input.shape.size() != 2 || input.rows() != m.config.tokens ||
        input.cols() != m.config.embed_dim)
        throw std::invalid_argument("forward: input shape mismatch");
    detail::Scratch ws;
    return forward_from(m, input, 0, quantized, ws);
}

// ---- block scale access ----------------------------------------------------

inline BlockScales get_block_scales(const Model& m, size_t block_index) {
    if (block_index >= m.blocks.size())
        throw std::out_of_range("get_block_scales: block index out of range");
    const ViTBlock& b = m.blocks[block_index];
    BlockScales out;
    for (uint32_t p = 0; p < b.points.size(); ++p)
        for (uint32_t c = 0; c < b.points[p].params.scale.size(); ++c) {
            out.values.push_back(b.points[p].params.scale[c]);
            out.index.push_back({p, c});
        }
    return out;
}

inline void set_block_scales(Model& m, size_t block_index,
                             const std::vector<float>& values) {
    if (block_index >= m.blocks.size())
        throw std::out_of_range("set_block_scales: block index out of range");
    ViTBlock& b = m.blocks[block_index];
    size_t total = 0;
    for (const QuantPoint& p : b.points) total += p.params.scale.size();
    if (values.size() != total)
        throw std::invalid_argument("set_block_scales: length mismatch");
    for (float v : values)
        if (!(v > 0.0f))
            throw std::invalid_argument("set_block_scales: non-positive scale");
    size_t k = 0;
    for (QuantPoint& p : b.points)
        for (float& s : p.params.scale) s = values[k++];
    b.cache_dirty = true;
}

// ---- initialization ---------------------------------------------------------

inline Tensor gaussian_tensor(Rng& rng, size_t rows, size_t cols, float std_dev) {
    Tensor t({rows, cols});
    for (float& v : t.data) v = std_dev * float(rng.normal());
    return t;
}

// Weights from a scaled Gaussian (std = 1/sqrt(d)); weight scales via
// per-output-channel MinMax; activation scales calibrated afterwards.
inline Model init_model_weights(const ViTConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    const float std_dev = 1.0f / std::sqrt(float(cfg.embed_dim));
    Model m;
    m.config = cfg;
    m.blocks.resize(cfg.blocks);
    for (ViTBlock& b : m.blocks) {
        b.wq.resize(cfg.heads);
        b.wk.resize(cfg.heads);
        b.wv.resize(cfg.heads);
        for (uint32_t i = 0; i < cfg.heads; ++i) {
            b.wq[i] = gaussian_tensor(rng, cfg.embed_dim, cfg.head_dim(), std_dev);
            b.wk[i] = gaussian_tensor(rng, cfg.embed_dim, cfg.head_dim(), std_dev);
            b.wv[i] = gaussian_tensor(rng, cfg.embed_dim, cfg.head_dim(), std_dev);
        }
        b.wo = gaussian_tensor(rng, cfg.embed_dim, cfg.embed_dim, std_dev);
        b.fc1_w = gaussian_tensor(rng, cfg.embed_dim, cfg.hidden(), std_dev);
        b.fc2_w = gaussian_tensor(rng, cfg.hidden(), cfg.embed_dim, std_dev);
        b.fc1_b.assign(cfg.hidden(), 0.0f);
        b.fc2_b.assign(cfg.embed_dim, 0.0f);
        b.ln1_g.assign(cfg.embed_dim, 1.0f);
        b.ln1_b.assign(cfg.embed_dim, 0.0f);
        b.ln2_g.assign(cfg.embed_dim, 1.0f);
        b.ln2_b.assign(cfg.embed_dim, 0.0f);
        b.points = make_points(cfg);
        // weight scales from the weights themselves
        for (uint32_t i = 0; i < cfg.heads; ++i) {
            b.points[ViTBlock::pt_wq(i)].params =
                init_scale_minmax(b.wq[i], cfg.weight_bits, Granularity::PerChannel, 1);
            b.points[ViTBlock::pt_wk(i)].params =
                init_scale_minmax(b.wk[i], cfg.weight_bits, Granularity::PerChannel, 1);
            b.points[ViTBlock::pt_wv(i)].params =
                init_scale_minmax(b.wv[i], cfg.weight_bits, Granularity::PerChannel, 1);
        }
        b.points[b.pt_wo()].params =
            init_scale_minmax(b.wo, cfg.weight_bits, Granularity::PerChannel, 1);
        b.points[b.pt_fc1w()].params =
            init_scale_minmax(b.fc1_w, cfg.weight_bits, Granularity::PerChannel, 1);
        b.points[b.pt_fc2w()].params =
            init_scale_minmax(b.fc2_w, cfg.weight_bits, Granularity::PerChannel, 1);
    }
    m.head_w = gaussian_tensor(rng, cfg.embed_dim, cfg.classes, std_dev);
    m.head_b.assign(cfg.classes, 0.0f);
    return m;
}

namespace detail {

// block_forward clone that records per-point activation maxima on the fp
// path (MinMax for uniform points, max of the log2-domain value for log2)
inline void block_calibrate(ViTBlock& b, Tensor& x, std::vector<float>& maxima,
                            Scratch& ws) {
    const uint32_t n_heads = b.n_heads();
    const float inv_sqrt_dk = 1.0f / std::sqrt(float(b.wq[0].cols()));
    auto absmax = [](const Tensor& t) {
        float m = 0.0f;
        for (float v : t.data) m = std::max(m, std::fabs(v));
        return m;
    };
    auto note = [&](uint32_t pt, float v) { maxima[pt] = std::max(maxima[pt], v); };

    layernorm_into(x, b.ln1_g, b.ln1_b, ws.h);
    const size_t t = x.rows(), d = x.cols();
    const size_t d_k = b.wq[0].cols();
    ws.concat.shape = {t, d};
    ws.concat.data.assign(t * d, 0.0f);
    for (uint32_t i = 0; i < n_heads; ++i) {
        matmul_into(ws.h, b.wq[i], ws.q);
        note(b.pt_act_q(i), absmax(ws.q));
        matmul_into(ws.h, b.wk[i], ws.k);
        note(b.pt_act_k(i), absmax(ws.k));
        matmul_into(ws.h, b.wv[i], ws.v);
        note(b.pt_act_v(i), absmax(ws.v));
        matmul_nt_into(ws.q, ws.k, ws.probs);
        for (float& s : ws.probs.data) s *= inv_sqrt_dk;
        note(b.pt_act_scores(i), absmax(ws.probs));
        softmax_lastdim_inplace(ws.probs);
        note(b.pt_act_probs(i), absmax(ws.probs));
        matmul_into(ws.probs, ws.v, ws.head_out);
        note(b.pt_act_head(i), absmax(ws.head_out));
        for (size_t r = 0; r < t; ++r)
            std::copy_n(ws.head_out.data.data() + r * d_k, d_k,
                        ws.concat.data.data() + r * d + i * d_k);
    }
    matmul_into(ws.concat, b.wo, ws.proj);
    note(b.pt_act_proj(), absmax(ws.proj));
    for (size_t i = 0; i < x.data.size(); ++i) x.data[i] += ws.proj.data[i];

    layernorm_into(x, b.ln2_g, b.ln2_b, ws.h2);
    matmul_into(ws.h2, b.fc1_w, ws.mlp1);
    const size_t hid = b.fc1_w.cols();
    for (size_t r = 0; r < t; ++r)
        for (size_t j = 0; j < hid; ++j)
            ws.mlp1.data[r * hid + j] =
                gelu_scalar(ws.mlp1.data[r * hid + j] + b.fc1_b[j]);
    {
        float mx = 0.0f;
        for (float v : ws.mlp1.data) mx = std::max(mx, v + kGeluShift);
        note(b.pt_act_gelu(), mx);
    }
    matmul_into(ws.mlp1, b.fc2_w, ws.mlp2);
    for (size_t r = 0; r < t; ++r)
        for (size_t j = 0; j < d; ++j) ws.mlp2.data[r * d + j] += b.fc2_b[j];
    note(b.pt_act_fc2(), absmax(ws.mlp2));
    for (size_t i = 0; i < x.data.size(); ++i) x.data[i] += ws.mlp2.data[i];
}

} // namespace detail

// Sets activation scales from a calibration dataset: uniform points get
// MinMax over observed magnitudes, log2 points get the observed maximum
// as their top-of-range scale. Degenerate (never-activated) points keep 1.
inline void calibrate_activations(Model& m, const Dataset& calib) {
    if (calib.count == 0)
        throw std::invalid_argument("calibrate_activations: empty calibration set");
    std::vector<std::vector<float>> maxima(m.blocks.size());
    for (size_t b = 0; b < m.blocks.size(); ++b)
        maxima[b].assign(m.blocks[b].points.size(), 0.0f);
    detail::Scratch ws;
    for (uint32_t s = 0; s < calib.count; ++s) {
        Tensor x = sample_to_tensor(calib, s);
        for (size_t b = 0; b < m.blocks.size(); ++b)
            detail::block_calibrate(m.blocks[b], x, maxima[b], ws);
    }
    for (size_t b = 0; b < m.blocks.size(); ++b) {
        ViTBlock& blk = m.blocks[b];
        for (size_t p = 0; p < blk.points.size(); ++p) {
            QuantPoint& pt = blk.points[p];
            if (pt.is_weight) continue;
            float mx = maxima[b][p];
            if (mx <= 0.0f) mx = 1.0f;
            if (pt.params.scheme == QuantScheme::Log2)
                pt.params.scale = {mx};
            else
                pt.params.scale = {mx / float(uniform_qmax(pt.params.bitwidth))};
        }
        blk.cache_dirty = true;
    }
}

inline Model init_model(const ViTConfig& cfg, uint64_t seed, const Dataset& calib) {
    Model m = init_model_weights(cfg, seed);
    calibrate_activations(m, calib);
    return m;
}

// ---- prediction helpers -----------------------------------------------------

inline std::vector<std::vector<float>> predict_all(const Model& m, const Dataset& ds,
                                                   bool quantized) {
    detail::Scratch ws;
    const size_t t = ds.tokens, d = ds.dim;
    const size_t chunk = 64; // samples per stacked pass, keeps scratch small
    std::vector<std::vector<float>> out;
    out.reserve(ds.count);
    for (uint32_t i0 = 0; i0 < ds.count; i0 += chunk) {
        const size_t n = std::min<size_t>(chunk, ds.count - i0);
        Tensor x({n * t, d});
        for (size_t j = 0; j < n; ++j)
            std::copy_n(ds.sample(i0 + j), t * d, x.data.data() + j * t * d);
        auto logits = forward_batch_from(m, std::move(x), 0, quantized, ws);
        for (auto& l : logits) out.push_back(std::move(l));
    }
    return out;
}

inline size_t argmax(const std::vector<float>& v) {
    size_t best = 0;
    for (size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

// fraction of samples where quantized and fp argmax agree
inline double fp_agreement(const Model& m, const Dataset& ds) {
    auto lq = predict_all(m, ds, true);
    auto lf = predict_all(m, ds, false);
    size_t agree = 0;
    for (uint32_t i = 0; i < ds.count; ++i)
        if (argmax(lq[i]) == argmax(lf[i])) ++agree;
    return double(agree) / double(ds.count);
}

} // namespace evolq
