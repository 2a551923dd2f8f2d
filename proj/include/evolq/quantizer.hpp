#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <vector>

#include "evolq/tensor.hpp"

#if defined(__AVX2__)
#include <immintrin.h>
#endif

namespace evolq {

// Bitwidths >= kPassthroughBits disable quantization entirely (fp sentinel).
constexpr int kPassthroughBits = 32;

enum class QuantScheme { Uniform, Log2 };
enum class Granularity { PerTensor, PerChannel };

struct QuantParams {
    std::vector<float> scale; // length 1 (per-tensor) or channel count
    int bitwidth = 8;
    Granularity granularity = Granularity::PerTensor;
    int channel_axis = 0; // axis the per-channel scales index
    QuantScheme scheme = QuantScheme::Uniform;

    void validate() const {
        if (bitwidth < 2) throw std::invalid_argument("QuantParams: bitwidth < 2");
        if (scale.empty()) throw std::invalid_argument("QuantParams: empty scale");
        for (float s : scale)
            if (!(s > 0.0f))
                throw std::invalid_argument("QuantParams: non-positive scale");
    }
};

struct QuantizedTensor {
    std::vector<int32_t> codes;
    QuantParams params;
    std::vector<size_t> shape;
};

// round-half-to-even via the 1.5*2^23 magic constant; exact for |x| < 2^22
// (quantization codes are clipped to a few hundred, far inside that range)
// and branch-free so the fake-quant hot loop vectorizes
inline float round_even(float x) {
    const float magic = 12582912.0f; // 1.5 * 2^23
    float r = (std::fabs(x) + magic) - magic;
    return std::copysign(r, x); // half-to-even is sign-symmetric
}

// code = round_half_even(-log2(t)) for t = value/scale in (0, 1], computed
// exactly from the float representation: t = 2^-e * (1+f), and
// round(e - log2(1+f)) is e minus one iff 1+f > sqrt(2). An exact tie would
// need log2(1+f) = 1/2, which no float satisfies, so this matches the
// mathematical rounding everywhere.
inline int32_t log2_code_of_ratio(float t) {
    if (t >= 1.0f) return 0;
    if (t <= 0.0f) return 1 << 30; // caller clips to the max code
    uint32_t bits;
    std::memcpy(&bits, &t, 4);
    uint32_t biased = (bits >> 23) & 0xffu;
    if (biased == 0) // subnormal: renormalize exactly
        return log2_code_of_ratio(t * 0x1p64f) + 64;
    int32_t e = 127 - int32_t(biased);
    uint32_t mant = bits & 0x7fffffu;
    // 1+f > sqrt(2)  <=>  mantissa >= ceil((sqrt(2)-1) * 2^23)
    const uint32_t sqrt2_mant = 3474676u;
    return mant >= sqrt2_mant ? e - 1 : e;
}

inline int32_t log2_code(float value, float scale) {
    return log2_code_of_ratio(value / scale);
}

// exact 2^-code for code in [0, 255]
inline const float* inv_pow2_table() {
    static const auto table = [] {
        std::array<float, 256> t{};
        for (int i = 0; i < 256; ++i) t[size_t(i)] = std::exp2(float(-i));
        return t;
    }();
    return table.data();
}

inline int32_t uniform_qmax(int bitwidth) { return (1 << (bitwidth - 1)) - 1; }

// Returns the per-element scale index for a per-channel tensor quantized
// along `axis` of `shape`.
inline size_t channel_of(const std::vector<size_t>& shape, int axis, size_t flat) {
    size_t stride = 1;
    for (size_t d = shape.size(); d-- > size_t(axis) + 1;) stride *= shape[d];
    return (flat / stride) % shape[size_t(axis)];
}

inline QuantizedTensor quantize_uniform(const Tensor& x, const QuantParams& params) {
    params.validate();
    if (params.granularity == Granularity::PerChannel &&
        params.scale.size() != x.shape.at(size_t(params.channel_axis)))
        throw std::invalid_argument("quantize_uniform: per-channel scale length mismatch");
    QuantizedTensor q;
    q.params = params;
    q.shape = x.shape;
    q.codes.resize(x.data.size());
    const float qmax = float(uniform_qmax(params.bitwidth));
    if (params.granularity == Granularity::PerTensor) {
        const float inv = 1.0f / params.scale[0];
        for (size_t i = 0; i < x.data.size(); ++i) {
            float c = round_even(x.data[i] * inv);
            q.codes[i] = int32_t(std::clamp(c, -qmax, qmax));
        }
    } else {
        for (size_t i = 0; i < x.data.size(); ++i) {
            size_t ch = channel_of(x.shape, params.channel_axis, i);
            float c = round_even(x.data[i] / params.scale[ch]);
            q.codes[i] = int32_t(std::clamp(c, -qmax, qmax));
        }
    }
    return q;
}

// code = clip(round(-log2(max(x, floor)/s)), 0, 2^b - 1), floor = s * 2^-(2^b-1)
// x must be nonnegative; x == 0 maps to the largest exponent code.
inline QuantizedTensor quantize_log2(const Tensor& x, const QuantParams& params) {
    params.validate();
    QuantizedTensor q;
    q.params = params;
    q.shape = x.shape;
    q.codes.resize(x.data.size());
    const float s = params.scale[0];
    const int32_t cmax = (1 << params.bitwidth) - 1;
    for (size_t i = 0; i < x.data.size(); ++i) {
        float v = x.data[i];
        if (v < 0.0f)
            throw std::domain_error("quantize_log2: negative input");
        q.codes[i] = std::min(log2_code(v, s), cmax);
    }
    return q;
}

inline Tensor dequantize(const QuantizedTensor& q) {
    Tensor out(q.shape);
    if (q.params.scheme == QuantScheme::Log2) {
        const float s = q.params.scale[0];
        for (size_t i = 0; i < q.codes.size(); ++i)
            out.data[i] = s * std::exp2(float(-q.codes[i]));
        return out;
    }
    if (q.params.granularity == Granularity::PerTensor) {
        const float s = q.params.scale[0];
        for (size_t i = 0; i < q.codes.size(); ++i)
            out.data[i] = float(q.codes[i]) * s;
    } else {
        for (size_t i = 0; i < q.codes.size(); ++i) {
            size_t ch = channel_of(q.shape, q.params.channel_axis, i);
            out.data[i] = float(q.codes[i]) * q.params.scale[ch];
        }
    }
    return out;
}

// quantize-then-dequantize; this is what the model forward pass applies.
// Dispatches on scheme; bitwidth >= 32 is an exact pass-through.
inline Tensor fake_quant(const Tensor& x, const QuantParams& params) {
    if (params.bitwidth >= kPassthroughBits) return x;
    if (params.scheme == QuantScheme::Log2) return dequantize(quantize_log2(x, params));
    return dequantize(quantize_uniform(x, params));
}

// In-place per-tensor fake quant on a raw span; hot path of the forward pass.
namespace detail {

#if defined(__AVX2__)
// vector body of the uniform fake-quant loop; identical operation order to
// the scalar tail, so results are bit-equal lane for lane
inline size_t fq_uniform_avx2(float* p, size_t n, float s, float qmax) {
    const __m256 vs = _mm256_set1_ps(s);
    const __m256 vinv = _mm256_set1_ps(1.0f / s);
    const __m256 vqmax = _mm256_set1_ps(qmax);
    const __m256 vqmin = _mm256_set1_ps(-qmax);
    const __m256 magic = _mm256_set1_ps(12582912.0f); // 1.5 * 2^23
    const __m256 signbit = _mm256_set1_ps(-0.0f);
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 c = _mm256_mul_ps(_mm256_loadu_ps(p + i), vinv);
        c = _mm256_min_ps(_mm256_max_ps(c, vqmin), vqmax);
        __m256 sign = _mm256_and_ps(c, signbit);
        __m256 r = _mm256_sub_ps(
            _mm256_add_ps(_mm256_andnot_ps(signbit, c), magic), magic);
        r = _mm256_or_ps(r, sign);
        // adding +0.0 canonicalizes -0.0, matching int-code dequantization
        _mm256_storeu_ps(p + i,
                         _mm256_add_ps(_mm256_mul_ps(r, vs), _mm256_setzero_ps()));
    }
    return i;
}

// vector body of the log2 fake-quant loop, replicating log2_code_of_ratio's
// exponent/mantissa logic (including the subnormal renormalization) and the
// exact 2^-code table lookup; bit-equal to the scalar path
inline size_t fq_log2_avx2(float* p, size_t n, float s, int32_t cmax,
                           const float* pow2) {
    const __m256 vs = _mm256_set1_ps(s);
    const __m256 zero = _mm256_setzero_ps();
    const __m256 two64 = _mm256_set1_ps(0x1p64f);
    const __m256 minnorm = _mm256_set1_ps(0x1p-126f);
    const __m256i vbias = _mm256_set1_epi32(127);
    const __m256i mantmask = _mm256_set1_epi32(0x7fffff);
    const __m256i sqrt2m = _mm256_set1_epi32(3474676);
    const __m256i vcmax = _mm256_set1_epi32(cmax);
    const __m256i v64 = _mm256_set1_epi32(64);
    const __m256i vzero = _mm256_setzero_si256();
    const __m256i vone = _mm256_set1_epi32(1);
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 t = _mm256_div_ps(_mm256_loadu_ps(p + i), vs);
        // positive subnormals are scaled into normal range (exactly), and
        // their code gets +64 afterwards
        __m256 subn = _mm256_and_ps(_mm256_cmp_ps(t, minnorm, _CMP_LT_OQ),
                                    _mm256_cmp_ps(t, zero, _CMP_GT_OQ));
        __m256 tt = _mm256_blendv_ps(t, _mm256_mul_ps(t, two64), subn);
        __m256i bits = _mm256_castps_si256(tt);
        __m256i biased = _mm256_and_si256(_mm256_srli_epi32(bits, 23),
                                          _mm256_set1_epi32(0xff));
        __m256i code = _mm256_sub_epi32(vbias, biased);
        __m256i mant = _mm256_and_si256(bits, mantmask);
        // subtract 1 where mantissa >= sqrt2 boundary
        __m256i ge = _mm256_cmpgt_epi32(sqrt2m, mant);
        code = _mm256_sub_epi32(code, _mm256_andnot_si256(ge, vone));
        code = _mm256_add_epi32(code,
                                _mm256_and_si256(_mm256_castps_si256(subn), v64));
        code = _mm256_max_epi32(code, vzero);
        code = _mm256_min_epi32(code, vcmax);
        // t <= 0 (x == 0 in practice) maps to the largest exponent code
        __m256i le = _mm256_castps_si256(_mm256_cmp_ps(t, zero, _CMP_LE_OQ));
        code = _mm256_blendv_epi8(code, vcmax, le);
        __m256 pw = _mm256_i32gather_ps(pow2, code, 4);
        _mm256_storeu_ps(p + i, _mm256_mul_ps(vs, pw));
    }
    return i;
}
#endif

} // namespace detail

inline void fake_quant_inplace(float* p, size_t n, const QuantParams& params) {
    if (params.bitwidth >= kPassthroughBits) return;
    if (params.scheme == QuantScheme::Uniform) {
        const float s = params.scale[0];
        const float inv = 1.0f / s;
        const float qmax = float(uniform_qmax(params.bitwidth));
        size_t i = 0;
#if defined(__AVX2__)
        i = detail::fq_uniform_avx2(p, n, s, qmax);
#endif
        // clamping before the round is equivalent to round-then-clip for
        // integer bounds, and keeps the loop branch-free
        for (; i < n; ++i)
            p[i] = round_even(std::clamp(p[i] * inv, -qmax, qmax)) * s + 0.0f;
    } else {
        const float s = params.scale[0];
        const int32_t cmax = (1 << params.bitwidth) - 1;
        const float* pow2 = inv_pow2_table();
        size_t i = 0;
#if defined(__AVX2__)
        if (cmax <= 255) i = detail::fq_log2_avx2(p, n, s, cmax, pow2);
#endif
        for (; i < n; ++i) {
            int32_t c = std::min(log2_code(p[i], s), cmax);
            p[i] = cmax <= 255 ? s * pow2[c] : s * std::exp2(float(-c));
        }
    }
}

// ---- scale initializers ------------------------------------------------

// delta = max|x| / (2^(b-1) - 1); all-zero channels get delta = 1 so the
// positivity invariant needed by the search perturbation always holds.
inline QuantParams init_scale_minmax(const Tensor& x, int bitwidth,
                                     Granularity gran = Granularity::PerTensor,
                                     int axis = 0) {
    if (x.data.empty()) throw std::invalid_argument("init_scale_minmax: empty tensor");
    QuantParams p;
    p.bitwidth = bitwidth;
    p.granularity = gran;
    p.channel_axis = axis;
    const float denom = float(uniform_qmax(bitwidth));
    if (gran == Granularity::PerTensor) {
        float mx = 0.0f;
        for (float v : x.data) mx = std::max(mx, std::fabs(v));
        p.scale = {mx > 0.0f ? mx / denom : 1.0f};
    } else {
        const size_t nch = x.shape.at(size_t(axis));
        std::vector<float> mx(nch, 0.0f);
        for (size_t i = 0; i < x.data.size(); ++i) {
            size_t ch = channel_of(x.shape, axis, i);
            mx[ch] = std::max(mx[ch], std::fabs(x.data[i]));
        }
        p.scale.resize(nch);
        for (size_t c = 0; c < nch; ++c)
            p.scale[c] = mx[c] > 0.0f ? mx[c] / denom : 1.0f;
    }
    return p;
}

// linear-interpolation percentile of |x|, pct in (0, 100]
inline float abs_percentile(const Tensor& x, double pct) {
    std::vector<float> mags(x.data.size());
    for (size_t i = 0; i < mags.size(); ++i) mags[i] = std::fabs(x.data[i]);
    std::sort(mags.begin(), mags.end());
    const size_t n = mags.size();
    if (n == 1) return mags[0];
    double pos = (pct / 100.0) * double(n - 1);
    size_t lo = size_t(pos);
    if (lo >= n - 1) return mags[n - 1];
    double frac = pos - double(lo);
    return float(double(mags[lo]) * (1.0 - frac) + double(mags[lo + 1]) * frac);
}

inline QuantParams init_scale_percentile(const Tensor& x, int bitwidth,
                                         double pct = 99.9) {
    if (!(pct > 0.0 && pct <= 100.0))
        throw std::invalid_argument("init_scale_percentile: pct out of (0, 100]");
    if (x.data.empty())
        throw std::invalid_argument("init_scale_percentile: empty tensor");
    QuantParams p;
    p.bitwidth = bitwidth;
    float q = abs_percentile(x, pct);
    p.scale = {q > 0.0f ? q / float(uniform_qmax(bitwidth)) : 1.0f};
    return p;
}

inline double quant_mse(const Tensor& x, const QuantParams& p) {
    Tensor fq = fake_quant(x, p);
    double err = 0.0;
    for (size_t i = 0; i < x.data.size(); ++i) {
        double d = double(x.data[i]) - double(fq.data[i]);
        err += d * d;
    }
    return err;
}

// 100-point grid over [0.2, 1.2] * delta_minmax, minimizing reconstruction
// MSE; ties resolved toward the larger scale.
inline QuantParams init_scale_omse(const Tensor& x, int bitwidth, int grid_points = 100) {
    QuantParams base = init_scale_minmax(x, bitwidth);
    const float d0 = base.scale[0];
    QuantParams best = base;
    double best_err = quant_mse(x, base);
    QuantParams trial = base;
    for (int g = 0; g < grid_points; ++g) {
        float f = 0.2f + (1.2f - 0.2f) * float(g) / float(grid_points - 1);
        trial.scale[0] = f * d0;
        double err = quant_mse(x, trial);
        if (err < best_err || (err == best_err && trial.scale[0] > best.scale[0])) {
            best_err = err;
            best = trial;
        }
    }
    return best;
}

// new_bias = old_bias + (W - What) . mean(calib_inputs)
// W is [in x out]; calib rows are input vectors of length in.
inline std::vector<float> bias_correct(const Tensor& weights,
                                       const Tensor& quantized_weights,
                                       const std::vector<float>& old_bias,
                                       const Tensor& calib_inputs) {
    check_2d(weights, "bias_correct");
    if (!weights.same_shape(quantized_weights))
        throw std::invalid_argument("bias_correct: weight shapes differ");
    if (calib_inputs.data.empty())
        throw std::invalid_argument("bias_correct: empty calibration set");
    const size_t in_dim = weights.rows(), out_dim = weights.cols();
    if (calib_inputs.cols() != in_dim || old_bias.size() != out_dim)
        throw std::invalid_argument("bias_correct: dimension mismatch");
    std::vector<float> mean_in(in_dim, 0.0f);
    for (size_t r = 0; r < calib_inputs.rows(); ++r)
        for (size_t j = 0; j < in_dim; ++j) mean_in[j] += calib_inputs.at(r, j);
    for (float& v : mean_in) v /= float(calib_inputs.rows());
    std::vector<float> bias = old_bias;
    for (size_t o = 0; o < out_dim; ++o) {
        float shift = 0.0f;
        for (size_t i = 0; i < in_dim; ++i)
            shift += (weights.at(i, o) - quantized_weights.at(i, o)) * mean_in[i];
        bias[o] += shift;
    }
    return bias;
}

} // namespace evolq
