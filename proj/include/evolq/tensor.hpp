#pragma once

#include <algorithm>
#include <cmath>
#if defined(__AVX2__)
#include <immintrin.h>
#endif
#include <cstddef>
#include <cstring>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace evolq {

// Dense row-major f32 array. Deliberately minimal: only what the tiny ViT
// forward pass needs. All ops are pure and use a fixed left-to-right
// accumulation order so results are bit-reproducible run to run.
struct Tensor {
    std::vector<size_t> shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<size_t> s) : shape(std::move(s)) {
        data.assign(numel(), 0.0f);
    }
    Tensor(std::vector<size_t> s, std::vector<float> d)
        : shape(std::move(s)), data(std::move(d)) {
        if (numel() != data.size())
            throw std::invalid_argument("Tensor: shape/data size mismatch");
    }

    size_t numel() const {
        size_t n = 1;
        for (size_t d : shape) n *= d;
        return n;
    }
    size_t rows() const { return shape.at(0); }
    size_t cols() const { return shape.at(1); }

    float& at(size_t i, size_t j) { return data[i * cols() + j]; }
    float at(size_t i, size_t j) const { return data[i * cols() + j]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

inline void check_2d(const Tensor& t, const char* who) {
    if (t.shape.size() != 2)
        throw std::invalid_argument(std::string(who) + ": expected 2-D tensor");
}

namespace detail {

// 4-row x 8-column register tile: four independent accumulation chains per
// column vector, each strictly k-ordered, so every output sum matches the
// naive triple loop bit for bit while the adds pipeline across rows.
// Plain IEEE mul + add (no FMA), so the result is identical to scalar code.
#if defined(__AVX2__)
inline void mm_tile_4x8(const float* __restrict a, const float* __restrict b,
                        float* __restrict c, size_t k, size_t lda, size_t ldb,
                        size_t ldc) {
    __m256 acc0 = _mm256_setzero_ps(), acc1 = _mm256_setzero_ps(),
           acc2 = _mm256_setzero_ps(), acc3 = _mm256_setzero_ps();
    for (size_t kk = 0; kk < k; ++kk) {
        const __m256 bv = _mm256_loadu_ps(b + kk * ldb);
        acc0 = _mm256_add_ps(acc0, _mm256_mul_ps(_mm256_set1_ps(a[kk]), bv));
        acc1 = _mm256_add_ps(acc1, _mm256_mul_ps(_mm256_set1_ps(a[lda + kk]), bv));
        acc2 = _mm256_add_ps(acc2, _mm256_mul_ps(_mm256_set1_ps(a[2 * lda + kk]), bv));
        acc3 = _mm256_add_ps(acc3, _mm256_mul_ps(_mm256_set1_ps(a[3 * lda + kk]), bv));
    }
    _mm256_storeu_ps(c, acc0);
    _mm256_storeu_ps(c + ldc, acc1);
    _mm256_storeu_ps(c + 2 * ldc, acc2);
    _mm256_storeu_ps(c + 3 * ldc, acc3);
}
#else
inline void mm_tile_4x8(const float* __restrict a, const float* __restrict b,
                        float* __restrict c, size_t k, size_t lda, size_t ldb,
                        size_t ldc) {
    float acc0[8] = {}, acc1[8] = {}, acc2[8] = {}, acc3[8] = {};
    for (size_t kk = 0; kk < k; ++kk) {
        const float* brow = b + kk * ldb;
        const float a0 = a[kk], a1 = a[lda + kk], a2 = a[2 * lda + kk],
                    a3 = a[3 * lda + kk];
        for (size_t j = 0; j < 8; ++j) {
            const float bj = brow[j];
            acc0[j] += a0 * bj;
            acc1[j] += a1 * bj;
            acc2[j] += a2 * bj;
            acc3[j] += a3 * bj;
        }
    }
    for (size_t j = 0; j < 8; ++j) {
        c[j] = acc0[j];
        c[ldc + j] = acc1[j];
        c[2 * ldc + j] = acc2[j];
        c[3 * ldc + j] = acc3[j];
    }
}
#endif

} // namespace detail

// c[m x n] = a[m x k] * b[k x n], accumulation strictly in k order for every
// output element (bit-identical to the naive triple loop).
// c[m x n] = a[m x k] * b[k x n] on contiguous buffers, same accumulation
// order as matmul_into; c must be zero-initialized by the caller only for
// the remainder path, so we clear it here
inline void matmul_raw(const float* a, size_t m, size_t k, const float* b,
                       size_t n, float* c) {
    std::fill(c, c + m * n, 0.0f);
    const size_t m4 = m - m % 4, n8 = n - n % 8;
    for (size_t i = 0; i < m4; i += 4)
        for (size_t j = 0; j < n8; j += 8)
            detail::mm_tile_4x8(a + i * k, b + j, c + i * n + j, k, k, n, n);
    for (size_t i = 0; i < m; ++i) {
        const size_t j0 = i < m4 ? n8 : 0;
        if (j0 == n) continue;
        const float* arow = a + i * k;
        float* crow = c + i * n;
        for (size_t kk = 0; kk < k; ++kk) {
            const float aik = arow[kk];
            const float* brow = b + kk * n;
            for (size_t j = j0; j < n; ++j) crow[j] += aik * brow[j];
        }
    }
}

// c[m x n] = a[m x k] * b[n x k]^T on contiguous buffers
inline void matmul_nt_raw(const float* a, size_t m, size_t k, const float* b,
                          size_t n, float* c, float* bt_scratch) {
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < k; ++j) bt_scratch[j * n + i] = b[i * k + j];
    matmul_raw(a, m, k, bt_scratch, n, c);
}

inline void matmul_into(const Tensor& a, const Tensor& b, Tensor& c) {
    check_2d(a, "matmul");
    check_2d(b, "matmul");
    const size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k)
        throw std::invalid_argument("matmul: inner dimensions disagree");
    c.shape.resize(2);
    c.shape[0] = m;
    c.shape[1] = n;
    c.data.resize(m * n);
    matmul_raw(a.data.data(), m, k, b.data.data(), n, c.data.data());
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    Tensor c;
    matmul_into(a, b, c);
    return c;
}


// c[m x n] = a[m x k] * b[n x k]^T; same k-ordered accumulation as matmul
// (b is transposed into a scratch buffer and fed through the tiled kernel)
inline void matmul_nt_into(const Tensor& a, const Tensor& b, Tensor& c) {
    check_2d(a, "matmul_nt");
    check_2d(b, "matmul_nt");
    if (b.cols() != a.cols())
        throw std::invalid_argument("matmul_nt: inner dimensions disagree");
    thread_local Tensor bt;
    bt.shape.resize(2);
    bt.shape[0] = b.cols();
    bt.shape[1] = b.rows();
    bt.data.resize(b.numel());
    for (size_t i = 0; i < b.rows(); ++i)
        for (size_t j = 0; j < b.cols(); ++j)
            bt.data[j * b.rows() + i] = b.data[i * b.cols() + j];
    matmul_into(a, bt, c);
}

// softmax along the last axis, max-subtracted, in place

namespace detail {

// exp approximation (classic Cephes polynomial, ~1 ulp over the float
// range); the scalar and 8-lane versions perform identical operations so
// results are bit-equal lane for lane
// clamp keeps the 2^k scale factor in normal-float range, so exp_fast
// saturates to huge-finite / tiny-positive instead of inf / 0
inline constexpr float kExpHi = 87.0f;
inline constexpr float kExpLo = -87.0f;
inline constexpr float kLog2e = 1.44269504088896341f;
inline constexpr float kExpC1 = 0.693359375f;
inline constexpr float kExpC2 = -2.12194440e-4f;
inline constexpr float kExpP0 = 1.9875691500e-4f;
inline constexpr float kExpP1 = 1.3981999507e-3f;
inline constexpr float kExpP2 = 8.3334519073e-3f;
inline constexpr float kExpP3 = 4.1665795894e-2f;
inline constexpr float kExpP4 = 1.6666665459e-1f;
inline constexpr float kExpP5 = 5.0000001201e-1f;

inline float exp_fast(float x) {
    x = std::min(std::max(x, kExpLo), kExpHi);
    float fx = std::floor(x * kLog2e + 0.5f);
    x = (x - fx * kExpC1) - fx * kExpC2;
    float z = x * x;
    float y = kExpP0;
    y = y * x + kExpP1;
    y = y * x + kExpP2;
    y = y * x + kExpP3;
    y = y * x + kExpP4;
    y = y * x + kExpP5;
    y = y * z + x + 1.0f;
    int32_t n = int32_t(fx);
    uint32_t bits = uint32_t(n + 127) << 23;
    float pow2n;
    std::memcpy(&pow2n, &bits, 4);
    return y * pow2n;
}

// tanh via exp_fast; saturates exactly to +-1 for large |x|
inline float tanh_fast(float x) {
    float e = exp_fast(2.0f * x);
    return (e - 1.0f) / (e + 1.0f);
}

#if defined(__AVX2__)
inline __m256 exp256(__m256 x) {
    x = _mm256_min_ps(_mm256_max_ps(x, _mm256_set1_ps(kExpLo)),
                      _mm256_set1_ps(kExpHi));
    __m256 fx = _mm256_floor_ps(_mm256_add_ps(
        _mm256_mul_ps(x, _mm256_set1_ps(kLog2e)), _mm256_set1_ps(0.5f)));
    x = _mm256_sub_ps(x, _mm256_mul_ps(fx, _mm256_set1_ps(kExpC1)));
    x = _mm256_sub_ps(x, _mm256_mul_ps(fx, _mm256_set1_ps(kExpC2)));
    __m256 z = _mm256_mul_ps(x, x);
    __m256 y = _mm256_set1_ps(kExpP0);
    y = _mm256_add_ps(_mm256_mul_ps(y, x), _mm256_set1_ps(kExpP1));
    y = _mm256_add_ps(_mm256_mul_ps(y, x), _mm256_set1_ps(kExpP2));
    y = _mm256_add_ps(_mm256_mul_ps(y, x), _mm256_set1_ps(kExpP3));
    y = _mm256_add_ps(_mm256_mul_ps(y, x), _mm256_set1_ps(kExpP4));
    y = _mm256_add_ps(_mm256_mul_ps(y, x), _mm256_set1_ps(kExpP5));
    y = _mm256_add_ps(_mm256_add_ps(_mm256_mul_ps(y, z), x),
                      _mm256_set1_ps(1.0f));
    __m256i n = _mm256_cvttps_epi32(fx);
    __m256i pow2n =
        _mm256_slli_epi32(_mm256_add_epi32(n, _mm256_set1_epi32(127)), 23);
    return _mm256_mul_ps(y, _mm256_castsi256_ps(pow2n));
}

inline __m256 tanh256(__m256 x) {
    __m256 one = _mm256_set1_ps(1.0f);
    __m256 e = exp256(_mm256_mul_ps(_mm256_set1_ps(2.0f), x));
    return _mm256_div_ps(_mm256_sub_ps(e, one), _mm256_add_ps(e, one));
}
#endif

} // namespace detail

inline void softmax_lastdim_inplace(Tensor& x) {
    const size_t n = x.shape.back();
    const size_t rows = x.numel() / n;
    for (size_t r = 0; r < rows; ++r) {
        float* p = x.data.data() + r * n;
        float mx = p[0];
        size_t j0 = 0;
#if defined(__AVX2__)
        if (n >= 8) {
            __m256 vm = _mm256_loadu_ps(p);
            for (j0 = 8; j0 + 8 <= n; j0 += 8)
                vm = _mm256_max_ps(vm, _mm256_loadu_ps(p + j0));
            alignas(32) float lanes[8];
            _mm256_store_ps(lanes, vm);
            for (float l : lanes) mx = std::max(mx, l);
        }
#endif
        for (size_t j = j0; j < n; ++j) mx = std::max(mx, p[j]);
        float sum = 0.0f;
        size_t j = 0;
#if defined(__AVX2__)
        if (n >= 8) {
            const __m256 vmx = _mm256_set1_ps(mx);
            __m256 vsum = _mm256_setzero_ps();
            for (; j + 8 <= n; j += 8) {
                __m256 e = detail::exp256(_mm256_sub_ps(_mm256_loadu_ps(p + j), vmx));
                _mm256_storeu_ps(p + j, e);
                vsum = _mm256_add_ps(vsum, e);
            }
            alignas(32) float lanes[8];
            _mm256_store_ps(lanes, vsum);
            for (float l : lanes) sum += l;
        }
#endif
        for (; j < n; ++j) {
            p[j] = detail::exp_fast(p[j] - mx);
            sum += p[j];
        }
        const float inv = 1.0f / sum;
        size_t k = 0;
#if defined(__AVX2__)
        const __m256 vinv = _mm256_set1_ps(inv);
        for (; k + 8 <= n; k += 8)
            _mm256_storeu_ps(p + k, _mm256_mul_ps(_mm256_loadu_ps(p + k), vinv));
#endif
        for (; k < n; ++k) p[k] *= inv;
    }
}

inline Tensor softmax_lastdim(const Tensor& x) {
    Tensor out = x;
    softmax_lastdim_inplace(out);
    return out;
}

// tanh-approximation GELU:
//   gelu(x) = 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))
inline float gelu_scalar(float x) {
    const float k = 0.7978845608028654f; // sqrt(2/pi)
    float x3 = (x * x) * x;
    float inner = k * (x + 0.044715f * x3);
    return 0.5f * x * (1.0f + detail::tanh_fast(inner));
}

#if defined(__AVX2__)
// 8-lane gelu, bit-equal to gelu_scalar per lane
inline __m256 gelu256(__m256 x) {
    const __m256 k = _mm256_set1_ps(0.7978845608028654f);
    const __m256 c = _mm256_set1_ps(0.044715f);
    __m256 x3 = _mm256_mul_ps(_mm256_mul_ps(x, x), x);
    __m256 inner = _mm256_mul_ps(k, _mm256_add_ps(x, _mm256_mul_ps(c, x3)));
    __m256 t = _mm256_add_ps(_mm256_set1_ps(1.0f), detail::tanh256(inner));
    return _mm256_mul_ps(_mm256_mul_ps(_mm256_set1_ps(0.5f), x), t);
}
#endif

inline Tensor gelu(const Tensor& x) {
    Tensor out = x;
    for (float& v : out.data) v = gelu_scalar(v);
    return out;
}

// layernorm over the last axis, writing into `out`
inline void layernorm_into(const Tensor& x, const std::vector<float>& gamma,
                           const std::vector<float>& beta, Tensor& out,
                           float eps = 1e-5f) {
    const size_t n = x.shape.back();
    if (gamma.size() != n || beta.size() != n)
        throw std::invalid_argument("layernorm: gamma/beta size mismatch");
    out.shape = x.shape;
    out.data = x.data;
    const size_t rows = x.numel() / n;
#if defined(__AVX2__)
    if (n % 8 == 0) {
        // 8-lane partial sums with a fixed reduction order keep this
        // deterministic while letting the row fit in registers
        alignas(32) float lanes[8];
        for (size_t r = 0; r < rows; ++r) {
            float* p = out.data.data() + r * n;
            __m256 vs = _mm256_setzero_ps();
            for (size_t j = 0; j < n; j += 8)
                vs = _mm256_add_ps(vs, _mm256_loadu_ps(p + j));
            _mm256_store_ps(lanes, vs);
            float mean = 0.0f;
            for (float l : lanes) mean += l;
            mean /= float(n);
            const __m256 vmean = _mm256_set1_ps(mean);
            __m256 vv = _mm256_setzero_ps();
            for (size_t j = 0; j < n; j += 8) {
                __m256 d = _mm256_sub_ps(_mm256_loadu_ps(p + j), vmean);
                vv = _mm256_add_ps(vv, _mm256_mul_ps(d, d));
            }
            _mm256_store_ps(lanes, vv);
            float var = 0.0f;
            for (float l : lanes) var += l;
            var /= float(n);
            const __m256 vinv = _mm256_set1_ps(1.0f / std::sqrt(var + eps));
            for (size_t j = 0; j < n; j += 8) {
                __m256 d = _mm256_sub_ps(_mm256_loadu_ps(p + j), vmean);
                __m256 g = _mm256_loadu_ps(gamma.data() + j);
                __m256 bt = _mm256_loadu_ps(beta.data() + j);
                _mm256_storeu_ps(
                    p + j,
                    _mm256_add_ps(_mm256_mul_ps(_mm256_mul_ps(d, vinv), g), bt));
            }
        }
        return;
    }
#endif
    for (size_t r = 0; r < rows; ++r) {
        float* p = out.data.data() + r * n;
        float mean = 0.0f;
        for (size_t j = 0; j < n; ++j) mean += p[j];
        mean /= float(n);
        float var = 0.0f;
        for (size_t j = 0; j < n; ++j) {
            float d = p[j] - mean;
            var += d * d;
        }
        var /= float(n);
        float inv = 1.0f / std::sqrt(var + eps);
        for (size_t j = 0; j < n; ++j)
            p[j] = (p[j] - mean) * inv * gamma[j] + beta[j];
    }
}

inline Tensor layernorm(const Tensor& x, const std::vector<float>& gamma,
                        const std::vector<float>& beta, float eps = 1e-5f) {
    Tensor out;
    layernorm_into(x, gamma, beta, out, eps);
    return out;
}

// concat 2-D tensors along axis 1 (columns); all must share row count
inline Tensor concat_cols(const std::vector<const Tensor*>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    const size_t m = parts[0]->rows();
    size_t n = 0;
    for (const Tensor* t : parts) {
        check_2d(*t, "concat");
        if (t->rows() != m)
            throw std::invalid_argument("concat: row counts differ");
        n += t->cols();
    }
    Tensor out({m, n});
    for (size_t i = 0; i < m; ++i) {
        size_t off = 0;
        for (const Tensor* t : parts) {
            const size_t c = t->cols();
            std::copy_n(t->data.data() + i * c, c, out.data.data() + i * n + off);
            off += c;
        }
    }
    return out;
}

inline Tensor transpose(const Tensor& x) {
    check_2d(x, "transpose");
    Tensor out({x.cols(), x.rows()});
    for (size_t i = 0; i < x.rows(); ++i)
        for (size_t j = 0; j < x.cols(); ++j) out.at(j, i) = x.at(i, j);
    return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("add: shape mismatch");
    Tensor out = a;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
    return out;
}

inline Tensor scale(const Tensor& a, float s) {
    Tensor out = a;
    for (float& v : out.data) v *= s;
    return out;
}

} // namespace evolq
