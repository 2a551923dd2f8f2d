#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <set>

#include "evolq/quantizer.hpp"
#include "evolq/rng.hpp"

using namespace evolq;

namespace {

QuantParams per_tensor(float scale, int bits, QuantScheme scheme = QuantScheme::Uniform) {
    QuantParams p;
    p.scale = {scale};
    p.bitwidth = bits;
    p.scheme = scheme;
    return p;
}

Tensor random_tensor(size_t n, Rng& rng, float spread = 1.0f) {
    Tensor t({n});
    for (float& v : t.data) v = float(rng.normal()) * spread;
    return t;
}

} // namespace

TEST_CASE("uniform codes match hand example, clipping at 4-bit range") {
    Tensor x({3}, {1.0f, -0.5f, 0.3f});
    QuantizedTensor q = quantize_uniform(x, per_tensor(0.1f, 4));
    REQUIRE(q.codes == std::vector<int32_t>{7, -5, 3});
}

TEST_CASE("8-bit code range is [-127, 127]") {
    Tensor x({2}, {1e6f, -1e6f});
    QuantizedTensor q = quantize_uniform(x, per_tensor(1.0f, 8));
    REQUIRE(q.codes == std::vector<int32_t>{127, -127});
}

TEST_CASE("zero quantizes to code zero") {
    for (int b : {3, 4, 8}) {
        Tensor x({1}, {0.0f});
        REQUIRE(quantize_uniform(x, per_tensor(0.37f, b)).codes[0] == 0);
    }
}

TEST_CASE("dequantize hand example and idempotent fake_quant") {
    QuantizedTensor q;
    q.codes = {7, -5, 3};
    q.shape = {3};
    q.params = per_tensor(0.1f, 4);
    Tensor d = dequantize(q);
    REQUIRE(d.data[0] == Catch::Approx(0.7).margin(1e-7));
    REQUIRE(d.data[1] == Catch::Approx(-0.5).margin(1e-7));
    REQUIRE(d.data[2] == Catch::Approx(0.3).margin(1e-7));

    Rng rng(1);
    Tensor x = random_tensor(257, rng);
    QuantParams p = per_tensor(0.05f, 4);
    Tensor once = fake_quant(x, p);
    Tensor twice = fake_quant(once, p);
    REQUIRE(std::memcmp(once.data.data(), twice.data.data(), once.data.size() * 4) == 0);
}

TEST_CASE("round-trip and clip bounds on 1e4 random vectors") {
    Rng rng(42);
    for (int b : {3, 4, 8}) {
        const float delta = 0.01f;
        const float range = delta * float(uniform_qmax(b));
        QuantParams p = per_tensor(delta, b);
        for (int rep = 0; rep < 100; ++rep) {
            Tensor x = random_tensor(100, rng, range);
            Tensor fq = fake_quant(x, p);
            for (size_t i = 0; i < x.data.size(); ++i) {
                REQUIRE(std::fabs(fq.data[i]) <= range + 1e-6f);
                if (std::fabs(x.data[i]) <= range)
                    REQUIRE(std::fabs(x.data[i] - fq.data[i]) <= delta / 2 + 1e-6f);
            }
        }
    }
}

TEST_CASE("quantize_uniform is elementwise monotone") {
    Rng rng(4);
    QuantParams p = per_tensor(0.07f, 4);
    for (int rep = 0; rep < 2000; ++rep) {
        float a = float(rng.uniform(-1.0, 1.0));
        float b = float(rng.uniform(-1.0, 1.0));
        if (a > b) std::swap(a, b);
        Tensor t({2}, {a, b});
        QuantizedTensor q = quantize_uniform(t, p);
        REQUIRE(q.codes[0] <= q.codes[1]);
    }
}

TEST_CASE("distinct code counts bounded by bitwidth") {
    Rng rng(8);
    for (int b : {3, 4, 8}) {
        Tensor x = random_tensor(20000, rng, 5.0f);
        QuantizedTensor qu = quantize_uniform(x, per_tensor(0.01f, b));
        std::set<int32_t> cu(qu.codes.begin(), qu.codes.end());
        REQUIRE(cu.size() <= size_t((1 << b) - 1));

        for (float& v : x.data) v = std::fabs(v);
        QuantizedTensor ql =
            quantize_log2(x, per_tensor(1.0f, b, QuantScheme::Log2));
        std::set<int32_t> cl(ql.codes.begin(), ql.codes.end());
        REQUIRE(cl.size() <= size_t(1 << b));
    }
}

TEST_CASE("log2 hand examples") {
    const float s = 0.375f;
    QuantParams p = per_tensor(s, 8, QuantScheme::Log2);
    Tensor x({3}, {s, s / 2, 0.0f});
    QuantizedTensor q = quantize_log2(x, p);
    REQUIRE(q.codes[0] == 0);
    REQUIRE(q.codes[1] == 1);
    REQUIRE(q.codes[2] == 255);
    Tensor d = dequantize(q);
    REQUIRE(d.data[0] == s);
    REQUIRE(d.data[1] == s / 2); // power of two, exact
}

TEST_CASE("log2 negative input is a domain error") {
    Tensor x({1}, {-0.5f});
    REQUIRE_THROWS_AS(quantize_log2(x, per_tensor(1.0f, 4, QuantScheme::Log2)),
                      std::domain_error);
}

TEST_CASE("log2 rounding matches double-precision oracle") {
    Rng rng(15);
    for (int rep = 0; rep < 20000; ++rep) {
        float t = float(std::exp(rng.uniform(-30.0, 0.0)));
        int32_t got = log2_code_of_ratio(t);
        int32_t want = int32_t(std::lround(-std::log2(double(t))));
        REQUIRE(got == want);
    }
}

TEST_CASE("minmax scale hand example and degenerate channel") {
    Tensor x({2}, {-2.0f, 1.0f});
    QuantParams p = init_scale_minmax(x, 4);
    REQUIRE(p.scale[0] == Catch::Approx(2.0 / 7.0).margin(1e-7));

    Tensor z({3}, {0, 0, 0});
    QuantParams pz = init_scale_minmax(z, 4);
    REQUIRE(pz.scale[0] == 1.0f);
    REQUIRE(quantize_uniform(z, pz).codes == std::vector<int32_t>{0, 0, 0});
}

TEST_CASE("minmax codes attain but never exceed the clip bound") {
    Rng rng(23);
    for (int b : {3, 4, 8}) {
        Tensor x = random_tensor(4096, rng);
        QuantizedTensor q = quantize_uniform(x, init_scale_minmax(x, b));
        int32_t mx = 0;
        for (int32_t c : q.codes) mx = std::max(mx, std::abs(c));
        REQUIRE(mx == uniform_qmax(b));
    }
}

TEST_CASE("per-channel minmax applies scales along the declared axis") {
    Tensor x({2, 3}, {1, 2, 3, 10, 20, 30});
    QuantParams p = init_scale_minmax(x, 8, Granularity::PerChannel, 0);
    REQUIRE(p.scale.size() == 2);
    REQUIRE(p.scale[0] == Catch::Approx(3.0 / 127.0));
    REQUIRE(p.scale[1] == Catch::Approx(30.0 / 127.0));
    QuantizedTensor q = quantize_uniform(x, p);
    REQUIRE(q.codes[2] == 127);
    REQUIRE(q.codes[5] == 127);
}

TEST_CASE("percentile: pct=100 equals minmax; constant tensor pct-independent") {
    Rng rng(31);
    Tensor x = random_tensor(999, rng);
    REQUIRE(init_scale_percentile(x, 4, 100.0).scale[0] ==
            init_scale_minmax(x, 4).scale[0]);

    Tensor c({10}, std::vector<float>(10, 0.7f));
    REQUIRE(init_scale_percentile(c, 4, 50.0).scale[0] ==
            init_scale_percentile(c, 4, 99.0).scale[0]);
    REQUIRE_THROWS_AS(init_scale_percentile(x, 4, 0.0), std::invalid_argument);
    REQUIRE_THROWS_AS(init_scale_percentile(x, 4, 101.0), std::invalid_argument);
}

TEST_CASE("percentile clips a constructed outlier") {
    Rng rng(6);
    Tensor x({1000});
    for (float& v : x.data) v = float(rng.uniform(-1.0, 1.0));
    x.data[500] = 100.0f;
    QuantParams p = init_scale_percentile(x, 4, 99.0);
    REQUIRE(p.scale[0] <= 1.0f / 7.0f + 1e-3f);
    QuantizedTensor q = quantize_uniform(x, p);
    REQUIRE(q.codes[500] == 7); // outlier clips to the max code
}

TEST_CASE("omse returns minmax scale when input is exactly representable") {
    Tensor x({4}, {-0.7f, 0.7f, 0.3f, -0.1f}); // multiples of 0.1 = delta_minmax
    QuantParams mm = init_scale_minmax(x, 4);
    QuantParams om = init_scale_omse(x, 4);
    REQUIRE(om.scale[0] == mm.scale[0]);
    REQUIRE(quant_mse(x, om) == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("omse never loses to minmax, matches fine-grid oracle") {
    Rng rng(77);
    for (int rep = 0; rep < 10; ++rep) {
        Tensor x = random_tensor(400, rng);
        // heavy tail
        for (size_t i = 0; i < 8; ++i) x.data[i] *= 10.0f;
        QuantParams mm = init_scale_minmax(x, 4);
        QuantParams om = init_scale_omse(x, 4);
        REQUIRE(quant_mse(x, om) <= quant_mse(x, mm) + 1e-12);

        // 10,000-point fine-grid oracle over the same span
        const float d0 = mm.scale[0];
        float best_s = d0;
        double best_e = quant_mse(x, mm);
        QuantParams trial = mm;
        for (int g = 0; g < 10000; ++g) {
            trial.scale[0] = (0.2f + 1.0f * float(g) / 9999.0f) * d0;
            double e = quant_mse(x, trial);
            if (e < best_e) {
                best_e = e;
                best_s = trial.scale[0];
            }
        }
        const float step = d0 / 99.0f; // coarse-grid spacing
        REQUIRE(std::fabs(om.scale[0] - best_s) <= step + 1e-7f);
    }
}

TEST_CASE("bias correction hand cases") {
    // rank-1: W-What = [[0.1]], mean input [2.0] -> shift +0.2
    Tensor w({1, 1}, {0.5f});
    Tensor wq({1, 1}, {0.4f});
    Tensor calib({2, 1}, {1.0f, 3.0f});
    auto nb = bias_correct(w, wq, {1.0f}, calib);
    REQUIRE(nb[0] == Catch::Approx(1.2).margin(1e-6));

    // What == W -> unchanged
    auto same = bias_correct(w, w, {1.0f}, calib);
    REQUIRE(same[0] == 1.0f);

    // zero-mean calibration -> unchanged
    Tensor zc({2, 1}, {-3.0f, 3.0f});
    auto zb = bias_correct(w, wq, {1.0f}, zc);
    REQUIRE(zb[0] == 1.0f);

    Tensor empty({0, 1});
    REQUIRE_THROWS_AS(bias_correct(w, wq, {1.0f}, empty), std::invalid_argument);
}

TEST_CASE("fake_quant_inplace is bit-equal to quantize/dequantize") {
    Rng rng(55);
    for (int b : {3, 4, 8}) {
        Tensor x = random_tensor(1003, rng);
        QuantParams pu = per_tensor(0.02f, b);
        Tensor ref = fake_quant(x, pu);
        Tensor got = x;
        fake_quant_inplace(got.data.data(), got.data.size(), pu);
        REQUIRE(std::memcmp(ref.data.data(), got.data.data(), ref.data.size() * 4) == 0);

        for (float& v : x.data) v = std::fabs(v);
        QuantParams pl = per_tensor(0.8f, b, QuantScheme::Log2);
        Tensor refl = fake_quant(x, pl);
        Tensor gotl = x;
        fake_quant_inplace(gotl.data.data(), gotl.data.size(), pl);
        REQUIRE(std::memcmp(refl.data.data(), gotl.data.data(), refl.data.size() * 4) == 0);
    }
}

TEST_CASE("bitwidth 32 is an exact pass-through") {
    Rng rng(60);
    Tensor x = random_tensor(64, rng);
    QuantParams p = per_tensor(0.1f, 32);
    Tensor fq = fake_quant(x, p);
    REQUIRE(std::memcmp(x.data.data(), fq.data.data(), x.data.size() * 4) == 0);
}

TEST_CASE("non-positive scale rejected") {
    QuantParams p = per_tensor(0.0f, 4);
    REQUIRE_THROWS_AS(p.validate(), std::invalid_argument);
    Tensor x({1}, {1.0f});
    REQUIRE_THROWS_AS(quantize_uniform(x, p), std::invalid_argument);
}
