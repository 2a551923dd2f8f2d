#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "evolq/rng.hpp"

namespace evolq {

struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

// ---- little-endian byte IO ----------------------------------------------

inline void put_u8(std::string& out, uint8_t v) { out.push_back(char(v)); }
inline void put_u16(std::string& out, uint16_t v) {
    out.push_back(char(v & 0xff));
    out.push_back(char((v >> 8) & 0xff));
}
inline void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}
inline void put_f32(std::string& out, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

class ByteReader {
public:
    ByteReader(const std::string& buf, std::string name)
        : buf_(buf), name_(std::move(name)) {}

    uint8_t u8() { return uint8_t(take(1)[0]); }
    uint16_t u16() {
        const char* p = take(2);
        return uint16_t(uint8_t(p[0])) | uint16_t(uint8_t(p[1])) << 8;
    }
    uint32_t u32() {
        const char* p = take(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= uint32_t(uint8_t(p[i])) << (8 * i);
        return v;
    }
    uint64_t u64() {
        const char* p = take(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= uint64_t(uint8_t(p[i])) << (8 * i);
        return v;
    }
    float f32() {
        uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    std::string bytes(size_t n) { return std::string(take(n), n); }
    size_t offset() const { return pos_; }
    size_t remaining() const { return buf_.size() - pos_; }

private:
    const char* take(size_t n) {
        if (pos_ + n > buf_.size())
            throw FormatError(name_ + ": truncated at offset " + std::to_string(pos_));
        const char* p = buf_.data() + pos_;
        pos_ += n;
        return p;
    }
    const std::string& buf_;
    std::string name_;
    size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
    return buf;
}

inline void write_file(const std::string& path, const std::string& buf) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot open " + path + " for writing");
    f.write(buf.data(), std::streamsize(buf.size()));
    if (!f) throw FormatError("short write to " + path);
}

// ---- dataset -------------------------------------------------------------

// Pre-tokenized embedding dataset: count samples of T tokens x d dims,
// optional u16 class labels. EVQD container, little-endian throughout.
struct Dataset {
    uint32_t count = 0;
    uint32_t tokens = 0;
    uint32_t dim = 0;
    std::vector<float> data;      // count * tokens * dim
    std::vector<uint16_t> labels; // empty or length == count

    bool has_labels() const { return !labels.empty(); }
    const float* sample(size_t i) const { return data.data() + i * tokens * dim; }
    size_t sample_size() const { return size_t(tokens) * dim; }
};

inline constexpr char kDatasetMagic[4] = {'E', 'V', 'Q', 'D'};

inline std::string serialize_dataset(const Dataset& ds) {
    std::string out;
    out.append(kDatasetMagic, 4);
    put_u8(out, 1);
    put_u32(out, ds.count);
    put_u32(out, ds.tokens);
    put_u32(out, ds.dim);
    put_u8(out, ds.has_labels() ? 1 : 0);
    out.reserve(out.size() + ds.data.size() * 4 + ds.labels.size() * 2);
    for (float v : ds.data) put_f32(out, v);
    for (uint16_t l : ds.labels) put_u16(out, l);
    return out;
}

inline Dataset parse_dataset(const std::string& buf, const std::string& name) {
    ByteReader r(buf, name);
    if (r.bytes(4) != std::string(kDatasetMagic, 4))
        throw FormatError(name + ": bad magic at offset 0");
    uint8_t version = r.u8();
    if (version != 1)
        throw FormatError(name + ": unsupported version " + std::to_string(version));
    Dataset ds;
    ds.count = r.u32();
    ds.tokens = r.u32();
    ds.dim = r.u32();
    uint8_t has_labels = r.u8();
    size_t n = size_t(ds.count) * ds.tokens * ds.dim;
    ds.data.resize(n);
    for (size_t i = 0; i < n; ++i) ds.data[i] = r.f32();
    if (has_labels) {
        ds.labels.resize(ds.count);
        for (uint32_t i = 0; i < ds.count; ++i) ds.labels[i] = r.u16();
    }
    if (r.remaining() != 0)
        throw FormatError(name + ": trailing bytes at offset " +
                          std::to_string(r.offset()));
    return ds;
}

inline void save_dataset(const Dataset& ds, const std::string& path) {
    write_file(path, serialize_dataset(ds));
}

inline Dataset load_dataset(const std::string& path) {
    return parse_dataset(read_file(path), path);
}

// Class-conditional Gaussian token embeddings: one random mean per class,
// samples = mean + noise / separation. Labels are balanced round-robin.
inline Dataset synth_dataset(uint32_t count, uint32_t tokens, uint32_t dim,
                             uint32_t classes, uint64_t seed,
                             double class_separation = 4.0) {
    if (count < 1) throw std::invalid_argument("synth_dataset: count < 1");
    if (classes < 1) throw std::invalid_argument("synth_dataset: classes < 1");
    Rng rng(seed);
    const size_t ss = size_t(tokens) * dim;
    std::vector<float> means(size_t(classes) * ss);
    for (float& v : means) v = float(rng.normal());
    Dataset ds;
    ds.count = count;
    ds.tokens = tokens;
    ds.dim = dim;
    ds.data.resize(size_t(count) * ss);
    ds.labels.resize(count);
    const float noise = float(1.0 / class_separation);
    for (uint32_t i = 0; i < count; ++i) {
        uint16_t cls = uint16_t(i % classes);
        ds.labels[i] = cls;
        const float* mean = means.data() + size_t(cls) * ss;
        float* dst = ds.data.data() + size_t(i) * ss;
        for (size_t j = 0; j < ss; ++j)
            dst[j] = mean[j] + noise * float(rng.normal());
    }
    return ds;
}

// ---- deterministic batch iteration ----------------------------------------

struct BatchPlan {
    uint32_t batch_size = 32;
    uint64_t shuffle_seed = 0;
    bool drop_ragged = true;
};

// Batches are index lists; order is a pure function of (seed, count, batch).
inline std::vector<std::vector<uint32_t>> iterate(uint32_t count, const BatchPlan& plan) {
    if (plan.batch_size < 1) throw std::invalid_argument("iterate: batch size < 1");
    std::vector<uint32_t> order(count);
    for (uint32_t i = 0; i < count; ++i) order[i] = i;
    Rng rng(plan.shuffle_seed);
    for (uint32_t i = count; i > 1; --i)
        std::swap(order[i - 1], order[rng.below(i)]);
    std::vector<std::vector<uint32_t>> batches;
    for (uint32_t start = 0; start < count; start += plan.batch_size) {
        uint32_t end = std::min(count, start + plan.batch_size);
        if (plan.drop_ragged && end - start < plan.batch_size) break;
        batches.emplace_back(order.begin() + start, order.begin() + end);
    }
    return batches;
}

} // namespace evolq
