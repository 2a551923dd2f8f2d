#pragma once

#include <map>
#include <string>
#include <vector>

#include "evolq/data.hpp"
#include "evolq/model.hpp"

namespace evolq {

// EVQM model container: magic, version byte, config integers, named f32
// tensor records (name, dtype, shape, offset into the payload), then raw
// little-endian payloads. Scale vectors are stored as named records too,
// so a search result round-trips completely.
inline constexpr char kModelMagic[4] = {'E', 'V', 'Q', 'M'};

namespace detail {

struct Record {
    std::string name;
    std::vector<uint32_t> dims;
    const float* data;
    size_t count;
};

inline void add_record(std::vector<Record>& recs, const std::string& name,
                       const std::vector<float>& v) {
    recs.push_back({name, {uint32_t(v.size())}, v.data(), v.size()});
}

inline void add_record(std::vector<Record>& recs, const std::string& name,
                       const Tensor& t) {
    std::vector<uint32_t> dims;
    for (size_t d : t.shape) dims.push_back(uint32_t(d));
    recs.push_back({name, dims, t.data.data(), t.data.size()});
}

inline std::vector<Record> collect_records(const Model& m) {
    std::vector<Record> recs;
    for (size_t b = 0; b < m.blocks.size(); ++b) {
        const ViTBlock& blk = m.blocks[b];
        const std::string pre = "block" + std::to_string(b) + ".";
        for (uint32_t i = 0; i < blk.n_heads(); ++i) {
            const std::string s = std::to_string(i);
            add_record(recs, pre + "wq" + s, blk.wq[i]);
            add_record(recs, pre + "wk" + s, blk.wk[i]);
            add_record(recs, pre + "wv" + s, blk.wv[i]);
        }
        add_record(recs, pre + "wo", blk.wo);
        add_record(recs, pre + "fc1_w", blk.fc1_w);
        add_record(recs, pre + "fc2_w", blk.fc2_w);
        add_record(recs, pre + "fc1_b", blk.fc1_b);
        add_record(recs, pre + "fc2_b", blk.fc2_b);
        add_record(recs, pre + "ln1_g", blk.ln1_g);
        add_record(recs, pre + "ln1_b", blk.ln1_b);
        add_record(recs, pre + "ln2_g", blk.ln2_g);
        add_record(recs, pre + "ln2_b", blk.ln2_b);
        for (const QuantPoint& p : blk.points)
            add_record(recs, pre + "scale." + p.name, p.params.scale);
    }
    const Model& mm = m;
    add_record(recs, "head.w", mm.head_w);
    add_record(recs, "head.b", mm.head_b);
    return recs;
}

} // namespace detail

inline std::string serialize_model(const Model& m) {
    auto recs = detail::collect_records(m);
    std::string out;
    out.append(kModelMagic, 4);
    put_u8(out, 1);
    put_u32(out, m.config.embed_dim);
    put_u32(out, m.config.heads);
    put_u32(out, m.config.blocks);
    put_u32(out, m.config.tokens);
    put_u32(out, m.config.classes);
    put_u32(out, m.config.mlp_ratio);
    put_u32(out, uint32_t(m.config.weight_bits));
    put_u32(out, uint32_t(m.config.activation_bits));
    put_u32(out, uint32_t(recs.size()));
    uint64_t offset = 0;
    for (const auto& r : recs) {
        put_u16(out, uint16_t(r.name.size()));
        out.append(r.name);
        put_u8(out, 0); // dtype f32
        put_u8(out, uint8_t(r.dims.size()));
        for (uint32_t d : r.dims) put_u32(out, d);
        put_u64(out, offset);
        offset += r.count * 4;
    }
    put_u64(out, offset);
    for (const auto& r : recs)
        for (size_t i = 0; i < r.count; ++i) put_f32(out, r.data[i]);
    return out;
}

inline Model parse_model(const std::string& buf, const std::string& name) {
    ByteReader r(buf, name);
    if (r.bytes(4) != std::string(kModelMagic, 4))
        throw FormatError(name + ": bad magic at offset 0");
    if (r.u8() != 1) throw FormatError(name + ": unsupported version");
    ViTConfig cfg;
    cfg.embed_dim = r.u32();
    cfg.heads = r.u32();
    cfg.blocks = r.u32();
    cfg.tokens = r.u32();
    cfg.classes = r.u32();
    cfg.mlp_ratio = r.u32();
    cfg.weight_bits = int(r.u32());
    cfg.activation_bits = int(r.u32());
    cfg.validate();
    uint32_t nrecs = r.u32();
    struct Rec {
        std::vector<uint32_t> dims;
        uint64_t offset;
    };
    std::map<std::string, Rec> recs;
    for (uint32_t i = 0; i < nrecs; ++i) {
        uint16_t nl = r.u16();
        std::string rn = r.bytes(nl);
        if (r.u8() != 0) throw FormatError(name + ": unsupported dtype");
        uint8_t nd = r.u8();
        Rec rec;
        for (uint8_t d = 0; d < nd; ++d) rec.dims.push_back(r.u32());
        rec.offset = r.u64();
        recs[rn] = rec;
    }
    uint64_t payload_size = r.u64();
    std::string payload = r.bytes(payload_size);
    if (r.remaining() != 0)
        throw FormatError(name + ": trailing bytes at offset " +
                          std::to_string(r.offset()));
    auto read_floats = [&](const std::string& rn) {
        auto it = recs.find(rn);
        if (it == recs.end()) throw FormatError(name + ": missing record " + rn);
        size_t count = 1;
        for (uint32_t d : it->second.dims) count *= d;
        if (it->second.offset + count * 4 > payload.size())
            throw FormatError(name + ": record " + rn + " out of bounds");
        std::vector<float> v(count);
        for (size_t i = 0; i < count; ++i) {
            uint32_t bits = 0;
            const char* p = payload.data() + it->second.offset + i * 4;
            for (int bi = 0; bi < 4; ++bi)
                bits |= uint32_t(uint8_t(p[bi])) << (8 * bi);
            std::memcpy(&v[i], &bits, 4);
        }
        return std::pair(it->second.dims, std::move(v));
    };
    auto read_tensor = [&](const std::string& rn) {
        auto [dims, v] = read_floats(rn);
        std::vector<size_t> shape(dims.begin(), dims.end());
        return Tensor(shape, std::move(v));
    };
    auto read_vec = [&](const std::string& rn) { return read_floats(rn).second; };

    Model m;
    m.config = cfg;
    m.blocks.resize(cfg.blocks);
    for (uint32_t b = 0; b < cfg.blocks; ++b) {
        ViTBlock& blk = m.blocks[b];
        const std::string pre = "block" + std::to_string(b) + ".";
        blk.wq.resize(cfg.heads);
        blk.wk.resize(cfg.heads);
        blk.wv.resize(cfg.heads);
        for (uint32_t i = 0; i < cfg.heads; ++i) {
            const std::string s = std::to_string(i);
            blk.wq[i] = read_tensor(pre + "wq" + s);
            blk.wk[i] = read_tensor(pre + "wk" + s);
            blk.wv[i] = read_tensor(pre + "wv" + s);
        }
        blk.wo = read_tensor(pre + "wo");
        blk.fc1_w = read_tensor(pre + "fc1_w");
        blk.fc2_w = read_tensor(pre + "fc2_w");
        blk.fc1_b = read_vec(pre + "fc1_b");
        blk.fc2_b = read_vec(pre + "fc2_b");
        blk.ln1_g = read_vec(pre + "ln1_g");
        blk.ln1_b = read_vec(pre + "ln1_b");
        blk.ln2_g = read_vec(pre + "ln2_g");
        blk.ln2_b = read_vec(pre + "ln2_b");
        blk.points = make_points(cfg);
        for (QuantPoint& p : blk.points) {
            auto v = read_vec(pre + "scale." + p.name);
            if (v.size() != p.params.scale.size())
                throw FormatError(name + ": scale length mismatch for " + p.name);
            p.params.scale = std::move(v);
        }
    }
    m.head_w = read_tensor("head.w");
    m.head_b = read_vec("head.b");
    return m;
}

inline void save_model(const Model& m, const std::string& path) {
    write_file(path, serialize_model(m));
}

inline Model load_model(const std::string& path) {
    return parse_model(read_file(path), path);
}

// FNV-1a over the serialized container; used for restore checks and manifests
inline uint64_t fnv1a64(const std::string& bytes) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (char c : bytes) {
        h ^= uint8_t(c);
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t model_hash(const Model& m) { return fnv1a64(serialize_model(m)); }

} // namespace evolq
