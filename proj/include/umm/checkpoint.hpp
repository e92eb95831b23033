// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "umm/error.hpp"
#include "umm/model.hpp"
#include "umm/vocab.hpp"

namespace umm {

// ---------------------------------------------------------------------------
// Checkpoint: a single little-endian binary file.
//
//   magic "UMMCKPT\0" | u32 version | model config | world config |
//   vocab word table + system prefix | metadata (key/value strings) |
//   tensor table (name, shape, offset) | flat f64 payload
//
// Load of a round-tripped file reproduces every parameter bit-exactly.
// ---------------------------------------------------------------------------

static_assert(std::endian::native == std::endian::little, "checkpoint format is little-endian");

inline constexpr char kCheckpointMagic[8] = {'U', 'M', 'M', 'C', 'K', 'P', 'T', '\0'};
inline constexpr uint32_t kCheckpointVersion = 1;

using Metadata = std::map<std::string, std::string>;

namespace detail {

inline void write_bytes(std::ostream& out, const void* p, size_t n) {
    out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    require(out.good(), "io", "checkpoint write failed");
}

inline void read_bytes(std::istream& in, void* p, size_t n) {
    in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    require(in.gcount() == static_cast<std::streamsize>(n), "format",
            "checkpoint truncated or unreadable");
}

inline void write_u32(std::ostream& out, uint32_t v) { write_bytes(out, &v, sizeof v); }
inline void write_u64(std::ostream& out, uint64_t v) { write_bytes(out, &v, sizeof v); }

inline uint32_t read_u32(std::istream& in) {
    uint32_t v = 0;
    read_bytes(in, &v, sizeof v);
    return v;
}
inline uint64_t read_u64(std::istream& in) {
    uint64_t v = 0;
    read_bytes(in, &v, sizeof v);
    return v;
}

inline void write_string(std::ostream& out, const std::string& s) {
    write_u32(out, static_cast<uint32_t>(s.size()));
    write_bytes(out, s.data(), s.size());
}

inline std::string read_string(std::istream& in) {
    const uint32_t n = read_u32(in);
    require(n <= (1u << 20), "format", "checkpoint string field too large");
    std::string s(n, '\0');
    if (n > 0) {
        read_bytes(in, s.data(), n);
    }
    return s;
}

inline void write_string_list(std::ostream& out, const std::vector<std::string>& list) {
    write_u32(out, static_cast<uint32_t>(list.size()));
    for (const auto& s : list) {
        write_string(out, s);
    }
}

inline std::vector<std::string> read_string_list(std::istream& in) {
    const uint32_t n = read_u32(in);
    require(n <= (1u << 16), "format", "checkpoint string list too large");
    std::vector<std::string> list;
    list.reserve(n);
    for (uint32_t i = 0; i < n; ++i) {
        list.push_back(read_string(in));
    }
    return list;
}

} // namespace detail

inline void save_checkpoint(const PolicyParams& params, const Vocab& vocab, const Metadata& metadata,
                            const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(out.is_open(), "io", "cannot open checkpoint for writing: " + path);

    detail::write_bytes(out, kCheckpointMagic, sizeof kCheckpointMagic);
    detail::write_u32(out, kCheckpointVersion);

    const ModelConfig& cfg = params.config;
    detail::write_u32(out, static_cast<uint32_t>(cfg.vocab_size));
    detail::write_u32(out, static_cast<uint32_t>(cfg.context));
    detail::write_u32(out, static_cast<uint32_t>(cfg.d_model));
    detail::write_u32(out, static_cast<uint32_t>(cfg.n_heads));
    detail::write_u32(out, static_cast<uint32_t>(cfg.n_layers));

    const WorldConfig& world = vocab.world;
    detail::write_string_list(out, world.shapes);
    detail::write_string_list(out, world.colors);
    detail::write_u32(out, static_cast<uint32_t>(world.grid_size));
    detail::write_u32(out, static_cast<uint32_t>(world.max_count));
    detail::write_string_list(out, vocab.words);
    detail::write_u32(out, static_cast<uint32_t>(vocab.system_prefix.size()));
    for (int id : vocab.system_prefix) {
        detail::write_u32(out, static_cast<uint32_t>(id));
    }

    detail::write_u32(out, static_cast<uint32_t>(metadata.size()));
    for (const auto& [key, value] : metadata) {
        detail::write_string(out, key);
        detail::write_string(out, value);
    }

    const ParamLayout layout(cfg);
    detail::write_u32(out, static_cast<uint32_t>(layout.tensors.size()));
    for (const TensorSpec& t : layout.tensors) {
        detail::write_string(out, t.name);
        detail::write_u32(out, static_cast<uint32_t>(t.shape.size()));
        for (int dim : t.shape) {
            detail::write_u64(out, static_cast<uint64_t>(dim));
        }
        detail::write_u64(out, t.offset);
    }
    detail::write_u64(out, params.data.size());
    detail::write_bytes(out, params.data.data(), params.data.size() * sizeof(double));
    out.flush();
    require(out.good(), "io", "checkpoint write failed: " + path);
}

struct Checkpoint {
    PolicyParams params;
    Vocab vocab;
    Metadata metadata;
};

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.is_open(), "io", "cannot open checkpoint: " + path);

    char magic[8] = {};
    detail::read_bytes(in, magic, sizeof magic);
    require(std::memcmp(magic, kCheckpointMagic, sizeof magic) == 0, "format",
            "not a checkpoint file: " + path);
    const uint32_t version = detail::read_u32(in);
    require(version == kCheckpointVersion, "format",
            "unsupported checkpoint version " + std::to_string(version));

    ModelConfig cfg;
    cfg.vocab_size = static_cast<int>(detail::read_u32(in));
    cfg.context = static_cast<int>(detail::read_u32(in));
    cfg.d_model = static_cast<int>(detail::read_u32(in));
    cfg.n_heads = static_cast<int>(detail::read_u32(in));
    cfg.n_layers = static_cast<int>(detail::read_u32(in));
    cfg.validate();

    WorldConfig world;
    world.shapes = detail::read_string_list(in);
    world.colors = detail::read_string_list(in);
    world.grid_size = static_cast<int>(detail::read_u32(in));
    world.max_count = static_cast<int>(detail::read_u32(in));

    Checkpoint ckpt;
    ckpt.vocab = build_vocab(world);
    const auto words = detail::read_string_list(in);
    require(words == ckpt.vocab.words, "format", "checkpoint vocabulary does not match its world");
    require(ckpt.vocab.size == cfg.vocab_size, "format", "checkpoint vocab/model size mismatch");
    const uint32_t prefix_len = detail::read_u32(in);
    require(prefix_len <= 64, "format", "system prefix too long");
    SystemPrefix prefix;
    for (uint32_t i = 0; i < prefix_len; ++i) {
        prefix.push_back(static_cast<int>(detail::read_u32(in)));
    }
    ckpt.vocab.system_prefix = prefix;

    const uint32_t n_meta = detail::read_u32(in);
    require(n_meta <= (1u << 16), "format", "metadata table too large");
    for (uint32_t i = 0; i < n_meta; ++i) {
        const std::string key = detail::read_string(in);
        ckpt.metadata[key] = detail::read_string(in);
    }

    const ParamLayout layout(cfg);
    const uint32_t n_tensors = detail::read_u32(in);
    require(n_tensors == layout.tensors.size(), "format", "checkpoint tensor table size mismatch");
    for (const TensorSpec& expect : layout.tensors) {
        const std::string name = detail::read_string(in);
        require(name == expect.name, "format", "unexpected tensor in checkpoint: " + name);
        const uint32_t ndim = detail::read_u32(in);
        require(ndim == expect.shape.size(), "format", "tensor rank mismatch: " + name);
        for (int dim : expect.shape) {
            require(detail::read_u64(in) == static_cast<uint64_t>(dim), "format",
                    "tensor shape mismatch: " + name);
        }
        require(detail::read_u64(in) == expect.offset, "format", "tensor offset mismatch: " + name);
    }
    const uint64_t payload = detail::read_u64(in);
    require(payload == layout.total, "format", "checkpoint payload size mismatch");
    ckpt.params = PolicyParams(cfg);
    detail::read_bytes(in, ckpt.params.data.data(), payload * sizeof(double));
    return ckpt;
}

} // namespace umm
