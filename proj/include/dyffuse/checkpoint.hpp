// Copyright (c) 2026 The dyffuse authors
// SPDX-License-Identifier: Apache-2.0
//
// "DYFP" parameter checkpoints.
//
//   magic      "DYFP" (4 bytes)
//   version    u32 (= 1)
//   count      u64
//   count x {
//     name     u64 byte length + UTF-8 bytes
//     rank     u64
//     dims     rank x u64
//     payload  prod(dims) x f64
//   }
//
// All integers and floats are little-endian.

#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "dyffuse/autodiff.hpp"

namespace dyffuse {

inline constexpr std::uint32_t kParamFormatVersion = 1;

struct NamedTensor {
    std::string name;
    Tensor value;
};

inline void write_params(std::ostream& out, std::span<const Parameter* const> params) {
    out.write("DYFP", 4);
    io::put<std::uint32_t>(out, kParamFormatVersion);
    io::put<std::uint64_t>(out, params.size());
    for (const Parameter* p : params) {
        io::put_string(out, p->name);
        io::put<std::uint64_t>(out, p->value.rank());
        for (std::size_t d : p->value.shape()) io::put<std::uint64_t>(out, d);
        for (double v : p->value.data()) io::put<double>(out, v);
    }
}

inline std::vector<NamedTensor> read_params(std::istream& in) {
    io::expect_magic(in, "DYFP");
    const auto version = io::get<std::uint32_t>(in);
    if (version != kParamFormatVersion) {
        throw FormatError("DYFP: unsupported version " + std::to_string(version));
    }
    const auto count = io::get<std::uint64_t>(in);
    std::vector<NamedTensor> out;
    for (std::uint64_t k = 0; k < count; ++k) {
        NamedTensor nt;
        nt.name = io::get_string(in);
        const auto rank = io::get<std::uint64_t>(in);
        if (rank > 16) throw FormatError("DYFP: implausible rank for " + nt.name);
        Shape shape(rank);
        for (auto& d : shape) d = io::get<std::uint64_t>(in);
        std::vector<double> data(shape_numel(shape));
        for (double& v : data) v = io::get<double>(in);
        nt.value = Tensor(std::move(shape), std::move(data));
        out.push_back(std::move(nt));
    }
    return out;
}

/// Copies checkpoint values into `params` by name; every parameter must be
/// present with a matching shape.
inline void load_into(std::span<Parameter* const> params, const std::vector<NamedTensor>& stored) {
    std::map<std::string, const Tensor*> by_name;
    for (const auto& nt : stored) by_name[nt.name] = &nt.value;
    for (Parameter* p : params) {
        auto it = by_name.find(p->name);
        if (it == by_name.end()) throw FormatError("checkpoint is missing parameter " + p->name);
        if (it->second->shape() != p->value.shape()) {
            throw ShapeError("checkpoint parameter " + p->name + " has shape " +
                             shape_str(it->second->shape()) + ", model expects " +
                             shape_str(p->value.shape()));
        }
        p->value = *it->second;
    }
}

inline void save_params_file(const std::filesystem::path& path,
                             std::span<const Parameter* const> params) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open " + path.string() + " for writing");
    write_params(out, params);
}

inline std::vector<NamedTensor> load_params_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    return read_params(in);
}

/// FNV-1a over the serialized checkpoint bytes.
inline std::uint64_t params_hash(std::span<const Parameter* const> params) {
    std::ostringstream buf(std::ios::binary);
    write_params(buf, params);
    return fnv1a(buf.str());
}

}  // namespace dyffuse
