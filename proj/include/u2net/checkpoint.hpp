#pragma once

// Checkpoint container:
//   "U2CKPT1\n" | u64 index length | UTF-8 JSON index | payload
// The index maps tensor names to {offset, shape, dtype}; offsets are relative
// to the first payload byte. Payloads are little-endian IEEE-754.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include <json.hpp>

#include "io.hpp"
#include "netarch.hpp"

namespace u2net {

inline constexpr char kCheckpointMagic[8] = {'U', '2', 'C', 'K', 'P', 'T', '1', '\n'};

template <class T>
constexpr const char* dtype_name() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    return std::is_same_v<T, float> ? "f32" : "f64";
}

/// Decoded checkpoint: raw tensors (kept in double) plus the metadata blocks.
struct CheckpointData {
    nlohmann::json meta;
    std::map<std::string, Tensor<double>> tensors;
};

namespace ckptdetail {

template <class T>
void append_raw(std::string& out, const Tensor<T>& t) {
    const auto* p = reinterpret_cast<const char*>(t.data());
    out.append(p, t.size() * sizeof(T));
}

inline void write_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }

}  // namespace ckptdetail

/// Serializes named tensors and a metadata object into the container format.
template <class T>
std::string encode_checkpoint(const std::map<std::string, const Tensor<T>*>& tensors, const nlohmann::json& meta) {
    nlohmann::json index = meta;
    nlohmann::json entries = nlohmann::json::object();
    std::string payload;
    for (const auto& [name, t] : tensors) {
        entries[name] = {{"offset", payload.size()}, {"shape", t->shape()}, {"dtype", dtype_name<T>()}};
        ckptdetail::append_raw(payload, *t);
    }
    index["tensors"] = entries;
    const std::string text = index.dump();
    std::ostringstream os;
    os.write(kCheckpointMagic, 8);
    ckptdetail::write_u64(os, text.size());
    os << text << payload;
    return os.str();
}

inline CheckpointData decode_checkpoint(const std::string& bytes) {
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
        throw Error("not a U2CKPT1 checkpoint");
    std::uint64_t len = 0;
    std::memcpy(&len, bytes.data() + 8, 8);
    if (16 + len > bytes.size()) throw Error("checkpoint index truncated");
    CheckpointData out;
    out.meta = nlohmann::json::parse(bytes.substr(16, len));
    const std::size_t base = 16 + len;
    for (const auto& [name, e] : out.meta.at("tensors").items()) {
        const Shape shape = e.at("shape").get<Shape>();
        const std::size_t offset = e.at("offset").get<std::size_t>();
        const std::string dtype = e.at("dtype").get<std::string>();
        const std::size_t n = numel(shape);
        const std::size_t width = dtype == "f32" ? 4 : dtype == "f64" ? 8 : 0;
        if (!width) throw Error("tensor " + name + ": unsupported dtype " + dtype);
        if (base + offset + n * width > bytes.size()) throw Error("tensor " + name + " extends past end of file");
        std::vector<double> vals(n);
        const char* src = bytes.data() + base + offset;
        for (std::size_t i = 0; i < n; ++i) {
            if (width == 4) {
                float f;
                std::memcpy(&f, src + 4 * i, 4);
                vals[i] = f;
            } else {
                std::memcpy(&vals[i], src + 8 * i, 8);
            }
        }
        out.tensors.emplace(name, Tensor<double>(shape, std::move(vals)));
    }
    out.meta.erase("tensors");
    return out;
}

template <class T>
nlohmann::json model_meta(const ModelState<T>& model) {
    return {{"format", "U2CKPT1"},
            {"network", model.config},
            {"domains", model.domains},
            {"frozen", model.frozen}};
}

/// Model parameters in name order, for checkpoint encoding.
template <class T>
std::map<std::string, const Tensor<T>*> model_tensors(const ModelState<T>& model) {
    std::map<std::string, const Tensor<T>*> out;
    for (const auto& [name, v] : model.params) out.emplace(name, &v.value());
    return out;
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, const ModelState<T>& model) {
    write_file_atomic(path, encode_checkpoint(model_tensors(model), model_meta(model)));
}

/// Rebuilds a model from decoded checkpoint data; tensors not named
/// "shared/..." or "domain/..." are ignored.
template <class T>
ModelState<T> model_from_checkpoint(const CheckpointData& data) {
    ModelState<T> model;
    model.config = data.meta.at("network").get<NetworkConfig>();
    model.domains = data.meta.at("domains").get<std::vector<DomainSpec>>();
    model.frozen = data.meta.value("frozen", std::set<std::string>{});
    for (const auto& [name, t] : data.tensors) {
        if (name.rfind("shared/", 0) != 0 && name.rfind("domain/", 0) != 0) continue;
        model.params.emplace(name, Var<T>::parameter(t.template cast<T>()));
    }
    // Every slot the forward pass needs must be present with the right shape.
    for (const auto& d : model.domains)
        for (const auto& slot : parameter_slots(model.config, d)) {
            auto it = model.params.find(slot.name);
            if (it == model.params.end()) throw Error("checkpoint lacks parameter " + slot.name);
            if (it->second.shape() != slot.shape) throw Error("checkpoint parameter " + slot.name + " has wrong shape");
        }
    return model;
}

template <class T>
ModelState<T> load_checkpoint(const std::filesystem::path& path) {
    return model_from_checkpoint<T>(decode_checkpoint(read_file(path)));
}

/// Bytes of every shared parameter in name order; used to prove freezing.
template <class T>
std::string serialize_partition(const ModelState<T>& model, const std::string& partition) {
    std::string out;
    for (const auto& [name, v] : model.params)
        if (partition_of(name) == partition) {
            out += name;
            ckptdetail::append_raw(out, v.value());
        }
    return out;
}

}  // namespace u2net
