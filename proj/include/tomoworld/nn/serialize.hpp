#pragma once

// Checkpoint container: a key/value text header, a "::tensors::" marker, then
// named binary tensors. One format for tokenizer, transition and probe
// checkpoints; files are content-hashed (FNV-1a 64) for cross-stage pinning.

#include "tomoworld/common.hpp"

namespace tw::nn {

enum class Dtype : uint8_t { F32 = 0, F64 = 1, I32 = 2 };

template <typename T>
constexpr Dtype dtype_of();
template <>
constexpr Dtype dtype_of<float>() { return Dtype::F32; }
template <>
constexpr Dtype dtype_of<double>() { return Dtype::F64; }
template <>
constexpr Dtype dtype_of<int32_t>() { return Dtype::I32; }

inline size_t dtype_size(Dtype d) { return d == Dtype::I32 || d == Dtype::F32 ? 4 : 8; }

struct TensorBlob {
    Dtype dtype = Dtype::F32;
    std::vector<int> dims;
    std::vector<unsigned char> bytes;

    size_t numel() const {
        size_t n = 1;
        for (int d : dims) n *= size_t(d);
        return n;
    }
};

class NamedTensors {
public:
    template <typename T>
    void add(const std::string& name, std::vector<int> dims, const std::vector<T>& data) {
        TensorBlob blob;
        blob.dtype = dtype_of<T>();
        blob.dims = std::move(dims);
        check(blob.numel() == data.size(), "tensor dims/payload mismatch for " + name);
        blob.bytes.resize(data.size() * sizeof(T));
        std::memcpy(blob.bytes.data(), data.data(), blob.bytes.size());
        check(map_.emplace(name, std::move(blob)).second, "duplicate tensor name: " + name);
    }

    // Loads into U, converting dtype if the stored scalar type differs.
    template <typename U>
    std::vector<U> get(const std::string& name) const {
        auto it = map_.find(name);
        check(it != map_.end(), "missing tensor: " + name);
        const TensorBlob& blob = it->second;
        std::vector<U> out(blob.numel());
        auto convert = [&](auto tag) {
            using S = decltype(tag);
            const S* src = reinterpret_cast<const S*>(blob.bytes.data());
            for (size_t i = 0; i < out.size(); ++i) out[i] = U(src[i]);
        };
        switch (blob.dtype) {
            case Dtype::F32: convert(float{}); break;
            case Dtype::F64: convert(double{}); break;
            case Dtype::I32: convert(int32_t{}); break;
        }
        return out;
    }

    const std::vector<int>& dims(const std::string& name) const {
        auto it = map_.find(name);
        check(it != map_.end(), "missing tensor: " + name);
        return it->second.dims;
    }

    bool contains(const std::string& name) const { return map_.count(name) > 0; }
    const std::map<std::string, TensorBlob>& all() const { return map_; }

    void insert_blob(const std::string& name, TensorBlob blob) {
        check(map_.emplace(name, std::move(blob)).second, "duplicate tensor name: " + name);
    }

private:
    std::map<std::string, TensorBlob> map_;
};

inline constexpr const char* kCheckpointMagic = "TWCKPT01";

inline void save_checkpoint(const fs::path& path, const KvMap& header, const NamedTensors& tensors) {
    std::ofstream out(path, std::ios::binary);
    check(out.good(), "cannot write checkpoint: " + path.string());
    out << kCheckpointMagic << "\n";
    write_kv(out, header);
    out << "::tensors::\n";
    uint32_t count = uint32_t(tensors.all().size());
    out.write(reinterpret_cast<const char*>(&count), 4);
    for (const auto& [name, blob] : tensors.all()) {
        uint16_t nlen = uint16_t(name.size());
        out.write(reinterpret_cast<const char*>(&nlen), 2);
        out.write(name.data(), nlen);
        uint8_t dt = uint8_t(blob.dtype);
        out.write(reinterpret_cast<const char*>(&dt), 1);
        uint8_t nd = uint8_t(blob.dims.size());
        out.write(reinterpret_cast<const char*>(&nd), 1);
        for (int d : blob.dims) {
            int32_t d32 = d;
            out.write(reinterpret_cast<const char*>(&d32), 4);
        }
        uint64_t nb = blob.bytes.size();
        out.write(reinterpret_cast<const char*>(&nb), 8);
        out.write(reinterpret_cast<const char*>(blob.bytes.data()), std::streamsize(nb));
    }
    check(out.good(), "short checkpoint write: " + path.string());
}

inline std::pair<KvMap, NamedTensors> load_checkpoint(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    check(in.good(), "cannot open checkpoint: " + path.string());
    std::string magic;
    std::getline(in, magic);
    check(magic == kCheckpointMagic, "not a checkpoint file: " + path.string());

    std::string headertext, line;
    while (std::getline(in, line)) {
        if (line == "::tensors::") break;
        headertext += line + "\n";
    }
    check(line == "::tensors::", "truncated checkpoint header: " + path.string());
    std::istringstream hs(headertext);
    KvMap header = parse_kv(hs);

    NamedTensors tensors;
    uint32_t count = 0;
    in.read(reinterpret_cast<char*>(&count), 4);
    for (uint32_t i = 0; i < count; ++i) {
        uint16_t nlen = 0;
        in.read(reinterpret_cast<char*>(&nlen), 2);
        std::string name(nlen, '\0');
        in.read(name.data(), nlen);
        uint8_t dt = 0, nd = 0;
        in.read(reinterpret_cast<char*>(&dt), 1);
        in.read(reinterpret_cast<char*>(&nd), 1);
        TensorBlob blob;
        blob.dtype = Dtype(dt);
        blob.dims.resize(nd);
        for (auto& d : blob.dims) {
            int32_t d32 = 0;
            in.read(reinterpret_cast<char*>(&d32), 4);
            d = d32;
        }
        uint64_t nb = 0;
        in.read(reinterpret_cast<char*>(&nb), 8);
        check(nb == blob.numel() * dtype_size(blob.dtype), "corrupt tensor " + name);
        blob.bytes.resize(nb);
        in.read(reinterpret_cast<char*>(blob.bytes.data()), std::streamsize(nb));
        check(in.good(), "truncated tensor " + name + " in " + path.string());
        tensors.insert_blob(name, std::move(blob));
    }
    return {header, tensors};
}

}  // namespace tw::nn
