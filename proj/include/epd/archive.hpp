#pragma once

// Named-tensor container: JSON manifest (name, dtype, shape, offset, checksum)
// followed by tightly packed little-endian buffers. Entries are stored sorted
// by name and the manifest dump is canonical, so save -> load -> save is
// byte-identical. Used for checkpoints, clip fixtures and external weights.

#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "epd/tensor.hpp"

namespace epd {

namespace detail {
template <class T>
struct dtype_name;
template <>
struct dtype_name<float> {
    static constexpr const char* value = "f32";
};
template <>
struct dtype_name<double> {
    static constexpr const char* value = "f64";
};
template <>
struct dtype_name<int64_t> {
    static constexpr const char* value = "i64";
};
template <>
struct dtype_name<uint8_t> {
    static constexpr const char* value = "u8";
};
}  // namespace detail

class Archive {
  public:
    struct Entry {
        std::string dtype;
        Shape shape;
        std::vector<uint8_t> bytes;
    };

    static constexpr char kMagic[9] = "EPDARCH1";

    template <class T>
    void put(const std::string& name, const Tensor<T>& t) {
        Entry e;
        e.dtype = detail::dtype_name<T>::value;
        e.shape = t.shape();
        e.bytes.resize(size_t(t.numel()) * sizeof(T));
        std::memcpy(e.bytes.data(), t.ptr(), e.bytes.size());
        entries_[name] = std::move(e);
    }

    // 1-D payloads; a zero-length vector is stored with shape [0]
    template <class T>
    void put_vector(const std::string& name, const std::vector<T>& v) {
        Entry e;
        e.dtype = detail::dtype_name<T>::value;
        e.shape = {int64_t(v.size())};
        e.bytes.resize(v.size() * sizeof(T));
        if (!v.empty()) std::memcpy(e.bytes.data(), v.data(), e.bytes.size());
        entries_[name] = std::move(e);
    }

    template <class T>
    Tensor<T> get(const std::string& name) const {
        const Entry& e = find(name);
        if (e.dtype != detail::dtype_name<T>::value)
            throw io_error(strcat("archive entry ", name, " has dtype ", e.dtype, ", requested ",
                                  detail::dtype_name<T>::value));
        Tensor<T> t(e.shape);
        if (e.bytes.size() != size_t(t.numel()) * sizeof(T))
            throw format_error(strcat("archive entry ", name, " byte size inconsistent"));
        std::memcpy(t.ptr(), e.bytes.data(), e.bytes.size());
        return t;
    }

    template <class T>
    std::vector<T> get_vector(const std::string& name) const {
        const Entry& e = find(name);
        if (e.dtype != detail::dtype_name<T>::value)
            throw io_error(strcat("archive entry ", name, " has dtype ", e.dtype, ", requested ",
                                  detail::dtype_name<T>::value));
        std::vector<T> v(e.bytes.size() / sizeof(T));
        if (!v.empty()) std::memcpy(v.data(), e.bytes.data(), e.bytes.size());
        return v;
    }

    bool contains(const std::string& name) const { return entries_.count(name) != 0; }
    size_t size() const { return entries_.size(); }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(entries_.size());
        for (auto& [n, e] : entries_) out.push_back(n);
        return out;
    }

    const Entry& find(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw io_error(strcat("archive has no entry named ", name));
        return it->second;
    }

    std::map<std::string, std::string>& meta() { return meta_; }
    const std::map<std::string, std::string>& meta() const { return meta_; }

    std::string meta_or(const std::string& key, const std::string& fallback) const {
        auto it = meta_.find(key);
        return it == meta_.end() ? fallback : it->second;
    }

    void save(const std::string& path) const {
        nlohmann::json manifest;
        manifest["meta"] = meta_;
        nlohmann::json tensors = nlohmann::json::array();
        uint64_t offset = 0;
        for (auto& [name, e] : entries_) {
            nlohmann::json t;
            t["name"] = name;
            t["dtype"] = e.dtype;
            t["shape"] = e.shape;
            t["offset"] = offset;
            t["checksum"] = hex64(fnv1a(e.bytes.data(), e.bytes.size()));
            tensors.push_back(std::move(t));
            offset += e.bytes.size();
        }
        manifest["tensors"] = std::move(tensors);
        std::string m = manifest.dump();

        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        if (!f) throw io_error(strcat("cannot open ", path, " for writing"));
        f.write(kMagic, 8);
        uint64_t mlen = m.size();
        f.write(reinterpret_cast<const char*>(&mlen), 8);
        f.write(m.data(), std::streamsize(m.size()));
        for (auto& [name, e] : entries_)
            f.write(reinterpret_cast<const char*>(e.bytes.data()), std::streamsize(e.bytes.size()));
        if (!f) throw io_error(strcat("short write to ", path));
    }

    static Archive load(const std::string& path, bool verify_checksums = true) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw io_error(strcat("cannot open ", path));
        char magic[8];
        f.read(magic, 8);
        if (!f || std::memcmp(magic, kMagic, 8) != 0)
            throw io_error(strcat(path, ": bad magic, not an archive"));
        uint64_t mlen = 0;
        f.read(reinterpret_cast<char*>(&mlen), 8);
        if (!f || mlen > (1ull << 32)) throw io_error(strcat(path, ": corrupt manifest length"));
        std::string m(mlen, '\0');
        f.read(m.data(), std::streamsize(mlen));
        if (!f) throw io_error(strcat(path, ": truncated manifest"));

        nlohmann::json manifest;
        try {
            manifest = nlohmann::json::parse(m);
        } catch (const nlohmann::json::exception& e) {
            throw io_error(strcat(path, ": manifest parse failure: ", e.what()));
        }

        Archive a;
        if (manifest.contains("meta"))
            for (auto& [k, v] : manifest["meta"].items()) a.meta_[k] = v.get<std::string>();

        for (auto& t : manifest["tensors"]) {
            Entry e;
            std::string name = t["name"].get<std::string>();
            e.dtype = t["dtype"].get<std::string>();
            e.shape = t["shape"].get<Shape>();
            size_t elem_size;
            if (e.dtype == "f32")
                elem_size = 4;
            else if (e.dtype == "f64")
                elem_size = 8;
            else if (e.dtype == "i64")
                elem_size = 8;
            else if (e.dtype == "u8")
                elem_size = 1;
            else
                throw io_error(strcat(path, ": unknown dtype ", e.dtype, " for ", name));
            size_t count = 1;  // unlike Tensor shapes, vector entries may be empty
            for (int64_t d : e.shape) {
                if (d < 0) throw io_error(strcat(path, ": negative extent for ", name));
                count *= size_t(d);
            }
            e.bytes.resize(count * elem_size);
            f.read(reinterpret_cast<char*>(e.bytes.data()), std::streamsize(e.bytes.size()));
            if (!f) throw io_error(strcat(path, ": truncated data for ", name));
            if (verify_checksums) {
                std::string want = t["checksum"].get<std::string>();
                std::string got = hex64(fnv1a(e.bytes.data(), e.bytes.size()));
                if (want != got)
                    throw io_error(strcat(path, ": checksum mismatch for tensor ", name,
                                          " (manifest ", want, ", data ", got, ")"));
            }
            a.entries_[name] = std::move(e);
        }
        return a;
    }

    const std::map<std::string, Entry>& entries() const { return entries_; }

  private:
    std::map<std::string, Entry> entries_;
    std::map<std::string, std::string> meta_;
};

}  // namespace epd
