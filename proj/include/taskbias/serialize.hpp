#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "taskbias/tensor.hpp"

namespace taskbias {

// Binary tensor container. Layout:
//   magic "TBVLM1"
//   u64 meta count, then (name, value) UTF-8 string pairs
//   u64 tensor count, then per tensor: name, u32 ndim, u64 dims[ndim]
//   payloads: little-endian f64, one block per tensor in name-table order
struct TensorFile {
    std::map<std::string, std::string> meta;
    std::vector<std::pair<std::string, Tensor>> tensors;

    const Tensor* find(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return &t;
        return nullptr;
    }
};

namespace detail_io {

constexpr char kMagic[6] = {'T', 'B', 'V', 'L', 'M', '1'};

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_str(std::string& out, const std::string& s) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out.append(s);
}

inline void put_f64(std::string& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(out, bits);
}

struct Reader {
    const std::string& buf;
    std::size_t at = 0;

    void need(std::size_t n, const char* what) const {
        if (at + n > buf.size()) throw DataError(std::string("truncated tensor file while reading ") + what);
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[at + i])) << (8 * i);
        at += 4;
        return v;
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[at + i])) << (8 * i);
        at += 8;
        return v;
    }
    std::string str(const char* what) {
        const std::uint32_t n = u32(what);
        need(n, what);
        std::string s = buf.substr(at, n);
        at += n;
        return s;
    }
    double f64(const char* what) {
        const std::uint64_t bits = u64(what);
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
};

}  // namespace detail_io

inline std::string serialize_tensor_file(const TensorFile& file) {
    std::string out;
    out.append(detail_io::kMagic, 6);
    detail_io::put_u64(out, file.meta.size());
    for (const auto& [k, v] : file.meta) {
        detail_io::put_str(out, k);
        detail_io::put_str(out, v);
    }
    detail_io::put_u64(out, file.tensors.size());
    for (const auto& [name, t] : file.tensors) {
        detail_io::put_str(out, name);
        detail_io::put_u32(out, static_cast<std::uint32_t>(t.ndim()));
        for (std::size_t d : t.shape()) detail_io::put_u64(out, d);
    }
    for (const auto& [name, t] : file.tensors) {
        (void)name;
        for (double v : t.data()) detail_io::put_f64(out, v);
    }
    return out;
}

inline TensorFile parse_tensor_file(const std::string& buf) {
    if (buf.size() < 6 || std::memcmp(buf.data(), detail_io::kMagic, 6) != 0)
        throw DataError("bad magic: not a tensor container file");
    detail_io::Reader r{buf, 6};
    TensorFile file;
    const std::uint64_t n_meta = r.u64("meta count");
    for (std::uint64_t i = 0; i < n_meta; ++i) {
        std::string k = r.str("meta key");
        std::string v = r.str("meta value");
        file.meta.emplace(std::move(k), std::move(v));
    }
    const std::uint64_t n_tensors = r.u64("tensor count");
    std::vector<std::pair<std::string, Shape>> table;
    table.reserve(n_tensors);
    for (std::uint64_t i = 0; i < n_tensors; ++i) {
        std::string name = r.str("tensor name");
        const std::uint32_t ndim = r.u32("tensor rank");
        Shape shape(ndim);
        for (std::uint32_t d = 0; d < ndim; ++d) {
            shape[d] = r.u64("tensor dims");
            if (shape[d] == 0) throw DataError("name table lists zero extent for tensor '" + name + "'");
        }
        table.emplace_back(std::move(name), std::move(shape));
    }
    for (auto& [name, shape] : table) {
        const std::size_t count = shape_numel(shape);
        if (r.at + count * 8 > buf.size())
            throw DataError("payload missing for tensor '" + name + "' listed in the name table");
        std::vector<double> data(count);
        for (std::size_t i = 0; i < count; ++i) data[i] = r.f64("payload");
        file.tensors.emplace_back(name, Tensor::from_data(shape, std::move(data)));
    }
    if (r.at != buf.size()) throw DataError("trailing bytes after last tensor payload");
    return file;
}

inline void write_tensor_file(const std::string& path, const TensorFile& file) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open '" + path + "' for writing");
    const std::string buf = serialize_tensor_file(file);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw DataError("failed writing '" + path + "'");
}

inline TensorFile read_tensor_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("tensor file not found: '" + path + "'");
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_tensor_file(buf);
}

}  // namespace taskbias
