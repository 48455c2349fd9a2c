#include "klm/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace klm {

namespace {

constexpr char kMagic[5] = {'K', 'L', 'M', 'C', '1'};

void put_u32(std::ostream& out, uint32_t v) {
    char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                 static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    out.write(b, 4);
}

uint32_t get_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw std::runtime_error("checkpoint truncated");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void put_f64(std::ostream& out, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
    out.write(b, 8);
}

double get_f64(std::istream& in) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    if (!in) throw std::runtime_error("checkpoint truncated");
    uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<uint64_t>(b[i]) << (8 * i);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

}  // namespace

void write_checkpoint(std::ostream& out, const NamedParams& params) {
    out.write(kMagic, sizeof(kMagic));
    for (const auto& [name, p] : params) {
        put_u32(out, static_cast<uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        put_u32(out, static_cast<uint32_t>(p->shape.size()));
        for (std::size_t d : p->shape) put_u32(out, static_cast<uint32_t>(d));
        out.put(0);  // dtype: f64 LE
        for (double v : p->value) put_f64(out, v);
    }
}

std::string checkpoint_bytes(const NamedParams& params) {
    std::ostringstream out(std::ios::binary);
    write_checkpoint(out, params);
    return out.str();
}

void save_checkpoint(const std::string& path, const NamedParams& params,
                     const std::string& manifest_json) {
    std::ofstream out(path, std::ios::trunc | std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
    write_checkpoint(out, params);
    if (!out) throw std::runtime_error("I/O error writing " + path);
    if (!manifest_json.empty()) {
        std::ofstream side(path + ".json", std::ios::trunc);
        if (!side) throw std::runtime_error("cannot write manifest: " + path + ".json");
        side << manifest_json << '\n';
    }
}

void load_checkpoint_into(const std::string& path, const NamedParams& params) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[5];
    in.read(magic, 5);
    if (!in || std::memcmp(magic, kMagic, 5) != 0)
        throw std::runtime_error("bad checkpoint magic in " + path);

    std::map<std::string, std::pair<std::vector<std::size_t>, std::vector<double>>> entries;
    while (in.peek() != std::char_traits<char>::eof()) {
        uint32_t name_len = get_u32(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        uint32_t ndim = get_u32(in);
        std::vector<std::size_t> shape(ndim);
        std::size_t count = 1;
        for (uint32_t i = 0; i < ndim; ++i) {
            shape[i] = get_u32(in);
            count *= shape[i];
        }
        int dtype = in.get();
        if (dtype != 0) throw std::runtime_error("unsupported dtype in " + path);
        std::vector<double> data(count);
        for (std::size_t i = 0; i < count; ++i) data[i] = get_f64(in);
        entries[name] = {std::move(shape), std::move(data)};
    }

    for (const auto& [name, p] : params) {
        auto it = entries.find(name);
        if (it == entries.end())
            throw std::runtime_error("checkpoint " + path + " missing entry: " + name);
        if (it->second.first != p->shape)
            throw std::runtime_error("checkpoint " + path + " shape mismatch for: " + name);
        p->value = it->second.second;
    }
}

}  // namespace klm
