#include "cgfr/checkpoint.hpp"

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>

namespace cgfr {

namespace {

constexpr std::uint32_t kFormatVersion = 1;
constexpr char kMagic[4] = {'C', 'G', 'F', 'R'};

void put_u16(std::string& buf, std::uint16_t v) {
    buf.push_back(static_cast<char>(v & 0xFF));
    buf.push_back(static_cast<char>((v >> 8) & 0xFF));
}

void put_u32(std::string& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f64(std::string& buf, double d) {
    std::uint64_t v;
    std::memcpy(&v, &d, sizeof(v));
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

struct Reader {
    const std::string& buf;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > buf.size()) throw IoError("checkpoint truncated");
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = static_cast<std::uint8_t>(buf[pos]) |
                          (static_cast<std::uint16_t>(static_cast<std::uint8_t>(buf[pos + 1])) << 8);
        pos += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(buf[pos + i])) << (8 * i);
        }
        pos += 4;
        return v;
    }
    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(buf[pos++]);
    }
    double f64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(buf[pos + i])) << (8 * i);
        }
        pos += 8;
        double d;
        std::memcpy(&d, &v, sizeof(d));
        return d;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

}  // namespace

void save_checkpoint(const std::string& path, const NamedTensors& entries) {
    std::string buf;
    buf.append(kMagic, 4);
    put_u32(buf, kFormatVersion);
    put_u32(buf, static_cast<std::uint32_t>(entries.size()));
    for (const auto& [name, t] : entries) {
        if (name.size() > 0xFFFF) throw IoError("checkpoint: tensor name too long");
        put_u16(buf, static_cast<std::uint16_t>(name.size()));
        buf.append(name);
        const Shape& dims = t.dims();
        buf.push_back(static_cast<char>(dims.size()));
        for (int d : dims) put_u32(buf, static_cast<std::uint32_t>(d));
        for (double v : t.data()) put_f64(buf, v);
    }

    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp);
        out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (!out) throw IoError("short write to " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        throw IoError("cannot rename " + tmp + " to " + path);
    }
}

void save_checkpoint(const std::string& path, ParamStore& store) {
    NamedTensors entries;
    for (Parameter* p : store.all()) entries.emplace_back(p->name, p->value);
    for (const auto& [name, t] : store.buffers()) entries.emplace_back(name, t);
    save_checkpoint(path, entries);
}

NamedTensors load_checkpoint(const std::string& path) {
    std::string buf;
    {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot open checkpoint " + path);
        buf.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }
    Reader r{buf};
    std::string magic = r.bytes(4);
    if (std::memcmp(magic.data(), kMagic, 4) != 0) {
        throw IoError("not a CGFR checkpoint: bad magic in " + path);
    }
    std::uint32_t version = r.u32();
    if (version != kFormatVersion) {
        throw IoError("unsupported checkpoint version " + std::to_string(version));
    }
    std::uint32_t count = r.u32();
    NamedTensors entries;
    entries.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        std::uint16_t name_len = r.u16();
        std::string name = r.bytes(name_len);
        std::uint8_t rank = r.u8();
        Shape dims(rank);
        std::int64_t numel = 1;
        for (int d = 0; d < rank; ++d) {
            dims[d] = static_cast<int>(r.u32());
            numel *= dims[d];
        }
        std::vector<double> data(static_cast<std::size_t>(numel));
        for (double& v : data) v = r.f64();
        entries.emplace_back(std::move(name), Tensor::from_vector(std::move(dims), std::move(data)));
    }
    if (r.pos != buf.size()) throw IoError("trailing bytes in checkpoint " + path);
    return entries;
}

void load_checkpoint_into(const std::string& path, ParamStore& store, bool exhaustive) {
    NamedTensors entries = load_checkpoint(path);
    std::set<std::string> seen;
    for (auto& [name, t] : entries) {
        Tensor dst;
        if (Parameter* p = store.find(name)) {
            dst = p->value;
        } else if (Tensor* b = store.find_buffer(name)) {
            dst = *b;
        } else {
            throw IoError("checkpoint entry '" + name + "' not present in model");
        }
        if (dst.dims() != t.dims()) {
            throw IoError("checkpoint entry '" + name + "' has shape " + shape_str(t.dims()) +
                          ", model expects " + shape_str(dst.dims()));
        }
        std::copy(t.data().begin(), t.data().end(), dst.data_mut().begin());
        seen.insert(name);
    }
    if (exhaustive) {
        for (Parameter* p : store.all()) {
            if (!seen.count(p->name)) throw IoError("checkpoint missing parameter '" + p->name + "'");
        }
        for (const auto& [name, t] : store.buffers()) {
            (void)t;
            if (!seen.count(name)) throw IoError("checkpoint missing buffer '" + name + "'");
        }
    }
}

}  // namespace cgfr
