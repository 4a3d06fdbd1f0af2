#include "xsep/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "xsep/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "XTSR payload writer assumes a little-endian host");

namespace xsep {

namespace {

constexpr char kMagic[4] = {'X', 'T', 'S', 'R'};
constexpr std::uint8_t kVersion = 1;

std::size_t dtype_size(XtsrDtype d) {
    switch (d) {
        case XtsrDtype::F32: return 4;
        case XtsrDtype::F64: return 8;
        case XtsrDtype::U8: return 1;
    }
    throw FormatError("XTSR: unknown dtype");
}

void put_u32(std::ostream& out, std::uint32_t v) {
    const std::uint8_t b[4] = {static_cast<std::uint8_t>(v), static_cast<std::uint8_t>(v >> 8),
                               static_cast<std::uint8_t>(v >> 16),
                               static_cast<std::uint8_t>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in) {
    std::uint8_t b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw FormatError("XTSR: truncated header");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

std::size_t XtsrBlock::element_count() const {
    std::size_t count = 1;
    for (auto d : dims) count *= d;
    return count;
}

void write_xtsr(std::ostream& out, const XtsrBlock& block) {
    if (block.dims.empty() || block.dims.size() > 8)
        throw FormatError("XTSR: rank must be in [1, 8]");
    if (block.payload.size() != block.element_count() * dtype_size(block.dtype))
        throw FormatError("XTSR: payload size disagrees with dims");
    out.write(kMagic, 4);
    const std::uint8_t head[4] = {kVersion, static_cast<std::uint8_t>(block.dtype),
                                  static_cast<std::uint8_t>(block.dims.size()), 0};
    out.write(reinterpret_cast<const char*>(head), 4);
    for (auto d : block.dims) put_u32(out, d);
    out.write(reinterpret_cast<const char*>(block.payload.data()),
              static_cast<std::streamsize>(block.payload.size()));
    if (!out) throw FormatError("XTSR: write failed");
}

XtsrBlock read_xtsr(std::istream& in) {
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0)
        throw FormatError("XTSR: bad magic bytes");
    std::uint8_t head[4];
    in.read(reinterpret_cast<char*>(head), 4);
    if (!in) throw FormatError("XTSR: truncated header");
    if (head[0] != kVersion)
        throw FormatError("XTSR: unsupported version " + std::to_string(head[0]));
    if (head[1] > 2) throw FormatError("XTSR: unknown dtype " + std::to_string(head[1]));
    if (head[2] < 1 || head[2] > 8)
        throw FormatError("XTSR: rank out of range");

    XtsrBlock block;
    block.dtype = static_cast<XtsrDtype>(head[1]);
    block.dims.resize(head[2]);
    for (auto& d : block.dims) d = get_u32(in);
    block.payload.resize(block.element_count() * dtype_size(block.dtype));
    in.read(reinterpret_cast<char*>(block.payload.data()),
            static_cast<std::streamsize>(block.payload.size()));
    if (!in) throw FormatError("XTSR: truncated payload");
    return block;
}

void write_xtsr_file(const std::string& path, const XtsrBlock& block) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("XTSR: cannot open " + path + " for writing");
    write_xtsr(out, block);
}

XtsrBlock read_xtsr_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("XTSR: cannot open " + path);
    return read_xtsr(in);
}

namespace {

template <typename T>
XtsrBlock tensor_to_block(const Tensor4<T>& t, XtsrDtype dtype) {
    XtsrBlock block;
    block.dtype = dtype;
    block.dims = {static_cast<std::uint32_t>(t.n()), static_cast<std::uint32_t>(t.c()),
                  static_cast<std::uint32_t>(t.h()), static_cast<std::uint32_t>(t.w())};
    block.payload.resize(t.size() * sizeof(T));
    std::memcpy(block.payload.data(), t.data(), block.payload.size());
    return block;
}

Dims4 block_dims4(const XtsrBlock& block) {
    if (block.dims.size() != 4)
        throw FormatError("XTSR: expected rank 4, got rank " +
                          std::to_string(block.dims.size()));
    return Dims4{static_cast<int>(block.dims[0]), static_cast<int>(block.dims[1]),
                 static_cast<int>(block.dims[2]), static_cast<int>(block.dims[3])};
}

}  // namespace

XtsrBlock to_xtsr(const Tensor4<float>& t) { return tensor_to_block(t, XtsrDtype::F32); }
XtsrBlock to_xtsr(const Tensor4<double>& t) { return tensor_to_block(t, XtsrDtype::F64); }

Tensor4<float> xtsr_to_f32(const XtsrBlock& block) {
    Tensor4<float> t(block_dims4(block));
    if (block.dtype == XtsrDtype::F32) {
        std::memcpy(t.data(), block.payload.data(), block.payload.size());
    } else if (block.dtype == XtsrDtype::U8) {
        for (std::size_t k = 0; k < t.size(); ++k)
            t[k] = static_cast<float>(block.payload[k]);
    } else {
        throw FormatError("XTSR: expected f32 or u8 payload");
    }
    return t;
}

Tensor4<double> xtsr_to_f64(const XtsrBlock& block) {
    if (block.dtype != XtsrDtype::F64) throw FormatError("XTSR: expected f64 payload");
    Tensor4<double> t(block_dims4(block));
    std::memcpy(t.data(), block.payload.data(), block.payload.size());
    return t;
}

void save_tensor(const std::string& path, const Tensor4<float>& t) {
    write_xtsr_file(path, to_xtsr(t));
}

void save_tensor(const std::string& path, const Tensor4<double>& t) {
    write_xtsr_file(path, to_xtsr(t));
}

Tensor4<float> load_tensor_f32(const std::string& path) {
    return xtsr_to_f32(read_xtsr_file(path));
}

Tensor4<double> load_tensor_f64(const std::string& path) {
    return xtsr_to_f64(read_xtsr_file(path));
}

}  // namespace xsep
