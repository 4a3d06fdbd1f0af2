#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "xsep/tensor.hpp"

namespace xsep {

// XTSR: magic "XTSR", u8 version=1, u8 dtype (0=f32, 1=f64, 2=u8), u8 rank,
// one zero pad byte, rank x u32 little-endian dims, then raw little-endian
// payload in row-major order. Bit-exact across platforms.

enum class XtsrDtype : std::uint8_t { F32 = 0, F64 = 1, U8 = 2 };

struct XtsrBlock {
    XtsrDtype dtype = XtsrDtype::F32;
    std::vector<std::uint32_t> dims;
    std::vector<std::uint8_t> payload;  // little-endian element bytes

    std::size_t element_count() const;
};

void write_xtsr(std::ostream& out, const XtsrBlock& block);
XtsrBlock read_xtsr(std::istream& in);

void write_xtsr_file(const std::string& path, const XtsrBlock& block);
XtsrBlock read_xtsr_file(const std::string& path);

XtsrBlock to_xtsr(const Tensor4<float>& t);
XtsrBlock to_xtsr(const Tensor4<double>& t);

Tensor4<float> xtsr_to_f32(const XtsrBlock& block);    // accepts f32 or u8 (raw cast)
Tensor4<double> xtsr_to_f64(const XtsrBlock& block);

void save_tensor(const std::string& path, const Tensor4<float>& t);
void save_tensor(const std::string& path, const Tensor4<double>& t);
Tensor4<float> load_tensor_f32(const std::string& path);
Tensor4<double> load_tensor_f64(const std::string& path);

}  // namespace xsep
