#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>

#include "mocha/params.hpp"
#include "mocha/tensor.hpp"

namespace mocha::io {

enum class Dtype : std::uint8_t { kF32 = 0, kF64 = 1 };

// NDT1 container: "NDT1", u8 dtype, u8 rank, rank x u32 LE extents, row-major LE payload.
void write_ndt(std::ostream& os, const Tensor& t, Dtype dtype = Dtype::kF64);
// base_offset is added to byte offsets quoted in FormatError messages.
Tensor read_ndt(std::istream& is, std::uint64_t base_offset = 0);
void save_ndt(const std::filesystem::path& path, const Tensor& t, Dtype dtype = Dtype::kF64);
Tensor load_ndt(const std::filesystem::path& path);

// 8-bit binary PPM (P6) of an [H,W,3] tensor in [0,1]; values are clamped and rounded.
void save_ppm(const std::filesystem::path& path, const Tensor& rgb);
Tensor load_ppm(const std::filesystem::path& path);
// Little-endian PFM: "PF" for [H,W,3], "Pf" for [H,W] or [H,W,1]. Rows stored bottom-up.
void save_pfm(const std::filesystem::path& path, const Tensor& img);
Tensor load_pfm(const std::filesystem::path& path);

// Parameter container: text header "MOCHA-PARAMS 1", a count line, one
// "<name> <lr_scale>" line per entry, then one f64 NDT record per entry in store order.
void save_params(const std::filesystem::path& path, const ParamStore& store);
ParamStore load_params(const std::filesystem::path& path);

// Line-oriented key=value text; '#' starts a comment, blank lines ignored.
using KeyValues = std::map<std::string, std::string>;
KeyValues read_key_values(const std::filesystem::path& path);
KeyValues parse_key_values(const std::string& text, const std::string& origin = "<text>");
void write_key_values(const std::filesystem::path& path, const KeyValues& kv);

std::string read_file(const std::filesystem::path& path);

}  // namespace mocha::io
