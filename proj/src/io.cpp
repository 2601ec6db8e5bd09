#include "mocha/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "mocha/errors.hpp"

namespace mocha::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace {

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, std::uint64_t& offset, std::uint64_t base, const char* what) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (is.gcount() != static_cast<std::streamsize>(sizeof(T))) {
    throw FormatError("truncated " + std::string(what) + " at byte offset " + std::to_string(base + offset));
  }
  offset += sizeof(T);
  return v;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open '" + path.string() + "' for writing");
  return os;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open '" + path.string() + "' for reading");
  return is;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Reads a whitespace-delimited header token of a PPM/PFM file.
std::string header_token(std::istream& is, const std::filesystem::path& path) {
  std::string tok;
  char c;
  while (is.get(c)) {
    if (c == '#') {
      std::string skip;
      std::getline(is, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(c);
  }
  if (tok.empty()) throw FormatError("truncated image header in '" + path.string() + "'");
  return tok;
}

std::size_t parse_extent(const std::string& tok, const std::filesystem::path& path) {
  try {
    long v = std::stol(tok);
    if (v <= 0) throw FormatError("");
    return static_cast<std::size_t>(v);
  } catch (...) {
    throw FormatError("bad image extent '" + tok + "' in '" + path.string() + "'");
  }
}

}  // namespace

void write_ndt(std::ostream& os, const Tensor& t, Dtype dtype) {
  if (t.rank() > 255) throw DimensionError("NDT supports rank <= 255");
  os.write("NDT1", 4);
  put<std::uint8_t>(os, static_cast<std::uint8_t>(dtype));
  put<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
  for (auto e : t.shape()) {
    if (e > 0xFFFFFFFFu) throw DimensionError("NDT extent exceeds u32");
    put<std::uint32_t>(os, static_cast<std::uint32_t>(e));
  }
  if (dtype == Dtype::kF64) {
    os.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  } else {
    for (double v : t.data()) put<float>(os, static_cast<float>(v));
  }
}

Tensor read_ndt(std::istream& is, std::uint64_t base) {
  std::uint64_t off = 0;
  char magic[4];
  is.read(magic, 4);
  if (is.gcount() != 4 || std::memcmp(magic, "NDT1", 4) != 0) {
    throw FormatError("NDT: bad magic at byte offset " + std::to_string(base));
  }
  off = 4;
  const auto dtype = get<std::uint8_t>(is, off, base, "NDT dtype");
  if (dtype > 1) throw FormatError("NDT: unknown dtype code " + std::to_string(dtype) + " at byte offset " +
                                   std::to_string(base + 4));
  const auto rank = get<std::uint8_t>(is, off, base, "NDT rank");
  if (rank == 0) throw FormatError("NDT: zero rank at byte offset " + std::to_string(base + 5));
  Shape shape;
  for (std::size_t i = 0; i < rank; ++i) {
    const std::uint64_t at = off;
    auto e = get<std::uint32_t>(is, off, base, "NDT extent");
    if (e == 0) throw FormatError("NDT: zero extent at byte offset " + std::to_string(base + at));
    shape.push_back(e);
  }
  const std::size_t n = shape_size(shape);
  std::vector<double> data(n);
  const std::uint64_t payload_at = off;
  if (dtype == 1) {
    is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (is.gcount() != static_cast<std::streamsize>(n * sizeof(double))) {
      throw FormatError("NDT: truncated payload at byte offset " + std::to_string(base + payload_at + is.gcount()));
    }
  } else {
    for (auto& v : data) v = get<float>(is, off, base, "NDT payload");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(data[i])) {
      throw FormatError("NDT: non-finite value at byte offset " +
                        std::to_string(base + payload_at + i * (dtype == 1 ? 8 : 4)));
    }
  }
  return Tensor(std::move(shape), std::move(data));
}

void save_ndt(const std::filesystem::path& path, const Tensor& t, Dtype dtype) {
  auto os = open_out(path);
  write_ndt(os, t, dtype);
  if (!os) throw Error("write failed for '" + path.string() + "'");
}

Tensor load_ndt(const std::filesystem::path& path) {
  auto is = open_in(path);
  try {
    return read_ndt(is);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void save_ppm(const std::filesystem::path& path, const Tensor& rgb) {
  if (rgb.rank() != 3 || rgb.dim(2) != 3) throw DimensionError("save_ppm expects [H,W,3], got " + shape_str(rgb.shape()));
  auto os = open_out(path);
  os << "P6\n" << rgb.dim(1) << ' ' << rgb.dim(0) << "\n255\n";
  for (double v : rgb.data()) {
    const double c = std::clamp(v, 0.0, 1.0);
    put<std::uint8_t>(os, static_cast<std::uint8_t>(std::lround(c * 255.0)));
  }
  if (!os) throw Error("write failed for '" + path.string() + "'");
}

Tensor load_ppm(const std::filesystem::path& path) {
  auto is = open_in(path);
  if (header_token(is, path) != "P6") throw FormatError("'" + path.string() + "' is not a P6 PPM");
  const auto w = parse_extent(header_token(is, path), path);
  const auto h = parse_extent(header_token(is, path), path);
  if (header_token(is, path) != "255") throw FormatError("only 8-bit PPM supported: '" + path.string() + "'");
  std::vector<std::uint8_t> raw(h * w * 3);
  is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (is.gcount() != static_cast<std::streamsize>(raw.size())) throw FormatError("truncated PPM '" + path.string() + "'");
  Tensor out({h, w, 3});
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = raw[i] / 255.0;
  return out;
}

void save_pfm(const std::filesystem::path& path, const Tensor& img) {
  std::size_t channels;
  if (img.rank() == 3 && img.dim(2) == 3) {
    channels = 3;
  } else if (img.rank() == 2 || (img.rank() == 3 && img.dim(2) == 1)) {
    channels = 1;
  } else {
    throw DimensionError("save_pfm expects [H,W,3], [H,W,1] or [H,W], got " + shape_str(img.shape()));
  }
  const std::size_t h = img.dim(0), w = img.dim(1);
  auto os = open_out(path);
  os << (channels == 3 ? "PF" : "Pf") << '\n' << w << ' ' << h << "\n-1.0\n";
  for (std::size_t y = h; y-- > 0;)
    for (std::size_t i = 0; i < w * channels; ++i) put<float>(os, static_cast<float>(img[y * w * channels + i]));
  if (!os) throw Error("write failed for '" + path.string() + "'");
}

Tensor load_pfm(const std::filesystem::path& path) {
  auto is = open_in(path);
  const std::string kind = header_token(is, path);
  if (kind != "PF" && kind != "Pf") throw FormatError("'" + path.string() + "' is not a PFM");
  const auto w = parse_extent(header_token(is, path), path);
  const auto h = parse_extent(header_token(is, path), path);
  const std::string scale_tok = header_token(is, path);
  double scale = 0.0;
  try {
    scale = std::stod(scale_tok);
  } catch (...) {
    throw FormatError("bad PFM scale '" + scale_tok + "' in '" + path.string() + "'");
  }
  if (scale >= 0.0) throw FormatError("only little-endian PFM supported: '" + path.string() + "'");
  const std::size_t channels = kind == "PF" ? 3 : 1;
  Tensor out(channels == 3 ? Shape{h, w, 3} : Shape{h, w});
  std::uint64_t off = 0;
  const auto header_len = static_cast<std::uint64_t>(is.tellg());
  try {
    for (std::size_t y = h; y-- > 0;)
      for (std::size_t i = 0; i < w * channels; ++i)
        out[y * w * channels + i] = get<float>(is, off, header_len, "PFM payload");
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return out;
}

void save_params(const std::filesystem::path& path, const ParamStore& store) {
  auto os = open_out(path);
  os << "MOCHA-PARAMS 1\n" << store.size() << '\n';
  os << std::setprecision(17);
  for (const auto& e : store.entries()) os << e.name << ' ' << e.lr_scale << '\n';
  for (const auto& e : store.entries()) write_ndt(os, e.value, Dtype::kF64);
  if (!os) throw Error("write failed for '" + path.string() + "'");
}

ParamStore load_params(const std::filesystem::path& path) {
  auto is = open_in(path);
  std::string line;
  std::uint64_t pos = 0, line_at = 0;  // offsets of the next byte and of the current line
  auto next_line = [&] {
    line_at = pos;
    if (!std::getline(is, line)) return false;
    pos += line.size() + 1;
    return true;
  };
  auto fail = [&](const std::string& why) {
    return FormatError(path.string() + ": " + why + " at byte offset " + std::to_string(line_at));
  };
  if (!next_line() || line != "MOCHA-PARAMS 1") throw fail("bad parameter container header");
  if (!next_line()) throw fail("missing entry count");
  std::size_t count = 0;
  {
    std::istringstream ls(line);
    std::string rest;
    if (!(ls >> count) || (ls >> rest)) throw fail("bad entry count");
  }
  std::vector<std::pair<std::string, double>> header;
  std::set<std::string> seen;
  for (std::size_t i = 0; i < count; ++i) {
    if (!next_line()) throw fail("truncated name table");
    std::istringstream ls(line);
    std::string name, rest;
    double scale;
    if (!(ls >> name >> scale) || (ls >> rest)) throw fail("bad name table line");
    if (!(scale > 0.0) || !std::isfinite(scale)) throw fail("non-positive lr scale for '" + name + "'");
    if (!seen.insert(name).second) throw fail("duplicate parameter name '" + name + "'");
    header.emplace_back(name, scale);
  }
  ParamStore store;
  for (const auto& [name, scale] : header) {
    Tensor t;
    try {
      t = read_ndt(is, pos);
    } catch (const FormatError& e) {
      throw FormatError(path.string() + ": " + e.what());
    }
    pos = static_cast<std::uint64_t>(is.tellg());
    store.add(name, std::move(t), scale);
  }
  if (is.peek() != std::char_traits<char>::eof()) {
    throw FormatError(path.string() + ": trailing bytes at byte offset " + std::to_string(pos));
  }
  return store;
}

KeyValues parse_key_values(const std::string& text, const std::string& origin) {
  KeyValues kv;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw FormatError(origin + ":" + std::to_string(lineno) + ": expected key=value");
    }
    std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw FormatError(origin + ":" + std::to_string(lineno) + ": empty key");
    kv[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

std::string read_file(const std::filesystem::path& path) {
  auto is = open_in(path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

KeyValues read_key_values(const std::filesystem::path& path) { return parse_key_values(read_file(path), path.string()); }

void write_key_values(const std::filesystem::path& path, const KeyValues& kv) {
  auto os = open_out(path);
  for (const auto& [k, v] : kv) os << k << '=' << v << '\n';
  if (!os) throw Error("write failed for '" + path.string() + "'");
}

}  // namespace mocha::io
