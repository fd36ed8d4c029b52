#include "addp/io.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

static_assert(std::endian::native == std::endian::little, "npy writer assumes a little-endian host");

namespace addp::io {

std::size_t NdArray::numel() const {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string encode_npy(const NdArray& arr) {
  if (arr.data.size() != arr.numel()) throw std::invalid_argument("npy: data size does not match shape");
  std::string shape = "(";
  for (std::size_t i = 0; i < arr.shape.size(); ++i) {
    shape += std::to_string(arr.shape[i]);
    if (arr.shape.size() == 1 || i + 1 < arr.shape.size()) shape += ",";
    if (i + 1 < arr.shape.size()) shape += " ";
  }
  shape += ")";
  std::string dict = std::string("{'descr': '") + (arr.dtype == Dtype::kF32 ? "<f4" : "<f8") +
                     "', 'fortran_order': False, 'shape': " + shape + ", }";
  // magic(6) + version(2) + len(2) + dict + '\n' padded to 64 bytes
  std::size_t total = 10 + dict.size() + 1;
  const std::size_t pad = (64 - total % 64) % 64;
  dict.append(pad, ' ');
  dict.push_back('\n');

  std::string out;
  out.append("\x93NUMPY", 6);
  out.push_back('\x01');
  out.push_back('\x00');
  const auto hlen = static_cast<std::uint16_t>(dict.size());
  out.push_back(static_cast<char>(hlen & 0xff));
  out.push_back(static_cast<char>(hlen >> 8));
  out += dict;
  if (arr.dtype == Dtype::kF32) {
    std::vector<float> tmp(arr.data.begin(), arr.data.end());
    out.append(reinterpret_cast<const char*>(tmp.data()), tmp.size() * sizeof(float));
  } else {
    out.append(reinterpret_cast<const char*>(arr.data.data()), arr.data.size() * sizeof(double));
  }
  return out;
}

NdArray decode_npy(const std::string& bytes) {
  if (bytes.size() < 10 || bytes.compare(0, 6, "\x93NUMPY") != 0) throw std::runtime_error("npy: bad magic");
  const auto major = static_cast<unsigned char>(bytes[6]);
  std::size_t hlen = 0, off = 0;
  if (major == 1) {
    hlen = static_cast<unsigned char>(bytes[8]) | (static_cast<std::size_t>(static_cast<unsigned char>(bytes[9])) << 8);
    off = 10;
  } else if (major == 2 || major == 3) {
    std::uint32_t l = 0;
    std::memcpy(&l, bytes.data() + 8, 4);
    hlen = l;
    off = 12;
  } else {
    throw std::runtime_error("npy: unsupported version");
  }
  if (bytes.size() < off + hlen) throw std::runtime_error("npy: truncated header");
  const std::string header = bytes.substr(off, hlen);

  NdArray arr;
  if (header.find("'<f4'") != std::string::npos) {
    arr.dtype = Dtype::kF32;
  } else if (header.find("'<f8'") != std::string::npos) {
    arr.dtype = Dtype::kF64;
  } else {
    throw std::runtime_error("npy: only <f4 and <f8 are supported");
  }
  if (header.find("'fortran_order': True") != std::string::npos) throw std::runtime_error("npy: fortran order unsupported");
  const auto sp = header.find("'shape':");
  const auto lp = header.find('(', sp);
  const auto rp = header.find(')', lp);
  if (sp == std::string::npos || lp == std::string::npos || rp == std::string::npos) {
    throw std::runtime_error("npy: missing shape");
  }
  std::istringstream ss(header.substr(lp + 1, rp - lp - 1));
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    const auto first = tok.find_first_not_of(' ');
    if (first == std::string::npos) continue;
    arr.shape.push_back(std::stoul(tok.substr(first)));
  }
  const std::size_t n = arr.numel();
  const std::size_t esize = arr.dtype == Dtype::kF32 ? 4 : 8;
  const std::size_t data_off = off + hlen;
  if (bytes.size() < data_off + n * esize) throw std::runtime_error("npy: truncated data");
  arr.data.resize(n);
  if (arr.dtype == Dtype::kF32) {
    std::vector<float> tmp(n);
    std::memcpy(tmp.data(), bytes.data() + data_off, n * 4);
    std::copy(tmp.begin(), tmp.end(), arr.data.begin());
  } else {
    std::memcpy(arr.data.data(), bytes.data() + data_off, n * 8);
  }
  return arr;
}

void write_npy(const std::filesystem::path& path, const NdArray& arr) { write_text(path, encode_npy(arr)); }

NdArray read_npy(const std::filesystem::path& path) { return decode_npy(read_text(path)); }

void Archive::put(const std::string& name, NdArray arr, nlohmann::json meta_for_array) {
  if (!arrays.contains(name)) order.push_back(name);
  arrays[name] = std::move(arr);
  array_meta[name] = std::move(meta_for_array);
}

const NdArray& Archive::get(const std::string& name) const {
  auto it = arrays.find(name);
  if (it == arrays.end()) throw std::out_of_range("archive: no array named '" + name + "'");
  return it->second;
}

namespace {
constexpr char kArchiveMagic[] = "ADDPARC1";
}

void write_archive(const std::filesystem::path& path, const Archive& ar) {
  std::vector<std::string> blobs;
  nlohmann::json entries = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& name : ar.order) {
    blobs.push_back(encode_npy(ar.arrays.at(name)));
    entries.push_back({{"name", name}, {"offset", offset}, {"size", blobs.back().size()},
                       {"meta", ar.array_meta.at(name)}});
    offset += blobs.back().size();
  }
  const nlohmann::json header = {{"meta", ar.meta}, {"arrays", entries}};
  const std::string hs = header.dump();
  std::string out(kArchiveMagic, 8);
  const std::uint64_t hl = hs.size();
  out.append(reinterpret_cast<const char*>(&hl), 8);
  out += hs;
  for (const auto& b : blobs) out += b;
  write_text(path, out);
}

Archive read_archive(const std::filesystem::path& path) {
  const std::string bytes = read_text(path);
  if (bytes.size() < 16 || bytes.compare(0, 8, kArchiveMagic) != 0) {
    throw std::runtime_error("archive: bad magic in " + path.string());
  }
  std::uint64_t hl = 0;
  std::memcpy(&hl, bytes.data() + 8, 8);
  if (bytes.size() < 16 + hl) throw std::runtime_error("archive: truncated header");
  const auto header = nlohmann::json::parse(bytes.substr(16, hl));
  Archive ar;
  ar.meta = header.at("meta");
  const std::size_t base = 16 + hl;
  for (const auto& e : header.at("arrays")) {
    const auto off = e.at("offset").get<std::size_t>();
    const auto size = e.at("size").get<std::size_t>();
    if (bytes.size() < base + off + size) throw std::runtime_error("archive: truncated array data");
    ar.put(e.at("name").get<std::string>(), decode_npy(bytes.substr(base + off, size)), e.at("meta"));
  }
  return ar;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace addp::io
