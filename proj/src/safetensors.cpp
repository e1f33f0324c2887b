// Copyright 2026 The featinv Authors
// SPDX-License-Identifier: Apache-2.0

#include "featinv/safetensors.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "featinv/error.hpp"

namespace featinv {

std::int64_t HostTensor::numel() const {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::uint16_t float_to_half(float f) {
  const std::uint32_t x = std::bit_cast<std::uint32_t>(f);
  const std::uint32_t sign = (x >> 16) & 0x8000u;
  const std::uint32_t exp = (x >> 23) & 0xFFu;
  std::uint32_t mant = x & 0x7FFFFFu;
  if (exp == 0xFF) return static_cast<std::uint16_t>(sign | 0x7C00u | (mant ? 0x200u : 0u));
  const int e = static_cast<int>(exp) - 127 + 15;
  if (e >= 31) return static_cast<std::uint16_t>(sign | 0x7C00u);
  if (e <= 0) {
    if (e < -10) return static_cast<std::uint16_t>(sign);
    mant |= 0x800000u;
    const int shift = 14 - e;
    std::uint32_t h = mant >> shift;
    const std::uint32_t rem = mant & ((1u << shift) - 1u);
    const std::uint32_t half = 1u << (shift - 1);
    if (rem > half || (rem == half && (h & 1u))) ++h;
    return static_cast<std::uint16_t>(sign | h);
  }
  std::uint32_t h = (static_cast<std::uint32_t>(e) << 10) | (mant >> 13);
  const std::uint32_t rem = mant & 0x1FFFu;
  if (rem > 0x1000u || (rem == 0x1000u && (h & 1u))) ++h;  // carry may roll into the exponent
  return static_cast<std::uint16_t>(sign | h);
}

float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = (static_cast<std::uint32_t>(h) & 0x8000u) << 16;
  const std::uint32_t exp = (h >> 10) & 0x1Fu;
  std::uint32_t mant = h & 0x3FFu;
  std::uint32_t bits = 0;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      int e = -1;
      do {
        ++e;
        mant <<= 1;
      } while ((mant & 0x400u) == 0);
      bits = sign | (static_cast<std::uint32_t>(127 - 15 - e) << 23) | ((mant & 0x3FFu) << 13);
    }
  } else if (exp == 0x1F) {
    bits = sign | 0x7F800000u | (mant << 13);
  } else {
    bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(bits);
}

float bf16_to_float(std::uint16_t h) { return std::bit_cast<float>(static_cast<std::uint32_t>(h) << 16); }

TensorMap read_safetensors(const std::filesystem::path& path, std::map<std::string, std::string>* metadata) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), 8);
  if (!in || header_len > (1ULL << 31)) throw FormatError(path.string() + ": bad safetensors header length");
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw FormatError(path.string() + ": truncated safetensors header");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  const auto data_start = static_cast<std::streamoff>(8 + header_len);
  TensorMap out;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it.key() == "__metadata__") {
      if (metadata) {
        for (auto m = it->begin(); m != it->end(); ++m) (*metadata)[m.key()] = m->get<std::string>();
      }
      continue;
    }
    const std::string dtype = it->at("dtype").get<std::string>();
    // Integer entries are bookkeeping such as BatchNorm's num_batches_tracked.
    if (dtype == "BOOL" || dtype.starts_with("I") || dtype.starts_with("U")) continue;
    HostTensor t;
    t.shape = it->at("shape").get<std::vector<std::int64_t>>();
    const auto offsets = it->at("data_offsets").get<std::vector<std::uint64_t>>();
    const std::size_t width = dtype == "F32" ? 4 : (dtype == "F16" || dtype == "BF16") ? 2 : 0;
    if (width == 0) throw FormatError(path.string() + ": unsupported dtype " + dtype + " for " + it.key());
    const auto n = static_cast<std::size_t>(t.numel());
    if (offsets.size() != 2 || offsets[1] - offsets[0] != n * width) {
      throw FormatError(path.string() + ": size mismatch for " + it.key());
    }
    std::vector<char> raw(n * width);
    in.seekg(data_start + static_cast<std::streamoff>(offsets[0]));
    in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
    if (!in) throw FormatError(path.string() + ": truncated data for " + it.key());
    t.data.resize(n);
    if (width == 4) {
      std::memcpy(t.data.data(), raw.data(), raw.size());
    } else {
      for (std::size_t i = 0; i < n; ++i) {
        std::uint16_t h = 0;
        std::memcpy(&h, raw.data() + 2 * i, 2);
        t.data[i] = dtype == "F16" ? half_to_float(h) : bf16_to_float(h);
      }
    }
    out.emplace(it.key(), std::move(t));
  }
  return out;
}

void write_safetensors(const std::filesystem::path& path, const TensorMap& tensors,
                       const std::map<std::string, std::string>& metadata) {
  nlohmann::json j = nlohmann::json::object();
  if (!metadata.empty()) j["__metadata__"] = metadata;
  std::uint64_t off = 0;
  for (const auto& [name, t] : tensors) {
    const std::uint64_t bytes = static_cast<std::uint64_t>(t.data.size()) * 4;
    j[name] = {{"dtype", "F32"}, {"shape", t.shape}, {"data_offsets", {off, off + bytes}}};
    off += bytes;
  }
  std::string header = j.dump();
  while (header.size() % 8 != 0) header.push_back(' ');
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  const std::uint64_t len = header.size();
  out.write(reinterpret_cast<const char*>(&len), 8);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& [name, t] : tensors) {
    out.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * 4));
  }
  if (!out) throw FormatError("write failed for " + path.string());
}

TensorMap to_tensor_map(const NamedParams& params) {
  TensorMap m;
  for (const auto& [name, t] : params) {
    HostTensor h;
    h.shape = {static_cast<std::int64_t>(t.rows()), static_cast<std::int64_t>(t.cols())};
    h.data.assign(t.value().data(), t.value().data() + t.size());
    m[name] = std::move(h);
  }
  return m;
}

std::vector<std::string> load_params(const NamedParams& dst, const TensorMap& src, bool strict) {
  std::vector<std::string> loaded;
  for (const auto& [name, t] : dst) {
    auto it = src.find(name);
    if (it == src.end()) {
      if (strict) throw FormatError("missing parameter " + name);
      continue;
    }
    const HostTensor& h = it->second;
    const bool count_ok = h.numel() == t.size();
    const bool lead_ok = h.shape.empty() || t.rows() == 1 || t.cols() == 1 || h.shape.front() == t.rows();
    if (!count_ok || !lead_ok) {
      if (strict) {
        throw FormatError("shape mismatch for " + name + ": expected " + std::to_string(t.rows()) + "x" +
                          std::to_string(t.cols()) + ", found " + std::to_string(h.numel()) + " elements");
      }
      continue;
    }
    Tensor target = t;
    std::memcpy(target.value_mut().data(), h.data.data(), sizeof(float) * h.data.size());
    loaded.push_back(name);
  }
  return loaded;
}

}  // namespace featinv
