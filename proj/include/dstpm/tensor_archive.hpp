#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dstpm/config.hpp"
#include "dstpm/error.hpp"

namespace dstpm {

/// Single-file container: 8-byte magic, u32 version, u64 header length, a JSON
/// header (free-form "metadata" plus a "tensors" table of name/dtype/shape/
/// offset/nbytes), then the raw little-endian tensor bytes back to back.
struct TensorArchive {
  nlohmann::json metadata = nlohmann::json::object();
  std::map<std::string, torch::Tensor> tensors;
};

inline constexpr char kArchiveMagic[8] = {'D', 'S', 'T', 'P', 'M', 'A', 'R', 'C'};
inline constexpr std::uint32_t kArchiveVersion = 1;

namespace detail {

inline std::string dtype_name(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32: return "float32";
    case torch::kFloat64: return "float64";
    case torch::kInt64: return "int64";
    case torch::kUInt8: return "uint8";
    default: throw Error(ErrorKind::kParameter, "unsupported tensor dtype for archive");
  }
}

inline torch::ScalarType dtype_from(const std::string& name, ErrorKind on_failure) {
  if (name == "float32") return torch::kFloat32;
  if (name == "float64") return torch::kFloat64;
  if (name == "int64") return torch::kInt64;
  if (name == "uint8") return torch::kUInt8;
  throw Error(on_failure, "unknown dtype '" + name + "' in archive");
}

}  // namespace detail

inline void save_archive(const std::filesystem::path& path, const TensorArchive& archive) {
  nlohmann::json header;
  header["metadata"] = archive.metadata;
  header["tensors"] = nlohmann::json::array();
  std::vector<torch::Tensor> blobs;
  std::uint64_t offset = 0;
  for (const auto& [name, tensor] : archive.tensors) {
    auto cpu = tensor.detach().to(torch::kCPU).contiguous();
    const auto nbytes = static_cast<std::uint64_t>(cpu.numel() * cpu.element_size());
    header["tensors"].push_back({{"name", name},
                                 {"dtype", detail::dtype_name(cpu.scalar_type())},
                                 {"shape", cpu.sizes().vec()},
                                 {"offset", offset},
                                 {"nbytes", nbytes}});
    offset += nbytes;
    blobs.push_back(std::move(cpu));
  }
  const std::string text = header.dump();
  if (!path.parent_path().empty()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::kIo, "cannot write " + path.string());
    const std::uint64_t header_len = text.size();
    out.write(kArchiveMagic, sizeof(kArchiveMagic));
    out.write(reinterpret_cast<const char*>(&kArchiveVersion), sizeof(kArchiveVersion));
    out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& blob : blobs)
      out.write(static_cast<const char*>(blob.data_ptr()),
                static_cast<std::streamsize>(blob.numel() * blob.element_size()));
    if (!out) throw Error(ErrorKind::kIo, "short write to " + path.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorKind::kIo, "cannot move " + tmp.string() + " into place: " + ec.message());
}

inline TensorArchive load_archive(const std::filesystem::path& path,
                                  ErrorKind on_failure = ErrorKind::kIo) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(on_failure, "cannot open " + path.string());
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t header_len = 0;
  in.read(magic, sizeof(magic));
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  if (!in || std::memcmp(magic, kArchiveMagic, sizeof(magic)) != 0)
    throw Error(on_failure, path.string() + " is not a tensor archive");
  if (version != kArchiveVersion)
    throw Error(on_failure, path.string() + " has unsupported archive version " + std::to_string(version));
  const auto file_size = std::filesystem::file_size(path);
  const std::uint64_t data_start = sizeof(magic) + sizeof(version) + sizeof(header_len) + header_len;
  if (data_start > file_size) throw Error(on_failure, path.string() + " is truncated");

  std::string text(header_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_len));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(on_failure, path.string() + " has a corrupt header: " + e.what());
  }

  TensorArchive archive;
  archive.metadata = header.value("metadata", nlohmann::json::object());
  try {
    for (const auto& entry : header.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      const auto dtype = detail::dtype_from(entry.at("dtype").get<std::string>(), on_failure);
      const auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
      auto tensor = torch::empty(shape, torch::TensorOptions().dtype(dtype));
      if (static_cast<std::uint64_t>(tensor.numel() * tensor.element_size()) != nbytes ||
          data_start + offset + nbytes > file_size)
        throw Error(on_failure, path.string() + ": inconsistent entry for " + name);
      in.seekg(static_cast<std::streamoff>(data_start + offset));
      in.read(static_cast<char*>(tensor.data_ptr()), static_cast<std::streamsize>(nbytes));
      if (!in) throw Error(on_failure, path.string() + ": short read for " + name);
      archive.tensors.emplace(name, std::move(tensor));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(on_failure, path.string() + " has a malformed tensor table: " + e.what());
  }
  return archive;
}

/// Parameters and buffers (batch-norm statistics included) keyed by
/// `prefix + name`.
inline void export_state(const torch::nn::Module& module, const std::string& prefix,
                         std::map<std::string, torch::Tensor>& out) {
  for (const auto& item : module.named_parameters(true)) out[prefix + item.key()] = item.value().detach().clone();
  for (const auto& item : module.named_buffers(true)) out[prefix + item.key()] = item.value().detach().clone();
}

inline void import_state(torch::nn::Module& module, const std::string& prefix,
                         const std::map<std::string, torch::Tensor>& in, ErrorKind on_failure) {
  torch::NoGradGuard guard;
  auto copy = [&](const std::string& name, torch::Tensor& dst) {
    const auto it = in.find(prefix + name);
    if (it == in.end()) throw Error(on_failure, "missing tensor " + prefix + name);
    if (it->second.sizes() != dst.sizes())
      throw Error(on_failure, "shape mismatch for " + prefix + name);
    dst.copy_(it->second.to(dst.device(), dst.scalar_type()));
  };
  for (auto& item : module.named_parameters(true)) copy(item.key(), item.value());
  for (auto& item : module.named_buffers(true)) copy(item.key(), item.value());
}

/// Checksum over names and raw bytes of all parameters and buffers, in name order.
inline std::string parameter_checksum(const torch::nn::Module& module) {
  std::map<std::string, torch::Tensor> state;
  export_state(module, "", state);
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  for (const auto& [name, tensor] : state) {
    hash = fnv1a(name.data(), name.size(), hash);
    auto cpu = tensor.to(torch::kCPU).contiguous();
    hash = fnv1a(cpu.data_ptr(), static_cast<std::size_t>(cpu.numel() * cpu.element_size()), hash);
  }
  return hex64(hash);
}

}  // namespace dstpm
