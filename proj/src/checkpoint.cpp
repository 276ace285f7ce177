#include "dcount/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>

#include "dcount/error.hpp"
#include "dcount/hash.hpp"

namespace fs = std::filesystem;

namespace dcount {

namespace {

constexpr char kMagic[8] = {'D', 'C', 'K', 'P', 'T', '0', '0', '1'};

template <typename T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const fs::path& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw DependencyError("truncated checkpoint " + path.string());
  return v;
}

std::ifstream open_checked(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DependencyError("checkpoint not found: " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) {
    throw DependencyError("not a checkpoint file: " + path.string());
  }
  return in;
}

nlohmann::json read_header(std::istream& in, const fs::path& path) {
  const auto len = get<std::uint64_t>(in, path);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw DependencyError("truncated checkpoint " + path.string());
  return nlohmann::json::parse(text);
}

}  // namespace

void write_file_atomic(const fs::path& path, const std::string& contents) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << contents;
    if (!out) throw Error("io", "cannot write " + tmp.string());
  }
  fs::rename(tmp, path);
}

void write_checkpoint(const fs::path& path, const nlohmann::json& header,
                      const std::vector<nn::Param*>& params) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out.write(kMagic, 8);
    const std::string text = header.dump();
    put<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
    for (const nn::Param* p : params) {
      put<std::uint32_t>(out, static_cast<std::uint32_t>(p->name.size()));
      out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
      const Shape& s = p->value.shape();
      for (int d : {s.n, s.c, s.h, s.w}) put<std::int32_t>(out, d);
      out.write(reinterpret_cast<const char*>(p->value.data()),
                static_cast<std::streamsize>(p->value.size() * sizeof(float)));
    }
    if (!out) throw Error("io", "cannot write " + tmp.string());
  }
  fs::rename(tmp, path);
}

nlohmann::json read_checkpoint_header(const fs::path& path) {
  std::ifstream in = open_checked(path);
  return read_header(in, path);
}

nlohmann::json read_checkpoint(const fs::path& path,
                               const std::vector<nn::Param*>& params,
                               bool allow_partial) {
  std::ifstream in = open_checked(path);
  nlohmann::json header = read_header(in, path);
  std::map<std::string, nn::Param*> by_name;
  for (nn::Param* p : params) by_name[p->name] = p;

  const auto count = get<std::uint32_t>(in, path);
  std::size_t loaded = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = get<std::uint32_t>(in, path);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    Shape s;
    s.n = get<std::int32_t>(in, path);
    s.c = get<std::int32_t>(in, path);
    s.h = get<std::int32_t>(in, path);
    s.w = get<std::int32_t>(in, path);
    std::vector<float> buf(s.numel());
    in.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!in) throw DependencyError("truncated checkpoint " + path.string());
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      if (allow_partial) continue;
      throw DependencyError(path.string() + ": unexpected tensor " + name);
    }
    if (!(it->second->value.shape() == s)) {
      throw DependencyError(path.string() + ": tensor " + name + " has shape " +
                            s.str() + ", model expects " +
                            it->second->value.shape().str());
    }
    std::copy(buf.begin(), buf.end(), it->second->value.data());
    ++loaded;
  }
  if (!allow_partial && loaded != params.size()) {
    throw DependencyError(path.string() + ": checkpoint is missing " +
                          std::to_string(params.size() - loaded) + " tensors");
  }
  return header;
}

std::string params_hash(const std::vector<nn::Param*>& params) {
  Sha256 h;
  for (const nn::Param* p : params) {
    h.update(p->name);
    const Shape& s = p->value.shape();
    for (int d : {s.n, s.c, s.h, s.w}) h.update_pod(d);
    h.update(p->value.data(), p->value.size() * sizeof(float));
  }
  return h.hex();
}

}  // namespace dcount
