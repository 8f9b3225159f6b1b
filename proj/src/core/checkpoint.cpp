#include "led/core/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace led {

namespace {

constexpr std::uint32_t kVersion = 1;

void put_le(std::ostream& os, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_le(std::istream& is, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    const int c = is.get();
    if (c == EOF) throw UsageError("checkpoint: truncated file");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}

std::string shape_token(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(s[i]);
  }
  return out;
}

struct ManifestEntry {
  std::string file;
  std::string shape;
};

std::map<std::string, ManifestEntry> read_manifest(const std::filesystem::path& dir) {
  std::map<std::string, ManifestEntry> m;
  std::ifstream in(dir / "manifest.txt");
  if (!in) return m;
  std::string name, file, shape;
  while (in >> name >> file >> shape) m[name] = {file, shape};
  return m;
}

}  // namespace

void write_tensor_file(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw UsageError("checkpoint: cannot write " + path.string());
  os.write("LEDT", 4);
  put_le(os, kVersion, 4);
  put_le(os, t.rank(), 4);
  for (std::size_t e : t.shape()) put_le(os, e, 8);
  for (double v : t.data()) {
    const float f = static_cast<float>(v);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_le(os, bits, 4);
  }
}

Tensor read_tensor_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw UsageError("checkpoint: cannot read " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "LEDT", 4) != 0) {
    throw UsageError("checkpoint: bad magic in " + path.string());
  }
  const auto version = get_le(is, 4);
  if (version != kVersion) throw UsageError("checkpoint: unsupported version");
  const auto rank = get_le(is, 4);
  Shape shape(rank);
  for (auto& e : shape) e = get_le(is, 8);
  std::vector<double> data(numel_of(shape));
  for (double& v : data) {
    const auto bits = static_cast<std::uint32_t>(get_le(is, 4));
    float f;
    std::memcpy(&f, &bits, 4);
    v = f;
  }
  return Tensor(shape, std::move(data));
}

void save_checkpoint(const std::filesystem::path& dir, const ParamList& params) {
  std::filesystem::create_directories(dir);
  auto manifest = read_manifest(dir);
  for (const auto& [name, t] : params) {
    const std::string file = name + ".ledt";
    write_tensor_file(dir / file, t);
    manifest[name] = {file, shape_token(t.shape())};
  }
  std::ofstream os(dir / "manifest.txt", std::ios::trunc);
  for (const auto& [name, e] : manifest) os << name << ' ' << e.file << ' ' << e.shape << '\n';
}

void load_checkpoint(const std::filesystem::path& dir, const ParamList& params) {
  const auto manifest = read_manifest(dir);
  for (const auto& [name, t] : params) {
    auto it = manifest.find(name);
    if (it == manifest.end()) {
      throw UsageError("checkpoint " + dir.string() + " has no parameter '" + name + "'");
    }
    Tensor loaded = read_tensor_file(dir / it->second.file);
    if (loaded.shape() != t.shape()) {
      throw UsageError("checkpoint: parameter '" + name + "' has shape " +
                       shape_str(loaded.shape()) + ", expected " + shape_str(t.shape()));
    }
    Tensor target = t;
    std::copy(loaded.data().begin(), loaded.data().end(), target.mutable_data().begin());
  }
}

bool checkpoint_has(const std::filesystem::path& dir, const std::string& name) {
  return read_manifest(dir).count(name) > 0;
}

void quantize_like_checkpoint(const ParamList& params) {
  for (const auto& [name, t] : params) {
    Tensor target = t;
    for (double& v : target.mutable_data()) v = static_cast<double>(static_cast<float>(v));
  }
}

}  // namespace led
