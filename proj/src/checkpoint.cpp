#include "dcn/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <json.hpp>

namespace dcn {

using nlohmann::json;

namespace {
constexpr char kMagic[] = "DCNCKPT1\n";
constexpr std::size_t kMagicLen = sizeof(kMagic) - 1;

void write_u64(std::ostream& out, std::uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = (v >> (8 * i)) & 0xff;
  out.write(reinterpret_cast<const char*>(buf), 8);
}

std::uint64_t read_u64(std::istream& in) {
  unsigned char buf[8];
  in.read(reinterpret_cast<char*>(buf), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(buf[i]) << (8 * i);
  return v;
}
}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : arrays)
    if (n == name) return &t;
  return nullptr;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  json manifest;
  manifest["version"] = ckpt.version;
  manifest["config"] = ckpt.config_json;
  manifest["iteration"] = ckpt.iteration;
  manifest["rng_state"] = ckpt.rng_state;
  json arrays = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.arrays) {
    arrays.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.numel() * sizeof(double);
  }
  manifest["arrays"] = arrays;
  std::string header = manifest.dump();  // object keys sort; byte-stable

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("checkpoint: cannot write '" + path + "'");
  out.write(kMagic, kMagicLen);
  write_u64(out, header.size());
  out.write(header.data(), std::streamsize(header.size()));
  for (const auto& [name, t] : ckpt.arrays) {
    static_assert(sizeof(double) == 8);
    out.write(reinterpret_cast<const char*>(t.data().data()),
              std::streamsize(t.numel() * sizeof(double)));
  }
  if (!out) throw CheckpointError("checkpoint: write failed for '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open '" + path + "'");
  char magic[kMagicLen];
  in.read(magic, kMagicLen);
  if (!in || std::memcmp(magic, kMagic, kMagicLen) != 0)
    throw CheckpointError("checkpoint: bad magic in '" + path + "'");
  std::uint64_t header_len = read_u64(in);
  std::string header(header_len, '\0');
  in.read(header.data(), std::streamsize(header_len));
  if (!in) throw CheckpointError("checkpoint: truncated header in '" + path + "'");

  json manifest;
  try {
    manifest = json::parse(header);
  } catch (const json::parse_error& e) {
    throw CheckpointError(std::string("checkpoint: bad manifest: ") + e.what());
  }

  Checkpoint ckpt;
  ckpt.version = manifest.at("version").get<std::int32_t>();
  ckpt.config_json = manifest.at("config").get<std::string>();
  ckpt.iteration = manifest.at("iteration").get<std::int64_t>();
  ckpt.rng_state = manifest.at("rng_state").get<std::string>();
  for (const auto& entry : manifest.at("arrays")) {
    std::string name = entry.at("name").get<std::string>();
    auto shape = entry.at("shape").get<std::vector<std::size_t>>();
    Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.data().data()),
            std::streamsize(t.numel() * sizeof(double)));
    if (!in) throw CheckpointError("checkpoint: truncated data in '" + path + "'");
    ckpt.arrays.emplace_back(std::move(name), std::move(t));
  }
  return ckpt;
}

}  // namespace dcn
