#include <fstream>
#include <sstream>

#include <json.hpp>

#include "fovea/model.hpp"

namespace fovea {

namespace {
constexpr char kMagic[4] = {'F', 'O', 'V', 'N'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kMaxText = 1u << 24;

void write_text(std::ostream& out, const std::string& s) {
  binary::write_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_text(std::istream& in, std::size_t& offset, const char* what) {
  const std::size_t at = offset;
  const std::uint32_t n = binary::read_u32(in, offset);
  if (n > kMaxText) throw ParseError(std::string(what) + " length " + std::to_string(n) + " too large at offset " + std::to_string(at));
  std::string s(n, '\0');
  binary::read_exact(in, s.data(), n, offset);
  return s;
}
}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ostringstream out(std::ios::binary);
  out.write(kMagic, 4);
  binary::write_u32(out, kVersion);
  write_text(out, ckpt.network.spec().describe());
  for (const auto& p : ckpt.network.params()) {
    if (p.weights.empty()) continue;
    write_tensor(out, p.weights);
    write_tensor(out, p.bias);
  }
  const nlohmann::json meta = {
      {"epochs", ckpt.meta.epochs},
      {"seed", ckpt.meta.seed},
      {"final_accuracy", ckpt.meta.final_accuracy},
      {"final_loss", ckpt.meta.final_loss},
      {"attempts", ckpt.meta.attempts},
  };
  write_text(out, meta.dump());
  std::ofstream file(path, std::ios::binary);
  if (!file) throw Error("cannot open " + path + " for writing");
  const std::string bytes = out.str();
  file.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!file) throw Error("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  std::size_t offset = 0;
  try {
    char magic[4];
    binary::read_exact(in, magic, 4, offset);
    if (std::string(magic, 4) != std::string(kMagic, 4)) throw ParseError("bad checkpoint magic at offset 0");
    const std::uint32_t version = binary::read_u32(in, offset);
    if (version != kVersion) {
      throw ParseError("unsupported version " + std::to_string(version) + " at offset 4");
    }
    const std::size_t spec_at = offset;
    ModelSpec spec;
    try {
      spec = ModelSpec::parse(read_text(in, offset, "model description"));
    } catch (const ShapeError& e) {
      throw ParseError("invalid model description at offset " + std::to_string(spec_at) + ": " + e.what());
    }
    Network net(spec);
    for (auto& p : net.params()) {
      if (p.weights.empty()) continue;
      const std::size_t at = offset;
      Tensor w = read_tensor(in, offset);
      Tensor b = read_tensor(in, offset);
      if (w.shape() != p.weights.shape() || b.shape() != p.bias.shape()) {
        throw ParseError("weight tensor shape mismatch at offset " + std::to_string(at));
      }
      p.weights = std::move(w);
      p.bias = std::move(b);
    }
    const std::size_t meta_at = offset;
    const auto meta = nlohmann::json::parse(read_text(in, offset, "metadata"), nullptr, false);
    if (meta.is_discarded() || !meta.is_object()) {
      throw ParseError("malformed metadata JSON at offset " + std::to_string(meta_at));
    }
    Checkpoint ck{std::move(net), {}};
    ck.meta.epochs = meta.value("epochs", 0);
    ck.meta.seed = meta.value("seed", std::uint64_t{0});
    ck.meta.final_accuracy = meta.value("final_accuracy", 0.0);
    ck.meta.final_loss = meta.value("final_loss", 0.0);
    ck.meta.attempts = meta.value("attempts", 1);
    return ck;
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.what());
  }
}

}  // namespace fovea
