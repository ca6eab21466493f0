#include "spiralscope/nn.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace spiralscope {
namespace {

using Kind = CheckpointError::Kind;
constexpr char kMagic[8] = {'S', 'S', 'T', 'C', 'K', 'P', 'T', '1'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <typename T>
  void le(T value) {
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      out_.push_back(static_cast<std::uint8_t>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF));
    }
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}
  std::span<const std::uint8_t> bytes(std::size_t n, const char* what) {
    if (in_.size() - pos_ < n) {
      throw CheckpointError(Kind::Truncated, std::string("checkpoint truncated while reading ") + what);
    }
    auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  template <typename T>
  T le(const char* what) {
    auto b = bytes(sizeof(T), what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return static_cast<T>(v);
  }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

nlohmann::json metadata_json(const ModelConfig& c) {
  return {{"architecture", "microresnet"},
          {"n_classes", c.n_classes},
          {"input_side", c.input_side},
          {"widths", c.widths},
          {"blocks_per_stage", c.blocks_per_stage},
          {"stem_pool", c.stem_pool},
          {"seed", c.seed},
          {"head_seed", c.head_seed}};
}

ModelConfig metadata_config(const nlohmann::json& j) {
  ModelConfig c;
  c.n_classes = j.at("n_classes").get<int>();
  c.input_side = j.at("input_side").get<int>();
  c.widths = j.at("widths").get<std::array<int, 3>>();
  c.blocks_per_stage = j.at("blocks_per_stage").get<int>();
  c.stem_pool = j.at("stem_pool").get<bool>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.head_seed = j.at("head_seed").get<std::uint64_t>();
  return c;
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Model& model) {
  Writer w;
  w.bytes(kMagic, sizeof(kMagic));
  w.le<std::uint32_t>(kCheckpointVersion);
  const std::string meta = metadata_json(model.config()).dump();
  w.le<std::uint32_t>(static_cast<std::uint32_t>(meta.size()));
  w.bytes(meta.data(), meta.size());

  const auto& params = model.parameters();
  w.le<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
  std::uint64_t offset = 0;
  for (const Parameter& p : params) {
    w.le<std::uint32_t>(static_cast<std::uint32_t>(p.name.size()));
    w.bytes(p.name.data(), p.name.size());
    w.le<std::uint32_t>(static_cast<std::uint32_t>(p.value.rank()));
    for (Index e : p.value.shape()) w.le<std::uint64_t>(static_cast<std::uint64_t>(e));
    w.le<std::uint64_t>(offset);
    offset += static_cast<std::uint64_t>(p.value.numel()) * 4;
  }
  w.le<std::uint64_t>(offset);
  for (const Parameter& p : params) {
    for (Index i = 0; i < p.value.numel(); ++i) w.le<std::uint32_t>(std::bit_cast<std::uint32_t>(p.value[i]));
  }
  return w.take();
}

Model deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  auto magic = r.bytes(sizeof(kMagic), "magic");
  if (std::memcmp(magic.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError(Kind::BadMagic, "not an SSTCKPT1 checkpoint (bad magic bytes)");
  }
  const auto version = r.le<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError(Kind::VersionMismatch, "checkpoint format version " + std::to_string(version) +
                                                     ", expected " + std::to_string(kCheckpointVersion));
  }
  const auto meta_len = r.le<std::uint32_t>("metadata length");
  auto meta_bytes = r.bytes(meta_len, "metadata");
  ModelConfig config;
  try {
    config = metadata_config(nlohmann::json::parse(meta_bytes.begin(), meta_bytes.end()));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(Kind::Malformed, std::string("checkpoint metadata unreadable: ") + e.what());
  }

  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset;
  };
  const auto count = r.le<std::uint32_t>("tensor count");
  std::vector<Entry> entries;
  for (std::uint32_t t = 0; t < count; ++t) {
    Entry e;
    const auto name_len = r.le<std::uint32_t>("tensor name length");
    auto name = r.bytes(name_len, "tensor name");
    e.name.assign(name.begin(), name.end());
    const auto rank = r.le<std::uint32_t>("tensor rank");
    if (rank > 8) throw CheckpointError(Kind::Malformed, "tensor " + e.name + " has rank " + std::to_string(rank));
    for (std::uint32_t d = 0; d < rank; ++d) {
      const auto extent = r.le<std::uint64_t>("tensor extent");
      if (extent == 0 || extent > (1ULL << 31)) {
        throw CheckpointError(Kind::Malformed, "tensor " + e.name + " has invalid extent");
      }
      e.shape.push_back(static_cast<Index>(extent));
    }
    e.offset = r.le<std::uint64_t>("tensor offset");
    entries.push_back(std::move(e));
  }
  const auto payload_len = r.le<std::uint64_t>("payload length");
  auto payload = r.bytes(payload_len, "payload");

  std::vector<Parameter> params;
  for (const Entry& e : entries) {
    const std::uint64_t n = static_cast<std::uint64_t>(shape_numel(e.shape));
    if (e.offset > payload_len || payload_len - e.offset < n * 4) {
      throw CheckpointError(Kind::Truncated, "payload too short for tensor " + e.name);
    }
    Tensor<float>::Array v(static_cast<Index>(n));
    const std::uint8_t* src = payload.data() + e.offset;
    for (std::uint64_t i = 0; i < n; ++i) {
      const std::uint32_t bits = static_cast<std::uint32_t>(src[4 * i]) |
                                 (static_cast<std::uint32_t>(src[4 * i + 1]) << 8) |
                                 (static_cast<std::uint32_t>(src[4 * i + 2]) << 16) |
                                 (static_cast<std::uint32_t>(src[4 * i + 3]) << 24);
      v[static_cast<Index>(i)] = std::bit_cast<float>(bits);
    }
    params.push_back({e.name, Tensor<float>(e.shape, std::move(v)), LayerGroup::Early, true});
  }
  try {
    return assemble_model(config, std::move(params));
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(Kind::Malformed, std::string("checkpoint metadata invalid: ") + e.what());
  }
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = serialize_checkpoint(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError(Kind::Io, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError(Kind::Io, "failed writing " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(Kind::Io, "cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace spiralscope
