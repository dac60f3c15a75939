#include "apar/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "apar/digest.hpp"
#include "apar/error.hpp"

namespace apar {
namespace {

constexpr char kMagic[8] = {'A', 'P', 'A', 'R', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename U>
void put(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return v;
  }

  std::string take(std::uint64_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == end_; }

 private:
  void need(std::uint64_t n) const {
    if (n > end_ - pos_) throw CheckpointError("checkpoint is truncated or malformed");
  }

  const std::string& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace

const Tensor<float>* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kVersion);
  const std::string meta = ckpt.metadata.dump();
  put<std::uint64_t>(out, meta.size());
  out += meta;
  put<std::uint64_t>(out, ckpt.tensors.size());
  for (const auto& [name, t] : ckpt.tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint64_t>(out, t.rows());
    put<std::uint64_t>(out, t.cols());
    for (float v : t.values()) put<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  }
  put<std::uint64_t>(out, fnv1a64(out));
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof(kMagic) + 4 + 8 + 8 + 8) {
    throw CheckpointError("checkpoint is truncated (" + std::to_string(bytes.size()) + " bytes)");
  }
  if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("not a checkpoint file (bad magic)");
  }
  const std::size_t body = bytes.size() - 8;
  Reader tail(bytes.substr(body), 8);
  if (tail.get<std::uint64_t>() != fnv1a64(std::string_view(bytes).substr(0, body))) {
    throw CheckpointError("checkpoint digest mismatch (file is corrupted or truncated)");
  }
  Reader r(bytes, body);
  r.take(sizeof(kMagic));
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  try {
    ckpt.metadata = nlohmann::json::parse(r.take(r.get<std::uint64_t>()));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
  }
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.take(r.get<std::uint32_t>());
    const auto rows = r.get<std::uint64_t>();
    const auto cols = r.get<std::uint64_t>();
    if (cols != 0 && rows > (std::uint64_t{1} << 40) / cols) {
      throw CheckpointError("tensor " + name + " has an implausible shape");
    }
    Tensor<float> t(rows, cols);
    for (auto& v : t.values()) v = std::bit_cast<float>(r.get<std::uint32_t>());
    ckpt.tensors.emplace_back(std::move(name), std::move(t));
  }
  if (!r.done()) throw CheckpointError("checkpoint has trailing bytes");
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path,
                           const std::optional<std::string>& expected_schema_digest) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  Checkpoint ckpt = decode_checkpoint(buf.str());
  if (expected_schema_digest) {
    const auto it = ckpt.metadata.find("schema_digest");
    const std::string stored = it != ckpt.metadata.end() && it->is_string() ? it->get<std::string>() : "";
    if (stored != *expected_schema_digest) {
      throw CheckpointError("schema digest mismatch: checkpoint has '" + stored +
                            "', dataset has '" + *expected_schema_digest + "'");
    }
  }
  return ckpt;
}

Checkpoint make_checkpoint(const ModelParams<float>& model, const GateParams<float>* gate,
                           const CorrelationModel* corr, nlohmann::json metadata) {
  Checkpoint ckpt;
  ckpt.metadata = std::move(metadata);
  model.visit([&](const std::string& name, const Tensor<float>& t) {
    ckpt.tensors.emplace_back(name, t);
  });
  if (gate) ckpt.tensors.emplace_back("gate.logits", gate->logits);
  if (corr) ckpt.tensors.emplace_back("gate.correlation", corr->correlation.cast<float>());
  return ckpt;
}

void restore_model(const Checkpoint& ckpt, ModelParams<float>& model) {
  model.visit([&](const std::string& name, Tensor<float>& t) {
    const Tensor<float>* src = ckpt.find(name);
    if (src == nullptr) throw CheckpointError("checkpoint lacks tensor " + name);
    if (!src->same_shape(t)) {
      throw CheckpointError("shape mismatch for " + name + ": checkpoint " +
                            std::to_string(src->rows()) + "x" + std::to_string(src->cols()) +
                            ", model " + std::to_string(t.rows()) + "x" +
                            std::to_string(t.cols()));
    }
    t = *src;
  });
}

bool restore_gate(const Checkpoint& ckpt, GateParams<float>& gate) {
  const Tensor<float>* src = ckpt.find("gate.logits");
  if (src == nullptr) return false;
  if (!src->same_shape(gate.logits)) throw CheckpointError("shape mismatch for gate.logits");
  gate.logits = *src;
  return true;
}

}  // namespace apar
