#pragma once

// Binary checkpoint: "APARCKPT", u32 version, u64-prefixed metadata JSON,
// u64 tensor count, then per tensor a u32-prefixed name, u64 rows, u64 cols
// and float32 payload; a trailing u64 FNV-1a digest covers everything before
// it. Integers and floats are little-endian.

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "apar/copula_gate.hpp"
#include "apar/model.hpp"

namespace apar {

struct Checkpoint {
  // config_hash, schema_digest, epoch, phase, metric, plus free-form extras.
  nlohmann::json metadata;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  const Tensor<float>* find(const std::string& name) const;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
// Throws CheckpointError on truncation, bad magic or version, digest mismatch
// and malformed records.
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
// When expected_schema_digest is set it must equal metadata.schema_digest.
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           const std::optional<std::string>& expected_schema_digest = {});

// Collects model tensors, and optionally the gate logits and the correlation
// matrix (as "gate.correlation").
Checkpoint make_checkpoint(const ModelParams<float>& model, const GateParams<float>* gate,
                           const CorrelationModel* corr, nlohmann::json metadata);

// Copies named tensors into an already shaped model. Missing names or shape
// differences throw CheckpointError; tensors the model lacks are ignored.
void restore_model(const Checkpoint& ckpt, ModelParams<float>& model);
// Gate logits into `gate` (shape-checked). Returns false when absent.
bool restore_gate(const Checkpoint& ckpt, GateParams<float>& gate);

}  // namespace apar
