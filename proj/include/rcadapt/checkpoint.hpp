#pragma once

#include <filesystem>
#include <memory>
#include <optional>

#include "json.hpp"

#include "rcadapt/corpus.hpp"
#include "rcadapt/encoder.hpp"

namespace rcadapt {

inline constexpr int kCheckpointSchema = 1;

// A checkpoint directory holds
//   params.bin  raw little-endian doubles of every parameter in canonical order,
//               followed by the batch-norm running mean and variance
//   meta.json   {"schema", "config", "step", "seed", "rng_state", "parameters"}
//   vocab.txt   one token per line (optional)
void save_checkpoint(const std::filesystem::path& dir, SpanModel& model, const Vocabulary* vocab = nullptr);

struct LoadedCheckpoint {
  std::unique_ptr<SpanModel> model;
  std::optional<Vocabulary> vocab;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

// In-memory copy of a toy-transformer model, including batch-norm statistics,
// step counter and generator state.
std::unique_ptr<SpanModel> clone_model(SpanModel& model);

nlohmann::json to_json(const EncoderConfig& config);
EncoderConfig encoder_config_from_json(const nlohmann::json& j);

}  // namespace rcadapt
