#pragma once

#include <optional>
#include <string>

#include "quadbev/gradnorm.hpp"
#include "quadbev/model.hpp"
#include "quadbev/optim.hpp"
#include "quadbev/rng.hpp"

namespace qbev::train {

inline constexpr uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  int stage_id = 0;
  int epoch = 0;
  long global_step = 0;
};

// Parameters and buffers are stored as f64 payloads so save -> load -> forward
// reproduces pre-save outputs bit-exactly.
void save_checkpoint(const std::string& path, const nets::QuadModel& model,
                     const AdamW* optimizer, const losses::GradNormState* gradnorm,
                     const Rng* rng, const CheckpointMeta& meta);

struct LoadedCheckpoint {
  CheckpointMeta meta;
  bool has_optimizer = false;
  bool has_gradnorm = false;
  losses::GradNormState gradnorm;
  bool has_rng = false;
  std::string rng_state;
};

LoadedCheckpoint load_checkpoint(const std::string& path, nets::QuadModel& model,
                                 AdamW* optimizer);

}  // namespace qbev::train
