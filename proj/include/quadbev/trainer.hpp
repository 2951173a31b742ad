#pragma once

#include <set>

#include "quadbev/checkpoint.hpp"
#include "quadbev/dataset.hpp"
#include "quadbev/evalkit.hpp"
#include "quadbev/gradnorm.hpp"
#include "quadbev/model.hpp"
#include "quadbev/optim.hpp"

namespace qbev::train {

enum class StageKind { pretrain = 1, warmup = 2, e2e = 3 };
const char* stage_name(StageKind k);

struct StageConfig {
  StageKind kind = StageKind::pretrain;
  double base_lr = 1e-4;
  double aux_lr = 0;       // warmup only: auxiliary heads
  double backbone_lr = 0;  // e2e only: backbone group
  double weight_decay = 1e-2;
  int epochs = 8;  // per rotation slot in warmup, total otherwise
  std::set<nets::ModuleGroup> frozen;
  std::vector<nets::Task> rotation;
  bool gradnorm_enabled = false;
  int gradnorm_interval = 1;
  bool gradnorm_include_depth = true;
  int batch_size = 2;
  double grad_clip = 35.0;
  losses::LossWeights fixed_weights;

  // Learning-rate map for one step (rotation slot matters in warmup).
  std::map<nets::ModuleGroup, double> lr_map(int slot) const;
  std::string echo() const;
};

struct SchedulePreset {
  std::string name;
  std::array<bool, 3> run{true, true, true};
  StageConfig s1, s2, s3;
  int input_w = 128, input_h = 64;
  int batch_size = 2;
  uint64_t seed = 0;
  const StageConfig& stage(int i) const { return i == 0 ? s1 : (i == 1 ? s2 : s3); }
  StageConfig& stage(int i) { return i == 0 ? s1 : (i == 1 ? s2 : s3); }
  std::string echo() const;
};

// name: "desk", "paper", or "ablation:<baseline|map-pretrain|warm-up|
// backbone-finetune|high-lane-weights|gradient-weighting>"
SchedulePreset make_preset(const std::string& name, uint64_t seed = 0);
const std::vector<std::string>& ablation_names();

struct TrainState {
  long global_step = 0;
  losses::GradNormState gradnorm = losses::GradNormState::make();
  Rng rng;
};

struct StageRunResult {
  std::string checkpoint_path;
  std::string checkpoint_hash;
  double best_score = 0;
  long steps = 0;
  std::vector<losses::LossReport> reports;
  std::vector<std::map<nets::ModuleGroup, double>> lr_log;  // per step
  std::vector<int> slot_log;                                // warmup slot per step
};

// Runs one stage over the train split (best-checkpoint selection on the val
// split), restores the best weights, writes the checkpoint and returns its
// digest. Deterministic in (model weights, data, cfg, state.rng).
StageRunResult run_stage(nets::QuadModel& model, const synth::DatasetReader& data,
                         const StageConfig& cfg, TrainState& state,
                         const std::string& ckpt_path);

struct ScheduleResult {
  std::vector<StageRunResult> stages;
  std::string final_checkpoint;
  std::string loss_log_path;
  std::string manifest_path;
};

// stages_to_run selects a subset (1-based); stages the preset enables but
// the subset skips must already have checkpoints in out_dir (their recorded
// hashes are verified before loading).
ScheduleResult run_schedule(nets::QuadModel& model, const synth::DatasetReader& data,
                            const SchedulePreset& preset, const std::set<int>& stages_to_run,
                            const std::string& out_dir);

}  // namespace qbev::train
