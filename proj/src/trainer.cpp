#include "quadbev/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "quadbev/arrayio.hpp"
#include "quadbev/error.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace qbev::train {

const char* stage_name(StageKind k) {
  switch (k) {
    case StageKind::pretrain: return "pretrain";
    case StageKind::warmup: return "warmup";
    case StageKind::e2e: return "e2e";
  }
  return "?";
}

std::map<nets::ModuleGroup, double> StageConfig::lr_map(int slot) const {
  using nets::ModuleGroup;
  std::map<ModuleGroup, double> lr;
  switch (kind) {
    case StageKind::pretrain:
      lr[ModuleGroup::backbone] = base_lr;
      lr[ModuleGroup::depth_estimator] = base_lr;
      lr[ModuleGroup::bev_encoder] = base_lr;
      lr[ModuleGroup::head_map] = base_lr;
      break;
    case StageKind::warmup: {
      check_contract(!rotation.empty(), "warmup stage needs a rotation");
      const nets::Task primary = rotation[static_cast<size_t>(slot) % rotation.size()];
      for (int t = 0; t < nets::kNumTasks; ++t) {
        const auto task = static_cast<nets::Task>(t);
        lr[nets::head_group(task)] = task == primary ? base_lr : aux_lr;
      }
      break;
    }
    case StageKind::e2e:
      for (int g = 0; g < nets::kNumGroups; ++g) {
        const auto group = static_cast<nets::ModuleGroup>(g);
        if (group == ModuleGroup::view_projector || group == ModuleGroup::temporal_fusor)
          continue;  // no parameters
        lr[group] = group == ModuleGroup::backbone ? backbone_lr : base_lr;
      }
      break;
  }
  for (nets::ModuleGroup g : frozen) lr.erase(g);
  return lr;
}

std::string StageConfig::echo() const {
  std::ostringstream os;
  os << stage_name(kind) << ": base_lr=" << base_lr;
  if (kind == StageKind::warmup) os << " aux_lr=" << aux_lr;
  if (kind == StageKind::e2e) os << " backbone_lr=" << backbone_lr;
  os << " weight_decay=" << weight_decay;
  os << (kind == StageKind::warmup ? " epochs_per_task=" : " epochs=") << epochs;
  if (gradnorm_enabled) os << " gradnorm=on";
  return os.str();
}

std::string SchedulePreset::echo() const {
  std::ostringstream os;
  os << "preset " << name << "\n";
  for (int i = 0; i < 3; ++i)
    if (run[static_cast<size_t>(i)]) os << "  stage" << (i + 1) << " " << stage(i).echo() << "\n";
  os << "  batch_size=" << batch_size << " input=" << input_w << "x" << input_h << "\n";
  return os.str();
}

const std::vector<std::string>& ablation_names() {
  static const std::vector<std::string> names{"baseline",           "map-pretrain",
                                              "warm-up",            "backbone-finetune",
                                              "high-lane-weights",  "gradient-weighting"};
  return names;
}

SchedulePreset make_preset(const std::string& name, uint64_t seed) {
  SchedulePreset p;
  p.name = name;
  p.seed = seed;

  p.s1.kind = StageKind::pretrain;
  p.s1.base_lr = 1e-4;
  p.s1.weight_decay = 1e-2;

  p.s2.kind = StageKind::warmup;
  p.s2.base_lr = 2e-4;
  p.s2.aux_lr = 2e-5;
  p.s2.weight_decay = 1e-2;
  p.s2.frozen = {nets::ModuleGroup::backbone, nets::ModuleGroup::depth_estimator,
                 nets::ModuleGroup::bev_encoder};
  p.s2.rotation = {nets::Task::det, nets::Task::map, nets::Task::lane, nets::Task::occ};

  p.s3.kind = StageKind::e2e;
  p.s3.base_lr = 1e-4;
  p.s3.backbone_lr = 1e-5;
  p.s3.weight_decay = 1e-2;
  p.s3.gradnorm_enabled = true;

  if (name == "paper") {
    p.s1.epochs = 20;
    p.s2.epochs = 10;
    p.s3.epochs = 10;
    p.batch_size = 8;
    p.input_w = 704;
    p.input_h = 256;
  } else if (name == "desk") {
    p.s1.epochs = 8;
    p.s2.epochs = 4;
    p.s3.epochs = 8;
    p.batch_size = 2;
  } else if (name.rfind("ablation:", 0) == 0) {
    const std::string which = name.substr(9);
    p.s1.epochs = 8;
    p.s2.epochs = 4;
    p.s3.epochs = 8;
    p.batch_size = 2;
    p.s3.gradnorm_enabled = false;
    if (which == "baseline") {
      p.run = {false, false, true};
      p.s3.backbone_lr = p.s3.base_lr;
    } else if (which == "map-pretrain") {
      p.run = {true, false, true};
      p.s3.backbone_lr = p.s3.base_lr;
    } else if (which == "warm-up") {
      p.run = {true, true, true};
      p.s3.backbone_lr = p.s3.base_lr;
    } else if (which == "backbone-finetune") {
      p.run = {true, true, true};
    } else if (which == "high-lane-weights") {
      p.run = {true, true, true};
      p.s3.fixed_weights.gamma = 4.0;
    } else if (which == "gradient-weighting") {
      p.run = {true, true, true};
      p.s3.gradnorm_enabled = true;
    } else {
      throw QbError(ErrCode::usage, "unknown ablation preset: " + which);
    }
  } else {
    throw QbError(ErrCode::usage, "unknown preset: " + name);
  }
  for (int i = 0; i < 3; ++i) {
    p.stage(i).batch_size = p.batch_size;
  }
  return p;
}

namespace {

double l2_norm(const Tensor& t) {
  double s = 0;
  for (long i = 0; i < t.numel(); ++i) s += t[i] * t[i];
  return std::sqrt(s);
}

struct LoadedData {
  std::vector<std::pair<synth::Sample, synth::GtRasters>> samples;
  std::vector<std::vector<int>> history;  // record indices, newest first
  std::vector<int> train_idx, val_idx;
};

LoadedData preload(const synth::DatasetReader& data, int t_hist) {
  LoadedData out;
  for (int i = 0; i < data.size(); ++i) {
    out.samples.push_back(data.load(i));
    out.history.push_back(data.history_indices(i, t_hist));
  }
  synth::split_dataset(data.manifest(), out.train_idx, out.val_idx);
  check(!out.train_idx.empty(), ErrCode::contract, "dataset has no training sequences");
  return out;
}

std::array<bool, nets::kNumTasks> stage_task_mask(StageKind kind) {
  if (kind == StageKind::pretrain) return {false, true, false, false};
  return {true, true, true, true};
}

std::array<double, 5> stage_weights(const StageConfig& cfg, const TrainState& state) {
  if (cfg.kind == StageKind::pretrain)
    return {0.0, cfg.fixed_weights.beta, 0.0, 0.0, cfg.fixed_weights.epsilon};
  if (cfg.kind == StageKind::e2e && cfg.gradnorm_enabled) {
    std::array<double, 5> w{};
    for (int i = 0; i < 5; ++i)
      w[static_cast<size_t>(i)] =
          i < state.gradnorm.n_tasks ? state.gradnorm.w[static_cast<size_t>(i)] : 1.0;
    return w;
  }
  return cfg.fixed_weights.as_array();
}

}  // namespace

StageRunResult run_stage(nets::QuadModel& model, const synth::DatasetReader& data,
                         const StageConfig& cfg, TrainState& state,
                         const std::string& ckpt_path) {
  check(data.size() > 0, ErrCode::contract, "dataset is empty");
  StageRunResult result;
  LoadedData loaded = preload(data, model.config().t_hist);

  model.set_frozen(cfg.frozen);
  model.set_train_mode(true);
  AdamW opt(model.params(), AdamWConfig{0.9, 0.999, 1e-8, cfg.weight_decay});

  if (cfg.kind == StageKind::e2e && cfg.gradnorm_enabled) {
    state.gradnorm = losses::GradNormState::make(cfg.gradnorm_include_depth ? 5 : 4);
  }

  const int total_epochs = cfg.kind == StageKind::warmup
                               ? cfg.epochs * static_cast<int>(cfg.rotation.size())
                               : cfg.epochs;
  const auto task_mask = stage_task_mask(cfg.kind);

  double best_score = -1.0;
  std::vector<Tensor> best_params, best_buffers;
  auto snapshot_best = [&]() {
    best_params.clear();
    best_buffers.clear();
    for (int i = 0; i < model.params().size(); ++i) best_params.push_back(model.params().at(i).value);
    for (int i = 0; i < model.buffers().size(); ++i)
      best_buffers.push_back(model.buffers().at(i).value);
  };
  snapshot_best();  // fallback when the stage has zero epochs

  for (int epoch = 0; epoch < total_epochs; ++epoch) {
    const int slot = cfg.kind == StageKind::warmup ? epoch / std::max(1, cfg.epochs) : 0;
    const auto lr = cfg.lr_map(slot);
    opt.set_group_lr(lr);

    std::vector<int> order = loaded.train_idx;
    state.rng.shuffle(order);

    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      ad::Tape tape;
      model.begin_step(tape);

      std::array<ad::Var, 5> parts;
      bool depth_any_valid = false;
      for (size_t bi = start; bi < end; ++bi) {
        const int idx = order[bi];
        const auto& [sample, gt] = loaded.samples[static_cast<size_t>(idx)];
        std::vector<nets::HistoryFrame> history;
        for (int hidx : loaded.history[static_cast<size_t>(idx)]) {
          history.push_back({model.raw_pooled_bev(loaded.samples[static_cast<size_t>(hidx)].first),
                             loaded.samples[static_cast<size_t>(hidx)].first.ego_pose});
        }
        nets::ForwardOut fwd = model.forward(tape, sample, history, task_mask);

        std::array<ad::Var, 5> s{};
        if (task_mask[0])
          s[0] = losses::detection_loss(tape, fwd.heads.det_heatmap, fwd.heads.det_reg, gt,
                                        model.config().grid, cfg.fixed_weights.det)
                     .total;
        if (task_mask[1]) s[1] = losses::map_loss(tape, fwd.heads.map_logits, gt.map_masks);
        if (task_mask[2])
          s[2] = losses::lane_loss(tape, fwd.heads.lane_conf, fwd.heads.lane_offset,
                                   fwd.heads.lane_embed, fwd.heads.lane_cls, gt,
                                   cfg.fixed_weights.lane)
                     .total;
        if (task_mask[3])
          s[3] = losses::occ_loss(tape, fwd.heads.occ_logits, gt.occ_grid,
                                  model.config().c_occ_total());
        auto dl = losses::depth_loss(tape, fwd.depth_logits, gt.depth_bins);
        s[4] = dl.loss;
        depth_any_valid = depth_any_valid || dl.any_valid;

        for (int i = 0; i < 5; ++i) {
          if (!s[static_cast<size_t>(i)].valid()) continue;
          parts[static_cast<size_t>(i)] =
              parts[static_cast<size_t>(i)].valid()
                  ? ad::add(parts[static_cast<size_t>(i)], s[static_cast<size_t>(i)])
                  : s[static_cast<size_t>(i)];
        }
      }
      const double inv_batch = 1.0 / static_cast<double>(end - start);
      for (auto& part : parts)
        if (part.valid()) part = ad::scale(part, inv_batch);

      losses::LossReport report;
      // combine with the current weights; a GradNorm update below takes
      // effect from the next step, so step 0 trains with equal weights
      auto comb = losses::combine(tape, parts, stage_weights(cfg, state));

      const bool do_gradnorm = cfg.kind == StageKind::e2e && cfg.gradnorm_enabled &&
                               state.global_step % cfg.gradnorm_interval == 0;
      if (do_gradnorm) {
        const int n = state.gradnorm.n_tasks;
        std::vector<double> raw(static_cast<size_t>(n), 0.0), gnorm(static_cast<size_t>(n), 0.0);
        const int ref_leaf = model.param_node(model.ref_param_index());
        for (int i = 0; i < n; ++i) {
          if (!comb.weighted[static_cast<size_t>(i)].valid()) continue;
          raw[static_cast<size_t>(i)] = comb.report.raw[static_cast<size_t>(i)];
          tape.zero_grads();
          tape.backward(comb.weighted[static_cast<size_t>(i)], model.ref_consumer_node());
          gnorm[static_cast<size_t>(i)] =
              tape.has_grad(ref_leaf) ? l2_norm(tape.grad(ref_leaf)) : 0.0;
        }
        const auto info = losses::gradnorm_update(state.gradnorm, raw, gnorm);
        report.l0_fallback = info.l0_fallback_warn;
        for (int i = 0; i < n && i < 5; ++i)
          report.gnorm[static_cast<size_t>(i)] = gnorm[static_cast<size_t>(i)];
      }

      tape.zero_grads();
      tape.backward(comb.combined);
      std::vector<const Tensor*> grads;
      for (int i = 0; i < model.params().size(); ++i) {
        const int node = model.param_node(i);
        grads.push_back(tape.has_grad(node) ? &tape.grad(node) : nullptr);
      }
      opt.step(grads, cfg.grad_clip);

      report.step = state.global_step;
      report.raw = comb.report.raw;
      report.weights = comb.report.weights;
      report.combined = comb.report.combined;
      report.depth_valid = depth_any_valid;
      result.reports.push_back(report);
      result.lr_log.push_back(lr);
      result.slot_log.push_back(slot);
      ++state.global_step;
      ++result.steps;
    }

    // best-checkpoint selection on the validation split
    const auto& val = loaded.val_idx.empty() ? loaded.train_idx : loaded.val_idx;
    const double score =
        evalkit::evaluate_model(model, data, val, {true, true, true, true}).combined_score();
    model.set_train_mode(true);
    if (score > best_score) {
      best_score = score;
      snapshot_best();
    }
  }

  for (int i = 0; i < model.params().size(); ++i)
    model.params().at(i).value = best_params[static_cast<size_t>(i)];
  for (int i = 0; i < model.buffers().size(); ++i)
    model.buffers().at(i).value = best_buffers[static_cast<size_t>(i)];

  CheckpointMeta meta{static_cast<int>(cfg.kind), total_epochs, state.global_step};
  save_checkpoint(ckpt_path, model, &opt, &state.gradnorm, &state.rng, meta);
  result.checkpoint_path = ckpt_path;
  result.checkpoint_hash = hex64(io::file_fnv1a(ckpt_path));
  result.best_score = std::max(best_score, 0.0);
  return result;
}

ScheduleResult run_schedule(nets::QuadModel& model, const synth::DatasetReader& data,
                            const SchedulePreset& preset, const std::set<int>& stages_to_run,
                            const std::string& out_dir) {
  fs::create_directories(out_dir);
  ScheduleResult result;
  TrainState state;
  state.rng = Rng(preset.seed * 0x9e3779b97f4a7c15ull + 12345);

  // previously recorded hashes, for chain verification on subset runs
  std::map<std::string, std::string> prior_hash;
  const std::string manifest_file = out_dir + "/schedule_manifest.json";
  if (fs::exists(manifest_file)) {
    std::ifstream f(manifest_file);
    json j;
    try {
      f >> j;
      for (const auto& s : j.value("stages", json::array()))
        prior_hash[s.at("checkpoint")] = s.at("hash");
    } catch (...) {
    }
  }

  std::vector<losses::LossReport> all_reports;
  json manifest;
  manifest["preset"] = preset.name;
  manifest["seed"] = preset.seed;
  manifest["dataset"] = data.dir();
  manifest["dataset_manifest_hash"] =
      hex64(io::file_fnv1a(synth::manifest_path(data.dir())));
  manifest["stages"] = json::array();

  for (int stage_i = 0; stage_i < 3; ++stage_i) {
    if (!preset.run[static_cast<size_t>(stage_i)]) continue;
    const std::string ckpt = out_dir + "/stage" + std::to_string(stage_i + 1) + ".qbck";
    if (stages_to_run.count(stage_i + 1)) {
      try {
        StageRunResult r =
            run_stage(model, data, preset.stage(stage_i), state, ckpt);
        result.final_checkpoint = r.checkpoint_path;
        for (const auto& rep : r.reports) all_reports.push_back(rep);
        json sj;
        sj["stage"] = stage_i + 1;
        sj["kind"] = stage_name(preset.stage(stage_i).kind);
        sj["config"] = preset.stage(stage_i).echo();
        sj["checkpoint"] = r.checkpoint_path;
        sj["hash"] = r.checkpoint_hash;
        sj["best_score"] = r.best_score;
        sj["steps"] = r.steps;
        manifest["stages"].push_back(sj);
        result.stages.push_back(std::move(r));
      } catch (const QbError& e) {
        throw QbError(e.code(), std::string("stage") + std::to_string(stage_i + 1) + ": " +
                                    e.what());
      }
    } else {
      // skipped by the subset: the stage must already have a checkpoint
      check(fs::exists(ckpt), ErrCode::io,
            "missing stage" + std::to_string(stage_i + 1) + " checkpoint: " + ckpt);
      const std::string hash = hex64(io::file_fnv1a(ckpt));
      auto it = prior_hash.find(ckpt);
      check(it == prior_hash.end() || it->second == hash, ErrCode::corrupt,
            "checkpoint hash mismatch for " + ckpt);
      auto loaded = load_checkpoint(ckpt, model, nullptr);
      state.global_step = loaded.meta.global_step;
      if (loaded.has_gradnorm) state.gradnorm = loaded.gradnorm;
      if (loaded.has_rng) state.rng.deserialize(loaded.rng_state);
      json sj;
      sj["stage"] = stage_i + 1;
      sj["kind"] = stage_name(preset.stage(stage_i).kind);
      sj["checkpoint"] = ckpt;
      sj["hash"] = hash;
      sj["loaded"] = true;
      manifest["stages"].push_back(sj);
    }
  }

  result.loss_log_path = out_dir + "/loss_log.csv";
  {
    std::ofstream f(result.loss_log_path);
    check(f.good(), ErrCode::io, "cannot write " + result.loss_log_path);
    f << losses::LossReport::csv_header() << "\n";
    for (const auto& rep : all_reports) f << rep.csv_row() << "\n";
  }
  manifest["loss_log"] = result.loss_log_path;
  result.manifest_path = manifest_file;
  {
    std::ofstream f(manifest_file);
    check(f.good(), ErrCode::io, "cannot write " + manifest_file);
    f << manifest.dump(2) << "\n";
  }
  return result;
}

}  // namespace qbev::train
