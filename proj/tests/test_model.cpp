#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "quadbev/checkpoint.hpp"
#include "quadbev/losses.hpp"
#include "quadbev/model.hpp"
#include "quadbev/optim.hpp"

using namespace qbev;
using namespace qbev::nets;

namespace {

ModelConfig tiny_config(uint64_t seed = 1) {
  ModelConfig cfg;
  cfg.n_cameras = 2;
  cfg.img_w = 32;
  cfg.img_h = 16;
  cfg.feature_stride = 8;
  cfg.backbone_widths = {4, 6, 8};
  cfg.grid.x_min = cfg.grid.y_min = -4;
  cfg.grid.x_max = cfg.grid.y_max = 4;
  cfg.grid.cell_size = 0.5;
  cfg.grid.z_min = -2;
  cfg.grid.z_max = 4;
  cfg.grid.n_z = 4;
  cfg.grid.d_min = 1;
  cfg.grid.d_max = 8;
  cfg.grid.n_depth_bins = 4;
  cfg.t_hist = 2;
  cfg.c_bev = 8;
  cfg.c_det = 2;
  cfg.c_lane_cls = 2;
  cfg.embed_dim = 3;
  cfg.head_width = 6;
  cfg.occ_head_width = 6;
  cfg.seed = seed;
  return cfg;
}

synth::Sample tiny_sample(const ModelConfig& cfg, uint64_t seed = 3, bool identical_cams = false) {
  synth::Sample s;
  Rng rng(seed);
  for (int c = 0; c < cfg.n_cameras; ++c) {
    Tensor img({3, cfg.img_h, cfg.img_w});
    if (identical_cams && c > 0) {
      img = s.images[0];
    } else {
      for (long i = 0; i < img.numel(); ++i) img[i] = rng.uniform(0, 1);
    }
    s.images.push_back(img);
    s.depth_gt.push_back(Tensor({cfg.img_h, cfg.img_w}));
    s.cameras.push_back(geom::make_camera(16, 16, cfg.img_w, cfg.img_h,
                                          c * M_PI / 2, 0.15, {0.3, 0.0, 1.5}));
  }
  return s;
}

}  // namespace

TEST_CASE("forward: zero images give finite outputs with contract shapes") {
  ModelConfig cfg = tiny_config();
  QuadModel model(cfg);
  synth::Sample s = tiny_sample(cfg);
  for (auto& img : s.images)
    for (long i = 0; i < img.numel(); ++i) img[i] = 0.0;

  ad::Tape tape;
  model.begin_step(tape);
  ForwardOut out = model.forward(tape, s, {});
  CHECK(out.heads.det_heatmap.val().shape() ==
        std::vector<int>{cfg.c_det, cfg.grid.h_bev(), cfg.grid.w_bev()});
  CHECK(out.heads.det_reg.val().shape() ==
        std::vector<int>{8, cfg.grid.h_bev(), cfg.grid.w_bev()});
  CHECK(out.heads.map_logits.val().dim(0) == cfg.c_map);
  CHECK(out.heads.lane_embed.val().dim(0) == cfg.embed_dim);
  CHECK(out.heads.occ_logits.val().dim(0) == cfg.grid.n_z * cfg.c_occ_total());
  CHECK(out.depth_logits.val().shape() ==
        std::vector<int>{cfg.n_cameras, cfg.grid.n_depth_bins, cfg.h_feat(), cfg.w_feat()});
  CHECK(out.heads.det_heatmap.val().all_finite());
  CHECK(out.heads.occ_logits.val().all_finite());
  CHECK(out.shared_bev.val().all_finite());
}

TEST_CASE("forward: identical camera images produce identical per-camera features") {
  ModelConfig cfg = tiny_config();
  QuadModel model(cfg);
  synth::Sample s = tiny_sample(cfg, 5, /*identical_cams=*/true);
  ad::Tape tape;
  model.begin_step(tape);
  ForwardOut out = model.forward(tape, s, {});
  const Tensor& depth = out.depth_logits.val();
  const long per_cam = depth.numel() / cfg.n_cameras;
  for (long i = 0; i < per_cam; ++i) CHECK(depth[i] == depth[per_cam + i]);
}

TEST_CASE("forward: deterministic given weights and inputs") {
  ModelConfig cfg = tiny_config();
  QuadModel model(cfg);
  synth::Sample s = tiny_sample(cfg);
  auto run = [&]() {
    ad::Tape tape;
    model.set_train_mode(false);  // keep running stats fixed between runs
    model.begin_step(tape);
    return model.forward(tape, s, {}).heads.det_heatmap.val();
  };
  Tensor a = run();
  Tensor b = run();
  CHECK(max_abs_diff(a, b) == 0.0);
}

TEST_CASE("forward: zeroing map head parameters leaves other heads unchanged") {
  ModelConfig cfg = tiny_config();
  QuadModel model(cfg);
  synth::Sample s = tiny_sample(cfg);
  model.set_train_mode(false);
  auto snapshot = [&]() {
    ad::Tape tape;
    model.begin_step(tape);
    ForwardOut out = model.forward(tape, s, {});
    return std::array<Tensor, 3>{out.heads.det_heatmap.val(), out.heads.lane_conf.val(),
                                 out.heads.occ_logits.val()};
  };
  auto before = snapshot();
  for (int idx : model.params().group_indices(ModuleGroup::head_map)) {
    Tensor& v = model.params().at(idx).value;
    for (long i = 0; i < v.numel(); ++i) v[i] = 0.0;
  }
  auto after = snapshot();
  for (int i = 0; i < 3; ++i)
    CHECK(max_abs_diff(before[static_cast<size_t>(i)], after[static_cast<size_t>(i)]) == 0.0);
}

TEST_CASE("view projector and temporal fusor own no parameters") {
  ModelConfig cfg = tiny_config();
  QuadModel model(cfg);
  CHECK(model.params().group_indices(ModuleGroup::view_projector).empty());
  CHECK(model.params().group_indices(ModuleGroup::temporal_fusor).empty());
  CHECK_FALSE(model.params().group_indices(ModuleGroup::backbone).empty());
}

TEST_CASE("extract_bev: history slots concatenate after the current frame") {
  ModelConfig cfg = tiny_config();
  QuadModel model(cfg);
  synth::Sample s = tiny_sample(cfg);
  model.set_train_mode(false);

  // history equal to the current pooled features with identity motion must
  // reproduce the no-history pass only in the current-channel block
  Tensor raw = model.raw_pooled_bev(s);
  CHECK(raw.shape() == std::vector<int>{cfg.c_feat(), cfg.grid.h_bev(), cfg.grid.w_bev()});

  ad::Tape tape;
  model.begin_step(tape);
  HistoryFrame hf{raw, s.ego_pose};
  ad::Var bev = model.extract_bev(tape, s, {hf, hf}, nullptr, nullptr);
  CHECK(bev.val().dim(0) == cfg.c_bev);
  CHECK(bev.val().all_finite());
}

TEST_CASE("gradient to the input image passes finite differences") {
  ModelConfig cfg = tiny_config(7);
  QuadModel model(cfg);
  synth::Sample s = tiny_sample(cfg, 11);
  model.set_train_mode(false);  // batch-stat-free path keeps FD well-posed

  auto loss_of = [&](const synth::Sample& sample) {
    ad::Tape tape;
    model.begin_step(tape);
    ForwardOut out = model.forward(tape, sample, {});
    return ad::mean_all(ad::square(out.shared_bev)).scalar();
  };

  ad::Tape tape;
  model.begin_step(tape);
  ForwardOut out = model.forward(tape, s, {});
  tape.backward(ad::mean_all(ad::square(out.shared_bev)));
  const Tensor& gimg = tape.grad(out.images.id);

  Rng rng(13);
  for (int probe = 0; probe < 5; ++probe) {
    const int cam = static_cast<int>(rng.bounded(static_cast<uint64_t>(cfg.n_cameras)));
    const long pix = static_cast<long>(rng.bounded(static_cast<uint64_t>(3 * cfg.img_h * cfg.img_w)));
    const long flat = static_cast<long>(cam) * 3 * cfg.img_h * cfg.img_w + pix;
    const double step = 1e-4;
    synth::Sample sp = s;
    sp.images[static_cast<size_t>(cam)][pix] += step;
    synth::Sample sm = s;
    sm.images[static_cast<size_t>(cam)][pix] -= step;
    const double fd = (loss_of(sp) - loss_of(sm)) / (2 * step);
    const double an = gimg[flat];
    const double denom = std::max({std::fabs(fd), std::fabs(an), 1e-4});
    CHECK(std::fabs(fd - an) / denom < 1e-4);
  }
}

TEST_CASE("flops: closed-form example and shared-extractor inequalities") {
  // 3x3 conv, 8 -> 16 channels, 64x64 output: 16*64*64*(9*8) MACs
  ConvSpec spec;
  spec.cin = 8;
  spec.cout = 16;
  spec.k = 3;
  spec.stride = 1;
  spec.pad = 1;
  spec.in_h = 64;
  spec.in_w = 64;
  spec.batch = 1;
  CHECK(spec.macs() == 4718592ull);

  for (uint64_t seed : {0ull, 1ull}) {
    ModelConfig cfg = tiny_config(seed);
    const uint64_t quad = flops_count_quad(cfg).total();
    const uint64_t singles = flops_sum_of_singles(cfg);
    uint64_t max_single = 0;
    for (int t = 0; t < kNumTasks; ++t)
      max_single = std::max(max_single,
                            flops_count_single(cfg, static_cast<Task>(t)).total());
    CHECK(quad < 4 * max_single);
    CHECK(quad < singles);
    CHECK(static_cast<double>(quad) / static_cast<double>(singles) < 1.0);
  }

  // desk-scale config: extractor dominates a single-task model
  ModelConfig desk;
  desk.grid = synth::make_grid("desk");
  const auto quad = flops_count_quad(desk);
  const double ratio = static_cast<double>(quad.total()) /
                       static_cast<double>(flops_sum_of_singles(desk));
  CHECK(ratio <= 0.55);
  const double extractor_share =
      static_cast<double>(quad.extractor()) /
      static_cast<double>(flops_count_single(desk, Task::det).total());
  CHECK(extractor_share >= 0.60);
}

TEST_CASE("checkpoint: save, load, forward reproduces outputs bit-exactly") {
  namespace fs = std::filesystem;
  const std::string path = (fs::temp_directory_path() / "qbev_ckpt_test.qbck").string();
  ModelConfig cfg = tiny_config(3);
  QuadModel model(cfg);
  synth::Sample s = tiny_sample(cfg);
  model.set_train_mode(false);

  ad::Tape t1;
  model.begin_step(t1);
  Tensor before = model.forward(t1, s, {}).heads.occ_logits.val();

  train::AdamW opt(model.params(), {});
  opt.set_t(17);
  losses::GradNormState gn = losses::GradNormState::make();
  gn.w = {1.2, 0.8, 1.1, 0.9, 1.0};
  gn.l0 = {2, 3, 4, 5, 6};
  gn.l0_set = true;
  Rng rng(99);
  rng.uniform();
  train::save_checkpoint(path, model, &opt, &gn, &rng, {2, 5, 1234});

  QuadModel other(tiny_config(3138));  // different init, same architecture
  train::AdamW opt2(other.params(), {});
  auto loaded = train::load_checkpoint(path, other, &opt2);
  CHECK(loaded.meta.stage_id == 2);
  CHECK(loaded.meta.epoch == 5);
  CHECK(loaded.meta.global_step == 1234);
  CHECK(loaded.has_gradnorm);
  CHECK(loaded.gradnorm.w[0] == 1.2);
  CHECK(loaded.gradnorm.l0[4] == 6);
  CHECK(loaded.has_rng);
  Rng rng2(0);
  rng2.deserialize(loaded.rng_state);
  Rng expected(99);
  expected.uniform();
  CHECK(rng2.raw() == expected.raw());
  CHECK(opt2.t() == 17);

  other.set_train_mode(false);
  ad::Tape t2;
  other.begin_step(t2);
  Tensor after = other.forward(t2, s, {}).heads.occ_logits.val();
  CHECK(max_abs_diff(before, after) == 0.0);
}

TEST_CASE("freezing: absent learning rate leaves parameters bit-identical") {
  ModelConfig cfg = tiny_config(5);
  QuadModel model(cfg);
  synth::Sample s = tiny_sample(cfg);
  train::AdamW opt(model.params(), {});
  opt.set_group_lr({{ModuleGroup::head_det, 1e-3}});  // everything else frozen

  const uint64_t backbone_before = model.group_checksum(ModuleGroup::backbone);
  const uint64_t map_before = model.group_checksum(ModuleGroup::head_map);
  const uint64_t det_before = model.group_checksum(ModuleGroup::head_det);

  for (int step = 0; step < 3; ++step) {
    ad::Tape tape;
    model.begin_step(tape);
    ForwardOut out = model.forward(tape, s, {});
    ad::Var loss = ad::mean_all(ad::square(out.heads.det_heatmap));
    tape.backward(loss);
    std::vector<const Tensor*> grads;
    for (int i = 0; i < model.params().size(); ++i) {
      const int node = model.param_node(i);
      grads.push_back(tape.has_grad(node) ? &tape.grad(node) : nullptr);
    }
    opt.step(grads, 35.0);
  }
  CHECK(model.group_checksum(ModuleGroup::backbone) == backbone_before);
  CHECK(model.group_checksum(ModuleGroup::head_map) == map_before);
  CHECK(model.group_checksum(ModuleGroup::head_det) != det_before);
}
