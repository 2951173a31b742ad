#include "quadbev/model.hpp"

#include <algorithm>
#include <cmath>

#include "quadbev/error.hpp"
#include "quadbev/rng.hpp"

namespace qbev::nets {

const char* group_name(ModuleGroup g) {
  switch (g) {
    case ModuleGroup::backbone: return "backbone";
    case ModuleGroup::depth_estimator: return "depth_estimator";
    case ModuleGroup::view_projector: return "view_projector";
    case ModuleGroup::temporal_fusor: return "temporal_fusor";
    case ModuleGroup::bev_encoder: return "bev_encoder";
    case ModuleGroup::head_det: return "head_det";
    case ModuleGroup::head_map: return "head_map";
    case ModuleGroup::head_lane: return "head_lane";
    case ModuleGroup::head_occ: return "head_occ";
  }
  return "?";
}

ModuleGroup group_from_name(const std::string& name) {
  for (int i = 0; i < kNumGroups; ++i)
    if (name == group_name(static_cast<ModuleGroup>(i))) return static_cast<ModuleGroup>(i);
  throw QbError(ErrCode::contract, "unknown module group: " + name);
}

const char* task_name(Task t) {
  switch (t) {
    case Task::det: return "det";
    case Task::map: return "map";
    case Task::lane: return "lane";
    case Task::occ: return "occ";
  }
  return "?";
}

Task task_from_name(const std::string& name) {
  for (int i = 0; i < kNumTasks; ++i)
    if (name == task_name(static_cast<Task>(i))) return static_cast<Task>(i);
  throw QbError(ErrCode::usage, "unknown task: " + name);
}

ModuleGroup head_group(Task t) {
  switch (t) {
    case Task::det: return ModuleGroup::head_det;
    case Task::map: return ModuleGroup::head_map;
    case Task::lane: return ModuleGroup::head_lane;
    case Task::occ: return ModuleGroup::head_occ;
  }
  return ModuleGroup::head_det;
}

void ModelConfig::validate() const {
  check_contract(n_cameras > 0, "config: need cameras");
  check_contract(img_w % feature_stride == 0 && img_h % feature_stride == 0,
                 "config: image size not divisible by feature stride");
  for (int w : backbone_widths) check_contract(w > 0, "config: backbone widths positive");
  check_contract(c_bev > 0 && head_width > 0 && occ_head_width > 0, "config: widths positive");
  check_contract(embed_dim >= 2, "config: embed_dim must be at least 2");
  grid.validate();
}

ModelConfig config_from_manifest(const synth::DatasetManifest& m, uint64_t seed) {
  ModelConfig cfg;
  cfg.grid = m.grid;
  cfg.n_cameras = static_cast<int>(m.cameras.size());
  check_contract(!m.cameras.empty(), "config: manifest has no cameras");
  cfg.img_w = m.cameras[0].width;
  cfg.img_h = m.cameras[0].height;
  cfg.feature_stride = m.feature_stride;
  cfg.c_det = m.n_det_categories;
  cfg.c_map = synth::kNumMapLayers;
  cfg.seed = seed;
  cfg.validate();
  return cfg;
}

std::vector<ConvSpec> layer_specs(const ModelConfig& cfg) {
  cfg.validate();
  std::vector<ConvSpec> specs;
  const int hb = cfg.grid.h_bev(), wb = cfg.grid.w_bev();
  auto add = [&](const std::string& name, ModuleGroup g, int cin, int cout, int k, int stride,
                 int in_h, int in_w, int batch, bool norm, bool act) {
    specs.push_back(ConvSpec{name, g, cin, cout, k, stride, k / 2, in_h, in_w, batch, norm, act});
  };

  // backbone: three strided stages plus one refinement conv, shared weights
  // across cameras (batch = n_cameras)
  int h = cfg.img_h, w = cfg.img_w;
  const auto& bw = cfg.backbone_widths;
  add("backbone.s0", ModuleGroup::backbone, 3, bw[0], 3, 2, h, w, cfg.n_cameras, true, true);
  h /= 2; w /= 2;
  add("backbone.s1", ModuleGroup::backbone, bw[0], bw[1], 3, 2, h, w, cfg.n_cameras, true, true);
  h /= 2; w /= 2;
  add("backbone.s2", ModuleGroup::backbone, bw[1], bw[2], 3, 2, h, w, cfg.n_cameras, true, true);
  h /= 2; w /= 2;
  add("backbone.s3", ModuleGroup::backbone, bw[2], bw[2], 3, 1, h, w, cfg.n_cameras, true, true);
  check_contract(h == cfg.h_feat() && w == cfg.w_feat(),
                 "config: backbone stride chain does not match feature_stride");

  add("depth.d0", ModuleGroup::depth_estimator, bw[2], bw[2], 1, 1, h, w, cfg.n_cameras, true,
      true);
  add("depth.d1", ModuleGroup::depth_estimator, bw[2], cfg.grid.n_depth_bins, 3, 1, h, w,
      cfg.n_cameras, false, false);

  add("bev.e0", ModuleGroup::bev_encoder, cfg.c_feat() * (1 + cfg.t_hist), cfg.c_bev, 1, 1, hb,
      wb, 1, true, true);
  add("bev.e1", ModuleGroup::bev_encoder, cfg.c_bev, cfg.c_bev, 3, 1, hb, wb, 1, true, true);

  auto head_encoder = [&](const std::string& prefix, ModuleGroup g, int width) {
    add(prefix + ".enc0", g, cfg.c_bev, width, 3, 1, hb, wb, 1, true, true);
    add(prefix + ".enc1", g, width, width, 3, 1, hb, wb, 1, true, true);
    add(prefix + ".enc2", g, width, width, 3, 1, hb, wb, 1, true, true);
  };
  head_encoder("det", ModuleGroup::head_det, cfg.head_width);
  add("det.heat", ModuleGroup::head_det, cfg.head_width, cfg.c_det, 1, 1, hb, wb, 1, false,
      false);
  add("det.reg", ModuleGroup::head_det, cfg.head_width, 8, 1, 1, hb, wb, 1, false, false);

  head_encoder("map", ModuleGroup::head_map, cfg.head_width);
  add("map.out", ModuleGroup::head_map, cfg.head_width, cfg.c_map, 1, 1, hb, wb, 1, false,
      false);

  head_encoder("lane", ModuleGroup::head_lane, cfg.head_width);
  add("lane.conf", ModuleGroup::head_lane, cfg.head_width, 1, 1, 1, hb, wb, 1, false, false);
  add("lane.off", ModuleGroup::head_lane, cfg.head_width, 1, 1, 1, hb, wb, 1, false, false);
  add("lane.embed", ModuleGroup::head_lane, cfg.head_width, cfg.embed_dim, 1, 1, hb, wb, 1,
      false, false);
  add("lane.cls", ModuleGroup::head_lane, cfg.head_width, cfg.c_lane_cls, 1, 1, hb, wb, 1,
      false, false);

  head_encoder("occ", ModuleGroup::head_occ, cfg.occ_head_width);
  // channel-to-height: per-cell MLP realized as 1x1 convolutions
  add("occ.m0", ModuleGroup::head_occ, cfg.occ_head_width, cfg.occ_head_width + 16, 1, 1, hb,
      wb, 1, false, true);
  add("occ.m1", ModuleGroup::head_occ, cfg.occ_head_width + 16,
      cfg.grid.n_z * cfg.c_occ_total(), 1, 1, hb, wb, 1, false, false);
  return specs;
}

int ParamStore::add(const std::string& name, ModuleGroup group, Tensor value) {
  check_contract(by_name_.find(name) == by_name_.end(), "duplicate parameter: " + name);
  items_.push_back(Param{name, group, std::move(value)});
  by_name_[name] = static_cast<int>(items_.size()) - 1;
  return static_cast<int>(items_.size()) - 1;
}

int ParamStore::index_of(const std::string& name) const {
  auto it = by_name_.find(name);
  return it == by_name_.end() ? -1 : it->second;
}

uint64_t ParamStore::group_checksum(ModuleGroup g) const {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& p : items_) {
    if (p.group != g) continue;
    h = fnv1a64(p.value.data(), static_cast<size_t>(p.value.numel()) * sizeof(double), h);
  }
  return h;
}

std::vector<int> ParamStore::group_indices(ModuleGroup g) const {
  std::vector<int> out;
  for (int i = 0; i < size(); ++i)
    if (items_[static_cast<size_t>(i)].group == g) out.push_back(i);
  return out;
}

QuadModel::QuadModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(cfg_.seed ^ 0x51ed270b6a4c7dull);
  for (const ConvSpec& spec : layer_specs(cfg_)) {
    ConvLayer layer;
    layer.spec = spec;
    const int fan_in = spec.cin * spec.k * spec.k;
    const double limit = std::sqrt(3.0 / fan_in);
    Tensor w({spec.cout, spec.cin, spec.k, spec.k});
    for (long i = 0; i < w.numel(); ++i) w[i] = rng.uniform(-limit, limit);
    layer.w = params_.add(spec.name + ".w", spec.group, std::move(w));
    layer.b = params_.add(spec.name + ".b", spec.group, Tensor({spec.cout}));
    if (spec.norm) {
      layer.gamma = params_.add(spec.name + ".gamma", spec.group, Tensor::full({spec.cout}, 1.0));
      layer.beta = params_.add(spec.name + ".beta", spec.group, Tensor({spec.cout}));
      layer.rmean = buffers_.add(spec.name + ".rmean", spec.group, Tensor({spec.cout}));
      layer.rvar = buffers_.add(spec.name + ".rvar", spec.group, Tensor::full({spec.cout}, 1.0));
    }
    layer_by_name_[spec.name] = static_cast<int>(layers_.size());
    layers_.push_back(std::move(layer));
  }
  ref_param_idx_ = params_.index_of("bev.e1.w");
  check_contract(ref_param_idx_ >= 0, "reference layer missing");
}

const QuadModel::ConvLayer& QuadModel::layer(const std::string& name) const {
  auto it = layer_by_name_.find(name);
  check_contract(it != layer_by_name_.end(), "unknown layer: " + name);
  return layers_[static_cast<size_t>(it->second)];
}

void QuadModel::begin_step(ad::Tape& tape) {
  param_nodes_.assign(static_cast<size_t>(params_.size()), -1);
  for (int i = 0; i < params_.size(); ++i)
    param_nodes_[static_cast<size_t>(i)] = tape.leaf(params_.at(i).value).id;
  ref_consumer_node_ = -1;
}

ad::Var QuadModel::apply_conv(ad::Tape& tape, const ConvLayer& layer, ad::Var x) {
  const bool batched = x.val().rank() == 4;
  ad::Var in = batched ? x : ad::reshape(x, {1, x.val().dim(0), x.val().dim(1), x.val().dim(2)});
  ad::Var w{&tape, param_nodes_[static_cast<size_t>(layer.w)]};
  ad::Var b{&tape, param_nodes_[static_cast<size_t>(layer.b)]};
  ad::Var y = ad::conv2d(in, w, b, layer.spec.stride, layer.spec.pad);
  // first consumer this step: partial backwards stop here and still cover
  // every later sample's path through the reference layer
  if (layer.w == ref_param_idx_ && ref_consumer_node_ < 0) ref_consumer_node_ = y.id;
  if (layer.spec.norm) {
    const bool train_norm = training_ && frozen_.find(layer.spec.group) == frozen_.end();
    ad::Var gamma{&tape, param_nodes_[static_cast<size_t>(layer.gamma)]};
    ad::Var beta{&tape, param_nodes_[static_cast<size_t>(layer.beta)]};
    y = ad::raster_norm(y, gamma, beta, &buffers_.at(layer.rmean).value,
                        &buffers_.at(layer.rvar).value, train_norm);
  }
  if (layer.spec.act) y = ad::relu(y);
  if (!batched) {
    const auto& s = y.val().shape();
    y = ad::reshape(y, {s[1], s[2], s[3]});
  }
  return y;
}

ad::Var QuadModel::pooled_bev_graph(ad::Tape& tape, const synth::Sample& sample, ad::Var images,
                                    ad::Var* depth_logits_out) {
  check_contract(static_cast<int>(sample.images.size()) == cfg_.n_cameras,
                 "forward: sample camera count mismatch");
  // backbone over all cameras at once
  ad::Var feat = images;
  for (const char* name : {"backbone.s0", "backbone.s1", "backbone.s2", "backbone.s3"})
    feat = apply_conv(tape, layer(name), feat);
  ad::Var depth = apply_conv(tape, layer("depth.d0"), feat);
  depth = apply_conv(tape, layer("depth.d1"), depth);
  if (depth_logits_out) *depth_logits_out = depth;

  if (splat_plans_.empty()) {
    for (int c = 0; c < cfg_.n_cameras; ++c) {
      frustums_.push_back(
          geom::build_frustum(sample.cameras[static_cast<size_t>(c)], cfg_.grid,
                              cfg_.feature_stride));
      splat_plans_.push_back(geom::build_splat_plan(
          frustums_.back(), sample.cameras[static_cast<size_t>(c)], cfg_.grid));
    }
  }

  ad::Var pooled;
  for (int c = 0; c < cfg_.n_cameras; ++c) {
    ad::Var f_c = ad::slice_item(feat, c);
    ad::Var probs = ad::softmax_axis0(ad::slice_item(depth, c));
    ad::Var splat =
        geom::lift_and_splat(f_c, probs, splat_plans_[static_cast<size_t>(c)], cfg_.grid);
    pooled = c == 0 ? splat : ad::add(pooled, splat);
  }
  return pooled;
}

ad::Var QuadModel::extract_bev(ad::Tape& tape, const synth::Sample& sample,
                               const std::vector<HistoryFrame>& history,
                               ad::Var* depth_logits_out, ad::Var* images_leaf_out) {
  check_contract(static_cast<int>(history.size()) <= cfg_.t_hist,
                 "extract_bev: more history than t_hist");
  Tensor stacked({cfg_.n_cameras, 3, cfg_.img_h, cfg_.img_w});
  for (int c = 0; c < cfg_.n_cameras; ++c) {
    const Tensor& img = sample.images[static_cast<size_t>(c)];
    check_contract(img.dim(1) == cfg_.img_h && img.dim(2) == cfg_.img_w,
                   "extract_bev: image size mismatch");
    std::copy(img.data(), img.data() + img.numel(),
              stacked.data() + static_cast<long>(c) * img.numel());
  }
  ad::Var images = tape.leaf(std::move(stacked));
  if (images_leaf_out) *images_leaf_out = images;

  ad::Var pooled = pooled_bev_graph(tape, sample, images, depth_logits_out);

  std::vector<ad::Var> warped;
  for (const HistoryFrame& hf : history) {
    auto taps = geom::build_warp_taps(hf.pose, sample.ego_pose, cfg_.grid);
    warped.push_back(geom::warp_bev(tape.leaf(hf.raw_bev), taps));
  }
  ad::Var fused = geom::temporal_concat(pooled, warped, cfg_.t_hist);

  ad::Var enc = apply_conv(tape, layer("bev.e0"), fused);
  enc = apply_conv(tape, layer("bev.e1"), enc);
  return enc;
}

ad::Var QuadModel::head_forward_det(ad::Tape& tape, ad::Var shared_bev, ad::Var* reg_out) {
  ad::Var x = shared_bev;
  for (const char* n : {"det.enc0", "det.enc1", "det.enc2"}) x = apply_conv(tape, layer(n), x);
  if (reg_out) *reg_out = apply_conv(tape, layer("det.reg"), x);
  return apply_conv(tape, layer("det.heat"), x);
}

ad::Var QuadModel::head_forward_map(ad::Tape& tape, ad::Var shared_bev) {
  ad::Var x = shared_bev;
  for (const char* n : {"map.enc0", "map.enc1", "map.enc2"}) x = apply_conv(tape, layer(n), x);
  return apply_conv(tape, layer("map.out"), x);
}

void QuadModel::head_forward_lane(ad::Tape& tape, ad::Var shared_bev, ad::Var* conf,
                                  ad::Var* offset, ad::Var* embed, ad::Var* cls) {
  ad::Var x = shared_bev;
  for (const char* n : {"lane.enc0", "lane.enc1", "lane.enc2"}) x = apply_conv(tape, layer(n), x);
  if (conf) *conf = apply_conv(tape, layer("lane.conf"), x);
  if (offset) *offset = apply_conv(tape, layer("lane.off"), x);
  if (embed) *embed = apply_conv(tape, layer("lane.embed"), x);
  if (cls) *cls = apply_conv(tape, layer("lane.cls"), x);
}

ad::Var QuadModel::head_forward_occ(ad::Tape& tape, ad::Var shared_bev) {
  ad::Var x = shared_bev;
  for (const char* n : {"occ.enc0", "occ.enc1", "occ.enc2"}) x = apply_conv(tape, layer(n), x);
  x = apply_conv(tape, layer("occ.m0"), x);
  return apply_conv(tape, layer("occ.m1"), x);
}

ForwardOut QuadModel::forward(ad::Tape& tape, const synth::Sample& sample,
                              const std::vector<HistoryFrame>& history,
                              const std::array<bool, kNumTasks>& task_mask) {
  ForwardOut out;
  out.shared_bev = extract_bev(tape, sample, history, &out.depth_logits, &out.images);
  if (task_mask[static_cast<size_t>(Task::det)])
    out.heads.det_heatmap = head_forward_det(tape, out.shared_bev, &out.heads.det_reg);
  if (task_mask[static_cast<size_t>(Task::map)])
    out.heads.map_logits = head_forward_map(tape, out.shared_bev);
  if (task_mask[static_cast<size_t>(Task::lane)])
    head_forward_lane(tape, out.shared_bev, &out.heads.lane_conf, &out.heads.lane_offset,
                      &out.heads.lane_embed, &out.heads.lane_cls);
  if (task_mask[static_cast<size_t>(Task::occ)])
    out.heads.occ_logits = head_forward_occ(tape, out.shared_bev);
  return out;
}

Tensor QuadModel::raw_pooled_bev(const synth::Sample& sample) {
  ad::Tape scratch;
  begin_step(scratch);
  Tensor stacked({cfg_.n_cameras, 3, cfg_.img_h, cfg_.img_w});
  for (int c = 0; c < cfg_.n_cameras; ++c) {
    const Tensor& img = sample.images[static_cast<size_t>(c)];
    std::copy(img.data(), img.data() + img.numel(),
              stacked.data() + static_cast<long>(c) * img.numel());
  }
  // history features are always produced in eval-mode normalization so the
  // frozen statistics do not drift with the window position
  const bool saved = training_;
  training_ = false;
  ad::Var pooled = pooled_bev_graph(scratch, sample, scratch.leaf(std::move(stacked)), nullptr);
  training_ = saved;
  return pooled.val();
}

uint64_t FlopsReport::extractor() const {
  uint64_t s = 0;
  for (ModuleGroup g : {ModuleGroup::backbone, ModuleGroup::depth_estimator,
                        ModuleGroup::view_projector, ModuleGroup::temporal_fusor,
                        ModuleGroup::bev_encoder}) {
    auto it = by_group.find(g);
    if (it != by_group.end()) s += it->second;
  }
  return s;
}

uint64_t FlopsReport::head(Task t) const {
  auto it = by_group.find(head_group(t));
  return it == by_group.end() ? 0 : it->second;
}

uint64_t FlopsReport::total() const {
  uint64_t s = 0;
  for (const auto& [g, v] : by_group) s += v;
  return s;
}

namespace {

FlopsReport flops_for_groups(const ModelConfig& cfg, const std::set<ModuleGroup>& groups) {
  FlopsReport rep;
  for (const ConvSpec& spec : layer_specs(cfg))
    if (groups.count(spec.group)) rep.by_group[spec.group] += spec.macs();
  return rep;
}

std::set<ModuleGroup> extractor_groups() {
  return {ModuleGroup::backbone, ModuleGroup::depth_estimator, ModuleGroup::view_projector,
          ModuleGroup::temporal_fusor, ModuleGroup::bev_encoder};
}

}  // namespace

FlopsReport flops_count_quad(const ModelConfig& cfg) {
  auto groups = extractor_groups();
  for (int t = 0; t < kNumTasks; ++t) groups.insert(head_group(static_cast<Task>(t)));
  return flops_for_groups(cfg, groups);
}

FlopsReport flops_count_single(const ModelConfig& cfg, Task t) {
  auto groups = extractor_groups();
  groups.insert(head_group(t));
  return flops_for_groups(cfg, groups);
}

uint64_t flops_sum_of_singles(const ModelConfig& cfg) {
  uint64_t s = 0;
  for (int t = 0; t < kNumTasks; ++t) s += flops_count_single(cfg, static_cast<Task>(t)).total();
  return s;
}

}  // namespace qbev::nets
