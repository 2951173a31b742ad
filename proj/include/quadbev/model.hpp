#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "quadbev/dataset.hpp"
#include "quadbev/geometry.hpp"
#include "quadbev/sample.hpp"
#include "quadbev/tape.hpp"

namespace qbev::nets {

enum class ModuleGroup {
  backbone,
  depth_estimator,
  view_projector,
  temporal_fusor,
  bev_encoder,
  head_det,
  head_map,
  head_lane,
  head_occ,
};
inline constexpr int kNumGroups = 9;
const char* group_name(ModuleGroup g);
ModuleGroup group_from_name(const std::string& name);

enum class Task { det = 0, map = 1, lane = 2, occ = 3 };
inline constexpr int kNumTasks = 4;
const char* task_name(Task t);
Task task_from_name(const std::string& name);
ModuleGroup head_group(Task t);

struct ModelConfig {
  int n_cameras = 4;
  int img_w = 128, img_h = 64;
  int feature_stride = 8;
  std::array<int, 3> backbone_widths{16, 32, 64};
  geom::BevGridSpec grid;
  int t_hist = 3;
  int c_bev = 48;
  int c_det = 3, c_map = 3, c_lane_cls = 2, embed_dim = 4;
  int head_width = 24, occ_head_width = 32;
  uint64_t seed = 0;

  int c_feat() const { return backbone_widths[2]; }
  int c_occ_total() const { return c_det + 2; }
  int h_feat() const { return img_h / feature_stride; }
  int w_feat() const { return img_w / feature_stride; }
  void validate() const;
};

ModelConfig config_from_manifest(const synth::DatasetManifest& m, uint64_t seed);

// One convolution of the network plus its post-ops; layer_specs() is the
// single source of truth consumed by both model construction and the
// analytic MAC counter, so the two can never drift apart.
struct ConvSpec {
  std::string name;
  ModuleGroup group = ModuleGroup::backbone;
  int cin = 0, cout = 0, k = 1, stride = 1, pad = 0;
  int in_h = 0, in_w = 0;
  int batch = 1;  // rasters per forward (n_cameras for image-space layers)
  bool norm = false, act = false;

  int out_h() const { return (in_h + 2 * pad - k) / stride + 1; }
  int out_w() const { return (in_w + 2 * pad - k) / stride + 1; }
  uint64_t macs() const {
    return static_cast<uint64_t>(out_h()) * out_w() * cout * k * k * cin * batch;
  }
};

std::vector<ConvSpec> layer_specs(const ModelConfig& cfg);

struct Param {
  std::string name;
  ModuleGroup group;
  Tensor value;
};

class ParamStore {
 public:
  int add(const std::string& name, ModuleGroup group, Tensor value);
  int index_of(const std::string& name) const;  // -1 when absent
  int size() const { return static_cast<int>(items_.size()); }
  Param& at(int i) { return items_[static_cast<size_t>(i)]; }
  const Param& at(int i) const { return items_[static_cast<size_t>(i)]; }
  uint64_t group_checksum(ModuleGroup g) const;
  std::vector<int> group_indices(ModuleGroup g) const;

 private:
  std::vector<Param> items_;
  std::map<std::string, int> by_name_;
};

// Raw head outputs of one forward pass (graph handles).
struct HeadOutputs {
  ad::Var det_heatmap, det_reg;
  ad::Var map_logits;
  ad::Var lane_conf, lane_offset, lane_embed, lane_cls;
  ad::Var occ_logits;  // (n_z * c_occ_total, H, W)
};

struct ForwardOut {
  HeadOutputs heads;
  ad::Var depth_logits;  // (N_cam, D, Hf, Wf)
  ad::Var shared_bev;    // (c_bev, H, W)
  ad::Var images;        // input leaf, for gradient probes
};

// Past frame feature handed to temporal fusion: raw pooled BEV plus the pose
// it was computed in.
struct HistoryFrame {
  Tensor raw_bev;  // (c_feat, H, W), no gradient tracked
  geom::EgoPose pose;
};

class QuadModel {
 public:
  explicit QuadModel(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  ParamStore& buffers() { return buffers_; }
  const ParamStore& buffers() const { return buffers_; }

  void set_train_mode(bool training) { training_ = training; }
  bool train_mode() const { return training_; }
  // Frozen groups run their normalization in eval mode regardless of the
  // global training flag.
  void set_frozen(std::set<ModuleGroup> frozen) { frozen_ = std::move(frozen); }
  const std::set<ModuleGroup>& frozen() const { return frozen_; }

  // Leafs every parameter onto the tape; must be called once per step
  // before any forward.
  void begin_step(ad::Tape& tape);
  int param_node(int param_idx) const { return param_nodes_[static_cast<size_t>(param_idx)]; }

  // Shared feature extraction: backbone -> depth softmax -> lift-splat ->
  // temporal fusion -> BEV encoder.
  ad::Var extract_bev(ad::Tape& tape, const synth::Sample& sample,
                      const std::vector<HistoryFrame>& history, ad::Var* depth_logits_out,
                      ad::Var* images_leaf_out);

  ad::Var head_forward_det(ad::Tape& tape, ad::Var shared_bev, ad::Var* reg_out);
  ad::Var head_forward_map(ad::Tape& tape, ad::Var shared_bev);
  void head_forward_lane(ad::Tape& tape, ad::Var shared_bev, ad::Var* conf, ad::Var* offset,
                         ad::Var* embed, ad::Var* cls);
  ad::Var head_forward_occ(ad::Tape& tape, ad::Var shared_bev);

  // Full pass; task_mask[i] selects which heads run (disabled heads return
  // invalid Vars).
  ForwardOut forward(ad::Tape& tape, const synth::Sample& sample,
                     const std::vector<HistoryFrame>& history,
                     const std::array<bool, kNumTasks>& task_mask = {true, true, true, true});

  // No-gradient pooled BEV of a past frame (pre-encoder raw features).
  Tensor raw_pooled_bev(const synth::Sample& sample);

  // GradNorm reference: the final BEV-encoder convolution weight.
  int ref_param_index() const { return ref_param_idx_; }
  // Tape node that consumed the reference weight in the latest forward.
  int ref_consumer_node() const { return ref_consumer_node_; }

  uint64_t group_checksum(ModuleGroup g) const { return params_.group_checksum(g); }

 private:
  struct ConvLayer {
    ConvSpec spec;
    int w = -1, b = -1;             // param indices
    int gamma = -1, beta = -1;      // param indices when norm
    int rmean = -1, rvar = -1;      // buffer indices when norm
  };

  ad::Var apply_conv(ad::Tape& tape, const ConvLayer& layer, ad::Var x);
  ad::Var pooled_bev_graph(ad::Tape& tape, const synth::Sample& sample, ad::Var images,
                           ad::Var* depth_logits_out);
  const ConvLayer& layer(const std::string& name) const;

  ModelConfig cfg_;
  ParamStore params_;
  ParamStore buffers_;
  std::vector<ConvLayer> layers_;
  std::map<std::string, int> layer_by_name_;
  std::vector<std::shared_ptr<geom::SplatPlan>> splat_plans_;  // per camera
  std::vector<geom::Frustum> frustums_;
  std::vector<int> param_nodes_;
  std::set<ModuleGroup> frozen_;
  bool training_ = true;
  int ref_param_idx_ = -1;
  mutable int ref_consumer_node_ = -1;
};

// Analytic multiply-accumulate counts per module group.
struct FlopsReport {
  std::map<ModuleGroup, uint64_t> by_group;
  uint64_t extractor() const;
  uint64_t head(Task t) const;
  uint64_t total() const;
};

// mode: quad counts the extractor once plus all four heads; single counts
// the extractor plus one head.
FlopsReport flops_count_quad(const ModelConfig& cfg);
FlopsReport flops_count_single(const ModelConfig& cfg, Task t);
uint64_t flops_sum_of_singles(const ModelConfig& cfg);

}  // namespace qbev::nets
