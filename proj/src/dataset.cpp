#include "quadbev/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "quadbev/arrayio.hpp"
#include "quadbev/error.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace qbev::synth {

namespace {

constexpr char kRecordMagic[4] = {'Q', 'B', 'E', 'V'};

Tensor mat4_tensor(const geom::Mat4& m) {
  Tensor t({4, 4});
  for (int i = 0; i < 16; ++i) t[i] = m.m[static_cast<size_t>(i)];
  return t;
}

geom::Mat4 tensor_mat4(const Tensor& t) {
  geom::Mat4 m;
  for (int i = 0; i < 16; ++i) m.m[static_cast<size_t>(i)] = t[i];
  return m;
}

void quantize_pose(geom::EgoPose& p) {
  for (double& v : p.ego_to_global.m) v = static_cast<double>(static_cast<float>(v));
  p.timestamp = static_cast<double>(static_cast<float>(p.timestamp));
}

json camera_json(const geom::CameraModel& c) {
  json j;
  j["fx"] = c.fx;
  j["fy"] = c.fy;
  j["cx"] = c.cx;
  j["cy"] = c.cy;
  j["width"] = c.width;
  j["height"] = c.height;
  j["cam_to_ego"] = c.cam_to_ego.m;
  return j;
}

geom::CameraModel camera_from_json(const json& j) {
  geom::CameraModel c;
  c.fx = j.at("fx");
  c.fy = j.at("fy");
  c.cx = j.at("cx");
  c.cy = j.at("cy");
  c.width = j.at("width");
  c.height = j.at("height");
  const auto m = j.at("cam_to_ego").get<std::array<double, 16>>();
  c.cam_to_ego.m = m;
  return c;
}

json grid_json(const geom::BevGridSpec& g) {
  json j;
  j["x_min"] = g.x_min;
  j["x_max"] = g.x_max;
  j["y_min"] = g.y_min;
  j["y_max"] = g.y_max;
  j["cell_size"] = g.cell_size;
  j["z_min"] = g.z_min;
  j["z_max"] = g.z_max;
  j["n_z"] = g.n_z;
  j["d_min"] = g.d_min;
  j["d_max"] = g.d_max;
  j["n_depth_bins"] = g.n_depth_bins;
  return j;
}

geom::BevGridSpec grid_from_json(const json& j) {
  geom::BevGridSpec g;
  g.x_min = j.at("x_min");
  g.x_max = j.at("x_max");
  g.y_min = j.at("y_min");
  g.y_max = j.at("y_max");
  g.cell_size = j.at("cell_size");
  g.z_min = j.at("z_min");
  g.z_max = j.at("z_max");
  g.n_z = j.at("n_z");
  g.d_min = j.at("d_min");
  g.d_max = j.at("d_max");
  g.n_depth_bins = j.at("n_depth_bins");
  return g;
}

std::vector<io::NamedArray> world_arrays(const World& w) {
  std::vector<io::NamedArray> arrays;
  Tensor boxes({static_cast<int>(w.boxes.size()), 8});
  for (size_t i = 0; i < w.boxes.size(); ++i) {
    const Box3D& b = w.boxes[i];
    const double row[8] = {b.x, b.y, b.z, b.w, b.l, b.h, b.yaw, static_cast<double>(b.category)};
    for (int k = 0; k < 8; ++k) boxes.at(static_cast<int>(i), k) = row[k];
  }
  arrays.push_back(io::NamedArray::from_tensor_f32("boxes", boxes));

  int total_pts = 0;
  for (const auto& lane : w.lanes) total_pts += static_cast<int>(lane.points.size());
  Tensor pts({total_pts, 2});
  std::vector<int32_t> meta;
  int off = 0;
  for (const auto& lane : w.lanes) {
    meta.push_back(off);
    meta.push_back(static_cast<int32_t>(lane.points.size()));
    meta.push_back(lane.category);
    meta.push_back(lane.instance_id);
    for (const auto& p : lane.points) {
      pts.at(off, 0) = p[0];
      pts.at(off, 1) = p[1];
      ++off;
    }
  }
  arrays.push_back(io::NamedArray::from_tensor_f32("lane_points", pts));
  arrays.push_back(io::NamedArray::from_ints("lane_meta", meta,
                                             {static_cast<int>(w.lanes.size()), 4}));

  std::vector<double> rect_rows;
  std::vector<double> hp_rows;
  for (int layer = 0; layer < kNumMapLayers; ++layer) {
    for (const auto& r : w.map_layers[static_cast<size_t>(layer)].rects) {
      rect_rows.insert(rect_rows.end(), {r.cx, r.cy, r.hx, r.hy, r.yaw,
                                         static_cast<double>(layer)});
    }
    for (const auto& hp : w.map_layers[static_cast<size_t>(layer)].halfplanes) {
      hp_rows.insert(hp_rows.end(), {hp.nx, hp.ny, hp.c, static_cast<double>(layer)});
    }
  }
  arrays.push_back(io::NamedArray::from_tensor_f32(
      "map_rects", Tensor({static_cast<int>(rect_rows.size() / 6), 6}, rect_rows)));
  arrays.push_back(io::NamedArray::from_tensor_f32(
      "map_halfplanes", Tensor({static_cast<int>(hp_rows.size() / 4), 4}, hp_rows)));
  return arrays;
}

World world_from_record(const io::Record& rec) {
  World w;
  const Tensor boxes = rec.get("boxes").to_tensor();
  for (int i = 0; i < boxes.dim(0); ++i) {
    Box3D b;
    b.x = boxes.at(i, 0);
    b.y = boxes.at(i, 1);
    b.z = boxes.at(i, 2);
    b.w = boxes.at(i, 3);
    b.l = boxes.at(i, 4);
    b.h = boxes.at(i, 5);
    b.yaw = boxes.at(i, 6);
    b.category = static_cast<int>(boxes.at(i, 7));
    w.boxes.push_back(b);
  }
  const Tensor pts = rec.get("lane_points").to_tensor();
  const auto meta = rec.get("lane_meta").to_ints();
  for (size_t i = 0; i + 3 < meta.size(); i += 4) {
    LanePolyline lane;
    lane.category = meta[i + 2];
    lane.instance_id = meta[i + 3];
    for (int32_t k = 0; k < meta[i + 1]; ++k) {
      const int idx = meta[i] + k;
      lane.points.push_back({pts.at(idx, 0), pts.at(idx, 1)});
    }
    w.lanes.push_back(std::move(lane));
  }
  const Tensor rects = rec.get("map_rects").to_tensor();
  for (int i = 0; i < rects.dim(0); ++i) {
    OrientedRect r{rects.at(i, 0), rects.at(i, 1), rects.at(i, 2), rects.at(i, 3),
                   rects.at(i, 4)};
    w.map_layers[static_cast<size_t>(rects.at(i, 5))].rects.push_back(r);
  }
  const Tensor hps = rec.get("map_halfplanes").to_tensor();
  for (int i = 0; i < hps.dim(0); ++i) {
    HalfPlane hp{hps.at(i, 0), hps.at(i, 1), hps.at(i, 2)};
    w.map_layers[static_cast<size_t>(hps.at(i, 3))].halfplanes.push_back(hp);
  }
  return w;
}

}  // namespace

std::vector<geom::CameraModel> make_rig(const std::string& preset) {
  std::vector<geom::CameraModel> rig;
  const bool paperish = preset == "paperish";
  const bool tiny = preset == "tiny";  // test-scale: one forward camera
  check(preset == "desk" || paperish || tiny, ErrCode::usage, "unknown rig preset: " + preset);
  const int w = paperish ? 704 : (tiny ? 32 : 128);
  const int h = paperish ? 256 : (tiny ? 16 : 64);
  const double f = w / 2.0;  // 90 degree horizontal FOV
  const double pitch = 0.18;
  const double z = 1.6;
  std::vector<std::pair<double, geom::Vec3>> mounts;
  if (paperish) {
    for (int k = 0; k < 6; ++k) {
      const double yaw = k * M_PI / 3.0;
      mounts.push_back({yaw, {0.6 * std::cos(yaw), 0.6 * std::sin(yaw), z}});
    }
  } else if (tiny) {
    mounts = {{0.0, {0.4, 0.0, z}}};
  } else {
    mounts = {{0.0, {0.8, 0.0, z}},
              {M_PI / 2, {0.0, 0.4, z}},
              {M_PI, {-0.8, 0.0, z}},
              {-M_PI / 2, {0.0, -0.4, z}}};
  }
  for (const auto& [yaw, pos] : mounts) {
    geom::CameraModel cam = make_camera(f, f, w, h, yaw, pitch, pos);
    // quantize so calibration survives the f32 record payloads bit-exactly
    for (double& v : cam.cam_to_ego.m) v = static_cast<double>(static_cast<float>(v));
    cam.fx = static_cast<double>(static_cast<float>(cam.fx));
    cam.fy = static_cast<double>(static_cast<float>(cam.fy));
    cam.cx = static_cast<double>(static_cast<float>(cam.cx));
    cam.cy = static_cast<double>(static_cast<float>(cam.cy));
    cam.validate();
    rig.push_back(cam);
  }
  return rig;
}

geom::BevGridSpec make_grid(const std::string& preset) {
  geom::BevGridSpec g;
  if (preset == "paperish") {
    g.x_min = g.y_min = -32;
    g.x_max = g.y_max = 32;
    g.cell_size = 0.5;
    g.d_max = 60;
    g.n_depth_bins = 59;
  } else if (preset == "tiny") {
    g.x_min = g.y_min = -4;
    g.x_max = g.y_max = 4;
    g.cell_size = 0.5;
    g.n_z = 4;
    g.d_max = 8;
    g.n_depth_bins = 4;
  }
  g.validate();
  return g;
}

geom::EgoPose trajectory_pose(double speed, double curvature, double t) {
  geom::EgoPose p;
  p.timestamp = t;
  if (std::fabs(curvature) < 1e-9) {
    p.ego_to_global = geom::translate(speed * t, 0, 0);
  } else {
    const double theta = curvature * speed * t;
    const double x = std::sin(theta) / curvature;
    const double y = (1 - std::cos(theta)) / curvature;
    p.ego_to_global = geom::translate(x, y, 0) * geom::rot_z(theta);
  }
  return p;
}

DatasetWriter::DatasetWriter(std::string dir, DatasetManifest header)
    : dir_(std::move(dir)), manifest_(std::move(header)) {
  fs::create_directories(dir_);
  manifest_.records.clear();
  manifest_.n_samples = 0;
}

void DatasetWriter::add(const Sample& sample, const GtRasters& gt) {
  const std::string file = "seq" + std::to_string(sample.sequence_id) + "_frame" +
                           std::to_string(sample.frame_index) + ".qbev";
  std::vector<io::NamedArray> arrays;
  for (size_t c = 0; c < sample.images.size(); ++c) {
    arrays.push_back(io::NamedArray::from_tensor_f32("image_" + std::to_string(c),
                                                     sample.images[c]));
    arrays.push_back(io::NamedArray::from_tensor_f32("depth_" + std::to_string(c),
                                                     sample.depth_gt[c]));
    arrays.push_back(io::NamedArray::from_tensor_f32(
        "depth_bins_" + std::to_string(c), gt.depth_bins[c]));
  }
  arrays.push_back(io::NamedArray::from_tensor_f32("ego_pose",
                                                   mat4_tensor(sample.ego_pose.ego_to_global)));
  arrays.push_back(io::NamedArray::from_tensor_f32(
      "timestamp", Tensor({1}, {sample.ego_pose.timestamp})));
  arrays.push_back(io::NamedArray::from_ints("seq_frame",
                                             {sample.sequence_id, sample.frame_index}));
  for (auto& a : world_arrays(sample.world_ref)) arrays.push_back(std::move(a));
  arrays.push_back(io::NamedArray::from_tensor_f32("det_heatmap", gt.det_heatmap));
  arrays.push_back(io::NamedArray::from_tensor_f32("det_reg", gt.det_reg));
  arrays.push_back(io::NamedArray::from_tensor_f32("det_mask", gt.det_mask));
  arrays.push_back(io::NamedArray::from_tensor_f32("map_masks", gt.map_masks));
  arrays.push_back(io::NamedArray::from_tensor_f32("lane_conf", gt.lane_conf));
  arrays.push_back(io::NamedArray::from_tensor_f32("lane_offset", gt.lane_offset));
  arrays.push_back(io::NamedArray::from_tensor_f32("lane_embed_id", gt.lane_embed_id));
  arrays.push_back(io::NamedArray::from_tensor_f32("lane_class", gt.lane_class));
  std::vector<int32_t> occ(static_cast<size_t>(gt.occ_grid.numel()));
  for (long i = 0; i < gt.occ_grid.numel(); ++i) occ[static_cast<size_t>(i)] =
      static_cast<int32_t>(gt.occ_grid[i]);
  arrays.push_back(io::NamedArray::from_ints("occ_grid", occ, gt.occ_grid.shape()));

  io::write_record(dir_ + "/" + file, kRecordMagic, kDatasetVersion, arrays);
  manifest_.records.push_back(
      {file, sample.sequence_id, sample.frame_index, sample.ego_pose.timestamp});
  ++manifest_.n_samples;
}

std::string DatasetWriter::finalize() {
  json j;
  j["format"] = "qbev";
  j["format_version"] = manifest_.format_version;
  j["grid"] = grid_json(manifest_.grid);
  json cams = json::array();
  for (const auto& c : manifest_.cameras) cams.push_back(camera_json(c));
  j["cameras"] = cams;
  j["n_sequences"] = manifest_.n_sequences;
  j["n_samples"] = manifest_.n_samples;
  j["fps"] = manifest_.fps;
  j["seed"] = manifest_.seed;
  j["feature_stride"] = manifest_.feature_stride;
  j["n_det_categories"] = manifest_.n_det_categories;
  j["preset"] = manifest_.preset;
  json recs = json::array();
  for (const auto& r : manifest_.records) {
    json e;
    e["file"] = r.file;
    e["sequence_id"] = r.sequence_id;
    e["frame_index"] = r.frame_index;
    e["timestamp"] = r.timestamp;
    recs.push_back(e);
  }
  j["records"] = recs;
  const std::string path = manifest_path(dir_);
  std::ofstream f(path);
  check(f.good(), ErrCode::io, "cannot write manifest: " + path);
  f << j.dump(2) << "\n";
  return path;
}

std::string manifest_path(const std::string& dir) { return dir + "/manifest"; }

DatasetManifest read_manifest(const std::string& dir) {
  const std::string path = manifest_path(dir);
  std::ifstream f(path);
  check(f.good(), ErrCode::io, "cannot open manifest: " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw QbError(ErrCode::corrupt, "manifest parse error: " + std::string(e.what()));
  }
  DatasetManifest m;
  m.format_version = j.at("format_version");
  check(m.format_version == kDatasetVersion, ErrCode::version,
        "dataset format version " + std::to_string(m.format_version) + " unsupported");
  m.grid = grid_from_json(j.at("grid"));
  for (const auto& cj : j.at("cameras")) m.cameras.push_back(camera_from_json(cj));
  m.n_sequences = j.at("n_sequences");
  m.n_samples = j.at("n_samples");
  m.fps = j.at("fps");
  m.seed = j.at("seed");
  m.feature_stride = j.at("feature_stride");
  m.n_det_categories = j.at("n_det_categories");
  m.preset = j.value("preset", "desk");
  for (const auto& rj : j.at("records")) {
    ManifestEntry e;
    e.file = rj.at("file");
    e.sequence_id = rj.at("sequence_id");
    e.frame_index = rj.at("frame_index");
    e.timestamp = rj.at("timestamp");
    m.records.push_back(e);
  }
  return m;
}

DatasetReader::DatasetReader(const std::string& dir) : dir_(dir), manifest_(read_manifest(dir)) {
  check(static_cast<int>(manifest_.records.size()) == manifest_.n_samples,
        ErrCode::count_mismatch,
        "manifest claims " + std::to_string(manifest_.n_samples) + " samples but lists " +
            std::to_string(manifest_.records.size()) + " records");
  int present = 0;
  for (const auto& r : manifest_.records)
    if (fs::exists(dir_ + "/" + r.file)) ++present;
  check(present == manifest_.n_samples, ErrCode::count_mismatch,
        "manifest claims " + std::to_string(manifest_.n_samples) + " records, directory has " +
            std::to_string(present));
}

std::pair<Sample, GtRasters> DatasetReader::load(int idx) const {
  check_contract(idx >= 0 && idx < size(), "dataset index out of range");
  const ManifestEntry& entry = manifest_.records[static_cast<size_t>(idx)];
  const io::Record rec =
      io::read_record(dir_ + "/" + entry.file, kRecordMagic, kDatasetVersion);

  Sample s;
  s.cameras = manifest_.cameras;
  GtRasters gt;
  for (size_t c = 0; c < manifest_.cameras.size(); ++c) {
    s.images.push_back(rec.get("image_" + std::to_string(c)).to_tensor());
    s.depth_gt.push_back(rec.get("depth_" + std::to_string(c)).to_tensor());
    gt.depth_bins.push_back(rec.get("depth_bins_" + std::to_string(c)).to_tensor());
  }
  s.ego_pose.ego_to_global = tensor_mat4(rec.get("ego_pose").to_tensor());
  s.ego_pose.timestamp = rec.get("timestamp").to_tensor()[0];
  const auto sf = rec.get("seq_frame").to_ints();
  s.sequence_id = sf[0];
  s.frame_index = sf[1];
  check(s.sequence_id == entry.sequence_id && s.frame_index == entry.frame_index,
        ErrCode::corrupt, "record/manifest disagreement in " + entry.file);
  s.world_ref = world_from_record(rec);

  gt.det_heatmap = rec.get("det_heatmap").to_tensor();
  gt.det_reg = rec.get("det_reg").to_tensor();
  gt.det_mask = rec.get("det_mask").to_tensor();
  gt.map_masks = rec.get("map_masks").to_tensor();
  gt.lane_conf = rec.get("lane_conf").to_tensor();
  gt.lane_offset = rec.get("lane_offset").to_tensor();
  gt.lane_embed_id = rec.get("lane_embed_id").to_tensor();
  gt.lane_class = rec.get("lane_class").to_tensor();
  gt.occ_grid = rec.get("occ_grid").to_tensor();
  return {std::move(s), std::move(gt)};
}

std::vector<int> DatasetReader::history_indices(int idx, int t_hist) const {
  const ManifestEntry& entry = manifest_.records[static_cast<size_t>(idx)];
  std::vector<int> out;
  for (int back = 1; back <= t_hist; ++back) {
    const int want = entry.frame_index - back;
    bool found = false;
    for (int i = 0; i < size(); ++i) {
      const auto& r = manifest_.records[static_cast<size_t>(i)];
      if (r.sequence_id == entry.sequence_id && r.frame_index == want) {
        out.push_back(i);
        found = true;
        break;
      }
    }
    if (!found) break;
  }
  return out;
}

void generate_dataset(const DataGenConfig& cfg, const std::string& out_dir) {
  check_contract(cfg.n_sequences > 0 && cfg.frames_per_sequence > 0,
                 "generate_dataset: empty request");
  DatasetManifest header;
  header.grid = make_grid(cfg.preset);
  header.cameras = make_rig(cfg.preset);
  header.n_sequences = cfg.n_sequences;
  header.fps = cfg.fps;
  header.seed = cfg.seed;
  header.feature_stride = cfg.feature_stride;
  header.n_det_categories = cfg.n_det_categories;
  header.preset = cfg.preset;
  DatasetWriter writer(out_dir, header);

  for (int seq = 0; seq < cfg.n_sequences; ++seq) {
    const uint64_t seq_seed = cfg.seed * 1000003ull + static_cast<uint64_t>(seq);
    World world = generate_world(seq_seed, cfg.world);
    Rng traj_rng(seq_seed ^ 0xabcdef1234567890ull);
    const double speed = traj_rng.uniform(2.0, 5.0);
    double curvature = 0.0;
    if (traj_rng.uniform() > 0.4)
      curvature = (traj_rng.uniform() < 0.5 ? -1 : 1) * traj_rng.uniform(0.008, 0.035);

    for (int f = 0; f < cfg.frames_per_sequence; ++f) {
      geom::EgoPose pose = trajectory_pose(speed, curvature, f / cfg.fps);
      quantize_pose(pose);
      Sample sample = render_sample(world, header.cameras, pose, header.grid);
      sample.sequence_id = seq;
      sample.frame_index = f;
      GtRasters gt = rasterize_gt(sample.world_ref, header.grid, header.cameras,
                                  sample.depth_gt, cfg.feature_stride, cfg.n_det_categories);
      writer.add(sample, gt);
    }
  }
  writer.finalize();
}

void split_dataset(const DatasetManifest& m, std::vector<int>& train_idx,
                   std::vector<int>& val_idx) {
  std::vector<int> seqs;
  for (const auto& r : m.records)
    if (std::find(seqs.begin(), seqs.end(), r.sequence_id) == seqs.end())
      seqs.push_back(r.sequence_id);
  std::vector<std::pair<uint64_t, int>> hashed;
  for (int s : seqs) hashed.emplace_back(fnv1a64_str("seq" + std::to_string(s)), s);
  std::sort(hashed.begin(), hashed.end());
  const int n_val = (static_cast<int>(seqs.size()) + 4) / 5;  // ceil(0.2 n)
  std::vector<int> val_seqs;
  for (int i = 0; i < n_val; ++i) val_seqs.push_back(hashed[static_cast<size_t>(i)].second);

  train_idx.clear();
  val_idx.clear();
  for (int i = 0; i < static_cast<int>(m.records.size()); ++i) {
    const int s = m.records[static_cast<size_t>(i)].sequence_id;
    if (std::find(val_seqs.begin(), val_seqs.end(), s) != val_seqs.end())
      val_idx.push_back(i);
    else
      train_idx.push_back(i);
  }
}

}  // namespace qbev::synth
