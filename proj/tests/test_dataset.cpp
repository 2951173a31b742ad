#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "quadbev/arrayio.hpp"
#include "quadbev/dataset.hpp"

using namespace qbev;
using namespace qbev::synth;
namespace fs = std::filesystem;

namespace {

std::string temp_dir(const std::string& tag) {
  const std::string d = (fs::temp_directory_path() / ("qbev_test_" + tag)).string();
  fs::remove_all(d);
  return d;
}

DataGenConfig small_cfg(uint64_t seed = 0) {
  DataGenConfig cfg;
  cfg.seed = seed;
  cfg.n_sequences = 2;
  cfg.frames_per_sequence = 4;
  return cfg;
}

}  // namespace

TEST_CASE("dataset: write then read is bit-exact") {
  const std::string dir = temp_dir("roundtrip");
  generate_dataset(small_cfg(), dir);

  DatasetReader reader(dir);
  CHECK(reader.size() == 8);

  // regenerate in memory and compare arrays bitwise
  DataGenConfig cfg = small_cfg();
  World world = generate_world(cfg.seed * 1000003ull, cfg.world);
  auto rig = make_rig("desk");
  auto grid = make_grid("desk");
  Rng traj_rng((cfg.seed * 1000003ull) ^ 0xabcdef1234567890ull);
  const double speed = traj_rng.uniform(2.0, 5.0);
  double curv = 0.0;
  if (traj_rng.uniform() > 0.4)
    curv = (traj_rng.uniform() < 0.5 ? -1 : 1) * traj_rng.uniform(0.008, 0.035);

  auto [s0, gt0] = reader.load(0);
  geom::EgoPose pose = trajectory_pose(speed, curv, 0.0);
  for (double& v : pose.ego_to_global.m) v = static_cast<double>(static_cast<float>(v));
  pose.timestamp = static_cast<double>(static_cast<float>(pose.timestamp));
  Sample expected = render_sample(world, rig, pose, grid);
  GtRasters expected_gt = rasterize_gt(expected.world_ref, grid, rig, expected.depth_gt, 8, 3);

  for (size_t c = 0; c < rig.size(); ++c) {
    CHECK(max_abs_diff(s0.images[c], expected.images[c]) == 0.0);
    CHECK(max_abs_diff(s0.depth_gt[c], expected.depth_gt[c]) == 0.0);
    CHECK(max_abs_diff(gt0.depth_bins[c], expected_gt.depth_bins[c]) == 0.0);
  }
  CHECK(max_abs_diff(gt0.det_heatmap, expected_gt.det_heatmap) == 0.0);
  CHECK(max_abs_diff(gt0.det_reg, expected_gt.det_reg) == 0.0);
  CHECK(max_abs_diff(gt0.occ_grid, expected_gt.occ_grid) == 0.0);
  CHECK(max_abs_diff(gt0.lane_offset, expected_gt.lane_offset) == 0.0);
  REQUIRE(s0.world_ref.boxes.size() == expected.world_ref.boxes.size());
  for (size_t i = 0; i < s0.world_ref.boxes.size(); ++i) {
    CHECK(s0.world_ref.boxes[i].x == expected.world_ref.boxes[i].x);
    CHECK(s0.world_ref.boxes[i].yaw == expected.world_ref.boxes[i].yaw);
  }
}

TEST_CASE("dataset: samples grouped by sequence with 2 Hz timestamps") {
  const std::string dir = temp_dir("timestamps");
  generate_dataset(small_cfg(3), dir);
  DatasetReader reader(dir);
  for (int i = 0; i < reader.size(); ++i) {
    const auto& r = reader.manifest().records[static_cast<size_t>(i)];
    CHECK(r.timestamp == doctest::Approx(r.frame_index * 0.5));
  }
  // history lookup: newest first, truncated at sequence start
  CHECK(reader.history_indices(0, 3).empty());
  auto h = reader.history_indices(3, 3);
  REQUIRE(h.size() == 3);
  CHECK(reader.manifest().records[static_cast<size_t>(h[0])].frame_index == 2);
  CHECK(reader.manifest().records[static_cast<size_t>(h[2])].frame_index == 0);
}

TEST_CASE("dataset: corrupted magic bytes are detected and named") {
  const std::string dir = temp_dir("corrupt");
  generate_dataset(small_cfg(1), dir);
  const std::string victim = dir + "/seq1_frame2.qbev";
  {
    std::fstream f(victim, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("XXXX", 4);
  }
  DatasetReader reader(dir);
  int victim_idx = -1;
  for (int i = 0; i < reader.size(); ++i)
    if (reader.manifest().records[static_cast<size_t>(i)].file == "seq1_frame2.qbev")
      victim_idx = i;
  REQUIRE(victim_idx >= 0);
  CHECK_THROWS_WITH_AS(reader.load(victim_idx), doctest::Contains("seq1_frame2.qbev"), QbError);
}

TEST_CASE("dataset: manifest count disagreement is a distinct error") {
  const std::string dir = temp_dir("count");
  generate_dataset(small_cfg(2), dir);
  fs::remove(dir + "/seq0_frame3.qbev");
  try {
    DatasetReader reader(dir);
    FAIL("expected count mismatch");
  } catch (const QbError& e) {
    CHECK(e.code() == ErrCode::count_mismatch);
  }
}

TEST_CASE("dataset: version mismatch is a distinct error") {
  const std::string dir = temp_dir("version");
  generate_dataset(small_cfg(4), dir);
  // bump the version field (offset 4) of one record
  const std::string victim = dir + "/seq0_frame0.qbev";
  {
    std::fstream f(victim, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(4);
    const uint32_t v = 999;
    f.write(reinterpret_cast<const char*>(&v), 4);
  }
  DatasetReader reader(dir);
  try {
    reader.load(0);
    FAIL("expected version error");
  } catch (const QbError& e) {
    CHECK(e.code() == ErrCode::version);
  }
}

TEST_CASE("dataset: split is deterministic and keeps sequences intact") {
  const std::string dir = temp_dir("split");
  DataGenConfig cfg = small_cfg(5);
  cfg.n_sequences = 4;
  generate_dataset(cfg, dir);
  DatasetReader reader(dir);
  std::vector<int> train, val;
  split_dataset(reader.manifest(), train, val);
  CHECK(train.size() + val.size() == static_cast<size_t>(reader.size()));
  CHECK(val.size() == 4);  // one sequence of four frames
  std::vector<int> train2, val2;
  split_dataset(reader.manifest(), train2, val2);
  CHECK(train == train2);
  CHECK(val == val2);
  // no sequence appears on both sides
  for (int ti : train)
    for (int vi : val)
      CHECK(reader.manifest().records[static_cast<size_t>(ti)].sequence_id !=
            reader.manifest().records[static_cast<size_t>(vi)].sequence_id);
}

TEST_CASE("named arrays: f64 round trip and unsupported reads") {
  Tensor t({2, 2}, {1.0 / 3.0, 2.0, -5.5, 1e-17});
  auto a = io::NamedArray::from_tensor_f64("x", t);
  Tensor back = a.to_tensor();
  CHECK(max_abs_diff(t, back) == 0.0);
}
