#pragma once

#include <string>
#include <utility>
#include <vector>

#include "quadbev/sample.hpp"

namespace qbev::synth {

inline constexpr uint32_t kDatasetVersion = 1;

// Desk-scale rig: four 90-degree cameras at 128x64. "paperish" switches to
// six cameras at 704x256.
std::vector<geom::CameraModel> make_rig(const std::string& preset);
geom::BevGridSpec make_grid(const std::string& preset);

struct DataGenConfig {
  uint64_t seed = 0;
  int n_sequences = 4;
  int frames_per_sequence = 4;
  std::string preset = "desk";
  GenSpec world;
  double fps = 2.0;
  int feature_stride = 8;
  int n_det_categories = 3;
};

struct ManifestEntry {
  std::string file;
  int sequence_id = 0;
  int frame_index = 0;
  double timestamp = 0;
};

struct DatasetManifest {
  uint32_t format_version = kDatasetVersion;
  geom::BevGridSpec grid;
  std::vector<geom::CameraModel> cameras;
  int n_sequences = 0;
  int n_samples = 0;
  double fps = 2.0;
  uint64_t seed = 0;
  int feature_stride = 8;
  int n_det_categories = 3;
  std::string preset = "desk";
  std::vector<ManifestEntry> records;
};

class DatasetWriter {
 public:
  DatasetWriter(std::string dir, DatasetManifest header);
  void add(const Sample& sample, const GtRasters& gt);
  // writes the manifest; returns its path
  std::string finalize();

 private:
  std::string dir_;
  DatasetManifest manifest_;
};

class DatasetReader {
 public:
  explicit DatasetReader(const std::string& dir);  // validates counts and files
  const DatasetManifest& manifest() const { return manifest_; }
  int size() const { return static_cast<int>(manifest_.records.size()); }
  std::pair<Sample, GtRasters> load(int idx) const;
  // record indices of previous frames of the same sequence, newest first
  std::vector<int> history_indices(int idx, int t_hist) const;
  const std::string& dir() const { return dir_; }

 private:
  std::string dir_;
  DatasetManifest manifest_;
};

// Ego pose of a straight or constant-curvature trajectory at time t.
geom::EgoPose trajectory_pose(double speed, double curvature, double t);

// Procedural generation of a full dataset directory; deterministic in cfg.
void generate_dataset(const DataGenConfig& cfg, const std::string& out_dir);

// Deterministic 80/20 split by sequence hash; val gets ceil(0.2 * n_seq)
// sequences. Outputs are record indices.
void split_dataset(const DatasetManifest& m, std::vector<int>& train_idx,
                   std::vector<int>& val_idx);

std::string manifest_path(const std::string& dir);
DatasetManifest read_manifest(const std::string& dir);

}  // namespace qbev::synth
