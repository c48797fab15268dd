#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "pcas/avsynth.hpp"

namespace pcas {

struct GenConfig {
  int samples = 400;  // split 75/12.5/12.5 into train/val/test
  int num_classes = 3;
  int frames = 5;
  int height = 32, width = 32;
  AudioSynthParams audio;
  FbankParams fbank;
  double noise_level = 0.08;
  double multi_source_fraction = 0.4;  // clips with two overlapping sources
  uint64_t seed = 1;
};

struct DatasetManifest {
  struct Record {
    std::string dir;          // e.g. "train/sample_00012"
    std::vector<int> labels;  // class ids, sorted
    int frames = 0;
  };
  std::vector<std::string> class_names;  // index 0 = class id 1
  std::vector<Record> records;

  int num_classes() const { return static_cast<int>(class_names.size()); }
  std::vector<const Record*> split(const std::string& name) const;
};

// Writes the full on-disk dataset. Refuses a nonempty target unless force,
// in which case the target is removed first. Byte-identical per seed.
void generate_dataset(const GenConfig& cfg, const std::filesystem::path& root, bool force);

DatasetManifest load_manifest(const std::filesystem::path& root);

// Training-path clip. Deliberately has no ground-truth mask field: masks are
// reachable only through EvalClip, which the trainer never touches.
struct TrainClip {
  std::string dir;
  std::vector<int> labels;              // class ids
  std::vector<Tensor> frames;           // T x (3xHxW), values in [0,1]
  std::vector<Tensor> fbank_slices;     // T x (F x n_mels), normalized
};

struct EvalClip {
  TrainClip clip;
  std::vector<SemanticMask> gt_masks;
  // Active classes per frame, recovered from the masks (the generator
  // guarantees every object keeps visible pixels, so this equals the
  // sounding schedule).
  std::vector<std::vector<int>> frame_active;
};

TrainClip load_train_clip(const std::filesystem::path& root,
                          const DatasetManifest& manifest,
                          const DatasetManifest::Record& rec,
                          const FbankParams& fbank);

// Throws with a clear message when gt_masks are absent.
EvalClip load_eval_clip(const std::filesystem::path& root,
                        const DatasetManifest& manifest,
                        const DatasetManifest::Record& rec,
                        const FbankParams& fbank);

}  // namespace pcas
