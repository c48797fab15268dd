#pragma once

#include <cstdint>
#include <vector>

#include "pcas/dsp.hpp"
#include "pcas/image_io.hpp"
#include "pcas/tensor.hpp"

namespace pcas {

enum class ShapeKind { kCircle, kSquare, kTriangle };

// Class c draws shape (c-1) % 3; fundamental frequency 220 * 2^(c/3) Hz.
ShapeKind shape_for_class(int class_id);
double fundamental_hz(int class_id);
std::string class_name(int class_id);

struct SceneObject {
  int class_id = 1;  // 1-based; 0 is reserved for background
  ShapeKind shape = ShapeKind::kCircle;
  double cx = 0, cy = 0;  // center in pixels
  double size = 0;        // radius (circle/triangle circumradius) or half-side
  double color[3] = {1, 1, 1};
};

struct SceneSpec {
  int num_classes = 3;
  int frames = 5;
  int height = 32, width = 32;
  std::vector<SceneObject> objects;
  // schedule[t] = class ids sounding at frame t; must be classes present in
  // the scene, and at least one frame must have an active class.
  std::vector<std::vector<int>> schedule;
  double noise_level = 0.08;
  uint64_t seed = 0;

  std::vector<int> label_set() const;  // union of scheduled classes, sorted
  void validate() const;
};

struct RenderedScene {
  // The scene is static: every frame holds the same composed image. Masks
  // still vary per frame because they follow the sounding-object semantics:
  // a visible but silent object is background.
  std::vector<Tensor> frames;           // T x (3xHxW)
  std::vector<SemanticMask> gt_masks;   // T x (HxW)
  std::vector<int> visible_pixels;      // per object, pixels it owns on screen
};

RenderedScene render_scene(const SceneSpec& spec);

struct AudioSynthParams {
  int sample_rate = 16000;
  double seconds_per_frame = 1.0;
  double tone_gain = 0.25;        // per-class gain before harmonics
  double ramp_seconds = 0.010;    // raised-cosine on/off ramps
  double amp_jitter_lo = 0.5;     // per (class, frame) amplitude jitter
  double amp_jitter_hi = 1.0;
};

// Sums the class signatures (fundamental + 2 harmonics) over the schedule,
// adds Gaussian noise at spec.noise_level, then peak-normalizes to 0.95 if
// needed. Throws if the result still clips.
std::vector<double> synth_audio(const SceneSpec& spec, const AudioSynthParams& params);

struct FbankParams {
  int n_fft = 512;
  int n_mels = 64;
  double f_min = 0.0;
  double f_max = 8000.0;
  int frames_per_video_frame = 16;
};

// Full fbank pipeline for one clip; output has exactly
// frames * frames_per_video_frame rows (generator guarantees the waveform
// length divides evenly; extra STFT frames are truncated).
FbankFeatures clip_fbank(const std::vector<double>& waveform, int sample_rate,
                         int video_frames, const FbankParams& params);

}  // namespace pcas
