#include "pcas/avsynth.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "pcas/logging.hpp"
#include "pcas/rng.hpp"

namespace pcas {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Fixed palette; classes beyond six reuse hues with a brightness drop.
const double kPalette[6][3] = {
    {0.86, 0.20, 0.20}, {0.20, 0.72, 0.25}, {0.22, 0.35, 0.88},
    {0.88, 0.80, 0.18}, {0.80, 0.25, 0.80}, {0.20, 0.78, 0.80},
};

bool inside_shape(const SceneObject& o, double x, double y) {
  const double dx = x - o.cx, dy = y - o.cy;
  switch (o.shape) {
    case ShapeKind::kCircle:
      return dx * dx + dy * dy <= o.size * o.size;
    case ShapeKind::kSquare:
      return std::max(std::abs(dx), std::abs(dy)) <= o.size;
    case ShapeKind::kTriangle: {
      // Equilateral, apex up, inscribed in the circumradius `size`.
      const double ax = o.cx, ay = o.cy - o.size;
      const double bx = o.cx - 0.8660254037844386 * o.size, by = o.cy + 0.5 * o.size;
      const double cx = o.cx + 0.8660254037844386 * o.size, cy = o.cy + 0.5 * o.size;
      auto cross = [](double ox, double oy, double px, double py, double qx, double qy) {
        return (px - ox) * (qy - oy) - (py - oy) * (qx - ox);
      };
      const double d1 = cross(ax, ay, bx, by, x, y);
      const double d2 = cross(bx, by, cx, cy, x, y);
      const double d3 = cross(cx, cy, ax, ay, x, y);
      const bool neg = (d1 < 0) || (d2 < 0) || (d3 < 0);
      const bool pos = (d1 > 0) || (d2 > 0) || (d3 > 0);
      return !(neg && pos);
    }
  }
  return false;
}

// 4x4 supersampled coverage in [0,1].
double coverage(const SceneObject& o, int px, int py) {
  int hits = 0;
  for (int sy = 0; sy < 4; ++sy)
    for (int sx = 0; sx < 4; ++sx) {
      const double x = px + (sx + 0.5) / 4.0;
      const double y = py + (sy + 0.5) / 4.0;
      if (inside_shape(o, x, y)) ++hits;
    }
  return hits / 16.0;
}

}  // namespace

ShapeKind shape_for_class(int class_id) {
  switch ((class_id - 1) % 3) {
    case 0: return ShapeKind::kCircle;
    case 1: return ShapeKind::kSquare;
    default: return ShapeKind::kTriangle;
  }
}

double fundamental_hz(int class_id) {
  return 220.0 * std::pow(2.0, class_id / 3.0);
}

std::string class_name(int class_id) {
  static const char* kShapes[3] = {"circle", "square", "triangle"};
  const int octave = (class_id - 1) / 3;
  return std::string(kShapes[(class_id - 1) % 3]) + std::to_string(octave);
}

std::vector<int> SceneSpec::label_set() const {
  std::set<int> s;
  for (const auto& frame : schedule)
    for (int c : frame) s.insert(c);
  return std::vector<int>(s.begin(), s.end());
}

void SceneSpec::validate() const {
  if (num_classes < 1) throw Error("SceneSpec: num_classes must be positive");
  if (static_cast<int>(schedule.size()) != frames)
    throw Error("SceneSpec: schedule length must equal frame count");
  std::set<int> present;
  for (const auto& o : objects) {
    if (o.class_id < 1 || o.class_id > num_classes)
      throw Error("SceneSpec: object class out of range");
    present.insert(o.class_id);
  }
  bool any_active = false;
  for (const auto& frame : schedule)
    for (int c : frame) {
      if (!present.count(c)) throw Error("SceneSpec: scheduled class not in scene");
      any_active = true;
    }
  if (!objects.empty() && !any_active)
    throw Error("SceneSpec: no frame has an active class");
}

RenderedScene render_scene(const SceneSpec& spec) {
  spec.validate();
  const int h = spec.height, w = spec.width;
  for (const auto& o : spec.objects) {
    if (o.cx - o.size < 0 || o.cx + o.size > w || o.cy - o.size < 0 || o.cy + o.size > h)
      throw Error("render_scene: object outside canvas");
  }

  // Textured background: bilinearly smoothed 4x4 value-noise grid plus a
  // small per-pixel grain, all from the scene seed.
  Rng rng(seed_stream(spec.seed, "render"));
  double grid[3][5][5];
  for (int c = 0; c < 3; ++c)
    for (int gy = 0; gy < 5; ++gy)
      for (int gx = 0; gx < 5; ++gx) grid[c][gy][gx] = rng.uniform(0.25, 0.55);

  Tensor image({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double fy = y * 4.0 / h, fx = x * 4.0 / w;
      const int gy = static_cast<int>(fy), gx = static_cast<int>(fx);
      const double ty = fy - gy, tx = fx - gx;
      const double grain = rng.uniform(-0.04, 0.04);
      for (int c = 0; c < 3; ++c) {
        const double v = (1 - ty) * ((1 - tx) * grid[c][gy][gx] + tx * grid[c][gy][gx + 1]) +
                         ty * ((1 - tx) * grid[c][gy + 1][gx] + tx * grid[c][gy + 1][gx + 1]);
        image.at(c, y, x) = std::clamp(v + grain, 0.0, 1.0);
      }
    }

  // Composite objects in draw order; the owner map records the topmost
  // object covering each pixel at >= 0.5.
  std::vector<int> owner(static_cast<size_t>(h) * w, -1);
  for (size_t oi = 0; oi < spec.objects.size(); ++oi) {
    const SceneObject& o = spec.objects[oi];
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double a = coverage(o, x, y);
        if (a <= 0.0) continue;
        for (int c = 0; c < 3; ++c)
          image.at(c, y, x) = a * o.color[c] + (1 - a) * image.at(c, y, x);
        if (a >= 0.5) owner[static_cast<size_t>(y) * w + x] = static_cast<int>(oi);
      }
  }

  RenderedScene out;
  out.visible_pixels.assign(spec.objects.size(), 0);
  for (int v : owner)
    if (v >= 0) out.visible_pixels[static_cast<size_t>(v)]++;

  out.frames.assign(static_cast<size_t>(spec.frames), image);
  out.gt_masks.reserve(static_cast<size_t>(spec.frames));
  for (int t = 0; t < spec.frames; ++t) {
    SemanticMask mask(h, w);
    const auto& active = spec.schedule[static_cast<size_t>(t)];
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const int oi = owner[static_cast<size_t>(y) * w + x];
        if (oi < 0) continue;
        const int cls = spec.objects[static_cast<size_t>(oi)].class_id;
        if (std::find(active.begin(), active.end(), cls) != active.end())
          mask.at(y, x) = static_cast<uint8_t>(cls);
      }
    out.gt_masks.push_back(std::move(mask));
  }
  return out;
}

std::vector<double> synth_audio(const SceneSpec& spec, const AudioSynthParams& params) {
  spec.validate();
  const int spf = static_cast<int>(params.seconds_per_frame * params.sample_rate);
  const int total = spf * spec.frames;
  std::vector<double> wave(static_cast<size_t>(total), 0.0);

  Rng jitter_rng(seed_stream(spec.seed, "amp_jitter"));
  const int ramp = std::max(1, static_cast<int>(params.ramp_seconds * params.sample_rate));
  const double harmonics[3] = {1.0, 0.3, 0.15};

  for (int t = 0; t < spec.frames; ++t) {
    for (int cls : spec.schedule[static_cast<size_t>(t)]) {
      const double f0 = fundamental_hz(cls);
      const double amp =
          params.tone_gain * jitter_rng.uniform(params.amp_jitter_lo, params.amp_jitter_hi);
      for (int i = 0; i < spf; ++i) {
        const int n = t * spf + i;
        // Raised-cosine ramps at both segment edges.
        double env = 1.0;
        if (i < ramp) env = 0.5 * (1.0 - std::cos(kPi * i / ramp));
        if (i >= spf - ramp) env = std::min(env, 0.5 * (1.0 - std::cos(kPi * (spf - 1 - i) / ramp)));
        double s = 0.0;
        for (int hm = 0; hm < 3; ++hm)
          s += harmonics[hm] * std::sin(2.0 * kPi * (hm + 1) * f0 * n / params.sample_rate);
        wave[static_cast<size_t>(n)] += amp * env * s;
      }
    }
  }

  if (spec.noise_level > 0.0) {
    Rng noise_rng(seed_stream(spec.seed, "noise"));
    for (double& v : wave) v += noise_rng.normal(0.0, spec.noise_level);
  }

  double peak = 0.0;
  for (double v : wave) peak = std::max(peak, std::abs(v));
  if (peak > 0.95) {
    const double scale = 0.95 / peak;
    for (double& v : wave) v *= scale;
  }
  for (double v : wave)
    if (!std::isfinite(v) || std::abs(v) > 1.0)
      throw Error("synth_audio: waveform clips after normalization");
  return wave;
}

FbankFeatures clip_fbank(const std::vector<double>& waveform, int sample_rate,
                         int video_frames, const FbankParams& params) {
  if (video_frames <= 0) throw Error("clip_fbank: bad frame count");
  if (static_cast<int>(waveform.size()) % video_frames != 0)
    throw Error("clip_fbank: waveform length not divisible by frame count");
  const int hop = static_cast<int>(waveform.size()) / video_frames /
                  params.frames_per_video_frame;
  if (hop <= 0) throw Error("clip_fbank: hop computed as zero");
  Tensor mag = stft_magnitude(waveform, params.n_fft, hop);
  FbankFeatures fb = log_mel(mag, params.n_mels, sample_rate, params.f_min,
                             params.f_max, params.n_fft, hop);
  const int want = video_frames * params.frames_per_video_frame;
  if (fb.values.shape[0] < want) throw Error("clip_fbank: too few fbank frames");
  if (fb.values.shape[0] > want) {
    Tensor cut({want, fb.values.shape[1]});
    std::copy(fb.values.data.begin(),
              fb.values.data.begin() + static_cast<size_t>(want) * fb.values.shape[1],
              cut.data.begin());
    fb.values = std::move(cut);
  }
  return fb;
}

}  // namespace pcas
