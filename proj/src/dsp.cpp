#include "pcas/dsp.hpp"

#include <cmath>

#include "pcas/logging.hpp"

namespace pcas {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kLogFloor = 1e-10;

bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

// Reflect index (librosa-style, no edge repetition): ... x2 x1 | x0 x1 x2 ...
int reflect_index(int i, int len) {
  if (len == 1) return 0;
  const int period = 2 * (len - 1);
  int m = i % period;
  if (m < 0) m += period;
  return m < len ? m : period - m;
}

}  // namespace

void fft_radix2(std::vector<std::complex<double>>& x) {
  const int n = static_cast<int>(x.size());
  if (!is_pow2(n)) throw Error("fft_radix2: size must be a power of two");
  // Bit-reversal permutation.
  for (int i = 1, j = 0; i < n; ++i) {
    int bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(x[i], x[j]);
  }
  for (int len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * kPi / len;
    const std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (int i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (int k = 0; k < len / 2; ++k) {
        const std::complex<double> u = x[i + k];
        const std::complex<double> v = x[i + k + len / 2] * w;
        x[i + k] = u + v;
        x[i + k + len / 2] = u - v;
        w *= wl;
      }
    }
  }
}

Tensor stft_magnitude(const std::vector<double>& waveform, int n_fft, int hop) {
  if (!is_pow2(n_fft)) throw Error("stft_magnitude: n_fft must be a power of two");
  if (hop <= 0) throw Error("stft_magnitude: hop must be positive");
  const int len = static_cast<int>(waveform.size());
  if (len == 0) throw Error("stft_magnitude: empty waveform");

  const int n_bins = n_fft / 2 + 1;
  const int n_frames = (len - 1) / hop + 1;
  std::vector<double> window(static_cast<size_t>(n_fft));
  for (int i = 0; i < n_fft; ++i)
    window[static_cast<size_t>(i)] = 0.5 * (1.0 - std::cos(2.0 * kPi * i / n_fft));

  Tensor out({n_frames, n_bins});
  std::vector<std::complex<double>> buf(static_cast<size_t>(n_fft));
  for (int r = 0; r < n_frames; ++r) {
    const int center = r * hop;
    for (int i = 0; i < n_fft; ++i) {
      const int src = reflect_index(center - n_fft / 2 + i, len);
      buf[static_cast<size_t>(i)] = waveform[static_cast<size_t>(src)] * window[static_cast<size_t>(i)];
    }
    fft_radix2(buf);
    for (int k = 0; k < n_bins; ++k) out.at(r, k) = std::abs(buf[static_cast<size_t>(k)]);
  }
  return out;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::vector<double> mel_filter_centers_hz(int n_mels, double f_min, double f_max) {
  const double m_lo = hz_to_mel(f_min), m_hi = hz_to_mel(f_max);
  std::vector<double> centers(static_cast<size_t>(n_mels));
  for (int m = 0; m < n_mels; ++m)
    centers[static_cast<size_t>(m)] = mel_to_hz(m_lo + (m_hi - m_lo) * (m + 1) / (n_mels + 1));
  return centers;
}

Tensor mel_filterbank(int n_mels, int n_fft, double sample_rate, double f_min,
                      double f_max) {
  if (f_max > sample_rate / 2.0 + 1e-9)
    throw Error("mel_filterbank: f_max above Nyquist");
  if (f_min < 0.0 || f_min >= f_max) throw Error("mel_filterbank: bad f_min/f_max");
  const int n_bins = n_fft / 2 + 1;
  const double m_lo = hz_to_mel(f_min), m_hi = hz_to_mel(f_max);
  // n_mels + 2 break points: filter m spans [pts[m], pts[m+2]], peak pts[m+1].
  std::vector<double> pts(static_cast<size_t>(n_mels) + 2);
  for (int i = 0; i < n_mels + 2; ++i)
    pts[static_cast<size_t>(i)] = mel_to_hz(m_lo + (m_hi - m_lo) * i / (n_mels + 1));

  Tensor fb({n_mels, n_bins});
  for (int m = 0; m < n_mels; ++m) {
    const double left = pts[static_cast<size_t>(m)];
    const double center = pts[static_cast<size_t>(m) + 1];
    const double right = pts[static_cast<size_t>(m) + 2];
    for (int k = 0; k < n_bins; ++k) {
      const double f = k * sample_rate / n_fft;
      double w = 0.0;
      if (f > left && f < center) {
        w = (f - left) / (center - left);
      } else if (f == center) {
        w = 1.0;
      } else if (f > center && f < right) {
        w = (right - f) / (right - center);
      }
      fb.at(m, k) = w;
    }
  }
  return fb;
}

FbankFeatures log_mel(const Tensor& magnitudes, int n_mels, double sample_rate,
                      double f_min, double f_max, int n_fft, int hop) {
  if (magnitudes.rank() != 2) throw Error("log_mel: magnitudes must be rank-2");
  const int n_frames = magnitudes.shape[0];
  const int n_bins = magnitudes.shape[1];
  if (n_bins != n_fft / 2 + 1) throw Error("log_mel: bin count does not match n_fft");
  const Tensor fb = mel_filterbank(n_mels, n_fft, sample_rate, f_min, f_max);

  FbankFeatures out;
  out.values = Tensor({n_frames, n_mels});
  out.sample_rate = sample_rate;
  out.window_size = n_fft;
  out.hop_size = hop;
  for (int r = 0; r < n_frames; ++r)
    for (int m = 0; m < n_mels; ++m) {
      double acc = 0.0;
      for (int k = 0; k < n_bins; ++k) {
        const double mag = magnitudes.at(r, k);
        acc += fb.at(m, k) * mag * mag;
      }
      out.values.at(r, m) = std::log(acc + kLogFloor);
    }
  return out;
}

}  // namespace pcas
