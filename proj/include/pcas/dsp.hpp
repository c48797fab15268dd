#pragma once

#include <complex>
#include <vector>

#include "pcas/tensor.hpp"

namespace pcas {

// In-place iterative radix-2 FFT. Size must be a power of two.
void fft_radix2(std::vector<std::complex<double>>& x);

// STFT magnitudes: Hann window of length n_fft, frame r centered at sample
// r*hop, reflect padding at the edges. Output is n_frames x (n_fft/2 + 1).
// n_frames = floor((len-1)/hop) + 1.
Tensor stft_magnitude(const std::vector<double>& waveform, int n_fft, int hop);

// HTK-scale mel frequency helpers: m = 2595 * log10(1 + f/700).
double hz_to_mel(double hz);
double mel_to_hz(double mel);

// Triangular mel filterbank, each filter peaking at 1 at its center bin.
// Rows: n_mels, cols: n_fft/2 + 1.
Tensor mel_filterbank(int n_mels, int n_fft, double sample_rate, double f_min,
                      double f_max);

struct FbankFeatures {
  Tensor values;  // T_fbank x n_mels, natural log energies
  double sample_rate = 0.0;
  int window_size = 0;
  int hop_size = 0;
};

// log(filterbank * power + floor) with floor 1e-10; power = magnitude^2.
FbankFeatures log_mel(const Tensor& magnitudes, int n_mels, double sample_rate,
                      double f_min, double f_max, int n_fft, int hop);

// Center frequencies (Hz) of each mel filter; used by tests to locate the
// filter bracketing a given tone.
std::vector<double> mel_filter_centers_hz(int n_mels, double f_min, double f_max);

}  // namespace pcas
