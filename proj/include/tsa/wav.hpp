#pragma once

#include <string>
#include <vector>

namespace tsa {

struct Waveform {
  std::vector<double> samples;  // in [-1, 1]
  int sample_rate = 16000;

  double duration_s() const {
    return static_cast<double>(samples.size()) / sample_rate;
  }
};

// Mono PCM-16 RIFF reader. Anything else (stereo, other bit depths,
// compressed encodings) is rejected with a descriptive error.
Waveform read_wav(const std::string& path);

// Writes mono PCM-16 little-endian at the waveform's sample rate.
// Samples are clamped to [-1, 1] before quantization.
void write_wav(const std::string& path, const Waveform& w);

}  // namespace tsa
