#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "addp/signal.hpp"
#include "addp/video.hpp"
#include "json.hpp"

namespace addp::synth {

/// Appearance and acquisition factors that distinguish one synthetic domain
/// from another.
struct DomainFactors {
  std::array<double, 3> base_color{0.75, 0.55, 0.45};  // RGB skin tone
  double illumination_gain = 1.0;
  double illumination_flicker_hz = 0.0;
  double motion_amplitude = 0.0;  // pixels
  double noise_sigma = 0.0;
  double fs = 30.0;

  void validate() const;
};

struct TaskSpec {
  std::string name = "task";
  DomainFactors domain{};
  int n_train_clips = 16;
  int n_test_clips = 4;
  double hr_lo = 60.0;
  double hr_hi = 120.0;
  std::uint64_t seed = 0;
  int frames = 160;
  int height = 32;
  int width = 32;

  void validate() const;
};

struct ClipSample {
  Video video;
  signal::Waveform label;
  double hr = 0.0;
  int task_id = 0;
  std::int64_t sample_id = 0;
  // Clips cut from the same recording share an id; metrics aggregate per recording.
  std::int64_t recording_id = 0;
};

/// Per-clip random draws. Rendering is a pure function of (spec, params).
struct ClipParams {
  double hr = 0.0;
  double pulse_phase = 0.0;
  double flicker_phase = 0.0;
  std::array<double, 2> motion_freq{0.0, 0.0};
  std::array<double, 4> motion_phase{0.0, 0.0, 0.0, 0.0};
};

inline constexpr double kBackgroundLevel = 0.3;
inline constexpr double kPulseAmplitude = 0.015;
inline constexpr double kFlickerDepth = 0.02;
inline constexpr std::array<double, 3> kChannelPulseWeight{0.3, 0.8, 0.5};

/// Soft elliptical skin mask in [0, 1], row-major [H, W], shifted by (dy, dx) pixels.
std::vector<double> skin_mask(int height, int width, double dy = 0.0, double dx = 0.0);
double skin_fraction(int height, int width);

ClipParams draw_clip_params(const TaskSpec& spec, double hr, std::mt19937_64& rng);

/// Clean pulse: fundamental plus a 0.2-amplitude second harmonic.
signal::Waveform pulse_waveform(const TaskSpec& spec, const ClipParams& params);

/// Renders a clip. Pixel noise is added only when `noise_rng` is non-null.
Video render_video(const TaskSpec& spec, const ClipParams& params, std::mt19937_64* noise_rng);

ClipSample make_clip(const TaskSpec& spec, double hr, std::mt19937_64& rng);

struct TaskData {
  std::vector<ClipSample> train;
  std::vector<ClipSample> test;
};

/// Train and test splits come from disjoint sub-seeds; every clip has its own
/// generator so clips can be produced independently.
TaskData generate_task(const TaskSpec& spec, int task_id = 0);

/// Fixed-length windows starting at 0, step, 2*step, ...; a trailing remainder
/// shorter than `win` is dropped.
std::vector<ClipSample> window_clips(const Video& video, const signal::Waveform& label, int win, int step);

/// Image-space augmentation used by the trainer.
struct ClipAugmentOptions {
  bool horizontal_flip = false;
  bool resized_crop = false;
  bool temporal_resample = false;
  bool intensity_noise = false;
  double min_crop_fraction = 0.8;
  double min_speed = 0.8;
  double intensity_sigma = 0.01;

  bool any() const { return horizontal_flip || resized_crop || temporal_resample || intensity_noise; }
};

ClipSample augment_clip(const ClipSample& clip, const ClipAugmentOptions& opts, std::mt19937_64& rng);

// --- on-disk datasets -------------------------------------------------------

nlohmann::json spec_to_json(const TaskSpec& s);

/// Writes one .npy per video and per label plus an index.json manifest.
std::filesystem::path write_task_dataset(const TaskData& data, const TaskSpec& spec,
                                         const std::filesystem::path& dir);

struct LoadOptions {
  int win = 160;
  int step = 80;
};

/// Reads an index.json manifest (generated or hand-written) and windows each
/// recording into clips. Entries carry "video", "label", "fs", "task" and an
/// optional "split" (default "train").
TaskData load_task_dataset(const std::filesystem::path& index_path, int task_id, const LoadOptions& opts = {});

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

}  // namespace addp::synth
