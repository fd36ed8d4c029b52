#include "addp/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "addp/io.hpp"
#include "json.hpp"

namespace addp::synth {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

bool finite3(const std::array<double, 3>& v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  return splitmix64(splitmix64(splitmix64(seed) ^ a) ^ (b * 0x632be59bd9b4e019ULL));
}

void DomainFactors::validate() const {
  if (!finite3(base_color)) throw std::invalid_argument("domain.base_color: non-finite value");
  for (double c : base_color) {
    if (c < 0.0 || c > 1.0) throw std::invalid_argument("domain.base_color: components must lie in [0, 1]");
  }
  if (!std::isfinite(illumination_gain) || !(illumination_gain > 0.0)) {
    throw std::invalid_argument("domain.illumination_gain: must be finite and > 0");
  }
  if (!std::isfinite(illumination_flicker_hz) || illumination_flicker_hz < 0.0) {
    throw std::invalid_argument("domain.illumination_flicker_hz: must be finite and >= 0");
  }
  if (!std::isfinite(motion_amplitude) || motion_amplitude < 0.0) {
    throw std::invalid_argument("domain.motion_amplitude: must be finite and >= 0");
  }
  if (!std::isfinite(noise_sigma) || noise_sigma < 0.0) {
    throw std::invalid_argument("domain.noise_sigma: must be finite and >= 0");
  }
  if (!std::isfinite(fs) || !(fs > 0.0)) throw std::invalid_argument("domain.fs: must be finite and > 0");
}

void TaskSpec::validate() const {
  domain.validate();
  if (n_train_clips < 1) throw std::invalid_argument("n_train_clips: must be >= 1");
  if (n_test_clips < 1) throw std::invalid_argument("n_test_clips: must be >= 1");
  if (!std::isfinite(hr_lo) || !std::isfinite(hr_hi) || hr_lo < 40.0 || hr_hi > 180.0 || hr_lo > hr_hi) {
    throw std::invalid_argument("hr_range: need 40 <= lo <= hi <= 180");
  }
  if (frames < 2) throw std::invalid_argument("frames: must be >= 2");
  if (height < 2 || width < 2) throw std::invalid_argument("height/width: must be >= 2");
}

std::vector<double> skin_mask(int height, int width, double dy, double dx) {
  std::vector<double> m(std::size_t(height) * width);
  const double cy = 0.5 * (height - 1) + dy;
  const double cx = 0.5 * (width - 1) + dx;
  const double ry = 0.38 * height;
  const double rx = 0.30 * width;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double u = (y - cy) / ry;
      const double v = (x - cx) / rx;
      const double r = std::sqrt(u * u + v * v);
      m[std::size_t(y) * width + x] = 1.0 / (1.0 + std::exp(-(1.0 - r) / 0.08));
    }
  }
  return m;
}

double skin_fraction(int height, int width) {
  const auto m = skin_mask(height, width);
  double s = 0.0;
  for (double v : m) s += v;
  return s / static_cast<double>(m.size());
}

ClipParams draw_clip_params(const TaskSpec& spec, double hr, std::mt19937_64& rng) {
  (void)spec;
  std::uniform_real_distribution<double> phase(0.0, kTwoPi);
  ClipParams p;
  p.hr = hr;
  p.pulse_phase = phase(rng);
  p.flicker_phase = phase(rng);
  p.motion_freq[0] = std::uniform_real_distribution<double>(0.1, 0.5)(rng);
  p.motion_freq[1] = std::uniform_real_distribution<double>(0.5, 1.5)(rng);
  for (double& ph : p.motion_phase) ph = phase(rng);
  return p;
}

signal::Waveform pulse_waveform(const TaskSpec& spec, const ClipParams& params) {
  const double f = params.hr / 60.0;
  std::vector<double> s(spec.frames);
  for (int t = 0; t < spec.frames; ++t) {
    const double arg = kTwoPi * f * t / spec.domain.fs + params.pulse_phase;
    s[t] = std::sin(arg) + 0.2 * std::sin(2.0 * arg);
  }
  return {std::move(s), spec.domain.fs};
}

Video render_video(const TaskSpec& spec, const ClipParams& params, std::mt19937_64* noise_rng) {
  const DomainFactors& d = spec.domain;
  const int T = spec.frames, H = spec.height, W = spec.width;
  const signal::Waveform pulse = pulse_waveform(spec, params);
  Video v(T, H, W);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const bool noisy = noise_rng != nullptr && d.noise_sigma > 0.0;

  for (int t = 0; t < T; ++t) {
    const double time = t / d.fs;
    double light = d.illumination_gain;
    if (d.illumination_flicker_hz > 0.0) {
      light *= 1.0 + kFlickerDepth * std::sin(kTwoPi * d.illumination_flicker_hz * time + params.flicker_phase);
    }
    double dy = 0.0, dx = 0.0;
    if (d.motion_amplitude > 0.0) {
      const double a0 = kTwoPi * params.motion_freq[0] * time;
      const double a1 = kTwoPi * params.motion_freq[1] * time;
      dx = d.motion_amplitude * (0.7 * std::sin(a0 + params.motion_phase[0]) + 0.3 * std::sin(a1 + params.motion_phase[1]));
      dy = d.motion_amplitude * (0.7 * std::sin(a0 + params.motion_phase[2]) + 0.3 * std::sin(a1 + params.motion_phase[3]));
    }
    const auto mask = skin_mask(H, W, dy, dx);
    for (int c = 0; c < 3; ++c) {
      const double skin = d.base_color[c] * (1.0 + kPulseAmplitude * kChannelPulseWeight[c] * pulse.samples[t]);
      for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
          const double m = mask[std::size_t(y) * W + x];
          double val = light * (m * skin + (1.0 - m) * kBackgroundLevel);
          if (noisy) val += d.noise_sigma * gauss(*noise_rng);
          v.at(c, t, y, x) = static_cast<float>(std::clamp(val, 0.0, 1.0));
        }
      }
    }
  }
  return v;
}

ClipSample make_clip(const TaskSpec& spec, double hr, std::mt19937_64& rng) {
  spec.validate();
  if (!std::isfinite(hr) || hr < spec.hr_lo || hr > spec.hr_hi) {
    throw std::invalid_argument("make_clip: hr outside the task's hr_range");
  }
  const ClipParams params = draw_clip_params(spec, hr, rng);
  ClipSample clip;
  clip.video = render_video(spec, params, &rng);
  clip.label = pulse_waveform(spec, params);
  clip.hr = hr;
  return clip;
}

TaskData generate_task(const TaskSpec& spec, int task_id) {
  spec.validate();
  TaskData out;
  const auto make_split = [&](int split, int count, std::int64_t first_id, std::vector<ClipSample>& dst) {
    dst.reserve(count);
    for (int i = 0; i < count; ++i) {
      std::mt19937_64 rng(derive_seed(spec.seed, static_cast<std::uint64_t>(split) + 1, static_cast<std::uint64_t>(i)));
      const double hr = spec.hr_lo == spec.hr_hi
                            ? spec.hr_lo
                            : std::uniform_real_distribution<double>(spec.hr_lo, spec.hr_hi)(rng);
      ClipSample clip = make_clip(spec, hr, rng);
      clip.task_id = task_id;
      clip.sample_id = first_id + i;
      clip.recording_id = clip.sample_id;
      dst.push_back(std::move(clip));
    }
  };
  make_split(0, spec.n_train_clips, 0, out.train);
  make_split(1, spec.n_test_clips, spec.n_train_clips, out.test);
  return out;
}

std::vector<ClipSample> window_clips(const Video& video, const signal::Waveform& label, int win, int step) {
  if (win < 1 || step < 1) throw std::invalid_argument("window_clips: win and step must be >= 1");
  if (static_cast<int>(label.size()) != video.frames) {
    throw std::invalid_argument("window_clips: label length must equal the video length");
  }
  std::vector<ClipSample> out;
  for (int start = 0, idx = 0; start + win <= video.frames; start += step, ++idx) {
    ClipSample clip;
    clip.video = Video(win, video.height, video.width);
    for (int c = 0; c < 3; ++c) {
      const float* src = video.data.data() + video.index(c, start, 0, 0);
      std::copy(src, src + std::size_t(win) * video.plane(), clip.video.data.data() + clip.video.index(c, 0, 0, 0));
    }
    clip.label.fs = label.fs;
    clip.label.samples.assign(label.samples.begin() + start, label.samples.begin() + start + win);
    if (win >= 2) {
      try {
        clip.hr = signal::estimate_hr(clip.label);
      } catch (const std::invalid_argument&) {
        clip.hr = 0.0;
      }
    }
    clip.sample_id = idx;
    out.push_back(std::move(clip));
  }
  return out;
}

namespace {

double bilinear(const Video& v, int c, int t, double y, double x) {
  y = std::clamp(y, 0.0, v.height - 1.0);
  x = std::clamp(x, 0.0, v.width - 1.0);
  const int y0 = static_cast<int>(std::floor(y));
  const int x0 = static_cast<int>(std::floor(x));
  const int y1 = std::min(y0 + 1, v.height - 1);
  const int x1 = std::min(x0 + 1, v.width - 1);
  const double fy = y - y0, fx = x - x0;
  return (1 - fy) * ((1 - fx) * v.at(c, t, y0, x0) + fx * v.at(c, t, y0, x1)) +
         fy * ((1 - fx) * v.at(c, t, y1, x0) + fx * v.at(c, t, y1, x1));
}

}  // namespace

ClipSample augment_clip(const ClipSample& clip, const ClipAugmentOptions& opts, std::mt19937_64& rng) {
  ClipSample out = clip;
  Video& v = out.video;
  const int T = v.frames, H = v.height, W = v.width;
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  if (opts.horizontal_flip && unit(rng) < 0.5) {
    for (int c = 0; c < 3; ++c)
      for (int t = 0; t < T; ++t)
        for (int y = 0; y < H; ++y) std::reverse(&v.at(c, t, y, 0), &v.at(c, t, y, 0) + W);
  }

  if (opts.resized_crop) {
    const double frac = opts.min_crop_fraction + (1.0 - opts.min_crop_fraction) * unit(rng);
    const double ch = frac * (H - 1), cw = frac * (W - 1);
    const double oy = unit(rng) * (H - 1 - ch), ox = unit(rng) * (W - 1 - cw);
    const Video src = v;
    for (int c = 0; c < 3; ++c)
      for (int t = 0; t < T; ++t)
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < W; ++x)
            v.at(c, t, y, x) = static_cast<float>(bilinear(src, c, t, oy + ch * y / (H - 1.0), ox + cw * x / (W - 1.0)));
  }

  if (opts.temporal_resample && T >= 2) {
    const double speed = opts.min_speed + (1.0 - opts.min_speed) * unit(rng);
    const double offset = unit(rng) * (T - 1) * (1.0 - speed);
    std::vector<double> src_t(T), dst_t(T);
    for (int t = 0; t < T; ++t) {
      src_t[t] = t;
      dst_t[t] = std::min(offset + speed * t, T - 1.0);
    }
    const Video src = v;
    for (int t = 0; t < T; ++t) {
      const int t0 = static_cast<int>(std::floor(dst_t[t]));
      const int t1 = std::min(t0 + 1, T - 1);
      const double f = dst_t[t] - t0;
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < W; ++x)
            v.at(c, t, y, x) = static_cast<float>((1 - f) * src.at(c, t0, y, x) + f * src.at(c, t1, y, x));
    }
    out.label.samples = signal::align_labels(clip.label.samples, src_t, dst_t);
    out.hr = clip.hr * speed;
  }

  if (opts.intensity_noise) {
    std::normal_distribution<double> gauss(0.0, opts.intensity_sigma);
    for (float& px : v.data) px = static_cast<float>(std::clamp(px + gauss(rng), 0.0, 1.0));
  }
  return out;
}

namespace {

io::NdArray video_array(const Video& v) {
  io::NdArray a;
  a.dtype = io::Dtype::kF32;
  a.shape = {3, std::size_t(v.frames), std::size_t(v.height), std::size_t(v.width)};
  a.data.assign(v.data.begin(), v.data.end());
  return a;
}

}  // namespace

nlohmann::json spec_to_json(const TaskSpec& s) {
  return {{"name", s.name},
          {"n_train_clips", s.n_train_clips},
          {"n_test_clips", s.n_test_clips},
          {"hr_range", {s.hr_lo, s.hr_hi}},
          {"seed", s.seed},
          {"frames", s.frames},
          {"height", s.height},
          {"width", s.width},
          {"domain",
           {{"base_color", s.domain.base_color},
            {"illumination_gain", s.domain.illumination_gain},
            {"illumination_flicker_hz", s.domain.illumination_flicker_hz},
            {"motion_amplitude", s.domain.motion_amplitude},
            {"noise_sigma", s.domain.noise_sigma},
            {"fs", s.domain.fs}}}};
}

std::filesystem::path write_task_dataset(const TaskData& data, const TaskSpec& spec, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json clips = nlohmann::json::array();
  const auto dump = [&](const std::vector<ClipSample>& split, const std::string& name) {
    for (const auto& clip : split) {
      char stem[32];
      std::snprintf(stem, sizeof(stem), "%06lld", static_cast<long long>(clip.sample_id));
      const std::string vrel = name + "/" + stem + "_video.npy";
      const std::string lrel = name + "/" + stem + "_label.npy";
      io::write_npy(dir / vrel, video_array(clip.video));
      io::write_npy(dir / lrel, io::NdArray{{clip.label.size()}, clip.label.samples, io::Dtype::kF64});
      clips.push_back({{"video", vrel},
                       {"label", lrel},
                       {"fs", clip.label.fs},
                       {"task", spec.name},
                       {"split", name},
                       {"sample_id", clip.sample_id},
                       {"hr", clip.hr}});
    }
  };
  dump(data.train, "train");
  dump(data.test, "test");
  const nlohmann::json index = {{"task", spec.name}, {"spec", spec_to_json(spec)}, {"clips", clips}};
  const fs::path index_path = dir / "index.json";
  io::write_text(index_path, index.dump(2) + "\n");
  return index_path;
}

TaskData load_task_dataset(const std::filesystem::path& index_path, int task_id, const LoadOptions& opts) {
  const auto index = nlohmann::json::parse(io::read_text(index_path));
  const auto root = index_path.parent_path();
  TaskData out;
  std::int64_t recording = 0;
  std::int64_t next_id = 0;
  for (const auto& entry : index.at("clips")) {
    const auto varr = io::read_npy(root / entry.at("video").get<std::string>());
    const auto larr = io::read_npy(root / entry.at("label").get<std::string>());
    if (varr.shape.size() != 4 || varr.shape[0] != 3) {
      throw std::runtime_error("manifest: video arrays must have shape [3, T, H, W]");
    }
    Video v(static_cast<int>(varr.shape[1]), static_cast<int>(varr.shape[2]), static_cast<int>(varr.shape[3]));
    std::copy(varr.data.begin(), varr.data.end(), v.data.begin());
    signal::Waveform label(larr.data, entry.at("fs").get<double>());
    const int win = opts.win > 0 ? std::min(opts.win, v.frames) : v.frames;
    const int step = opts.step > 0 ? opts.step : win;
    auto clips = window_clips(v, label, win, step);
    const std::string split = entry.value("split", std::string("train"));
    auto& dst = split == "test" ? out.test : out.train;
    for (auto& c : clips) {
      c.task_id = task_id;
      c.recording_id = recording;
      c.sample_id = next_id++;
      // A window covering the whole recording keeps the recorded label HR.
      if (win == v.frames && entry.contains("hr")) c.hr = entry.at("hr").get<double>();
      dst.push_back(std::move(c));
    }
    ++recording;
  }
  return out;
}

}  // namespace addp::synth
