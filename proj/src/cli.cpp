#include "addp/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <iomanip>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "addp/io.hpp"
#include "addp/protocol.hpp"

namespace addp::cli {

namespace fs = std::filesystem;
using protocol::ConfigError;

namespace {

// Failures that are the user's doing but not part of the config itself
// (existing output directory, missing run files) exit like config errors.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

fs::path output_root() {
  const char* env = std::getenv(kOutputRootEnv);
  return env && *env ? fs::path(env) : fs::path("runs");
}

fs::path resolve_out(const std::string& out, const std::string& fallback_name) {
  if (out.empty()) return output_root() / fallback_name;
  const fs::path p(out);
  if (p.is_absolute() || !std::getenv(kOutputRootEnv)) return p;
  return output_root() / p;
}

void prepare_out(const fs::path& dir, bool overwrite) {
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!overwrite) throw UsageError("output directory " + dir.string() + " is not empty (use --overwrite)");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
}

protocol::ExperimentConfig load(const std::string& path, std::optional<std::uint64_t> seed) {
  auto cfg = protocol::load_config(path);
  if (seed) {
    // Same derivation as the built-in benchmark, so --seed varies data and training together.
    cfg.seed = *seed;
    for (std::size_t i = 0; i < cfg.tasks.size(); ++i) {
      cfg.tasks[i].spec.seed = synth::derive_seed(*seed, 0x7a5c, i + 1);
    }
  }
  return cfg;
}

std::string task_dir_name(std::size_t i, const std::string& name) {
  std::ostringstream os;
  os << "task" << (i + 1) << "_" << name;
  return os.str();
}

// --- generate ---------------------------------------------------------------

int cmd_generate(const protocol::ExperimentConfig& cfg, const fs::path& out_dir, bool overwrite, std::ostream& out) {
  prepare_out(out_dir, overwrite);
  const auto tasks = cfg.ordered_tasks();
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const auto& t = tasks[i];
    if (t.manifest) {
      out << "skip " << t.spec.name << " (already on disk: " << t.manifest->string() << ")\n";
      continue;
    }
    const auto data = synth::generate_task(t.spec, static_cast<int>(i));
    const auto index = synth::write_task_dataset(data, t.spec, out_dir / task_dir_name(i, t.spec.name));
    out << index.string() << "  (" << data.train.size() << " train, " << data.test.size() << " test)\n";
  }
  return kExitOk;
}

// --- run --------------------------------------------------------------------

void print_plan(const protocol::ExperimentConfig& cfg, const fs::path& out_dir, std::ostream& out) {
  out << "config " << cfg.name << " (hash " << protocol::config_hash(cfg) << ", seed " << cfg.seed << ")\n";
  out << "method " << protocol::method_name(cfg.method) << "\n";
  const auto tasks = cfg.ordered_tasks();
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const auto& t = tasks[i];
    out << "  " << (i + 1) << ". " << t.spec.name << "  ";
    if (t.manifest) {
      out << t.manifest->string();
    } else {
      out << t.spec.n_train_clips << " train / " << t.spec.n_test_clips << " test, " << t.spec.frames << "x"
          << t.spec.height << "x" << t.spec.width;
    }
    const int epochs = cfg.method == protocol::Method::kJoint ? cfg.hyper.epochs_initial
                       : i == 0                               ? cfg.hyper.epochs_initial
                                                              : cfg.hyper.epochs_incremental;
    out << ", " << epochs << " epochs\n";
  }
  for (const auto& row : cfg.ablation) {
    out << "  ablation " << row.name << ": style=" << row.toggles.style_aug << " noise=" << row.toggles.noise_aug
        << " simplify=" << row.toggles.simplify << "\n";
  }
  out << "output " << out_dir.string() << "\n";
}

int cmd_run(const protocol::ExperimentConfig& cfg, const fs::path& out_dir, bool dry_run, bool overwrite,
            std::ostream& out) {
  print_plan(cfg, out_dir, out);
  if (dry_run) return kExitOk;
  prepare_out(out_dir, overwrite);
  const auto progress = [&](const std::string& s) { out << "[" << cfg.name << "] " << s << std::endl; };
  std::vector<protocol::RunRecord> records;
  if (cfg.ablation.empty()) {
    records.push_back(protocol::run_dil(cfg, out_dir, progress));
  } else {
    records = protocol::run_ablation(cfg, cfg.ablation, out_dir, progress);
  }
  out << "\n" << protocol::summary_table(records);
  return kExitOk;
}

// --- plot -------------------------------------------------------------------

struct RunView {
  std::string label;
  signal::ResultMatrix matrix;
  double final_mae = std::nan("");
};

std::optional<RunView> read_run(const fs::path& dir) {
  const fs::path csv = dir / "result_matrix.csv";
  if (!fs::exists(csv)) return std::nullopt;
  RunView v;
  v.matrix = signal::ResultMatrix::from_csv(io::read_text(csv));
  v.label = dir.filename().string();
  const fs::path metrics = dir / "metrics.json";
  if (fs::exists(metrics)) {
    const auto j = nlohmann::json::parse(io::read_text(metrics));
    if (j.contains("name") && j.contains("method")) {
      v.label = j["method"].get<std::string>() + " (" + j["name"].get<std::string>() + ")";
    }
  }
  const std::size_t n = v.matrix.n_tasks();
  bool full = n > 0;
  for (std::size_t j = 0; j < n; ++j) full = full && v.matrix.has(n - 1, j);
  if (full) v.final_mae = signal::incremental_performance(v.matrix, signal::Metric::kMae);
  return v;
}

std::vector<RunView> collect_runs(const std::vector<std::string>& dirs) {
  std::vector<RunView> runs;
  for (const auto& d : dirs) {
    const fs::path dir(d);
    if (!fs::is_directory(dir)) throw UsageError(d + ": not a directory");
    if (auto v = read_run(dir)) {
      runs.push_back(std::move(*v));
      continue;
    }
    std::vector<fs::path> subs;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.is_directory()) subs.push_back(e.path());
    }
    std::sort(subs.begin(), subs.end());
    std::size_t found = 0;
    for (const auto& s : subs) {
      if (auto v = read_run(s)) {
        runs.push_back(std::move(*v));
        ++found;
      }
    }
    if (found == 0) {
      throw UsageError(d + ": no run found; expected result_matrix.csv (optionally with metrics.json) in the "
                           "directory or in its immediate subdirectories");
    }
  }
  return runs;
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

std::string esc(const std::string& s) {
  std::string o;
  for (char c : s) {
    switch (c) {
      case '<': o += "&lt;"; break;
      case '>': o += "&gt;"; break;
      case '&': o += "&amp;"; break;
      case '"': o += "&quot;"; break;
      default: o += c;
    }
  }
  return o;
}

struct Frame {
  double w = 640, h = 400, left = 70, right = 20, top = 40, bottom = 60;
  double x0() const { return left; }
  double x1() const { return w - right; }
  double y0() const { return h - bottom; }
  double y1() const { return top; }
};

double nice_max(double v) {
  if (!(v > 0)) return 1.0;
  const double p = std::pow(10.0, std::floor(std::log10(v)));
  for (double m : {1.0, 2.0, 5.0, 10.0}) {
    if (m * p >= v) return m * p;
  }
  return 10 * p;
}

void axes(std::ostringstream& os, const Frame& f, double ymax, const std::string& title, const std::string& ylabel,
          const std::string& xlabel) {
  os << std::fixed << std::setprecision(1);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << f.w << "\" height=\"" << f.h
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << f.w / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << esc(title) << "</text>\n";
  os << "<line x1=\"" << f.x0() << "\" y1=\"" << f.y0() << "\" x2=\"" << f.x1() << "\" y2=\"" << f.y0()
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << f.x0() << "\" y1=\"" << f.y0() << "\" x2=\"" << f.x0() << "\" y2=\"" << f.y1()
     << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double v = ymax * i / 5.0;
    const double y = f.y0() - (f.y0() - f.y1()) * i / 5.0;
    os << "<line x1=\"" << f.x0() - 4 << "\" y1=\"" << y << "\" x2=\"" << f.x1() << "\" y2=\"" << y
       << "\" stroke=\"#ddd\"/>\n";
    os << "<text x=\"" << f.x0() - 8 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">" << std::setprecision(2) << v
       << std::setprecision(1) << "</text>\n";
  }
  os << "<text x=\"18\" y=\"" << (f.y0() + f.y1()) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
     << (f.y0() + f.y1()) / 2 << ")\">" << esc(ylabel) << "</text>\n";
  os << "<text x=\"" << (f.x0() + f.x1()) / 2 << "\" y=\"" << f.h - 15 << "\" text-anchor=\"middle\">" << esc(xlabel)
     << "</text>\n";
}

// Initial-task MAE after each learned task, one polyline per run.
std::string forgetting_svg(const std::vector<RunView>& runs) {
  const Frame f;
  std::size_t n = 0;
  double ymax = 0;
  for (const auto& r : runs) {
    n = std::max(n, r.matrix.n_tasks());
    for (std::size_t i = 0; i < r.matrix.n_tasks(); ++i) {
      if (r.matrix.has(i, 0)) ymax = std::max(ymax, r.matrix.at(i, 0).mae);
    }
  }
  ymax = nice_max(ymax);
  std::ostringstream os;
  axes(os, f, ymax, "Initial-task MAE during incremental learning", "MAE on task 1 (bpm)", "tasks learned");
  const auto xpos = [&](std::size_t i) {
    return n <= 1 ? (f.x0() + f.x1()) / 2 : f.x0() + 30 + (f.x1() - f.x0() - 60) * double(i) / double(n - 1);
  };
  const auto ypos = [&](double v) { return f.y0() - (f.y0() - f.y1()) * v / ymax; };
  for (std::size_t i = 0; i < n; ++i) {
    os << "<text x=\"" << xpos(i) << "\" y=\"" << f.y0() + 18 << "\" text-anchor=\"middle\">" << i + 1 << "</text>\n";
  }
  for (std::size_t k = 0; k < runs.size(); ++k) {
    const char* color = kPalette[k % std::size(kPalette)];
    std::ostringstream pts;
    pts << std::fixed << std::setprecision(1);
    for (std::size_t i = 0; i < runs[k].matrix.n_tasks(); ++i) {
      if (!runs[k].matrix.has(i, 0)) continue;
      const double x = xpos(i), y = ypos(runs[k].matrix.at(i, 0).mae);
      pts << x << "," << y << " ";
      os << "<circle cx=\"" << x << "\" cy=\"" << y << "\" r=\"3.5\" fill=\"" << color << "\"/>\n";
    }
    os << "<polyline fill=\"none\" stroke-width=\"2\" stroke=\"" << color << "\" points=\"" << pts.str() << "\"/>\n";
  }
  if (runs.size() > 1) {
    double y = f.y1() + 8;
    for (std::size_t k = 0; k < runs.size(); ++k, y += 18) {
      const double x = f.x1() - 210;
      os << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"14\" height=\"4\" fill=\""
         << kPalette[k % std::size(kPalette)] << "\"/>\n";
      os << "<text x=\"" << x + 20 << "\" y=\"" << y + 6 << "\">" << esc(runs[k].label) << "</text>\n";
    }
  }
  os << "</svg>\n";
  return os.str();
}

// Final incremental MAE per run.
std::string final_bar_svg(const std::vector<RunView>& runs) {
  const Frame f{640, 400, 70, 20, 40, 110};
  double ymax = 0;
  for (const auto& r : runs) {
    if (!std::isnan(r.final_mae)) ymax = std::max(ymax, r.final_mae);
  }
  ymax = nice_max(ymax);
  std::ostringstream os;
  axes(os, f, ymax, "Final incremental performance", "MAE after the last task (bpm)", "");
  const double slot = (f.x1() - f.x0()) / double(runs.size());
  for (std::size_t k = 0; k < runs.size(); ++k) {
    const double cx = f.x0() + slot * (k + 0.5);
    if (!std::isnan(runs[k].final_mae)) {
      const double hgt = (f.y0() - f.y1()) * runs[k].final_mae / ymax;
      os << "<rect x=\"" << cx - slot * 0.3 << "\" y=\"" << f.y0() - hgt << "\" width=\"" << slot * 0.6
         << "\" height=\"" << hgt << "\" fill=\"" << kPalette[k % std::size(kPalette)] << "\"/>\n";
      os << "<text x=\"" << cx << "\" y=\"" << f.y0() - hgt - 4 << "\" text-anchor=\"middle\">"
         << std::setprecision(2) << runs[k].final_mae << std::setprecision(1) << "</text>\n";
    }
    os << "<text x=\"" << cx << "\" y=\"" << f.y0() + 14 << "\" text-anchor=\"end\" transform=\"rotate(-30 " << cx
       << " " << f.y0() + 14 << ")\">" << esc(runs[k].label) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

int cmd_plot(const std::vector<std::string>& dirs, const std::string& out_opt, std::ostream& out) {
  const auto runs = collect_runs(dirs);
  const fs::path out_dir = out_opt.empty() ? fs::path(dirs.front()) : fs::path(out_opt);
  fs::create_directories(out_dir);
  io::write_text(out_dir / kForgettingPlot, forgetting_svg(runs));
  out << (out_dir / kForgettingPlot).string() << "\n";
  if (runs.size() > 1) {
    io::write_text(out_dir / kFinalBarPlot, final_bar_svg(runs));
    out << (out_dir / kFinalBarPlot).string() << "\n";
  }
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Domain-incremental rPPG experiments on synthetic video"};
  app.name("addp");
  app.require_subcommand(1);

  std::string config, out_dir;
  std::optional<std::uint64_t> seed;
  bool dry_run = false, overwrite = false;
  std::vector<std::string> run_dirs;

  auto* gen = app.add_subcommand("generate", "Write every synthetic task of a config to disk");
  gen->add_option("--config", config, "Experiment config (JSON)")->required();
  gen->add_option("--out", out_dir, "Output directory");
  gen->add_option("--seed", seed, "Override the experiment and task seeds");
  gen->add_flag("--overwrite", overwrite, "Replace a non-empty output directory");

  auto* runc = app.add_subcommand("run", "Train and evaluate a task sequence or ablation grid");
  runc->add_option("--config", config, "Experiment config (JSON)")->required();
  runc->add_option("--out", out_dir, "Output directory");
  runc->add_option("--seed", seed, "Override the experiment and task seeds");
  runc->add_flag("--dry-run", dry_run, "Validate and print the plan without training");
  runc->add_flag("--overwrite", overwrite, "Replace a non-empty output directory");

  auto* plot = app.add_subcommand("plot", "Forgetting curve and final-performance bars from run directories");
  plot->add_option("runs", run_dirs, "Run directories")->required();
  plot->add_option("--out", out_dir, "Where to write the SVG files (default: the first run directory)");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    if (gen->parsed()) {
      const auto cfg = load(config, seed);
      return cmd_generate(cfg, resolve_out(out_dir, cfg.name + "_data"), overwrite, out);
    }
    if (runc->parsed()) {
      const auto cfg = load(config, seed);
      return cmd_run(cfg, resolve_out(out_dir, cfg.name), dry_run, overwrite, out);
    }
    return cmd_plot(run_dirs, out_dir, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "runtime error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace addp::cli
