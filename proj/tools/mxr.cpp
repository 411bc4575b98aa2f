// mxr: train / infer / eval / bench / selftest front end.
#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#include "mxr/config.hpp"
#include "mxr/io.hpp"
#include "mxr/metrics.hpp"
#include "mxr/selftest.hpp"
#include "mxr/training.hpp"

namespace fs = std::filesystem;
using namespace mxr;

namespace {

struct ModelFlags {
  int depth = 18;
  std::string width = "1";
  std::uint64_t seed = 0;
  std::string checkpoint;
  bool attention = true;
  bool blur = true;
};

void add_model_flags(CLI::App* cmd, ModelFlags& f, bool with_checkpoint) {
  cmd->add_option("--depth", f.depth, "Encoder depth")->check(CLI::IsMember({18, 34, 50}));
  cmd->add_option("--width-mult", f.width, "Width multiplier, e.g. 1, 0.125 or 1/8");
  cmd->add_option("--seed", f.seed, "Seed for a freshly initialized model");
  if (with_checkpoint) cmd->add_option("--checkpoint", f.checkpoint, "Model checkpoint (.mxrw)")->check(CLI::ExistingFile);
}

ModelConfig model_config(const ModelFlags& f) {
  ModelConfig c;
  c.encoder_depth = f.depth;
  c.width = WidthMultiplier::parse(f.width);
  c.self_attention = f.attention;
  c.blur = f.blur;
  c.validate();
  return c;
}

io::LoadedModel open_model(const ModelFlags& f) {
  if (!f.checkpoint.empty()) return io::load_checkpoint(f.checkpoint);
  const ModelConfig cfg = model_config(f);
  io::LoadedModel m;
  m.model = build_unet<float>(cfg, f.seed);
  m.model->eval();
  m.stats = NormalizationStats::identity(cfg.in_channels, cfg.out_channels);
  return m;
}

std::vector<fs::path> collect_inputs(const std::vector<std::string>& args) {
  std::vector<fs::path> out;
  for (const auto& a : args) {
    if (fs::is_directory(a)) {
      std::vector<fs::path> found;
      for (const auto& e : fs::directory_iterator(a))
        if (e.is_regular_file() && e.path().extension() == ".ppm") found.push_back(e.path());
      std::sort(found.begin(), found.end());
      out.insert(out.end(), found.begin(), found.end());
    } else {
      out.emplace_back(a);
    }
  }
  if (out.empty()) throw ConfigError("no input images given");
  return out;
}

// --- subcommands ---------------------------------------------------------------------------

int run_train(const std::string& config_path, const std::optional<std::uint64_t>& seed, const std::optional<int>& threads,
              const std::optional<std::string>& out, const std::optional<int>& depth, const std::optional<std::string>& width,
              const std::optional<std::string>& track) {
  RunConfig cfg = load_run_config(config_path);
  if (seed) cfg.seed = *seed;
  if (threads) cfg.threads = *threads;
  if (out) cfg.out_dir = *out;
  if (depth) cfg.model.encoder_depth = *depth;
  if (width) cfg.model.width = WidthMultiplier::parse(*width);
  if (track) cfg.track = parse_track(*track);
  cfg.validate();
  set_num_threads(cfg.threads);

  std::vector<std::string> warnings;
  const auto train = io::load_dataset(cfg.train_root, &warnings);
  const auto val = cfg.val_root ? io::load_dataset(*cfg.val_root, &warnings) : std::vector<Sample>{};
  for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';

  fs::create_directories(cfg.out_dir);
  {
    std::ofstream(cfg.out_dir / "config.json") << to_json(cfg) << '\n';
  }
  const auto stats = NormalizationStats::compute(train);
  auto model = build_unet<float>(cfg.model, cfg.seed);
  std::shared_ptr<LossNetwork<float>> loss_net;
  if (cfg.loss.needs_features())
    loss_net = cfg.loss_net_weights ? io::load_loss_network(*cfg.loss_net_weights, cfg.model.out_channels)
                                    : build_loss_network<float>({cfg.model.out_channels, cfg.loss_net_width}, cfg.loss_net_seed);

  FitOptions opts;
  opts.epochs = cfg.epochs;
  opts.batch_size = cfg.batch_size;
  opts.loss = cfg.loss;
  if (cfg.augment) {
    opts.augment = AugmentConfig{};
    opts.augment->crop = cfg.crop;
  } else if (cfg.crop > 0) {
    opts.augment = AugmentConfig::none();
    opts.augment->crop = cfg.crop;
  } else {
    opts.augment.reset();
  }
  const auto n = static_cast<std::int64_t>(train.size());
  if (cfg.epochs > 0) opts.schedule = cfg.schedule((n + cfg.batch_size - 1) / cfg.batch_size);
  opts.seed = cfg.seed;

  std::ofstream log(cfg.out_dir / "train.log");
  log << "run seed=" << cfg.seed << " track=" << track_name(cfg.track) << " depth=" << cfg.model.encoder_depth
      << " width=" << cfg.model.width.str() << " train=" << train.size() << " val=" << val.size() << std::endl;
  opts.log = &log;
  AdamW<float> optimizer(model->parameters(), opts.adamw);
  opts.on_epoch = [&](const EpochRecord& r) {
    std::cout << format_record(r) << std::endl;
    io::save_checkpoint(*model, cfg.out_dir / "last.mxrw", &stats, &optimizer);
  };
  fit(*model, train, val, loss_net.get(), stats, opts, &optimizer);
  io::save_checkpoint(*model, cfg.out_dir / "model.mxrw", &stats);
  std::cout << "wrote " << (cfg.out_dir / "model.mxrw").string() << std::endl;
  return 0;
}

int run_infer(const ModelFlags& mf, const std::vector<std::string>& inputs, const fs::path& out, int threads) {
  set_num_threads(threads);
  const auto files = collect_inputs(inputs);
  auto m = open_model(mf);
  fs::create_directories(out);
  for (const auto& f : files) {
    const RgbImage rgb = io::read_rgb(f);
    const HyperCube cube = reconstruct(*m.model, rgb, m.stats);
    const fs::path dst = out / (f.stem().string() + ".hsc");
    io::write_cube(cube, dst);
    std::cout << f.string() << " -> " << dst.string() << " (" << cube.channels << "x" << cube.height << "x"
              << cube.width << ")" << std::endl;
  }
  return 0;
}

int run_eval(const ModelFlags& mf, const fs::path& data, int threads, bool clamp) {
  set_num_threads(threads);
  std::vector<std::string> warnings;
  const auto samples = io::load_dataset(data, &warnings);
  for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
  auto m = open_model(mf);
  std::cout << format_report(evaluate_dataset(*m.model, samples, m.stats, clamp));
  return 0;
}

int run_bench(const ModelFlags& mf, std::int64_t size, int threads, int warmup, int runs) {
  auto m = open_model(mf);
  const auto& c = m.model->config();
  const std::string id = "mxresnet" + std::to_string(c.encoder_depth) + "-unet@" + c.width.str();
  std::cout << "params=" << count_params(*m.model) << '\n';
  std::cout << format_report(benchmark_latency(*m.model, size, warmup, runs, threads, id));
  return 0;
}

int run_selftest(const std::vector<int>& suites, int threads, bool verbose) {
  selftest::Options opts;
  opts.threads = threads;
  if (verbose) opts.log = &std::cout;
  int failed = 0;
  for (int id : suites) {
    if (verbose) std::cout << "suite " << id << ": " << selftest::suite_title(id) << std::endl;
    const auto r = selftest::run_suite(id, opts);
    std::cout << selftest::summary(r) << std::endl;
    failed += r.passed() ? 0 : 1;
  }
  std::cout << (failed ? "selftest FAILED (" + std::to_string(failed) + " suites)" : "selftest passed") << std::endl;
  return failed ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MXR-U-Net: RGB to 31-band hyperspectral reconstruction"};
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand("train", "Train a model from a JSON run config");
  std::string config_path;
  std::optional<std::uint64_t> t_seed;
  std::optional<int> t_threads, t_depth;
  std::optional<std::string> t_out, t_width, t_track;
  train->add_option("--config", config_path, "Run config (JSON)")->required()->check(CLI::ExistingFile);
  train->add_option("--seed", t_seed, "Override the config seed");
  train->add_option("--threads", t_threads, "Override the thread count");
  train->add_option("--out", t_out, "Override the output directory");
  train->add_option("--depth", t_depth, "Override the encoder depth")->check(CLI::IsMember({18, 34, 50}));
  train->add_option("--width-mult", t_width, "Override the width multiplier");
  train->add_option("--track", t_track, "clean or real")->check(CLI::IsMember({"clean", "real"}));

  // infer
  auto* infer = app.add_subcommand("infer", "Reconstruct cubes from PPM images");
  ModelFlags i_model;
  std::vector<std::string> i_inputs;
  std::string i_out = "out";
  int i_threads = 1;
  add_model_flags(infer, i_model, true);
  infer->add_option("inputs", i_inputs, "PPM files or directories")->required();
  infer->add_option("--out", i_out, "Output directory for .hsc cubes");
  infer->add_option("--threads", i_threads, "Worker threads")->check(CLI::PositiveNumber);

  // eval
  auto* eval = app.add_subcommand("eval", "MRAE / RMSE over a dataset root (rgb/*.ppm, cubes/*.hsc)");
  ModelFlags e_model;
  std::string e_data;
  std::string e_track = "clean";
  int e_threads = 1;
  bool e_clamp = false;
  add_model_flags(eval, e_model, true);
  eval->add_option("--data", e_data, "Dataset root")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--track", e_track, "clean or real")->check(CLI::IsMember({"clean", "real"}));
  eval->add_option("--threads", e_threads, "Worker threads")->check(CLI::PositiveNumber);
  eval->add_flag("--clamp", e_clamp, "Clip outputs to [0, 1] before scoring");

  // bench
  auto* bench = app.add_subcommand("bench", "Forward-pass latency");
  ModelFlags b_model;
  std::int64_t b_size = 256;
  int b_threads = 1, b_warmup = 3, b_runs = 10;
  add_model_flags(bench, b_model, true);
  bench->add_option("--size", b_size, "Square input side (multiple of 32)")->check(CLI::PositiveNumber);
  bench->add_option("--threads", b_threads, "Thread count")->check(CLI::PositiveNumber);
  bench->add_option("--warmup", b_warmup, "Untimed runs (>= 3)")->check(CLI::Range(3, 1000));
  bench->add_option("--runs", b_runs, "Timed runs (>= 10)")->check(CLI::Range(10, 100000));

  // selftest
  auto* self = app.add_subcommand("selftest", "Run the invariant suites");
  std::vector<int> s_suites{1, 2, 3, 4, 5, 6, 7, 8, 9};
  int s_threads = 1;
  bool s_verbose = false;
  self->add_option("--suites", s_suites, "Suite ids to run")->delimiter(',')->check(CLI::Range(1, selftest::kSuiteCount));
  self->add_option("--threads", s_threads, "Thread count for the latency suite")->check(CLI::PositiveNumber);
  self->add_flag("-v,--verbose", s_verbose, "Print every check");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*train) return run_train(config_path, t_seed, t_threads, t_out, t_depth, t_width, t_track);
    if (*infer) return run_infer(i_model, i_inputs, i_out, i_threads);
    if (*eval) {
      (void)parse_track(e_track);
      return run_eval(e_model, e_data, e_threads, e_clamp);
    }
    if (*bench) return run_bench(b_model, b_size, b_threads, b_warmup, b_runs);
    if (*self) return run_selftest(s_suites, s_threads, s_verbose);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 2;
}
