// bitgen: train, evaluate, sample, benchmark and ablate binarised generative
// models. Exit codes: 0 ok, 2 usage, 3 I/O or digest, 4 numeric failure.

#include <bitgen/binary_kernels.hpp>
#include <bitgen/ops.hpp>
#include <bitgen/quantization.hpp>
#include <bitgen/training.hpp>

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

using namespace bitgen;
namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kUsage = 2, kIo = 3, kNumeric = 4 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---- shared helpers -------------------------------------------------------------------

std::string joined_command(int argc, char** argv) {
  std::string out;
  for (int i = 0; i < argc; ++i) {
    std::string a = argv[i];
    if (a.find_first_of(" \t\"'") != std::string::npos) a = "'" + a + "'";
    out += (i ? " " : "") + a;
  }
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw FormatError("cannot write '" + path.string() + "'");
  f << text;
}

DatasetPair load_data_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw FormatError("data directory '" + dir.string() + "' does not exist");
  return {load_dataset(dir / "train.bgd"), load_dataset(dir / "test.bgd")};
}

// A single dataset file, or the test split of a data directory.
Dataset load_eval_data(const fs::path& path) {
  if (fs::is_directory(path)) return load_dataset(path / "test.bgd");
  return load_dataset(path);
}

// Training options shared by train and ablate; key=value settings from a
// config file are applied first, explicit flags afterwards.
struct TrainFlags {
  std::string config_file;
  std::string model = "rvae", weights = "float", activations = "float", norm = "bwn";
  bool no_residual = false, binarize_all = false;
  int64_t epochs = 10, batch_size = 32, init_batch = 128, res_channels = 0, checkpoint_every = 0;
  double lr = 1e-3;
  uint64_t seed = 0;
  std::vector<std::string> set;
  bool precision_flags = false;

  void add(CLI::App& app, bool with_precision) {
    precision_flags = with_precision;
    app.add_option("--config", config_file, "key=value file (model and training keys)");
    app.add_option("--model", model, "rvae | flowpp")->check(CLI::IsMember({"rvae", "flowpp"}));
    if (precision_flags) {
      app.add_option("--weights", weights, "float | binary")->check(CLI::IsMember({"float", "binary"}));
      app.add_option("--activations", activations, "float | binary")->check(CLI::IsMember({"float", "binary"}));
      app.add_option("--norm", norm, "bwn | batchnorm")->check(CLI::IsMember({"bwn", "batchnorm"}));
      app.add_flag("--no-residual", no_residual, "drop every residual block");
      app.add_flag("--binarize-all", binarize_all, "binarise every convolution");
    }
    app.add_option("--epochs", epochs)->check(CLI::NonNegativeNumber);
    app.add_option("--batch-size", batch_size)->check(CLI::PositiveNumber);
    app.add_option("--init-batch", init_batch)->check(CLI::PositiveNumber);
    app.add_option("--lr", lr)->check(CLI::PositiveNumber);
    app.add_option("--res-channels", res_channels)->check(CLI::PositiveNumber);
    app.add_option("--checkpoint-every", checkpoint_every)->check(CLI::NonNegativeNumber);
    app.add_option("--seed", seed);
    app.add_option("--set", set, "extra key=value settings, applied last");
  }

  static void apply(TrainConfig& t, const std::string& key, const std::string& value) {
    try {
      if (key == "epochs") t.epochs = std::stoll(value);
      else if (key == "batch_size") t.batch_size = std::stoll(value);
      else if (key == "init_batch") t.init_batch = std::stoll(value);
      else if (key == "lr") t.adam.lr = std::stod(value);
      else if (key == "seed") t.seed = std::stoull(value);
      else if (key == "checkpoint_every") t.checkpoint_every = std::stoll(value);
      else if (!t.model.set(key, value)) throw UsageError("unknown config key '" + key + "'");
    } catch (const std::logic_error& e) {
      throw UsageError("bad value '" + value + "' for '" + key + "': " + e.what());
    }
  }

  static void apply_line(TrainConfig& t, const std::string& raw, const std::string& where) {
    std::string line = raw.substr(0, raw.find('#'));
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) return;
    line = line.substr(b, line.find_last_not_of(" \t\r") - b + 1);
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError(where + ": expected key=value, got '" + line + "'");
    apply(t, line.substr(0, eq), line.substr(eq + 1));
  }

  TrainConfig resolve(const CLI::App& app, const Dataset& shape) const {
    TrainConfig t;
    if (!config_file.empty()) {
      std::ifstream f(config_file);
      if (!f) throw FormatError("cannot read config file '" + config_file + "'");
      std::string line;
      int n = 0;
      while (std::getline(f, line)) apply_line(t, line, config_file + ":" + std::to_string(++n));
    }
    auto given = [&](const char* name) { return app.count(name) > 0; };
    if (given("--model") || config_file.empty()) t.model.kind = parse_model_kind(model);
    if (precision_flags) {
      if (given("--weights")) t.model.weights = parse_precision(weights);
      if (given("--activations")) t.model.activations = parse_precision(activations);
      if (given("--norm")) t.model.norm = parse_norm_mode(norm);
      if (given("--no-residual")) t.model.residual = false;
      if (given("--binarize-all")) t.model.binarize_all = true;
    }
    if (given("--epochs")) t.epochs = epochs;
    if (given("--batch-size")) t.batch_size = batch_size;
    if (given("--init-batch")) t.init_batch = init_batch;
    if (given("--lr")) t.adam.lr = lr;
    if (given("--res-channels")) t.model.res_channels = res_channels;
    if (given("--checkpoint-every")) t.checkpoint_every = checkpoint_every;
    if (given("--seed")) t.seed = t.model.seed = seed;
    for (const std::string& s : set) apply_line(t, s, "--set");
    t.model.channels = shape.channels;
    t.model.height = shape.height;
    t.model.width = shape.width;
    if (t.model.weights == Precision::Float && t.model.activations == Precision::Binary) {
      throw UsageError("binary activations require binary weights");
    }
    try {
      t.model.validate();
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    return t;
  }
};

std::string resolved_text(const TrainConfig& t) {
  std::ostringstream o;
  o << t.model.to_text() << "epochs=" << t.epochs << '\n'
    << "batch_size=" << t.batch_size << '\n'
    << "init_batch=" << t.init_batch << '\n'
    << "lr=" << t.adam.lr << '\n'
    << "seed=" << t.seed << '\n'
    << "checkpoint_every=" << t.checkpoint_every << '\n';
  return o.str();
}

// ---- images -----------------------------------------------------------------------------

// Binary PGM (one channel) or PPM (three channels) of image `i` in x.
std::string netpbm(const Tensor& x, int64_t i) {
  const int64_t c = x.dim(1), h = x.dim(2), w = x.dim(3);
  std::ostringstream o;
  o << (c == 1 ? "P5" : "P6") << '\n' << w << ' ' << h << "\n255\n";
  const real* img = x.data().data() + i * c * h * w;
  for (int64_t y = 0; y < h; ++y)
    for (int64_t xx = 0; xx < w; ++xx)
      for (int64_t ch = 0; ch < c; ++ch) {
        const real v = std::clamp(img[(ch * h + y) * w + xx], real(0), real(255));
        o.put(static_cast<char>(static_cast<uint8_t>(v)));
      }
  return o.str();
}

// Images tiled row-major on a ceil(sqrt(n))-wide grid; empty cells stay black.
Tensor grid(const Tensor& x) {
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto cols = static_cast<int64_t>(std::ceil(std::sqrt(static_cast<double>(n))));
  const int64_t rows = (n + cols - 1) / cols;
  Tensor out = Tensor::zeros({1, c, rows * h, cols * w});
  auto o = out.data();
  auto in = x.data();
  for (int64_t k = 0; k < n; ++k) {
    const int64_t gy = (k / cols) * h, gx = (k % cols) * w;
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t y = 0; y < h; ++y)
        for (int64_t xx = 0; xx < w; ++xx)
          o[(ch * rows * h + gy + y) * cols * w + gx + xx] = in[((k * c + ch) * h + y) * w + xx];
  }
  return out;
}

void write_binary(const fs::path& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write '" + path.string() + "'");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// ---- commands ---------------------------------------------------------------------------

int cmd_synth(uint64_t seed, int64_t n, int64_t h, int64_t w, int64_t c, const fs::path& out) {
  DatasetPair d;
  try {
    d = synth_dataset(seed, n, h, w, c);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  fs::create_directories(out);
  save_dataset(d.train, out / "train.bgd");
  save_dataset(d.test, out / "test.bgd");
  std::cout << "wrote " << d.train.n << " training and " << d.test.n << " test images to " << out.string() << '\n';
  return kOk;
}

int cmd_train(const CLI::App& app, const TrainFlags& flags, const fs::path& data, const fs::path& out,
              const std::string& init_from, bool renormalise, const std::string& command) {
  const DatasetPair d = load_data_dir(data);
  TrainConfig cfg = flags.resolve(app, d.train);
  cfg.out_dir = out;
  fs::create_directories(out);
  const std::string resolved = resolved_text(cfg);
  write_text(out / "config.txt", resolved);
  write_text(out / "command.txt", command + "\n");
  std::cout << "# resolved config\n" << resolved << std::flush;

  std::unique_ptr<Model> initial;
  if (!init_from.empty()) {
    LoadedCheckpoint src = load_checkpoint(init_from);
    initial = make_model(cfg.model);
    const int64_t k = std::min(cfg.init_batch, d.train.n);
    try {
      two_stage_init(*initial, *src.model, d.train.batch(0, k), renormalise, mix_seed(cfg.seed, 0xdd1));
    } catch (const std::invalid_argument& e) {
      throw UsageError(std::string("--init-from: ") + e.what());
    }
  }

  std::ofstream csv(out / "metrics.csv");
  if (!csv) throw FormatError("cannot write metrics.csv");
  csv << MetricsRow::csv_header() << '\n';
  auto sink = [&](const MetricsRow& r) {
    csv << r.csv() << '\n' << std::flush;
    std::cout << "epoch " << r.epoch << ' ' << r.split << " bpd " << std::setprecision(6) << r.bpd << " ("
              << std::setprecision(4) << r.seconds << " s)\n"
              << std::flush;
  };
  TrainResult r = train(cfg, d.train, d.test, sink, std::move(initial));
  const std::string report = size_report(*r.model).to_text();
  write_text(out / "size_report.txt", report);
  std::cout << "# size report\n" << report;
  if (r.skipped_batches) std::cout << "skipped batches " << r.skipped_batches << '\n';
  return kOk;
}

int cmd_eval(const fs::path& ckpt, const fs::path& data) {
  LoadedCheckpoint l = load_checkpoint(ckpt);
  const Dataset d = load_eval_data(data);
  const double bpd = evaluate(*l.model, d);
  std::cout << std::setprecision(10) << "bpd " << bpd << '\n'
            << "checkpoint " << (l.deploy ? "deploy" : "training") << '\n'
            << size_report(*l.model).to_text();
  return kOk;
}

int cmd_sample(const fs::path& ckpt, int64_t n, uint64_t seed, const fs::path& out) {
  LoadedCheckpoint l = load_checkpoint(ckpt);
  const int64_t c = l.model->config().channels;
  if (c != 1 && c != 3) throw UsageError("sample images need 1 or 3 channels, model has " + std::to_string(c));
  Tensor x = l.model->sample(n, seed);
  fs::create_directories(out);
  const std::string ext = c == 1 ? ".pgm" : ".ppm";
  for (int64_t i = 0; i < n; ++i) {
    std::ostringstream name;
    name << "sample_" << std::setw(4) << std::setfill('0') << i << ext;
    write_binary(out / name.str(), netpbm(x, i));
  }
  write_binary(out / ("grid" + ext), netpbm(grid(x), 0));
  std::cout << "wrote " << n << " samples and grid" << ext << " to " << out.string() << '\n';
  return kOk;
}

double median_ns(int reps, const std::function<void()>& f) {
  std::vector<double> t;
  for (int r = 0; r < reps; ++r) {
    const auto a = std::chrono::steady_clock::now();
    f();
    t.push_back(std::chrono::duration<double, std::nano>(std::chrono::steady_clock::now() - a).count());
  }
  std::nth_element(t.begin(), t.begin() + reps / 2, t.end());
  return t[reps / 2];
}

int cmd_bench(const std::vector<int64_t>& sizes, int reps, const fs::path& out) {
  if (sizes.empty()) throw UsageError("--sizes must list at least one size");
  std::vector<BenchRow> rows = popcount_bench(sizes, reps);

  // Normalisation cost at the largest fan-in: BWN needs only the constant
  // 1/sqrt(n), WN needs a norm per output channel.
  const int64_t n = *std::max_element(sizes.begin(), sizes.end());
  BwnLayer bwn(n, 64, 1, 1);
  WnLayer wn(n, 64, 1, 1);
  NoGradGuard no_grad;
  real sink = 0;
  const double t_wn = median_ns(reps, [&] { sink += wn.weight().data()[0]; });
  const double t_bwn = median_ns(reps, [&] { sink += bwn.scale().data()[0]; });
  rows.push_back({"bwn_scale", n, t_bwn, t_wn / t_bwn});
  rows.push_back({"wn_scale", n, t_wn, 1.0});

  fs::create_directories(out.parent_path().empty() ? fs::path(".") : out.parent_path());
  std::ofstream csv(out);
  if (!csv) throw FormatError("cannot write '" + out.string() + "'");
  csv << "kernel,size,median_ns,speedup_vs_float\n";
  for (const BenchRow& r : rows) {
    csv << r.kernel << ',' << r.size << ',' << std::fixed << std::setprecision(1) << r.median_ns << ','
        << std::setprecision(3) << r.speedup_vs_float << '\n';
  }

  // FLOP counters of the scale computation, one layer per fan-in.
  std::cout << "fan_in,bwn_scale_flops,wn_scale_flops\n";
  for (int64_t s : sizes) {
    scale_flops() = {};
    BwnLayer b(s, 64, 1, 2);
    WnLayer w(s, 64, 1, 2);
    sink += b.scale().data()[0] + w.weight().data()[0];
    std::cout << s << ',' << scale_flops().bwn << ',' << scale_flops().wn << '\n';
  }
  std::cout << "wrote " << rows.size() << " rows to " << out.string() << (sink == 12345 ? " " : "") << '\n';
  return kOk;
}

struct AblateRow {
  std::string arm;
  uint64_t seed;
  double bpd;
  std::string status;
  SizeReport size;
};

int cmd_ablate(const CLI::App& app, const TrainFlags& flags, const std::string& suite, const fs::path& data,
               const fs::path& out, int seeds, std::vector<int64_t> widths, const std::string& command) {
  const DatasetPair d = load_data_dir(data);
  TrainConfig base = flags.resolve(app, d.train);
  if (!app.count("--model") && flags.config_file.empty()) {
    base.model.kind = suite == "batchnorm" ? ModelKind::Flowpp : ModelKind::Rvae;
  }
  base.model.weights = Precision::Binary;
  fs::create_directories(out);
  write_text(out / "config.txt", resolved_text(base));
  write_text(out / "command.txt", command + "\n");
  std::cout << "# resolved config\n" << resolved_text(base) << std::flush;

  std::vector<AblateRow> rows;
  auto run = [&](const std::string& arm, TrainConfig cfg) {
    AblateRow row{arm, cfg.seed, std::nan(""), "ok", {}};
    try {
      TrainResult r = train(cfg, d.train, d.test);
      row.bpd = r.history.back().bpd;
      row.size = size_report(*r.model);
    } catch (const TrainingAborted& e) {
      row.status = "aborted";
      row.size = size_report(*make_model(cfg.model));
      std::cerr << arm << " seed " << cfg.seed << ": " << e.what() << '\n';
    }
    std::cout << suite << ' ' << arm << " seed " << cfg.seed << " bpd " << row.bpd << ' ' << row.status << '\n'
              << std::flush;
    rows.push_back(row);
  };

  if (suite == "all-layers" || suite == "batchnorm") {
    for (int s = 0; s < seeds; ++s) {
      TrainConfig a = base, b = base;
      a.seed = b.seed = base.seed + static_cast<uint64_t>(s);
      a.model.seed = b.model.seed = a.seed;
      if (suite == "all-layers") {
        a.model.binarize_all = false;
        b.model.binarize_all = true;
        run("residual-only", a);
        run("all-layers", b);
      } else {
        a.model.norm = NormMode::Bwn;
        b.model.norm = NormMode::BatchNorm;
        run("bwn", a);
        run("batchnorm", b);
      }
    }
  } else {
    if (widths.empty()) widths = {base.model.res_channels, base.model.res_channels * 3 / 2};
    for (const WidthResult& w : width_sweep(base, widths, d.train, d.test)) {
      rows.push_back({"width" + std::to_string(w.width), base.seed, w.final_bpd, "ok", w.size});
    }
  }

  std::ofstream csv(out / "ablation.csv");
  if (!csv) throw FormatError("cannot write ablation.csv");
  csv << "suite,arm,seed,final_bpd,status,binary_params,float_params,pct_binary,deploy_bytes\n";
  csv << std::setprecision(10);
  for (const AblateRow& r : rows) {
    csv << suite << ',' << r.arm << ',' << r.seed << ',' << r.bpd << ',' << r.status << ',' << r.size.binary_params
        << ',' << r.size.float_params << ',' << r.size.percent_binary << ',' << r.size.deploy_bytes << '\n';
  }
  // Median final bpd per arm over the finished runs.
  std::vector<std::string> arms;
  for (const AblateRow& r : rows)
    if (std::find(arms.begin(), arms.end(), r.arm) == arms.end()) arms.push_back(r.arm);
  for (const std::string& arm : arms) {
    std::vector<double> v;
    for (const AblateRow& r : rows)
      if (r.arm == arm && r.status == "ok") v.push_back(r.bpd);
    double med = std::nan("");
    if (!v.empty()) {
      std::sort(v.begin(), v.end());
      med = v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
    }
    std::cout << "median " << arm << ' ' << med << '\n';
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Binarised generative models: ResNet VAE and Flow++"};
  app.require_subcommand(1);
  const std::string command = joined_command(argc, argv);

  // synth
  auto* synth = app.add_subcommand("synth", "write a synthetic texture dataset (train.bgd, test.bgd)");
  uint64_t synth_seed = 0;
  int64_t synth_n = 2000, synth_h = 8, synth_w = 8, synth_c = 3;
  std::string synth_out;
  synth->add_option("--seed", synth_seed);
  synth->add_option("--n", synth_n, "number of images");
  synth->add_option("--height", synth_h);
  synth->add_option("--width", synth_w);
  synth->add_option("--channels", synth_c);
  synth->add_option("--out", synth_out, "output directory")->required();

  // train
  auto* tr = app.add_subcommand("train", "train a model, writing metrics.csv and checkpoints");
  TrainFlags train_flags;
  train_flags.add(*tr, true);
  std::string train_data, train_out, init_from;
  bool renormalise = false;
  tr->add_option("--data", train_data, "directory with train.bgd and test.bgd")->required();
  tr->add_option("--out", train_out, "output directory")->required();
  tr->add_option("--init-from", init_from, "float checkpoint for two-stage initialisation");
  tr->add_flag("--renormalise", renormalise, "rescale transferred latent weights to N(0, 0.05) statistics");

  // eval
  auto* ev = app.add_subcommand("eval", "test bpd and size report of a checkpoint");
  std::string eval_ckpt, eval_data;
  ev->add_option("--ckpt", eval_ckpt)->required();
  ev->add_option("--data", eval_data, "dataset file, or a directory (uses test.bgd)")->required();

  // sample
  auto* sa = app.add_subcommand("sample", "write samples as PGM/PPM plus a grid image");
  std::string sample_ckpt, sample_out;
  int64_t sample_n = 16;
  uint64_t sample_seed = 0;
  sa->add_option("--ckpt", sample_ckpt)->required();
  sa->add_option("--n", sample_n)->check(CLI::PositiveNumber);
  sa->add_option("--seed", sample_seed);
  sa->add_option("--out", sample_out, "output directory")->required();

  // bench
  auto* be = app.add_subcommand("bench", "time float vs binary kernels, write bench.csv");
  std::vector<int64_t> bench_sizes = {64, 256, 1024};
  int bench_reps = 20;
  std::string bench_out = "bench.csv";
  be->add_option("--sizes", bench_sizes, "input channel counts")->delimiter(',');
  be->add_option("--reps", bench_reps)->check(CLI::PositiveNumber);
  be->add_option("--out", bench_out, "CSV path");

  // ablate
  auto* ab = app.add_subcommand("ablate", "run an ablation suite and write ablation.csv");
  TrainFlags ablate_flags;
  ablate_flags.add(*ab, false);
  std::string suite, ablate_data, ablate_out;
  int ablate_seeds = 3;
  std::vector<int64_t> widths;
  ab->add_option("--suite", suite)->required()->check(CLI::IsMember({"all-layers", "batchnorm", "width"}));
  ab->add_option("--data", ablate_data)->required();
  ab->add_option("--out", ablate_out)->required();
  ab->add_option("--seeds", ablate_seeds, "seeds per arm")->check(CLI::PositiveNumber);
  ab->add_option("--widths", widths, "residual widths for the width suite")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*synth) return cmd_synth(synth_seed, synth_n, synth_h, synth_w, synth_c, synth_out);
    if (*tr) return cmd_train(*tr, train_flags, train_data, train_out, init_from, renormalise, command);
    if (*ev) return cmd_eval(eval_ckpt, eval_data);
    if (*sa) return cmd_sample(sample_ckpt, sample_n, sample_seed, sample_out);
    if (*be) return cmd_bench(bench_sizes, bench_reps, bench_out);
    if (*ab) return cmd_ablate(*ab, ablate_flags, suite, ablate_data, ablate_out, ablate_seeds, widths, command);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kIo;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kNumeric;
  } catch (const DomainError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kNumeric;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 1;
  }
  return kUsage;
}
