// chsnet: synthesize data, train, evaluate, predict and inspect models.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <sstream>

#include "chsnet/chsnet.hpp"
#include "chsnet/grad_suite.hpp"

using namespace chs;
using Real = float;

namespace {

/// Slices sample k of an (n, w, h, 1) batch into a (w, h, 1) plane.
template <typename T>
Tensor<double> plane(const Tensor<T>& batch, std::size_t k, double threshold = -1.0) {
  Tensor<double> out({batch.dim(1), batch.dim(2), 1});
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double v = batch[k * n + i];
    out[i] = threshold < 0 ? v : (v > threshold ? 1.0 : 0.0);
  }
  return out;
}

TensorPtr<Real> load_image(const fs::path& path, const NetworkConfig& cfg) {
  const auto img = resize_bilinear(from_gray(read_pgm(path)), cfg.input_w, cfg.input_h);
  auto x = make_tensor<Real>({1, cfg.input_w, cfg.input_h, 1});
  for (std::size_t i = 0; i < img.size(); ++i) (*x)[i] = static_cast<Real>(img[i]);
  return x;
}

std::string timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::ostringstream ss;
  ss << std::put_time(std::gmtime(&t), "%Y%m%d-%H%M%S");
  return ss.str();
}

void print_metrics(const char* head, const MetricsReport& m) {
  std::printf("%-9s dice %.4f  jaccard %.4f  precision %.4f  recall %.4f  specificity %.4f  accuracy %.4f%s\n", head,
              m.dice, m.jaccard, m.precision, m.recall, m.specificity, m.accuracy, m.degenerate ? "  (degenerate)" : "");
}

// --- synth -----------------------------------------------------------------

struct SynthArgs {
  std::string out;
  SynthOptions opt;
};

void run_synth(const SynthArgs& a) {
  const auto samples = synth_dataset(a.opt);
  write_dataset(a.out, samples);
  std::printf("wrote %zu samples (%zux%zu) to %s\n", samples.size(), a.opt.size, a.opt.size, a.out.c_str());
}

// --- train -----------------------------------------------------------------

struct TrainArgs {
  std::string config, data, runs = "runs";
};

void run_train(const TrainArgs& a) {
  auto kv = KeyValues::load(a.config);
  NetworkConfig net;
  ModelKind kind = ModelKind::chs;
  TrainConfig tc;
  SplitOptions split;
  read_network(kv, net, kind);
  read_train(kv, tc);
  read_split(kv, split);
  kv.check_all_used();
  net.validate();
  tc.validate();

  LoadOptions lo;
  lo.size_w = net.input_w;
  lo.size_h = net.input_h;
  lo.split = split;
  const auto ds = load_dataset(a.data, lo);
  for (const auto& r : ds.rejected) std::fprintf(stderr, "skipped %s\n", r.c_str());
  const auto tr = ds.manifest.indices(Split::train), va = ds.manifest.indices(Split::val),
             te = ds.manifest.indices(Split::test);
  std::printf("loaded %zu samples: train %zu, val %zu, test %zu\n", ds.samples.size(), tr.size(), va.size(), te.size());

  const fs::path dir = fs::path(a.runs) / timestamp();
  fs::create_directories(dir / "masks");
  {
    KeyValues echo;
    write_network(echo, net, kind);
    write_train(echo, tc);
    write_split(echo, split);
    std::ofstream(dir / "config.txt") << echo.str();
  }

  if (tc.kfold) {
    auto pool = tr;
    pool.insert(pool.end(), va.begin(), va.end());
    const auto folds = train_kfold<Real>([&] { return std::make_unique<ModelGraph<Real>>(net, kind); }, ds.samples,
                                         pool, tc);
    std::ofstream kf(dir / "kfold.txt");
    for (std::size_t k = 0; k < folds.size(); ++k) {
      kf << "fold=" << k << " best_epoch=" << folds[k].best_epoch << " best_val_loss=" << fmt_real(folds[k].best_val_loss)
         << "\n";
      std::printf("fold %zu: best epoch %zu, val loss %.5f\n", k, folds[k].best_epoch, folds[k].best_val_loss);
    }
  }

  ModelGraph<Real> model(net, kind);
  std::ofstream hist(dir / "history.txt");
  TrainOptions opt;
  opt.on_record = [&](const HistoryRecord& r) {
    hist << format_history(r) << "\n";
    hist.flush();
    if (r.split == "val" && r.head == "total") std::printf("epoch %zu  val loss %.5f\n", r.epoch, r.loss);
  };
  const auto res = train(model, ds.samples, tr, va, tc, opt);
  std::printf("best epoch %zu of %zu%s\n", res.best_epoch, res.epochs_run, res.stopped_early ? " (early stop)" : "");
  save_checkpoint(dir / "checkpoint.bin", model);

  if (!te.empty()) {
    const auto ev = evaluate(model, ds.samples, te);
    std::ofstream m(dir / "metrics.txt");
    if (kind == ModelKind::chs) {
      m << format_history({res.best_epoch, "test", "lung", ev.loss, ev.lung}) << "\n";
      print_metrics("lung", ev.lung);
    }
    m << format_history({res.best_epoch, "test", "infection", ev.loss, ev.infection}) << "\n";
    print_metrics("infection", ev.infection);
    Context<Real> ctx{nullptr, Mode::infer};
    for (auto i : te) {
      const auto out = model.forward(ctx, stack<Real>(ds.samples, {i}, &SegmentationSample::image));
      write_pgm(dir / "masks" / (ds.manifest.ids[i] + ".pgm"), to_gray(plane(*out.infection, 0, 0.5)));
    }
  }
  std::printf("run written to %s\n", dir.string().c_str());
}

// --- eval / predict / uncertainty --------------------------------------------

struct EvalArgs {
  std::string checkpoint, data, split = "test";
};

void run_eval(const EvalArgs& a) {
  auto model = load_checkpoint<Real>(fs::path(a.checkpoint));
  LoadOptions lo;
  lo.size_w = model->config().input_w;
  lo.size_h = model->config().input_h;
  const auto ds = load_dataset(a.data, lo);
  std::vector<std::size_t> idx;
  if (a.split == "all") {
    for (std::size_t i = 0; i < ds.samples.size(); ++i) idx.push_back(i);
  } else {
    idx = ds.manifest.indices(a.split == "train" ? Split::train : a.split == "val" ? Split::val : Split::test);
  }
  const auto ev = evaluate(*model, ds.samples, idx);
  std::printf("%zu samples, loss %.5f\n", idx.size(), ev.loss);
  if (model->kind() == ModelKind::chs) print_metrics("lung", ev.lung);
  print_metrics("infection", ev.infection);
}

struct PredictArgs {
  std::string checkpoint, image, out, lung_out;
  double threshold = 0.5;
};

void run_predict(const PredictArgs& a) {
  auto model = load_checkpoint<Real>(fs::path(a.checkpoint));
  Context<Real> ctx{nullptr, Mode::infer};
  const auto out = model->forward(ctx, load_image(a.image, model->config()));
  write_pgm(a.out, to_gray(plane(*out.infection, 0, a.threshold)));
  if (!a.lung_out.empty() && out.lung) write_pgm(a.lung_out, to_gray(plane(*out.lung, 0, a.threshold)));
  std::printf("wrote %s\n", a.out.c_str());
}

struct UncertaintyArgs {
  std::string checkpoint, image, out, mean_out;
  std::size_t samples = 20;
  std::uint64_t seed = 0;
};

void run_uncertainty(const UncertaintyArgs& a) {
  auto model = load_checkpoint<Real>(fs::path(a.checkpoint));
  const auto u = mc_dropout_uncertainty(*model, load_image(a.image, model->config()), a.samples, a.seed);
  // Entropy is written scaled by 1/ln 2 so the full gray range is used.
  auto scaled = plane(u.entropy, 0);
  double peak = 0.0;
  for (auto& v : scaled.data()) {
    peak = std::max(peak, v);
    v /= std::numbers::ln2;
  }
  write_pgm(a.out, to_gray(scaled));
  if (!a.mean_out.empty()) write_pgm(a.mean_out, to_gray(plane(u.mean, 0)));
  std::printf("wrote %s (peak entropy %.4f nats, %zu samples)\n", a.out.c_str(), peak, a.samples);
}

// --- inspect / gradcheck ------------------------------------------------------

struct InspectArgs {
  std::string config, checkpoint;
  bool layers = false;
};

void run_inspect(const InspectArgs& a) {
  std::unique_ptr<ModelGraph<Real>> model;
  if (!a.checkpoint.empty()) {
    model = load_checkpoint<Real>(fs::path(a.checkpoint));
  } else {
    NetworkConfig net;
    ModelKind kind = ModelKind::chs;
    if (!a.config.empty()) {
      auto kv = KeyValues::load(a.config);
      read_network(kv, net, kind);
    }
    net.validate();
    model = std::make_unique<ModelGraph<Real>>(net, kind);
  }
  const auto& cfg = model->config();
  std::printf("%s, %zu stages, base %zu, input %zux%zu\n", model->kind() == ModelKind::chs ? "chs" : "raiu", cfg.stages,
              cfg.base_filters, cfg.input_w, cfg.input_h);
  const auto census = parameter_census(*model);
  if (a.layers) {
    std::printf("\n%-48s %-14s %12s\n", "layer", "family", "params");
    for (const auto& l : census.layers) std::printf("%-48s %-14s %12llu\n", l.layer.c_str(), l.family.c_str(),
                                                    static_cast<unsigned long long>(l.count));
  }
  std::printf("\n%-14s %12s\n", "family", "params");
  for (const auto& [fam, n] : census.by_family) std::printf("%-14s %12llu\n", fam.c_str(), static_cast<unsigned long long>(n));
  std::printf("%-14s %12llu\n", "total", static_cast<unsigned long long>(census.total));

  // Depthwise-separable layers against the standard convolution they replace.
  std::printf("\n%-48s %3s %5s %5s %10s %10s %8s\n", "separable conv", "f", "d", "r", "standard", "separable", "ratio");
  const auto& entries = model->store().entries();
  for (std::size_t i = 0; i + 1 < entries.size(); ++i) {
    const auto& dw = entries[i];
    if (!dw.name.ends_with(".depthwise") || !entries[i + 1].name.ends_with(".pointwise")) continue;
    const auto f = dw.tensor->dim(0), d = dw.tensor->dim(2), r = entries[i + 1].tensor->dim(3);
    const auto c = dsc_cost_ratio(f, d, r);
    std::printf("%-48s %3zu %5zu %5zu %10llu %10llu %8.4f\n", dw.name.substr(0, dw.name.size() - 10).c_str(), f, d, r,
                static_cast<unsigned long long>(c.n_sc), static_cast<unsigned long long>(c.n_dsc), c.ratio);
  }
}

struct GradArgs {
  std::uint64_t seed = 1;
  bool skip_network = false;
};

int run_gradcheck(const GradArgs& a) {
  GradSuiteOptions opt;
  opt.seed = a.seed;
  opt.skip_network = a.skip_network;
  opt.on_case = [](const GradSuiteCase& c) {
    std::printf("%-28s rel %.2e  null %.1e  checked %5zu  skipped %3zu  %.1fs\n", c.name.c_str(),
                c.result.max_rel_error, c.result.max_abs_null, c.result.coords_checked, c.result.coords_skipped,
                c.seconds);
    std::fflush(stdout);
  };
  bool ok = true;
  for (const auto& c : run_grad_suite(opt)) ok = ok && c.result.max_rel_error < 1e-4 && c.result.max_abs_null < 1e-6;
  std::printf("%s\n", ok ? "all gradients agree" : "gradient mismatch");
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CHS-Net lung and infection segmentation"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Write a synthetic dataset");
  synth->add_option("-o,--out", sa.out, "Output directory")->required();
  synth->add_option("-n,--count", sa.opt.n, "Number of samples");
  synth->add_option("--size", sa.opt.size, "Image side");
  synth->add_option("--seed", sa.opt.seed, "Random seed");
  synth->add_option("--distractors", sa.opt.max_distractors, "Maximum bright blobs outside the lungs");
  synth->add_option("--noise", sa.opt.noise, "Gaussian noise sigma");

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Train from a config file and a dataset directory");
  tr->add_option("-c,--config", ta.config, "Config file (net.*, train.*, data.* keys)")->required()->check(CLI::ExistingFile);
  tr->add_option("-d,--data", ta.data, "Dataset root")->required()->check(CLI::ExistingDirectory);
  tr->add_option("--runs", ta.runs, "Directory that receives runs/<timestamp>");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Score a checkpoint on a dataset split");
  ev->add_option("-m,--checkpoint", ea.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  ev->add_option("-d,--data", ea.data, "Dataset root")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--split", ea.split, "train, val, test or all")->check(CLI::IsMember({"train", "val", "test", "all"}));

  PredictArgs pa;
  auto* pr = app.add_subcommand("predict", "Segment one PGM image");
  pr->add_option("-m,--checkpoint", pa.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  pr->add_option("-i,--image", pa.image, "Input PGM")->required()->check(CLI::ExistingFile);
  pr->add_option("-o,--out", pa.out, "Infection mask PGM")->required();
  pr->add_option("--lung-out", pa.lung_out, "Lung mask PGM (cascade only)");
  pr->add_option("--threshold", pa.threshold, "Binarization threshold")->check(CLI::Range(0.0, 1.0));

  UncertaintyArgs ua;
  auto* un = app.add_subcommand("uncertainty", "Monte Carlo dropout entropy map for one PGM image");
  un->add_option("-m,--checkpoint", ua.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  un->add_option("-i,--image", ua.image, "Input PGM")->required()->check(CLI::ExistingFile);
  un->add_option("-o,--out", ua.out, "Entropy PGM (scaled by 1/ln 2)")->required();
  un->add_option("--mean-out", ua.mean_out, "Mean probability PGM");
  un->add_option("-T,--samples", ua.samples, "Stochastic passes");
  un->add_option("--seed", ua.seed, "Dropout seed");

  InspectArgs ia;
  auto* in = app.add_subcommand("inspect", "Parameter census and separable-conv savings");
  auto* src = in->add_option("-c,--config", ia.config, "Config file")->check(CLI::ExistingFile);
  in->add_option("-m,--checkpoint", ia.checkpoint, "Checkpoint file")->check(CLI::ExistingFile)->excludes(src);
  in->add_flag("--layers", ia.layers, "Print every layer");

  GradArgs ga;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every op and block");
  gc->add_option("--seed", ga.seed, "Random seed");
  gc->add_flag("--skip-network", ga.skip_network, "Skip the miniature cascade");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) run_synth(sa);
    if (*tr) run_train(ta);
    if (*ev) run_eval(ea);
    if (*pr) run_predict(pa);
    if (*un) run_uncertainty(ua);
    if (*in) run_inspect(ia);
    if (*gc) return run_gradcheck(ga);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "chsnet: error: %s\n", e.what());
    return 1;
  }
  return 0;
}
