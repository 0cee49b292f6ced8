#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/core.h>

#include "remotenet/config.hpp"
#include "remotenet/datasets.hpp"
#include "remotenet/errors.hpp"
#include "remotenet/evaluation.hpp"
#include "remotenet/training.hpp"
#include "remotenet/verification.hpp"

namespace fs = std::filesystem;
using namespace remotenet;

namespace {

enum Exit : int { kOk = 0, kRuntime = 1, kUsage = 2, kDiverged = 3, kVerifyFailed = 4 };

// Flags shared by the subcommands; empty/unset values leave the config alone.
struct Flags {
  std::string config;
  std::string out;
  std::string checkpoint;
  std::string variant;
  std::string tta;
  std::string data;
  std::string split;
  std::string input;
  std::string attn_scale;
  std::string device = "cpu";
  std::optional<unsigned long long> seed;
  std::optional<int> workers;
  std::optional<int> max_steps;
  std::optional<int> epochs;
  int64_t stop_after = 0;
  bool toy = false;
  bool resume = false;
  bool no_gltb_residual = false;
  std::vector<std::string> suites;
  std::string fault = "none";
};

class Log {
 public:
  void open(const fs::path& path) { file_.open(path, std::ios::app); }
  void operator()(const std::string& line) {
    std::cout << line << '\n' << std::flush;
    if (file_) file_ << line << '\n' << std::flush;
  }

 private:
  std::ofstream file_;
};

// --toy swaps in the toy dataset with the tiny model and its protocol; the
// remaining flags still apply on top.
RunConfig resolve(const Flags& f, std::optional<RunConfig> base) {
  RunConfig rc = base ? *base : protocol_run_config(DatasetKind::loveda);
  if (f.toy) {
    const RunConfig toy = protocol_run_config(DatasetKind::toy);
    rc.preset = toy.preset;
    rc.model = toy.model;
    rc.data = toy.data;
    rc.eval = toy.eval;
    rc.train = toy.train;
    if (base) rc.train.seed = base->train.seed;
  }
  if (!f.variant.empty()) rc.model.ablation = parse_ablation(f.variant);
  if (!f.attn_scale.empty()) rc.model.attn_scale = parse_attn_scale(f.attn_scale);
  if (f.no_gltb_residual) rc.model.gltb_residual = false;
  if (!f.tta.empty()) rc.eval.tta = f.tta;
  if (!f.data.empty()) rc.data.root = f.data;
  if (f.seed) rc.train.seed = *f.seed;
  if (f.workers) rc.data.workers = *f.workers;
  if (f.max_steps) rc.train.max_steps = *f.max_steps;
  if (f.epochs) rc.train.epochs = *f.epochs;
  if (rc.data.root.empty()) {
    if (const char* env = std::getenv("REMOTENET_DATA")) rc.data.root = env;
  }
  if (f.device != "cpu") throw ConfigError("device '" + f.device + "' is not available; only cpu is supported");
  if (rc.data.workers < 1) throw ConfigError("--workers must be at least 1");
  require_valid(rc.model);
  parse_tta(rc.eval.tta, rc.eval.scales);
  return rc;
}

std::string data_root(const RunConfig& rc) {
  if (rc.data.root.empty())
    throw ConfigError("no dataset root: set [data] root, pass --data or export REMOTENET_DATA");
  return rc.data.root;
}

Palette palette_for(const RunConfig& rc) {
  switch (rc.data.dataset) {
    case DatasetKind::loveda:
      return Palette::loveda();
    case DatasetKind::potsdam:
      return rc.data.palette.empty() ? Palette::potsdam() : Palette::load(rc.data.palette);
    case DatasetKind::toy: {
      std::vector<Palette::Entry> entries;
      for (int c = 0; c < rc.model.num_classes; ++c)
        entries.push_back({toy_class_color(c, rc.model.num_classes), c, "class" + std::to_string(c)});
      return Palette(std::move(entries));
    }
  }
  return {};
}

std::shared_ptr<const Dataset> open_split(const RunConfig& rc, Split split) {
  switch (rc.data.dataset) {
    case DatasetKind::toy:
      return toy_dataset(rc.data.toy_count, rc.data.toy_size, rc.model.num_classes, rc.train.seed);
    case DatasetKind::loveda:
      return load_loveda(data_root(rc), split);
    case DatasetKind::potsdam: {
      std::shared_ptr<const Dataset> tiles = load_potsdam(data_root(rc), split, palette_for(rc), rc.data.rendition);
      if (split == Split::train) return patch_dataset(tiles, rc.data.patch_size, rc.data.patch_stride);
      return tiles;
    }
  }
  return nullptr;
}

Split default_eval_split(const RunConfig& rc) {
  return rc.data.dataset == DatasetKind::loveda ? Split::val : Split::test;
}

int cmd_train(const Flags& f) {
  if (f.out.empty()) throw ConfigError("--out is required");
  std::optional<Checkpoint> resume;
  std::optional<RunConfig> base;
  if (f.resume) {
    resume = load_checkpoint((fs::path(f.out) / "last").string());
    base = resume->cfg;
  }
  if (!f.config.empty()) {
    RunConfig file_cfg = load_run_config(f.config);
    if (resume) {
      RunConfig probe = resolve(f, file_cfg);
      if (!(probe.model == resume->cfg.model))
        throw ConfigError("config model does not match the checkpoint being resumed");
    }
    base = file_cfg;
  } else if (!resume) {
    throw ConfigError("--config is required");
  }
  const RunConfig rc = resolve(f, base);

  fs::create_directories(f.out);
  Log log;
  log.open(fs::path(f.out) / "run.log");
  for (const auto& line : {describe_run(rc), "# variant = " + to_string(rc.model.ablation) + "\n"}) {
    std::string text = line;
    if (!text.empty() && text.back() == '\n') text.pop_back();
    log(text);
  }
  std::ofstream(fs::path(f.out) / "config.cfg") << to_text(rc);

  TrainRequest req;
  req.cfg = rc;
  req.train_set = open_split(rc, Split::train);
  if (rc.data.dataset == DatasetKind::loveda) req.val_set = open_split(rc, Split::val);
  if (rc.data.dataset == DatasetKind::toy) req.val_set = req.train_set;
  req.out_dir = f.out;
  req.resume = std::move(resume);
  req.stop_after = f.stop_after;
  req.log = [&log](const std::string& s) { log(s); };
  log(fmt::format("training on {} samples", req.train_set->size()));
  const TrainResult r = train(req);
  log(fmt::format("{} after {} steps; checkpoints in {}", r.finished ? "finished" : "stopped", r.total_steps, f.out));
  return kOk;
}

Checkpoint load_for_inference(const Flags& f, RunConfig& rc) {
  if (f.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  Checkpoint ckpt = load_checkpoint(f.checkpoint);
  std::optional<RunConfig> base = ckpt.cfg;
  if (!f.config.empty()) base = load_run_config(f.config);
  Flags g = f;
  if (f.toy) g.toy = false;  // the checkpoint already fixes the model
  rc = resolve(g, base);
  if (f.toy) {
    rc.data.dataset = DatasetKind::toy;
    rc.data.toy_count = ckpt.cfg.data.toy_count;
    rc.data.toy_size = ckpt.cfg.data.toy_size;
  }
  if (!(rc.model == ckpt.cfg.model)) {
    // Variant or layout differences surface as a naming ShapeError.
    try {
      (void)restore_network(ckpt, rc.model);
    } catch (const ShapeError& e) {
      throw ConfigError(std::string("checkpoint does not match the requested model: ") + e.what());
    }
    throw ConfigError("checkpoint was trained with a different model configuration");
  }
  return ckpt;
}

int cmd_eval(const Flags& f) {
  RunConfig rc;
  Checkpoint ckpt = load_for_inference(f, rc);
  RemoteNet<float> net = restore_network(ckpt, rc.model);
  const Split split = f.split.empty() ? default_eval_split(rc) : parse_split(f.split);
  const auto data = open_split(rc, split);
  const EvalSetup setup = make_eval_setup(rc);

  std::cout << "# checkpoint " << f.checkpoint << " (step " << ckpt.state.step << ")\n";
  std::cout << "# variant = " << to_string(rc.model.ablation) << ", tta = " << rc.eval.tta << ", window "
            << setup.window << " stride " << setup.stride << '\n';
  const ConfusionMatrix cm = evaluate(net, *data, setup);
  if (cm.total() == 0) std::cerr << "warning: no labeled pixels in this split, metrics are undefined\n";
  const auto exclude = metric_exclusions(rc.data.dataset, rc.model.num_classes);
  std::string header = fmt::format("{} {} ({} images)", to_string(rc.data.dataset),
                                   f.split.empty() ? (split == Split::val ? "val" : "test") : f.split, data->size());
  if (!exclude.empty()) header += "; clutter excluded from mIoU, mean F1 and OA";
  const std::string report = format_report(compute_metrics(cm, exclude), palette_for(rc).class_names(), exclude, header);
  std::cout << report;
  if (!f.out.empty()) {
    fs::create_directories(f.out);
    std::ofstream(fs::path(f.out) / "report.txt") << report;
  }
  return kOk;
}

bool is_image(const fs::path& p) {
  std::string ext = p.extension().string();
  for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return ext == ".png" || ext == ".tif" || ext == ".tiff" || ext == ".jpg" || ext == ".jpeg";
}

int cmd_predict(const Flags& f) {
  if (f.input.empty()) throw ConfigError("--input is required");
  if (f.out.empty()) throw ConfigError("--out is required");
  RunConfig rc;
  Checkpoint ckpt = load_for_inference(f, rc);

  std::vector<fs::path> inputs;
  if (fs::is_directory(f.input)) {
    for (const auto& e : fs::directory_iterator(f.input))
      if (e.is_regular_file() && is_image(e.path())) inputs.push_back(e.path());
    std::sort(inputs.begin(), inputs.end());
  } else if (fs::is_regular_file(f.input)) {
    inputs.push_back(f.input);
  } else {
    throw ConfigError("input '" + f.input + "' does not exist");
  }
  if (inputs.empty()) {
    std::cerr << "warning: no images found in " << f.input << '\n';
    return kOk;
  }

  RemoteNet<float> net = restore_network(ckpt, rc.model);
  const EvalSetup setup = make_eval_setup(rc);
  const LogitFn logits = padded_logits(net);
  const Palette palette = palette_for(rc);
  fs::create_directories(f.out);
  for (const auto& path : inputs) {
    const Tensor<float> x = normalize_image(read_image(path.string()), setup.mean, setup.std);
    const Tensor<float> image = x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)});
    const LabelMap labels = argmax_labels(predict_probs_sliding(logits, image, setup.tta, setup.window, setup.stride));
    const std::string stem = path.stem().string();
    write_index_png((fs::path(f.out) / (stem + "_index.png")).string(), labels);
    write_color_png((fs::path(f.out) / (stem + "_color.png")).string(), labels, palette);
    std::cout << path.filename().string() << " -> " << stem << "_index.png " << labels.dim(1) << "x" << labels.dim(0)
              << '\n';
  }
  return kOk;
}

faults::Fault parse_fault(const std::string& s) {
  if (s == "none") return faults::Fault::none;
  if (s == "softmax_backward") return faults::Fault::softmax_backward;
  if (s == "attention_scale") return faults::Fault::attention_scale;
  throw ConfigError("unknown fault '" + s + "' (none, softmax_backward, attention_scale)");
}

int cmd_verify(const Flags& f) {
  std::vector<std::string> names;
  for (const auto& s : f.suites) {
    size_t start = 0;
    while (start <= s.size()) {
      const size_t end = std::min(s.find(',', start), s.size());
      if (end > start) names.push_back(s.substr(start, end - start));
      start = end + 1;
    }
  }
  if (names.empty()) names = suite_names();
  for (const auto& n : names) {
    if (std::find(suite_names().begin(), suite_names().end(), n) == suite_names().end())
      throw ConfigError("unknown suite '" + n + "'");
  }
  faults::ScopedFault fault(parse_fault(f.fault));
  if (f.fault != "none") std::cout << "# fault injected: " << f.fault << '\n';

  bool all = true;
  for (const auto& n : names) {
    std::cout << "== " << n << '\n' << std::flush;
    const SuiteResult r = run_suite(n, [](const std::string& line) { std::cout << "  " << line << '\n' << std::flush; });
    std::cout << "== " << n << (r.pass ? " PASS" : " FAIL") << '\n';
    all = all && r.pass;
  }
  std::cout << (all ? "all suites passed" : "verification FAILED") << '\n';
  return all ? kOk : kVerifyFailed;
}

int cmd_config(const std::string& dataset) {
  std::cout << describe_run(protocol_run_config(parse_dataset(dataset)));
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"RemoteNet semantic segmentation for aerial imagery"};
  app.require_subcommand(1);
  Flags f;
  std::string dataset = "loveda";

  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--config", f.config, "Run configuration file");
  train->add_option("--out", f.out, "Output directory for logs and checkpoints");
  train->add_flag("--resume", f.resume, "Continue from <out>/last");
  train->add_option("--stop-after", f.stop_after, "Stop (and checkpoint) once this many steps are done");
  train->add_option("--max-steps", f.max_steps, "Override the schedule length in optimizer steps");
  train->add_option("--epochs", f.epochs, "Override the number of epochs");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--config", f.config, "Run configuration (defaults to the checkpoint's own)");
  eval->add_option("--checkpoint", f.checkpoint, "Checkpoint directory")->required();
  eval->add_option("--split", f.split, "train, val or test");
  eval->add_option("--out", f.out, "Also write report.txt here");

  auto* predict = app.add_subcommand("predict", "Write label rasters for images");
  predict->add_option("--config", f.config, "Run configuration (defaults to the checkpoint's own)");
  predict->add_option("--checkpoint", f.checkpoint, "Checkpoint directory")->required();
  predict->add_option("--input", f.input, "Image file or directory");
  predict->add_option("--out", f.out, "Output directory");

  for (auto* sub : {train, eval, predict}) {
    sub->add_option("--variant", f.variant, "full, no_amm, frm_two_branch, no_frm, no_fusion");
    sub->add_option("--tta", f.tta, "Comma list of hflip, vflip, rot90, rot180, rot270, msc, or none");
    sub->add_option("--seed", f.seed, "Random seed");
    sub->add_option("--workers", f.workers, "Data loading threads");
    sub->add_option("--data", f.data, "Dataset root (default $REMOTENET_DATA)");
    sub->add_option("--attn-scale", f.attn_scale, "head_dim or channels");
    sub->add_flag("--gltb-no-residual,--no-gltb-residual", f.no_gltb_residual, "Drop the residual around decoder attention");
    sub->add_option("--device", f.device, "Compute device (cpu)");
    sub->add_flag("--toy", f.toy, "Use the synthetic toy dataset");
  }

  auto* verify = app.add_subcommand("verify", "Run the verification suites");
  verify->add_option("--suite", f.suites, "Suites to run (default: all)");
  verify->add_option("--fault", f.fault, "Inject a fault (negative control)");

  auto* config = app.add_subcommand("config", "Print the protocol configuration for a dataset");
  config->add_option("dataset", dataset, "loveda, potsdam or toy");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*train) return cmd_train(f);
    if (*eval) return cmd_eval(f);
    if (*predict) return cmd_predict(f);
    if (*verify) return cmd_verify(f);
    if (*config) return cmd_config(dataset);
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kDiverged;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const CheckpointError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const IngestionError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kOk;
}
