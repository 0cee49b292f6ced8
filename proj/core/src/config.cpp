#include "remotenet/config.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "remotenet/errors.hpp"

namespace remotenet {

ModelConfig default_config(Preset preset) {
  ModelConfig cfg;
  switch (preset) {
    case Preset::loveda:
      cfg.num_classes = 7;
      break;
    case Preset::potsdam:
      cfg.num_classes = 6;
      break;
    case Preset::tiny:
      cfg.stage_dims = {8, 16, 24, 32};
      cfg.stage_depths = {1, 1, 1, 1};
      cfg.stage_heads = {1, 1, 2, 2};
      cfg.pos_bias_radius = 3;
      cfg.decoder_dim = 16;
      cfg.decoder_heads = 2;
      cfg.window_size = 4;
      cfg.num_classes = 3;
      break;
  }
  return cfg;
}

ModelConfig default_config(std::string_view preset) { return default_config(parse_preset(preset)); }

std::vector<std::string> validate_config(const ModelConfig& cfg) {
  std::vector<std::string> errs;
  for (int i = 0; i < 4; ++i) {
    const auto d = cfg.stage_dims[i], h = cfg.stage_heads[i];
    if (d <= 0) errs.push_back(fmt::format("dims[{}] must be positive", i));
    if (h <= 0) errs.push_back(fmt::format("heads[{}] must be positive", i));
    if (d > 0 && h > 0 && d % h != 0) errs.push_back(fmt::format("dims[{}] not divisible by heads[{}]", i, i));
    if (cfg.stage_depths[i] <= 0) errs.push_back(fmt::format("depths[{}] must be positive", i));
    if (cfg.sr_ratios[i] <= 0) errs.push_back(fmt::format("sr_ratios[{}] must be positive", i));
    if (cfg.patch_strides[i] <= 0) errs.push_back(fmt::format("patch_strides[{}] must be positive", i));
    if (cfg.patch_kernels[i] <= 0) errs.push_back(fmt::format("patch_kernels[{}] must be positive", i));
    if (cfg.patch_kernels[i] < cfg.patch_strides[i]) {
      errs.push_back(fmt::format("patch_kernels[{}] smaller than patch_strides[{}] (no overlap)", i, i));
    }
  }
  if (cfg.in_channels <= 0) errs.emplace_back("in_channels must be positive");
  if (cfg.mlp_ratio < 1) errs.emplace_back("mlp_ratio must be >= 1");
  if (cfg.pos_bias_radius < 0) errs.emplace_back("pos_bias_radius must be >= 0");
  if (cfg.decoder_dim <= 0) errs.emplace_back("decoder_dim must be positive");
  if (cfg.decoder_heads <= 0) {
    errs.emplace_back("decoder_heads must be positive");
  } else if (cfg.decoder_dim > 0 && cfg.decoder_dim % cfg.decoder_heads != 0) {
    errs.emplace_back("decoder_dim not divisible by decoder_heads");
  }
  if (cfg.decoder_mlp_ratio < 1) errs.emplace_back("decoder_mlp_ratio must be >= 1");
  if (cfg.window_size <= 0) errs.emplace_back("window_size must be positive");
  if (cfg.gltb_per_scale < 1) errs.emplace_back("gltb_per_scale must be >= 1");
  for (int i = 0; i < 2; ++i) {
    if (cfg.frm_kernels[i] <= 0 || cfg.frm_kernels[i] % 2 == 0) {
      errs.push_back(fmt::format("frm_kernels[{}] must be a positive odd size", i));
    }
  }
  if (cfg.num_classes < 2) errs.emplace_back("num_classes must be >= 2");
  if (cfg.num_classes > 255) errs.emplace_back("num_classes must be < 255 (255 is the ignore index)");
  return errs;
}

void require_valid(const ModelConfig& cfg) {
  auto errs = validate_config(cfg);
  if (!errs.empty()) throw ConfigError("invalid model config: " + fmt::format("{}", fmt::join(errs, "; ")));
}

int stage_stride(const ModelConfig& cfg, int stage) {
  int s = 1;
  for (int i = 0; i <= stage; ++i) s *= cfg.patch_strides[static_cast<size_t>(i)];
  return s;
}

int total_stride(const ModelConfig& cfg) { return stage_stride(cfg, 3); }

namespace {

template <typename E>
E parse_enum(std::string_view s, const std::map<std::string, E, std::less<>>& table, const char* what) {
  auto it = table.find(s);
  if (it == table.end()) throw ConfigError(fmt::format("unknown {} '{}'", what, s));
  return it->second;
}

const std::map<std::string, Ablation, std::less<>> kAblations{{"full", Ablation::full},
                                                             {"no_amm", Ablation::no_amm},
                                                             {"frm_two_branch", Ablation::frm_two_branch},
                                                             {"no_frm", Ablation::no_frm},
                                                             {"no_fusion", Ablation::no_fusion}};
const std::map<std::string, AttnScale, std::less<>> kScales{{"head_dim", AttnScale::head_dim},
                                                           {"channels", AttnScale::channels}};
const std::map<std::string, AmmMode, std::less<>> kAmm{{"shared", AmmMode::shared},
                                                      {"per_branch_self", AmmMode::per_branch_self},
                                                      {"per_branch_cross", AmmMode::per_branch_cross}};
const std::map<std::string, Preset, std::less<>> kPresets{
    {"loveda", Preset::loveda}, {"potsdam", Preset::potsdam}, {"tiny", Preset::tiny}};
const std::map<std::string, DatasetKind, std::less<>> kDatasets{
    {"loveda", DatasetKind::loveda}, {"potsdam", DatasetKind::potsdam}, {"toy", DatasetKind::toy}};

template <typename E>
std::string enum_name(E v, const std::map<std::string, E, std::less<>>& table) {
  for (const auto& [k, e] : table) {
    if (e == v) return k;
  }
  return "?";
}

}  // namespace

std::string to_string(Preset p) { return enum_name(p, kPresets); }
std::string to_string(Ablation a) { return enum_name(a, kAblations); }
std::string to_string(AttnScale s) { return enum_name(s, kScales); }
std::string to_string(AmmMode m) { return enum_name(m, kAmm); }
std::string to_string(DatasetKind d) { return enum_name(d, kDatasets); }
Ablation parse_ablation(std::string_view s) { return parse_enum(s, kAblations, "ablation variant"); }
AttnScale parse_attn_scale(std::string_view s) { return parse_enum(s, kScales, "attention scale"); }
AmmMode parse_amm_mode(std::string_view s) { return parse_enum(s, kAmm, "amm mode"); }
Preset parse_preset(std::string_view s) { return parse_enum(s, kPresets, "preset"); }
DatasetKind parse_dataset(std::string_view s) { return parse_enum(s, kDatasets, "dataset"); }

// ---- run config text ------------------------------------------------------

namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  const auto e = s.find_last_not_of(" \t\r\n");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

template <typename N>
N parse_number(const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  N out{};
  const char* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end || v.empty()) {
    throw ConfigError(fmt::format("key '{}': cannot parse '{}' as a number", key, v));
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(fmt::format("key '{}': expected a boolean, got '{}'", key, v));
}

template <typename N>
std::vector<N> parse_list(const std::string& key, const std::string& raw) {
  std::vector<N> out;
  std::stringstream ss(raw);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<N>(key, item));
  return out;
}

template <typename N, size_t K>
std::array<N, K> parse_array(const std::string& key, const std::string& raw) {
  auto v = parse_list<N>(key, raw);
  if (v.size() != K) throw ConfigError(fmt::format("key '{}': expected {} values, got {}", key, K, v.size()));
  std::array<N, K> out{};
  std::copy(v.begin(), v.end(), out.begin());
  return out;
}

using Setter = std::function<void(RunConfig&, const std::string&)>;
using Getter = std::function<std::string(const RunConfig&)>;

struct Field {
  Setter set;
  Getter get;
};

template <typename N>
std::string list_text(const N& values) {
  return fmt::format("{}", fmt::join(values, ","));
}

#define RN_INT(section, name, expr)                                                                     \
  fields[section][name] = Field{[](RunConfig& rc, const std::string& v) { expr = parse_number<int>(name, v); }, \
                                [](const RunConfig& rc) { return fmt::format("{}", expr); }}
#define RN_DBL(section, name, expr)                                                                        \
  fields[section][name] = Field{[](RunConfig& rc, const std::string& v) { expr = parse_number<double>(name, v); }, \
                                [](const RunConfig& rc) { return fmt::format("{}", expr); }}
#define RN_BOOL(section, name, expr)                                                               \
  fields[section][name] = Field{[](RunConfig& rc, const std::string& v) { expr = parse_bool(name, v); }, \
                                [](const RunConfig& rc) { return std::string(expr ? "true" : "false"); }}
#define RN_STR(section, name, expr)                                                           \
  fields[section][name] = Field{[](RunConfig& rc, const std::string& v) { expr = trim(v); }, \
                                [](const RunConfig& rc) { return expr; }}
#define RN_ARR(section, name, N, K, expr)                                                                    \
  fields[section][name] = Field{[](RunConfig& rc, const std::string& v) { expr = parse_array<N, K>(name, v); }, \
                                [](const RunConfig& rc) { return list_text(expr); }}

using FieldTable = std::map<std::string, std::map<std::string, Field>>;

const FieldTable& field_table() {
  static const FieldTable table = [] {
    FieldTable fields;
    RN_ARR("model", "stage_dims", int, 4, rc.model.stage_dims);
    RN_ARR("model", "stage_depths", int, 4, rc.model.stage_depths);
    RN_ARR("model", "stage_heads", int, 4, rc.model.stage_heads);
    RN_ARR("model", "sr_ratios", int, 4, rc.model.sr_ratios);
    RN_ARR("model", "patch_strides", int, 4, rc.model.patch_strides);
    RN_ARR("model", "patch_kernels", int, 4, rc.model.patch_kernels);
    RN_INT("model", "in_channels", rc.model.in_channels);
    RN_INT("model", "mlp_ratio", rc.model.mlp_ratio);
    RN_INT("model", "pos_bias_radius", rc.model.pos_bias_radius);
    fields["model"]["attn_scale"] =
        Field{[](RunConfig& rc, const std::string& v) { rc.model.attn_scale = parse_attn_scale(trim(v)); },
              [](const RunConfig& rc) { return to_string(rc.model.attn_scale); }};
    RN_INT("model", "decoder_dim", rc.model.decoder_dim);
    RN_INT("model", "decoder_heads", rc.model.decoder_heads);
    RN_INT("model", "decoder_mlp_ratio", rc.model.decoder_mlp_ratio);
    RN_INT("model", "window_size", rc.model.window_size);
    RN_INT("model", "gltb_per_scale", rc.model.gltb_per_scale);
    RN_BOOL("model", "gltb_residual", rc.model.gltb_residual);
    fields["model"]["amm_mode"] =
        Field{[](RunConfig& rc, const std::string& v) { rc.model.amm_mode = parse_amm_mode(trim(v)); },
              [](const RunConfig& rc) { return to_string(rc.model.amm_mode); }};
    RN_ARR("model", "frm_kernels", int, 2, rc.model.frm_kernels);
    RN_INT("model", "num_classes", rc.model.num_classes);
    fields["model"]["ablation"] =
        Field{[](RunConfig& rc, const std::string& v) { rc.model.ablation = parse_ablation(trim(v)); },
              [](const RunConfig& rc) { return to_string(rc.model.ablation); }};

    RN_DBL("train", "lr", rc.train.lr);
    RN_DBL("train", "lr_min", rc.train.lr_min);
    RN_INT("train", "epochs", rc.train.epochs);
    RN_INT("train", "batch_size", rc.train.batch_size);
    RN_DBL("train", "weight_decay", rc.train.weight_decay);
    RN_DBL("train", "beta1", rc.train.beta1);
    RN_DBL("train", "beta2", rc.train.beta2);
    RN_DBL("train", "eps", rc.train.eps);
    RN_DBL("train", "grad_clip", rc.train.grad_clip);
    RN_DBL("train", "bn_momentum", rc.train.bn_momentum);
    RN_INT("train", "max_steps", rc.train.max_steps);
    fields["train"]["seed"] =
        Field{[](RunConfig& rc, const std::string& v) { rc.train.seed = parse_number<unsigned long long>("seed", v); },
              [](const RunConfig& rc) { return fmt::format("{}", rc.train.seed); }};

    fields["data"]["dataset"] =
        Field{[](RunConfig& rc, const std::string& v) { rc.data.dataset = parse_dataset(trim(v)); },
              [](const RunConfig& rc) { return to_string(rc.data.dataset); }};
    RN_STR("data", "root", rc.data.root);
    RN_INT("data", "crop", rc.data.crop);
    RN_DBL("data", "scale_min", rc.data.scale_min);
    RN_DBL("data", "scale_max", rc.data.scale_max);
    RN_BOOL("data", "hflip", rc.data.hflip);
    RN_BOOL("data", "vflip", rc.data.vflip);
    RN_ARR("data", "mean", double, 3, rc.data.mean);
    RN_ARR("data", "std", double, 3, rc.data.std);
    RN_STR("data", "rendition", rc.data.rendition);
    RN_STR("data", "palette", rc.data.palette);
    RN_INT("data", "patch_size", rc.data.patch_size);
    RN_INT("data", "patch_stride", rc.data.patch_stride);
    RN_INT("data", "toy_count", rc.data.toy_count);
    RN_INT("data", "toy_size", rc.data.toy_size);
    RN_INT("data", "workers", rc.data.workers);

    RN_STR("eval", "tta", rc.eval.tta);
    fields["eval"]["scales"] =
        Field{[](RunConfig& rc, const std::string& v) { rc.eval.scales = parse_list<double>("scales", v); },
              [](const RunConfig& rc) { return list_text(rc.eval.scales); }};
    RN_INT("eval", "window", rc.eval.window);
    RN_INT("eval", "stride", rc.eval.stride);
    return fields;
  }();
  return table;
}

#undef RN_INT
#undef RN_DBL
#undef RN_BOOL
#undef RN_STR
#undef RN_ARR

}  // namespace

RunConfig protocol_run_config(DatasetKind dataset) {
  RunConfig rc;
  rc.data.dataset = dataset;
  switch (dataset) {
    case DatasetKind::loveda:
      rc.preset = "loveda";
      rc.model = default_config(Preset::loveda);
      rc.train.lr = 6e-5;
      rc.train.epochs = 50;
      rc.data.crop = 512;
      rc.data.hflip = true;
      rc.eval.tta = "hflip,msc";
      rc.eval.window = 1024;
      rc.eval.stride = 1024;
      break;
    case DatasetKind::potsdam:
      rc.preset = "potsdam";
      rc.model = default_config(Preset::potsdam);
      rc.train.lr = 6e-4;
      rc.train.epochs = 55;
      rc.data.crop = 768;
      rc.data.hflip = false;
      rc.eval.tta = "hflip,vflip,rot90,msc";
      rc.eval.window = 1024;
      rc.eval.stride = 512;
      break;
    case DatasetKind::toy:
      rc.preset = "tiny";
      rc.model = default_config(Preset::tiny);
      rc.train.lr = 2e-3;
      rc.train.epochs = 200;
      rc.data.crop = 64;
      rc.data.scale_min = 1.0;
      rc.data.scale_max = 1.0;
      rc.data.hflip = false;
      rc.eval.window = 64;
      rc.eval.stride = 64;
      break;
  }
  rc.train.batch_size = dataset == DatasetKind::toy ? 4 : 8;
  rc.train.weight_decay = 0.01;
  return rc;
}

RunConfig parse_run_config(const std::string& text) {
  boost::property_tree::ptree tree;
  std::istringstream in(text);
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  const auto& table = field_table();
  RunConfig rc;
  for (const auto& [section, sub] : tree) {
    if (!table.count(section)) throw ConfigError(fmt::format("unknown config section '[{}]'", section));
    if (sub.data().size() && sub.empty()) throw ConfigError(fmt::format("top-level key '{}' outside a section", section));
  }
  // Preset first so the remaining keys override it.
  if (auto model = tree.get_child_optional("model")) {
    if (auto preset = model->get_optional<std::string>("preset")) {
      rc.preset = trim(*preset);
      rc.model = default_config(rc.preset);
    }
  }
  for (const auto& [section, sub] : tree) {
    const auto& fields = table.at(section);
    for (const auto& [key, value] : sub) {
      if (section == "model" && key == "preset") continue;
      auto it = fields.find(key);
      if (it == fields.end()) throw ConfigError(fmt::format("unknown config key '{}' in [{}]", key, section));
      it->second.set(rc, value.data());
    }
  }
  return rc;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string to_text(const RunConfig& rc) {
  std::string out;
  for (const auto& [section, fields] : field_table()) {
    out += fmt::format("[{}]\n", section);
    if (section == "model") out += fmt::format("preset = {}\n", rc.preset);
    for (const auto& [key, field] : fields) out += fmt::format("{} = {}\n", key, field.get(rc));
    out += "\n";
  }
  return out;
}

}  // namespace remotenet
