#include "remotenet/training.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>
#include <thread>

#include <fmt/format.h>
#include <zlib.h>

#include "remotenet/evaluation.hpp"

namespace fs = std::filesystem;

namespace remotenet {

OptimState make_optim_state(const ParamStore<float>& params, const TrainOptions& opt) {
  OptimState st;
  st.lr_base = opt.lr;
  st.weight_decay = opt.weight_decay;
  st.beta1 = opt.beta1;
  st.beta2 = opt.beta2;
  st.eps = opt.eps;
  for (const auto& e : params.entries()) {
    if (!e.requires_grad) continue;
    st.m.emplace(e.name, Tensor<float>(e.var.value().shape()));
    st.v.emplace(e.name, Tensor<float>(e.var.value().shape()));
  }
  return st;
}

void adamw_step(ParamStore<float>& params, OptimState& st, double lr) {
  for (const auto& e : params.entries()) {
    if (!e.requires_grad) continue;
    const auto& g = e.var.node()->grad;
    if (!g.empty() && !g.all_finite()) throw NumericError("non-finite gradient in parameter " + e.name);
    if (!st.m.count(e.name) || st.m.at(e.name).shape() != e.var.value().shape()) {
      throw ShapeError("optimizer state does not match parameter " + e.name);
    }
  }
  ++st.t;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.t));
  const double decay = 1.0 - lr * st.weight_decay;
  for (const auto& e : params.entries()) {
    if (!e.requires_grad) continue;
    auto& node = *e.var.node();
    float* theta = node.value.data();
    const float* g = node.grad.empty() ? nullptr : node.grad.data();
    float* m = st.m.at(e.name).data();
    float* v = st.v.at(e.name).data();
    for (int64_t i = 0; i < node.value.numel(); ++i) {
      const double gi = g ? g[i] : 0.0;
      m[i] = static_cast<float>(st.beta1 * m[i] + (1.0 - st.beta1) * gi);
      v[i] = static_cast<float>(st.beta2 * v[i] + (1.0 - st.beta2) * gi * gi);
      const double mh = m[i] / bc1, vh = v[i] / bc2;
      theta[i] = static_cast<float>(theta[i] * decay - lr * mh / (std::sqrt(vh) + st.eps));
    }
  }
}

double cosine_lr(int64_t t, int64_t total, double lr_base, double lr_min) {
  if (total <= 0) throw ConfigError(fmt::format("cosine schedule needs total steps > 0, got {}", total));
  if (t < 0 || t > total) throw ConfigError(fmt::format("schedule step {} outside [0, {}]", t, total));
  if (t == total) return lr_min;
  return lr_min + 0.5 * (lr_base - lr_min) * (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) / total));
}

double clip_grad_norm(ParamStore<float>& params, double max_norm) {
  double sq = 0;
  for (const auto& e : params.entries()) {
    const auto& g = e.var.node()->grad;
    if (!e.requires_grad || g.empty()) continue;
    for (float x : g.values()) sq += static_cast<double>(x) * x;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const auto s = static_cast<float>(max_norm / (norm + 1e-6));
    for (const auto& e : params.entries()) {
      auto& g = e.var.node()->grad;
      if (!e.requires_grad || g.empty()) continue;
      for (float& x : g.values()) x *= s;
    }
  }
  return norm;
}

// ---- checkpoints ---------------------------------------------------------------

namespace {

constexpr const char* kMagic = "remotenet-checkpoint";

std::string shape_text(const Shape& s) {
  std::string out;
  for (size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out;
}

Shape parse_shape(const std::string& text, const std::string& name) {
  Shape s;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      size_t used = 0;
      const long long d = std::stoll(tok, &used);
      if (used != tok.size() || d < 1) throw std::invalid_argument(tok);
      s.push_back(d);
    } catch (const std::logic_error&) {
      throw CheckpointError("checkpoint entry " + name + ": bad shape '" + text + "'");
    }
  }
  if (s.empty()) throw CheckpointError("checkpoint entry " + name + ": empty shape");
  return s;
}

uint32_t crc_of(const std::string& bytes) {
  return static_cast<uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

std::string to_le_bytes(const Tensor<float>& t) {
  std::string out(static_cast<size_t>(t.numel()) * 4, '\0');
  for (int64_t i = 0; i < t.numel(); ++i) {
    uint32_t u = std::bit_cast<uint32_t>(t[i]);
    if constexpr (std::endian::native == std::endian::big) u = __builtin_bswap32(u);
    std::memcpy(out.data() + i * 4, &u, 4);
  }
  return out;
}

Tensor<float> from_le_bytes(const char* p, const Shape& shape) {
  Tensor<float> t(shape);
  for (int64_t i = 0; i < t.numel(); ++i) {
    uint32_t u;
    std::memcpy(&u, p + i * 4, 4);
    if constexpr (std::endian::native == std::endian::big) u = __builtin_bswap32(u);
    t[i] = std::bit_cast<float>(u);
  }
  return t;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw CheckpointError("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.close();
  if (!out) throw CheckpointError("cannot write " + p.string());
}

std::string state_text(const Checkpoint& c) {
  return fmt::format(
      "[state]\nversion = {}\nepoch = {}\nstep = {}\nbest_score = {}\nseed = {}\noptim_t = {}\nlr_base = {}\n"
      "weight_decay = {}\nbeta1 = {}\nbeta2 = {}\neps = {}\n",
      kCheckpointVersion, c.state.epoch, c.state.step, c.state.best_score, c.state.seed, c.optim.t, c.optim.lr_base,
      c.optim.weight_decay, c.optim.beta1, c.optim.beta2, c.optim.eps);
}

void parse_state(const std::string& text, Checkpoint& c) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      s.erase(0, s.find_first_not_of(" \t"));
      s.erase(s.find_last_not_of(" \t\r") + 1);
      return s;
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  const auto get = [&](const char* k) {
    auto it = kv.find(k);
    if (it == kv.end()) throw CheckpointError(std::string("checkpoint meta lacks state key ") + k);
    return it->second;
  };
  try {
    if (std::stoi(get("version")) != kCheckpointVersion) {
      throw CheckpointError("checkpoint meta version " + get("version") + " unsupported");
    }
    c.state.epoch = std::stoll(get("epoch"));
    c.state.step = std::stoll(get("step"));
    c.state.best_score = std::stod(get("best_score"));
    c.state.seed = std::stoull(get("seed"));
    c.optim.t = std::stoll(get("optim_t"));
    c.optim.lr_base = std::stod(get("lr_base"));
    c.optim.weight_decay = std::stod(get("weight_decay"));
    c.optim.beta1 = std::stod(get("beta1"));
    c.optim.beta2 = std::stod(get("beta2"));
    c.optim.eps = std::stod(get("eps"));
  } catch (const std::logic_error&) {
    throw CheckpointError("checkpoint meta has a malformed state value");
  }
}

}  // namespace

void save_checkpoint(const std::string& dir, const Checkpoint& ckpt) {
  std::string manifest = fmt::format("{} {}\n", kMagic, kCheckpointVersion);
  std::string blob;
  const auto add = [&](const std::string& role, const std::string& name, const std::string& kind,
                       const Tensor<float>& t) {
    const std::string bytes = to_le_bytes(t);
    manifest += fmt::format("{} {} {} f32 {} {} {:08x}\n", role, name, kind, shape_text(t.shape()), blob.size(),
                            crc_of(bytes));
    blob += bytes;
  };
  for (const auto& e : ckpt.params.entries()) add("param", e.name, to_string(e.kind), e.var.value());
  for (const auto& e : ckpt.params.entries()) {
    if (!e.requires_grad) continue;
    const auto m = ckpt.optim.m.find(e.name);
    const auto v = ckpt.optim.v.find(e.name);
    if (m == ckpt.optim.m.end() || v == ckpt.optim.v.end()) {
      throw CheckpointError("optimizer state missing for " + e.name);
    }
    add("adam_m", e.name, "moment", m->second);
    add("adam_v", e.name, "moment", v->second);
  }
  const std::string meta = to_text(ckpt.cfg) + "\n" + state_text(ckpt);

  const fs::path target(dir);
  const fs::path tmp = target.string() + ".tmp";
  const fs::path old = target.string() + ".old";
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  write_file(tmp / "tensors.bin", blob);
  write_file(tmp / "meta", meta);
  write_file(tmp / "manifest", manifest);
  fs::remove_all(old);
  if (fs::exists(target)) fs::rename(target, old);
  fs::rename(tmp, target);
  fs::remove_all(old);
}

Checkpoint load_checkpoint(const std::string& dir) {
  const fs::path base(dir);
  if (!fs::is_directory(base)) throw CheckpointError("checkpoint directory not found: " + dir);
  const std::string manifest = read_file(base / "manifest");
  const std::string blob = read_file(base / "tensors.bin");
  const std::string meta = read_file(base / "meta");

  Checkpoint c;
  const auto state_at = meta.find("[state]");
  if (state_at == std::string::npos) throw CheckpointError("checkpoint meta lacks a [state] section");
  try {
    c.cfg = parse_run_config(meta.substr(0, state_at));
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint meta: ") + e.what());
  }
  parse_state(meta.substr(state_at), c);

  std::istringstream in(manifest);
  std::string magic;
  int version = 0;
  if (!(in >> magic >> version) || magic != kMagic) throw CheckpointError("not a checkpoint manifest: " + dir);
  if (version != kCheckpointVersion) {
    throw CheckpointError(fmt::format("checkpoint format version {} unsupported (expected {})", version,
                                      kCheckpointVersion));
  }
  uint64_t expected_offset = 0;
  std::string role, name, kind, dtype, shape, crc_hex;
  uint64_t offset = 0;
  while (in >> role >> name >> kind >> dtype >> shape >> offset >> crc_hex) {
    if (dtype != "f32") throw CheckpointError("checkpoint entry " + name + ": unsupported dtype " + dtype);
    const Shape s = parse_shape(shape, name);
    const uint64_t bytes = static_cast<uint64_t>(shape_numel(s)) * 4;
    if (offset != expected_offset || offset + bytes > blob.size()) {
      throw CheckpointError("checkpoint entry " + name + ": offset/shape inconsistent with tensors.bin");
    }
    const std::string chunk = blob.substr(offset, bytes);
    if (fmt::format("{:08x}", crc_of(chunk)) != crc_hex) {
      throw CheckpointError("checkpoint entry " + name + ": checksum mismatch");
    }
    Tensor<float> t = from_le_bytes(chunk.data(), s);
    if (role == "param") {
      try {
        c.params.add(name, parse_param_kind(kind), std::move(t));
      } catch (const std::exception& e) {
        throw CheckpointError("checkpoint entry " + name + ": " + e.what());
      }
    } else if (role == "adam_m") {
      c.optim.m[name] = std::move(t);
    } else if (role == "adam_v") {
      c.optim.v[name] = std::move(t);
    } else {
      throw CheckpointError("checkpoint entry " + name + ": unknown role " + role);
    }
    expected_offset = offset + bytes;
  }
  if (!in.eof()) throw CheckpointError("checkpoint manifest is malformed near entry " + name);
  if (expected_offset != blob.size()) throw CheckpointError("tensors.bin has trailing bytes");

  try {
    check_layout(c.params, declare_network(c.cfg.model));
  } catch (const ShapeError& e) {
    throw CheckpointError(std::string("checkpoint does not match its config: ") + e.what());
  }
  for (const auto& e : c.params.entries()) {
    if (!e.requires_grad) continue;
    for (const auto* moments : {&c.optim.m, &c.optim.v}) {
      auto it = moments->find(e.name);
      if (it == moments->end() || it->second.shape() != e.var.value().shape()) {
        throw CheckpointError("checkpoint optimizer state missing or misshapen for " + e.name);
      }
    }
  }
  if (c.optim.m.size() != static_cast<size_t>(std::count_if(c.params.entries().begin(), c.params.entries().end(),
                                                            [](const auto& e) { return e.requires_grad; }))) {
    throw CheckpointError("checkpoint has optimizer state for unknown parameters");
  }
  return c;
}

RemoteNet<float> restore_network(const Checkpoint& ckpt, const ModelConfig& cfg) {
  return RemoteNet<float>(cfg, ckpt.params);
}

// ---- training loop -------------------------------------------------------------

int64_t steps_per_epoch(size_t dataset_size, int batch_size) {
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (dataset_size == 0) throw ConfigError("training set is empty");
  return (static_cast<int64_t>(dataset_size) + batch_size - 1) / batch_size;
}

std::string describe_run(const RunConfig& cfg) {
  return "# resolved run configuration\n" + to_text(cfg);
}

namespace {

std::mt19937_64 stream(unsigned long long seed, uint64_t a, uint64_t b, uint64_t tag) {
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32), static_cast<uint32_t>(a),
                    static_cast<uint32_t>(a >> 32), static_cast<uint32_t>(b), static_cast<uint32_t>(tag)};
  return std::mt19937_64(seq);
}

std::vector<size_t> epoch_order(size_t n, unsigned long long seed, int64_t epoch) {
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  auto rng = stream(seed, static_cast<uint64_t>(epoch), 0, 1);
  // Fisher-Yates with explicit draws keeps the order independent of the
  // standard library's shuffle implementation.
  for (size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  return order;
}

std::vector<Sample> load_batch(const Dataset& data, const std::vector<size_t>& idx, const AugmentSpec& aug,
                               unsigned long long seed, int64_t step, int workers) {
  std::vector<Sample> out(idx.size());
  const auto job = [&](size_t slot) {
    auto rng = stream(seed, static_cast<uint64_t>(step), slot, 2);
    out[slot] = augment(data.get(idx[slot]), aug, rng);
  };
  const size_t nw = std::clamp<size_t>(static_cast<size_t>(std::max(workers, 1)), 1, idx.size());
  if (nw == 1) {
    for (size_t i = 0; i < idx.size(); ++i) job(i);
    return out;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(nw);
  for (size_t w = 0; w < nw; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (size_t i = w; i < idx.size(); i += nw) job(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

}  // namespace

TrainResult train(const TrainRequest& req) {
  const RunConfig& cfg = req.cfg;
  require_valid(cfg.model);
  if (!req.train_set) throw ConfigError("no training set");
  const auto log = [&](const std::string& line) {
    if (req.log) req.log(line);
  };
  const TrainOptions& opt = cfg.train;
  const int64_t spe = steps_per_epoch(req.train_set->size(), opt.batch_size);
  if (opt.epochs < 1 && opt.max_steps < 1) throw ConfigError("epochs must be >= 1");
  const int64_t total = opt.max_steps > 0 ? opt.max_steps : static_cast<int64_t>(opt.epochs) * spe;

  TrainResult res;
  Checkpoint& ck = res.last;
  ck.cfg = cfg;
  if (req.resume) {
    ck.params = req.resume->params;
    ck.optim = req.resume->optim;
    ck.state = req.resume->state;
  } else {
    ck.params = init_params<float>(cfg.model, opt.seed);
    ck.optim = make_optim_state(ck.params, opt);
    ck.state.seed = opt.seed;
  }
  RemoteNet<float> net(cfg.model, ck.params);
  net.set_bn_momentum(opt.bn_momentum);
  ParamStore<float>& params = net.params();
  const unsigned long long seed = ck.state.seed;

  const AugmentSpec aug{cfg.data.hflip, cfg.data.vflip, cfg.data.scale_min, cfg.data.scale_max, cfg.data.crop};
  const fs::path out = req.out_dir;
  const auto snapshot = [&] {
    ck.params = params;
    return ck;
  };
  const auto save = [&](const std::string& name) {
    if (!req.out_dir.empty()) save_checkpoint((out / name).string(), snapshot());
  };
  std::ofstream metrics_log;
  if (!req.out_dir.empty()) {
    fs::create_directories(out);
    metrics_log.open(out / "metrics.tsv", std::ios::app);
    if (ck.state.step == 0) metrics_log << "epoch\tstep\tmean_loss\tlr\tval_miou\n";
  }

  int64_t step = ck.state.step;
  if (step > 0) log(fmt::format("resuming at step {} of {}", step, total));
  log(fmt::format("steps per epoch {}, total steps {}", spe, total));
  double epoch_loss = 0;
  int64_t epoch_steps = 0;
  while (step < total) {
    const int64_t epoch = step / spe;
    const auto order = epoch_order(req.train_set->size(), seed, epoch);
    for (int64_t b = step % spe; b < spe && step < total; ++b) {
      const size_t lo = static_cast<size_t>(b * opt.batch_size);
      const size_t hi = std::min(order.size(), lo + static_cast<size_t>(opt.batch_size));
      const std::vector<size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(lo),
                                    order.begin() + static_cast<std::ptrdiff_t>(hi));
      const auto batch = make_batch(load_batch(*req.train_set, idx, aug, seed, step, cfg.data.workers),
                                    cfg.data.mean, cfg.data.std);

      params.zero_grad();
      net.set_mode(Mode::train);
      Var<float> loss;
      try {
        loss = cross_entropy_loss(net.forward(Var<float>(batch.first)), batch.second);
      } catch (const NumericError& e) {
        save("diverged");
        throw DivergenceError(fmt::format("step {}: {}", step, e.what()));
      }
      const double lv = loss.value()[0];
      if (!std::isfinite(lv)) {
        save("diverged");
        throw DivergenceError(fmt::format("loss became non-finite at step {}", step));
      }
      backward(loss);
      if (opt.grad_clip > 0) clip_grad_norm(params, opt.grad_clip);
      const double lr = cosine_lr(step, total, ck.optim.lr_base, opt.lr_min);
      try {
        adamw_step(params, ck.optim, lr);
      } catch (const NumericError& e) {
        save("diverged");
        throw DivergenceError(fmt::format("step {}: {}", step, e.what()));
      }
      params.zero_grad();
      ++step;
      ck.state.step = step;
      res.losses.push_back(lv);
      epoch_loss += lv;
      ++epoch_steps;
      if (step % 10 == 0 || step == total || step == 1) {
        log(fmt::format("step {}/{} epoch {} loss {:.6f} lr {:.3e}", step, total, epoch + 1, lv, lr));
      }
      if (req.stop_after > 0 && step >= req.stop_after && step < total) {
        ck.state.epoch = step / spe;
        save("last");
        res.total_steps = step;
        snapshot();
        return res;
      }
    }
    if (step % spe == 0 || step == total) {
      ck.state.epoch = (step + spe - 1) / spe;
      const double mean_loss = epoch_steps ? epoch_loss / static_cast<double>(epoch_steps) : 0.0;
      std::string val_text = "-";
      double score = -mean_loss;
      if (req.val_set) {
        ConfusionMatrix cm(cfg.model.num_classes);
        try {
          cm = evaluate(net, *req.val_set, make_eval_setup(cfg));
        } catch (const NumericError& e) {
          save("diverged");
          throw DivergenceError(fmt::format("validation after step {}: {}", step, e.what()));
        }
        const auto m = compute_metrics(cm, metric_exclusions(cfg.data.dataset, cfg.model.num_classes));
        score = m.miou.value_or(0.0);
        val_text = fmt::format("{:.6f}", score);
      }
      const double lr_now = cosine_lr(step, total, ck.optim.lr_base, opt.lr_min);
      log(fmt::format("epoch {} done: mean loss {:.6f} val mIoU {}", ck.state.epoch, mean_loss, val_text));
      if (metrics_log.is_open()) {
        metrics_log << fmt::format("{}\t{}\t{:.6f}\t{:.6e}\t{}\n", ck.state.epoch, step, mean_loss, lr_now, val_text);
        metrics_log.flush();
      }
      const bool improved = score > ck.state.best_score;
      if (improved) ck.state.best_score = score;
      save("last");
      if (improved) save("best");
      epoch_loss = 0;
      epoch_steps = 0;
    }
  }
  res.total_steps = step;
  res.finished = true;
  snapshot();
  return res;
}

}  // namespace remotenet
