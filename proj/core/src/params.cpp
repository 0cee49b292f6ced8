#include "remotenet/params.hpp"

#include <random>

#include "remotenet/network.hpp"

namespace remotenet {

namespace {

const std::map<std::string, ParamKind, std::less<>> kKinds{
    {"weight", ParamKind::weight},           {"bias", ParamKind::bias},
    {"norm_scale", ParamKind::norm_scale},   {"norm_shift", ParamKind::norm_shift},
    {"running_mean", ParamKind::running_mean}, {"running_var", ParamKind::running_var},
    {"pos_table", ParamKind::pos_table}};

uint64_t fnv1a(std::string_view s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

constexpr double kInitStd = 0.02;

}  // namespace

std::string to_string(ParamKind k) {
  for (const auto& [name, kind] : kKinds) {
    if (kind == k) return name;
  }
  return "?";
}

ParamKind parse_param_kind(std::string_view s) {
  auto it = kKinds.find(s);
  if (it == kKinds.end()) throw CheckpointError("unknown parameter kind '" + std::string(s) + "'");
  return it->second;
}

void ParamLayout::add(std::string name, Shape shape, ParamKind kind) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  for (auto d : shape) {
    if (d < 1) throw ShapeError("parameter '" + name + "' has non-positive dim " + shape_str(shape));
  }
  index_.emplace(name, specs_.size());
  specs_.push_back({std::move(name), std::move(shape), kind});
}

int64_t ParamLayout::trainable_count() const {
  int64_t n = 0;
  for (const auto& s : specs_) {
    if (is_trainable(s.kind)) n += shape_numel(s.shape);
  }
  return n;
}

template <typename T>
ParamStore<T>::ParamStore(const ParamStore& other) {
  for (const auto& e : other.entries_) add(e.name, e.kind, e.var.value());
}

template <typename T>
ParamStore<T>& ParamStore<T>::operator=(const ParamStore& other) {
  if (this != &other) {
    ParamStore copy(other);
    *this = std::move(copy);
  }
  return *this;
}

template <typename T>
void ParamStore<T>::add(std::string name, ParamKind kind, Tensor<T> value) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  if (!value.all_finite()) throw NumericError("parameter '" + name + "' has non-finite values");
  const bool rg = is_trainable(kind);
  index_.emplace(name, entries_.size());
  entries_.push_back({std::move(name), kind, Var<T>(std::move(value), rg), rg});
}

template <typename T>
Var<T> ParamStore<T>::at(std::string_view name) const {
  return entry(name).var;
}

template <typename T>
const typename ParamStore<T>::Entry& ParamStore<T>::entry(std::string_view name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ShapeError("parameter '" + std::string(name) + "' not found");
  return entries_[it->second];
}

template <typename T>
int64_t ParamStore<T>::trainable_count() const {
  int64_t n = 0;
  for (const auto& e : entries_) {
    if (e.requires_grad) n += e.var.value().numel();
  }
  return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& e : entries_) e.var.zero_grad();
}

template <typename T>
bool ParamStore<T>::identical(const ParamStore& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (size_t i = 0; i < entries_.size(); ++i) {
    const auto& a = entries_[i];
    const auto& b = other.entries_[i];
    if (a.name != b.name || a.kind != b.kind || !(a.var.value() == b.var.value())) return false;
  }
  return true;
}

template <typename T>
ParamStore<T> init_params(const ParamLayout& layout, unsigned long long seed) {
  ParamStore<T> store;
  for (const auto& spec : layout.specs()) {
    const int64_t n = shape_numel(spec.shape);
    std::vector<T> values(static_cast<size_t>(n));
    switch (spec.kind) {
      case ParamKind::weight:
      case ParamKind::pos_table: {
        const uint64_t h = fnv1a(spec.name);
        std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32),
                          static_cast<uint32_t>(h), static_cast<uint32_t>(h >> 32)};
        std::mt19937_64 rng(seq);
        std::normal_distribution<double> normal(0.0, 1.0);
        for (auto& v : values) {
          double z;
          do {
            z = normal(rng);
          } while (std::abs(z) > 2.0);
          v = static_cast<T>(z * kInitStd);
        }
        break;
      }
      case ParamKind::norm_scale:
      case ParamKind::running_var:
        std::fill(values.begin(), values.end(), T(1));
        break;
      case ParamKind::bias:
      case ParamKind::norm_shift:
      case ParamKind::running_mean:
        break;
    }
    store.add(spec.name, spec.kind, Tensor<T>(spec.shape, std::move(values)));
  }
  return store;
}

template <typename T>
ParamStore<T> init_params(const ModelConfig& cfg, unsigned long long seed) {
  require_valid(cfg);
  return init_params<T>(declare_network(cfg), seed);
}

template <typename T>
void check_layout(const ParamStore<T>& store, const ParamLayout& layout) {
  const auto& specs = layout.specs();
  const auto& entries = store.entries();
  const size_t n = std::min(specs.size(), entries.size());
  for (size_t i = 0; i < n; ++i) {
    if (specs[i].name != entries[i].name) {
      throw ShapeError("parameter #" + std::to_string(i) + ": expected '" + specs[i].name + "', found '" +
                       entries[i].name + "'");
    }
    if (specs[i].shape != entries[i].var.shape()) {
      throw ShapeError("parameter '" + specs[i].name + "': expected shape " + shape_str(specs[i].shape) +
                       ", found " + shape_str(entries[i].var.shape()));
    }
  }
  if (specs.size() != entries.size()) {
    const std::string first = specs.size() > n ? specs[n].name : entries[n].name;
    throw ShapeError("parameter count differs (expected " + std::to_string(specs.size()) + ", found " +
                     std::to_string(entries.size()) + "); first unmatched entry '" + first + "'");
  }
}

template class ParamStore<float>;
template class ParamStore<double>;
template ParamStore<float> init_params<float>(const ParamLayout&, unsigned long long);
template ParamStore<double> init_params<double>(const ParamLayout&, unsigned long long);
template ParamStore<float> init_params<float>(const ModelConfig&, unsigned long long);
template ParamStore<double> init_params<double>(const ModelConfig&, unsigned long long);
template void check_layout<float>(const ParamStore<float>&, const ParamLayout&);
template void check_layout<double>(const ParamStore<double>&, const ParamLayout&);

}  // namespace remotenet
