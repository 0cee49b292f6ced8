#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "remotenet/autograd.hpp"
#include "remotenet/config.hpp"

namespace remotenet {

enum class ParamKind { weight, bias, norm_scale, norm_shift, running_mean, running_var, pos_table };

std::string to_string(ParamKind k);
ParamKind parse_param_kind(std::string_view s);

/// Buffers (batch-norm running statistics) are stored but not trained.
inline bool is_trainable(ParamKind k) { return k != ParamKind::running_mean && k != ParamKind::running_var; }

struct ParamSpec {
  std::string name;
  Shape shape;
  ParamKind kind;
};

/// Ordered list of parameter declarations; order is the checkpoint order.
class ParamLayout {
 public:
  void add(std::string name, Shape shape, ParamKind kind);
  const std::vector<ParamSpec>& specs() const { return specs_; }
  int64_t trainable_count() const;

 private:
  std::vector<ParamSpec> specs_;
  std::map<std::string, size_t, std::less<>> index_;
};

/// Named, shaped parameter map with stable iteration order. Copies are deep.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    ParamKind kind;
    Var<T> var;
    bool requires_grad;
  };

  ParamStore() = default;
  ParamStore(const ParamStore& other);
  ParamStore& operator=(const ParamStore& other);
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  void add(std::string name, ParamKind kind, Tensor<T> value);

  bool contains(std::string_view name) const { return index_.find(name) != index_.end(); }
  /// Aliasing handle to the named entry; throws ShapeError when absent.
  Var<T> at(std::string_view name) const;
  const Entry& entry(std::string_view name) const;

  const std::vector<Entry>& entries() const { return entries_; }
  size_t size() const { return entries_.size(); }
  int64_t trainable_count() const;

  void zero_grad();

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& e : entries_) out.add(e.name, e.kind, e.var.value().template cast<U>());
    return out;
  }

  /// Same names, kinds, shapes and bit-identical values.
  bool identical(const ParamStore& other) const;

 private:
  std::vector<Entry> entries_;
  std::map<std::string, size_t, std::less<>> index_;
};

/// Deterministic initialization for every declaration in `layout`:
/// weights and position tables ~ N(0, 0.02^2) truncated at +-2 std, biases 0,
/// norm scale 1 and shift 0, running mean 0 and variance 1. Each entry draws
/// from its own stream seeded by (seed, name), so variants that share a name
/// share its initial value.
template <typename T>
ParamStore<T> init_params(const ParamLayout& layout, unsigned long long seed);

/// Validates cfg and initializes the network layout it implies.
template <typename T>
ParamStore<T> init_params(const ModelConfig& cfg, unsigned long long seed);

/// Throws ShapeError naming the first entry whose name, order or shape differs.
template <typename T>
void check_layout(const ParamStore<T>& store, const ParamLayout& layout);

}  // namespace remotenet
