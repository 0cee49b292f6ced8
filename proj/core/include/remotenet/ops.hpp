#pragma once

#include <cstdint>
#include <vector>

#include "remotenet/autograd.hpp"
#include "remotenet/tensor.hpp"

// Differentiable tensor primitives. Every op records its own backward closure
// and is instantiated for float (training, inference) and double (gradient
// checks).

namespace remotenet {

/// Class-index maps: rank 2 [H, W] for one image, rank 3 [B, H, W] for a batch.
using LabelMap = Tensor<int32_t>;
inline constexpr int32_t kIgnoreIndex = 255;

namespace ops {

// Elementwise with numpy-style right-aligned broadcasting.
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T s);

/// Batched product of rank-3 operands [B, M, K] x [B, K, N]. A batch size of 1
/// on either side broadcasts.
template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b, bool trans_a = false, bool trans_b = false);

struct Conv2dOptions {
  int stride = 1;
  int pad = 0;
  int groups = 1;
};

/// x [N, Cin, H, W], w [Cout, Cin/groups, kh, kw], bias [Cout] or undefined.
template <typename T> Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, Conv2dOptions opts);

enum class PadMode { zero, reflect };

template <typename T>
Var<T> pad2d(const Var<T>& x, int top, int bottom, int left, int right, PadMode mode);
template <typename T> Var<T> crop2d(const Var<T>& x, int64_t top, int64_t left, int64_t height, int64_t width);

/// Half-pixel-centre bilinear resampling. A constant field maps to the same
/// constant bit-for-bit.
template <typename T> Var<T> resize_bilinear(const Var<T>& x, int64_t out_h, int64_t out_w);

/// Normalizes over axis 1; x is viewed as [dim0, dim1, rest...].
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps);

/// Per-channel normalization of [N, C, H, W]. In training mode batch
/// statistics are used and the running buffers are updated in place.
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Var<T>& running_mean,
                  Var<T>& running_var, bool training, T momentum, T eps);

template <typename T> Var<T> gelu(const Var<T>& x);
template <typename T> Var<T> sigmoid(const Var<T>& x);
template <typename T> Var<T> softmax_lastdim(const Var<T>& x);

/// Global average pooling [N, C, H, W] -> [N, C, 1, 1].
template <typename T> Var<T> mean_hw(const Var<T>& x);
template <typename T> Var<T> sum_all(const Var<T>& x);

template <typename T> Var<T> reshape(const Var<T>& x, Shape shape);
template <typename T> Var<T> permute(const Var<T>& x, const std::vector<int>& perm);
template <typename T> Var<T> concat_channels(const std::vector<Var<T>>& parts);

/// out[i, :] = table[index[i], :]
template <typename T> Var<T> gather_rows(const Var<T>& table, const std::vector<int64_t>& index);

/// Mean pixel cross-entropy over labels != kIgnoreIndex. Zero valid pixels
/// gives a loss of 0 with zero gradient.
template <typename T> Var<T> cross_entropy(const Var<T>& logits, const LabelMap& labels);

}  // namespace ops

// Test-only fault hooks used by negative-control checks.
namespace faults {

enum class Fault { none, softmax_backward, attention_scale };

void inject(Fault f);
Fault active();

/// Restores the previous fault on destruction.
class ScopedFault {
 public:
  explicit ScopedFault(Fault f) : previous_(active()) { inject(f); }
  ~ScopedFault() { inject(previous_); }
  ScopedFault(const ScopedFault&) = delete;
  ScopedFault& operator=(const ScopedFault&) = delete;

 private:
  Fault previous_;
};

}  // namespace faults

}  // namespace remotenet
