#pragma once

#include "branchnet/common.hpp"

#include <string>
#include <utility>
#include <vector>

namespace branchnet {

enum class LayerKind { Dense, Conv2d, MaxPool2x2, BatchNorm, ReLU, SigmoidHead };

// Conv2d geometry is fixed at kernel 3, stride 1, pad 1.
struct LayerSpec {
  LayerKind kind = LayerKind::ReLU;
  int in_width = 0;    // Dense, SigmoidHead
  int out_width = 0;   // Dense; SigmoidHead: number of task heads
  int in_channels = 0;
  int out_channels = 0;  // Conv2d
  int channels = 0;      // BatchNorm

  static LayerSpec dense(int in, int out);
  static LayerSpec conv2d(int in_ch, int out_ch);
  static LayerSpec max_pool();
  static LayerSpec batch_norm(int channels);
  static LayerSpec relu();
  static LayerSpec sigmoid_head(int in, int tasks);

  bool has_params() const;
  std::string describe() const;
  bool operator==(const LayerSpec&) const = default;
};

struct TensorShape {
  int channels = 0;
  int height = 1;
  int width = 1;
  int features() const { return channels * height * width; }
  bool operator==(const TensorShape&) const = default;
};

// A minibatch of activations: one row per sample, features laid out
// (channel, y, x) row-major. Flat data uses height == width == 1.
struct Tensor {
  Mat data;
  TensorShape shape;
  int batch() const { return static_cast<int>(data.rows()); }
};

Tensor make_tensor(Mat data, TensorShape shape);

struct LayerParams {
  Mat weight;  // Dense: out x in; Conv2d: out_ch x (in_ch*9), one vectorized
               // 3x3 kernel per row; SigmoidHead: tasks x in
  Vec bias;
  Vec gamma, beta;                // BatchNorm scale/shift
  Vec running_mean, running_var;  // BatchNorm inference statistics

  // Momentum buffers for sgd_step; cloned with the block, never serialized.
  Mat vel_weight;
  Vec vel_bias, vel_gamma, vel_beta;

  long param_count() const;
};

struct LayerGrads {
  Mat weight;
  Vec bias, gamma, beta;
};

enum class Mode { Train, Eval };

struct LayerCache {
  LayerKind kind = LayerKind::ReLU;
  Mode mode = Mode::Train;
  bool consumed = false;
  TensorShape in_shape, out_shape;
  int batch = 0;
  Mat input;                     // Dense, SigmoidHead, BatchNorm
  Mat cols;                      // Conv2d im2col, (N*H*W) x (in_ch*9)
  Mat xhat;                      // BatchNorm normalized activations
  Vec inv_std;                   // BatchNorm per-channel 1/sqrt(var+eps)
  Mat relu_mask;                 // 1 where the input was positive
  std::vector<int> pool_argmax;  // flat input feature index per (n, out idx)
  Mat scores;                    // SigmoidHead outputs
};

// Fresh parameter block: zero weights, identity-like BatchNorm state.
LayerParams init_params(const LayerSpec& spec);

// He-style fan-in initialization for weight-bearing layers.
void he_init(const LayerSpec& spec, LayerParams& params, Rng& rng);

TensorShape output_shape(const LayerSpec& spec, const TensorShape& in);

// Forward pass. In train mode BatchNorm consumes batch statistics and updates
// the running ones (EMA decay 0.9); eval mode reads the running statistics
// and leaves params untouched. A cache is filled only when requested.
Tensor layer_forward(const LayerSpec& spec, LayerParams& params,
                     const Tensor& input, Mode mode,
                     LayerCache* cache = nullptr);

// Exact reverse-mode gradients of layer_forward. Consumes the cache: reuse is
// a contract violation, as is a cache captured in eval mode.
std::pair<Tensor, LayerGrads> layer_backward(const LayerSpec& spec,
                                             const LayerParams& params,
                                             LayerCache& cache,
                                             const Tensor& grad_output);

struct BceResult {
  Real loss;
  Mat grad_scores;  // zero at masked-out entries
};

// Mean binary cross-entropy over the masked entries of an N x T score matrix.
// Scores are clamped to [1e-12, 1-1e-12] before the logs.
BceResult multi_task_bce(const Mat& scores, const Mat& labels, const Mat& mask);

// Classical momentum update: v <- momentum*v + g; p <- p - lr*v. The label
// names the layer in non-finite-gradient diagnostics.
void sgd_step(LayerParams& params, const LayerGrads& grads, Real lr,
              Real momentum, const std::string& label);

}  // namespace branchnet
