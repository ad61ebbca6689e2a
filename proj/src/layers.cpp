#include "branchnet/layers.hpp"

#include <algorithm>
#include <cmath>

namespace branchnet {

namespace {

constexpr Real kBnEps = 1e-8;
constexpr Real kBnMomentum = 0.9;   // running = 0.9*running + 0.1*batch
constexpr Real kScoreClamp = 1e-12;

void check_input(const LayerSpec& spec, const Tensor& input) {
  require(input.data.cols() == input.shape.features(),
          "layer_forward: tensor data does not match its shape");
  switch (spec.kind) {
    case LayerKind::Dense:
      require(input.shape.features() == spec.in_width,
              "dense: expected " + std::to_string(spec.in_width) +
                  " input features, got " +
                  std::to_string(input.shape.features()));
      break;
    case LayerKind::SigmoidHead:
      require(input.shape.features() == spec.in_width,
              "sigmoid_head: expected " + std::to_string(spec.in_width) +
                  " input features, got " +
                  std::to_string(input.shape.features()));
      break;
    case LayerKind::Conv2d:
      require(input.shape.channels == spec.in_channels,
              "conv2d: expected " + std::to_string(spec.in_channels) +
                  " input channels, got " +
                  std::to_string(input.shape.channels));
      break;
    case LayerKind::MaxPool2x2:
      require(input.shape.height % 2 == 0 && input.shape.width % 2 == 0,
              "max_pool: spatial dimensions must be even");
      break;
    case LayerKind::BatchNorm:
      require(input.shape.channels == spec.channels,
              "batch_norm: expected " + std::to_string(spec.channels) +
                  " channels, got " + std::to_string(input.shape.channels));
      break;
    case LayerKind::ReLU:
      break;
  }
}

}  // namespace

LayerSpec LayerSpec::dense(int in, int out) {
  require(in >= 1 && out >= 1, "dense: widths must be at least 1");
  LayerSpec s;
  s.kind = LayerKind::Dense;
  s.in_width = in;
  s.out_width = out;
  return s;
}

LayerSpec LayerSpec::conv2d(int in_ch, int out_ch) {
  require(in_ch >= 1 && out_ch >= 1, "conv2d: channel counts must be at least 1");
  LayerSpec s;
  s.kind = LayerKind::Conv2d;
  s.in_channels = in_ch;
  s.out_channels = out_ch;
  return s;
}

LayerSpec LayerSpec::max_pool() {
  LayerSpec s;
  s.kind = LayerKind::MaxPool2x2;
  return s;
}

LayerSpec LayerSpec::batch_norm(int channels) {
  require(channels >= 1, "batch_norm: channels must be at least 1");
  LayerSpec s;
  s.kind = LayerKind::BatchNorm;
  s.channels = channels;
  return s;
}

LayerSpec LayerSpec::relu() {
  LayerSpec s;
  s.kind = LayerKind::ReLU;
  return s;
}

LayerSpec LayerSpec::sigmoid_head(int in, int tasks) {
  require(in >= 1 && tasks >= 1, "sigmoid_head: widths must be at least 1");
  LayerSpec s;
  s.kind = LayerKind::SigmoidHead;
  s.in_width = in;
  s.out_width = tasks;
  return s;
}

bool LayerSpec::has_params() const {
  return kind == LayerKind::Dense || kind == LayerKind::Conv2d ||
         kind == LayerKind::BatchNorm || kind == LayerKind::SigmoidHead;
}

std::string LayerSpec::describe() const {
  switch (kind) {
    case LayerKind::Dense:
      return "dense " + std::to_string(in_width) + "->" +
             std::to_string(out_width);
    case LayerKind::Conv2d:
      return "conv2d " + std::to_string(in_channels) + "->" +
             std::to_string(out_channels);
    case LayerKind::MaxPool2x2:
      return "max_pool";
    case LayerKind::BatchNorm:
      return "batch_norm " + std::to_string(channels);
    case LayerKind::ReLU:
      return "relu";
    case LayerKind::SigmoidHead:
      return "sigmoid_head " + std::to_string(in_width) + "->" +
             std::to_string(out_width);
  }
  return "?";
}

Tensor make_tensor(Mat data, TensorShape shape) {
  require(data.cols() == shape.features(),
          "make_tensor: data columns do not match the shape");
  return Tensor{std::move(data), shape};
}

long LayerParams::param_count() const {
  return static_cast<long>(weight.size()) + bias.size() + gamma.size() +
         beta.size();
}

LayerParams init_params(const LayerSpec& spec) {
  LayerParams p;
  switch (spec.kind) {
    case LayerKind::Dense:
    case LayerKind::SigmoidHead:
      p.weight = Mat::Zero(spec.out_width, spec.in_width);
      p.bias = Vec::Zero(spec.out_width);
      break;
    case LayerKind::Conv2d:
      p.weight = Mat::Zero(spec.out_channels, spec.in_channels * 9);
      p.bias = Vec::Zero(spec.out_channels);
      break;
    case LayerKind::BatchNorm:
      p.gamma = Vec::Ones(spec.channels);
      p.beta = Vec::Zero(spec.channels);
      p.running_mean = Vec::Zero(spec.channels);
      p.running_var = Vec::Ones(spec.channels);
      break;
    case LayerKind::MaxPool2x2:
    case LayerKind::ReLU:
      break;
  }
  return p;
}

void he_init(const LayerSpec& spec, LayerParams& params, Rng& rng) {
  if (params.weight.size() == 0) return;
  const int fan_in = static_cast<int>(params.weight.cols());
  const Real stddev = std::sqrt(2.0 / fan_in);
  for (int i = 0; i < params.weight.rows(); ++i)
    for (int j = 0; j < params.weight.cols(); ++j)
      params.weight(i, j) = stddev * normal_unit(rng);
  params.bias.setZero();
}

TensorShape output_shape(const LayerSpec& spec, const TensorShape& in) {
  switch (spec.kind) {
    case LayerKind::Dense:
    case LayerKind::SigmoidHead:
      return {spec.out_width, 1, 1};
    case LayerKind::Conv2d:
      return {spec.out_channels, in.height, in.width};
    case LayerKind::MaxPool2x2:
      return {in.channels, in.height / 2, in.width / 2};
    case LayerKind::BatchNorm:
    case LayerKind::ReLU:
      return in;
  }
  return in;
}

namespace {

// im2col for 3x3/stride 1/pad 1: row ((n*H)+y)*W+x holds the patch at (y, x)
// of sample n, columns ordered (channel, ky, kx).
Mat im2col(const Tensor& input) {
  const int n = input.batch();
  const int c = input.shape.channels;
  const int h = input.shape.height;
  const int w = input.shape.width;
  Mat cols = Mat::Zero(static_cast<long>(n) * h * w, c * 9);
  for (int s = 0; s < n; ++s) {
    const auto row = input.data.row(s);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const long r = (static_cast<long>(s) * h + y) * w + x;
        for (int ch = 0; ch < c; ++ch) {
          for (int ky = 0; ky < 3; ++ky) {
            const int iy = y + ky - 1;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < 3; ++kx) {
              const int ix = x + kx - 1;
              if (ix < 0 || ix >= w) continue;
              cols(r, ch * 9 + ky * 3 + kx) = row((ch * h + iy) * w + ix);
            }
          }
        }
      }
    }
  }
  return cols;
}

// Adjoint of im2col: scatter-add patch gradients back onto the input grid.
Mat col2im(const Mat& grad_cols, int n, int c, int h, int w) {
  Mat grad = Mat::Zero(n, c * h * w);
  for (int s = 0; s < n; ++s) {
    auto out = grad.row(s);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const long r = (static_cast<long>(s) * h + y) * w + x;
        for (int ch = 0; ch < c; ++ch) {
          for (int ky = 0; ky < 3; ++ky) {
            const int iy = y + ky - 1;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < 3; ++kx) {
              const int ix = x + kx - 1;
              if (ix < 0 || ix >= w) continue;
              out((ch * h + iy) * w + ix) += grad_cols(r, ch * 9 + ky * 3 + kx);
            }
          }
        }
      }
    }
  }
  return grad;
}

}  // namespace

Tensor layer_forward(const LayerSpec& spec, LayerParams& params,
                     const Tensor& input, Mode mode, LayerCache* cache) {
  check_input(spec, input);
  const TensorShape out_shape = output_shape(spec, input.shape);
  const int n = input.batch();
  require(n >= 1, "layer_forward: empty batch");
  if (cache) {
    *cache = LayerCache{};
    cache->kind = spec.kind;
    cache->mode = mode;
    cache->in_shape = input.shape;
    cache->out_shape = out_shape;
    cache->batch = n;
  }

  Tensor out;
  out.shape = out_shape;

  switch (spec.kind) {
    case LayerKind::Dense: {
      out.data = input.data * params.weight.transpose();
      out.data.rowwise() += params.bias.transpose();
      if (cache) cache->input = input.data;
      break;
    }
    case LayerKind::SigmoidHead: {
      Mat logits = input.data * params.weight.transpose();
      logits.rowwise() += params.bias.transpose();
      out.data = (1.0 + (-logits.array()).exp()).inverse().matrix();
      if (cache) {
        cache->input = input.data;
        cache->scores = out.data;
      }
      break;
    }
    case LayerKind::Conv2d: {
      const int h = input.shape.height, w = input.shape.width;
      const int oc = spec.out_channels;
      Mat cols = im2col(input);
      Mat prod = cols * params.weight.transpose();  // (N*H*W) x oc
      prod.rowwise() += params.bias.transpose();
      out.data.resize(n, oc * h * w);
      for (int s = 0; s < n; ++s) {
        Eigen::Map<Mat> view(out.data.row(s).data(), oc, h * w);
        view = prod.middleRows(static_cast<long>(s) * h * w, h * w).transpose();
      }
      if (cache) cache->cols = std::move(cols);
      break;
    }
    case LayerKind::MaxPool2x2: {
      const int c = input.shape.channels;
      const int h = input.shape.height, w = input.shape.width;
      const int h2 = h / 2, w2 = w / 2;
      out.data.resize(n, c * h2 * w2);
      if (cache) cache->pool_argmax.assign(static_cast<size_t>(n) * c * h2 * w2, 0);
      for (int s = 0; s < n; ++s) {
        const auto row = input.data.row(s);
        for (int ch = 0; ch < c; ++ch) {
          for (int y = 0; y < h2; ++y) {
            for (int x = 0; x < w2; ++x) {
              int best_idx = (ch * h + 2 * y) * w + 2 * x;
              Real best = row(best_idx);
              for (int dy = 0; dy < 2; ++dy) {
                for (int dx = 0; dx < 2; ++dx) {
                  const int idx = (ch * h + 2 * y + dy) * w + 2 * x + dx;
                  if (row(idx) > best) {
                    best = row(idx);
                    best_idx = idx;
                  }
                }
              }
              const int o = (ch * h2 + y) * w2 + x;
              out.data(s, o) = best;
              if (cache)
                cache->pool_argmax[static_cast<size_t>(s) * c * h2 * w2 + o] =
                    best_idx;
            }
          }
        }
      }
      break;
    }
    case LayerKind::BatchNorm: {
      const int c = spec.channels;
      const int per = input.shape.height * input.shape.width;
      out.data.resize(n, input.data.cols());
      Mat xhat(n, input.data.cols());
      Vec inv_std(c);
      for (int ch = 0; ch < c; ++ch) {
        auto block = input.data.middleCols(ch * per, per);
        Real mean, var;
        if (mode == Mode::Train) {
          mean = block.mean();
          var = (block.array() - mean).square().mean();
          params.running_mean(ch) =
              kBnMomentum * params.running_mean(ch) + (1 - kBnMomentum) * mean;
          params.running_var(ch) =
              kBnMomentum * params.running_var(ch) + (1 - kBnMomentum) * var;
        } else {
          mean = params.running_mean(ch);
          var = params.running_var(ch);
        }
        const Real is = 1.0 / std::sqrt(var + kBnEps);
        inv_std(ch) = is;
        xhat.middleCols(ch * per, per) = ((block.array() - mean) * is).matrix();
        out.data.middleCols(ch * per, per) =
            (params.gamma(ch) * xhat.middleCols(ch * per, per).array() +
             params.beta(ch))
                .matrix();
      }
      if (cache) {
        cache->xhat = std::move(xhat);
        cache->inv_std = std::move(inv_std);
      }
      break;
    }
    case LayerKind::ReLU: {
      out.data = input.data.cwiseMax(0.0);
      if (cache)
        cache->relu_mask = (input.data.array() > 0.0).cast<Real>().matrix();
      break;
    }
  }
  return out;
}

std::pair<Tensor, LayerGrads> layer_backward(const LayerSpec& spec,
                                             const LayerParams& params,
                                             LayerCache& cache,
                                             const Tensor& grad_output) {
  require(!cache.consumed, "layer_backward: cache already consumed");
  require(cache.mode == Mode::Train,
          "layer_backward: cache was captured in eval mode");
  require(cache.kind == spec.kind, "layer_backward: cache/spec kind mismatch");
  require(grad_output.shape == cache.out_shape && grad_output.batch() == cache.batch,
          "layer_backward: grad_output shape mismatch");
  cache.consumed = true;

  const int n = cache.batch;
  Tensor grad_in;
  grad_in.shape = cache.in_shape;
  LayerGrads grads;

  switch (spec.kind) {
    case LayerKind::Dense: {
      grads.weight = grad_output.data.transpose() * cache.input;
      grads.bias = grad_output.data.colwise().sum().transpose();
      grad_in.data = grad_output.data * params.weight;
      break;
    }
    case LayerKind::SigmoidHead: {
      Mat glogits = grad_output.data.array() * cache.scores.array() *
                    (1.0 - cache.scores.array());
      grads.weight = glogits.transpose() * cache.input;
      grads.bias = glogits.colwise().sum().transpose();
      grad_in.data = glogits * params.weight;
      break;
    }
    case LayerKind::Conv2d: {
      const int h = cache.in_shape.height, w = cache.in_shape.width;
      const int oc = spec.out_channels, ic = spec.in_channels;
      Mat gm(static_cast<long>(n) * h * w, oc);
      for (int s = 0; s < n; ++s) {
        Eigen::Map<const Mat> view(grad_output.data.row(s).data(), oc, h * w);
        gm.middleRows(static_cast<long>(s) * h * w, h * w) = view.transpose();
      }
      grads.weight = gm.transpose() * cache.cols;
      grads.bias = gm.colwise().sum().transpose();
      Mat grad_cols = gm * params.weight;
      grad_in.data = col2im(grad_cols, n, ic, h, w);
      break;
    }
    case LayerKind::MaxPool2x2: {
      grad_in.data = Mat::Zero(n, cache.in_shape.features());
      const int per_sample = cache.out_shape.features();
      for (int s = 0; s < n; ++s)
        for (int o = 0; o < per_sample; ++o)
          grad_in.data(s,
                       cache.pool_argmax[static_cast<size_t>(s) * per_sample + o]) +=
              grad_output.data(s, o);
      break;
    }
    case LayerKind::BatchNorm: {
      const int c = spec.channels;
      const int per = cache.in_shape.height * cache.in_shape.width;
      grads.gamma = Vec(c);
      grads.beta = Vec(c);
      grad_in.data.resize(n, cache.in_shape.features());
      const Real m = static_cast<Real>(n) * per;
      for (int ch = 0; ch < c; ++ch) {
        auto gout = grad_output.data.middleCols(ch * per, per);
        auto xh = cache.xhat.middleCols(ch * per, per);
        grads.gamma(ch) = (gout.array() * xh.array()).sum();
        grads.beta(ch) = gout.sum();
        const Real g = params.gamma(ch);
        const Real sum_d = gout.sum() * g;
        const Real sum_dx = (gout.array() * xh.array()).sum() * g;
        grad_in.data.middleCols(ch * per, per) =
            ((cache.inv_std(ch) / m) *
             (m * g * gout.array() - sum_d - xh.array() * sum_dx))
                .matrix();
      }
      break;
    }
    case LayerKind::ReLU: {
      grad_in.data = grad_output.data.cwiseProduct(cache.relu_mask);
      break;
    }
  }
  return {std::move(grad_in), std::move(grads)};
}

BceResult multi_task_bce(const Mat& scores, const Mat& labels, const Mat& mask) {
  require(scores.rows() == labels.rows() && scores.cols() == labels.cols(),
          "multi_task_bce: scores/labels shape mismatch");
  require(mask.rows() == scores.rows() && mask.cols() == scores.cols(),
          "multi_task_bce: mask shape mismatch");
  const Real count = mask.sum();
  require(count > 0.0, "multi_task_bce: empty batch (mask selects nothing)");

  Mat s = scores.cwiseMax(kScoreClamp).cwiseMin(1.0 - kScoreClamp);
  Mat per = -(labels.array() * s.array().log() +
              (1.0 - labels.array()) * (1.0 - s.array()).log());
  const Real loss = (per.array() * mask.array()).sum() / count;
  Mat grad = ((s.array() - labels.array()) /
              (s.array() * (1.0 - s.array())) * mask.array() / count)
                 .matrix();
  return {loss, std::move(grad)};
}

namespace {

void momentum_update(Mat& vel, Mat& p, const Mat& g, Real lr, Real momentum,
                     const std::string& label) {
  if (g.size() == 0) return;
  require(g.allFinite(), "sgd_step: non-finite gradient in " + label);
  if (vel.size() == 0) vel = Mat::Zero(g.rows(), g.cols());
  vel = momentum * vel + g;
  p -= lr * vel;
}

void momentum_update(Vec& vel, Vec& p, const Vec& g, Real lr, Real momentum,
                     const std::string& label) {
  if (g.size() == 0) return;
  require(g.allFinite(), "sgd_step: non-finite gradient in " + label);
  if (vel.size() == 0) vel = Vec::Zero(g.size());
  vel = momentum * vel + g;
  p -= lr * vel;
}

}  // namespace

void sgd_step(LayerParams& params, const LayerGrads& grads, Real lr,
              Real momentum, const std::string& label) {
  require(lr > 0.0, "sgd_step: lr must be positive");
  require(momentum >= 0.0 && momentum < 1.0,
          "sgd_step: momentum must lie in [0, 1)");
  momentum_update(params.vel_weight, params.weight, grads.weight, lr, momentum,
                  label);
  momentum_update(params.vel_bias, params.bias, grads.bias, lr, momentum, label);
  momentum_update(params.vel_gamma, params.gamma, grads.gamma, lr, momentum,
                  label);
  momentum_update(params.vel_beta, params.beta, grads.beta, lr, momentum, label);
}

}  // namespace branchnet
