#pragma once

#include "spiralscope/gradcheck.hpp"
#include "spiralscope/ops.hpp"
#include "spiralscope/seeding.hpp"

#include <Eigen/Core>

#include <cmath>
#include <complex>
#include <string>
#include <vector>

namespace spiralscope::testing {

inline Tensor<float> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<float>::Array v(shape_numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = static_cast<float>(uniform(rng, lo, hi));
  return Tensor<float>(std::move(shape), std::move(v));
}

/// Direct-summation cross-correlation, used as the conv2d oracle.
inline Eigen::ArrayXd naive_conv2d(const Tensor<float>& x, const Tensor<float>& k, const Tensor<float>& b,
                                   Index stride, Index pad) {
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index f = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const Index oh = (h + 2 * pad - kh) / stride + 1, ow = (w + 2 * pad - kw) / stride + 1;
  Eigen::ArrayXd out(n * f * oh * ow);
  Index o = 0;
  for (Index in = 0; in < n; ++in)
    for (Index fi = 0; fi < f; ++fi)
      for (Index y = 0; y < oh; ++y)
        for (Index xx = 0; xx < ow; ++xx) {
          double acc = b[fi];
          for (Index ci = 0; ci < c; ++ci)
            for (Index i = 0; i < kh; ++i)
              for (Index j = 0; j < kw; ++j) {
                const Index sy = y * stride + i - pad, sx = xx * stride + j - pad;
                if (sy < 0 || sx < 0 || sy >= h || sx >= w) continue;
                acc += double(x[((in * c + ci) * h + sy) * w + sx]) * k[((fi * c + ci) * kh + i) * kw + j];
              }
          out[o++] = acc;
        }
  return out;
}

/// Frequency (cycles per revolution) with the largest naive-DFT magnitude of
/// `signal`, sampled uniformly over `turns` revolutions. Frequencies are
/// scanned on a grid of `step` cycles per revolution from `lo` to `hi`.
inline double dominant_frequency(const Eigen::VectorXd& signal, double turns, double lo, double hi, double step) {
  const Index n = signal.size();
  const double dtheta = 2.0 * 3.141592653589793 * turns / static_cast<double>(n - 1);
  double best_f = lo, best_mag = -1.0;
  for (double f = lo; f <= hi + 1e-12; f += step) {
    const std::complex<double> rot = std::polar(1.0, -f * dtheta);
    std::complex<double> phasor = 1.0, acc = 0.0;
    for (Index i = 0; i < n; ++i) {
      acc += signal[i] * phasor;
      phasor *= rot;
    }
    if (std::abs(acc) > best_mag) {
      best_mag = std::abs(acc);
      best_f = f;
    }
  }
  return best_f;
}

/// Hand-counted confusion matrix.
inline Eigen::MatrixXi count_confusion(const std::vector<int>& preds, const std::vector<int>& labels, int classes) {
  Eigen::MatrixXi m = Eigen::MatrixXi::Zero(classes, classes);
  for (std::size_t i = 0; i < preds.size(); ++i) ++m(labels[i], preds[i]);
  return m;
}

// ---- randomly composed graphs ----

enum class OpKind { Conv3, Conv1, ConvStride2, Relu, Pool, GlobalPool, AddParam, MulParam, Scale, Dense };

struct GraphOp {
  OpKind kind;
  int param = -1;  // index into RandomGraph::params, -1 when parameter-free
  double factor = 1.0;
};

/// Up to six primitives applied to an [N x C x H x W] input and reduced to a
/// scalar by sum, sum of squares, or softmax cross-entropy.
struct RandomGraph {
  Shape input_shape;
  std::vector<GraphOp> ops;
  std::vector<Tensor<float>> params;
  enum class Loss { Sum, SumSquares, CrossEntropy } loss = Loss::Sum;
  std::vector<int> labels;
  int primitives = 0;

  std::string describe() const {
    static const char* names[] = {"conv3", "conv1", "conv_s2", "relu", "pool", "gap", "add", "mul", "scale", "dense"};
    std::string s;
    for (const GraphOp& op : ops) s += std::string(names[static_cast<int>(op.kind)]) + " ";
    s += loss == Loss::Sum ? "sum" : loss == Loss::SumSquares ? "sumsq" : "xent";
    return s;
  }

  /// Evaluates with leaf `slot` (-1 for the input, else a parameter index)
  /// replaced by `leaf`; every other leaf is cast from its stored value.
  template <typename S>
  Tensor<S> evaluate(const Tensor<float>& input, int slot, const Tensor<S>& leaf) const {
    auto pick = [&](int i, const Tensor<float>& stored) -> Tensor<S> {
      if (i == slot) return leaf;
      return stored.template cast<S>();
    };
    Tensor<S> h = pick(-1, input);
    for (const GraphOp& op : ops) {
      switch (op.kind) {
        case OpKind::Conv3:
          h = conv2d(h, pick(op.param, params[op.param]), pick(op.param + 1, params[op.param + 1]), 1, 1);
          break;
        case OpKind::Conv1:
          h = conv2d(h, pick(op.param, params[op.param]), pick(op.param + 1, params[op.param + 1]), 1, 0);
          break;
        case OpKind::ConvStride2:
          h = conv2d(h, pick(op.param, params[op.param]), pick(op.param + 1, params[op.param + 1]), 2, 0);
          break;
        case OpKind::Relu:
          h = relu(h);
          break;
        case OpKind::Pool:
          h = avg_pool2d(h, 2, 2);
          break;
        case OpKind::GlobalPool:
          h = global_avg_pool(h);
          break;
        case OpKind::AddParam:
          h = add(h, pick(op.param, params[op.param]));
          break;
        case OpKind::MulParam:
          h = mul(h, pick(op.param, params[op.param]));
          break;
        case OpKind::Scale:
          h = scale(h, static_cast<S>(op.factor));
          break;
        case OpKind::Dense:
          h = matmul(h, pick(op.param, params[op.param]));
          break;
      }
    }
    switch (loss) {
      case Loss::Sum:
        return sum(h);
      case Loss::SumSquares:
        return sum(mul(h, h));
      case Loss::CrossEntropy:
        return softmax_cross_entropy(h, labels);
    }
    return h;
  }
};

inline RandomGraph make_random_graph(std::uint64_t seed) {
  Rng rng = make_rng({seed, 0x67726170});
  auto pick = [&](int n) { return static_cast<int>(rng() % static_cast<std::uint64_t>(n)); };
  RandomGraph g;
  const Index batch = 1 + pick(2), channels = 1 + pick(3), side = 4 + 2 * pick(2);
  g.input_shape = {batch, channels, side, side};
  Shape cur = g.input_shape;
  const int budget = 2 + pick(5);  // primitives including the loss

  auto add_param = [&](Shape shape, double lo = -1.0, double hi = 1.0) {
    g.params.push_back(random_tensor(std::move(shape), rng, lo, hi));
    return static_cast<int>(g.params.size()) - 1;
  };

  while (g.primitives < budget - 1) {
    const bool spatial = cur.size() == 4;
    const int remaining = budget - 1 - g.primitives;
    OpKind kind;
    if (spatial) {
      // Keep one primitive for the global pool when the loss needs a matrix.
      static const OpKind choices[] = {OpKind::Conv3, OpKind::Conv1, OpKind::ConvStride2, OpKind::Relu,
                                       OpKind::Pool,  OpKind::AddParam, OpKind::MulParam, OpKind::Scale,
                                       OpKind::GlobalPool};
      kind = remaining == 1 ? OpKind::GlobalPool : choices[pick(9)];
      if ((kind == OpKind::Pool || kind == OpKind::ConvStride2) && (cur[2] < 2 || cur[2] % 2)) kind = OpKind::Relu;
    } else {
      static const OpKind choices[] = {OpKind::Dense, OpKind::Relu, OpKind::AddParam, OpKind::MulParam, OpKind::Scale};
      kind = choices[pick(5)];
    }
    GraphOp op{kind};
    switch (kind) {
      case OpKind::Conv3:
      case OpKind::Conv1:
      case OpKind::ConvStride2: {
        const Index k = kind == OpKind::Conv3 ? 3 : kind == OpKind::Conv1 ? 1 : 2;
        const Index f = 1 + pick(3);
        op.param = add_param({f, cur[1], k, k}, -0.8, 0.8);
        add_param({f}, -0.3, 0.3);
        cur = {cur[0], f, kind == OpKind::ConvStride2 ? cur[2] / 2 : cur[2], kind == OpKind::ConvStride2 ? cur[3] / 2 : cur[3]};
        break;
      }
      case OpKind::Pool:
        cur = {cur[0], cur[1], cur[2] / 2, cur[3] / 2};
        break;
      case OpKind::GlobalPool:
        cur = {cur[0], cur[1]};
        break;
      case OpKind::AddParam: {
        Shape s = cur;
        if (pick(2)) s[0] = 1;  // batch broadcast
        op.param = add_param(s);
        break;
      }
      case OpKind::MulParam: {
        Shape s = cur;
        if (pick(2)) s[0] = 1;
        op.param = add_param(s, 0.5, 1.5);
        break;
      }
      case OpKind::Scale:
        op.factor = uniform(rng, -2.0, 2.0);
        break;
      case OpKind::Dense: {
        const Index out = 2 + pick(3);
        op.param = add_param({cur[1], out}, -0.8, 0.8);
        cur = {cur[0], out};
        break;
      }
      case OpKind::Relu:
        break;
    }
    g.ops.push_back(op);
    ++g.primitives;
  }
  const int loss = pick(3);
  if (loss == 2 && cur.size() == 2 && cur[1] >= 2) {
    g.loss = RandomGraph::Loss::CrossEntropy;
    for (Index i = 0; i < cur[0]; ++i) g.labels.push_back(pick(static_cast<int>(cur[1])));
  } else {
    g.loss = loss == 1 ? RandomGraph::Loss::SumSquares : RandomGraph::Loss::Sum;
  }
  ++g.primitives;
  return g;
}

/// Worst finite-difference error over the input and every parameter leaf.
inline FiniteDiffReport check_graph(const RandomGraph& g, const Tensor<float>& input) {
  FiniteDiffOptions options;
  options.skip_nonsmooth = true;
  FiniteDiffReport worst;
  auto merge = [&](const FiniteDiffReport& r) {
    if (r.max_rel_error >= worst.max_rel_error) {
      worst.max_rel_error = r.max_rel_error;
      worst.worst_index = r.worst_index;
    }
    worst.checked += r.checked;
    worst.skipped_nonsmooth += r.skipped_nonsmooth;
  };
  const int leaves = static_cast<int>(g.params.size());
  for (int slot = -1; slot < leaves; ++slot) {
    const Tensor<float>& at = slot < 0 ? input : g.params[slot];
    merge(finite_diff_check([&](const auto& leaf) { return g.evaluate(input, slot, leaf); }, at, options));
  }
  return worst;
}

}  // namespace spiralscope::testing
