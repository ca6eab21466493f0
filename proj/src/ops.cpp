#include "spiralscope/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

namespace spiralscope {
namespace {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

template <typename S>
Tape<S>* recording_tape(std::initializer_list<const Tensor<S>*> inputs) {
  Tape<S>* tape = Tape<S>::active();
  if (tape == nullptr) return nullptr;
  for (const Tensor<S>* t : inputs) {
    if (t->requires_grad()) return tape;
  }
  return nullptr;
}

enum class Broadcast { Same, Scalar, Batch };

template <typename S>
Broadcast classify(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() == b.shape()) return Broadcast::Same;
  if (b.numel() == 1) return Broadcast::Scalar;
  if (a.rank() >= 2 && b.rank() == a.rank() && b.dim(0) == 1 &&
      std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1)) {
    return Broadcast::Batch;
  }
  throw ShapeError(std::string(op) + ": cannot combine shapes " + shape_string(a.shape()) +
                   " and " + shape_string(b.shape()));
}

// Expands b to a's layout for the given broadcast mode.
template <typename S>
typename Tensor<S>::Array expand(const Tensor<S>& a, const Tensor<S>& b, Broadcast mode) {
  using Array = typename Tensor<S>::Array;
  switch (mode) {
    case Broadcast::Same:
      return b.values();
    case Broadcast::Scalar:
      return Array::Constant(a.numel(), b[0]);
    case Broadcast::Batch:
      return b.values().replicate(a.dim(0), 1);
  }
  return {};
}

// Reduces a gradient laid out like a back onto b's shape.
template <typename S>
void accumulate_reduced(typename Tensor<S>::Array& target, const typename Tensor<S>::Array& g,
                        Broadcast mode, Index inner) {
  switch (mode) {
    case Broadcast::Same:
      target += g;
      break;
    case Broadcast::Scalar:
      target[0] += g.sum();
      break;
    case Broadcast::Batch: {
      Eigen::Map<const RowMat<S>> rows(g.data(), g.size() / inner, inner);
      target += rows.colwise().sum().transpose().array();
      break;
    }
  }
}

/// Output columns [lo, hi) whose input column ox * stride - pad + kj lies
/// inside [0, width).
std::pair<Index, Index> valid_columns(Index kj, Index stride, Index pad, Index width, Index out_w) {
  const Index first = pad - kj;
  const Index lo = first <= 0 ? 0 : (first + stride - 1) / stride;
  const Index last = width - 1 + pad - kj;
  const Index hi = last < 0 ? 0 : std::min(out_w, last / stride + 1);
  return {std::min(lo, hi), hi};
}

template <typename S>
void im2col(const S* in, Index channels, Index height, Index width, Index kh, Index kw,
            Index stride, Index pad, Index out_h, Index out_w, S* cols, Index row_stride) {
  for (Index c = 0; c < channels; ++c) {
    for (Index ki = 0; ki < kh; ++ki) {
      for (Index kj = 0; kj < kw; ++kj) {
        S* dst = cols + ((c * kh + ki) * kw + kj) * row_stride;
        const auto [lo, hi] = valid_columns(kj, stride, pad, width, out_w);
        for (Index oy = 0; oy < out_h; ++oy) {
          const Index iy = oy * stride - pad + ki;
          S* row = dst + oy * out_w;
          if (iy < 0 || iy >= height) {
            std::fill(row, row + out_w, S(0));
            continue;
          }
          const S* src = in + (c * height + iy) * width;
          const Index shift = kj - pad;
          std::fill(row, row + lo, S(0));
          if (stride == 1) {
            std::copy(src + lo + shift, src + hi + shift, row + lo);
          } else {
            for (Index ox = lo; ox < hi; ++ox) row[ox] = src[ox * stride + shift];
          }
          std::fill(row + hi, row + out_w, S(0));
        }
      }
    }
  }
}

template <typename S>
void col2im(const S* cols, Index channels, Index height, Index width, Index kh, Index kw,
            Index stride, Index pad, Index out_h, Index out_w, S* out, Index row_stride) {
  for (Index c = 0; c < channels; ++c) {
    for (Index ki = 0; ki < kh; ++ki) {
      for (Index kj = 0; kj < kw; ++kj) {
        const S* src = cols + ((c * kh + ki) * kw + kj) * row_stride;
        const auto [lo, hi] = valid_columns(kj, stride, pad, width, out_w);
        for (Index oy = 0; oy < out_h; ++oy) {
          const Index iy = oy * stride - pad + ki;
          if (iy < 0 || iy >= height) continue;
          S* dst = out + (c * height + iy) * width;
          const Index shift = kj - pad;
          const S* row = src + oy * out_w;
          for (Index ox = lo; ox < hi; ++ox) dst[ox * stride + shift] += row[ox];
        }
      }
    }
  }
}

void require_rank(const char* op, const Shape& shape, std::size_t rank) {
  if (shape.size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_string(shape));
  }
}

}  // namespace

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  const Broadcast mode = classify("add", a, b);
  typename Tensor<S>::Array v = a.values() + expand(a, b, mode);
  Tape<S>* tape = recording_tape({&a, &b});
  Tensor<S> out(a.shape(), std::move(v), tape != nullptr);
  if (tape) {
    const Index inner = b.numel();
    tape->record("add", out, {a, b}, [a, b, mode, inner](const typename Tensor<S>::Array& g) {
      Tensor<S> ga = a, gb = b;
      if (ga.requires_grad()) ga.grad_buffer() += g;
      if (gb.requires_grad()) accumulate_reduced<S>(gb.grad_buffer(), g, mode, inner);
    });
  }
  return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  const Broadcast mode = classify("mul", a, b);
  typename Tensor<S>::Array bx = expand(a, b, mode);
  typename Tensor<S>::Array v = a.values() * bx;
  Tape<S>* tape = recording_tape({&a, &b});
  Tensor<S> out(a.shape(), std::move(v), tape != nullptr);
  if (tape) {
    const Index inner = b.numel();
    tape->record("mul", out, {a, b},
                 [a, b, mode, inner, bx = std::move(bx)](const typename Tensor<S>::Array& g) {
                   Tensor<S> ga = a, gb = b;
                   if (ga.requires_grad()) ga.grad_buffer() += g * bx;
                   if (gb.requires_grad()) {
                     typename Tensor<S>::Array prod = g * a.values();
                     accumulate_reduced<S>(gb.grad_buffer(), prod, mode, inner);
                   }
                 });
  }
  return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S s) {
  typename Tensor<S>::Array v = a.values() * s;
  Tape<S>* tape = recording_tape({&a});
  Tensor<S> out(a.shape(), std::move(v), tape != nullptr);
  if (tape) {
    tape->record("scale", out, {a}, [a, s](const typename Tensor<S>::Array& g) {
      Tensor<S> ga = a;
      ga.grad_buffer() += g * s;
    });
  }
  return out;
}

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
  typename Tensor<S>::Array v(1);
  v[0] = a.values().sum();
  Tape<S>* tape = recording_tape({&a});
  Tensor<S> out({1}, std::move(v), tape != nullptr);
  if (tape) {
    tape->record("sum", out, {a}, [a](const typename Tensor<S>::Array& g) {
      Tensor<S> ga = a;
      ga.grad_buffer() += g[0];
    });
  }
  return out;
}

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  require_rank("matmul", a.shape(), 2);
  require_rank("matmul", b.shape(), 2);
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner extents differ, " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  }
  typename Tensor<S>::Array v(m * n);
  Eigen::Map<const RowMat<S>> am(a.data(), m, k), bm(b.data(), k, n);
  Eigen::Map<RowMat<S>>(v.data(), m, n).noalias() = am * bm;
  Tape<S>* tape = recording_tape({&a, &b});
  Tensor<S> out({m, n}, std::move(v), tape != nullptr);
  if (tape) {
    tape->record("matmul", out, {a, b}, [a, b, m, k, n](const typename Tensor<S>::Array& g) {
      Tensor<S> ga = a, gb = b;
      Eigen::Map<const RowMat<S>> gm(g.data(), m, n);
      Eigen::Map<const RowMat<S>> am(a.data(), m, k), bm(b.data(), k, n);
      if (ga.requires_grad()) {
        Eigen::Map<RowMat<S>>(ga.grad_buffer().data(), m, k).noalias() += gm * bm.transpose();
      }
      if (gb.requires_grad()) {
        Eigen::Map<RowMat<S>>(gb.grad_buffer().data(), k, n).noalias() += am.transpose() * gm;
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& kernel, const Tensor<S>& bias,
                 Index stride, Index pad) {
  require_rank("conv2d input", input.shape(), 4);
  require_rank("conv2d kernel", kernel.shape(), 4);
  if (stride < 1 || pad < 0) throw ShapeError("conv2d: stride must be >= 1 and pad >= 0");
  const Index batch = input.dim(0), channels = input.dim(1), height = input.dim(2),
              width = input.dim(3);
  const Index filters = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kernel.dim(1) != channels) {
    throw ShapeError("conv2d: input " + shape_string(input.shape()) + " has " +
                     std::to_string(channels) + " channels but kernel " +
                     shape_string(kernel.shape()) + " expects " + std::to_string(kernel.dim(1)));
  }
  if (bias.numel() != filters) {
    throw ShapeError("conv2d: bias " + shape_string(bias.shape()) + " does not match " +
                     std::to_string(filters) + " filters");
  }
  const Index span_h = height + 2 * pad - kh, span_w = width + 2 * pad - kw;
  if (span_h < 0 || span_w < 0 || span_h % stride != 0 || span_w % stride != 0) {
    throw ShapeError("conv2d: kernel " + shape_string(kernel.shape()) + " with stride " +
                     std::to_string(stride) + " and pad " + std::to_string(pad) +
                     " does not tile input " + shape_string(input.shape()) + " exactly");
  }
  const Index out_h = span_h / stride + 1, out_w = span_w / stride + 1;
  const Index plane = out_h * out_w, patch = channels * kh * kw;

  const Index in_size = channels * height * width;
  typename Tensor<S>::Array v(batch * filters * plane);
  Eigen::Map<const RowMat<S>> w(kernel.data(), filters, patch);
  Eigen::Map<const Vec<S>> b(bias.data(), filters);
  RowMat<S> cols(patch, plane);
  for (Index n = 0; n < batch; ++n) {
    im2col(input.data() + n * in_size, channels, height, width, kh, kw, stride, pad, out_h, out_w,
           cols.data(), plane);
    Eigen::Map<RowMat<S>> o(v.data() + n * filters * plane, filters, plane);
    o.noalias() = w * cols;
    o.colwise() += b;
  }

  Tape<S>* tape = recording_tape({&input, &kernel, &bias});
  Tensor<S> out({batch, filters, out_h, out_w}, std::move(v), tape != nullptr);
  if (tape) {
    tape->record("conv2d", out, {input, kernel, bias},
                 [=](const typename Tensor<S>::Array& g) {
                   Tensor<S> x = input, k = kernel, bb = bias;
                   const bool need_x = x.requires_grad(), need_k = k.requires_grad(),
                              need_b = bb.requires_grad();
                   Eigen::Map<const RowMat<S>> wm(k.data(), filters, patch);
                   RowMat<S> cols(patch, plane), dcols(patch, plane);
                   RowMat<S> dw;
                   if (need_k) dw = RowMat<S>::Zero(filters, patch);
                   Vec<S> db;
                   if (need_b) db = Vec<S>::Zero(filters);
                   S* dx = need_x ? x.grad_buffer().data() : nullptr;
                   for (Index n = 0; n < batch; ++n) {
                     Eigen::Map<const RowMat<S>> go(g.data() + n * filters * plane, filters, plane);
                     if (need_k) {
                       im2col(x.data() + n * in_size, channels, height, width, kh, kw, stride, pad,
                              out_h, out_w, cols.data(), plane);
                       dw.noalias() += go * cols.transpose();
                     }
                     if (need_b) db += go.rowwise().sum();
                     if (need_x) {
                       dcols.noalias() = wm.transpose() * go;
                       col2im(dcols.data(), channels, height, width, kh, kw, stride, pad, out_h,
                              out_w, dx + n * in_size, plane);
                     }
                   }
                   if (need_k) {
                     k.grad_buffer() += Eigen::Map<const typename Tensor<S>::Array>(dw.data(), dw.size());
                   }
                   if (need_b) bb.grad_buffer() += db.array();
                 });
  }
  return out;
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  typename Tensor<S>::Array v = x.values().max(S(0));
  Tape<S>* tape = recording_tape({&x});
  Tensor<S> out(x.shape(), std::move(v), tape != nullptr);
  if (tape) {
    tape->record("relu", out, {x}, [x, out_values = out](const typename Tensor<S>::Array& g) {
      Tensor<S> gx = x;
      gx.grad_buffer() += (out_values.values() > S(0)).select(g, S(0));
    });
  }
  return out;
}

template <typename S>
Tensor<S> avg_pool2d(const Tensor<S>& x, Index window, Index stride) {
  require_rank("avg_pool2d", x.shape(), 4);
  if (window < 1 || stride < 1) throw ShapeError("avg_pool2d: window and stride must be >= 1");
  const Index batch = x.dim(0), channels = x.dim(1), height = x.dim(2), width = x.dim(3);
  if (window > height || window > width) {
    throw ShapeError("avg_pool2d: window " + std::to_string(window) + " larger than input " +
                     shape_string(x.shape()));
  }
  const Index out_h = (height - window) / stride + 1, out_w = (width - window) / stride + 1;
  const S inv = S(1) / S(window * window);
  typename Tensor<S>::Array v(batch * channels * out_h * out_w);
  for (Index p = 0; p < batch * channels; ++p) {
    const S* src = x.data() + p * height * width;
    S* dst = v.data() + p * out_h * out_w;
    for (Index oy = 0; oy < out_h; ++oy) {
      for (Index ox = 0; ox < out_w; ++ox) {
        S acc = 0;
        for (Index i = 0; i < window; ++i) {
          for (Index j = 0; j < window; ++j) acc += src[(oy * stride + i) * width + ox * stride + j];
        }
        dst[oy * out_w + ox] = acc * inv;
      }
    }
  }
  Tape<S>* tape = recording_tape({&x});
  Tensor<S> out({batch, channels, out_h, out_w}, std::move(v), tape != nullptr);
  if (tape) {
    tape->record("avg_pool2d", out, {x}, [=](const typename Tensor<S>::Array& g) {
      Tensor<S> gx = x;
      S* dx = gx.grad_buffer().data();
      for (Index p = 0; p < batch * channels; ++p) {
        S* dst = dx + p * height * width;
        const S* src = g.data() + p * out_h * out_w;
        for (Index oy = 0; oy < out_h; ++oy) {
          for (Index ox = 0; ox < out_w; ++ox) {
            const S share = src[oy * out_w + ox] * inv;
            for (Index i = 0; i < window; ++i) {
              for (Index j = 0; j < window; ++j) dst[(oy * stride + i) * width + ox * stride + j] += share;
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> global_avg_pool(const Tensor<S>& x) {
  require_rank("global_avg_pool", x.shape(), 4);
  const Index batch = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
  Eigen::Map<const RowMat<S>> planes(x.data(), batch * channels, plane);
  typename Tensor<S>::Array v = planes.rowwise().mean().array();
  Tape<S>* tape = recording_tape({&x});
  Tensor<S> out({batch, channels}, std::move(v), tape != nullptr);
  if (tape) {
    tape->record("global_avg_pool", out, {x}, [=](const typename Tensor<S>::Array& g) {
      Tensor<S> gx = x;
      Eigen::Map<RowMat<S>> dx(gx.grad_buffer().data(), batch * channels, plane);
      dx.colwise() += (g / S(plane)).matrix();
    });
  }
  return out;
}

template <typename S>
Tensor<S> softmax(const Tensor<S>& logits) {
  require_rank("softmax", logits.shape(), 2);
  const Index rows = logits.dim(0), cols = logits.dim(1);
  Eigen::Map<const RowMat<S>> z(logits.data(), rows, cols);
  RowMat<S> p = (z.colwise() - z.rowwise().maxCoeff()).array().exp().matrix();
  p.array().colwise() /= p.rowwise().sum().array();
  return Tensor<S>(logits.shape(), Eigen::Map<const typename Tensor<S>::Array>(p.data(), p.size()));
}

template <typename S>
Tensor<S> softmax_cross_entropy(const Tensor<S>& logits, std::span<const int> labels) {
  require_rank("softmax_cross_entropy", logits.shape(), 2);
  const Index rows = logits.dim(0), classes = logits.dim(1);
  if (static_cast<Index>(labels.size()) != rows) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                     " labels for logits " + shape_string(logits.shape()));
  }
  for (int label : labels) {
    if (label < 0 || label >= classes) {
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(label) +
                              " outside [0, " + std::to_string(classes) + ")");
    }
  }
  Eigen::Map<const RowMat<S>> z(logits.data(), rows, classes);
  RowMat<S> probs(rows, classes);
  double total = 0.0;
  for (Index r = 0; r < rows; ++r) {
    Index top = 0;
    const S peak = z.row(r).maxCoeff(&top);
    // log-sum-exp as peak + log1p(sum of the non-peak terms) keeps tiny losses exact
    S rest = 0;
    for (Index c = 0; c < classes; ++c) {
      const S e = std::exp(z(r, c) - peak);
      probs(r, c) = e;
      if (c != top) rest += e;
    }
    const S log_norm = peak + std::log1p(rest);
    probs.row(r) /= (S(1) + rest);
    total += static_cast<double>(log_norm - z(r, labels[r]));
  }
  typename Tensor<S>::Array v(1);
  v[0] = static_cast<S>(total / static_cast<double>(rows));
  if (!std::isfinite(v[0])) throw NumericError("softmax_cross_entropy: non-finite loss");

  Tape<S>* tape = recording_tape({&logits});
  Tensor<S> out({1}, std::move(v), tape != nullptr);
  if (tape) {
    std::vector<int> saved(labels.begin(), labels.end());
    tape->record("softmax_cross_entropy", out, {logits},
                 [logits, probs = std::move(probs), saved = std::move(saved), rows,
                  classes](const typename Tensor<S>::Array& g) {
                   Tensor<S> gl = logits;
                   RowMat<S> d = probs;
                   for (Index r = 0; r < rows; ++r) d(r, saved[r]) -= S(1);
                   d *= g[0] / S(rows);
                   gl.grad_buffer() += Eigen::Map<const typename Tensor<S>::Array>(d.data(), d.size());
                 });
  }
  return out;
}

#define SPIRALSCOPE_INSTANTIATE_OPS(S)                                                         \
  template Tensor<S> add<S>(const Tensor<S>&, const Tensor<S>&);                               \
  template Tensor<S> mul<S>(const Tensor<S>&, const Tensor<S>&);                               \
  template Tensor<S> scale<S>(const Tensor<S>&, S);                                            \
  template Tensor<S> sum<S>(const Tensor<S>&);                                                 \
  template Tensor<S> matmul<S>(const Tensor<S>&, const Tensor<S>&);                            \
  template Tensor<S> conv2d<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, Index,    \
                               Index);                                                         \
  template Tensor<S> relu<S>(const Tensor<S>&);                                                \
  template Tensor<S> avg_pool2d<S>(const Tensor<S>&, Index, Index);                            \
  template Tensor<S> global_avg_pool<S>(const Tensor<S>&);                                     \
  template Tensor<S> softmax<S>(const Tensor<S>&);                                             \
  template Tensor<S> softmax_cross_entropy<S>(const Tensor<S>&, std::span<const int>);

SPIRALSCOPE_INSTANTIATE_OPS(float)
SPIRALSCOPE_INSTANTIATE_OPS(double)

#undef SPIRALSCOPE_INSTANTIATE_OPS

}  // namespace spiralscope
