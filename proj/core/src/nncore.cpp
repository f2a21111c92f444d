#include "ignitrace/nncore.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "ignitrace/common.hpp"

namespace ignitrace::nn {

namespace {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapRM = Eigen::Map<const MatRM<T>>;

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

void require_rank(const Shape& s, std::size_t rank, const char* op) {
  require(s.size() == rank, std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_string(s));
}

}  // namespace

std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// --- Tensor / Parameter -----------------------------------------------------

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)), values_(shape_size(shape_), fill) {
  for (auto d : shape_) require(d > 0, "Tensor: dimensions must be positive, got " + shape_string(shape_));
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)), values_(std::move(values)) {
  for (auto d : shape_) require(d > 0, "Tensor: dimensions must be positive, got " + shape_string(shape_));
  require(values_.size() == shape_size(shape_), "Tensor: " + std::to_string(values_.size()) +
                                                    " values do not fill shape " + shape_string(shape_));
}

template <typename T>
void Tensor<T>::fill(T v) {
  std::fill(values_.begin(), values_.end(), v);
}

template <typename T>
void Tensor<T>::reshape(Shape shape) {
  require(shape_size(shape) == values_.size(),
          "reshape: " + shape_string(shape_) + " -> " + shape_string(shape) + " changes element count");
  shape_ = std::move(shape);
}

template <typename T>
Parameter<T>::Parameter(std::string n, Tensor<T> v)
    : name(std::move(n)), value(std::move(v)), grad(value.shape()), velocity(value.shape()) {}

template <typename T>
void Parameter<T>::zero_grad() {
  if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
  grad.fill(T{});
}

// --- Tape -------------------------------------------------------------------

template <typename T>
typename Tape<T>::Node& Tape<T>::node(Var v) {
  if (v.id >= nodes_.size()) throw std::out_of_range("Tape: invalid Var");
  return *nodes_[v.id];
}

template <typename T>
const typename Tape<T>::Node& Tape<T>::node(Var v) const {
  if (v.id >= nodes_.size()) throw std::out_of_range("Tape: invalid Var");
  return *nodes_[v.id];
}

template <typename T>
Var Tape<T>::constant(Tensor<T> value) {
  auto n = std::make_unique<Node>();
  n->owned_value = std::move(value);
  n->value = &n->owned_value;
  nodes_.push_back(std::move(n));
  return {nodes_.size() - 1};
}

template <typename T>
Var Tape<T>::variable(Tensor<T> value) {
  Var v = constant(std::move(value));
  nodes_.back()->requires_grad = grad_enabled();
  return v;
}

template <typename T>
Var Tape<T>::bind(Parameter<T>& p) {
  auto n = std::make_unique<Node>();
  n->value = &p.value;
  if (grad_enabled()) {
    if (p.grad.shape() != p.value.shape()) p.grad = Tensor<T>(p.value.shape());
    n->grad = &p.grad;
    n->requires_grad = true;
  }
  nodes_.push_back(std::move(n));
  return {nodes_.size() - 1};
}

template <typename T>
Var Tape<T>::record(Tensor<T> value, std::initializer_list<Var> parents, BackwardFn backward) {
  auto n = std::make_unique<Node>();
  n->owned_value = std::move(value);
  n->value = &n->owned_value;
  if (grad_enabled()) {
    for (Var p : parents) n->requires_grad = n->requires_grad || node(p).requires_grad;
    if (n->requires_grad) n->backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return {nodes_.size() - 1};
}

template <typename T>
const Tensor<T>& Tape<T>::value(Var v) const {
  return *node(v).value;
}

template <typename T>
Tensor<T> Tape<T>::grad(Var v) const {
  const Node& n = node(v);
  if (n.grad) return *n.grad;
  return Tensor<T>(n.value->shape());
}

template <typename T>
bool Tape<T>::requires_grad(Var v) const {
  return node(v).requires_grad;
}

template <typename T>
Tensor<T>& Tape<T>::grad_buffer(std::size_t id) {
  Node& n = *nodes_.at(id);
  if (!n.grad) {
    n.owned_grad = Tensor<T>(n.value->shape());
    n.grad = &n.owned_grad;
  }
  return *n.grad;
}

template <typename T>
const Tensor<T>* Tape<T>::grad_if_any(std::size_t id) const {
  return nodes_.at(id)->grad;
}

template <typename T>
void Tape<T>::backward(Var loss) {
  Node& l = node(loss);
  if (l.value->size() != 1) throw ShapeError("backward: loss must be a single element, got " + shape_string(l.value->shape()));
  if (!l.requires_grad) return;
  grad_buffer(loss.id)[0] += T{1};
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = *nodes_[i];
    if (n.backward && n.grad) n.backward(*this, i);
  }
}

// --- conv2d -----------------------------------------------------------------

std::size_t conv_output_dim(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  require(stride > 0, "conv: stride must be positive");
  require(in + 2 * pad >= k, "conv: kernel " + std::to_string(k) + " larger than padded input " +
                                 std::to_string(in + 2 * pad));
  return (in + 2 * pad - k) / stride + 1;
}

namespace {

struct ConvGeometry {
  std::size_t n, c, h, w, f, kh, kw, stride, pad_h, pad_w, ho, wo;
  std::size_t k() const { return c * kh * kw; }
  std::size_t m() const { return n * ho * wo; }
};

template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  const std::size_t M = g.m();
  const std::size_t plane = g.ho * g.wo;
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* dst = col + ((c * g.kh + i) * g.kw + j) * M;
        for (std::size_t n = 0; n < g.n; ++n) {
          const T* src = x + (n * g.c + c) * g.h * g.w;
          T* d = dst + n * plane;
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + i) - static_cast<std::ptrdiff_t>(g.pad_h);
            T* row = d + oy * g.wo;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
              std::fill(row, row + g.wo, T{});
              continue;
            }
            const T* srow = src + static_cast<std::size_t>(iy) * g.w;
            for (std::size_t ox = 0; ox < g.wo; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + j) - static_cast<std::ptrdiff_t>(g.pad_w);
              row[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? T{} : srow[ix];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* dx) {
  const std::size_t M = g.m();
  const std::size_t plane = g.ho * g.wo;
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* src = col + ((c * g.kh + i) * g.kw + j) * M;
        for (std::size_t n = 0; n < g.n; ++n) {
          T* dst = dx + (n * g.c + c) * g.h * g.w;
          const T* s = src + n * plane;
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + i) - static_cast<std::ptrdiff_t>(g.pad_h);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
            T* drow = dst + static_cast<std::size_t>(iy) * g.w;
            const T* srow = s + oy * g.wo;
            for (std::size_t ox = 0; ox < g.wo; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + j) - static_cast<std::ptrdiff_t>(g.pad_w);
              if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) drow[ix] += srow[ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Var conv2d(Tape<T>& tape, Var input, Var kernel, Conv2dOptions opts) {
  const auto& x = tape.value(input);
  const auto& wt = tape.value(kernel);
  require_rank(x.shape(), 4, "conv2d input");
  require_rank(wt.shape(), 4, "conv2d kernel");
  require(x.dim(1) == wt.dim(1), "conv2d: input has " + std::to_string(x.dim(1)) + " channels, kernel expects " +
                                     std::to_string(wt.dim(1)));
  ConvGeometry g{};
  g.n = x.dim(0);
  g.c = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.f = wt.dim(0);
  g.kh = wt.dim(2);
  g.kw = wt.dim(3);
  g.stride = opts.stride;
  g.pad_h = opts.padding == Padding::SameZero ? g.kh / 2 : 0;
  g.pad_w = opts.padding == Padding::SameZero ? g.kw / 2 : 0;
  g.ho = conv_output_dim(g.h, g.kh, g.stride, g.pad_h);
  g.wo = conv_output_dim(g.w, g.kw, g.stride, g.pad_w);

  const std::size_t K = g.k(), M = g.m(), plane = g.ho * g.wo;
  auto col = std::make_shared<std::vector<T>>(K * M);
  im2col(x.data(), g, col->data());

  std::vector<T> out_mat(g.f * M);
  MapRM<T>(out_mat.data(), static_cast<Eigen::Index>(g.f), static_cast<Eigen::Index>(M)).noalias() =
      CMapRM<T>(wt.data(), static_cast<Eigen::Index>(g.f), static_cast<Eigen::Index>(K)) *
      CMapRM<T>(col->data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(M));

  Tensor<T> out({g.n, g.f, g.ho, g.wo});
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t f = 0; f < g.f; ++f)
      std::copy_n(out_mat.data() + f * M + n * plane, plane, out.data() + (n * g.f + f) * plane);

  return tape.record(std::move(out), {input, kernel}, [input, kernel, g, col](Tape<T>& t, std::size_t self) {
    const Tensor<T>& gout = *t.grad_if_any(self);
    const std::size_t K = g.k(), M = g.m(), plane = g.ho * g.wo;
    std::vector<T> dmat(g.f * M);
    for (std::size_t n = 0; n < g.n; ++n)
      for (std::size_t f = 0; f < g.f; ++f)
        std::copy_n(gout.data() + (n * g.f + f) * plane, plane, dmat.data() + f * M + n * plane);
    CMapRM<T> dout(dmat.data(), static_cast<Eigen::Index>(g.f), static_cast<Eigen::Index>(M));
    if (t.requires_grad(kernel)) {
      auto& gw = t.grad_buffer(kernel.id);
      MapRM<T>(gw.data(), static_cast<Eigen::Index>(g.f), static_cast<Eigen::Index>(K)).noalias() +=
          dout * CMapRM<T>(col->data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(M)).transpose();
    }
    if (t.requires_grad(input)) {
      const auto& wt = t.value(kernel);
      std::vector<T> dcol(K * M);
      MapRM<T>(dcol.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(M)).noalias() =
          CMapRM<T>(wt.data(), static_cast<Eigen::Index>(g.f), static_cast<Eigen::Index>(K)).transpose() * dout;
      col2im_add(dcol.data(), g, t.grad_buffer(input.id).data());
    }
  });
}

// --- batch norm -------------------------------------------------------------

template <typename T>
void BatchNormState<T>::reset(std::size_t channels) {
  running_mean = Tensor<T>({channels}, T{0});
  running_var = Tensor<T>({channels}, T{1});
  initialized = true;
}

template <typename T>
Var batch_norm(Tape<T>& tape, Var input, Var gamma, Var beta, BatchNormState<T>& state, Mode mode) {
  const auto& x = tape.value(input);
  require(x.rank() == 2 || x.rank() == 4, "batch_norm: expected rank 2 or 4, got " + shape_string(x.shape()));
  const std::size_t N = x.dim(0), C = x.dim(1);
  const std::size_t S = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  const auto& gm = tape.value(gamma);
  const auto& bt = tape.value(beta);
  require(gm.shape() == Shape{C} && bt.shape() == Shape{C},
          "batch_norm: affine parameters must have shape [" + std::to_string(C) + "]");
  require(state.epsilon > 0.0, "batch_norm: epsilon must be positive");

  if (mode == Mode::Eval) {
    if (!state.initialized) throw std::logic_error("batch_norm: eval mode before running statistics exist");
    require(state.running_mean.shape() == Shape{C}, "batch_norm: running statistics have wrong channel count");
  } else if (!state.initialized) {
    state.reset(C);
  }

  const double m = static_cast<double>(N * S);
  auto xhat = std::make_shared<std::vector<T>>(x.size());
  auto invstd = std::make_shared<std::vector<T>>(C);
  Tensor<T> out(x.shape());
  for (std::size_t c = 0; c < C; ++c) {
    double mean, var;
    if (mode == Mode::Train) {
      double sum = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = x.data() + (n * C + c) * S;
        for (std::size_t s = 0; s < S; ++s) sum += p[s];
      }
      mean = sum / m;
      double sq = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = x.data() + (n * C + c) * S;
        for (std::size_t s = 0; s < S; ++s) {
          const double d = p[s] - mean;
          sq += d * d;
        }
      }
      var = sq / m;
      const double mom = state.momentum;
      state.running_mean[c] = static_cast<T>(mom * state.running_mean[c] + (1.0 - mom) * mean);
      state.running_var[c] = static_cast<T>(mom * state.running_var[c] + (1.0 - mom) * var);
    } else {
      mean = state.running_mean[c];
      var = state.running_var[c];
    }
    const double is = 1.0 / std::sqrt(var + state.epsilon);
    (*invstd)[c] = static_cast<T>(is);
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t off = (n * C + c) * S;
      for (std::size_t s = 0; s < S; ++s) {
        const T xh = static_cast<T>((x[off + s] - mean) * is);
        (*xhat)[off + s] = xh;
        out[off + s] = gm[c] * xh + bt[c];
      }
    }
  }

  return tape.record(std::move(out), {input, gamma, beta},
                     [input, gamma, beta, N, C, S, m, mode, xhat, invstd](Tape<T>& t, std::size_t self) {
                       const Tensor<T>& gy = *t.grad_if_any(self);
                       const auto& gm = t.value(gamma);
                       const bool want_x = t.requires_grad(input);
                       Tensor<T>* gx = want_x ? &t.grad_buffer(input.id) : nullptr;
                       Tensor<T>* gg = t.requires_grad(gamma) ? &t.grad_buffer(gamma.id) : nullptr;
                       Tensor<T>* gb = t.requires_grad(beta) ? &t.grad_buffer(beta.id) : nullptr;
                       for (std::size_t c = 0; c < C; ++c) {
                         double sum_dy = 0.0, sum_dy_xh = 0.0;
                         for (std::size_t n = 0; n < N; ++n) {
                           const std::size_t off = (n * C + c) * S;
                           for (std::size_t s = 0; s < S; ++s) {
                             sum_dy += gy[off + s];
                             sum_dy_xh += static_cast<double>(gy[off + s]) * (*xhat)[off + s];
                           }
                         }
                         if (gg) (*gg)[c] += static_cast<T>(sum_dy_xh);
                         if (gb) (*gb)[c] += static_cast<T>(sum_dy);
                         if (!gx) continue;
                         const double scale = static_cast<double>(gm[c]) * (*invstd)[c];
                         for (std::size_t n = 0; n < N; ++n) {
                           const std::size_t off = (n * C + c) * S;
                           for (std::size_t s = 0; s < S; ++s) {
                             double d;
                             if (mode == Mode::Train) {
                               d = scale / m * (m * gy[off + s] - sum_dy - (*xhat)[off + s] * sum_dy_xh);
                             } else {
                               d = scale * gy[off + s];
                             }
                             (*gx)[off + s] += static_cast<T>(d);
                           }
                         }
                       }
                     });
}

// --- elementwise ------------------------------------------------------------

template <typename T>
Var relu(Tape<T>& tape, Var input) {
  const auto& x = tape.value(input);
  Tensor<T> out(x.shape());
  double margin = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = x[i] > T{0} ? x[i] : T{0};
    margin = std::min(margin, static_cast<double>(std::abs(x[i])));
  }
  if (tape.grad_enabled()) tape.note_kink_margin(margin);
  return tape.record(std::move(out), {input}, [input](Tape<T>& t, std::size_t self) {
    const Tensor<T>& gy = *t.grad_if_any(self);
    const auto& x = t.value(input);
    auto& gx = t.grad_buffer(input.id);
    for (std::size_t i = 0; i < x.size(); ++i)
      if (x[i] > T{0}) gx[i] += gy[i];
  });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  const auto& x = tape.value(a);
  const auto& y = tape.value(b);
  require(x.shape() == y.shape(), "add: shape mismatch " + shape_string(x.shape()) + " vs " + shape_string(y.shape()));
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  return tape.record(std::move(out), {a, b}, [a, b](Tape<T>& t, std::size_t self) {
    const Tensor<T>& gy = *t.grad_if_any(self);
    for (Var v : {a, b}) {
      if (!t.requires_grad(v)) continue;
      auto& g = t.grad_buffer(v.id);
      for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i];
    }
  });
}

template <typename T>
Var max_pool2d(Tape<T>& tape, Var input, std::size_t kernel, std::size_t stride, std::size_t pad) {
  const auto& x = tape.value(input);
  require_rank(x.shape(), 4, "max_pool2d");
  require(pad < kernel, "max_pool2d: padding must be smaller than the kernel");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Ho = conv_output_dim(H, kernel, stride, pad);
  const std::size_t Wo = conv_output_dim(W, kernel, stride, pad);
  Tensor<T> out({N, C, Ho, Wo});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  double margin = std::numeric_limits<double>::infinity();
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const T* src = x.data() + nc * H * W;
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        T best = -std::numeric_limits<T>::infinity();
        T second = -std::numeric_limits<T>::infinity();
        std::size_t best_i = 0;
        for (std::size_t i = 0; i < kernel; ++i) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * stride + i) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
          for (std::size_t j = 0; j < kernel; ++j) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * stride + j) - static_cast<std::ptrdiff_t>(pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
            const std::size_t idx = static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix);
            const T v = src[idx];
            if (v > best) {
              second = best;
              best = v;
              best_i = idx;
            } else if (v > second) {
              second = v;
            }
          }
        }
        const std::size_t o = (nc * Ho + oy) * Wo + ox;
        out[o] = best;
        (*argmax)[o] = nc * H * W + best_i;
        if (std::isfinite(static_cast<double>(second))) margin = std::min(margin, static_cast<double>(best - second));
      }
    }
  }
  if (tape.grad_enabled()) tape.note_kink_margin(margin);
  return tape.record(std::move(out), {input}, [input, argmax](Tape<T>& t, std::size_t self) {
    const Tensor<T>& gy = *t.grad_if_any(self);
    auto& gx = t.grad_buffer(input.id);
    for (std::size_t o = 0; o < gy.size(); ++o) gx[(*argmax)[o]] += gy[o];
  });
}

template <typename T>
Var global_avg_pool(Tape<T>& tape, Var input) {
  const auto& x = tape.value(input);
  require_rank(x.shape(), 4, "global_avg_pool");
  const std::size_t N = x.dim(0), C = x.dim(1), S = x.dim(2) * x.dim(3);
  Tensor<T> out({N, C});
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    double sum = 0.0;
    const T* p = x.data() + nc * S;
    for (std::size_t s = 0; s < S; ++s) sum += p[s];
    out[nc] = static_cast<T>(sum / static_cast<double>(S));
  }
  return tape.record(std::move(out), {input}, [input, N, C, S](Tape<T>& t, std::size_t self) {
    const Tensor<T>& gy = *t.grad_if_any(self);
    auto& gx = t.grad_buffer(input.id);
    const T inv = static_cast<T>(1.0 / static_cast<double>(S));
    for (std::size_t nc = 0; nc < N * C; ++nc) {
      const T g = gy[nc] * inv;
      T* p = gx.data() + nc * S;
      for (std::size_t s = 0; s < S; ++s) p[s] += g;
    }
  });
}

template <typename T>
Var linear(Tape<T>& tape, Var x, Var weight, Var bias) {
  const auto& xv = tape.value(x);
  const auto& wv = tape.value(weight);
  const auto& bv = tape.value(bias);
  require_rank(xv.shape(), 2, "linear input");
  require_rank(wv.shape(), 2, "linear weight");
  const std::size_t N = xv.dim(0), D = xv.dim(1), K = wv.dim(1);
  require(wv.dim(0) == D, "linear: weight " + shape_string(wv.shape()) + " does not match input " +
                              shape_string(xv.shape()));
  require(bv.shape() == Shape{K}, "linear: bias must have shape [" + std::to_string(K) + "]");
  const auto n = static_cast<Eigen::Index>(N), d = static_cast<Eigen::Index>(D), k = static_cast<Eigen::Index>(K);
  Tensor<T> out({N, K});
  MapRM<T> o(out.data(), n, k);
  o.noalias() = CMapRM<T>(xv.data(), n, d) * CMapRM<T>(wv.data(), d, k);
  for (Eigen::Index r = 0; r < n; ++r)
    for (Eigen::Index c = 0; c < k; ++c) o(r, c) += bv[static_cast<std::size_t>(c)];
  return tape.record(std::move(out), {x, weight, bias}, [x, weight, bias, n, d, k](Tape<T>& t, std::size_t self) {
    const Tensor<T>& gy = *t.grad_if_any(self);
    CMapRM<T> g(gy.data(), n, k);
    if (t.requires_grad(x)) {
      MapRM<T>(t.grad_buffer(x.id).data(), n, d).noalias() += g * CMapRM<T>(t.value(weight).data(), d, k).transpose();
    }
    if (t.requires_grad(weight)) {
      MapRM<T>(t.grad_buffer(weight.id).data(), d, k).noalias() += CMapRM<T>(t.value(x).data(), n, d).transpose() * g;
    }
    if (t.requires_grad(bias)) {
      auto& gb = t.grad_buffer(bias.id);
      for (Eigen::Index c = 0; c < k; ++c) gb[static_cast<std::size_t>(c)] += g.col(c).sum();
    }
  });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  require_rank(logits.shape(), 2, "softmax");
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  Tensor<T> p(logits.shape());
  for (std::size_t r = 0; r < N; ++r) {
    const T* z = logits.data() + r * K;
    const double mx = *std::max_element(z, z + K);
    double sum = 0.0;
    for (std::size_t c = 0; c < K; ++c) sum += std::exp(static_cast<double>(z[c]) - mx);
    for (std::size_t c = 0; c < K; ++c) p[r * K + c] = static_cast<T>(std::exp(static_cast<double>(z[c]) - mx) / sum);
  }
  return p;
}

template <typename T>
XentResult<T> softmax_xent(Tape<T>& tape, Var logits, std::span<const int> labels) {
  const auto& z = tape.value(logits);
  require_rank(z.shape(), 2, "softmax_xent");
  const std::size_t N = z.dim(0), K = z.dim(1);
  require(labels.size() == N, "softmax_xent: " + std::to_string(labels.size()) + " labels for " + std::to_string(N) +
                                  " rows");
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (!std::isfinite(static_cast<double>(z[i]))) throw NumericError("softmax_xent: non-finite logit");
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= K) throw std::invalid_argument("softmax_xent: label out of range");
  }
  Tensor<T> probs = softmax(z);
  double loss = 0.0;
  for (std::size_t r = 0; r < N; ++r) {
    const T* row = z.data() + r * K;
    const double mx = *std::max_element(row, row + K);
    double sum = 0.0;
    for (std::size_t c = 0; c < K; ++c) sum += std::exp(static_cast<double>(row[c]) - mx);
    loss -= static_cast<double>(row[static_cast<std::size_t>(labels[r])]) - mx - std::log(sum);
  }
  loss /= static_cast<double>(N);
  std::vector<int> lab(labels.begin(), labels.end());
  Tensor<T> pcopy = probs;
  Var out = tape.record(Tensor<T>({1}, {static_cast<T>(loss)}), {logits},
                        [logits, lab = std::move(lab), p = std::move(pcopy), N, K](Tape<T>& t, std::size_t self) {
                          const T g = (*t.grad_if_any(self))[0];
                          auto& gz = t.grad_buffer(logits.id);
                          const T scale = g / static_cast<T>(N);
                          for (std::size_t r = 0; r < N; ++r) {
                            for (std::size_t c = 0; c < K; ++c) {
                              const T onehot = static_cast<std::size_t>(lab[r]) == c ? T{1} : T{0};
                              gz[r * K + c] += scale * (p[r * K + c] - onehot);
                            }
                          }
                        });
  return {out, std::move(probs)};
}

template <typename T>
XentResult<T> dense_softmax_xent(Tape<T>& tape, Var features, Var weight, Var bias, std::span<const int> labels) {
  return softmax_xent(tape, linear(tape, features, weight, bias), labels);
}

template <typename T>
Var weighted_sum(Tape<T>& tape, Var x, const Tensor<T>& weights) {
  const auto& v = tape.value(x);
  require(v.shape() == weights.shape(), "weighted_sum: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) s += static_cast<double>(v[i]) * weights[i];
  return tape.record(Tensor<T>({1}, {static_cast<T>(s)}), {x}, [x, weights](Tape<T>& t, std::size_t self) {
    const T g = (*t.grad_if_any(self))[0];
    auto& gx = t.grad_buffer(x.id);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g * weights[i];
  });
}

// --- optimizer --------------------------------------------------------------

template <typename T>
void sgd_step(std::span<Parameter<T>* const> params, const SgdOptions& opts) {
  const T lr = static_cast<T>(opts.lr), mom = static_cast<T>(opts.momentum), wd = static_cast<T>(opts.weight_decay);
  for (Parameter<T>* p : params) {
    if (p->velocity.shape() != p->value.shape()) p->velocity = Tensor<T>(p->value.shape());
    if (p->grad.shape() != p->value.shape()) p->grad = Tensor<T>(p->value.shape());
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      T& v = p->velocity[i];
      v = mom * v + p->grad[i] + wd * p->value[i];
      p->value[i] -= lr * v;
    }
  }
}

template <typename T>
Tensor<T> he_init(const Shape& shape, std::size_t fan_in, std::uint64_t seed) {
  require(fan_in > 0, "he_init: fan_in must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  Tensor<T> t(shape);
  for (auto& v : t.values()) v = static_cast<T>(n(rng));
  return t;
}

// --- gradient checking ------------------------------------------------------

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-12, std::abs(analytic) + std::abs(numeric));
}

namespace {

double scalar_of(const Tape<double>& tape, Var v) {
  const auto& t = tape.value(v);
  if (t.size() != 1) throw ShapeError("grad_check: graph must return a single element");
  return t[0];
}

}  // namespace

GradCheckResult grad_check(const GraphFn& graph, std::vector<Tensor<double>> point, double eps) {
  GradCheckResult r;
  std::vector<Tensor<double>> analytic;
  {
    Tape<double> tape;
    std::vector<Var> vars;
    for (const auto& p : point) vars.push_back(tape.variable(p));
    const Var out = graph(tape, vars);
    scalar_of(tape, out);
    tape.backward(out);
    for (Var v : vars) analytic.push_back(tape.grad(v));
    r.kink_margin = tape.kink_margin();
  }
  auto eval = [&] {
    Tape<double> tape(GradMode::Disabled);
    std::vector<Var> vars;
    for (const auto& p : point) vars.push_back(tape.constant(p));
    return scalar_of(tape, graph(tape, vars));
  };
  for (std::size_t i = 0; i < point.size(); ++i) {
    for (std::size_t j = 0; j < point[i].size(); ++j) {
      const double orig = point[i][j];
      point[i][j] = orig + eps;
      const double fp = eval();
      point[i][j] = orig - eps;
      const double fm = eval();
      point[i][j] = orig;
      const double num = (fp - fm) / (2.0 * eps);
      const double err = relative_error(analytic[i][j], num);
      ++r.checked;
      if (err > r.max_rel_error || r.checked == 1) {
        r.max_rel_error = err;
        r.worst_input = i;
        r.worst_index = j;
        r.analytic = analytic[i][j];
        r.numeric = num;
      }
    }
  }
  return r;
}

GradCheckResult grad_check_parameters(const std::function<Var(Tape<double>&)>& loss,
                                      std::span<Parameter<double>* const> params, double eps) {
  GradCheckResult r;
  for (auto* p : params) p->zero_grad();
  {
    Tape<double> tape;
    const Var out = loss(tape);
    scalar_of(tape, out);
    tape.backward(out);
    r.kink_margin = tape.kink_margin();
  }
  std::vector<Tensor<double>> analytic;
  for (auto* p : params) analytic.push_back(p->grad);
  auto eval = [&] {
    Tape<double> tape(GradMode::Disabled);
    return scalar_of(tape, loss(tape));
  };
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& value = params[i]->value;
    for (std::size_t j = 0; j < value.size(); ++j) {
      const double orig = value[j];
      value[j] = orig + eps;
      const double fp = eval();
      value[j] = orig - eps;
      const double fm = eval();
      value[j] = orig;
      const double num = (fp - fm) / (2.0 * eps);
      const double err = relative_error(analytic[i][j], num);
      ++r.checked;
      if (err > r.max_rel_error || r.checked == 1) {
        r.max_rel_error = err;
        r.worst_input = i;
        r.worst_index = j;
        r.analytic = analytic[i][j];
        r.numeric = num;
      }
    }
  }
  return r;
}

// --- layers -----------------------------------------------------------------

template <typename T>
ConvLayer<T> ConvLayer<T>::make(std::string name, std::size_t in_ch, std::size_t out_ch, std::size_t k,
                                std::size_t stride, std::uint64_t seed) {
  ConvLayer layer;
  layer.weight = Parameter<T>(std::move(name), he_init<T>({out_ch, in_ch, k, k}, in_ch * k * k, seed));
  layer.options = {stride, Padding::SameZero};
  return layer;
}

template <typename T>
BatchNormLayer<T> BatchNormLayer<T>::make(std::string name, std::size_t channels) {
  BatchNormLayer layer;
  layer.gamma = Parameter<T>(name + ".gamma", Tensor<T>({channels}, T{1}));
  layer.beta = Parameter<T>(name + ".beta", Tensor<T>({channels}, T{0}));
  layer.state.reset(channels);
  layer.name = std::move(name);
  return layer;
}

template <typename T>
ResidualBlock<T> ResidualBlock<T>::make(const std::string& name, std::size_t in_ch, std::size_t out_ch,
                                        std::size_t stride, std::uint64_t seed) {
  ResidualBlock b;
  b.conv1 = ConvLayer<T>::make(name + ".conv1.weight", in_ch, out_ch, 3, stride, mix_seed(seed, 1));
  b.bn1 = BatchNormLayer<T>::make(name + ".bn1", out_ch);
  b.conv2 = ConvLayer<T>::make(name + ".conv2.weight", out_ch, out_ch, 3, 1, mix_seed(seed, 2));
  b.bn2 = BatchNormLayer<T>::make(name + ".bn2", out_ch);
  if (in_ch != out_ch || stride != 1) {
    b.projection = ConvLayer<T>::make(name + ".proj.weight", in_ch, out_ch, 1, stride, mix_seed(seed, 3));
    b.projection->options.padding = Padding::Valid;
    b.projection_bn = BatchNormLayer<T>::make(name + ".proj_bn", out_ch);
  }
  return b;
}

template <typename T>
void ResidualBlock<T>::collect(std::vector<Parameter<T>*>& out) {
  out.insert(out.end(), {&conv1.weight, &bn1.gamma, &bn1.beta, &conv2.weight, &bn2.gamma, &bn2.beta});
  if (projection) out.insert(out.end(), {&projection->weight, &projection_bn->gamma, &projection_bn->beta});
}

template <typename T>
Var residual_block(Tape<T>& tape, Var input, ResidualBlock<T>& block, Mode mode) {
  Var h = relu(tape, block.bn1.forward(tape, block.conv1.forward(tape, input), mode));
  h = block.bn2.forward(tape, block.conv2.forward(tape, h), mode);
  Var skip = input;
  if (block.projection) {
    skip = block.projection_bn->forward(tape, block.projection->forward(tape, input), mode);
  } else {
    require(tape.value(input).shape() == tape.value(h).shape(),
            "residual_block: skip shape " + shape_string(tape.value(input).shape()) + " differs from branch " +
                shape_string(tape.value(h).shape()) + " and no projection is configured");
  }
  return relu(tape, add(tape, h, skip));
}

template <typename T>
ResNet<T>::ResNet(const ResNetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  require(!cfg.stage_blocks.empty(), "ResNet: at least one stage required");
  require(cfg.base_channels > 0 && cfg.in_channels > 0 && cfg.num_classes > 1, "ResNet: invalid channel config");
  stem_ = ConvLayer<T>::make("stem.conv.weight", cfg.in_channels, cfg.base_channels, 3, cfg.stem_stride,
                             mix_seed(seed, 0));
  stem_bn_ = BatchNormLayer<T>::make("stem.bn", cfg.base_channels);
  std::size_t in_ch = cfg.base_channels;
  std::uint64_t idx = 0;
  for (std::size_t s = 0; s < cfg.stage_blocks.size(); ++s) {
    const std::size_t ch = cfg.base_channels << s;
    for (std::size_t b = 0; b < cfg.stage_blocks[s]; ++b) {
      const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
      blocks_.push_back(ResidualBlock<T>::make("layer" + std::to_string(s + 1) + "." + std::to_string(b), in_ch, ch,
                                               stride, mix_seed(seed, 100 + idx++)));
      in_ch = ch;
    }
  }
  fc_weight_ = Parameter<T>("fc.weight", Tensor<T>({in_ch, cfg.num_classes}));
  fc_bias_ = Parameter<T>("fc.bias", Tensor<T>({cfg.num_classes}));
}

template <typename T>
Var ResNet<T>::forward(Tape<T>& tape, Var input, Mode mode) {
  const auto& x = tape.value(input);
  require(x.rank() == 4 && x.dim(1) == cfg_.in_channels,
          "ResNet: expected input [N," + std::to_string(cfg_.in_channels) + ",H,W], got " + shape_string(x.shape()));
  Var h = relu(tape, stem_bn_.forward(tape, stem_.forward(tape, input), mode));
  if (cfg_.stem_pool) h = max_pool2d(tape, h, 3, 2, 1);
  for (auto& b : blocks_) h = residual_block(tape, h, b, mode);
  h = global_avg_pool(tape, h);
  return linear(tape, h, tape.bind(fc_weight_), tape.bind(fc_bias_));
}

template <typename T>
Tensor<T> ResNet<T>::predict_proba(const Tensor<T>& input) {
  Tape<T> tape(GradMode::Disabled);
  const Var logits = forward(tape, tape.constant(input), Mode::Eval);
  return softmax(tape.value(logits));
}

template <typename T>
std::vector<Parameter<T>*> ResNet<T>::parameters() {
  std::vector<Parameter<T>*> out{&stem_.weight, &stem_bn_.gamma, &stem_bn_.beta};
  for (auto& b : blocks_) b.collect(out);
  out.push_back(&fc_weight_);
  out.push_back(&fc_bias_);
  return out;
}

namespace {

template <typename T>
NamedTensor named(const std::string& name, const Tensor<T>& t) {
  return {name, t.shape(), std::vector<float>(t.values().begin(), t.values().end())};
}

template <typename T>
void for_each_bn(ResNet<T>& net, BatchNormLayer<T>& stem_bn, const std::function<void(BatchNormLayer<T>&)>& fn) {
  fn(stem_bn);
  for (auto& b : net.blocks()) {
    fn(b.bn1);
    fn(b.bn2);
    if (b.projection_bn) fn(*b.projection_bn);
  }
}

}  // namespace

template <typename T>
std::vector<NamedTensor> ResNet<T>::export_state() const {
  auto& self = const_cast<ResNet<T>&>(*this);
  std::vector<NamedTensor> out;
  for (auto* p : self.parameters()) out.push_back(named(p->name, p->value));
  for_each_bn<T>(self, self.stem_bn_, [&](BatchNormLayer<T>& bn) {
    out.push_back(named(bn.name + ".running_mean", bn.state.running_mean));
    out.push_back(named(bn.name + ".running_var", bn.state.running_var));
  });
  return out;
}

template <typename T>
void ResNet<T>::import_state(const std::vector<NamedTensor>& state) {
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& t : state) by_name[t.name] = &t;
  auto load = [&](const std::string& name, Tensor<T>& dst) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw std::invalid_argument("import_state: missing tensor " + name);
    if (it->second->shape != dst.shape()) {
      throw std::invalid_argument("import_state: " + name + " has shape " + shape_string(it->second->shape) +
                                  ", expected " + shape_string(dst.shape()));
    }
    dst = Tensor<T>(it->second->shape, std::vector<T>(it->second->values.begin(), it->second->values.end()));
  };
  for (auto* p : parameters()) {
    load(p->name, p->value);
    p->zero_grad();
    p->velocity = Tensor<T>(p->value.shape());
  }
  for_each_bn<T>(*this, stem_bn_, [&](BatchNormLayer<T>& bn) {
    load(bn.name + ".running_mean", bn.state.running_mean);
    load(bn.name + ".running_var", bn.state.running_var);
    bn.state.initialized = true;
  });
}

// --- checkpoint -------------------------------------------------------------

namespace {

constexpr char kCkptMagic[4] = {'I', 'G', 'N', 'W'};
constexpr std::uint16_t kCkptVersion = 1;

void put(std::string& b, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

struct Reader {
  const std::string& d;
  std::size_t pos = 0;
  std::uint64_t get(int bytes) {
    if (pos + static_cast<std::size_t>(bytes) > d.size()) throw CheckpointError("checkpoint truncated");
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(d[pos + i])) << (8 * i);
    pos += static_cast<std::size_t>(bytes);
    return v;
  }
  std::string str(std::size_t n) {
    if (pos + n > d.size()) throw CheckpointError("checkpoint truncated");
    std::string s = d.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::string b(kCkptMagic, 4);
  put(b, kCkptVersion, 2);
  put(b, ckpt.metadata.size(), 4);
  b += ckpt.metadata;
  put(b, ckpt.tensors.size(), 4);
  for (const auto& t : ckpt.tensors) {
    if (t.values.size() != shape_size(t.shape)) throw CheckpointError("checkpoint: tensor " + t.name + " size mismatch");
    put(b, t.name.size(), 2);
    b += t.name;
    put(b, t.shape.size(), 1);
    for (auto d : t.shape) put(b, d, 4);
    for (float v : t.values) put(b, std::bit_cast<std::uint32_t>(v), 4);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open " + path.string() + " for writing");
  out.write(b.data(), static_cast<std::streamsize>(b.size()));
  if (!out) throw CheckpointError("write failed: " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string data = std::move(ss).str();
  if (data.size() < 4 || data.compare(0, 4, std::string(kCkptMagic, 4)) != 0) {
    throw CheckpointError(path.string() + ": bad magic, not an IGNW checkpoint");
  }
  Reader r{data, 4};
  const auto version = r.get(2);
  if (version != kCkptVersion) throw CheckpointError(path.string() + ": unsupported version " + std::to_string(version));
  Checkpoint c;
  c.metadata = r.str(r.get(4));
  const auto count = r.get(4);
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.str(r.get(2));
    const auto rank = r.get(1);
    for (std::uint64_t d = 0; d < rank; ++d) t.shape.push_back(r.get(4));
    const auto n = shape_size(t.shape);
    t.values.resize(n);
    for (std::size_t k = 0; k < n; ++k) t.values[k] = std::bit_cast<float>(static_cast<std::uint32_t>(r.get(4)));
    c.tensors.push_back(std::move(t));
  }
  if (r.pos != data.size()) throw CheckpointError(path.string() + ": trailing bytes");
  return c;
}

// --- instantiation ----------------------------------------------------------

#define IGNITRACE_NN_INSTANTIATE(T)                                                                       \
  template class Tensor<T>;                                                                               \
  template struct Parameter<T>;                                                                           \
  template class Tape<T>;                                                                                 \
  template struct BatchNormState<T>;                                                                      \
  template Var conv2d<T>(Tape<T>&, Var, Var, Conv2dOptions);                                              \
  template Var batch_norm<T>(Tape<T>&, Var, Var, Var, BatchNormState<T>&, Mode);                          \
  template Var relu<T>(Tape<T>&, Var);                                                                    \
  template Var add<T>(Tape<T>&, Var, Var);                                                                \
  template Var max_pool2d<T>(Tape<T>&, Var, std::size_t, std::size_t, std::size_t);                      \
  template Var global_avg_pool<T>(Tape<T>&, Var);                                                         \
  template Var linear<T>(Tape<T>&, Var, Var, Var);                                                        \
  template XentResult<T> softmax_xent<T>(Tape<T>&, Var, std::span<const int>);                            \
  template XentResult<T> dense_softmax_xent<T>(Tape<T>&, Var, Var, Var, std::span<const int>);            \
  template Tensor<T> softmax<T>(const Tensor<T>&);                                                        \
  template Var weighted_sum<T>(Tape<T>&, Var, const Tensor<T>&);                                          \
  template void sgd_step<T>(std::span<Parameter<T>* const>, const SgdOptions&);                           \
  template Tensor<T> he_init<T>(const Shape&, std::size_t, std::uint64_t);                                \
  template struct ConvLayer<T>;                                                                           \
  template struct BatchNormLayer<T>;                                                                      \
  template struct ResidualBlock<T>;                                                                       \
  template Var residual_block<T>(Tape<T>&, Var, ResidualBlock<T>&, Mode);                                 \
  template class ResNet<T>;

IGNITRACE_NN_INSTANTIATE(float)
IGNITRACE_NN_INSTANTIATE(double)

#undef IGNITRACE_NN_INSTANTIATE

}  // namespace ignitrace::nn
