#pragma once

// Minimal dense tensors with a reverse-mode tape, the layer set of a small
// residual classifier, momentum SGD, and a finite-difference gradient checker.
//
// Layout is NCHW. Float is used for training, double for gradient checks;
// both are explicitly instantiated in nncore.cpp.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ignitrace::nn {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& s);
std::string shape_string(const Shape& s);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{});
  Tensor(Shape shape, std::vector<T> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  T* data() { return values_.data(); }
  const T* data() const { return values_.data(); }
  std::vector<T>& values() { return values_; }
  const std::vector<T>& values() const { return values_; }
  T& operator[](std::size_t i) { return values_[i]; }
  const T& operator[](std::size_t i) const { return values_[i]; }

  void fill(T v);
  /// Reinterprets the shape; element count must match.
  void reshape(Shape shape);

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(values_.begin(), values_.end()));
  }

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_;
  std::vector<T> values_;
};

/// Learned tensor with its gradient and optimizer state.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  Tensor<T> velocity;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v);
  void zero_grad();
};

/// Handle to a tape node.
struct Var {
  std::size_t id = std::numeric_limits<std::size_t>::max();
};

enum class GradMode { Enabled, Disabled };

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(GradMode mode = GradMode::Enabled) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor<T> value);
  Var variable(Tensor<T> value);
  /// Leaf aliasing p.value; backward accumulates into p.grad.
  Var bind(Parameter<T>& p);
  /// Records an op output. It requires grad iff any parent does.
  Var record(Tensor<T> value, std::initializer_list<Var> parents, BackwardFn backward);

  const Tensor<T>& value(Var v) const;
  /// Gradient of the last backward() w.r.t. v (zeros when v got none).
  Tensor<T> grad(Var v) const;
  bool requires_grad(Var v) const;
  bool grad_enabled() const { return mode_ == GradMode::Enabled; }

  /// Gradient buffer of v, allocated as zeros on first use.
  Tensor<T>& grad_buffer(std::size_t id);
  const Tensor<T>* grad_if_any(std::size_t id) const;

  /// Seeds d(loss)/d(loss) = 1; loss must hold exactly one element.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

  /// Smallest distance of any ReLU input to 0 or of any max-pool winner to
  /// the runner-up seen so far; finite differences below this scale may
  /// cross a kink.
  double kink_margin() const { return kink_margin_; }
  void note_kink_margin(double m) {
    if (m < kink_margin_) kink_margin_ = m;
  }

 private:
  struct Node {
    Tensor<T> owned_value;
    const Tensor<T>* value = nullptr;
    Tensor<T> owned_grad;
    Tensor<T>* grad = nullptr;
    bool requires_grad = false;
    BackwardFn backward;
  };
  Node& node(Var v);
  const Node& node(Var v) const;

  GradMode mode_;
  std::vector<std::unique_ptr<Node>> nodes_;
  double kink_margin_ = std::numeric_limits<double>::infinity();
};

// --- ops --------------------------------------------------------------------

enum class Padding { Valid, SameZero };

struct Conv2dOptions {
  std::size_t stride = 1;
  Padding padding = Padding::SameZero;
};

/// (in + 2*pad - k) / stride + 1; throws ShapeError when the kernel does not fit.
std::size_t conv_output_dim(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad);

/// input [N,C,H,W], kernel [F,C,kh,kw] -> [N,F,H',W']; plain cross-correlation.
template <typename T>
Var conv2d(Tape<T>& tape, Var input, Var kernel, Conv2dOptions opts = {});

enum class Mode { Train, Eval };

template <typename T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  double epsilon = 1e-5;
  double momentum = 0.9;  // running <- momentum*running + (1-momentum)*batch
  bool initialized = false;

  /// Mean 0, variance 1.
  void reset(std::size_t channels);
};

/// Per-channel normalization over N (and H, W for rank-4 input). Train mode
/// uses batch statistics (biased variance) and updates the running averages.
template <typename T>
Var batch_norm(Tape<T>& tape, Var input, Var gamma, Var beta, BatchNormState<T>& state, Mode mode);

/// max(0, x); the gradient at exactly 0 is 0.
template <typename T>
Var relu(Tape<T>& tape, Var input);

template <typename T>
Var add(Tape<T>& tape, Var a, Var b);

template <typename T>
Var max_pool2d(Tape<T>& tape, Var input, std::size_t kernel, std::size_t stride, std::size_t pad);

/// [N,C,H,W] -> [N,C]
template <typename T>
Var global_avg_pool(Tape<T>& tape, Var input);

/// x [N,D] * weight [D,K] + bias [K]
template <typename T>
Var linear(Tape<T>& tape, Var x, Var weight, Var bias);

template <typename T>
struct XentResult {
  Var loss;                 // mean cross-entropy, shape [1]
  Tensor<T> probabilities;  // [N,K], rows sum to 1
};

/// Numerically stable softmax + mean cross-entropy. Throws NumericError on
/// non-finite logits and std::invalid_argument on out-of-range labels.
template <typename T>
XentResult<T> softmax_xent(Tape<T>& tape, Var logits, std::span<const int> labels);

template <typename T>
XentResult<T> dense_softmax_xent(Tape<T>& tape, Var features, Var weight, Var bias, std::span<const int> labels);

/// Row-wise softmax without a tape.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits);

/// sum(x * weights) as a scalar; turns any op into a checkable loss.
template <typename T>
Var weighted_sum(Tape<T>& tape, Var x, const Tensor<T>& weights);

// --- optimizer and init -----------------------------------------------------

struct SgdOptions {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

/// v <- momentum*v + grad + weight_decay*w;  w <- w - lr*v
template <typename T>
void sgd_step(std::span<Parameter<T>* const> params, const SgdOptions& opts);

/// Zero-mean Gaussian with variance 2/fan_in.
template <typename T>
Tensor<T> he_init(const Shape& shape, std::size_t fan_in, std::uint64_t seed);

// --- gradient checking ------------------------------------------------------

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
  double kink_margin = std::numeric_limits<double>::infinity();
};

/// |a - n| / max(1e-12, |a| + |n|)
double relative_error(double analytic, double numeric);

using GraphFn = std::function<Var(Tape<double>&, std::span<const Var>)>;

/// Central differences over every scalar of every input. graph must return
/// a one-element Var.
GradCheckResult grad_check(const GraphFn& graph, std::vector<Tensor<double>> point, double eps = 1e-5);

/// Same, perturbing parameters in place (restored afterwards). loss binds them.
GradCheckResult grad_check_parameters(const std::function<Var(Tape<double>&)>& loss,
                                      std::span<Parameter<double>* const> params, double eps = 1e-5);

// --- layers -----------------------------------------------------------------

template <typename T>
struct ConvLayer {
  Parameter<T> weight;  // [F,C,k,k]
  Conv2dOptions options;

  static ConvLayer make(std::string name, std::size_t in_ch, std::size_t out_ch, std::size_t k, std::size_t stride,
                        std::uint64_t seed);
  Var forward(Tape<T>& tape, Var x) { return conv2d(tape, x, tape.bind(weight), options); }
};

template <typename T>
struct BatchNormLayer {
  std::string name;
  Parameter<T> gamma;
  Parameter<T> beta;
  BatchNormState<T> state;

  static BatchNormLayer make(std::string name, std::size_t channels);
  Var forward(Tape<T>& tape, Var x, Mode mode) {
    return batch_norm(tape, x, tape.bind(gamma), tape.bind(beta), state, mode);
  }
};

/// relu(bn2(conv2(relu(bn1(conv1(x))))) + skip(x)); skip is identity or a
/// strided 1x1 projection followed by normalization.
template <typename T>
struct ResidualBlock {
  ConvLayer<T> conv1;
  BatchNormLayer<T> bn1;
  ConvLayer<T> conv2;
  BatchNormLayer<T> bn2;
  std::optional<ConvLayer<T>> projection;
  std::optional<BatchNormLayer<T>> projection_bn;

  static ResidualBlock make(const std::string& name, std::size_t in_ch, std::size_t out_ch, std::size_t stride,
                            std::uint64_t seed);
  void collect(std::vector<Parameter<T>*>& out);
};

template <typename T>
Var residual_block(Tape<T>& tape, Var input, ResidualBlock<T>& block, Mode mode);

struct ResNetConfig {
  std::size_t in_channels = 1;
  std::size_t base_channels = 16;
  std::vector<std::size_t> stage_blocks{2, 2, 2, 2};
  std::size_t num_classes = 2;
  std::size_t stem_stride = 2;
  bool stem_pool = true;  // 3x3/2 max pool after the stem
};

/// Named tensor as stored in checkpoints (values always 32-bit).
struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

template <typename T>
class ResNet {
 public:
  ResNet() = default;
  ResNet(const ResNetConfig& cfg, std::uint64_t seed);

  const ResNetConfig& config() const { return cfg_; }
  /// input [N,C,H,W] -> logits [N,num_classes]
  Var forward(Tape<T>& tape, Var input, Mode mode);
  /// Softmax probabilities in eval mode.
  Tensor<T> predict_proba(const Tensor<T>& input);

  std::vector<Parameter<T>*> parameters();
  std::vector<NamedTensor> export_state() const;
  /// Throws std::invalid_argument on missing names or shape mismatch.
  void import_state(const std::vector<NamedTensor>& state);

  std::vector<ResidualBlock<T>>& blocks() { return blocks_; }
  Parameter<T>& fc_weight() { return fc_weight_; }

 private:
  ResNetConfig cfg_;
  ConvLayer<T> stem_;
  BatchNormLayer<T> stem_bn_;
  std::vector<ResidualBlock<T>> blocks_;
  Parameter<T> fc_weight_;
  Parameter<T> fc_bias_;
};

// --- checkpoint -------------------------------------------------------------

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  std::string metadata;  // JSON text
  std::vector<NamedTensor> tensors;
};

/// "IGNW" | u16 version | u32 metadata length | metadata bytes | u32 count |
/// per tensor: u16 name length, name, u8 rank, u32 dims..., f32 values; all LE.
void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace ignitrace::nn
