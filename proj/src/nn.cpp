#include "tuap/nn.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include "tuap/error.hpp"
#include "tuap/io.hpp"

namespace tuap::nn {

namespace {

constexpr char kWeightsMagic[] = "TUAPNNW1";
constexpr std::uint32_t kWeightsVersion = 1;

using Array = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

Matrix activate(const Matrix& pre, Activation act) {
  switch (act) {
    case Activation::identity:
      return pre;
    case Activation::relu:
      return pre.cwiseMax(0.0);
    case Activation::tanh:
      return pre.array().tanh().matrix();
    case Activation::sigmoid:
      return pre.unaryExpr([](double x) { return sigmoid(x); });
  }
  return pre;
}

// dy/dpre expressed through pre-activations.
Matrix activation_grad(const Matrix& pre, Activation act) {
  switch (act) {
    case Activation::identity:
      return Matrix::Ones(pre.rows(), pre.cols());
    case Activation::relu:
      return (pre.array() > 0.0).cast<double>().matrix();
    case Activation::tanh:
      return (1.0 - pre.array().tanh().square()).matrix();
    case Activation::sigmoid:
      return pre.unaryExpr([](double x) {
        const double s = sigmoid(x);
        return s * (1.0 - s);
      });
  }
  return pre;
}

void check_finite(const Matrix& m, std::size_t layer) {
  if (!m.allFinite()) throw NumericalError("non-finite activation in layer " + std::to_string(layer));
}

Matrix uniform(Index rows, Index cols, double limit, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-limit, limit);
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = dist(rng);
  return m;
}

double init_limit(Index fan_in, Activation act) {
  const double gain = act == Activation::relu ? 6.0 : 3.0;
  return std::sqrt(gain / static_cast<double>(fan_in));
}

// --- dense ---------------------------------------------------------------

Matrix dense_forward(const DenseLayer& l, const Matrix& x, DenseCache& cache) {
  cache.input = x;
  cache.pre = x * l.weight;
  cache.pre.rowwise() += l.bias.row(0);
  return activate(cache.pre, l.activation);
}

Matrix dense_backward(const DenseLayer& l, const DenseCache& cache, const Matrix& dy,
                      std::vector<Matrix>& grads) {
  const Matrix dpre = dy.cwiseProduct(activation_grad(cache.pre, l.activation));
  grads.push_back(cache.input.transpose() * dpre);
  grads.push_back(dpre.colwise().sum());
  return dpre * l.weight.transpose();
}

// --- conv1d --------------------------------------------------------------

Matrix conv_forward(const Conv1dLayer& l, const Matrix& x, Conv1dCache& cache) {
  const Index batch = x.rows(), T = l.seq_len, C = l.in_channels, K = l.kernel;
  const Index pad = (K - 1) / 2;
  cache.columns = Matrix::Zero(batch * T, K * C);
  for (Index b = 0; b < batch; ++b)
    for (Index t = 0; t < T; ++t)
      for (Index k = 0; k < K; ++k) {
        const Index src = t + k - pad;
        if (src < 0 || src >= T) continue;
        cache.columns.block(b * T + t, k * C, 1, C) = x.block(b, src * C, 1, C);
      }
  cache.pre = cache.columns * l.weight;
  cache.pre.rowwise() += l.bias.row(0);
  const Matrix y = activate(cache.pre, l.activation);
  return Eigen::Map<const Matrix>(y.data(), batch, T * l.weight.cols());
}

Matrix conv_backward(const Conv1dLayer& l, const Conv1dCache& cache, const Matrix& dy,
                     std::vector<Matrix>& grads) {
  const Index T = l.seq_len, C = l.in_channels, K = l.kernel, out = l.weight.cols();
  const Index batch = dy.rows();
  const Index pad = (K - 1) / 2;
  const Matrix dy_rows = Eigen::Map<const Matrix>(dy.data(), batch * T, out);
  const Matrix dpre = dy_rows.cwiseProduct(activation_grad(cache.pre, l.activation));
  grads.push_back(cache.columns.transpose() * dpre);
  grads.push_back(dpre.colwise().sum());
  const Matrix dcols = dpre * l.weight.transpose();
  Matrix dx = Matrix::Zero(batch, T * C);
  for (Index b = 0; b < batch; ++b)
    for (Index t = 0; t < T; ++t)
      for (Index k = 0; k < K; ++k) {
        const Index src = t + k - pad;
        if (src < 0 || src >= T) continue;
        dx.block(b, src * C, 1, C) += dcols.block(b * T + t, k * C, 1, C);
      }
  return dx;
}

// --- lstm ----------------------------------------------------------------

Matrix lstm_forward(const LstmLayer& l, const Matrix& x, LstmCache& cache) {
  const Index batch = x.rows(), H = l.hidden, C = l.in_channels, T = l.seq_len;
  cache.input = x;
  cache.gates.clear();
  cache.cells.clear();
  cache.hiddens.clear();
  Matrix h = Matrix::Zero(batch, H);
  Matrix c = Matrix::Zero(batch, H);
  for (Index t = 0; t < T; ++t) {
    Matrix a = x.middleCols(t * C, C) * l.input_weight + h * l.recurrent_weight;
    a.rowwise() += l.bias.row(0);
    Matrix gates(batch, 4 * H);
    gates.leftCols(2 * H) = a.leftCols(2 * H).unaryExpr([](double v) { return sigmoid(v); });
    gates.middleCols(2 * H, H) = a.middleCols(2 * H, H).array().tanh().matrix();
    gates.rightCols(H) = a.rightCols(H).unaryExpr([](double v) { return sigmoid(v); });
    c = gates.middleCols(H, H).cwiseProduct(c) + gates.leftCols(H).cwiseProduct(gates.middleCols(2 * H, H));
    h = gates.rightCols(H).cwiseProduct(c.array().tanh().matrix());
    cache.gates.push_back(std::move(gates));
    cache.cells.push_back(c);
    cache.hiddens.push_back(h);
  }
  if (!l.return_sequences) return h;
  Matrix out(batch, T * H);
  for (Index t = 0; t < T; ++t) out.middleCols(t * H, H) = cache.hiddens[static_cast<std::size_t>(t)];
  return out;
}

Matrix lstm_backward(const LstmLayer& l, const LstmCache& cache, const Matrix& dy,
                     std::vector<Matrix>& grads) {
  const Index batch = dy.rows(), H = l.hidden, C = l.in_channels, T = l.seq_len;
  Matrix d_wx = Matrix::Zero(l.input_weight.rows(), l.input_weight.cols());
  Matrix d_wh = Matrix::Zero(l.recurrent_weight.rows(), l.recurrent_weight.cols());
  Matrix d_b = Matrix::Zero(1, l.bias.cols());
  Matrix dx = Matrix::Zero(batch, T * C);
  Matrix dh_next = Matrix::Zero(batch, H);
  Matrix dc_next = Matrix::Zero(batch, H);
  const Matrix zeros = Matrix::Zero(batch, H);
  for (Index t = T - 1; t >= 0; --t) {
    const auto ts = static_cast<std::size_t>(t);
    Matrix dh = dh_next;
    if (l.return_sequences)
      dh += dy.middleCols(t * H, H);
    else if (t == T - 1)
      dh += dy;
    const Matrix& gates = cache.gates[ts];
    const auto i = gates.leftCols(H).array();
    const auto f = gates.middleCols(H, H).array();
    const auto g = gates.middleCols(2 * H, H).array();
    const auto o = gates.rightCols(H).array();
    const Array tanh_c = cache.cells[ts].array().tanh();
    const Matrix& c_prev = t > 0 ? cache.cells[ts - 1] : zeros;
    const Matrix& h_prev = t > 0 ? cache.hiddens[ts - 1] : zeros;

    const Array dc = dc_next.array() + dh.array() * o * (1.0 - tanh_c.square());
    Matrix da(batch, 4 * H);
    da.leftCols(H) = (dc * g * i * (1.0 - i)).matrix();
    da.middleCols(H, H) = (dc * c_prev.array() * f * (1.0 - f)).matrix();
    da.middleCols(2 * H, H) = (dc * i * (1.0 - g.square())).matrix();
    da.rightCols(H) = (dh.array() * tanh_c * o * (1.0 - o)).matrix();
    dc_next = (dc * f).matrix();

    d_wx += cache.input.middleCols(t * C, C).transpose() * da;
    d_wh += h_prev.transpose() * da;
    d_b += da.colwise().sum();
    dx.middleCols(t * C, C) = da * l.input_weight.transpose();
    dh_next = da * l.recurrent_weight.transpose();
  }
  grads.push_back(std::move(d_wx));
  grads.push_back(std::move(d_wh));
  grads.push_back(std::move(d_b));
  return dx;
}

}  // namespace

double sigmoid(double x) { return 0.5 * (1.0 + std::tanh(0.5 * x)); }

Tensor::Tensor(std::vector<Index> shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  Index n = 1;
  for (Index d : shape_) {
    if (d < 0) throw ValidationError("tensor dimension must be non-negative");
    n *= d;
  }
  if (n != static_cast<Index>(values_.size()))
    throw ValidationError("tensor value count does not match shape");
  for (double v : values_)
    if (!std::isfinite(v)) throw NumericalError("tensor holds a non-finite value");
}

Tensor Tensor::from_matrix(const Matrix& m) {
  return Tensor({m.rows(), m.cols()}, std::vector<double>(m.data(), m.data() + m.size()));
}

Matrix Tensor::as_matrix() const {
  if (shape_.empty()) throw ValidationError("scalar tensor has no batch dimension");
  const Index rows = shape_.front();
  const Index cols = rows == 0 ? 0 : size() / rows;
  return Eigen::Map<const Matrix>(values_.data(), rows, cols);
}

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::dense:
      return "dense";
    case LayerKind::conv1d:
      return "conv1d";
    case LayerKind::lstm:
      return "lstm";
    case LayerKind::softmax:
      return "softmax";
  }
  return "?";
}

std::string to_string(Activation act) {
  switch (act) {
    case Activation::identity:
      return "identity";
    case Activation::relu:
      return "relu";
    case Activation::tanh:
      return "tanh";
    case Activation::sigmoid:
      return "sigmoid";
  }
  return "?";
}

ModelGraph::ModelGraph(InputShape input, std::vector<LayerSpec> specs, std::uint64_t seed)
    : input_(input), specs_(std::move(specs)) {
  if (input_.seq_len < 0 || input_.channels < 0 || input_.tail < 0 || input_.width() <= 0)
    throw ValidationError("input shape must have positive width");
  if (specs_.empty() || specs_.back().kind != LayerKind::softmax)
    throw ValidationError("model must end with a softmax layer");
  std::mt19937_64 rng(seed);
  Index T = input_.seq_len, C = input_.channels;
  Index width = 0;
  bool sequence_stage = true;
  for (std::size_t i = 0; i < specs_.size(); ++i) {
    const LayerSpec& s = specs_[i];
    if (s.units <= 0) throw ValidationError("layer " + std::to_string(i) + ": units must be positive");
    if (s.kind == LayerKind::softmax && i + 1 != specs_.size())
      throw ValidationError("softmax is only allowed as the terminal layer");
    const bool is_sequence = s.kind == LayerKind::conv1d || s.kind == LayerKind::lstm;
    if (is_sequence) {
      if (!sequence_stage) throw ValidationError("layer " + std::to_string(i) + ": sequence layer after dense");
      if (T <= 0 || C <= 0) throw ValidationError("layer " + std::to_string(i) + ": input has no sequence part");
    } else if (sequence_stage) {
      sequence_stage = false;
      dense_start_ = i;
      width = T * C + input_.tail;
    }
    switch (s.kind) {
      case LayerKind::conv1d: {
        if (s.kernel <= 0) throw ValidationError("conv1d kernel must be positive");
        Conv1dLayer l;
        l.kernel = s.kernel;
        l.in_channels = C;
        l.seq_len = T;
        l.activation = s.activation;
        l.weight = uniform(s.kernel * C, s.units, init_limit(s.kernel * C, s.activation), rng);
        l.bias = Matrix::Zero(1, s.units);
        layers_.emplace_back(std::move(l));
        C = s.units;
        break;
      }
      case LayerKind::lstm: {
        LstmLayer l;
        l.hidden = s.units;
        l.in_channels = C;
        l.seq_len = T;
        l.return_sequences = s.return_sequences;
        l.input_weight = uniform(C, 4 * s.units, init_limit(C, Activation::tanh), rng);
        l.recurrent_weight = uniform(s.units, 4 * s.units, init_limit(s.units, Activation::tanh), rng);
        l.bias = Matrix::Zero(1, 4 * s.units);
        l.bias.middleCols(s.units, s.units).setOnes();  // forget gate
        layers_.emplace_back(std::move(l));
        C = s.units;
        if (!s.return_sequences) T = 1;
        break;
      }
      case LayerKind::dense:
      case LayerKind::softmax: {
        DenseLayer l;
        l.activation = s.kind == LayerKind::softmax ? Activation::identity : s.activation;
        l.weight = uniform(width, s.units, init_limit(width, l.activation), rng);
        l.bias = Matrix::Zero(1, s.units);
        layers_.emplace_back(std::move(l));
        width = s.units;
        break;
      }
    }
  }
}

Index ModelGraph::output_size() const { return specs_.empty() ? 0 : specs_.back().units; }

std::vector<NamedParam> ModelGraph::parameters() {
  std::vector<NamedParam> out;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string prefix = "l" + std::to_string(i) + "." + to_string(specs_[i].kind) + ".";
    std::visit(Overloaded{
                   [&](DenseLayer& l) {
                     out.push_back({prefix + "weight", &l.weight});
                     out.push_back({prefix + "bias", &l.bias});
                   },
                   [&](Conv1dLayer& l) {
                     out.push_back({prefix + "weight", &l.weight});
                     out.push_back({prefix + "bias", &l.bias});
                   },
                   [&](LstmLayer& l) {
                     out.push_back({prefix + "input_weight", &l.input_weight});
                     out.push_back({prefix + "recurrent_weight", &l.recurrent_weight});
                     out.push_back({prefix + "bias", &l.bias});
                   },
               },
               layers_[i]);
  }
  return out;
}

std::vector<std::string> ModelGraph::parameter_names() const {
  std::vector<std::string> names;
  for (auto& p : const_cast<ModelGraph*>(this)->parameters()) names.push_back(p.name);
  return names;
}

std::vector<const Matrix*> ModelGraph::parameter_values() const {
  std::vector<const Matrix*> values;
  for (auto& p : const_cast<ModelGraph*>(this)->parameters()) values.push_back(p.value);
  return values;
}

std::size_t ModelGraph::parameter_count() const {
  std::size_t n = 0;
  for (const Matrix* m : parameter_values()) n += static_cast<std::size_t>(m->size());
  return n;
}

ForwardPass forward(const ModelGraph& model, const Matrix& batch) {
  const InputShape& in = model.input_shape();
  if (batch.cols() != in.width())
    throw ValidationError("input width " + std::to_string(batch.cols()) + " does not match model width " +
                          std::to_string(in.width()));
  if (!batch.allFinite()) throw NumericalError("input batch holds non-finite values");
  ForwardPass pass;
  ForwardCache& cache = pass.cache;
  cache.revision = model.revision();
  cache.batch = batch.rows();
  const Index seq_cols = in.seq_len * in.channels;
  cache.tail = batch.rightCols(in.tail);
  Matrix x = batch.leftCols(seq_cols);
  const auto& layers = model.layers();
  cache.layers.reserve(layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (i == model.dense_start() && in.tail > 0) {
      Matrix joined(x.rows(), x.cols() + in.tail);
      joined << x, cache.tail;
      x = std::move(joined);
    }
    x = std::visit(Overloaded{
                       [&](const DenseLayer& l) -> Matrix {
                         DenseCache c;
                         Matrix y = dense_forward(l, x, c);
                         cache.layers.emplace_back(std::move(c));
                         return y;
                       },
                       [&](const Conv1dLayer& l) -> Matrix {
                         Conv1dCache c;
                         Matrix y = conv_forward(l, x, c);
                         cache.layers.emplace_back(std::move(c));
                         return y;
                       },
                       [&](const LstmLayer& l) -> Matrix {
                         LstmCache c;
                         Matrix y = lstm_forward(l, x, c);
                         cache.layers.emplace_back(std::move(c));
                         return y;
                       },
                   },
                   layers[i]);
    check_finite(x, i);
  }
  pass.logits = std::move(x);
  return pass;
}

ForwardPass forward(const ModelGraph& model, const Tensor& batch) { return forward(model, batch.as_matrix()); }

Gradients backward(const ModelGraph& model, const ForwardCache& cache, const Matrix& logit_grad) {
  const auto& layers = model.layers();
  if (cache.revision != model.revision() || cache.layers.size() != layers.size())
    throw std::invalid_argument("stale cache: forward pass does not match the current model");
  if (logit_grad.rows() != cache.batch || logit_grad.cols() != model.output_size())
    throw ValidationError("loss gradient shape does not match the forward pass");
  const InputShape& in = model.input_shape();
  const Index seq_cols = in.seq_len * in.channels;

  std::vector<std::vector<Matrix>> per_layer(layers.size());
  Matrix dy = logit_grad;
  Matrix d_tail = Matrix::Zero(cache.batch, in.tail);
  for (std::size_t k = layers.size(); k-- > 0;) {
    dy = std::visit(Overloaded{
                        [&](const DenseLayer& l) -> Matrix {
                          return dense_backward(l, std::get<DenseCache>(cache.layers[k]), dy, per_layer[k]);
                        },
                        [&](const Conv1dLayer& l) -> Matrix {
                          return conv_backward(l, std::get<Conv1dCache>(cache.layers[k]), dy, per_layer[k]);
                        },
                        [&](const LstmLayer& l) -> Matrix {
                          return lstm_backward(l, std::get<LstmCache>(cache.layers[k]), dy, per_layer[k]);
                        },
                    },
                    layers[k]);
    if (k == model.dense_start() && in.tail > 0) {
      d_tail = dy.rightCols(in.tail);
      Matrix seq = dy.leftCols(dy.cols() - in.tail);
      dy = std::move(seq);
    }
  }
  Gradients g;
  for (auto& layer_grads : per_layer)
    for (auto& m : layer_grads) g.params.push_back(std::move(m));
  g.input.resize(cache.batch, in.width());
  g.input.leftCols(seq_cols) = dy;
  g.input.rightCols(in.tail) = d_tail;
  return g;
}

Matrix softmax(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (Index r = 0; r < logits.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    const RowVector e = (logits.row(r).array() - m).exp().matrix();
    p.row(r) = e / e.sum();
  }
  return p;
}

LossResult cross_entropy(const Matrix& logits, std::span<const int> labels) {
  if (static_cast<Index>(labels.size()) != logits.rows())
    throw ValidationError("label count does not match batch size");
  Matrix one_hot = Matrix::Zero(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= logits.cols())
      throw ValidationError("label " + std::to_string(labels[i]) + " out of range");
    one_hot(static_cast<Index>(i), labels[i]) = 1.0;
  }
  return cross_entropy(logits, one_hot);
}

LossResult cross_entropy(const Matrix& logits, const Matrix& one_hot) {
  if (one_hot.rows() != logits.rows() || one_hot.cols() != logits.cols())
    throw ValidationError("one-hot labels do not match logits shape");
  if (logits.rows() == 0) throw ValidationError("cross entropy of an empty batch");
  LossResult out;
  out.grad.resize(logits.rows(), logits.cols());
  double total = 0.0;
  for (Index r = 0; r < logits.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    const double lse = m + std::log((logits.row(r).array() - m).exp().sum());
    total += (one_hot.row(r).array() * (lse - logits.row(r).array())).sum();
    out.grad.row(r) = ((logits.row(r).array() - lse).exp() * one_hot.row(r).sum() - one_hot.row(r).array()).matrix();
  }
  const double n = static_cast<double>(logits.rows());
  out.loss = total / n;
  out.grad /= n;
  return out;
}

OptimizerState OptimizerState::adam(const ModelGraph& model, double learning_rate, std::uint64_t seed) {
  OptimizerState s;
  s.learning_rate = learning_rate;
  s.seed = seed;
  for (const Matrix* p : model.parameter_values()) {
    s.first_moment.push_back(Matrix::Zero(p->rows(), p->cols()));
    s.second_moment.push_back(Matrix::Zero(p->rows(), p->cols()));
  }
  return s;
}

void adam_update(ModelGraph& model, OptimizerState& opt, const std::vector<Matrix>& grads) {
  auto params = model.parameters();
  if (grads.size() != params.size() || opt.first_moment.size() != params.size())
    throw ValidationError("optimizer state does not match model parameters");
  ++opt.step;
  const double t = static_cast<double>(opt.step);
  const double c1 = 1.0 - std::pow(opt.beta1, t);
  const double c2 = 1.0 - std::pow(opt.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& m = opt.first_moment[i];
    Matrix& v = opt.second_moment[i];
    m = opt.beta1 * m + (1.0 - opt.beta1) * grads[i];
    v = opt.beta2 * v + (1.0 - opt.beta2) * grads[i].cwiseAbs2();
    params[i].value->array() -=
        opt.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + opt.epsilon);
  }
  model.touch();
}

double train_step(ModelGraph& model, OptimizerState& opt, const Matrix& batch, std::span<const int> labels) {
  ForwardPass pass = forward(model, batch);
  LossResult loss = cross_entropy(pass.logits, labels);
  if (!std::isfinite(loss.loss))
    throw NumericalError("divergence: loss is " + std::to_string(loss.loss) + " at step " +
                         std::to_string(opt.step + 1));
  Gradients g = backward(model, pass.cache, loss.grad);
  adam_update(model, opt, g.params);
  return loss.loss;
}

// --- weight files ----------------------------------------------------------

std::vector<std::uint8_t> serialize_weights(const ModelGraph& model) {
  io::ByteWriter w;
  w.bytes(std::string_view(kWeightsMagic, 8));
  w.u32(kWeightsVersion);
  const InputShape& in = model.input_shape();
  w.u32(static_cast<std::uint32_t>(in.seq_len));
  w.u32(static_cast<std::uint32_t>(in.channels));
  w.u32(static_cast<std::uint32_t>(in.tail));
  w.u32(static_cast<std::uint32_t>(model.specs().size()));
  for (const LayerSpec& s : model.specs()) {
    w.u8(static_cast<std::uint8_t>(s.kind));
    w.u8(static_cast<std::uint8_t>(s.activation));
    w.u8(s.return_sequences ? 1 : 0);
    w.u32(static_cast<std::uint32_t>(s.units));
    w.u32(static_cast<std::uint32_t>(s.kernel));
  }
  const auto names = model.parameter_names();
  const auto values = model.parameter_values();
  w.u32(static_cast<std::uint32_t>(names.size()));
  for (std::size_t i = 0; i < names.size(); ++i) {
    w.str(names[i]);
    w.u8(1);  // dtype: float64
    w.u32(2);
    w.u32(static_cast<std::uint32_t>(values[i]->rows()));
    w.u32(static_cast<std::uint32_t>(values[i]->cols()));
    for (Index k = 0; k < values[i]->size(); ++k) w.f64(values[i]->data()[k]);
  }
  return w.finish();
}

void save_weights(const ModelGraph& model, const std::filesystem::path& path) {
  io::write_file_atomic(path, serialize_weights(model));
}

ModelGraph deserialize_weights(std::vector<std::uint8_t> bytes) {
  io::ByteReader r(std::move(bytes), "weight file");
  if (r.bytes(8) != std::string(kWeightsMagic, 8)) throw FormatError("weight file: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kWeightsVersion)
    throw FormatError("weight file: version mismatch (file " + std::to_string(version) + ", expected " +
                      std::to_string(kWeightsVersion) + ")");
  InputShape in;
  in.seq_len = r.u32();
  in.channels = r.u32();
  in.tail = r.u32();
  const std::uint32_t n_specs = r.u32();
  std::vector<LayerSpec> specs;
  for (std::uint32_t i = 0; i < n_specs; ++i) {
    LayerSpec s;
    const auto kind = r.u8();
    const auto act = r.u8();
    if (kind > 3 || act > 3) throw FormatError("weight file: unknown layer kind or activation");
    s.kind = static_cast<LayerKind>(kind);
    s.activation = static_cast<Activation>(act);
    s.return_sequences = r.u8() != 0;
    s.units = r.u32();
    s.kernel = r.u32();
    specs.push_back(s);
  }
  ModelGraph model(in, specs, 0);
  auto params = model.parameters();
  const std::uint32_t n_params = r.u32();
  if (n_params != params.size()) throw FormatError("weight file: parameter count mismatch");
  for (auto& p : params) {
    const std::string name = r.str();
    if (name != p.name) throw FormatError("weight file: expected parameter " + p.name + ", found " + name);
    if (r.u8() != 1) throw FormatError("weight file: unsupported dtype for " + name);
    if (r.u32() != 2) throw FormatError("weight file: unsupported rank for " + name);
    const Index rows = r.u32();
    const Index cols = r.u32();
    if (rows != p.value->rows() || cols != p.value->cols())
      throw FormatError("weight file: shape mismatch for " + name);
    for (Index k = 0; k < p.value->size(); ++k) p.value->data()[k] = r.f64();
  }
  if (!r.at_end()) throw FormatError("weight file: trailing bytes");
  model.touch();
  return model;
}

ModelGraph load_weights(const std::filesystem::path& path) { return deserialize_weights(io::read_file(path)); }

ModelGraph load_weights(const std::filesystem::path& path, const InputShape& input,
                        const std::vector<LayerSpec>& specs) {
  ModelGraph loaded = load_weights(path);
  const auto describe = [](const LayerSpec& s) {
    std::string d = to_string(s.kind) + "(" + std::to_string(s.units);
    if (s.kind == LayerKind::conv1d) d += ", kernel " + std::to_string(s.kernel);
    return d + ")";
  };
  if (!(loaded.input_shape() == input))
    throw FormatError("shape mismatch at input: file has width " + std::to_string(loaded.input_shape().width()) +
                      ", expected " + std::to_string(input.width()));
  const std::size_t n = std::max(specs.size(), loaded.specs().size());
  for (std::size_t i = 0; i < n; ++i) {
    if (i >= specs.size() || i >= loaded.specs().size() || !(specs[i] == loaded.specs()[i])) {
      const std::string expected = i < specs.size() ? describe(specs[i]) : "nothing";
      const std::string found = i < loaded.specs().size() ? describe(loaded.specs()[i]) : "nothing";
      throw FormatError("shape mismatch at layer " + std::to_string(i) + ": expected " + expected + ", file has " +
                        found);
    }
  }
  return loaded;
}

}  // namespace tuap::nn
