#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace tuap::nn {

using Index = Eigen::Index;
/// Batch-major storage: one sample per row, features (time-major for
/// sequences) along the columns.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

/// Shape plus row-major values. Construction rejects non-finite values.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<Index> shape, std::vector<double> values);
  static Tensor from_matrix(const Matrix& m);

  const std::vector<Index>& shape() const { return shape_; }
  const std::vector<double>& values() const { return values_; }
  Index size() const { return static_cast<Index>(values_.size()); }
  /// First dimension as rows, the rest flattened.
  Matrix as_matrix() const;

 private:
  std::vector<Index> shape_;
  std::vector<double> values_;
};

enum class Activation : std::uint8_t { identity = 0, relu = 1, tanh = 2, sigmoid = 3 };
enum class LayerKind : std::uint8_t { dense = 0, conv1d = 1, lstm = 2, softmax = 3 };

/// `units` is the width (dense), output channels (conv1d), hidden size
/// (lstm) or class count (softmax, realised as an identity dense layer
/// producing logits).
struct LayerSpec {
  LayerKind kind = LayerKind::dense;
  Index units = 0;
  Activation activation = Activation::identity;
  Index kernel = 0;               // conv1d only
  bool return_sequences = false;  // lstm only

  static LayerSpec dense(Index units, Activation act) { return {LayerKind::dense, units, act, 0, false}; }
  static LayerSpec conv1d(Index channels, Index kernel, Activation act) {
    return {LayerKind::conv1d, channels, act, kernel, false};
  }
  static LayerSpec lstm(Index hidden, bool return_sequences) {
    return {LayerKind::lstm, hidden, Activation::identity, 0, return_sequences};
  }
  static LayerSpec softmax(Index classes) { return {LayerKind::softmax, classes, Activation::identity, 0, false}; }

  bool operator==(const LayerSpec&) const = default;
};

/// Flat input layout: `seq_len * channels` sequence columns (time-major)
/// followed by `tail` scalar columns. Sequence layers see only the
/// sequence; the tail joins after the flattened sequence stage.
struct InputShape {
  Index seq_len = 0;
  Index channels = 0;
  Index tail = 0;

  Index width() const { return seq_len * channels + tail; }
  bool operator==(const InputShape&) const = default;
};

struct DenseLayer {
  Matrix weight;  // in x out
  Matrix bias;    // 1 x out
  Activation activation = Activation::identity;
};

/// "Same" zero padding, stride 1. Weight rows are (kernel offset, in channel).
struct Conv1dLayer {
  Matrix weight;  // (kernel * in_channels) x out_channels
  Matrix bias;    // 1 x out_channels
  Index kernel = 0;
  Index in_channels = 0;
  Index seq_len = 0;
  Activation activation = Activation::identity;
};

/// Gate order along the 4H columns: input, forget, cell, output.
struct LstmLayer {
  Matrix input_weight;      // in x 4H
  Matrix recurrent_weight;  // H x 4H
  Matrix bias;              // 1 x 4H
  Index hidden = 0;
  Index in_channels = 0;
  Index seq_len = 0;
  bool return_sequences = false;
};

using Layer = std::variant<DenseLayer, Conv1dLayer, LstmLayer>;

struct DenseCache {
  Matrix input;
  Matrix pre;  // pre-activation
};
struct Conv1dCache {
  Matrix columns;  // (batch * seq) x (kernel * in)
  Matrix pre;
};
struct LstmCache {
  Matrix input;                  // batch x (seq * in)
  std::vector<Matrix> gates;     // per step, activated, batch x 4H
  std::vector<Matrix> cells;     // per step c_t
  std::vector<Matrix> hiddens;   // per step h_t
};
using LayerCache = std::variant<DenseCache, Conv1dCache, LstmCache>;

struct ForwardCache {
  std::uint64_t revision = 0;
  Index batch = 0;
  Matrix tail;  // tail columns of the input
  std::vector<LayerCache> layers;
};

struct ForwardPass {
  Matrix logits;
  ForwardCache cache;
};

struct Gradients {
  std::vector<Matrix> params;  // aligned with ModelGraph::parameter_names()
  Matrix input;
};

struct NamedParam {
  std::string name;
  Matrix* value;
};

/// Ordered layers plus their parameters. Sequence layers (conv1d, lstm)
/// come first, then dense layers, then exactly one terminal softmax.
class ModelGraph {
 public:
  ModelGraph() = default;
  ModelGraph(InputShape input, std::vector<LayerSpec> specs, std::uint64_t seed);

  const InputShape& input_shape() const { return input_; }
  const std::vector<LayerSpec>& specs() const { return specs_; }
  const std::vector<Layer>& layers() const { return layers_; }
  Index output_size() const;

  std::vector<NamedParam> parameters();
  std::vector<std::string> parameter_names() const;
  std::vector<const Matrix*> parameter_values() const;
  std::size_t parameter_count() const;

  /// Incremented whenever parameters change through the engine.
  std::uint64_t revision() const { return revision_; }
  void touch() { ++revision_; }

  /// Index of the first dense layer (where the tail joins).
  std::size_t dense_start() const { return dense_start_; }

 private:
  InputShape input_;
  std::vector<LayerSpec> specs_;
  std::vector<Layer> layers_;
  std::size_t dense_start_ = 0;
  std::uint64_t revision_ = 0;
};

ForwardPass forward(const ModelGraph& model, const Matrix& batch);
ForwardPass forward(const ModelGraph& model, const Tensor& batch);
Gradients backward(const ModelGraph& model, const ForwardCache& cache, const Matrix& logit_grad);

Matrix softmax(const Matrix& logits);

struct LossResult {
  double loss = 0.0;
  Matrix grad;  // d(mean loss)/d(logits)
};

/// Mean negative log-likelihood via log-sum-exp.
LossResult cross_entropy(const Matrix& logits, std::span<const int> labels);
LossResult cross_entropy(const Matrix& logits, const Matrix& one_hot);

double sigmoid(double x);

struct OptimizerState {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;
  std::uint64_t step = 0;
  std::uint64_t seed = 0;

  static OptimizerState adam(const ModelGraph& model, double learning_rate, std::uint64_t seed);
};

void adam_update(ModelGraph& model, OptimizerState& opt, const std::vector<Matrix>& grads);

/// One forward/backward/Adam update on a batch. Throws NumericalError if
/// the loss is not finite.
double train_step(ModelGraph& model, OptimizerState& opt, const Matrix& batch, std::span<const int> labels);

void save_weights(const ModelGraph& model, const std::filesystem::path& path);
std::vector<std::uint8_t> serialize_weights(const ModelGraph& model);
ModelGraph load_weights(const std::filesystem::path& path);
ModelGraph deserialize_weights(std::vector<std::uint8_t> bytes);
/// Loads and checks the file against an expected architecture; the error
/// names the first layer whose shape differs.
ModelGraph load_weights(const std::filesystem::path& path, const InputShape& input,
                        const std::vector<LayerSpec>& specs);

std::string to_string(LayerKind kind);
std::string to_string(Activation act);

}  // namespace tuap::nn
