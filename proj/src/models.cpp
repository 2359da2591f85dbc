// SPDX-License-Identifier: Apache-2.0
#include "fedsim/models.hpp"

#include <cmath>

#include "fedsim/errors.hpp"
#include "fedsim/gpd.hpp"
#include "fedsim/kernels.hpp"

namespace fedsim {

void ModelConfig::validate() const {
  if (channels == 0 || height == 0 || width == 0) {
    throw ConfigError("model input shape must be positive");
  }
  if (rep_dim < 1) throw ConfigError("model rep_dim must be >= 1");
  if (classes < 2) throw ConfigError("model needs at least 2 classes");
  for (std::size_t w : hidden) {
    if (w < 1) throw ConfigError("model hidden widths must be >= 1");
  }
  if (aux_columns() > rep_dim) {
    throw ConfigError("aux_dim cannot exceed rep_dim (columns must be orthonormal)");
  }
  if (kind == ModelKind::cnn) {
    std::size_t h = height, w = width;
    for (std::size_t i = 0; i < hidden.size(); ++i) {
      h /= 2;
      w /= 2;
      if (h == 0 || w == 0) throw ConfigError("cnn input too small for the number of pooling blocks");
    }
  }
}

std::string to_string(ModelKind kind) { return kind == ModelKind::mlp ? "mlp" : "cnn"; }

std::vector<Shape> parameter_shapes(const ModelConfig& config) {
  config.validate();
  std::vector<Shape> shapes;
  if (config.kind == ModelKind::mlp) {
    std::size_t in = config.input_size();
    for (std::size_t w : config.hidden) {
      shapes.push_back({in, w});
      shapes.push_back({w});
      in = w;
    }
    shapes.push_back({in, config.rep_dim});
    shapes.push_back({config.rep_dim});
  } else {
    std::size_t c = config.channels, h = config.height, w = config.width;
    for (std::size_t f : config.hidden) {
      shapes.push_back({f, c, 3, 3});
      shapes.push_back({f});
      c = f;
      h /= 2;
      w /= 2;
    }
    shapes.push_back({c * h * w, config.rep_dim});
    shapes.push_back({config.rep_dim});
  }
  shapes.push_back({config.rep_dim, config.classes});
  shapes.push_back({config.classes});
  return shapes;
}

std::vector<Shape> Network::shapes() const {
  std::vector<Shape> out;
  out.reserve(params.size());
  for (const Tensor& p : params) out.push_back(p.shape());
  return out;
}

std::size_t Network::scalar_count() const noexcept {
  std::size_t n = 0;
  for (const Tensor& p : params) n += p.size();
  return n;
}

Network init_network(const ModelConfig& config, Rng& rng) {
  Network net;
  for (const Shape& shape : parameter_shapes(config)) {
    Tensor t(shape);
    if (shape.size() > 1) {
      const std::size_t fan_in = shape.size() == 2 ? shape[0] : shape[1] * shape[2] * shape[3];
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (double& v : t.values()) v = dist(rng);
    }
    net.params.push_back(std::move(t));
  }
  return net;
}

Tensor orthonormal_columns(std::size_t rows, std::size_t cols, Rng& rng) {
  if (cols > rows) throw ContractError("orthonormal_columns: more columns than rows");
  std::normal_distribution<double> gauss(0.0, 1.0);
  // Column-major scratch for modified Gram-Schmidt.
  std::vector<double> q(rows * cols);
  for (double& v : q) v = gauss(rng);
  for (std::size_t j = 0; j < cols; ++j) {
    double* qj = q.data() + j * rows;
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t i = 0; i < j; ++i) {
        const double* qi = q.data() + i * rows;
        const double r = kernels::dot(rows, qi, qj);
        for (std::size_t k = 0; k < rows; ++k) qj[k] -= r * qi[k];
      }
    }
    double n = std::sqrt(kernels::dot(rows, qj, qj));
    while (n < 1e-8) {  // measure-zero event; redraw the column
      for (std::size_t k = 0; k < rows; ++k) qj[k] = gauss(rng);
      n = std::sqrt(kernels::dot(rows, qj, qj));
    }
    for (std::size_t k = 0; k < rows; ++k) qj[k] /= n;
  }
  Tensor out({rows, cols});
  for (std::size_t j = 0; j < cols; ++j)
    for (std::size_t k = 0; k < rows; ++k) out.at(k, j) = q[j * rows + k];
  return out;
}

ClientModels init_models(const ModelConfig& config, std::uint64_t client_seed,
                         double learning_rate, double momentum) {
  config.validate();
  Rng teacher_rng = make_rng(client_seed, {tag(Stream::teacher_init)});
  Rng student_rng = make_rng(client_seed, {tag(Stream::student_init)});
  Rng aux_rng = make_rng(client_seed, {tag(Stream::aux_init)});
  ClientModels models{init_network(config, teacher_rng),
                      init_network(config, student_rng),
                      orthonormal_columns(config.rep_dim, config.aux_columns(), aux_rng),
                      SgdState(learning_rate, momentum),
                      SgdState(learning_rate, momentum),
                      SgdState(learning_rate, momentum),
                      make_rng(client_seed, {tag(Stream::aux_redraw)})};
  return models;
}

void renormalize_columns(Tensor& matrix, Rng& rng) {
  if (matrix.rank() != 2) throw DimensionError("renormalize_columns: expected a matrix");
  const std::size_t rows = matrix.dim(0), cols = matrix.dim(1);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (std::size_t j = 0; j < cols; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < rows; ++i) s += matrix.at(i, j) * matrix.at(i, j);
    while (s == 0.0) {
      for (std::size_t i = 0; i < rows; ++i) {
        matrix.at(i, j) = gauss(rng);
        s += matrix.at(i, j) * matrix.at(i, j);
      }
    }
    const double n = std::sqrt(s);
    if (n == 1.0) continue;
    for (std::size_t i = 0; i < rows; ++i) matrix.at(i, j) /= n;
  }
}

void renormalize_aux(ClientModels& models) { renormalize_columns(models.aux, models.rng); }

std::vector<Var> bind_parameters(Graph& g, std::span<const Tensor> params, bool trainable) {
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const Tensor& p : params) vars.push_back(trainable ? g.parameter(p) : g.constant(p));
  return vars;
}

namespace {

void check_batch(const ModelConfig& config, const Tensor& batch) {
  const Shape expected{config.channels, config.height, config.width};
  if (batch.rank() != 4 || Shape(batch.shape().begin() + 1, batch.shape().end()) != expected) {
    throw DimensionError("batch shape " + shape_string(batch.shape()) + " does not match model input " +
                         shape_string(expected));
  }
}

}  // namespace

Var backbone_forward(Graph& g, const ModelConfig& config, std::span<const Var> backbone, Var batch) {
  const Tensor& x = g.value(batch);
  check_batch(config, x);
  const std::size_t n = x.dim(0);
  const std::size_t layers = parameter_shapes(config).size() / 2 - 1;
  if (backbone.size() != 2 * layers) {
    throw DimensionError("backbone expects " + std::to_string(2 * layers) + " parameters, got " +
                         std::to_string(backbone.size()));
  }
  Var h = batch;
  if (config.kind == ModelKind::mlp) {
    h = ag::reshape(g, h, {n, config.input_size()});
    for (std::size_t l = 0; l < layers; ++l) {
      h = ag::relu(g, ag::add_bias(g, ag::matmul(g, h, backbone[2 * l]), backbone[2 * l + 1]));
    }
    return h;
  }
  for (std::size_t l = 0; l + 1 < layers; ++l) {
    h = ag::conv2d(g, h, backbone[2 * l], 1, 1);
    h = ag::relu(g, ag::add_channel_bias(g, h, backbone[2 * l + 1]));
    h = ag::max_pool2d(g, h, 2);
  }
  const Tensor& fm = g.value(h);
  h = ag::reshape(g, h, {n, fm.size() / n});
  const std::size_t last = 2 * (layers - 1);
  return ag::relu(g, ag::add_bias(g, ag::matmul(g, h, backbone[last]), backbone[last + 1]));
}

Var head_forward(Graph& g, std::span<const Var> head, Var rep) {
  if (head.size() != 2) throw DimensionError("head expects 2 parameters");
  return ag::add_bias(g, ag::matmul(g, rep, head[0]), head[1]);
}

Tensor backbone_forward(const ModelConfig& config, std::span<const Tensor> backbone,
                        const Tensor& batch) {
  Graph g;
  const auto vars = bind_parameters(g, backbone, false);
  return g.value(backbone_forward(g, config, vars, g.constant(batch)));
}

Tensor head_forward(std::span<const Tensor> head, const Tensor& rep) {
  Graph g;
  const auto vars = bind_parameters(g, head, false);
  return g.value(head_forward(g, vars, g.constant(rep)));
}

Tensor predict_logits(const ModelConfig& config, const Network& net, const Tensor& batch) {
  Graph g;
  const auto vars = bind_parameters(g, net.params, false);
  const std::span<const Var> all(vars);
  const Var h = backbone_forward(g, config, all.first(vars.size() - 2), g.constant(batch));
  return g.value(head_forward(g, all.last(2), h));
}

void save_checkpoint(const std::filesystem::path& path, const Network& net) {
  CodecOptions raw;
  raw.alpha = 1.0;
  raw.force_raw = true;
  write_packet(path, encode_model(net.params, raw, PacketHeader{}));
}

Network load_checkpoint(const std::filesystem::path& path, const ModelConfig& config) {
  const GpdPacket packet = read_packet(path);
  const std::vector<Shape> shapes = parameter_shapes(config);
  return Network{decode_model(packet, shapes)};
}

}  // namespace fedsim
