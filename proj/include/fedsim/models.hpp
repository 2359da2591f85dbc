// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fedsim/autograd.hpp"
#include "fedsim/rng.hpp"
#include "fedsim/sgd.hpp"
#include "fedsim/tensor.hpp"

namespace fedsim {

enum class ModelKind { mlp, cnn };

// Architecture shared by the teacher and the student.
//
// mlp: flatten -> hidden[0] -> ... -> rep_dim, ReLU after every layer.
// cnn: one block per entry of `hidden` (3x3 conv, pad 1, ReLU, 2x2 max pool,
//      entry = output channels), then flatten -> rep_dim with ReLU.
// The head is a single affine layer rep_dim -> classes.
struct ModelConfig {
  ModelKind kind = ModelKind::mlp;
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::vector<std::size_t> hidden{512};
  std::size_t rep_dim = 256;
  std::size_t aux_dim = 0;  // 0 selects rep_dim (square auxiliary matrix)
  std::size_t classes = 10;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t input_size() const noexcept { return channels * height * width; }
  std::size_t aux_columns() const noexcept { return aux_dim ? aux_dim : rep_dim; }
};

std::string to_string(ModelKind kind);

// Parameter shapes in canonical order: backbone layers (weight, bias) then
// the head (weight [rep_dim x classes], bias [classes]). Linear weights are
// stored [in x out]; conv kernels [out x in x 3 x 3].
std::vector<Shape> parameter_shapes(const ModelConfig& config);

struct Network {
  std::vector<Tensor> params;

  std::span<const Tensor> backbone() const { return {params.data(), params.size() - 2}; }
  std::span<const Tensor> head() const { return {params.data() + params.size() - 2, 2}; }
  std::vector<Shape> shapes() const;
  std::size_t scalar_count() const noexcept;
};

// Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases.
Network init_network(const ModelConfig& config, Rng& rng);

struct ClientModels {
  Network teacher;
  Network student;
  Tensor aux;  // [rep_dim x aux_columns], shared by both representation losses
  SgdState teacher_opt;
  SgdState student_opt;
  SgdState aux_opt;
  Rng rng;  // redraws collapsed auxiliary columns
};

// Teacher, student and auxiliary matrix come from independent sub-streams of
// client_seed. The auxiliary matrix starts column-orthonormal.
ClientModels init_models(const ModelConfig& config, std::uint64_t client_seed,
                         double learning_rate = 1e-3, double momentum = 0.0);

// Column-orthonormal [rows x cols] matrix from the QR factor of a Gaussian draw.
Tensor orthonormal_columns(std::size_t rows, std::size_t cols, Rng& rng);

// Scales every column to unit L2 norm; exactly-zero columns are redrawn first.
void renormalize_columns(Tensor& matrix, Rng& rng);
void renormalize_aux(ClientModels& models);

std::vector<Var> bind_parameters(Graph& g, std::span<const Tensor> params, bool trainable);

// Representation H [N x rep_dim] for a batch [N x C x H x W].
Var backbone_forward(Graph& g, const ModelConfig& config, std::span<const Var> backbone,
                     Var batch);
// Logits [N x classes]; softmax is left to the loss.
Var head_forward(Graph& g, std::span<const Var> head, Var rep);

Tensor backbone_forward(const ModelConfig& config, std::span<const Tensor> backbone,
                        const Tensor& batch);
Tensor head_forward(std::span<const Tensor> head, const Tensor& rep);
Tensor predict_logits(const ModelConfig& config, const Network& net, const Tensor& batch);

// Checkpoints reuse the packet container with every tensor stored raw.
void save_checkpoint(const std::filesystem::path& path, const Network& net);
Network load_checkpoint(const std::filesystem::path& path, const ModelConfig& config);

}  // namespace fedsim
