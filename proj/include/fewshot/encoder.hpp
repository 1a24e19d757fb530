#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <vector>

#include "fewshot/clock.hpp"
#include "fewshot/dataset.hpp"
#include "fewshot/matrix.hpp"
#include "fewshot/rng.hpp"

namespace fewshot {

// Quarter turns clockwise, valid values 0..3.
using RotationLabel = uint8_t;

// Rotates a square raster clockwise by `quarter_turns` (taken mod 4).
// Non-square inputs raise ShapeError.
Raster rotate(const Raster& image, unsigned quarter_turns);

// One batch item expands to its four rotations (item-major, rotation-minor:
// item0 r0..r3, item1 r0..r3, ...). Class labels are copied onto every
// rotated copy.
struct AugmentedBatch {
  std::vector<Raster> images;
  std::vector<uint32_t> class_ids;       // global ids
  std::vector<RotationLabel> rot_labels;
};
AugmentedBatch augment_with_rotations(const LabeledDataset& ds, const Batch& batch);

MatrixF flatten(std::span<const Raster> images);

// Rows of flattened payload for the given items (rasters flattened row-major,
// embeddings copied).
MatrixF flatten_payloads(const LabeledDataset& ds, std::span<const uint32_t> items);

// Fully-connected encoder. The trunk maps input -> hidden... -> embedding
// with ReLU between layers and a linear final layer; two bias-free linear
// heads score classes and rotations on top of the embedding. Templated on
// the scalar so gradient checks can run the whole net in double.
template <typename T>
struct Mlp {
  struct Layer {
    Matrix<T> weight;      // out x in
    std::vector<T> bias;   // out

    bool operator==(const Layer&) const = default;
  };
  std::vector<Layer> trunk;
  Matrix<T> class_head;    // classes x embedding_dim
  Matrix<T> rot_head;      // 4 x embedding_dim

  size_t input_dim() const { return trunk.front().weight.cols; }
  size_t embedding_dim() const { return trunk.back().weight.rows; }
  size_t class_count() const { return class_head.rows; }
  size_t parameter_count() const;
  bool all_finite() const;

  bool operator==(const Mlp&) const = default;

  // He-style init: trunk weights ~ N(0, 2/fan_in), heads ~ N(0, 1/fan_in),
  // biases zero.
  static Mlp random(size_t input, std::span<const size_t> hidden, size_t embedding,
                    size_t classes, Rng& rng);
};

template <typename To, typename From>
Mlp<To> cast_mlp(const Mlp<From>& m);

// Trunk forward pass: one embedding row per input row.
template <typename T>
Matrix<T> mlp_embed(const Mlp<T>& m, const Matrix<T>& inputs);

template <typename T>
struct LossResult {
  T loss = 0;        // loss_cls + alpha * loss_rot
  T loss_cls = 0;    // mean cross-entropy of the class head
  T loss_rot = 0;    // mean cross-entropy of the rotation head (0 if no labels)
  Mlp<T> grads;      // same shapes as the parameters
};

// Computes the joint loss and its exact gradients for one batch.
// class_index holds head-local class indices in [0, class_count).
// rot_labels may be empty, in which case the rotation term vanishes and the
// rotation head receives zero gradient. A non-finite loss raises
// NumericalError before any state is touched.
template <typename T>
LossResult<T> forward_loss(const Mlp<T>& m, const Matrix<T>& inputs,
                           std::span<const uint32_t> class_index,
                           std::span<const RotationLabel> rot_labels, T alpha);

// params <- params - lr * grads. Shape mismatch raises ShapeError.
template <typename T>
void sgd_step(Mlp<T>& m, const Mlp<T>& grads, T lr);

struct TrainHyper {
  double learning_rate = 0.05;
  double alpha = 0.5;           // rotation loss weight
  uint32_t way = 10;            // distinct classes per batch
  uint32_t shot = 4;            // items per class per batch
  uint32_t epochs = 1;
  uint32_t batches_per_epoch = 20;
};

// Runs epochs*batches_per_epoch SGD steps on batches drawn from the pool.
// Raster payloads get rotation-augmented (4x batch, rotation head active);
// embedding payloads train the class head only. The stop flag is polled at
// epoch boundaries; returns false when it cut the run short. A NumericalError
// from a batch ends the round early with the last finite parameters kept.
// Sampling errors propagate.
bool train_epochs(Mlp<float>& m, const LabeledDataset& ds, const ItemPool& pool,
                  const TrainHyper& hyper, Rng& rng, const StopFlag* stop);

// Uniform interface over "embeddings come from somewhere": either a trained
// encoder or payloads that are already embeddings. Decoders only see this.
class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual size_t embedding_dim() const = 0;
  // Row i of the result is the embedding of items[i].
  virtual MatrixD embed(const LabeledDataset& ds, std::span<const uint32_t> items) const = 0;
};

// Passes embedding payloads through unchanged.
class IdentityProvider final : public EmbeddingProvider {
 public:
  explicit IdentityProvider(size_t dim);
  size_t embedding_dim() const override { return dim_; }
  MatrixD embed(const LabeledDataset& ds, std::span<const uint32_t> items) const override;

 private:
  size_t dim_;
};

class MlpEncoderProvider final : public EmbeddingProvider {
 public:
  explicit MlpEncoderProvider(Mlp<float> params);
  size_t embedding_dim() const override { return params_.embedding_dim(); }
  MatrixD embed(const LabeledDataset& ds, std::span<const uint32_t> items) const override;
  const Mlp<float>& params() const { return params_; }

 private:
  Mlp<float> params_;
};

// Persistable encoder state; the worker checkpoint unit.
struct EncoderCheckpoint {
  enum class Kind : uint8_t { mlp = 0, identity = 1 };
  Kind kind = Kind::mlp;
  Mlp<float> mlp;            // kind == mlp
  uint32_t identity_dim = 0; // kind == identity

  std::unique_ptr<EmbeddingProvider> make_provider() const;
};

// Binary container ("ENC1", little-endian f32 tensors). Round-trips exactly.
void save_encoder(const EncoderCheckpoint& ckpt, const std::filesystem::path& path);
EncoderCheckpoint load_encoder(const std::filesystem::path& path);

}  // namespace fewshot
