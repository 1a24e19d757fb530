#include "fewshot/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "fewshot/detail/bytes.hpp"
#include "fewshot/error.hpp"

namespace fewshot {

namespace {

Raster quarter_turn_cw(const Raster& in) {
  Raster out;
  out.height = in.width;
  out.width = in.height;
  out.pixels.resize(in.pixels.size());
  const uint32_t h = in.height;
  for (uint32_t r = 0; r < out.height; ++r) {
    for (uint32_t c = 0; c < out.width; ++c) {
      out.pixels[static_cast<size_t>(r) * out.width + c] = in.at(h - 1 - c, r);
    }
  }
  return out;
}

}  // namespace

Raster rotate(const Raster& image, unsigned quarter_turns) {
  if (image.height != image.width) {
    throw ShapeError("rotation needs a square raster, got " + std::to_string(image.width) + "x" +
                     std::to_string(image.height));
  }
  Raster out = image;
  for (unsigned t = 0; t < quarter_turns % 4; ++t) out = quarter_turn_cw(out);
  return out;
}

AugmentedBatch augment_with_rotations(const LabeledDataset& ds, const Batch& batch) {
  if (ds.payload_kind != PayloadKind::raster) {
    throw ShapeError("rotation augmentation needs raster payloads");
  }
  AugmentedBatch out;
  out.images.reserve(batch.items.size() * 4);
  out.class_ids.reserve(batch.items.size() * 4);
  out.rot_labels.reserve(batch.items.size() * 4);
  for (const auto& ref : batch.items) {
    const auto& img = std::get<Raster>(ds.items[ref.item].payload);
    for (unsigned t = 0; t < 4; ++t) {
      out.images.push_back(rotate(img, t));
      out.class_ids.push_back(ref.class_id);
      out.rot_labels.push_back(static_cast<RotationLabel>(t));
    }
  }
  return out;
}

MatrixF flatten(std::span<const Raster> images) {
  if (images.empty()) return {};
  size_t dim = images.front().pixels.size();
  MatrixF out(images.size(), dim);
  for (size_t i = 0; i < images.size(); ++i) {
    if (images[i].pixels.size() != dim) {
      throw ShapeError("cannot flatten rasters of differing sizes");
    }
    std::copy(images[i].pixels.begin(), images[i].pixels.end(), out.row(i).begin());
  }
  return out;
}

MatrixF flatten_payloads(const LabeledDataset& ds, std::span<const uint32_t> items) {
  size_t dim = ds.feature_dim();
  MatrixF out(items.size(), dim);
  for (size_t i = 0; i < items.size(); ++i) {
    if (items[i] >= ds.items.size()) {
      throw ArgumentError("item index " + std::to_string(items[i]) + " out of range");
    }
    const auto& payload = ds.items[items[i]].payload;
    auto dst = out.row(i);
    if (const auto* r = std::get_if<Raster>(&payload)) {
      std::copy(r->pixels.begin(), r->pixels.end(), dst.begin());
    } else {
      const auto& e = std::get<Embedding>(payload);
      std::copy(e.begin(), e.end(), dst.begin());
    }
  }
  return out;
}

template <typename T>
size_t Mlp<T>::parameter_count() const {
  size_t n = 0;
  for (const auto& layer : trunk) n += layer.weight.size() + layer.bias.size();
  return n + class_head.size() + rot_head.size();
}

template <typename T>
bool Mlp<T>::all_finite() const {
  auto ok = [](std::span<const T> vals) {
    for (T v : vals) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  };
  for (const auto& layer : trunk) {
    if (!ok(layer.weight.data) || !ok(layer.bias)) return false;
  }
  return ok(class_head.data) && ok(rot_head.data);
}

template <typename T>
Mlp<T> Mlp<T>::random(size_t input, std::span<const size_t> hidden, size_t embedding,
                      size_t classes, Rng& rng) {
  if (input == 0 || embedding == 0 || classes == 0) {
    throw ArgumentError("encoder dimensions must be positive");
  }
  for (size_t hdim : hidden) {
    if (hdim == 0) throw ArgumentError("hidden layer width must be positive");
  }

  std::vector<size_t> dims;
  dims.push_back(input);
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(embedding);

  Mlp<T> m;
  for (size_t l = 0; l + 1 < dims.size(); ++l) {
    const size_t in = dims[l], out = dims[l + 1];
    const bool last = l + 2 == dims.size();
    const double scale = std::sqrt((last ? 1.0 : 2.0) / static_cast<double>(in));
    typename Mlp<T>::Layer layer;
    layer.weight = Matrix<T>(out, in);
    for (auto& w : layer.weight.data) w = static_cast<T>(rng.normal() * scale);
    layer.bias.assign(out, T{0});
    m.trunk.push_back(std::move(layer));
  }

  const double head_scale = std::sqrt(1.0 / static_cast<double>(embedding));
  m.class_head = Matrix<T>(classes, embedding);
  for (auto& w : m.class_head.data) w = static_cast<T>(rng.normal() * head_scale);
  m.rot_head = Matrix<T>(4, embedding);
  for (auto& w : m.rot_head.data) w = static_cast<T>(rng.normal() * head_scale);
  return m;
}

namespace {

// out(n x rows_b) = a(n x cols_b) * b(rows_b x cols_b)^T
template <typename T>
Matrix<T> matmul_nt(const Matrix<T>& a, const Matrix<T>& b) {
  Matrix<T> out(a.rows, b.rows);
  for (size_t i = 0; i < a.rows; ++i) {
    auto ai = a.row(i);
    auto oi = out.row(i);
    for (size_t j = 0; j < b.rows; ++j) {
      auto bj = b.row(j);
      T acc{0};
      for (size_t k = 0; k < a.cols; ++k) acc += ai[k] * bj[k];
      oi[j] = acc;
    }
  }
  return out;
}

// out(n x cols_b) = dz(n x rows_b) * b(rows_b x cols_b)
template <typename T>
Matrix<T> matmul_nn(const Matrix<T>& dz, const Matrix<T>& b) {
  Matrix<T> out(dz.rows, b.cols);
  for (size_t i = 0; i < dz.rows; ++i) {
    auto oi = out.row(i);
    auto di = dz.row(i);
    for (size_t j = 0; j < dz.cols; ++j) {
      T s = di[j];
      if (s == T{0}) continue;
      auto bj = b.row(j);
      for (size_t k = 0; k < b.cols; ++k) oi[k] += s * bj[k];
    }
  }
  return out;
}

// grad(out x in) += dz(n x out)^T * a(n x in)
template <typename T>
void accumulate_weight_grad(Matrix<T>& grad, const Matrix<T>& dz, const Matrix<T>& a) {
  for (size_t i = 0; i < dz.rows; ++i) {
    auto di = dz.row(i);
    auto ai = a.row(i);
    for (size_t o = 0; o < dz.cols; ++o) {
      T s = di[o];
      if (s == T{0}) continue;
      auto g = grad.row(o);
      for (size_t k = 0; k < a.cols; ++k) g[k] += s * ai[k];
    }
  }
}

// Mean cross-entropy of rows of `logits` against `labels`, plus the logit
// gradient (softmax - onehot) / n. Max-subtraction keeps the exponentials
// bounded.
template <typename T, typename L>
std::pair<T, Matrix<T>> softmax_ce(const Matrix<T>& logits, std::span<const L> labels) {
  const size_t n = logits.rows, c = logits.cols;
  Matrix<T> dlogits(n, c);
  T total{0};
  for (size_t i = 0; i < n; ++i) {
    auto row = logits.row(i);
    T mx = row[0];
    for (size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    T sum{0};
    auto d = dlogits.row(i);
    for (size_t j = 0; j < c; ++j) {
      d[j] = std::exp(row[j] - mx);
      sum += d[j];
    }
    const size_t y = static_cast<size_t>(labels[i]);
    total += std::log(sum) - (row[y] - mx);
    const T inv = T{1} / sum;
    for (size_t j = 0; j < c; ++j) d[j] *= inv;
    d[y] -= T{1};
  }
  const T inv_n = T{1} / static_cast<T>(n);
  for (auto& v : dlogits.data) v *= inv_n;
  return {total * inv_n, std::move(dlogits)};
}

template <typename T>
Mlp<T> zeros_like(const Mlp<T>& m) {
  Mlp<T> z;
  z.trunk.reserve(m.trunk.size());
  for (const auto& layer : m.trunk) {
    z.trunk.push_back({Matrix<T>(layer.weight.rows, layer.weight.cols),
                       std::vector<T>(layer.bias.size(), T{0})});
  }
  z.class_head = Matrix<T>(m.class_head.rows, m.class_head.cols);
  z.rot_head = Matrix<T>(m.rot_head.rows, m.rot_head.cols);
  return z;
}

template <typename T>
void check_trunk_input(const Mlp<T>& m, const Matrix<T>& inputs) {
  if (m.trunk.empty()) throw ShapeError("encoder has no trunk layers");
  if (inputs.cols != m.input_dim()) {
    throw ShapeError("encoder expects input dim " + std::to_string(m.input_dim()) + ", got " +
                     std::to_string(inputs.cols));
  }
}

}  // namespace

template <typename T>
Matrix<T> mlp_embed(const Mlp<T>& m, const Matrix<T>& inputs) {
  check_trunk_input(m, inputs);
  Matrix<T> a = inputs;
  for (size_t l = 0; l < m.trunk.size(); ++l) {
    Matrix<T> z = matmul_nt(a, m.trunk[l].weight);
    for (size_t i = 0; i < z.rows; ++i) {
      auto zi = z.row(i);
      for (size_t o = 0; o < z.cols; ++o) zi[o] += m.trunk[l].bias[o];
    }
    if (l + 1 < m.trunk.size()) {
      for (auto& v : z.data) v = std::max(v, T{0});
    }
    a = std::move(z);
  }
  return a;
}

template <typename T>
LossResult<T> forward_loss(const Mlp<T>& m, const Matrix<T>& inputs,
                           std::span<const uint32_t> class_index,
                           std::span<const RotationLabel> rot_labels, T alpha) {
  check_trunk_input(m, inputs);
  const size_t n = inputs.rows;
  if (n == 0) throw ArgumentError("loss needs a non-empty batch");
  if (class_index.size() != n) {
    throw ShapeError("batch has " + std::to_string(n) + " rows but " +
                     std::to_string(class_index.size()) + " class labels");
  }
  if (!rot_labels.empty() && rot_labels.size() != n) {
    throw ShapeError("batch has " + std::to_string(n) + " rows but " +
                     std::to_string(rot_labels.size()) + " rotation labels");
  }
  for (uint32_t y : class_index) {
    if (y >= m.class_count()) {
      throw ArgumentError("class index " + std::to_string(y) + " outside head of size " +
                          std::to_string(m.class_count()));
    }
  }
  for (RotationLabel r : rot_labels) {
    if (r > 3) throw ArgumentError("rotation label must be 0..3");
  }

  // Forward, keeping pre-activations for the backward pass.
  const size_t layers = m.trunk.size();
  std::vector<Matrix<T>> acts;   // acts[l] = input to trunk layer l
  std::vector<Matrix<T>> pres;   // pres[l] = pre-activation output of layer l
  acts.reserve(layers);
  pres.reserve(layers);
  acts.push_back(inputs);
  for (size_t l = 0; l < layers; ++l) {
    Matrix<T> z = matmul_nt(acts[l], m.trunk[l].weight);
    for (size_t i = 0; i < z.rows; ++i) {
      auto zi = z.row(i);
      for (size_t o = 0; o < z.cols; ++o) zi[o] += m.trunk[l].bias[o];
    }
    pres.push_back(z);
    if (l + 1 < layers) {
      for (auto& v : z.data) v = std::max(v, T{0});
      acts.push_back(std::move(z));
    }
  }
  const Matrix<T>& emb = pres.back();  // final layer is linear

  LossResult<T> result;
  result.grads = zeros_like(m);

  Matrix<T> cls_logits = matmul_nt(emb, m.class_head);
  auto [loss_cls, dcls] = softmax_ce<T, uint32_t>(cls_logits, class_index);
  result.loss_cls = loss_cls;

  accumulate_weight_grad(result.grads.class_head, dcls, emb);
  Matrix<T> demb = matmul_nn(dcls, m.class_head);

  if (!rot_labels.empty()) {
    Matrix<T> rot_logits = matmul_nt(emb, m.rot_head);
    auto [loss_rot, drot] = softmax_ce<T, RotationLabel>(rot_logits, rot_labels);
    result.loss_rot = loss_rot;
    for (auto& v : drot.data) v *= alpha;
    accumulate_weight_grad(result.grads.rot_head, drot, emb);
    Matrix<T> demb_rot = matmul_nn(drot, m.rot_head);
    for (size_t i = 0; i < demb.data.size(); ++i) demb.data[i] += demb_rot.data[i];
  }

  result.loss = result.loss_cls + alpha * result.loss_rot;
  if (!std::isfinite(static_cast<double>(result.loss))) {
    throw NumericalError("non-finite training loss");
  }

  // Trunk backward.
  Matrix<T> delta = std::move(demb);  // d loss / d pres[last]
  for (size_t l = layers; l-- > 0;) {
    accumulate_weight_grad(result.grads.trunk[l].weight, delta, acts[l]);
    auto& gb = result.grads.trunk[l].bias;
    for (size_t i = 0; i < delta.rows; ++i) {
      auto di = delta.row(i);
      for (size_t o = 0; o < delta.cols; ++o) gb[o] += di[o];
    }
    if (l == 0) break;
    delta = matmul_nn(delta, m.trunk[l].weight);
    // Gate by the ReLU that fed layer l.
    const Matrix<T>& z = pres[l - 1];
    for (size_t i = 0; i < delta.data.size(); ++i) {
      if (z.data[i] <= T{0}) delta.data[i] = T{0};
    }
  }
  return result;
}

template <typename T>
void sgd_step(Mlp<T>& m, const Mlp<T>& grads, T lr) {
  auto mismatch = [] { return ShapeError("gradient shapes do not match the parameters"); };
  if (grads.trunk.size() != m.trunk.size()) throw mismatch();
  for (size_t l = 0; l < m.trunk.size(); ++l) {
    auto& layer = m.trunk[l];
    const auto& g = grads.trunk[l];
    if (g.weight.rows != layer.weight.rows || g.weight.cols != layer.weight.cols ||
        g.bias.size() != layer.bias.size()) {
      throw mismatch();
    }
    for (size_t i = 0; i < layer.weight.data.size(); ++i) layer.weight.data[i] -= lr * g.weight.data[i];
    for (size_t i = 0; i < layer.bias.size(); ++i) layer.bias[i] -= lr * g.bias[i];
  }
  if (grads.class_head.rows != m.class_head.rows || grads.class_head.cols != m.class_head.cols ||
      grads.rot_head.rows != m.rot_head.rows || grads.rot_head.cols != m.rot_head.cols) {
    throw mismatch();
  }
  for (size_t i = 0; i < m.class_head.data.size(); ++i) m.class_head.data[i] -= lr * grads.class_head.data[i];
  for (size_t i = 0; i < m.rot_head.data.size(); ++i) m.rot_head.data[i] -= lr * grads.rot_head.data[i];
}

bool train_epochs(Mlp<float>& m, const LabeledDataset& ds, const ItemPool& pool,
                  const TrainHyper& hyper, Rng& rng, const StopFlag* stop) {
  if (m.class_count() != pool.class_count()) {
    throw ShapeError("encoder class head has " + std::to_string(m.class_count()) +
                     " rows but the training pool has " + std::to_string(pool.class_count()) +
                     " classes");
  }
  const auto& classes = pool.classes();
  auto local_class = [&classes](uint32_t global) {
    return static_cast<uint32_t>(
        std::lower_bound(classes.begin(), classes.end(), global) - classes.begin());
  };

  const bool rasters = ds.payload_kind == PayloadKind::raster;
  for (uint32_t epoch = 0; epoch < hyper.epochs; ++epoch) {
    if (stop && stop->requested()) return false;
    for (uint32_t b = 0; b < hyper.batches_per_epoch; ++b) {
      Batch batch = sample_batch(pool, hyper.way, hyper.shot, rng);

      MatrixF inputs;
      std::vector<uint32_t> cls;
      std::vector<RotationLabel> rot;
      if (rasters) {
        AugmentedBatch aug = augment_with_rotations(ds, batch);
        inputs = flatten(aug.images);
        cls.reserve(aug.class_ids.size());
        for (uint32_t g : aug.class_ids) cls.push_back(local_class(g));
        rot = std::move(aug.rot_labels);
      } else {
        std::vector<uint32_t> ids;
        ids.reserve(batch.items.size());
        cls.reserve(batch.items.size());
        for (const auto& ref : batch.items) {
          ids.push_back(ref.item);
          cls.push_back(local_class(ref.class_id));
        }
        inputs = flatten_payloads(ds, ids);
      }

      try {
        LossResult<float> fl =
            forward_loss<float>(m, inputs, cls, rot, static_cast<float>(hyper.alpha));
        sgd_step(m, fl.grads, static_cast<float>(hyper.learning_rate));
      } catch (const NumericalError&) {
        // Keep the last finite parameters and end the round early.
        return true;
      }
    }
  }
  return true;
}

IdentityProvider::IdentityProvider(size_t dim) : dim_(dim) {
  if (dim == 0) throw ArgumentError("identity provider needs a positive dim");
}

MatrixD IdentityProvider::embed(const LabeledDataset& ds,
                                std::span<const uint32_t> items) const {
  if (ds.payload_kind != PayloadKind::embedding) {
    throw ShapeError("identity provider needs embedding payloads");
  }
  if (ds.feature_dim() != dim_) {
    throw ShapeError("identity provider has dim " + std::to_string(dim_) +
                     " but the dataset has dim " + std::to_string(ds.feature_dim()));
  }
  return cast_matrix<double>(flatten_payloads(ds, items));
}

MlpEncoderProvider::MlpEncoderProvider(Mlp<float> params) : params_(std::move(params)) {
  if (params_.trunk.empty()) throw ArgumentError("encoder provider needs at least one layer");
}

MatrixD MlpEncoderProvider::embed(const LabeledDataset& ds,
                                  std::span<const uint32_t> items) const {
  if (ds.feature_dim() != params_.input_dim()) {
    throw ShapeError("encoder expects input dim " + std::to_string(params_.input_dim()) +
                     " but the dataset has dim " + std::to_string(ds.feature_dim()));
  }
  MatrixF inputs = flatten_payloads(ds, items);
  return cast_matrix<double>(mlp_embed(params_, inputs));
}

std::unique_ptr<EmbeddingProvider> EncoderCheckpoint::make_provider() const {
  if (kind == Kind::identity) return std::make_unique<IdentityProvider>(identity_dim);
  return std::make_unique<MlpEncoderProvider>(mlp);
}

void save_encoder(const EncoderCheckpoint& ckpt, const std::filesystem::path& path) {
  std::vector<uint8_t> out;
  out.insert(out.end(), {'E', 'N', 'C', '1'});
  out.push_back(static_cast<uint8_t>(ckpt.kind));
  if (ckpt.kind == EncoderCheckpoint::Kind::identity) {
    if (ckpt.identity_dim == 0) throw ArgumentError("identity checkpoint needs a positive dim");
    detail::put_u32(out, ckpt.identity_dim);
    detail::write_file_bytes(path, out);
    return;
  }

  const auto& m = ckpt.mlp;
  if (m.trunk.empty()) throw ArgumentError("encoder checkpoint has no trunk layers");
  detail::put_u32(out, static_cast<uint32_t>(m.trunk.size()));
  for (const auto& layer : m.trunk) {
    detail::put_u32(out, static_cast<uint32_t>(layer.weight.rows));
    detail::put_u32(out, static_cast<uint32_t>(layer.weight.cols));
  }
  detail::put_u32(out, static_cast<uint32_t>(m.class_head.rows));
  for (const auto& layer : m.trunk) {
    for (float v : layer.weight.data) detail::put_f32(out, v);
    for (float v : layer.bias) detail::put_f32(out, v);
  }
  for (float v : m.class_head.data) detail::put_f32(out, v);
  for (float v : m.rot_head.data) detail::put_f32(out, v);
  detail::write_file_bytes(path, out);
}

EncoderCheckpoint load_encoder(const std::filesystem::path& path) {
  auto bytes = detail::read_file_bytes(path);
  detail::ByteReader reader(bytes, path.string());
  reader.magic("ENC1");

  EncoderCheckpoint ckpt;
  uint8_t kind = reader.u8();
  if (kind == static_cast<uint8_t>(EncoderCheckpoint::Kind::identity)) {
    ckpt.kind = EncoderCheckpoint::Kind::identity;
    ckpt.identity_dim = reader.u32();
    if (ckpt.identity_dim == 0) throw FormatError(path.string() + ": zero identity dim");
    reader.expect_end();
    return ckpt;
  }
  if (kind != static_cast<uint8_t>(EncoderCheckpoint::Kind::mlp)) {
    throw FormatError(path.string() + ": unknown encoder kind " + std::to_string(kind));
  }

  uint32_t layers = reader.u32();
  if (layers == 0) throw FormatError(path.string() + ": encoder has no layers");
  if (layers > 64) throw FormatError(path.string() + ": implausible layer count");

  std::vector<std::pair<uint32_t, uint32_t>> shapes(layers);
  for (auto& [out, in] : shapes) {
    out = reader.u32();
    in = reader.u32();
    if (out == 0 || in == 0) throw FormatError(path.string() + ": zero layer dimension");
  }
  for (size_t l = 1; l < shapes.size(); ++l) {
    if (shapes[l].second != shapes[l - 1].first) {
      throw FormatError(path.string() + ": trunk layer dims do not chain");
    }
  }
  uint32_t classes = reader.u32();
  if (classes == 0) throw FormatError(path.string() + ": zero class count");

  auto read_tensor = [&reader](size_t rows, size_t cols) {
    MatrixF m(rows, cols);
    for (auto& v : m.data) v = reader.f32();
    return m;
  };

  ckpt.kind = EncoderCheckpoint::Kind::mlp;
  for (auto& [out, in] : shapes) {
    Mlp<float>::Layer layer;
    layer.weight = read_tensor(out, in);
    layer.bias.resize(out);
    for (auto& v : layer.bias) v = reader.f32();
    ckpt.mlp.trunk.push_back(std::move(layer));
  }
  const uint32_t embed = shapes.back().first;
  ckpt.mlp.class_head = read_tensor(classes, embed);
  ckpt.mlp.rot_head = read_tensor(4, embed);
  reader.expect_end();
  return ckpt;
}

template <typename To, typename From>
Mlp<To> cast_mlp(const Mlp<From>& m) {
  Mlp<To> out;
  out.trunk.reserve(m.trunk.size());
  for (const auto& layer : m.trunk) {
    typename Mlp<To>::Layer l;
    l.weight = cast_matrix<To>(layer.weight);
    l.bias.assign(layer.bias.begin(), layer.bias.end());
    out.trunk.push_back(std::move(l));
  }
  out.class_head = cast_matrix<To>(m.class_head);
  out.rot_head = cast_matrix<To>(m.rot_head);
  return out;
}

template struct Mlp<float>;
template struct Mlp<double>;
template Mlp<float> cast_mlp<float, double>(const Mlp<double>&);
template Mlp<double> cast_mlp<double, float>(const Mlp<float>&);
template Matrix<float> mlp_embed<float>(const Mlp<float>&, const Matrix<float>&);
template Matrix<double> mlp_embed<double>(const Mlp<double>&, const Matrix<double>&);
template LossResult<float> forward_loss<float>(const Mlp<float>&, const Matrix<float>&,
                                               std::span<const uint32_t>,
                                               std::span<const RotationLabel>, float);
template LossResult<double> forward_loss<double>(const Mlp<double>&, const Matrix<double>&,
                                                 std::span<const uint32_t>,
                                                 std::span<const RotationLabel>, double);
template void sgd_step<float>(Mlp<float>&, const Mlp<float>&, float);
template void sgd_step<double>(Mlp<double>&, const Mlp<double>&, double);

}  // namespace fewshot
