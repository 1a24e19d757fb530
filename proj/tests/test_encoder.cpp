#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <vector>

#include "fewshot/encoder.hpp"
#include "fewshot/error.hpp"

namespace fs = std::filesystem;
using namespace fewshot;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static std::atomic<int> counter{0};
    path = fs::temp_directory_path() / ("fewshot_enc_" + std::to_string(::getpid()) + "_" +
                                        std::to_string(counter.fetch_add(1)));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

Raster make_raster(uint32_t h, uint32_t w, std::vector<float> px) {
  return Raster{h, w, std::move(px)};
}

// Collects mutable views of every parameter so a finite-difference loop can
// nudge them one by one.
std::vector<double*> parameter_slots(Mlp<double>& m) {
  std::vector<double*> slots;
  for (auto& layer : m.trunk) {
    for (auto& v : layer.weight.data) slots.push_back(&v);
    for (auto& v : layer.bias) slots.push_back(&v);
  }
  for (auto& v : m.class_head.data) slots.push_back(&v);
  for (auto& v : m.rot_head.data) slots.push_back(&v);
  return slots;
}

std::vector<double> gradient_values(const Mlp<double>& grads) {
  std::vector<double> out;
  auto copy = grads;  // parameter_slots wants mutable access
  for (double* p : parameter_slots(copy)) out.push_back(*p);
  return out;
}

LabeledDataset separable_embeddings(uint32_t classes, uint32_t per_class, uint32_t dim,
                                    uint64_t seed) {
  Rng rng(seed);
  LabeledDataset ds;
  ds.payload_kind = PayloadKind::embedding;
  for (uint32_t c = 0; c < classes; ++c) {
    ds.class_names.push_back("class_" + std::to_string(c));
    for (uint32_t i = 0; i < per_class; ++i) {
      Embedding e(dim, 0.f);
      for (uint32_t k = 0; k < dim; ++k) {
        e[k] = static_cast<float>(rng.normal()) * 0.3f + (k == c % dim ? 5.f : 0.f);
      }
      ds.items.push_back({"r" + std::to_string(ds.items.size()), c, e});
    }
  }
  return ds;
}

}  // namespace

TEST_CASE("rotate turns a 2x2 raster clockwise") {
  Raster r = make_raster(2, 2, {1, 2, 3, 4});
  CHECK(rotate(r, 0).pixels == std::vector<float>{1, 2, 3, 4});
  CHECK(rotate(r, 1).pixels == std::vector<float>{3, 1, 4, 2});
  CHECK(rotate(r, 2).pixels == std::vector<float>{4, 3, 2, 1});
  CHECK(rotate(r, 3).pixels == std::vector<float>{2, 4, 1, 3});
  CHECK(rotate(r, 4).pixels == r.pixels);  // quarter turns wrap mod 4
  CHECK(rotate(r, 7).pixels == rotate(r, 3).pixels);
}

TEST_CASE("rotate on a 3x3 keeps the center fixed and moves corners") {
  Raster r = make_raster(3, 3, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Raster t = rotate(r, 1);
  CHECK(t.pixels == std::vector<float>{7, 4, 1, 8, 5, 2, 9, 6, 3});
  CHECK(t.at(1, 1) == 5);
}

TEST_CASE("four quarter turns compose to the identity") {
  Rng rng(4);
  Raster r = make_raster(5, 5, {});
  r.pixels.resize(25);
  for (auto& p : r.pixels) p = static_cast<float>(rng.next_f64());
  Raster out = rotate(rotate(rotate(rotate(r, 1), 1), 1), 1);
  CHECK(out.pixels == r.pixels);
  CHECK(rotate(r, 1).pixels != r.pixels);
}

TEST_CASE("rotate rejects non-square rasters") {
  Raster r = make_raster(2, 3, {1, 2, 3, 4, 5, 6});
  CHECK_THROWS_AS(rotate(r, 1), ShapeError);
  CHECK_THROWS_AS(rotate(r, 0), ShapeError);  // validated regardless of turn count
}

TEST_CASE("rotation augmentation is item-major, rotation-minor") {
  LabeledDataset ds;
  ds.payload_kind = PayloadKind::raster;
  ds.class_names = {"a", "b"};
  ds.items.push_back({"i0", 0, make_raster(2, 2, {1, 2, 3, 4})});
  ds.items.push_back({"i1", 1, make_raster(2, 2, {5, 6, 7, 8})});

  Batch batch;
  batch.way = 2;
  batch.shot = 1;
  batch.items = {{0, 0}, {1, 1}};

  AugmentedBatch aug = augment_with_rotations(ds, batch);
  REQUIRE(aug.images.size() == 8);  // 4x the batch
  REQUIRE(aug.class_ids.size() == 8);
  REQUIRE(aug.rot_labels.size() == 8);

  for (int i = 0; i < 8; ++i) {
    CHECK(aug.rot_labels[i] == i % 4);
    CHECK(aug.class_ids[i] == (i < 4 ? 0u : 1u));
  }
  CHECK(aug.images[0].pixels == std::vector<float>{1, 2, 3, 4});
  CHECK(aug.images[1].pixels == std::vector<float>{3, 1, 4, 2});
  CHECK(aug.images[4].pixels == std::vector<float>{5, 6, 7, 8});
  CHECK(aug.images[7].pixels == rotate(std::get<Raster>(ds.items[1].payload), 3).pixels);
}

TEST_CASE("flatten lays rasters out row-major") {
  std::vector<Raster> imgs{make_raster(2, 3, {1, 2, 3, 4, 5, 6})};
  MatrixF m = flatten(imgs);
  CHECK(m.rows == 1);
  CHECK(m.cols == 6);
  CHECK(m.data == std::vector<float>{1, 2, 3, 4, 5, 6});
}

TEST_CASE("random mlp has the right shapes and zero biases") {
  Rng rng(2);
  std::vector<size_t> hidden{6, 5};
  Mlp<float> m = Mlp<float>::random(8, hidden, 4, 10, rng);

  REQUIRE(m.trunk.size() == 3);
  CHECK(m.trunk[0].weight.rows == 6);
  CHECK(m.trunk[0].weight.cols == 8);
  CHECK(m.trunk[1].weight.rows == 5);
  CHECK(m.trunk[2].weight.rows == 4);
  CHECK(m.class_head.rows == 10);
  CHECK(m.class_head.cols == 4);
  CHECK(m.rot_head.rows == 4);
  CHECK(m.input_dim() == 8);
  CHECK(m.embedding_dim() == 4);
  CHECK(m.class_count() == 10);
  CHECK(m.all_finite());

  size_t expect = (6 * 8 + 6) + (5 * 6 + 5) + (4 * 5 + 4) + 10 * 4 + 4 * 4;
  CHECK(m.parameter_count() == expect);

  for (const auto& layer : m.trunk) {
    for (float b : layer.bias) CHECK(b == 0.f);
  }

  Rng rng2(2);
  Mlp<float> same = Mlp<float>::random(8, hidden, 4, 10, rng2);
  CHECK(same == m);
}

TEST_CASE("mlp_embed computes the trunk with relu between layers") {
  Mlp<double> m;
  m.trunk.resize(2);
  m.trunk[0].weight = MatrixD(2, 2);
  m.trunk[0].weight(0, 0) = 1;
  m.trunk[0].weight(1, 1) = 1;
  m.trunk[0].bias = {-0.5, 0.0};
  m.trunk[1].weight = MatrixD(2, 2);
  m.trunk[1].weight(0, 0) = 2;
  m.trunk[1].weight(1, 1) = 3;
  m.trunk[1].bias = {0.0, 0.1};
  m.class_head = MatrixD(2, 2);
  m.rot_head = MatrixD(4, 2);

  MatrixD in(1, 2);
  in(0, 0) = 0.2;
  in(0, 1) = 0.3;
  MatrixD out = mlp_embed(m, in);
  REQUIRE(out.rows == 1);
  REQUIRE(out.cols == 2);
  // pre-activation (0.2-0.5, 0.3) -> relu (0, 0.3) -> (2*0, 3*0.3 + 0.1)
  CHECK(out(0, 0) == doctest::Approx(0.0));
  CHECK(out(0, 1) == doctest::Approx(1.0));
}

TEST_CASE("forward_loss matches a hand-computed cross entropy") {
  Mlp<double> m;
  m.trunk.resize(1);
  m.trunk[0].weight = MatrixD(2, 2);
  m.trunk[0].weight(0, 0) = 1;
  m.trunk[0].weight(1, 1) = 1;
  m.trunk[0].bias = {0, 0};
  m.class_head = MatrixD(2, 2);
  m.class_head(0, 0) = 1;   // logit0 = e0
  m.class_head(1, 1) = -1;  // logit1 = -e1
  m.rot_head = MatrixD(4, 2);  // all-zero -> uniform rotation distribution

  MatrixD in(1, 2);
  in(0, 0) = 1;
  in(0, 1) = 2;
  std::vector<uint32_t> cls{0};

  SUBCASE("class term only") {
    LossResult<double> r = forward_loss<double>(m, in, cls, {}, 0.5);
    // logits (1, -2); CE for label 0 = log(1 + exp(-3))
    CHECK(r.loss_cls == doctest::Approx(std::log(1 + std::exp(-3.0))).epsilon(1e-12));
    CHECK(r.loss_rot == 0.0);
    CHECK(r.loss == doctest::Approx(r.loss_cls));
    // With no rotation labels the rotation head must receive zero gradient.
    for (double g : r.grads.rot_head.data) CHECK(g == 0.0);
  }

  SUBCASE("rotation term joins scaled by alpha") {
    std::vector<RotationLabel> rot{2};
    LossResult<double> r = forward_loss<double>(m, in, cls, rot, 0.5);
    CHECK(r.loss_rot == doctest::Approx(std::log(4.0)).epsilon(1e-12));
    CHECK(r.loss == doctest::Approx(r.loss_cls + 0.5 * std::log(4.0)).epsilon(1e-12));
  }

  SUBCASE("invalid labels are rejected") {
    std::vector<uint32_t> bad{5};
    CHECK_THROWS_AS(forward_loss<double>(m, in, bad, {}, 0.5), ArgumentError);
    std::vector<RotationLabel> badrot{4};
    CHECK_THROWS_AS(forward_loss<double>(m, in, cls, badrot, 0.5), ArgumentError);
  }
}

TEST_CASE("backprop agrees with central finite differences") {
  Rng rng(1234);
  std::vector<size_t> hidden{7};
  Mlp<double> m = cast_mlp<double>(Mlp<float>::random(5, hidden, 4, 3, rng));

  const size_t n = 6;
  MatrixD in(n, 5);
  for (auto& v : in.data) v = rng.normal();
  std::vector<uint32_t> cls;
  std::vector<RotationLabel> rot;
  for (size_t i = 0; i < n; ++i) {
    cls.push_back(static_cast<uint32_t>(rng.below(3)));
    rot.push_back(static_cast<RotationLabel>(rng.below(4)));
  }
  const double alpha = 0.7;

  LossResult<double> base = forward_loss<double>(m, in, cls, rot, alpha);
  std::vector<double> analytic = gradient_values(base.grads);

  std::vector<double*> slots = parameter_slots(m);
  REQUIRE(slots.size() == analytic.size());

  const double h = 1e-5;
  double worst = 0.0;
  for (size_t i = 0; i < slots.size(); ++i) {
    const double keep = *slots[i];
    *slots[i] = keep + h;
    double up = forward_loss<double>(m, in, cls, rot, alpha).loss;
    *slots[i] = keep - h;
    double down = forward_loss<double>(m, in, cls, rot, alpha).loss;
    *slots[i] = keep;
    double numeric = (up - down) / (2 * h);
    double denom = std::max({1e-6, std::abs(numeric), std::abs(analytic[i])});
    worst = std::max(worst, std::abs(numeric - analytic[i]) / denom);
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("sgd_step applies params -= lr * grads and rejects shape mismatches") {
  Rng rng(6);
  Mlp<float> m = Mlp<float>::random(3, {}, 2, 2, rng);
  Mlp<float> grads = m;  // same shapes, arbitrary values
  Mlp<float> before = m;

  sgd_step(m, grads, 0.5f);
  CHECK(m.trunk[0].weight(0, 0) ==
        doctest::Approx(before.trunk[0].weight(0, 0) - 0.5f * grads.trunk[0].weight(0, 0)));
  CHECK(m.class_head(1, 1) ==
        doctest::Approx(before.class_head(1, 1) - 0.5f * grads.class_head(1, 1)));

  Mlp<float> wrong = Mlp<float>::random(4, {}, 2, 2, rng);
  CHECK_THROWS_AS(sgd_step(m, wrong, 0.1f), ShapeError);
}

TEST_CASE("training on separable embeddings drives the class loss down") {
  LabeledDataset ds = separable_embeddings(4, 12, 4, 9);
  std::vector<uint32_t> classes{0, 1, 2, 3};
  ItemPool pool(ds, classes);

  Rng init_rng(10);
  std::vector<size_t> hidden{16};
  Mlp<float> m = Mlp<float>::random(4, hidden, 4, 4, init_rng);

  // Fixed probe batch for measuring progress.
  std::vector<uint32_t> probe_items;
  std::vector<uint32_t> probe_cls;
  for (uint32_t i = 0; i < ds.items.size(); i += 3) {
    probe_items.push_back(i);
    probe_cls.push_back(ds.items[i].class_id);
  }
  MatrixF probe = flatten_payloads(ds, probe_items);
  auto probe_loss = [&](const Mlp<float>& net) {
    return forward_loss<float>(net, probe, probe_cls, {}, 0.f).loss_cls;
  };

  float before = probe_loss(m);
  TrainHyper hyper;
  hyper.way = 4;
  hyper.shot = 3;
  hyper.epochs = 5;
  hyper.batches_per_epoch = 10;
  Rng train_rng(11);
  bool completed = train_epochs(m, ds, pool, hyper, train_rng, nullptr);
  CHECK(completed);
  CHECK(m.all_finite());
  CHECK(probe_loss(m) < before * 0.5f);
}

TEST_CASE("train_epochs honors the stop flag and validates the head size") {
  LabeledDataset ds = separable_embeddings(3, 6, 4, 2);
  std::vector<uint32_t> classes{0, 1, 2};
  ItemPool pool(ds, classes);
  Rng rng(1);
  Mlp<float> m = Mlp<float>::random(4, {}, 4, 3, rng);

  StopFlag stop;
  stop.request();
  Mlp<float> before = m;
  Rng train_rng(2);
  TrainHyper hyper;
  hyper.way = 3;
  hyper.shot = 2;
  CHECK_FALSE(train_epochs(m, ds, pool, hyper, train_rng, &stop));
  CHECK(m == before);  // stop fired before the first epoch touched anything

  Mlp<float> wrong_head = Mlp<float>::random(4, {}, 4, 5, rng);
  CHECK_THROWS_AS(train_epochs(wrong_head, ds, pool, hyper, train_rng, nullptr), ShapeError);

  // Impossible batch shapes surface as sampling errors.
  TrainHyper greedy;
  greedy.way = 3;
  greedy.shot = 100;
  CHECK_THROWS_AS(train_epochs(m, ds, pool, greedy, train_rng, nullptr), SamplingError);
}

TEST_CASE("encoder checkpoints round-trip exactly") {
  TempDir tmp;
  Rng rng(77);
  std::vector<size_t> hidden{6, 5};

  SUBCASE("mlp checkpoint") {
    EncoderCheckpoint ckpt;
    ckpt.kind = EncoderCheckpoint::Kind::mlp;
    ckpt.mlp = Mlp<float>::random(9, hidden, 4, 7, rng);
    fs::path p = tmp.path / "enc.enc1";
    save_encoder(ckpt, p);
    EncoderCheckpoint back = load_encoder(p);
    CHECK(back.kind == EncoderCheckpoint::Kind::mlp);
    CHECK(back.mlp == ckpt.mlp);

    auto provider = back.make_provider();
    CHECK(provider->embedding_dim() == 4);
  }

  SUBCASE("identity checkpoint") {
    EncoderCheckpoint ckpt;
    ckpt.kind = EncoderCheckpoint::Kind::identity;
    ckpt.identity_dim = 12;
    fs::path p = tmp.path / "id.enc1";
    save_encoder(ckpt, p);
    EncoderCheckpoint back = load_encoder(p);
    CHECK(back.kind == EncoderCheckpoint::Kind::identity);
    CHECK(back.identity_dim == 12);
    CHECK(back.make_provider()->embedding_dim() == 12);
  }
}

TEST_CASE("corrupt encoder checkpoints are rejected") {
  TempDir tmp;
  Rng rng(78);
  EncoderCheckpoint ckpt;
  ckpt.kind = EncoderCheckpoint::Kind::mlp;
  ckpt.mlp = Mlp<float>::random(3, {}, 2, 2, rng);
  fs::path p = tmp.path / "enc.enc1";
  save_encoder(ckpt, p);

  std::ifstream in(p, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  SUBCASE("bad magic") {
    bytes[0] = 'Q';
    std::ofstream(p, std::ios::binary).write(bytes.data(), bytes.size());
    CHECK_THROWS_AS(load_encoder(p), FormatError);
  }
  SUBCASE("truncation") {
    std::ofstream(p, std::ios::binary).write(bytes.data(), bytes.size() / 2);
    CHECK_THROWS_AS(load_encoder(p), FormatError);
  }
  SUBCASE("trailing bytes") {
    bytes += "x";
    std::ofstream(p, std::ios::binary).write(bytes.data(), bytes.size());
    CHECK_THROWS_AS(load_encoder(p), FormatError);
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(load_encoder(tmp.path / "no.enc1"), IoError); }
}

TEST_CASE("identity provider passes embedding payloads through") {
  LabeledDataset ds = separable_embeddings(2, 2, 3, 5);
  IdentityProvider prov(3);
  std::vector<uint32_t> items{0, 3};
  MatrixD out = prov.embed(ds, items);
  REQUIRE(out.rows == 2);
  REQUIRE(out.cols == 3);
  const Embedding& e0 = std::get<Embedding>(ds.items[0].payload);
  for (size_t k = 0; k < 3; ++k) CHECK(out(0, k) == doctest::Approx(e0[k]));

  IdentityProvider wrong(4);
  CHECK_THROWS_AS(wrong.embed(ds, items), ShapeError);
  CHECK_THROWS_AS(IdentityProvider(0), ArgumentError);

  LabeledDataset rasters;
  rasters.payload_kind = PayloadKind::raster;
  rasters.class_names = {"a"};
  rasters.items.push_back({"i", 0, make_raster(1, 3, {0.1f, 0.2f, 0.3f})});
  CHECK_THROWS_AS(prov.embed(rasters, std::vector<uint32_t>{0}), ShapeError);
}

TEST_CASE("mlp provider embeds items like the raw trunk does") {
  LabeledDataset ds = separable_embeddings(2, 3, 4, 8);
  Rng rng(3);
  Mlp<float> m = Mlp<float>::random(4, {}, 3, 2, rng);
  MlpEncoderProvider prov(m);
  CHECK(prov.embedding_dim() == 3);

  std::vector<uint32_t> items{1, 4};
  MatrixD got = prov.embed(ds, items);
  MatrixF direct = mlp_embed(m, flatten_payloads(ds, items));
  REQUIRE(got.rows == 2);
  for (size_t i = 0; i < got.data.size(); ++i) {
    CHECK(got.data[i] == doctest::Approx(static_cast<double>(direct.data[i])));
  }
}
