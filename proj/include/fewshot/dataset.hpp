#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "fewshot/rng.hpp"

namespace fewshot {

// Single-channel image, row-major, intensities normalized to [0, 1].
struct Raster {
  uint32_t height = 0;
  uint32_t width = 0;
  std::vector<float> pixels;

  float at(uint32_t r, uint32_t c) const { return pixels[static_cast<size_t>(r) * width + c]; }
  bool operator==(const Raster&) const = default;
};

using Embedding = std::vector<float>;

enum class PayloadKind { raster, embedding };

struct DatasetItem {
  std::string id;  // source file name or row tag; carried through for audits
  uint32_t class_id = 0;
  std::variant<Raster, Embedding> payload;
};

struct LabeledDataset {
  PayloadKind payload_kind = PayloadKind::raster;
  std::vector<DatasetItem> items;
  std::vector<std::string> class_names;

  size_t class_count() const { return class_names.size(); }

  // Flattened payload width: height*width for rasters, dim for embeddings.
  size_t feature_dim() const;

  std::vector<std::vector<uint32_t>> items_by_class() const;

  // Checks the structural invariants: class ids in range, no empty class,
  // payload kind and dimensions uniform across items.
  // Throws FormatError / EmptyClassError.
  void validate() const;
};

// Image corpus: directory with labels.csv (header "file,class") plus one
// binary 8-bit PGM per item. Class ids are assigned in first-seen order of
// the class column; item order is labels.csv row order.
LabeledDataset load_image_dataset(const std::filesystem::path& root);

// Writes a raster dataset in the same layout. Items are materialized as
// item_<index>.pgm; ids are not preserved.
void save_image_dataset(const LabeledDataset& ds, const std::filesystem::path& root);

// Embedding table: "EMB1" magic, u32 count, u32 dim, count u32 labels,
// then count*dim f32 row-major, all little-endian.
LabeledDataset load_embedding_dataset(const std::filesystem::path& file);
void save_embedding_dataset(const LabeledDataset& ds, const std::filesystem::path& file);

// Disjoint class-level split. Section vectors are sorted ascending.
struct ClassSplit {
  std::array<uint32_t, 3> ratios{0, 0, 0};
  uint64_t seed = 0;
  std::vector<uint32_t> meta_train;
  std::vector<uint32_t> meta_valid;
  std::vector<uint32_t> meta_test;
};

// Shuffles class ids with the seed and assigns round(C*b/S) to meta-valid,
// round(C*c/S) to meta-test and the remainder to meta-train, adjusting so
// every section keeps at least one class.
ClassSplit split_classes(const LabeledDataset& ds, std::array<uint32_t, 3> ratios, uint64_t seed);

std::string split_to_json(const ClassSplit& split);
ClassSplit split_from_json(const std::string& text);
void save_split(const ClassSplit& split, const std::filesystem::path& path);
ClassSplit load_split(const std::filesystem::path& path);

// Reference into a dataset with an episode-local label in [0, way).
struct EpisodeRef {
  uint32_t item = 0;
  uint16_t label = 0;
};

struct Episode {
  uint32_t way = 0;
  uint32_t shot = 0;
  uint32_t query_per_class = 0;
  // Drawn classes as global ids; position in this vector is the local label.
  std::vector<uint32_t> class_ids;
  std::vector<EpisodeRef> support;  // way*shot refs, grouped by label
  std::vector<EpisodeRef> query;    // way*query_per_class refs, grouped by label
};

struct BatchRef {
  uint32_t item = 0;
  uint32_t class_id = 0;  // global id; batches keep global labels
};

struct Batch {
  uint32_t way = 0;   // distinct classes (L)
  uint32_t shot = 0;  // items per class (Z)
  std::vector<BatchRef> items;
};

// Per-class item index over a class subset, optionally restricted to an
// item subset. Built once and reused across draws; sampling never walks
// the full dataset.
class ItemPool {
 public:
  ItemPool(const LabeledDataset& ds, std::span<const uint32_t> classes);
  ItemPool(const LabeledDataset& ds, std::span<const uint32_t> classes,
           std::span<const uint32_t> allowed_items);

  size_t class_count() const { return classes_.size(); }
  const std::vector<uint32_t>& classes() const { return classes_; }
  const std::vector<uint32_t>& items_of(size_t class_pos) const { return items_[class_pos]; }

 private:
  void build(const LabeledDataset& ds, std::span<const uint32_t> classes,
             const std::vector<uint8_t>* allowed);

  std::vector<uint32_t> classes_;              // sorted ascending
  std::vector<std::vector<uint32_t>> items_;   // sorted ascending per class
};

// Draws `way` distinct classes, then shot+query distinct items per class
// without replacement. Shortfalls raise SamplingError naming the class.
Episode sample_episode(const ItemPool& pool, uint32_t way, uint32_t shot, uint32_t query,
                       Rng& rng);
Episode sample_episode(const LabeledDataset& ds, std::span<const uint32_t> classes, uint32_t way,
                       uint32_t shot, uint32_t query, Rng& rng);

// Class-balanced batch: exactly `way` distinct classes with `shot` items
// each, labels kept global.
Batch sample_batch(const ItemPool& pool, uint32_t way, uint32_t shot, Rng& rng);
Batch sample_batch(const LabeledDataset& ds, std::span<const uint32_t> classes, uint32_t way,
                   uint32_t shot, Rng& rng);

struct EnsembleItemSplit {
  std::vector<uint32_t> train_items;  // sorted ascending
  std::vector<uint32_t> test_items;   // sorted ascending
};

// Splits the items of each listed class item-wise: ceil(m*fraction) to the
// train side, clamped so both sides keep at least one item per class.
// Classes with fewer than 2 items raise SplitError.
EnsembleItemSplit split_for_ensemble(const LabeledDataset& ds, std::span<const uint32_t> classes,
                                     double train_fraction, Rng& rng);

}  // namespace fewshot
