#include "fewshot/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <unordered_map>
#include <unordered_set>

#include "fewshot/detail/bytes.hpp"
#include "fewshot/error.hpp"
#include "json.hpp"

namespace fs = std::filesystem;

namespace fewshot {

namespace detail {

std::vector<uint8_t> read_file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed for " + path.string());
  return bytes;
}

void write_file_bytes(const fs::path& path, const std::vector<uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot create " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

std::string read_file_text(const fs::path& path) {
  auto bytes = read_file_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

void write_file_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot create " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace detail

size_t LabeledDataset::feature_dim() const {
  if (items.empty()) return 0;
  if (payload_kind == PayloadKind::raster) {
    const auto& r = std::get<Raster>(items.front().payload);
    return static_cast<size_t>(r.height) * r.width;
  }
  return std::get<Embedding>(items.front().payload).size();
}

std::vector<std::vector<uint32_t>> LabeledDataset::items_by_class() const {
  std::vector<std::vector<uint32_t>> by_class(class_names.size());
  for (size_t i = 0; i < items.size(); ++i) {
    by_class[items[i].class_id].push_back(static_cast<uint32_t>(i));
  }
  return by_class;
}

void LabeledDataset::validate() const {
  if (items.empty()) throw FormatError("dataset has no items");
  if (class_names.empty()) throw FormatError("dataset has no classes");

  uint32_t h = 0, w = 0;
  size_t dim = 0;
  bool first = true;
  for (size_t i = 0; i < items.size(); ++i) {
    const auto& item = items[i];
    if (item.class_id >= class_names.size()) {
      throw FormatError("item " + item.id + " has class id " + std::to_string(item.class_id) +
                        " but dataset has " + std::to_string(class_names.size()) + " classes");
    }
    if (payload_kind == PayloadKind::raster) {
      const auto* r = std::get_if<Raster>(&item.payload);
      if (!r) throw FormatError("item " + item.id + " is not a raster");
      if (r->pixels.size() != static_cast<size_t>(r->height) * r->width) {
        throw FormatError("item " + item.id + " pixel count does not match its dimensions");
      }
      if (first) {
        h = r->height;
        w = r->width;
      } else if (r->height != h || r->width != w) {
        throw FormatError("item " + item.id + " is " + std::to_string(r->width) + "x" +
                          std::to_string(r->height) + " but the dataset is " +
                          std::to_string(w) + "x" + std::to_string(h));
      }
    } else {
      const auto* e = std::get_if<Embedding>(&item.payload);
      if (!e) throw FormatError("item " + item.id + " is not an embedding");
      if (first) {
        dim = e->size();
      } else if (e->size() != dim) {
        throw FormatError("item " + item.id + " has dim " + std::to_string(e->size()) +
                          " but the dataset has dim " + std::to_string(dim));
      }
    }
    first = false;
  }

  std::vector<size_t> counts(class_names.size(), 0);
  for (const auto& item : items) counts[item.class_id]++;
  for (size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] == 0) {
      throw EmptyClassError("class " + std::to_string(c) + " (" + class_names[c] +
                            ") has no items");
    }
  }
}

namespace {

// Binary 8-bit PGM ("P5"). Header tokens may be separated by whitespace and
// '#' comments; exactly one whitespace byte separates maxval from the pixel
// payload.
Raster parse_pgm(const std::vector<uint8_t>& bytes, const std::string& name) {
  size_t pos = 0;
  auto fail = [&](const std::string& why) -> FormatError {
    return FormatError(name + ": " + why);
  };

  auto skip_space = [&] {
    while (pos < bytes.size()) {
      uint8_t c = bytes[pos];
      if (c == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '\f' || c == '\v') {
        ++pos;
      } else {
        break;
      }
    }
  };

  auto read_number = [&]() -> uint64_t {
    skip_space();
    if (pos >= bytes.size() || bytes[pos] < '0' || bytes[pos] > '9') {
      throw fail("malformed header");
    }
    uint64_t v = 0;
    while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') {
      v = v * 10 + (bytes[pos] - '0');
      if (v > 0xffffffffull) throw fail("header value out of range");
      ++pos;
    }
    return v;
  };

  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') {
    throw fail("not a binary PGM (missing P5 magic)");
  }
  pos = 2;

  uint64_t width = read_number();
  uint64_t height = read_number();
  uint64_t maxval = read_number();
  if (width == 0 || height == 0) throw fail("zero image dimension");
  if (maxval != 255) throw fail("maxval must be 255, got " + std::to_string(maxval));

  if (pos >= bytes.size()) throw fail("missing pixel data");
  uint8_t sep = bytes[pos];
  if (sep != ' ' && sep != '\t' && sep != '\r' && sep != '\n') {
    throw fail("malformed header");
  }
  ++pos;

  size_t expected = static_cast<size_t>(width) * static_cast<size_t>(height);
  size_t have = bytes.size() - pos;
  if (have < expected) {
    throw fail("truncated pixel data: expected " + std::to_string(expected) + " bytes, found " +
               std::to_string(have));
  }
  if (have > expected) {
    throw fail("trailing bytes after pixel data");
  }

  Raster r;
  r.width = static_cast<uint32_t>(width);
  r.height = static_cast<uint32_t>(height);
  r.pixels.resize(expected);
  for (size_t i = 0; i < expected; ++i) {
    r.pixels[i] = static_cast<float>(bytes[pos + i]) / 255.0f;
  }
  return r;
}

std::vector<uint8_t> encode_pgm(const Raster& r) {
  std::string header =
      "P5\n" + std::to_string(r.width) + " " + std::to_string(r.height) + "\n255\n";
  std::vector<uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + r.pixels.size());
  for (float p : r.pixels) {
    float clamped = std::min(1.0f, std::max(0.0f, p));
    out.push_back(static_cast<uint8_t>(std::lround(clamped * 255.0f)));
  }
  return out;
}

}  // namespace

LabeledDataset load_image_dataset(const fs::path& root) {
  const fs::path csv_path = root / "labels.csv";
  std::string csv = detail::read_file_text(csv_path);

  std::vector<std::pair<std::string, std::string>> rows;  // (file, class)
  size_t line_no = 0;
  size_t start = 0;
  while (start <= csv.size()) {
    size_t end = csv.find('\n', start);
    std::string line = csv.substr(start, end == std::string::npos ? std::string::npos
                                                                  : end - start);
    start = end == std::string::npos ? csv.size() + 1 : end + 1;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    ++line_no;

    if (line_no == 1) {
      if (line != "file,class") {
        throw FormatError(csv_path.string() + ": header must be 'file,class', got '" + line +
                          "'");
      }
      continue;
    }
    if (line.empty()) continue;

    size_t comma = line.find(',');
    if (comma == std::string::npos || comma == 0 || comma + 1 >= line.size()) {
      throw FormatError(csv_path.string() + ": line " + std::to_string(line_no) +
                        " is not 'file,class'");
    }
    rows.emplace_back(line.substr(0, comma), line.substr(comma + 1));
  }
  if (rows.empty()) throw FormatError(csv_path.string() + ": no items listed");

  LabeledDataset ds;
  ds.payload_kind = PayloadKind::raster;
  std::unordered_map<std::string, uint32_t> class_ids;
  std::unordered_set<std::string> seen_files;

  for (const auto& [file, cls] : rows) {
    if (!seen_files.insert(file).second) {
      throw FormatError(csv_path.string() + ": duplicate entry for " + file);
    }
    auto [it, inserted] = class_ids.emplace(cls, static_cast<uint32_t>(ds.class_names.size()));
    if (inserted) ds.class_names.push_back(cls);

    const fs::path img_path = root / file;
    std::vector<uint8_t> bytes;
    try {
      bytes = detail::read_file_bytes(img_path);
    } catch (const IoError&) {
      throw FormatError("missing or unreadable image file " + file);
    }

    DatasetItem item;
    item.id = file;
    item.class_id = it->second;
    item.payload = parse_pgm(bytes, file);
    ds.items.push_back(std::move(item));
  }

  ds.validate();
  return ds;
}

void save_image_dataset(const LabeledDataset& ds, const fs::path& root) {
  if (ds.payload_kind != PayloadKind::raster) {
    throw ArgumentError("save_image_dataset needs raster payloads");
  }
  ds.validate();
  fs::create_directories(root);

  std::string csv = "file,class\n";
  for (size_t i = 0; i < ds.items.size(); ++i) {
    std::string name = "item_" + std::to_string(i) + ".pgm";
    csv += name + "," + ds.class_names[ds.items[i].class_id] + "\n";
    detail::write_file_bytes(root / name, encode_pgm(std::get<Raster>(ds.items[i].payload)));
  }
  detail::write_file_text(root / "labels.csv", csv);
}

LabeledDataset load_embedding_dataset(const fs::path& file) {
  auto bytes = detail::read_file_bytes(file);
  detail::ByteReader reader(bytes, file.string());

  reader.magic("EMB1");
  uint32_t count = reader.u32();
  uint32_t dim = reader.u32();
  if (count == 0) throw FormatError(file.string() + ": empty embedding table");
  if (dim == 0) throw FormatError(file.string() + ": embedding dim must be positive");

  size_t expected = 12 + 4ull * count + 4ull * count * dim;
  if (bytes.size() != expected) {
    throw FormatError(file.string() + ": size mismatch between header and payload (expected " +
                      std::to_string(expected) + " bytes, file has " +
                      std::to_string(bytes.size()) + ")");
  }

  std::vector<uint32_t> labels(count);
  uint32_t max_label = 0;
  for (uint32_t i = 0; i < count; ++i) {
    labels[i] = reader.u32();
    max_label = std::max(max_label, labels[i]);
  }

  LabeledDataset ds;
  ds.payload_kind = PayloadKind::embedding;
  for (uint32_t c = 0; c <= max_label; ++c) ds.class_names.push_back("class_" + std::to_string(c));
  ds.items.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    DatasetItem item;
    item.id = "row_" + std::to_string(i);
    item.class_id = labels[i];
    Embedding e(dim);
    for (uint32_t d = 0; d < dim; ++d) e[d] = reader.f32();
    item.payload = std::move(e);
    ds.items.push_back(std::move(item));
  }
  reader.expect_end();

  ds.validate();
  return ds;
}

void save_embedding_dataset(const LabeledDataset& ds, const fs::path& file) {
  if (ds.payload_kind != PayloadKind::embedding) {
    throw ArgumentError("save_embedding_dataset needs embedding payloads");
  }
  ds.validate();

  uint32_t dim = static_cast<uint32_t>(ds.feature_dim());
  std::vector<uint8_t> out;
  out.reserve(12 + ds.items.size() * (4 + 4ull * dim));
  out.insert(out.end(), {'E', 'M', 'B', '1'});
  detail::put_u32(out, static_cast<uint32_t>(ds.items.size()));
  detail::put_u32(out, dim);
  for (const auto& item : ds.items) detail::put_u32(out, item.class_id);
  for (const auto& item : ds.items) {
    for (float v : std::get<Embedding>(item.payload)) detail::put_f32(out, v);
  }
  detail::write_file_bytes(file, out);
}

ClassSplit split_classes(const LabeledDataset& ds, std::array<uint32_t, 3> ratios,
                         uint64_t seed) {
  for (uint32_t r : ratios) {
    if (r == 0) {
      throw SplitError("split ratios must all be positive, got " + std::to_string(ratios[0]) +
                       ":" + std::to_string(ratios[1]) + ":" + std::to_string(ratios[2]));
    }
  }
  const size_t c_total = ds.class_count();
  if (c_total < 3) {
    throw SplitError("need at least 3 classes to split, dataset has " +
                     std::to_string(c_total));
  }

  std::vector<uint32_t> ids(c_total);
  for (size_t i = 0; i < c_total; ++i) ids[i] = static_cast<uint32_t>(i);
  Rng rng(seed);
  rng.shuffle(ids);

  const double total = static_cast<double>(ratios[0]) + ratios[1] + ratios[2];
  size_t n_valid = static_cast<size_t>(std::llround(c_total * ratios[1] / total));
  size_t n_test = static_cast<size_t>(std::llround(c_total * ratios[2] / total));
  if (n_valid < 1) n_valid = 1;
  if (n_test < 1) n_test = 1;
  // Rounding remainders go to meta-train; when rounding overshoots, shrink
  // the larger of the other two sections until meta-train is nonempty.
  while (c_total - n_valid - n_test < 1) {
    if (n_valid >= n_test && n_valid > 1) {
      --n_valid;
    } else {
      --n_test;
    }
  }
  size_t n_train = c_total - n_valid - n_test;

  ClassSplit split;
  split.ratios = ratios;
  split.seed = seed;
  split.meta_train.assign(ids.begin(), ids.begin() + n_train);
  split.meta_valid.assign(ids.begin() + n_train, ids.begin() + n_train + n_valid);
  split.meta_test.assign(ids.begin() + n_train + n_valid, ids.end());
  std::sort(split.meta_train.begin(), split.meta_train.end());
  std::sort(split.meta_valid.begin(), split.meta_valid.end());
  std::sort(split.meta_test.begin(), split.meta_test.end());
  return split;
}

std::string split_to_json(const ClassSplit& split) {
  nlohmann::json j;
  j["ratios"] = {split.ratios[0], split.ratios[1], split.ratios[2]};
  j["seed"] = split.seed;
  j["meta_train"] = split.meta_train;
  j["meta_valid"] = split.meta_valid;
  j["meta_test"] = split.meta_test;
  return j.dump(2) + "\n";
}

ClassSplit split_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("split json: ") + e.what());
  }
  ClassSplit split;
  try {
    auto ratios = j.at("ratios");
    split.ratios = {ratios.at(0).get<uint32_t>(), ratios.at(1).get<uint32_t>(),
                    ratios.at(2).get<uint32_t>()};
    split.seed = j.at("seed").get<uint64_t>();
    split.meta_train = j.at("meta_train").get<std::vector<uint32_t>>();
    split.meta_valid = j.at("meta_valid").get<std::vector<uint32_t>>();
    split.meta_test = j.at("meta_test").get<std::vector<uint32_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("split json: ") + e.what());
  }
  std::sort(split.meta_train.begin(), split.meta_train.end());
  std::sort(split.meta_valid.begin(), split.meta_valid.end());
  std::sort(split.meta_test.begin(), split.meta_test.end());
  return split;
}

void save_split(const ClassSplit& split, const fs::path& path) {
  detail::write_file_text(path, split_to_json(split));
}

ClassSplit load_split(const fs::path& path) {
  return split_from_json(detail::read_file_text(path));
}

void ItemPool::build(const LabeledDataset& ds, std::span<const uint32_t> classes,
                     const std::vector<uint8_t>* allowed) {
  if (classes.empty()) throw ArgumentError("item pool needs at least one class");
  classes_.assign(classes.begin(), classes.end());
  std::sort(classes_.begin(), classes_.end());
  if (std::adjacent_find(classes_.begin(), classes_.end()) != classes_.end()) {
    throw ArgumentError("item pool class list contains duplicates");
  }
  if (classes_.back() >= ds.class_count()) {
    throw ArgumentError("item pool references class " + std::to_string(classes_.back()) +
                        " but dataset has " + std::to_string(ds.class_count()) + " classes");
  }

  items_.assign(classes_.size(), {});
  for (size_t i = 0; i < ds.items.size(); ++i) {
    if (allowed && !(*allowed)[i]) continue;
    uint32_t cls = ds.items[i].class_id;
    auto it = std::lower_bound(classes_.begin(), classes_.end(), cls);
    if (it != classes_.end() && *it == cls) {
      items_[static_cast<size_t>(it - classes_.begin())].push_back(static_cast<uint32_t>(i));
    }
  }
}

ItemPool::ItemPool(const LabeledDataset& ds, std::span<const uint32_t> classes) {
  build(ds, classes, nullptr);
}

ItemPool::ItemPool(const LabeledDataset& ds, std::span<const uint32_t> classes,
                   std::span<const uint32_t> allowed_items) {
  std::vector<uint8_t> mask(ds.items.size(), 0);
  for (uint32_t i : allowed_items) {
    if (i >= ds.items.size()) {
      throw ArgumentError("item pool allowed list references item " + std::to_string(i) +
                          " outside the dataset");
    }
    mask[i] = 1;
  }
  build(ds, classes, &mask);
}

namespace {

// Shared class/item draw for episodes and batches. Returns, per drawn class,
// (class position in the pool, drawn item ids in draw order).
std::vector<std::pair<size_t, std::vector<uint32_t>>> draw_classes_and_items(
    const ItemPool& pool, uint32_t way, uint32_t per_class, Rng& rng, const char* what) {
  if (way == 0) throw ArgumentError(std::string(what) + " needs way >= 1");
  if (pool.class_count() < way) {
    throw SamplingError(std::string(what) + " needs " + std::to_string(way) +
                        " distinct classes but the pool has " +
                        std::to_string(pool.class_count()));
  }

  std::vector<size_t> positions(pool.class_count());
  for (size_t i = 0; i < positions.size(); ++i) positions[i] = i;
  rng.partial_shuffle(positions, way);

  std::vector<std::pair<size_t, std::vector<uint32_t>>> drawn;
  drawn.reserve(way);
  for (uint32_t j = 0; j < way; ++j) {
    size_t pos = positions[j];
    const auto& avail = pool.items_of(pos);
    if (avail.size() < per_class) {
      throw SamplingError("class " + std::to_string(pool.classes()[pos]) + " has " +
                          std::to_string(avail.size()) + " items but " + what + " needs " +
                          std::to_string(per_class) + " per class");
    }
    std::vector<uint32_t> picked(avail.begin(), avail.end());
    rng.partial_shuffle(picked, per_class);
    picked.resize(per_class);
    drawn.emplace_back(pos, std::move(picked));
  }
  return drawn;
}

}  // namespace

Episode sample_episode(const ItemPool& pool, uint32_t way, uint32_t shot, uint32_t query,
                       Rng& rng) {
  if (shot == 0) throw ArgumentError("episode needs shot >= 1");
  if (query == 0) throw ArgumentError("episode needs query >= 1");

  auto drawn = draw_classes_and_items(pool, way, shot + query, rng, "episode");

  Episode ep;
  ep.way = way;
  ep.shot = shot;
  ep.query_per_class = query;
  ep.class_ids.reserve(way);
  ep.support.reserve(static_cast<size_t>(way) * shot);
  ep.query.reserve(static_cast<size_t>(way) * query);
  for (uint32_t j = 0; j < way; ++j) {
    ep.class_ids.push_back(pool.classes()[drawn[j].first]);
    const auto& picked = drawn[j].second;
    for (uint32_t s = 0; s < shot; ++s) {
      ep.support.push_back({picked[s], static_cast<uint16_t>(j)});
    }
    for (uint32_t q = 0; q < query; ++q) {
      ep.query.push_back({picked[shot + q], static_cast<uint16_t>(j)});
    }
  }
  return ep;
}

Episode sample_episode(const LabeledDataset& ds, std::span<const uint32_t> classes, uint32_t way,
                       uint32_t shot, uint32_t query, Rng& rng) {
  ItemPool pool(ds, classes);
  return sample_episode(pool, way, shot, query, rng);
}

Batch sample_batch(const ItemPool& pool, uint32_t way, uint32_t shot, Rng& rng) {
  if (shot == 0) throw ArgumentError("batch needs shot >= 1");

  auto drawn = draw_classes_and_items(pool, way, shot, rng, "batch");

  Batch batch;
  batch.way = way;
  batch.shot = shot;
  batch.items.reserve(static_cast<size_t>(way) * shot);
  for (uint32_t j = 0; j < way; ++j) {
    uint32_t cls = pool.classes()[drawn[j].first];
    for (uint32_t s = 0; s < shot; ++s) {
      batch.items.push_back({drawn[j].second[s], cls});
    }
  }
  return batch;
}

Batch sample_batch(const LabeledDataset& ds, std::span<const uint32_t> classes, uint32_t way,
                   uint32_t shot, Rng& rng) {
  ItemPool pool(ds, classes);
  return sample_batch(pool, way, shot, rng);
}

EnsembleItemSplit split_for_ensemble(const LabeledDataset& ds, std::span<const uint32_t> classes,
                                     double train_fraction, Rng& rng) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ArgumentError("ensemble train fraction must lie in (0, 1), got " +
                        std::to_string(train_fraction));
  }
  ItemPool pool(ds, classes);

  EnsembleItemSplit out;
  for (size_t pos = 0; pos < pool.class_count(); ++pos) {
    const auto& avail = pool.items_of(pos);
    size_t m = avail.size();
    if (m < 2) {
      throw SplitError("class " + std::to_string(pool.classes()[pos]) + " has " +
                       std::to_string(m) + " items; the item-level split needs at least 2");
    }
    size_t n_train = static_cast<size_t>(std::ceil(m * train_fraction));
    n_train = std::min(std::max<size_t>(n_train, 1), m - 1);

    std::vector<uint32_t> shuffled(avail.begin(), avail.end());
    rng.shuffle(shuffled);
    out.train_items.insert(out.train_items.end(), shuffled.begin(), shuffled.begin() + n_train);
    out.test_items.insert(out.test_items.end(), shuffled.begin() + n_train, shuffled.end());
  }
  std::sort(out.train_items.begin(), out.train_items.end());
  std::sort(out.test_items.begin(), out.test_items.end());
  return out;
}

}  // namespace fewshot
