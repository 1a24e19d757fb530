#include "fewshot/decoders.hpp"

#include <algorithm>
#include <cmath>

#include "fewshot/error.hpp"

namespace fewshot {

std::vector<MatrixD> group_by_class(const MatrixD& embeddings, std::span<const uint16_t> labels,
                                    size_t way) {
  if (embeddings.rows != labels.size()) {
    throw ShapeError("have " + std::to_string(embeddings.rows) + " embedding rows but " +
                     std::to_string(labels.size()) + " labels");
  }
  std::vector<size_t> counts(way, 0);
  for (uint16_t l : labels) {
    if (l >= way) throw ShapeError("label " + std::to_string(l) + " outside way " + std::to_string(way));
    ++counts[l];
  }
  std::vector<MatrixD> grouped(way);
  for (size_t j = 0; j < way; ++j) grouped[j] = MatrixD(counts[j], embeddings.cols);
  std::vector<size_t> next(way, 0);
  for (size_t i = 0; i < embeddings.rows; ++i) {
    size_t j = labels[i];
    auto dst = grouped[j].row(next[j]++);
    auto src = embeddings.row(i);
    std::copy(src.begin(), src.end(), dst.begin());
  }
  return grouped;
}

PrototypeSet compute_prototypes(std::span<const MatrixD> support_by_class) {
  if (support_by_class.empty()) throw DecodeError("no classes to build prototypes from");
  const size_t dim = support_by_class.front().cols;
  PrototypeSet out;
  out.prototypes = MatrixD(support_by_class.size(), dim);
  for (size_t j = 0; j < support_by_class.size(); ++j) {
    const MatrixD& s = support_by_class[j];
    if (s.rows == 0) {
      throw DecodeError("class " + std::to_string(j) + " has no support embeddings");
    }
    if (s.cols != dim) {
      throw ShapeError("class " + std::to_string(j) + " embeddings have dim " +
                       std::to_string(s.cols) + ", expected " + std::to_string(dim));
    }
    auto proto = out.prototypes.row(j);
    for (size_t i = 0; i < s.rows; ++i) {
      auto row = s.row(i);
      for (size_t d = 0; d < dim; ++d) proto[d] += row[d];
    }
    const double inv = 1.0 / static_cast<double>(s.rows);
    for (size_t d = 0; d < dim; ++d) proto[d] *= inv;
  }
  return out;
}

double distance(std::span<const double> a, std::span<const double> b, DistanceMode mode) {
  if (a.size() != b.size()) {
    throw ShapeError("distance between vectors of dim " + std::to_string(a.size()) + " and " +
                     std::to_string(b.size()));
  }
  double sq = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    sq += d * d;
  }
  return mode == DistanceMode::squared_euclidean ? sq : std::sqrt(sq);
}

namespace {

// Softmax over negative distances for a single query row, written into out.
void soft_assign(const PrototypeSet& protos, std::span<const double> query, DistanceMode mode,
                 std::span<double> out) {
  const size_t k = protos.way();
  // logit_j = -d_j; subtract the max logit (= -min distance) before exp.
  double min_d = distance(query, protos.prototypes.row(0), mode);
  out[0] = min_d;
  for (size_t j = 1; j < k; ++j) {
    out[j] = distance(query, protos.prototypes.row(j), mode);
    min_d = std::min(min_d, out[j]);
  }
  double sum = 0.0;
  for (size_t j = 0; j < k; ++j) {
    out[j] = std::exp(min_d - out[j]);
    sum += out[j];
  }
  const double inv = 1.0 / sum;
  for (size_t j = 0; j < k; ++j) out[j] *= inv;
}

}  // namespace

MatrixD protonet_predict(const PrototypeSet& protos, const MatrixD& queries, DistanceMode mode) {
  if (protos.way() == 0) throw DecodeError("no prototypes");
  if (queries.rows > 0 && queries.cols != protos.dim()) {
    throw ShapeError("queries have dim " + std::to_string(queries.cols) + ", prototypes " +
                     std::to_string(protos.dim()));
  }
  MatrixD out(queries.rows, protos.way());
  for (size_t i = 0; i < queries.rows; ++i) {
    soft_assign(protos, queries.row(i), mode, out.row(i));
  }
  return out;
}

std::vector<double> mct_confidence(const PrototypeSet& protos, std::span<const double> query,
                                   DistanceMode mode) {
  if (protos.way() == 0) throw DecodeError("no prototypes");
  std::vector<double> out(protos.way());
  soft_assign(protos, query, mode, out);
  return out;
}

PrototypeSet mct_update(std::span<const MatrixD> support_by_class, const MatrixD& queries,
                        const MatrixD& confidences) {
  if (support_by_class.empty()) throw DecodeError("no classes to update prototypes for");
  const size_t way = support_by_class.size();
  const size_t dim = support_by_class.front().cols;
  if (queries.rows != confidences.rows) {
    throw ShapeError("have " + std::to_string(queries.rows) + " queries but " +
                     std::to_string(confidences.rows) + " confidence rows");
  }
  if (queries.rows > 0 && confidences.cols != way) {
    throw ShapeError("confidence rows have " + std::to_string(confidences.cols) +
                     " entries, expected way " + std::to_string(way));
  }
  if (queries.rows > 0 && queries.cols != dim) {
    throw ShapeError("query dim " + std::to_string(queries.cols) + " does not match support dim " +
                     std::to_string(dim));
  }

  PrototypeSet out;
  out.prototypes = MatrixD(way, dim);
  for (size_t j = 0; j < way; ++j) {
    const MatrixD& s = support_by_class[j];
    if (s.rows == 0) throw DecodeError("class " + std::to_string(j) + " has no support embeddings");
    if (s.cols != dim) {
      throw ShapeError("class " + std::to_string(j) + " embeddings have dim " +
                       std::to_string(s.cols) + ", expected " + std::to_string(dim));
    }
    auto proto = out.prototypes.row(j);
    double weight = static_cast<double>(s.rows);
    for (size_t i = 0; i < s.rows; ++i) {
      auto row = s.row(i);
      for (size_t d = 0; d < dim; ++d) proto[d] += row[d];
    }
    for (size_t i = 0; i < queries.rows; ++i) {
      const double q = confidences(i, j);
      auto row = queries.row(i);
      for (size_t d = 0; d < dim; ++d) proto[d] += q * row[d];
      weight += q;
    }
    const double inv = 1.0 / weight;
    for (size_t d = 0; d < dim; ++d) proto[d] *= inv;
  }
  return out;
}

MatrixD mct_predict(std::span<const MatrixD> support_by_class, const MatrixD& queries,
                    const MctConfig& cfg) {
  if (cfg.iterations > 1000) {
    throw ArgumentError("refinement iteration count " + std::to_string(cfg.iterations) +
                        " exceeds the limit of 1000");
  }
  PrototypeSet protos = compute_prototypes(support_by_class);
  if (queries.rows == 0) return MatrixD(0, protos.way());

  for (uint32_t t = 0; t < cfg.iterations; ++t) {
    MatrixD conf = protonet_predict(protos, queries, cfg.distance);
    PrototypeSet next = mct_update(support_by_class, queries, conf);

    double max_move = 0.0;
    for (size_t j = 0; j < protos.way(); ++j) {
      max_move = std::max(
          max_move, distance(protos.prototypes.row(j), next.prototypes.row(j),
                             DistanceMode::euclidean));
    }
    protos = std::move(next);
    if (max_move < cfg.convergence_eps) break;
  }
  return protonet_predict(protos, queries, cfg.distance);
}

size_t argmax_label(std::span<const double> probs) {
  if (probs.empty()) throw ArgumentError("argmax of an empty distribution");
  size_t best = 0;
  for (size_t i = 1; i < probs.size(); ++i) {
    if (probs[i] > probs[best]) best = i;
  }
  return best;
}

AccuracySummary episodic_accuracy(std::span<const MatrixD> distributions,
                                  std::span<const std::vector<uint16_t>> truth) {
  if (distributions.size() != truth.size()) {
    throw ShapeError("have " + std::to_string(distributions.size()) + " episodes but " +
                     std::to_string(truth.size()) + " truth vectors");
  }
  if (distributions.empty()) throw ArgumentError("accuracy over zero episodes");

  AccuracySummary out;
  out.per_episode.reserve(distributions.size());
  for (size_t e = 0; e < distributions.size(); ++e) {
    const MatrixD& dist = distributions[e];
    const auto& labels = truth[e];
    if (dist.rows != labels.size()) {
      throw ShapeError("episode " + std::to_string(e) + " has " + std::to_string(dist.rows) +
                       " predictions but " + std::to_string(labels.size()) + " labels");
    }
    if (dist.rows == 0) throw ArgumentError("episode " + std::to_string(e) + " has no queries");
    size_t hits = 0;
    for (size_t i = 0; i < dist.rows; ++i) {
      if (argmax_label(dist.row(i)) == labels[i]) ++hits;
    }
    out.per_episode.push_back(static_cast<double>(hits) / static_cast<double>(dist.rows));
  }
  double sum = 0.0;
  for (double a : out.per_episode) sum += a;
  out.mean = sum / static_cast<double>(out.per_episode.size());
  return out;
}

}  // namespace fewshot
