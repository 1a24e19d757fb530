#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fewshot/matrix.hpp"

namespace fewshot {

enum class DistanceMode {
  squared_euclidean,
  euclidean,
};

struct MctConfig {
  uint32_t iterations = 10;      // refinement steps T; 0 degenerates to the plain decoder
  double convergence_eps = 1e-6; // stop once the largest prototype moves less than this
  DistanceMode distance = DistanceMode::squared_euclidean;
};

struct PrototypeSet {
  MatrixD prototypes;  // way x dim
  size_t way() const { return prototypes.rows; }
  size_t dim() const { return prototypes.cols; }
};

// Splits embedding rows by their episode-local label: result[j] holds the
// rows of class j in input order.
std::vector<MatrixD> group_by_class(const MatrixD& embeddings, std::span<const uint16_t> labels,
                                    size_t way);

// Prototype j = mean of class j's support embeddings. Empty classes raise
// DecodeError, inconsistent dims ShapeError.
PrototypeSet compute_prototypes(std::span<const MatrixD> support_by_class);

double distance(std::span<const double> a, std::span<const double> b, DistanceMode mode);

// Softmax over negative distances to each prototype; one distribution row
// per query row.
MatrixD protonet_predict(const PrototypeSet& protos, const MatrixD& queries, DistanceMode mode);

// Soft assignment of one query against the current prototypes; equals the
// corresponding protonet row.
std::vector<double> mct_confidence(const PrototypeSet& protos, std::span<const double> query,
                                   DistanceMode mode);

// One soft k-means step: prototype j becomes the confidence-weighted mean of
// its support plus all queries, weighted by their class-j confidence.
// confidences has one row per query row.
PrototypeSet mct_update(std::span<const MatrixD> support_by_class, const MatrixD& queries,
                        const MatrixD& confidences);

// Transductive decoder: alternates confidence computation and prototype
// updates up to cfg.iterations times (stopping early once prototypes move
// less than cfg.convergence_eps), then reports the confidences under the
// final prototypes. With no queries this reduces to plain prototypes.
MatrixD mct_predict(std::span<const MatrixD> support_by_class, const MatrixD& queries,
                    const MctConfig& cfg);

// Lowest index wins ties.
size_t argmax_label(std::span<const double> probs);

struct AccuracySummary {
  double mean = 0.0;
  std::vector<double> per_episode;
};

// Fraction of argmax predictions matching the true label, per episode and
// averaged. distributions[e] is an n_e x way matrix, truth[e] its labels.
AccuracySummary episodic_accuracy(std::span<const MatrixD> distributions,
                                  std::span<const std::vector<uint16_t>> truth);

}  // namespace fewshot
