#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fewshot/matrix.hpp"

namespace fewshot {

// Concatenates the per-learner distributions of one episode into feature
// rows: learner m's way-sized block occupies columns [m*way, (m+1)*way).
MatrixD build_features(std::span<const MatrixD> per_learner);

struct EpisodeFeatures {
  MatrixD features;              // n x (learners*way)
  std::vector<uint16_t> labels;  // n episode-local labels
};

// Raw material for candidate selection: the per-learner distributions of one
// episode plus the true labels.
struct EnsembleEpisode {
  std::vector<MatrixD> per_learner;
  std::vector<uint16_t> labels;
};

enum class EnsembleVariant : uint8_t {
  majority_vote = 0,
  multinomial_linear = 1,
  gaussian_nb = 2,
};

std::string variant_name(EnsembleVariant v);

struct EnsembleModel {
  EnsembleVariant variant = EnsembleVariant::majority_vote;
  uint32_t learners = 0;
  uint32_t way = 0;

  // multinomial_linear: way x (learners*way + 1); the last column is the bias.
  MatrixD linear_weights;

  // gaussian_nb: per-class feature means/variances and class priors.
  MatrixD nb_means;  // way x (learners*way)
  MatrixD nb_vars;   // way x (learners*way), floored at the variance minimum
  std::vector<double> nb_priors;

  bool operator==(const EnsembleModel&) const = default;
};

struct LinearTrainConfig {
  double l2 = 1e-3;          // penalty on the weight block; the bias column is exempt
  uint32_t iterations = 500;
  double lr = 0.1;
};

constexpr double kNbVarianceFloor = 1e-6;

// Trains the fixed candidate lineup (majority vote, multinomial linear,
// gaussian naive bayes, in that order) on pooled episode features. A class
// that never appears in the training episodes raises TrainError.
std::vector<EnsembleModel> train_candidates(std::span<const EpisodeFeatures> train_episodes,
                                            uint32_t learners, uint32_t way,
                                            const LinearTrainConfig& linear_cfg = {});

// Distribution over the way classes for one feature row.
std::vector<double> ensemble_predict(const EnsembleModel& model,
                                     std::span<const double> features);

struct EnsembleSelection {
  size_t best_index = 0;
  EnsembleModel best;
  std::vector<double> accuracy_by_candidate;  // episodic accuracy, candidate order
};

// Scores every candidate by episodic accuracy on held-out episodes and keeps
// the best; exact ties go to the earlier candidate.
EnsembleSelection select_best(std::span<const EnsembleModel> candidates,
                              std::span<const EnsembleEpisode> test_episodes);

// Binary container ("ENS1", little-endian f64 tensors). Round-trips exactly.
void save_ensemble(const EnsembleModel& model, const std::filesystem::path& path);
EnsembleModel load_ensemble(const std::filesystem::path& path);

}  // namespace fewshot
