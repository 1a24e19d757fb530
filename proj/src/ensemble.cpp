#include "fewshot/ensemble.hpp"

#include <algorithm>
#include <cmath>

#include "fewshot/detail/bytes.hpp"
#include "fewshot/decoders.hpp"
#include "fewshot/error.hpp"

namespace fewshot {

MatrixD build_features(std::span<const MatrixD> per_learner) {
  if (per_learner.empty()) throw ShapeError("feature build needs at least one learner");
  const size_t n = per_learner.front().rows;
  const size_t way = per_learner.front().cols;
  if (way == 0) throw ShapeError("learner distributions have zero width");
  for (size_t m = 1; m < per_learner.size(); ++m) {
    if (per_learner[m].rows != n || per_learner[m].cols != way) {
      throw ShapeError("learner " + std::to_string(m) + " distributions are " +
                       std::to_string(per_learner[m].rows) + "x" +
                       std::to_string(per_learner[m].cols) + ", expected " + std::to_string(n) +
                       "x" + std::to_string(way));
    }
  }
  MatrixD out(n, per_learner.size() * way);
  for (size_t i = 0; i < n; ++i) {
    auto dst = out.row(i);
    for (size_t m = 0; m < per_learner.size(); ++m) {
      auto src = per_learner[m].row(i);
      std::copy(src.begin(), src.end(), dst.begin() + m * way);
    }
  }
  return out;
}

std::string variant_name(EnsembleVariant v) {
  switch (v) {
    case EnsembleVariant::majority_vote: return "vote";
    case EnsembleVariant::multinomial_linear: return "linear";
    case EnsembleVariant::gaussian_nb: return "naive_bayes";
  }
  return "unknown";
}

namespace {

struct PooledFeatures {
  MatrixD x;                    // n x dim
  std::vector<uint16_t> y;      // n
};

PooledFeatures pool_episodes(std::span<const EpisodeFeatures> episodes, uint32_t learners,
                             uint32_t way) {
  const size_t dim = static_cast<size_t>(learners) * way;
  size_t total = 0;
  for (const auto& ep : episodes) {
    if (ep.features.cols != dim) {
      throw ShapeError("episode features have dim " + std::to_string(ep.features.cols) +
                       ", expected " + std::to_string(dim));
    }
    if (ep.features.rows != ep.labels.size()) {
      throw ShapeError("episode has " + std::to_string(ep.features.rows) + " feature rows but " +
                       std::to_string(ep.labels.size()) + " labels");
    }
    for (uint16_t l : ep.labels) {
      if (l >= way) {
        throw ShapeError("episode label " + std::to_string(l) + " outside way " +
                         std::to_string(way));
      }
    }
    total += ep.features.rows;
  }

  PooledFeatures out;
  out.x = MatrixD(total, dim);
  out.y.reserve(total);
  size_t row = 0;
  for (const auto& ep : episodes) {
    for (size_t i = 0; i < ep.features.rows; ++i) {
      auto src = ep.features.row(i);
      std::copy(src.begin(), src.end(), out.x.row(row++).begin());
      out.y.push_back(ep.labels[i]);
    }
  }
  return out;
}

EnsembleModel train_linear(const PooledFeatures& pooled, uint32_t learners, uint32_t way,
                           const LinearTrainConfig& cfg) {
  EnsembleModel model;
  model.variant = EnsembleVariant::multinomial_linear;
  model.learners = learners;
  model.way = way;
  const size_t dim = static_cast<size_t>(learners) * way;
  model.linear_weights = MatrixD(way, dim + 1);

  const size_t n = pooled.x.rows;
  const double inv_n = 1.0 / static_cast<double>(n);
  std::vector<double> probs(way);
  MatrixD grad(way, dim + 1);

  for (uint32_t it = 0; it < cfg.iterations; ++it) {
    std::fill(grad.data.begin(), grad.data.end(), 0.0);
    for (size_t i = 0; i < n; ++i) {
      auto x = pooled.x.row(i);
      // logits with max subtraction
      double mx = -1e300;
      for (uint32_t k = 0; k < way; ++k) {
        auto w = model.linear_weights.row(k);
        double z = w[dim];
        for (size_t f = 0; f < dim; ++f) z += w[f] * x[f];
        probs[k] = z;
        mx = std::max(mx, z);
      }
      double sum = 0.0;
      for (uint32_t k = 0; k < way; ++k) {
        probs[k] = std::exp(probs[k] - mx);
        sum += probs[k];
      }
      for (uint32_t k = 0; k < way; ++k) probs[k] /= sum;
      probs[pooled.y[i]] -= 1.0;
      for (uint32_t k = 0; k < way; ++k) {
        const double s = probs[k] * inv_n;
        if (s == 0.0) continue;
        auto g = grad.row(k);
        for (size_t f = 0; f < dim; ++f) g[f] += s * x[f];
        g[dim] += s;
      }
    }
    // L2 on the weight block only; the bias column is unpenalized.
    for (uint32_t k = 0; k < way; ++k) {
      auto w = model.linear_weights.row(k);
      auto g = grad.row(k);
      for (size_t f = 0; f < dim; ++f) g[f] += 2.0 * cfg.l2 * w[f];
    }
    for (size_t i = 0; i < grad.data.size(); ++i) {
      model.linear_weights.data[i] -= cfg.lr * grad.data[i];
    }
  }
  return model;
}

EnsembleModel train_gaussian_nb(const PooledFeatures& pooled, uint32_t learners, uint32_t way) {
  EnsembleModel model;
  model.variant = EnsembleVariant::gaussian_nb;
  model.learners = learners;
  model.way = way;
  const size_t dim = static_cast<size_t>(learners) * way;
  model.nb_means = MatrixD(way, dim);
  model.nb_vars = MatrixD(way, dim);
  model.nb_priors.assign(way, 0.0);

  std::vector<size_t> counts(way, 0);
  for (size_t i = 0; i < pooled.x.rows; ++i) {
    const uint16_t k = pooled.y[i];
    ++counts[k];
    auto x = pooled.x.row(i);
    auto mean = model.nb_means.row(k);
    for (size_t f = 0; f < dim; ++f) mean[f] += x[f];
  }
  for (uint32_t k = 0; k < way; ++k) {
    const double inv = 1.0 / static_cast<double>(counts[k]);
    auto mean = model.nb_means.row(k);
    for (size_t f = 0; f < dim; ++f) mean[f] *= inv;
  }
  for (size_t i = 0; i < pooled.x.rows; ++i) {
    const uint16_t k = pooled.y[i];
    auto x = pooled.x.row(i);
    auto mean = model.nb_means.row(k);
    auto var = model.nb_vars.row(k);
    for (size_t f = 0; f < dim; ++f) {
      const double d = x[f] - mean[f];
      var[f] += d * d;
    }
  }
  for (uint32_t k = 0; k < way; ++k) {
    const double inv = 1.0 / static_cast<double>(counts[k]);
    auto var = model.nb_vars.row(k);
    for (size_t f = 0; f < dim; ++f) var[f] = std::max(var[f] * inv, kNbVarianceFloor);
    model.nb_priors[k] = static_cast<double>(counts[k]) / static_cast<double>(pooled.x.rows);
  }
  return model;
}

}  // namespace

std::vector<EnsembleModel> train_candidates(std::span<const EpisodeFeatures> train_episodes,
                                            uint32_t learners, uint32_t way,
                                            const LinearTrainConfig& linear_cfg) {
  if (learners == 0 || way == 0) throw ArgumentError("ensemble needs learners >= 1 and way >= 1");
  if (train_episodes.empty()) throw TrainError("no ensemble training episodes");

  PooledFeatures pooled = pool_episodes(train_episodes, learners, way);
  std::vector<size_t> counts(way, 0);
  for (uint16_t l : pooled.y) ++counts[l];
  for (uint32_t k = 0; k < way; ++k) {
    if (counts[k] == 0) {
      throw TrainError("class " + std::to_string(k) +
                       " never appears in the ensemble training episodes");
    }
  }

  std::vector<EnsembleModel> candidates;
  EnsembleModel vote;
  vote.variant = EnsembleVariant::majority_vote;
  vote.learners = learners;
  vote.way = way;
  candidates.push_back(std::move(vote));
  candidates.push_back(train_linear(pooled, learners, way, linear_cfg));
  candidates.push_back(train_gaussian_nb(pooled, learners, way));
  return candidates;
}

std::vector<double> ensemble_predict(const EnsembleModel& model,
                                     std::span<const double> features) {
  const size_t dim = static_cast<size_t>(model.learners) * model.way;
  if (features.size() != dim) {
    throw ShapeError("feature row has " + std::to_string(features.size()) +
                     " entries, model expects " + std::to_string(dim));
  }
  const uint32_t way = model.way;
  std::vector<double> out(way, 0.0);

  switch (model.variant) {
    case EnsembleVariant::majority_vote: {
      std::vector<uint32_t> votes(way, 0);
      for (uint32_t m = 0; m < model.learners; ++m) {
        auto block = features.subspan(static_cast<size_t>(m) * way, way);
        ++votes[argmax_label(block)];
      }
      uint32_t top = *std::max_element(votes.begin(), votes.end());
      // Ties are broken by summed probability mass, then by lowest index.
      size_t best = way;
      double best_mass = 0.0;
      for (uint32_t k = 0; k < way; ++k) {
        if (votes[k] != top) continue;
        double mass = 0.0;
        for (uint32_t m = 0; m < model.learners; ++m) {
          mass += features[static_cast<size_t>(m) * way + k];
        }
        if (best == way || mass > best_mass) {
          best = k;
          best_mass = mass;
        }
      }
      out[best] = 1.0;
      return out;
    }
    case EnsembleVariant::multinomial_linear: {
      double mx = -1e300;
      for (uint32_t k = 0; k < way; ++k) {
        auto w = model.linear_weights.row(k);
        double z = w[dim];
        for (size_t f = 0; f < dim; ++f) z += w[f] * features[f];
        out[k] = z;
        mx = std::max(mx, z);
      }
      double sum = 0.0;
      for (uint32_t k = 0; k < way; ++k) {
        out[k] = std::exp(out[k] - mx);
        sum += out[k];
      }
      for (uint32_t k = 0; k < way; ++k) out[k] /= sum;
      return out;
    }
    case EnsembleVariant::gaussian_nb: {
      constexpr double kLog2Pi = 1.8378770664093454836;
      double mx = -1e300;
      for (uint32_t k = 0; k < way; ++k) {
        auto mean = model.nb_means.row(k);
        auto var = model.nb_vars.row(k);
        double lp = std::log(model.nb_priors[k]);
        for (size_t f = 0; f < dim; ++f) {
          const double d = features[f] - mean[f];
          lp -= 0.5 * (kLog2Pi + std::log(var[f]) + d * d / var[f]);
        }
        out[k] = lp;
        mx = std::max(mx, lp);
      }
      double sum = 0.0;
      for (uint32_t k = 0; k < way; ++k) {
        out[k] = std::exp(out[k] - mx);
        sum += out[k];
      }
      for (uint32_t k = 0; k < way; ++k) out[k] /= sum;
      return out;
    }
  }
  throw ArgumentError("unknown ensemble variant");
}

EnsembleSelection select_best(std::span<const EnsembleModel> candidates,
                              std::span<const EnsembleEpisode> test_episodes) {
  if (candidates.empty()) throw ArgumentError("no ensemble candidates to select from");
  if (test_episodes.empty()) throw ArgumentError("no held-out episodes to select on");

  std::vector<std::vector<MatrixD>> dists(candidates.size());
  std::vector<std::vector<uint16_t>> truth;
  for (const auto& ep : test_episodes) {
    MatrixD features = build_features(ep.per_learner);
    if (features.rows != ep.labels.size()) {
      throw ShapeError("ensemble episode has " + std::to_string(features.rows) +
                       " query rows but " + std::to_string(ep.labels.size()) + " labels");
    }
    truth.push_back(ep.labels);
    for (size_t c = 0; c < candidates.size(); ++c) {
      MatrixD d(features.rows, candidates[c].way);
      for (size_t i = 0; i < features.rows; ++i) {
        auto probs = ensemble_predict(candidates[c], features.row(i));
        std::copy(probs.begin(), probs.end(), d.row(i).begin());
      }
      dists[c].push_back(std::move(d));
    }
  }

  EnsembleSelection sel;
  sel.accuracy_by_candidate.reserve(candidates.size());
  for (size_t c = 0; c < candidates.size(); ++c) {
    sel.accuracy_by_candidate.push_back(episodic_accuracy(dists[c], truth).mean);
  }
  sel.best_index = 0;
  for (size_t c = 1; c < candidates.size(); ++c) {
    if (sel.accuracy_by_candidate[c] > sel.accuracy_by_candidate[sel.best_index]) {
      sel.best_index = c;
    }
  }
  sel.best = candidates[sel.best_index];
  return sel;
}

void save_ensemble(const EnsembleModel& model, const std::filesystem::path& path) {
  std::vector<uint8_t> out;
  out.insert(out.end(), {'E', 'N', 'S', '1'});
  out.push_back(static_cast<uint8_t>(model.variant));
  detail::put_u32(out, model.learners);
  detail::put_u32(out, model.way);
  switch (model.variant) {
    case EnsembleVariant::majority_vote:
      break;
    case EnsembleVariant::multinomial_linear:
      for (double v : model.linear_weights.data) detail::put_f64(out, v);
      break;
    case EnsembleVariant::gaussian_nb:
      for (double v : model.nb_means.data) detail::put_f64(out, v);
      for (double v : model.nb_vars.data) detail::put_f64(out, v);
      for (double v : model.nb_priors) detail::put_f64(out, v);
      break;
  }
  detail::write_file_bytes(path, out);
}

EnsembleModel load_ensemble(const std::filesystem::path& path) {
  auto bytes = detail::read_file_bytes(path);
  detail::ByteReader reader(bytes, path.string());
  reader.magic("ENS1");

  EnsembleModel model;
  uint8_t variant = reader.u8();
  if (variant > static_cast<uint8_t>(EnsembleVariant::gaussian_nb)) {
    throw FormatError(path.string() + ": unknown ensemble variant " + std::to_string(variant));
  }
  model.variant = static_cast<EnsembleVariant>(variant);
  model.learners = reader.u32();
  model.way = reader.u32();
  if (model.learners == 0 || model.way == 0) {
    throw FormatError(path.string() + ": zero learner or way count");
  }
  const size_t dim = static_cast<size_t>(model.learners) * model.way;

  switch (model.variant) {
    case EnsembleVariant::majority_vote:
      break;
    case EnsembleVariant::multinomial_linear:
      model.linear_weights = MatrixD(model.way, dim + 1);
      for (auto& v : model.linear_weights.data) v = reader.f64();
      break;
    case EnsembleVariant::gaussian_nb:
      model.nb_means = MatrixD(model.way, dim);
      model.nb_vars = MatrixD(model.way, dim);
      model.nb_priors.resize(model.way);
      for (auto& v : model.nb_means.data) v = reader.f64();
      for (auto& v : model.nb_vars.data) v = reader.f64();
      for (auto& v : model.nb_priors) v = reader.f64();
      break;
  }
  reader.expect_end();
  return model;
}

}  // namespace fewshot
