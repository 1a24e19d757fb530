#include "fewshot/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "fewshot/controller.hpp"
#include "fewshot/detail/bytes.hpp"
#include "fewshot/encoder.hpp"
#include "fewshot/ensemble.hpp"
#include "fewshot/error.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace fewshot {

namespace {

[[noreturn]] void bad_config(const std::string& what) { throw ArgumentError("config: " + what); }

void reject_unknown_keys(const json& j, const std::set<std::string>& allowed,
                         const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) bad_config("unknown key '" + key + "' in " + where);
  }
}

DistanceMode parse_distance(const std::string& s) {
  if (s == "squared_euclidean" || s == "squared") return DistanceMode::squared_euclidean;
  if (s == "euclidean") return DistanceMode::euclidean;
  bad_config("distance must be 'squared_euclidean' or 'euclidean', got '" + s + "'");
}

std::string distance_name(DistanceMode mode) {
  return mode == DistanceMode::squared_euclidean ? "squared_euclidean" : "euclidean";
}

WorkerSpec parse_worker(const json& j, size_t index) {
  const std::string where = "workers[" + std::to_string(index) + "]";
  if (!j.is_object()) bad_config(where + " must be an object");
  reject_unknown_keys(j,
                      {"provider", "hidden_dims", "embedding_dim", "learning_rate", "alpha",
                       "batch_way", "batch_shot", "epochs_per_round", "batches_per_epoch"},
                      where);
  WorkerSpec spec;
  if (j.contains("provider")) spec.provider = j.at("provider").get<std::string>();
  if (spec.provider != "mlp" && spec.provider != "identity") {
    bad_config(where + ".provider must be 'mlp' or 'identity'");
  }
  if (j.contains("hidden_dims")) spec.hidden_dims = j.at("hidden_dims").get<std::vector<size_t>>();
  if (j.contains("embedding_dim")) spec.embedding_dim = j.at("embedding_dim").get<size_t>();
  if (j.contains("learning_rate")) spec.learning_rate = j.at("learning_rate").get<double>();
  if (j.contains("alpha")) spec.alpha = j.at("alpha").get<double>();
  if (j.contains("batch_way")) spec.batch_way = j.at("batch_way").get<uint32_t>();
  if (j.contains("batch_shot")) spec.batch_shot = j.at("batch_shot").get<uint32_t>();
  if (j.contains("epochs_per_round")) spec.epochs_per_round = j.at("epochs_per_round").get<uint32_t>();
  if (j.contains("batches_per_epoch")) spec.batches_per_epoch = j.at("batches_per_epoch").get<uint32_t>();

  if (spec.provider == "mlp") {
    if (spec.embedding_dim == 0) bad_config(where + ".embedding_dim must be >= 1");
    for (size_t h : spec.hidden_dims) {
      if (h == 0) bad_config(where + ".hidden_dims entries must be >= 1");
    }
    if (!(spec.learning_rate > 0)) bad_config(where + ".learning_rate must be positive");
    if (spec.alpha < 0) bad_config(where + ".alpha must be >= 0");
    if (spec.batch_way == 0 || spec.batch_shot == 0) {
      bad_config(where + " batch shape must be >= 1");
    }
    if (spec.epochs_per_round == 0 || spec.batches_per_epoch == 0) {
      bad_config(where + " epochs_per_round and batches_per_epoch must be >= 1");
    }
  }
  return spec;
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("config is not valid json: ") + e.what());
  }
  if (!j.is_object()) bad_config("top level must be an object");
  reject_unknown_keys(j,
                      {"dataset_path", "dataset_kind", "split_ratios", "seed", "workers",
                       "decoder", "evaluation", "valid_episodes", "ensemble_train_episodes",
                       "ensemble_test_episodes", "ensemble_train_fraction", "budget_seconds",
                       "reserve_fraction", "max_rounds"},
                      "config");

  RunConfig cfg;
  try {
    if (!j.contains("dataset_path")) bad_config("dataset_path is required");
    cfg.dataset_path = j.at("dataset_path").get<std::string>();
    if (cfg.dataset_path.empty()) bad_config("dataset_path must not be empty");
    if (j.contains("dataset_kind")) cfg.dataset_kind = j.at("dataset_kind").get<std::string>();
    if (cfg.dataset_kind != "images" && cfg.dataset_kind != "embeddings") {
      bad_config("dataset_kind must be 'images' or 'embeddings'");
    }
    if (j.contains("split_ratios")) {
      auto r = j.at("split_ratios");
      if (!r.is_array() || r.size() != 3) bad_config("split_ratios must be [train, valid, test]");
      cfg.split_ratios = {r.at(0).get<uint32_t>(), r.at(1).get<uint32_t>(),
                          r.at(2).get<uint32_t>()};
    }
    if (j.contains("seed")) cfg.seed = j.at("seed").get<uint64_t>();

    if (j.contains("workers")) {
      const auto& w = j.at("workers");
      if (!w.is_array() || w.empty()) bad_config("workers must be a non-empty array");
      cfg.workers.clear();
      for (size_t i = 0; i < w.size(); ++i) cfg.workers.push_back(parse_worker(w.at(i), i));
    }

    if (j.contains("decoder")) {
      const auto& d = j.at("decoder");
      reject_unknown_keys(d, {"mct_steps", "convergence_eps", "distance"}, "decoder");
      if (d.contains("mct_steps")) cfg.decoder.iterations = d.at("mct_steps").get<uint32_t>();
      if (d.contains("convergence_eps")) {
        cfg.decoder.convergence_eps = d.at("convergence_eps").get<double>();
      }
      if (d.contains("distance")) {
        cfg.decoder.distance = parse_distance(d.at("distance").get<std::string>());
      }
      if (cfg.decoder.iterations > 1000) bad_config("decoder.mct_steps must be <= 1000");
      if (cfg.decoder.convergence_eps < 0) bad_config("decoder.convergence_eps must be >= 0");
    }

    if (j.contains("evaluation")) {
      const auto& e = j.at("evaluation");
      reject_unknown_keys(e, {"episodes", "way", "shot", "query"}, "evaluation");
      if (e.contains("episodes")) cfg.evaluation.episodes = e.at("episodes").get<uint32_t>();
      if (e.contains("way")) cfg.evaluation.way = e.at("way").get<uint32_t>();
      if (e.contains("shot")) cfg.evaluation.shot = e.at("shot").get<uint32_t>();
      if (e.contains("query")) cfg.evaluation.query = e.at("query").get<uint32_t>();
    }
    if (cfg.evaluation.episodes == 0 || cfg.evaluation.way == 0 || cfg.evaluation.shot == 0 ||
        cfg.evaluation.query == 0) {
      bad_config("evaluation episodes/way/shot/query must all be >= 1");
    }

    if (j.contains("valid_episodes")) cfg.valid_episodes = j.at("valid_episodes").get<uint32_t>();
    if (cfg.valid_episodes == 0) bad_config("valid_episodes must be >= 1");
    if (j.contains("ensemble_train_episodes")) {
      cfg.ensemble_train_episodes = j.at("ensemble_train_episodes").get<uint32_t>();
    }
    if (j.contains("ensemble_test_episodes")) {
      cfg.ensemble_test_episodes = j.at("ensemble_test_episodes").get<uint32_t>();
    }
    if (cfg.ensemble_train_episodes == 0 || cfg.ensemble_test_episodes == 0) {
      bad_config("ensemble episode counts must be >= 1");
    }
    if (j.contains("ensemble_train_fraction")) {
      cfg.ensemble_train_fraction = j.at("ensemble_train_fraction").get<double>();
    }
    if (!(cfg.ensemble_train_fraction > 0 && cfg.ensemble_train_fraction < 1)) {
      bad_config("ensemble_train_fraction must lie in (0, 1)");
    }
    if (j.contains("budget_seconds")) cfg.budget_seconds = j.at("budget_seconds").get<double>();
    if (!(cfg.budget_seconds > 0)) bad_config("budget_seconds must be positive");
    if (j.contains("reserve_fraction")) {
      cfg.reserve_fraction = j.at("reserve_fraction").get<double>();
    }
    if (!(cfg.reserve_fraction >= 0 && cfg.reserve_fraction < 1)) {
      bad_config("reserve_fraction must lie in [0, 1)");
    }
    if (j.contains("max_rounds")) cfg.max_rounds = j.at("max_rounds").get<uint32_t>();
  } catch (const json::exception& e) {
    throw ArgumentError(std::string("config: ") + e.what());
  }
  return cfg;
}

std::string run_config_to_json(const RunConfig& cfg) {
  json j;
  j["dataset_path"] = cfg.dataset_path;
  j["dataset_kind"] = cfg.dataset_kind;
  j["split_ratios"] = {cfg.split_ratios[0], cfg.split_ratios[1], cfg.split_ratios[2]};
  j["seed"] = cfg.seed;
  j["workers"] = json::array();
  for (const auto& w : cfg.workers) {
    json jw;
    jw["provider"] = w.provider;
    jw["hidden_dims"] = w.hidden_dims;
    jw["embedding_dim"] = w.embedding_dim;
    jw["learning_rate"] = w.learning_rate;
    jw["alpha"] = w.alpha;
    jw["batch_way"] = w.batch_way;
    jw["batch_shot"] = w.batch_shot;
    jw["epochs_per_round"] = w.epochs_per_round;
    jw["batches_per_epoch"] = w.batches_per_epoch;
    j["workers"].push_back(std::move(jw));
  }
  j["decoder"] = {{"mct_steps", cfg.decoder.iterations},
                  {"convergence_eps", cfg.decoder.convergence_eps},
                  {"distance", distance_name(cfg.decoder.distance)}};
  j["evaluation"] = {{"episodes", cfg.evaluation.episodes},
                     {"way", cfg.evaluation.way},
                     {"shot", cfg.evaluation.shot},
                     {"query", cfg.evaluation.query}};
  j["valid_episodes"] = cfg.valid_episodes;
  j["ensemble_train_episodes"] = cfg.ensemble_train_episodes;
  j["ensemble_test_episodes"] = cfg.ensemble_test_episodes;
  j["ensemble_train_fraction"] = cfg.ensemble_train_fraction;
  j["budget_seconds"] = cfg.budget_seconds;
  j["reserve_fraction"] = cfg.reserve_fraction;
  j["max_rounds"] = cfg.max_rounds;
  return j.dump(2) + "\n";
}

namespace {

LabeledDataset load_dataset(const RunConfig& cfg) {
  if (cfg.dataset_kind == "images") return load_image_dataset(cfg.dataset_path);
  return load_embedding_dataset(cfg.dataset_path);
}

std::vector<uint16_t> labels_of(std::span<const EpisodeRef> refs) {
  std::vector<uint16_t> out;
  out.reserve(refs.size());
  for (const auto& r : refs) out.push_back(r.label);
  return out;
}

std::vector<uint32_t> items_of(std::span<const EpisodeRef> refs) {
  std::vector<uint32_t> out;
  out.reserve(refs.size());
  for (const auto& r : refs) out.push_back(r.item);
  return out;
}

// Embeds one episode and decodes the query distributions: transductive
// refinement for deployment-style decoding, plain prototype softmax for the
// cheap per-round validation.
MatrixD decode_episode(const LabeledDataset& ds, const Episode& ep,
                       const EmbeddingProvider& provider, const MctConfig& dec,
                       bool transductive) {
  MatrixD s_emb = provider.embed(ds, items_of(ep.support));
  MatrixD q_emb = provider.embed(ds, items_of(ep.query));
  auto grouped = group_by_class(s_emb, labels_of(ep.support), ep.way);
  if (transductive) return mct_predict(grouped, q_emb, dec);
  return protonet_predict(compute_prototypes(grouped), q_emb, dec.distance);
}

std::string format_seconds(double s) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f", s);
  return buf;
}

std::string format_log(const std::vector<RoundRecord>& log) {
  std::string out;
  for (const auto& rec : log) {
    out += "[" + format_seconds(rec.at) + "s] ";
    switch (rec.kind) {
      case RoundRecord::Kind::round_done: {
        char buf[160];
        std::snprintf(buf, sizeof buf, "worker %d round %d done: duration %.3fs, valid accuracy %.4f",
                      rec.worker, rec.round, rec.duration, rec.accuracy);
        out += buf;
        break;
      }
      case RoundRecord::Kind::decision:
        out += "worker " + std::to_string(rec.worker) + " verdict: " + rec.note;
        break;
      case RoundRecord::Kind::aborted:
        out += "worker " + std::to_string(rec.worker) + " round " + std::to_string(rec.round) +
               " aborted: " + rec.note;
        break;
      case RoundRecord::Kind::failure:
        out += "worker " + std::to_string(rec.worker) + " failed: " + rec.note;
        break;
      case RoundRecord::Kind::hard_stop:
        out += "hard stop: " + rec.note;
        break;
      case RoundRecord::Kind::finished:
        out += "worker " + std::to_string(rec.worker) + " finished";
        break;
    }
    out += "\n";
  }
  return out;
}

}  // namespace

std::string train_outcome_to_json(const TrainOutcome& outcome) {
  json j;
  j["degraded"] = outcome.degraded;
  j["workers"] = json::array();
  for (const auto& w : outcome.workers) {
    j["workers"].push_back({{"id", w.id},
                            {"best_valid_accuracy", w.best_valid_accuracy},
                            {"rounds", w.rounds},
                            {"validations", w.validations},
                            {"failed", w.failed},
                            {"error", w.error}});
  }
  j["ensemble_variant"] = outcome.ensemble_variant;
  j["ensemble_candidate_accuracy"] = outcome.ensemble_candidate_accuracy;
  j["timings"] = {{"train_s", outcome.train_seconds}, {"ensemble_s", outcome.ensemble_seconds}};
  return j.dump(2) + "\n";
}

TrainOutcome run_training(const RunConfig& cfg, const fs::path& run_dir, Clock& clock) {
  LabeledDataset ds = load_dataset(cfg);
  ClassSplit split = split_classes(ds, cfg.split_ratios, derive_seed(cfg.seed, "split"));

  const uint32_t way = cfg.evaluation.way;
  if (split.meta_valid.size() < way) {
    throw ArgumentError("meta-valid has " + std::to_string(split.meta_valid.size()) +
                        " classes but episodes need way " + std::to_string(way));
  }
  if (split.meta_test.size() < way) {
    throw ArgumentError("meta-test has " + std::to_string(split.meta_test.size()) +
                        " classes but episodes need way " + std::to_string(way));
  }

  fs::create_directories(run_dir);
  detail::write_file_text(run_dir / "config.json", run_config_to_json(cfg));
  save_split(split, run_dir / "split.json");

  ItemPool train_pool(ds, split.meta_train);
  ItemPool valid_pool(ds, split.meta_valid);

  // Per-worker training state lives outside the round function so batch
  // streams continue across rounds instead of restarting.
  struct WorkerCtx {
    TrainHyper hyper;
    Rng batch_rng{0};
  };
  std::vector<WorkerCtx> ctxs;
  std::vector<EncoderCheckpoint> initial;
  std::vector<int> per_worker_rounds;
  for (size_t w = 0; w < cfg.workers.size(); ++w) {
    const WorkerSpec& spec = cfg.workers[w];
    const std::string tag = "worker:" + std::to_string(w);

    EncoderCheckpoint ckpt;
    if (spec.provider == "identity") {
      if (ds.payload_kind != PayloadKind::embedding) {
        throw ArgumentError("worker " + std::to_string(w) +
                            " uses the identity provider, which needs an embedding dataset");
      }
      ckpt.kind = EncoderCheckpoint::Kind::identity;
      ckpt.identity_dim = static_cast<uint32_t>(ds.feature_dim());
      per_worker_rounds.push_back(1);  // nothing changes between rounds
    } else {
      Rng init_rng(derive_seed(cfg.seed, tag + ":init"));
      ckpt.kind = EncoderCheckpoint::Kind::mlp;
      ckpt.mlp = Mlp<float>::random(ds.feature_dim(), spec.hidden_dims, spec.embedding_dim,
                                    train_pool.class_count(), init_rng);
      per_worker_rounds.push_back(0);
    }
    initial.push_back(std::move(ckpt));

    WorkerCtx ctx;
    ctx.hyper.learning_rate = spec.learning_rate;
    ctx.hyper.alpha = spec.alpha;
    ctx.hyper.way = std::min<uint32_t>(spec.batch_way,
                                       static_cast<uint32_t>(train_pool.class_count()));
    ctx.hyper.shot = spec.batch_shot;
    ctx.hyper.epochs = spec.epochs_per_round;
    ctx.hyper.batches_per_epoch = spec.batches_per_epoch;
    ctx.batch_rng = Rng(derive_seed(cfg.seed, tag + ":batches"));
    ctxs.push_back(std::move(ctx));
  }

  const EvalSpec& ev = cfg.evaluation;
  RoundFn<EncoderCheckpoint> round_fn = [&](int w, int /*round*/, EncoderCheckpoint& ckpt,
                                            const StopFlag& stop) -> std::optional<double> {
    WorkerCtx& ctx = ctxs[static_cast<size_t>(w)];
    if (ckpt.kind == EncoderCheckpoint::Kind::mlp) {
      if (!train_epochs(ckpt.mlp, ds, train_pool, ctx.hyper, ctx.batch_rng, &stop)) {
        return std::nullopt;  // stopped mid-round, skip validation
      }
    }
    // Fixed validation episodes: the same seed every round, so accuracy
    // changes only through the parameters.
    Rng vrng(derive_seed(cfg.seed, "valid-episodes"));
    auto provider = ckpt.make_provider();
    std::vector<MatrixD> dists;
    std::vector<std::vector<uint16_t>> truth;
    dists.reserve(cfg.valid_episodes);
    for (uint32_t e = 0; e < cfg.valid_episodes; ++e) {
      Episode ep = sample_episode(valid_pool, ev.way, ev.shot, ev.query, vrng);
      dists.push_back(decode_episode(ds, ep, *provider, cfg.decoder, /*transductive=*/false));
      truth.push_back(labels_of(ep.query));
    }
    return episodic_accuracy(dists, truth).mean;
  };

  SupervisorConfig scfg;
  scfg.budget_seconds = cfg.budget_seconds;
  scfg.reserve_seconds = cfg.reserve_fraction * cfg.budget_seconds;
  scfg.max_rounds = static_cast<int>(cfg.max_rounds);
  scfg.worker_max_rounds = std::move(per_worker_rounds);

  const double t_train0 = clock.now();
  auto run = run_supervised_training<EncoderCheckpoint>(std::move(initial), round_fn, clock, scfg);

  TrainOutcome outcome;
  outcome.train_seconds = clock.now() - t_train0;

  std::string log_text;
  {
    char buf[160];
    std::snprintf(buf, sizeof buf, "[0.000s] training started: %zu workers, budget %.3fs, reserve %.3fs\n",
                  cfg.workers.size(), scfg.budget_seconds, scfg.reserve_seconds);
    log_text = buf;
  }
  log_text += format_log(run.log);

  int total_validations = 0;
  bool all_failed = true;
  for (const auto& w : run.workers) {
    TrainOutcome::WorkerInfo info;
    info.id = w.worker;
    info.best_valid_accuracy = w.best_accuracy;
    info.rounds = w.rounds_completed;
    info.validations = w.validations;
    info.failed = w.failed;
    info.error = w.error;
    outcome.workers.push_back(std::move(info));
    total_validations += w.validations;
    if (!w.failed) all_failed = false;

    fs::path wdir = run_dir / ("worker_" + std::to_string(w.worker));
    fs::create_directories(wdir);
    save_encoder(w.best_params, wdir / "best.enc1");
  }
  if (all_failed) {
    detail::write_file_text(run_dir / "log.txt", log_text);
    throw TrainError("every worker failed; first error: " + run.workers.front().error);
  }

  if (total_validations == 0) {
    outcome.degraded = true;
    log_text += "degraded: budget ran out before any validation\n";
    detail::write_file_text(run_dir / "log.txt", log_text);
    detail::write_file_text(run_dir / "train_meta.json", train_outcome_to_json(outcome));
    return outcome;
  }

  // Ensemble phase: decode transductively with each worker's best encoder
  // over held-out item splits of the meta-valid classes, fit the candidate
  // combiners on one half and pick the winner on the other.
  const double t_ens0 = clock.now();
  Rng split_rng(derive_seed(cfg.seed, "ensemble-split"));
  EnsembleItemSplit es =
      split_for_ensemble(ds, split.meta_valid, cfg.ensemble_train_fraction, split_rng);
  ItemPool pool_tr(ds, split.meta_valid, es.train_items);
  ItemPool pool_te(ds, split.meta_valid, es.test_items);

  std::vector<std::unique_ptr<EmbeddingProvider>> providers;
  for (const auto& w : run.workers) providers.push_back(w.best_params.make_provider());
  const uint32_t learners = static_cast<uint32_t>(providers.size());

  auto decode_for_all = [&](const Episode& ep) {
    std::vector<MatrixD> per_learner;
    per_learner.reserve(providers.size());
    for (const auto& p : providers) {
      per_learner.push_back(decode_episode(ds, ep, *p, cfg.decoder, /*transductive=*/true));
    }
    return per_learner;
  };

  std::vector<EpisodeFeatures> train_eps;
  {
    Rng rng(derive_seed(cfg.seed, "ensemble-train-episodes"));
    for (uint32_t e = 0; e < cfg.ensemble_train_episodes; ++e) {
      Episode ep = sample_episode(pool_tr, ev.way, ev.shot, ev.query, rng);
      train_eps.push_back({build_features(decode_for_all(ep)), labels_of(ep.query)});
    }
  }
  std::vector<EnsembleEpisode> test_eps;
  {
    Rng rng(derive_seed(cfg.seed, "ensemble-test-episodes"));
    for (uint32_t e = 0; e < cfg.ensemble_test_episodes; ++e) {
      Episode ep = sample_episode(pool_te, ev.way, ev.shot, ev.query, rng);
      test_eps.push_back({decode_for_all(ep), labels_of(ep.query)});
    }
  }

  auto candidates = train_candidates(train_eps, learners, ev.way);
  EnsembleSelection sel = select_best(candidates, test_eps);
  save_ensemble(sel.best, run_dir / "ensemble.ens1");
  outcome.ensemble_seconds = clock.now() - t_ens0;
  outcome.ensemble_variant = variant_name(sel.best.variant);
  outcome.ensemble_candidate_accuracy = sel.accuracy_by_candidate;

  log_text += "ensemble:";
  for (size_t c = 0; c < candidates.size(); ++c) {
    char buf[64];
    std::snprintf(buf, sizeof buf, " %s=%.4f", variant_name(candidates[c].variant).c_str(),
                  sel.accuracy_by_candidate[c]);
    log_text += buf;
  }
  log_text += "; selected " + outcome.ensemble_variant + "\n";

  detail::write_file_text(run_dir / "log.txt", log_text);
  detail::write_file_text(run_dir / "train_meta.json", train_outcome_to_json(outcome));
  return outcome;
}

std::string evaluate_run(const fs::path& run_dir, const EvalOverrides& overrides, Clock& clock,
                         EvalAudit* audit) {
  RunConfig cfg = parse_run_config(detail::read_file_text(run_dir / "config.json"));
  json meta;
  try {
    meta = json::parse(detail::read_file_text(run_dir / "train_meta.json"));
  } catch (const json::exception& e) {
    throw FormatError(std::string("train_meta.json: ") + e.what());
  }
  if (meta.value("degraded", false)) {
    throw BudgetError("run is degraded (no validated checkpoint); nothing to evaluate");
  }
  ClassSplit split = load_split(run_dir / "split.json");
  LabeledDataset ds = load_dataset(cfg);

  const uint32_t episodes = overrides.episodes.value_or(cfg.evaluation.episodes);
  const uint32_t way = overrides.way.value_or(cfg.evaluation.way);
  const uint32_t shot = overrides.shot.value_or(cfg.evaluation.shot);
  const uint32_t query = overrides.query.value_or(cfg.evaluation.query);
  const uint64_t seed = overrides.seed.value_or(cfg.seed);
  MctConfig dec = cfg.decoder;
  if (overrides.distance) dec.distance = *overrides.distance;
  if (overrides.mct_steps) dec.iterations = *overrides.mct_steps;
  if (episodes == 0 || way == 0 || shot == 0 || query == 0) {
    throw ArgumentError("evaluation episodes/way/shot/query must all be >= 1");
  }
  if (dec.iterations > 1000) throw ArgumentError("mct steps must be <= 1000");

  std::vector<std::unique_ptr<EmbeddingProvider>> providers;
  for (size_t w = 0; w < cfg.workers.size(); ++w) {
    EncoderCheckpoint ckpt =
        load_encoder(run_dir / ("worker_" + std::to_string(w)) / "best.enc1");
    providers.push_back(ckpt.make_provider());
  }
  EnsembleModel ensemble = load_ensemble(run_dir / "ensemble.ens1");
  if (ensemble.learners != providers.size()) {
    throw FormatError("ensemble was fit over " + std::to_string(ensemble.learners) +
                      " learners but the run has " + std::to_string(providers.size()));
  }
  if (ensemble.way != way) {
    throw ArgumentError("ensemble was fit for way " + std::to_string(ensemble.way) +
                        "; cannot evaluate way " + std::to_string(way));
  }

  ItemPool test_pool(ds, split.meta_test);
  Rng rng(derive_seed(seed, "eval-episodes"));

  const double t0 = clock.now();
  std::vector<MatrixD> dists;
  std::vector<std::vector<uint16_t>> truth;
  dists.reserve(episodes);
  for (uint32_t e = 0; e < episodes; ++e) {
    Episode ep = sample_episode(test_pool, way, shot, query, rng);
    if (audit) {
      audit->support_items.push_back(items_of(ep.support));
      audit->query_items.push_back(items_of(ep.query));
    }
    std::vector<MatrixD> per_learner;
    per_learner.reserve(providers.size());
    for (const auto& p : providers) {
      per_learner.push_back(decode_episode(ds, ep, *p, dec, /*transductive=*/true));
    }
    MatrixD features = build_features(per_learner);
    MatrixD final_dist(features.rows, way);
    for (size_t i = 0; i < features.rows; ++i) {
      auto probs = ensemble_predict(ensemble, features.row(i));
      std::copy(probs.begin(), probs.end(), final_dist.row(i).begin());
    }
    dists.push_back(std::move(final_dist));
    truth.push_back(labels_of(ep.query));
  }
  AccuracySummary acc = episodic_accuracy(dists, truth);
  const double eval_seconds = clock.now() - t0;

  double ci95 = 0.0;
  if (acc.per_episode.size() >= 2) {
    double var = 0.0;
    for (double a : acc.per_episode) var += (a - acc.mean) * (a - acc.mean);
    var /= static_cast<double>(acc.per_episode.size() - 1);
    ci95 = 1.96 * std::sqrt(var) / std::sqrt(static_cast<double>(acc.per_episode.size()));
  }

  json report;
  report["degraded"] = false;
  report["mean_accuracy"] = acc.mean;
  report["ci95"] = ci95;
  report["episodes"] = episodes;
  report["way"] = way;
  report["shot"] = shot;
  report["query"] = query;
  report["seed"] = seed;
  report["distance"] = distance_name(dec.distance);
  report["mct_steps"] = dec.iterations;
  report["per_episode_accuracy"] = acc.per_episode;
  report["workers"] = json::array();
  for (const auto& w : meta.at("workers")) {
    report["workers"].push_back(
        {{"id", w.at("id")}, {"best_valid_acc", w.at("best_valid_accuracy")}});
  }
  report["ensemble_variant"] = meta.at("ensemble_variant");
  report["timings"] = {{"train_s", meta.at("timings").at("train_s")},
                       {"ensemble_s", meta.at("timings").at("ensemble_s")},
                       {"eval_s", eval_seconds}};
  report["config"] = json::parse(run_config_to_json(cfg));

  std::string text = report.dump(2) + "\n";
  detail::write_file_text(run_dir / "report.json", text);
  return text;
}

std::string render_report(const fs::path& run_dir) {
  json report;
  try {
    report = json::parse(detail::read_file_text(run_dir / "report.json"));
  } catch (const json::exception& e) {
    throw FormatError(std::string("report.json: ") + e.what());
  }

  try {
    if (report.value("degraded", false)) {
      return "degraded run: the budget ran out before any worker validated a checkpoint\n";
    }
    char buf[256];
    std::string out;
    std::snprintf(buf, sizeof buf, "episodes: %u (%u-way %u-shot, %u queries/class)\n",
                  report.at("episodes").get<uint32_t>(), report.at("way").get<uint32_t>(),
                  report.at("shot").get<uint32_t>(), report.at("query").get<uint32_t>());
    out += buf;
    std::snprintf(buf, sizeof buf, "mean accuracy: %.4f +/- %.4f (95%% CI)\n",
                  report.at("mean_accuracy").get<double>(), report.at("ci95").get<double>());
    out += buf;
    out += "ensemble: " + report.at("ensemble_variant").get<std::string>() + "\n";
    out += "workers:\n";
    for (const auto& w : report.at("workers")) {
      std::snprintf(buf, sizeof buf, "  worker %d: best valid accuracy %.4f\n",
                    w.at("id").get<int>(), w.at("best_valid_acc").get<double>());
      out += buf;
    }
    const auto& t = report.at("timings");
    std::snprintf(buf, sizeof buf, "timings: train %.3fs, ensemble %.3fs, eval %.3fs\n",
                  t.at("train_s").get<double>(), t.at("ensemble_s").get<double>(),
                  t.at("eval_s").get<double>());
    out += buf;
    return out;
  } catch (const json::exception& e) {
    throw FormatError(std::string("report.json is missing fields: ") + e.what());
  }
}

}  // namespace fewshot
