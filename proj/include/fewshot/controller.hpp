#pragma once

#include <condition_variable>
#include <deque>
#include <exception>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "fewshot/clock.hpp"
#include "fewshot/error.hpp"

namespace fewshot {

// EWMA over observed round durations. The first observation seeds the
// average directly; later ones blend in with the decay factor.
class EpochCostEstimator {
 public:
  explicit EpochCostEstimator(double decay = 0.3, double safety_factor = 1.2)
      : decay_(decay), safety_(safety_factor) {
    if (!(decay > 0.0 && decay <= 1.0)) throw ArgumentError("estimator decay must be in (0, 1]");
    if (!(safety_factor >= 1.0)) throw ArgumentError("safety factor must be >= 1");
  }

  void observe(double duration_seconds) {
    if (duration_seconds < 0) throw ArgumentError("round duration cannot be negative");
    ewma_ = count_ == 0 ? duration_seconds : decay_ * duration_seconds + (1.0 - decay_) * ewma_;
    ++count_;
  }

  bool has_observation() const { return count_ > 0; }
  double ewma() const { return ewma_; }
  double safety_factor() const { return safety_; }
  size_t observations() const { return count_; }

 private:
  double decay_;
  double safety_;
  double ewma_ = 0.0;
  size_t count_ = 0;
};

// Approve another round only if the padded cost estimate still fits in the
// budget with the reserve left over. No observations yet means the very
// first round is always allowed.
inline bool should_continue(const BudgetClock& budget, const EpochCostEstimator& estimator,
                            double reserve_seconds) {
  if (!estimator.has_observation()) return true;
  return budget.remaining() > estimator.safety_factor() * estimator.ewma() + reserve_seconds;
}

// Fixed-capacity FIFO handoff between threads. Blocking calls poll the stop
// flag so a shutdown never strands a blocked producer or consumer.
template <typename T>
class BoundedBuffer {
 public:
  explicit BoundedBuffer(size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw ArgumentError("buffer capacity must be >= 1");
  }

  // Blocks while full. Returns false without pushing if stop was requested.
  bool push(T item, const StopFlag* stop = nullptr) {
    std::unique_lock lk(m_);
    for (;;) {
      if (stop && stop->requested()) return false;
      if (items_.size() < capacity_) break;
      not_full_.wait_for(lk, kPoll);
    }
    items_.push_back(std::move(item));
    not_empty_.notify_one();
    return true;
  }

  // Blocks while empty. A requested stop drains remaining items first and
  // returns nullopt only once the buffer is empty.
  std::optional<T> pop(const StopFlag* stop = nullptr) {
    std::unique_lock lk(m_);
    for (;;) {
      if (!items_.empty()) break;
      if (stop && stop->requested()) return std::nullopt;
      not_empty_.wait_for(lk, kPoll);
    }
    T item = std::move(items_.front());
    items_.pop_front();
    not_full_.notify_one();
    return item;
  }

  // Waits up to the timeout for an item; nullopt on timeout.
  std::optional<T> pop_for(double seconds) {
    std::unique_lock lk(m_);
    if (!not_empty_.wait_for(lk, std::chrono::duration<double>(seconds),
                             [&] { return !items_.empty(); })) {
      return std::nullopt;
    }
    T item = std::move(items_.front());
    items_.pop_front();
    not_full_.notify_one();
    return item;
  }

  bool try_push(T item) {
    std::lock_guard lk(m_);
    if (items_.size() >= capacity_) return false;
    items_.push_back(std::move(item));
    not_empty_.notify_one();
    return true;
  }

  std::optional<T> try_pop() {
    std::lock_guard lk(m_);
    if (items_.empty()) return std::nullopt;
    T item = std::move(items_.front());
    items_.pop_front();
    not_full_.notify_one();
    return item;
  }

  size_t size() const {
    std::lock_guard lk(m_);
    return items_.size();
  }
  size_t capacity() const { return capacity_; }

 private:
  static constexpr std::chrono::milliseconds kPoll{50};

  mutable std::mutex m_;
  std::condition_variable not_empty_;
  std::condition_variable not_full_;
  std::deque<T> items_;
  size_t capacity_;
};

// Produces items and fans each one out to every worker buffer, applying the
// per-worker preprocess on the way. Runs until stop is requested; exceptions
// from the producer propagate to the caller.
template <typename T, typename Producer, typename Preprocess>
void dispatch_batches(Producer&& produce, Preprocess&& preprocess,
                      std::vector<BoundedBuffer<T>*> buffers, const StopFlag& stop) {
  if (buffers.empty()) throw ArgumentError("dispatch needs at least one buffer");
  while (!stop.requested()) {
    T item = produce();
    for (size_t w = 0; w < buffers.size(); ++w) {
      if (!buffers[w]->push(preprocess(item, w), &stop)) return;
    }
  }
}

struct RoundRecord {
  enum class Kind {
    round_done,   // a worker finished and validated a round
    decision,     // supervisor verdict for that worker
    aborted,      // round cut short by a stop request, no validation
    failure,      // worker error
    hard_stop,    // watchdog saw the budget run out
    finished,     // worker exited its loop
  };
  Kind kind = Kind::round_done;
  int worker = -1;
  int round = 0;
  double at = 0.0;        // budget-elapsed seconds when recorded
  double duration = 0.0;  // round_done only
  double accuracy = 0.0;  // round_done only
  bool approved = false;  // decision only
  std::string note;
};

template <typename P>
struct WorkerOutcome {
  int worker = 0;
  P best_params{};
  double best_accuracy = 0.0;
  int rounds_completed = 0;
  int validations = 0;
  bool failed = false;
  std::string error;
};

template <typename P>
struct TrainingRunResult {
  std::vector<WorkerOutcome<P>> workers;
  std::vector<RoundRecord> log;
  double elapsed_seconds = 0.0;
};

struct SupervisorConfig {
  double budget_seconds = 0.0;   // required, > 0
  double reserve_seconds = 0.0;
  int max_rounds = 0;            // global per-worker cap; 0 = unbounded
  std::vector<int> worker_max_rounds;  // optional per-worker caps, 0 = inherit
  double poll_seconds = 0.05;    // supervisor wake interval (real time)
  double ewma_decay = 0.3;
  double safety_factor = 1.2;
};

// Runs one training round for worker `worker` (1-based round index),
// mutating params in place. Returns the validation accuracy, or nullopt if
// the round was abandoned because the stop flag was observed (no validation
// happened). May throw; the worker is then marked failed and keeps the best
// checkpoint it had.
template <typename P>
using RoundFn = std::function<std::optional<double>(int worker, int round, P& params,
                                                    const StopFlag& stop)>;

namespace controller_detail {

// One-shot mailbox for the supervisor's verdict on a finished round.
class VerdictSlot {
 public:
  void post(bool approved) {
    {
      std::lock_guard lk(m_);
      verdict_ = approved;
    }
    cv_.notify_one();
  }

  bool wait() {
    std::unique_lock lk(m_);
    cv_.wait(lk, [&] { return verdict_.has_value(); });
    bool v = *verdict_;
    verdict_.reset();
    return v;
  }

 private:
  std::mutex m_;
  std::condition_variable cv_;
  std::optional<bool> verdict_;
};

struct RoundDoneEvent {
  int worker;
  int round;
  double duration;
  double accuracy;
};
struct AbortedEvent {
  int worker;
  int round;
};
struct FailedEvent {
  int worker;
  std::string message;
};
struct ExitedEvent {
  int worker;
};
using WorkerEvent = std::variant<RoundDoneEvent, AbortedEvent, FailedEvent, ExitedEvent>;

}  // namespace controller_detail

// Round-synchronized meta-training: W worker threads run rounds and report
// (duration, validation accuracy) after each; the supervisor updates a
// per-worker cost estimate and approves or stops that worker before its next
// round. A watchdog stops everyone as soon as the budget reads empty, so a
// worker that polls the flag can halt mid-round. Returns each worker's best
// checkpoint (by validation accuracy, first-best kept on ties) plus a
// structured event log.
template <typename P>
TrainingRunResult<P> run_supervised_training(std::vector<P> initial_params,
                                             const RoundFn<P>& round_fn, Clock& clock,
                                             const SupervisorConfig& cfg) {
  using namespace controller_detail;

  const size_t n_workers = initial_params.size();
  if (n_workers == 0) throw ArgumentError("training needs at least one worker");
  if (!cfg.worker_max_rounds.empty() && cfg.worker_max_rounds.size() != n_workers) {
    throw ArgumentError("per-worker round caps must match the worker count");
  }
  if (!(cfg.poll_seconds > 0)) throw ArgumentError("supervisor poll interval must be positive");

  BudgetClock budget(clock, cfg.budget_seconds);

  TrainingRunResult<P> result;
  result.workers.resize(n_workers);

  BoundedBuffer<WorkerEvent> events(std::max<size_t>(64, n_workers * 4));
  std::vector<VerdictSlot> verdicts(n_workers);
  std::vector<StopFlag> stops(n_workers);

  auto max_rounds_for = [&](size_t w) {
    int cap = cfg.max_rounds;
    if (!cfg.worker_max_rounds.empty() && cfg.worker_max_rounds[w] > 0) {
      cap = cfg.worker_max_rounds[w];
    }
    return cap;
  };

  // Register every worker with the clock before any thread starts, so a
  // virtual-time clock never advances past a worker that is merely slow to
  // spawn. Each thread takes ownership of its slot and releases it on exit.
  std::vector<std::unique_ptr<SleeperToken>> sleeper_tokens(n_workers);
  for (size_t w = 0; w < n_workers; ++w) sleeper_tokens[w] = clock.register_sleeper();

  std::vector<std::thread> threads;
  threads.reserve(n_workers);
  for (size_t w = 0; w < n_workers; ++w) {
    WorkerOutcome<P>& outcome = result.workers[w];
    outcome.worker = static_cast<int>(w);
    outcome.best_params = initial_params[w];

    threads.emplace_back([&, w] {
      auto sleeper = std::move(sleeper_tokens[w]);
      P params = std::move(initial_params[w]);
      StopFlag& stop = stops[w];
      WorkerOutcome<P>& out = result.workers[w];
      const int cap = max_rounds_for(w);
      try {
        for (int round = 1; cap == 0 || round <= cap; ++round) {
          if (stop.requested()) break;
          const double t0 = clock.now();
          std::optional<double> accuracy = round_fn(static_cast<int>(w), round, params, stop);
          const double duration = clock.now() - t0;
          if (!accuracy.has_value()) {
            events.push(AbortedEvent{static_cast<int>(w), round});
            break;
          }
          out.rounds_completed = round;
          out.validations += 1;
          if (*accuracy > out.best_accuracy || out.validations == 1) {
            out.best_accuracy = *accuracy;
            out.best_params = params;
          }
          events.push(RoundDoneEvent{static_cast<int>(w), round, duration, *accuracy});
          if (!verdicts[w].wait()) break;
          if (cap != 0 && round == cap) break;
        }
      } catch (const std::exception& e) {
        out.failed = true;
        out.error = e.what();
        events.push(FailedEvent{static_cast<int>(w), e.what()});
      }
      events.push(ExitedEvent{static_cast<int>(w)});
    });
  }

  std::vector<EpochCostEstimator> estimators;
  estimators.reserve(n_workers);
  for (size_t w = 0; w < n_workers; ++w) {
    estimators.emplace_back(cfg.ewma_decay, cfg.safety_factor);
  }

  size_t active = n_workers;
  bool hard_stopped = false;
  while (active > 0) {
    auto event = events.pop_for(cfg.poll_seconds);
    if (!hard_stopped && budget.remaining() <= 0.0) {
      // Out of time: tell every worker to halt at its next safe point.
      hard_stopped = true;
      for (auto& stop : stops) stop.request();
      result.log.push_back({RoundRecord::Kind::hard_stop, -1, 0, budget.elapsed(), 0.0, 0.0,
                            false, "budget exhausted"});
    }
    if (!event) continue;

    if (auto* done = std::get_if<RoundDoneEvent>(&*event)) {
      estimators[done->worker].observe(done->duration);
      result.log.push_back({RoundRecord::Kind::round_done, done->worker, done->round,
                            budget.elapsed(), done->duration, done->accuracy, false, ""});
      const bool approved =
          !stops[done->worker].requested() &&
          should_continue(budget, estimators[done->worker], cfg.reserve_seconds);
      RoundRecord decision{RoundRecord::Kind::decision, done->worker, done->round,
                           budget.elapsed(), 0.0, 0.0, approved, ""};
      const double threshold =
          estimators[done->worker].safety_factor() * estimators[done->worker].ewma() +
          cfg.reserve_seconds;
      decision.note = (approved ? "continue" : "stop") + std::string(": remaining ") +
                      std::to_string(budget.remaining()) + "s vs threshold " +
                      std::to_string(threshold) + "s";
      result.log.push_back(std::move(decision));
      verdicts[done->worker].post(approved);
    } else if (auto* aborted = std::get_if<AbortedEvent>(&*event)) {
      result.log.push_back({RoundRecord::Kind::aborted, aborted->worker, aborted->round,
                            budget.elapsed(), 0.0, 0.0, false, "round abandoned on stop"});
    } else if (auto* failed = std::get_if<FailedEvent>(&*event)) {
      result.log.push_back({RoundRecord::Kind::failure, failed->worker, 0, budget.elapsed(), 0.0,
                            0.0, false, failed->message});
    } else if (auto* exited = std::get_if<ExitedEvent>(&*event)) {
      result.log.push_back({RoundRecord::Kind::finished, exited->worker, 0, budget.elapsed(), 0.0,
                            0.0, false, ""});
      --active;
    }
  }

  for (auto& t : threads) t.join();
  result.elapsed_seconds = budget.elapsed();
  return result;
}

}  // namespace fewshot
