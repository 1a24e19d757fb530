#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <atomic>
#include <chrono>
#include <latch>
#include <string>
#include <thread>
#include <vector>

#include "fewshot/clock.hpp"
#include "fewshot/controller.hpp"
#include "fewshot/error.hpp"

using namespace fewshot;

namespace {

double real_seconds() {
  using namespace std::chrono;
  return duration<double>(steady_clock::now().time_since_epoch()).count();
}

using Kind = RoundRecord::Kind;

std::vector<Kind> kinds_for_worker(const std::vector<RoundRecord>& log, int worker) {
  std::vector<Kind> out;
  for (const auto& rec : log) {
    if (rec.worker == worker) out.push_back(rec.kind);
  }
  return out;
}

int count_kind(const std::vector<RoundRecord>& log, Kind kind) {
  int n = 0;
  for (const auto& rec : log) {
    if (rec.kind == kind) ++n;
  }
  return n;
}

const RoundRecord* find_record(const std::vector<RoundRecord>& log, Kind kind, int worker,
                               int round) {
  for (const auto& rec : log) {
    if (rec.kind == kind && rec.worker == worker && rec.round == round) return &rec;
  }
  return nullptr;
}

}  // namespace

TEST_CASE("stop flag starts clear and latches once requested") {
  StopFlag stop;
  CHECK_FALSE(stop.requested());
  stop.request();
  CHECK(stop.requested());
  stop.request();
  CHECK(stop.requested());
}

TEST_CASE("estimator validates its parameters") {
  CHECK_THROWS_AS(EpochCostEstimator(0.0, 1.2), ArgumentError);
  CHECK_THROWS_AS(EpochCostEstimator(-0.1, 1.2), ArgumentError);
  CHECK_THROWS_AS(EpochCostEstimator(1.5, 1.2), ArgumentError);
  CHECK_THROWS_AS(EpochCostEstimator(0.3, 0.99), ArgumentError);
  CHECK_NOTHROW(EpochCostEstimator(1.0, 1.0));
  EpochCostEstimator est(0.3, 1.2);
  CHECK_THROWS_AS(est.observe(-0.001), ArgumentError);
}

TEST_CASE("first observation seeds the average, later ones blend with the decay") {
  EpochCostEstimator est(0.3, 1.2);
  CHECK_FALSE(est.has_observation());
  CHECK(est.observations() == 0);

  est.observe(10.0);
  CHECK(est.has_observation());
  CHECK(est.observations() == 1);
  CHECK(est.ewma() == doctest::Approx(10.0).epsilon(1e-12));

  est.observe(4.0);
  CHECK(est.ewma() == doctest::Approx(0.3 * 4.0 + 0.7 * 10.0).epsilon(1e-12));  // 8.2

  est.observe(4.0);
  CHECK(est.ewma() == doctest::Approx(0.3 * 4.0 + 0.7 * 8.2).epsilon(1e-12));  // 6.94
}

TEST_CASE("constant observations pull the average in geometrically") {
  EpochCostEstimator est(0.3, 1.2);
  est.observe(10.0);
  // After n constant observations of 4 the gap to 4 shrinks by the retained
  // fraction each step: ewma_n - 4 = 6 * 0.7^n.
  double expected_gap = 6.0;
  for (int n = 1; n <= 30; ++n) {
    est.observe(4.0);
    expected_gap *= 0.7;
    CHECK(est.ewma() - 4.0 == doctest::Approx(expected_gap).epsilon(1e-9));
  }
  CHECK(est.ewma() == doctest::Approx(4.0).epsilon(1e-3));
}

TEST_CASE("decay of one keeps only the latest observation") {
  EpochCostEstimator est(1.0, 1.0);
  est.observe(5.0);
  est.observe(9.0);
  CHECK(est.ewma() == doctest::Approx(9.0).epsilon(1e-12));
}

TEST_CASE("budget clock validates the total and floors remaining at zero") {
  FakeClock clock;
  CHECK_THROWS_AS(BudgetClock(clock, 0.0), ArgumentError);
  CHECK_THROWS_AS(BudgetClock(clock, -3.0), ArgumentError);

  clock.advance(2.0);
  BudgetClock budget(clock, 10.0);
  CHECK(budget.total() == doctest::Approx(10.0));
  CHECK(budget.elapsed() == doctest::Approx(0.0));
  CHECK(budget.remaining() == doctest::Approx(10.0));

  clock.advance(3.0);
  CHECK(budget.elapsed() == doctest::Approx(3.0));
  CHECK(budget.remaining() == doctest::Approx(7.0));

  clock.advance(20.0);
  CHECK(budget.elapsed() == doctest::Approx(23.0));
  CHECK(budget.remaining() == doctest::Approx(0.0));
}

TEST_CASE("continuation requires the padded estimate plus reserve to fit, strictly") {
  SUBCASE("no observations yet always continues, even on an empty budget") {
    FakeClock clock;
    BudgetClock budget(clock, 1.0);
    clock.advance(5.0);
    EpochCostEstimator est(0.3, 2.0);
    CHECK(budget.remaining() == doctest::Approx(0.0));
    CHECK(should_continue(budget, est, 100.0));
  }

  SUBCASE("remaining exactly at the threshold stops") {
    FakeClock clock;
    BudgetClock budget(clock, 20.0);
    clock.advance(5.0);  // remaining 15
    EpochCostEstimator est(0.3, 2.0);
    est.observe(5.0);  // threshold = 2.0 * 5 + 5 = 15
    CHECK_FALSE(should_continue(budget, est, 5.0));
  }

  SUBCASE("remaining a hair above the threshold continues") {
    FakeClock clock;
    BudgetClock budget(clock, 20.0);
    clock.advance(4.999);  // remaining 15.001
    EpochCostEstimator est(0.3, 2.0);
    est.observe(5.0);
    CHECK(should_continue(budget, est, 5.0));
  }

  SUBCASE("remaining below the threshold stops") {
    FakeClock clock;
    BudgetClock budget(clock, 20.0);
    clock.advance(8.0);  // remaining 12
    EpochCostEstimator est(0.3, 2.0);
    est.observe(5.0);
    CHECK_FALSE(should_continue(budget, est, 5.0));
  }
}

TEST_CASE("fake clock starts at zero and only moves forward") {
  FakeClock clock;
  CHECK(clock.now() == doctest::Approx(0.0));
  clock.advance(2.5);
  CHECK(clock.now() == doctest::Approx(2.5));
  clock.advance(-1.0);
  CHECK(clock.now() == doctest::Approx(2.5));
  clock.advance(0.0);
  CHECK(clock.now() == doctest::Approx(2.5));
}

TEST_CASE("an unregistered sleep advances virtual time immediately") {
  FakeClock clock;
  const double r0 = real_seconds();
  clock.sleep_for(3.0);
  CHECK(clock.now() == doctest::Approx(3.0));
  clock.sleep_for(0.0);
  clock.sleep_for(-2.0);
  CHECK(clock.now() == doctest::Approx(3.0));
  // Virtual sleep must not consume real time. Generous bound for slow boxes.
  CHECK(real_seconds() - r0 < 2.0);
}

TEST_CASE("a registered sleeper alone still advances on its own sleep") {
  FakeClock clock;
  double wake = -1.0;
  std::thread t([&] {
    auto token = clock.register_sleeper();
    clock.sleep_for(4.0);
    wake = clock.now();
  });
  t.join();
  CHECK(wake == doctest::Approx(4.0));
  CHECK(clock.now() == doctest::Approx(4.0));
}

TEST_CASE("overlapping registered sleeps overlap instead of adding up") {
  FakeClock clock;
  std::latch both_registered(2);
  double wake_a = -1.0;
  double wake_b = -1.0;

  std::thread a([&] {
    auto token = clock.register_sleeper();
    both_registered.arrive_and_wait();
    clock.sleep_for(3.0);
    wake_a = clock.now();
  });
  std::thread b([&] {
    auto token = clock.register_sleeper();
    both_registered.arrive_and_wait();
    clock.sleep_for(5.0);
    wake_b = clock.now();
  });
  a.join();
  b.join();

  CHECK(wake_a == doctest::Approx(3.0));
  CHECK(wake_b == doctest::Approx(5.0));
  // Two concurrent sleeps of 3s and 5s take 5 virtual seconds, not 8.
  CHECK(clock.now() == doctest::Approx(5.0));
}

TEST_CASE("advance wakes a registered sleeper whose deadline it reaches") {
  FakeClock clock;
  // Hold a second registration on the main thread so the sleeper's own sleep
  // cannot advance the clock; only the explicit advance below can.
  auto held = clock.register_sleeper();
  std::latch registered(1);
  double wake = -1.0;
  std::thread t([&] {
    auto token = clock.register_sleeper();
    registered.count_down();
    clock.sleep_for(4.0);
    wake = clock.now();
  });
  registered.wait();
  // The sleeper may not have entered sleep_for yet; advancing in small steps
  // from another thread reaches any deadline it sets from a now of at most
  // the sum advanced so far.
  for (int i = 0; i < 20 && clock.now() < 24.0; ++i) {
    clock.advance(1.2);
    std::this_thread::sleep_for(std::chrono::milliseconds(1));
  }
  t.join();
  CHECK(wake >= 4.0);
  CHECK(wake <= 24.0 + 1e-9);
}

TEST_CASE("bounded buffer rejects zero capacity") {
  CHECK_THROWS_AS(BoundedBuffer<int>(0), ArgumentError);
}

TEST_CASE("bounded buffer is first-in first-out") {
  BoundedBuffer<int> buf(4);
  CHECK(buf.capacity() == 4);
  CHECK(buf.size() == 0);
  CHECK(buf.push(1));
  CHECK(buf.push(2));
  CHECK(buf.push(3));
  CHECK(buf.size() == 3);
  CHECK(buf.pop().value() == 1);
  CHECK(buf.pop().value() == 2);
  CHECK(buf.pop().value() == 3);
  CHECK(buf.size() == 0);
}

TEST_CASE("try variants never block") {
  BoundedBuffer<int> buf(2);
  CHECK(buf.try_pop() == std::nullopt);
  CHECK(buf.try_push(10));
  CHECK(buf.try_push(11));
  CHECK_FALSE(buf.try_push(12));
  CHECK(buf.try_pop().value() == 10);
  CHECK(buf.try_push(12));
  CHECK(buf.try_pop().value() == 11);
  CHECK(buf.try_pop().value() == 12);
  CHECK(buf.try_pop() == std::nullopt);
}

TEST_CASE("pop_for times out on an empty buffer and returns promptly on data") {
  BoundedBuffer<int> buf(2);
  const double t0 = real_seconds();
  CHECK(buf.pop_for(0.05) == std::nullopt);
  const double waited = real_seconds() - t0;
  CHECK(waited >= 0.04);
  CHECK(waited < 5.0);

  buf.push(7);
  CHECK(buf.pop_for(5.0).value() == 7);
}

TEST_CASE("a full buffer blocks push until a slot opens") {
  BoundedBuffer<int> buf(1);
  CHECK(buf.push(1));
  std::atomic<bool> pushed{false};
  std::thread t([&] {
    CHECK(buf.push(2));
    pushed = true;
  });
  std::this_thread::sleep_for(std::chrono::milliseconds(30));
  CHECK_FALSE(pushed.load());
  CHECK(buf.pop().value() == 1);
  t.join();
  CHECK(pushed.load());
  CHECK(buf.pop().value() == 2);
}

TEST_CASE("a stop request releases a blocked push without delivering the item") {
  BoundedBuffer<int> buf(1);
  StopFlag stop;
  CHECK(buf.push(1));
  std::atomic<bool> result{true};
  std::thread t([&] { result = buf.push(2, &stop); });
  std::this_thread::sleep_for(std::chrono::milliseconds(20));
  stop.request();
  t.join();
  CHECK_FALSE(result.load());
  CHECK(buf.size() == 1);
  CHECK(buf.pop().value() == 1);
}

TEST_CASE("pop drains queued items before honoring a stop request") {
  BoundedBuffer<int> buf(4);
  StopFlag stop;
  buf.push(1);
  buf.push(2);
  stop.request();
  CHECK(buf.pop(&stop).value() == 1);
  CHECK(buf.pop(&stop).value() == 2);
  CHECK(buf.pop(&stop) == std::nullopt);
}

TEST_CASE("pop blocks until a producer delivers") {
  BoundedBuffer<int> buf(2);
  std::optional<int> got;
  std::thread t([&] { got = buf.pop(); });
  std::this_thread::sleep_for(std::chrono::milliseconds(20));
  buf.push(42);
  t.join();
  CHECK(got.value() == 42);
}

TEST_CASE("dispatch fans every produced item out to all buffers with the preprocess applied") {
  BoundedBuffer<int> a(16);
  BoundedBuffer<int> b(16);
  StopFlag stop;
  int next = 0;
  auto produce = [&] {
    int item = next++;
    // Requesting stop drops the in-flight item: push refuses once the flag
    // is up, so items 0..3 land and item 4 does not.
    if (item == 4) stop.request();
    return item;
  };
  auto preprocess = [](int item, size_t worker) { return item * 10 + static_cast<int>(worker); };
  dispatch_batches<int>(produce, preprocess, {&a, &b}, stop);

  CHECK(next == 5);
  for (int i = 0; i < 4; ++i) {
    CHECK(a.pop().value() == i * 10 + 0);
    CHECK(b.pop().value() == i * 10 + 1);
  }
  CHECK(a.size() == 0);
  CHECK(b.size() == 0);
}

TEST_CASE("dispatch requires at least one buffer") {
  StopFlag stop;
  auto produce = [] { return 1; };
  auto preprocess = [](int item, size_t) { return item; };
  CHECK_THROWS_AS(dispatch_batches<int>(produce, preprocess, {}, stop), ArgumentError);
}

TEST_CASE("dispatch returns immediately when stop is already requested") {
  BoundedBuffer<int> buf(4);
  StopFlag stop;
  stop.request();
  int calls = 0;
  auto produce = [&] {
    ++calls;
    return 1;
  };
  auto preprocess = [](int item, size_t) { return item; };
  dispatch_batches<int>(produce, preprocess, {&buf}, stop);
  CHECK(calls == 0);
  CHECK(buf.size() == 0);
}

TEST_CASE("a producer exception propagates out of dispatch") {
  BoundedBuffer<int> buf(4);
  StopFlag stop;
  auto produce = []() -> int { throw std::runtime_error("producer broke"); };
  auto preprocess = [](int item, size_t) { return item; };
  CHECK_THROWS_AS(dispatch_batches<int>(produce, preprocess, {&buf}, stop), std::runtime_error);
}

TEST_CASE("a stop request frees a dispatcher stuck on a full buffer") {
  BoundedBuffer<int> buf(1);
  StopFlag stop;
  std::atomic<int> produced{0};
  std::thread t([&] {
    auto produce = [&] { return produced.fetch_add(1); };
    auto preprocess = [](int item, size_t) { return item; };
    dispatch_batches<int>(produce, preprocess, {&buf}, stop);
  });
  // Wait until the dispatcher has filled the buffer and is blocked on the
  // second push. Generous deadline for slow machines.
  const double t0 = real_seconds();
  while (buf.size() < 1 && real_seconds() - t0 < 10.0) {
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
  CHECK(buf.size() == 1);
  stop.request();
  t.join();
  CHECK(produced.load() >= 1);
}

TEST_CASE("supervised training rejects malformed configurations") {
  FakeClock clock;
  RoundFn<int> round_fn = [](int, int, int&, const StopFlag&) { return 0.5; };
  SupervisorConfig cfg;
  cfg.budget_seconds = 10.0;

  CHECK_THROWS_AS(run_supervised_training<int>({}, round_fn, clock, cfg), ArgumentError);

  SupervisorConfig bad_budget = cfg;
  bad_budget.budget_seconds = 0.0;
  CHECK_THROWS_AS(run_supervised_training<int>({0}, round_fn, clock, bad_budget), ArgumentError);

  SupervisorConfig bad_poll = cfg;
  bad_poll.poll_seconds = 0.0;
  CHECK_THROWS_AS(run_supervised_training<int>({0}, round_fn, clock, bad_poll), ArgumentError);

  SupervisorConfig bad_caps = cfg;
  bad_caps.worker_max_rounds = {1, 2};
  CHECK_THROWS_AS(run_supervised_training<int>({0}, round_fn, clock, bad_caps), ArgumentError);
}

TEST_CASE("a worker runs rounds until the padded estimate no longer fits the budget") {
  FakeClock clock;
  SupervisorConfig cfg;
  cfg.budget_seconds = 35.0;
  cfg.reserve_seconds = 0.0;
  cfg.poll_seconds = 0.005;

  RoundFn<int> round_fn = [&](int, int round, int& params, const StopFlag&) {
    clock.sleep_for(10.0);
    params = round;
    return 0.5 + 0.1 * round;
  };

  auto result = run_supervised_training<int>({0}, round_fn, clock, cfg);

  // Rounds cost 10s each; with safety 1.2 the threshold is 12s. Remaining
  // after rounds 1..3 is 25, 15, 5, so round 3 is validated and then denied.
  REQUIRE(result.workers.size() == 1);
  const auto& w = result.workers[0];
  CHECK(w.rounds_completed == 3);
  CHECK(w.validations == 3);
  CHECK_FALSE(w.failed);
  CHECK(w.best_accuracy == doctest::Approx(0.8));
  CHECK(w.best_params == 3);
  CHECK(result.elapsed_seconds == doctest::Approx(30.0));

  auto kinds = kinds_for_worker(result.log, 0);
  REQUIRE(kinds.size() == 7);
  CHECK(kinds[0] == Kind::round_done);
  CHECK(kinds[1] == Kind::decision);
  CHECK(kinds[2] == Kind::round_done);
  CHECK(kinds[3] == Kind::decision);
  CHECK(kinds[4] == Kind::round_done);
  CHECK(kinds[5] == Kind::decision);
  CHECK(kinds[6] == Kind::finished);

  const RoundRecord* d1 = find_record(result.log, Kind::decision, 0, 1);
  const RoundRecord* d2 = find_record(result.log, Kind::decision, 0, 2);
  const RoundRecord* d3 = find_record(result.log, Kind::decision, 0, 3);
  REQUIRE(d1 != nullptr);
  REQUIRE(d2 != nullptr);
  REQUIRE(d3 != nullptr);
  CHECK(d1->approved);
  CHECK(d2->approved);
  CHECK_FALSE(d3->approved);
  CHECK(d1->at == doctest::Approx(10.0));
  CHECK(d2->at == doctest::Approx(20.0));
  CHECK(d3->at == doctest::Approx(30.0));
  CHECK(d1->note.substr(0, 9) == "continue:");
  CHECK(d3->note.substr(0, 5) == "stop:");

  const RoundRecord* r2 = find_record(result.log, Kind::round_done, 0, 2);
  REQUIRE(r2 != nullptr);
  CHECK(r2->duration == doctest::Approx(10.0));
  CHECK(r2->accuracy == doctest::Approx(0.7));

  CHECK(count_kind(result.log, Kind::hard_stop) == 0);
  CHECK(count_kind(result.log, Kind::failure) == 0);
  CHECK(count_kind(result.log, Kind::aborted) == 0);
}

TEST_CASE("the reserve is held back from the continuation decision") {
  FakeClock clock;
  SupervisorConfig cfg;
  cfg.budget_seconds = 35.0;
  cfg.reserve_seconds = 11.0;
  cfg.poll_seconds = 0.005;

  RoundFn<int> round_fn = [&](int, int round, int& params, const StopFlag&) {
    clock.sleep_for(10.0);
    params = round;
    return 0.9;
  };

  auto result = run_supervised_training<int>({0}, round_fn, clock, cfg);

  // Threshold is 12 + 11 = 23; remaining after round 1 is 25 (continue),
  // after round 2 is 15 (stop). One round fewer than with no reserve.
  CHECK(result.workers[0].rounds_completed == 2);
  CHECK(result.elapsed_seconds == doctest::Approx(20.0));
}

TEST_CASE("the global round cap stops workers before the budget does") {
  FakeClock clock;
  SupervisorConfig cfg;
  cfg.budget_seconds = 1e6;
  cfg.max_rounds = 2;
  cfg.poll_seconds = 0.005;

  RoundFn<int> round_fn = [&](int, int round, int& params, const StopFlag&) {
    clock.sleep_for(5.0);
    params = round;
    return 0.1 * round;
  };

  auto result = run_supervised_training<int>({0}, round_fn, clock, cfg);
  CHECK(result.workers[0].rounds_completed == 2);
  CHECK(result.workers[0].validations == 2);
  CHECK(result.elapsed_seconds == doctest::Approx(10.0));
  // The cap is enforced worker-side after the verdict, so both rounds still
  // get validated and logged.
  CHECK(count_kind(result.log, Kind::round_done) == 2);
  CHECK(count_kind(result.log, Kind::decision) == 2);
}

TEST_CASE("per-worker caps override the global cap where set") {
  FakeClock clock;
  SupervisorConfig cfg;
  cfg.budget_seconds = 1e6;
  cfg.max_rounds = 3;
  cfg.worker_max_rounds = {1, 0};
  cfg.poll_seconds = 0.005;

  RoundFn<int> round_fn = [&](int worker, int round, int& params, const StopFlag&) {
    clock.sleep_for(worker == 0 ? 3.0 : 5.0);
    params = round;
    return 0.2 * round;
  };

  auto result = run_supervised_training<int>({0, 0}, round_fn, clock, cfg);
  CHECK(result.workers[0].rounds_completed == 1);
  CHECK(result.workers[1].rounds_completed == 3);

  auto w0 = kinds_for_worker(result.log, 0);
  REQUIRE(w0.size() == 3);
  CHECK(w0[0] == Kind::round_done);
  CHECK(w0[1] == Kind::decision);
  CHECK(w0[2] == Kind::finished);

  auto w1 = kinds_for_worker(result.log, 1);
  REQUIRE(w1.size() == 7);
  CHECK(w1[5] == Kind::decision);
  CHECK(w1[6] == Kind::finished);

  // Worker 1's rounds run back to back in virtual time: 5, 10, 15.
  CHECK(result.elapsed_seconds == doctest::Approx(15.0));
}

TEST_CASE("the best checkpoint tracks the highest validation accuracy") {
  FakeClock clock;
  SupervisorConfig cfg;
  cfg.budget_seconds = 1e6;
  cfg.max_rounds = 3;
  cfg.poll_seconds = 0.005;

  const std::vector<double> accs = {0.5, 0.8, 0.6};
  RoundFn<int> round_fn = [&](int, int round, int& params, const StopFlag&) {
    clock.sleep_for(1.0);
    params = round;
    return accs[static_cast<size_t>(round - 1)];
  };

  auto result = run_supervised_training<int>({0}, round_fn, clock, cfg);
  CHECK(result.workers[0].best_accuracy == doctest::Approx(0.8));
  CHECK(result.workers[0].best_params == 2);
  CHECK(result.workers[0].validations == 3);
}

TEST_CASE("ties keep the earlier checkpoint and the first validation always lands") {
  FakeClock clock;
  SupervisorConfig cfg;
  cfg.budget_seconds = 1e6;
  cfg.max_rounds = 2;
  cfg.poll_seconds = 0.005;

  SUBCASE("equal accuracy does not displace the earlier round") {
    RoundFn<int> round_fn = [&](int, int round, int& params, const StopFlag&) {
      clock.sleep_for(1.0);
      params = round;
      return 0.5;
    };
    auto result = run_supervised_training<int>({0}, round_fn, clock, cfg);
    CHECK(result.workers[0].best_accuracy == doctest::Approx(0.5));
    CHECK(result.workers[0].best_params == 1);
  }

  SUBCASE("a zero-accuracy first round still replaces the initial params") {
    RoundFn<int> round_fn = [&](int, int round, int& params, const StopFlag&) {
      clock.sleep_for(1.0);
      params = 100 + round;
      return 0.0;
    };
    auto result = run_supervised_training<int>({7}, round_fn, clock, cfg);
    CHECK(result.workers[0].best_accuracy == doctest::Approx(0.0));
    CHECK(result.workers[0].best_params == 101);
  }
}

TEST_CASE("a worker exception marks that worker failed and leaves the rest alone") {
  FakeClock clock;
  SupervisorConfig cfg;
  cfg.budget_seconds = 100.0;
  cfg.max_rounds = 3;
  cfg.poll_seconds = 0.005;

  RoundFn<int> round_fn = [&](int worker, int round, int& params, const StopFlag&) {
    if (worker == 0 && round == 2) throw std::runtime_error("boom");
    clock.sleep_for(worker == 0 ? 5.0 : 7.0);
    params = round;
    return 0.1 * round + (worker == 0 ? 0.5 : 0.0);
  };

  auto result = run_supervised_training<int>({0, 0}, round_fn, clock, cfg);

  const auto& w0 = result.workers[0];
  CHECK(w0.failed);
  CHECK(w0.error == "boom");
  CHECK(w0.rounds_completed == 1);
  CHECK(w0.validations == 1);
  CHECK(w0.best_accuracy == doctest::Approx(0.6));
  CHECK(w0.best_params == 1);

  const auto& w1 = result.workers[1];
  CHECK_FALSE(w1.failed);
  CHECK(w1.rounds_completed == 3);
  CHECK(w1.validations == 3);
  CHECK(w1.best_accuracy == doctest::Approx(0.3));

  CHECK(count_kind(result.log, Kind::failure) == 1);
  const RoundRecord* fail = find_record(result.log, Kind::failure, 0, 0);
  REQUIRE(fail != nullptr);
  CHECK(fail->note == "boom");
  CHECK(count_kind(result.log, Kind::finished) == 2);
  CHECK(result.elapsed_seconds == doctest::Approx(21.0));
}

TEST_CASE("a round abandoned without validation ends that worker") {
  FakeClock clock;
  SupervisorConfig cfg;
  cfg.budget_seconds = 100.0;
  cfg.poll_seconds = 0.005;

  RoundFn<int> round_fn = [&](int, int round, int& params, const StopFlag&) -> std::optional<double> {
    if (round == 2) return std::nullopt;
    clock.sleep_for(2.0);
    params = round;
    return 0.4;
  };

  auto result = run_supervised_training<int>({0}, round_fn, clock, cfg);
  CHECK(result.workers[0].rounds_completed == 1);
  CHECK(result.workers[0].validations == 1);
  CHECK_FALSE(result.workers[0].failed);

  auto kinds = kinds_for_worker(result.log, 0);
  REQUIRE(kinds.size() == 4);
  CHECK(kinds[0] == Kind::round_done);
  CHECK(kinds[1] == Kind::decision);
  CHECK(kinds[2] == Kind::aborted);
  CHECK(kinds[3] == Kind::finished);
}

TEST_CASE("the watchdog hard-stops workers once the budget reads empty") {
  FakeClock clock;
  SupervisorConfig cfg;
  cfg.budget_seconds = 25.0;
  cfg.poll_seconds = 0.005;

  // The round only ends when stopped, so the sole exit path is the watchdog
  // noticing the exhausted budget and requesting a stop.
  RoundFn<int> round_fn = [&](int, int, int&, const StopFlag& stop) -> std::optional<double> {
    while (!stop.requested()) clock.sleep_for(1.0);
    return std::nullopt;
  };

  auto result = run_supervised_training<int>({0}, round_fn, clock, cfg);

  CHECK(result.workers[0].validations == 0);
  CHECK(result.workers[0].rounds_completed == 0);
  CHECK_FALSE(result.workers[0].failed);
  CHECK(result.workers[0].best_params == 0);
  CHECK(count_kind(result.log, Kind::hard_stop) == 1);
  CHECK(count_kind(result.log, Kind::aborted) == 1);
  CHECK(count_kind(result.log, Kind::round_done) == 0);
  CHECK(result.elapsed_seconds >= 25.0);
}

TEST_CASE("a denied verdict stops the worker before its next round") {
  FakeClock clock;
  SupervisorConfig cfg;
  cfg.budget_seconds = 25.0;
  cfg.reserve_seconds = 0.0;
  cfg.poll_seconds = 0.005;

  std::atomic<int> rounds_started{0};
  RoundFn<int> round_fn = [&](int, int round, int& params, const StopFlag&) {
    rounds_started.fetch_add(1);
    clock.sleep_for(10.0);
    params = round;
    return 0.5;
  };

  auto result = run_supervised_training<int>({0}, round_fn, clock, cfg);

  // Remaining after round 2 is 5 < 12, so the second verdict is a denial and
  // no third round ever starts.
  CHECK(rounds_started.load() == 2);
  CHECK(result.workers[0].rounds_completed == 2);
  const RoundRecord* d2 = find_record(result.log, Kind::decision, 0, 2);
  REQUIRE(d2 != nullptr);
  CHECK_FALSE(d2->approved);
  CHECK(result.elapsed_seconds == doctest::Approx(20.0));
}

TEST_CASE("two identical runs on virtual time produce identical outcomes") {
  auto run_once = [] {
    FakeClock clock;
    SupervisorConfig cfg;
    cfg.budget_seconds = 50.0;
    cfg.poll_seconds = 0.005;
    RoundFn<int> round_fn = [&](int, int round, int& params, const StopFlag&) {
      clock.sleep_for(7.0);
      params = round;
      return 0.3 + 0.05 * round;
    };
    return run_supervised_training<int>({0}, round_fn, clock, cfg);
  };

  auto r1 = run_once();
  auto r2 = run_once();
  CHECK(r1.workers[0].rounds_completed == r2.workers[0].rounds_completed);
  CHECK(r1.workers[0].best_accuracy == doctest::Approx(r2.workers[0].best_accuracy));
  CHECK(r1.workers[0].best_params == r2.workers[0].best_params);
  CHECK(r1.elapsed_seconds == doctest::Approx(r2.elapsed_seconds));
  REQUIRE(r1.log.size() == r2.log.size());
  for (size_t i = 0; i < r1.log.size(); ++i) {
    CHECK(r1.log[i].kind == r2.log[i].kind);
    CHECK(r1.log[i].worker == r2.log[i].worker);
    CHECK(r1.log[i].round == r2.log[i].round);
    CHECK(r1.log[i].at == doctest::Approx(r2.log[i].at));
  }
}

TEST_CASE("workers on real time finish within the budget plus one round") {
  SystemClock clock;
  SupervisorConfig cfg;
  cfg.budget_seconds = 0.5;
  cfg.reserve_seconds = 0.0;
  cfg.poll_seconds = 0.005;

  RoundFn<int> round_fn = [&](int, int round, int& params, const StopFlag&) {
    clock.sleep_for(0.05);
    params = round;
    return 0.5;
  };

  const double t0 = real_seconds();
  auto result = run_supervised_training<int>({0, 0}, round_fn, clock, cfg);
  const double took = real_seconds() - t0;

  for (const auto& w : result.workers) {
    CHECK_FALSE(w.failed);
    CHECK(w.validations >= 1);
  }
  // Budget 0.5s, rounds around 0.05s: the run must end promptly after the
  // budget even on a slow box.
  CHECK(took < 10.0);
  CHECK(result.elapsed_seconds <= cfg.budget_seconds + 1.0);
}
