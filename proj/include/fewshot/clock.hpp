#pragma once

#include <atomic>
#include <condition_variable>
#include <memory>
#include <mutex>
#include <set>

namespace fewshot {

// Cooperative stop signal. Writers call request(), workers poll requested()
// at safe points (epoch and round boundaries, buffer waits).
class StopFlag {
 public:
  void request() noexcept { v_.store(true, std::memory_order_release); }
  bool requested() const noexcept { return v_.load(std::memory_order_acquire); }

 private:
  std::atomic<bool> v_{false};
};

// Returned by Clock::register_sleeper; holds a thread's registration open.
struct SleeperToken {
  virtual ~SleeperToken() = default;
};

// Time source used by everything budget-related, injected so tests can run
// on virtual time.
class Clock {
 public:
  virtual ~Clock() = default;

  // Seconds since an arbitrary epoch fixed for the lifetime of the clock.
  virtual double now() = 0;

  virtual void sleep_for(double seconds) = 0;

  // Threads that will sleep on this clock during concurrent work should
  // register for the duration of their involvement. A virtual-time clock
  // only advances when every registered thread is asleep, which keeps
  // overlapping sleeps overlapping instead of accidentally serializing
  // them. Real clocks have no use for this and return nullptr.
  virtual std::unique_ptr<SleeperToken> register_sleeper() { return nullptr; }
};

class SystemClock final : public Clock {
 public:
  SystemClock();
  double now() override;
  void sleep_for(double seconds) override;

 private:
  double origin_;
};

// Deterministic virtual clock. now() starts at 0 and only moves when
// advance() is called or when every registered sleeper is blocked in
// sleep_for; it then jumps straight to the earliest pending deadline.
class FakeClock final : public Clock {
 public:
  double now() override;
  void sleep_for(double seconds) override;
  std::unique_ptr<SleeperToken> register_sleeper() override;

  void advance(double seconds);

 private:
  friend struct FakeSleeperToken;

  // Pre: lock held. Jumps to the earliest deadline once all registered
  // sleepers are waiting.
  void advance_if_ready();

  std::mutex m_;
  std::condition_variable cv_;
  double now_ = 0.0;
  size_t sleepers_ = 0;
  std::multiset<double> deadlines_;
};

// Tracks consumption of a wall-time budget against an injected clock.
class BudgetClock {
 public:
  // total_seconds must be > 0; throws ArgumentError otherwise.
  BudgetClock(Clock& clock, double total_seconds);

  double elapsed() const;
  // Never negative: a blown budget reports 0 remaining, not a debt.
  double remaining() const;
  double total() const { return total_; }

 private:
  Clock* clock_;
  double total_;
  double start_;
};

}  // namespace fewshot
