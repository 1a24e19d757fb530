#include "fewshot/clock.hpp"

#include <algorithm>
#include <chrono>
#include <thread>

#include "fewshot/error.hpp"

namespace fewshot {

namespace {

double steady_seconds() {
  using namespace std::chrono;
  return duration<double>(steady_clock::now().time_since_epoch()).count();
}

}  // namespace

SystemClock::SystemClock() : origin_(steady_seconds()) {}

double SystemClock::now() { return steady_seconds() - origin_; }

void SystemClock::sleep_for(double seconds) {
  if (seconds <= 0) return;
  std::this_thread::sleep_for(std::chrono::duration<double>(seconds));
}

struct FakeSleeperToken final : SleeperToken {
  explicit FakeSleeperToken(FakeClock& clock) : clock(&clock) {
    std::lock_guard lk(clock.m_);
    ++clock.sleepers_;
  }
  ~FakeSleeperToken() override {
    std::lock_guard lk(clock->m_);
    --clock->sleepers_;
    // One less thread to wait for; the remaining sleepers may now proceed.
    clock->advance_if_ready();
  }
  FakeClock* clock;
};

double FakeClock::now() {
  std::lock_guard lk(m_);
  return now_;
}

void FakeClock::advance(double seconds) {
  std::lock_guard lk(m_);
  if (seconds > 0) now_ += seconds;
  cv_.notify_all();
}

std::unique_ptr<SleeperToken> FakeClock::register_sleeper() {
  return std::make_unique<FakeSleeperToken>(*this);
}

void FakeClock::advance_if_ready() {
  // Unregistered callers count as always-asleep, so a plain single-threaded
  // sleep_for advances immediately.
  if (!deadlines_.empty() && deadlines_.size() >= sleepers_) {
    double next = *deadlines_.begin();
    if (next > now_) {
      now_ = next;
      cv_.notify_all();
    }
  }
}

void FakeClock::sleep_for(double seconds) {
  std::unique_lock lk(m_);
  const double deadline = now_ + std::max(0.0, seconds);
  auto it = deadlines_.insert(deadline);
  advance_if_ready();
  cv_.wait(lk, [&] { return now_ >= deadline; });
  deadlines_.erase(it);
}

BudgetClock::BudgetClock(Clock& clock, double total_seconds)
    : clock_(&clock), total_(total_seconds), start_(clock.now()) {
  if (!(total_seconds > 0)) {
    throw ArgumentError("budget must be positive, got " + std::to_string(total_seconds));
  }
}

double BudgetClock::elapsed() const { return clock_->now() - start_; }

double BudgetClock::remaining() const { return std::max(0.0, total_ - elapsed()); }

}  // namespace fewshot
