#pragma once

// Mutual exclusion among the fibers of a single thread. Uses no atomic
// instructions; grants are FIFO. A held latch suspends the locking fiber, so
// locking is subject to the delegated-context rules (launch fibers may wait,
// inline delegated bodies may not).

#include <deque>
#include <utility>

#include "entrust/fiber.hpp"

namespace entrust {

template <class T>
class latched {
public:
    explicit latched(T v) : value_(std::move(v)) {}

    latched(latched&&) = default;
    latched(const latched&) = delete;
    latched& operator=(const latched&) = delete;

    void lock() {
        if (held_) {
            waiters_.push_back(prepare_suspend());
            suspend_current();
            return; // unlock() handed ownership to us
        }
        held_ = true;
    }

    bool try_lock() {
        if (held_) return false;
        held_ = true;
        return true;
    }

    void unlock() {
        if (!waiters_.empty()) {
            wake_token next = waiters_.front();
            waiters_.pop_front();
            resume(next); // ownership transfers; held_ stays true
        } else {
            held_ = false;
        }
    }

    bool held() const noexcept { return held_; }

    T& value() noexcept { return value_; }
    const T& value() const noexcept { return value_; }

    template <class F>
    decltype(auto) with_lock(F&& f) {
        lock();
        struct release {
            latched* l;
            ~release() { l->unlock(); }
        } guard{this};
        return std::forward<F>(f)(value_);
    }

private:
    T value_;
    bool held_ = false;
    std::deque<wake_token> waiters_;
};

} // namespace entrust
