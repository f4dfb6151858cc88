#pragma once

#include <functional>
#include <vector>

#include "eupe/tensor.hpp"

namespace eupe {

// Ordered record of differentiable operations executed while the tape is
// active. Replaying it backwards from a scalar loss accumulates gradients into
// every requires_grad tensor reachable from that loss.
class GradientTape {
 public:
  using BackwardFn = std::function<void()>;

  void record(const Tensor& output, BackwardFn fn);
  void backward(const Tensor& loss);
  void clear() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  // The tape that ops record onto, or nullptr outside any TapeScope.
  static GradientTape* active();

 private:
  friend class TapeScope;
  struct Entry {
    Tensor output;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
};

// Makes a tape active for the current thread until destruction.
class TapeScope {
 public:
  explicit TapeScope(GradientTape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradientTape* previous_;
};

// Disables recording for the current thread until destruction.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  GradientTape* previous_;
};

// Backward through the active tape.
void backward(const Tensor& loss);

}  // namespace eupe
