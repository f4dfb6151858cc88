#include "eupe/tape.hpp"

#include "eupe/error.hpp"

namespace eupe {

namespace {
thread_local GradientTape* g_active_tape = nullptr;
}

GradientTape* GradientTape::active() { return g_active_tape; }

void GradientTape::record(const Tensor& output, BackwardFn fn) {
  entries_.push_back(Entry{output, std::move(fn)});
}

void GradientTape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (entries_.empty()) return;
  Tensor seed = loss;
  seed.grad_buffer()[0] += 1.0f;
  // Entries whose output never received a gradient are unreachable from the
  // loss and are skipped.
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->output.has_grad()) it->fn();
  }
}

TapeScope::TapeScope(GradientTape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

void backward(const Tensor& loss) {
  GradientTape* tape = GradientTape::active();
  if (tape == nullptr) {
    if (!loss.defined() || loss.numel() != 1) {
      throw ContractError("backward needs a scalar loss");
    }
    throw StateError("backward called with no active gradient tape");
  }
  tape->backward(loss);
}

}  // namespace eupe
