#include "led/core/flops.hpp"

namespace led {

namespace {
thread_local FlopsScope* g_top = nullptr;
thread_local bool g_paused = false;
}  // namespace

FlopsScope::FlopsScope(FlopsMeter& meter) : meter_(&meter), parent_(g_top) { g_top = this; }
FlopsScope::~FlopsScope() { g_top = parent_; }

FlopsPause::FlopsPause() : previous_(g_paused) { g_paused = true; }
FlopsPause::~FlopsPause() { g_paused = previous_; }

void record_flops(std::uint64_t flops) {
  if (g_paused) return;
  for (FlopsScope* s = g_top; s; s = s->parent_) {
    s->meter_->add(flops);
  }
}

}  // namespace led
