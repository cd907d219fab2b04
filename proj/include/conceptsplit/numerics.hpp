#pragma once

namespace csplit {

// Global numeric mode. "verify" keeps full 64-bit precision everywhere and is
// required for finite-difference gradient checks. "fast" rounds every stored
// value through float32 and runs the matmul kernel in float32, which is what
// end-to-end training/sampling runs use. The mode is process-global; switch it
// only between runs, never while tensors are in flight on a tape.
enum class NumericMode { verify, fast };

NumericMode numeric_mode();
void set_numeric_mode(NumericMode m);

// Rounds a value through float32 in fast mode, identity in verify mode.
double canon(double v);

struct NumericModeGuard {
    explicit NumericModeGuard(NumericMode m) : prev_(numeric_mode()) {
        set_numeric_mode(m);
    }
    ~NumericModeGuard() { set_numeric_mode(prev_); }
    NumericModeGuard(const NumericModeGuard&) = delete;
    NumericModeGuard& operator=(const NumericModeGuard&) = delete;

  private:
    NumericMode prev_;
};

}  // namespace csplit
