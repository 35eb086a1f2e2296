"""
Checking the gradients
======================

Every autodiff primitive and a shrunken CG-PCNN against central
finite differences.
"""

# %%
import time

from cgpcnn.experiment import format_gradcheck, gradcheck_suite

start = time.perf_counter()
ok, report = gradcheck_suite(seeds=range(5))
print(format_gradcheck(report))
print(f"all below tolerance: {ok} ({time.perf_counter() - start:.0f}s)")

# %%
# The network check is subsampled to 40 coordinates per tensor. Gate weights
# whose gradient is around 1e-8 are limited by float64 roundoff in the
# difference quotient, which is why the network error sits above the
# primitives'.
