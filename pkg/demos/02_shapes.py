"""
Tracing the network shapes
==========================

A full-size CG-PCNN forward pass on 300-frame inputs, layer by layer.
"""

# %%
from cgpcnn.experiment import format_trace, predicted_widths, shape_audit
from cgpcnn.models import ARCHITECTURES, NetworkSpec, build_network

ok, trace = shape_audit(26, 40, frames=300, n_speakers=100)
print(format_trace(trace))
print("matches reference:", ok)

# %%
# Each valid dilated conv trims dilation * (kernel - 1) frames.
for frames in (300, 200, 31):
    print(frames, "->", predicted_widths(frames))

# %%
# Parameter budgets of the four architectures at full width.
for arch in ARCHITECTURES:
    m2 = None if arch == "SFAN" else 40
    net = build_network(NetworkSpec(arch, 26, m2, n_speakers=100))
    print(f"{arch:8s} {net.n_parameters():>10,d} parameters")
