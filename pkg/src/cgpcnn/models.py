"""Parallel CNN speaker classifiers: CG-PCNN and its three ablations.

All four networks share the layer geometry below (kernel widths 5, 5, 7, 1
with dilations 1, 2, 3, 1, ``channels`` filters per branch) and the same
classifier head: ReLU(1x1 conv) -> statistics pooling -> ReLU(FC) -> logits.

============  =============================================================
CG-PCNN       every branch conv gated by the mean of a self gate and a
              cross gate computed from the other branch
G-PCNN        every branch conv gated by its own input only
PCNN          conv + ReLU in each branch, no gates
SFAN          a single PCNN branch, no concatenation
============  =============================================================

Parameter names follow ``layer{l}.{a|b}.{main|gate_self|gate_cross}.{weight|bias}``
and ``head.{conv|fc|out}.{weight|bias}``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

CG_PCNN, PCNN, G_PCNN, SFAN = "CG-PCNN", "PCNN", "G-PCNN", "SFAN"
ARCHITECTURES = (CG_PCNN, PCNN, G_PCNN, SFAN)
ROLES = {CG_PCNN: ("main", "gate_self", "gate_cross"),
         G_PCNN: ("main", "gate_self"),
         PCNN: ("main",),
         SFAN: ("main",)}

DEFAULT_KERNELS = (5, 5, 7, 1)
DEFAULT_DILATIONS = (1, 2, 3, 1)


def canonical_architecture(name: str) -> str:
    key = name.upper().replace("_", "-")
    aliases = {"CGPCNN": CG_PCNN, "GPCNN": G_PCNN}
    key = aliases.get(key, key)
    if key not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {name!r}; choose from {ARCHITECTURES}")
    return key


@dataclass(frozen=True)
class NetworkSpec:
    architecture: str
    m1: int
    m2: int | None = None
    n_speakers: int = 100
    channels: int = 256
    head_channels: int = 1500
    embed_dim: int = 512
    kernels: tuple = DEFAULT_KERNELS
    dilations: tuple = DEFAULT_DILATIONS

    def __post_init__(self):
        object.__setattr__(self, "architecture", canonical_architecture(self.architecture))
        object.__setattr__(self, "kernels", tuple(int(k) for k in self.kernels))
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if self.architecture == SFAN:
            if self.m2 is not None:
                raise ValueError("SFAN takes a single feature matrix; m2 must be None")
        elif self.m2 is None:
            raise ValueError(f"{self.architecture} needs two feature dimensions")
        dims = [self.m1, self.n_speakers, self.channels, self.head_channels, self.embed_dim]
        if self.m2 is not None:
            dims.append(self.m2)
        if min(dims) < 1:
            raise ValueError("all dimensions must be positive")
        if len(self.kernels) != len(self.dilations) or not self.kernels:
            raise ValueError("kernels and dilations must have equal, nonzero length")
        if min(self.kernels) < 1 or min(self.dilations) < 1:
            raise ValueError("kernel widths and dilations must be >= 1")

    @property
    def n_layers(self) -> int:
        return len(self.kernels)

    @property
    def branches(self) -> tuple:
        return ("a",) if self.architecture == SFAN else ("a", "b")

    @property
    def fusion_channels(self) -> int:
        return self.channels * len(self.branches)

    def input_dim(self, branch: str) -> int:
        return self.m1 if branch == "a" else self.m2

    def min_frames(self) -> int:
        return 1 + sum(d * (k - 1) for k, d in zip(self.kernels, self.dilations))

    def output_width(self, frames: int) -> int:
        return frames - self.min_frames() + 1


def param_shapes(spec: NetworkSpec) -> dict[str, tuple]:
    shapes = {}
    for layer, k in enumerate(spec.kernels, 1):
        for br in spec.branches:
            other = "b" if br == "a" else "a"
            for role in ROLES[spec.architecture]:
                src = other if role == "gate_cross" else br
                c_in = spec.input_dim(src) if layer == 1 else spec.channels
                shapes[f"layer{layer}.{br}.{role}.weight"] = (spec.channels, c_in, k)
                shapes[f"layer{layer}.{br}.{role}.bias"] = (spec.channels,)
    shapes["head.conv.weight"] = (spec.head_channels, spec.fusion_channels, 1)
    shapes["head.conv.bias"] = (spec.head_channels,)
    shapes["head.fc.weight"] = (spec.embed_dim, 2 * spec.head_channels)
    shapes["head.fc.bias"] = (spec.embed_dim,)
    shapes["head.out.weight"] = (spec.n_speakers, spec.embed_dim)
    shapes["head.out.bias"] = (spec.n_speakers,)
    return shapes


# -- building blocks -------------------------------------------------------

def conv(x, p: tuple, dilation: int) -> Tensor:
    return ad.conv1d(x, p[0], p[1], dilation)


def cg_parallel_layer(ha, hb, left: dict, right: dict, dilation: int = 1,
                      gates: list | None = None) -> tuple[Tensor, Tensor]:
    """One cross-gated parallel layer.

    ``left``/``right`` map ``main``, ``gate_self`` and ``gate_cross`` to
    ``(weight, bias)`` pairs. The left gate averages a sigmoid of the left
    input and a sigmoid of the right input; the right branch mirrors it.
    When ``gates`` is a list, the two gate maps are appended to it.
    """
    # every conv reading ha shares one im2col pass, likewise for hb
    ya = ad.conv1d_multi(ha, [left["main"], left["gate_self"], right["gate_cross"]], dilation)
    yb = ad.conv1d_multi(hb, [right["main"], right["gate_self"], left["gate_cross"]], dilation)
    c = left["main"][0].shape[0]
    sa = ad.sigmoid(ad.slice_rows(ya, c, 3 * c))
    sb = ad.sigmoid(ad.slice_rows(yb, c, 3 * c))
    ga = ad.mean2(ad.slice_rows(sa, 0, c), ad.slice_rows(sb, c, 2 * c))
    gb = ad.mean2(ad.slice_rows(sb, 0, c), ad.slice_rows(sa, c, 2 * c))
    if gates is not None:
        gates.extend([ga.data, gb.data])
    out_a = ad.mul(ad.slice_rows(ya, 0, c), ga)
    out_b = ad.mul(ad.slice_rows(yb, 0, c), gb)
    return out_a, out_b


def g_cnn_module(h, main: tuple, gate: tuple, dilation: int = 1,
                 gates: list | None = None) -> Tensor:
    """Self-gated conv: ``conv(h; main) * sigmoid(conv(h; gate))``."""
    y = ad.conv1d_multi(h, [main, gate], dilation)
    c = main[0].shape[0]
    g = ad.sigmoid(ad.slice_rows(y, c, 2 * c))
    if gates is not None:
        gates.append(g.data)
    return ad.mul(ad.slice_rows(y, 0, c), g)


def plain_parallel_layer(ha, hb, left: tuple, right: tuple,
                         dilation: int = 1) -> tuple[Tensor, Tensor]:
    return ad.relu(conv(ha, left, dilation)), ad.relu(conv(hb, right, dilation))


def classifier_head(h_fusion, params: dict, trace: list | None = None) -> Tensor:
    """ReLU(1x1 conv) -> mean/std pooling -> ReLU(FC) -> linear logits."""
    h = ad.relu(conv(h_fusion, params["conv"], 1))
    s = ad.statistics_pool(h)
    e = ad.relu(ad.linear(s, *params["fc"]))
    logits = ad.linear(e, *params["out"])
    if trace is not None:
        for name, t in (("head.conv", h), ("pool", s), ("fc", e), ("logits", logits)):
            trace.append((name, tuple(t.shape)))
    return logits


# -- the network -----------------------------------------------------------

class Network:
    """Parameters plus forward pass for one of the four architectures."""

    def __init__(self, spec: NetworkSpec, params: dict[str, Parameter]):
        expected = param_shapes(spec)
        if list(params) != list(expected):
            missing = set(expected) - set(params)
            extra = set(params) - set(expected)
            if missing or extra:
                raise ValueError(f"parameter mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
            params = {k: params[k] for k in expected}
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {params[name].shape}")
        self.spec = spec
        self.params = params

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def _pair(self, prefix: str) -> tuple:
        return self.params[f"{prefix}.weight"], self.params[f"{prefix}.bias"]

    def module(self, layer: int, branch: str) -> dict:
        return {role: self._pair(f"layer{layer}.{branch}.{role}")
                for role in ROLES[self.spec.architecture]}

    def head(self) -> dict:
        return {k: self._pair(f"head.{k}") for k in ("conv", "fc", "out")}

    def _check_input(self, x, branch: str):
        if x is None:
            raise ValueError(f"{self.spec.architecture} needs features for branch {branch}")
        x = ad.as_tensor(x)
        if x.data.ndim not in (2, 3) or x.shape[-2] != self.spec.input_dim(branch):
            raise ValueError(
                f"branch {branch} expects {self.spec.input_dim(branch)}-dim features, got {x.shape}")
        if x.shape[-1] < self.spec.min_frames():
            raise ValueError(
                f"{x.shape[-1]} frames is too short; the layer stack needs >= {self.spec.min_frames()}")
        return x

    def forward(self, xa, xb=None, trace: list | None = None,
                gates: list | None = None) -> Tensor:
        """Logits for features ``xa`` (and ``xb``), each ``(M, T)`` or ``(B, M, T)``.

        ``trace`` collects ``(stage, shape)`` pairs with the batch axis dropped.
        """
        spec = self.spec
        ha = self._check_input(xa, "a")
        if spec.architecture == SFAN:
            if xb is not None:
                raise ValueError("SFAN takes a single feature matrix")
            hb = None
        else:
            hb = self._check_input(xb, "b")
            if hb.shape[:-2] != ha.shape[:-2] or hb.shape[-1] != ha.shape[-1]:
                raise ValueError(f"feature widths differ: {ha.shape} vs {hb.shape}")

        batched = ha.data.ndim == 3
        for layer, d in enumerate(spec.dilations, 1):
            left = self.module(layer, "a")
            if spec.architecture == SFAN:
                ha = ad.relu(conv(ha, left["main"], d))
            else:
                right = self.module(layer, "b")
                if spec.architecture == CG_PCNN:
                    ha, hb = cg_parallel_layer(ha, hb, left, right, d, gates)
                elif spec.architecture == G_PCNN:
                    ha = g_cnn_module(ha, left["main"], left["gate_self"], d, gates)
                    hb = g_cnn_module(hb, right["main"], right["gate_self"], d, gates)
                else:
                    ha, hb = plain_parallel_layer(ha, hb, left["main"], right["main"], d)
            if trace is not None:
                trace.append((f"layer{layer}.a", _shape(ha, batched)))
                if hb is not None:
                    trace.append((f"layer{layer}.b", _shape(hb, batched)))

        fusion = ha if hb is None else ad.concat_rows(ha, hb)
        if trace is not None:
            trace.append(("fusion", _shape(fusion, batched)))
        head_trace = [] if trace is not None else None
        logits = classifier_head(fusion, self.head(), head_trace)
        if trace is not None:
            trace.extend((name, shape[1:] if batched else shape) for name, shape in head_trace)
        return logits

    __call__ = forward

    def predict(self, xa, xb=None, batch_size: int = 32) -> np.ndarray:
        """Argmax class per utterance for batched inputs."""
        xa = np.asarray(xa)
        preds = []
        for i in range(0, xa.shape[0], batch_size):
            sl = slice(i, i + batch_size)
            logits = self.forward(xa[sl], None if xb is None else np.asarray(xb)[sl])
            preds.append(np.argmax(logits.data, axis=-1))
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: shape {state[k].shape} does not match {p.shape}")
            p.data[...] = state[k]


def _shape(t: Tensor, batched: bool) -> tuple:
    return tuple(t.shape[1:]) if batched else tuple(t.shape)


def build_network(spec: NetworkSpec, seed: int = 0) -> Network:
    """Weights uniform in +-sqrt(6 / fan_in), biases zero, drawn in name order."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Parameter(name, data)
    return Network(spec, params)


def spec_from_state(state: dict[str, np.ndarray],
                    dilations: tuple = DEFAULT_DILATIONS) -> NetworkSpec:
    """Recover the architecture and widths from checkpoint tensor names/shapes."""
    names = set(state)
    if "layer1.a.main.weight" not in names:
        raise ValueError("checkpoint has no layer1.a.main.weight")
    two_branch = "layer1.b.main.weight" in names
    if any(".gate_cross." in n for n in names):
        arch = CG_PCNN
    elif any(".gate_self." in n for n in names):
        arch = G_PCNN
    else:
        arch = PCNN if two_branch else SFAN
    kernels = []
    layer = 1
    while f"layer{layer}.a.main.weight" in names:
        kernels.append(state[f"layer{layer}.a.main.weight"].shape[2])
        layer += 1
    w1 = state["layer1.a.main.weight"]
    return NetworkSpec(
        architecture=arch,
        m1=w1.shape[1],
        m2=state["layer1.b.main.weight"].shape[1] if two_branch else None,
        n_speakers=state["head.out.weight"].shape[0],
        channels=w1.shape[0],
        head_channels=state["head.conv.weight"].shape[0],
        embed_dim=state["head.fc.weight"].shape[0],
        kernels=tuple(kernels),
        dilations=tuple(dilations[:len(kernels)]),
    )


def network_from_state(state: dict[str, np.ndarray]) -> Network:
    spec = spec_from_state(state)
    return Network(spec, {k: Parameter(k, state[k]) for k in param_shapes(spec)})


def swap_branches(net: Network) -> Network:
    """Mirror a two-branch network: left and right parameters trade places.

    The head conv's input columns are permuted to match, so
    ``swapped(xb, xa)`` reproduces ``net(xa, xb)``.
    """
    spec = net.spec
    if spec.architecture == SFAN:
        raise ValueError("SFAN has a single branch")
    swapped_spec = replace(spec, m1=spec.m2, m2=spec.m1)
    flip = {"a": "b", "b": "a"}
    params = {}
    for name in param_shapes(swapped_spec):
        if name.startswith("layer"):
            layer, br, rest = name.split(".", 2)
            src = f"{layer}.{flip[br]}.{rest}"
            data = net.params[src].data.copy()
        elif name == "head.conv.weight":
            w = net.params[name].data
            c = spec.channels
            data = np.concatenate([w[:, c:], w[:, :c]], axis=1)
        else:
            data = net.params[name].data.copy()
        params[name] = Parameter(name, data)
    return Network(swapped_spec, params)


def branch_conv_param_count(net: Network, layer: int) -> int:
    prefix = f"layer{layer}."
    return sum(p.data.size for n, p in net.params.items() if n.startswith(prefix))
