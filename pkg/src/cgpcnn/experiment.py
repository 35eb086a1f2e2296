"""Training, evaluation, ablation runs, gradient checks and the shape audit."""

from __future__ import annotations

import csv
import json
import logging
import time
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DivergenceError
from .corpus import (UtteranceRecord, add_white_noise, load_wav, read_manifest,
                     segment_utterance, split_manifest)
from .features import (FrameConfig, feature_path, read_features, utterance_features,
                       write_features)
from .models import (CG_PCNN, G_PCNN, PCNN, SFAN, Network, NetworkSpec, build_network,
                     canonical_architecture, network_from_state)

log = logging.getLogger(__name__)

# small enough to train a toy corpus on one core in about a minute per run
DESK_GEOMETRY = dict(channels=16, head_channels=64, embed_dim=32)


class AuditError(AssertionError):
    """A shape audit or gradient check did not match its reference."""


@dataclass
class TrainConfig:
    architecture: str = CG_PCNN
    feature_pair: tuple = (26, 40)
    epochs: int = 200
    lr_start: float = 1e-3
    lr_end: float = 1e-4
    batch_size: int = 16
    seed: int = 0
    train_manifest: str | None = None
    test_manifest: str | None = None
    features_dir: str | None = None
    checkpoint: str | None = None
    channels: int = 256
    head_channels: int = 1500
    embed_dim: int = 512
    duration_s: float = 3.0

    def __post_init__(self):
        self.architecture = canonical_architecture(self.architecture)
        pair = self.feature_pair
        self.feature_pair = (int(pair),) if np.isscalar(pair) else tuple(int(m) for m in pair)
        if not 1 <= len(self.feature_pair) <= 2:
            raise ValueError("feature_pair must hold one or two filter counts")
        if self.architecture != SFAN and len(self.feature_pair) != 2:
            raise ValueError(f"{self.architecture} needs two feature dimensions")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("need lr_start >= lr_end > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def input_dims(self) -> tuple:
        """Feature dimensions the network consumes (SFAN reads only the first)."""
        return self.feature_pair[:1] if self.architecture == SFAN else self.feature_pair

    def network_spec(self, n_speakers: int) -> NetworkSpec:
        dims = self.input_dims
        return NetworkSpec(self.architecture, dims[0], dims[1] if len(dims) > 1 else None,
                           n_speakers, self.channels, self.head_channels, self.embed_dim)

    @classmethod
    def from_json(cls, path, **overrides) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        raw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**raw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["feature_pair"] = list(self.feature_pair)
        return d


@dataclass
class RunResult:
    architecture: str
    feature_pair: tuple
    seed: int
    train_accuracy: float
    test_accuracy: float | None
    loss_trace: list = field(default_factory=list)
    seconds: float = 0.0


def features_label(dims: Sequence[int]) -> str:
    return "&".join(f"MFBF{m}" for m in dims)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Exponential interpolation from ``lr_start`` (first epoch) to ``lr_end`` (last)."""
    if cfg.epochs == 1:
        return cfg.lr_start
    return cfg.lr_start * (cfg.lr_end / cfg.lr_start) ** (epoch / (cfg.epochs - 1))


# -- data ------------------------------------------------------------------

@dataclass
class FeatureSet:
    """Stacked ``(N, M, T)`` features per filter count plus integer labels."""

    ids: list
    labels: np.ndarray
    features: dict

    def inputs(self, dims: Sequence[int], idx=slice(None)) -> tuple:
        xa = self.features[dims[0]][idx]
        xb = self.features[dims[1]][idx] if len(dims) > 1 else None
        return xa, xb

    def __len__(self):
        return len(self.ids)


def front_end(record: UtteranceRecord, dims: Iterable[int], duration_s: float = 3.0,
              noise: tuple | None = None, frame_cfg: FrameConfig = FrameConfig()) -> dict:
    """Waveform -> (optional white noise) -> MFBF + CMN for each filter count.

    ``noise`` is ``(snr_db, seed)``; the per-utterance noise stream is
    derived from the seed and the utterance id.
    """
    w = segment_utterance(load_wav(record.path), duration_s)
    if noise is not None:
        snr_db, seed = noise
        w = add_white_noise(w, snr_db, [int(seed), zlib.crc32(record.id.encode("utf-8"))])
    return {m: utterance_features(w, m, frame_cfg) for m in dims}


def extract_corpus(records: Sequence[UtteranceRecord], dims: Iterable[int], features_dir,
                   duration_s: float = 3.0) -> list[Path]:
    dims = list(dims)
    written = []
    for r in records:
        feats = front_end(r, dims, duration_s)
        for m in dims:
            path = feature_path(features_dir, r.id, m)
            write_features(path, feats[m])
            written.append(path)
    return written


def load_feature_set(records: Sequence[UtteranceRecord], dims: Sequence[int],
                     speakers: Sequence[str], features_dir=None, noise=None,
                     duration_s: float = 3.0, cache: dict | None = None) -> FeatureSet:
    """Gather features for ``records`` from files, a cache, or the raw audio.

    With ``noise`` set the audio is always re-processed.
    """
    index = {s: i for i, s in enumerate(speakers)}
    missing = sorted({r.speaker for r in records} - set(index))
    if missing:
        raise ValueError(f"speakers not known to the model: {missing}")
    stacks = {m: [] for m in dims}
    for r in records:
        if noise is None and cache is not None and all((r.id, m) in cache for m in dims):
            feats = {m: cache[(r.id, m)] for m in dims}
        elif noise is None and features_dir is not None:
            feats = {}
            for m in dims:
                path = feature_path(features_dir, r.id, m)
                if not path.is_file():
                    raise FileNotFoundError(f"missing feature file {path}; run extract first")
                feats[m] = read_features(path)
        else:
            feats = front_end(r, dims, duration_s, noise)
        for m in dims:
            if feats[m].shape[0] != m:
                raise ValueError(f"{r.id}: feature file has {feats[m].shape[0]} rows, expected {m}")
            stacks[m].append(feats[m])
    arrays = {}
    for m, mats in stacks.items():
        widths = {f.shape[1] for f in mats}
        if len(widths) > 1:
            raise ValueError(f"MFBF{m} matrices have differing frame counts {sorted(widths)}")
        arrays[m] = np.stack(mats) if mats else np.zeros((0, m, 0))
    labels = np.array([index[r.speaker] for r in records], dtype=np.int64)
    return FeatureSet([r.id for r in records], labels, arrays)


# -- training --------------------------------------------------------------

def accuracy(net: Network, data: FeatureSet, dims: Sequence[int], batch_size: int = 32) -> float:
    if len(data) == 0:
        raise ValueError("no utterances to score")
    xa, xb = data.inputs(dims)
    preds = net.predict(xa, xb, batch_size)
    return 100.0 * float(np.mean(preds == data.labels))


def fit(cfg: TrainConfig, train_data: FeatureSet, n_speakers: int,
        test_data: FeatureSet | None = None) -> tuple[Network, RunResult]:
    """Mini-batch Adam on cross-entropy; keeps the weights of the best-loss epoch."""
    start = time.perf_counter()
    dims = cfg.input_dims
    net = build_network(cfg.network_spec(n_speakers), cfg.seed)
    opt = ad.Adam(net.parameters())
    rng = np.random.default_rng([cfg.seed, 1])
    n = len(train_data)
    if n == 0:
        raise ValueError("empty training set")

    trace, best_loss, best_state = [], np.inf, None
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = rng.permutation(n)
        total = 0.0
        for b, i in enumerate(range(0, n, cfg.batch_size)):
            idx = order[i:i + cfg.batch_size]
            xa, xb = train_data.inputs(dims, idx)
            ad.zero_grad(net.parameters())
            loss = ad.softmax_cross_entropy(net.forward(xa, xb), train_data.labels[idx])
            value = float(loss.data)
            if not np.isfinite(value):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, batch {b} (lr={lr:.3g})")
            ad.backward(loss)
            try:
                opt.step(lr)
            except DivergenceError as exc:
                raise DivergenceError(f"epoch {epoch}, batch {b}: {exc}") from exc
            total += value * len(idx)
        epoch_loss = total / n
        trace.append(epoch_loss)
        if epoch_loss < best_loss:
            best_loss, best_state = epoch_loss, net.state_dict()
        log.debug("epoch %d lr %.2e loss %.5f", epoch, lr, epoch_loss)

    net.load_state_dict(best_state)
    train_acc = accuracy(net, train_data, dims)
    test_acc = accuracy(net, test_data, dims) if test_data is not None and len(test_data) else None
    result = RunResult(cfg.architecture, cfg.input_dims, cfg.seed, train_acc, test_acc,
                       trace, time.perf_counter() - start)
    return net, result


def train(cfg: TrainConfig) -> tuple[Network, RunResult]:
    """File-driven training: manifests + extracted features in, checkpoint out."""
    if cfg.train_manifest is None:
        raise ValueError("train_manifest is required")
    train_records = [r for r in read_manifest(cfg.train_manifest) if r.split == "train"]
    speakers = sorted({r.speaker for r in train_records})
    train_data = load_feature_set(train_records, cfg.input_dims, speakers, cfg.features_dir,
                                  duration_s=cfg.duration_s)
    test_data = None
    if cfg.test_manifest is not None:
        test_records = [r for r in read_manifest(cfg.test_manifest) if r.split == "test"]
        test_data = load_feature_set(test_records, cfg.input_dims, speakers, cfg.features_dir,
                                     duration_s=cfg.duration_s)
    net, result = fit(cfg, train_data, len(speakers), test_data)
    if cfg.checkpoint is not None:
        save_model(cfg.checkpoint, net, speakers, cfg.input_dims)
    return net, result


def save_model(path, net: Network, speakers: Sequence[str], dims: Sequence[int]) -> None:
    """Write the binary checkpoint plus a ``.json`` sidecar naming the speakers."""
    ad.save_checkpoint(path, net.state_dict())
    meta = {"architecture": net.spec.architecture, "feature_pair": list(dims),
            "speakers": list(speakers), "dilations": list(net.spec.dilations)}
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def load_model(path) -> tuple[Network, dict]:
    net = network_from_state(ad.load_checkpoint(path))
    meta_path = Path(str(path) + ".json")
    meta = json.loads(meta_path.read_text()) if meta_path.is_file() else {}
    return net, meta


def evaluate(model, records: Sequence[UtteranceRecord], feature_pair: Sequence[int],
             noise: tuple | None = None, features_dir=None, speakers: Sequence[str] | None = None,
             cache: dict | None = None, duration_s: float = 3.0) -> float:
    """Speaker recognition rate (percent) on ``records``.

    ``model`` is a :class:`Network` or a checkpoint path. ``noise`` is
    ``(snr_db, seed)``; when set, white noise is mixed into each raw test
    waveform before feature extraction and CMN.
    """
    meta = {}
    if not isinstance(model, Network):
        model, meta = load_model(model)
    spec = model.spec
    dims = tuple(feature_pair)
    if spec.architecture == SFAN:
        dims = dims[:1]
    expected = (spec.m1,) if spec.architecture == SFAN else (spec.m1, spec.m2)
    if dims != expected:
        raise ValueError(f"checkpoint expects features {expected}, got {tuple(feature_pair)}")
    if speakers is None:
        speakers = meta.get("speakers") or sorted({r.speaker for r in records})
    if len(speakers) != spec.n_speakers:
        raise ValueError(f"model has {spec.n_speakers} outputs but {len(speakers)} speakers given")
    data = load_feature_set(records, dims, speakers, features_dir, noise, duration_s, cache)
    return accuracy(model, data, dims)


# -- ablation --------------------------------------------------------------

def summarize(results: Sequence[RunResult]) -> list[dict]:
    """Population mean/std of test SRR per (network, features), in first-seen order."""
    groups: dict = {}
    for r in results:
        groups.setdefault((r.architecture, tuple(r.feature_pair)), []).append(r.test_accuracy)
    rows = []
    for (arch, dims), srrs in groups.items():
        a = np.asarray(srrs, dtype=np.float64)
        rows.append({"network": arch, "features": features_label(dims),
                     "mean": float(a.mean()), "std": float(a.std(ddof=0)), "n": len(a)})
    return rows


def ablate(base: TrainConfig, records: Sequence[UtteranceRecord], architectures: Sequence[str],
           feature_pairs: Sequence[Sequence[int]], seeds: Sequence[int],
           train_per_speaker: int, features_dir=None, cache: dict | None = None,
           callback=None) -> tuple[list[RunResult], list[dict]]:
    """Train and test every (architecture, features, seed) cell.

    Each seed re-draws both the train/test split and the initialisation.
    """
    if len(seeds) < 2:
        raise ValueError("need at least two seeds for mean/std reporting")
    speakers = sorted({r.speaker for r in records})
    results = []
    for seed in seeds:
        train_recs, test_recs = split_manifest(records, train_per_speaker, seed)
        for arch in architectures:
            for pair in feature_pairs:
                cfg = TrainConfig(**{**base.to_dict(), "architecture": arch,
                                     "feature_pair": tuple(pair), "seed": seed,
                                     "checkpoint": None})
                dims = cfg.input_dims
                tr = load_feature_set(train_recs, dims, speakers, features_dir,
                                      duration_s=cfg.duration_s, cache=cache)
                te = load_feature_set(test_recs, dims, speakers, features_dir,
                                      duration_s=cfg.duration_s, cache=cache)
                _, res = fit(cfg, tr, len(speakers), te)
                log.info("%s %s seed %d: train %.2f test %.2f (%.1fs)", res.architecture,
                         features_label(dims), seed, res.train_accuracy, res.test_accuracy,
                         res.seconds)
                results.append(res)
                if callback is not None:
                    callback(res)
    return results, summarize(results)


RESULT_FIELDS = ("network", "features", "seed", "train_srr", "test_srr", "seconds")
SUMMARY_FIELDS = ("network", "features", "mean", "std")


def write_results_csv(path, results: Sequence[RunResult]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_FIELDS)
        for r in results:
            w.writerow([r.architecture, features_label(r.feature_pair), r.seed,
                        f"{r.train_accuracy:.4f}", f"{r.test_accuracy:.4f}", f"{r.seconds:.2f}"])


def write_summary_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_FIELDS)
        for row in rows:
            w.writerow([row["network"], row["features"], f"{row['mean']:.4f}", f"{row['std']:.4f}"])


def summary_from_csv(path) -> list[dict]:
    """Recompute the summary rows from a per-seed results CSV."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    groups: dict = {}
    for row in rows:
        groups.setdefault((row["network"], row["features"]), []).append(float(row["test_srr"]))
    return [{"network": n, "features": f, "mean": float(np.mean(v)), "std": float(np.std(v))}
            for (n, f), v in groups.items()]


# -- gradient checks -------------------------------------------------------

GRADCHECK_TOL = 1e-4


def _leaf(rng, *shape, scale=1.0):
    return ad.Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def primitive_checks(seed: int) -> dict:
    """name -> (loss builder, tensors to probe) for every primitive."""
    rng = np.random.default_rng(seed)
    checks = {}

    x, w, b = _leaf(rng, 2, 3, 20), _leaf(rng, 4, 3, 3), _leaf(rng, 4)
    proj = rng.standard_normal((2, 4, 16))
    checks["conv1d"] = (lambda: ad.sum_all(ad.mul(ad.conv1d(x, w, b, 2), ad.Tensor(proj))),
                        [x, w, b])

    w2, b2 = _leaf(rng, 2, 3, 3), _leaf(rng, 2)
    proj_m = rng.standard_normal((2, 6, 16))
    checks["conv1d_multi"] = (
        lambda: ad.sum_all(ad.mul(ad.conv1d_multi(x, [(w, b), (w2, b2)], 2), ad.Tensor(proj_m))),
        [x, w, b, w2, b2])

    def unary(op, *shape):
        t = _leaf(rng, *shape)
        p = rng.standard_normal(op(ad.Tensor(t.data)).shape)
        return (lambda: ad.sum_all(ad.mul(op(t), ad.Tensor(p)))), [t]

    checks["sigmoid"] = unary(ad.sigmoid, 3, 7)
    checks["relu"] = unary(ad.relu, 3, 7)
    checks["slice_rows"] = unary(lambda t: ad.slice_rows(t, 1, 3), 2, 4, 5)
    checks["statistics_pool"] = unary(ad.statistics_pool, 2, 5, 9)

    def binary(op, shape_a, shape_b, out_shape):
        a, bb = _leaf(rng, *shape_a), _leaf(rng, *shape_b)
        p = rng.standard_normal(out_shape)
        return (lambda: ad.sum_all(ad.mul(op(a, bb), ad.Tensor(p)))), [a, bb]

    checks["mul"] = binary(ad.mul, (3, 6), (3, 6), (3, 6))
    checks["add"] = binary(ad.add, (3, 6), (3, 6), (3, 6))
    checks["mean2"] = binary(ad.mean2, (3, 6), (3, 6), (3, 6))
    checks["concat_rows"] = binary(ad.concat_rows, (2, 3, 6), (2, 4, 6), (2, 7, 6))

    xl, wl, bl = _leaf(rng, 4, 6), _leaf(rng, 5, 6), _leaf(rng, 5)
    pl = rng.standard_normal((4, 5))
    checks["linear"] = (lambda: ad.sum_all(ad.mul(ad.linear(xl, wl, bl), ad.Tensor(pl))), [xl, wl, bl])

    z = _leaf(rng, 6, 5)
    labels = rng.integers(0, 5, 6)
    checks["softmax_cross_entropy"] = (lambda: ad.softmax_cross_entropy(z, labels), [z])

    # conv -> relu -> pool -> linear -> loss; small fc weights keep the softmax
    # away from saturation, where class gradients drop below the roundoff floor
    xc, wc, bc = _leaf(rng, 3, 4, 15), _leaf(rng, 6, 4, 3), _leaf(rng, 6, scale=0.1)
    wf, bf = _leaf(rng, 5, 12, scale=0.2), _leaf(rng, 5, scale=0.2)
    lab = rng.integers(0, 5, 3)
    checks["composite"] = (
        lambda: ad.softmax_cross_entropy(
            ad.linear(ad.statistics_pool(ad.relu(ad.conv1d(xc, wc, bc, 2))), wf, bf), lab),
        [xc, wc, bc, wf, bf])
    return checks


def network_check(architecture: str, seed: int, frames: int = 40, channels: int = 8,
                  head: int = 12, m1: int = 5, m2: int = 7, n_speakers: int = 4):
    """Loss builder + parameters for a shrunken end-to-end network.

    A handful of gate weights carry gradients near 1e-8; there one ulp of the
    loss already moves the central difference by ~1e-11, so the network error
    sits a decade above the primitives.
    """
    spec = NetworkSpec(architecture, m1, None if canonical_architecture(architecture) == SFAN else m2,
                       n_speakers, channels, head, head)
    net = build_network(spec, seed)
    rng = np.random.default_rng([seed, 7])
    # bias the head conv upward so few units sit exactly on the ReLU kink
    net.params["head.conv.bias"].data += 0.5
    xa = rng.standard_normal((2, m1, frames))
    xb = rng.standard_normal((2, m2, frames)) if spec.m2 else None
    labels = rng.integers(0, n_speakers, 2)
    return (lambda: ad.softmax_cross_entropy(net.forward(xa, xb), labels)), net.parameters()


def gradcheck_suite(seeds: Sequence[int] = range(5), eps: float = 1e-5,
                    max_coords: int | None = 40, architectures: Sequence[str] = (CG_PCNN,),
                    tol: float = GRADCHECK_TOL) -> tuple[bool, list[tuple[str, float]]]:
    """Central-difference checks of every primitive and shrunken networks.

    Returns ``(ok, [(name, worst relative error over seeds), ...])``.
    """
    worst: dict = {}
    for seed in seeds:
        for name, (fn, tensors) in primitive_checks(seed).items():
            err = ad.finite_diff_check(fn, tensors, eps, max_coords, seed)
            worst[name] = max(worst.get(name, 0.0), err)
        for arch in architectures:
            fn, tensors = network_check(arch, seed)
            err = ad.finite_diff_check(fn, tensors, eps, max_coords, seed)
            key = f"network:{canonical_architecture(arch)}"
            worst[key] = max(worst.get(key, 0.0), err)
    report = list(worst.items())
    return all(e < tol for _, e in report), report


def format_gradcheck(report, tol: float = GRADCHECK_TOL) -> str:
    return "\n".join(f"{'PASS' if err < tol else 'FAIL'} {name:24s} max_rel_err={err:.3e}"
                     for name, err in report)


# -- layer shape audit -----------------------------------------------------

def reference_trace(n_speakers: int) -> list[tuple[str, tuple]]:
    rows = []
    for layer, width in zip(range(1, 5), (296, 288, 270, 270)):
        rows += [(f"layer{layer}.a", (256, width)), (f"layer{layer}.b", (256, width))]
    return rows + [("fusion", (512, 270)), ("head.conv", (1500, 270)), ("pool", (3000,)),
                   ("fc", (512,)), ("logits", (n_speakers,))]


def shape_audit(m1: int, m2: int, frames: int = 300, n_speakers: int = 100,
                seed: int = 0) -> tuple[bool, list[tuple[str, tuple]]]:
    """Run a full-size CG-PCNN forward pass and compare its trace with the reference sizes."""
    spec = NetworkSpec(CG_PCNN, m1, m2, n_speakers)
    if frames < spec.min_frames():
        trace = [("input", (m1, frames))]
        return False, trace
    net = build_network(spec, seed)
    rng = np.random.default_rng(seed)
    trace: list = []
    net.forward(rng.standard_normal((m1, frames)), rng.standard_normal((m2, frames)), trace=trace)
    return trace == reference_trace(n_speakers), trace


def predicted_widths(frames: int, spec: NetworkSpec | None = None) -> list[int]:
    spec = spec or NetworkSpec(CG_PCNN, 13, 26)
    widths, t = [], frames
    for k, d in zip(spec.kernels, spec.dilations):
        t = ad.conv_output_width(t, k, d)
        widths.append(t)
    return widths


def format_trace(trace) -> str:
    return "\n".join(f"{name:10s} {' x '.join(str(s) for s in shape)}" for name, shape in trace)
