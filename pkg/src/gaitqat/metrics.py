"""Retrieval metrics and bit-operation accounting."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, UsageError


def _flat(x) -> np.ndarray:
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    return x.reshape(x.shape[0], -1)


def distance_matrix(probe, gallery) -> np.ndarray:
    """Euclidean distances from explicit differences (no cancellation near zero)."""
    p, g = _flat(probe), _flat(gallery)
    return np.sqrt(((p[:, None, :] - g[None, :, :]) ** 2).sum(-1))


# distances equal to this many decimals count as ties (broken by gallery index), so
# rankings do not depend on float summation order
RANK_DECIMALS = 9


def _ranked_matches(probe, probe_labels, gallery, gallery_labels) -> np.ndarray:
    """Boolean (n_probe, n_gallery) match matrix with gallery sorted by distance, ties by index."""
    gallery_labels = np.asarray(gallery_labels)
    if len(gallery_labels) == 0:
        raise UsageError("empty gallery")
    d = np.round(distance_matrix(probe, gallery), RANK_DECIMALS)
    order = np.argsort(d, axis=1, kind="stable")
    return gallery_labels[order] == np.asarray(probe_labels)[:, None]


def rank_n(probe, probe_labels, gallery, gallery_labels, n: int = 1) -> float:
    """Fraction of probes with a same-identity sample among their ``n`` nearest gallery entries."""
    m = _ranked_matches(probe, probe_labels, gallery, gallery_labels)
    return float(m[:, :n].any(axis=1).mean())


def _per_probe(matches: np.ndarray, fn) -> tuple[float, int]:
    vals, skipped = [], 0
    for row in matches:
        ranks = np.flatnonzero(row) + 1
        if ranks.size == 0:
            skipped += 1
            continue
        vals.append(fn(ranks))
    if not vals:
        raise UsageError("no probe has a positive in the gallery")
    return float(np.mean(vals)), skipped


def average_precision(ranks: np.ndarray) -> float:
    return float(np.mean(np.arange(1, ranks.size + 1) / ranks))


def inverse_negative_penalty(ranks: np.ndarray) -> float:
    return ranks.size / float(ranks[-1])


def mean_ap(probe, probe_labels, gallery, gallery_labels, return_skipped: bool = False):
    res = _per_probe(_ranked_matches(probe, probe_labels, gallery, gallery_labels), average_precision)
    return res if return_skipped else res[0]


def mean_inp(probe, probe_labels, gallery, gallery_labels, return_skipped: bool = False):
    res = _per_probe(_ranked_matches(probe, probe_labels, gallery, gallery_labels), inverse_negative_penalty)
    return res if return_skipped else res[0]


# ---------------------------------------------------------------------------
# BitOPs


@dataclass(frozen=True)
class LayerCostSpec:
    """One conv / linear layer for BitOPs counting (linear layers use F = H = W = 1)."""

    c_in: int
    c_out: int
    f: int
    n: int
    h: int
    w: int
    b_w: int = 32
    b_a: int = 32
    name: str = ""

    def __post_init__(self):
        for k in ("c_in", "c_out", "f", "n", "h", "w"):
            if int(getattr(self, k)) < 1:
                raise ConfigError(f"{k} must be a positive integer")
        for k in ("b_w", "b_a"):
            if not 2 <= getattr(self, k) <= 32:
                raise ConfigError(f"{k} must lie in 2..32")

    def with_bits(self, b_w: int, b_a: int) -> LayerCostSpec:
        return LayerCostSpec(self.c_in, self.c_out, self.f, self.n, self.h, self.w, b_w, b_a, self.name)


def layer_bitops(spec: LayerCostSpec) -> float:
    """``(b_w/32)(b_a/32) * 2 C_in C_out F^2 N H W``.

    Every factor is exact in binary floating point (bit widths divide into
    powers of two), so scaling relations between widths hold exactly.
    """
    ops = 2 * spec.c_in * spec.c_out * spec.f ** 2 * spec.n * spec.h * spec.w
    return (spec.b_w / 32) * (spec.b_a / 32) * ops


def bitops(layers) -> float:
    return float(sum(layer_bitops(s) for s in layers))


def format_giga(ops: float) -> str:
    return f"{ops / 1e9:.2f}"


def gaitbase_layer_table(frames: int = 100, height: int = 64, width: int = 44, parts: int = 16,
                         n_classes: int = 3000, b_w: int = 32, b_a: int = 32) -> list[LayerCostSpec]:
    """Layer list of a GaitBase-style ResNet-9 (channels 64/128/256/512, strides 1/2/2/1).

    One entry per conv, including the 1x1 shortcut projections, counted over
    ``frames`` input frames, followed by the part heads and BNNeck classifier.
    """
    layers = [LayerCostSpec(1, 64, 3, frames, height, width, b_w, b_a, "conv0")]
    h, w, c = height, width, 64
    for i, (c_out, stride) in enumerate(((64, 1), (128, 2), (256, 2), (512, 1)), start=1):
        h2, w2 = -(-h // stride), -(-w // stride)
        layers.append(LayerCostSpec(c, c_out, 3, frames, h2, w2, b_w, b_a, f"layer{i}.conv1"))
        layers.append(LayerCostSpec(c_out, c_out, 3, frames, h2, w2, b_w, b_a, f"layer{i}.conv2"))
        if stride != 1 or c != c_out:
            layers.append(LayerCostSpec(c, c_out, 1, frames, h2, w2, b_w, b_a, f"layer{i}.downsample"))
        h, w, c = h2, w2, c_out
    layers.append(LayerCostSpec(512, 256, 1, parts, 1, 1, b_w, b_a, "fc"))
    layers.append(LayerCostSpec(256, n_classes, 1, parts, 1, 1, b_w, b_a, "bnneck.classifier"))
    return layers


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricsReport:
    rank1: float
    rank5: float
    rank10: float
    mAP: float
    mINP: float
    bitops: float
    bitops_g: str
    logits_variance: float
    n_probe: int
    n_gallery: int
    skipped_probes: int = 0
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        for k in ("rank1", "rank5", "rank10", "mAP", "mINP"):
            if not 0.0 <= getattr(self, k) <= 1.0:
                raise ConfigError(f"{k} outside [0, 1]")
        if not self.rank1 <= self.rank5 <= self.rank10:
            raise ConfigError("rank-n rates must be nondecreasing in n")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def retrieval_report(probe, probe_labels, gallery, gallery_labels) -> dict:
    m = _ranked_matches(probe, probe_labels, gallery, gallery_labels)
    ng = m.shape[1]
    hit = lambda n: float(m[:, :min(n, ng)].any(axis=1).mean())  # noqa: E731
    ap, skipped = _per_probe(m, average_precision)
    inp, _ = _per_probe(m, inverse_negative_penalty)
    return {"rank1": hit(1), "rank5": hit(5), "rank10": hit(10), "mAP": ap, "mINP": inp,
            "skipped_probes": skipped, "n_probe": m.shape[0], "n_gallery": ng}


def model_layer_costs(model, frames: int | None = None) -> list[LayerCostSpec]:
    """BitOPs layer list of a :class:`~gaitqat.gaitnet.GaitNet`.

    Layers without quantizers count at 32 bits. The first conv's activation
    width follows the model's activation width so one policy scales every layer.
    """
    spec = model.spec
    t = 8 if frames is None else frames
    pol = spec.quant
    bw = 32 if pol.weight_bits is None else pol.weight_bits
    ba = 32 if pol.act_bits is None else pol.act_bits
    c1, c2 = spec.channels
    h, w = spec.height, spec.width
    return [
        LayerCostSpec(1, c1, 3, t, h, w, bw, ba, "conv1"),
        LayerCostSpec(c1, c2, 3, t, h // 2, w // 2, bw, ba, "conv2"),
        LayerCostSpec(c2, spec.dim, 1, spec.n_parts, 1, 1, bw, ba, "heads"),
        LayerCostSpec(spec.dim, spec.n_classes, 1, spec.n_parts, 1, 1, bw, ba, "classifier"),
    ]


def evaluate(model, split, batch: int = 16, config: dict | None = None) -> MetricsReport:
    """Embed gallery and probe of ``split`` in eval mode and score retrieval."""
    from . import tensor as tn
    from .synthdata import labels_of, stack_frames

    was_training = model.training
    model.eval()
    try:
        def run(seqs):
            frames = stack_frames(seqs)
            xs, os = [], []
            with tn.no_grad():
                for i in range(0, len(frames), batch):
                    x, o = model(frames[i:i + batch])
                    xs.append(x.data)
                    os.append(o.data)
            return np.concatenate(xs), np.concatenate(os)

        gx, go = run(split.gallery)
        px, po = run(split.probe)
    finally:
        if was_training:
            model.train()
    r = retrieval_report(px, labels_of(split.probe), gx, labels_of(split.gallery))
    ops = bitops(model_layer_costs(model))
    return MetricsReport(r["rank1"], r["rank5"], r["rank10"], r["mAP"], r["mINP"], ops, format_giga(ops),
                         float(np.concatenate([go, po]).var()), r["n_probe"], r["n_gallery"],
                         r["skipped_probes"], dict(config or {}))
