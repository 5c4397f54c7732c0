"""Synthetic binary walking-silhouette sequences.

Each identity is a stick-figure parameterisation (torso width, leg length,
stride amplitude, head size, gait phase). Frames are rasterised analytically:
a pixel is foreground when its centre falls inside the head circle, the torso
ellipse or one of the two leg bars. Per-sequence nuisance (start phase,
horizontal shift, optional scale jitter, 0.5% pixel flips) is drawn from Philox streams
keyed by ``(seed, identity, sequence, frame)``, so any sequence can be rendered
independently of the others and the whole dataset is a pure function of the
config.

On-disk format (:func:`save_dataset` / :func:`load_dataset`): a directory with
``manifest.json`` and one ``.bin`` file per sequence holding ``T*H*W`` uint8
bytes in C order. The manifest lists the config, seed, split identity lists
and, for every sequence, its file name, split, identity, sequence id and
covariate.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, UsageError

NONE = "none"
CARRY = "carry"
DILATE = "dilate"
COVARIATES = (NONE, CARRY, DILATE)

# documented parameter ranges for IdentitySpec
TORSO_WIDTH_RANGE = (0.22, 0.42)   # fraction of W (full width)
LEG_LENGTH_RANGE = (0.32, 0.46)    # fraction of H
STRIDE_AMPLITUDE_RANGE = (0.15, 0.55)  # radians
HEAD_RADIUS_RANGE = (0.06, 0.10)   # fraction of H
CYCLE_FRAMES = 8.0

_STREAM_IDENTITY = 1
_STREAM_SEQUENCE = 2
_STREAM_FRAME = 3
_STREAM_COVARIATE = 4


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


@dataclass(frozen=True)
class IdentitySpec:
    id: int
    torso_width_ratio: float
    leg_length_ratio: float
    stride_amplitude: float
    head_radius_ratio: float
    base_phase: float

    @classmethod
    def draw(cls, seed: int, identity: int, attempt: int = 0) -> IdentitySpec:
        r = _rng(seed, _STREAM_IDENTITY, identity, attempt)
        return cls(
            id=identity,
            torso_width_ratio=float(r.uniform(*TORSO_WIDTH_RANGE)),
            leg_length_ratio=float(r.uniform(*LEG_LENGTH_RANGE)),
            stride_amplitude=float(r.uniform(*STRIDE_AMPLITUDE_RANGE)),
            head_radius_ratio=float(r.uniform(*HEAD_RADIUS_RANGE)),
            base_phase=float(r.uniform(0.0, 2 * math.pi)),
        )


    def unit_vector(self) -> np.ndarray:
        """Shape parameters rescaled to [0, 1] by their ranges."""
        vals = (self.torso_width_ratio, self.leg_length_ratio, self.stride_amplitude, self.head_radius_ratio)
        return np.array([(v - lo) / (hi - lo) for v, (lo, hi) in zip(vals, _RANGES)])


_RANGES = (TORSO_WIDTH_RANGE, LEG_LENGTH_RANGE, STRIDE_AMPLITUDE_RANGE, HEAD_RADIUS_RANGE)
MAX_DRAW_ATTEMPTS = 10_000


def draw_identities(seed: int, n: int, min_separation: float = 0.0) -> list[IdentitySpec]:
    """Identities ``0 .. n-1`` whose unit-scaled shape vectors are pairwise ``>= min_separation`` apart.

    Identity ``i`` takes the first attempt of its own stream that is far enough
    from identities ``0 .. i-1``, so the result is deterministic in ``seed``.
    """
    out: list[IdentitySpec] = []
    for i in range(n):
        for attempt in range(MAX_DRAW_ATTEMPTS):
            cand = IdentitySpec.draw(seed, i, attempt)
            u = cand.unit_vector()
            if all(np.linalg.norm(u - o.unit_vector()) >= min_separation for o in out):
                out.append(cand)
                break
        else:
            raise ConfigError(f"cannot place identity {i} at separation {min_separation}; lower it")
    return out


@dataclass
class SilhouetteSequence:
    frames: np.ndarray  # (T, 1, H, W) uint8 in {0, 1}
    identity: int
    seq_id: int
    covariate: str = NONE

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[1] != 1:
            raise ConfigError(f"frames must be T x 1 x H x W, got {self.frames.shape}")
        if not np.isin(self.frames, (0, 1)).all():
            raise ConfigError("silhouette frames must be binary")
        self.frames = self.frames.astype(np.uint8, copy=False)


@dataclass(frozen=True)
class DatasetConfig:
    seed: int = 0
    n_ids: int = 16
    n_eval_ids: int = 8
    seqs_per_id: int = 8
    T: int = 8
    H: int = 32
    W: int = 24
    covariate_rate: float = 0.1
    noise_rate: float = 0.005
    jitter: float = 0.05
    scale_jitter: float = 0.0
    min_separation: float = 0.45

    def validate(self) -> None:
        if self.n_ids < 4 or self.n_eval_ids < 2:
            raise ConfigError("need n_ids >= 4 and n_eval_ids >= 2")
        if self.seqs_per_id < 2:
            raise ConfigError("need seqs_per_id >= 2")
        if self.H < 16 or self.W < 12 or self.T < 4:
            raise ConfigError("need H >= 16, W >= 12, T >= 4")
        if not 0 <= self.covariate_rate <= 1:
            raise ConfigError("covariate_rate must lie in [0, 1]")
        if not 0 <= self.noise_rate <= 0.01:
            raise ConfigError("noise_rate must lie in [0, 0.01]")
        if not 0 <= self.jitter < 0.5 or not 0 <= self.scale_jitter < 0.5:
            raise ConfigError("jitter and scale_jitter must lie in [0, 0.5)")
        if not 0 <= self.min_separation <= 1:
            raise ConfigError("min_separation must lie in [0, 1]")


@dataclass
class DatasetSplit:
    config: DatasetConfig
    train: list[SilhouetteSequence]
    gallery: list[SilhouetteSequence]
    probe: list[SilhouetteSequence]
    train_ids: list[int] = field(default_factory=list)
    eval_ids: list[int] = field(default_factory=list)


# ---------------------------------------------------------------------------
# rendering


def _grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return yy + 0.5, xx + 0.5


def _in_bar(yy, xx, y0, x0, angle, length, half_width):
    # bar hangs downward from (y0, x0), rotated by angle (radians, positive swings right)
    dy, dx = math.cos(angle), math.sin(angle)
    py, px = yy - y0, xx - x0
    along = py * dy + px * dx
    across = -py * dx + px * dy
    return (along >= 0) & (along <= length) & (np.abs(across) <= half_width)


def render_frame(spec: IdentitySpec, t: float, h: int, w: int, shift: float = 0.0,
                 scale: float = 1.0) -> np.ndarray:
    """Rasterise one frame of ``spec`` at time ``t`` (in frames)."""
    yy, xx = _grid(h, w)
    cx = w / 2 + shift * w
    head_r = spec.head_radius_ratio * h * scale
    leg_len = spec.leg_length_ratio * h * scale
    top = 0.06 * h
    head_cy = top + head_r
    hip_y = h * 0.94 - leg_len
    torso_top = head_cy + head_r * 0.8
    torso_cy = 0.5 * (torso_top + hip_y)
    torso_ry = max(0.5 * (hip_y - torso_top) + 1.0, 2.0)
    torso_rx = 0.5 * spec.torso_width_ratio * w * scale

    phase = 2 * math.pi * t / CYCLE_FRAMES + spec.base_phase
    swing = spec.stride_amplitude * math.sin(phase)
    bob = 0.5 * abs(math.cos(phase))

    yb = yy + bob
    head = (yb - head_cy) ** 2 + (xx - cx) ** 2 <= head_r ** 2
    torso = ((yb - torso_cy) / torso_ry) ** 2 + ((xx - cx) / torso_rx) ** 2 <= 1.0
    leg_hw = max(0.07 * w * scale, 0.9)
    legs = _in_bar(yb, xx, hip_y - 1.0, cx, swing, leg_len, leg_hw) | \
        _in_bar(yb, xx, hip_y - 1.0, cx, -swing, leg_len, leg_hw)
    return (head | torso | legs).astype(np.uint8)


def render_sequence(seed: int, spec: IdentitySpec, seq_id: int, T: int, h: int, w: int,
                    noise_rate: float = 0.005, jitter: float = 0.05,
                    scale_jitter: float = 0.0) -> np.ndarray:
    r = _rng(seed, _STREAM_SEQUENCE, spec.id, seq_id)
    start = float(r.uniform(0.0, CYCLE_FRAMES))
    shift = float(r.uniform(-jitter, jitter))
    scale = float(r.uniform(1 - scale_jitter, 1 + scale_jitter))
    frames = np.empty((T, 1, h, w), dtype=np.uint8)
    for t in range(T):
        img = render_frame(spec, start + t, h, w, shift, scale)
        if noise_rate > 0:
            fr = _rng(seed, _STREAM_FRAME, spec.id, seq_id, t)
            flips = fr.random((h, w)) < noise_rate
            img = img ^ flips.astype(np.uint8)
        frames[t, 0] = img
    return frames


# ---------------------------------------------------------------------------
# covariates


def dilate(img: np.ndarray) -> np.ndarray:
    """One step of 4-neighbour binary dilation on the trailing two axes."""
    out = img.copy()
    out[..., 1:, :] |= img[..., :-1, :]
    out[..., :-1, :] |= img[..., 1:, :]
    out[..., :, 1:] |= img[..., :, :-1]
    out[..., :, :-1] |= img[..., :, 1:]
    return out


def carry_box(frame: np.ndarray) -> tuple[int, int, int, int]:
    """Bag rectangle (y0, y1, x0, x1) for a single H x W frame, anchored to the torso."""
    h, w = frame.shape
    ys, xs = np.nonzero(frame)
    cy = float(ys.mean()) if ys.size else h / 2
    cx = float(xs.mean()) if xs.size else w / 2
    bh, bw = max(h // 6, 2), max(w // 6, 2)
    y0 = int(round(cy))
    x0 = int(round(cx + 0.12 * w))
    return max(y0, 0), min(y0 + bh, h), max(x0, 0), min(x0 + bw, w)


def apply_covariate(seq: SilhouetteSequence, kind: str) -> SilhouetteSequence:
    if kind not in COVARIATES:
        raise UsageError(f"unknown covariate {kind!r}")
    if kind == NONE:
        return seq
    frames = seq.frames.copy()
    if kind == DILATE:
        frames = dilate(frames)
    else:
        for t in range(frames.shape[0]):
            y0, y1, x0, x1 = carry_box(frames[t, 0])
            frames[t, 0, y0:y1, x0:x1] = 1
    return SilhouetteSequence(frames, seq.identity, seq.seq_id, kind)


# ---------------------------------------------------------------------------
# datasets


def _make_sequence(cfg: DatasetConfig, spec: IdentitySpec, seq_id: int) -> SilhouetteSequence:
    frames = render_sequence(cfg.seed, spec, seq_id, cfg.T, cfg.H, cfg.W, cfg.noise_rate, cfg.jitter,
                             cfg.scale_jitter)
    seq = SilhouetteSequence(frames, spec.id, seq_id)
    r = _rng(cfg.seed, _STREAM_COVARIATE, spec.id, seq_id)
    if r.random() < cfg.covariate_rate:
        seq = apply_covariate(seq, CARRY if r.random() < 0.5 else DILATE)
    return seq


def generate_dataset(seed: int = 0, n_ids: int = 16, seqs_per_id: int = 8, T: int = 8, H: int = 32,
                     W: int = 24, covariate_rate: float = 0.1, n_eval_ids: int | None = None,
                     **kwargs) -> DatasetSplit:
    """Render a train / gallery / probe split.

    Train identities are ``0 .. n_ids-1``; evaluation identities follow and
    default to ``n_ids // 2`` of them. For each evaluation identity the first
    half of its sequences form the gallery and the rest the probe set.
    """
    cfg = DatasetConfig(seed=seed, n_ids=n_ids, n_eval_ids=n_ids // 2 if n_eval_ids is None else n_eval_ids,
                        seqs_per_id=seqs_per_id, T=T, H=H, W=W, covariate_rate=covariate_rate, **kwargs)
    return generate_from_config(cfg)


def generate_from_config(cfg: DatasetConfig) -> DatasetSplit:
    cfg.validate()
    train_ids = list(range(cfg.n_ids))
    eval_ids = list(range(cfg.n_ids, cfg.n_ids + cfg.n_eval_ids))
    train, gallery, probe = [], [], []
    half = cfg.seqs_per_id // 2
    specs = draw_identities(cfg.seed, cfg.n_ids + cfg.n_eval_ids, cfg.min_separation)
    for i in train_ids:
        spec = specs[i]
        train += [_make_sequence(cfg, spec, s) for s in range(cfg.seqs_per_id)]
    for i in eval_ids:
        spec = specs[i]
        seqs = [_make_sequence(cfg, spec, s) for s in range(cfg.seqs_per_id)]
        gallery += seqs[:half]
        probe += seqs[half:]
    return DatasetSplit(cfg, train, gallery, probe, train_ids, eval_ids)


def stack_frames(seqs: list[SilhouetteSequence]) -> np.ndarray:
    """(batch, T, 1, H, W) float64 array of the given sequences."""
    return np.stack([s.frames for s in seqs]).astype(np.float64)


def labels_of(seqs: list[SilhouetteSequence]) -> np.ndarray:
    return np.array([s.identity for s in seqs], dtype=np.int64)


def save_dataset(split: DatasetSplit, out_dir, provenance: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, seqs in (("train", split.train), ("gallery", split.gallery), ("probe", split.probe)):
        for s in seqs:
            fname = f"{name}_{s.identity:04d}_{s.seq_id:03d}.bin"
            (out / fname).write_bytes(np.ascontiguousarray(s.frames, dtype=np.uint8).tobytes())
            entries.append({"file": fname, "split": name, "identity": s.identity, "seq_id": s.seq_id,
                            "covariate": s.covariate})
    manifest = {
        "format": "gaitqat-silhouettes/1",
        "config": asdict(split.config),
        "seed": split.config.seed,
        "train_ids": split.train_ids,
        "eval_ids": split.eval_ids,
        "frame_shape": [split.config.T, 1, split.config.H, split.config.W],
        "sequences": entries,
    }
    if provenance:
        manifest["provenance"] = provenance
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_dataset(path) -> DatasetSplit:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    cfg = DatasetConfig(**manifest["config"])
    shape = tuple(manifest["frame_shape"])
    parts: dict[str, list] = {"train": [], "gallery": [], "probe": []}
    for e in manifest["sequences"]:
        raw = np.frombuffer((root / e["file"]).read_bytes(), dtype=np.uint8)
        if raw.size != int(np.prod(shape)):
            raise ConfigError(f"{e['file']}: expected {int(np.prod(shape))} bytes, got {raw.size}")
        parts[e["split"]].append(SilhouetteSequence(raw.reshape(shape).copy(), e["identity"], e["seq_id"],
                                                    e["covariate"]))
    return DatasetSplit(cfg, parts["train"], parts["gallery"], parts["probe"], manifest["train_ids"],
                        manifest["eval_ids"])
