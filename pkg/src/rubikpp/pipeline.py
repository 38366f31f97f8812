"""Experiment orchestration: synthetic phantoms, pretext datasets, pretraining,
fine-tuning, difficulty sweeps and report emission.

Every stage is a pure function of ``(config, seed)``.  Random streams are
derived with :func:`derive_seed` from the master seed plus fixed stream tags,
so re-running a stage reproduces its CSV and JSON reports byte for byte.
Wall-clock time is only ever written to the run manifest.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import subprocess
import time
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import yaml
from scipy.ndimage import gaussian_filter

from . import __version__
from . import loss as L
from .errors import FormatError, RubikError
from .net import (
    AdamState,
    Checkpoint,
    Discriminator,
    DiscriminatorConfig,
    Generator,
    GeneratorConfig,
    gan_train_step,
    replace_head,
    save_checkpoint,
    segmentation_step,
)
from .net.train import predict_labels
from .rubik import DisarrangeParams, DisarrangeRecord, disarrange, make_grid
from .volume import Volume, VolumeHeader, load_nifti1, load_raw, normalize, random_crop, read_header, read_payload, write_header, write_payload

# stream tags for derive_seed
_GEN, _DISC, _PAIR, _EVAL, _SPLIT, _FINETUNE, _HEAD, _DATASET, _VOLUME = range(1, 10)


class ConfigError(RubikError):
    """Unknown key, wrong type or out-of-range value in an experiment config."""


class Diverged(RubikError):
    """Training produced a non-finite loss; ``report`` holds the rows so far."""

    def __init__(self, report: "MetricsReport"):
        super().__init__(f"diverged at step {len(report.rows)}")
        self.report = report


def derive_seed(seed: int, *keys: int) -> int:
    """A 63-bit seed for the stream ``(seed, *keys)``."""
    state = np.random.SeedSequence([int(seed), *[int(k) for k in keys]]).generate_state(2, np.uint64)
    return int(state[0] >> np.uint64(1))


# --- configuration -------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Blob phantoms sharing one anatomical layout.

    Each volume holds an optional ``body`` ellipsoid, one blob at each of the
    ``anchors`` layout sites (jittered by ``jitter`` voxels) and a random
    number of free blobs drawn from ``blobs``.  A blob's class is its radius
    band: ``radius`` is split into ``num_classes - 1`` equal bands and larger
    bands are brighter.  The layout depends only on ``layout_seed``.
    """

    count: int = 20
    dims: Tuple[int, int, int] = (20, 20, 20)
    channels: int = 1
    anchors: int = 3
    blobs: Tuple[int, int] = (0, 2)
    radius: Tuple[float, float] = (1.5, 4.0)
    jitter: float = 1.0
    body: float = 0.3
    smoothness: float = 0.8
    noise_sd: float = 0.02
    num_classes: int = 3
    layout_seed: int = 0
    seed: int = 0

    def validate(self):
        lo, hi = self.radius
        ok = (
            self.count >= 1
            and self.channels >= 1
            and self.anchors >= 0
            and 0 <= self.blobs[0] <= self.blobs[1]
            and 0 < lo <= hi
            and 2 * hi <= min(self.dims)
            and min(self.dims) >= 1
            and self.num_classes >= 2
            and self.smoothness >= 0
            and self.noise_sd >= 0
            and self.jitter >= 0
        )
        if not ok:
            raise RubikError(f"bad spec: {self}")


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # "synthetic" or a directory of volumes
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    holdout: int = 4  # trailing volumes reserved for evaluation


@dataclass(frozen=True)
class DisarrangeConfig:
    side: Tuple[int, int, int] = (4, 4, 4)
    m: int = 2


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 2
    base_channels: int = 8
    residual: bool = False
    disc_widths: Tuple[int, ...] = (8, 16, 32)
    disc_strides: Tuple[int, ...] = (2, 2, 2, 1)


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 500
    batch: int = 2
    lr: float = 2e-4
    lr_schedule: str = "decay"  # "constant" or "decay" (linear to zero over the second half)
    loss: str = "l1"
    adversarial: bool = True
    lam: float = 10.0
    mode: str = "nonsaturating"
    eval_pairs: int = 32


@dataclass(frozen=True)
class FinetuneConfig:
    steps: int = 300
    batch: int = 2
    lr: float = 1e-4
    label_fraction: float = 1.0
    class_weights: str = "balanced"  # "balanced" (inverse frequency on the labeled volumes) or "uniform"
    head_init: str = "random"  # "random" (seeded) or "zero"


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    crop: Tuple[int, int, int] = (16, 16, 16)
    normalize: str = "minmax01"
    data: DataConfig = field(default_factory=DataConfig)
    disarrange: DisarrangeConfig = field(default_factory=DisarrangeConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    output_dir: str = "runs/default"

    def validate(self) -> "ExperimentConfig":
        factor = 2 ** self.model.depth
        if any(c < 1 or c % factor for c in self.crop):
            raise ConfigError(f"crop {list(self.crop)} must be positive and divisible by {factor}")
        if not 0 < self.finetune.label_fraction <= 1:
            raise ConfigError("finetune.label_fraction must lie in (0, 1]")
        if self.finetune.class_weights not in ("balanced", "uniform"):
            raise ConfigError("finetune.class_weights must be balanced or uniform")
        if self.finetune.head_init not in ("zero", "random"):
            raise ConfigError("finetune.head_init must be zero or random")
        if self.normalize not in ("minmax01", "zscore"):
            raise ConfigError(f"unknown normalize mode {self.normalize!r}")
        if self.pretrain.loss not in ("l1", "l2"):
            raise ConfigError(f"pretrain.loss must be l1 or l2, got {self.pretrain.loss!r}")
        if self.pretrain.mode not in L.ADV_MODES:
            raise ConfigError(f"pretrain.mode must be one of {L.ADV_MODES}")
        if self.pretrain.lr_schedule not in ("constant", "decay"):
            raise ConfigError("pretrain.lr_schedule must be constant or decay")
        if self.pretrain.steps < 0 or self.finetune.steps < 0:
            raise ConfigError("step counts must be >= 0")
        if self.pretrain.batch < 1 or self.finetune.batch < 1 or self.pretrain.eval_pairs < 1:
            raise ConfigError("batch sizes and eval_pairs must be >= 1")
        if self.pretrain.lam < 0 or self.pretrain.lr <= 0 or self.finetune.lr <= 0:
            raise ConfigError("lam must be >= 0 and learning rates > 0")
        if self.data.holdout < 1:
            raise ConfigError("data.holdout must be >= 1")
        if len(self.model.disc_widths) != len(self.model.disc_strides) - 1:
            raise ConfigError("model.disc_strides needs one more entry than model.disc_widths")
        if self.data.source == "synthetic":
            try:
                self.data.synthetic.validate()
            except RubikError as exc:
                raise ConfigError(str(exc)) from None
            if self.data.synthetic.count <= self.data.holdout:
                raise ConfigError("data.synthetic.count must exceed data.holdout")
        return self

    @property
    def num_classes(self) -> int:
        return self.data.synthetic.num_classes

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def digest(self) -> str:
        return hashlib.sha256(_canonical(self.to_dict()).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> "ExperimentConfig":
        return _build(cls, data or {}, "").validate()

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.from_dict(load_config_file(path))

    def with_overrides(self, overrides: Sequence[str]) -> "ExperimentConfig":
        """Apply ``dotted.key=value`` overrides; values are parsed as YAML scalars or lists."""
        data = self.to_dict()
        for item in overrides:
            key, sep, raw = item.partition("=")
            if not sep or not key:
                raise ConfigError(f"override {item!r} is not key=value")
            node = data
            parts = key.strip().split(".")
            for part in parts[:-1]:
                if not isinstance(node.get(part), dict):
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[part]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                node[parts[-1]] = yaml.safe_load(raw)
            except yaml.YAMLError as exc:
                raise ConfigError(f"cannot parse value for {key!r}: {exc}") from None
        return ExperimentConfig.from_dict(data)


def load_config_file(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FormatError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return data


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _coerce(tp, value, path):
    origin = typing.get_origin(tp)
    if is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path} must be a mapping")
        return _build(tp, value, path + ".")
    if origin is tuple:
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
            value = [yaml.safe_load(v) for v in value]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path} must be a list")
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, path) for v in value)
        if len(value) != len(args):
            raise ConfigError(f"{path} needs {len(args)} values, got {len(value)}")
        return tuple(_coerce(a, v, path) for a, v in zip(args, value))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be true or false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} must be an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string")
        return value
    raise ConfigError(f"unsupported config type at {path}")


def _build(cls, data: dict, prefix: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key {prefix + unknown[0]!r}")
    kwargs = {k: _coerce(hints[k], v, prefix + k) for k, v in data.items()}
    return cls(**kwargs)


# --- data ----------------------------------------------------------------------

@dataclass
class SyntheticSet:
    volumes: List[Volume]
    masks: List[np.ndarray]  # integer labels, shape (L, H, W)


def _ellipsoid(grid, center, radii):
    zz, yy, xx = grid
    return ((zz - center[0]) / radii[0]) ** 2 + ((yy - center[1]) / radii[1]) ** 2 + ((xx - center[2]) / radii[2]) ** 2 <= 1


def synth_volume(spec: SyntheticSpec, index: int) -> Tuple[Volume, np.ndarray]:
    """Volume ``index`` of the set described by ``spec``; independent of the other volumes."""
    w, h, l = spec.dims
    ext = np.array([l, h, w], dtype=np.float64)
    layout = np.random.default_rng([spec.layout_seed, _DATASET])
    sites = layout.uniform(0.2, 0.8, (spec.anchors, 3)) * ext
    body_center = layout.uniform(0.4, 0.6, 3) * ext
    body_radii = layout.uniform(0.3, 0.45, 3) * ext

    rng = np.random.default_rng([spec.seed, _VOLUME, index])
    grid = np.meshgrid(np.arange(l), np.arange(h), np.arange(w), indexing="ij")
    image = np.zeros((l, h, w))
    labels = np.zeros((l, h, w), dtype=np.int64)
    if spec.body:
        image[_ellipsoid(grid, body_center + rng.normal(0, spec.jitter, 3), body_radii)] = spec.body

    centers = [s + rng.normal(0, spec.jitter, 3) for s in sites]
    for _ in range(int(rng.integers(spec.blobs[0], spec.blobs[1] + 1))):
        centers.append(rng.uniform(0, 1, 3) * ext)
    lo, hi = spec.radius
    bands = spec.num_classes - 1
    for c in centers:
        r = rng.uniform(lo, hi)
        band = min(int((r - lo) / (hi - lo) * bands), bands - 1) if hi > lo else 0
        inside = _ellipsoid(grid, c, (r, r, r))
        image[inside] = 0.6 + 0.4 * band / max(bands - 1, 1)
        labels[inside] = band + 1

    if spec.smoothness:
        image = gaussian_filter(image, spec.smoothness)
    chans = []
    for ch in range(spec.channels):
        contrast = 1.0 - 0.5 * ch / spec.channels
        chans.append(contrast * image + (rng.normal(0, spec.noise_sd, image.shape) if spec.noise_sd else 0.0))
    return Volume(np.stack(chans).astype(np.float32)), labels


def synth_volumes(spec: SyntheticSpec) -> SyntheticSet:
    spec.validate()
    pairs = [synth_volume(spec, i) for i in range(spec.count)]
    return SyntheticSet([p[0] for p in pairs], [p[1] for p in pairs])


def load_directory(path) -> Tuple[List[str], List[Volume], List[Optional[np.ndarray]]]:
    """Volumes from ``<name>.json``/``<name>.f32`` pairs and ``*.nii`` files, sorted by name.

    An optional label volume ``<name>.label.json``/``.f32`` supplies masks.
    """
    root = Path(path)
    if not root.is_dir():
        raise FormatError(f"ingest error: {root} is not a directory")
    names, vols, masks = [], [], []
    try:
        for p in sorted(root.iterdir()):
            if p.suffix == ".nii":
                names.append(p.stem)
                vols.append(load_nifti1(p))
                masks.append(None)
            elif p.suffix == ".json" and not p.name.endswith(".label.json") and p.with_suffix(".f32").exists():
                names.append(p.stem)
                vols.append(load_raw(p, p.with_suffix(".f32")))
                lab = root / f"{p.stem}.label.json"
                masks.append(load_raw(lab, lab.with_suffix(".f32")).data[0].astype(np.int64) if lab.exists() else None)
    except FormatError as exc:
        raise FormatError(f"ingest error: {exc}") from exc
    if not vols:
        raise FormatError(f"ingest error: no volumes found in {root}")
    return names, vols, masks


def load_source(config: ExperimentConfig) -> SyntheticSet:
    if config.data.source == "synthetic":
        return synth_volumes(config.data.synthetic)
    _, vols, masks = load_directory(config.data.source)
    return SyntheticSet(vols, masks)


def split(n: int, holdout: int) -> Tuple[List[int], List[int]]:
    """Training and held-out indices; the trailing ``holdout`` volumes are held out."""
    if n <= holdout:
        raise ConfigError(f"{n} source volumes leave nothing to train on after a holdout of {holdout}")
    return list(range(n - holdout)), list(range(n - holdout, n))


# --- pretext pairs -------------------------------------------------------------

@dataclass
class PretextPair:
    x: Volume
    y: Volume
    record: DisarrangeRecord


def make_pair(volume: Volume, config: ExperimentConfig, seed: int) -> PretextPair:
    """Random crop, normalise, disarrange."""
    rng = np.random.default_rng(seed)
    crop, _ = random_crop(volume, config.crop, int(rng.integers(2 ** 63)))
    y = normalize(crop, config.normalize)
    params = DisarrangeParams(config.disarrange.side, config.disarrange.m, int(rng.integers(2 ** 63)))
    x, record = disarrange(y, params)
    return PretextPair(x, y, record)


def _pair_for(vols: List[Volume], indices: List[int], config: ExperimentConfig, *keys) -> PretextPair:
    seed = derive_seed(config.seed, *keys)
    pick = indices[int(np.random.default_rng(seed).integers(len(indices)))]
    return make_pair(vols[pick], config, derive_seed(seed, 0))


def eval_pairs(config: ExperimentConfig, source: Optional[SyntheticSet] = None) -> List[PretextPair]:
    """Fixed evaluation pairs drawn from the held-out volumes."""
    source = source or load_source(config)
    _, held = split(len(source.volumes), config.data.holdout)
    return [_pair_for(source.volumes, held, config, _EVAL, i) for i in range(config.pretrain.eval_pairs)]


def gen_pretext_dataset(config: ExperimentConfig, out_dir, per_volume: int = 1) -> List[str]:
    """Write ``pairs/<id>.{x.f32,y.f32,json,hdr.json}`` for every source volume; returns the ids."""
    config.validate()
    source = load_source(config)
    pairs_dir = Path(out_dir) / "pairs"
    pairs_dir.mkdir(parents=True, exist_ok=True)
    ids = []
    for i, vol in enumerate(source.volumes):
        for k in range(per_volume):
            pid = f"{i:05d}_{k:02d}"
            pair = make_pair(vol, config, derive_seed(config.seed, _PAIR, i, k))
            write_payload(pair.x, pairs_dir / f"{pid}.x.f32")
            write_payload(pair.y, pairs_dir / f"{pid}.y.f32")
            write_header(VolumeHeader.for_volume(pair.y), pairs_dir / f"{pid}.hdr.json")
            (pairs_dir / f"{pid}.json").write_text(pair.record.dumps())
            ids.append(pid)
    return ids


def load_pretext_dataset(root) -> List[PretextPair]:
    pairs_dir = Path(root) / "pairs"
    if not pairs_dir.is_dir():
        raise FormatError(f"ingest error: {pairs_dir} does not exist")
    out = []
    for rec_path in sorted(p for p in pairs_dir.glob("*.json") if not p.name.endswith(".hdr.json")):
        pid = rec_path.stem
        header = read_header(pairs_dir / f"{pid}.hdr.json")
        x = read_payload(header, pairs_dir / f"{pid}.x.f32")
        y = read_payload(header, pairs_dir / f"{pid}.y.f32")
        out.append(PretextPair(x, y, DisarrangeRecord.loads(rec_path.read_text())))
    if not out:
        raise FormatError(f"ingest error: no pairs in {pairs_dir}")
    return out


# --- reports -------------------------------------------------------------------

PRETRAIN_COLUMNS = ("step", "lr", "l1", "l2", "adv_d", "adv_g", "joint")
FINETUNE_COLUMNS = ("step", "cross_entropy")
SWEEP_COLUMNS = ("n", "m", "seed", "final_mse", "baseline_mse", "mse_ratio", "mean_dice")


@dataclass
class MetricsReport:
    kind: str
    seed: int
    config_digest: str
    columns: Tuple[str, ...]
    rows: List[dict] = field(default_factory=list)
    final_mse: Optional[float] = None
    baseline_mse: Optional[float] = None
    per_class_dice: List[float] = field(default_factory=list)
    mean_dice: Optional[float] = None
    wall_clock: float = 0.0

    def to_json(self) -> dict:
        """Everything except wall-clock time, which lives in the run manifest."""
        return {
            "kind": self.kind,
            "seed": self.seed,
            "config_digest": self.config_digest,
            "final_mse": self.final_mse,
            "baseline_mse": self.baseline_mse,
            "per_class_dice": self.per_class_dice,
            "mean_dice": self.mean_dice,
            "rows": len(self.rows),
        }

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(self.columns), lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: _fmt(row[k]) for k in self.columns})
        return buf.getvalue()

    def write(self, out_dir, stem: str) -> Tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
        csv_path.write_text(self.csv_text())
        json_path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        return csv_path, json_path


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else v


def version_string() -> str:
    """``git describe`` of the source tree when available, otherwise the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_manifest(out_dir, config: ExperimentConfig, command: str, wall_clock: float, extra: Optional[dict] = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config.to_dict(),
        "config_digest": config.digest(),
        "seed": config.seed,
        "version": version_string(),
        "wall_clock_s": round(wall_clock, 3),
    }
    if extra:
        manifest.update(extra)
    path = out / f"manifest_{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# --- pretraining ---------------------------------------------------------------

def generator_config(config: ExperimentConfig, channels: int) -> GeneratorConfig:
    return GeneratorConfig(
        in_channels=channels,
        out_channels=channels,
        depth=config.model.depth,
        base_channels=config.model.base_channels,
        residual=config.model.residual,
    )


def discriminator_config(config: ExperimentConfig, channels: int) -> DiscriminatorConfig:
    return DiscriminatorConfig(
        in_channels=2 * channels, widths=config.model.disc_widths, strides=config.model.disc_strides
    )


def learning_rate(base: float, schedule: str, step: int, steps: int) -> float:
    """Constant, or constant for the first half then linear decay towards zero."""
    if schedule == "constant" or steps <= 0:
        return base
    return base * min(1.0, 2.0 * (steps - step) / steps)


def _stack(pairs: List[PretextPair]):
    return np.stack([p.x.data for p in pairs]), np.stack([p.y.data for p in pairs])


def evaluate_restoration(restorer, pairs: Sequence[PretextPair]) -> Tuple[float, List[dict]]:
    """Mean ``l2_loss(y, restorer(x))`` over ``pairs`` and one row per pair.

    ``restorer`` is a :class:`Generator`, a :class:`Checkpoint`, or any
    callable taking ``(x: Volume, record)`` and returning an array or Volume.
    """
    if isinstance(restorer, Checkpoint):
        restorer = restorer.generator
    if isinstance(restorer, Generator):
        gen = restorer

        def restorer(x, _record):
            return gen(x.data[None])[0]

    rows = []
    for i, p in enumerate(pairs):
        pred = restorer(p.x, p.record)
        pred = pred.data if isinstance(pred, Volume) else np.asarray(pred)
        rows.append({"index": i, "mse": L.l2_loss(p.y.data, pred.reshape(p.y.data.shape))})
    if not rows:
        raise RubikError("empty evaluation set")
    return float(np.mean([r["mse"] for r in rows])), rows


def identity_restorer(x: Volume, _record) -> Volume:
    return x


def oracle_restorer(x: Volume, record: DisarrangeRecord) -> Volume:
    from .rubik import restore

    return restore(x, record)


def pretrain(config: ExperimentConfig, source: Optional[SyntheticSet] = None, out_dir=None) -> Tuple[Checkpoint, MetricsReport]:
    """Adversarial restoration pretraining on pairs generated on the fly.

    Pair ``(step, slot)`` is drawn from the training volumes with a seed derived
    from ``(seed, step, slot)``; the final MSE is measured on fixed pairs from the
    held-out volumes next to the identity baseline ``mean l2(y, x)``.
    """
    config.validate()
    started = time.perf_counter()
    source = source or load_source(config)
    train_idx, _ = split(len(source.volumes), config.data.holdout)
    channels = source.volumes[0].channels
    pc = config.pretrain
    # fail early on grids the crop cannot hold
    make_grid(config.crop, config.disarrange.side)

    G = Generator(generator_config(config, channels), seed=derive_seed(config.seed, _GEN))
    D = None
    if pc.adversarial:
        D = Discriminator(discriminator_config(config, channels), seed=derive_seed(config.seed, _DISC))
    g_opt = AdamState(lr=pc.lr)
    d_opt = AdamState(lr=pc.lr) if D is not None else None
    weights = L.LossWeights(lam=pc.lam, adversarial=1.0 if pc.adversarial else 0.0)
    report = MetricsReport("pretrain", config.seed, config.digest(), PRETRAIN_COLUMNS)

    for step in range(pc.steps):
        batch = [_pair_for(source.volumes, train_idx, config, _PAIR, step, slot) for slot in range(pc.batch)]
        x, y = _stack(batch)
        lr = learning_rate(pc.lr, pc.lr_schedule, step, pc.steps)
        g_opt.lr = lr
        if d_opt is not None:
            d_opt.lr = lr
        rep = gan_train_step(x, y, G, D, g_opt, d_opt, weights, pc.mode, pc.loss)
        row = {"step": step, "lr": lr, **rep.as_dict()}
        report.rows.append(row)
        if not all(math.isfinite(v) for v in rep.as_dict().values()):
            report.wall_clock = time.perf_counter() - started
            if out_dir is not None:
                report.write(out_dir, "pretrain")
            raise Diverged(report)

    pairs = eval_pairs(config, source)
    report.final_mse, _ = evaluate_restoration(G, pairs)
    report.baseline_mse, _ = evaluate_restoration(identity_restorer, pairs)
    report.wall_clock = time.perf_counter() - started
    ckpt = Checkpoint(
        G,
        D,
        g_opt,
        d_opt,
        rng_state={"seed": config.seed, "step": pc.steps},
        metadata={"stage": "pretrain", "config_digest": config.digest(),
                  "loss_digest": hashlib.sha256(report.csv_text().encode()).hexdigest()[:16]},
    )
    if out_dir is not None:
        report.write(out_dir, "pretrain")
        save_checkpoint(ckpt, Path(out_dir) / "pretrain.ckpt")
        write_manifest(out_dir, config, "pretrain", report.wall_clock)
    return ckpt, report


# --- fine-tuning ---------------------------------------------------------------

def labeled_subset(n_train: int, fraction: float, seed: int) -> List[int]:
    """First ``ceil(fraction * n_train)`` indices of a seeded shuffle."""
    order = np.random.default_rng(derive_seed(seed, _SPLIT)).permutation(n_train)
    k = max(1, math.ceil(fraction * n_train - 1e-9))
    return sorted(int(i) for i in order[:k])


def _seg_crop(volume: Volume, mask: np.ndarray, config: ExperimentConfig, seed: int):
    crop, origin = random_crop(volume, config.crop, seed)
    x0, y0, z0 = origin
    w, h, l = config.crop
    return normalize(crop, config.normalize).data, mask[z0:z0 + l, y0:y0 + h, x0:x0 + w]


def _eval_view(volume: Volume, mask: np.ndarray, factor: int):
    """Centre crop to the largest extent divisible by ``factor``."""
    dims = [d - d % factor for d in volume.dims]
    if min(dims) < factor:
        raise RubikError(f"held-out volume {volume.dims} too small for the network")
    origin = [(d - k) // 2 for d, k in zip(volume.dims, dims)]
    from .volume import crop as crop_volume

    v = crop_volume(volume, origin, dims)
    (x0, y0, z0), (w, h, l) = origin, dims
    return v, mask[z0:z0 + l, y0:y0 + h, x0:x0 + w]


def segmentation_model(config: ExperimentConfig, channels: int, num_classes: int,
                       checkpoint: Optional[Checkpoint] = None) -> Generator:
    """Head-swapped generator: pretrained when ``checkpoint`` is given, fresh otherwise.

    Both paths install the same head: one seeded random draw by default, or
    all zeros so that both start from uniform class probabilities.
    """
    expected = generator_config(config, channels)
    if checkpoint is None:
        base = Generator(expected, seed=derive_seed(config.seed, _GEN))
    else:
        got = checkpoint.generator.config
        if (got.in_channels, got.depth, got.base_channels) != (channels, expected.depth, expected.base_channels):
            raise RubikError(
                f"config mismatch: checkpoint generator {got.in_channels}ch depth {got.depth} base "
                f"{got.base_channels} vs data {channels}ch depth {expected.depth} base {expected.base_channels}"
            )
        base = checkpoint.generator
    model = replace_head(base, num_classes, seed=derive_seed(config.seed, _HEAD))
    if config.finetune.head_init == "zero":
        model.params["head.w"] = np.zeros_like(model.params["head.w"])
        model.params["head.b"] = np.zeros_like(model.params["head.b"])
    return model


def finetune(config: ExperimentConfig, checkpoint: Optional[Checkpoint] = None,
             source: Optional[SyntheticSet] = None, out_dir=None, tag: str = "finetune") -> MetricsReport:
    """Cross-entropy fine-tuning on the labeled fraction; dice on the held-out volumes.

    With ``class_weights: balanced`` each class is weighted by its inverse
    voxel frequency in the labeled volumes, so the small foreground classes
    are not drowned out by background.

    The labeled subset and the per-step crops depend only on the seed, so runs
    from scratch and from a checkpoint see identical data.
    """
    config.validate()
    started = time.perf_counter()
    source = source or load_source(config)
    if any(m is None for m in source.masks):
        raise FormatError("ingest error: segmentation needs a label volume for every source volume")
    train_idx, held_idx = split(len(source.volumes), config.data.holdout)
    chosen = [train_idx[i] for i in labeled_subset(len(train_idx), config.finetune.label_fraction, config.seed)]
    channels = source.volumes[0].channels
    num_classes = config.num_classes
    model = segmentation_model(config, channels, num_classes, checkpoint)
    weights = None
    if config.finetune.class_weights == "balanced":
        weights = L.balanced_class_weights([source.masks[i] for i in chosen], num_classes)
    opt = AdamState(lr=config.finetune.lr)
    report = MetricsReport("finetune", config.seed, config.digest(), FINETUNE_COLUMNS)

    for step in range(config.finetune.steps):
        xs, ys = [], []
        for slot in range(config.finetune.batch):
            seed = derive_seed(config.seed, _FINETUNE, step, slot)
            pick = chosen[int(np.random.default_rng(seed).integers(len(chosen)))]
            x, y = _seg_crop(source.volumes[pick], source.masks[pick], config, derive_seed(seed, 0))
            xs.append(x)
            ys.append(y)
        ce = segmentation_step(np.stack(xs), np.stack(ys), model, opt, weights)
        report.rows.append({"step": step, "cross_entropy": ce})
        if not math.isfinite(ce):
            raise Diverged(report)

    scores = []
    factor = 2 ** config.model.depth
    for i in held_idx:
        v, mask = _eval_view(source.volumes[i], source.masks[i], factor)
        pred = predict_labels(model, normalize(v, config.normalize).data[None])[0]
        scores.append(L.per_class_dice(pred, mask, num_classes))
    report.per_class_dice = [float(s) for s in np.mean(scores, axis=0)]
    report.mean_dice = float(np.mean(report.per_class_dice))
    report.wall_clock = time.perf_counter() - started
    if out_dir is not None:
        report.write(out_dir, tag)
        write_manifest(out_dir, config, tag, report.wall_clock,
                       {"labeled_volumes": chosen, "pretrained": checkpoint is not None,
                        "class_weights": None if weights is None else [float(w) for w in weights]})
    return report


# --- sweeps and comparisons ----------------------------------------------------

def difficulty_sweep(config: ExperimentConfig, n_values: Sequence[int], m_values: Sequence[int],
                     out_dir=None, source: Optional[SyntheticSet] = None, finetune_after: bool = True) -> MetricsReport:
    """One row per ``(n, m)``: pretrain with the fixed step budget, then fine-tune."""
    if not n_values or not m_values:
        raise ConfigError("sweep needs at least one n and one m")
    if len(set(n_values)) != len(n_values) or len(set(m_values)) != len(m_values):
        raise ConfigError("sweep values must be unique")
    started = time.perf_counter()
    source = source or load_source(config)
    report = MetricsReport("sweep", config.seed, config.digest(), SWEEP_COLUMNS)
    for n in n_values:
        for m in m_values:
            cell = replace(config, disarrange=DisarrangeConfig(side=(n, n, n), m=m))
            ckpt, pre = pretrain(cell, source)
            dice = finetune(cell, ckpt, source).mean_dice if finetune_after else None
            report.rows.append({
                "n": n,
                "m": m,
                "seed": config.seed,
                "final_mse": pre.final_mse,
                "baseline_mse": pre.baseline_mse,
                "mse_ratio": pre.final_mse / pre.baseline_mse if pre.baseline_mse else None,
                "mean_dice": dice,
            })
    report.wall_clock = time.perf_counter() - started
    if out_dir is not None:
        report.write(out_dir, "sweep")
        write_manifest(out_dir, config, "sweep", report.wall_clock, {"n_values": list(n_values), "m_values": list(m_values)})
    return report


def spearman(a: Sequence[float], b: Sequence[float]) -> float:
    from scipy.stats import spearmanr

    return float(spearmanr(a, b).statistic)


def compare_runs(a, b, out_path=None) -> dict:
    """Paired t-test summary of two equal-length lists of scores (or reports with ``mean_dice``)."""
    a = [r.mean_dice if isinstance(r, MetricsReport) else float(r) for r in a]
    b = [r.mean_dice if isinstance(r, MetricsReport) else float(r) for r in b]
    if len(a) != len(b):
        raise RubikError("compare_runs needs equally long lists")
    deltas = [x - y for x, y in zip(a, b)]
    summary = {
        "n": len(a),
        "mean_a": float(np.mean(a)) if a else None,
        "mean_b": float(np.mean(b)) if b else None,
        "mean_delta": float(np.mean(deltas)) if deltas else None,
        "deltas": deltas,
    }
    try:
        t, p, df = L.paired_t_statistic(a, b) if len(a) >= 2 else (None, None, None)
        if p is None:
            raise RubikError("degenerate test: need at least two pairs")
        summary.update({"t": t, "df": df, "p_value": p, "verdict": "significant" if p < 0.05 else "not significant"})
    except RubikError as exc:
        reason = "zero variance" if "variance" in str(exc) else "too few pairs"
        summary.update({"t": None, "df": None, "p_value": None, "verdict": f"not significant ({reason})"})
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
