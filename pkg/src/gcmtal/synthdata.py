"""Deterministic synthetic videos, proposals and features.

Each video has a dominant action class; ground-truth instances are placed
without overlap.  Proposals are ground truths with jittered boundaries
plus pure-background windows.  A unit feature is the overlap-weighted mix
of class prototypes (background prototype for the uncovered part) plus
a position term and Gaussian noise.  The extended feature is the same
quantity over :func:`gcmtal.heads.extend_interval` of the window.  The
noise has an isotropic part (``noise``) and a part confined to the span of
the prototypes (``confusion``); the latter makes classes confusable
per unit while leaving the cosine structure between units intact.
A third term (``progress``) lies along per-class directions orthogonal to
all prototypes.  Its coefficient is the covered share of the class times
the mean position of the covered part inside the window, scaled to
[-1, 1].  It vanishes when a class covers the window symmetrically (for
instance a window equal to its instance) and its sign tells on which side
of the window the instance sits.

File format (``save``/``load``), UTF-8 text, tab separated:

``units.txt``::

    #gcmtal-units<TAB>version=1<TAB>dim=<d><TAB>split=<s><TAB>stream=<name><TAB>classes=<C>
    <video_id> <id> <start> <end> <score|-> <label|-> <f1,f2,...> <e1,e2,...|->

``groundtruth.txt``::

    #gcmtal-groundtruth<TAB>version=1
    <video_id> <start> <end> <label>

Reals are written with ``repr`` (shortest round-trip form), so
``load(save(ds))`` reproduces every float bit for bit.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from gcmtal.core import ActionUnit, GroundTruthInstance, Interval, ValidationError, validate_unit

FORMAT_VERSION = 1
UNITS_FILE = "units.txt"
GT_FILE = "groundtruth.txt"

_SPLIT_CODE = {"train": 0, "test": 1}
_STREAM_CODE = {"rgb": 0, "flow": 1}


class ConfigError(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.line_no = line_no


class VersionError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    videos: int = 100
    split: str = "train"
    duration_min: float = 60.0
    duration_max: float = 150.0
    classes: int = 5
    instances_mean: float = 3.0
    instance_length_min: float = 4.0
    instance_length_max: float = 16.0
    dominant_class_prob: float = 0.8
    feature_dim: int = 32
    prototype_angle: float = 90.0  # degrees between class prototypes
    noise: float = 0.05  # isotropic per-coordinate std
    confusion: float = 0.6  # std of extra noise along each prototype direction
    progress: float = 1.0  # strength of the within-window position signal
    jitter: float = 0.2  # boundary shift, uniform in +-jitter * length
    jittered_per_gt: int = 6
    background_per_video: int = 10

    def validate(self):
        if self.classes < 2:
            raise ConfigError("classes must be >= 2")
        if self.feature_dim < 4 or self.feature_dim < 2 * self.classes + 2:
            raise ConfigError("feature_dim must be >= 4 and >= 2 * classes + 2")
        if min(self.noise, self.jitter, self.confusion, self.progress) < 0:
            raise ConfigError("noise, confusion, progress and jitter must be >= 0")
        if self.jitter >= 0.5:
            raise ConfigError("jitter must be < 0.5 so jittered proposals stay non-empty")
        if not 0 < self.prototype_angle <= 90:
            raise ConfigError("prototype_angle must lie in (0, 90]")
        if self.instance_length_max > self.duration_min:
            raise ConfigError("instances longer than the shortest video")
        if self.instance_length_min <= 0 or self.instance_length_min > self.instance_length_max:
            raise ConfigError("invalid instance length range")
        if self.duration_min > self.duration_max:
            raise ConfigError("invalid duration range")
        if self.split not in _SPLIT_CODE:
            raise ConfigError(f"split must be one of {sorted(_SPLIT_CODE)}")
        if self.videos < 0 or self.jittered_per_gt < 1 or self.background_per_video < 0:
            raise ConfigError("counts must be non-negative (jittered_per_gt >= 1)")


@dataclass(eq=False)
class Dataset:
    units: dict = field(default_factory=dict)  # video_id -> list[ActionUnit]
    ground_truths: dict = field(default_factory=dict)  # video_id -> list[GroundTruthInstance]
    split: str = "train"
    feature_dim: int = 0
    num_classes: int = 0
    stream: str = "rgb"

    @property
    def video_ids(self) -> list[str]:
        return list(self.units)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            (self.split, self.feature_dim, self.num_classes, self.stream)
            == (other.split, other.feature_dim, other.num_classes, other.stream)
            and list(self.units) == list(other.units)
            and all(self.units[v] == other.units[v] for v in self.units)
            and list(self.ground_truths) == list(other.ground_truths)
            and all(self.ground_truths[v] == other.ground_truths[v] for v in self.ground_truths)
        )


def _basis(cfg, stream):
    rng = np.random.default_rng([cfg.seed, 7919, _STREAM_CODE.get(stream, 2)])
    basis, _ = np.linalg.qr(rng.normal(size=(cfg.feature_dim, 2 * cfg.classes + 2)))
    return basis


def prototypes(cfg: SynthConfig, stream: str = "rgb") -> np.ndarray:
    """Rows 0..C: background then class prototypes, unit norm, pairwise angle ``prototype_angle``."""
    basis = _basis(cfg, stream)
    cos = math.cos(math.radians(cfg.prototype_angle))
    shared = basis[:, cfg.classes + 1]
    return np.stack([math.sqrt(cos) * shared + math.sqrt(1 - cos) * basis[:, c]
                     for c in range(cfg.classes + 1)])


def progress_directions(cfg: SynthConfig, stream: str = "rgb") -> np.ndarray:
    """Rows 0..C, orthogonal to every prototype; row 0 (background) is zero.

    A window's feature carries ``row_c`` scaled by where inside the window
    class c is present (-1 at the left edge, +1 at the right), so pooled
    features still tell on which side of a window an action lies.
    """
    basis = _basis(cfg, stream)
    out = np.zeros((cfg.classes + 1, cfg.feature_dim))
    out[1:] = basis[:, cfg.classes + 2:].T
    return out


def _place_instances(rng, cfg, duration):
    k = max(1, int(rng.poisson(cfg.instances_mean)))
    dominant = int(rng.integers(1, cfg.classes + 1))
    out = []
    for _ in range(k):
        for _attempt in range(50):
            length = rng.uniform(cfg.instance_length_min, cfg.instance_length_max)
            start = rng.uniform(0.0, duration - length)
            end = start + length
            # keep a gap of a quarter length so ground truths never touch
            if all(end + length / 4 < s or start - length / 4 > e for s, e, _ in out):
                if rng.random() < cfg.dominant_class_prob:
                    label = dominant
                else:
                    label = int(rng.integers(1, cfg.classes + 1))
                out.append((start, end, label))
                break
    out.sort()
    return out


def _window_weights(s, e, gts, classes):
    """Fraction of [s, e] covered by each class (index 0 = background) and,
    per class, the integral of ``2 * (t - s) / (e - s) - 1`` over the covered
    part divided by ``e - s``."""
    w = np.zeros(classes + 1)
    ph = np.zeros(classes + 1)
    length = e - s
    for gs, ge, label in gts:
        a, b = max(s, gs), min(e, ge)
        if b <= a:
            continue
        w[label] += (b - a) / length
        # factored so that a == s, b == e gives exactly zero
        ph[label] += (b - a) * ((b - s) + (a - s) - length) / (length * length)
    w[0] = max(0.0, 1.0 - w[1:].sum())
    return w, ph


def _background_windows(rng, cfg, duration, gts):
    out = []
    for _ in range(cfg.background_per_video):
        for _attempt in range(50):
            length = rng.uniform(cfg.instance_length_min, cfg.instance_length_max)
            start = rng.uniform(0.0, duration - length)
            end = start + length
            if all(end <= gs or start >= ge for gs, ge, _ in gts):
                out.append((start, end))
                break
    return out


def _noisy(clean, protos, rng, cfg):
    iso = rng.normal(0.0, cfg.noise, cfg.feature_dim)
    conf = rng.normal(0.0, cfg.confusion, protos.shape[0]) @ protos
    return clean + iso + conf


def generate(cfg: SynthConfig = SynthConfig(), stream: str = "rgb") -> Dataset:
    """Generate one split of one feature stream; fully determined by the config.

    Intervals and labels depend only on ``(seed, split)``; ``stream`` selects
    the prototype basis and the feature noise, so ``"rgb"`` and ``"flow"``
    share proposals and differ in features.
    """
    cfg.validate()
    protos = prototypes(cfg, stream)
    prog = cfg.progress * progress_directions(cfg, stream)
    split_code = _SPLIT_CODE[cfg.split]
    stream_code = _STREAM_CODE.get(stream, 2)
    ds = Dataset(split=cfg.split, feature_dim=cfg.feature_dim, num_classes=cfg.classes,
                 stream=stream)
    for v in range(cfg.videos):
        vid = f"{cfg.split}_{v:05d}"
        rng = np.random.default_rng([cfg.seed, split_code, v])
        duration = rng.uniform(cfg.duration_min, cfg.duration_max)
        gts = _place_instances(rng, cfg, duration)
        windows = []
        for gs, ge, label in gts:
            length = ge - gs
            for _ in range(cfg.jittered_per_gt):
                ds_, de_ = rng.uniform(-cfg.jitter, cfg.jitter, 2) * length
                s, e = max(0.0, gs + ds_), min(duration, ge + de_)
                windows.append((s, e, label))
        windows += [(s, e, None) for s, e in _background_windows(rng, cfg, duration, gts)]
        frng = np.random.default_rng([cfg.seed, split_code, v, 1000 + stream_code])
        units = []
        for uid, (s, e, label) in enumerate(windows):
            w, ph = _window_weights(s, e, gts, cfg.classes)
            feat = _noisy(w @ protos + ph @ prog, protos, frng, cfg)
            xs, xe = max(0.0, s - (e - s) / 2.0), e + (e - s) / 2.0
            w_ext, ph_ext = _window_weights(xs, xe, gts, cfg.classes)
            ext = _noisy(w_ext @ protos + ph_ext @ prog, protos, frng, cfg)
            units.append(ActionUnit(uid, vid, Interval(s, e), feat, ext, None, label))
        ds.units[vid] = units
        ds.ground_truths[vid] = [GroundTruthInstance(vid, Interval(s, e), label)
                                 for s, e, label in gts]
    return ds


def generate_streams(cfg: SynthConfig = SynthConfig(), streams=("rgb", "flow")) -> dict:
    return {s: generate(cfg, s) for s in streams}


# ---------------------------------------------------------------------------
# serialization


def _fmt(x) -> str:
    return repr(float(x))


def _fmt_vec(v) -> str:
    return ",".join(repr(float(x)) for x in v)


def save(ds: Dataset, path) -> None:
    os.makedirs(path, exist_ok=True)
    header = (f"#gcmtal-units\tversion={FORMAT_VERSION}\tdim={ds.feature_dim}\tsplit={ds.split}"
              f"\tstream={ds.stream}\tclasses={ds.num_classes}\n")
    with open(os.path.join(path, UNITS_FILE), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header)
        for vid, units in ds.units.items():
            for u in units:
                fh.write("\t".join([
                    vid, str(u.id), _fmt(u.interval.start), _fmt(u.interval.end),
                    "-" if u.score is None else _fmt(u.score),
                    "-" if u.label is None else str(u.label),
                    _fmt_vec(u.feature),
                    "-" if u.extended_feature is None else _fmt_vec(u.extended_feature),
                ]) + "\n")
    with open(os.path.join(path, GT_FILE), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"#gcmtal-groundtruth\tversion={FORMAT_VERSION}\n")
        for vid, gts in ds.ground_truths.items():
            for g in gts:
                fh.write(f"{vid}\t{_fmt(g.interval.start)}\t{_fmt(g.interval.end)}\t{g.label}\n")


def _header(line, path, magic):
    parts = line.rstrip("\n").split("\t")
    if not parts or parts[0] != magic:
        raise ParseError(path, 1, f"missing {magic} header")
    fields = {}
    for p in parts[1:]:
        if "=" not in p:
            raise ParseError(path, 1, f"bad header field {p!r}")
        k, v = p.split("=", 1)
        fields[k] = v
    if fields.get("version") != str(FORMAT_VERSION):
        raise VersionError(f"{path}: unsupported version {fields.get('version')!r}, "
                           f"expected {FORMAT_VERSION}")
    return fields


def _vec(text, path, no, dim):
    try:
        arr = np.array([float(x) for x in text.split(",")])
    except ValueError:
        raise ParseError(path, no, "non-numeric feature value")
    if arr.shape[0] != dim:
        raise ParseError(path, no, f"feature has {arr.shape[0]} values, header says {dim}")
    return arr


def load(path) -> Dataset:
    upath = os.path.join(path, UNITS_FILE)
    gpath = os.path.join(path, GT_FILE)
    with open(upath, encoding="utf-8") as fh:
        lines = fh.readlines()
    if not lines:
        raise ParseError(upath, 1, "empty file")
    head = _header(lines[0], upath, "#gcmtal-units")
    try:
        dim = int(head["dim"])
        classes = int(head.get("classes", 0))
    except (KeyError, ValueError):
        raise ParseError(upath, 1, "header lacks an integer dim")
    ds = Dataset(split=head.get("split", "train"), feature_dim=dim, num_classes=classes,
                 stream=head.get("stream", "rgb"))
    for no, line in enumerate(lines[1:], start=2):
        if not line.endswith("\n"):
            raise ParseError(upath, no, "truncated record (no line terminator)")
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 8:
            raise ParseError(upath, no, f"expected 8 fields, found {len(parts)}")
        vid, uid, s, e, score, label, feat, ext = parts
        try:
            interval = Interval(float(s), float(e))
            unit = ActionUnit(
                int(uid), vid, interval, _vec(feat, upath, no, dim),
                None if ext == "-" else _vec(ext, upath, no, dim),
                None if score == "-" else float(score),
                None if label == "-" else int(label),
            )
            validate_unit(unit, dim)
        except ValidationError as err:
            raise ParseError(upath, no, str(err))
        except ValueError as err:
            if isinstance(err, ParseError):
                raise
            raise ParseError(upath, no, str(err))
        ds.units.setdefault(vid, []).append(unit)
    with open(gpath, encoding="utf-8") as fh:
        glines = fh.readlines()
    if not glines:
        raise ParseError(gpath, 1, "empty file")
    _header(glines[0], gpath, "#gcmtal-groundtruth")
    for vid in ds.units:
        ds.ground_truths[vid] = []
    for no, line in enumerate(glines[1:], start=2):
        if not line.endswith("\n"):
            raise ParseError(gpath, no, "truncated record (no line terminator)")
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 4:
            raise ParseError(gpath, no, f"expected 4 fields, found {len(parts)}")
        try:
            g = GroundTruthInstance(parts[0], Interval(float(parts[1]), float(parts[2])),
                                    int(parts[3]))
        except ValueError as err:
            raise ParseError(gpath, no, str(err))
        ds.ground_truths.setdefault(parts[0], []).append(g)
    return ds


def expected_jitter_tiou(jitter: float) -> float:
    """Mean tIoU between an interval and its boundary-jittered copy.

    Both boundaries move by independent ``U(-j, j) * length`` shifts; the
    value is scale free and is obtained by 2-D quadrature.
    """
    from scipy import integrate

    if jitter == 0:
        return 1.0

    def iou(a, b):
        s, e = a, 1.0 + b
        inter = max(0.0, min(1.0, e) - max(0.0, s))
        return inter / (1.0 + (e - s) - inter)

    j = jitter
    # the integrand has kinks on a = 0 and b = 0: integrate the quadrants separately
    total = 0.0
    for a0, a1 in ((-j, 0.0), (0.0, j)):
        for b0, b1 in ((-j, 0.0), (0.0, j)):
            val, _ = integrate.dblquad(lambda b, a: iou(a, b), a0, a1, b0, b1,
                                       epsabs=1e-10, epsrel=1e-10)
            total += val
    return total / (4 * j * j)
