"""Synthetic scenes, endmember libraries, file formats and evaluation metrics.

Cube container
--------------
A dataset is a pair of files: a JSON sidecar and a raw payload. The payload
holds little-endian float32 values: the cube in band-interleaved-by-pixel
order (``h x w x L``, band fastest), optionally followed by ground-truth
abundances (``h x w x R``) and endmembers (``L x R``, row-major). The sidecar
records ``height``, ``width``, ``bands``, the payload file name, optional
``endmembers_count`` with byte offsets of the ground-truth blocks, ``seed``
and ``creator``.

Checkpoint
----------
An uncompressed ``.npz`` archive with one ``param/<name>`` entry per
parameter tensor, optional ``buffer/<name>`` entries, a ``format_version``
scalar, a ``config_hash`` string and a ``meta`` JSON string.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import math
import os
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.optimize import linear_sum_assignment

from . import __version__
from .errors import ConfigError, DimensionError, DomainError, FormatError, SchemaError
from .tensor import make_rng, mode3_product

CUBE_FORMAT = "deq-unmix-cube"
CHECKPOINT_VERSION = 1
_F32 = np.dtype("<f4")


# ---------------------------------------------------------------------------
# endmember libraries
# ---------------------------------------------------------------------------

# (center um, width um, amplitude) triples per material; baselines separate
_MATERIALS = {
    "soil": (0.30, [(0.9, 0.35, 0.15), (1.7, 0.5, 0.10), (2.2, 0.08, -0.06)]),
    "vegetation": (0.05, [(0.55, 0.04, 0.08), (0.85, 0.15, 0.45), (1.25, 0.2, 0.25), (1.65, 0.15, 0.15), (1.45, 0.05, -0.12)]),
    "water": (0.02, [(0.45, 0.1, 0.06), (0.6, 0.15, 0.02)]),
    "road": (0.12, [(1.0, 0.8, 0.10), (2.3, 0.1, -0.03)]),
    "roof": (0.20, [(0.6, 0.1, 0.25), (1.6, 0.6, 0.15), (0.95, 0.05, -0.08)]),
    "clay": (0.40, [(1.3, 0.6, 0.20), (1.4, 0.03, -0.12), (2.2, 0.04, -0.20), (1.9, 0.05, -0.15)]),
    "snow": (0.15, [(0.5, 0.4, 0.75), (1.05, 0.1, 0.2), (1.5, 0.1, -0.1)]),
    "mineral": (0.25, [(0.7, 0.1, 0.2), (1.0, 0.2, -0.1), (2.0, 0.3, 0.25), (2.33, 0.05, -0.1)]),
}


def builtin_library(bands=224, lo=0.4, hi=2.5):
    """Eight smooth synthetic reflectance spectra sampled at ``bands`` wavelengths.

    Returns ``(names, matrix)`` with ``matrix`` of shape ``(bands, 8)`` in [0, 1].
    """
    wl = np.linspace(lo, hi, bands)
    names = list(_MATERIALS)
    cols = []
    for name in names:
        base, bumps = _MATERIALS[name]
        s = np.full(bands, base)
        for c, width, amp in bumps:
            s += amp * np.exp(-0.5 * ((wl - c) / width) ** 2)
        cols.append(np.clip(s, 0.01, 1.0))
    return names, np.stack(cols, axis=1)


def read_library_csv(path):
    """Read an endmember library: header row of names, one column per material."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty library file")
    names = [n.strip() for n in rows[0]]
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric reflectance ({exc})") from None
    if data.ndim != 2 or data.shape[1] != len(names):
        raise FormatError(f"{path}: expected {len(names)} columns per row")
    return names, data


def write_library_csv(path, names, matrix):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(names)
        for row in np.asarray(matrix):
            wr.writerow([repr(float(v)) for v in row])


def packaged_library():
    """The shipped 224-band library CSV."""
    with resources.as_file(resources.files("deq_unmix").joinpath("library.csv")) as p:
        return read_library_csv(p)


def resample_library(matrix, bands):
    """Linearly resample library columns to ``bands`` equally spaced samples."""
    src = np.linspace(0.0, 1.0, matrix.shape[0])
    dst = np.linspace(0.0, 1.0, bands)
    return np.stack([np.interp(dst, src, matrix[:, k]) for k in range(matrix.shape[1])], axis=1)


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

@dataclass
class SceneSpec:
    h: int = 100
    w: int = 100
    L: int = 224
    R: int = 6
    library: str | None = None
    corr_length: float = 10.0
    cap: float = 0.85
    snr_db: float = 30.0
    seed: int = 0
    contrast: float = 3.0

    def validate(self):
        if min(self.h, self.w, self.L, self.R) < 1:
            raise ConfigError("scene extents must be positive")
        if self.R > self.L:
            raise ConfigError(f"R={self.R} exceeds the band count L={self.L}")
        if not (1.0 / self.R < self.cap <= 1.0):
            raise ConfigError(f"abundance cap {self.cap} is infeasible for R={self.R} (needs 1/R < cap <= 1)")
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise ConfigError("SNR must be a number or +inf")
        if self.corr_length <= 0:
            raise ConfigError("correlation length must be positive")


@dataclass
class Dataset:
    y: np.ndarray
    abundances: np.ndarray | None = None
    endmembers: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.abundances is not None and self.abundances.shape[:2] != self.y.shape[:2]:
            raise DimensionError("ground-truth abundances do not match the cube extents")
        if self.endmembers is not None:
            if self.endmembers.shape[0] != self.y.shape[2]:
                raise DimensionError("ground-truth endmembers do not match the band count")
            if self.abundances is not None and self.abundances.shape[2] != self.endmembers.shape[1]:
                raise DimensionError("ground-truth abundances and endmembers disagree on R")

    @property
    def has_ground_truth(self):
        return self.abundances is not None and self.endmembers is not None

    @property
    def clean(self):
        return mode3_product(self.abundances.astype(float), self.endmembers.astype(float))


def cap_abundances(a, cap):
    """Clip entries above ``cap`` and hand the excess to the other materials in proportion."""
    a = np.array(a, dtype=float)
    shape = a.shape
    a = a.reshape(-1, shape[-1])
    for _ in range(100):
        over = a > cap
        if not over.any():
            break
        excess = np.sum(np.where(over, a - cap, 0.0), axis=1, keepdims=True)
        a = np.where(over, cap, a)
        free = a < cap
        mass = np.sum(np.where(free, a, 0.0), axis=1, keepdims=True)
        share = np.where(free, a / np.where(mass > 0, mass, 1.0), 0.0)
        a = a + excess * share
        # pin entries that landed within rounding of the cap
        a = np.where(np.abs(a - cap) < 1e-15, cap, a)
    return a.reshape(shape)


def synth_scene(spec: SceneSpec) -> Dataset:
    """Generate a scene with smooth, capped abundance maps and Gaussian noise."""
    spec.validate()
    if spec.library is None:
        names, lib = builtin_library(spec.L)
    else:
        names, lib = read_library_csv(spec.library)
        if lib.shape[0] != spec.L:
            lib = resample_library(lib, spec.L)
    if spec.R > lib.shape[1]:
        raise ConfigError(f"library has {lib.shape[1]} materials, {spec.R} requested")
    pick_rng = make_rng(spec.seed, 0)
    cols = np.sort(pick_rng.choice(lib.shape[1], size=spec.R, replace=False))
    M = lib[:, cols]

    field_rng = make_rng(spec.seed, 1)
    fields = np.empty((spec.R, spec.h, spec.w))
    for r in range(spec.R):
        f = gaussian_filter(field_rng.standard_normal((spec.h, spec.w)), spec.corr_length, mode="wrap")
        f -= f.mean()
        sd = f.std()
        fields[r] = f / sd if sd > 0 else f
    logits = spec.contrast * fields.transpose(1, 2, 0)
    logits -= logits.max(axis=-1, keepdims=True)
    A = np.exp(logits)
    A /= A.sum(axis=-1, keepdims=True)
    A = cap_abundances(A, spec.cap)

    clean = mode3_product(A, M)
    if math.isinf(spec.snr_db):
        y = clean.copy()
    else:
        sigma2 = float(np.sum(clean ** 2)) / (clean.size * 10.0 ** (spec.snr_db / 10.0))
        y = clean + math.sqrt(sigma2) * make_rng(spec.seed, 2).standard_normal(clean.shape)
    meta = {"seed": spec.seed, "snr_db": spec.snr_db, "cap": spec.cap,
            "corr_length": spec.corr_length, "materials": [names[c] for c in cols]}
    return Dataset(y, A, M, meta)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    armse: float
    msad: float
    sad_per_endmember: list
    permutation: list

    def to_dict(self):
        return {"aRMSE": self.armse, "mSAD": self.msad,
                "SAD_per_endmember": self.sad_per_endmember, "permutation": self.permutation}


def spectral_angle(u, v):
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise DomainError("spectral angle of a zero-norm vector")
    # half-angle form: exact zero for parallel vectors, unlike arccos near 1
    du, dv = u / nu, v / nv
    return float(2.0 * math.atan2(np.linalg.norm(du - dv), np.linalg.norm(du + dv)))


def align_endmembers(m_est, m_gt):
    """Permutation ``p`` minimizing ``sum_j SAD(m_est[:, p[j]], m_gt[:, j])``."""
    R = m_gt.shape[1]
    if m_est.shape[1] != R:
        raise DimensionError(f"estimated R={m_est.shape[1]} differs from ground truth R={R}")
    for mat, which in ((m_est, "estimated"), (m_gt, "ground-truth")):
        norms = np.linalg.norm(mat, axis=0)
        if np.any(norms == 0):
            raise DomainError(f"{which} endmember column {int(np.argmin(norms))} has zero norm")
    cost = np.array([[spectral_angle(m_est[:, i], m_gt[:, j]) for j in range(R)] for i in range(R)])
    if R <= 8:
        best, best_cost = None, math.inf
        for perm in itertools.permutations(range(R)):
            c = sum(cost[perm[j], j] for j in range(R))
            if c < best_cost - 1e-15:
                best, best_cost = perm, c
        return list(best)
    rows, cols = linear_sum_assignment(cost)
    perm = [0] * R
    for i, j in zip(rows, cols):
        perm[j] = int(i)
    return perm


def metrics(a_est, m_est, a_gt, m_gt) -> MetricReport:
    """aRMSE and mSAD after aligning estimated endmembers to the ground truth."""
    a_est = np.asarray(a_est, dtype=float)
    m_est = np.asarray(m_est, dtype=float)
    a_gt = np.asarray(a_gt, dtype=float)
    m_gt = np.asarray(m_gt, dtype=float)
    perm = align_endmembers(m_est, m_gt)
    a_al = a_est[..., perm]
    m_al = m_est[:, perm]
    if a_al.shape != a_gt.shape:
        raise DimensionError(f"abundance shapes differ: {a_al.shape} vs {a_gt.shape}")
    N = a_gt.shape[0] * a_gt.shape[1]
    R = a_gt.shape[2]
    armse = math.sqrt(float(np.sum((a_al - a_gt) ** 2)) / (N * R))
    sads = [spectral_angle(m_al[:, r], m_gt[:, r]) for r in range(R)]
    return MetricReport(armse, float(np.mean(sads)), sads, [int(p) for p in perm])


# ---------------------------------------------------------------------------
# cube container
# ---------------------------------------------------------------------------

def _sidecar_paths(path):
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    return path, path.with_suffix(".raw")


def write_cube(path, ds: Dataset, seed=None):
    """Write ``ds`` as a raw float32 payload plus JSON sidecar; returns the sidecar path."""
    side, raw = _sidecar_paths(path)
    h, w, L = ds.y.shape
    blocks = [np.ascontiguousarray(ds.y, dtype=_F32)]
    header = {
        "format": CUBE_FORMAT, "height": h, "width": w, "bands": L,
        "dtype": "<f4", "interleave": "bip", "payload": raw.name,
        "seed": seed if seed is not None else ds.meta.get("seed"),
        "creator": f"deq_unmix {__version__}",
        "meta": ds.meta,
    }
    offset = blocks[0].nbytes
    if ds.has_ground_truth:
        R = ds.endmembers.shape[1]
        header["endmembers_count"] = R
        header["abundances_offset"] = offset
        blocks.append(np.ascontiguousarray(ds.abundances, dtype=_F32))
        offset += blocks[-1].nbytes
        header["endmembers_offset"] = offset
        blocks.append(np.ascontiguousarray(ds.endmembers, dtype=_F32))
    side.parent.mkdir(parents=True, exist_ok=True)
    with open(raw, "wb") as fh:
        for b in blocks:
            fh.write(b.tobytes())
    with open(side, "w") as fh:
        json.dump(header, fh, indent=2, default=_json_default)
    return side


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o)}")


def read_cube(path) -> Dataset:
    """Load a dataset written by :func:`write_cube`; arrays come back as float32."""
    side, _ = _sidecar_paths(path)
    try:
        with open(side) as fh:
            header = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{side}: invalid JSON ({exc})") from None
    for key in ("height", "width", "bands"):
        if key not in header:
            raise SchemaError(f"{side}: sidecar is missing required field '{key}'")
    h, w, L = int(header["height"]), int(header["width"]), int(header["bands"])
    raw = side.parent / header.get("payload", side.with_suffix(".raw").name)
    R = header.get("endmembers_count")
    expected = 4 * h * w * L
    if R is not None:
        R = int(R)
        for key in ("abundances_offset", "endmembers_offset"):
            if key not in header:
                raise SchemaError(f"{side}: sidecar declares ground truth but is missing '{key}'")
        expected += 4 * (h * w * R + L * R)
    found = os.path.getsize(raw) if raw.exists() else 0
    if found != expected:
        raise FormatError(f"{raw}: payload size mismatch, expected {expected} bytes, found {found}")
    buf = raw.read_bytes()
    y = np.frombuffer(buf, dtype=_F32, count=h * w * L).reshape(h, w, L).copy()
    a = m = None
    if R is not None:
        ao, mo = int(header["abundances_offset"]), int(header["endmembers_offset"])
        a = np.frombuffer(buf, dtype=_F32, count=h * w * R, offset=ao).reshape(h, w, R).copy()
        m = np.frombuffer(buf, dtype=_F32, count=L * R, offset=mo).reshape(L, R).copy()
    meta = dict(header.get("meta") or {})
    meta.setdefault("seed", header.get("seed"))
    return Dataset(y, a, m, meta)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, params: dict, config: dict | None = None, buffers: dict | None = None,
                    meta: dict | None = None):
    """Write every parameter tensor bit-exactly, with a version tag and config hash."""
    arrays = {f"param/{k}": np.asarray(v) for k, v in params.items()}
    for k, v in (buffers or {}).items():
        arrays[f"buffer/{k}"] = np.asarray(v)
    arrays["format_version"] = np.asarray(CHECKPOINT_VERSION)
    arrays["config_hash"] = np.asarray(config_hash(config or {}))
    arrays["meta"] = np.asarray(json.dumps(meta or {}, default=_json_default))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


@dataclass
class Checkpoint:
    params: dict
    buffers: dict
    config_hash: str
    meta: dict


def load_checkpoint(path, template: dict | None = None, config: dict | None = None) -> Checkpoint:
    """Read a checkpoint; optionally verify shapes against ``template`` and the config hash."""
    with np.load(path, allow_pickle=False) as z:
        if "format_version" not in z.files:
            raise SchemaError(f"{path}: missing format_version")
        version = int(z["format_version"])
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        params = {k[6:]: z[k] for k in z.files if k.startswith("param/")}
        buffers = {k[7:]: z[k] for k in z.files if k.startswith("buffer/")}
        stored_hash = str(z["config_hash"])
        meta = json.loads(str(z["meta"])) if "meta" in z.files else {}
    if template is not None:
        missing = set(template) ^ set(params)
        if missing:
            raise DimensionError(f"{path}: parameter names differ from the model: {sorted(missing)}")
        for k, v in template.items():
            if np.shape(v) != params[k].shape:
                raise DimensionError(f"{path}: parameter '{k}' has shape {params[k].shape}, model expects {np.shape(v)}")
    if config is not None:
        h = config_hash(config)
        if h != stored_hash:
            warnings.warn(f"config hash mismatch: checkpoint {stored_hash}, current {h}", stacklevel=2)
    return Checkpoint(params, buffers, stored_hash, meta)
