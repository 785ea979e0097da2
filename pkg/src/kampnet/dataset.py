"""Synthetic chest phantoms, KVOL volume files, and network-input preparation.

A phantom is an axial CT stack with a body outline, subcutaneous fat ring,
two lungs (with emphysema holes), a heart with pericardial fat, a vertebra
and, optionally, spherical coronary calcifications. Deceased subjects get
more / larger / brighter calcification and more emphysema, and their clinical
measurements are drawn from shifted distributions; every shift is an
explicit effect size so a null dataset is one flag away.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import hu_coding

logger = logging.getLogger(__name__)

KVOL_MAGIC = b"KVOL0001"
CLINICAL_COLUMNS = ("subject_id", "cac_risk", "emphysema_severity", "muscle_mass", "fat_attenuation", "label")
CLINICAL_FEATURES = CLINICAL_COLUMNS[1:5]
FULL_SLICE = 512
FULL_ROI = 161
DECEASED, SURVIVED = 0, 1


class VolumeFormatError(ValueError):
    pass


class MagicMismatchError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class ExtentMismatchError(VolumeFormatError):
    pass


class MetadataError(ValueError):
    pass


@dataclass
class PhantomSpec:
    """Everything that determines a synthetic cohort.

    Effect sizes are added for deceased subjects only; setting all of them to
    zero (see :meth:`null`) gives label-independent data. Clinical effects are
    in units of the measurement's standard deviation.
    """

    seed: int = 0
    subjects: int = 180
    size: int = 128
    depth: int = 12
    noise_hu: float = 20.0
    # calcification (radius as a fraction of the slice extent)
    calc_prob: float = 0.3
    calc_prob_effect: float = 0.5
    calc_radius: float = 0.012
    calc_radius_effect: float = 0.008
    calc_hu: tuple = (320.0, 520.0)
    calc_hu_effect: float = 200.0
    # emphysema holes per unit lung area (fraction of slice area)
    emphysema_density: float = 60.0
    emphysema_effect: float = 60.0
    fat_ring: float = 0.05
    # clinical effect sizes (d') per measurement
    cac_effect: float = 0.55
    emphysema_severity_effect: float = 0.2
    muscle_effect: float = 0.5
    fat_effect: float = 0.5

    def __post_init__(self):
        self.calc_hu = tuple(self.calc_hu)
        if self.subjects < 2 or self.subjects % 2:
            raise ValueError("subject count must be even and >= 2 (classes are balanced)")
        if self.size < 32 or self.depth < 3:
            raise ValueError("slices must be at least 32x32 and volumes at least 3 slices deep")
        effects = [self.calc_prob_effect, self.calc_radius_effect, self.calc_hu_effect, self.emphysema_effect,
                   self.cac_effect, self.emphysema_severity_effect, self.muscle_effect, self.fat_effect]
        if min(effects) < 0:
            raise ValueError("effect sizes must be non-negative")
        lo, hi = self.calc_hu
        if not 300 <= lo <= hi <= 1000 or hi + self.calc_hu_effect > 1000 + 1e-9:
            raise ValueError("calcification HU must stay within [300, 1000]")

    def null(self) -> "PhantomSpec":
        d = asdict(self)
        for k in ("calc_prob_effect", "calc_radius_effect", "calc_hu_effect", "emphysema_effect",
                  "cac_effect", "emphysema_severity_effect", "muscle_effect", "fat_effect"):
            d[k] = 0.0
        return PhantomSpec(**d)

    @property
    def roi_size(self) -> int:
        return max(8, int(round(self.size * FULL_ROI / FULL_SLICE)))


@dataclass
class Volume:
    """int16 HU voxels shaped (nz, ny, nx) plus sidecar metadata."""

    voxels: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def dims(self):
        nz, ny, nx = self.voxels.shape
        return nx, ny, nz

    @property
    def label(self) -> int:
        return int(self.meta["label"])

    @property
    def subject_id(self) -> str:
        return str(self.meta["subject_id"])

    def validate(self) -> None:
        m = self.meta
        for key in ("subject_id", "label", "selected_slices", "roi", "clinical"):
            if key not in m:
                raise MetadataError(f"missing metadata field {key!r}")
        nx, ny, nz = self.dims
        if list(m.get("dims", [nx, ny, nz])) != [nx, ny, nz]:
            raise ExtentMismatchError(f"metadata dims {m['dims']} disagree with voxel extent {[nx, ny, nz]}")
        if m["label"] not in (0, 1):
            raise MetadataError(f"label must be 0 or 1, got {m['label']!r}")
        zs = list(m["selected_slices"])
        if len(zs) != 3 or any(b - a != 1 for a, b in zip(zs, zs[1:])):
            raise MetadataError(f"selected_slices must be 3 consecutive indices, got {zs}")
        if zs[0] < 0 or zs[-1] >= nz:
            raise MetadataError(f"selected_slices {zs} outside [0, {nz})")
        r = m["roi"]
        if r["w"] < 1 or r["h"] < 1 or r["x"] < 0 or r["y"] < 0 or r["x"] + r["w"] > nx or r["y"] + r["h"] > ny:
            raise MetadataError(f"roi {r} not inside the {nx}x{ny} slice")


# ------------------------------------------------------------------ phantoms

def _ellipse(xx, yy, cx, cy, rx, ry):
    return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0


def _draw_clinical(rng, label, spec: PhantomSpec):
    dead = label == DECEASED
    cac_latent = rng.normal(1.2 + (spec.cac_effect * 1.0 if dead else 0.0), 1.0)
    cac = int(np.clip(np.floor(cac_latent + 0.5), 0, 3))
    emph = rng.normal(6.0 + (spec.emphysema_severity_effect * 4.0 if dead else 0.0), 4.0)
    muscle = rng.normal(45.0 - (spec.muscle_effect * 8.0 if dead else 0.0), 8.0)
    fat = rng.normal(-100.0 + (spec.fat_effect * 8.0 if dead else 0.0), 8.0)
    return {
        "cac_risk": cac,
        "emphysema_severity": round(float(emph), 6),
        "muscle_mass": round(float(muscle), 6),
        "fat_attenuation": round(float(fat), 6),
    }


def make_phantom(spec: PhantomSpec, index: int) -> Volume:
    """One subject; deterministic in (spec, index) and independent of others."""
    rng = np.random.default_rng(spec.seed ^ index)
    label = DECEASED if index % 2 == 0 else SURVIVED
    dead = label == DECEASED
    s, nz = spec.size, spec.depth
    half = s / 2.0
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    u, v = (xx + 0.5) / half - 1.0, (yy + 0.5) / half - 1.0

    jitter = rng.uniform(-0.03, 0.03, size=4)
    body_rx, body_ry = 0.9 + jitter[0], 0.68 + jitter[1]
    lung_dx = 0.42 + jitter[2]
    heart_c = (0.06 + jitter[3], 0.12 + rng.uniform(-0.03, 0.03))
    heart_r = (0.2, 0.18)
    fat_t = spec.fat_ring * rng.uniform(0.8, 1.2)

    base = np.full((s, s), -1000.0)
    body = _ellipse(u, v, 0.0, 0.05, body_rx, body_ry)
    base[body] = -100.0
    base[_ellipse(u, v, 0.0, 0.05, body_rx - fat_t, body_ry - fat_t)] = 40.0
    lungs = (_ellipse(u, v, -lung_dx, 0.0, 0.3, 0.45) | _ellipse(u, v, lung_dx, 0.0, 0.3, 0.45))
    base[lungs] = -860.0
    base[_ellipse(u, v, heart_c[0], heart_c[1], heart_r[0] + 0.03, heart_r[1] + 0.03)] = -80.0
    heart = _ellipse(u, v, heart_c[0], heart_c[1], heart_r[0], heart_r[1])
    base[heart] = 40.0
    base[_ellipse(u, v, 0.0, 0.58, 0.1, 0.08)] = 600.0
    lungs &= ~_ellipse(u, v, heart_c[0], heart_c[1], heart_r[0] + 0.03, heart_r[1] + 0.03)

    # emphysema holes: same in-plane pattern, slightly varying per slice
    lung_area = lungs.mean()
    density = spec.emphysema_density + (spec.emphysema_effect if dead else 0.0)
    n_holes = rng.poisson(density * lung_area)
    ly, lx = np.nonzero(lungs)
    holes = []
    if n_holes and ly.size:
        pick = rng.integers(0, ly.size, size=n_holes)
        for k in pick:
            holes.append((int(lx[k]), int(ly[k]), rng.uniform(0.6, 1.6) * s / 128.0))

    z_mid = int(rng.integers(1, nz - 1))
    selected = [z_mid - 1, z_mid, z_mid + 1]

    calcs = []
    p_calc = min(1.0, spec.calc_prob + (spec.calc_prob_effect if dead else 0.0))
    if rng.uniform() < p_calc:
        n_blobs = 1 + int(rng.uniform() < (0.5 if dead and spec.calc_prob_effect > 0 else 0.2))
        for _ in range(n_blobs):
            ang = rng.uniform(0, 2 * math.pi)
            rad = rng.uniform(0.2, 0.55)
            cx = (heart_c[0] + rad * heart_r[0] * math.cos(ang) + 1.0) * half
            cy = (heart_c[1] + rad * heart_r[1] * math.sin(ang) + 1.0) * half
            r = (spec.calc_radius + (spec.calc_radius_effect if dead else 0.0)) * s * rng.uniform(0.8, 1.2)
            lo, hi = spec.calc_hu
            shift = spec.calc_hu_effect if dead else 0.0
            hu = float(np.clip(rng.uniform(lo, hi) + shift, 300.0, 1000.0))
            calcs.append([round(float(cx), 4), round(float(cy), 4), z_mid, round(float(max(r, 0.75)), 4), round(hu, 2)])

    vox = np.empty((nz, s, s), dtype=np.int16)
    for z in range(nz):
        sl = base.copy()
        for hx, hy, hr in holes:
            hr_z = hr * (1.0 - 0.15 * abs(z - z_mid))
            if hr_z > 0.3:
                sl[((xx - hx) ** 2 + (yy - hy) ** 2 <= hr_z ** 2) & lungs] = -975.0
        sl += rng.normal(0.0, spec.noise_hu, size=sl.shape)
        for cx, cy, cz, r, hu in calcs:
            rz2 = r * r - (z - cz) ** 2
            if rz2 > 0:
                sl[(xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2 <= rz2] = hu
        vox[z] = np.clip(np.rint(sl), hu_coding.HU_MIN, hu_coding.HU_MAX).astype(np.int16)

    w = spec.roi_size
    hx_pix, hy_pix = (heart_c[0] + 1.0) * half, (heart_c[1] + 1.0) * half
    off = rng.integers(-max(1, w // 12), max(1, w // 12) + 1, size=2)
    rx = int(np.clip(round(hx_pix - w / 2) + off[0], 0, s - w))
    ry = int(np.clip(round(hy_pix - w / 2) + off[1], 0, s - w))

    meta = {
        "subject_id": f"S{index:04d}",
        "label": label,
        "dims": [s, s, nz],
        "selected_slices": selected,
        "roi": {"x": rx, "y": ry, "w": w, "h": w},
        "clinical": _draw_clinical(rng, label, spec),
        "planted": {"calcifications": calcs, "emphysema_holes": len(holes)},
    }
    return Volume(vox, meta)


def generate_phantoms(spec: PhantomSpec):
    """All subjects of a cohort; labels alternate so classes are exactly balanced."""
    return [make_phantom(spec, i) for i in range(spec.subjects)]


def calcification_mask(volume: Volume, z: int) -> np.ndarray:
    """Boolean (ny, nx) mask of planted calcification in slice ``z``."""
    nx, ny, _ = volume.dims
    yy, xx = np.mgrid[0:ny, 0:nx]
    mask = np.zeros((ny, nx), dtype=bool)
    for cx, cy, cz, r, _hu in volume.meta.get("planted", {}).get("calcifications", []):
        rz2 = r * r - (z - cz) ** 2
        if rz2 > 0:
            mask |= (xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2 <= rz2
    return mask


# ----------------------------------------------------------------- KVOL I/O

def save_volume(volume: Volume, path) -> None:
    """Write ``<stem>.kvol`` (magic + little-endian int16, x fastest) and ``<stem>.json``."""
    path = Path(path)
    volume.validate()
    meta = dict(volume.meta)
    meta["dims"] = list(volume.dims)
    payload = KVOL_MAGIC + np.ascontiguousarray(volume.voxels, dtype="<i2").tobytes()
    _atomic_write(path.with_suffix(".kvol"), payload)
    _atomic_write(path.with_suffix(".json"), (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode())


def load_volume(path) -> Volume:
    path = Path(path)
    raw = path.with_suffix(".kvol").read_bytes()
    meta = json.loads(path.with_suffix(".json").read_text())
    if raw[:8] != KVOL_MAGIC:
        raise MagicMismatchError(f"{path}: bad magic {raw[:8]!r}, expected {KVOL_MAGIC!r}")
    try:
        nx, ny, nz = (int(d) for d in meta["dims"])
    except (KeyError, ValueError, TypeError) as exc:
        raise MetadataError(f"{path}: sidecar lacks valid dims") from exc
    expected = 2 * nx * ny * nz
    got = len(raw) - 8
    if got < expected:
        raise TruncatedPayloadError(f"{path}: truncated payload, {got} of {expected} bytes")
    if got != expected:
        raise ExtentMismatchError(f"{path}: extent mismatch, payload has {got} bytes but dims "
                                  f"{[nx, ny, nz]} need {expected}")
    vox = np.frombuffer(raw, dtype="<i2", offset=8).reshape(nz, ny, nx).astype(np.int16)
    vol = Volume(vox, meta)
    vol.validate()
    return vol


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def clinical_csv(volumes) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CLINICAL_COLUMNS)
    for v in volumes:
        c = v.meta["clinical"]
        w.writerow([v.subject_id, c["cac_risk"], f"{c['emphysema_severity']:.6f}", f"{c['muscle_mass']:.6f}",
                    f"{c['fat_attenuation']:.6f}", v.label])
    return buf.getvalue()


def read_clinical_csv(path):
    """subject_id -> (4 features, label)."""
    rows = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CLINICAL_COLUMNS:
            raise ValueError(f"{path}: expected columns {CLINICAL_COLUMNS}, got {reader.fieldnames}")
        for r in reader:
            rows[r["subject_id"]] = ([float(r[k]) for k in CLINICAL_FEATURES], int(r["label"]))
    return rows


def write_dataset(volumes, spec: PhantomSpec, out_dir) -> str:
    """Write volumes, clinical.csv and dataset.json; returns the dataset hash."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for v in volumes:
        save_volume(v, out / v.subject_id)
    _atomic_write(out / "clinical.csv", clinical_csv(volumes).encode())
    digest = dataset_hash(out, [v.subject_id for v in volumes])
    info = {"phantom_spec": asdict(spec), "subjects": [v.subject_id for v in volumes], "sha256": digest}
    _atomic_write(out / "dataset.json", (json.dumps(info, indent=2, sort_keys=True) + "\n").encode())
    return digest


def dataset_hash(root, subject_ids) -> str:
    h = hashlib.sha256()
    root = Path(root)
    for sid in subject_ids:
        for suffix in (".kvol", ".json"):
            h.update((root / sid).with_suffix(suffix).read_bytes())
    h.update((root / "clinical.csv").read_bytes())
    return h.hexdigest()


def load_dataset(root):
    root = Path(root)
    info = json.loads((root / "dataset.json").read_text())
    vols = [load_volume(root / sid) for sid in info["subjects"]]
    clinical = read_clinical_csv(root / "clinical.csv")
    for v in vols:
        feats, label = clinical[v.subject_id]
        if label != v.label:
            raise MetadataError(f"{v.subject_id}: clinical.csv label {label} != sidecar label {v.label}")
    return vols, info


# ------------------------------------------------------- input preparation

def extract_inputs(volume: Volume):
    """The three selected slices and the ROI patch cut from each of them."""
    volume.validate()
    zs = volume.meta["selected_slices"]
    r = volume.meta["roi"]
    slices = [volume.voxels[z] for z in zs]
    patches = [s[r["y"]:r["y"] + r["h"], r["x"]:r["x"] + r["w"]] for s in slices]
    return slices, patches


def resize_bilinear(img, out_h, out_w) -> np.ndarray:
    """Bilinear resize of (..., H, W) with half-pixel centres and edge clamping."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[-2:]

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        i0 = np.floor(pos).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, pos - i0

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    top = img[..., y0, :][..., :, x0] * (1 - fx) + img[..., y0, :][..., :, x1] * fx
    bot = img[..., y1, :][..., :, x0] * (1 - fx) + img[..., y1, :][..., :, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def crop_box(h, w, ratio, rng=None):
    """Square crop (y, x, side); random offset when ``rng`` is given, centred otherwise."""
    side = max(1, min(h, w, int(round(ratio * min(h, w)))))
    if rng is None:
        return (h - side) // 2, (w - side) // 2, side
    return int(rng.integers(0, h - side + 1)), int(rng.integers(0, w - side + 1)), side


def augment(image, rng, out_size, ratio_range=(0.6, 0.8)):
    """Random square crop at a uniform size ratio, resized to ``out_size``.

    Returns the resized float image and the crop box ``(y, x, side, ratio)``.
    """
    image = np.asarray(image)
    h, w = image.shape[-2:]
    if h < 5 or w < 5:
        raise ValueError(f"image must be at least 5x5, got {h}x{w}")
    ratio = float(rng.uniform(*ratio_range))
    y, x, side = crop_box(h, w, ratio, rng)
    crop = image[..., y:y + side, x:x + side]
    return resize_bilinear(crop, out_size, out_size), (y, x, side, ratio)


def center_input(image, out_size, ratio=0.7):
    """Deterministic evaluation-time crop (centre, ratio 0.7) and resize."""
    image = np.asarray(image)
    h, w = image.shape[-2:]
    y, x, side = crop_box(h, w, ratio)
    return resize_bilinear(image[..., y:y + side, x:x + side], out_size, out_size)


@dataclass
class Subject:
    """Coded network-input precursors of one subject."""

    subject_id: str
    label: int
    slices: np.ndarray      # (3, 3, H, W) uint8, one coded image per selected slice
    patches: np.ndarray     # (3, 3, h, w) uint8
    clinical: np.ndarray    # (4,) float64
    calc_masks: np.ndarray  # (3, h, w) bool, planted calcification inside the ROI


def prepare_subject(volume: Volume) -> Subject:
    slices, patches = extract_inputs(volume)
    r = volume.meta["roi"]
    masks = []
    for z in volume.meta["selected_slices"]:
        m = calcification_mask(volume, z)
        masks.append(m[r["y"]:r["y"] + r["h"], r["x"]:r["x"] + r["w"]])
    c = volume.meta["clinical"]
    return Subject(
        subject_id=volume.subject_id,
        label=volume.label,
        slices=np.stack([hu_coding.encode_slice(s) for s in slices]),
        patches=np.stack([hu_coding.encode_slice(p) for p in patches]),
        clinical=np.array([float(c[k]) for k in CLINICAL_FEATURES]),
        calc_masks=np.stack(masks),
    )
