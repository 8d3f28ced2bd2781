"""Deterministic synthetic two-view multi-domain benchmark.

Each sample is a pair of views of one half-elliptical "breast" region
filled with domain-styled texture. Malignant cases plant a bright
spiculated blob at the same column fraction in both views (rows differ);
benign cases carry nothing or a smooth low-contrast blob. Domain styles
shift intensity offset/scale, gamma, noise, and texture frequency, so a
raw intensity threshold separates classes inside one domain but not
across pooled domains.

Images are written as MDGT float32 files plus a CSV manifest, a domain
split sidecar, and a lesion-metadata sidecar for verification.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .tensorio import load_tensor, save_tensor

MANIFEST_HEADER = "sample_id,cc_path,mlo_path,label,domain_id,split"
MANIFEST_NAME = "manifest.csv"
DOMAINS_NAME = "domains.json"
LESIONS_NAME = "lesions.csv"


@dataclass(frozen=True)
class DomainStyle:
    domain_id: int
    intensity_offset: float
    intensity_scale: float
    gamma_exponent: float
    noise_std: float
    texture_frequency: float

    def __post_init__(self):
        if self.intensity_scale <= 0 or self.gamma_exponent <= 0:
            raise ValueError("intensity_scale and gamma_exponent must be positive")


# Frozen reference styles. Calibrated so that a high-percentile intensity
# threshold separates classes inside every domain (lesion lift beats the
# within-domain texture spread) while the domains' intensity bands are
# spaced wider than the lift, which breaks any single pooled threshold.
# The held-out domain (3) also differs sharply in gamma and texture
# frequency from the first three.
_BASE_STYLES = (
    # offset, scale, gamma, noise, frequency
    (0.186, 0.154, 1.00, 0.012, 3.0),
    (0.432, 0.098, 1.40, 0.016, 5.5),
    (0.481, 0.219, 0.75, 0.010, 8.0),
    (0.352, 0.068, 1.80, 0.020, 12.0),
    (0.300, 0.120, 1.15, 0.014, 4.2),
    (0.260, 0.170, 0.90, 0.018, 9.5),
)


def domain_style(domain_id: int) -> DomainStyle:
    base = _BASE_STYLES[domain_id % len(_BASE_STYLES)]
    cycle = domain_id // len(_BASE_STYLES)
    off, scale, gamma, noise, freq = base
    # extra domains get a deterministic nudge to keep style tuples distinct
    return DomainStyle(domain_id, off + 0.01 * cycle, scale * (1.0 + 0.03 * cycle),
                       gamma, noise, freq + 0.5 * cycle)


@dataclass(frozen=True)
class ManifestRow:
    sample_id: str
    cc_path: str
    mlo_path: str
    label: int
    domain_id: int
    split: str


@dataclass
class LesionRecord:
    sample_id: str
    kind: str             # malignant | benign_blob | none
    col_frac: float
    cc_col: int
    mlo_col: int
    cc_row: int
    mlo_row: int


@dataclass
class DatasetManifest:
    root: str
    rows: list
    seen_domains: list
    unseen_domains: list

    def __eq__(self, other):
        return (isinstance(other, DatasetManifest)
                and self.rows == other.rows
                and self.seen_domains == other.seen_domains
                and self.unseen_domains == other.unseen_domains)

    def select(self, split=None, domains=None):
        rows = self.rows
        if split is not None:
            rows = [r for r in rows if r.split == split]
        if domains is not None:
            wanted = set(domains)
            rows = [r for r in rows if r.domain_id in wanted]
        return rows

    def load_pair(self, row: ManifestRow):
        cc = load_tensor(os.path.join(self.root, row.cc_path))
        mlo = load_tensor(os.path.join(self.root, row.mlo_path))
        return cc, mlo


@dataclass
class ViewPairSample:
    sample_id: str
    cc_image: np.ndarray
    mlo_image: np.ndarray
    label: int
    domain_id: int
    split: str
    lesion: LesionRecord = None


# ---------------------------------------------------------------------------
# image synthesis


def _coarse_noise_field(rng, size, cells):
    """Smooth field from a bilinear-upsampled coarse random grid."""
    grid = rng.uniform(0.0, 1.0, size=(cells + 1, cells + 1))
    pos = np.linspace(0.0, cells, size)
    i0 = np.clip(pos.astype(int), 0, cells - 1)
    frac = pos - i0
    g = grid[i0][:, i0]
    gx = grid[i0][:, i0 + 1]
    gy = grid[i0 + 1][:, i0]
    gxy = grid[i0 + 1][:, i0 + 1]
    fy = frac[:, None]
    fx = frac[None, :]
    return (g * (1 - fy) * (1 - fx) + gx * (1 - fy) * fx
            + gy * fy * (1 - fx) + gxy * fy * fx)


def _breast_mask(size, view, rng):
    """Half-ellipse anchored at the left edge; the side view is tilted."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = size * (0.5 + rng.uniform(-0.03, 0.03))
    ax = size * (0.88 + rng.uniform(-0.04, 0.04))
    ay = size * (0.40 + rng.uniform(-0.03, 0.03))
    tilt = 0.0
    if view == "mlo":
        tilt = rng.uniform(0.25, 0.45)          # shear: chest-wall oblique
    y_rel = yy - cy - tilt * xx
    return (xx / ax) ** 2 + (y_rel / ay) ** 2 <= 1.0


def _texture(size, rng, frequency):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    tex = np.zeros((size, size))
    for _ in range(3):
        theta = rng.uniform(0.0, np.pi)
        freq = frequency * rng.uniform(0.7, 1.3)
        phase = rng.uniform(0.0, 2 * np.pi)
        tex += np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    tex = 0.5 + tex / 12.0
    smooth = _coarse_noise_field(rng, size, cells=6)
    return np.clip(0.30 + 0.45 * smooth + 0.25 * tex, 0.0, 1.0)


def _lesion_field(size, row, col, rng, kind):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy = yy - row
    dx = xx - col
    r = np.sqrt(dx * dx + dy * dy)
    if kind == "malignant":
        amp = rng.uniform(0.85, 1.15)
        sigma = rng.uniform(0.045, 0.060) * size
        blob = amp * np.exp(-0.5 * (r / sigma) ** 2)
        theta = np.arctan2(dy, dx)
        spokes = int(rng.integers(5, 9))
        phase = rng.uniform(0.0, 2 * np.pi)
        spic = (0.45 * amp * np.maximum(0.0, np.cos(spokes * theta + phase)) ** 6
                * np.exp(-r / (2.2 * sigma)))
        return blob + spic
    amp = rng.uniform(0.15, 0.25)
    sigma = rng.uniform(0.075, 0.100) * size
    return amp * np.exp(-0.5 * (r / sigma) ** 2)


def _row_support(mask, col):
    rows = np.nonzero(mask[:, col])[0]
    return rows


def synthesize_sample(sample_id, domain_id, label, split, size, seed) -> ViewPairSample:
    """Render one two-view pair; fully determined by (seed, domain, id)."""
    style = domain_style(domain_id)
    idx = int(sample_id.split("_")[-1])
    rng = np.random.default_rng(np.random.SeedSequence((seed, domain_id, idx)))

    masks = {v: _breast_mask(size, v, rng) for v in ("cc", "mlo")}
    textures = {v: _texture(size, rng, style.texture_frequency) for v in ("cc", "mlo")}

    if label == 1:
        kind = "malignant"
    else:
        kind = "benign_blob" if rng.uniform() < 0.5 else "none"

    col_frac = float(rng.uniform(0.18, 0.58))
    col = int(round(col_frac * (size - 1)))
    rows = {}
    for view in ("cc", "mlo"):
        support = _row_support(masks[view], col)
        lo = support[0] + 0.2 * (support[-1] - support[0])
        hi = support[0] + 0.8 * (support[-1] - support[0])
        rows[view] = int(round(rng.uniform(lo, hi)))

    images = {}
    for view in ("cc", "mlo"):
        tissue = textures[view]
        if kind != "none":
            tissue = tissue + _lesion_field(size, rows[view], col, rng, kind)
        tissue = np.clip(tissue, 0.0, None)
        styled = style.intensity_offset + style.intensity_scale * tissue ** style.gamma_exponent
        noise = rng.normal(0.0, style.noise_std, size=(size, size))
        img = np.where(masks[view], styled + noise, 0.02)
        images[view] = np.clip(img, 0.0, 1.0).astype(np.float32)[None]

    lesion = LesionRecord(sample_id=sample_id, kind=kind, col_frac=col_frac,
                          cc_col=col, mlo_col=col,
                          cc_row=rows["cc"], mlo_row=rows["mlo"])
    if kind == "none":
        lesion = LesionRecord(sample_id, "none", -1.0, -1, -1, -1, -1)
    return ViewPairSample(sample_id=sample_id, cc_image=images["cc"],
                          mlo_image=images["mlo"], label=label,
                          domain_id=domain_id, split=split, lesion=lesion)


# ---------------------------------------------------------------------------
# dataset assembly


def _sample_plan(num_domains, per_domain, malignant_fraction):
    plan = []
    n_mal = int(round(per_domain * malignant_fraction))
    for d in range(num_domains):
        for i in range(per_domain):
            label = 1 if i < n_mal else 0
            split = "test" if i % 4 == 3 else "train"
            plan.append((d, i, label, split))
    return plan


def generate_dataset(num_domains, per_domain, malignant_fraction, image_size,
                     seed, out_dir, unseen_count=1) -> DatasetManifest:
    """Write the benchmark to ``out_dir``; deterministic given ``seed``."""
    if num_domains < 2:
        raise ValueError("need at least 2 domains")
    if per_domain < 4:
        raise ValueError("need at least 4 samples per domain")
    if not 0.0 < malignant_fraction < 1.0:
        raise ValueError("malignant_fraction must be in (0, 1)")
    if not 1 <= unseen_count < num_domains:
        raise ValueError("unseen_count must leave at least one seen domain")

    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    rows = []
    lesions = []
    for d, i, label, split in _sample_plan(num_domains, per_domain, malignant_fraction):
        sample_id = f"d{d}_{i:05d}"
        sample = synthesize_sample(sample_id, d, label, split, image_size, seed)
        cc_rel = os.path.join("images", f"{sample_id}_cc.mdgt")
        mlo_rel = os.path.join("images", f"{sample_id}_mlo.mdgt")
        save_tensor(sample.cc_image, os.path.join(out_dir, cc_rel))
        save_tensor(sample.mlo_image, os.path.join(out_dir, mlo_rel))
        rows.append(ManifestRow(sample_id, cc_rel, mlo_rel, label, d, split))
        lesions.append(sample.lesion)

    seen = list(range(num_domains - unseen_count))
    unseen = list(range(num_domains - unseen_count, num_domains))
    manifest = DatasetManifest(root=out_dir, rows=rows,
                               seen_domains=seen, unseen_domains=unseen)
    write_manifest(manifest, out_dir)
    _write_lesions(lesions, os.path.join(out_dir, LESIONS_NAME))
    return manifest


def _write_lesions(lesions, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "kind", "col_frac", "cc_col", "mlo_col",
                         "cc_row", "mlo_row"])
        for l in lesions:
            writer.writerow([l.sample_id, l.kind, f"{l.col_frac:.6f}",
                             l.cc_col, l.mlo_col, l.cc_row, l.mlo_row])


def load_lesions(out_dir):
    recs = []
    with open(os.path.join(out_dir, LESIONS_NAME), newline="") as fh:
        for row in csv.DictReader(fh):
            recs.append(LesionRecord(row["sample_id"], row["kind"],
                                     float(row["col_frac"]), int(row["cc_col"]),
                                     int(row["mlo_col"]), int(row["cc_row"]),
                                     int(row["mlo_row"])))
    return recs


def write_manifest(manifest: DatasetManifest, out_dir) -> None:
    with open(os.path.join(out_dir, MANIFEST_NAME), "w", newline="") as fh:
        fh.write(MANIFEST_HEADER + "\n")
        writer = csv.writer(fh)
        for r in manifest.rows:
            writer.writerow([r.sample_id, r.cc_path, r.mlo_path,
                             r.label, r.domain_id, r.split])
    with open(os.path.join(out_dir, DOMAINS_NAME), "w") as fh:
        json.dump({"seen": manifest.seen_domains, "unseen": manifest.unseen_domains},
                  fh, sort_keys=True)
        fh.write("\n")


def load_manifest(out_dir) -> DatasetManifest:
    rows = []
    path = os.path.join(out_dir, MANIFEST_NAME)
    with open(path, newline="") as fh:
        header = fh.readline().rstrip("\n")
        if header != MANIFEST_HEADER:
            raise ValueError(f"unexpected manifest header {header!r}")
        for rec in csv.reader(fh):
            sample_id, cc_path, mlo_path, label, domain_id, split = rec
            if split not in ("train", "test"):
                raise ValueError(f"bad split {split!r} for sample {sample_id}")
            rows.append(ManifestRow(sample_id, cc_path, mlo_path,
                                    int(label), int(domain_id), split))
    with open(os.path.join(out_dir, DOMAINS_NAME)) as fh:
        domains = json.load(fh)
    if set(domains["seen"]) & set(domains["unseen"]):
        raise ValueError("seen and unseen domain sets overlap")
    for r in rows:
        full = os.path.join(out_dir, r.cc_path)
        if not os.path.exists(full):
            raise FileNotFoundError(f"manifest references missing file {full}")
    return DatasetManifest(root=out_dir, rows=rows,
                           seen_domains=list(domains["seen"]),
                           unseen_domains=list(domains["unseen"]))


# ---------------------------------------------------------------------------
# batch composition


class BatchComposer:
    """Domain-even mini-batches; per-epoch no-repeat until a pool empties.

    Each batch draws batch_size / |seen| samples from every seen domain.
    Within one epoch a domain's samples never repeat until that domain's
    pool is exhausted, after which it reshuffles (with-replacement
    quantum) while larger domains finish their pass.
    """

    def __init__(self, manifest: DatasetManifest, batch_size: int,
                 seen_domains, rng: np.random.Generator):
        seen = list(seen_domains)
        if batch_size % len(seen):
            raise ValueError(f"batch size {batch_size} not divisible by "
                             f"{len(seen)} seen domains")
        self.per_domain = batch_size // len(seen)
        self.rng = rng
        self.pools = {}
        for d in seen:
            rows = manifest.select(split="train", domains=[d])
            if not rows:
                raise ValueError(f"domain {d} has no training samples")
            self.pools[d] = rows
        self.seen = seen
        self._queues = {}
        self.start_epoch()

    @property
    def steps_per_epoch(self) -> int:
        longest = max(len(rows) for rows in self.pools.values())
        return max(1, -(-longest // self.per_domain))

    def start_epoch(self):
        for d in self.seen:
            self._queues[d] = list(self.rng.permutation(len(self.pools[d])))

    def next_batch(self):
        batch = []
        for d in self.seen:
            for _ in range(self.per_domain):
                if not self._queues[d]:
                    self._queues[d] = list(self.rng.permutation(len(self.pools[d])))
                batch.append(self.pools[d][self._queues[d].pop()])
        order = self.rng.permutation(len(batch))
        return [batch[i] for i in order]


def compose_batch(manifest, batch_size, seen_domains, rng):
    """One domain-even batch (epoch state lives in BatchComposer)."""
    return BatchComposer(manifest, batch_size, seen_domains, rng).next_batch()


# ---------------------------------------------------------------------------
# image-space training augmentation


@dataclass
class AugmentDraws:
    flip: bool = False
    angle_deg: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    scale: float = 1.0
    shear_deg: float = 0.0


def sample_augment_draws(rng: np.random.Generator, size: int) -> AugmentDraws:
    return AugmentDraws(
        flip=bool(rng.uniform() < 0.5),
        angle_deg=float(rng.uniform(-15.0, 15.0)),
        tx=float(rng.uniform(-0.10, 0.10) * size),
        ty=float(rng.uniform(-0.10, 0.10) * size),
        scale=float(rng.uniform(0.8, 1.6)),
        shear_deg=float(rng.uniform(-25.0, 25.0)),
    )


def _affine_matrix(draws: AugmentDraws, size: int) -> np.ndarray:
    c = (size - 1) / 2.0

    def mat(a, b, tx_, c_, d, ty_):
        return np.array([[a, b, tx_], [c_, d, ty_], [0.0, 0.0, 1.0]])

    center = mat(1, 0, -c, 0, 1, -c)
    uncenter = mat(1, 0, c, 0, 1, c)
    flip = mat(-1 if draws.flip else 1, 0, 0, 0, 1, 0)
    th = np.deg2rad(draws.angle_deg)
    rot = mat(np.cos(th), -np.sin(th), 0, np.sin(th), np.cos(th), 0)
    trans = mat(1, 0, draws.tx, 0, 1, draws.ty)
    scale = mat(draws.scale, 0, 0, 0, draws.scale, 0)
    shear = mat(1, np.tan(np.deg2rad(draws.shear_deg)), 0, 0, 1, 0)
    # order: flip, rotate, translate, scale, shear (about the center)
    return uncenter @ shear @ scale @ trans @ rot @ flip @ center


def apply_augment(image: np.ndarray, draws: AugmentDraws,
                  noise: np.ndarray | None = None) -> np.ndarray:
    """Affine warp (bilinear, zero padding) plus optional pixel noise."""
    img = image[0] if image.ndim == 3 else image
    size = img.shape[0]
    inv = np.linalg.inv(_affine_matrix(draws, size))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    src = inv @ np.stack([xx.ravel(), yy.ravel(), np.ones(size * size)])
    xs = src[0].reshape(size, size)
    ys = src[1].reshape(size, size)

    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0

    def gather(yi, xi):
        inside = (yi >= 0) & (yi < size) & (xi >= 0) & (xi < size)
        vals = img[np.clip(yi, 0, size - 1), np.clip(xi, 0, size - 1)]
        return np.where(inside, vals, 0.0)

    out = ((1 - fy) * (1 - fx) * gather(y0, x0)
           + (1 - fy) * fx * gather(y0, x0 + 1)
           + fy * (1 - fx) * gather(y0 + 1, x0)
           + fy * fx * gather(y0 + 1, x0 + 1))
    if noise is not None:
        out = out + noise
    out = out.astype(image.dtype if image.dtype != np.float64 else np.float64)
    return out[None] if image.ndim == 3 else out


def augment_image(image: np.ndarray, rng: np.random.Generator,
                  split: str = "train", noise_std: float = 0.005) -> np.ndarray:
    """Sample one augmentation and apply it. Training split only."""
    if split != "train":
        raise ValueError("image augmentation is restricted to the training split")
    size = image.shape[-1]
    draws = sample_augment_draws(rng, size)
    noise = rng.normal(0.0, noise_std, size=(size, size)) if noise_std > 0 else None
    return apply_augment(image, draws, noise)
