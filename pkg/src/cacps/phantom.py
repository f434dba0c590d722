"""Synthetic cardiac-like phantoms with four motion-severity domains.

Labels: 0 background, 1 LV blood pool, 2 LV myocardium, 3 RV blood pool.
Geometry depends on the sample seed only, so one seed rendered in different
domains shows the same anatomy under increasingly severe corruption:

    domain 1  clean
    domain 2  blur 0.8 px, noise 0.01
    domain 3  blur 1.5 px, 0.15x ghost shifted 3 px, noise 0.03
    domain 4  blur 2.5 px, 0.30x ghost shifted 6 px, noise 0.06, gamma U[0.7, 1.4]

On disk, images are ``PHI1`` files (magic, u32 H, u32 W, float32 LE
row-major) and masks are ``PHM1`` files (magic, u32 H, u32 W, uint8).
"""

from __future__ import annotations

import json
import math
import struct
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import CacpsError

DOMAINS = (1, 2, 3, 4)
INTENSITY = {0: 0.15, 1: 0.85, 2: 0.55, 3: 0.75}
IMAGE_MAGIC = b"PHI1"
MASK_MAGIC = b"PHM1"
MANIFEST_VERSION = 1

# (blur sigma, ghost weight, ghost shift, noise sigma, gamma range)
CORRUPTION = {
    1: (0.0, 0.0, 0, 0.0, None),
    2: (0.8, 0.0, 0, 0.01, None),
    3: (1.5, 0.15, 3, 0.03, None),
    4: (2.5, 0.30, 6, 0.06, (0.7, 1.4)),
}


@dataclass
class PhantomSample:
    image: np.ndarray
    mask: np.ndarray | None
    domain_id: int
    labeled: bool
    sample_id: str


def _geometry(seed: int, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Label map and clean intensity image drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    m = min(h, w)
    r_lv = rng.uniform(0.08, 0.14) * m
    thick = rng.uniform(0.04, 0.08) * m
    cy = h / 2 + rng.uniform(-0.04, 0.04) * m
    cx = w / 2 + rng.uniform(-0.04, 0.04) * m
    r_epi = r_lv + thick
    theta = rng.uniform(0.0, 2 * np.pi)
    r_rv = r_epi * rng.uniform(0.9, 1.15)
    d_rv = r_epi * rng.uniform(0.8, 1.0)
    ry, rx = cy + d_rv * np.sin(theta), cx + d_rv * np.cos(theta)

    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    dist = np.hypot(yy - cy, xx - cx)
    mask = np.zeros((h, w), dtype=np.uint8)
    mask[(np.hypot(yy - ry, xx - rx) < r_rv) & (dist >= r_epi)] = 3
    mask[dist < r_epi] = 2
    mask[dist < r_lv] = 1

    levels = np.array([INTENSITY[c] + rng.uniform(-0.05, 0.05) for c in range(4)])
    return mask, levels[mask]


def _corrupt(clean: np.ndarray, domain_id: int, rng: np.random.Generator) -> np.ndarray:
    sigma, ghost_w, shift, noise, gamma = CORRUPTION[domain_id]
    img = clean.copy()
    if sigma > 0:
        img = gaussian_filter(img, sigma, mode="reflect", truncate=3.0)
    if ghost_w > 0:
        img = img + ghost_w * np.roll(img, shift, axis=0)
    if noise > 0:
        img = img + rng.normal(0.0, noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    if gamma is not None:
        img = img ** rng.uniform(*gamma)
    return img


def _as_float32_grid(img: np.ndarray) -> np.ndarray:
    # images live at float32 precision so the on-disk copy is exact
    return np.asarray(img, dtype=np.float32).astype(np.float64)


def render(seed: int, domain_id: int, h: int = 64, w: int = 64) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(clean_image, corrupted_image, mask)`` for one seed and domain."""
    if domain_id not in DOMAINS:
        raise CacpsError("config", f"domain_id must be one of {DOMAINS}, got {domain_id}")
    if h < 32 or w < 32 or h % 4 or w % 4:
        raise CacpsError("shape", f"phantom dims must be >= 32 and divisible by 4, got {h}x{w}")
    mask, clean = _geometry(seed, h, w)
    img = _corrupt(clean, domain_id, np.random.default_rng([seed, domain_id]))
    return _as_float32_grid(clean), _as_float32_grid(img), mask


def generate_phantom(
    seed: int, domain_id: int, h: int = 64, w: int = 64, sample_id: str | None = None
) -> PhantomSample:
    _, img, mask = render(seed, domain_id, h, w)
    return PhantomSample(img, mask, domain_id, True, sample_id or f"s{seed}_d{domain_id}")


def psnr(reference: np.ndarray, image: np.ndarray, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(reference) - np.asarray(image)) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(peak**2 / mse)


def lv_enclosed(mask: np.ndarray) -> bool:
    """True when no 4-connected path leads from label 1 to label 0/3 or the border without crossing label 2."""
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    queue = deque(zip(*np.nonzero(mask == 1)))
    for y, x in queue:
        seen[y, x] = True
    while queue:
        y, x = queue.popleft()
        if mask[y, x] in (0, 3) or y in (0, h - 1) or x in (0, w - 1):
            return False
        for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
            if 0 <= ny < h and 0 <= nx < w and not seen[ny, nx] and mask[ny, nx] != 2:
                seen[ny, nx] = True
                queue.append((ny, nx))
    return True


# --- binary formats -------------------------------------------------------


def _write(path: Path, payload: bytes) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)
    except OSError as exc:
        raise CacpsError("io", f"cannot write {path}: {exc}") from exc


def _read_header(path: Path, magic: bytes) -> tuple[bytes, int, int]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CacpsError("io", f"cannot read {path}: {exc}") from exc
    if len(raw) < 12 or raw[:4] != magic:
        raise CacpsError("format", f"{path}: bad magic or truncated header")
    h, w = struct.unpack_from("<II", raw, 4)
    if h == 0 or w == 0:
        raise CacpsError("format", f"{path}: zero dimension")
    return raw, h, w


def save_image(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 2:
        raise CacpsError("shape", "image must be 2-d")
    h, w = image.shape
    _write(Path(path), IMAGE_MAGIC + struct.pack("<II", h, w) + image.astype("<f4").tobytes())


def load_image(path) -> np.ndarray:
    raw, h, w = _read_header(Path(path), IMAGE_MAGIC)
    if len(raw) != 12 + 4 * h * w:
        raise CacpsError("format", f"{path}: expected {4 * h * w} data bytes, found {len(raw) - 12}")
    return np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w).astype(np.float64)


def save_mask(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise CacpsError("shape", "mask must be 2-d")
    if mask.min(initial=0) < 0 or mask.max(initial=0) > 3:
        raise CacpsError("label", "mask labels must lie in 0..3")
    h, w = mask.shape
    _write(Path(path), MASK_MAGIC + struct.pack("<II", h, w) + mask.astype(np.uint8).tobytes())


def load_mask(path) -> np.ndarray:
    raw, h, w = _read_header(Path(path), MASK_MAGIC)
    if len(raw) != 12 + h * w:
        raise CacpsError("format", f"{path}: expected {h * w} data bytes, found {len(raw) - 12}")
    mask = np.frombuffer(raw, dtype=np.uint8, offset=12).reshape(h, w).copy()
    if mask.max() > 3:
        raise CacpsError("format", f"{path}: label {int(mask.max())} outside 0..3")
    return mask


def save_sample(sample: PhantomSample, root, subdir_images: str = "images", subdir_masks: str = "masks"):
    """Write image (and mask when labeled); return the relative file names."""
    root = Path(root)
    image_rel = f"{subdir_images}/{sample.sample_id}.phi"
    save_image(root / image_rel, sample.image)
    mask_rel = None
    if sample.labeled:
        mask_rel = f"{subdir_masks}/{sample.sample_id}.phm"
        save_mask(root / mask_rel, sample.mask)
    return image_rel, mask_rel


# --- datasets -------------------------------------------------------------


@dataclass
class ManifestEntry:
    sample_id: str
    image: str
    mask: str | None
    domain_id: int
    labeled: bool
    split: str


@dataclass
class DatasetManifest:
    H: int
    W: int
    entries: list[ManifestEntry]
    seed: int = 0
    version: int = MANIFEST_VERSION
    root: Path | None = field(default=None, compare=False)

    def counts(self) -> dict[str, dict[str, int]]:
        out = {}
        for d in DOMAINS:
            es = [e for e in self.entries if e.domain_id == d]
            out[str(d)] = {
                "total": len(es),
                "labeled": sum(e.labeled for e in es),
                **{s: sum(e.split == s for e in es) for s in ("train", "val", "test")},
            }
        return out

    def select(self, split: str | None = None, labeled: bool | None = None) -> list[ManifestEntry]:
        return [
            e
            for e in self.entries
            if (split is None or e.split == split) and (labeled is None or e.labeled == labeled)
        ]

    def to_json(self) -> str:
        doc = {
            "version": self.version,
            "H": self.H,
            "W": self.W,
            "seed": self.seed,
            "counts": self.counts(),
            "samples": [asdict(e) for e in self.entries],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def load(self, entry: ManifestEntry) -> PhantomSample:
        return load_sample(entry, self.root)


def load_sample(entry: ManifestEntry, root) -> PhantomSample:
    root = Path(root)
    image = load_image(root / entry.image)
    mask = load_mask(root / entry.mask) if entry.mask else None
    if mask is not None and mask.shape != image.shape:
        raise CacpsError("format", f"{entry.sample_id}: mask {mask.shape} vs image {image.shape}")
    return PhantomSample(image, mask, entry.domain_id, entry.labeled, entry.sample_id)


def load_manifest(path) -> DatasetManifest:
    """Read ``manifest.json`` (or a directory containing it) and validate it."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        doc = json.loads(path.read_text())
        entries = [ManifestEntry(**e) for e in doc["samples"]]
        manifest = DatasetManifest(int(doc["H"]), int(doc["W"]), entries, int(doc.get("seed", 0)), int(doc["version"]), path.parent)
    except FileNotFoundError as exc:
        raise CacpsError("data", f"no manifest at {path}") from exc
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CacpsError("format", f"{path}: malformed manifest ({exc})") from exc
    validate_manifest(manifest)
    return manifest


def validate_manifest(manifest: DatasetManifest) -> None:
    root = manifest.root
    ids = set()
    for e in manifest.entries:
        if e.sample_id in ids:
            raise CacpsError("data", f"duplicate sample id {e.sample_id}")
        ids.add(e.sample_id)
        if e.labeled != (e.mask is not None):
            raise CacpsError("data", f"{e.sample_id}: labeled flag disagrees with mask presence")
        if e.split not in ("train", "val", "test"):
            raise CacpsError("data", f"{e.sample_id}: unknown split {e.split!r}")
        if e.domain_id not in DOMAINS:
            raise CacpsError("data", f"{e.sample_id}: unknown domain {e.domain_id}")
        if root is not None:
            for rel in (e.image, e.mask):
                if rel is not None and not (root / rel).is_file():
                    raise CacpsError("data", f"{e.sample_id}: missing file {rel}")


def _per_domain(value, name: str) -> list:
    if isinstance(value, (list, tuple)):
        if len(value) != len(DOMAINS):
            raise CacpsError("config", f"{name} needs one value per domain ({len(DOMAINS)})")
        return list(value)
    return [value] * len(DOMAINS)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class DatasetConfig:
    """How many phantoms to draw per domain and how to split them.

    Per domain, ``val_fraction`` / ``test_fraction`` of the samples become
    labeled holdouts; ``labeled_fraction`` of the remaining training samples
    keep their masks.  Scalars apply to every domain, lists give one value
    per domain.
    """

    n_per_domain: int | list = 25
    labeled_fraction: float | list = 0.2
    val_fraction: float | list = 0.0
    test_fraction: float | list = 0.0
    seed: int = 0
    H: int = 64
    W: int = 64

    def __post_init__(self):
        for name in ("labeled_fraction", "val_fraction", "test_fraction"):
            for v in _per_domain(getattr(self, name), name):
                if not 0.0 <= float(v) <= 1.0:
                    raise CacpsError("config", f"{name} entries must lie in [0, 1], got {v}")
        for n in _per_domain(self.n_per_domain, "n_per_domain"):
            if int(n) < 0:
                raise CacpsError("config", "n_per_domain must be non-negative")
        for v, f in zip(_per_domain(self.val_fraction, "val"), _per_domain(self.test_fraction, "test")):
            if float(v) + float(f) > 1.0:
                raise CacpsError("config", "val_fraction + test_fraction exceeds 1")
        if self.H < 32 or self.W < 32 or self.H % 4 or self.W % 4:
            raise CacpsError("config", f"H, W must be >= 32 and divisible by 4, got {self.H}x{self.W}")


def sample_seed(dataset_seed: int, domain_id: int, index: int) -> int:
    return int(np.random.SeedSequence([dataset_seed, domain_id, index]).generate_state(1)[0])


def plan_dataset(cfg: DatasetConfig) -> list[tuple[ManifestEntry, int]]:
    """Entries (without files) paired with each sample's generator seed."""
    plan = []
    ns = _per_domain(cfg.n_per_domain, "n_per_domain")
    fl = _per_domain(cfg.labeled_fraction, "labeled_fraction")
    fv = _per_domain(cfg.val_fraction, "val_fraction")
    ft = _per_domain(cfg.test_fraction, "test_fraction")
    for d, n, f_lab, f_val, f_test in zip(DOMAINS, ns, fl, fv, ft):
        n = int(n)
        n_val = _round_half_up(f_val * n)
        n_test = min(_round_half_up(f_test * n), n - n_val)
        n_lab = _round_half_up(f_lab * (n - n_val - n_test))
        order = np.random.default_rng([cfg.seed, d, 7]).permutation(n)
        roles = {}
        for rank, idx in enumerate(order):
            if rank < n_val:
                roles[idx] = ("val", True)
            elif rank < n_val + n_test:
                roles[idx] = ("test", True)
            elif rank < n_val + n_test + n_lab:
                roles[idx] = ("train", True)
            else:
                roles[idx] = ("train", False)
        for idx in range(n):
            split, labeled = roles[idx]
            sid = f"d{d}_{idx:04d}"
            entry = ManifestEntry(
                sid,
                f"images/{sid}.phi",
                f"masks/{sid}.phm" if labeled else None,
                d,
                labeled,
                split,
            )
            plan.append((entry, sample_seed(cfg.seed, d, idx)))
    return plan


def build_dataset(cfg: DatasetConfig, out_dir) -> DatasetManifest:
    """Render every planned sample, write image/mask files and ``manifest.json``."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CacpsError("io", f"cannot create {out_dir}: {exc}") from exc
    entries = []
    for entry, seed in plan_dataset(cfg):
        sample = generate_phantom(seed, entry.domain_id, cfg.H, cfg.W, entry.sample_id)
        sample.labeled = entry.labeled
        save_sample(sample, out_dir)
        entries.append(entry)
    manifest = DatasetManifest(cfg.H, cfg.W, entries, cfg.seed, MANIFEST_VERSION, out_dir)
    _write(out_dir / "manifest.json", manifest.to_json().encode())
    return manifest
