"""Nested-ellipse segmentation benchmark with controlled low-frequency style shifts.

Each sample draws its geometry from ``(geometry_seed, sample_id)`` and its
style jitter from ``(style_seed, sample_id)``, so samples can be generated
independently and in any order.
"""
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import spectral
from .errors import ValidationError

CLASS_NAMES = ("background", "outer", "inner")
NUM_CLASSES = len(CLASS_NAMES)
MAX_GEOMETRY_TRIES = 50
RANDOM_PROFILE_BANDS = 6


@dataclass(frozen=True)
class DomainSpec:
    name: str
    style_seed: int = 0
    geometry_seed: int = 0
    # gains[i] multiplies amplitude at radial frequency round(r) == i; None draws
    # a domain-level profile from style_seed
    gains: tuple = (1.0,)
    gain_spread: float = 0.5
    brightness: tuple = (0.0, 0.0)
    contrast: tuple = (1.0, 1.0)
    texture_noise: float = 0.03
    n: int = 50
    val_fraction: float = 0.0

    def __post_init__(self):
        if self.gains is not None:
            object.__setattr__(self, "gains", tuple(float(g) for g in self.gains))
            if any(g < 0 for g in self.gains):
                raise ValidationError("gains must be non-negative")
        object.__setattr__(self, "brightness", tuple(self.brightness))
        object.__setattr__(self, "contrast", tuple(self.contrast))

    def profile(self):
        if self.gains is not None:
            return np.asarray(self.gains, dtype=np.float64)
        rng = np.random.default_rng([self.style_seed, 2**31 - 1])
        return np.exp(rng.normal(0.0, self.gain_spread, RANDOM_PROFILE_BANDS))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("gains") is not None:
            d["gains"] = tuple(d["gains"])
        return cls(**d)


@dataclass
class SampleRecord:
    image: np.ndarray  # H x W x 1, float32 in [0, 1]
    label: np.ndarray  # H x W, uint8 class index
    domain: str
    sample_id: int
    split: str = "test"
    meta: dict = field(default_factory=dict)

    def onehot(self, num_classes=NUM_CLASSES):
        return np.eye(num_classes, dtype=np.float32)[self.label]


def _ellipse_radius(yy, xx, cy, cx, a, b, theta):
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return np.sqrt((u / a) ** 2 + (v / b) ** 2)


def _sample_geometry(rng, size):
    for _ in range(MAX_GEOMETRY_TRIES):
        cy, cx = size / 2 + rng.uniform(-0.12, 0.12, 2) * size
        a = rng.uniform(0.15, 0.22) * size
        b = a * rng.uniform(0.8, 1.0)
        theta = rng.uniform(0, np.pi)
        scale = rng.uniform(0.35, 0.6)
        ia, ib = a * scale, b * scale * rng.uniform(0.85, 1.0)
        itheta = theta + rng.uniform(-0.3, 0.3)
        off = rng.uniform(-0.25, 0.25, 2) * b
        icy, icx = cy + off[0], cx + off[1]
        t = np.linspace(0, 2 * np.pi, 64, endpoint=False)
        by = icy + ia * np.cos(t) * np.sin(itheta) + ib * np.sin(t) * np.cos(itheta)
        bx = icx + ia * np.cos(t) * np.cos(itheta) - ib * np.sin(t) * np.sin(itheta)
        inside = _ellipse_radius(by, bx, cy, cx, a, b, theta) < 0.95
        in_frame = a < cy < size - a and a < cx < size - a
        if inside.all() and in_frame:
            return dict(outer=(cy, cx, a, b, theta), inner=(icy, icx, ia, ib, itheta))
    raise ValidationError("could not place the inner ellipse inside the outer one")


def render_base(rng, size, texture_noise):
    """Unstyled image and exact label map for one random geometry."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    geo = _sample_geometry(rng, size)
    r_out = _ellipse_radius(yy, xx, *geo["outer"])
    r_in = _ellipse_radius(yy, xx, *geo["inner"])

    img = 0.35 - 0.15 * (((yy - size / 2) ** 2 + (xx - size / 2) ** 2) / (size / 2) ** 2)
    for _ in range(3):
        by, bx = rng.uniform(0, size, 2)
        width = rng.uniform(0.15, 0.35) * size
        img += rng.uniform(-0.05, 0.05) * np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * width**2))
    edge = 12.0
    img += 0.22 / (1 + np.exp(-(1 - r_out) * edge))
    img += 0.20 / (1 + np.exp(-(1 - r_in) * edge))
    # vessels: dark sinusoidal curves crossing the frame
    for _ in range(rng.integers(3, 6)):
        phi = rng.uniform(0, np.pi)
        c, s = np.cos(phi), np.sin(phi)
        along = xx * c + yy * s
        across = -xx * s + yy * c
        centre = rng.uniform(-0.3, 0.3) * size + size / 2 * (-s + c)
        path = centre + rng.uniform(2, 8) * np.sin(along * rng.uniform(0.02, 0.08) + rng.uniform(0, 2 * np.pi))
        img -= rng.uniform(0.06, 0.12) * np.exp(-((across - path) ** 2) / (2 * rng.uniform(0.8, 1.6) ** 2))
    img += texture_noise * rng.standard_normal((size, size))

    label = np.zeros((size, size), dtype=np.uint8)
    label[r_out <= 1.0] = 1
    label[r_in <= 1.0] = 2
    return np.clip(img, 0.0, 1.0)[..., None], label


def radial_gain_map(size_h, size_w, profile):
    """Gain per centered frequency coefficient; 1 beyond the profile's last band."""
    fy = np.arange(size_h) - size_h // 2
    fx = np.arange(size_w) - size_w // 2
    r = np.rint(np.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)).astype(int)
    gain = np.ones((size_h, size_w))
    inside = r < len(profile)
    gain[inside] = np.asarray(profile)[r[inside]]
    return gain


def apply_style_shift(image, spec: DomainSpec, rng, clip=True):
    """Scale low-frequency amplitude radially, then jitter brightness/contrast.

    The radial profile is symmetric under f -> -f, so the output stays real.
    """
    image = spectral.validate_image(image)
    profile = spec.profile()
    out = image
    if np.any(profile != 1.0):
        sp = spectral.fft2(image)
        gain = radial_gain_map(*image.shape[:2], profile)[..., None]
        out = spectral.ifft2(spectral.SpectralImage(sp.amplitude * gain, sp.phase))
    contrast = rng.uniform(*spec.contrast)
    brightness = rng.uniform(*spec.brightness)
    if contrast != 1.0 or brightness != 0.0:
        mean = out.mean(axis=(0, 1), keepdims=True)
        out = (out - mean) * contrast + mean + brightness
    return np.clip(out, 0.0, 1.0) if clip else out


def generate_sample(spec: DomainSpec, sample_id, image_size, styled=True):
    geo_rng = np.random.default_rng([spec.geometry_seed, sample_id])
    style_rng = np.random.default_rng([spec.style_seed, sample_id, 1])
    image, label = render_base(geo_rng, image_size, spec.texture_noise)
    if styled:
        image = apply_style_shift(image, spec, style_rng)
    n_val = int(np.floor(spec.n * spec.val_fraction))
    split = "test"
    if spec.val_fraction > 0:
        split = "val" if sample_id >= spec.n - n_val else "train"
    return SampleRecord(image.astype(np.float32), label, spec.name, sample_id, split)


def generate_domain(spec: DomainSpec, n=None, image_size=128, styled=True):
    n = spec.n if n is None else n
    if n < 1:
        raise ValidationError("n must be at least 1")
    if image_size < 32:
        raise ValidationError("image_size must be at least 32")
    if n != spec.n:
        spec = DomainSpec.from_dict({**spec.to_dict(), "n": n})
    return [generate_sample(spec, i, image_size, styled) for i in range(n)]


def default_domains(n_source=250, n_target=50, val_fraction=0.2):
    return [
        DomainSpec("source", style_seed=11, geometry_seed=101, gains=(1.0,),
                   brightness=(-0.03, 0.03), contrast=(0.9, 1.1), n=n_source, val_fraction=val_fraction),
        DomainSpec("target_dim", style_seed=12, geometry_seed=102, gains=(0.6, 0.7, 0.7, 0.8, 0.9),
                   brightness=(-0.03, 0.03), contrast=(0.9, 1.1), n=n_target),
        DomainSpec("target_contrast", style_seed=13, geometry_seed=103, gains=(1.0, 1.7, 1.6, 1.4, 1.25, 1.1),
                   brightness=(-0.03, 0.03), contrast=(0.9, 1.1), n=n_target),
        DomainSpec("target_flat", style_seed=14, geometry_seed=104, gains=(1.5, 0.35, 0.4, 0.5, 0.7, 0.85),
                   brightness=(-0.03, 0.03), contrast=(0.9, 1.1), n=n_target),
    ]


# --- persistence ---------------------------------------------------------------

def sample_checksum(record: SampleRecord):
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(record.image, dtype=np.float32).tobytes())
    h.update(np.ascontiguousarray(record.label, dtype=np.uint8).tobytes())
    return h.hexdigest()


def dataset_checksum(records):
    h = hashlib.sha256()
    for rec in records:
        h.update(f"{rec.domain}/{rec.sample_id}:{sample_checksum(rec)}\n".encode())
    return h.hexdigest()


def save_dataset(out_dir, domains, records_by_domain, image_size):
    out_dir = Path(out_dir)
    entries = []
    all_records = []
    for spec in domains:
        ddir = out_dir / spec.name
        ddir.mkdir(parents=True, exist_ok=True)
        for rec in records_by_domain[spec.name]:
            stem = f"{rec.sample_id:04d}"
            np.save(ddir / f"{stem}_image.npy", rec.image)
            Image.fromarray(rec.label).save(ddir / f"{stem}_label.png")
            entries.append({
                "domain": rec.domain, "id": rec.sample_id, "split": rec.split,
                "image": f"{spec.name}/{stem}_image.npy", "label": f"{spec.name}/{stem}_label.png",
                "checksum": sample_checksum(rec),
            })
            all_records.append(rec)
    manifest = {
        "image_size": image_size,
        "domains": [d.to_dict() for d in domains],
        "samples": entries,
        "checksum": dataset_checksum(all_records),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def load_dataset(data_dir, verify=True):
    """Returns ``(manifest, {domain: [SampleRecord, ...]})``."""
    data_dir = Path(data_dir)
    path = data_dir / "manifest.json"
    if not path.exists():
        raise ValidationError(f"no manifest.json in {data_dir}")
    manifest = json.loads(path.read_text())
    out = {d["name"]: [] for d in manifest["domains"]}
    for e in manifest["samples"]:
        image = np.load(data_dir / e["image"])
        label = np.asarray(Image.open(data_dir / e["label"]), dtype=np.uint8)
        rec = SampleRecord(image, label, e["domain"], e["id"], e["split"])
        if verify and sample_checksum(rec) != e["checksum"]:
            raise ValidationError(f"checksum mismatch for {e['image']}")
        out[e["domain"]].append(rec)
    return manifest, out


def build_benchmark(domains, image_size=128):
    return {spec.name: generate_domain(spec, image_size=image_size) for spec in domains}
