"""Procedural labeled-image corpus: generation, manifest I/O, and loading.

The generator renders every label into pixels by fixed rules so that all
annotations are recoverable from the image alone:

  * protest flag -> dark background with a crowd of bright dots vs. a plain
    light background
  * violence     -> red tint over the scene body, linear in the score
  * each of the 10 attributes -> a distinct colored glyph at a fixed position
  * demographics -> categorical color codes in a strip along the top edge

Everything is a pure function of the generation spec: record i's randomness derives from
(seed, i), and the train/test split is a hash of (split_seed, id).
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

ATTRIBUTE_NAMES = (
    "sign",
    "photo",
    "fire",
    "police",
    "children",
    "group_20",
    "group_100",
    "flag",
    "night",
    "shouting",
)

AGE_BUCKETS = ("0-2", "3-9", "10-19", "20-29", "30-39", "40-49", "50-59", "60-69", "70+")
GENDERS = ("Male", "Female")
RACES = (
    "White",
    "Black",
    "Latino_Hispanic",
    "East Asian",
    "Southeast Asian",
    "Indian",
    "Middle Eastern",
)

MANIFEST_COLUMNS = (
    ["id", "image_path", "protest", "violence"]
    + [f"attr_{i + 1}" for i in range(10)]
    + ["age_bucket", "gender", "race", "split"]
)


class CorpusError(Exception):
    pass


@dataclass
class Demographics:
    age_bucket: str
    gender: str
    race: str

    def __post_init__(self):
        if self.age_bucket not in AGE_BUCKETS:
            raise CorpusError(f"unknown age bucket {self.age_bucket!r}")
        if self.gender not in GENDERS:
            raise CorpusError(f"unknown gender {self.gender!r}")
        if self.race not in RACES:
            raise CorpusError(f"unknown race {self.race!r}")


@dataclass
class AnnotationVector:
    """Per-image labels. violence/attributes are meaningful only when protest=1;
    for protest=0 they are stored as zeros and reported as masked."""

    protest: int
    violence: float
    attributes: tuple
    demographics: Demographics | None = None

    def __post_init__(self):
        if self.protest not in (0, 1):
            raise CorpusError(f"protest must be 0 or 1, got {self.protest}")
        if not 0.0 <= self.violence <= 1.0:
            raise CorpusError(f"violence must be in [0,1], got {self.violence}")
        self.attributes = tuple(int(a) for a in self.attributes)
        if len(self.attributes) != 10 or any(a not in (0, 1) for a in self.attributes):
            raise CorpusError("attributes must be 10 binary flags")
        if self.protest == 0 and (self.violence != 0.0 or any(self.attributes)):
            raise CorpusError("protest=0 rows must carry zero violence/attributes")

    @property
    def masked(self) -> bool:
        return self.protest == 0


@dataclass
class ImageRecord:
    id: str
    image: np.ndarray  # H x W x 3 float32 in [0,1]
    annotation: AnnotationVector
    split: str


@dataclass
class ProceduralSpec:
    n_total: int
    side: int = 32
    protest_rate: float = 0.5
    attribute_rates: tuple = (0.5,) * 10
    with_demographics: bool = True
    demographic_priors: dict | None = None  # keys: age, gender, race -> prob lists
    # optional injected dependence: {"race": {"Black": +0.3}} shifts that
    # group's protest rate
    protest_rate_bias: dict = field(default_factory=dict)
    seed: int = 0
    split_seed: int = 0
    train_frac: float = 0.8

    def validate(self):
        if self.n_total < 10:
            raise CorpusError("n_total must be >= 10")
        if self.side < 16:
            raise CorpusError("side must be >= 16")
        if not 0.0 <= self.protest_rate <= 1.0:
            raise CorpusError("protest_rate must be a probability")
        if len(self.attribute_rates) != 10 or any(not 0 <= r <= 1 for r in self.attribute_rates):
            raise CorpusError("attribute_rates must be 10 probabilities")
        if not 0.0 < self.train_frac < 1.0:
            raise CorpusError("train_frac must be in (0,1)")
        for kind, shifts in self.protest_rate_bias.items():
            if kind not in ("age", "gender", "race"):
                raise CorpusError(f"unknown bias attribute {kind!r}")
            for group in shifts:
                domain = {"age": AGE_BUCKETS, "gender": GENDERS, "race": RACES}[kind]
                if group not in domain:
                    raise CorpusError(f"unknown group {group!r} for {kind}")
        if self.demographic_priors is not None:
            sizes = {"age": len(AGE_BUCKETS), "gender": len(GENDERS), "race": len(RACES)}
            for kind, probs in self.demographic_priors.items():
                if kind not in sizes:
                    raise CorpusError(f"unknown demographic kind {kind!r}")
                probs = np.asarray(probs, dtype=float)
                if probs.size != sizes[kind] or (probs < 0).any() or abs(probs.sum() - 1) > 1e-9:
                    raise CorpusError(f"invalid prior for {kind}")


# fixed palettes; indices match the category tuples above
_AGE_COLORS = np.linspace(0.1, 1.0, len(AGE_BUCKETS))
_GENDER_COLORS = np.array([0.25, 0.85])
_RACE_COLORS = np.linspace(0.15, 0.95, len(RACES))
_ATTR_COLORS = [
    (0.9, 0.9, 0.1),
    (0.1, 0.9, 0.9),
    (0.9, 0.4, 0.1),
    (0.1, 0.1, 0.9),
    (0.9, 0.1, 0.9),
    (0.4, 0.9, 0.1),
    (0.1, 0.5, 0.4),
    (0.9, 0.7, 0.4),
    (0.2, 0.2, 0.2),
    (0.6, 0.1, 0.5),
]


def split_of(record_id: str, split_seed: int, train_frac: float) -> str:
    digest = hashlib.sha256(f"{split_seed}:{record_id}".encode()).digest()
    frac = int.from_bytes(digest[:8], "big") / 2**64
    return "train" if frac < train_frac else "test"


def _sample_annotation(spec: ProceduralSpec, rng: np.random.Generator) -> AnnotationVector:
    demo = None
    if spec.with_demographics:
        priors = spec.demographic_priors or {}

        def draw(kind, domain):
            p = np.asarray(priors.get(kind, np.full(len(domain), 1 / len(domain))), dtype=float)
            return domain[rng.choice(len(domain), p=p / p.sum())]

        demo = Demographics(draw("age", AGE_BUCKETS), draw("gender", GENDERS), draw("race", RACES))

    protest_rate = spec.protest_rate
    if demo is not None:
        for kind, attr in (("age", "age_bucket"), ("gender", "gender"), ("race", "race")):
            shifts = spec.protest_rate_bias.get(kind, {})
            protest_rate += shifts.get(getattr(demo, attr), 0.0)
    protest_rate = min(max(protest_rate, 0.0), 1.0)

    protest = int(rng.random() < protest_rate)
    if protest:
        violence = float(np.round(rng.random(), 4))
        attrs = tuple(int(rng.random() < r) for r in spec.attribute_rates)
    else:
        violence, attrs = 0.0, (0,) * 10
    return AnnotationVector(protest, violence, attrs, demo)


def render_image(annotation: AnnotationVector, side: int, rng: np.random.Generator) -> np.ndarray:
    """Render an annotation to an H x W x 3 float array in [0,1] by fixed rules."""
    a = annotation
    img = np.empty((side, side, 3), dtype=np.float64)
    base = 0.18 if a.protest else 0.78
    img[:] = base
    img += rng.normal(0.0, 0.03, size=img.shape)

    strip_h = max(2, side // 16)
    body = img[strip_h:, :, :]

    if a.protest:
        # crowd of dots; group attributes scale the crowd size
        n_dots = int((10 + 25 * a.attributes[5] + 50 * a.attributes[6]) * (side / 32) ** 2)
        ys = rng.integers(0, body.shape[0], size=n_dots)
        xs = rng.integers(0, side, size=n_dots)
        body[ys, xs, :] = 0.95
        # violence as a monotone red tint over the scene body
        body[:, :, 0] = np.clip(body[:, :, 0] + 0.45 * a.violence, 0, 1)

    # attribute glyphs: one 3x3 colored block per attribute along the bottom rows
    glyph = max(2, side // 12)
    per_row = max(1, side // glyph)
    for j, flag in enumerate(a.attributes):
        if not flag:
            continue
        row, col = divmod(j, per_row)
        y0 = side - (row + 1) * glyph
        x0 = col * glyph
        img[y0 : y0 + glyph, x0 : x0 + glyph, :] = _ATTR_COLORS[j]

    # demographic color codes in the top strip (exact ground truth in pixels)
    if a.demographics is not None:
        third = side // 3
        img[:strip_h, :third, :] = _AGE_COLORS[AGE_BUCKETS.index(a.demographics.age_bucket)]
        img[:strip_h, third : 2 * third, 1] = _GENDER_COLORS[GENDERS.index(a.demographics.gender)]
        img[:strip_h, third : 2 * third, [0, 2]] = 0.1
        img[:strip_h, 2 * third :, 2] = _RACE_COLORS[RACES.index(a.demographics.race)]
        img[:strip_h, 2 * third :, [0, 1]] = 0.1
    else:
        img[:strip_h, :, :] = 0.5

    return np.clip(img, 0.0, 1.0)


def _record_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def annotation_to_row(rec_id, image_path, annotation, split) -> dict:
    row = {
        "id": rec_id,
        "image_path": image_path,
        "protest": annotation.protest,
        "violence": f"{annotation.violence:.4f}",
        "split": split,
    }
    for i, v in enumerate(annotation.attributes):
        row[f"attr_{i + 1}"] = v
    d = annotation.demographics
    row["age_bucket"] = d.age_bucket if d else ""
    row["gender"] = d.gender if d else ""
    row["race"] = d.race if d else ""
    return row


def write_manifest(path: Path, rows: list[dict]):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=MANIFEST_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def save_image(path: Path, image: np.ndarray):
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def generate_corpus(spec: ProceduralSpec, out_dir) -> Path:
    """Render the full procedural corpus; returns the manifest path.

    Deterministic: identical specs produce byte-identical manifests and images.
    """
    spec.validate()
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    try:
        img_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CorpusError(f"cannot create output directory {out_dir}: {e}") from e

    rows = []
    for i in range(spec.n_total):
        rng = _record_rng(spec.seed, i)
        annotation = _sample_annotation(spec, rng)
        image = render_image(annotation, spec.side, rng)
        rec_id = f"proc-{spec.seed:08x}-{i:06d}"
        rel_path = f"images/{rec_id}.png"
        save_image(out_dir / rel_path, image)
        split = split_of(rec_id, spec.split_seed, spec.train_frac)
        rows.append(annotation_to_row(rec_id, rel_path, annotation, split))

    manifest = out_dir / "manifest.csv"
    write_manifest(manifest, rows)
    return manifest


def _parse_row(row: dict, row_num: int) -> tuple[str, str, AnnotationVector, str]:
    try:
        protest = int(row["protest"])
        violence = float(row["violence"])
        attrs = tuple(int(row[f"attr_{i + 1}"]) for i in range(10))
        demo = None
        if row.get("age_bucket"):
            demo = Demographics(row["age_bucket"], row["gender"], row["race"])
        annotation = AnnotationVector(protest, violence, attrs, demo)
        split = row["split"]
        if split not in ("train", "test"):
            raise CorpusError(f"bad split {split!r}")
        return row["id"], row["image_path"], annotation, split
    except (KeyError, ValueError, CorpusError) as e:
        raise CorpusError(f"manifest row {row_num}: {e}") from e


def load_manifest(manifest_path) -> list[tuple[str, str, AnnotationVector, str]]:
    """Parse manifest rows without decoding images."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise CorpusError(f"manifest not found: {manifest_path}")
    out = []
    seen = set()
    with open(manifest_path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or "id" not in reader.fieldnames:
            raise CorpusError("manifest missing header row")
        for row_num, row in enumerate(reader, start=2):
            rec = _parse_row(row, row_num)
            if rec[0] in seen:
                raise CorpusError(f"manifest row {row_num}: duplicate id {rec[0]!r}")
            seen.add(rec[0])
            out.append(rec)
    return out


def load_corpus(manifest_path) -> list[ImageRecord]:
    """Load all records in manifest order, decoding images to float32 [0,1]."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    records = []
    for row_num, (rec_id, rel_path, annotation, split) in enumerate(
        load_manifest(manifest_path), start=2
    ):
        img_path = base / rel_path
        try:
            with Image.open(img_path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        except (OSError, ValueError) as e:
            raise CorpusError(f"manifest row {row_num}: cannot decode {img_path}: {e}") from e
        records.append(ImageRecord(rec_id, arr, annotation, split))
    return records


def corpus_digest(manifest_path) -> str:
    """SHA-256 over the manifest bytes and every referenced image, in order."""
    manifest_path = Path(manifest_path)
    h = hashlib.sha256(manifest_path.read_bytes())
    base = manifest_path.parent
    for _, rel_path, _, _ in load_manifest(manifest_path):
        h.update((base / rel_path).read_bytes())
    return h.hexdigest()
