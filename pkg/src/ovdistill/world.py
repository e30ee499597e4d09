"""Procedural shapes-world benchmark: scenes, rasterization, captions, persistence.

Scenes hold 1-3 non-overlapping colored shapes on a gray background. Box
annotations are emitted for base classes only; captions may mention any class
(that is the only place novel classes appear at training time). A corpus is a
directory with a ``manifest.jsonl`` annotation file plus ``images/`` PNGs, and
generation is a pure function of (seed, config).
"""

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import ConfigError, ParseError
from . import grammar as gr

BACKGROUND = (40, 40, 40)  # uint8 palette; /255 gives exactly representable floats

COLOR_RGB = {
    "red": (220, 40, 40),
    "green": (40, 190, 60),
    "blue": (50, 90, 230),
    "yellow": (230, 210, 50),
}

RELATION_NAMES = ("above", "below", "left_of", "right_of")


@dataclass(frozen=True)
class ClassSplit:
    base: tuple
    novel: tuple

    def __post_init__(self):
        if set(self.base) & set(self.novel):
            raise ConfigError("base and novel class sets overlap")
        if not self.base and not self.novel:
            raise ConfigError("class split is empty")

    @property
    def all(self):
        return tuple(self.base) + tuple(self.novel)


def default_split():
    return ClassSplit(base=gr.BASE_CLASSES, novel=gr.NOVEL_CLASSES)


@dataclass(frozen=True)
class SceneObject:
    cls: str
    color: str
    cx: float
    cy: float
    size: float

    @property
    def box(self):
        h = self.size / 2.0
        return (self.cx - h, self.cy - h, self.cx + h, self.cy + h)


@dataclass(frozen=True)
class NoiseInfo:
    """Planted caption noise: test-only ground truth, never read by training code."""

    caption_position: int
    original: str
    planted: str


@dataclass
class SceneSpec:
    seed: int
    image_size: tuple
    objects: list
    relations: list  # (subject index, relation name, object index), all geometrically true
    caption: str
    mentioned: list  # object indices the caption talks about, in mention order
    noise: NoiseInfo | None = None


@dataclass
class DetectionSample:
    image: np.ndarray  # (h, w, 3) float32 in [0, 1]
    boxes: np.ndarray  # (n, 4) float32 x1,y1,x2,y2 pixels
    labels: list       # base-class names only


@dataclass
class CaptionSample:
    image: np.ndarray
    caption_text: str


@dataclass
class WorldConfig:
    seed: int = 0
    image_size: tuple = (64, 64)
    min_objects: int = 1
    max_objects: int = 3
    size_min: float = 12.0
    size_max: float = 20.0
    relation_margin: float = 4.0
    noise_rate: float = 0.0
    n_caption: int = 2000
    n_detection: int = 1000
    n_eval: int = 500
    base_classes: tuple = gr.BASE_CLASSES
    novel_classes: tuple = gr.NOVEL_CLASSES

    def split(self):
        return ClassSplit(base=tuple(self.base_classes), novel=tuple(self.novel_classes))


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------

def _pixel_centers(h, w):
    ys = np.arange(h, dtype=np.float64) + 0.5
    xs = np.arange(w, dtype=np.float64) + 0.5
    return np.meshgrid(xs, ys)  # (X, Y), each (h, w)


def shape_mask(cls, cx, cy, size, h, w):
    """Boolean foreground mask of one shape, evaluated at pixel centers.

    Squares use half-open intervals so an integer side length s covers exactly
    s*s pixels.
    """
    X, Y = _pixel_centers(h, w)
    dx, dy = X - cx, Y - cy
    half = size / 2.0
    if cls == "square":
        return (-half <= dx) & (dx < half) & (-half <= dy) & (dy < half)
    if cls == "circle":
        return dx**2 + dy**2 <= half**2
    if cls == "triangle":
        # upward isoceles: apex at cy-half, base width `size` at cy+half
        t = (Y - (cy - half)) / size  # 0 at apex, 1 at base
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= half * t)
    if cls == "star":
        # five-point star via a piecewise-linear polar boundary
        ang = np.arctan2(dy, dx) + np.pi / 2.0  # 0 points up
        r = np.sqrt(dx**2 + dy**2)
        period = 2 * np.pi / 5
        phase = np.abs(((ang % period) + period) % period - period / 2) / (period / 2)
        inner = 0.42 * half
        boundary = inner + (half - inner) * phase  # outer radius at point angles
        return r <= boundary
    if cls == "cross":
        arm = size / 6.0
        horiz = (np.abs(dy) <= arm) & (np.abs(dx) <= half)
        vert = (np.abs(dx) <= arm) & (np.abs(dy) <= half)
        return horiz | vert
    if cls == "ring":
        r2 = dx**2 + dy**2
        return (r2 <= half**2) & (r2 >= (0.6 * half) ** 2)
    raise ConfigError(f"unknown shape class: {cls!r}")


def render_image(spec):
    """Deterministic rasterization: filled shapes painted in order, no anti-aliasing."""
    h, w = spec.image_size
    img = np.empty((h, w, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    for obj in spec.objects:
        mask = shape_mask(obj.cls, obj.cx, obj.cy, obj.size, h, w)
        img[mask] = COLOR_RGB[obj.color]
    return img.astype(np.float32) / np.float32(255.0)


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------

def _boxes_separated(box_a, box_b, gap=2.0):
    ax1, ay1, ax2, ay2 = box_a
    bx1, by1, bx2, by2 = box_b
    return ax2 + gap <= bx1 or bx2 + gap <= ax1 or ay2 + gap <= by1 or by2 + gap <= ay1


def true_relations(objects, margin):
    """All ordered (subject, relation, object) triples whose predicate holds."""
    out = []
    for i, a in enumerate(objects):
        for j, b in enumerate(objects):
            if i == j:
                continue
            if a.cy < b.cy - margin:
                out.append((i, "above", j))
            if a.cy > b.cy + margin:
                out.append((i, "below", j))
            if a.cx < b.cx - margin:
                out.append((i, "left_of", j))
            if a.cx > b.cx + margin:
                out.append((i, "right_of", j))
    return out


def _sample_objects(rng, config, classes, forced_classes=()):
    h, w = config.image_size
    n = int(rng.integers(config.min_objects, config.max_objects + 1))
    n = max(n, len(forced_classes))
    objects = []
    for k in range(n):
        if k < len(forced_classes):
            cls = forced_classes[k]
        else:
            cls = classes[rng.integers(len(classes))]
        color = gr.COLOR_WORDS[rng.integers(len(gr.COLOR_WORDS))]
        placed = False
        for _ in range(200):
            size = float(np.round(rng.uniform(config.size_min, config.size_max)))
            half = size / 2.0
            cx = float(np.round(rng.uniform(half + 1, w - half - 1)))
            cy = float(np.round(rng.uniform(half + 1, h - half - 1)))
            cand = SceneObject(cls, color, cx, cy, size)
            if all(_boxes_separated(cand.box, o.box) for o in objects):
                objects.append(cand)
                placed = True
                break
        if not placed and k < len(forced_classes):
            # forced classes must land; retry the whole scene by caller
            return None
    return objects


def _build_caption(rng, grammar, objects, relations):
    """Pick mentioned objects and render the caption text."""
    if len(objects) == 1:
        obj = objects[0]
        return grammar.render_single(obj.color, obj.cls), [0], None
    pair_rels = [r for r in relations]
    if pair_rels:
        s, rel, o = pair_rels[rng.integers(len(pair_rels))]
        a, b = objects[s], objects[o]
        text = grammar.render_related(a.color, a.cls, rel, b.color, b.cls)
        return text, [s, o], (s, rel, o)
    idx = list(rng.choice(len(objects), size=2, replace=False))
    a, b = objects[idx[0]], objects[idx[1]]
    return grammar.render_pair(a.color, a.cls, b.color, b.cls), idx, None


def _plant_noise(rng, caption, mentioned, objects, classes):
    """Swap one mentioned concept word for a class absent from the scene."""
    present = {o.cls for o in objects}
    absent = [c for c in classes if c not in present]
    if not absent:
        return caption, None
    words = caption.split(" ")
    concept_positions = [p for p, wd in enumerate(words) if wd in classes]
    pick = int(rng.integers(len(concept_positions)))
    pos = concept_positions[pick]
    original = words[pos]
    planted = absent[rng.integers(len(absent))]
    words[pos] = planted
    return " ".join(words), NoiseInfo(caption_position=pos, original=original, planted=planted)


def generate_scene(seed, split, noise_rate=0.0, config=None, grammar=None, require_mixed=False):
    """Generate one scene: spec, optional base-class detection sample, caption sample.

    The detection sample is None when the scene holds no base-class object.
    With probability ``noise_rate`` one caption concept is swapped for a class
    absent from the scene; the swap is recorded in the spec for tests only.
    """
    if not 0.0 <= noise_rate <= 1.0:
        raise ConfigError("noise_rate must lie in [0, 1]")
    config = config or WorldConfig()
    grammar = grammar or gr.Grammar()
    classes = split.all
    if not classes:
        raise ConfigError("class split is empty")

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    objects = None
    while objects is None:
        forced = ()
        if require_mixed:
            if not split.base or not split.novel:
                raise ConfigError("mixed scenes need both base and novel classes")
            forced = (
                split.base[rng.integers(len(split.base))],
                split.novel[rng.integers(len(split.novel))],
            )
        objects = _sample_objects(rng, config, classes, forced_classes=forced)

    relations = true_relations(objects, config.relation_margin)
    caption, mentioned, _ = _build_caption(rng, grammar, objects, relations)

    noise = None
    if noise_rate > 0 and rng.random() < noise_rate:
        caption, noise = _plant_noise(rng, caption, mentioned, objects, classes)

    spec = SceneSpec(
        seed=seed,
        image_size=config.image_size,
        objects=objects,
        relations=relations,
        caption=caption,
        mentioned=mentioned,
        noise=noise,
    )
    image = render_image(spec)

    base_objs = [o for o in objects if o.cls in split.base]
    det = None
    if base_objs:
        det = DetectionSample(
            image=image,
            boxes=np.array([o.box for o in base_objs], dtype=np.float32),
            labels=[o.cls for o in base_objs],
        )
    cap = CaptionSample(image=image, caption_text=caption)
    return spec, det, cap


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

@dataclass
class SampleRecord:
    """One manifest line. ``objects`` carries full ground truth (all classes)
    for evaluation; ``boxes``/``labels`` are the base-class training view."""

    image: str
    objects: list = field(default_factory=list)  # dicts: cls,color,cx,cy,size
    relations: list = field(default_factory=list)
    boxes: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    caption: str | None = None
    noise: dict | None = None
    seed: int = 0

    @classmethod
    def from_scene(cls, spec, split, image_name):
        base = [o for o in spec.objects if o.cls in split.base]
        return cls(
            image=image_name,
            objects=[dataclasses.asdict(o) for o in spec.objects],
            relations=[list(r) for r in spec.relations],
            boxes=[list(o.box) for o in base],
            labels=[o.cls for o in base],
            caption=spec.caption,
            noise=dataclasses.asdict(spec.noise) if spec.noise else None,
            seed=spec.seed,
        )

    def gt_boxes_all(self):
        boxes, labels = [], []
        for o in self.objects:
            half = o["size"] / 2.0
            boxes.append([o["cx"] - half, o["cy"] - half, o["cx"] + half, o["cy"] + half])
            labels.append(o["cls"])
        return np.array(boxes, dtype=np.float32).reshape(-1, 4), labels


def save_image(image, path):
    data = np.round(image * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def load_image(path):
    with Image.open(path) as im:
        data = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return data.astype(np.float32) / np.float32(255.0)


def write_dataset(path, records, images):
    """Persist a corpus: ``manifest.jsonl`` plus lossless PNGs under ``images/``."""
    os.makedirs(os.path.join(path, "images"), exist_ok=True)
    with open(os.path.join(path, "manifest.jsonl"), "w", encoding="utf-8") as fh:
        for rec, img in zip(records, images):
            save_image(img, os.path.join(path, rec.image))
            fh.write(json.dumps(dataclasses.asdict(rec), sort_keys=True) + "\n")


def read_dataset(path, load_images=True):
    """Read a corpus back; raises ParseError with the line number on malformed lines."""
    manifest = os.path.join(path, "manifest.jsonl")
    records, images = [], []
    with open(manifest, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                payload = json.loads(line)
                rec = SampleRecord(**payload)
            except (json.JSONDecodeError, TypeError) as exc:
                raise ParseError(str(exc), line_number=lineno) from None
            records.append(rec)
            if load_images:
                images.append(load_image(os.path.join(path, rec.image)))
    return records, images


def build_corpus(config, out_dir, grammar=None):
    """Generate and persist the three corpora: detection, captions, eval.

    Detection scenes are drawn until ``n_detection`` of them contain at least
    one base-class object; eval scenes always mix base and novel objects.
    Returns the written split directories.
    """
    split = config.split()
    grammar = grammar or gr.Grammar()
    out = {}

    def scene_seed(stream, i):
        return int(np.random.SeedSequence([config.seed, stream, i]).generate_state(1)[0])

    # caption corpus: any scene
    records, images = [], []
    for i in range(config.n_caption):
        spec, _, cap = generate_scene(
            scene_seed(1, i), split, config.noise_rate, config, grammar
        )
        name = f"images/{i:06d}.png"
        records.append(SampleRecord.from_scene(spec, split, name))
        images.append(cap.image)
    cap_dir = os.path.join(out_dir, "captions")
    write_dataset(cap_dir, records, images)
    out["captions"] = cap_dir

    # detection corpus: base-class-only scenes. Novel objects would enter the
    # classification loss as unlabeled background and train their features
    # into the background class.
    base_split = ClassSplit(base=split.base, novel=())
    records, images = [], []
    i = 0
    while len(records) < config.n_detection:
        spec, det, _ = generate_scene(scene_seed(2, i), base_split, 0.0, config, grammar)
        i += 1
        if det is None:
            continue
        name = f"images/{len(records):06d}.png"
        records.append(SampleRecord.from_scene(spec, split, name))
        images.append(det.image)
    det_dir = os.path.join(out_dir, "detection")
    write_dataset(det_dir, records, images)
    out["detection"] = det_dir

    # eval corpus: mixed scenes, full ground truth, clean captions
    records, images = [], []
    for i in range(config.n_eval):
        spec, _, cap = generate_scene(
            scene_seed(3, i), split, 0.0, config, grammar, require_mixed=True
        )
        name = f"images/{i:06d}.png"
        records.append(SampleRecord.from_scene(spec, split, name))
        images.append(cap.image)
    eval_dir = os.path.join(out_dir, "eval")
    write_dataset(eval_dir, records, images)
    out["eval"] = eval_dir

    with open(os.path.join(out_dir, "world.json"), "w", encoding="utf-8") as fh:
        json.dump(dataclasses.asdict(config), fh, indent=2, default=list)
    return out


def load_world_config(data_dir):
    path = os.path.join(data_dir, "world.json")
    if not os.path.exists(path):
        raise ConfigError(f"no world.json under {data_dir!r}; not a generated dataset")
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    payload["image_size"] = tuple(payload["image_size"])
    payload["base_classes"] = tuple(payload["base_classes"])
    payload["novel_classes"] = tuple(payload["novel_classes"])
    return WorldConfig(**payload)
