"""Synthetic tableware scenes with object states, grasp regions and dialogs.

A scene is a set of objects on a ``grid_size`` lattice over the unit square.
Each object carries a category, a state class (which fixes its state flags),
a full box and a grasp box derived by fixed rules. Every object yields two
referring phrases; every (phrase, task) pair yields three dialogs.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import geometry
from .geometry import BoxN

CATEGORIES = ("plate", "bowl", "cup", "mug", "glass", "bottle", "spoon", "fork", "knife", "napkin")
FLAG_NAMES = ("semi_solid", "solid", "liquid", "body_residue", "opened", "handle_residue")
FEATURE_WIDTH = len(CATEGORIES) + len(FLAG_NAMES) + 1

DISHES = ("plate", "bowl")
DRINKWARE = ("cup", "mug", "glass")
CUTLERY = ("spoon", "fork", "knife")
CONTAINERS = DISHES + DRINKWARE + ("bottle",)

# state class -> (contents, hygiene, cap, fold, residue_locus)
STATE_CLASSES = {
    "dish": {
        "empty_clean": ("empty", "clean", "n/a", "n/a", "n/a"),
        "empty_dirty": ("empty", "dirty", "n/a", "n/a", "n/a"),
        "semi_solid": ("semi-solid", "dirty", "n/a", "n/a", "n/a"),
        "solid": ("solid", "dirty", "n/a", "n/a", "n/a"),
    },
    "drinkware": {
        "empty_clean": ("empty", "clean", "n/a", "n/a", "n/a"),
        "empty_dirty": ("empty", "dirty", "n/a", "n/a", "n/a"),
        "liquid": ("liquid", "dirty", "n/a", "n/a", "n/a"),
    },
    "bottle": {
        "cap_open": ("liquid", "clean", "open", "n/a", "n/a"),
        "cap_closed": ("liquid", "clean", "closed", "n/a", "n/a"),
    },
    "cutlery": {
        "clean": ("none", "clean", "n/a", "n/a", "n/a"),
        "dirty": ("none", "dirty", "n/a", "n/a", "whole"),
        "dirty_blade": ("none", "dirty", "n/a", "n/a", "blade"),
        "dirty_handle": ("none", "dirty", "n/a", "n/a", "handle"),
    },
    "napkin": {
        "clean": ("none", "clean", "n/a", "folded", "n/a"),
        "dirty": ("none", "dirty", "n/a", "unfolded", "n/a"),
    },
}

# Working end of each cutlery item, used in phrases.
_PART = {"spoon": "head", "fork": "head", "knife": "blade"}

# size ranges (fraction of the scene side) as (w_lo, w_hi, h_lo, h_hi)
_SIZES = {
    "plate": (0.25, 0.375, 0.25, 0.375),
    "bowl": (0.1875, 0.3125, 0.1875, 0.3125),
    "cup": (0.125, 0.1875, 0.125, 0.1875),
    "mug": (0.125, 0.1875, 0.125, 0.1875),
    "glass": (0.125, 0.1875, 0.125, 0.1875),
    "bottle": (0.125, 0.125, 0.1875, 0.3125),
    "spoon": (0.0625, 0.0625, 0.25, 0.3125),
    "fork": (0.0625, 0.0625, 0.25, 0.3125),
    "knife": (0.0625, 0.0625, 0.25, 0.375),
    "napkin": (0.1875, 0.3125, 0.1875, 0.3125),
}

MAX_PAIR_IOU = 0.3
PLACEMENT_ATTEMPTS = 1000


class SceneError(ValueError):
    pass


class InconsistentState(SceneError):
    pass


class PlacementFailed(SceneError):
    pass


class EmptySplit(SceneError):
    pass


class SchemaViolation(SceneError):
    pass


def family(category: str) -> str:
    if category in DISHES:
        return "dish"
    if category in DRINKWARE:
        return "drinkware"
    if category in CUTLERY:
        return "cutlery"
    if category in ("bottle", "napkin"):
        return category
    raise InconsistentState(f"unknown category {category!r}")


@dataclass(frozen=True)
class ObjectSpec:
    category: str
    state: str
    box: BoxN
    z: int

    def __post_init__(self):
        classes = STATE_CLASSES[family(self.category)]
        if self.state not in classes:
            raise InconsistentState(f"{self.category} cannot be in state {self.state!r}")
        if geometry.area(self.box) < 1e-4:
            raise SceneError(f"degenerate {self.category} box {self.box}")

    @property
    def contents(self) -> str:
        return STATE_CLASSES[family(self.category)][self.state][0]

    @property
    def hygiene(self) -> str:
        return STATE_CLASSES[family(self.category)][self.state][1]

    @property
    def cap(self) -> str:
        return STATE_CLASSES[family(self.category)][self.state][2]

    @property
    def fold(self) -> str:
        return STATE_CLASSES[family(self.category)][self.state][3]

    @property
    def residue_locus(self) -> str:
        return STATE_CLASSES[family(self.category)][self.state][4]

    @property
    def grasp(self) -> BoxN:
        return grasp_rule(self)

    def flags(self) -> np.ndarray:
        """State flags in :data:`FLAG_NAMES` order."""
        f = np.zeros(len(FLAG_NAMES))
        f[0] = self.contents == "semi-solid"
        f[1] = self.contents == "solid"
        f[2] = self.contents == "liquid"
        if self.category in CUTLERY:
            f[3] = self.residue_locus in ("whole", "blade")
            f[5] = self.residue_locus in ("whole", "handle")
        else:
            f[3] = self.hygiene == "dirty"
        f[4] = self.cap == "open" or self.fold == "unfolded"
        return f

    def features(self) -> np.ndarray:
        onehot = np.zeros(len(CATEGORIES))
        onehot[CATEGORIES.index(self.category)] = 1.0
        return np.concatenate([onehot, self.flags(), [1.0]])


@dataclass(frozen=True)
class SceneSpec:
    scene_id: int
    complexity: str
    objects: tuple[ObjectSpec, ...]
    seed: int


def grasp_rule(o: ObjectSpec) -> BoxN:
    """Graspable region of an object given its state.

    * container holding semi-solid food or liquid: the left quarter of the box
      (rim band), full height
    * container holding solid food: the food itself, taken as the central half
      of the box in each dimension
    * empty container, napkin, clean or fully dirty cutlery: the whole box
    * cutlery with residue on one end: the other half along the long axis; the
      working end (blade/head) is the right or bottom half
    """
    b = o.box
    w, h = b.width, b.height
    if o.category in CONTAINERS:
        if o.contents in ("semi-solid", "liquid"):
            return BoxN(b.x1, b.y1, b.x1 + 0.25 * w, b.y2)
        if o.contents == "solid":
            return BoxN(b.x1 + 0.25 * w, b.y1 + 0.25 * h, b.x2 - 0.25 * w, b.y2 - 0.25 * h)
        if o.contents == "empty":
            return b
        raise InconsistentState(f"{o.category} with contents {o.contents!r}")
    if o.category in CUTLERY:
        if o.residue_locus in ("n/a", "whole"):
            return b
        horizontal = w >= h
        handle_half = (BoxN(b.x1, b.y1, b.x1 + 0.5 * w, b.y2) if horizontal
                       else BoxN(b.x1, b.y1, b.x2, b.y1 + 0.5 * h))
        working_half = (BoxN(b.x1 + 0.5 * w, b.y1, b.x2, b.y2) if horizontal
                        else BoxN(b.x1, b.y1 + 0.5 * h, b.x2, b.y2))
        return handle_half if o.residue_locus == "blade" else working_half
    if o.category == "napkin":
        return b
    raise InconsistentState(f"no grasp rule for {o.category!r}")


def phrases_for_state(category: str, state: str) -> tuple[str, str]:
    c = category
    fam = family(c)
    if state not in STATE_CLASSES[fam]:
        raise InconsistentState(f"{c} cannot be in state {state!r}")
    if fam in ("dish", "drinkware"):
        table = {
            "empty_clean": (f"empty {c}", f"clean {c}"),
            "empty_dirty": (f"dirty {c}", f"{c} with residue"),
            "semi_solid": (f"{c} with noodles", f"used {c}"),
            "solid": (f"{c} with an apple", f"{c} holding food"),
            "liquid": (f"{c} with juice", f"used {c}"),
        }
        return table[state]
    if fam == "bottle":
        return {"cap_open": ("open bottle", "possibly used bottle"),
                "cap_closed": ("closed bottle", "possibly unused bottle")}[state]
    if fam == "cutlery":
        part = _PART[c]
        return {"clean": (f"clean {c}", f"unused {c}"),
                "dirty": (f"dirty {c}", f"used {c}"),
                "dirty_blade": (f"{c} with a dirty {part}", f"{c} with a clean handle"),
                "dirty_handle": (f"{c} with a dirty handle", f"{c} with a clean {part}")}[state]
    return {"clean": ("clean napkin", "unused napkin"),
            "dirty": ("dirty napkin", "used napkin")}[state]


def expressions_for(o: ObjectSpec) -> tuple[str, str]:
    return phrases_for_state(o.category, o.state)


def all_phrases() -> list[str]:
    out = []
    for c in CATEGORIES:
        for s in STATE_CLASSES[family(c)]:
            out.extend(phrases_for_state(c, s))
    return out


def phrase_table() -> dict[str, tuple[str, str]]:
    """Reverse map phrase -> (category, state class)."""
    table: dict[str, tuple[str, str]] = {}
    for c in CATEGORIES:
        for s in STATE_CLASSES[family(c)]:
            for p in phrases_for_state(c, s):
                if p in table:
                    raise AssertionError(f"phrase {p!r} is not unique")
                table[p] = (c, s)
    return table


@dataclass
class GenConfig:
    n_scenes: int = 44
    complexity_mix: float = 0.33
    test_fraction: float = 0.112
    seed: int = 0
    grid_size: int = 16
    allow_ambiguous: bool = False
    objects_per_scene: tuple[int, int] = (2, 5)
    complex_objects_per_scene: tuple[int, int] = (4, 7)
    category_weights: dict | None = None

    def __post_init__(self):
        self.objects_per_scene = tuple(self.objects_per_scene)
        self.complex_objects_per_scene = tuple(self.complex_objects_per_scene)
        if self.n_scenes < 1:
            raise SceneError("n_scenes must be >= 1")
        if not 0.0 <= self.complexity_mix <= 1.0:
            raise SceneError("complexity_mix must be in [0, 1]")
        if not 0.0 < self.test_fraction < 1.0:
            raise SceneError("test_fraction must be in (0, 1)")
        if self.grid_size < 2:
            raise SceneError("grid_size must be >= 2")
        lo, hi = self.objects_per_scene
        if not 1 <= lo <= hi <= len(CATEGORIES):
            raise SceneError("objects_per_scene must satisfy 1 <= lo <= hi <= 10")
        lo, hi = self.complex_objects_per_scene
        if not 2 <= lo <= hi:
            raise SceneError("complex_objects_per_scene must satisfy 2 <= lo <= hi")
        if self.category_weights is not None:
            unknown = set(self.category_weights) - set(CATEGORIES)
            if unknown:
                raise SceneError(f"category_weights has unknown categories {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise SceneError(f"unknown config field(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["objects_per_scene"] = list(self.objects_per_scene)
        d["complex_objects_per_scene"] = list(self.complex_objects_per_scene)
        return d

    def weights(self) -> np.ndarray:
        if self.category_weights is None:
            w = np.ones(len(CATEGORIES))
        else:
            w = np.array([float(self.category_weights.get(c, 0.0)) for c in CATEGORIES])
        if w.sum() <= 0:
            raise SceneError("category weights sum to zero")
        return w / w.sum()


def scene_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def _sample_box(rng, category, grid_size):
    w_lo, w_hi, h_lo, h_hi = _SIZES[category]
    if category in CUTLERY and rng.random() < 0.5:
        w_lo, w_hi, h_lo, h_hi = h_lo, h_hi, w_lo, w_hi
    wc = max(1, int(rng.integers(round(w_lo * grid_size), round(w_hi * grid_size) + 1)))
    hc = max(1, int(rng.integers(round(h_lo * grid_size), round(h_hi * grid_size) + 1)))
    x = int(rng.integers(0, grid_size - wc + 1))
    y = int(rng.integers(0, grid_size - hc + 1))
    return BoxN(x / grid_size, y / grid_size, (x + wc) / grid_size, (y + hc) / grid_size)


def _choose_objects(rng, complexity, cfg):
    probs = cfg.weights()
    if complexity == "simple":
        lo, hi = cfg.objects_per_scene
        avail = int(np.count_nonzero(probs))
        n = min(int(rng.integers(lo, hi + 1)), avail)
        cats = rng.choice(len(CATEGORIES), size=n, replace=False, p=probs)
        return [(CATEGORIES[c], str(rng.choice(list(STATE_CLASSES[family(CATEGORIES[c])]))))
                for c in cats]
    lo, hi = cfg.complex_objects_per_scene
    n = int(rng.integers(lo, hi + 1))
    dup = CATEGORIES[int(rng.choice(len(CATEGORIES), p=probs))]
    classes = list(STATE_CLASSES[family(dup)])
    n_dup = min(len(classes), 2 + int(rng.random() < 0.3))
    states = rng.choice(classes, size=n_dup, replace=False)
    chosen = [(dup, str(s)) for s in states]
    while len(chosen) < n:
        c = CATEGORIES[int(rng.choice(len(CATEGORIES), p=probs))]
        chosen.append((c, str(rng.choice(list(STATE_CLASSES[family(c)])))))
    return chosen


def sample_scene(seed: int, complexity: str, cfg: GenConfig, scene_id: int = 0) -> SceneSpec:
    """Draw one scene; objects are placed by rejection so pairwise IoU <= 0.3."""
    if complexity not in ("simple", "complex"):
        raise SceneError(f"unknown complexity {complexity!r}")
    rng = np.random.default_rng(seed)
    chosen = _choose_objects(rng, complexity, cfg)
    order = rng.permutation(len(chosen))
    placed: list[tuple[str, str, BoxN]] = []
    attempts = 0
    for cat, state in chosen:
        while True:
            attempts += 1
            if attempts > PLACEMENT_ATTEMPTS:
                raise PlacementFailed(
                    f"scene {scene_id}: could not place {len(chosen)} objects in "
                    f"{PLACEMENT_ATTEMPTS} attempts")
            box = _sample_box(rng, cat, cfg.grid_size)
            if all(geometry.iou(box, other) <= MAX_PAIR_IOU for _, _, other in placed):
                placed.append((cat, state, box))
                break
    objects = tuple(ObjectSpec(cat, state, box, int(order[i]))
                    for i, (cat, state, box) in enumerate(placed))
    return SceneSpec(scene_id, complexity, objects, int(seed))


def rasterize(s: SceneSpec, grid_size: int = 16) -> np.ndarray:
    """Row-major ``(G*G, FEATURE_WIDTH)`` cell features; higher z wins overlaps."""
    grid = np.zeros((grid_size, grid_size, FEATURE_WIDTH))
    centers = (np.arange(grid_size) + 0.5) / grid_size
    for o in sorted(s.objects, key=lambda o: o.z):
        b = o.box
        cols = (centers >= b.x1) & (centers <= b.x2)
        rows = (centers >= b.y1) & (centers <= b.y2)
        grid[np.ix_(rows, cols)] = o.features()
    return grid.reshape(grid_size * grid_size, FEATURE_WIDTH)


@dataclass
class Expression:
    scene_id: int
    object_index: int
    task: str
    phrase: str


def instantiate_dialogs(s: SceneSpec, vocab, allow_ambiguous: bool = False,
                        start_id: int = 0):
    """Dialog samples for a scene, plus the expressions they came from.

    Each (object, phrase, task) expression yields the three templates of its
    task. Phrases shared by two objects of the scene are skipped unless
    ``allow_ambiguous``.
    """
    from .codec import TASKS, render_dialog

    counts: dict[str, int] = {}
    for o in s.objects:
        for p in expressions_for(o):
            counts[p] = counts.get(p, 0) + 1
    samples, expressions = [], []
    sid = start_id
    for oi, o in enumerate(s.objects):
        for phrase in expressions_for(o):
            if counts[phrase] > 1 and not allow_ambiguous:
                continue
            for task in TASKS:
                gold = o.box if task == "detection" else grasp_rule(o)
                expressions.append(Expression(s.scene_id, oi, task, phrase))
                for variant in range(3):
                    samples.append(render_dialog(task, variant, phrase, gold, vocab,
                                                 sample_id=sid, scene_id=s.scene_id,
                                                 object_index=oi))
                    sid += 1
    return samples, expressions


def split_dataset(scene_ids, test_fraction: float = 0.112, seed: int = 0):
    """Scene-level split; returns ``(train_ids, test_ids)`` in ascending order."""
    if not 0.0 < test_fraction < 1.0:
        raise SceneError("test_fraction must be in (0, 1)")
    ids = sorted(scene_ids)
    n_test = int(math.floor(test_fraction * len(ids) + 0.5))
    if n_test == 0 or n_test == len(ids):
        raise EmptySplit(f"test_fraction {test_fraction} of {len(ids)} scenes leaves a split empty")
    perm = np.random.default_rng(seed).permutation(len(ids))
    test = sorted(ids[i] for i in perm[:n_test])
    test_set = set(test)
    return [i for i in ids if i not in test_set], test


@dataclass
class Dataset:
    config: GenConfig
    scenes: list[SceneSpec]
    samples: list
    split: dict[int, str] = field(default_factory=dict)

    def scene(self, scene_id: int) -> SceneSpec:
        return self._scene_index()[scene_id]

    def _scene_index(self):
        idx = getattr(self, "_idx", None)
        if idx is None or len(idx) != len(self.scenes):
            idx = {s.scene_id: s for s in self.scenes}
            self._idx = idx
        return idx

    def samples_in(self, split: str) -> list:
        return [x for x in self.samples if self.split[x.scene_id] == split]

    def n_expressions(self) -> int:
        return len({(x.scene_id, x.object_index, x.task, x.phrase) for x in self.samples})

    def __eq__(self, other):
        return (isinstance(other, Dataset) and self.config == other.config
                and self.scenes == other.scenes and self.samples == other.samples
                and self.split == other.split)


def build_dataset(cfg: GenConfig, vocab=None) -> Dataset:
    from .codec import Vocab

    vocab = vocab or Vocab.default()
    rng = np.random.default_rng(cfg.seed)
    n_complex = int(math.floor(cfg.complexity_mix * cfg.n_scenes + 0.5))
    kinds = np.array(["complex"] * n_complex + ["simple"] * (cfg.n_scenes - n_complex))
    kinds = kinds[rng.permutation(cfg.n_scenes)]
    scenes, samples = [], []
    for i in range(cfg.n_scenes):
        s = sample_scene(scene_seed(cfg.seed, i), str(kinds[i]), cfg, scene_id=i)
        scenes.append(s)
        new, _ = instantiate_dialogs(s, vocab, cfg.allow_ambiguous, start_id=len(samples))
        samples.extend(new)
    train, test = split_dataset([s.scene_id for s in scenes], cfg.test_fraction, cfg.seed)
    split = {i: "train" for i in train}
    split.update({i: "test" for i in test})
    return Dataset(cfg, scenes, samples, split)


# -- persistence -------------------------------------------------------------

SCENES_FILE = "scenes.jsonl"
SAMPLES_FILE = "samples.jsonl"
CONFIG_FILE = "config.json"

_SCENE_FIELDS = ("scene_id", "complexity", "seed", "split", "n_samples", "objects")
_OBJECT_FIELDS = ("category", "state", "box", "z")
_SAMPLE_FIELDS = ("sample_id", "scene_id", "object_index", "task", "variant", "phrase",
                  "gold", "prompt", "response")


def _dumps(record: dict) -> str:
    return json.dumps(record, ensure_ascii=False, separators=(",", ":"))


def write_dataset(ds: Dataset, path, vocab=None) -> None:
    from .codec import Vocab, prompt_text, response_text

    vocab = vocab or Vocab.default()
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    per_scene: dict[int, int] = {}
    for x in ds.samples:
        per_scene[x.scene_id] = per_scene.get(x.scene_id, 0) + 1
    with open(path / CONFIG_FILE, "w", encoding="utf-8") as f:
        f.write(json.dumps(ds.config.to_dict(), indent=2, sort_keys=True) + "\n")
    with open(path / SCENES_FILE, "w", encoding="utf-8") as f:
        for s in ds.scenes:
            f.write(_dumps({
                "scene_id": s.scene_id, "complexity": s.complexity, "seed": s.seed,
                "split": ds.split[s.scene_id], "n_samples": per_scene.get(s.scene_id, 0),
                "objects": [{"category": o.category, "state": o.state,
                             "box": o.box.to_list(), "z": o.z} for o in s.objects],
            }) + "\n")
    with open(path / SAMPLES_FILE, "w", encoding="utf-8") as f:
        for x in ds.samples:
            f.write(_dumps({
                "sample_id": x.sample_id, "scene_id": x.scene_id,
                "object_index": x.object_index, "task": x.task, "variant": x.variant,
                "phrase": x.phrase, "gold": x.gold.to_list(),
                "prompt": prompt_text(x, vocab), "response": response_text(x.response, vocab),
            }) + "\n")


def _records(file: Path, fields):
    with open(file, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaViolation(f"{file.name}:{lineno}: malformed record ({e.msg})") from None
            if not isinstance(rec, dict) or tuple(rec) != tuple(fields):
                raise SchemaViolation(
                    f"{file.name}:{lineno}: expected fields {list(fields)}, "
                    f"got {list(rec) if isinstance(rec, dict) else type(rec).__name__}")
            if not line.endswith("\n"):
                raise SchemaViolation(f"{file.name}:{lineno}: truncated record")
            yield lineno, rec


def read_dataset(path, vocab=None) -> Dataset:
    from .codec import DialogSample, Vocab, split_words

    vocab = vocab or Vocab.default()
    path = Path(path)
    try:
        cfg = GenConfig.from_dict(json.loads((path / CONFIG_FILE).read_text(encoding="utf-8")))
    except (json.JSONDecodeError, TypeError) as e:
        raise SchemaViolation(f"{CONFIG_FILE}: {e}") from None
    scenes, split, expected = [], {}, {}
    for lineno, rec in _records(path / SCENES_FILE, _SCENE_FIELDS):
        try:
            objs = []
            for o in rec["objects"]:
                if tuple(o) != _OBJECT_FIELDS:
                    raise SchemaViolation(f"object fields {list(o)}")
                objs.append(ObjectSpec(o["category"], o["state"], BoxN.from_seq(o["box"]), o["z"]))
            if rec["split"] not in ("train", "test"):
                raise SchemaViolation(f"split {rec['split']!r}")
        except (SceneError, geometry.GeometryError, TypeError, ValueError) as e:
            raise SchemaViolation(f"{SCENES_FILE}:{lineno}: {e}") from None
        scenes.append(SceneSpec(rec["scene_id"], rec["complexity"], tuple(objs), rec["seed"]))
        split[rec["scene_id"]] = rec["split"]
        expected[rec["scene_id"]] = rec["n_samples"]
    samples = []
    counts: dict[int, int] = {}
    for lineno, rec in _records(path / SAMPLES_FILE, _SAMPLE_FIELDS):
        try:
            if rec["scene_id"] not in split:
                raise SchemaViolation(f"unknown scene {rec['scene_id']}")
            gold = BoxN.from_seq(rec["gold"])
            prompt = tuple(vocab.token_id(w) for w in split_words(rec["prompt"]))
            response = ((vocab.bos_id,) + tuple(vocab.token_id(w) for w in split_words(rec["response"]))
                        + (vocab.eos_id,))
        except (SceneError, geometry.GeometryError, ValueError, TypeError) as e:
            raise SchemaViolation(f"{SAMPLES_FILE}:{lineno}: {e}") from None
        samples.append(DialogSample(rec["sample_id"], rec["scene_id"], rec["object_index"],
                                    rec["task"], rec["variant"], rec["phrase"], gold,
                                    prompt, response))
        counts[rec["scene_id"]] = counts.get(rec["scene_id"], 0) + 1
    for sid, n in expected.items():
        if counts.get(sid, 0) != n:
            raise SchemaViolation(
                f"{SAMPLES_FILE}: scene {sid} declares {n} samples, found {counts.get(sid, 0)}")
    return Dataset(cfg, scenes, samples, split)


def state_histogram(ds: Dataset) -> list[dict]:
    """Object counts per (category, state) and split."""
    rows: dict[tuple[str, str], dict] = {}
    for c in CATEGORIES:
        for s in STATE_CLASSES[family(c)]:
            rows[(c, s)] = {"category": c, "state": s, "train": 0, "test": 0}
    for sc in ds.scenes:
        for o in sc.objects:
            rows[(o.category, o.state)][ds.split[sc.scene_id]] += 1
    return list(rows.values())
