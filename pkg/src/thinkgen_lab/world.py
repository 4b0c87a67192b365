"""Synthetic micro-world: scenes, an exact renderer/parser, and task generation.

A grid is ``(16, 16, 4)``: a 4x4 layout of 4x4-cell blocks. Objects paint a
shape mask times a color vector into channels 0-2 of one block; glyph
letters paint a bitmap into channel 3. Background is 0 everywhere.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .autodiff.rng import stream
from .errors import ContractError, GenerationError, SceneError

GRID = 16
CHANNELS = 4
BLOCK = 4
NBLOCK = GRID // BLOCK
MAX_OBJECTS = 6
MAX_GLYPHS = 5

COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
}

SHAPES = {
    "cube": ["XXXX", "X..X", "X..X", "XXXX"],
    "ball": [".XX.", "XXXX", "XXXX", ".XX."],
    "tri": ["X...", "XX..", "XXX.", "XXXX"],
}
PLURAL = {"cube": "cubes", "ball": "balls", "tri": "tris"}
SINGULAR = {v: k for k, v in PLURAL.items()}

LETTERS = {
    "a": [".XX.", "X..X", "XXXX", "X..X"],
    "b": ["X...", "X...", "XXX.", "XXX."],
    "c": [".XXX", "X...", "X...", ".XXX"],
    "d": ["...X", ".XXX", "X..X", ".XXX"],
    "e": ["XXXX", "XXX.", "X...", "XXX."],
    "f": ["XXXX", "X...", "XXX.", "X..."],
    "g": ["XXX.", "X...", "X.XX", "XXXX"],
    "h": ["X..X", "XXXX", "X..X", "X..X"],
}

COUNTS = {"one": 1, "two": 2, "three": 3}
COUNT_WORDS = {v: k for k, v in COUNTS.items()}
RELATIONS = ("left-of", "right-of", "above", "below")
EDIT_VERBS = ("recolor", "remove", "reshape", "move")
WORD_SEP = "_"
ALIGNED_RESPONSE = ("the", "generated", "image", "is", "well", "aligned", "with", "the", "caption")
SCENARIOS = ("composition", "reasoning", "text-render", "edit", "reflection")
SPLITS = ("train", "held-out")

N_KEYS = 200
N_TRAIN_KEYS = 160


def _mask(rows: Sequence[str]) -> np.ndarray:
    return np.array([[c == "X" for c in r] for r in rows], dtype=np.float64)


SHAPE_MASKS = {k: _mask(v) for k, v in SHAPES.items()}
LETTER_MASKS = {k: _mask(v) for k, v in LETTERS.items()}


def pos_token(pos: tuple[int, int]) -> str:
    return f"p{pos[0]}{pos[1]}"


def token_pos(tok: str) -> tuple[int, int]:
    return int(tok[1]), int(tok[2])


POS_TOKENS = tuple(pos_token((r, c)) for r in range(NBLOCK) for c in range(NBLOCK))


def key_token(i: int) -> str:
    return f"k{i:03d}"


def lexicon() -> list[str]:
    """Every micro-world word, in a fixed order."""
    words = list(COUNTS) + list(COLORS) + list(SHAPES) + list(PLURAL.values())
    words += ["and", *RELATIONS, "write", *LETTERS, WORD_SEP, "text", "image", "show", *EDIT_VERBS]
    words += list(POS_TOKENS)
    words += [w for w in dict.fromkeys(ALIGNED_RESPONSE)]
    words += ["please", "draw", "a", "nice", "picture", "of"]
    words += [key_token(i) for i in range(N_KEYS)]
    return list(dict.fromkeys(words))


# -- scenes -------------------------------------------------------------------

@dataclass(frozen=True, order=True)
class SceneObject:
    pos: tuple[int, int]
    color: str
    shape: str


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...] = ()
    glyphs: str = ""
    confidence: tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(sorted(self.objects)))

    def validate(self) -> "Scene":
        if len(self.objects) > MAX_OBJECTS:
            raise SceneError(f"{len(self.objects)} objects exceed the limit of {MAX_OBJECTS}")
        seen = set()
        for o in self.objects:
            if o.color not in COLORS or o.shape not in SHAPES:
                raise SceneError(f"unknown attribute in {o}")
            if not (0 <= o.pos[0] < NBLOCK and 0 <= o.pos[1] < NBLOCK):
                raise SceneError(f"position {o.pos} outside the grid")
            if o.pos in seen:
                raise SceneError(f"two objects paint block {o.pos}")
            seen.add(o.pos)
        g = self.glyphs
        if len(g) > MAX_GLYPHS:
            raise SceneError(f"glyph string {g!r} longer than {MAX_GLYPHS}")
        if g and (g != g.strip() or "  " in g or any(ch not in LETTERS and ch != " " for ch in g)):
            raise SceneError(f"malformed glyph string {g!r}")
        return self

    def description(self) -> list[str]:
        """Token description of the scene (how reference images reach the planner)."""
        toks = []
        for o in self.objects:
            toks += [o.color, o.shape, pos_token(o.pos)]
        if self.glyphs:
            toks.append("text")
            toks += [WORD_SEP if ch == " " else ch for ch in self.glyphs]
        return toks

    def to_json(self) -> dict:
        return {"objects": [[o.pos[0], o.pos[1], o.color, o.shape] for o in self.objects], "glyphs": self.glyphs}

    @classmethod
    def from_json(cls, d: dict) -> "Scene":
        return cls(tuple(SceneObject((int(r), int(c)), col, sh) for r, c, col, sh in d["objects"]), d.get("glyphs", ""))


@dataclass(frozen=True)
class GridLatent:
    latent: np.ndarray
    resolution: str = f"{GRID}x{GRID}"

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.latent, dtype=dtype)

    @property
    def shape(self):
        return self.latent.shape


def as_grid(x) -> np.ndarray:
    arr = np.asarray(getattr(x, "latent", x), dtype=np.float64)
    return arr


def _block(grid: np.ndarray, pos: tuple[int, int]) -> np.ndarray:
    r, c = pos
    return grid[r * BLOCK:(r + 1) * BLOCK, c * BLOCK:(c + 1) * BLOCK]


def glyph_position(i: int) -> tuple[int, int]:
    return divmod(i, NBLOCK)


def render(scene: Scene) -> np.ndarray:
    scene.validate()
    grid = np.zeros((GRID, GRID, CHANNELS))
    for o in scene.objects:
        _block(grid, o.pos)[:, :, :3] = SHAPE_MASKS[o.shape][:, :, None] * np.array(COLORS[o.color])
    for i, ch in enumerate(scene.glyphs):
        if ch != " ":
            _block(grid, glyph_position(i))[:, :, 3] = LETTER_MASKS[ch]
    return grid


_OBJ_TEMPLATES = [(None, None, np.zeros((BLOCK, BLOCK, 3)))] + [
    (color, shape, SHAPE_MASKS[shape][:, :, None] * np.array(rgb))
    for color, rgb in COLORS.items() for shape in SHAPES
]
_GLYPH_TEMPLATES = [(None, np.zeros((BLOCK, BLOCK)))] + [(ch, m) for ch, m in LETTER_MASKS.items()]
_OBJ_STACK = np.stack([t for _, _, t in _OBJ_TEMPLATES]).reshape(len(_OBJ_TEMPLATES), -1)
_GLYPH_STACK = np.stack([t for _, t in _GLYPH_TEMPLATES]).reshape(len(_GLYPH_TEMPLATES), -1)


def overlap_confidence(block: np.ndarray, template: np.ndarray) -> float:
    """Fraction of cells whose thresholded value (> 0.5) agrees with the template."""
    return float(((block > 0.5) == (template > 0.5)).mean())


def _nearest(flat: np.ndarray, templates: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of the nearest template (squared L2) per row and its overlap confidence."""
    d = (flat**2).sum(1)[:, None] - 2.0 * flat @ templates.T + (templates**2).sum(1)[None, :]
    idx = np.argmin(d, axis=1)
    conf = ((flat > 0.5) == (templates[idx] > 0.5)).mean(axis=1)
    return idx, conf


def parse_scene(grid, tolerance: float = 0.75) -> Scene:
    """Nearest-template decoding of every block.

    Objects whose pixel-overlap confidence is below ``tolerance`` are dropped;
    likewise glyph blocks decode as blank. Never raises on finite input.
    """
    grid = as_grid(grid)
    if grid.shape != (GRID, GRID, CHANNELS):
        raise ContractError(f"grid must have shape {(GRID, GRID, CHANNELS)}, got {grid.shape}")
    if not np.isfinite(grid).all():
        raise ContractError("parse_scene needs a finite grid")
    # (row, col) blocks in row-major order, each flattened to (BLOCK*BLOCK*CHANNELS)
    blocks = grid.reshape(NBLOCK, BLOCK, NBLOCK, BLOCK, CHANNELS).transpose(0, 2, 1, 3, 4)
    blocks = blocks.reshape(NBLOCK * NBLOCK, BLOCK, BLOCK, CHANNELS)
    oi, oc = _nearest(blocks[..., :3].reshape(NBLOCK * NBLOCK, -1), _OBJ_STACK)
    gi, gc = _nearest(blocks[..., 3].reshape(NBLOCK * NBLOCK, -1), _GLYPH_STACK)
    objects, conf, glyph_chars = [], [], []
    for b in range(NBLOCK * NBLOCK):
        color, shape, _ = _OBJ_TEMPLATES[oi[b]]
        if color is not None and oc[b] >= tolerance:
            objects.append(SceneObject(divmod(b, NBLOCK), color, shape))
            conf.append(float(oc[b]))
        ch = _GLYPH_TEMPLATES[gi[b]][0]
        glyph_chars.append(ch if ch is not None and gc[b] >= tolerance else " ")
    # row-major scan order already matches Scene's sorted object order
    glyphs = " ".join("".join(glyph_chars).split())
    return Scene(tuple(objects), glyphs, tuple(conf))


# -- knowledge table ----------------------------------------------------------

@dataclass(frozen=True)
class Knowledge:
    key: str
    count: int
    color: str
    shape: str
    literal_color: str
    literal_shape: str

    def rewrite(self) -> list[str]:
        return spec_tokens(self.count, self.color, self.shape)


class KnowledgeTable:
    """Fictional ambiguous keys mapped to explicit attributes.

    Each key also carries a "literal" reading with a different color and shape,
    standing in for what a model would draw if it took the key at face value.
    """

    def __init__(self, n_keys: int = N_KEYS, n_train: int = N_TRAIN_KEYS, seed: int = 0):
        if n_keys > N_KEYS:
            raise ContractError(f"at most {N_KEYS} keys fit the vocabulary")
        rng = stream(seed, "knowledge-table")
        colors, shapes = list(COLORS), list(SHAPES)
        self.entries: dict[str, Knowledge] = {}
        for i in range(n_keys):
            col, sh = rng.choice(colors), rng.choice(shapes)
            lcol = rng.choice([c for c in colors if c != col])
            lsh = rng.choice([s for s in shapes if s != sh])
            self.entries[key_token(i)] = Knowledge(key_token(i), int(rng.integers(1, 4)), str(col), str(sh),
                                                    str(lcol), str(lsh))
        order = [key_token(int(i)) for i in rng.permutation(n_keys)]
        self.train_keys = tuple(sorted(order[:n_train]))
        self.held_out_keys = tuple(sorted(order[n_train:]))

    def keys(self, split: str) -> tuple[str, ...]:
        if split == "train":
            return self.train_keys
        if split == "held-out":
            return self.held_out_keys
        raise ContractError(f"unknown split {split!r}")

    def __getitem__(self, key: str) -> Knowledge:
        return self.entries[key]

    def __len__(self) -> int:
        return len(self.entries)


# -- captions & canonical layouts ------------------------------------------------

def spec_tokens(count: int, color: str, shape: str) -> list[str]:
    return [COUNT_WORDS[count], color, PLURAL[shape] if count > 1 else shape]


def caption_tokens(payload: dict) -> list[str]:
    specs = payload["objects"]
    rel = payload.get("relation")
    toks = spec_tokens(specs[0]["count"], specs[0]["color"], specs[0]["shape"])
    if len(specs) > 1:
        toks.append(rel["rel"] if rel else "and")
        toks += spec_tokens(specs[1]["count"], specs[1]["color"], specs[1]["shape"])
    return toks


_REL_LAYOUT = {
    "left-of": ((1, 1), (1, 2)),
    "right-of": ((1, 2), (1, 1)),
    "above": ((1, 1), (2, 1)),
    "below": ((2, 1), (1, 1)),
}


def layout(payload: dict) -> Scene:
    """Deterministic target scene for a composition payload."""
    specs = payload["objects"]
    rel = payload.get("relation")
    objs = []
    if rel:
        pa, pb = _REL_LAYOUT[rel["rel"]]
        a, b = specs[rel["a"]], specs[rel["b"]]
        objs = [SceneObject(pa, a["color"], a["shape"]), SceneObject(pb, b["color"], b["shape"])]
    else:
        for row, spec in enumerate(specs, start=1):
            objs += [SceneObject((row, col), spec["color"], spec["shape"]) for col in range(spec["count"])]
    return Scene(tuple(objs)).validate()


def glyph_string(words: Sequence[str]) -> str:
    return " ".join(words)


def text_tokens(words: Sequence[str]) -> list[str]:
    toks = ["write"]
    for i, w in enumerate(words):
        if i:
            toks.append(WORD_SEP)
        toks += list(w)
    return toks


def apply_edit(scene: Scene, instruction: Sequence[str]) -> Scene:
    """Execute a position-addressed edit instruction on a scene."""
    verb, target = instruction[0], token_pos(instruction[1])
    objs = {o.pos: o for o in scene.objects}
    if target not in objs:
        raise SceneError(f"no object at {target}")
    o = objs.pop(target)
    if verb == "recolor":
        objs[target] = SceneObject(target, instruction[2], o.shape)
    elif verb == "reshape":
        objs[target] = SceneObject(target, o.color, instruction[2])
    elif verb == "move":
        dest = token_pos(instruction[2])
        if dest in objs:
            raise SceneError(f"destination {dest} occupied")
        objs[dest] = SceneObject(dest, o.color, o.shape)
    elif verb != "remove":
        raise SceneError(f"unknown edit verb {verb!r}")
    return Scene(tuple(objs.values()), scene.glyphs).validate()


@dataclass(frozen=True)
class EditPair:
    source: Scene
    instruction: tuple[str, ...]
    target: Scene


@dataclass(frozen=True)
class ReflectionPair:
    caption: tuple[str, ...]
    scene: Scene
    response: tuple[str, ...]
    faithful: bool

    @property
    def grid(self) -> np.ndarray:
        return render(self.scene)


# -- tasks --------------------------------------------------------------------

@dataclass
class Task:
    task_id: str
    scenario: str
    split: str
    seed: int
    prompt: list[str]
    context: list[str] = field(default_factory=list)
    refs: list[Scene] = field(default_factory=list)
    payload: dict = field(default_factory=dict)

    @property
    def target(self) -> Scene | None:
        t = self.payload.get("target")
        return Scene.from_json(t) if t is not None else None

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id, "scenario": self.scenario, "split": self.split, "seed": self.seed,
            "prompt": list(self.prompt), "context": list(self.context),
            "refs": [r.to_json() for r in self.refs], "payload": self.payload,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Task":
        return cls(d["task_id"], d["scenario"], d["split"], int(d["seed"]), list(d["prompt"]),
                   list(d.get("context", [])), [Scene.from_json(r) for r in d.get("refs", [])], d.get("payload", {}))


def _spec(rng, colors=None, shapes=None, max_count=3) -> dict:
    return {"count": int(rng.integers(1, max_count + 1)), "color": str(rng.choice(colors or list(COLORS))),
            "shape": str(rng.choice(shapes or list(SHAPES)))}


def composition_payload(rng) -> dict:
    kind = rng.choice(["single", "pair", "relation"], p=[0.4, 0.3, 0.3])
    if kind == "single":
        return {"objects": [_spec(rng)], "relation": None}
    a = _spec(rng, max_count=2 if kind == "pair" else 1)
    while True:
        b = _spec(rng, max_count=2 if kind == "pair" else 1)
        if (b["color"], b["shape"]) != (a["color"], a["shape"]):
            break
    rel = {"a": 0, "rel": str(rng.choice(RELATIONS)), "b": 1} if kind == "relation" else None
    return {"objects": [a, b], "relation": rel}


def _random_scene(rng, n_objects: int) -> Scene:
    cells = [(r, c) for r in range(1, NBLOCK) for c in range(NBLOCK)]
    picks = rng.choice(len(cells), size=n_objects, replace=False)
    objs = [SceneObject(cells[int(i)], str(rng.choice(list(COLORS))), str(rng.choice(list(SHAPES)))) for i in picks]
    return Scene(tuple(objs)).validate()


def random_edit(rng, scene: Scene) -> tuple[str, ...]:
    o = scene.objects[int(rng.integers(len(scene.objects)))]
    verb = str(rng.choice(["recolor", "remove", "reshape"]))
    if verb == "recolor":
        return ("recolor", pos_token(o.pos), str(rng.choice([c for c in COLORS if c != o.color])))
    if verb == "reshape":
        return ("reshape", pos_token(o.pos), str(rng.choice([s for s in SHAPES if s != o.shape])))
    return ("remove", pos_token(o.pos))


def corrupt(rng, scene: Scene) -> tuple[Scene, tuple[str, ...]]:
    """Flip one attribute of one object; return the corrupted scene and the fixing instruction."""
    o = scene.objects[int(rng.integers(len(scene.objects)))]
    occupied = {x.pos for x in scene.objects}
    free = [(r, c) for r in range(1, NBLOCK) for c in range(NBLOCK) if (r, c) not in occupied]
    kind = str(rng.choice(["color", "shape", "position"]))
    rest = [x for x in scene.objects if x != o]
    if kind == "color":
        bad = SceneObject(o.pos, str(rng.choice([c for c in COLORS if c != o.color])), o.shape)
        fix = ("recolor", pos_token(o.pos), o.color)
    elif kind == "shape":
        bad = SceneObject(o.pos, o.color, str(rng.choice([s for s in SHAPES if s != o.shape])))
        fix = ("reshape", pos_token(o.pos), o.shape)
    else:
        dest = free[int(rng.integers(len(free)))]
        bad = SceneObject(dest, o.color, o.shape)
        fix = ("move", pos_token(dest), pos_token(o.pos))
    return Scene(tuple(rest + [bad]), scene.glyphs).validate(), fix


_SPLIT_OFFSET = {"train": 0, "held-out": 1}


def make_task(scenario: str, split: str, seed: int, table: KnowledgeTable | None = None) -> Task:
    """Deterministic task record for ``(scenario, split, seed)``."""
    if scenario not in SCENARIOS:
        raise ContractError(f"unknown scenario {scenario!r}")
    if split not in SPLITS:
        raise ContractError(f"unknown split {split!r}")
    rng = stream(seed, "task", scenario, split)
    task_id = f"{scenario}/{split}/{seed}"
    if scenario == "composition":
        payload = composition_payload(rng)
        payload["target"] = layout(payload).to_json()
        return Task(task_id, scenario, split, seed, caption_tokens(payload), payload=payload)
    if scenario == "reasoning":
        table = table or default_table()
        keys = table.keys(split)
        if not keys:
            raise GenerationError(f"no knowledge keys in split {split!r}")
        k = table[keys[seed % len(keys)]]
        payload = {"key": k.key, "rewrite": k.rewrite(),
                   "objects": [{"count": k.count, "color": k.color, "shape": k.shape}], "relation": None}
        payload["target"] = layout(payload).to_json()
        payload["literal"] = layout({"objects": [{"count": k.count, "color": k.literal_color,
                                                  "shape": k.literal_shape}]}).to_json()
        return Task(task_id, scenario, split, seed, ["show", k.key], payload=payload)
    if scenario == "text-render":
        letters = list(LETTERS)
        n_words = int(rng.integers(1, 3))
        if n_words == 1:
            lengths = [int(rng.integers(1, MAX_GLYPHS + 1))]
        else:
            first = int(rng.integers(1, MAX_GLYPHS - 1))
            lengths = [first, int(rng.integers(1, MAX_GLYPHS - first))]
        words = ["".join(rng.choice(letters, size=n)) for n in lengths]
        target = Scene((), glyph_string(words)).validate()
        payload = {"words": words, "target": target.to_json()}
        return Task(task_id, scenario, split, seed, text_tokens(words), payload=payload)
    if scenario == "edit":
        source = _random_scene(rng, int(rng.integers(2, 4)))
        instr = random_edit(rng, source)
        target = apply_edit(source, instr)
        payload = {"instruction": list(instr), "source": source.to_json(), "target": target.to_json()}
        return Task(task_id, scenario, split, seed, list(instr), context=["image", *source.description()],
                    refs=[source], payload=payload)
    # reflection
    payload = composition_payload(rng)
    caption = caption_tokens(payload)
    scene = layout(payload)
    faithful = bool(rng.random() < 0.5)
    if faithful:
        response = list(ALIGNED_RESPONSE)
    else:
        scene, fix = corrupt(rng, scene)
        response = list(fix)
    pl = {"response": response, "faithful": faithful, "caption": caption, "scene": scene.to_json()}
    return Task(task_id, scenario, split, seed, caption, context=["image", *scene.description()], payload=pl)


def make_tasks(scenario: str, split: str, n: int, seed: int = 0, table: KnowledgeTable | None = None,
               unique_keys: bool = False) -> list[Task]:
    if unique_keys and scenario == "reasoning":
        table = table or default_table()
        if n > len(table.keys(split)):
            raise GenerationError(f"asked for {n} distinct keys but split {split!r} has {len(table.keys(split))}")
    return [make_task(scenario, split, seed + i, table) for i in range(n)]


def reflection_pair(task: Task) -> ReflectionPair:
    pl = task.payload
    return ReflectionPair(tuple(pl["caption"]), Scene.from_json(pl["scene"]), tuple(pl["response"]), pl["faithful"])


def edit_pair(task: Task) -> EditPair:
    pl = task.payload
    return EditPair(Scene.from_json(pl["source"]), tuple(pl["instruction"]), Scene.from_json(pl["target"]))


_DEFAULT_TABLE: KnowledgeTable | None = None


def default_table() -> KnowledgeTable:
    global _DEFAULT_TABLE
    if _DEFAULT_TABLE is None:
        _DEFAULT_TABLE = KnowledgeTable()
    return _DEFAULT_TABLE


def sample_scenarios(weights: dict[str, float], n: int, rng: np.random.Generator) -> list[str]:
    names = list(weights)
    p = np.array([weights[k] for k in names], dtype=np.float64)
    if (p < 0).any() or p.sum() <= 0:
        raise ContractError(f"invalid mixture weights {weights}")
    idx = rng.choice(len(names), size=n, p=p / p.sum())
    return [names[i] for i in idx]


def write_jsonl(path, tasks: Iterable[Task]) -> None:
    with open(path, "w") as fh:
        for t in tasks:
            fh.write(json.dumps(t.to_json(), sort_keys=True) + "\n")


def read_jsonl(path) -> list[Task]:
    with open(path) as fh:
        return [Task.from_json(json.loads(line)) for line in fh if line.strip()]
