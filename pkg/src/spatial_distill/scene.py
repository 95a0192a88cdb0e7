"""Synthetic indoor scenes, orthographic multi-view renders, spatial QA and
the programmatic teacher that supervises the student.

Coordinates are meters with ``z`` up. Yaw is restricted to quarter turns so
every object stays an axis-aligned box; ``size`` is always the world-frame
extent (already swapped for odd quarter turns).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .config import DatasetConfig
from .tokenizer import EOS, Vocab, normalize

RELATIONS = ("proximity", "contact", "size", "orientation", "describe")
SPATIAL_RELATIONS = RELATIONS[:4]
SECTORS = ("right", "behind", "left", "front")

# Nominal (x, y, z) extents in meters before jitter.
BASE_SIZES = {
    "table": (1.2, 0.8, 0.75),
    "chair": (0.5, 0.5, 0.9),
    "cabinet": (0.8, 0.5, 1.8),
    "box": (0.4, 0.4, 0.4),
    "window": (1.0, 0.1, 1.2),
    "bed": (2.0, 1.6, 0.5),
    "lamp": (0.3, 0.3, 1.5),
    "sofa": (2.0, 0.9, 0.8),
}
STACKABLE = {"box", "lamp"}
SUPPORTS = {"table", "cabinet", "bed"}
WINDOW_SILL = 0.9

# Viewing directions: (axis, sign, column axis, row axis).
VIEW_AXES = {
    "-z": (2, -1, 0, 1),
    "+y": (1, +1, 0, 2),
    "+x": (0, +1, 1, 2),
    "-y": (1, -1, 0, 2),
    "-x": (0, -1, 1, 2),
    "+z": (2, +1, 0, 1),
}
VIEW_ORDER = tuple(VIEW_AXES)


class SceneInfeasibleError(RuntimeError):
    pass


class VocabularyError(KeyError):
    pass


@dataclass
class SceneObject:
    id: int
    category: str
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.center) - np.asarray(self.size) / 2

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.center) + np.asarray(self.size) / 2

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))


@dataclass
class SceneGraph:
    scene_id: int
    room_lo: tuple[float, float, float]
    room_hi: tuple[float, float, float]
    objects: list[SceneObject] = field(default_factory=list)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(np.subtract(self.room_hi, self.room_lo)))

    def by_id(self, obj_id: int) -> SceneObject:
        for o in self.objects:
            if o.id == obj_id:
                return o
        raise KeyError(obj_id)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneGraph":
        objs = [
            SceneObject(o["id"], o["category"], tuple(o["center"]), tuple(o["size"]), o["yaw"])
            for o in d["objects"]
        ]
        return cls(d["scene_id"], tuple(d["room_lo"]), tuple(d["room_hi"]), objs)


@dataclass
class ViewRender:
    view_id: int
    axis: str
    camera_position: tuple[float, float, float]
    features: np.ndarray  # (H, W, C)
    depth: np.ndarray  # (H, W)


@dataclass
class QASample:
    scene_id: int
    question_text: str
    answer_text: str
    relation: str
    referenced_object_ids: tuple[int, ...]


@dataclass
class TeacherSignal:
    answer_token_ids: np.ndarray  # (|A|,)
    soft_logits: np.ndarray  # (|A|, vocab) probabilities
    spatial_features: np.ndarray  # (views, sg, sg, Cs)
    depth_bin_dist: np.ndarray  # (views, H, W, B)
    det_class_probs: np.ndarray  # (objects, categories)
    det_boxes: np.ndarray  # (objects, 6) center and size, room-normalized
    rel_lr: np.ndarray  # (pairs, 2) P(i left of j), P(i right of j)
    rel_ab: np.ndarray  # (pairs, 2) P(i above j), P(i below j)


# --------------------------------------------------------------------------
# geometry


def penetration(a: SceneObject, b: SceneObject) -> float:
    """Smallest per-axis overlap; positive only when the boxes interpenetrate."""
    overlap = np.minimum(a.hi, b.hi) - np.maximum(a.lo, b.lo)
    return float(overlap.min())


def box_gap(a: SceneObject, b: SceneObject) -> float:
    """Euclidean distance between two boxes (0 when touching or overlapping)."""
    sep = np.maximum(np.maximum(a.lo, b.lo) - np.minimum(a.hi, b.hi), 0.0)
    return float(np.sqrt((sep**2).sum()))


def center_distance(a: SceneObject, b: SceneObject) -> float:
    return float(np.linalg.norm(np.subtract(a.center, b.center)))


def bearing_deg(a: SceneObject, b: SceneObject) -> float:
    """Horizontal bearing of ``a`` around ``b`` in degrees, (-180, 180]."""
    dx = a.center[0] - b.center[0]
    dy = a.center[1] - b.center[1]
    return math.degrees(math.atan2(dy, dx))


def sector_of(angle: float) -> str:
    # viewer stands at low y looking toward +y: +x is right, +y is behind
    if -45 <= angle < 45:
        return "right"
    if 45 <= angle < 135:
        return "behind"
    if -135 <= angle < -45:
        return "front"
    return "left"


def sector_margin(angle: float) -> float:
    return min(abs(((angle - edge) + 180) % 360 - 180) for edge in (45, 135, -45, -135))


def inside_room(obj: SceneObject, lo, hi, tol: float = 1e-9) -> bool:
    return bool(np.all(obj.lo >= np.asarray(lo) - tol) and np.all(obj.hi <= np.asarray(hi) + tol))


# --------------------------------------------------------------------------
# scene generation


def _draw_size(rng: np.random.Generator, category: str) -> tuple[np.ndarray, float]:
    base = np.array(BASE_SIZES.get(category, (0.5, 0.5, 0.5)))
    size = base * rng.uniform(0.8, 1.2, size=3)
    quarter = int(rng.integers(4))
    if quarter % 2:
        size[[0, 1]] = size[[1, 0]]
    return size, quarter * math.pi / 2


def _propose(rng, category, size, placed, lo, hi, cfg: DatasetConfig) -> np.ndarray:
    lo = np.asarray(lo)
    hi = np.asarray(hi)
    center = np.empty(3)
    half = size / 2
    if placed and rng.random() < cfg.adjacency_prob:
        anchor = placed[int(rng.integers(len(placed)))]
        a_c = np.asarray(anchor.center)
        a_s = np.asarray(anchor.size)
        if category in STACKABLE and anchor.category in SUPPORTS and rng.random() < 0.5:
            center[:2] = a_c[:2] + rng.uniform(-1, 1, 2) * np.maximum(a_s[:2] - size[:2], 0) / 2
            center[2] = anchor.hi[2] + half[2]
            return center
        axis = int(rng.integers(2))
        other = 1 - axis
        gap = 0.0 if rng.random() < 0.6 else rng.uniform(*cfg.separation_gap)
        sign = 1 if rng.random() < 0.5 else -1
        center[axis] = a_c[axis] + sign * ((a_s[axis] + size[axis]) / 2 + gap)
        span = (a_s[other] + size[other]) / 2 * 0.8
        center[other] = a_c[other] + rng.uniform(-span, span)
    else:
        center[:2] = rng.uniform(lo[:2] + half[:2], hi[:2] - half[:2])
    if category == "window":
        thin = int(np.argmin(size[:2]))
        center[thin] = lo[thin] + half[thin] if rng.random() < 0.5 else hi[thin] - half[thin]
        center[2] = lo[2] + WINDOW_SILL + half[2]
    else:
        center[2] = lo[2] + half[2]
    return center


def generate_scene(seed: int, cfg: DatasetConfig, scene_id: int = 0) -> SceneGraph:
    """Rejection-sample a scene; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    lo = (0.0, 0.0, 0.0)
    hi = tuple(float(v) for v in cfg.room_size)
    max_n = min(cfg.max_objects, len(cfg.catalog))
    min_n = min(cfg.min_objects, max_n)
    n = int(rng.integers(min_n, max_n + 1))
    categories = [cfg.catalog[i] for i in rng.choice(len(cfg.catalog), size=n, replace=False)]
    placed: list[SceneObject] = []
    for obj_id, category in enumerate(categories):
        for _ in range(cfg.max_attempts):
            size, yaw = _draw_size(rng, category)
            if np.any(size > np.asarray(hi)):
                continue
            center = _propose(rng, category, size, placed, lo, hi, cfg)
            cand = SceneObject(
                obj_id,
                category,
                tuple(float(v) for v in center),
                tuple(float(v) for v in size),
                float(yaw),
            )
            if not inside_room(cand, lo, hi):
                continue
            if any(penetration(cand, p) > cfg.overlap_tol for p in placed):
                continue
            placed.append(cand)
            break
        else:
            raise SceneInfeasibleError(
                f"could not place {category!r} (object {obj_id}) after {cfg.max_attempts} attempts"
            )
    return SceneGraph(scene_id, lo, hi, placed)


# --------------------------------------------------------------------------
# rendering


def _cell_centers(lo: float, hi: float, n: int) -> np.ndarray:
    return lo + (np.arange(n) + 0.5) * (hi - lo) / n


def render_views(scene: SceneGraph, n_views: int, cfg: DatasetConfig) -> list[ViewRender]:
    """Orthographic z-buffer renders along the first ``n_views`` axis directions."""
    if not 1 <= n_views <= len(VIEW_ORDER):
        raise ValueError(f"n_views must be in [1, {len(VIEW_ORDER)}]")
    lo = np.asarray(scene.room_lo)
    hi = np.asarray(scene.room_hi)
    g = cfg.grid
    cat_index = {c: i for i, c in enumerate(cfg.catalog)}
    renders = []
    for view_id, name in enumerate(VIEW_ORDER[:n_views]):
        axis, sign, col_ax, row_ax = VIEW_AXES[name]
        far = hi[axis] - lo[axis]
        cols = _cell_centers(lo[col_ax], hi[col_ax], g)
        # top image row shows the high end of the row axis
        rows = _cell_centers(lo[row_ax], hi[row_ax], g)[::-1]
        depth = np.full((g, g), far)
        label = np.full((g, g), -1)
        for obj in scene.objects:
            o_lo, o_hi = obj.lo, obj.hi
            rmask = (rows >= o_lo[row_ax]) & (rows <= o_hi[row_ax])
            cmask = (cols >= o_lo[col_ax]) & (cols <= o_hi[col_ax])
            hit = rmask[:, None] & cmask[None, :]
            if not hit.any():
                continue
            d = (o_lo[axis] - lo[axis]) if sign > 0 else (hi[axis] - o_hi[axis])
            d = max(float(d), 0.0)
            closer = hit & (d < depth)
            depth[closer] = d
            label[closer] = cat_index[obj.category]
        feats = np.zeros((g, g, len(cfg.catalog)))
        r, c = np.nonzero(label >= 0)
        feats[r, c, label[r, c]] = 1.0 - 0.5 * depth[r, c] / far
        cam = (lo + hi) / 2
        cam[axis] = lo[axis] if sign > 0 else hi[axis]
        renders.append(
            ViewRender(view_id, name, tuple(float(v) for v in cam), feats.astype(np.float32), depth.astype(np.float32))
        )
    return renders


# --------------------------------------------------------------------------
# relations and QA


def question_for(relation: str, a: str = "", b: str = "") -> str:
    if relation == "proximity":
        return f"is the {a} near the {b}"
    if relation == "contact":
        return f"is the {a} touching the {b}"
    if relation == "size":
        return f"is the {a} larger than the {b}"
    if relation == "orientation":
        return f"where is the {a} relative to the {b}"
    if relation == "describe":
        return "describe the scene"
    raise ValueError(relation)


def answer_for(relation: str, choice: str, a: str = "", b: str = "", categories: Sequence[str] = ()) -> str:
    if relation == "proximity":
        return f"yes the {a} is near the {b}" if choice == "yes" else f"no the {a} is not near the {b}"
    if relation == "contact":
        return f"yes the {a} is touching the {b}" if choice == "yes" else f"no the {a} is not touching the {b}"
    if relation == "size":
        return f"yes the {a} is larger than the {b}" if choice == "yes" else f"no the {a} is smaller than the {b}"
    if relation == "orientation":
        phrase = {"left": "left of", "right": "right of", "front": "in front of", "behind": "behind"}[choice]
        return f"the {a} is {phrase} the {b}"
    if relation == "describe":
        return "the room contains " + " ".join(categories)
    raise ValueError(relation)


def relation_choice(scene: SceneGraph, relation: str, a_id: int, b_id: int, cfg: DatasetConfig) -> Optional[str]:
    """Oracle answer for an ordered pair, or None when the pair is ambiguous."""
    a, b = scene.by_id(a_id), scene.by_id(b_id)
    if relation == "proximity":
        return "yes" if center_distance(a, b) < cfg.proximity_threshold else "no"
    if relation == "contact":
        return "yes" if box_gap(a, b) <= cfg.contact_eps else "no"
    if relation == "size":
        va, vb = a.volume, b.volume
        if abs(va - vb) <= 1e-9 * max(va, vb):
            return None
        return "yes" if va > vb else "no"
    if relation == "orientation":
        angle = bearing_deg(a, b)
        if sector_margin(angle) < cfg.orientation_margin_deg:
            return None
        return sector_of(angle)
    raise ValueError(relation)


def oracle_answer(scene: SceneGraph, relation: str, ids: Sequence[int], cfg: DatasetConfig) -> Optional[str]:
    if relation == "describe":
        return answer_for("describe", "", categories=sorted(o.category for o in scene.objects))
    a, b = scene.by_id(ids[0]), scene.by_id(ids[1])
    choice = relation_choice(scene, relation, ids[0], ids[1], cfg)
    if choice is None:
        return None
    return answer_for(relation, choice, a.category, b.category)


def parse_answer(relation: str, text: str) -> Optional[str]:
    """Extract the polarity or sector from a templated answer."""
    words = normalize(text)
    if not words:
        return None
    if relation in ("proximity", "contact", "size"):
        return words[0] if words[0] in ("yes", "no") else None
    if relation == "orientation":
        found = [w for w in words if w in SECTORS]
        return found[0] if len(set(found)) == 1 else None
    if relation == "describe":
        return text.strip()
    raise ValueError(relation)


def make_qa(scene: SceneGraph, seed: int, cfg: DatasetConfig) -> list[QASample]:
    """Spatial questions stratified by answer, plus one description.

    Proximity and contact emit yes/no pairs when the scene supports both
    answers and nothing otherwise, so both stay exactly balanced. Size and
    orientation draw a target answer per sample and fall back to an answer
    the scene supports. Each relation gets up to ``cfg.questions_per_relation``
    samples, on distinct ordered pairs.
    """
    rng = np.random.default_rng(seed)
    samples = []
    ids = [o.id for o in scene.objects]
    n_q = cfg.questions_per_relation

    def emit(relation: str, choice: str, pool: list[tuple[int, int]]) -> None:
        a, b = pool.pop(int(rng.integers(len(pool))))
        oa, ob = scene.by_id(a), scene.by_id(b)
        samples.append(
            QASample(
                scene.scene_id,
                question_for(relation, oa.category, ob.category),
                answer_for(relation, choice, oa.category, ob.category),
                relation,
                (a, b),
            )
        )

    if len(ids) >= 2:
        pairs = [(a, b) for a in ids for b in ids if a != b]
        for relation in SPATIAL_RELATIONS:
            by_choice: dict[str, list[tuple[int, int]]] = {}
            for a, b in pairs:
                choice = relation_choice(scene, relation, a, b, cfg)
                if choice is not None:
                    by_choice.setdefault(choice, []).append((a, b))
            if relation in ("proximity", "contact"):
                for _ in range(n_q // 2):
                    if not (by_choice.get("yes") and by_choice.get("no")):
                        break
                    order = ("yes", "no") if rng.random() < 0.5 else ("no", "yes")
                    for choice in order:
                        emit(relation, choice, by_choice[choice])
                continue
            options = ("yes", "no") if relation == "size" else SECTORS
            for _ in range(n_q):
                live = sorted(c for c, pool in by_choice.items() if pool)
                if not live:
                    break
                target = options[int(rng.integers(len(options)))]
                if target not in live:
                    target = live[int(rng.integers(len(live)))]
                emit(relation, target, by_choice[target])
    samples.append(
        QASample(
            scene.scene_id,
            question_for("describe"),
            oracle_answer(scene, "describe", ids, cfg),
            "describe",
            tuple(sorted(ids)),
        )
    )
    return samples


def template_corpus(catalog: Sequence[str]) -> list[str]:
    """Every sentence shape the generator can emit, for vocabulary building."""
    lines = [question_for("describe"), answer_for("describe", "", categories=catalog)]
    for a in catalog:
        for b in catalog:
            if a == b:
                continue
            for rel in ("proximity", "contact", "size"):
                lines.append(question_for(rel, a, b))
                lines.extend(answer_for(rel, c, a, b) for c in ("yes", "no"))
            lines.append(question_for("orientation", a, b))
            lines.extend(answer_for("orientation", s, a, b) for s in SECTORS)
    return lines


# --------------------------------------------------------------------------
# teacher


def canonical_objects(scene: SceneGraph, cfg: DatasetConfig) -> list[SceneObject]:
    """Objects ordered by catalog index; the detection slot order."""
    order = {c: i for i, c in enumerate(cfg.catalog)}
    return sorted(scene.objects, key=lambda o: (order[o.category], o.id))


def spatial_projection(cfg: DatasetConfig) -> np.ndarray:
    rng = np.random.default_rng(cfg.projection_seed)
    c = cfg.feature_channels
    return rng.normal(0.0, 1.0 / math.sqrt(c), size=(c, cfg.spatial_channels))


def pool_grid(x: np.ndarray, out: int) -> np.ndarray:
    """Average-pool the two leading spatial axes of (..., H, W, C) to out x out."""
    *lead, h, w, c = x.shape
    f = h // out
    return x.reshape(*lead, out, f, out, w // out, c).mean(axis=(-4, -2))


def depth_bin_index(depth: np.ndarray, d_max: float, bins: int) -> np.ndarray:
    idx = np.floor(np.asarray(depth) / d_max * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def depth_bins_onehot(depth: np.ndarray, d_max: float, bins: int, smoothing: float = 0.0) -> np.ndarray:
    onehot = np.eye(bins)[depth_bin_index(depth, d_max, bins)]
    return (1 - smoothing) * onehot + smoothing / bins


def pair_index(n: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(n) for j in range(i + 1, n)]


def relation_distributions(objs: Sequence[SceneObject], scale: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    pairs = pair_index(len(objs))
    lr = np.zeros((len(pairs), 2))
    ab = np.zeros((len(pairs), 2))
    for k, (i, j) in enumerate(pairs):
        p_left = 1.0 / (1.0 + math.exp(-(objs[j].center[0] - objs[i].center[0]) / scale))
        p_above = 1.0 / (1.0 + math.exp(-(objs[i].center[2] - objs[j].center[2]) / scale))
        lr[k] = (p_left, 1 - p_left)
        ab[k] = (p_above, 1 - p_above)
    return lr, ab


def scene_teacher(scene: SceneGraph, views: Sequence[ViewRender], cfg: DatasetConfig) -> dict[str, np.ndarray]:
    """Question-independent part of the teacher supervision."""
    feats = np.stack([v.features for v in views]).astype(np.float64)
    depth = np.stack([v.depth for v in views]).astype(np.float64)
    spatial = pool_grid(feats, cfg.spatial_grid) @ spatial_projection(cfg)
    bins = depth_bins_onehot(depth, scene.diagonal, cfg.depth_bins, cfg.depth_smoothing)
    objs = canonical_objects(scene, cfg)
    cat_index = {c: i for i, c in enumerate(cfg.catalog)}
    det = np.zeros((len(objs), cfg.n_categories))
    det[np.arange(len(objs)), [cat_index[o.category] for o in objs]] = 1.0
    room = np.asarray(cfg.room_size, dtype=np.float64)
    boxes = np.array([np.concatenate([np.asarray(o.center) / room, np.asarray(o.size) / room]) for o in objs])
    lr, ab = relation_distributions(objs)
    return {
        "spatial_features": spatial,
        "depth_bin_dist": bins,
        "det_class_probs": det,
        "det_boxes": boxes.reshape(len(objs), 6),
        "rel_lr": lr,
        "rel_ab": ab,
    }


def answer_ids(answer: str, vocab: Vocab) -> np.ndarray:
    missing = vocab.missing(answer)
    if missing:
        raise VocabularyError(f"vocabulary is missing template words {missing}")
    return np.array([*vocab.words(answer), EOS], dtype=np.int64)


def smoothed_targets(ids: np.ndarray, vocab_size: int, eps: float) -> np.ndarray:
    return (1 - eps) * np.eye(vocab_size)[ids] + eps / vocab_size


def teacher_signals(
    scene: SceneGraph,
    views: Sequence[ViewRender],
    qa: QASample,
    vocab: Vocab,
    cfg: DatasetConfig,
    scene_part: Optional[dict[str, np.ndarray]] = None,
) -> TeacherSignal:
    ids = answer_ids(qa.answer_text, vocab)
    part = scene_part if scene_part is not None else scene_teacher(scene, views, cfg)
    return TeacherSignal(
        answer_token_ids=ids,
        soft_logits=smoothed_targets(ids, len(vocab), cfg.label_smoothing),
        **part,
    )
