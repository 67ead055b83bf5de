"""Clips, labels, the per-frame privacy-attribute schema, the synthetic toy
dataset, and dataset statistics.

A clip is a float tensor of shape [T, W, H, C] with values in [0, 1];
datasets are immutable after construction and safe to share across readers.

The toy dataset is the desk-scale stand-in for the full-scale video corpora:
each clip shows a uniformly colored square (color = budget class, red/green/
blue) translating in one of four directions (direction = target class) over
a noisy mid-gray background. Color and motion are assigned independently,
so a perfect anonymization (drop the color, keep the motion) exists and the
privacy-utility trade-off is falsifiable on a laptop. The three colors share
the same luminance, which differs from the background's: a grayscale
transform removes every trace of the budget label while leaving the square
visible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

__all__ = [
    "ATTRIBUTES",
    "ATTRIBUTE_RANGES",
    "SchemaError",
    "PrivacyAttributeFrameLabel",
    "AnnotatedClip",
    "Dataset",
    "DatasetSplits",
    "VideoAnnotation",
    "generate_toy_dataset",
    "split_dataset",
    "binarize_attributes",
    "load_privacy_annotations",
    "dataset_from_annotations",
    "load_clip_directory",
    "action_distribution",
    "annotation_action_counts",
    "action_attribute_correlation",
    "CorrelationTable",
    "crop_clip",
    "stack_clips",
]

ATTRIBUTES = ("skin_color", "face", "gender", "nudity", "relationship")
# Number of defined values per attribute (0 is always "unidentifiable"/none).
ATTRIBUTE_RANGES = {
    "skin_color": 5,
    "face": 3,
    "gender": 4,
    "nudity": 3,
    "relationship": 2,
}

TOY_ACTIONS = ("up", "down", "left", "right")
TOY_COLORS = ("red", "green", "blue")
# Equal-luminance colors (mean over channels = 0.35) on a 0.5 gray background.
_TOY_RGB = np.array(
    [[0.65, 0.20, 0.20], [0.20, 0.65, 0.20], [0.20, 0.20, 0.65]]
)
_TOY_NOISE = 0.05


class SchemaError(ValueError):
    """An annotation record violated the attribute schema."""


@dataclass(frozen=True)
class PrivacyAttributeFrameLabel:
    """Per-frame privacy attribute values; ignored when no person is present."""

    skin_color: int = 0
    face: int = 0
    gender: int = 0
    nudity: int = 0
    relationship: int = 0
    present: bool = True

    def __post_init__(self):
        if self.present:
            for name in ATTRIBUTES:
                v = getattr(self, name)
                if not 0 <= v < ATTRIBUTE_RANGES[name]:
                    raise SchemaError(
                        f"{name}={v} outside range 0..{ATTRIBUTE_RANGES[name] - 1}"
                    )


@dataclass(frozen=True, eq=False)
class AnnotatedClip:
    """A clip plus one target label and its budget label (class id or
    per-frame attribute labels)."""

    clip: np.ndarray = field(repr=False)
    target_label: int = 0
    budget_label: object = 0  # int, or tuple[PrivacyAttributeFrameLabel] of length T

    def __post_init__(self):
        c = self.clip
        if c.ndim != 4:
            raise ValueError(f"clip must be [T, W, H, C], got shape {c.shape}")
        t, w, h, ch = c.shape
        if t < 1 or w < 1 or h < 1 or ch not in (1, 3):
            raise ValueError(f"bad clip dimensions {c.shape}")
        if c.min() < 0.0 or c.max() > 1.0:
            raise ValueError("clip values must lie in [0, 1]")
        if isinstance(self.budget_label, (tuple, list)):
            if len(self.budget_label) != t:
                raise ValueError(
                    f"attribute labels cover {len(self.budget_label)} frames, clip has {t}"
                )
        c.flags.writeable = False


@dataclass(eq=False)
class Dataset:
    clips: list[AnnotatedClip]
    split: str  # train | val | eval | all
    num_target_classes: int
    budget_mode: str  # single_class | multi_attribute
    num_budget_classes: int | None = None
    masks: list[dict[str, np.ndarray]] | None = None
    seed: int | None = None
    action_names: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.split not in ("train", "val", "eval", "all"):
            raise ValueError(f"bad split {self.split!r}")
        if self.budget_mode not in ("single_class", "multi_attribute"):
            raise ValueError(f"bad budget_mode {self.budget_mode!r}")
        shapes = {c.clip.shape for c in self.clips}
        if len(shapes) > 1:
            raise ValueError(f"clips disagree on shape: {sorted(shapes)}")
        for c in self.clips:
            if not 0 <= c.target_label < self.num_target_classes:
                raise ValueError(f"target label {c.target_label} out of range")
            if self.budget_mode == "single_class" and self.num_budget_classes is not None:
                if not 0 <= c.budget_label < self.num_budget_classes:
                    raise ValueError(f"budget label {c.budget_label} out of range")
        if self.masks is not None:
            if len(self.masks) != len(self.clips):
                raise ValueError("one mask record per clip required")
            for c, m in zip(self.clips, self.masks):
                for region, arr in m.items():
                    if arr.shape != c.clip.shape[:3]:
                        raise ValueError(f"{region} mask shape {arr.shape} does not match clip")
                    if arr.dtype != np.bool_:
                        raise ValueError("masks must be boolean")
                    arr.flags.writeable = False

    def __len__(self) -> int:
        return len(self.clips)

    @property
    def clip_shape(self) -> tuple:
        return self.clips[0].clip.shape


@dataclass
class DatasetSplits:
    train: Dataset
    val: Dataset
    eval: Dataset


def generate_toy_dataset(seed: int, n_clips: int, t: int, side: int) -> Dataset:
    """Colored-square toy videos: color is the budget label, motion direction
    the target label, assigned round-robin so both stay balanced within one."""
    if n_clips < 1:
        raise ValueError("n_clips must be >= 1")
    if t < 2:
        raise ValueError("t must be >= 2")
    if side < 16:
        raise ValueError("side must be >= 16")
    rng = np.random.default_rng(seed)
    sq = side // 4
    speed = 1
    travel = speed * (t - 1)
    deltas = {"up": (0, -1), "down": (0, 1), "left": (-1, 0), "right": (1, 0)}
    clips: list[AnnotatedClip] = []
    masks: list[dict[str, np.ndarray]] = []
    face_h = max(1, sq // 4)
    for i in range(n_clips):
        direction = i % 4
        color = i % 3
        dx, dy = deltas[TOY_ACTIONS[direction]]
        lo_x = travel if dx < 0 else 0
        hi_x = side - sq - (travel if dx > 0 else 0)
        lo_y = travel if dy < 0 else 0
        hi_y = side - sq - (travel if dy > 0 else 0)
        x0 = int(rng.integers(lo_x, hi_x + 1))
        y0 = int(rng.integers(lo_y, hi_y + 1))
        frames = np.full((t, side, side, 3), 0.5)
        body = np.zeros((t, side, side), dtype=bool)
        face = np.zeros((t, side, side), dtype=bool)
        for k in range(t):
            x = x0 + dx * speed * k
            y = y0 + dy * speed * k
            frames[k, x : x + sq, y : y + sq, :] = _TOY_RGB[color]
            body[k, x : x + sq, y : y + sq] = True
            face[k, x : x + sq, y : y + face_h] = True
        frames += rng.uniform(-_TOY_NOISE, _TOY_NOISE, size=frames.shape)
        clips.append(
            AnnotatedClip(clip=frames.astype(np.float64), target_label=direction, budget_label=color)
        )
        masks.append({"body": body, "face": face})
    return Dataset(
        clips=clips,
        split="all",
        num_target_classes=4,
        budget_mode="single_class",
        num_budget_classes=3,
        masks=masks,
        seed=seed,
        action_names=TOY_ACTIONS,
    )


def _budget_key(clip: AnnotatedClip):
    if isinstance(clip.budget_label, (tuple, list)):
        return tuple(binarize_attributes(clip.budget_label))
    return clip.budget_label


def split_dataset(
    dataset: Dataset, ratios=(0.70, 0.15, 0.15), seed: int | None = None
) -> DatasetSplits:
    """Deterministic stratified train/val/eval split.

    Clips are grouped by (target, budget) key; the post-train leftovers of
    each group alternate between val and eval so both stay the same size and
    near-balanced.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must sum to 1")
    if seed is None:
        seed = dataset.seed if dataset.seed is not None else 0
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5E57)))
    groups: dict[tuple, list[int]] = {}
    for i, c in enumerate(dataset.clips):
        groups.setdefault((c.target_label, _budget_key(c)), []).append(i)
    picks: dict[str, list[int]] = {"train": [], "val": [], "eval": []}
    toggle = 0
    for key in sorted(groups):
        idx = list(groups[key])
        order = rng.permutation(len(idx))
        idx = [idx[j] for j in order]
        n_tr = int(round(ratios[0] * len(idx)))
        picks["train"].extend(idx[:n_tr])
        rest = idx[n_tr:]
        for j, i in enumerate(rest):
            picks["val" if (j + toggle) % 2 == 0 else "eval"].append(i)
        toggle = (toggle + len(rest)) % 2
    out = {}
    for split, ids in picks.items():
        ids = sorted(ids)
        out[split] = replace(
            dataset,
            clips=[dataset.clips[i] for i in ids],
            masks=None if dataset.masks is None else [dataset.masks[i] for i in ids],
            split=split,
        )
    return DatasetSplits(train=out["train"], val=out["val"], eval=out["eval"])


def binarize_attributes(labels) -> np.ndarray:
    """Clip-level 'can tell' bits, one per attribute, OR-ed over frames.

    A frame signals identifiability when the attribute value is nonzero
    (for gender that includes 'coexisting'); frames without persons
    contribute nothing.
    """
    if len(labels) == 0:
        raise ValueError("need at least one frame label")
    bits = np.zeros(len(ATTRIBUTES), dtype=np.int64)
    for fl in labels:
        if not fl.present:
            continue
        for a, name in enumerate(ATTRIBUTES):
            if getattr(fl, name) != 0:
                bits[a] = 1
    return bits


@dataclass(frozen=True)
class VideoAnnotation:
    video_id: str
    action: str
    num_frames: int
    frame_labels: tuple[PrivacyAttributeFrameLabel, ...]


def load_privacy_annotations(path) -> list[VideoAnnotation]:
    """Read per-video annotation records (JSON lines, one video per line).

    Each record: {"video_id": str, "action": str, "attributes": [
    {"attribute": name, "value": int, "start_frame": int, "end_frame": int}]}
    with end_frame inclusive. Run-length ranges are expanded to per-frame
    labels; frames covered by no range count as person-less.
    """
    path = Path(path)
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    out = []
    for ri, rec in enumerate(records):
        for key in ("video_id", "action", "attributes"):
            if key not in rec:
                raise SchemaError(f"record {ri}: missing field {key!r}")
        spans: dict[str, list[tuple[int, int, int]]] = {a: [] for a in ATTRIBUTES}
        n_frames = 0
        for ai, att in enumerate(rec["attributes"]):
            name = att.get("attribute")
            if name not in ATTRIBUTE_RANGES:
                raise SchemaError(f"record {ri}: unknown attribute {name!r}")
            value = att.get("value")
            if not isinstance(value, int) or not 0 <= value < ATTRIBUTE_RANGES[name]:
                raise SchemaError(
                    f"record {ri}: {name}={value} outside range 0..{ATTRIBUTE_RANGES[name] - 1}"
                )
            s, e = att.get("start_frame"), att.get("end_frame")
            if not (isinstance(s, int) and isinstance(e, int)) or s < 0 or e < s:
                raise SchemaError(f"record {ri}: bad frame range [{s}, {e}]")
            for s2, e2, _ in spans[name]:
                if s <= e2 and s2 <= e:
                    raise SchemaError(
                        f"record {ri}: overlapping ranges for {name}: "
                        f"[{s2}, {e2}] and [{s}, {e}]"
                    )
            spans[name].append((s, e, value))
            n_frames = max(n_frames, e + 1)
        frame_labels = []
        for f in range(n_frames):
            values = {}
            covered = False
            for name in ATTRIBUTES:
                for s, e, v in spans[name]:
                    if s <= f <= e:
                        values[name] = v
                        covered = True
                        break
            frame_labels.append(
                PrivacyAttributeFrameLabel(present=covered, **values)
                if covered
                else PrivacyAttributeFrameLabel(present=False)
            )
        out.append(
            VideoAnnotation(
                video_id=str(rec["video_id"]),
                action=str(rec["action"]),
                num_frames=n_frames,
                frame_labels=tuple(frame_labels),
            )
        )
    return out


def dataset_from_annotations(records: list[VideoAnnotation], side: int = 4) -> Dataset:
    """Wrap annotation records in a Dataset (placeholder gray clips) so the
    statistics operations can run on real metadata. Shorter videos are padded
    with person-less frames to the common length."""
    if not records:
        raise ValueError("no records")
    actions = tuple(sorted({r.action for r in records}))
    t = max(max(r.num_frames, 1) for r in records)
    clips = []
    absent = PrivacyAttributeFrameLabel(present=False)
    for r in records:
        labels = tuple(r.frame_labels) + (absent,) * (t - r.num_frames)
        clips.append(
            AnnotatedClip(
                clip=np.full((t, side, side, 1), 0.5),
                target_label=actions.index(r.action),
                budget_label=labels,
            )
        )
    return Dataset(
        clips=clips,
        split="all",
        num_target_classes=len(actions),
        budget_mode="multi_attribute",
        action_names=actions,
    )


def load_clip_directory(root) -> dict[str, Dataset]:
    """Layout-validating loader for on-disk datasets (no download logic).

    Expected layout::

        root/clips/<id>.npy        one [T, W, H, C] array per clip
        root/labels.json           {"num_target_classes": int,
                                    "budget_mode": "single_class",
                                    "num_budget_classes": int,
                                    "clips": [{"id": str, "target": int,
                                               "budget": int, "split": str}]}

    Returns one Dataset per split present in the index.
    """
    root = Path(root)
    index_path = root / "labels.json"
    clip_dir = root / "clips"
    if not index_path.is_file() or not clip_dir.is_dir():
        raise FileNotFoundError(f"{root} is not a clip directory (clips/ + labels.json)")
    index = json.loads(index_path.read_text())
    for key in ("num_target_classes", "budget_mode", "clips"):
        if key not in index:
            raise SchemaError(f"labels.json: missing field {key!r}")
    by_split: dict[str, list[AnnotatedClip]] = {}
    for ci, entry in enumerate(index["clips"]):
        cid, split = entry.get("id"), entry.get("split", "train")
        p = clip_dir / f"{cid}.npy"
        if not p.is_file():
            raise SchemaError(f"clip {ci}: missing file {p.name}")
        arr = np.load(p)
        by_split.setdefault(split, []).append(
            AnnotatedClip(clip=arr, target_label=int(entry["target"]), budget_label=int(entry["budget"]))
        )
    return {
        split: Dataset(
            clips=clips,
            split=split,
            num_target_classes=int(index["num_target_classes"]),
            budget_mode=str(index["budget_mode"]),
            num_budget_classes=index.get("num_budget_classes"),
        )
        for split, clips in by_split.items()
    }


def action_distribution(d: Dataset) -> dict[int, int]:
    """Videos per action class; counts sum to the dataset size."""
    if len(d) == 0:
        raise ValueError("empty dataset")
    hist: dict[int, int] = {}
    for c in d.clips:
        hist[c.target_label] = hist.get(c.target_label, 0) + 1
    return hist


def annotation_action_counts(records: list[VideoAnnotation]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for r in records:
        counts[r.action] = counts.get(r.action, 0) + 1
    return counts


@dataclass
class CorrelationTable:
    """Per (action, attribute value) frame ratios; NaN marks actions with no
    annotated frames (absent, not zero)."""

    actions: list[int]
    columns: list[tuple[str, int]]
    ratios: np.ndarray  # [len(actions), len(columns)]

    def ratio(self, action: int, attribute: str, value: int) -> float:
        return float(
            self.ratios[self.actions.index(action), self.columns.index((attribute, value))]
        )


def action_attribute_correlation(d: Dataset) -> CorrelationTable:
    """Ratio of an action's annotated frames carrying each attribute value.

    Frames without a person are excluded from numerator and denominator, so
    each attribute's ratios sum to 1 per action when every annotated frame
    carries the attribute.
    """
    if d.budget_mode != "multi_attribute":
        raise ValueError("correlation requires a multi_attribute dataset")
    columns = [(a, v) for a in ATTRIBUTES for v in range(ATTRIBUTE_RANGES[a])]
    actions = sorted({c.target_label for c in d.clips})
    ratios = np.full((len(actions), len(columns)), np.nan)
    for ai, action in enumerate(actions):
        frames = [
            fl
            for c in d.clips
            if c.target_label == action
            for fl in c.budget_label
            if fl.present
        ]
        if not frames:
            continue
        for ci, (attr, value) in enumerate(columns):
            n = sum(1 for fl in frames if getattr(fl, attr) == value)
            ratios[ai, ci] = n / len(frames)
    return CorrelationTable(actions=actions, columns=columns, ratios=ratios)


def crop_clip(clip: np.ndarray, out_w: int, out_h: int, mode: str = "center", seed: int | None = None) -> np.ndarray:
    """Crop the same window from every frame; 'random' mode needs a seed."""
    t, w, h, c = clip.shape
    if out_w > w or out_h > h:
        raise ValueError(f"crop {out_w}x{out_h} larger than frame {w}x{h}")
    if out_w < 1 or out_h < 1:
        raise ValueError("crop dimensions must be >= 1")
    if mode == "center":
        ox, oy = (w - out_w) // 2, (h - out_h) // 2
    elif mode == "random":
        if seed is None:
            raise ValueError("random crop requires a seed")
        rng = np.random.default_rng(seed)
        ox = int(rng.integers(0, w - out_w + 1))
        oy = int(rng.integers(0, h - out_h + 1))
    else:
        raise ValueError(f"unknown crop mode {mode!r}")
    return clip[:, ox : ox + out_w, oy : oy + out_h, :]


def stack_clips(d: Dataset, dtype=np.float32):
    """Dataset -> (clips array [N,T,W,H,C], target ids [N], budget labels).

    Budget labels are class ids in single_class mode and clip-level
    binarized attribute vectors [N, 5] in multi_attribute mode.
    """
    x = np.stack([c.clip for c in d.clips]).astype(dtype)
    y_t = np.array([c.target_label for c in d.clips], dtype=np.int64)
    if d.budget_mode == "single_class":
        y_b = np.array([c.budget_label for c in d.clips], dtype=np.int64)
    else:
        y_b = np.stack([binarize_attributes(c.budget_label) for c in d.clips])
    return x, y_t, y_b
