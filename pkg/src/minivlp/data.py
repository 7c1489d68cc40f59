"""Synthetic paired image-text corpus with verifiable structure.

Every record carries a latent scene: two colored shapes placed in distinct
quadrants of the canvas. The image renders the scene exactly (no pixel
noise) and all three text fields describe it with attribute words drawn
from disjoint id ranges, padded with filler words, so both modalities can
be decoded back to the latent by independent means. Mismatch noise swaps
in text for a different scene and depresses the click-through signal, so
rank-and-filter selection measurably denoises the corpus.

On disk a dataset is a directory:

* ``meta.json``      dataset geometry, vocabulary layout, binary layout notes
* ``index.jsonl``    one record per line: id, ctr, split, field lengths,
  is_match, latent codes, declared dimensions
* ``pixels.bin``     float32 little-endian, C order, shape [N, 3, R, R]
* ``tokens.bin``     int32 little-endian, C order, shape [N, 3, max_field_len]
  (raw field tokens, PAD-filled, no [CLS])
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .model import CLS_ID, MASK_ID, PAD_ID, SENSITIVE_ID

# --------------------------------------------------------------------------
# vocabulary layout
# --------------------------------------------------------------------------

COLOR_NAMES = ["red", "green", "blue", "yellow", "magenta", "cyan", "orange", "white"]
SHAPE_NAMES = ["square", "circle", "triangle", "cross", "diamond"]
QUADRANT_NAMES = ["topleft", "topright", "bottomleft", "bottomright"]
NUM_FILLERS = 20

COLOR_BASE = 4
SHAPE_BASE = COLOR_BASE + len(COLOR_NAMES)  # 12
QUAD_BASE = SHAPE_BASE + len(SHAPE_NAMES)  # 17
FILLER_BASE = QUAD_BASE + len(QUADRANT_NAMES)  # 21
VOCAB_SIZE = FILLER_BASE + NUM_FILLERS  # 41

PALETTE = np.array(
    [
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 1.0],
        [0.0, 1.0, 1.0],
        [1.0, 0.5, 0.0],
        [1.0, 1.0, 1.0],
    ],
    dtype=np.float32,
)

FIELD_NAMES = ("title", "content", "query")
# mean field lengths follow the source-corpus 18:29:5 ratio at desk scale
TITLE_FILLER_RANGE = (12, 20)  # core 6 + avg 15.5 fillers -> ~21.5 tokens
CONTENT_FILLER_RANGE = (24, 36)  # core 6 + avg 29.5 fillers -> ~35.5 tokens
MAX_FIELD_LEN = 44


def word_name(token_id: int) -> str:
    if token_id == PAD_ID:
        return "<pad>"
    if token_id == CLS_ID:
        return "<cls>"
    if token_id == MASK_ID:
        return "<mask>"
    if token_id == SENSITIVE_ID:
        return "<sensitive>"
    if COLOR_BASE <= token_id < SHAPE_BASE:
        return COLOR_NAMES[token_id - COLOR_BASE]
    if SHAPE_BASE <= token_id < QUAD_BASE:
        return SHAPE_NAMES[token_id - SHAPE_BASE]
    if QUAD_BASE <= token_id < FILLER_BASE:
        return QUADRANT_NAMES[token_id - QUAD_BASE]
    if FILLER_BASE <= token_id < VOCAB_SIZE:
        return f"filler{token_id - FILLER_BASE}"
    raise ValueError(f"token id {token_id} outside the vocabulary")


def word_id(name: str) -> int:
    for tid in range(VOCAB_SIZE):
        if word_name(tid) == name:
            return tid
    raise ValueError(f"unknown word {name!r}")


# --------------------------------------------------------------------------
# latent scenes and rendering
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SceneObject:
    quadrant: int  # 0 TL, 1 TR, 2 BL, 3 BR
    color: int  # palette index
    shape: int  # shape index


Latent = tuple[SceneObject, ...]

_QUAD_PAIRS = [(a, b) for a in range(4) for b in range(4) if a < b]
OBJECT_COMBOS = len(COLOR_NAMES) * len(SHAPE_NAMES)  # 40
TWO_OBJECT_SPACE = len(_QUAD_PAIRS) * OBJECT_COMBOS * OBJECT_COMBOS  # 9600


def latent_from_index(idx: int) -> Latent:
    """Bijection from [0, TWO_OBJECT_SPACE) onto two-object scenes."""
    if not 0 <= idx < TWO_OBJECT_SPACE:
        raise ValueError(f"latent index {idx} out of range")
    pair_idx, rest = divmod(idx, OBJECT_COMBOS * OBJECT_COMBOS)
    first, second = divmod(rest, OBJECT_COMBOS)
    qa, qb = _QUAD_PAIRS[pair_idx]
    return (
        SceneObject(qa, first // len(SHAPE_NAMES), first % len(SHAPE_NAMES)),
        SceneObject(qb, second // len(SHAPE_NAMES), second % len(SHAPE_NAMES)),
    )


def latent_code(latent: Latent) -> str:
    return "|".join(f"q{o.quadrant}c{o.color}s{o.shape}" for o in latent)


def latent_from_code(code: str) -> Latent:
    objs = []
    for part in code.split("|"):
        q, rest = part[1:].split("c")
        c, s = rest.split("s")
        objs.append(SceneObject(int(q), int(c), int(s)))
    return tuple(objs)


def _shape_mask(shape: int, size: int) -> np.ndarray:
    """Boolean footprint of a shape on a size x size quadrant."""
    c = (size - 1) / 2.0
    r = size * 0.36
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if shape == 0:  # square
        half = size * 0.30
        return (np.abs(xx - c) <= half) & (np.abs(yy - c) <= half)
    if shape == 1:  # circle
        return (xx - c) ** 2 + (yy - c) ** 2 <= r * r
    if shape == 2:  # triangle, apex up
        return (yy >= c - r) & (yy <= c + r) & (np.abs(xx - c) <= (yy - (c - r)) / 2.0)
    if shape == 3:  # cross
        bar = size * 0.13
        return ((np.abs(xx - c) <= bar) | (np.abs(yy - c) <= bar)) & (
            (np.abs(xx - c) <= r) & (np.abs(yy - c) <= r)
        )
    if shape == 4:  # diamond
        return np.abs(xx - c) + np.abs(yy - c) <= r
    raise ValueError(f"unknown shape index {shape}")


def render_scene(latent: Latent, resolution: int) -> np.ndarray:
    """Render a latent scene to float32 pixels [3, R, R] in [0, 1]."""
    if resolution % 2 != 0:
        raise ValueError("resolution must be even")
    half = resolution // 2
    img = np.zeros((3, resolution, resolution), dtype=np.float32)
    for obj in latent:
        row, col = divmod(obj.quadrant, 2)
        mask = _shape_mask(obj.shape, half)
        color = PALETTE[obj.color]
        ys = slice(row * half, (row + 1) * half)
        xs = slice(col * half, (col + 1) * half)
        region = img[:, ys, xs]
        region[:, mask] = color[:, None]
    return img


def decode_image(pixels: np.ndarray) -> Latent:
    """Inverse renderer: recover the scene by exact template matching."""
    resolution = pixels.shape[-1]
    half = resolution // 2
    objs = []
    for quadrant in range(4):
        row, col = divmod(quadrant, 2)
        region = pixels[:, row * half : (row + 1) * half, col * half : (col + 1) * half]
        occupied = region.sum(axis=0) > 0
        if not occupied.any():
            continue
        color_vec = region[:, occupied].mean(axis=1)
        color_idx = int(np.argmin(np.abs(PALETTE - color_vec).sum(axis=1)))
        shape_idx = None
        for s in range(len(SHAPE_NAMES)):
            if np.array_equal(occupied, _shape_mask(s, half)):
                shape_idx = s
                break
        if shape_idx is None:
            raise ValueError(f"quadrant {quadrant} does not match any shape template")
        objs.append(SceneObject(quadrant, color_idx, shape_idx))
    return tuple(objs)


def core_tokens(latent: Latent) -> list[int]:
    """Attribute words in canonical order: (color, shape, quadrant) per object."""
    out: list[int] = []
    for obj in sorted(latent, key=lambda o: o.quadrant):
        out.extend([COLOR_BASE + obj.color, SHAPE_BASE + obj.shape, QUAD_BASE + obj.quadrant])
    return out


def decode_text(tokens: Sequence[int]) -> Latent:
    """Recover the scene from any field by stripping non-attribute words."""
    attrs = [t for t in tokens if COLOR_BASE <= t < FILLER_BASE]
    if len(attrs) % 3 != 0:
        raise ValueError("attribute words do not form (color, shape, quadrant) triples")
    objs = []
    for i in range(0, len(attrs), 3):
        c, s, q = attrs[i : i + 3]
        if not (COLOR_BASE <= c < SHAPE_BASE and SHAPE_BASE <= s < QUAD_BASE and QUAD_BASE <= q < FILLER_BASE):
            raise ValueError("attribute triple out of order")
        objs.append(SceneObject(q - QUAD_BASE, c - COLOR_BASE, s - SHAPE_BASE))
    return tuple(sorted(objs, key=lambda o: o.quadrant))


def _with_fillers(core: list[int], n_fillers: int, rng: np.random.Generator) -> list[int]:
    tokens = list(core)
    for _ in range(n_fillers):
        word = FILLER_BASE + int(rng.integers(NUM_FILLERS))
        pos = int(rng.integers(len(tokens) + 1))
        tokens.insert(pos, word)
    return tokens


# --------------------------------------------------------------------------
# records and generation
# --------------------------------------------------------------------------


@dataclass
class RawRecord:
    record_id: int
    pixels: np.ndarray  # [3, R, R] float32
    declared_width: int
    declared_height: int
    title: list[int]
    content: list[int]
    query: list[int]
    ctr: float
    latent: Latent  # scene rendered in the image
    text_latent: Latent  # scene the texts describe (differs when mismatched)
    is_match: bool
    split: str = "train"

    def fields(self) -> dict[str, list[int]]:
        return {"title": self.title, "content": self.content, "query": self.query}


def generate_pairs(
    count: int,
    noise_rate: float = 0.0,
    seed: int = 0,
    resolution: int = 32,
) -> list[RawRecord]:
    """Deterministic corpus of aligned pairs with optional mismatch noise.

    Latents are unique per record (drawn from a seeded permutation of the
    scene space); the mismatched records reuse texts from scenes that do
    not occur in the corpus. Click-through is a noisy relevance signal:
    matched records concentrate high, mismatched low.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if not 0.0 <= noise_rate <= 1.0:
        raise ValueError("noise_rate must lie in [0, 1]")
    num_noise = int(round(count * noise_rate))
    if count + num_noise > TWO_OBJECT_SPACE:
        raise ValueError(f"corpus of {count} records exceeds the scene space")

    master = np.random.default_rng(np.random.SeedSequence([seed, 0x5CE11E]))
    perm = master.permutation(TWO_OBJECT_SPACE)
    noisy = np.zeros(count, dtype=bool)
    if num_noise:
        noisy[master.choice(count, size=num_noise, replace=False)] = True

    records = []
    spare = count  # next unused permutation slot, for mismatched text scenes
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1, i]))
        latent = latent_from_index(int(perm[i]))
        if noisy[i]:
            text_latent = latent_from_index(int(perm[spare]))
            spare += 1
            ctr = 0.6 * float(rng.random())
        else:
            text_latent = latent
            ctr = 0.2 + 0.8 * float(rng.random())
        core = core_tokens(text_latent)
        title = _with_fillers(core, int(rng.integers(*TITLE_FILLER_RANGE)), rng)
        content = _with_fillers(core, int(rng.integers(*CONTENT_FILLER_RANGE)), rng)
        query = list(core)
        records.append(
            RawRecord(
                record_id=i,
                pixels=render_scene(latent, resolution),
                declared_width=int(rng.integers(100, 400)),
                declared_height=int(rng.integers(100, 400)),
                title=title,
                content=content,
                query=query,
                ctr=ctr,
                latent=latent,
                text_latent=text_latent,
                is_match=not noisy[i],
            )
        )
    assign_splits(records)
    return records


def assign_splits(records: list[RawRecord], ratios: tuple[int, int, int] = (8, 1, 1)) -> None:
    """Split by position into train/val/test at the given ratio (+-1 record)."""
    n = len(records)
    total = sum(ratios)
    n_train = int(round(n * ratios[0] / total))
    n_val = int(round(n * (ratios[0] + ratios[1]) / total)) - n_train
    for i, rec in enumerate(records):
        if i < n_train:
            rec.split = "train"
        elif i < n_train + n_val:
            rec.split = "val"
        else:
            rec.split = "test"


# --------------------------------------------------------------------------
# field sampling and filtering
# --------------------------------------------------------------------------


def default_sensitive_predicate(tokens: Sequence[int]) -> bool:
    return SENSITIVE_ID in tokens


@dataclass
class FilterRule:
    min_dimension: int = 100
    aspect_range: tuple[float, float] = (0.25, 4.0)
    text_len_range: tuple[int, int] = (2, 128)
    sensitive_predicate: Callable[[Sequence[int]], bool] = default_sensitive_predicate


@dataclass
class FilterDecision:
    keep: bool
    reason: str | None = None
    valid_fields: tuple[str, ...] = FIELD_NAMES


def apply_filters(record: RawRecord, rules: FilterRule | None = None) -> FilterDecision:
    """Keep/drop plus the per-field validity used by the text sampler.

    Boundaries are inclusive keeps: exactly 100 px, aspect exactly 1/4 or
    4, and 2- or 128-word texts all survive. A record with at least one
    in-range field is kept; out-of-range fields are only excluded from
    sampling.
    """
    rules = rules or FilterRule()
    if min(record.declared_width, record.declared_height) < rules.min_dimension:
        return FilterDecision(keep=False, reason="min_dimension", valid_fields=())
    aspect = record.declared_width / record.declared_height
    lo, hi = rules.aspect_range
    if aspect < lo or aspect > hi:
        return FilterDecision(keep=False, reason="aspect_ratio", valid_fields=())
    for name, tokens in record.fields().items():
        if rules.sensitive_predicate(tokens):
            return FilterDecision(keep=False, reason="sensitive", valid_fields=())
    tlo, thi = rules.text_len_range
    valid = tuple(
        name for name, tokens in record.fields().items() if tlo <= len(tokens) <= thi
    )
    if not valid:
        return FilterDecision(keep=False, reason="text_length", valid_fields=())
    return FilterDecision(keep=True, valid_fields=valid)


def sample_text_field(
    record: RawRecord,
    rng: np.random.Generator,
    mode: str = "all",
    rules: FilterRule | None = None,
) -> tuple[str, list[int]]:
    """Uniform choice among the record's valid fields (restricted by mode)."""
    decision = apply_filters(record, rules)
    if not decision.keep:
        raise ValueError(f"record {record.record_id} does not pass filters ({decision.reason})")
    allowed = FIELD_NAMES if mode == "all" else tuple(mode.split("+"))
    for name in allowed:
        if name not in FIELD_NAMES:
            raise ValueError(f"unknown text field {name!r}")
    candidates = [f for f in decision.valid_fields if f in allowed]
    if not candidates:
        raise ValueError(f"record {record.record_id} has no valid field under mode {mode!r}")
    name = candidates[int(rng.integers(len(candidates)))]
    return name, record.fields()[name]


def ctr_rank_select(records: Sequence[RawRecord], fraction: float) -> list[RawRecord]:
    """Top fraction by click-through, stable descending sort."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    order = sorted(range(len(records)), key=lambda i: (-records[i].ctr, i))
    take = math.ceil(fraction * len(records))
    return [records[i] for i in order[:take]]


# --------------------------------------------------------------------------
# leakage check
# --------------------------------------------------------------------------


def image_hash(pixels: np.ndarray) -> str:
    arr = np.ascontiguousarray(pixels.astype(np.float32))
    return hashlib.sha256(arr.tobytes()).hexdigest()


@dataclass
class LeakageReport:
    hits: list[tuple[int, int]]  # (pretrain record_id, downstream record_id)
    retained: list[RawRecord] | None = None

    @property
    def clean(self) -> bool:
        return not self.hits


def leakage_check(
    pretrain: Sequence[RawRecord],
    downstream: Sequence[RawRecord],
    remove: bool = False,
) -> LeakageReport:
    """Find pretrain images whose content hash appears downstream."""
    downstream_hashes: dict[str, int] = {}
    for rec in downstream:
        downstream_hashes.setdefault(image_hash(rec.pixels), rec.record_id)
    hits = []
    leaked_ids = set()
    for rec in pretrain:
        h = image_hash(rec.pixels)
        if h in downstream_hashes:
            hits.append((rec.record_id, downstream_hashes[h]))
            leaked_ids.add(rec.record_id)
    retained = [r for r in pretrain if r.record_id not in leaked_ids] if remove else None
    return LeakageReport(hits=hits, retained=retained)


# --------------------------------------------------------------------------
# dataset container and IO
# --------------------------------------------------------------------------


@dataclass
class PairDataset:
    records: list[RawRecord]
    resolution: int
    vocab_size: int = VOCAB_SIZE
    max_field_len: int = MAX_FIELD_LEN

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str) -> "PairDataset":
        subset = [r for r in self.records if r.split == name]
        return PairDataset(subset, self.resolution, self.vocab_size, self.max_field_len)

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        n = len(self.records)
        pixels = np.stack([r.pixels for r in self.records]).astype("<f4")
        tokens = np.full((n, 3, self.max_field_len), PAD_ID, dtype="<i4")
        with open(directory / "index.jsonl", "w") as fh:
            for i, rec in enumerate(self.records):
                for j, fname in enumerate(FIELD_NAMES):
                    ts = rec.fields()[fname]
                    if len(ts) > self.max_field_len:
                        raise ValueError(f"field {fname} of record {rec.record_id} too long")
                    tokens[i, j, : len(ts)] = ts
                fh.write(
                    json.dumps(
                        {
                            "id": rec.record_id,
                            "ctr": rec.ctr,
                            "split": rec.split,
                            "field_lengths": [len(rec.title), len(rec.content), len(rec.query)],
                            "is_match": rec.is_match,
                            "latent": latent_code(rec.latent),
                            "text_latent": latent_code(rec.text_latent),
                            "declared_width": rec.declared_width,
                            "declared_height": rec.declared_height,
                        }
                    )
                    + "\n"
                )
        pixels.tofile(directory / "pixels.bin")
        tokens.tofile(directory / "tokens.bin")
        meta = {
            "format_version": 1,
            "count": n,
            "resolution": self.resolution,
            "vocab_size": self.vocab_size,
            "max_field_len": self.max_field_len,
            "pixels_layout": "float32 little-endian, C order, shape [N, 3, R, R]",
            "tokens_layout": "int32 little-endian, C order, shape [N, 3, max_field_len], PAD-filled",
        }
        (directory / "meta.json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, directory: str | Path) -> "PairDataset":
        directory = Path(directory)
        meta = json.loads((directory / "meta.json").read_text())
        n, res, max_len = meta["count"], meta["resolution"], meta["max_field_len"]
        pixels = np.fromfile(directory / "pixels.bin", dtype="<f4").reshape(n, 3, res, res)
        tokens = np.fromfile(directory / "tokens.bin", dtype="<i4").reshape(n, 3, max_len)
        records = []
        with open(directory / "index.jsonl") as fh:
            for i, line in enumerate(fh):
                row = json.loads(line)
                lens = row["field_lengths"]
                records.append(
                    RawRecord(
                        record_id=row["id"],
                        pixels=pixels[i].astype(np.float32),
                        declared_width=row["declared_width"],
                        declared_height=row["declared_height"],
                        title=tokens[i, 0, : lens[0]].tolist(),
                        content=tokens[i, 1, : lens[1]].tolist(),
                        query=tokens[i, 2, : lens[2]].tolist(),
                        ctr=row["ctr"],
                        latent=latent_from_code(row["latent"]),
                        text_latent=latent_from_code(row["text_latent"]),
                        is_match=row["is_match"],
                        split=row["split"],
                    )
                )
        return cls(records, res, meta["vocab_size"], max_len)


def tokens_with_cls(field_tokens: Sequence[int], length: int) -> tuple[list[int], list[bool]]:
    """[CLS]-prefixed, PAD-filled ids plus the attention mask."""
    ids = [CLS_ID] + list(field_tokens)
    if len(ids) > length:
        raise ValueError(f"sequence of {len(ids)} tokens exceeds budget {length}")
    mask = [True] * len(ids) + [False] * (length - len(ids))
    ids = ids + [PAD_ID] * (length - len(ids))
    return ids, mask


def collate_batch(
    records: Sequence[RawRecord],
    field_choices: Sequence[str],
    max_text_len: int,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Batch tensors (pixels, token ids, attention mask) for training/eval.

    Sequences are trimmed to the longest choice in the batch to keep
    attention cheap; [CLS] is always position 0.
    """
    chosen = [rec.fields()[fname] for rec, fname in zip(records, field_choices)]
    length = min(max_text_len, 1 + max(len(ts) for ts in chosen))
    ids_rows, mask_rows = [], []
    for ts in chosen:
        ids, mask = tokens_with_cls(ts, length)
        ids_rows.append(ids)
        mask_rows.append(mask)
    pixels = torch.from_numpy(np.stack([r.pixels for r in records]))
    return (
        pixels,
        torch.tensor(ids_rows, dtype=torch.long),
        torch.tensor(mask_rows, dtype=torch.bool),
    )
