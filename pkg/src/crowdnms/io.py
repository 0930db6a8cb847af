"""File formats.

JSONL (one object per line) for everything streamable: ground truth,
proposals/detections, pair samples, distance matrices. Binary with a
4-byte magic for feature grids ("PWFG") and model checkpoints ("PWRN"):
unsigned 32-bit little-endian dims, little-endian float64 payload,
row-major.
"""

import json
import struct
from pathlib import Path

import numpy as np

from .embed import DistanceMatrix, EmbedConfig, EmbeddingModel
from .geometry import Box, FeatureGrid, ScoredProposal
from .scene import GroundTruthObject, Scene

FEATURE_MAGIC = b"PWFG"
CHECKPOINT_MAGIC = b"PWRN"
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# JSONL

def _read_jsonl(path, required_keys):
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}:{lineno}: malformed JSON ({e.msg})") from e
            missing = [k for k in required_keys if k not in obj]
            if missing:
                raise FormatError(f"{path}:{lineno}: missing keys {missing}")
            rows.append(obj)
    return rows


def _write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def write_gt(path, gts: list[GroundTruthObject]) -> None:
    _write_jsonl(
        path,
        (
            {"image_id": g.image_id, "object_id": g.object_id,
             "x": g.box.x, "y": g.box.y, "w": g.box.w, "h": g.box.h}
            for g in gts
        ),
    )


def read_gt(path) -> list[GroundTruthObject]:
    return [
        GroundTruthObject(
            image_id=r["image_id"], object_id=int(r["object_id"]),
            box=Box(r["x"], r["y"], r["w"], r["h"]),
        )
        for r in _read_jsonl(path, ("image_id", "object_id", "x", "y", "w", "h"))
    ]


def write_proposals(path, props: list[ScoredProposal]) -> None:
    _write_jsonl(
        path,
        (
            {"image_id": p.image_id, "x": p.box.x, "y": p.box.y,
             "w": p.box.w, "h": p.box.h, "score": p.score}
            for p in props
        ),
    )


def read_proposals(path) -> list[ScoredProposal]:
    return [
        ScoredProposal(
            box=Box(r["x"], r["y"], r["w"], r["h"]), score=float(r["score"]),
            image_id=r["image_id"],
        )
        for r in _read_jsonl(path, ("image_id", "x", "y", "w", "h", "score"))
    ]


def write_pair_rows(path, rows) -> None:
    """rows: iterable of dicts {image_id, i, j, case_id, y}."""
    _write_jsonl(path, rows)


def read_pair_rows(path):
    return _read_jsonl(path, ("image_id", "i", "j", "case_id", "y"))


def write_distances(path, matrices: list[DistanceMatrix]) -> None:
    def rows():
        for dm in matrices:
            for (i, j), d in sorted(dm.entries.items()):
                yield {"image_id": dm.image_id, "i": i, "j": j, "dist": d}

    _write_jsonl(path, rows())


def read_distances(path) -> dict[str, DistanceMatrix]:
    out: dict[str, DistanceMatrix] = {}
    for r in _read_jsonl(path, ("image_id", "i", "j", "dist")):
        dm = out.setdefault(r["image_id"], DistanceMatrix(image_id=r["image_id"]))
        dm.put(int(r["i"]), int(r["j"]), float(r["dist"]))
    return out


# ---------------------------------------------------------------------------
# feature grids

def write_feature_grid(path, fg: FeatureGrid) -> None:
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<IIII", FORMAT_VERSION, fg.channels, fg.height, fg.width))
        fh.write(struct.pack("<d", fg.stride))
        fh.write(np.ascontiguousarray(fg.values, dtype="<f8").tobytes())


def read_feature_grid(path) -> FeatureGrid:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FEATURE_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
        version, c, h, w = struct.unpack("<IIII", fh.read(16))
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        (stride,) = struct.unpack("<d", fh.read(8))
        values = np.frombuffer(fh.read(c * h * w * 8), dtype="<f8").reshape(c, h, w)
    return FeatureGrid(values=values.copy(), stride=stride)


# ---------------------------------------------------------------------------
# checkpoints

_HEAD_CODES = {"gap": 0, "fc": 1}
_HEAD_NAMES = {v: k for k, v in _HEAD_CODES.items()}


def save_checkpoint(path, model: EmbeddingModel) -> None:
    cfg = model.config
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(
            struct.pack(
                "<IIIIII",
                FORMAT_VERSION, cfg.in_channels, cfg.width,
                cfg.embedding_dim, cfg.roi_size, _HEAD_CODES[cfg.head],
            )
        )
        for name in model.param_names:
            fh.write(np.ascontiguousarray(model.params[name], dtype="<f8").tobytes())
        for name in model.stat_names:
            fh.write(np.ascontiguousarray(model.stats[name], dtype="<f8").tobytes())


def load_checkpoint(path) -> EmbeddingModel:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        version, c_in, width, emb, roi, head = struct.unpack("<IIIIII", fh.read(24))
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        model = EmbeddingModel(
            EmbedConfig(in_channels=c_in, width=width, embedding_dim=emb,
                        roi_size=roi, head=_HEAD_NAMES[head])
        )
        for name in model.param_names:
            shape = model.params[name].shape
            n = int(np.prod(shape))
            model.params[name] = np.frombuffer(fh.read(n * 8), dtype="<f8").reshape(shape).copy()
        for name in model.stat_names:
            shape = model.stats[name].shape
            n = int(np.prod(shape))
            model.stats[name] = np.frombuffer(fh.read(n * 8), dtype="<f8").reshape(shape).copy()
        trailing = fh.read(1)
        if trailing:
            raise FormatError(f"{path}: trailing bytes after parameter block")
    return model


# ---------------------------------------------------------------------------
# corpus layout

def corpus_feature_path(corpus_dir, image_id: str) -> Path:
    return Path(corpus_dir) / "features" / f"{image_id}.bin"


def write_corpus(corpus_dir, scenes) -> None:
    corpus_dir = Path(corpus_dir)
    (corpus_dir / "features").mkdir(parents=True, exist_ok=True)
    gts = []
    props = []
    for s in scenes:
        gts.extend(s.gt)
        props.extend(s.proposals)
        write_feature_grid(corpus_feature_path(corpus_dir, s.image_id), s.features)
    write_gt(corpus_dir / "gt.jsonl", gts)
    write_proposals(corpus_dir / "proposals.jsonl", props)


def read_corpus(corpus_dir) -> list[Scene]:
    """Rebuild scenes from a corpus directory, ordered by image_id.

    Proposal order within each scene follows file order, so pair indices
    stored in pairs/distances files stay valid.
    """
    corpus_dir = Path(corpus_dir)
    gts = read_gt(corpus_dir / "gt.jsonl")
    props = read_proposals(corpus_dir / "proposals.jsonl")
    ids = sorted(
        {g.image_id for g in gts}
        | {p.image_id for p in props}
        | {p.stem for p in (corpus_dir / "features").glob("*.bin")}
    )
    scenes = []
    for image_id in ids:
        fg = read_feature_grid(corpus_feature_path(corpus_dir, image_id))
        scenes.append(
            Scene(
                image_id=image_id,
                width=int(round(fg.image_width)),
                height=int(round(fg.image_height)),
                gt=[g for g in gts if g.image_id == image_id],
                proposals=[p for p in props if p.image_id == image_id],
                features=fg,
            )
        )
    return scenes
