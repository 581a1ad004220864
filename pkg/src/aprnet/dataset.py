"""Schemas, ID-level annotations, sample manifests, embedding files and dataset statistics.

File formats (all UTF-8 text unless noted):

* schema:      ``attribute_name: class0,class1[,...]`` per line, ``#`` starts a comment
* annotations: ``identity_id label_1 ... label_M`` (labels by class name or index)
* manifest:    ``sample_id identity camera split`` where identity ``-1`` is a
  distractor, ``-2`` is junk, and split is one of train/vquery/vgallery/query/gallery
* embeddings:  binary, magic ``APRE`` + two u64 LE (rows, dim) + rows*dim f32 LE

Row ``i`` of an embedding file holds the feature of the ``i``-th manifest line.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from statistics import NormalDist
from typing import Iterable, Sequence

import numpy as np

from .seeding import rng_for

DISTRACTOR = -1
JUNK = -2

SPLITS = ("train", "vquery", "vgallery", "query", "gallery")
GALLERY_SPLITS = ("vgallery", "gallery")

EMBEDDING_MAGIC = b"APRE"


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class EmbeddingError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Schema


@dataclass(frozen=True)
class AttributeDef:
    name: str
    classes: tuple[str, ...]

    @property
    def num_classes(self) -> int:
        return len(self.classes)


@dataclass(frozen=True)
class AttributeSchema:
    attributes: tuple[AttributeDef, ...]

    def __post_init__(self):
        if not self.attributes:
            raise ValueError("schema needs at least one attribute")
        seen = set()
        for att in self.attributes:
            if not att.name:
                raise ValueError("empty attribute name")
            if att.name in seen:
                raise ValueError(f"duplicate attribute {att.name!r}")
            seen.add(att.name)
            if len(att.classes) < 2:
                raise ValueError(f"attribute {att.name!r} needs at least 2 classes")
            if len(set(att.classes)) != len(att.classes):
                raise ValueError(f"attribute {att.name!r} has duplicate class names")

    @property
    def num_attributes(self) -> int:
        return len(self.attributes)

    @property
    def class_counts(self) -> list[int]:
        return [a.num_classes for a in self.attributes]

    @property
    def names(self) -> list[str]:
        return [a.name for a in self.attributes]

    def index(self, name: str) -> int:
        return self.names.index(name)

    def without(self, name: str) -> "AttributeSchema":
        return AttributeSchema(tuple(a for a in self.attributes if a.name != name))

    def serialize(self) -> str:
        return "".join(f"{a.name}: {','.join(a.classes)}\n" for a in self.attributes)


def _strip_comment(line: str) -> str:
    return line.split("#", 1)[0].strip()


def parse_schema(text: str) -> AttributeSchema:
    attributes = []
    names: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw)
        if not line:
            continue
        if ":" not in line:
            raise ParseError("expected 'name: class0,class1,...'", lineno)
        name, _, rest = line.partition(":")
        name = name.strip()
        classes = tuple(c.strip() for c in rest.split(","))
        if not name or any(not c for c in classes):
            raise ParseError("empty attribute or class name", lineno)
        if any(ch.isspace() for ch in name) or any(ch.isspace() for c in classes for ch in c):
            raise ParseError("names may not contain whitespace", lineno)
        if name in names:
            raise ParseError(f"duplicate attribute {name!r}", lineno)
        if len(classes) < 2:
            raise ParseError(f"attribute {name!r} needs at least 2 classes", lineno)
        if len(set(classes)) != len(classes):
            raise ParseError(f"attribute {name!r} has duplicate class names", lineno)
        names.add(name)
        attributes.append(AttributeDef(name, classes))
    if not attributes:
        raise ParseError("schema declares no attributes")
    return AttributeSchema(tuple(attributes))


# ---------------------------------------------------------------------------
# Identity-level annotations


@dataclass(frozen=True)
class AnnotationTable:
    """Attribute class indices per identity.

    ``names`` maps non-numeric identity tokens seen at parse time to the
    integer ids used everywhere else.
    """

    rows: dict[int, tuple[int, ...]]
    names: dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.rows)

    def __contains__(self, identity: int) -> bool:
        return identity in self.rows

    def identities(self) -> list[int]:
        return sorted(self.rows)

    def matrix(self, identities: Sequence[int] | None = None) -> np.ndarray:
        ids = self.identities() if identities is None else list(identities)
        return np.array([self.rows[i] for i in ids], dtype=np.int64).reshape(len(ids), -1)

    def serialize(self, schema: AttributeSchema) -> str:
        lines = []
        for ident in self.identities():
            labels = [schema.attributes[i].classes[c] for i, c in enumerate(self.rows[ident])]
            lines.append(" ".join([str(ident), *labels]))
        return "".join(line + "\n" for line in lines)

    def drop_attribute(self, index: int) -> "AnnotationTable":
        rows = {k: v[:index] + v[index + 1:] for k, v in self.rows.items()}
        return AnnotationTable(rows, dict(self.names))


def _identity_token(token: str, names: dict[str, int]) -> int:
    try:
        value = int(token)
    except ValueError:
        # string ids get dense integers in order of first appearance
        return names.setdefault(token, len(names))
    if value < 0:
        raise ValueError("identity ids must be non-negative")
    return value


def parse_annotations(text: str, schema: AttributeSchema, names: dict[str, int] | None = None) -> AnnotationTable:
    names = {} if names is None else dict(names)
    lookup = [{c: j for j, c in enumerate(a.classes)} for a in schema.attributes]
    rows: dict[int, tuple[int, ...]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw)
        if not line:
            continue
        tokens = line.split()
        if len(tokens) != schema.num_attributes + 1:
            raise ParseError(
                f"expected identity plus {schema.num_attributes} labels, got {len(tokens) - 1}", lineno
            )
        try:
            ident = _identity_token(tokens[0], names)
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        if ident in rows:
            raise ParseError(f"duplicate identity {tokens[0]}", lineno)
        labels = []
        for att, table, tok in zip(schema.attributes, lookup, tokens[1:]):
            if tok in table:
                labels.append(table[tok])
            elif tok.isdigit() and int(tok) < att.num_classes:
                labels.append(int(tok))
            else:
                raise ParseError(f"unknown class {tok!r} for attribute {att.name!r}", lineno)
        rows[ident] = tuple(labels)
    return AnnotationTable(rows, names)


# ---------------------------------------------------------------------------
# Samples / manifest


@dataclass(frozen=True)
class Sample:
    sample_id: int
    identity: int
    camera: int
    split: str
    feature: int | None = None

    @property
    def is_real(self) -> bool:
        return self.identity >= 0


def validate_sample(s: Sample) -> None:
    if s.split not in SPLITS:
        raise ValueError(f"unknown split {s.split!r}")
    if s.camera < 1:
        raise ValueError("camera ids are positive integers")
    if s.identity < 0 and s.identity not in (DISTRACTOR, JUNK):
        raise ValueError(f"bad identity {s.identity}")
    if not s.is_real and s.split not in GALLERY_SPLITS:
        raise ValueError(f"distractor/junk sample {s.sample_id} outside a gallery split")


def parse_manifest(text: str, names: dict[str, int] | None = None) -> list[Sample]:
    names = {} if names is None else names
    samples = []
    seen: set[int] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw)
        if not line:
            continue
        tokens = line.split()
        if len(tokens) != 4:
            raise ParseError("expected 'sample_id identity camera split'", lineno)
        try:
            sid = int(tokens[0])
            ident = int(tokens[1]) if tokens[1].lstrip("-").isdigit() else _identity_token(tokens[1], names)
            cam = int(tokens[2])
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        if sid in seen:
            raise ParseError(f"duplicate sample id {sid}", lineno)
        seen.add(sid)
        sample = Sample(sid, ident, cam, tokens[3], feature=len(samples))
        try:
            validate_sample(sample)
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        samples.append(sample)
    return samples


def serialize_manifest(samples: Iterable[Sample]) -> str:
    return "".join(f"{s.sample_id} {s.identity} {s.camera} {s.split}\n" for s in samples)


# ---------------------------------------------------------------------------
# Embeddings


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 2:
            raise EmbeddingError("embedding data must be 2-D")
        object.__setattr__(self, "data", np.ascontiguousarray(self.data, dtype=np.float32))
        bad = ~np.isfinite(self.data)
        if bad.any():
            row = int(np.argwhere(bad)[0, 0])
            raise EmbeddingError(f"non-finite value in row {row}")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other):
        return isinstance(other, EmbeddingMatrix) and np.array_equal(self.data, other.data)

    def to_bytes(self) -> bytes:
        header = EMBEDDING_MAGIC + struct.pack("<QQ", self.rows, self.dim)
        return header + self.data.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "EmbeddingMatrix":
        if blob[:4] != EMBEDDING_MAGIC:
            raise EmbeddingError("bad magic, not an embedding file")
        if len(blob) < 20:
            raise EmbeddingError("truncated header")
        rows, dim = struct.unpack("<QQ", blob[4:20])
        payload = blob[20:]
        if len(payload) != rows * dim * 4:
            raise EmbeddingError(f"header declares {rows}x{dim} but payload has {len(payload) // 4} values")
        data = np.frombuffer(payload, dtype="<f4").reshape(rows, dim)
        return cls(data.astype(np.float32))


def write_embeddings(path, emb: EmbeddingMatrix) -> None:
    Path(path).write_bytes(emb.to_bytes())


def load_embeddings(path, expected_rows: int | None = None, expected_dim: int | None = None) -> EmbeddingMatrix:
    emb = EmbeddingMatrix.from_bytes(Path(path).read_bytes())
    if expected_rows is not None and emb.rows != expected_rows:
        raise EmbeddingError(f"expected {expected_rows} rows, file has {emb.rows}")
    if expected_dim is not None and emb.dim != expected_dim:
        raise EmbeddingError(f"expected dim {expected_dim}, file has {emb.dim}")
    return emb


# ---------------------------------------------------------------------------
# Whole dataset


@dataclass(frozen=True, eq=False)
class Dataset:
    schema: AttributeSchema
    annotations: AnnotationTable
    samples: list[Sample]
    embeddings: EmbeddingMatrix

    def __post_init__(self):
        if len(self.samples) != self.embeddings.rows:
            raise ValueError(f"{len(self.samples)} samples but {self.embeddings.rows} embedding rows")

    def split(self, *names: str) -> list[Sample]:
        return [s for s in self.samples if s.split in names]

    def features(self, samples: Sequence[Sample]) -> np.ndarray:
        return self.embeddings.data[[s.feature for s in samples]]

    def train_identities(self) -> list[int]:
        return sorted({s.identity for s in self.samples if s.split == "train"})

    def without_attribute(self, name: str) -> "Dataset":
        idx = self.schema.index(name)
        return replace(self, schema=self.schema.without(name), annotations=self.annotations.drop_attribute(idx))

    def save(self, directory) -> dict[str, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = {
            "schema": d / "schema.txt",
            "annotations": d / "annotations.txt",
            "manifest": d / "manifest.txt",
            "embeddings": d / "embeddings.bin",
        }
        paths["schema"].write_text(self.schema.serialize())
        paths["annotations"].write_text(self.annotations.serialize(self.schema))
        paths["manifest"].write_text(serialize_manifest(self.samples))
        write_embeddings(paths["embeddings"], self.embeddings)
        return paths


def load_dataset(schema_path, annotations_path, manifest_path, embeddings_path) -> Dataset:
    schema = parse_schema(Path(schema_path).read_text(encoding="utf-8"))
    annotations = parse_annotations(Path(annotations_path).read_text(encoding="utf-8"), schema)
    names = dict(annotations.names)
    samples = parse_manifest(Path(manifest_path).read_text(encoding="utf-8"), names)
    emb = load_embeddings(embeddings_path, expected_rows=len(samples))
    return Dataset(schema, annotations, samples, emb)


def instance_labels(sample: Sample, annotations: AnnotationTable) -> tuple[int, ...]:
    if not sample.is_real:
        raise KeyError(f"sample {sample.sample_id} is a distractor/junk image and has no attributes")
    if sample.identity not in annotations:
        raise KeyError(f"identity {sample.identity} has no attribute annotation")
    return annotations.rows[sample.identity]


# ---------------------------------------------------------------------------
# Statistics


@dataclass(frozen=True, eq=False)
class DatasetStats:
    positives: list[dict[str, int]]
    indicator_names: list[str]
    correlation: np.ndarray


def attribute_distribution(annotations: AnnotationTable, schema: AttributeSchema) -> list[dict[str, int]]:
    mat = annotations.matrix()
    out = []
    for i, att in enumerate(schema.attributes):
        counts = np.bincount(mat[:, i], minlength=att.num_classes) if len(mat) else np.zeros(att.num_classes, int)
        out.append({c: int(n) for c, n in zip(att.classes, counts)})
    return out


def binarize(annotations: AnnotationTable, schema: AttributeSchema) -> tuple[list[str], np.ndarray]:
    """0/1 indicator columns: one for a binary attribute (its first class), one per class otherwise."""
    mat = annotations.matrix()
    names, cols = [], []
    for i, att in enumerate(schema.attributes):
        classes = att.classes[:1] if att.num_classes == 2 else att.classes
        for j, c in enumerate(classes):
            names.append(f"{att.name}={c}")
            cols.append(mat[:, i] == j)
    return names, np.stack(cols, axis=1).astype(np.float64)


def phi_matrix(indicators: np.ndarray) -> np.ndarray:
    x = np.asarray(indicators, dtype=np.float64)
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / len(x)
    std = np.sqrt(np.diag(cov))
    constant = std == 0
    if constant.any():
        warnings.warn(f"{int(constant.sum())} constant indicator column(s); correlation set to 0", RuntimeWarning)
    safe = np.where(constant, 1.0, std)
    corr = cov / np.outer(safe, safe)
    corr[constant, :] = 0.0
    corr[:, constant] = 0.0
    corr = np.clip((corr + corr.T) / 2, -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    return corr


def attribute_correlation(annotations: AnnotationTable, schema: AttributeSchema) -> tuple[list[str], np.ndarray]:
    if len(annotations) < 2:
        raise ValueError("correlation needs at least 2 annotated identities")
    names, ind = binarize(annotations, schema)
    return names, phi_matrix(ind)


def dataset_stats(annotations: AnnotationTable, schema: AttributeSchema) -> DatasetStats:
    names, corr = attribute_correlation(annotations, schema)
    return DatasetStats(attribute_distribution(annotations, schema), names, corr)


# ---------------------------------------------------------------------------
# Synthetic data


@dataclass
class SynthConfig:
    num_identities: int = 100  # training identities
    num_val_identities: int = 50
    num_test_identities: int = 100
    num_cameras: int = 4
    samples_per_camera: int = 4
    dim: int = 64
    class_counts: list[int] = field(default_factory=lambda: [2, 2, 2, 2, 2, 2, 2, 2, 2, 4, 8, 9])
    noise: float = 1.0
    coupling: float = 1.0
    camera_scale: float = 2.0
    num_distractors: int = 0
    num_junk: int = 0


def _orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def _bucket(values: np.ndarray, m: int) -> np.ndarray:
    # standard normal quantiles give roughly balanced classes
    cuts = [NormalDist().inv_cdf(k / m) for k in range(1, m)]
    return np.searchsorted(cuts, values).astype(np.int64)


def synth_dataset(config: SynthConfig, seed: int) -> Dataset:
    """Identity prototypes + camera offsets + Gaussian noise, attributes cut from prototype coordinates.

    Latent coordinate ``i`` decides attribute ``i``; ``coupling`` scales those
    coordinates so attribute-relevant directions carry more identity variance.
    """
    c = config
    if c.num_identities < 2:
        raise ValueError("need at least 2 training identities")
    if c.num_cameras < 2:
        raise ValueError("need at least 2 cameras for cross-camera retrieval")
    if len(c.class_counts) < 1 or any(m < 2 for m in c.class_counts):
        raise ValueError("every attribute needs at least 2 classes")
    if len(c.class_counts) > c.dim:
        raise ValueError("more attributes than feature dimensions")
    if c.samples_per_camera < 1:
        raise ValueError("samples_per_camera must be positive")

    n_ids = c.num_identities + c.num_val_identities + c.num_test_identities
    M = len(c.class_counts)
    proto_rng = rng_for(seed, "synth-prototypes")
    basis = _orthogonal(proto_rng, c.dim)
    latent = proto_rng.standard_normal((n_ids, c.dim))
    labels = np.stack([_bucket(latent[:, i], m) for i, m in enumerate(c.class_counts)], axis=1)
    scale = np.ones(c.dim)
    scale[:M] = c.coupling
    prototypes = (latent * scale) @ basis.T
    cams = rng_for(seed, "synth-cameras").standard_normal((c.num_cameras, c.dim)) * c.camera_scale

    schema = AttributeSchema(
        tuple(AttributeDef(f"att{i}", tuple(f"c{j}" for j in range(m))) for i, m in enumerate(c.class_counts))
    )
    annotations = AnnotationTable({i: tuple(int(v) for v in labels[i]) for i in range(n_ids)})

    noise_rng = rng_for(seed, "synth-noise")
    query_rng = rng_for(seed, "synth-queries")
    rows, samples = [], []

    def add(identity, camera, split, vec):
        samples.append(Sample(len(samples), identity, camera, split, feature=len(samples)))
        rows.append(vec)

    for ident in range(n_ids):
        if ident < c.num_identities:
            role = None
        elif ident < c.num_identities + c.num_val_identities:
            role = ("vquery", "vgallery")
        else:
            role = ("query", "gallery")
        for cam in range(c.num_cameras):
            block = prototypes[ident] + cams[cam] + c.noise * noise_rng.standard_normal((c.samples_per_camera, c.dim))
            q = int(query_rng.integers(c.samples_per_camera)) if role else -1
            for k in range(c.samples_per_camera):
                split = "train" if role is None else (role[0] if k == q else role[1])
                add(ident, cam + 1, split, block[k])

    if c.num_distractors:
        d_rng = rng_for(seed, "synth-distractors")
        z = d_rng.standard_normal((c.num_distractors, c.dim)) * scale
        cam_idx = d_rng.integers(c.num_cameras, size=c.num_distractors)
        feats = z @ basis.T + cams[cam_idx] + c.noise * d_rng.standard_normal((c.num_distractors, c.dim))
        for vec, cam in zip(feats, cam_idx):
            add(DISTRACTOR, int(cam) + 1, "gallery", vec)
    if c.num_junk:
        j_rng = rng_for(seed, "synth-junk")
        # junk: detections of nothing in particular, camera offset only
        for _ in range(c.num_junk):
            cam = int(j_rng.integers(c.num_cameras))
            add(JUNK, cam + 1, "gallery", cams[cam] + c.noise * j_rng.standard_normal(c.dim))

    emb = EmbeddingMatrix(np.asarray(rows, dtype=np.float32).reshape(len(rows), c.dim))
    return Dataset(schema, annotations, samples, emb)
