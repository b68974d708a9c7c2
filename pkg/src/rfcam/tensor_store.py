"""On-disk tensor bundle: the boundary between classifier exporters and this tool.

Tensor file layout (little-endian throughout):

    bytes 0..3   magic "SCDT"
    bytes 4..7   format version, uint32 (currently 1)
    bytes 8..11  ndim, uint32
    next 4*ndim  dims, uint32 each
    rest         payload, float32 IEEE-754, row-major

A bundle directory holds ``manifest.json`` at its root, tensors under
``tensors/`` and optional source images under ``images/`` (PNG).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from rfcam.errors import FormatError, NotFoundError, ValidationError

MAGIC = b"SCDT"
FORMAT_VERSION = 1

GRADIENT_MODES = ("precomputed", "analytic_head")
SPLITS = ("train", "test")


def write_tensor(path: str | Path, dims: Sequence[int], data: np.ndarray | Sequence[float]) -> None:
    """Write a float32 tensor in the bundle binary format (bit-exact)."""
    dims = [int(d) for d in dims]
    if any(d < 1 for d in dims):
        raise ValidationError(f"all dims must be >= 1, got {dims}")
    flat = np.asarray(data, dtype="<f4").reshape(-1)
    n = int(np.prod(dims))
    if flat.size != n:
        raise ValidationError(f"dims {dims} imply {n} values, got {flat.size}")
    if not np.all(np.isfinite(flat)):
        bad = int(np.flatnonzero(~np.isfinite(flat))[0])
        raise ValidationError(f"non-finite value at flat index {bad}")
    header = MAGIC + struct.pack("<II", FORMAT_VERSION, len(dims))
    header += struct.pack(f"<{len(dims)}I", *dims)
    Path(path).write_bytes(header + flat.tobytes())


def read_tensor(path: str | Path) -> tuple[list[int], np.ndarray]:
    """Read a tensor written by :func:`write_tensor`; returns (dims, flat float32 array)."""
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version, ndim = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    if len(raw) < 12 + 4 * ndim:
        raise FormatError(f"{path}: truncated dim list")
    dims = list(struct.unpack_from(f"<{ndim}I", raw, 12))
    if any(d < 1 for d in dims):
        raise FormatError(f"{path}: invalid dims {dims}")
    n = int(np.prod(dims))
    payload = raw[12 + 4 * ndim:]
    if len(payload) != 4 * n:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {4 * n}")
    flat = np.frombuffer(payload, dtype="<f4").copy()
    finite = np.isfinite(flat)
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise ValidationError(f"{path}: non-finite value at flat index {bad}")
    return dims, flat


def load_tensor(path: str | Path) -> np.ndarray:
    """Read a tensor and return it shaped."""
    dims, flat = read_tensor(path)
    return flat.reshape(dims)


@dataclass(frozen=True)
class Manifest:
    format_version: int
    num_classes: int
    channels: int
    map_height: int
    map_width: int
    gradient_mode: str
    class_names: tuple[str, ...]
    head_weights_path: Optional[str] = None
    input_image_size: Optional[tuple[int, int]] = None

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValidationError(f"num_classes must be >= 2, got {self.num_classes}")
        if min(self.channels, self.map_height, self.map_width) < 1:
            raise ValidationError("channels, map_height and map_width must be >= 1")
        if self.gradient_mode not in GRADIENT_MODES:
            raise ValidationError(f"gradient_mode must be one of {GRADIENT_MODES}")
        if self.gradient_mode == "analytic_head" and not self.head_weights_path:
            raise ValidationError("analytic_head mode requires head_weights_path")
        if len(self.class_names) != self.num_classes:
            raise ValidationError(
                f"class_names has {len(self.class_names)} entries for {self.num_classes} classes"
            )

    def to_json_dict(self) -> dict:
        d = {
            "format_version": self.format_version,
            "num_classes": self.num_classes,
            "channels": self.channels,
            "map_height": self.map_height,
            "map_width": self.map_width,
            "gradient_mode": self.gradient_mode,
            "class_names": list(self.class_names),
        }
        if self.head_weights_path is not None:
            d["head_weights_path"] = self.head_weights_path
        if self.input_image_size is not None:
            d["input_image_size"] = list(self.input_image_size)
        return d


@dataclass(frozen=True)
class ImageEntry:
    id: str
    true_label: int
    predicted_label: int
    activation_path: str
    gradient_path: Optional[str] = None
    image_path: Optional[str] = None
    split: str = "train"

    def to_json_dict(self) -> dict:
        d = {
            "id": self.id,
            "true_label": self.true_label,
            "predicted_label": self.predicted_label,
            "activation_path": self.activation_path,
            "split": self.split,
        }
        if self.gradient_path is not None:
            d["gradient_path"] = self.gradient_path
        if self.image_path is not None:
            d["image_path"] = self.image_path
        return d


@dataclass(frozen=True)
class HeadWeights:
    """Global-average-pool + linear classifier head (num_classes x K plus bias)."""

    weight_matrix: np.ndarray
    bias: np.ndarray

    def validate(self, num_classes: int, channels: int) -> None:
        if self.weight_matrix.shape != (num_classes, channels):
            raise ValidationError(
                f"head weight matrix shape {self.weight_matrix.shape}, "
                f"expected {(num_classes, channels)}"
            )
        if self.bias.shape != (num_classes,):
            raise ValidationError(f"head bias shape {self.bias.shape}, expected ({num_classes},)")
        if not (np.all(np.isfinite(self.weight_matrix)) and np.all(np.isfinite(self.bias))):
            raise ValidationError("head weights contain non-finite values")

    def to_json_dict(self) -> dict:
        return {
            "weight_matrix": self.weight_matrix.tolist(),
            "bias": self.bias.tolist(),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "HeadWeights":
        return cls(
            weight_matrix=np.asarray(d["weight_matrix"], dtype=np.float64),
            bias=np.asarray(d["bias"], dtype=np.float64),
        )


@dataclass
class TensorBundle:
    root_path: Path
    manifest: Manifest
    images: list[ImageEntry]
    _by_id: dict[str, ImageEntry] = field(repr=False, compare=False, default_factory=dict)
    _head: Optional[HeadWeights] = field(repr=False, compare=False, default=None)

    def __post_init__(self) -> None:
        self._by_id = {e.id: e for e in self.images}

    @property
    def shape(self) -> tuple[int, int, int]:
        m = self.manifest
        return (m.channels, m.map_height, m.map_width)

    def entry(self, entry_id: str) -> ImageEntry:
        try:
            return self._by_id[entry_id]
        except KeyError:
            raise NotFoundError(f"no entry with id {entry_id!r}") from None

    def activations(self, entry_id: str) -> np.ndarray:
        """Load the (K, H, W) activation tensor for an entry, validating its shape."""
        entry = self.entry(entry_id)
        tensor = load_tensor(self.root_path / entry.activation_path)
        if tensor.shape != self.shape:
            raise ValidationError(
                f"entry {entry_id!r}: activation shape {tensor.shape} != manifest {self.shape}"
            )
        return tensor

    def gradients(self, entry_id: str) -> np.ndarray:
        """Load the precomputed (K, H, W) gradient tensor for an entry."""
        entry = self.entry(entry_id)
        if entry.gradient_path is None:
            raise ValidationError(f"entry {entry_id!r} has no gradient tensor")
        tensor = load_tensor(self.root_path / entry.gradient_path)
        if tensor.shape != self.shape:
            raise ValidationError(
                f"entry {entry_id!r}: gradient shape {tensor.shape} != manifest {self.shape}"
            )
        return tensor

    def head_weights(self) -> HeadWeights:
        if self._head is None:
            if self.manifest.head_weights_path is None:
                raise ValidationError("bundle manifest declares no head_weights_path")
            path = self.root_path / self.manifest.head_weights_path
            if not path.exists():
                raise NotFoundError(f"head weights file missing: {path}")
            head = HeadWeights.from_json_dict(json.loads(path.read_text(encoding="utf-8")))
            head.validate(self.manifest.num_classes, self.manifest.channels)
            self._head = head
        return self._head

    def entries_for_split(self, split: str) -> list[ImageEntry]:
        return [e for e in self.images if e.split == split]


def _parse_manifest(doc: dict) -> Manifest:
    required = ("format_version", "num_classes", "channels", "map_height",
                "map_width", "gradient_mode", "class_names")
    missing = [k for k in required if k not in doc]
    if missing:
        raise ValidationError(f"manifest missing fields: {missing}")
    size = doc.get("input_image_size")
    return Manifest(
        format_version=int(doc["format_version"]),
        num_classes=int(doc["num_classes"]),
        channels=int(doc["channels"]),
        map_height=int(doc["map_height"]),
        map_width=int(doc["map_width"]),
        gradient_mode=str(doc["gradient_mode"]),
        class_names=tuple(str(n) for n in doc["class_names"]),
        head_weights_path=doc.get("head_weights_path"),
        input_image_size=(int(size[0]), int(size[1])) if size is not None else None,
    )


def validate_entry(entry: ImageEntry, manifest: Manifest) -> None:
    for name, label in (("true_label", entry.true_label), ("predicted_label", entry.predicted_label)):
        if not 0 <= label < manifest.num_classes:
            raise ValidationError(f"entry {entry.id!r}: {name} {label} outside [0, {manifest.num_classes})")
    if entry.split not in SPLITS:
        raise ValidationError(f"entry {entry.id!r}: split must be one of {SPLITS}")
    if manifest.gradient_mode == "precomputed" and entry.gradient_path is None:
        raise ValidationError(f"entry {entry.id!r}: precomputed mode requires a gradient tensor")


def _parse_entry(doc: dict, manifest: Manifest) -> ImageEntry:
    entry = ImageEntry(
        id=str(doc["id"]),
        true_label=int(doc["true_label"]),
        predicted_label=int(doc["predicted_label"]),
        activation_path=str(doc["activation_path"]),
        gradient_path=doc.get("gradient_path"),
        image_path=doc.get("image_path"),
        split=str(doc.get("split", "train")),
    )
    validate_entry(entry, manifest)
    return entry


def load_bundle(root: str | Path) -> TensorBundle:
    """Load and validate a tensor bundle rooted at ``root``.

    Manifest-level invariants are checked eagerly; tensor shapes and
    finiteness are checked lazily on first access. Unknown manifest fields
    are ignored for forward compatibility.
    """
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise NotFoundError(f"no manifest.json under {root}")
    doc = json.loads(manifest_path.read_text(encoding="utf-8"))
    manifest = _parse_manifest(doc)
    manifest.validate()

    entries = [_parse_entry(e, manifest) for e in doc.get("images", [])]
    seen: set[str] = set()
    for entry in entries:
        if entry.id in seen:
            raise ValidationError(f"duplicate entry id {entry.id!r}")
        seen.add(entry.id)

    bundle = TensorBundle(root_path=root, manifest=manifest, images=entries)
    if manifest.gradient_mode == "analytic_head":
        bundle.head_weights()  # eager: manifest-level invariant
    return bundle


def write_bundle_manifest(root: str | Path, manifest: Manifest, entries: Sequence[ImageEntry]) -> None:
    """Write manifest.json for a bundle (validates first)."""
    manifest.validate()
    for entry in entries:
        validate_entry(entry, manifest)
    doc = manifest.to_json_dict()
    doc["images"] = [e.to_json_dict() for e in entries]
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "manifest.json").write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
