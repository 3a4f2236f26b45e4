"""Tensor containers, netpbm images, dataset manifests and normalization.

Images are stored as binary netpbm (P5 grey, P6 colour, 8 or 16 bit) or as a DMXT tensor
container. A DMXT file is the little-endian layout

    b"DMXT" | u32 count | count x (u16 name_len | name | u8 dtype | u8 ndim | ndim x u32 | f32...)

with dtype code 1 for float32. It is also the substrate for checkpoints and embeddings.
"""

from __future__ import annotations

import csv
import struct
from collections.abc import Iterable, Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Final, Literal

import numpy as np
import torch

from dino_desk.errors import FormatError

DMXT_MAGIC: Final = b"DMXT"
DTYPE_F32: Final = 1
MAX_PIXELS: Final = 1 << 28
MANIFEST_NAME: Final = "manifest.csv"

type NamedTensors = Mapping[str, torch.Tensor] | Iterable[tuple[str, torch.Tensor]]


def check_finite(tensor: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    """Raise if `tensor` holds NaN or Inf, otherwise return it unchanged."""
    if not bool(torch.isfinite(tensor).all()):
        raise ValueError(f"{what} contains non-finite values.")
    return tensor


@dataclass(frozen=True)
class ImageSample:
    """One decoded image, pixels of shape [C, H, W] scaled into [0, 1]."""

    pixels: torch.Tensor
    source_id: str

    def __post_init__(self) -> None:
        """Validate the channel count and the value range."""
        if self.pixels.dim() != 3 or self.pixels.shape[0] not in {1, 3}:
            raise ValueError(f"Image must have shape [1|3, H, W], got {list(self.pixels.shape)}.")
        check_finite(self.pixels, f"image {self.source_id}")

    @property
    def channels(self) -> int:
        """Number of channels, 1 or 3."""
        return int(self.pixels.shape[0])

    @property
    def height(self) -> int:
        """Height in pixels."""
        return int(self.pixels.shape[1])

    @property
    def width(self) -> int:
        """Width in pixels."""
        return int(self.pixels.shape[2])


@dataclass(frozen=True)
class RoiMask:
    """Binary region-of-interest grid paired with an image."""

    mask: torch.Tensor

    def __post_init__(self) -> None:
        """Store the mask as a boolean [H, W] tensor."""
        if self.mask.dim() != 2:
            raise ValueError(f"ROI mask must be 2-D, got {list(self.mask.shape)}.")
        object.__setattr__(self, "mask", self.mask != 0)

    @property
    def height(self) -> int:
        """Height in pixels."""
        return int(self.mask.shape[0])

    @property
    def width(self) -> int:
        """Width in pixels."""
        return int(self.mask.shape[1])

    def is_empty(self) -> bool:
        """Whether no pixel is marked."""
        return not bool(self.mask.any())


@dataclass(frozen=True)
class ManifestEntry:
    """One manifest row with paths resolved against the manifest directory."""

    image_path: Path
    class_label: int
    roi_path: Path | None = None


@dataclass(frozen=True)
class DatasetManifest:
    """Parsed dataset manifest, entries in file order."""

    root: Path
    entries: tuple[ManifestEntry, ...]

    @property
    def num_classes(self) -> int:
        """Number of distinct classes."""
        return len({entry.class_label for entry in self.entries})

    def __len__(self) -> int:
        """Number of entries."""
        return len(self.entries)


@dataclass(frozen=True)
class LabeledSample:
    """An image with its class label and optional ROI, as consumed by the trainers."""

    image: ImageSample
    label: int
    roi: RoiMask | None = None


def read_manifest(path: Path | str, label_map: Mapping[str, int] | None = None) -> DatasetManifest:
    """Parse a CSV manifest with header `image,label[,roi]`.

    `path` may name the CSV itself or a directory containing `manifest.csv`. Relative image and
    ROI paths are resolved against the manifest directory. Shuffling is left to training.
    """
    path = Path(path)
    if path.is_dir():
        path /= MANIFEST_NAME
    if not path.is_file():
        raise FileNotFoundError(f"Manifest not found: {path}")
    root = path.parent
    entries: list[ManifestEntry] = []
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = [cell.strip() for cell in next(reader, [])]
        if header not in (["image", "label"], ["image", "label", "roi"]):
            raise FormatError(f"{path}: header must be 'image,label[,roi]', got {header}.")
        for row_number, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) not in (2, len(header)):
                raise FormatError(f"{path}: row {row_number} has {len(row)} columns.")
            label_cell = row[1].strip()
            try:
                label = label_map[label_cell] if label_map is not None else int(label_cell)
            except (KeyError, ValueError) as err:
                raise FormatError(f"{path}: row {row_number} has bad label {label_cell!r}.") from err
            if label < 0:
                raise FormatError(f"{path}: row {row_number} has negative label {label}.")
            image_path = root / row[0].strip()
            if not image_path.is_file():
                raise FormatError(f"{path}: row {row_number} references missing {image_path}.")
            roi_path = None
            if len(row) == 3 and row[2].strip():
                roi_path = root / row[2].strip()
                if not roi_path.is_file():
                    raise FormatError(f"{path}: row {row_number} references missing {roi_path}.")
            entries.append(ManifestEntry(image_path, label, roi_path))
    if label_map is None and entries:
        labels = {entry.class_label for entry in entries}
        if labels != set(range(len(labels))):
            raise FormatError(
                f"{path}: labels {sorted(labels)} are not contiguous 0..K-1; supply a label map."
            )
    return DatasetManifest(root=root, entries=tuple(entries))


def _read_netpbm_header(data: bytes) -> tuple[bytes, int, int, int, int]:
    """Return (magic, width, height, maxval, payload offset) of a binary netpbm file."""
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("Truncated netpbm header.")
        tokens.append(data[start:pos])
    # Exactly one whitespace byte separates maxval from the raster
    pos += 1
    try:
        width, height, maxval = (int(token) for token in tokens[1:])
    except ValueError as err:
        raise FormatError(f"Malformed netpbm header {tokens!r}.") from err
    return tokens[0], width, height, maxval, pos


def _decode_netpbm(data: bytes, source: str) -> torch.Tensor:
    magic, width, height, maxval, offset = _read_netpbm_header(data)
    channels = 1 if magic == b"P5" else 3
    if width <= 0 or height <= 0 or width * height * channels > MAX_PIXELS:
        raise FormatError(f"{source}: unsupported dimensions {width}x{height}.")
    if not 0 < maxval < 65536:
        raise FormatError(f"{source}: maxval {maxval} outside 1..65535.")
    dtype = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
    count = width * height * channels
    payload = data[offset : offset + count * dtype.itemsize]
    if len(payload) < count * dtype.itemsize:
        raise FormatError(f"{source}: truncated payload.")
    raster = np.frombuffer(payload, dtype=dtype).astype(np.float32)
    scale = 255.0 if dtype.itemsize == 1 else 65535.0
    pixels = (raster / np.float32(scale)).reshape(height, width, channels).transpose(2, 0, 1)
    return torch.from_numpy(np.ascontiguousarray(pixels))


def load_image(path: Path | str) -> ImageSample:
    """Decode a P5/P6 netpbm or DMXT file into an `ImageSample` with values in [0, 1].

    8-bit samples are scaled by 1/255 and 16-bit samples by 1/65535. A DMXT image holds a
    single [C, H, W] tensor that is loaded verbatim and clamped.
    """
    path = Path(path)
    data = path.read_bytes()
    if data[:2] in (b"P5", b"P6"):
        pixels = _decode_netpbm(data, str(path))
    elif data[:4] == DMXT_MAGIC:
        tensors = _decode_tensors(data, str(path))
        if len(tensors) != 1:
            raise FormatError(f"{path}: image container must hold one tensor, has {len(tensors)}.")
        pixels = next(iter(tensors.values())).clamp(0.0, 1.0)
    else:
        raise FormatError(f"{path}: unsupported magic bytes {data[:4]!r}.")
    return ImageSample(pixels=pixels, source_id=path.stem)


def load_roi(path: Path | str, height: int, width: int) -> RoiMask:
    """Read an ROI image (nonzero = region of interest) and check it matches the image size."""
    sample = load_image(path)
    if (sample.height, sample.width) != (height, width):
        raise FormatError(
            f"{path}: ROI is {sample.height}x{sample.width}, image is {height}x{width}."
        )
    return RoiMask(sample.pixels.amax(dim=0) > 0)


def write_pgm(path: Path | str, values: torch.Tensor) -> None:
    """Write a [H, W] tensor with values in [0, 1] as an 8-bit binary PGM."""
    if values.dim() != 2:
        raise ValueError(f"PGM output must be 2-D, got {list(values.shape)}.")
    raster = (values.detach().clamp(0.0, 1.0) * 255.0).round().to(torch.uint8).numpy()
    height, width = raster.shape
    Path(path).write_bytes(f"P5\n{width} {height}\n255\n".encode("ascii") + raster.tobytes())


def load_dataset(manifest: DatasetManifest) -> list[LabeledSample]:
    """Load every image of a manifest (and its ROI, when present) in manifest order."""
    samples = []
    for entry in manifest.entries:
        image = load_image(entry.image_path)
        roi = (
            load_roi(entry.roi_path, image.height, image.width)
            if entry.roi_path is not None
            else None
        )
        samples.append(LabeledSample(image=image, label=entry.class_label, roi=roi))
    return samples


def _as_pairs(named_tensors: NamedTensors) -> list[tuple[str, torch.Tensor]]:
    pairs = list(named_tensors.items() if isinstance(named_tensors, Mapping) else named_tensors)
    seen: set[str] = set()
    for name, tensor in pairs:
        if not name:
            raise ValueError("Tensor names must be non-empty.")
        if name in seen:
            raise ValueError(f"Duplicate tensor name {name!r}.")
        seen.add(name)
        check_finite(tensor, name)
    return pairs


def encode_tensors(named_tensors: NamedTensors) -> bytes:
    """Serialize named float32 tensors into DMXT bytes."""
    pairs = _as_pairs(named_tensors)
    chunks = [DMXT_MAGIC, struct.pack("<I", len(pairs))]
    for name, tensor in pairs:
        encoded = name.encode("utf-8")
        array = tensor.detach().to(torch.float32).contiguous().cpu().numpy()
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", DTYPE_F32, array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(array.astype("<f4", copy=False).tobytes())
    return b"".join(chunks)


def write_tensors(path: Path | str, named_tensors: NamedTensors) -> None:
    """Write named tensors to a DMXT container; names must be unique and non-empty."""
    Path(path).write_bytes(encode_tensors(named_tensors))


def _decode_tensors(data: bytes, source: str) -> dict[str, torch.Tensor]:
    if data[:4] != DMXT_MAGIC:
        raise FormatError(f"{source}: bad magic {data[:4]!r}.")
    view = memoryview(data)
    try:
        (count,) = struct.unpack_from("<I", view, 4)
        offset = 8
        tensors: dict[str, torch.Tensor] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", view, offset)
            offset += 2
            try:
                name = bytes(view[offset : offset + name_len]).decode("utf-8")
            except UnicodeDecodeError as err:
                raise FormatError(f"{source}: tensor name at byte {offset} is not UTF-8.") from err
            offset += name_len
            dtype, ndim = struct.unpack_from("<BB", view, offset)
            offset += 2
            if dtype != DTYPE_F32:
                raise FormatError(f"{source}: tensor {name!r} has unknown dtype code {dtype}.")
            shape = struct.unpack_from(f"<{ndim}I", view, offset)
            offset += 4 * ndim
            numel = int(np.prod(shape, dtype=np.int64))
            if numel > MAX_PIXELS:
                raise FormatError(f"{source}: tensor {name!r} is too large.")
            nbytes = 4 * numel
            if offset + nbytes > len(data):
                raise FormatError(f"{source}: truncated payload for {name!r}.")
            array = np.frombuffer(data, dtype="<f4", count=numel, offset=offset)
            offset += nbytes
            if name in tensors:
                raise FormatError(f"{source}: duplicate tensor name {name!r}.")
            tensors[name] = torch.from_numpy(array.astype(np.float32).reshape(shape))
    except struct.error as err:
        raise FormatError(f"{source}: truncated container.") from err
    return tensors


def read_tensors(path: Path | str) -> dict[str, torch.Tensor]:
    """Read a DMXT container written by `write_tensors`, preserving order."""
    path = Path(path)
    return _decode_tensors(path.read_bytes(), str(path))


def normalize(
    image: torch.Tensor,
    mode: Literal["unit", "standardize"] = "unit",
    mean: Iterable[float] | None = None,
    std: Iterable[float] | None = None,
) -> torch.Tensor:
    """Normalize a [C, H, W] (or [B, C, H, W]) image.

    `unit` leaves [0, 1] data untouched; `standardize` computes (x - mean) / std per channel,
    which is also how CT intensity windows are expressed.
    """
    if mode == "unit":
        return image
    if mode != "standardize":
        raise ValueError(f"Unknown normalization mode {mode!r}.")
    if mean is None or std is None:
        raise ValueError("standardize requires per-channel mean and std.")
    channels = image.shape[-3]
    mean_t = torch.as_tensor(list(mean), dtype=image.dtype)
    std_t = torch.as_tensor(list(std), dtype=image.dtype)
    if mean_t.numel() != channels or std_t.numel() != channels:
        raise ValueError(
            f"Expected {channels} mean/std values, got {mean_t.numel()}/{std_t.numel()}."
        )
    if bool((std_t == 0).any()):
        raise ValueError("std must be nonzero for every channel.")
    return (image - mean_t.view(-1, 1, 1)) / std_t.view(-1, 1, 1)
