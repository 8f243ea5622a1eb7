"""Binary containers for models, fingerprints, and detectors.

Model parameters use the exact `FRW1` layout::

    bytes 0..3   magic b"FRW1"
    u32          layer count L                     (little endian)
    u32 pairs    per-layer (fan_in, fan_out), L of them
    f32 stream   per-layer weight matrix (row-major) then bias, in order

Fingerprint sets (`FRF1`) and detectors (`FRD1`) reuse the same
conventions but store tagged sections: a 4-byte ASCII tag, a u8 dtype
code, a u8 rank, u32 dims, then the raw little-endian payload. Round
trips are bit-exact for every container.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .nn import MlpModel, ModelParams

PARAMS_MAGIC = b"FRW1"
FINGERPRINT_MAGIC = b"FRF1"
DETECTOR_MAGIC = b"FRD1"

_DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i8"): 2,
    np.dtype("<u4"): 3,
    np.dtype("|u1"): 4,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class ContainerError(ValueError):
    """Raised on bad magic, truncation, or malformed sections."""


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ContainerError(f"truncated container: wanted {n} bytes, got {len(data)}")
    return data


def save_params(params: ModelParams, path: str) -> None:
    params.validate()
    with open(path, "wb") as fh:
        fh.write(PARAMS_MAGIC)
        fh.write(struct.pack("<I", len(params.layers)))
        for w, _ in params.layers:
            fh.write(struct.pack("<II", w.shape[0], w.shape[1]))
        for w, b in params.layers:
            fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def load_params(path: str) -> ModelParams:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4)
        if magic != PARAMS_MAGIC:
            raise ContainerError(f"bad magic {magic!r}, expected {PARAMS_MAGIC!r}")
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        shapes = [struct.unpack("<II", _read_exact(fh, 8)) for _ in range(count)]
        layers = []
        for fan_in, fan_out in shapes:
            w = np.frombuffer(
                _read_exact(fh, 4 * fan_in * fan_out), dtype="<f4"
            ).reshape(fan_in, fan_out)
            b = np.frombuffer(_read_exact(fh, 4 * fan_out), dtype="<f4")
            layers.append((w.copy(), b.copy()))
        if fh.read(1):
            raise ContainerError("trailing bytes after parameter data")
    params = ModelParams(layers)
    params.validate()
    return params


def save_model(model: MlpModel, path: str) -> None:
    save_params(model.params, path)


def load_model(path: str) -> MlpModel:
    return MlpModel(load_params(path))


def _write_section(fh: BinaryIO, tag: str, array: np.ndarray) -> None:
    raw = tag.encode("ascii")
    if len(raw) != 4:
        raise ValueError(f"section tag must be 4 ASCII bytes, got {tag!r}")
    arr = np.asarray(array)
    dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    arr = arr.astype(dtype, copy=False)
    code = _DTYPE_CODES[np.dtype(dtype)]
    fh.write(raw)
    fh.write(struct.pack("<BB", code, arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(arr.tobytes())  # tobytes always emits C order, 0-d included


def _read_sections(fh: BinaryIO) -> dict[str, np.ndarray]:
    sections: dict[str, np.ndarray] = {}
    while True:
        raw = fh.read(4)
        if not raw:
            return sections
        if len(raw) != 4:
            raise ContainerError("truncated section tag")
        tag = raw.decode("ascii")
        code, ndim = struct.unpack("<BB", _read_exact(fh, 2))
        if code not in _CODE_DTYPES:
            raise ContainerError(f"unknown dtype code {code} in section {tag}")
        shape = tuple(
            struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(ndim)
        )
        dtype = _CODE_DTYPES[code]
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        data = np.frombuffer(_read_exact(fh, n_bytes), dtype=dtype)
        sections[tag] = data.reshape(shape).copy() if ndim else data[0]
    return sections


def save_sections(path: str, magic: bytes, sections: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(magic)
        for tag, array in sections.items():
            _write_section(fh, tag, np.asarray(array))


def load_sections(path: str, magic: bytes) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        got = _read_exact(fh, 4)
        if got != magic:
            raise ContainerError(f"bad magic {got!r}, expected {magic!r}")
        return _read_sections(fh)


def params_to_sections(params: ModelParams, prefix: str) -> dict[str, np.ndarray]:
    """Flatten model params into tagged sections (prefix + 2-digit index)."""
    out: dict[str, np.ndarray] = {
        prefix + "N#": np.uint32(len(params.layers)),
    }
    for i, (w, b) in enumerate(params.layers):
        out[f"{prefix}{i:02d}"] = w
        out[f"{prefix[0]}b{i:02d}"] = b
    return out


def params_from_sections(sections: dict[str, np.ndarray], prefix: str) -> ModelParams:
    count = int(sections[prefix + "N#"])
    layers = []
    for i in range(count):
        w = sections[f"{prefix}{i:02d}"].astype(np.float32, copy=False)
        b = sections[f"{prefix[0]}b{i:02d}"].astype(np.float32, copy=False)
        layers.append((w, b))
    return ModelParams(layers)


def save_fingerprints(fp, path: str) -> None:
    """Write a FingerprintSet to the tagged FRF1 container."""
    sections = {
        "KEYS": fp.base_keys.samples,
        "KLBL": fp.base_keys.labels,
        "KCLS": np.uint32(fp.base_keys.class_count),
        "CURR": fp.current,
        "TGTS": fp.targets,
        "VALD": fp.valid.astype(np.uint8),
        "BRTH": fp.birth_round,
        "EPSL": np.float64(fp.epsilon),
        "SRND": np.uint32(fp.start_round),
    }
    save_sections(path, FINGERPRINT_MAGIC, sections)


def load_fingerprints(path: str):
    from .data import Dataset
    from .fingerprint import FingerprintSet

    s = load_sections(path, FINGERPRINT_MAGIC)
    keys = Dataset(s["KEYS"], s["KLBL"], int(s["KCLS"]), "keys")
    return FingerprintSet(
        base_keys=keys,
        current=s["CURR"],
        targets=s["TGTS"],
        valid=s["VALD"].astype(bool),
        birth_round=s["BRTH"],
        epsilon=float(s["EPSL"]),
        start_round=int(s["SRND"]),
    )


def save_detector(det, path: str) -> None:
    """Write a Detector to the tagged FRD1 container.

    Calibration audit data is part of the run report, not the container.
    """
    sections = params_to_sections(det.model.params, "Mp")
    sections["ALPH"] = np.float64(det.alpha)
    sections["KCLS"] = np.uint32(det.key_class_count)
    sections["TRSN"] = np.uint32(det.training_rounds_seen)
    sections["ULGT"] = np.uint8(1 if det.use_logits else 0)
    save_sections(path, DETECTOR_MAGIC, sections)


def load_detector(path: str):
    from .detector import Detector

    s = load_sections(path, DETECTOR_MAGIC)
    return Detector(
        model=MlpModel(params_from_sections(s, "Mp")),
        key_class_count=int(s["KCLS"]),
        alpha=float(s["ALPH"]),
        training_rounds_seen=int(s["TRSN"]),
        use_logits=bool(int(s["ULGT"])),
    )
