"""
KLTW artifact container for datasets, surrogate models and error reports.

Layout (little-endian):
  b"KLTW" | uint32 version | records...
  record = uint32 name_len | name (utf-8) | uint8 dtype | uint32 rank | uint64 dims[rank] | raw data
dtype 0 is float64 (arrays), dtype 1 is uint8 (the JSON metadata record "__meta__").
A human-readable <path>.json manifest with kind, version, timestamp and metadata is written alongside.
"""

from __future__ import annotations
import json
import logging
import math
import struct
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np

from . import config
from .errors import FormatError, InvalidArgumentError
from .field_core import Field, Grid, KlBasis, build_grid
from .harness import Dataset
from .latent_maps import LinearMap
from .mlp import Mlp
from .models import ConditionSpec, ErrorReport
from .transfer import SurrogateModel

log = logging.getLogger(__name__)

_META = "__meta__"
_DTYPE_F8 = 0
_DTYPE_U8 = 1
_ITEMSIZE = {_DTYPE_F8: 8, _DTYPE_U8: 1}
_NUMPY_DTYPE = {_DTYPE_F8: "<f8", _DTYPE_U8: "u1"}


# ── Low-level container ───────────────────────────────────────────────────────

def _record(name: str, array: np.ndarray, dtype: int) -> bytes:
    encoded = name.encode("utf-8")
    array = np.ascontiguousarray(array, dtype=_NUMPY_DTYPE[dtype])
    header = struct.pack("<I", len(encoded)) + encoded + struct.pack("<BI", dtype, array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    return header + array.tobytes()


def write_container(path: Path, arrays: dict[str, np.ndarray], meta: dict[str, Any]) -> None:
    blob = bytearray(config.ARTIFACT_MAGIC + struct.pack("<I", config.ARTIFACT_VERSION))
    payload = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    blob += _record(_META, payload, _DTYPE_U8)
    for name, array in arrays.items():
        blob += _record(name, np.asarray(array, dtype=np.float64), _DTYPE_F8)
    path.write_bytes(bytes(blob))


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise FormatError(f"truncated {what}", offset=self.offset)
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_container(path: Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Arrays and metadata of a KLTW file; FormatError on any structural problem."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise InvalidArgumentError(f"cannot read artifact {path}: {exc}") from exc
    reader = _Reader(data)
    if reader.take(4, "magic") != config.ARTIFACT_MAGIC:
        raise FormatError("bad magic", offset=0)
    (version,) = reader.unpack("<I", "version")
    if version != config.ARTIFACT_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)

    arrays: dict[str, np.ndarray] = {}
    meta: dict[str, Any] | None = None
    while reader.offset < len(data):
        start = reader.offset
        (name_len,) = reader.unpack("<I", "record name length")
        try:
            name = reader.take(name_len, "record name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("record name is not utf-8", offset=start + 4) from exc
        dtype, rank = reader.unpack("<BI", f"record {name!r} header")
        if dtype not in _ITEMSIZE:
            raise FormatError(f"record {name!r} has unknown dtype {dtype}", offset=reader.offset - 5)
        dims = reader.unpack(f"<{rank}Q", f"record {name!r} dims")
        count = math.prod(dims)
        if count > (len(data) - reader.offset) // _ITEMSIZE[dtype]:
            raise FormatError(f"record {name!r} dims {list(dims)} exceed the remaining data", offset=reader.offset)
        raw = reader.take(count * _ITEMSIZE[dtype], f"record {name!r} data")
        try:
            array = np.frombuffer(raw, dtype=_NUMPY_DTYPE[dtype]).reshape(dims)
        except ValueError as exc:
            raise FormatError(f"record {name!r} has invalid dims {list(dims)}", offset=start) from exc
        if name == _META:
            try:
                meta = json.loads(array.tobytes().decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise FormatError("metadata record is not valid JSON", offset=start) from exc
            if not isinstance(meta, dict):
                raise FormatError("metadata record is not a JSON object", offset=start)
        else:
            arrays[name] = array.astype(np.float64)
    if meta is None:
        raise FormatError("missing metadata record", offset=reader.offset)
    return arrays, meta


# ── Object encoding ───────────────────────────────────────────────────────────

def _grid_meta(grid: Grid) -> dict[str, Any]:
    return {"n_x": grid.n_x, "n_t": grid.n_t, "length": grid.length, "horizon": grid.horizon}


def _encode_basis(prefix: str, basis: KlBasis, arrays: dict[str, np.ndarray]) -> dict[str, Any]:
    arrays[f"{prefix}/mean"] = basis.mean.values
    arrays[f"{prefix}/eigenvalues"] = basis.eigenvalues
    arrays[f"{prefix}/eigenvectors"] = basis.eigenvectors
    return {"kind": basis.kind, "total_variance": basis.total_variance}


def _decode_basis(prefix: str, grid: Grid, meta: dict[str, Any], arrays: dict[str, np.ndarray]) -> KlBasis:
    return KlBasis(
        Field(grid, meta["kind"], arrays[f"{prefix}/mean"]),
        arrays[f"{prefix}/eigenvalues"],
        arrays[f"{prefix}/eigenvectors"],
        meta["total_variance"],
    )


def _encode(obj: object) -> tuple[str, dict[str, np.ndarray], dict[str, Any]]:
    arrays: dict[str, np.ndarray] = {}
    if isinstance(obj, ErrorReport):
        return "error_report", arrays, {"report": obj.model_dump(mode="json")}

    if isinstance(obj, Dataset):
        for name, values in obj.controls.items():
            arrays[f"controls/{name}"] = values
        for name, values in obj.latents.items():
            arrays[f"latents/{name}"] = values
        arrays["ibc"] = obj.ibc
        arrays["solutions"] = obj.solutions
        if obj.conductivity is not None:
            arrays["conductivity"] = obj.conductivity.values
        meta = {
            "problem": obj.problem,
            "condition": obj.condition.model_dump(mode="json"),
            "grid": _grid_meta(obj.grid),
            "seed": obj.seed,
            "x_star": obj.x_star,
            "controls": list(obj.controls),
            "latents": list(obj.latents),
        }
        return "dataset", arrays, meta

    if isinstance(obj, SurrogateModel):
        bases = {"state": _encode_basis("state", obj.state, arrays)}
        for name, basis in obj.controls.items():
            bases[f"control/{name}"] = _encode_basis(f"control/{name}", basis, arrays)
        if isinstance(obj.latent_map, Mlp):
            for i, (w, b) in enumerate(zip(obj.latent_map.weights, obj.latent_map.biases)):
                arrays[f"map/w{i}"] = w
                arrays[f"map/b{i}"] = b
            map_meta = {"type": "mlp", "layers": len(obj.latent_map.weights), "final_loss": obj.latent_map.final_loss}
        else:
            arrays["map/weights"] = obj.latent_map.weights
            arrays["map/bias"] = obj.latent_map.bias
            map_meta = {"type": "linear"}
        if obj.conductivity is not None:
            arrays["conductivity"] = obj.conductivity.values
        meta = {
            "problem": obj.problem,
            "method": obj.method,
            "condition": obj.condition.model_dump(mode="json"),
            "grid": _grid_meta(obj.grid),
            "bases": bases,
            "map": map_meta,
            "gamma": obj.gamma,
            "ibc_means": list(obj.ibc_means),
            "x_star": obj.x_star,
            "rls_weights": None if obj.rls_weights is None else list(obj.rls_weights),
        }
        return "surrogate_model", arrays, meta

    raise InvalidArgumentError(f"cannot save objects of type {type(obj).__name__}")


def _decode(kind: str, arrays: dict[str, np.ndarray], meta: dict[str, Any]) -> object:
    if kind == "error_report":
        return ErrorReport.model_validate(meta["report"])
    grid = build_grid(**meta["grid"])
    conductivity = Field(grid, "space_only", arrays["conductivity"]) if "conductivity" in arrays else None
    condition = ConditionSpec.model_validate(meta["condition"])

    if kind == "dataset":
        return Dataset(
            problem=meta["problem"],
            condition=condition,
            grid=grid,
            seed=meta["seed"],
            controls={name: arrays[f"controls/{name}"] for name in meta["controls"]},
            latents={name: arrays[f"latents/{name}"] for name in meta["latents"]},
            ibc=arrays["ibc"],
            solutions=arrays["solutions"],
            conductivity=conductivity,
            x_star=meta["x_star"],
        )

    if kind == "surrogate_model":
        bases = meta["bases"]
        controls = {
            key.split("/", 1)[1]: _decode_basis(key, grid, value, arrays)
            for key, value in bases.items() if key.startswith("control/")
        }
        map_meta = meta["map"]
        if map_meta["type"] == "mlp":
            n = map_meta["layers"]
            latent_map: LinearMap | Mlp = Mlp(
                tuple(arrays[f"map/w{i}"] for i in range(n)),
                tuple(arrays[f"map/b{i}"] for i in range(n)),
                map_meta["final_loss"],
            )
        else:
            latent_map = LinearMap(arrays["map/weights"], arrays["map/bias"])
        return SurrogateModel(
            problem=meta["problem"],
            state=_decode_basis("state", grid, bases["state"], arrays),
            controls=controls,
            latent_map=latent_map,
            condition=condition,
            method=meta["method"],
            gamma=meta["gamma"],
            ibc_means=tuple(meta["ibc_means"]),
            conductivity=conductivity,
            x_star=meta["x_star"],
            rls_weights=None if meta["rls_weights"] is None else tuple(meta["rls_weights"]),
        )

    raise FormatError(f"unknown artifact kind {kind!r}", offset=0)


# ── Public API ────────────────────────────────────────────────────────────────

def save_artifact(path: Path, obj: Dataset | SurrogateModel | ErrorReport) -> Path:
    """Write obj to path (KLTW container) plus the <path>.json manifest; returns path."""
    path = Path(path)
    kind, arrays, meta = _encode(obj)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_container(path, arrays, {"kind": kind, **meta})
    manifest = {
        "kind": kind,
        "format_version": config.ARTIFACT_VERSION,
        "timestamp": datetime.now(timezone.utc).timestamp(),
        "arrays": {name: list(np.shape(a)) for name, a in arrays.items()},
        "meta": meta,
    }
    path.with_name(path.name + ".json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    log.info("saved %s to %s", kind, path)
    return path


def load_artifact(path: Path) -> Dataset | SurrogateModel | ErrorReport:
    """Read an object written by save_artifact. Raises FormatError; never returns a partial object."""
    arrays, meta = read_container(Path(path))
    kind = meta.get("kind")
    try:
        return _decode(kind, arrays, meta)
    except (AttributeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"inconsistent {kind} payload: {exc}", offset=0) from exc
