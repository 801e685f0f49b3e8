"""Manifest + blob files for parameters, datasets and calibrated quantizers.

Each archive is three files sharing a stem: `<stem>.tsv` lists every tensor
(name, shape, byte offset, dtype), `<stem>.bin` holds the raw little-endian
bytes back to back and `<stem>.json` carries metadata.
"""
import json
import logging
from pathlib import Path

import numpy as np
import tablib

from .bit_allocator import BitAllocation
from .datasets import LabeledDataset
from .exceptions import FormatError
from .layers import LayerId
from .quantizers import LayerQuant, QuantModel, QuantParams
from .vit import ViTConfig, ViTParams

logger = logging.getLogger(__name__)

MANIFEST_HEADERS = ("name", "shape", "offset", "dtype")
PARAM_DTYPE = "<f4"
FORMAT_VERSION = 1
_DTYPES = {"<f4", "<f8", "<i8"}


def write_json(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def read_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FormatError(f"missing file {path}", path=str(path)) from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path} is not valid JSON: {exc}", path=str(path)) from exc


def write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def read_text(path):
    path = Path(path)
    try:
        return path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise FormatError(f"missing file {path}", path=str(path)) from None


def _shape_text(shape):
    return "x".join(str(dim) for dim in shape)


def _parse_shape(text):
    return tuple(int(dim) for dim in text.split("x")) if text else ()


def save_archive(stem, entries, meta):
    """Write (name, array, dtype) entries under `stem`."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    manifest = tablib.Dataset(headers=list(MANIFEST_HEADERS))
    offset = 0
    with open(stem.with_suffix(".bin"), "wb") as blob:
        for name, array, dtype in entries:
            if dtype not in _DTYPES:
                raise FormatError(f"unsupported dtype {dtype}", name=name)
            data = np.ascontiguousarray(array, dtype=np.dtype(dtype)).tobytes()
            manifest.append((name, _shape_text(np.shape(array)), offset, dtype))
            blob.write(data)
            offset += len(data)
    write_text(stem.with_suffix(".tsv"), manifest.export("tsv"))
    write_json(stem.with_suffix(".json"), {"format_version": FORMAT_VERSION, **meta})
    logger.info(f"Wrote {len(entries)} tensors ({offset} bytes) to {stem}.bin")
    return stem


def load_archive(stem):
    stem = Path(stem)
    meta = read_json(stem.with_suffix(".json"))
    if meta.get("format_version") != FORMAT_VERSION:
        raise FormatError("unsupported archive version", path=str(stem), version=meta.get("format_version"))
    manifest = tablib.Dataset().load(read_text(stem.with_suffix(".tsv")), format="tsv")
    if tuple(manifest.headers or ()) != MANIFEST_HEADERS:
        raise FormatError("manifest has unexpected columns", path=str(stem))
    try:
        blob = stem.with_suffix(".bin").read_bytes()
    except FileNotFoundError:
        raise FormatError(f"missing file {stem}.bin", path=str(stem)) from None

    tensors = {}
    for row in manifest.dict:
        dtype = row["dtype"]
        if dtype not in _DTYPES:
            raise FormatError(f"unsupported dtype {dtype}", name=row["name"])
        shape = _parse_shape(row["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        offset = int(row["offset"])
        if offset + count * np.dtype(dtype).itemsize > len(blob):
            raise FormatError(f"tensor {row['name']} runs past the end of the blob", path=str(stem))
        array = np.frombuffer(blob, dtype=np.dtype(dtype), count=count, offset=offset).reshape(shape)
        wide = np.float64 if dtype.startswith("<f") else np.int64
        tensors[row["name"]] = array.astype(wide)
    return tensors, meta


def save_params(stem, params):
    entries = [(name, value, PARAM_DTYPE) for name, value in params.items()]
    return save_archive(stem, entries, {"kind": "vit_params", "config": params.config.to_dict()})


def load_params(stem):
    tensors, meta = load_archive(stem)
    if meta.get("kind") != "vit_params":
        raise FormatError("archive does not hold ViT parameters", path=str(stem))
    return ViTParams(ViTConfig.from_dict(meta["config"]), tensors)


def save_dataset(stem, dataset):
    entries = [("images", dataset.images, "<f4"), ("labels", dataset.labels, "<i8")]
    return save_archive(stem, entries, {"kind": "dataset", "split": dataset.split})


def load_dataset(stem):
    tensors, meta = load_archive(stem)
    if meta.get("kind") != "dataset":
        raise FormatError("archive does not hold a dataset", path=str(stem))
    return LabeledDataset(tensors["images"], tensors["labels"], meta["split"])


def _describe(qp):
    return {"scheme": qp.scheme.value, "bits": qp.bits, "granularity": qp.granularity.value}


def _quant_entries(prefix, qp):
    return [(f"{prefix}.scale", qp.scale, "<f8"), (f"{prefix}.zero_point", qp.zero_point, "<i8")]


def _restore(tensors, prefix, description):
    try:
        return QuantParams(
            description["scheme"],
            description["bits"],
            description["granularity"],
            tensors[f"{prefix}.scale"],
            tensors[f"{prefix}.zero_point"],
        )
    except KeyError as exc:
        raise FormatError(f"quantizer {prefix} is incomplete", missing=str(exc)) from exc


def save_qmodel(stem, qmodel):
    entries, layers = [], {}
    for layer_id in sorted(qmodel.layers, key=lambda layer_id: layer_id.sort_key):
        layer = qmodel.layers[layer_id]
        described = {"weight": None, "inputs": []}
        if layer.weight is not None:
            entries += _quant_entries(f"{layer_id}.weight", layer.weight)
            described["weight"] = _describe(layer.weight)
        for slot, qp in enumerate(layer.inputs):
            entries += _quant_entries(f"{layer_id}.input{slot}", qp)
            described["inputs"].append(_describe(qp))
        layers[str(layer_id)] = described
    entries += [(f"folded.{name}", value, "<f8") for name, value in sorted(qmodel.folded.items())]
    meta = {
        "kind": "quant_model",
        "layers": layers,
        "allocation": qmodel.allocation.to_csv(),
        "provenance": qmodel.provenance,
    }
    return save_archive(stem, entries, meta)


def load_qmodel(stem):
    tensors, meta = load_archive(stem)
    if meta.get("kind") != "quant_model":
        raise FormatError("archive does not hold a calibrated model", path=str(stem))
    layers = {}
    for text, described in meta["layers"].items():
        layer_id = LayerId.parse(text)
        weight = None
        if described["weight"] is not None:
            weight = _restore(tensors, f"{text}.weight", described["weight"])
        inputs = tuple(
            _restore(tensors, f"{text}.input{slot}", description)
            for slot, description in enumerate(described["inputs"])
        )
        layers[layer_id] = LayerQuant(weight, inputs)
    folded = {
        name[len("folded.") :]: value for name, value in tensors.items() if name.startswith("folded.")
    }
    return QuantModel(layers, BitAllocation.from_csv(meta["allocation"]), folded, meta["provenance"])
