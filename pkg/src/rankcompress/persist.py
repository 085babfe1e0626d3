"""Checkpoint directories: a JSON manifest plus raw little-endian float32 blobs.

Layout::

    <dir>/manifest.json
    <dir>/layer{i}.{w|bias|a|b}.f32

Rank vectors, reports, and datasets use the same manifest; datasets add
``features.f32`` and ``labels.i32`` blobs.
"""

import json
import os
import shutil
import tempfile

import numpy as np

from . import nn
from .compress import CompressionReport
from .dataio import Dataset
from .exceptions import FormatError

FORMAT = "rankcompress-checkpoint"
VERSION = 1
STAGES = ("trained", "rank_selected", "regularized", "factorized", "finetuned", "quantized")

_DTYPES = {"f32": "<f4", "i32": "<i4"}


def _write_blob(directory, name, array, kind="f32"):
    data = np.ascontiguousarray(array, dtype=_DTYPES[kind])
    with open(os.path.join(directory, name), "wb") as f:
        f.write(data.tobytes())


def _read_blob(directory, name, shape, kind="f32"):
    path = os.path.join(directory, name)
    if not os.path.exists(path):
        raise FormatError("missing tensor blob", path)
    with open(path, "rb") as f:
        raw = f.read()
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise FormatError(
            f"blob has {len(raw)} bytes but manifest shape {list(shape)} needs {expected}", path
        )
    out = np.frombuffer(raw, dtype=_DTYPES[kind]).reshape(shape)
    return out.astype(np.float64 if kind == "f32" else np.int64)


def _commit(tmp, path):
    path = os.fspath(path)
    if os.path.isdir(path):
        old = path + ".old"
        if os.path.exists(old):
            shutil.rmtree(old)
        os.rename(path, old)
        os.rename(tmp, path)
        shutil.rmtree(old)
    else:
        os.rename(tmp, path)


def _staging(path):
    path = os.path.abspath(os.fspath(path))
    parent = os.path.dirname(path)
    os.makedirs(parent, exist_ok=True)
    return tempfile.mkdtemp(prefix=".tmp-", dir=parent), path


def _dump_manifest(directory, manifest):
    manifest = {"format": FORMAT, "version": VERSION, **manifest}
    with open(os.path.join(directory, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def save_model(model, path, stage="trained", meta=None):
    """Write ``model`` as a checkpoint directory (atomic rename)."""
    if stage not in STAGES:
        raise FormatError(f"unknown stage tag {stage!r}")
    tmp, path = _staging(path)
    try:
        layers = []
        for i, layer in enumerate(model.layers):
            entry = {"index": i, "m": layer.m, "n": layer.n, "activation": layer.activation}
            if isinstance(layer, nn.FactorizedLayer):
                entry["kind"] = "factorized"
                entry["rank"] = layer.rank
            else:
                entry["kind"] = "dense"
            entry["tensors"] = {}
            for name in layer.param_names:
                arr = getattr(layer, name)
                blob = f"layer{i}.{name}.f32"
                _write_blob(tmp, blob, arr)
                entry["tensors"][name] = {"file": blob, "shape": list(arr.shape)}
            layers.append(entry)
        _dump_manifest(tmp, {
            "kind": "model",
            "stage": stage,
            "classes": model.classes,
            "layers": layers,
            "meta": meta or {},
        })
        _commit(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def save_ranks(ranks, path, meta=None):
    tmp, path = _staging(path)
    _dump_manifest(tmp, {"kind": "ranks", "stage": "rank_selected", "ranks": [int(r) for r in ranks],
                         "meta": meta or {}})
    _commit(tmp, path)
    return path


def save_report(report, path, stage="factorized", meta=None):
    tmp, path = _staging(path)
    _dump_manifest(tmp, {"kind": "report", "stage": stage, "report": json.loads(report.to_json()),
                         "meta": meta or {}})
    _commit(tmp, path)
    return path


def save_dataset(ds, path, meta=None):
    tmp, path = _staging(path)
    _write_blob(tmp, "features.f32", ds.features)
    _write_blob(tmp, "labels.i32", ds.labels, "i32")
    splits = {}
    for name, idx in ds.splits.items():
        _write_blob(tmp, f"split.{name}.i32", idx, "i32")
        splits[name] = {"file": f"split.{name}.i32", "shape": [len(idx)]}
    _dump_manifest(tmp, {
        "kind": "dataset",
        "shape": list(ds.features.shape),
        "classes": ds.classes,
        "splits": splits,
        "fingerprint": ds.fingerprint(),
        "meta": meta or {},
    })
    _commit(tmp, path)
    return path


def save(obj, path, **kw):
    """Dispatch on type: Model, rank vector (sequence of ints), report, or Dataset."""
    if isinstance(obj, nn.Model):
        return save_model(obj, path, **kw)
    if isinstance(obj, CompressionReport):
        return save_report(obj, path, **kw)
    if isinstance(obj, Dataset):
        return save_dataset(obj, path, **kw)
    return save_ranks(obj, path, **kw)


def read_manifest(path):
    mpath = os.path.join(os.fspath(path), "manifest.json")
    if not os.path.exists(mpath):
        raise FormatError("missing manifest.json", path)
    try:
        with open(mpath) as f:
            manifest = json.load(f)
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON ({exc})", mpath) from exc
    if manifest.get("format") != FORMAT:
        raise FormatError("not a checkpoint manifest", mpath)
    if manifest.get("stage") is not None and manifest["stage"] not in STAGES:
        raise FormatError(f"unknown stage tag {manifest['stage']!r}", mpath)
    return manifest


def _load_model(path, manifest):
    layers = []
    for entry in manifest["layers"]:
        t = {name: _read_blob(path, spec["file"], spec["shape"])
             for name, spec in entry["tensors"].items()}
        if entry["kind"] == "dense":
            if t["w"].shape != (entry["m"], entry["n"]):
                raise FormatError(f"layer {entry['index']} weight shape disagrees with m, n", path)
            layers.append(nn.DenseLayer(t["w"], t["bias"], entry["activation"]))
        elif entry["kind"] == "factorized":
            r = entry["rank"]
            if t["a"].shape != (r, entry["n"]) or t["b"].shape != (entry["m"], r):
                raise FormatError(f"layer {entry['index']} factor shapes disagree with rank", path)
            layers.append(nn.FactorizedLayer(t["a"], t["b"], t["bias"], entry["activation"]))
        else:
            raise FormatError(f"unknown layer kind {entry['kind']!r}", path)
        if layers[-1].bias.shape != (entry["m"],):
            raise FormatError(f"layer {entry['index']} bias length disagrees with m", path)
    try:
        return nn.Model(layers, manifest["classes"])
    except ValueError as exc:
        raise FormatError(str(exc), path) from exc


def _load_dataset(path, manifest):
    shape = manifest["shape"]
    features = _read_blob(path, "features.f32", shape)
    labels = _read_blob(path, "labels.i32", [shape[0]], "i32")
    splits = {name: _read_blob(path, spec["file"], spec["shape"], "i32")
              for name, spec in manifest["splits"].items()}
    return Dataset(features, labels, manifest["classes"], splits)


def load(path):
    """Load whatever ``save`` wrote at ``path``.

    Models, datasets and reports come back as objects; rank vectors as tuples.
    """
    manifest = read_manifest(path)
    kind = manifest.get("kind")
    if kind == "model":
        return _load_model(path, manifest)
    if kind == "ranks":
        return tuple(int(r) for r in manifest["ranks"])
    if kind == "report":
        return CompressionReport.from_json(json.dumps(manifest["report"]))
    if kind == "dataset":
        return _load_dataset(path, manifest)
    raise FormatError(f"unknown checkpoint kind {kind!r}", path)


def stage_of(path):
    return read_manifest(path).get("stage")


def to_f32(model):
    """Copy of ``model`` with every parameter rounded through float32."""
    out = model.copy()
    for _, _, p in out.parameters():
        p[...] = p.astype(np.float32)
    return out
