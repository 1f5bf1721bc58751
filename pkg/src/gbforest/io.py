"""Binary model files.

Layout (all integers unsigned 64-bit little-endian)::

    u8   format version (currently 1)
    u64  number of sections
    section*:
        u64   name length, then the UTF-8 name
        u8    kind: b"j" JSON text, b"f" float64, b"i" int64, b"u" uint8
        u64   ndim, then ndim dims
        u64   payload length in bytes, then the payload (C order, little-endian)

Sections, in order: ``params`` (JSON of the estimator parameters),
``annotations`` (free-form JSON, e.g. feature names), ``meta``
(JSON: family, n_train, n_features, subsample_size, fingerprint,
train_log_lik), ``eta0`` (f, shape (1,)), ``U0`` (f, (n,)), ``X_train``
(f, (n, p)), then for each forest ``j``: ``stage{j}/link`` (f, (n,)),
``forest{j}/k`` (i, (1,)), ``forest{j}/n_nodes`` (i, (B,)),
``forest{j}/{feature,threshold,left,right,value,leaf,count}`` (the per-tree
node tables concatenated; child indices are local to each tree) and
``forest{j}/inclusion`` (u, (B, n)).
"""

from __future__ import annotations

import io as _io
import json
import struct

import numpy as np

from .family import get_family
from .forest import ForestModel
from .gbf import GeneralisedBoostedForest
from .tree import Tree

__all__ = ["FORMAT_VERSION", "save_model", "load_model", "dumps", "loads"]

FORMAT_VERSION = 1
_KINDS = {b"f": "<f8", b"i": "<i8", b"u": "u1"}
_NODE_FIELDS = ("feature", "threshold", "left", "right", "value", "leaf", "count")
_NODE_KIND = dict(feature=b"i", threshold=b"f", left=b"i", right=b"i", value=b"f", leaf=b"i", count=b"i")


class ModelFormatError(ValueError):
    pass


def _u64(x):
    return struct.pack("<Q", int(x))


def _section(name, kind, payload):
    raw = name.encode()
    out = [_u64(len(raw)), raw, kind]
    if kind == b"j":
        data = json.dumps(payload, sort_keys=True).encode()
        out += [_u64(0), _u64(len(data)), data]
    else:
        a = np.ascontiguousarray(payload, dtype=_KINDS[kind])
        out += [_u64(a.ndim)] + [_u64(d) for d in a.shape]
        data = a.tobytes()
        out += [_u64(len(data)), data]
    return b"".join(out)


def dumps(model):
    """Serialise a fitted :class:`GeneralisedBoostedForest` to bytes."""
    if not hasattr(model, "forests_"):
        raise ValueError("model is not fitted")
    meta = dict(
        family=model.family_.name,
        n_train=model.n_train_,
        n_features=model.n_features_in_,
        subsample_size=model.subsample_size_,
        fingerprint=model.fingerprint_,
        train_log_lik=model.train_log_lik_,
    )
    params = model.get_params()
    params["family"] = model.family_.name
    secs = [
        _section("params", b"j", params),
        _section("annotations", b"j", getattr(model, "annotations_", {})),
        _section("meta", b"j", meta),
        _section("eta0", b"f", [model.eta0_]),
        _section("U0", b"f", model.U0_),
        _section("X_train", b"f", model.forests_[0].X_train if model.forests_ else np.zeros((0, 0))),
    ]
    for j, forest in enumerate(model.forests_):
        secs.append(_section(f"stage{j}/link", b"f", model.stage_train_link_[j]))
        secs.append(_section(f"forest{j}/k", b"i", [forest.k]))
        secs.append(_section(f"forest{j}/n_nodes", b"i", [t.n_nodes for t in forest.trees]))
        for name in _NODE_FIELDS:
            cat = np.concatenate([getattr(t, name) for t in forest.trees])
            secs.append(_section(f"forest{j}/{name}", _NODE_KIND[name], cat))
        secs.append(_section(f"forest{j}/inclusion", b"u", forest.inclusion))
    return bytes([FORMAT_VERSION]) + _u64(len(secs)) + b"".join(secs)


def _read_sections(buf):
    f = _io.BytesIO(buf)

    def take(n):
        b = f.read(n)
        if len(b) != n:
            raise ModelFormatError("truncated model file")
        return b

    def u64():
        return struct.unpack("<Q", take(8))[0]

    version = take(1)[0]
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    secs = {}
    for _ in range(u64()):
        name = take(u64()).decode()
        kind = take(1)
        shape = tuple(u64() for _ in range(u64()))
        data = take(u64())
        if kind == b"j":
            secs[name] = json.loads(data.decode())
        elif kind in _KINDS:
            a = np.frombuffer(data, dtype=_KINDS[kind]).reshape(shape)
            secs[name] = a.astype(a.dtype.newbyteorder("="))
        else:
            raise ModelFormatError(f"unknown section kind {kind!r}")
    if f.read(1):
        raise ModelFormatError("trailing bytes after the last section")
    return secs


def loads(buf):
    """Rebuild a fitted model from :func:`dumps` output."""
    secs = _read_sections(buf)
    try:
        meta = secs["meta"]
        model = GeneralisedBoostedForest(**secs["params"])
        model.family_ = get_family(meta["family"])
        model.eta0_ = float(secs["eta0"][0])
        model.U0_ = secs["U0"]
        X = secs["X_train"]
        model.forests_, model.stage_train_link_ = [], []
        j = 0
        while f"forest{j}/k" in secs:
            sizes = secs[f"forest{j}/n_nodes"]
            bounds = np.concatenate([[0], np.cumsum(sizes)])
            tables = {name: secs[f"forest{j}/{name}"] for name in _NODE_FIELDS}
            trees = [Tree(**{name: tables[name][a:b].copy() for name in _NODE_FIELDS})
                     for a, b in zip(bounds[:-1], bounds[1:])]
            model.forests_.append(ForestModel(trees, secs[f"forest{j}/inclusion"], int(secs[f"forest{j}/k"][0]), X))
            model.stage_train_link_.append(secs[f"stage{j}/link"])
            j += 1
        model.n_train_ = int(meta["n_train"])
        model.n_features_in_ = int(meta["n_features"])
        model.subsample_size_ = int(meta["subsample_size"])
        model.fingerprint_ = meta["fingerprint"]
        model.train_log_lik_ = list(meta["train_log_lik"])
        model.annotations_ = secs["annotations"]
    except KeyError as e:
        raise ModelFormatError(f"missing section {e.args[0]!r}") from None
    return model


def save_model(model, path):
    with open(path, "wb") as fh:
        fh.write(dumps(model))


def load_model(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
