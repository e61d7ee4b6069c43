"""The ``ODFS`` binary container used for weights, adaptation checkpoints and window archives.

Layout (all little-endian)::

    header   16 bytes   b"ODFS" | u32 version | u32 record_count | u32 reserved (0)
    record   repeated   u32 kind | u32 n_ints | u32 n_floats
                        | n_ints  x u32  (shape / hyperparameter integers)
                        | n_floats x f32 (raw payload)

Record kinds and their integer / float fields:

=========  ====  ==================================  ===============================
kind       tag   ints                                floats
=========  ====  ==================================  ===============================
INPUT      1     channels, steps                     (none)
CONV       2     filters, in_ch, kernel, stride, pad weight (F*C*K), bias (F)
BATCHNORM  3     channels                            gamma, beta, mean, var, eps
DROPOUT    4     (none)                              rate
BLOCK      5     has_shortcut                        (none)
DENSE      6     out, in                             weight (out*in), bias (out)
ADAPT      7     out, in, step_count, faults         ema_w, ema_b, lr, ema_decay
WINDOWS    8     n, C, T, labels[n], users[n],       data (n*C*T)
                 sessions[n]
=========  ====  ==================================  ===============================

A model file is ``INPUT, CONV, BATCHNORM, DROPOUT`` (the stem), then per
residual block ``BLOCK, CONV, BATCHNORM, CONV, BATCHNORM[, CONV]``, then
``DENSE``. Scalars in float fields are stored as float32.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .nn import Backbone, BatchNorm, Conv1D, Dense, Model, ResidualBlock

MAGIC = b"ODFS"
VERSION = 1

INPUT, CONV, BATCHNORM, DROPOUT, BLOCK, DENSE, ADAPT, WINDOWS = range(1, 9)
KIND_NAMES = {
    INPUT: "INPUT", CONV: "CONV", BATCHNORM: "BATCHNORM", DROPOUT: "DROPOUT",
    BLOCK: "BLOCK", DENSE: "DENSE", ADAPT: "ADAPT", WINDOWS: "WINDOWS",
}


def pack(records) -> bytes:
    """Serialise ``[(kind, ints, floats), ...]``."""
    parts = [MAGIC, struct.pack("<III", VERSION, len(records), 0)]
    for kind, ints, floats in records:
        ints = np.asarray(ints, dtype="<u4").ravel()
        floats = np.asarray(floats, dtype="<f4").ravel()
        parts.append(struct.pack("<III", kind, ints.size, floats.size))
        parts.append(ints.tobytes())
        parts.append(floats.tobytes())
    return b"".join(parts)


def unpack(buf: bytes):
    """Inverse of :func:`pack`. Returns a list of ``(kind, ints, floats)`` with numpy arrays."""
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise DataError("not an ODFS container (bad magic)")
    version, count, _ = struct.unpack_from("<III", buf, 4)
    if version != VERSION:
        raise DataError(f"unsupported ODFS version {version}")
    off = 16
    records = []
    for _ in range(count):
        if off + 12 > len(buf):
            raise DataError("truncated ODFS record header")
        kind, ni, nf = struct.unpack_from("<III", buf, off)
        off += 12
        end = off + 4 * (ni + nf)
        if end > len(buf):
            raise DataError("truncated ODFS record payload")
        ints = np.frombuffer(buf, dtype="<u4", count=ni, offset=off).astype(np.int64)
        floats = np.frombuffer(buf, dtype="<f4", count=nf, offset=off + 4 * ni).astype(np.float32)
        records.append((kind, ints, floats))
        off = end
    if off != len(buf):
        raise DataError(f"{len(buf) - off} trailing bytes after last ODFS record")
    return records


# ---------------------------------------------------------------------------
# layer codecs


def _conv_record(p: Conv1D):
    return CONV, [p.filters, p.in_channels, p.kernel, p.stride, p.padding], np.concatenate(
        [p.weight.ravel(), p.bias.ravel()]
    )


def _bn_record(p: BatchNorm):
    return BATCHNORM, [p.channels], np.concatenate(
        [p.gamma, p.beta, p.running_mean, p.running_var, [p.eps]]
    )


def _dense_record(p: Dense):
    return DENSE, [p.out_features, p.in_features], np.concatenate([p.weight.ravel(), p.bias])


def _expect(rec, kind):
    if rec[0] != kind:
        raise DataError(f"expected {KIND_NAMES[kind]} record, found kind {rec[0]}")
    return rec[1], rec[2]


def _conv_from(rec):
    ints, fl = _expect(rec, CONV)
    f, c, k, stride, pad = (int(v) for v in ints)
    return Conv1D(fl[: f * c * k].reshape(f, c, k).copy(), fl[f * c * k :].copy(), stride, pad)


def _bn_from(rec):
    ints, fl = _expect(rec, BATCHNORM)
    c = int(ints[0])
    v = fl[: 4 * c].reshape(4, c)
    return BatchNorm(v[0].copy(), v[1].copy(), v[2].copy(), v[3].copy(), float(fl[4 * c]))


def _dense_from(rec):
    ints, fl = _expect(rec, DENSE)
    o, i = (int(v) for v in ints)
    return Dense(fl[: o * i].reshape(o, i).copy(), fl[o * i :].copy())


def backbone_records(bb: Backbone):
    recs = [
        (INPUT, list(bb.input_shape), []),
        _conv_record(bb.stem),
        _bn_record(bb.stem_bn),
        (DROPOUT, [], [bb.dropout]),
    ]
    for blk in bb.blocks:
        recs.append((BLOCK, [int(blk.shortcut is not None)], []))
        recs += [_conv_record(blk.conv1), _bn_record(blk.bn1), _conv_record(blk.conv2), _bn_record(blk.bn2)]
        if blk.shortcut is not None:
            recs.append(_conv_record(blk.shortcut))
    return recs


def model_records(model: Model):
    return backbone_records(model.backbone) + [_dense_record(model.classifier)]


def model_from_records(recs) -> Model:
    it = iter(recs)
    try:
        ints, _ = _expect(next(it), INPUT)
        stem = _conv_from(next(it))
        stem_bn = _bn_from(next(it))
        _, fl = _expect(next(it), DROPOUT)
        dropout = float(fl[0])
        blocks = []
        rec = next(it)
        while rec[0] == BLOCK:
            has_sc = bool(rec[1][0])
            c1, b1, c2, b2 = _conv_from(next(it)), _bn_from(next(it)), _conv_from(next(it)), _bn_from(next(it))
            sc = _conv_from(next(it)) if has_sc else None
            blocks.append(ResidualBlock(c1, b1, c2, b2, sc))
            rec = next(it)
        classifier = _dense_from(rec)
    except StopIteration:
        raise DataError("model container ended early") from None
    bb = Backbone(stem, stem_bn, blocks, input_steps=int(ints[1]), dropout=dropout)
    if bb.input_channels != int(ints[0]):
        raise DataError("INPUT channels disagree with the stem convolution")
    return Model(bb, classifier)


def metadata_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_model(path, model: Model, sidecar: bool = True) -> None:
    """Write the weight container, plus ``<path>.json`` holding ``model.metadata`` when ``sidecar``."""
    Path(path).write_bytes(pack(model_records(model)))
    if sidecar:
        metadata_path(path).write_text(json.dumps(model.metadata, indent=2, sort_keys=True) + "\n")


def load_model(path) -> Model:
    model = model_from_records(unpack(Path(path).read_bytes()))
    meta = metadata_path(path)
    if meta.is_file():
        model.metadata = json.loads(meta.read_text())
    return model


def backbone_bytes(bb: Backbone) -> bytes:
    """Container bytes of the backbone alone (used for immutability hashes)."""
    return pack(backbone_records(bb))
