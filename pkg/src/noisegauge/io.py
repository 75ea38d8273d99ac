"""Binary container, checkpoint/dataset persistence, loss curves, manifests.

One codec serves every artifact: a JSON header (length-prefixed, UTF-8)
followed by a little-endian float64 payload.  Round trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import MissingArtifactError
from .models import Denoiser, DenoiserArch, ParamVector, Rater, RaterArch

Array = np.ndarray

MAGIC = b"NGBLOB1\n"


def write_blob(path, header: dict, payload: Array) -> None:
    data = np.ascontiguousarray(payload, dtype="<f8")
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(data.tobytes())


def read_blob(path) -> tuple[dict, Array]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(str(path))
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a noisegauge blob")
        (head_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(head_len).decode("utf-8"))
        payload = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    return header, payload


def _layout_to_json(layout) -> list:
    return [[name, list(shape)] for name, shape in layout]


def _layout_from_json(raw) -> tuple:
    return tuple((name, tuple(shape)) for name, shape in raw)


def save_checkpoint(path, kind: str, arch, params: ParamVector, step: int,
                    seed: int, extra: dict | None = None) -> None:
    header = {
        "format": "checkpoint",
        "kind": kind,
        "arch": {
            "d": arch.d,
            "n_classes": arch.n_classes,
            "t_emb_dim": arch.t_emb_dim,
            "c_emb_dim": arch.c_emb_dim,
            "hidden": list(arch.hidden),
        },
        "layout": _layout_to_json(params.layout),
        "step": step,
        "seed": seed,
    }
    if extra:
        header["extra"] = extra
    write_blob(path, header, params.values)


def load_checkpoint(path) -> tuple[object, ParamVector, dict]:
    """Returns (model, params, header); model is a Denoiser or Rater."""
    header, payload = read_blob(path)
    if header.get("format") != "checkpoint":
        raise ValueError(f"{path}: not a checkpoint blob")
    a = header["arch"]
    if header["kind"] == "denoiser":
        model = Denoiser(DenoiserArch(d=a["d"], n_classes=a["n_classes"],
                                      t_emb_dim=a["t_emb_dim"], c_emb_dim=a["c_emb_dim"],
                                      hidden=tuple(a["hidden"])))
    elif header["kind"] == "rater":
        model = Rater(RaterArch(d=a["d"], n_classes=a["n_classes"],
                                t_emb_dim=a["t_emb_dim"], c_emb_dim=a["c_emb_dim"],
                                hidden=tuple(a["hidden"])))
    else:
        raise ValueError(f"unknown checkpoint kind {header['kind']!r}")
    params = ParamVector(payload, _layout_from_json(header["layout"]))
    return model, params, header


def save_loss_curve(path, steps, losses) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write("step,loss\n")
        for s, l in zip(steps, losses):
            fh.write(f"{int(s)},{float(l)!r}\n")


def load_loss_curve(path) -> tuple[Array, Array]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(str(path))
    steps, losses = [], []
    with open(path) as fh:
        header = fh.readline()
        if not header.strip():
            raise ValueError(f"{path}: empty loss curve")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            s, l = line.split(",")
            steps.append(int(s))
            losses.append(float(l))
    if not steps:
        raise ValueError(f"{path}: loss curve has no rows")
    return np.asarray(steps), np.asarray(losses)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, manifest: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
