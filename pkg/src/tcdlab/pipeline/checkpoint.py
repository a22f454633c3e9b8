"""Checkpoint directories.

Layout::

    manifest.json   names, shapes, dtype and byte offsets of every array,
                    run config, geometry hash, train-state counters
    params.bin      parameters, raw little-endian float64, manifest order
    optim.bin       Adam first then second moment per entry, same encoding
    rng.json        bit-generator state of the training RNG
    vocab.json      token list

Nothing time-dependent is written, so saving the same state twice yields
identical bytes.
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import CompatibilityError, CorruptCheckpointError
from ..transformer import Encoder, geometry_hash
from .config import RunConfig
from .optim import AdamState, TrainState
from .vocab import Vocab

FORMAT = "tcdlab-checkpoint/1"
DTYPE = "<f8"


@dataclass
class Checkpoint:
    model: Encoder
    vocab: Vocab
    config: RunConfig
    state: TrainState | None
    path: Path

    @property
    def geometry(self) -> str:
        return geometry_hash(self.model.cfg, self.model.moe)


def _pack(arrays: list[tuple[str, np.ndarray]]) -> tuple[bytes, list[dict]]:
    entries, chunks, offset = [], [], 0
    for name, arr in arrays:
        raw = np.ascontiguousarray(arr, dtype=DTYPE).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": DTYPE,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return b"".join(chunks), entries


def _dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def save_checkpoint(path: str | Path, model: Encoder, vocab: Vocab, config: RunConfig,
                    state: TrainState | None = None) -> Path:
    path = Path(path)
    params_blob, param_entries = _pack(list(model.state_arrays().items()))
    manifest = {
        "format": FORMAT,
        "config": config.to_dict(),
        "config_hash": config.hash(),
        "geometry_hash": geometry_hash(model.cfg, model.moe),
        "params": param_entries,
        "params_bytes": len(params_blob),
        "train_state": None,
        "optimizer": None,
    }
    optim_blob = b""
    rng_state = None
    if state is not None:
        adam = state.adam
        names = sorted(adam.m)
        moments = [(f"m/{n}", adam.m[n]) for n in names] + [(f"v/{n}", adam.v[n]) for n in names]
        optim_blob, optim_entries = _pack(moments)
        manifest["train_state"] = {"step": state.step, "epoch": state.epoch}
        manifest["optimizer"] = {
            "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps,
            "weight_decay": adam.weight_decay, "steps": {n: adam.steps[n] for n in names},
            "entries": optim_entries, "bytes": len(optim_blob),
        }
        rng_state = state.rng.bit_generator.state

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".ckpt-", dir=path.parent))
    try:
        (tmp / "params.bin").write_bytes(params_blob)
        (tmp / "optim.bin").write_bytes(optim_blob)
        (tmp / "rng.json").write_text(_dumps(rng_state))
        (tmp / "vocab.json").write_text(vocab.to_json())
        (tmp / "manifest.json").write_text(_dumps(manifest))
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def _read_blob(path: Path, expected: int) -> bytes:
    if not path.exists():
        raise CorruptCheckpointError(f"{path} is missing")
    raw = path.read_bytes()
    if len(raw) != expected:
        raise CorruptCheckpointError(f"{path}: {len(raw)} bytes, manifest says {expected}")
    return raw


def _unpack(raw: bytes, entries: list[dict]) -> dict[str, np.ndarray]:
    out = {}
    for e in entries:
        chunk = raw[e["offset"]:e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"] or e["dtype"] != DTYPE:
            raise CorruptCheckpointError(f"entry {e['name']} is out of bounds or has dtype {e['dtype']}")
        out[e["name"]] = np.frombuffer(chunk, dtype=DTYPE).reshape(e["shape"]).copy()
    return out


def read_manifest(path: str | Path) -> dict:
    try:
        return json.loads((Path(path) / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise CorruptCheckpointError(f"no manifest in {path}") from exc
    except json.JSONDecodeError as exc:
        raise CorruptCheckpointError(f"unreadable manifest in {path}: {exc}") from exc


def load_checkpoint(path: str | Path, expect_geometry: str | None = None) -> Checkpoint:
    """Load a checkpoint; all blobs are validated before any model is built.

    ``expect_geometry`` (a :func:`geometry_hash`) turns a shape/layout
    mismatch into :class:`CompatibilityError`.
    """
    path = Path(path)
    manifest = read_manifest(path)
    if manifest.get("format") != FORMAT:
        raise CorruptCheckpointError(f"{path}: unknown format {manifest.get('format')!r}")
    if expect_geometry is not None and manifest["geometry_hash"] != expect_geometry:
        raise CompatibilityError(
            f"{path}: geometry {manifest['geometry_hash']} does not match expected {expect_geometry}")
    params_raw = _read_blob(path / "params.bin", manifest["params_bytes"])
    opt = manifest["optimizer"]
    optim_raw = _read_blob(path / "optim.bin", opt["bytes"] if opt else 0)
    arrays = _unpack(params_raw, manifest["params"])
    moments = _unpack(optim_raw, opt["entries"]) if opt else {}
    try:
        rng_state = json.loads((path / "rng.json").read_text())
        vocab = Vocab.from_json((path / "vocab.json").read_text())
    except (FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        raise CorruptCheckpointError(f"{path}: {exc}") from exc

    config = RunConfig.from_dict(manifest["config"])
    model = Encoder(config.model, config.moe if config.uses_moe else None, seed=0)
    if geometry_hash(model.cfg, model.moe) != manifest["geometry_hash"]:
        raise CorruptCheckpointError(f"{path}: config does not reproduce the recorded geometry")
    model.load_arrays(arrays)

    state = None
    if manifest["train_state"] is not None:
        adam = AdamState(beta1=opt["beta1"], beta2=opt["beta2"], eps=opt["eps"],
                         weight_decay=opt["weight_decay"])
        for name, steps in opt["steps"].items():
            adam.m[name] = moments[f"m/{name}"]
            adam.v[name] = moments[f"v/{name}"]
            adam.steps[name] = steps
        rng = np.random.default_rng()
        rng.bit_generator.state = rng_state
        state = TrainState(step=manifest["train_state"]["step"], epoch=manifest["train_state"]["epoch"],
                           adam=adam, rng=rng)
    return Checkpoint(model=model, vocab=vocab, config=config, state=state, path=path)
