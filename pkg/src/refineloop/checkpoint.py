"""Versioned JSON checkpoints and append-only CSV metrics.

Floats are written with Python's shortest round-trip repr, so a saved model
reloads bit-for-bit.
"""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .diffusion import DenoiserParams, NoiseSchedule, make_schedule
from .numerics import AdamState, MlpParams
from .policy import PolicyParams
from .prompts import Vocabulary

FORMAT = "refineloop-checkpoint"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _arr(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": np.asarray(a, dtype=np.float64).ravel().tolist()}


def _unarr(d: Mapping) -> np.ndarray:
    return np.array(d["data"], dtype=np.float64).reshape(d["shape"])


def _mlp(m: MlpParams) -> dict:
    return {"activations": list(m.activations), "weights": [_arr(w) for w in m.weights],
            "biases": [_arr(b) for b in m.biases]}


def _unmlp(d: Mapping) -> MlpParams:
    return MlpParams([_unarr(w) for w in d["weights"]], [_unarr(b) for b in d["biases"]],
                     tuple(d["activations"]))


def vocab_to_dict(v: Vocabulary) -> dict:
    return {"n_modes": v.n_modes, "ambiguous_pairs": [list(p) for p in v.ambiguous_pairs],
            "n_style": v.n_style, "length": v.length}


def vocab_from_dict(d: Mapping) -> Vocabulary:
    return Vocabulary(int(d["n_modes"]), tuple(tuple(p) for p in d["ambiguous_pairs"]),
                      int(d["n_style"]), int(d["length"]))


def _write_json(path: Path, payload: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload))
    os.replace(tmp, path)  # a crash mid-write never leaves a truncated checkpoint


def _read_json(path: Path, kind: str) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path} is not valid JSON: {e}") from e
    if d.get("format") != FORMAT or d.get("kind") != kind:
        raise CheckpointError(f"{path} is not a {kind} checkpoint")
    if d.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {d.get('version')}")
    return d


def save_denoiser(path, params: DenoiserParams, schedule: NoiseSchedule, vocab: Vocabulary,
                  extra: dict | None = None) -> None:
    _write_json(path, {
        "format": FORMAT, "version": VERSION, "kind": "denoiser",
        "schedule": schedule.descriptor(), "vocab": vocab_to_dict(vocab), "T": params.T,
        "mlp": _mlp(params.mlp), "token_emb": _arr(params.token_emb), "extra": extra or {},
    })


def load_denoiser(path) -> tuple[DenoiserParams, NoiseSchedule, Vocabulary, dict]:
    d = _read_json(path, "denoiser")
    s = d["schedule"]
    schedule = make_schedule(int(s["T"]), float(s["beta_min"]), float(s["beta_max"]), s["kind"])
    params = DenoiserParams(_unmlp(d["mlp"]), _unarr(d["token_emb"]), int(d["T"]))
    if params.T != schedule.T:
        raise CheckpointError("denoiser and schedule disagree on T")
    return params, schedule, vocab_from_dict(d["vocab"]), d.get("extra", {})


def _adam(a: AdamState) -> dict:
    return {"lr": a.lr, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps, "step": a.step,
            "m": [_arr(x) for x in a.m], "v": [_arr(x) for x in a.v]}


def _unadam(d: Mapping) -> AdamState:
    return AdamState(d["lr"], d["beta1"], d["beta2"], d["eps"], int(d["step"]),
                     [_unarr(x) for x in d["m"]], [_unarr(x) for x in d["v"]])


def save_policy(path, params: PolicyParams, vocab: Vocabulary, update: int = 0,
                adam: AdamState | None = None, extra: dict | None = None) -> None:
    """``update`` is the number of completed GRPO updates; ``adam`` enables exact resumption."""
    _write_json(path, {
        "format": FORMAT, "version": VERSION, "kind": "policy", "vocab": vocab_to_dict(vocab),
        "length": params.length, "T": params.T, "xhat_scale": params.xhat_scale,
        "mlp": _mlp(params.mlp), "token_emb": _arr(params.token_emb), "copy_w": _arr(params.copy_w),
        "update": update, "adam": _adam(adam) if adam is not None else None, "extra": extra or {},
    })


def load_policy(path) -> tuple[PolicyParams, Vocabulary, int, AdamState | None, dict]:
    d = _read_json(path, "policy")
    params = PolicyParams(_unmlp(d["mlp"]), _unarr(d["token_emb"]), _unarr(d["copy_w"]),
                          int(d["length"]), int(d["T"]), float(d["xhat_scale"]))
    adam = _unadam(d["adam"]) if d.get("adam") else None
    return params, vocab_from_dict(d["vocab"]), int(d["update"]), adam, d.get("extra", {})


# -------------------------------------------------------------------------- CSV

def write_csv(path, rows: Iterable[Mapping], fields: list[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row.get(k)) for k in fields})


def append_csv(path, row: Mapping, fields: list[str]) -> None:
    path = Path(path)
    new = not path.exists()
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        if new:
            w.writeheader()
        w.writerow({k: _fmt(row.get(k)) for k in fields})


def read_csv(path) -> list[dict]:
    with Path(path).open(newline="") as f:
        return list(csv.DictReader(f))


def truncate_csv(path, keep_rows: int) -> None:
    """Drop rows beyond the first ``keep_rows`` (used when resuming from an older checkpoint)."""
    path = Path(path)
    if not path.exists():
        return
    lines = path.read_text().splitlines(keepends=True)
    path.write_text("".join(lines[:1 + keep_rows]))


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return v


def require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CheckpointError(f"{what} not found: {p}")
    return p
