"""Single-file JSON checkpoints.

Arrays are stored as base64 little-endian float64 with an explicit shape,
so a checkpoint is one portable, self-describing document. Replay caches
and loss history are not stored; caches are regenerated from the frozen
process and history lives in ``metrics.csv``.
"""

from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np

from .bridge import DriftRole
from .config import config_from_dict, config_to_dict
from .ipf import DirectionState, IPFState, TrainConfig
from .nnet import AdamConfig, OptimizerState, ParameterSet

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(doc: dict) -> np.ndarray:
    raw = base64.b64decode(doc["data"])
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(doc["shape"])


def _params_doc(p: ParameterSet) -> dict:
    return {
        "time_embed_dim": p.time_embed_dim,
        "activation": p.activation,
        "arrays": [encode_array(a) for a in p.arrays()],
    }


def _params_from(doc: dict) -> ParameterSet:
    return ParameterSet.from_arrays([decode_array(a) for a in doc["arrays"]], doc["time_embed_dim"], doc["activation"])


def _role_doc(role: DriftRole, side: DirectionState) -> dict:
    if role.kind == "learned":
        source = "ema" if role.params is side.ema else "params"
        return {"kind": "learned", "source": source}
    if role.kind == "vp_linear":
        return {"kind": "vp_linear", "beta_min": role.beta_min, "beta_max": role.beta_max}
    return {"kind": "zero"}


def _role_from(doc: dict, side: DirectionState) -> DriftRole:
    if doc["kind"] == "learned":
        return DriftRole.learned(side.ema if doc["source"] == "ema" else side.params)
    if doc["kind"] == "vp_linear":
        return DriftRole.vp_linear(doc["beta_min"], doc["beta_max"])
    return DriftRole.zero()


def _side_doc(side: DirectionState) -> dict:
    h = side.opt.hyper
    return {
        "params": _params_doc(side.params),
        "ema": _params_doc(side.ema),
        "optimizer": {
            "step": side.opt.step,
            "lr": h.lr,
            "beta1": h.beta1,
            "beta2": h.beta2,
            "eps": h.eps,
            "m": _params_doc(side.opt.m),
            "v": _params_doc(side.opt.v),
        },
    }


def _side_from(doc: dict) -> DirectionState:
    o = doc["optimizer"]
    opt = OptimizerState(
        m=_params_from(o["m"]),
        v=_params_from(o["v"]),
        step=o["step"],
        hyper=AdamConfig(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"]),
    )
    params = _params_from(doc["params"])
    ema = _params_from(doc["ema"])
    return DirectionState(params, ema, opt)


def checkpoint_document(state: IPFState, cfg: TrainConfig) -> dict:
    s0, s1 = cfg.task.scales
    return {
        "format_version": FORMAT_VERSION,
        "config": config_to_dict(cfg),
        "stage": state.stage,
        "standardization": {"start": s0, "end": s1},
        "seed_lineage": {
            "seed": cfg.seed,
            "init_stream": [cfg.seed, 0xB1D],
            "half_stage_streams": "[seed, stage, 0 backward | 1 forward]",
        },
        "forward": _side_doc(state.forward),
        "backward": _side_doc(state.backward),
        "forward_role": _role_doc(state.forward_role, state.forward),
        "backward_role": _role_doc(state.backward_role, state.backward),
    }


def save_checkpoint(path: str | Path, state: IPFState, cfg: TrainConfig) -> None:
    text = json.dumps(checkpoint_document(state, cfg), sort_keys=True, separators=(",", ":"))
    Path(path).write_text(text)


def load_checkpoint(path: str | Path) -> tuple[IPFState, TrainConfig]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not a JSON checkpoint ({exc})") from None
    version = doc.get("format_version") if isinstance(doc, dict) else None
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format_version {version!r}, this build reads {FORMAT_VERSION}")
    cfg = config_from_dict(doc["config"])
    fwd, bwd = _side_from(doc["forward"]), _side_from(doc["backward"])
    state = IPFState(
        stage=doc["stage"],
        forward=fwd,
        backward=bwd,
        forward_role=_role_from(doc["forward_role"], fwd),
        backward_role=_role_from(doc["backward_role"], bwd),
    )
    return state, cfg
