"""Single-file checkpoints: a zip of ``.npy`` parameter arrays plus JSON metadata.

Entries are stored uncompressed in a fixed order with a fixed timestamp, so
equal parameters give byte-identical files.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .retriever import RetrieverModel

FORMAT = "edurank-checkpoint-v1"
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(RuntimeError):
    pass


class CheckpointMismatch(CheckpointError):
    pass


@dataclass
class Checkpoint:
    meta: dict
    params: dict[str, np.ndarray]
    optimizer: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    @property
    def fingerprint(self) -> dict:
        return self.meta["fingerprint"]

    @property
    def epoch(self) -> int:
        return int(self.meta.get("epoch", 0))


def fingerprint(model: RetrieverModel, chunk_size: int, backend_id: str) -> dict:
    return {"d": model.d, "d_h": model.d_h, "c": chunk_size, "backend_id": backend_id}


def _npy(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.array(arr, order="C"), allow_pickle=False)
    return buf.getvalue()


def _entry(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(
    path: str | Path,
    model: RetrieverModel,
    chunk_size: int,
    backend_id: str,
    epoch: int = 0,
    optimizer: torch.optim.Optimizer | None = None,
    extra: dict | None = None,
) -> None:
    names = [n for n, _ in model.named_parameters()]
    meta = {
        "format": FORMAT,
        "fingerprint": fingerprint(model, chunk_size, backend_id),
        "model": model.config(),
        "epoch": epoch,
        "params": {n: list(p.shape) for n, p in model.named_parameters()},
        "extra": extra or {},
    }
    opt_arrays: dict[str, np.ndarray] = {}
    if optimizer is not None:
        state = optimizer.state_dict()["state"]
        steps = {}
        for idx, name in enumerate(names):
            if idx not in state:
                continue
            s = state[idx]
            steps[name] = float(s["step"])
            opt_arrays[f"optimizer/{name}.exp_avg.npy"] = s["exp_avg"].detach().numpy()
            opt_arrays[f"optimizer/{name}.exp_avg_sq.npy"] = s["exp_avg_sq"].detach().numpy()
        meta["optimizer"] = {"type": type(optimizer).__name__, "lr": optimizer.param_groups[0]["lr"], "steps": steps}
    tmp = Path(str(path) + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _entry(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1).encode())
        for name, p in model.named_parameters():
            _entry(zf, f"params/{name}.npy", _npy(p.detach().numpy()))
        for key in sorted(opt_arrays):
            _entry(zf, key, _npy(opt_arrays[key]))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    with zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != FORMAT:
            raise CheckpointError(f"unknown checkpoint format {meta.get('format')!r}")
        params, opt = {}, {}
        for name in zf.namelist():
            if name.startswith("params/"):
                params[name[len("params/"):-4]] = np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
            elif name.startswith("optimizer/"):
                pname, kind = name[len("optimizer/"):-4].rsplit(".", 1)
                opt.setdefault(pname, {})[kind] = np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
    for name, shape in meta["params"].items():
        if name not in params or list(params[name].shape) != shape:
            raise CheckpointError(f"parameter {name!r} missing or mis-shaped")
    return Checkpoint(meta, params, opt)


def check_fingerprint(ckpt: Checkpoint, expected: dict) -> None:
    diff = {k: (ckpt.fingerprint.get(k), v) for k, v in expected.items() if ckpt.fingerprint.get(k) != v}
    if diff:
        raise CheckpointMismatch(f"checkpoint/config mismatch (checkpoint, config): {diff}")


def restore_model(ckpt: Checkpoint, seed: int = 0) -> RetrieverModel:
    cfg = ckpt.meta["model"]
    model = RetrieverModel(
        cfg["d"], cfg["d_h"], k=cfg["k"], seed=seed,
        residual=cfg["residual"], layer_norm=cfg.get("layer_norm", False),
    )
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name not in ckpt.params:
                raise CheckpointMismatch(f"checkpoint lacks parameter {name!r}")
            src = torch.from_numpy(ckpt.params[name])
            if src.shape != p.shape:
                raise CheckpointMismatch(f"{name}: checkpoint shape {tuple(src.shape)} vs model {tuple(p.shape)}")
            p.copy_(src)
    return model


def restore_optimizer(optimizer: torch.optim.Optimizer, model: RetrieverModel, ckpt: Checkpoint) -> None:
    """Load saved Adam moments into ``optimizer`` (built over ``model.parameters()``)."""
    info = ckpt.meta.get("optimizer")
    if not info:
        return
    sd = optimizer.state_dict()
    for idx, (name, _) in enumerate(model.named_parameters()):
        if name in ckpt.optimizer:
            sd["state"][idx] = {
                "step": torch.tensor(info["steps"][name], dtype=torch.float32),
                "exp_avg": torch.from_numpy(ckpt.optimizer[name]["exp_avg"].copy()),
                "exp_avg_sq": torch.from_numpy(ckpt.optimizer[name]["exp_avg_sq"].copy()),
            }
    optimizer.load_state_dict(sd)
