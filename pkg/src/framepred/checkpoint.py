"""Checkpoint container: a zip archive holding one raw little-endian binary
blob plus a JSON manifest mapping array names to (shape, dtype, byte offset).
Round-trips are bit-exact, and re-saving a loaded checkpoint reproduces the
same bytes (fixed zip timestamps, sorted entries, no compression)."""

from __future__ import annotations

import io
import json
import zipfile

import numpy as np
import torch

_DTYPES = {
    "float32": "<f4",
    "float64": "<f8",
    "int64": "<i8",
    "uint8": "u1",
    "bool": "u1",
}
_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


def _to_numpy(t: torch.Tensor) -> np.ndarray:
    a = t.detach().cpu().numpy()
    if a.dtype == np.bool_:
        a = a.astype(np.uint8)
    return a


def save_arrays(path: str, arrays: dict[str, torch.Tensor | np.ndarray],
                extra: dict | None = None) -> None:
    """``arrays`` values may be torch tensors or numpy arrays; ``extra`` is
    arbitrary JSON-serializable metadata stored alongside."""
    blob = io.BytesIO()
    entries = {}
    offset = 0
    for name in sorted(arrays):
        v = arrays[name]
        a = _to_numpy(v) if isinstance(v, torch.Tensor) else np.asarray(v)
        dtype_name = str(a.dtype)
        if dtype_name not in _DTYPES:
            raise TypeError(f"unsupported checkpoint dtype {dtype_name} for {name}")
        raw = np.ascontiguousarray(a).astype(_DTYPES[dtype_name]).tobytes()
        entries[name] = {"shape": list(a.shape), "dtype": dtype_name,
                         "offset": offset, "nbytes": len(raw)}
        blob.write(raw)
        offset += len(raw)
    manifest = {"format": "framepred-checkpoint-v1", "arrays": entries,
                "extra": extra or {}}
    manifest_bytes = json.dumps(manifest, indent=2, sort_keys=True).encode()

    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, data in (("arrays.bin", blob.getvalue()),
                           ("manifest.json", manifest_bytes)):
            info = zipfile.ZipInfo(name, date_time=_FIXED_DATE)
            zf.writestr(info, data)


def load_arrays(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        blob = zf.read("arrays.bin")
    arrays = {}
    for name, e in manifest["arrays"].items():
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        a = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        arrays[name] = a.astype(e["dtype"]) if e["dtype"] == "bool" else a.copy()
    return arrays, manifest["extra"]


# ---------------------------------------------------------------------------
# Training-state checkpoints
# ---------------------------------------------------------------------------

def save_training_state(path: str, model: torch.nn.Module,
                        optimizer: torch.optim.Optimizer | None,
                        step: int, torch_generators: dict[str, torch.Generator],
                        numpy_rng_state: dict | None,
                        config_echo: dict) -> None:
    arrays: dict[str, torch.Tensor | np.ndarray] = {}
    for name, p in model.state_dict().items():
        arrays[f"model/{name}"] = p
    opt_meta = {}
    if optimizer is not None:
        sd = optimizer.state_dict()
        for pid, state in sd["state"].items():
            for key, val in state.items():
                if isinstance(val, torch.Tensor):
                    arrays[f"optim/{pid}/{key}"] = val
                else:
                    opt_meta.setdefault(str(pid), {})[key] = val
        opt_meta["param_groups"] = sd["param_groups"]
    for name, gen in torch_generators.items():
        arrays[f"rng/{name}"] = gen.get_state().numpy().astype(np.uint8)
    extra = {"step": step, "config": config_echo, "optimizer_meta": opt_meta,
             "numpy_rng_state": _jsonify(numpy_rng_state)}
    save_arrays(path, arrays, extra)


def _jsonify(obj):
    if isinstance(obj, dict):
        return {k: _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def load_training_state(path: str) -> dict:
    arrays, extra = load_arrays(path)
    model_state = {}
    optim_state: dict[int, dict] = {}
    rng_state = {}
    for name, a in arrays.items():
        if name.startswith("model/"):
            model_state[name[len("model/"):]] = torch.from_numpy(a.copy())
        elif name.startswith("optim/"):
            _, pid, key = name.split("/", 2)
            optim_state.setdefault(int(pid), {})[key] = torch.from_numpy(a.copy())
        elif name.startswith("rng/"):
            rng_state[name[len("rng/"):]] = torch.from_numpy(
                a.copy().astype(np.uint8)
            )
    return {"model_state": model_state, "optim_state": optim_state,
            "rng_state": rng_state, "extra": extra}


def restore_optimizer(optimizer: torch.optim.Optimizer, optim_state: dict,
                      optimizer_meta: dict) -> None:
    sd = optimizer.state_dict()
    state = {}
    for pid, tensors in optim_state.items():
        entry = dict(tensors)
        for key, val in optimizer_meta.get(str(pid), {}).items():
            entry[key] = val
        state[pid] = entry
    sd["state"] = state
    sd["param_groups"] = optimizer_meta["param_groups"]
    optimizer.load_state_dict(sd)
