"""Problem instances: a forward operator, a measurement, its noise levels,
and (optionally) the ground truth, with JSON + TNSR serialization."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import operators as ops
from . import tnsr
from .noise import NoiseParams

__all__ = ["ProblemInstance", "operator_from_spec", "operator_to_spec",
           "save_instance", "load_instance"]


@dataclass
class ProblemInstance:
    op: ops.OperatorHandle
    y: np.ndarray
    noise: NoiseParams
    x: np.ndarray | None = None
    seed: int = 0
    spec: dict = field(default_factory=dict)


def operator_to_spec(op: ops.OperatorHandle) -> tuple[dict, dict]:
    """Split an operator into a JSON-serializable spec and its defining
    arrays (stored separately in a TNSR container)."""
    kind = op.kind
    spec = {"kind": kind, "domain_shape": list(op.domain_shape)}
    arrays = {}
    if kind == "identity":
        pass
    elif kind == "blur":
        arrays["op.kernel"] = op.arrays["kernel"]
    elif kind == "inpainting":
        arrays["op.mask"] = op.arrays["mask"]
    elif kind == "mri":
        arrays["op.mask"] = op.arrays["mask"]
    elif kind == "multicoil_mri":
        arrays["op.mask"] = op.arrays["mask"]
        arrays["op.smaps"] = op.arrays["smaps"]
    elif kind == "ct":
        spec["num_angles"] = op.spec["num_angles"]
    elif kind == "downsampling":
        spec["factor"] = op.spec["factor"]
        spec["filter"] = op.spec["filter"]
    elif kind == "compressed_sensing":
        arrays["op.sign_mask"] = op.arrays["sign_mask"]
        arrays["op.keep_indices"] = op.arrays["keep_indices"]
    elif kind == "demosaic":
        pass
    else:
        raise ValueError(f"operator kind {kind!r} is not serializable")
    return spec, arrays


def operator_from_spec(spec: dict, arrays: dict | None = None) -> ops.OperatorHandle:
    arrays = arrays or {}
    kind = spec["kind"]
    shape = tuple(spec["domain_shape"])
    if kind == "identity":
        return ops.identity_operator(shape)
    if kind == "blur":
        return ops.make_blur(ops.BlurKernel(arrays["op.kernel"]), shape)
    if kind == "inpainting":
        return ops.make_inpainting(arrays["op.mask"])
    if kind == "mri":
        return ops.make_mri(arrays["op.mask"], shape)
    if kind == "multicoil_mri":
        return ops.make_multicoil_mri(arrays["op.mask"], arrays["op.smaps"], shape)
    if kind == "ct":
        return ops.make_ct_radon(int(spec["num_angles"]), shape)
    if kind == "downsampling":
        return ops.make_downsampling(int(spec["factor"]), spec["filter"], shape)
    if kind == "compressed_sensing":
        keep = np.asarray(arrays["op.keep_indices"], dtype=np.int64)
        return ops.make_compressed_sensing(arrays["op.sign_mask"], keep, shape)
    if kind == "demosaic":
        return ops.make_demosaic(shape)
    raise ValueError(f"unknown operator kind {kind!r}")


def save_instance(path, inst: ProblemInstance) -> None:
    """Write a JSON manifest plus a sibling TNSR data file."""
    path = str(path)
    data_path = os.path.splitext(path)[0] + ".tnsr"
    op_spec, arrays = operator_to_spec(inst.op)
    entries = dict(arrays)
    entries["y"] = inst.y
    if inst.x is not None:
        entries["x"] = inst.x
    manifest = {
        "operator": op_spec,
        "noise": inst.noise.to_dict(),
        "seed": inst.seed,
        "data": os.path.basename(data_path),
        "has_ground_truth": inst.x is not None,
    }
    tnsr.save_tensors(data_path, entries)
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_instance(path) -> ProblemInstance:
    path = str(path)
    with open(path) as fh:
        manifest = json.load(fh)
    data_path = os.path.join(os.path.dirname(path) or ".", manifest["data"])
    entries = tnsr.load_tensors(data_path)
    op = operator_from_spec(manifest["operator"], entries)
    y = entries["y"]
    if y.shape != op.range_shape:
        raise ValueError("measurement shape inconsistent with operator spec")
    x = entries.get("x")
    if x is not None and x.shape != op.domain_shape:
        raise ValueError("ground-truth shape inconsistent with operator spec")
    return ProblemInstance(
        op=op, y=y, noise=NoiseParams.from_dict(manifest["noise"]),
        x=x, seed=int(manifest.get("seed", 0)), spec=manifest["operator"],
    )
