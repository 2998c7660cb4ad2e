"""
Self-supervised finetuning from measurements alone: SURE handles the
noise, equivariant imaging handles the nullspace.
"""

import numpy as np

from reconkit import operators as ops
from reconkit import train as tr
from reconkit.metrics import psnr
from reconkit.model import RamConfig, RamModel
from reconkit.noise import NoiseParams, sample_noise
from reconkit.problem import ProblemInstance
from reconkit.selfsup import FinetuneConfig, finetune

## A compressed-sensing problem: random signs, orthonormal transform,
## keep one measurement in four
shape = (1, 32, 32)
sign, keep = ops.make_cs_pattern(shape, 4, seed=0)
op = ops.make_compressed_sensing(sign, keep, shape)
noise = NoiseParams(sigma=0.05)

imgs = tr.make_synthetic_dataset("piecewise-constant", 6, shape, seed=1)
insts = []
for i, x in enumerate(imgs):
    y, _ = sample_noise(op.apply(x), noise, seed=10 + i)
    insts.append(ProblemInstance(op=op, y=y, noise=noise, x=x))

## One measurement to adapt on, the rest held out for evaluation
adapt, held_out = insts[:1], insts[1:]

model = RamModel(RamConfig(num_scales=1, base_width=8, blocks=1,
                           krylov_depth=2, head_channels=(1,), seed=2))


def held_out_psnr():
    return np.mean([psnr(t.x, model.reconstruct(t.y, t.op, t.noise))
                    for t in held_out])


print("before finetuning:", round(held_out_psnr(), 2), "dB")

## No ground truth is used: SURE measurement consistency + EI nullspace
cfg = FinetuneConfig(mc_loss="sure", null_loss="ei", omega=0.1,
                     steps=120, lr=2e-3, seed=3)
report = finetune(model, adapt, cfg)
print("after finetuning: ", round(held_out_psnr(), 2), "dB",
      f"(best self-supervised loss at step {report['best_step']})")
