"""reconkit: a desk-scale toolkit for linear imaging inverse problems.

Physics operators with exact adjoints, a minimal autodiff engine, a
physics-conditioned reconstruction network with Krylov subspace
conditioning, supervised multi-task training, self-supervised finetuning
losses, and equivariant-bootstrap uncertainty quantification.
"""

__version__ = "0.1.0"
