"""r3d: a 3D imitation-learning policy built from scratch on numpy.

Point clouds go in, action chunks come out. The stack is a LayerNorm-only
transformer encoder over point-cloud patches, a diffusion transformer that
denoises joint-space action chunks (with an auxiliary end-effector branch
behind a causal mask), and a small reverse-mode autodiff engine underneath.
A synthetic tabletop environment provides demos and evaluation.

Submodules are imported explicitly (`import r3d.policy`); this module stays
light so the CLI can configure threading before numpy loads.
"""

__version__ = "0.1.0"
