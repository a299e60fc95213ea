"""textsplat: text-conditioned 3D Gaussian splat generation at desk scale.

A fixed anchor lattice is deformed by a text-guided cross-attention
network into Gaussian centers; a text-guided triplane supplies per-center
features; a decoder emits the remaining Gaussian attributes; a
differentiable software splatter closes the loop for score-distillation
style training against a pluggable guidance model.
"""

__version__ = "0.1.0"
