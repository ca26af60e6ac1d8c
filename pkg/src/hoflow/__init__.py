"""Hand + object pose refinement from sparse 3D keyframes and a
differentiable photometric consistency loss between nearby frames."""

__version__ = "0.1.0"
