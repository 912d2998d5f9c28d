"""warpvos: flow-warped mask propagation with transformer refinement."""

__version__ = "0.1.0"
