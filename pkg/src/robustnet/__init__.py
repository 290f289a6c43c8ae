"""Worst-case (min-max) training of small feed-forward nets, perturbation
generators for l1/l2/linf/tangent uncertainty sets, an attack/evaluation
harness, and numerical certificates for the robust least-squares
regularization identities."""

from . import attacks, data, nn, perturb, ro_equivalence, tensor_ops, training

__all__ = ["attacks", "data", "nn", "perturb", "ro_equivalence", "tensor_ops", "training"]
__version__ = "0.1.0"
