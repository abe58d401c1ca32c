"""Numerical substrate: autodiff, fused ops, Jacobi eigensolver, PSD powers."""
from . import ops
from .autodiff import ContractError, TensorNode, backward, no_grad
from .gradcheck import grad_check
from .linalg import SymEigResult, psd_inv_sqrt, psd_sqrt, sym_eig

__all__ = [
    "ContractError",
    "SymEigResult",
    "TensorNode",
    "backward",
    "grad_check",
    "no_grad",
    "ops",
    "psd_inv_sqrt",
    "psd_sqrt",
    "sym_eig",
]
