"""Kronecker-factored adapters for parameter-efficient fine-tuning."""

from kpft.config import RunConfig, load_config, parse_config, serialize_config
from kpft.layers import AdapterSpec, materialize_w, phm_apply
from kpft.model import T5_BASE, ModelGeometry, build, forward
from kpft.parambudget import audit, audit_method
from kpft.train import run_training

__version__ = "0.1.0"

__all__ = [
    "AdapterSpec",
    "ModelGeometry",
    "RunConfig",
    "T5_BASE",
    "audit",
    "audit_method",
    "build",
    "forward",
    "load_config",
    "materialize_w",
    "parse_config",
    "phm_apply",
    "run_training",
    "serialize_config",
]
