"""Deterministic batch speculative decoding with ragged-tensor realignment."""

from batchspec.exspec import exspec_decode
from batchspec.faults import FaultMode, run_with_fault
from batchspec.spec_core import DecodeParams, baseline_decode, eqspec_decode, reference_outputs
from batchspec.toy_lm import (
    EOS,
    PAD,
    ForwardOutput,
    LayerKV,
    Model,
    ModelConfig,
    forward,
    greedy_next,
    init_model,
)

__all__ = [
    "DecodeParams",
    "EOS",
    "FaultMode",
    "ForwardOutput",
    "LayerKV",
    "Model",
    "ModelConfig",
    "PAD",
    "baseline_decode",
    "eqspec_decode",
    "exspec_decode",
    "forward",
    "greedy_next",
    "init_model",
    "reference_outputs",
    "run_with_fault",
]

__version__ = "0.1.0"
