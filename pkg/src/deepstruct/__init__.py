"""Deep structured prediction: neural potentials, region-graph inference, blended learning."""
from __future__ import annotations

import os

# DEEPSTRUCT_THREADS caps BLAS worker threads (0 or unset = library default);
# it must be applied before numpy loads its BLAS.
_threads = os.environ.get("DEEPSTRUCT_THREADS", "").strip()
if _threads and _threads != "0":
    if not _threads.isdigit():
        raise ValueError(f"DEEPSTRUCT_THREADS must be a non-negative integer, got {_threads!r}")
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = _threads

from .compute_graph import ComputationGraph, GradientStore, ParameterStore, backward, forward  # noqa: E402
from .config import ModelSpecDoc, instantiate, parse, serialize  # noqa: E402
from .data import Dataset, DatasetSpec, generate_dataset, read_dataset, write_dataset  # noqa: E402
from .inference import MessageSet, dual_objective, message_pass, run_to_convergence  # noqa: E402
from .learning import TrainConfig, evaluate, run_strategy, train_blended, train_double_loop  # noqa: E402
from .region_graph import RegionGraph, build_chain_model, build_potential_model  # noqa: E402

__version__ = "0.1.0"
