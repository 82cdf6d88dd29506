"""Serverless decentralized federated learning with distilled synthetic
anchors: local distillation, anchor exchange, and round-based training with
cross-entropy, anchor-regularization, and knowledge-distillation losses.
"""

from .data import ClientData, Dataset, SuiteConfig, dirichlet_partition, generate_suite
from .distill import AnchorSet, DistillConfig, DPConfig, distill, distill_dp, merge_anchors
from .evaluation import accuracy, bound_probe, comm_audit, evaluate_all
from .losses import LossBatch, ce_loss, kd_loss, reg_loss, total_loss
from .models import ArchSpec, Model, init_model, make_arch, sgd_step
from .protocol import RunConfig, Topology, run_experiment

__version__ = "0.1.0"
